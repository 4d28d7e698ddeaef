#pragma once

#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "mindloop/encoders.hpp"
#include "mindloop/tensor.hpp"

namespace mindloop {

struct Score {
  double value = 0.0;
  bool degenerate = false;
};

Score cosine_similarity(std::span<const double> a, std::span<const double> b);
// Cosine of the final pooled embeddings.
Score clip_similarity(const Tensor& a, const Tensor& b, const VisualEncoder& encoder);

// Channel-mean grayscale, 8×8 windows at stride 1, L = 1.
double ssim(const Tensor& a, const Tensor& b);
Score pixel_pcc(const Tensor& a, const Tensor& b);

// Rows are samples. Each set needs more rows than columns.
double fid_from_embeddings(const Eigen::Ref<const Eigen::MatrixXd>& a, const Eigen::Ref<const Eigen::MatrixXd>& b);
double fid(const std::vector<Tensor>& set_a, const std::vector<Tensor>& set_b, const VisualEncoder& encoder);

// Nearest-neighbour resize of a C×H×W image to C×size×size.
Tensor resize_nearest(const Tensor& image, std::size_t size);

struct ItemMetrics {
  std::string id;
  double clip_sim = 0.0, ssim = 0.0, pcc = 0.0;
};

struct MetricsReport {
  std::vector<ItemMetrics> items;
  double mean_clip_sim = 0.0, mean_ssim = 0.0, mean_pcc = 0.0;
  std::optional<double> fid;  // absent when a set is smaller than E_f + 1
  std::size_t image_size = 0;
  std::uint64_t encoder_seed = 0;
};

void to_json(nlohmann::json& j, const MetricsReport& r);
void from_json(const nlohmann::json& j, MetricsReport& r);

// Pairs stimuli[i] with reconstructions[i]; both are resized to image_size
// when their shapes differ from it.
MetricsReport evaluate(const std::vector<std::string>& ids, const std::vector<Tensor>& stimuli,
                       const std::vector<Tensor>& reconstructions, const VisualEncoder& encoder,
                       std::uint64_t encoder_seed, std::size_t image_size);

}  // namespace mindloop
