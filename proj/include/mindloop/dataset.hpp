#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "mindloop/tensor.hpp"

namespace mindloop {

enum class Roi : std::uint8_t { LVC, HVC };

std::string_view to_string(Roi roi);
Roi roi_from_string(std::string_view name);

// Selection of ROI groups, e.g. {LVC}, {HVC} or both.
struct RoiSet {
  bool lvc = true;
  bool hvc = true;

  static RoiSet all() { return {true, true}; }
  static RoiSet only(Roi r) { return {r == Roi::LVC, r == Roi::HVC}; }
  static RoiSet parse(std::string_view name);  // "all" | "lvc" | "hvc"
  bool contains(Roi r) const { return r == Roi::LVC ? lvc : hvc; }
  bool empty() const { return !lvc && !hvc; }
  std::string name() const;
};

struct Pose {
  double row = 0.0;
  double col = 0.0;
  double size = 0.0;         // half-extent in pixels
  double orientation = 0.0;  // radians
};

struct StimulusImage {
  Tensor pixels;  // C x H x W in [0,1]
  std::vector<int> caption_tokens;
  int class_id = 0;
  Pose pose;
};

struct BrainResponse {
  Tensor voxels;  // D_x
  std::vector<Roi> roi_labels;
  int trial_count = 1;
};

struct StimulusRecord {
  std::string id;
  StimulusImage image;
  Tensor trials;  // n_trials x D_x

  std::vector<BrainResponse> responses(const std::vector<Roi>& labels) const;
};

struct DatasetConfig {
  std::size_t image_size = 32;
  std::size_t num_classes = 4;
  std::size_t lvc_voxels = 512;
  std::size_t hvc_voxels = 512;
  std::size_t train_count = 512;
  std::size_t test_count = 64;
  double noise = 0.1;  // relative to the unit signal std of each voxel
  std::size_t min_trials = 1;
  std::size_t max_trials = 3;
  std::size_t max_tokens = 8;
  std::size_t lvc_grid = 8;  // LVC voxels see luminance pooled onto grid x grid

  void validate() const;
};

void to_json(nlohmann::json& j, const DatasetConfig& c);
void from_json(const nlohmann::json& j, DatasetConfig& c);

struct Dataset {
  DatasetConfig config;
  std::uint64_t seed = 0;
  std::vector<Roi> roi_labels;
  std::vector<StimulusRecord> train;
  std::vector<StimulusRecord> test;

  std::size_t voxel_count() const { return roi_labels.size(); }
};

// Fixed caption vocabulary: colours, shapes, vertical and horizontal position words.
namespace vocabulary {
const std::vector<std::string>& words();
int token(std::string_view word);
std::string caption_text(std::span<const int> tokens);
std::string class_name(int class_id);
constexpr std::size_t kMaxClasses = 6;
constexpr std::size_t kPoseBins = 3;
}  // namespace vocabulary

Tensor render_stimulus(int class_id, const Pose& pose, std::size_t image_size);
std::vector<int> make_caption(int class_id, const Pose& pose, std::size_t image_size);

Dataset synthesize(const DatasetConfig& config, std::uint64_t seed);

BrainResponse average_trials(std::span<const BrainResponse> responses);
BrainResponse roi_subset(const BrainResponse& response, RoiSet rois);

// Trial-averaged responses of `records` restricted to `rois`, one row per record.
Eigen::MatrixXd response_matrix(const Dataset& data, std::span<const StimulusRecord> records, RoiSet rois);
std::vector<Roi> subset_labels(const std::vector<Roi>& labels, RoiSet rois);

void save_dataset(const Dataset& data, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace mindloop
