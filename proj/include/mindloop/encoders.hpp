#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <span>
#include <vector>

#include <json.hpp>

#include "mindloop/checkpoint.hpp"
#include "mindloop/tensor.hpp"

namespace mindloop {

/// Token-embedding lookup producing an S_max x E matrix, zero padded.
class TextEncoder {
 public:
  TextEncoder(std::size_t vocab_size, std::size_t embed_dim, std::size_t max_tokens, std::uint64_t seed);

  Tensor encode(std::span<const int> tokens) const;

  std::size_t vocab_size() const { return table_.dim(0); }
  std::size_t embed_dim() const { return table_.dim(1); }
  std::size_t max_tokens() const { return max_tokens_; }
  Shape output_shape() const { return {max_tokens_, embed_dim()}; }
  const Tensor& table() const { return table_; }

 private:
  Tensor table_;
  std::size_t max_tokens_;
};

inline Tensor encode_text(const TextEncoder& enc, std::span<const int> tokens) { return enc.encode(tokens); }

struct VisualEncoderConfig {
  std::vector<std::size_t> channels{8, 8, 16, 16, 32, 32};
  std::vector<std::size_t> strides{2, 1, 2, 1, 2, 2};
  std::set<int> low_level_layers{1, 2, 3};
  std::set<int> embed_layers{1, 2, 3};  // pooled into the final embedding
};

void to_json(nlohmann::json& j, const VisualEncoderConfig& c);
void from_json(const nlohmann::json& j, VisualEncoderConfig& c);

using LayerFeatures = std::map<int, Tensor>;

/// Fixed, seeded random convolutional feature hierarchy standing in for a
/// pretrained visual branch. Layers are numbered from 1. The final embedding
/// concatenates the spatial means of `embed_layers`, so E_f is the sum of
/// their channel counts.
class VisualEncoder {
 public:
  VisualEncoder(std::size_t image_channels, VisualEncoderConfig config, std::uint64_t seed);

  // Flattened activations of the requested layers. Differentiable in `image`.
  LayerFeatures encode(const Tensor& image, const std::set<int>& layers) const;
  Tensor embed(const Tensor& image) const;

  int num_layers() const { return static_cast<int>(stages_.size()); }
  std::size_t embed_dim() const;
  const VisualEncoderConfig& config() const { return config_; }
  std::size_t layer_dim(int layer, std::size_t image_size) const;

 private:
  struct Stage {
    Tensor weight, bias;
    std::size_t stride;
  };
  VisualEncoderConfig config_;
  std::vector<Stage> stages_;
};

inline LayerFeatures encode_visual(const VisualEncoder& enc, const Tensor& image, const std::set<int>& layers) {
  return enc.encode(image, layers);
}

/// Convolutional autoencoder: image (C x H x W) <-> latent (C_z x H/4 x W/4).
/// Latents are rescaled to unit variance over the training images.
class LatentAutoencoder {
 public:
  LatentAutoencoder(std::size_t image_channels, std::size_t image_size, std::size_t latent_channels, std::uint64_t seed);

  Tensor encode(const Tensor& image) const;
  Tensor decode(const Tensor& latent) const;

  Shape latent_shape() const { return {latent_channels_, image_size_ / 4, image_size_ / 4}; }
  Shape image_shape() const { return {image_channels_, image_size_, image_size_}; }
  double latent_scale() const { return latent_scale_; }
  void set_latent_scale(double s) { latent_scale_ = s; }
  // Output logits start at logit(mean pixel) per channel.
  void init_output_bias(std::span<const double> channel_mean);

  NamedTensors parameters() const;
  void save(const std::filesystem::path& path) const;
  static LatentAutoencoder load(const std::filesystem::path& path);

 private:
  Tensor encode_raw(const Tensor& image) const;

  std::size_t image_channels_, image_size_, latent_channels_;
  double latent_scale_ = 1.0;
  Tensor e1w_, e1b_, e2w_, e2b_, e3w_, e3b_;
  Tensor d1w_, d1b_, d2w_, d2b_, d3w_, d3b_, d4w_, d4b_;
};

struct AutoencoderTraining {
  std::size_t epochs = 12;
  double lr = 1e-3;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
};

struct AutoencoderResult {
  LatentAutoencoder model;
  std::vector<double> epoch_mse;  // entry 0 is the untrained model
};

AutoencoderResult train_autoencoder(const std::vector<Tensor>& images, std::size_t latent_channels,
                                    const AutoencoderTraining& opts);
double reconstruction_mse(const LatentAutoencoder& ae, const std::vector<Tensor>& images);

}  // namespace mindloop
