#include "mindloop/encoders.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mindloop/errors.hpp"
#include "mindloop/ops.hpp"
#include "mindloop/optim.hpp"
#include "mindloop/random.hpp"

namespace mindloop {

namespace {

Tensor he_conv(std::size_t out, std::size_t in, std::size_t k, Rng& rng) {
  return Tensor::randn({out, in, k, k}, rng, std::sqrt(2.0 / static_cast<double>(in * k * k)));
}

}  // namespace

// ---------------------------------------------------------------------------

TextEncoder::TextEncoder(std::size_t vocab_size, std::size_t embed_dim, std::size_t max_tokens, std::uint64_t seed)
    : max_tokens_(max_tokens) {
  if (vocab_size == 0 || embed_dim == 0 || max_tokens == 0) throw ConfigError("TextEncoder: sizes must be positive");
  Rng rng(seed);
  table_ = Tensor::randn({vocab_size, embed_dim}, rng);
}

Tensor TextEncoder::encode(std::span<const int> tokens) const {
  if (tokens.size() > max_tokens_) throw ContractError("encode_text: caption longer than max_tokens");
  const std::size_t e = embed_dim();
  Tensor out({max_tokens_, e});
  auto v = out.values();
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 || static_cast<std::size_t>(tokens[i]) >= vocab_size())
      throw ContractError("encode_text: unknown token " + std::to_string(tokens[i]));
    const auto row = table_.data().subspan(static_cast<std::size_t>(tokens[i]) * e, e);
    std::copy(row.begin(), row.end(), v.begin() + static_cast<std::ptrdiff_t>(i * e));
  }
  return out;
}

// ---------------------------------------------------------------------------

void to_json(nlohmann::json& j, const VisualEncoderConfig& c) {
  j = {{"channels", c.channels},
       {"strides", c.strides},
       {"low_level_layers", c.low_level_layers},
       {"embed_layers", c.embed_layers}};
}

void from_json(const nlohmann::json& j, VisualEncoderConfig& c) {
  VisualEncoderConfig d;
  c.channels = j.value("channels", d.channels);
  c.strides = j.value("strides", d.strides);
  c.low_level_layers = j.value("low_level_layers", d.low_level_layers);
  c.embed_layers = j.value("embed_layers", d.embed_layers);
}

VisualEncoder::VisualEncoder(std::size_t image_channels, VisualEncoderConfig config, std::uint64_t seed)
    : config_(std::move(config)) {
  if (config_.channels.empty() || config_.channels.size() != config_.strides.size())
    throw ConfigError("VisualEncoder: channels and strides must be non-empty and equally long");
  for (int l : config_.low_level_layers)
    if (l < 1 || l > static_cast<int>(config_.channels.size())) throw ConfigError("VisualEncoder: low-level layer out of range");
  if (config_.embed_layers.empty()) throw ConfigError("VisualEncoder: embed_layers must not be empty");
  for (int l : config_.embed_layers)
    if (l < 1 || l > static_cast<int>(config_.channels.size())) throw ConfigError("VisualEncoder: embed layer out of range");
  Rng rng(seed);
  std::size_t in = image_channels;
  for (std::size_t i = 0; i < config_.channels.size(); ++i) {
    const std::size_t out = config_.channels[i];
    stages_.push_back({he_conv(out, in, 3, rng), Tensor::zeros({out}), config_.strides[i]});
    in = out;
  }
}

LayerFeatures VisualEncoder::encode(const Tensor& image, const std::set<int>& layers) const {
  LayerFeatures out;
  if (layers.empty()) return out;
  for (int l : layers)
    if (l < 1 || l > num_layers()) throw ContractError("encode_visual: invalid layer index " + std::to_string(l));
  if (image.rank() != 3) throw ShapeError("encode_visual: image must be C x H x W");
  const int deepest = *layers.rbegin();
  Tensor h = image;
  for (int l = 1; l <= deepest; ++l) {
    const auto& s = stages_[static_cast<std::size_t>(l - 1)];
    h = leaky_relu(conv2d(h, s.weight, s.bias, s.stride, 1));
    if (layers.count(l)) out.emplace(l, flatten(h));
  }
  return out;
}

Tensor VisualEncoder::embed(const Tensor& image) const {
  const LayerFeatures feats = encode(image, config_.embed_layers);
  std::vector<Tensor> pooled;
  for (const auto& [layer, f] : feats) {
    const std::size_t c = config_.channels[static_cast<std::size_t>(layer - 1)];
    pooled.push_back(mean(reshape(f, {c, f.size() / c}), 1));
  }
  return concat(pooled, 0);
}

std::size_t VisualEncoder::embed_dim() const {
  std::size_t n = 0;
  for (int l : config_.embed_layers) n += config_.channels[static_cast<std::size_t>(l - 1)];
  return n;
}

std::size_t VisualEncoder::layer_dim(int layer, std::size_t image_size) const {
  if (layer < 1 || layer > num_layers()) throw ContractError("layer_dim: invalid layer");
  std::size_t n = image_size;
  for (int l = 0; l < layer; ++l) n = (n + 2 - 3) / stages_[static_cast<std::size_t>(l)].stride + 1;
  return config_.channels[static_cast<std::size_t>(layer - 1)] * n * n;
}

// ---------------------------------------------------------------------------

LatentAutoencoder::LatentAutoencoder(std::size_t image_channels, std::size_t image_size, std::size_t latent_channels,
                                     std::uint64_t seed)
    : image_channels_(image_channels), image_size_(image_size), latent_channels_(latent_channels) {
  if (image_size % 4 != 0 || image_size < 8) throw ConfigError("LatentAutoencoder: image size must be a multiple of 4");
  if (latent_channels == 0) throw ConfigError("LatentAutoencoder: latent_channels must be positive");
  Rng rng(seed);
  e1w_ = he_conv(16, image_channels, 3, rng), e1b_ = Tensor::zeros({16});
  e2w_ = he_conv(32, 16, 3, rng), e2b_ = Tensor::zeros({32});
  e3w_ = he_conv(latent_channels, 32, 3, rng), e3b_ = Tensor::zeros({latent_channels});
  d1w_ = he_conv(32, latent_channels, 3, rng), d1b_ = Tensor::zeros({32});
  d2w_ = he_conv(16, 32, 3, rng), d2b_ = Tensor::zeros({16});
  d3w_ = he_conv(8, 16, 3, rng), d3b_ = Tensor::zeros({8});
  d4w_ = he_conv(image_channels, 8, 3, rng), d4b_ = Tensor::zeros({image_channels});
}

Tensor LatentAutoencoder::encode_raw(const Tensor& image) const {
  if (image.shape() != image_shape()) throw ShapeError("autoencoder: image shape " + to_string(image.shape()));
  Tensor h = leaky_relu(conv2d(image, e1w_, e1b_, 2, 1));
  h = leaky_relu(conv2d(h, e2w_, e2b_, 2, 1));
  return conv2d(h, e3w_, e3b_, 1, 1);
}

Tensor LatentAutoencoder::encode(const Tensor& image) const { return scale(encode_raw(image), latent_scale_); }

Tensor LatentAutoencoder::decode(const Tensor& latent) const {
  if (latent.shape() != latent_shape()) throw ShapeError("autoencoder: latent shape " + to_string(latent.shape()));
  Tensor h = latent_scale_ == 1.0 ? latent : scale(latent, 1.0 / latent_scale_);
  h = leaky_relu(conv2d(h, d1w_, d1b_, 1, 1));
  h = leaky_relu(conv2d(upsample_nearest(h, 2), d2w_, d2b_, 1, 1));
  h = leaky_relu(conv2d(upsample_nearest(h, 2), d3w_, d3b_, 1, 1));
  return sigmoid(conv2d(h, d4w_, d4b_, 1, 1));
}

void LatentAutoencoder::init_output_bias(std::span<const double> channel_mean) {
  if (channel_mean.size() != image_channels_) throw ShapeError("init_output_bias: one mean per channel");
  auto b = d4b_.values();
  for (std::size_t c = 0; c < b.size(); ++c) {
    const double m = std::clamp(channel_mean[c], 1e-3, 1.0 - 1e-3);
    b[c] = std::log(m / (1.0 - m));
  }
}

NamedTensors LatentAutoencoder::parameters() const {
  return {{"enc1.w", e1w_}, {"enc1.b", e1b_}, {"enc2.w", e2w_}, {"enc2.b", e2b_}, {"enc3.w", e3w_},
          {"enc3.b", e3b_}, {"dec1.w", d1w_}, {"dec1.b", d1b_}, {"dec2.w", d2w_}, {"dec2.b", d2b_},
          {"dec3.w", d3w_}, {"dec3.b", d3b_}, {"dec4.w", d4w_}, {"dec4.b", d4b_}};
}

void LatentAutoencoder::save(const std::filesystem::path& path) const {
  nlohmann::json header{{"kind", "latent_autoencoder"},
                        {"image_channels", image_channels_},
                        {"image_size", image_size_},
                        {"latent_channels", latent_channels_},
                        {"latent_scale", latent_scale_}};
  save_checkpoint(path, std::move(header), parameters());
}

LatentAutoencoder LatentAutoencoder::load(const std::filesystem::path& path) {
  const Checkpoint ckpt = load_checkpoint(path);
  const auto& h = ckpt.header;
  if (h.value("kind", "") != "latent_autoencoder") throw FormatError(path.string() + " is not an autoencoder checkpoint");
  LatentAutoencoder ae(h.at("image_channels").get<std::size_t>(), h.at("image_size").get<std::size_t>(),
                       h.at("latent_channels").get<std::size_t>(), 0);
  assign_parameters(ckpt, ae.parameters());
  ae.latent_scale_ = h.at("latent_scale").get<double>();
  return ae;
}

double reconstruction_mse(const LatentAutoencoder& ae, const std::vector<Tensor>& images) {
  if (images.empty()) throw ContractError("reconstruction_mse: no images");
  NoGradGuard guard;
  double total = 0.0;
  for (const auto& img : images) total += mse(ae.decode(ae.encode(img)), img).item();
  return total / static_cast<double>(images.size());
}

AutoencoderResult train_autoencoder(const std::vector<Tensor>& images, std::size_t latent_channels,
                                    const AutoencoderTraining& opts) {
  if (images.empty()) throw ContractError("train_autoencoder: no training images");
  if (opts.batch_size == 0) throw ConfigError("train_autoencoder: batch_size must be positive");
  const Tensor& first = images.front();
  AutoencoderResult result{LatentAutoencoder(first.dim(0), first.dim(1), latent_channels, derive_seed(opts.seed, "ae_init")),
                           {}};
  LatentAutoencoder& ae = result.model;
  {
    const std::size_t channels = first.dim(0), plane = first.size() / channels;
    std::vector<double> channel_mean(channels, 0.0);
    for (const auto& img : images)
      for (std::size_t i = 0; i < img.size(); ++i) channel_mean[i / plane] += img[i];
    for (double& m : channel_mean) m /= static_cast<double>(images.size() * plane);
    ae.init_output_bias(channel_mean);
  }
  const auto params = ae.parameters();
  set_trainable(params, true);
  Adam optimizer(params, opts.lr);
  Rng rng(derive_seed(opts.seed, "ae_order"));
  auto& tape = Tape::active();

  result.epoch_mse.push_back(reconstruction_mse(ae, images));
  std::vector<std::size_t> order(images.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += opts.batch_size) {
      const std::size_t end = std::min(order.size(), start + opts.batch_size);
      try {
        Tensor loss = Tensor::scalar(0.0);
        for (std::size_t i = start; i < end; ++i) {
          const Tensor& img = images[order[i]];
          loss = loss + mse(ae.decode(ae.encode(img)), img);
        }
        backward(scale(loss, 1.0 / static_cast<double>(end - start)));
      } catch (const NumericError& e) {
        tape.clear();
        set_trainable(params, false);
        throw NumericError("train_autoencoder: diverged in epoch " + std::to_string(epoch + 1) + " (" + e.what() + ")");
      }
      optimizer.step();
      tape.clear();
    }
    result.epoch_mse.push_back(reconstruction_mse(ae, images));
  }
  set_trainable(params, false);

  // Unit-variance latents for the diffusion model.
  NoGradGuard guard;
  double sum = 0.0, sq = 0.0;
  std::size_t count = 0;
  for (const auto& img : images) {
    const Tensor z = ae.encode(img);
    for (double v : z.data()) sum += v, sq += v * v, ++count;
  }
  const double m = sum / static_cast<double>(count);
  const double sd = std::sqrt(std::max(sq / static_cast<double>(count) - m * m, 1e-12));
  ae.set_latent_scale(1.0 / sd);
  return result;
}

}  // namespace mindloop
