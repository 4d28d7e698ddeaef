#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include <json.hpp>

#include "mindloop/checkpoint.hpp"
#include "mindloop/encoders.hpp"
#include "mindloop/errors.hpp"
#include "mindloop/ops.hpp"
#include "mindloop/tensor.hpp"

namespace mindloop {

/// β/α/ᾱ for t = 1..T. Index 0 of alpha_bar() is the clean state (ᾱ_0 = 1).
class NoiseSchedule {
 public:
  NoiseSchedule() = default;
  // Zero betas are accepted here so tests can build an identity schedule.
  static NoiseSchedule from_betas(std::vector<double> betas);

  std::size_t steps() const { return beta_.size(); }
  double beta(std::size_t t) const { return beta_.at(t - 1); }
  double alpha(std::size_t t) const { return 1.0 - beta(t); }
  double alpha_bar(std::size_t t) const { return alpha_bar_.at(t); }
  const std::vector<double>& betas() const { return beta_; }

 private:
  std::vector<double> beta_;
  std::vector<double> alpha_bar_;
};

NoiseSchedule make_schedule(std::size_t T, double beta_min, double beta_max);

// z_t = sqrt(ᾱ_t) z + sqrt(1 - ᾱ_t) eps
Tensor forward_diffuse(const Tensor& z, const NoiseSchedule& schedule, std::size_t t, const Tensor& eps);

// softmax(Q Kᵀ / sqrt(d_k)) V with Q = phi W_Q, K = c W_K, V = c W_V.
// phi: n_q×d_m, c: S×E, W_Q: d_m×d_k, W_K: E×d_k, W_V: E×d_v.
Tensor cross_attention(const Tensor& phi, const Tensor& c, const Tensor& wq, const Tensor& wk, const Tensor& wv,
                       Tensor* weights = nullptr);

struct DenoiserConfig {
  std::size_t latent_channels = 4;
  std::size_t latent_size = 8;
  std::size_t cond_tokens = 8;
  std::size_t cond_dim = 32;
  std::size_t steps = 50;  // T, size of the timestep table
  std::size_t hidden = 16;
  std::size_t bottleneck = 32;
  std::size_t key_dim = 16;
};

void to_json(nlohmann::json& j, const DenoiserConfig& c);
void from_json(const nlohmann::json& j, DenoiserConfig& c);

/// Noise predictor eps_theta(z_t, t, c): conv down to a bottleneck, timestep
/// embedding added there, one cross-attention block on c, conv back up with a
/// skip connection.
class Denoiser {
 public:
  Denoiser(DenoiserConfig config, std::uint64_t seed);

  // `attention`, when given, receives the n_q×S attention weights.
  Tensor predict(const Tensor& z_t, std::size_t t, const Tensor& c, Tensor* attention = nullptr) const;

  const DenoiserConfig& config() const { return config_; }
  Shape latent_shape() const { return {config_.latent_channels, config_.latent_size, config_.latent_size}; }
  NamedTensors parameters() const;
  void save(const std::filesystem::path& path) const;
  static Denoiser load(const std::filesystem::path& path);

 private:
  DenoiserConfig config_;
  Tensor in_w_, in_b_, down_w_, down_b_, time_table_, wq_, wk_, wv_, mid_w_, mid_b_, up_w_, up_b_, out_w_, out_b_;
};

struct DenoiserTraining {
  std::size_t epochs = 30;
  double lr = 2e-3;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
};

struct DenoiserResult {
  Denoiser model;
  std::vector<double> step_loss;  // minibatch loss per optimizer step
};

// latents[i] and conds[i] are the clean latent and the text embedding of one
// training stimulus.
DenoiserResult train_denoiser(const std::vector<Tensor>& latents, const std::vector<Tensor>& conds,
                              const NoiseSchedule& schedule, const DenoiserConfig& config,
                              const DenoiserTraining& opts);

// Evenly spaced decreasing timesteps starting at T, e.g. 50,45,...,5 for
// T=50 and 10 steps. Sampling always finishes at t = 0.
std::vector<std::size_t> sampling_timesteps(std::size_t T, std::size_t steps);

// One deterministic DDIM update from t to t_prev given the predicted noise.
Tensor ddim_step(const Tensor& z_t, const Tensor& eps_hat, const NoiseSchedule& schedule, std::size_t t,
                 std::size_t t_prev);

// `predict_eps(z_t, t)` may be any noise predictor; tests pass an oracle.
template <class PredictEps>
Tensor reverse_sample(const Tensor& z_T, const NoiseSchedule& schedule, const std::vector<std::size_t>& timesteps,
                      PredictEps&& predict_eps) {
  Tensor z = z_T;
  for (std::size_t i = 0; i < timesteps.size(); ++i) {
    const std::size_t t = timesteps[i];
    const std::size_t t_prev = i + 1 < timesteps.size() ? timesteps[i + 1] : 0;
    z = ddim_step(z, predict_eps(z, t), schedule, t, t_prev);
  }
  return z;
}

struct Generation {
  Tensor z_T, z_0, image;
};

/// Stage-1 generator: forward diffuse z to step T, sample back under c,
/// decode. Differentiable in (c, z).
struct Generator {
  const LatentAutoencoder* autoencoder = nullptr;
  const Denoiser* denoiser = nullptr;
  NoiseSchedule schedule;
  std::size_t reverse_steps = 10;

  Generation generate(const Tensor& c, const Tensor& z, const Tensor& eps) const;
  Tensor sample_latent(const Tensor& z_T, const Tensor& c) const;
};

}  // namespace mindloop
