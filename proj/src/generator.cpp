#include "mindloop/generator.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mindloop/optim.hpp"
#include "mindloop/random.hpp"

namespace mindloop {

NoiseSchedule NoiseSchedule::from_betas(std::vector<double> betas) {
  if (betas.empty()) throw ConfigError("noise schedule: need at least one step");
  NoiseSchedule s;
  s.alpha_bar_.reserve(betas.size() + 1);
  s.alpha_bar_.push_back(1.0);
  for (double b : betas) {
    if (!(b >= 0.0 && b < 1.0)) throw ConfigError("noise schedule: beta must lie in [0, 1)");
    s.alpha_bar_.push_back(s.alpha_bar_.back() * (1.0 - b));
  }
  s.beta_ = std::move(betas);
  return s;
}

NoiseSchedule make_schedule(std::size_t T, double beta_min, double beta_max) {
  if (T < 1) throw ConfigError("make_schedule: T must be at least 1");
  if (!(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0))
    throw ConfigError("make_schedule: need 0 < beta_min <= beta_max < 1");
  std::vector<double> betas(T, beta_min);
  for (std::size_t i = 1; i < T; ++i)
    betas[i] = beta_min + (beta_max - beta_min) * static_cast<double>(i) / static_cast<double>(T - 1);
  return NoiseSchedule::from_betas(std::move(betas));
}

Tensor forward_diffuse(const Tensor& z, const NoiseSchedule& schedule, std::size_t t, const Tensor& eps) {
  if (z.shape() != eps.shape())
    throw ContractError("forward_diffuse: eps shape " + to_string(eps.shape()) + " != z shape " + to_string(z.shape()));
  if (t > schedule.steps()) throw ContractError("forward_diffuse: t beyond schedule");
  const double ab = schedule.alpha_bar(t);
  return scale(z, std::sqrt(ab)) + scale(eps, std::sqrt(1.0 - ab));
}

Tensor cross_attention(const Tensor& phi, const Tensor& c, const Tensor& wq, const Tensor& wk, const Tensor& wv,
                       Tensor* weights) {
  if (phi.rank() != 2 || c.rank() != 2 || wq.rank() != 2 || wk.rank() != 2 || wv.rank() != 2)
    throw ContractError("cross_attention: all operands must be matrices");
  if (wq.dim(0) != phi.dim(1) || wk.dim(0) != c.dim(1) || wv.dim(0) != c.dim(1) || wq.dim(1) != wk.dim(1))
    throw ContractError("cross_attention: inconsistent projection shapes");
  const Tensor q = matmul(phi, wq);
  const Tensor k = matmul(c, wk);
  const Tensor v = matmul(c, wv);
  const double inv = 1.0 / std::sqrt(static_cast<double>(wq.dim(1)));
  const Tensor w = softmax(scale(matmul(q, transpose(k)), inv), 1);
  if (weights) *weights = w;
  return matmul(w, v);
}

// ---------------------------------------------------------------------------

void to_json(nlohmann::json& j, const DenoiserConfig& c) {
  j = {{"latent_channels", c.latent_channels},
       {"latent_size", c.latent_size},
       {"cond_tokens", c.cond_tokens},
       {"cond_dim", c.cond_dim},
       {"steps", c.steps},
       {"hidden", c.hidden},
       {"bottleneck", c.bottleneck},
       {"key_dim", c.key_dim}};
}

void from_json(const nlohmann::json& j, DenoiserConfig& c) {
  DenoiserConfig d;
  c.latent_channels = j.value("latent_channels", d.latent_channels);
  c.latent_size = j.value("latent_size", d.latent_size);
  c.cond_tokens = j.value("cond_tokens", d.cond_tokens);
  c.cond_dim = j.value("cond_dim", d.cond_dim);
  c.steps = j.value("steps", d.steps);
  c.hidden = j.value("hidden", d.hidden);
  c.bottleneck = j.value("bottleneck", d.bottleneck);
  c.key_dim = j.value("key_dim", d.key_dim);
}

namespace {

Tensor conv_init(std::size_t out, std::size_t in, Rng& rng, double gain = 1.0) {
  return Tensor::randn({out, in, 3, 3}, rng, gain * std::sqrt(2.0 / static_cast<double>(in * 9)));
}

Tensor dense_init(std::size_t in, std::size_t out, Rng& rng) {
  return Tensor::randn({in, out}, rng, 1.0 / std::sqrt(static_cast<double>(in)));
}

}  // namespace

Denoiser::Denoiser(DenoiserConfig config, std::uint64_t seed) : config_(config) {
  const auto& c = config_;
  if (c.latent_size % 2 != 0 || c.latent_size < 2) throw ConfigError("Denoiser: latent size must be even");
  if (c.steps < 1 || c.latent_channels == 0 || c.cond_dim == 0 || c.hidden == 0 || c.bottleneck == 0 || c.key_dim == 0)
    throw ConfigError("Denoiser: sizes must be positive");
  Rng rng(seed);
  in_w_ = conv_init(c.hidden, c.latent_channels, rng), in_b_ = Tensor::zeros({c.hidden});
  down_w_ = conv_init(c.bottleneck, c.hidden, rng), down_b_ = Tensor::zeros({c.bottleneck});
  time_table_ = Tensor::randn({c.steps, c.bottleneck}, rng, 0.1);
  wq_ = dense_init(c.bottleneck, c.key_dim, rng);
  wk_ = dense_init(c.cond_dim, c.key_dim, rng);
  wv_ = dense_init(c.cond_dim, c.bottleneck, rng);
  mid_w_ = conv_init(c.bottleneck, c.bottleneck, rng), mid_b_ = Tensor::zeros({c.bottleneck});
  up_w_ = conv_init(c.hidden, c.bottleneck + c.hidden, rng), up_b_ = Tensor::zeros({c.hidden});
  out_w_ = conv_init(c.latent_channels, c.hidden, rng, 0.1), out_b_ = Tensor::zeros({c.latent_channels});
}

Tensor Denoiser::predict(const Tensor& z_t, std::size_t t, const Tensor& c, Tensor* attention) const {
  const auto& cf = config_;
  if (z_t.shape() != latent_shape()) throw ShapeError("denoiser: latent shape " + to_string(z_t.shape()));
  if (c.shape() != Shape{cf.cond_tokens, cf.cond_dim}) throw ShapeError("denoiser: condition shape " + to_string(c.shape()));
  if (t < 1 || t > cf.steps) throw ContractError("denoiser: timestep " + std::to_string(t) + " out of range");

  const std::size_t half = cf.latent_size / 2;
  const std::size_t n = half * half;
  const Tensor h1 = leaky_relu(conv2d(z_t, in_w_, in_b_, 1, 1));
  const Tensor h2 = leaky_relu(conv2d(h1, down_w_, down_b_, 2, 1));

  const Tensor temb = reshape(slice(time_table_, 0, t - 1, t), {cf.bottleneck, 1});
  const Tensor hm = reshape(h2, {cf.bottleneck, n}) + matmul(temb, Tensor::ones({1, n}));
  const Tensor att = cross_attention(transpose(hm), c, wq_, wk_, wv_, attention);
  const Tensor h = hm + transpose(att);

  const Tensor m = leaky_relu(conv2d(reshape(h, {cf.bottleneck, half, half}), mid_w_, mid_b_, 1, 1));
  const Tensor u = leaky_relu(conv2d(concat({upsample_nearest(m, 2), h1}, 0), up_w_, up_b_, 1, 1));
  return conv2d(u, out_w_, out_b_, 1, 1);
}

NamedTensors Denoiser::parameters() const {
  return {{"in.w", in_w_},   {"in.b", in_b_},     {"down.w", down_w_}, {"down.b", down_b_}, {"time", time_table_},
          {"attn.q", wq_},   {"attn.k", wk_},     {"attn.v", wv_},     {"mid.w", mid_w_},   {"mid.b", mid_b_},
          {"up.w", up_w_},   {"up.b", up_b_},     {"out.w", out_w_},   {"out.b", out_b_}};
}

void Denoiser::save(const std::filesystem::path& path) const {
  save_checkpoint(path, {{"kind", "denoiser"}, {"config", config_}}, parameters());
}

Denoiser Denoiser::load(const std::filesystem::path& path) {
  const Checkpoint ckpt = load_checkpoint(path);
  if (ckpt.header.value("kind", "") != "denoiser") throw FormatError(path.string() + " is not a denoiser checkpoint");
  Denoiser d(ckpt.header.at("config").get<DenoiserConfig>(), 0);
  assign_parameters(ckpt, d.parameters());
  return d;
}

DenoiserResult train_denoiser(const std::vector<Tensor>& latents, const std::vector<Tensor>& conds,
                              const NoiseSchedule& schedule, const DenoiserConfig& config,
                              const DenoiserTraining& opts) {
  if (latents.empty() || latents.size() != conds.size())
    throw ContractError("train_denoiser: need matching, non-empty latents and conditions");
  if (opts.batch_size == 0) throw ConfigError("train_denoiser: batch_size must be positive");
  if (schedule.steps() != config.steps) throw ConfigError("train_denoiser: schedule length differs from config.steps");

  DenoiserResult result{Denoiser(config, derive_seed(opts.seed, "denoiser_init")), {}};
  const auto params = result.model.parameters();
  set_trainable(params, true);
  Adam optimizer(params, opts.lr);
  Rng rng(derive_seed(opts.seed, "denoiser_noise"));
  std::uniform_int_distribution<std::size_t> pick_t(1, schedule.steps());
  auto& tape = Tape::active();

  std::vector<std::size_t> order(latents.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += opts.batch_size) {
      const std::size_t end = std::min(order.size(), start + opts.batch_size);
      Tensor loss;
      try {
        loss = Tensor::scalar(0.0);
        for (std::size_t i = start; i < end; ++i) {
          const Tensor& z = latents[order[i]];
          const std::size_t t = pick_t(rng);
          const Tensor eps = Tensor::randn(z.shape(), rng);
          Tensor z_t;
          {
            NoGradGuard guard;
            z_t = forward_diffuse(z, schedule, t, eps);
          }
          loss = loss + mse(result.model.predict(z_t, t, conds[order[i]]), eps);
        }
        loss = scale(loss, 1.0 / static_cast<double>(end - start));
        backward(loss);
      } catch (const NumericError& e) {
        tape.clear();
        set_trainable(params, false);
        throw NumericError("train_denoiser: diverged in epoch " + std::to_string(epoch + 1) + " (" + e.what() + ")");
      }
      result.step_loss.push_back(loss.item());
      optimizer.step();
      tape.clear();
    }
  }
  set_trainable(params, false);
  return result;
}

std::vector<std::size_t> sampling_timesteps(std::size_t T, std::size_t steps) {
  if (T == 0 || steps == 0) throw ConfigError("sampling_timesteps: T and steps must be positive");
  steps = std::min(steps, T);
  std::vector<std::size_t> out;
  out.reserve(steps);
  for (std::size_t i = 0; i < steps; ++i) out.push_back(T - (i * T) / steps);
  return out;
}

Tensor ddim_step(const Tensor& z_t, const Tensor& eps_hat, const NoiseSchedule& schedule, std::size_t t,
                 std::size_t t_prev) {
  if (t_prev >= t || t > schedule.steps()) throw ContractError("ddim_step: need 0 <= t_prev < t <= T");
  const double ab = schedule.alpha_bar(t);
  const double ab_prev = schedule.alpha_bar(t_prev);
  const Tensor z0 = scale(z_t - scale(eps_hat, std::sqrt(1.0 - ab)), 1.0 / std::sqrt(ab));
  if (t_prev == 0 && ab_prev == 1.0) return z0;
  return scale(z0, std::sqrt(ab_prev)) + scale(eps_hat, std::sqrt(1.0 - ab_prev));
}

Tensor Generator::sample_latent(const Tensor& z_T, const Tensor& c) const {
  const auto steps = sampling_timesteps(schedule.steps(), reverse_steps);
  return reverse_sample(z_T, schedule, steps,
                        [&](const Tensor& z, std::size_t t) { return denoiser->predict(z, t, c); });
}

Generation Generator::generate(const Tensor& c, const Tensor& z, const Tensor& eps) const {
  if (!autoencoder || !denoiser) throw ContractError("generator: models not set");
  Generation g;
  g.z_T = forward_diffuse(z, schedule, schedule.steps(), eps);
  g.z_0 = sample_latent(g.z_T, c);
  g.image = clamp(autoencoder->decode(g.z_0), 0.0, 1.0);
  return g;
}

}  // namespace mindloop
