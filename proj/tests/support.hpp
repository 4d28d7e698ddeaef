#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "mindloop/encoders.hpp"
#include "mindloop/generator.hpp"
#include "mindloop/ops.hpp"
#include "mindloop/tensor.hpp"

namespace mindloop::testing {

struct GradCase {
  std::string name;
  std::vector<Tensor> inputs;
  std::function<Tensor()> f;
};

inline Tensor rand_pm1(Shape shape, Rng& rng) { return Tensor::uniform(std::move(shape), -1.0, 1.0, rng); }

// Reduces a tensor to a scalar through a fixed random projection so every
// output element carries a distinct weight.
inline std::function<Tensor()> projected(std::function<Tensor()> op, const Shape& out_shape, Rng& rng) {
  const Tensor w = rand_pm1(out_shape, rng);
  return [op = std::move(op), w] { return sum(mul(op(), w)); };
}

// One case per differentiable primitive plus two composites. Inputs are
// uniform in [-1, 1].
inline std::vector<GradCase> primitive_cases(Rng& rng) {
  std::vector<GradCase> cases;
  auto add_case = [&](std::string name, std::vector<Tensor> in, std::function<Tensor()> op, Shape out) {
    cases.push_back({std::move(name), in, projected(std::move(op), out, rng)});
  };
  auto add_scalar_case = [&](std::string name, std::vector<Tensor> in, std::function<Tensor()> f) {
    cases.push_back({std::move(name), std::move(in), std::move(f)});
  };

  {
    Tensor a = rand_pm1({3, 4}, rng), b = rand_pm1({4, 2}, rng);
    add_case("matmul", {a, b}, [=] { return matmul(a, b); }, {3, 2});
  }
  {
    Tensor a = rand_pm1({2, 3}, rng), b = rand_pm1({2, 3}, rng);
    add_case("add", {a, b}, [=] { return add(a, b); }, {2, 3});
    add_case("sub", {a, b}, [=] { return sub(a, b); }, {2, 3});
    add_case("mul", {a, b}, [=] { return mul(a, b); }, {2, 3});
    add_case("scale", {a}, [=] { return scale(a, -1.7); }, {2, 3});
    add_case("add_scalar", {a}, [=] { return add_scalar(a, 0.3); }, {2, 3});
    add_case("reshape", {a}, [=] { return reshape(a, {3, 2}); }, {3, 2});
    add_case("flatten", {a}, [=] { return flatten(a); }, {6});
    add_case("exp", {a}, [=] { return exp(a); }, {2, 3});
    add_case("sigmoid", {a}, [=] { return sigmoid(scale(a, 3.0)); }, {2, 3});
    add_case("leaky_relu", {a}, [=] { return leaky_relu(a); }, {2, 3});
    add_case("clamp", {a}, [=] { return clamp(a, -0.5, 0.5); }, {2, 3});
    add_scalar_case("mse", {a, b}, [=] { return mse(a, b); });
    add_scalar_case("sum_squares", {a}, [=] { return sum_squares(a); });
    add_scalar_case("l2_norm", {a}, [=] { return l2_norm(a); });
    add_scalar_case("sum", {a}, [=] { return sum(mul(a, a)); });
    add_scalar_case("mean", {a}, [=] { return mean(exp(a)); });
  }
  {
    Tensor a = rand_pm1({3, 5}, rng), b = rand_pm1({2, 5}, rng), c = rand_pm1({3, 2}, rng);
    add_case("transpose", {a}, [=] { return transpose(a); }, {5, 3});
    add_case("slice", {a}, [=] { return slice(a, 1, 1, 4); }, {3, 3});
    add_case("concat0", {a, b}, [=] { return concat({a, b}, 0); }, {5, 5});
    add_case("concat1", {a, c}, [=] { return concat({a, c}, 1); }, {3, 7});
    add_case("gather", {a}, [=] { return gather(a, {0, 4, 4, 7, 14}); }, {5});
    add_case("softmax", {a}, [=] { return softmax(scale(a, 2.0), 1); }, {3, 5});
    add_case("softmax0", {a}, [=] { return softmax(a, 0); }, {3, 5});
  }
  {
    Tensor a = rand_pm1({2, 3, 4}, rng);
    add_case("sum_axis", {a}, [=] { return sum(a, 1); }, {2, 4});
    add_case("mean_axis", {a}, [=] { return mean(a, 2); }, {2, 3});
    add_case("upsample_nearest", {a}, [=] { return upsample_nearest(a, 2); }, {2, 6, 8});
  }
  {
    Tensor x = rand_pm1({2, 5, 5}, rng), w = rand_pm1({3, 2, 3, 3}, rng), b = rand_pm1({3}, rng);
    add_case("conv2d_s2p1", {x, w, b}, [=] { return conv2d(x, w, b, 2, 1); }, {3, 3, 3});
    add_case("conv2d_s1p0", {x, w, b}, [=] { return conv2d(x, w, b, 1, 0); }, {3, 3, 3});
  }
  {
    Tensor phi = rand_pm1({3, 4}, rng), c = rand_pm1({2, 5}, rng);
    Tensor wq = rand_pm1({4, 3}, rng), wk = rand_pm1({5, 3}, rng), wv = rand_pm1({5, 4}, rng);
    add_case("cross_attention", {phi, c, wq, wk, wv}, [=] { return cross_attention(phi, c, wq, wk, wv); }, {3, 4});
  }
  {
    Tensor a = rand_pm1({3, 4}, rng), b = rand_pm1({4, 3}, rng);
    const Tensor target = softmax(rand_pm1({3, 3}, rng), 1);
    add_scalar_case("matmul_softmax_mse", {a, b}, [=] { return mse(softmax(matmul(a, b), 1), target); });
  }
  return cases;
}

// A deliberately tiny generator for gradient checks of the whole
// forward-diffuse / reverse-sample / decode chain.
struct TinyGenerator {
  std::unique_ptr<LatentAutoencoder> autoencoder;
  std::unique_ptr<Denoiser> denoiser;
  Generator generator;
  Shape cond_shape;
};

inline TinyGenerator make_tiny_generator(std::uint64_t seed, std::size_t steps = 2) {
  TinyGenerator g;
  g.autoencoder = std::make_unique<LatentAutoencoder>(3, 8, 2, seed);
  DenoiserConfig dc;
  dc.latent_channels = 2;
  dc.latent_size = 2;
  dc.cond_tokens = 3;
  dc.cond_dim = 4;
  dc.steps = steps;
  dc.hidden = 4;
  dc.bottleneck = 6;
  dc.key_dim = 3;
  g.denoiser = std::make_unique<Denoiser>(dc, seed + 1);
  g.generator = Generator{g.autoencoder.get(), g.denoiser.get(), make_schedule(steps, 0.1, 0.3), steps};
  g.cond_shape = {dc.cond_tokens, dc.cond_dim};
  return g;
}

}  // namespace mindloop::testing

#include <Eigen/LU>

namespace mindloop::testing {

// Dense normal-equation ridge on centred data with all voxels selected;
// one weight column per target.
inline Eigen::MatrixXd ridge_oracle(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y, double lambda) {
  const Eigen::MatrixXd xc = x.rowwise() - x.colwise().mean();
  const Eigen::MatrixXd yc = y.rowwise() - y.colwise().mean();
  const Eigen::MatrixXd a = xc.transpose() * xc + lambda * Eigen::MatrixXd::Identity(x.cols(), x.cols());
  return a.fullPivLu().solve(xc.transpose() * yc);
}

inline Eigen::MatrixXd random_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = dist(rng);
  return m;
}

}  // namespace mindloop::testing

#include <algorithm>
#include <cmath>
#include <span>

#include <Eigen/Eigenvalues>
#include <Eigen/QR>

#include "mindloop/aligner.hpp"
#include "mindloop/dataset.hpp"

namespace mindloop::testing {

// Rendered shape plus uniform speckle, clipped to [0, 1].
inline Tensor fixture_image(int class_id, double row, double col, double size, std::uint64_t noise_seed) {
  Tensor img = render_stimulus(class_id, {row, col, size, 0.4}, 32);
  Rng rng(noise_seed);
  std::uniform_real_distribution<double> u(0.0, 0.2);
  for (auto& x : img.values()) x = std::min(1.0, x + u(rng));
  return img;
}

// Scalar-loop references, no Eigen.
inline double ssim_oracle(const Tensor& a, const Tensor& b) {
  const std::size_t c = a.dim(0), h = a.dim(1), w = a.dim(2);
  std::vector<double> ga(h * w, 0.0), gb(h * w, 0.0);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < h * w; ++i) ga[i] += a[ch * h * w + i] / c, gb[i] += b[ch * h * w + i] / c;
  const double c1 = 0.0001, c2 = 0.0009;
  double total = 0.0;
  int count = 0;
  for (std::size_t r = 0; r + 8 <= h; ++r)
    for (std::size_t q = 0; q + 8 <= w; ++q) {
      double mx = 0, my = 0;
      for (std::size_t y = r; y < r + 8; ++y)
        for (std::size_t x = q; x < q + 8; ++x) mx += ga[y * w + x], my += gb[y * w + x];
      mx /= 64, my /= 64;
      double vx = 0, vy = 0, cxy = 0;
      for (std::size_t y = r; y < r + 8; ++y)
        for (std::size_t x = q; x < q + 8; ++x) {
          const double dx = ga[y * w + x] - mx, dy = gb[y * w + x] - my;
          vx += dx * dx, vy += dy * dy, cxy += dx * dy;
        }
      vx /= 64, vy /= 64, cxy /= 64;
      total += (2 * mx * my + c1) * (2 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
      ++count;
    }
  return total / count;
}

inline double cosine_oracle(std::span<const double> a, std::span<const double> b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) ab += a[i] * b[i], aa += a[i] * a[i], bb += b[i] * b[i];
  return ab / std::sqrt(aa * bb);
}

inline double pcc_oracle(std::span<const double> a, std::span<const double> b) {
  const double n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) ma += a[i], mb += b[i];
  ma /= n, mb /= n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    sab += (a[i] - ma) * (b[i] - mb), saa += (a[i] - ma) * (a[i] - ma), sbb += (b[i] - mb) * (b[i] - mb);
  return sab / std::sqrt(saa * sbb);
}

// Trace of (Σa Σb)^{1/2} from the eigenvalues of the non-symmetric product.
inline double fid_oracle(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  auto cov = [](const Eigen::MatrixXd& x) {
    const Eigen::MatrixXd c = x.rowwise() - x.colwise().mean();
    return Eigen::MatrixXd(c.transpose() * c / static_cast<double>(x.rows() - 1));
  };
  const Eigen::MatrixXd sa = cov(a), sb = cov(b);
  Eigen::EigenSolver<Eigen::MatrixXd> es(sa * sb);
  double tr = 0.0;
  for (auto ev : es.eigenvalues()) tr += std::sqrt(std::max(ev.real(), 0.0));
  const Eigen::VectorXd d = a.colwise().mean() - b.colwise().mean();
  return d.squaredNorm() + sa.trace() + sb.trace() - 2.0 * tr;
}

// image = A z + B c through an identity encoder with 9 of 12 outputs kept.
// Returns the max abs gap between align's (z, c) and the masked
// least-squares solution.
inline double linear_surrogate_gap(Rng& rng) {
  const Eigen::MatrixXd a = random_matrix(12, 4, rng), b = random_matrix(12, 2, rng);
  const Eigen::VectorXd y = random_matrix(12, 1, rng);
  std::vector<bool> mask(12, true);
  mask[1] = mask[5] = mask[10] = false;

  Eigen::MatrixXd design(9, 6);
  Eigen::VectorXd rhs(9);
  for (Eigen::Index i = 0, r = 0; i < 12; ++i)
    if (mask[static_cast<std::size_t>(i)]) {
      design.row(r) << a.row(i), b.row(i);
      rhs[r++] = y[i];
    }
  const Eigen::VectorXd oracle = design.colPivHouseholderQr().solve(rhs);

  const Tensor ta = Tensor::from_matrix(a), tb = Tensor::from_matrix(b);
  StructuralTargets targets;
  targets.values[1] = Tensor({12}, std::vector<double>(y.data(), y.data() + 12));
  targets.mask[1] = mask;
  RenderFn render = [&](const Tensor& c, const Tensor& z) {
    return flatten(add(matmul(ta, reshape(z, {4, 1})), matmul(tb, reshape(c, {2, 1}))));
  };
  LossFn loss = [&](const Tensor& image) { return masked_feature_loss({{1, image}}, targets); };

  const double lmax = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(design.transpose() * design).eigenvalues().maxCoeff();
  AlignOptions opts;
  opts.lr = 0.4 / lmax;  // gradient is 2 Dᵀ(Dx - y)
  opts.max_steps = 20000;
  opts.tol = 0.0;
  const auto r = align(rand_pm1({2}, rng), rand_pm1({4}, rng), render, loss, opts);
  double gap = 0.0;
  for (int i = 0; i < 4; ++i) gap = std::max(gap, std::abs(r.z[static_cast<std::size_t>(i)] - oracle[i]));
  for (int i = 0; i < 2; ++i) gap = std::max(gap, std::abs(r.c[static_cast<std::size_t>(i)] - oracle[4 + i]));
  return gap;
}

}  // namespace mindloop::testing
