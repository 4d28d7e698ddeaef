#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "mindloop/decoder.hpp"
#include "mindloop/errors.hpp"
#include "support.hpp"

using namespace mindloop;
using mindloop::testing::random_matrix;
using mindloop::testing::ridge_oracle;

namespace {

double scalar_pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) ma += a[i], mb += b[i];
  ma /= n, mb /= n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

double ridge_objective(const Eigen::MatrixXd& xs, const Eigen::VectorXd& y, const Eigen::VectorXd& w, double bias,
                       double lambda) {
  const Eigen::VectorXd r = y - (xs * w).array().matrix() - Eigen::VectorXd::Constant(y.size(), bias);
  return r.squaredNorm() + lambda * w.squaredNorm();
}

}  // namespace

TEST_SUITE("decoder") {

TEST_CASE("pearson examples") {
  const std::vector<double> a{1, 2, 3, 4}, b{1, 3, 2, 4}, neg{-1, -2, -3, -4};
  CHECK(pearson(a, a).r == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(pearson(a, neg).r == doctest::Approx(-1.0).epsilon(1e-15));
  CHECK(std::abs(pearson(a, b).r - scalar_pearson(a, b)) < 1e-15);
  CHECK(std::abs(pearson(a, b).r - 0.8) < 1e-15);

  const std::vector<double> flat{2, 2, 2, 2};
  const auto d = pearson(a, flat);
  CHECK(d.r == 0.0);
  CHECK(d.degenerate);
  CHECK_THROWS_AS(pearson(a, std::vector<double>{1, 2}), ContractError);
}

TEST_CASE("pearson property: bounded and symmetric") {
  Rng rng(1);
  for (int i = 0; i < 50; ++i) {
    const Eigen::VectorXd a = random_matrix(12, 1, rng), b = random_matrix(12, 1, rng);
    const double r = pearson(a, b).r;
    CHECK(r >= -1.0);
    CHECK(r <= 1.0);
    CHECK(r == pearson(b, a).r);
  }
}

TEST_CASE("fit_ridge matches the dense normal-equation oracle") {
  Rng rng(2);
  const Eigen::MatrixXd x = random_matrix(20, 5, rng), y = random_matrix(20, 3, rng);
  const RidgeModel m = fit_ridge(x, y, 0.5, 5);
  const Eigen::MatrixXd w = ridge_oracle(x, y, 0.5);
  for (Eigen::Index t = 0; t < 3; ++t) {
    const auto& tg = m.targets[static_cast<std::size_t>(t)];
    REQUIRE(tg.weights.size() == 5);
    CHECK((tg.weights - w.col(t)).cwiseAbs().maxCoeff() < 1e-8);
    const double bias = y.col(t).mean() - w.col(t).dot(x.colwise().mean());
    CHECK(std::abs(tg.bias - bias) < 1e-8);
  }
}

TEST_CASE("fit_ridge on random small instances") {
  Rng rng(3);
  std::uniform_int_distribution<int> n_dist(12, 30), d_dist(1, 10);
  std::uniform_real_distribution<double> l_dist(0.01, 10.0);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = n_dist(rng), d = d_dist(rng);
    const double lambda = l_dist(rng);
    const Eigen::MatrixXd x = random_matrix(n, d, rng), y = random_matrix(n, 4, rng);
    const RidgeModel m = fit_ridge(x, y, lambda, static_cast<std::size_t>(d));
    const Eigen::MatrixXd w = ridge_oracle(x, y, lambda);
    for (Eigen::Index t = 0; t < 4; ++t)
      CHECK((m.targets[static_cast<std::size_t>(t)].weights - w.col(t)).cwiseAbs().maxCoeff() < 1e-8);
  }
}

TEST_CASE("voxel pre-selection ranks by absolute correlation") {
  Rng rng(4);
  const Eigen::MatrixXd x = random_matrix(40, 8, rng);
  Eigen::MatrixXd y(40, 1);
  y.col(0) = 2.0 * x.col(3) - 3.0 * x.col(6) + 0.01 * random_matrix(40, 1, rng);
  const RidgeModel m = fit_ridge(x, y, 0.1, 2);
  CHECK(m.targets[0].voxels == std::vector<Eigen::Index>{3, 6});
  CHECK(m.targets[0].weights.size() == 2);
  // Oracle on the selected columns only.
  Eigen::MatrixXd xs(40, 2);
  xs << x.col(3), x.col(6);
  CHECK((m.targets[0].weights - ridge_oracle(xs, y, 0.1).col(0)).cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("lambda 0 interpolates an invertible square system") {
  Rng rng(5);
  const int n = 6;
  const Eigen::MatrixXd x = random_matrix(n, n, rng), y = random_matrix(n, n, rng);
  const RidgeModel m = fit_ridge(x, y, 0.0, n);
  CHECK((m.predict_rows(x) - y).cwiseAbs().maxCoeff() < 1e-8);
  for (Eigen::Index i = 0; i < n; ++i)
    CHECK((m.predict(x.row(i).transpose()) - y.row(i).transpose()).cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("lambda 0 on a singular system names the target") {
  Rng rng(6);
  Eigen::MatrixXd x = random_matrix(10, 3, rng);
  x.col(2) = x.col(0) + x.col(1);
  const Eigen::MatrixXd y = random_matrix(10, 2, rng);
  try {
    (void)fit_ridge(x, y, 0.0, 3);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("target 0") != std::string::npos);
  }
}

TEST_CASE("huge lambda shrinks to column means") {
  Rng rng(7);
  const Eigen::MatrixXd x = random_matrix(15, 4, rng), y = random_matrix(15, 2, rng);
  const RidgeModel m = fit_ridge(x, y, 1e12, 4);
  for (const auto& t : m.targets) CHECK(t.weights.cwiseAbs().maxCoeff() < 1e-9);
  const Eigen::MatrixXd p = m.predict_rows(x);
  for (Eigen::Index t = 0; t < 2; ++t) CHECK((p.col(t).array() - y.col(t).mean()).abs().maxCoeff() < 1e-8);
}

TEST_CASE("fit_ridge contract errors") {
  const Eigen::MatrixXd x = Eigen::MatrixXd::Ones(5, 3), y = Eigen::MatrixXd::Ones(4, 1);
  CHECK_THROWS_AS(fit_ridge(x, y, 1.0, 2), ContractError);
  CHECK_THROWS_AS(fit_ridge(x, Eigen::MatrixXd::Ones(5, 1), -1.0, 2), ContractError);
  CHECK_THROWS_AS(fit_ridge(x, Eigen::MatrixXd::Ones(5, 1), 1.0, 4), ContractError);
  CHECK_THROWS_AS(fit_ridge(Eigen::MatrixXd::Ones(1, 3), Eigen::MatrixXd::Ones(1, 1), 1.0, 2), ContractError);
}

TEST_CASE("training objective is locally optimal") {
  Rng rng(8);
  const Eigen::MatrixXd x = random_matrix(25, 6, rng), y = random_matrix(25, 1, rng);
  const double lambda = 2.0;
  const RidgeModel m = fit_ridge(x, y, lambda, 6);
  const auto& tg = m.targets[0];
  // The bias absorbs the means, so compare objectives on centred data.
  const Eigen::MatrixXd xc = x.rowwise() - x.colwise().mean();
  const Eigen::VectorXd yc = y.col(0).array() - y.col(0).mean();
  const double best = ridge_objective(xc, yc, tg.weights, 0.0, lambda);
  std::normal_distribution<double> dist(0.0, 1e-3);
  for (int i = 0; i < 100; ++i) {
    Eigen::VectorXd delta(6);
    for (auto& v : delta) v = dist(rng);
    CHECK(ridge_objective(xc, yc, tg.weights + delta, 0.0, lambda) >= best);
  }
}

TEST_CASE("predict") {
  RidgeModel zero;
  zero.input_dim = 4;
  zero.targets = {{{0, 2}, Eigen::VectorXd::Zero(2), 1.5}, {{1}, Eigen::VectorXd::Zero(1), -2.0}};
  const Eigen::VectorXd p = zero.predict(Eigen::VectorXd::Ones(4));
  CHECK(p[0] == 1.5);
  CHECK(p[1] == -2.0);
  CHECK_THROWS_AS(zero.predict(Eigen::VectorXd::Ones(3)), ContractError);

  Rng rng(9);
  const Eigen::MatrixXd x = random_matrix(30, 10, rng), y = random_matrix(30, 3, rng);
  const RidgeModel m = fit_ridge(x, y, 1.0, 4);
  const Eigen::VectorXd in = random_matrix(10, 1, rng);
  const Tensor out = predict(m, Tensor({10}, std::vector<double>(in.data(), in.data() + 10)));
  for (std::size_t t = 0; t < 3; ++t) {
    double acc = m.targets[t].bias;
    for (std::size_t j = 0; j < m.targets[t].voxels.size(); ++j)
      acc += m.targets[t].weights[static_cast<Eigen::Index>(j)] * in[m.targets[t].voxels[j]];
    CHECK(out[t] == acc);
  }
}

TEST_CASE("predictions ignore unselected voxels") {
  Rng rng(10);
  const Eigen::MatrixXd x = random_matrix(30, 10, rng), y = random_matrix(30, 2, rng);
  const RidgeModel m = fit_ridge(x, y, 1.0, 3);
  Eigen::VectorXd in = random_matrix(10, 1, rng);
  const Eigen::VectorXd base = m.predict(in);
  for (Eigen::Index v = 0; v < 10; ++v) {
    bool used = false;
    for (const auto& t : m.targets) used |= std::ranges::find(t.voxels, v) != t.voxels.end();
    if (used) continue;
    in[v] = 1e6;
  }
  CHECK(m.predict(in) == base);
}

TEST_CASE("fold sizes") {
  CHECK(fold_sizes(10, 5) == std::vector<std::size_t>{2, 2, 2, 2, 2});
  CHECK(fold_sizes(11, 5) == std::vector<std::size_t>{3, 2, 2, 2, 2});
  CHECK_THROWS_AS(fold_sizes(3, 5), ContractError);
  CHECK_THROWS_AS(fold_sizes(3, 1), ContractError);
}

TEST_CASE("cv accuracy on realizable and null targets") {
  Rng rng(11);
  const Eigen::MatrixXd x = random_matrix(200, 10, rng);
  const Eigen::MatrixXd lin = x * random_matrix(10, 3, rng);
  const auto exact = cv_accuracy(x, lin, 5, 1e-6, 10);
  for (Eigen::Index t = 0; t < 3; ++t) CHECK(exact.accuracy[t] > 0.999);

  const Eigen::MatrixXd null = random_matrix(200, 20, rng);
  const auto r = cv_accuracy(x, null, 5, 1.0, 10);
  CHECK(std::abs(r.accuracy.mean()) < 0.2);

  Eigen::MatrixXd with_const = lin;
  with_const.col(1).setConstant(4.0);
  const auto d = cv_accuracy(x, with_const, 5, 1.0, 10);
  CHECK(d.degenerate[1]);
  CHECK(d.accuracy[1] == 0.0);
  CHECK_FALSE(d.degenerate[0]);

  CHECK_THROWS_AS(cv_accuracy(x.topRows(3), lin.topRows(3), 5, 1.0, 10), ContractError);
}

TEST_CASE("cv extrapolates a noiseless line across held-out blocks") {
  Eigen::MatrixXd x(10, 1), z(10, 1);
  for (int i = 0; i < 10; ++i) x(i, 0) = i, z(i, 0) = 2 * i + 1;
  const auto r = cv_accuracy(x, z, 5, 0.0, 1);
  CHECK(r.accuracy[0] == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("select_top_k examples") {
  Eigen::VectorXd acc(4);
  acc << 0.1, 0.9, 0.9, 0.2;
  const auto s = select_top_k(acc, 50);
  CHECK(s.retained() == std::vector<std::size_t>{1, 2});
  CHECK(select_top_k(acc, 100).count() == 4);
  CHECK(select_top_k(acc, 1).retained() == std::vector<std::size_t>{1});  // tie goes to the lower index

  const Eigen::VectorXd big = Eigen::VectorXd::LinSpaced(38400, -1.0, 1.0);
  CHECK(select_top_k(big, 25).count() == 9600);

  CHECK_THROWS_AS(select_top_k(acc, 0.0), ContractError);
  CHECK_THROWS_AS(select_top_k(acc, 101.0), ContractError);
}

TEST_CASE("select_top_k properties") {
  Rng rng(12);
  std::uniform_real_distribution<double> kd(0.5, 100.0);
  for (int trial = 0; trial < 50; ++trial) {
    const Eigen::VectorXd acc = random_matrix(37, 1, rng);
    const double k = kd(rng);
    const auto s = select_top_k(acc, k);
    CHECK(s.count() == static_cast<std::size_t>(std::ceil(37 * k / 100.0)));
    double min_kept = 1e9, max_dropped = -1e9;
    for (Eigen::Index i = 0; i < 37; ++i) {
      if (s.mask[static_cast<std::size_t>(i)]) min_kept = std::min(min_kept, acc[i]);
      else max_dropped = std::max(max_dropped, acc[i]);
    }
    CHECK(min_kept >= max_dropped);
    // Invariant under strictly monotone transforms.
    const Eigen::VectorXd t = acc.array().exp() * 3.0 - 1.0;
    CHECK(select_top_k(t, k).mask == s.mask);
  }
}

TEST_CASE("degenerate dims are retained only when k forces it") {
  Eigen::VectorXd acc(4);
  acc << 0.0, 0.5, 0.0, -0.3;
  const std::vector<bool> deg{true, false, false, false};
  CHECK(select_top_k(acc, 75, deg).retained() == std::vector<std::size_t>{1, 2, 3});
  CHECK(select_top_k(acc, 100, deg).count() == 4);
}

TEST_CASE("ridge and selector round-trip through disk") {
  Rng rng(13);
  const Eigen::MatrixXd x = random_matrix(30, 8, rng), y = random_matrix(30, 5, rng);
  const RidgeModel m = fit_ridge(x, y, 0.7, 3);
  const auto sel = select_top_k(cv_accuracy(x, y, 5, 0.7, 3).accuracy, 40);
  const auto dir = std::filesystem::temp_directory_path() / "mindloop_tests" / "ridge";
  save_ridge(dir, "m", m, sel);
  std::optional<FeatureSelector> back_sel;
  const RidgeModel back = load_ridge(dir, "m", &back_sel);
  CHECK(back.lambda == 0.7);
  REQUIRE(back_sel.has_value());
  CHECK(back_sel->mask == sel.mask);
  CHECK(back_sel->k_percent == 40);
  CHECK(back.predict_rows(x) == m.predict_rows(x));
  CHECK_THROWS_AS(load_ridge(dir, "missing"), FormatError);
}

}  // TEST_SUITE
