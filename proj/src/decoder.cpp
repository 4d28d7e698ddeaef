#include "mindloop/decoder.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <Eigen/Cholesky>
#include <Eigen/QR>
#include <json.hpp>

#include "mindloop/errors.hpp"
#include "mindloop/tensor_io.hpp"

namespace mindloop {

Correlation pearson(const Eigen::Ref<const Eigen::VectorXd>& a, const Eigen::Ref<const Eigen::VectorXd>& b) {
  if (a.size() != b.size()) throw ContractError("pearson: length mismatch");
  if (a.size() < 2) throw ContractError("pearson: need at least two samples");
  const Eigen::VectorXd da = a.array() - a.mean();
  const Eigen::VectorXd db = b.array() - b.mean();
  const double ssa = da.squaredNorm(), ssb = db.squaredNorm();
  // Relative variation below ~1e-12 is rounding noise around a constant.
  if (ssa <= 1e-24 * a.squaredNorm() || ssb <= 1e-24 * b.squaredNorm() || ssa == 0.0 || ssb == 0.0)
    return {0.0, true};
  return {std::clamp(da.dot(db) / std::sqrt(ssa * ssb), -1.0, 1.0), false};
}

Correlation pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ContractError("pearson: length mismatch");
  using CMap = Eigen::Map<const Eigen::VectorXd>;
  return pearson(CMap(a.data(), static_cast<Eigen::Index>(a.size())), CMap(b.data(), static_cast<Eigen::Index>(b.size())));
}

Eigen::VectorXd RidgeModel::predict(const Eigen::Ref<const Eigen::VectorXd>& x) const {
  if (x.size() != input_dim)
    throw ContractError("predict: expected " + std::to_string(input_dim) + " voxels, got " + std::to_string(x.size()));
  Eigen::VectorXd out(output_dim());
  for (std::size_t t = 0; t < targets.size(); ++t) {
    const auto& tg = targets[t];
    double acc = tg.bias;
    for (std::size_t j = 0; j < tg.voxels.size(); ++j) acc += tg.weights[static_cast<Eigen::Index>(j)] * x[tg.voxels[j]];
    out[static_cast<Eigen::Index>(t)] = acc;
  }
  return out;
}

Eigen::MatrixXd RidgeModel::predict_rows(const Eigen::Ref<const Eigen::MatrixXd>& x) const {
  if (x.cols() != input_dim) throw ContractError("predict_rows: voxel count mismatch");
  Eigen::MatrixXd out(x.rows(), output_dim());
  for (std::size_t t = 0; t < targets.size(); ++t) {
    const auto& tg = targets[t];
    out.col(static_cast<Eigen::Index>(t)) = x(Eigen::all, tg.voxels) * tg.weights;
    out.col(static_cast<Eigen::Index>(t)).array() += tg.bias;
  }
  return out;
}

Tensor predict(const RidgeModel& model, const Tensor& x) {
  if (x.rank() != 1) throw ContractError("predict: input must be a voxel vector");
  const Eigen::VectorXd y =
      model.predict(Eigen::Map<const Eigen::VectorXd>(x.data().data(), static_cast<Eigen::Index>(x.size())));
  return Tensor({static_cast<std::size_t>(y.size())}, std::vector<double>(y.data(), y.data() + y.size()));
}

namespace {

std::vector<Eigen::Index> top_voxels(const Eigen::Ref<const Eigen::VectorXd>& corr, std::size_t k) {
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(corr.size()));
  std::iota(idx.begin(), idx.end(), Eigen::Index{0});
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](Eigen::Index a, Eigen::Index b) {
                      const double fa = std::abs(corr[a]), fb = std::abs(corr[b]);
                      return fa != fb ? fa > fb : a < b;
                    });
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace

RidgeModel fit_ridge(const Eigen::Ref<const Eigen::MatrixXd>& x, const Eigen::Ref<const Eigen::MatrixXd>& y,
                     double lambda, std::size_t voxels_per_target) {
  const Eigen::Index n = x.rows(), d = x.cols(), t_count = y.cols();
  if (y.rows() != n) throw ContractError("fit_ridge: X and Y row counts differ");
  if (n < 2) throw ContractError("fit_ridge: need at least two samples");
  if (!(lambda >= 0.0)) throw ContractError("fit_ridge: lambda must be >= 0");
  if (voxels_per_target == 0 || static_cast<Eigen::Index>(voxels_per_target) > d)
    throw ContractError("fit_ridge: voxels_per_target must be in [1, D_x]");
  const auto nd = static_cast<double>(n);

  RidgeModel model;
  model.lambda = lambda;
  model.input_dim = d;
  model.mean = x.colwise().mean().transpose();
  const Eigen::MatrixXd xc = x.rowwise() - model.mean.transpose();
  model.stddev = (xc.colwise().squaredNorm() / nd).cwiseSqrt().transpose();

  const Eigen::VectorXd y_mean = y.colwise().mean().transpose();
  const Eigen::MatrixXd yc = y.rowwise() - y_mean.transpose();
  const Eigen::VectorXd y_std = (yc.colwise().squaredNorm() / nd).cwiseSqrt().transpose();

  const Eigen::VectorXd x_inv = model.stddev.unaryExpr([](double s) { return s > 0.0 ? 1.0 / s : 0.0; });
  const Eigen::VectorXd y_inv = y_std.unaryExpr([](double s) { return s > 0.0 ? 1.0 / s : 0.0; });
  // corr = diag(1/sx) Xcᵀ Yc diag(1/sy) / n, and Xcᵀ Yc is reused as the ridge right-hand side.
  const Eigen::MatrixXd cross = xc.transpose() * yc;
  const Eigen::MatrixXd corr = x_inv.asDiagonal() * cross * y_inv.asDiagonal() / nd;
  Eigen::MatrixXd gram;
  if (lambda > 0.0) gram = xc.transpose() * xc;

  const std::size_t k = voxels_per_target;
  const Eigen::Index rank_needed = std::min<Eigen::Index>(n - 1, static_cast<Eigen::Index>(k));
  model.targets.resize(static_cast<std::size_t>(t_count));
  for (Eigen::Index t = 0; t < t_count; ++t) {
    auto& tg = model.targets[static_cast<std::size_t>(t)];
    tg.voxels = top_voxels(corr.col(t), k);
    if (lambda > 0.0) {
      Eigen::MatrixXd a = gram(tg.voxels, tg.voxels);
      a.diagonal().array() += lambda;
      Eigen::LLT<Eigen::MatrixXd> llt(a);
      if (llt.info() != Eigen::Success) throw NumericError("fit_ridge: Cholesky failed for target " + std::to_string(t));
      tg.weights = llt.solve(cross(tg.voxels, t));
    } else {
      const Eigen::MatrixXd xs = xc(Eigen::all, tg.voxels);
      Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(xs);
      if (qr.rank() < rank_needed) throw NumericError("fit_ridge: singular system for target " + std::to_string(t));
      tg.weights = qr.solve(yc.col(t));
    }
    if (!tg.weights.allFinite()) throw NumericError("fit_ridge: non-finite weights for target " + std::to_string(t));
    tg.bias = y_mean[t] - tg.weights.dot(model.mean(tg.voxels));
  }
  return model;
}

std::vector<std::size_t> fold_sizes(std::size_t n, std::size_t folds) {
  if (folds < 2) throw ContractError("cv: need at least two folds");
  if (folds > n) throw ContractError("cv: more folds than samples");
  std::vector<std::size_t> sizes(folds, n / folds);
  for (std::size_t i = 0; i < n % folds; ++i) ++sizes[i];
  return sizes;
}

CvResult cv_accuracy(const Eigen::Ref<const Eigen::MatrixXd>& x, const Eigen::Ref<const Eigen::MatrixXd>& z,
                     std::size_t folds, double lambda, std::size_t voxels_per_target) {
  const Eigen::Index n = x.rows();
  if (z.rows() != n) throw ContractError("cv_accuracy: X and Z row counts differ");
  const auto sizes = fold_sizes(static_cast<std::size_t>(n), folds);
  Eigen::MatrixXd pred(n, z.cols());
  Eigen::Index start = 0;
  for (auto size : sizes) {
    const auto len = static_cast<Eigen::Index>(size);
    std::vector<Eigen::Index> train;
    for (Eigen::Index i = 0; i < n; ++i)
      if (i < start || i >= start + len) train.push_back(i);
    const Eigen::MatrixXd xt = x(train, Eigen::all);
    const Eigen::MatrixXd zt = z(train, Eigen::all);
    const RidgeModel model = fit_ridge(xt, zt, lambda, voxels_per_target);
    pred.middleRows(start, len) = model.predict_rows(x.middleRows(start, len));
    start += len;
  }
  CvResult out;
  out.accuracy.resize(z.cols());
  out.degenerate.resize(static_cast<std::size_t>(z.cols()));
  for (Eigen::Index c = 0; c < z.cols(); ++c) {
    const auto r = pearson(pred.col(c), z.col(c));
    out.accuracy[c] = r.r;
    out.degenerate[static_cast<std::size_t>(c)] = r.degenerate;
  }
  return out;
}

std::vector<std::size_t> FeatureSelector::retained() const {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) idx.push_back(i);
  return idx;
}

std::size_t FeatureSelector::count() const { return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), true)); }

FeatureSelector select_top_k(const Eigen::Ref<const Eigen::VectorXd>& accuracy, double k_percent,
                             const std::vector<bool>& degenerate) {
  if (!(k_percent > 0.0 && k_percent <= 100.0)) throw ContractError("select_top_k: k_percent must be in (0, 100]");
  const auto d = static_cast<std::size_t>(accuracy.size());
  if (!degenerate.empty() && degenerate.size() != d) throw ContractError("select_top_k: degenerate flags size mismatch");
  const auto want = static_cast<std::size_t>(std::ceil(static_cast<double>(d) * k_percent / 100.0));

  auto is_degenerate = [&](std::size_t i) { return !degenerate.empty() && degenerate[i]; };
  std::vector<std::size_t> order(d);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (is_degenerate(a) != is_degenerate(b)) return is_degenerate(b);
    return accuracy[static_cast<Eigen::Index>(a)] > accuracy[static_cast<Eigen::Index>(b)];
  });
  FeatureSelector sel;
  sel.accuracy = accuracy;
  sel.k_percent = k_percent;
  sel.mask.assign(d, false);
  for (std::size_t i = 0; i < want; ++i) sel.mask[order[i]] = true;
  return sel;
}

// ---------------------------------------------------------------------------

namespace {

Tensor vector_tensor(const Eigen::VectorXd& v) {
  return Tensor({static_cast<std::size_t>(v.size())}, std::vector<double>(v.data(), v.data() + v.size()));
}

Eigen::VectorXd tensor_vector(const Tensor& t) {
  return Eigen::Map<const Eigen::VectorXd>(t.data().data(), static_cast<Eigen::Index>(t.size()));
}

}  // namespace

void save_ridge(const std::filesystem::path& dir, const std::string& name, const RidgeModel& model,
                const std::optional<FeatureSelector>& selector) {
  std::filesystem::create_directories(dir);
  nlohmann::json header;
  header["lambda"] = model.lambda;
  header["input_dim"] = model.input_dim;
  auto& idx = header["indices"] = nlohmann::json::array();
  std::size_t k = 0;
  for (const auto& t : model.targets) {
    idx.push_back(t.voxels);
    k = t.voxels.size();
  }
  header["voxels_per_target"] = k;
  if (selector) {
    header["k_percent"] = selector->k_percent;
    header["retained"] = selector->retained();
    header["feature_dim"] = selector->mask.size();
    save_tensor(dir / (name + ".accuracy.mdt"), vector_tensor(selector->accuracy));
  }
  {
    std::ofstream os(dir / (name + ".json"));
    if (!os) throw FormatError("cannot write ridge header");
    os << header.dump() << '\n';
  }
  Tensor weights({std::max<std::size_t>(model.targets.size(), 1), std::max<std::size_t>(k, 1)});
  auto w = weights.values();
  Eigen::VectorXd bias(model.output_dim());
  for (std::size_t t = 0; t < model.targets.size(); ++t) {
    for (std::size_t j = 0; j < k; ++j) w[t * k + j] = model.targets[t].weights[static_cast<Eigen::Index>(j)];
    bias[static_cast<Eigen::Index>(t)] = model.targets[t].bias;
  }
  save_tensor(dir / (name + ".weights.mdt"), weights);
  if (bias.size() > 0) save_tensor(dir / (name + ".bias.mdt"), vector_tensor(bias));
  save_tensor(dir / (name + ".mean.mdt"), vector_tensor(model.mean));
  save_tensor(dir / (name + ".std.mdt"), vector_tensor(model.stddev));
}

RidgeModel load_ridge(const std::filesystem::path& dir, const std::string& name,
                      std::optional<FeatureSelector>* selector) {
  std::ifstream is(dir / (name + ".json"));
  if (!is) throw FormatError("no ridge model '" + name + "' in " + dir.string());
  const auto header = nlohmann::json::parse(is);
  RidgeModel model;
  model.lambda = header.at("lambda").get<double>();
  model.input_dim = header.at("input_dim").get<Eigen::Index>();
  model.mean = tensor_vector(load_tensor(dir / (name + ".mean.mdt")));
  model.stddev = tensor_vector(load_tensor(dir / (name + ".std.mdt")));
  const auto& indices = header.at("indices");
  if (!indices.empty()) {
    const Tensor weights = load_tensor(dir / (name + ".weights.mdt"));
    const Tensor bias = load_tensor(dir / (name + ".bias.mdt"));
    const std::size_t k = weights.dim(1);
    for (std::size_t t = 0; t < indices.size(); ++t) {
      RidgeModel::Target tg;
      tg.voxels = indices[t].get<std::vector<Eigen::Index>>();
      if (tg.voxels.size() != k) throw FormatError("ridge model: index/weight size mismatch");
      tg.weights = Eigen::Map<const Eigen::VectorXd>(weights.data().data() + t * k, static_cast<Eigen::Index>(k));
      tg.bias = bias[t];
      model.targets.push_back(std::move(tg));
    }
  }
  if (selector && header.contains("k_percent")) {
    FeatureSelector sel;
    sel.k_percent = header["k_percent"].get<double>();
    sel.accuracy = tensor_vector(load_tensor(dir / (name + ".accuracy.mdt")));
    sel.mask.assign(header.at("feature_dim").get<std::size_t>(), false);
    for (auto i : header.at("retained").get<std::vector<std::size_t>>()) sel.mask.at(i) = true;
    *selector = std::move(sel);
  }
  return model;
}

}  // namespace mindloop
