#include "mindloop/metrics.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/Eigenvalues>

#include "mindloop/decoder.hpp"
#include "mindloop/errors.hpp"
#include "mindloop/ops.hpp"

namespace mindloop {

namespace {

constexpr std::size_t kWindow = 8;
constexpr double kC1 = 0.01 * 0.01;
constexpr double kC2 = 0.03 * 0.03;

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(what) + ": shapes " + to_string(a.shape()) + " and " + to_string(b.shape()) + " differ");
}

Eigen::MatrixXd grayscale(const Tensor& img) {
  if (img.rank() != 3) throw ShapeError("grayscale: image must be C x H x W");
  const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  Eigen::MatrixXd g = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(h), static_cast<Eigen::Index>(w));
  const auto d = img.data();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) g(static_cast<Eigen::Index>(y), static_cast<Eigen::Index>(x)) += d[(ch * h + y) * w + x];
  return g / static_cast<double>(c);
}

Eigen::MatrixXd covariance(const Eigen::Ref<const Eigen::MatrixXd>& x) {
  const Eigen::MatrixXd centred = x.rowwise() - x.colwise().mean();
  return centred.transpose() * centred / static_cast<double>(x.rows() - 1);
}

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  const Eigen::VectorXd root = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * root.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

Score cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ContractError("cosine_similarity: length mismatch");
  const Eigen::Map<const Eigen::VectorXd> u(a.data(), static_cast<Eigen::Index>(a.size()));
  const Eigen::Map<const Eigen::VectorXd> v(b.data(), static_cast<Eigen::Index>(b.size()));
  const double nu = u.norm(), nv = v.norm();
  if (nu == 0.0 || nv == 0.0) return {0.0, true};
  return {std::clamp(u.dot(v) / (nu * nv), -1.0, 1.0), false};
}

Score clip_similarity(const Tensor& a, const Tensor& b, const VisualEncoder& encoder) {
  require_same_shape(a, b, "clip_similarity");
  NoGradGuard guard;
  const Tensor ea = encoder.embed(a), eb = encoder.embed(b);
  return cosine_similarity(ea.data(), eb.data());
}

double ssim(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "ssim");
  const Eigen::MatrixXd x = grayscale(a), y = grayscale(b);
  if (x.rows() < static_cast<Eigen::Index>(kWindow) || x.cols() < static_cast<Eigen::Index>(kWindow))
    throw ContractError("ssim: image smaller than the 8x8 window");
  const Eigen::Index k = kWindow;
  const double n = static_cast<double>(k * k);
  double total = 0.0;
  std::size_t windows = 0;
  for (Eigen::Index r = 0; r + k <= x.rows(); ++r) {
    for (Eigen::Index c = 0; c + k <= x.cols(); ++c) {
      const auto px = x.block(r, c, k, k), py = y.block(r, c, k, k);
      const double mx = px.sum() / n, my = py.sum() / n;
      const double vx = (px.array() - mx).square().sum() / n;
      const double vy = (py.array() - my).square().sum() / n;
      const double cxy = ((px.array() - mx) * (py.array() - my)).sum() / n;
      total += (2 * mx * my + kC1) * (2 * cxy + kC2) / ((mx * mx + my * my + kC1) * (vx + vy + kC2));
      ++windows;
    }
  }
  return total / static_cast<double>(windows);
}

Score pixel_pcc(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "pixel_pcc");
  const Correlation r = pearson(a.data(), b.data());
  return {r.r, r.degenerate};
}

double fid_from_embeddings(const Eigen::Ref<const Eigen::MatrixXd>& a, const Eigen::Ref<const Eigen::MatrixXd>& b) {
  if (a.cols() != b.cols()) throw ContractError("fid: embedding dimensions differ");
  if (a.rows() < a.cols() + 1 || b.rows() < b.cols() + 1)
    throw ContractError("fid: each set needs at least " + std::to_string(a.cols() + 1) + " samples");
  const Eigen::VectorXd diff = a.colwise().mean() - b.colwise().mean();
  const Eigen::MatrixXd sa = covariance(a), sb = covariance(b);
  const Eigen::MatrixXd root_a = psd_sqrt(sa);
  Eigen::MatrixXd product = root_a * sb * root_a;
  product = 0.5 * (product + product.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(product, Eigen::EigenvaluesOnly);
  const double trace_root = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double value = diff.squaredNorm() + sa.trace() + sb.trace() - 2.0 * trace_root;
  return std::max(value, 0.0);
}

double fid(const std::vector<Tensor>& set_a, const std::vector<Tensor>& set_b, const VisualEncoder& encoder) {
  auto embed_all = [&](const std::vector<Tensor>& set) {
    Eigen::MatrixXd m(static_cast<Eigen::Index>(set.size()), static_cast<Eigen::Index>(encoder.embed_dim()));
    NoGradGuard guard;
    for (std::size_t i = 0; i < set.size(); ++i) {
      const Tensor e = encoder.embed(set[i]);
      for (std::size_t j = 0; j < e.size(); ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = e[j];
    }
    return m;
  };
  const std::size_t need = encoder.embed_dim() + 1;
  if (set_a.size() < need || set_b.size() < need)
    throw ContractError("fid: each set needs at least " + std::to_string(need) + " images");
  return fid_from_embeddings(embed_all(set_a), embed_all(set_b));
}

Tensor resize_nearest(const Tensor& image, std::size_t size) {
  if (image.rank() != 3) throw ShapeError("resize_nearest: image must be C x H x W");
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (h == size && w == size) return image;
  Tensor out({c, size, size});
  auto o = out.values();
  const auto d = image.data();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x) {
        const std::size_t sy = y * h / size, sx = x * w / size;
        o[(ch * size + y) * size + x] = d[(ch * h + sy) * w + sx];
      }
  return out;
}

void to_json(nlohmann::json& j, const MetricsReport& r) {
  nlohmann::json items = nlohmann::json::array();
  for (const auto& it : r.items)
    items.push_back({{"id", it.id}, {"clip_sim", it.clip_sim}, {"ssim", it.ssim}, {"pcc", it.pcc}});
  j = {{"items", std::move(items)},
       {"means", {{"clip_sim", r.mean_clip_sim}, {"ssim", r.mean_ssim}, {"pcc", r.mean_pcc}}},
       {"fid", r.fid ? nlohmann::json(*r.fid) : nlohmann::json(nullptr)},
       {"config", {{"image_size", r.image_size}, {"encoder_seed", r.encoder_seed}}}};
}

void from_json(const nlohmann::json& j, MetricsReport& r) {
  r.items.clear();
  for (const auto& it : j.at("items"))
    r.items.push_back({it.at("id").get<std::string>(), it.at("clip_sim").get<double>(), it.at("ssim").get<double>(),
                       it.at("pcc").get<double>()});
  const auto& m = j.at("means");
  r.mean_clip_sim = m.at("clip_sim").get<double>();
  r.mean_ssim = m.at("ssim").get<double>();
  r.mean_pcc = m.at("pcc").get<double>();
  r.fid.reset();
  if (!j.at("fid").is_null()) r.fid = j.at("fid").get<double>();
  r.image_size = j.at("config").at("image_size").get<std::size_t>();
  r.encoder_seed = j.at("config").at("encoder_seed").get<std::uint64_t>();
}

MetricsReport evaluate(const std::vector<std::string>& ids, const std::vector<Tensor>& stimuli,
                       const std::vector<Tensor>& reconstructions, const VisualEncoder& encoder,
                       std::uint64_t encoder_seed, std::size_t image_size) {
  if (ids.size() != stimuli.size() || stimuli.size() != reconstructions.size() || ids.empty())
    throw ContractError("evaluate: need equally many ids, stimuli and reconstructions");
  MetricsReport report;
  report.image_size = image_size;
  report.encoder_seed = encoder_seed;
  std::vector<Tensor> a, b;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    a.push_back(resize_nearest(stimuli[i], image_size));
    b.push_back(resize_nearest(reconstructions[i], image_size));
    ItemMetrics m{ids[i], clip_similarity(a.back(), b.back(), encoder).value, ssim(a.back(), b.back()),
                  pixel_pcc(a.back(), b.back()).value};
    report.mean_clip_sim += m.clip_sim, report.mean_ssim += m.ssim, report.mean_pcc += m.pcc;
    report.items.push_back(std::move(m));
  }
  const double n = static_cast<double>(ids.size());
  report.mean_clip_sim /= n, report.mean_ssim /= n, report.mean_pcc /= n;
  if (a.size() > encoder.embed_dim()) report.fid = fid(a, b, encoder);
  return report;
}

}  // namespace mindloop
