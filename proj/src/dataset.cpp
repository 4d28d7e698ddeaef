#include "mindloop/dataset.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>

#include "mindloop/errors.hpp"
#include "mindloop/random.hpp"
#include "mindloop/tensor_io.hpp"

namespace mindloop {

std::string_view to_string(Roi roi) { return roi == Roi::LVC ? "LVC" : "HVC"; }

Roi roi_from_string(std::string_view name) {
  if (name == "LVC" || name == "lvc") return Roi::LVC;
  if (name == "HVC" || name == "hvc") return Roi::HVC;
  throw ContractError("unknown ROI '" + std::string(name) + "'");
}

RoiSet RoiSet::parse(std::string_view name) {
  if (name == "all") return all();
  if (name == "lvc") return only(Roi::LVC);
  if (name == "hvc") return only(Roi::HVC);
  throw ConfigError("roi must be all|lvc|hvc, got '" + std::string(name) + "'");
}

std::string RoiSet::name() const {
  if (lvc && hvc) return "all";
  if (lvc) return "lvc";
  if (hvc) return "hvc";
  return "none";
}

// ---------------------------------------------------------------------------

namespace {

struct ClassSpec {
  const char* color;
  const char* shape;
  std::array<double, 3> rgb;  // channel mean 0.4 for every class
};

constexpr std::array<ClassSpec, vocabulary::kMaxClasses> kClasses{{
    {"red", "square", {0.90, 0.15, 0.15}},
    {"green", "circle", {0.15, 0.90, 0.15}},
    {"blue", "triangle", {0.15, 0.15, 0.90}},
    {"yellow", "cross", {0.60, 0.60, 0.00}},
    {"magenta", "diamond", {0.60, 0.00, 0.60}},
    {"cyan", "bar", {0.00, 0.60, 0.60}},
}};

constexpr std::array<const char*, 3> kVertical{"upper", "middle", "lower"};
constexpr std::array<const char*, 3> kHorizontal{"left", "center", "right"};

bool inside_shape(int class_id, double u, double v, double s) {
  switch (class_id) {
    case 0: return std::abs(u) <= s && std::abs(v) <= s;
    case 1: return u * u + v * v <= s * s;
    case 2: return v >= -s && v <= s && std::abs(u) <= 0.5 * (v + s);
    case 3:
      return (std::abs(u) <= s && std::abs(v) <= s / 3.0) || (std::abs(u) <= s / 3.0 && std::abs(v) <= s);
    case 4: return std::abs(u) + std::abs(v) <= s;
    default: return std::abs(u) <= s && std::abs(v) <= s / 2.5;
  }
}

std::size_t pose_bin(double coord, std::size_t image_size) {
  const auto b = static_cast<std::size_t>(coord / static_cast<double>(image_size) * vocabulary::kPoseBins);
  return std::min(b, vocabulary::kPoseBins - 1);
}

// Luminance (channel mean) box-pooled onto a grid x grid lattice.
Eigen::VectorXd low_level_drive(const Tensor& image, std::size_t grid) {
  const std::size_t c = image.dim(0), n = image.dim(1);
  const std::size_t block = n / grid;
  Eigen::VectorXd g = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(grid * grid));
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < n; ++y)
      for (std::size_t x = 0; x < n; ++x)
        g[static_cast<Eigen::Index>((y / block) * grid + x / block)] += image[(ch * n + y) * n + x];
  return g / static_cast<double>(c * block * block);
}

Eigen::VectorXd high_level_drive(int class_id, const Pose& pose, std::size_t num_classes, std::size_t image_size) {
  Eigen::VectorXd h = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(num_classes + 2 * vocabulary::kPoseBins));
  h[class_id] = 1.0;
  h[static_cast<Eigen::Index>(num_classes + pose_bin(pose.row, image_size))] = 1.0;
  h[static_cast<Eigen::Index>(num_classes + vocabulary::kPoseBins + pose_bin(pose.col, image_size))] = 1.0;
  return h;
}

}  // namespace

namespace vocabulary {

const std::vector<std::string>& words() {
  static const std::vector<std::string> list = [] {
    std::vector<std::string> w;
    for (const auto& c : kClasses) w.emplace_back(c.color);
    for (const auto& c : kClasses) w.emplace_back(c.shape);
    for (auto v : kVertical) w.emplace_back(v);
    for (auto h : kHorizontal) w.emplace_back(h);
    return w;
  }();
  return list;
}

int token(std::string_view word) {
  const auto& w = words();
  auto it = std::find(w.begin(), w.end(), word);
  if (it == w.end()) throw ContractError("word '" + std::string(word) + "' is not in the vocabulary");
  return static_cast<int>(it - w.begin());
}

std::string caption_text(std::span<const int> tokens) {
  std::string text;
  for (int t : tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= words().size()) throw ContractError("token out of vocabulary");
    if (!text.empty()) text += ' ';
    text += words()[static_cast<std::size_t>(t)];
  }
  return text;
}

std::string class_name(int class_id) {
  const auto& c = kClasses.at(static_cast<std::size_t>(class_id));
  return std::string(c.color) + " " + c.shape;
}

}  // namespace vocabulary

Tensor render_stimulus(int class_id, const Pose& pose, std::size_t image_size) {
  if (class_id < 0 || static_cast<std::size_t>(class_id) >= kClasses.size()) throw ContractError("class id out of range");
  constexpr int kSub = 4;
  const std::size_t n = image_size;
  Tensor img({3, n, n});
  auto px = img.values();
  const double cs = std::cos(pose.orientation), sn = std::sin(pose.orientation);
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) {
      int hits = 0;
      for (int sy = 0; sy < kSub; ++sy)
        for (int sx = 0; sx < kSub; ++sx) {
          const double py = static_cast<double>(y) + (sy + 0.5) / kSub - pose.row;
          const double qx = static_cast<double>(x) + (sx + 0.5) / kSub - pose.col;
          const double u = cs * qx + sn * py;
          const double v = -sn * qx + cs * py;
          hits += inside_shape(class_id, u, v, pose.size) ? 1 : 0;
        }
      const double cover = static_cast<double>(hits) / (kSub * kSub);
      for (std::size_t ch = 0; ch < 3; ++ch) px[(ch * n + y) * n + x] = cover * kClasses[static_cast<std::size_t>(class_id)].rgb[ch];
    }
  return img;
}

std::vector<int> make_caption(int class_id, const Pose& pose, std::size_t image_size) {
  const auto& c = kClasses.at(static_cast<std::size_t>(class_id));
  return {vocabulary::token(c.color), vocabulary::token(c.shape), vocabulary::token(kVertical[pose_bin(pose.row, image_size)]),
          vocabulary::token(kHorizontal[pose_bin(pose.col, image_size)])};
}

// ---------------------------------------------------------------------------

void DatasetConfig::validate() const {
  if (num_classes < 2 || num_classes > vocabulary::kMaxClasses)
    throw ConfigError("num_classes must be in [2, " + std::to_string(vocabulary::kMaxClasses) + "]");
  if (image_size < 16) throw ConfigError("image_size must be >= 16");
  if (lvc_voxels < 8 || hvc_voxels < 8) throw ConfigError("each ROI needs at least 8 voxels");
  if (train_count == 0 || test_count == 0) throw ConfigError("train and test splits must be non-empty");
  if (noise < 0.0) throw ConfigError("noise must be non-negative");
  if (min_trials < 1 || max_trials < min_trials) throw ConfigError("trial range must satisfy 1 <= min <= max");
  if (max_tokens < 4) throw ConfigError("max_tokens must hold a 4-word caption");
  if (lvc_grid == 0 || image_size % lvc_grid != 0) throw ConfigError("lvc_grid must divide image_size");
}

void to_json(nlohmann::json& j, const DatasetConfig& c) {
  j = {{"image_size", c.image_size}, {"num_classes", c.num_classes}, {"lvc_voxels", c.lvc_voxels},
       {"hvc_voxels", c.hvc_voxels}, {"train_count", c.train_count}, {"test_count", c.test_count},
       {"noise", c.noise},           {"min_trials", c.min_trials},   {"max_trials", c.max_trials},
       {"max_tokens", c.max_tokens}, {"lvc_grid", c.lvc_grid}};
}

void from_json(const nlohmann::json& j, DatasetConfig& c) {
  DatasetConfig d;
  c.image_size = j.value("image_size", d.image_size);
  c.num_classes = j.value("num_classes", d.num_classes);
  c.lvc_voxels = j.value("lvc_voxels", d.lvc_voxels);
  c.hvc_voxels = j.value("hvc_voxels", d.hvc_voxels);
  c.train_count = j.value("train_count", d.train_count);
  c.test_count = j.value("test_count", d.test_count);
  c.noise = j.value("noise", d.noise);
  c.min_trials = j.value("min_trials", d.min_trials);
  c.max_trials = j.value("max_trials", d.max_trials);
  c.max_tokens = j.value("max_tokens", d.max_tokens);
  c.lvc_grid = j.value("lvc_grid", d.lvc_grid);
}

Dataset synthesize(const DatasetConfig& config, std::uint64_t seed) {
  config.validate();
  const std::size_t n_items = config.train_count + config.test_count;
  const std::size_t n = config.image_size;
  const auto n_d = static_cast<double>(n);

  Dataset data;
  data.config = config;
  data.seed = seed;
  data.roi_labels.assign(config.lvc_voxels, Roi::LVC);
  data.roi_labels.insert(data.roi_labels.end(), config.hvc_voxels, Roi::HVC);

  Rng stim_rng(derive_seed(seed, "stimuli"));
  std::uniform_int_distribution<int> class_dist(0, static_cast<int>(config.num_classes) - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  std::vector<StimulusImage> images(n_items);
  for (auto& im : images) {
    im.class_id = class_dist(stim_rng);
    Pose& p = im.pose;
    p.size = n_d * (0.125 + 0.095 * unit(stim_rng));
    const double lo = p.size + 1.0, hi = n_d - p.size - 1.0;
    p.row = lo + (hi - lo) * unit(stim_rng);
    p.col = lo + (hi - lo) * unit(stim_rng);
    p.orientation = 0.5 * std::numbers::pi * unit(stim_rng);
    im.pixels = render_stimulus(im.class_id, p, n);
    im.caption_tokens = make_caption(im.class_id, p, n);
  }

  const auto g_dim = static_cast<Eigen::Index>(config.lvc_grid * config.lvc_grid);
  const auto h_dim = static_cast<Eigen::Index>(config.num_classes + 2 * vocabulary::kPoseBins);
  const auto d_lvc = static_cast<Eigen::Index>(config.lvc_voxels);
  const auto d_hvc = static_cast<Eigen::Index>(config.hvc_voxels);
  const auto d_all = d_lvc + d_hvc;

  auto gaussian_matrix = [](Eigen::Index rows, Eigen::Index cols, std::uint64_t s) {
    Rng rng(s);
    std::normal_distribution<double> dist(0.0, 1.0);
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
      for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = dist(rng);
    return m;
  };
  const Eigen::MatrixXd lvc_map = gaussian_matrix(d_lvc, g_dim, derive_seed(seed, "lvc_map"));
  const Eigen::MatrixXd hvc_map = gaussian_matrix(d_hvc, h_dim, derive_seed(seed, "hvc_map"));

  Eigen::MatrixXd signal(static_cast<Eigen::Index>(n_items), d_all);
  for (std::size_t i = 0; i < n_items; ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    signal.row(r).head(d_lvc) = (lvc_map * low_level_drive(images[i].pixels, config.lvc_grid)).transpose();
    signal.row(r).tail(d_hvc) =
        (hvc_map * high_level_drive(images[i].class_id, images[i].pose, config.num_classes, n)).transpose();
  }
  // Each voxel's noiseless signal is z-scored across stimuli.
  for (Eigen::Index c = 0; c < d_all; ++c) {
    auto col = signal.col(c);
    col.array() -= col.mean();
    const double sd = std::sqrt(col.squaredNorm() / static_cast<double>(col.size()));
    if (sd > 0.0) col /= sd;
  }

  Rng trial_rng(derive_seed(seed, "trials"));
  std::uniform_int_distribution<std::size_t> trial_dist(config.min_trials, config.max_trials);
  std::normal_distribution<double> noise(0.0, 1.0);
  for (std::size_t i = 0; i < n_items; ++i) {
    const std::size_t k = trial_dist(trial_rng);
    Tensor trials({k, static_cast<std::size_t>(d_all)});
    auto v = trials.values();
    for (std::size_t t = 0; t < k; ++t)
      for (Eigen::Index c = 0; c < d_all; ++c)
        v[t * static_cast<std::size_t>(d_all) + static_cast<std::size_t>(c)] =
            signal(static_cast<Eigen::Index>(i), c) + config.noise * noise(trial_rng);

    StimulusRecord rec;
    const bool is_train = i < config.train_count;
    char id[32];
    std::snprintf(id, sizeof id, "%s_%04zu", is_train ? "train" : "test", is_train ? i : i - config.train_count);
    rec.id = id;
    rec.image = std::move(images[i]);
    rec.trials = std::move(trials);
    (is_train ? data.train : data.test).push_back(std::move(rec));
  }
  return data;
}

std::vector<BrainResponse> StimulusRecord::responses(const std::vector<Roi>& labels) const {
  const std::size_t k = trials.dim(0), d = trials.dim(1);
  if (labels.size() != d) throw ContractError("ROI label count does not match voxel count");
  std::vector<BrainResponse> out;
  for (std::size_t t = 0; t < k; ++t) {
    const auto row = trials.data().subspan(t * d, d);
    out.push_back({Tensor({d}, std::vector<double>(row.begin(), row.end())), labels, 1});
  }
  return out;
}

BrainResponse average_trials(std::span<const BrainResponse> responses) {
  if (responses.empty()) throw ContractError("average_trials: no trials");
  const std::size_t d = responses.front().voxels.size();
  std::vector<double> acc(d, 0.0);
  for (const auto& r : responses) {
    if (r.voxels.size() != d) throw ContractError("average_trials: voxel counts differ");
    for (std::size_t i = 0; i < d; ++i) acc[i] += r.voxels[i];
  }
  const auto k = static_cast<double>(responses.size());
  for (auto& v : acc) v /= k;
  return {Tensor({d}, std::move(acc)), responses.front().roi_labels, static_cast<int>(responses.size())};
}

BrainResponse roi_subset(const BrainResponse& response, RoiSet rois) {
  if (rois.empty()) throw ContractError("roi_subset: empty ROI selection");
  if (response.roi_labels.size() != response.voxels.size()) throw ContractError("roi_subset: every voxel needs one ROI tag");
  std::vector<double> values;
  std::vector<Roi> labels;
  for (std::size_t i = 0; i < response.voxels.size(); ++i)
    if (rois.contains(response.roi_labels[i])) {
      values.push_back(response.voxels[i]);
      labels.push_back(response.roi_labels[i]);
    }
  if (values.empty()) throw ContractError("roi_subset: selection matches no voxels");
  const std::size_t d = values.size();
  return {Tensor({d}, std::move(values)), std::move(labels), response.trial_count};
}

std::vector<Roi> subset_labels(const std::vector<Roi>& labels, RoiSet rois) {
  std::vector<Roi> out;
  for (Roi r : labels)
    if (rois.contains(r)) out.push_back(r);
  return out;
}

Eigen::MatrixXd response_matrix(const Dataset& data, std::span<const StimulusRecord> records, RoiSet rois) {
  if (rois.empty()) throw ContractError("response_matrix: empty ROI selection");
  std::vector<Eigen::Index> keep;
  for (std::size_t i = 0; i < data.roi_labels.size(); ++i)
    if (rois.contains(data.roi_labels[i])) keep.push_back(static_cast<Eigen::Index>(i));
  Eigen::MatrixXd x(static_cast<Eigen::Index>(records.size()), static_cast<Eigen::Index>(keep.size()));
  for (std::size_t r = 0; r < records.size(); ++r) {
    const Tensor& t = records[r].trials;
    const std::size_t k = t.dim(0), d = t.dim(1);
    for (std::size_t j = 0; j < keep.size(); ++j) {
      double s = 0.0;
      for (std::size_t tr = 0; tr < k; ++tr) s += t[tr * d + static_cast<std::size_t>(keep[j])];
      x(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(j)) = s / static_cast<double>(k);
    }
  }
  return x;
}

// ---------------------------------------------------------------------------

namespace {

nlohmann::json record_json(const StimulusRecord& r) {
  return {{"class_id", r.image.class_id},
          {"caption", r.image.caption_tokens},
          {"pose", {{"row", r.image.pose.row}, {"col", r.image.pose.col}, {"size", r.image.pose.size},
                    {"orientation", r.image.pose.orientation}}},
          {"trials", r.trials.dim(0)}};
}

}  // namespace

void save_dataset(const Dataset& data, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "stimuli");
  nlohmann::json manifest;
  manifest["format"] = "mindloop-dataset-1";
  manifest["config"] = data.config;
  manifest["seed"] = data.seed;
  std::string labels;
  for (Roi r : data.roi_labels) labels += r == Roi::LVC ? 'L' : 'H';
  manifest["roi_labels"] = labels;
  manifest["vocabulary"] = vocabulary::words();
  auto& stimuli = manifest["stimuli"] = nlohmann::json::object();
  for (const char* split : {"train", "test"}) {
    const auto& records = std::string_view(split) == "train" ? data.train : data.test;
    auto& ids = manifest[split] = nlohmann::json::array();
    for (const auto& r : records) {
      ids.push_back(r.id);
      stimuli[r.id] = record_json(r);
      save_tensor(dir / "stimuli" / (r.id + ".image.mdt"), r.image.pixels);
      save_tensor(dir / "stimuli" / (r.id + ".voxels.mdt"), r.trials);
    }
  }
  std::ofstream os(dir / "manifest.json");
  if (!os) throw FormatError("cannot write " + (dir / "manifest.json").string());
  os << manifest.dump(2) << '\n';
}

Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw FormatError("no manifest.json in " + dir.string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("manifest.json: " + std::string(e.what()));
  }
  Dataset data;
  if (manifest.contains("config")) data.config = manifest["config"].get<DatasetConfig>();
  data.seed = manifest.value("seed", std::uint64_t{0});
  for (char c : manifest.at("roi_labels").get<std::string>()) {
    if (c != 'L' && c != 'H') throw FormatError("roi_labels must contain only 'L' or 'H'");
    data.roi_labels.push_back(c == 'L' ? Roi::LVC : Roi::HVC);
  }
  const auto& stimuli = manifest.at("stimuli");
  for (const char* split : {"train", "test"}) {
    auto& records = std::string_view(split) == "train" ? data.train : data.test;
    for (const auto& id_json : manifest.at(split)) {
      const auto id = id_json.get<std::string>();
      const auto& meta = stimuli.at(id);
      StimulusRecord r;
      r.id = id;
      r.image.pixels = load_tensor(dir / "stimuli" / (id + ".image.mdt"));
      r.image.class_id = meta.value("class_id", 0);
      r.image.caption_tokens = meta.value("caption", std::vector<int>{});
      if (meta.contains("pose")) {
        const auto& p = meta["pose"];
        r.image.pose = {p.value("row", 0.0), p.value("col", 0.0), p.value("size", 0.0), p.value("orientation", 0.0)};
      }
      r.trials = load_tensor(dir / "stimuli" / (id + ".voxels.mdt"));
      if (r.trials.rank() == 1) r.trials = Tensor({1, r.trials.size()}, std::vector<double>(r.trials.data().begin(), r.trials.data().end()));
      if (r.trials.dim(1) != data.roi_labels.size())
        throw FormatError(id + ": voxel count does not match roi_labels");
      records.push_back(std::move(r));
    }
  }
  if (!data.train.empty()) data.config.image_size = data.train.front().image.pixels.dim(1);
  return data;
}

}  // namespace mindloop
