#include "mindloop/pipeline.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "mindloop/errors.hpp"
#include "mindloop/image_io.hpp"
#include "mindloop/random.hpp"
#include "mindloop/tensor_io.hpp"

namespace mindloop {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Configuration

void ExperimentConfig::validate() const {
  dataset.validate();
  if (!(decoder.lambda >= 0.0)) throw ConfigError("decoder.lambda must be >= 0");
  if (decoder.voxels_per_target == 0) throw ConfigError("decoder.voxels_per_target must be positive");
  if (!(decoder.k_percent > 0.0 && decoder.k_percent <= 100.0)) throw ConfigError("decoder.k_percent must be in (0, 100]");
  if (decoder.cv_folds < 2) throw ConfigError("decoder.cv_folds must be at least 2");
  if (generator.T < 1 || generator.reverse_steps < 1) throw ConfigError("generator.T and reverse_steps must be positive");
  if (!(generator.beta_min > 0.0 && generator.beta_min <= generator.beta_max && generator.beta_max < 1.0))
    throw ConfigError("generator: need 0 < beta_min <= beta_max < 1");
  if (!(generator.ae_lr >= 0.0 && generator.denoiser_lr >= 0.0)) throw ConfigError("generator: learning rates must be >= 0");
  if (dataset.image_size % 4 != 0) throw ConfigError("dataset.image_size must be a multiple of 4");
  if (!(aligner.lr > 0.0) || aligner.max_steps < 1 || !(aligner.tol >= 0.0) || aligner.window < 1)
    throw ConfigError("aligner: need lr > 0, max_steps >= 1, tol >= 0, window >= 1");
  if (roi.empty()) throw ConfigError("roi must select at least one ROI");
  if (!(validation_fraction > 0.0 && validation_fraction < 1.0)) throw ConfigError("validation_fraction must be in (0, 1)");
}

void to_json(json& j, const ExperimentConfig& c) {
  const auto& d = c.decoder;
  const auto& g = c.generator;
  j = {{"seed", c.seed},
       {"dataset", c.dataset},
       {"dataset_dir", c.dataset_dir},
       {"decoder",
        {{"lambda", d.lambda}, {"voxels_per_target", d.voxels_per_target}, {"k_percent", d.k_percent}, {"cv_folds", d.cv_folds}}},
       {"generator",
        {{"T", g.T},
         {"beta_min", g.beta_min},
         {"beta_max", g.beta_max},
         {"reverse_steps", g.reverse_steps},
         {"latent_channels", g.latent_channels},
         {"ae_epochs", g.ae_epochs},
         {"ae_lr", g.ae_lr},
         {"ae_batch", g.ae_batch},
         {"denoiser_epochs", g.denoiser_epochs},
         {"denoiser_lr", g.denoiser_lr},
         {"denoiser_batch", g.denoiser_batch},
         {"hidden", g.hidden},
         {"bottleneck", g.bottleneck},
         {"key_dim", g.key_dim}}},
       {"encoders", {{"text_dim", c.encoders.text_dim}, {"visual", c.encoders.visual}}},
       {"aligner", c.aligner},
       {"ablation", {{"roi", c.roi.name()}, {"drop", ablation_name(c.drop)}, {"upper_bound", c.upper_bound}}},
       {"validation_fraction", c.validation_fraction},
       {"output_dir", c.output_dir}};
}

namespace {

void reject_unknown(const json& j, std::initializer_list<const char*> keys, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [k, _] : j.items()) {
    bool known = false;
    for (const char* key : keys) known = known || k == key;
    if (!known) throw ConfigError("unknown config key '" + where + k + "'");
  }
}

}  // namespace

void from_json(const json& j, ExperimentConfig& c) {
  reject_unknown(j,
                 {"seed", "dataset", "dataset_dir", "decoder", "generator", "encoders", "aligner", "ablation",
                  "validation_fraction", "output_dir"},
                 "");
  ExperimentConfig d;
  c.seed = j.value("seed", d.seed);
  c.dataset = j.value("dataset", d.dataset);
  c.dataset_dir = j.value("dataset_dir", d.dataset_dir);
  if (j.contains("decoder")) {
    const auto& x = j["decoder"];
    reject_unknown(x, {"lambda", "voxels_per_target", "k_percent", "cv_folds"}, "decoder.");
    c.decoder.lambda = x.value("lambda", d.decoder.lambda);
    c.decoder.voxels_per_target = x.value("voxels_per_target", d.decoder.voxels_per_target);
    c.decoder.k_percent = x.value("k_percent", d.decoder.k_percent);
    c.decoder.cv_folds = x.value("cv_folds", d.decoder.cv_folds);
  }
  if (j.contains("generator")) {
    const auto& x = j["generator"];
    const auto& g = d.generator;
    reject_unknown(x,
                   {"T", "beta_min", "beta_max", "reverse_steps", "latent_channels", "ae_epochs", "ae_lr", "ae_batch",
                    "denoiser_epochs", "denoiser_lr", "denoiser_batch", "hidden", "bottleneck", "key_dim"},
                   "generator.");
    c.generator.T = x.value("T", g.T);
    c.generator.beta_min = x.value("beta_min", g.beta_min);
    c.generator.beta_max = x.value("beta_max", g.beta_max);
    c.generator.reverse_steps = x.value("reverse_steps", g.reverse_steps);
    c.generator.latent_channels = x.value("latent_channels", g.latent_channels);
    c.generator.ae_epochs = x.value("ae_epochs", g.ae_epochs);
    c.generator.ae_lr = x.value("ae_lr", g.ae_lr);
    c.generator.ae_batch = x.value("ae_batch", g.ae_batch);
    c.generator.denoiser_epochs = x.value("denoiser_epochs", g.denoiser_epochs);
    c.generator.denoiser_lr = x.value("denoiser_lr", g.denoiser_lr);
    c.generator.denoiser_batch = x.value("denoiser_batch", g.denoiser_batch);
    c.generator.hidden = x.value("hidden", g.hidden);
    c.generator.bottleneck = x.value("bottleneck", g.bottleneck);
    c.generator.key_dim = x.value("key_dim", g.key_dim);
  }
  if (j.contains("encoders")) {
    const auto& x = j["encoders"];
    reject_unknown(x, {"text_dim", "visual"}, "encoders.");
    c.encoders.text_dim = x.value("text_dim", d.encoders.text_dim);
    c.encoders.visual = x.value("visual", d.encoders.visual);
  }
  c.aligner = j.value("aligner", d.aligner);
  if (j.contains("ablation")) {
    const auto& x = j["ablation"];
    reject_unknown(x, {"roi", "drop", "upper_bound"}, "ablation.");
    c.roi = RoiSet::parse(x.value("roi", std::string("all")));
    c.drop = parse_ablation(x.value("drop", std::string("none")));
    c.upper_bound = x.value("upper_bound", false);
  }
  c.validation_fraction = j.value("validation_fraction", d.validation_fraction);
  c.output_dir = j.value("output_dir", d.output_dir);
}

std::string dump_config(const ExperimentConfig& c) { return json(c).dump(2) + "\n"; }

ExperimentConfig parse_config(const std::string& text) {
  try {
    return json::parse(text).get<ExperimentConfig>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str());
}

std::map<std::string, std::uint64_t> stage_seeds(std::uint64_t master) {
  std::map<std::string, std::uint64_t> out;
  for (const char* stage : {"dataset", "autoencoder", "denoiser", "text_encoder", "visual_encoder", "eps"})
    out[stage] = derive_seed(master, stage);
  return out;
}

StageError::StageError(std::string stage, const std::string& message)
    : std::runtime_error(stage + ": " + message), stage_(std::move(stage)) {}

// ---------------------------------------------------------------------------
// Components

Encoders make_encoders(const ExperimentConfig& c) {
  const auto seeds = stage_seeds(c.seed);
  return {TextEncoder(vocabulary::words().size(), c.encoders.text_dim, c.dataset.max_tokens, seeds.at("text_encoder")),
          VisualEncoder(3, c.encoders.visual, seeds.at("visual_encoder"))};
}

NoiseSchedule make_schedule(const GeneratorParams& g) { return make_schedule(g.T, g.beta_min, g.beta_max); }

DenoiserConfig denoiser_config(const ExperimentConfig& c) {
  DenoiserConfig d;
  d.latent_channels = c.generator.latent_channels;
  d.latent_size = c.dataset.image_size / 4;
  d.cond_tokens = c.dataset.max_tokens;
  d.cond_dim = c.encoders.text_dim;
  d.steps = c.generator.T;
  d.hidden = c.generator.hidden;
  d.bottleneck = c.generator.bottleneck;
  d.key_dim = c.generator.key_dim;
  return d;
}

Dataset obtain_dataset(const ExperimentConfig& c) {
  if (!c.dataset_dir.empty()) return load_dataset(c.dataset_dir);
  return synthesize(c.dataset, stage_seeds(c.seed).at("dataset"));
}

LatentAutoencoder fit_autoencoder(const ExperimentConfig& c, const Dataset& data) {
  std::vector<Tensor> images;
  for (const auto& r : data.train) images.push_back(r.image.pixels);
  AutoencoderTraining opts;
  opts.epochs = c.generator.ae_epochs;
  opts.lr = c.generator.ae_lr;
  opts.batch_size = c.generator.ae_batch;
  opts.seed = stage_seeds(c.seed).at("autoencoder");
  return train_autoencoder(images, c.generator.latent_channels, opts).model;
}

Denoiser fit_denoiser(const ExperimentConfig& c, const Dataset& data, const LatentAutoencoder& ae, const Encoders& enc) {
  std::vector<Tensor> latents, conds;
  {
    NoGradGuard guard;
    for (const auto& r : data.train) {
      latents.push_back(ae.encode(r.image.pixels));
      conds.push_back(enc.text.encode(r.image.caption_tokens));
    }
  }
  DenoiserTraining opts;
  opts.epochs = c.generator.denoiser_epochs;
  opts.lr = c.generator.denoiser_lr;
  opts.batch_size = c.generator.denoiser_batch;
  opts.seed = stage_seeds(c.seed).at("denoiser");
  return train_denoiser(latents, conds, make_schedule(c.generator), denoiser_config(c), opts).model;
}

namespace {

void put_row(Eigen::MatrixXd& m, Eigen::Index row, const Tensor& t) {
  if (m.cols() != static_cast<Eigen::Index>(t.size())) m.conservativeResize(Eigen::NoChange, static_cast<Eigen::Index>(t.size()));
  m.row(row) = Eigen::Map<const Eigen::RowVectorXd>(t.data().data(), static_cast<Eigen::Index>(t.size()));
}

Tensor vector_tensor(const Eigen::Ref<const Eigen::VectorXd>& v, Shape shape) {
  return Tensor(std::move(shape), std::vector<double>(v.data(), v.data() + v.size()));
}

Tensor concat_layers(const LayerFeatures& feats) {
  std::vector<Tensor> parts;
  for (const auto& [_, f] : feats) parts.push_back(f);
  return concat(parts, 0);
}

}  // namespace

FeatureTable true_features(std::span<const StimulusRecord> records, const Encoders& enc, const LatentAutoencoder& ae,
                           const std::set<int>& layers) {
  NoGradGuard guard;
  FeatureTable f;
  const auto n = static_cast<Eigen::Index>(records.size());
  f.c.resize(n, 0), f.z.resize(n, 0), f.zclip.resize(n, 0);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& img = records[static_cast<std::size_t>(i)].image;
    put_row(f.c, i, enc.text.encode(img.caption_tokens));
    put_row(f.z, i, ae.encode(img.pixels));
    put_row(f.zclip, i, concat_layers(enc.visual.encode(img.pixels, layers)));
  }
  return f;
}

std::map<int, std::vector<bool>> Decoders::masks() const {
  std::map<int, std::vector<bool>> out;
  std::size_t offset = 0;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    out[layers[i]] = std::vector<bool>(selector.mask.begin() + static_cast<std::ptrdiff_t>(offset),
                                       selector.mask.begin() + static_cast<std::ptrdiff_t>(offset + layer_sizes[i]));
    offset += layer_sizes[i];
  }
  return out;
}

std::map<int, Tensor> Decoders::split_zclip(const Eigen::Ref<const Eigen::VectorXd>& flat) const {
  std::map<int, Tensor> out;
  Eigen::Index offset = 0;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto len = static_cast<Eigen::Index>(layer_sizes[i]);
    out.emplace(layers[i], vector_tensor(flat.segment(offset, len), {layer_sizes[i]}));
    offset += len;
  }
  if (offset != flat.size()) throw ShapeError("split_zclip: feature length does not match layer sizes");
  return out;
}

Decoders fit_decoders(const ExperimentConfig& c, const Dataset& data, std::span<const StimulusRecord> train,
                      const FeatureTable& features, RoiSet roi) {
  Decoders d;
  d.roi = roi;
  for (std::size_t i = 0; i < data.roi_labels.size(); ++i)
    if (roi.contains(data.roi_labels[i])) d.voxel_index.push_back(i);
  const auto& layers = c.encoders.visual.low_level_layers;
  d.layers.assign(layers.begin(), layers.end());
  const Encoders enc = make_encoders(c);
  for (int l : d.layers) d.layer_sizes.push_back(enc.visual.layer_dim(l, c.dataset.image_size));

  const Eigen::MatrixXd x = response_matrix(data, train, roi);
  const std::size_t vpt = std::min<std::size_t>(c.decoder.voxels_per_target, static_cast<std::size_t>(x.cols()));
  const double lambda = c.decoder.lambda;
  d.c = fit_ridge(x, features.c, lambda, vpt);
  d.z = fit_ridge(x, features.z, lambda, vpt);
  d.zclip = fit_ridge(x, features.zclip, lambda, vpt);
  const CvResult cv = cv_accuracy(x, features.zclip, c.decoder.cv_folds, lambda, vpt);
  d.degenerate = cv.degenerate;
  d.selector = select_top_k(cv.accuracy, c.decoder.k_percent, cv.degenerate);
  return d;
}

void save_decoders(const Decoders& d, const fs::path& dir) {
  fs::create_directories(dir);
  save_ridge(dir, "c", d.c);
  save_ridge(dir, "z", d.z);
  save_ridge(dir, "zclip", d.zclip, d.selector);
  std::string degenerate;
  for (bool b : d.degenerate) degenerate += b ? '1' : '0';
  const json meta{{"roi", d.roi.name()},
                  {"layers", d.layers},
                  {"layer_sizes", d.layer_sizes},
                  {"voxel_index", d.voxel_index},
                  {"degenerate", degenerate}};
  std::ofstream os(dir / "decoders.json");
  if (!os) throw FormatError("cannot write " + (dir / "decoders.json").string());
  os << meta.dump(2) << '\n';
}

Decoders load_decoders(const fs::path& dir) {
  std::ifstream is(dir / "decoders.json");
  if (!is) throw FormatError("no decoders.json in " + dir.string());
  const json meta = json::parse(is);
  Decoders d;
  d.roi = RoiSet::parse(meta.at("roi").get<std::string>());
  d.layers = meta.at("layers").get<std::vector<int>>();
  d.layer_sizes = meta.at("layer_sizes").get<std::vector<std::size_t>>();
  d.voxel_index = meta.at("voxel_index").get<std::vector<std::size_t>>();
  for (char ch : meta.at("degenerate").get<std::string>()) d.degenerate.push_back(ch == '1');
  d.c = load_ridge(dir, "c");
  d.z = load_ridge(dir, "z");
  std::optional<FeatureSelector> sel;
  d.zclip = load_ridge(dir, "zclip", &sel);
  if (!sel) throw FormatError("zclip decoder in " + dir.string() + " has no feature selector");
  d.selector = *sel;
  return d;
}

Generator Models::generator(std::size_t reverse_steps) const {
  return Generator{&autoencoder, &denoiser, schedule, reverse_steps};
}

FeatureBundle item_features(const ExperimentConfig& c, const Dataset& data, const StimulusRecord& rec,
                            const Models& models, const Decoders& dec, bool upper_bound) {
  const Eigen::VectorXd x = response_matrix(data, std::span(&rec, 1), dec.roi).row(0).transpose();
  FeatureBundle fb;
  fb.z = vector_tensor(dec.z.predict(x), models.autoencoder.latent_shape());
  if (upper_bound) {
    NoGradGuard guard;
    fb.c = models.encoders.text.encode(rec.image.caption_tokens);
    const std::set<int> layers(dec.layers.begin(), dec.layers.end());
    fb.zclip = models.encoders.visual.encode(rec.image.pixels, layers);
  } else {
    fb.c = vector_tensor(dec.c.predict(x), {c.dataset.max_tokens, c.encoders.text_dim});
    fb.zclip = dec.split_zclip(dec.zclip.predict(x));
  }
  return fb;
}

std::vector<ReconstructionRecord> reconstruct_items(const ExperimentConfig& c, const Dataset& data,
                                                    std::span<const StimulusRecord> items, const Models& models,
                                                    const Decoders& dec, const Variant& v) {
  const Generator gen = models.generator(c.generator.reverse_steps);
  const auto masks = dec.masks();
  const std::uint64_t eps_seed = stage_seeds(c.seed).at("eps");
  std::vector<ReconstructionRecord> out;
  out.reserve(items.size());
  for (const auto& rec : items) {
    const FeatureBundle fb = item_features(c, data, rec, models, dec, v.upper_bound);
    Rng rng(derive_seed(eps_seed, rec.id));
    const Tensor eps = Tensor::randn(models.autoencoder.latent_shape(), rng);
    out.push_back(reconstruct(rec.id, fb, masks, gen, models.encoders.visual, eps, c.aligner, v.drop));
  }
  return out;
}

MetricsReport evaluate_records(const ExperimentConfig& c, std::span<const StimulusRecord> items,
                               const std::vector<ReconstructionRecord>& recs, const Models& models) {
  if (items.size() != recs.size()) throw ContractError("evaluate: record count differs from item count");
  std::vector<std::string> ids;
  std::vector<Tensor> stimuli, finals;
  for (std::size_t i = 0; i < items.size(); ++i) {
    ids.push_back(items[i].id);
    stimuli.push_back(items[i].image.pixels);
    finals.push_back(recs[i].final_image);
  }
  return evaluate(ids, stimuli, finals, models.encoders.visual, stage_seeds(c.seed).at("visual_encoder"),
                  c.dataset.image_size);
}

namespace {

void write_text(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw FormatError("cannot write " + path.string());
    os << text;
    if (!os) throw FormatError("short write to " + path.string());
  }
  fs::rename(tmp, path);
}

json read_json(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("cannot read " + path.string());
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace

std::vector<fs::path> write_reconstructions(const fs::path& dir, std::span<const StimulusRecord> items,
                                            const std::vector<ReconstructionRecord>& recs, const json& meta) {
  if (items.size() != recs.size()) throw ContractError("write_reconstructions: record count differs from item count");
  fs::create_directories(dir);
  std::vector<fs::path> files;
  json records = json::array();
  for (std::size_t i = 0; i < recs.size(); ++i) {
    const auto& r = recs[i];
    const std::pair<const char*, const Tensor*> images[] = {
        {"stimulus", &items[i].image.pixels}, {"draft", &r.draft}, {"final", &r.final_image}};
    for (const auto& [tag, img] : images) {
      files.push_back(dir / (r.id + "_" + tag + ".ppm"));
      write_pnm(files.back(), *img);
    }
    for (const auto& [tag, img] : {std::pair{"draft", &r.draft}, std::pair{"final", &r.final_image}}) {
      files.push_back(dir / (r.id + "." + tag + ".mdt"));
      save_tensor(files.back(), *img);
    }
    records.push_back({{"id", r.id}, {"trace", r.trace}, {"best_step", r.best_step}});
  }
  files.push_back(dir / "records.json");
  write_text(files.back(), json{{"meta", meta}, {"records", records}}.dump(2) + "\n");
  return files;
}

StoredReconstructions read_reconstructions(const fs::path& dir) {
  const json j = read_json(dir / "records.json");
  StoredReconstructions out;
  out.meta = j.value("meta", json::object());
  for (const auto& r : j.at("records")) {
    const auto id = r.at("id").get<std::string>();
    out.ids.push_back(id);
    out.drafts.push_back(load_tensor(dir / (id + ".draft.mdt")));
    out.finals.push_back(load_tensor(dir / (id + ".final.mdt")));
  }
  return out;
}

json report_json(const MetricsReport& report, const ExperimentConfig& c) {
  json j = report;
  j["variant"] = {{"roi", c.roi.name()}, {"drop", ablation_name(c.drop)}, {"upper_bound", c.upper_bound}};
  j["seed"] = c.seed;
  return j;
}

std::string file_checksum(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot read " + path.string());
  std::uint64_t h = 0xcbf29ce484222325ULL;
  std::vector<char> buf(1 << 16);
  while (is) {
    is.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    const auto got = static_cast<std::size_t>(is.gcount());
    h = fnv1a64(std::span(reinterpret_cast<const unsigned char*>(buf.data()), got), h);
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

// ---------------------------------------------------------------------------
// Run directory

namespace {

class RunLock {
 public:
  explicit RunLock(fs::path path) : path_(std::move(path)) {
    std::FILE* f = std::fopen(path_.c_str(), "wx");
    if (!f) throw StageError("lock", "run directory is in use (remove " + path_.string() + " if stale)");
    std::fclose(f);
  }
  ~RunLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  fs::path path_;
};

std::vector<fs::path> walk(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  return files;
}

class Manifest {
 public:
  Manifest(fs::path root, const ExperimentConfig& c, bool keep) : root_(std::move(root)) {
    config_hash_ = std::to_string(fnv1a64(dump_config(c)));
    if (keep && fs::exists(path())) {
      try {
        data_ = read_json(path());
      } catch (const FormatError&) {
        data_ = json::object();
      }
    }
    if (data_.value("config_hash", "") != config_hash_) data_ = json::object();
    data_["config_hash"] = config_hash_;
    json seeds;
    for (const auto& [k, v] : stage_seeds(c.seed)) seeds[k] = v;
    data_["seeds"] = seeds;
    if (!data_.contains("stages")) data_["stages"] = json::object();
  }

  bool valid(const std::string& stage) const {
    if (!data_["stages"].contains(stage)) return false;
    for (const auto& [rel, sum] : data_["stages"][stage]["files"].items()) {
      const fs::path p = root_ / rel;
      if (!fs::exists(p) || file_checksum(p) != sum.get<std::string>()) return false;
    }
    return true;
  }

  void invalidate(const std::string& stage) {
    data_["stages"].erase(stage);
    save();
  }

  void complete(const std::string& stage, const std::vector<fs::path>& files, double seconds) {
    json entry{{"files", json::object()}, {"seconds", seconds}};
    for (const auto& f : files) entry["files"][fs::relative(f, root_).generic_string()] = file_checksum(f);
    data_["stages"][stage] = entry;
    save();
  }

  void save() const { write_text(path(), data_.dump(2) + "\n"); }

 private:
  fs::path path() const { return root_ / "manifest.json"; }

  fs::path root_;
  std::string config_hash_;
  json data_ = json::object();
};

template <class F>
auto guarded(const std::string& stage, F&& f) {
  try {
    return f();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(stage, e.what());
  }
}

}  // namespace

RunSummary run_experiment(const ExperimentConfig& c, const RunOptions& opts) {
  guarded("config", [&] {
    c.validate();
    return 0;
  });
  RunSummary summary;
  summary.dir = c.output_dir;
  const fs::path root = c.output_dir;
  fs::create_directories(root);
  RunLock lock(root / ".lock");
  write_text(root / "config.json", dump_config(c));
  Manifest manifest(root, c, opts.resume);
  manifest.save();

  bool fresh = !opts.resume;
  auto stage = [&](const std::string& name, auto&& compute, auto&& load) {
    using Clock = std::chrono::steady_clock;
    const auto t0 = Clock::now();
    if (!fresh && manifest.valid(name)) {
      auto out = guarded(name, load);
      summary.skipped_stages.push_back(name);
      summary.stage_seconds[name] = std::chrono::duration<double>(Clock::now() - t0).count();
      return out;
    }
    fresh = true;
    manifest.invalidate(name);
    std::vector<fs::path> files;
    auto out = guarded(name, [&] { return compute(files); });
    const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
    summary.stage_seconds[name] = secs;
    manifest.complete(name, files, secs);
    return out;
  };
  const fs::path models_dir = root / "models";
  const fs::path recon_dir = root / "recon";

  const Dataset data = stage(
      "dataset",
      [&](std::vector<fs::path>& files) {
        Dataset d = obtain_dataset(c);
        save_dataset(d, root / "dataset");
        files = walk(root / "dataset");
        return d;
      },
      [&] { return load_dataset(root / "dataset"); });

  const Encoders encoders = make_encoders(c);
  LatentAutoencoder ae = stage(
      "autoencoder",
      [&](std::vector<fs::path>& files) {
        fs::create_directories(models_dir);
        write_text(models_dir / "config.json", dump_config(c));
        LatentAutoencoder m = fit_autoencoder(c, data);
        m.save(models_dir / "autoencoder.json");
        files = {models_dir / "config.json", models_dir / "autoencoder.json", models_dir / "autoencoder.json.bin"};
        return m;
      },
      [&] { return LatentAutoencoder::load(models_dir / "autoencoder.json"); });

  Denoiser den = stage(
      "denoiser",
      [&](std::vector<fs::path>& files) {
        Denoiser m = fit_denoiser(c, data, ae, encoders);
        m.save(models_dir / "denoiser.json");
        files = {models_dir / "denoiser.json", models_dir / "denoiser.json.bin"};
        return m;
      },
      [&] { return Denoiser::load(models_dir / "denoiser.json"); });

  const Models models{encoders, std::move(ae), std::move(den), make_schedule(c.generator)};

  const Decoders dec = stage(
      "decoders",
      [&](std::vector<fs::path>& files) {
        const FeatureTable f = true_features(data.train, models.encoders, models.autoencoder,
                                             c.encoders.visual.low_level_layers);
        Decoders d = fit_decoders(c, data, data.train, f, c.roi);
        const fs::path dir = models_dir / ("decoders_" + c.roi.name());
        save_decoders(d, dir);
        write_text(root / "roi_weights.csv", roi_weights_csv(export_roi_weights(d, data)));
        files = walk(dir);
        files.push_back(root / "roi_weights.csv");
        return d;
      },
      [&] { return load_decoders(models_dir / ("decoders_" + c.roi.name())); });

  const std::vector<Tensor> finals = stage(
      "reconstruct",
      [&](std::vector<fs::path>& files) {
        const auto recs = reconstruct_items(c, data, data.test, models, dec, Variant{c.upper_bound, c.drop});
        files = write_reconstructions(recon_dir, data.test, recs, json{{"config", json(c)}});
        std::vector<Tensor> out;
        for (const auto& r : recs) out.push_back(r.final_image);
        return out;
      },
      [&] { return read_reconstructions(recon_dir).finals; });

  summary.report = stage(
      "evaluate",
      [&](std::vector<fs::path>& files) {
        std::vector<std::string> ids;
        std::vector<Tensor> stimuli;
        for (const auto& r : data.test) ids.push_back(r.id), stimuli.push_back(r.image.pixels);
        MetricsReport report = evaluate(ids, stimuli, finals, models.encoders.visual,
                                        stage_seeds(c.seed).at("visual_encoder"), c.dataset.image_size);
        write_text(root / "report.json", report_json(report, c).dump(2) + "\n");
        files = {root / "report.json"};
        return report;
      },
      [&] { return read_json(root / "report.json").get<MetricsReport>(); });
  return summary;
}

// ---------------------------------------------------------------------------
// k sweep

std::string SweepReport::csv() const {
  std::ostringstream os;
  os << std::setprecision(10);
  os << "k,metric,decoding_accuracy,value\n";
  for (const auto& r : rows) os << r.k << ',' << r.metric << ',' << r.accuracy << ',' << r.value << '\n';
  return os.str();
}

SweepReport k_sweep(const ExperimentConfig& c, const Dataset& data, const Models& models, const std::vector<double>& ks) {
  if (ks.empty()) throw ContractError("k_sweep: no k values");
  for (double k : ks)
    if (!(k > 0.0 && k <= 100.0)) throw ContractError("k_sweep: every k must be in (0, 100]");
  const std::size_t n = data.train.size();
  const auto n_val = static_cast<std::size_t>(std::ceil(static_cast<double>(n) * c.validation_fraction));
  if (n_val == 0 || n_val >= n) throw ContractError("k_sweep: validation split is empty or covers all training data");
  const std::span<const StimulusRecord> fit(data.train.data(), n - n_val);
  const std::span<const StimulusRecord> val(data.train.data() + (n - n_val), n_val);

  const FeatureTable f = true_features(fit, models.encoders, models.autoencoder, c.encoders.visual.low_level_layers);
  Decoders dec = fit_decoders(c, data, fit, f, c.roi);
  SweepReport report;
  for (double k : ks) {
    dec.selector = select_top_k(dec.selector.accuracy, k, dec.degenerate);
    const auto recs = reconstruct_items(c, data, val, models, dec, Variant{c.upper_bound, c.drop});
    const MetricsReport m = evaluate_records(c, val, recs, models);
    double acc = 0.0;
    const auto kept = dec.selector.retained();
    for (auto i : kept) acc += dec.selector.accuracy[static_cast<Eigen::Index>(i)];
    acc /= static_cast<double>(kept.size());
    report.rows.push_back({k, "clip_sim", acc, m.mean_clip_sim});
    report.rows.push_back({k, "ssim", acc, m.mean_ssim});
    report.rows.push_back({k, "pcc", acc, m.mean_pcc});
  }
  return report;
}

SweepReport k_sweep(const ExperimentConfig& c, const std::vector<double>& ks) {
  c.validate();
  const Dataset data = obtain_dataset(c);
  const Encoders enc = make_encoders(c);
  LatentAutoencoder ae = fit_autoencoder(c, data);
  Denoiser den = fit_denoiser(c, data, ae, enc);
  const Models models{enc, std::move(ae), std::move(den), make_schedule(c.generator)};
  return k_sweep(c, data, models, ks);
}

// ---------------------------------------------------------------------------
// ROI weights

std::vector<RoiWeightRow> export_roi_weights(const Decoders& d, const Dataset& data) {
  std::vector<RoiWeightRow> rows(data.roi_labels.size());
  for (std::size_t v = 0; v < rows.size(); ++v) rows[v].voxel = v, rows[v].roi = data.roi_labels[v];
  auto accumulate = [&](const RidgeModel& m, double RoiWeightRow::*field) {
    if (m.targets.empty()) return;
    for (const auto& t : m.targets)
      for (std::size_t j = 0; j < t.voxels.size(); ++j)
        rows.at(d.voxel_index.at(static_cast<std::size_t>(t.voxels[j]))).*field += std::abs(t.weights[static_cast<Eigen::Index>(j)]);
    for (auto& r : rows) r.*field /= static_cast<double>(m.targets.size());
  };
  accumulate(d.c, &RoiWeightRow::c);
  accumulate(d.z, &RoiWeightRow::z);
  accumulate(d.zclip, &RoiWeightRow::zclip);
  return rows;
}

std::string roi_weights_csv(const std::vector<RoiWeightRow>& rows) {
  std::ostringstream os;
  os << std::setprecision(10);
  os << "voxel,roi,c,z,zclip\n";
  for (const auto& r : rows) os << r.voxel << ',' << to_string(r.roi) << ',' << r.c << ',' << r.z << ',' << r.zclip << '\n';
  return os.str();
}

}  // namespace mindloop
