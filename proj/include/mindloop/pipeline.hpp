#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "mindloop/aligner.hpp"
#include "mindloop/dataset.hpp"
#include "mindloop/decoder.hpp"
#include "mindloop/encoders.hpp"
#include "mindloop/generator.hpp"
#include "mindloop/metrics.hpp"

namespace mindloop {

struct DecoderParams {
  double lambda = 1.0;
  std::size_t voxels_per_target = 100;  // capped at D_x
  double k_percent = 25.0;
  std::size_t cv_folds = 5;
};

struct GeneratorParams {
  std::size_t T = 50;
  double beta_min = 1e-4;
  double beta_max = 0.02;
  std::size_t reverse_steps = 10;
  std::size_t latent_channels = 4;
  std::size_t ae_epochs = 12;
  double ae_lr = 1e-3;
  std::size_t ae_batch = 16;
  std::size_t denoiser_epochs = 60;
  double denoiser_lr = 2e-3;
  std::size_t denoiser_batch = 16;
  std::size_t hidden = 16;
  std::size_t bottleneck = 32;
  std::size_t key_dim = 16;
};

struct EncoderParams {
  std::size_t text_dim = 32;
  VisualEncoderConfig visual;
};

struct ExperimentConfig {
  std::uint64_t seed = 7;
  DatasetConfig dataset;
  std::string dataset_dir;  // load instead of synthesizing when set
  DecoderParams decoder;
  GeneratorParams generator;
  EncoderParams encoders;
  AlignOptions aligner;
  RoiSet roi = RoiSet::all();
  Ablation drop = Ablation::None;
  bool upper_bound = false;
  double validation_fraction = 0.125;
  std::string output_dir = "run";

  void validate() const;
};

void to_json(nlohmann::json& j, const ExperimentConfig& c);
void from_json(const nlohmann::json& j, ExperimentConfig& c);

// Canonical text form: sorted-key, indented JSON with round-trip doubles.
std::string dump_config(const ExperimentConfig& c);
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);

// Per-stage seeds fanned out from the master seed.
std::map<std::string, std::uint64_t> stage_seeds(std::uint64_t master);

/// Error raised by a pipeline stage; what() starts with the stage name.
class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, const std::string& message);
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

struct Encoders {
  TextEncoder text;
  VisualEncoder visual;
};

Encoders make_encoders(const ExperimentConfig& c);
NoiseSchedule make_schedule(const GeneratorParams& g);
DenoiserConfig denoiser_config(const ExperimentConfig& c);

Dataset obtain_dataset(const ExperimentConfig& c);
LatentAutoencoder fit_autoencoder(const ExperimentConfig& c, const Dataset& data);
Denoiser fit_denoiser(const ExperimentConfig& c, const Dataset& data, const LatentAutoencoder& ae, const Encoders& enc);

/// True feature triple of every record, one row per record.
struct FeatureTable {
  Eigen::MatrixXd c, z, zclip;
};

FeatureTable true_features(std::span<const StimulusRecord> records, const Encoders& enc, const LatentAutoencoder& ae,
                           const std::set<int>& layers);

/// Fitted voxel-to-feature decoders for one ROI selection.
struct Decoders {
  RoiSet roi;
  RidgeModel c, z, zclip;
  FeatureSelector selector;   // over Z_CLIP dims
  std::vector<bool> degenerate;  // Z_CLIP dims with zero-variance CV predictions or targets
  std::vector<std::size_t> voxel_index;  // global voxel id of each decoder input
  std::vector<int> layers;    // low-level layers, ascending
  std::vector<std::size_t> layer_sizes;

  std::map<int, std::vector<bool>> masks() const;
  std::map<int, Tensor> split_zclip(const Eigen::Ref<const Eigen::VectorXd>& flat) const;
};

Decoders fit_decoders(const ExperimentConfig& c, const Dataset& data, std::span<const StimulusRecord> train,
                      const FeatureTable& features, RoiSet roi);
void save_decoders(const Decoders& d, const std::filesystem::path& dir);
Decoders load_decoders(const std::filesystem::path& dir);

/// Trained generator components shared by every variant of a run.
struct Models {
  Encoders encoders;
  LatentAutoencoder autoencoder;
  Denoiser denoiser;
  NoiseSchedule schedule;

  Generator generator(std::size_t reverse_steps) const;
};

struct Variant {
  bool upper_bound = false;
  Ablation drop = Ablation::None;
};

// Decoded (or, in upper-bound mode, true c and Z_CLIP) features for one item.
FeatureBundle item_features(const ExperimentConfig& c, const Dataset& data, const StimulusRecord& rec,
                            const Models& models, const Decoders& dec, bool upper_bound);

std::vector<ReconstructionRecord> reconstruct_items(const ExperimentConfig& c, const Dataset& data,
                                                    std::span<const StimulusRecord> items, const Models& models,
                                                    const Decoders& dec, const Variant& v);

MetricsReport evaluate_records(const ExperimentConfig& c, std::span<const StimulusRecord> items,
                               const std::vector<ReconstructionRecord>& recs, const Models& models);

// Stimulus/draft/final PPM triplets, MDT1 images and records.json.
std::vector<std::filesystem::path> write_reconstructions(const std::filesystem::path& dir, std::span<const StimulusRecord> items,
                           const std::vector<ReconstructionRecord>& recs, const nlohmann::json& meta);
struct StoredReconstructions {
  nlohmann::json meta;
  std::vector<std::string> ids;
  std::vector<Tensor> drafts, finals;
};
StoredReconstructions read_reconstructions(const std::filesystem::path& dir);

nlohmann::json report_json(const MetricsReport& report, const ExperimentConfig& c);

struct RunOptions {
  bool resume = false;
};

struct RunSummary {
  std::filesystem::path dir;
  MetricsReport report;
  std::vector<std::string> skipped_stages;
  std::map<std::string, double> stage_seconds;
};

/// dataset → autoencoder → denoiser → decoders → reconstruct → evaluate,
/// writing config.json, manifest.json, models/, recon/ and report.json.
RunSummary run_experiment(const ExperimentConfig& c, const RunOptions& opts = {});

struct SweepRow {
  double k = 0.0;
  std::string metric;
  double accuracy = 0.0;  // mean CV accuracy of retained Z_CLIP dims
  double value = 0.0;
};

struct SweepReport {
  std::vector<SweepRow> rows;
  std::string csv() const;
};

SweepReport k_sweep(const ExperimentConfig& c, const std::vector<double>& ks);
SweepReport k_sweep(const ExperimentConfig& c, const Dataset& data, const Models& models, const std::vector<double>& ks);

struct RoiWeightRow {
  std::size_t voxel = 0;
  Roi roi = Roi::LVC;
  double c = 0.0, z = 0.0, zclip = 0.0;
};

// Mean |weight| of each voxel across all targets of each decoder; voxels a
// target did not select contribute 0 for that target.
std::vector<RoiWeightRow> export_roi_weights(const Decoders& d, const Dataset& data);
std::string roi_weights_csv(const std::vector<RoiWeightRow>& rows);

// Manifest helpers.
std::string file_checksum(const std::filesystem::path& path);

}  // namespace mindloop
