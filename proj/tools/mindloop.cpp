#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "mindloop/errors.hpp"
#include "mindloop/pipeline.hpp"

using namespace mindloop;
namespace fs = std::filesystem;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;

  void attach(CLI::App* app) {
    app->add_option("--config", config, "Experiment config (JSON)")->check(CLI::ExistingFile);
    app->add_option("--seed", seed, "Master seed");
  }

  ExperimentConfig load() const {
    ExperimentConfig c = config.empty() ? ExperimentConfig{} : load_config(config);
    if (seed) c.seed = *seed;
    return c;
  }
};

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw FormatError("cannot write " + path.string());
  os << text;
}

Models load_models(const ExperimentConfig& c, const fs::path& dir) {
  return Models{make_encoders(c), LatentAutoencoder::load(dir / "autoencoder.json"), Denoiser::load(dir / "denoiser.json"),
                make_schedule(c.generator)};
}

ExperimentConfig models_config(const Common& common, const fs::path& models) {
  if (!common.config.empty() || !fs::exists(models / "config.json")) return common.load();
  ExperimentConfig c = load_config(models / "config.json");
  if (common.seed) c.seed = *common.seed;
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mindloop: two-stage brain-to-image reconstruction at desk scale"};
  app.require_subcommand(1);
  std::string stage = "mindloop";

  // synth-data
  Common synth_common;
  std::string synth_out;
  std::optional<double> synth_noise;
  auto* synth = app.add_subcommand("synth-data", "Synthesize a toy dataset");
  synth_common.attach(synth);
  synth->add_option("--out", synth_out, "Output directory")->required();
  synth->add_option("--noise", synth_noise, "Response noise relative to signal std");
  synth->callback([&] {
    ExperimentConfig c = synth_common.load();
    if (synth_noise) c.dataset.noise = *synth_noise;
    c.dataset_dir.clear();
    save_dataset(obtain_dataset(c), synth_out);
    std::cout << "wrote dataset to " << synth_out << "\n";
  });

  // train-ae
  Common ae_common;
  std::string ae_dataset, ae_out;
  std::optional<std::size_t> ae_epochs;
  std::optional<double> ae_lr;
  auto* train_ae = app.add_subcommand("train-ae", "Train the latent autoencoder");
  ae_common.attach(train_ae);
  train_ae->add_option("--dataset", ae_dataset, "Dataset directory")->required();
  train_ae->add_option("--out", ae_out, "Checkpoint path")->required();
  train_ae->add_option("--epochs", ae_epochs);
  train_ae->add_option("--lr", ae_lr);
  train_ae->callback([&] {
    ExperimentConfig c = ae_common.load();
    if (ae_epochs) c.generator.ae_epochs = *ae_epochs;
    if (ae_lr) c.generator.ae_lr = *ae_lr;
    const Dataset data = load_dataset(ae_dataset);
    if (fs::path(ae_out).has_parent_path()) fs::create_directories(fs::path(ae_out).parent_path());
    fit_autoencoder(c, data).save(ae_out);
    std::cout << "wrote " << ae_out << "\n";
  });

  // train-denoiser
  Common den_common;
  std::string den_dataset, den_ae, den_out;
  std::optional<std::size_t> den_T, den_epochs;
  std::optional<double> den_lr;
  auto* train_den = app.add_subcommand("train-denoiser", "Train the conditional noise predictor");
  den_common.attach(train_den);
  train_den->add_option("--dataset", den_dataset)->required();
  train_den->add_option("--ae", den_ae, "Autoencoder checkpoint")->required()->check(CLI::ExistingFile);
  train_den->add_option("--T", den_T, "Diffusion steps");
  train_den->add_option("--out", den_out)->required();
  train_den->add_option("--epochs", den_epochs);
  train_den->add_option("--lr", den_lr);
  train_den->callback([&] {
    ExperimentConfig c = den_common.load();
    if (den_T) c.generator.T = *den_T;
    if (den_epochs) c.generator.denoiser_epochs = *den_epochs;
    if (den_lr) c.generator.denoiser_lr = *den_lr;
    const Dataset data = load_dataset(den_dataset);
    const LatentAutoencoder ae = LatentAutoencoder::load(den_ae);
    if (fs::path(den_out).has_parent_path()) fs::create_directories(fs::path(den_out).parent_path());
    fit_denoiser(c, data, ae, make_encoders(c)).save(den_out);
    std::cout << "wrote " << den_out << "\n";
  });

  // fit-decoders
  Common fit_common;
  std::string fit_dataset, fit_ae, fit_out, fit_roi = "all";
  std::optional<double> fit_lambda, fit_k;
  std::optional<std::size_t> fit_vpt;
  auto* fit = app.add_subcommand("fit-decoders", "Fit voxel-to-feature ridge decoders");
  fit_common.attach(fit);
  fit->add_option("--dataset", fit_dataset)->required();
  fit->add_option("--ae", fit_ae, "Autoencoder checkpoint (defines z)")->required()->check(CLI::ExistingFile);
  fit->add_option("--lambda", fit_lambda);
  fit->add_option("--voxels-per-target", fit_vpt);
  fit->add_option("--k-percent", fit_k);
  fit->add_option("--roi", fit_roi)->check(CLI::IsMember({"all", "lvc", "hvc"}));
  fit->add_option("--out", fit_out)->required();
  fit->callback([&] {
    ExperimentConfig c = fit_common.load();
    if (fit_lambda) c.decoder.lambda = *fit_lambda;
    if (fit_vpt) c.decoder.voxels_per_target = *fit_vpt;
    if (fit_k) c.decoder.k_percent = *fit_k;
    c.roi = RoiSet::parse(fit_roi);
    c.validate();
    const Dataset data = load_dataset(fit_dataset);
    const Encoders enc = make_encoders(c);
    const LatentAutoencoder ae = LatentAutoencoder::load(fit_ae);
    const FeatureTable f = true_features(data.train, enc, ae, c.encoders.visual.low_level_layers);
    const Decoders d = fit_decoders(c, data, data.train, f, c.roi);
    save_decoders(d, fit_out);
    std::cout << "wrote decoders to " << fit_out << " (" << d.selector.count() << " of " << d.selector.mask.size()
              << " structural dims retained)\n";
  });

  // reconstruct
  Common rec_common;
  std::string rec_dataset, rec_models, rec_out, rec_mode = "decoded", rec_ablate = "none", rec_roi = "all";
  auto* rec = app.add_subcommand("reconstruct", "Two-stage reconstruction of the test split");
  rec_common.attach(rec);
  rec->add_option("--dataset", rec_dataset)->required();
  rec->add_option("--models", rec_models, "Directory with autoencoder.json, denoiser.json, decoders_<roi>/")->required();
  rec->add_option("--mode", rec_mode)->check(CLI::IsMember({"decoded", "upper-bound"}));
  rec->add_option("--ablate", rec_ablate)->check(CLI::IsMember({"none", "c", "z", "zclip"}));
  rec->add_option("--roi", rec_roi)->check(CLI::IsMember({"all", "lvc", "hvc"}));
  rec->add_option("--out", rec_out)->required();
  rec->callback([&] {
    ExperimentConfig c = models_config(rec_common, rec_models);
    c.roi = RoiSet::parse(rec_roi);
    c.drop = parse_ablation(rec_ablate);
    c.upper_bound = rec_mode == "upper-bound";
    const Dataset data = load_dataset(rec_dataset);
    const Models models = load_models(c, rec_models);
    const Decoders dec = load_decoders(fs::path(rec_models) / ("decoders_" + c.roi.name()));
    const auto recs = reconstruct_items(c, data, data.test, models, dec, Variant{c.upper_bound, c.drop});
    write_reconstructions(rec_out, data.test, recs, nlohmann::json{{"config", nlohmann::json(c)}});
    std::cout << "wrote " << recs.size() << " reconstructions to " << rec_out << "\n";
  });

  // evaluate
  std::string ev_recon, ev_dataset, ev_out;
  auto* ev = app.add_subcommand("evaluate", "Score reconstructions against their stimuli");
  ev->add_option("--recon", ev_recon)->required();
  ev->add_option("--dataset", ev_dataset)->required();
  ev->add_option("--out", ev_out)->required();
  ev->callback([&] {
    const StoredReconstructions stored = read_reconstructions(ev_recon);
    const ExperimentConfig c = stored.meta.contains("config") ? stored.meta["config"].get<ExperimentConfig>() : ExperimentConfig{};
    const Dataset data = load_dataset(ev_dataset);
    std::map<std::string, const StimulusRecord*> by_id;
    for (const auto& r : data.test) by_id[r.id] = &r;
    for (const auto& r : data.train) by_id[r.id] = &r;
    std::vector<Tensor> stimuli;
    for (const auto& id : stored.ids) {
      const auto it = by_id.find(id);
      if (it == by_id.end()) throw ContractError("reconstruction " + id + " has no stimulus in the dataset");
      stimuli.push_back(it->second->image.pixels);
    }
    const Encoders enc = make_encoders(c);
    const MetricsReport report = evaluate(stored.ids, stimuli, stored.finals, enc.visual,
                                          stage_seeds(c.seed).at("visual_encoder"), c.dataset.image_size);
    write_file(ev_out, report_json(report, c).dump(2) + "\n");
    std::cout << "clip_sim " << report.mean_clip_sim << "  ssim " << report.mean_ssim << "  pcc " << report.mean_pcc
              << "\n";
  });

  // run
  Common run_common;
  std::string run_out, run_mode, run_ablate, run_roi;
  std::optional<double> run_k, run_lambda;
  bool run_resume = false;
  auto* run = app.add_subcommand("run", "Run every stage end to end");
  run_common.attach(run);
  run->add_option("--out", run_out, "Run directory (overrides output_dir)");
  run->add_option("--mode", run_mode)->check(CLI::IsMember({"decoded", "upper-bound"}));
  run->add_option("--ablate", run_ablate)->check(CLI::IsMember({"none", "c", "z", "zclip"}));
  run->add_option("--roi", run_roi)->check(CLI::IsMember({"all", "lvc", "hvc"}));
  run->add_option("--k-percent", run_k);
  run->add_option("--lambda", run_lambda);
  run->add_flag("--resume", run_resume, "Skip stages whose outputs match the manifest");
  run->callback([&] {
    ExperimentConfig c = run_common.load();
    if (!run_out.empty()) c.output_dir = run_out;
    if (!run_mode.empty()) c.upper_bound = run_mode == "upper-bound";
    if (!run_ablate.empty()) c.drop = parse_ablation(run_ablate);
    if (!run_roi.empty()) c.roi = RoiSet::parse(run_roi);
    if (run_k) c.decoder.k_percent = *run_k;
    if (run_lambda) c.decoder.lambda = *run_lambda;
    const RunSummary s = run_experiment(c, RunOptions{run_resume});
    for (const auto& [name, secs] : s.stage_seconds) std::cout << name << ": " << secs << " s\n";
    std::cout << "clip_sim " << s.report.mean_clip_sim << "  ssim " << s.report.mean_ssim << "  pcc "
              << s.report.mean_pcc;
    if (s.report.fid) std::cout << "  fid " << *s.report.fid;
    std::cout << "\nreport: " << (s.dir / "report.json").string() << "\n";
  });

  // k-sweep
  Common sweep_common;
  std::vector<double> sweep_ks{5, 10, 25, 50, 75};
  std::string sweep_out;
  auto* sweep = app.add_subcommand("k-sweep", "Reconstruction quality on the validation split for several k");
  sweep_common.attach(sweep);
  sweep->add_option("--ks", sweep_ks, "Percentages of structural dims to keep")->delimiter(',');
  sweep->add_option("--out", sweep_out, "Output directory")->required();
  sweep->callback([&] {
    const SweepReport r = k_sweep(sweep_common.load(), sweep_ks);
    write_file(fs::path(sweep_out) / "sweep.csv", r.csv());
    std::cout << r.csv();
  });

  // export-weights
  Common exp_common;
  std::string exp_models, exp_dataset, exp_out, exp_roi = "all";
  auto* exp = app.add_subcommand("export-weights", "Per-voxel mean |weight| of each decoder");
  exp_common.attach(exp);
  exp->add_option("--models", exp_models, "Models directory or a decoders directory")->required();
  exp->add_option("--dataset", exp_dataset)->required();
  exp->add_option("--roi", exp_roi)->check(CLI::IsMember({"all", "lvc", "hvc"}));
  exp->add_option("--out", exp_out)->required();
  exp->callback([&] {
    fs::path dir = exp_models;
    if (!fs::exists(dir / "decoders.json")) dir /= "decoders_" + exp_roi;
    const Decoders d = load_decoders(dir);
    const Dataset data = load_dataset(exp_dataset);
    write_file(exp_out, roi_weights_csv(export_roi_weights(d, data)));
    std::cout << "wrote " << exp_out << "\n";
  });

  for (auto* sub : app.get_subcommands({})) {
    const std::string name = sub->get_name();
    sub->preparse_callback([&stage, name](std::size_t) { stage = name; });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const StageError& e) {
    std::cerr << "mindloop: stage " << e.stage() << " failed: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "mindloop: stage " << stage << " failed: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
