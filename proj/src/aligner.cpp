#include "mindloop/aligner.hpp"

#include <algorithm>
#include <cmath>

#include "mindloop/errors.hpp"
#include "mindloop/ops.hpp"

namespace mindloop {

std::set<int> StructuralTargets::layers() const {
  std::set<int> out;
  for (const auto& [l, _] : values) out.insert(l);
  return out;
}

namespace {

void check_targets(const StructuralTargets& targets) {
  if (targets.values.size() != targets.mask.size())
    throw ContractError("structural_loss: target and mask layer sets differ");
  for (const auto& [layer, value] : targets.values) {
    const auto it = targets.mask.find(layer);
    if (it == targets.mask.end()) throw ContractError("structural_loss: no mask for layer " + std::to_string(layer));
    if (it->second.size() != value.size())
      throw ContractError("structural_loss: mask length differs from target length at layer " + std::to_string(layer));
  }
}

}  // namespace

Tensor masked_feature_loss(const LayerFeatures& features, const StructuralTargets& targets) {
  check_targets(targets);
  Tensor total = Tensor::scalar(0.0);
  for (const auto& [layer, target] : targets.values) {
    const auto f = features.find(layer);
    if (f == features.end()) throw ContractError("structural_loss: missing features for layer " + std::to_string(layer));
    if (f->second.size() != target.size())
      throw ContractError("structural_loss: feature length differs from target at layer " + std::to_string(layer));
    const auto& mask = targets.mask.at(layer);
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < mask.size(); ++i)
      if (mask[i]) idx.push_back(i);
    if (idx.empty()) continue;
    Tensor wanted;
    {
      NoGradGuard guard;
      wanted = gather(target, idx);
    }
    total = total + sum_squares(gather(f->second, idx) - wanted);
  }
  return total;
}

Tensor structural_loss(const Tensor& image, const StructuralTargets& targets, const VisualEncoder& encoder) {
  check_targets(targets);
  return masked_feature_loss(encoder.encode(image, targets.layers()), targets);
}

void to_json(nlohmann::json& j, const AlignOptions& o) {
  j = {{"lr", o.lr},
       {"max_steps", o.max_steps},
       {"tol", o.tol},
       {"window", o.window},
       {"optimize_c", o.optimize_c},
       {"optimize_z", o.optimize_z}};
}

void from_json(const nlohmann::json& j, AlignOptions& o) {
  AlignOptions d;
  o.lr = j.value("lr", d.lr);
  o.max_steps = j.value("max_steps", d.max_steps);
  o.tol = j.value("tol", d.tol);
  o.window = j.value("window", d.window);
  o.optimize_c = j.value("optimize_c", d.optimize_c);
  o.optimize_z = j.value("optimize_z", d.optimize_z);
}

namespace {

void descend(Tensor& param, double lr, std::size_t step, const char* name) {
  const auto g = param.grad();
  auto v = param.values();
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!std::isfinite(g[i]))
      throw NumericError("align: non-finite gradient for " + std::string(name) + " at step " + std::to_string(step));
    v[i] -= lr * g[i];
  }
}

}  // namespace

AlignResult align(const Tensor& c0, const Tensor& z0, const RenderFn& render, const LossFn& loss,
                  const AlignOptions& opts) {
  if (!(opts.lr > 0.0) || opts.max_steps < 1 || !(opts.tol >= 0.0) || opts.window < 1)
    throw ConfigError("align: need lr > 0, max_steps >= 1, tol >= 0, window >= 1");
  Tensor c = c0.clone(), z = z0.clone();
  if (opts.optimize_c) c.set_requires_grad(true);
  if (opts.optimize_z) z.set_requires_grad(true);
  auto& tape = Tape::active();

  AlignResult r;
  for (std::size_t step = 0;; ++step) {
    Tensor image, value;
    try {
      image = render(c, z);
      value = loss(image);
    } catch (const NumericError& e) {
      tape.clear();
      throw NumericError("align: step " + std::to_string(step) + ": " + e.what());
    }
    const double l = value.item();
    r.trace.push_back(l);
    if (step == 0 || l < r.trace[r.best_step]) {
      r.best_step = step;
      r.c = c.clone(), r.z = z.clone(), r.image = image.clone();
    }

    bool stop = l == 0.0 || step >= opts.max_steps || !(opts.optimize_c || opts.optimize_z);
    if (!stop && r.trace.size() > opts.window) {
      const double before = r.trace[r.trace.size() - 1 - opts.window];
      if ((before - l) / std::max(std::abs(before), 1e-300) < opts.tol) stop = true;
    }
    if (stop) break;

    try {
      backward(value);
      if (opts.optimize_c) descend(c, opts.lr, step, "c");
      if (opts.optimize_z) descend(z, opts.lr, step, "z");
    } catch (const NumericError& e) {
      tape.clear();
      throw NumericError("align: step " + std::to_string(step) + ": " + e.what());
    }
    tape.clear();
    ++r.steps;
  }
  tape.clear();
  return r;
}

AlignResult align(const Tensor& c0, const Tensor& z0, const StructuralTargets& targets, const Generator& generator,
                  const VisualEncoder& encoder, const Tensor& eps, const AlignOptions& opts) {
  check_targets(targets);
  return align(
      c0, z0, [&](const Tensor& c, const Tensor& z) { return generator.generate(c, z, eps).image; },
      [&](const Tensor& image) { return structural_loss(image, targets, encoder); }, opts);
}

Ablation parse_ablation(const std::string& name) {
  if (name == "none") return Ablation::None;
  if (name == "c") return Ablation::C;
  if (name == "z") return Ablation::Z;
  if (name == "zclip") return Ablation::ZClip;
  throw ConfigError("unknown ablation '" + name + "' (expected none|c|z|zclip)");
}

std::string ablation_name(Ablation a) {
  switch (a) {
    case Ablation::None: return "none";
    case Ablation::C: return "c";
    case Ablation::Z: return "z";
    case Ablation::ZClip: return "zclip";
  }
  return "none";
}

ReconstructionRecord reconstruct(const std::string& id, const FeatureBundle& features,
                                 const std::map<int, std::vector<bool>>& masks, const Generator& generator,
                                 const VisualEncoder& encoder, const Tensor& eps, const AlignOptions& opts,
                                 Ablation ablation) {
  ReconstructionRecord rec;
  rec.id = id;
  rec.features = features;
  const Tensor c = ablation == Ablation::C ? Tensor::zeros(features.c.shape()) : features.c;
  const Tensor z = ablation == Ablation::Z ? Tensor::zeros(features.z.shape()) : features.z;
  {
    NoGradGuard guard;
    rec.draft = generator.generate(c, z, eps).image;
  }
  if (ablation == Ablation::ZClip) {
    rec.final_image = rec.draft;
    rec.c_final = c, rec.z_final = z;
    return rec;
  }

  StructuralTargets targets;
  for (const auto& [layer, value] : features.zclip) {
    const auto m = masks.find(layer);
    if (m == masks.end()) throw ContractError("reconstruct: no mask for layer " + std::to_string(layer));
    targets.values.emplace(layer, value);
    targets.mask.emplace(layer, m->second);
  }
  AlignOptions o = opts;
  o.optimize_c = o.optimize_c && ablation != Ablation::C;
  o.optimize_z = o.optimize_z && ablation != Ablation::Z;
  AlignResult r = align(c, z, targets, generator, encoder, eps, o);
  rec.final_image = r.image;
  rec.c_final = r.c, rec.z_final = r.z;
  rec.trace = std::move(r.trace);
  rec.best_step = r.best_step;
  return rec;
}

}  // namespace mindloop
