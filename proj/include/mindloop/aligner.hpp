#pragma once

#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "mindloop/encoders.hpp"
#include "mindloop/generator.hpp"

namespace mindloop {

/// Per-layer structural targets restricted to the retained (masked) dims.
struct StructuralTargets {
  std::map<int, Tensor> values;             // full-length flattened target per layer
  std::map<int, std::vector<bool>> mask;    // same length; true = used in the loss

  std::set<int> layers() const;
};

// Masked sum of squared differences over all layers. Dims with mask=false
// never enter the graph.
Tensor masked_feature_loss(const LayerFeatures& features, const StructuralTargets& targets);

Tensor structural_loss(const Tensor& image, const StructuralTargets& targets, const VisualEncoder& encoder);

struct AlignOptions {
  double lr = 0.05;
  std::size_t max_steps = 100;
  double tol = 1e-4;
  std::size_t window = 5;
  bool optimize_c = true;
  bool optimize_z = true;
};

void to_json(nlohmann::json& j, const AlignOptions& o);
void from_json(const nlohmann::json& j, AlignOptions& o);

struct AlignResult {
  Tensor c, z, image;          // best iterate
  std::vector<double> trace;   // loss of every evaluated iterate, trace[0] = initial
  std::size_t best_step = 0;
  std::size_t steps = 0;       // gradient updates taken

  double initial_loss() const { return trace.front(); }
  double best_loss() const { return trace.at(best_step); }
};

using RenderFn = std::function<Tensor(const Tensor& c, const Tensor& z)>;
using LossFn = std::function<Tensor(const Tensor& image)>;

// Plain gradient descent on loss(render(c, z)) with best-iterate return.
AlignResult align(const Tensor& c0, const Tensor& z0, const RenderFn& render, const LossFn& loss,
                  const AlignOptions& opts);

AlignResult align(const Tensor& c0, const Tensor& z0, const StructuralTargets& targets, const Generator& generator,
                  const VisualEncoder& encoder, const Tensor& eps, const AlignOptions& opts);

enum class Ablation { None, C, Z, ZClip };
Ablation parse_ablation(const std::string& name);
std::string ablation_name(Ablation a);

struct FeatureBundle {
  Tensor c;             // S×E
  Tensor z;             // latent
  LayerFeatures zclip;  // flattened low-level features per layer
};

struct ReconstructionRecord {
  std::string id;
  FeatureBundle features;
  Tensor draft;
  Tensor final_image;
  Tensor c_final, z_final;
  std::vector<double> trace;
  std::size_t best_step = 0;
};

/// Stage 1 (draft from (c, z)) then Stage 2 (align against the masked
/// structural targets). Ablations fix c or z at zero, or skip Stage 2.
ReconstructionRecord reconstruct(const std::string& id, const FeatureBundle& features,
                                 const std::map<int, std::vector<bool>>& masks, const Generator& generator,
                                 const VisualEncoder& encoder, const Tensor& eps, const AlignOptions& opts,
                                 Ablation ablation = Ablation::None);

}  // namespace mindloop
