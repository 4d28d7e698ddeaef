#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "mindloop/tensor.hpp"

namespace mindloop {

struct Correlation {
  double r = 0.0;
  bool degenerate = false;  // one side had zero variance; r is reported as 0
};

Correlation pearson(std::span<const double> a, std::span<const double> b);
Correlation pearson(const Eigen::Ref<const Eigen::VectorXd>& a, const Eigen::Ref<const Eigen::VectorXd>& b);

/// L2-regularised linear map from voxels to a feature space. Each target
/// dimension sees only its own pre-selected voxels.
struct RidgeModel {
  struct Target {
    std::vector<Eigen::Index> voxels;  // ascending
    Eigen::VectorXd weights;           // one per selected voxel, raw voxel units
    double bias = 0.0;
  };

  double lambda = 1.0;
  Eigen::Index input_dim = 0;
  Eigen::VectorXd mean;    // per voxel, training data
  Eigen::VectorXd stddev;  // per voxel, training data
  std::vector<Target> targets;

  Eigen::Index output_dim() const { return static_cast<Eigen::Index>(targets.size()); }
  Eigen::VectorXd predict(const Eigen::Ref<const Eigen::VectorXd>& x) const;
  Eigen::MatrixXd predict_rows(const Eigen::Ref<const Eigen::MatrixXd>& x) const;
};

/// Ranks voxels by |pearson(voxel, target)| on the training rows, keeps the
/// top `voxels_per_target`, then solves (XsᵀXs + λI) w = Xsᵀy on centred data.
/// λ = 0 uses a column-pivoted QR instead of Cholesky and throws NumericError
/// when the centred design is rank deficient beyond the intercept.
RidgeModel fit_ridge(const Eigen::Ref<const Eigen::MatrixXd>& x, const Eigen::Ref<const Eigen::MatrixXd>& y,
                     double lambda, std::size_t voxels_per_target);

Tensor predict(const RidgeModel& model, const Tensor& x);

std::vector<std::size_t> fold_sizes(std::size_t n, std::size_t folds);

struct CvResult {
  Eigen::VectorXd accuracy;
  std::vector<bool> degenerate;
};

/// Contiguous k-fold cross-validated Pearson accuracy per target dimension.
CvResult cv_accuracy(const Eigen::Ref<const Eigen::MatrixXd>& x, const Eigen::Ref<const Eigen::MatrixXd>& z,
                     std::size_t folds, double lambda, std::size_t voxels_per_target);

struct FeatureSelector {
  Eigen::VectorXd accuracy;
  std::vector<bool> mask;
  double k_percent = 100.0;

  std::vector<std::size_t> retained() const;
  std::size_t count() const;
};

/// Keeps the ceil(D·k/100) most accurate dimensions; ties go to the lower
/// index. Degenerate dimensions rank below every other dimension, so they are
/// kept only when k leaves no alternative.
FeatureSelector select_top_k(const Eigen::Ref<const Eigen::VectorXd>& accuracy, double k_percent,
                             const std::vector<bool>& degenerate = {});

// `<dir>/<name>.json` header plus MDT1 tensors `<name>.{weights,bias,mean,std}.mdt`.
void save_ridge(const std::filesystem::path& dir, const std::string& name, const RidgeModel& model,
                const std::optional<FeatureSelector>& selector = std::nullopt);
RidgeModel load_ridge(const std::filesystem::path& dir, const std::string& name,
                      std::optional<FeatureSelector>* selector = nullptr);

}  // namespace mindloop
