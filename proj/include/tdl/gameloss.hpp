#pragma once

#include "tdl/core.hpp"

#include <optional>
#include <span>
#include <vector>

namespace tdl {

enum class ResourcesHinge { AsWritten, Flipped };

/// Coefficients of the game-theoretic loss
///   total = rec + alpha_overlap*overlap + alpha_resources*resources
///         + alpha_norm*norm + lambda_sparse*sparse.
struct GameConfig {
  double alpha_overlap = 0.05;
  double alpha_resources = 0.02;
  double alpha_norm = 1e-5;
  double lambda_sparse = 0.0;
  /// Player quota in pixel mass.
  double quota = 4.0;
  /// Soft-step threshold for the overlap term; unset uses the plain hinge.
  std::optional<double> th_s = 0.3;
  double step_steepness = 20.0;
  double focal_gamma = 2.0;
  double focal_alpha = 0.25;
  double dice_smooth = 1.0;
  double prob_clamp = 1e-6;
  ResourcesHinge resources_hinge = ResourcesHinge::AsWritten;

  /// Throws std::invalid_argument when a coefficient is out of range.
  void validate() const;
};

struct LossBreakdown {
  double rec = 0.0;
  double overlap = 0.0;
  double resources = 0.0;
  double norm = 0.0;
  double sparse = 0.0;
  double total = 0.0;
};

/// Weighted sum of the components under `cfg`.
double weighted_total(const LossBreakdown& b, const GameConfig& cfg);

/// Mean binary focal loss plus dice loss of the clamped reconstruction.
double reconstruction_loss(const Field& recon, const Grid& target, const GameConfig& cfg);
double focal_loss(const Field& recon, const Grid& target, const GameConfig& cfg);
double dice_loss(const Field& recon, const Grid& target, const GameConfig& cfg);

double overlap_penalty(std::span<const Grid> parts, const Grid& target, const GameConfig& cfg);
double resources_penalty(std::span<const Grid> parts, double quota,
                         ResourcesHinge hinge = ResourcesHinge::AsWritten);
double norm_penalty(std::span<const LogitGrid> logits);

LossBreakdown gt_loss(std::span<const LogitGrid> logits, const Grid& target,
                      const GameConfig& cfg);

/// d(total)/d(logit) for every player, chained through the sigmoid.
/// Hinge terms use subgradient 0 at their kinks.
std::vector<Field> gt_loss_grad(std::span<const LogitGrid> logits, const Grid& target,
                                const GameConfig& cfg);

/// Loss and gradient from one shared reconstruction pass.
struct LossAndGrad {
  LossBreakdown loss;
  std::vector<Field> grad;
};
LossAndGrad gt_loss_and_grad(std::span<const LogitGrid> logits, const Grid& target,
                             const GameConfig& cfg);

}  // namespace tdl
