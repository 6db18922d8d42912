#pragma once

#include "tdl/core.hpp"
#include "tdl/dictionary.hpp"
#include "tdl/gameloss.hpp"

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace tdl {

struct DecomposeConfig {
  int n_players = 4;
  int outer_steps = 6;
  int inner_steps = 80;
  double step_size = 0.05;
  double sigma_max = 1.0;
  double sigma_min = 0.01;
  /// Weight of the pull toward the nearest unary prototype.
  double proto_pull = 0.01;
  double init_scale = 0.1;
  /// Inverse temperature on the loss in the drift term.
  double loss_scale = 3000.0;
  /// Correlation length (pixels) of the initial logits and the noise; 0 means i.i.d. per pixel.
  double smoothing = 6.0;
  std::uint64_t seed = 0;

  void validate() const;
  /// Geometric noise level for outer step k in [0, outer_steps).
  double noise_level(int k) const;
};

/// One player's mask parameters and its private noise stream.
struct PlayerState {
  LogitGrid logits;
  int player_index = 0;
  std::mt19937_64 noise;

  Grid mask() const { return activate(logits); }
};

struct Decomposition {
  /// Visual parts: each player's mask multiplied by the input.
  std::vector<Grid> parts;
  std::vector<Grid> masks;
  std::string source;
  LossBreakdown loss;
  double pull = 0.0;
  int steps_run = 0;
};

/// Optional bias toward a unary prototype dictionary:
///   weight * sum_i min_sigma ||embed_part(mask_i) - phi_sigma||^2.
struct PrototypePull {
  const PrototypeDictionary* dict = nullptr;
  double weight = 0.0;
  DescriptorConfig descriptor;

  bool active() const { return dict != nullptr && weight > 0.0; }
};

/// Pull value and its gradient w.r.t. each player's logits.
double prototype_pull(std::span<const LogitGrid> logits, const PrototypePull& pull,
                      std::vector<Field>* grad);

/// Initial players: logits ~ N(0, init_scale^2), one noise stream per player.
std::vector<PlayerState> init_players(const Grid& target, const DecomposeConfig& cfg);

struct StepOptions {
  double loss_scale = 1.0;
  double smoothing = 0.0;
  PrototypePull pull;
};

/// Unit-variance Gaussian random field, i.i.d. per pixel when width is 0 and
/// otherwise correlated over roughly `width` pixels.
Field correlated_normal(Eigen::Index rows, Eigen::Index cols, double width, std::mt19937_64& rng);

/// One synchronous round: every player moves from the same snapshot,
///   logits <- logits - eps * loss_scale * grad + sqrt(2 eps) * noise * z,
/// z drawn by correlated_normal with the given smoothing.
void langevin_step(std::vector<PlayerState>& states, const Grid& target, const GameConfig& game,
                   double noise, double eps, const StepOptions& opt = {});

/// Runs the annealed schedule from the given initial players.
Decomposition decompose_from(std::vector<PlayerState> states, const Grid& target,
                             const GameConfig& game, const DecomposeConfig& cfg,
                             const PrototypePull& pull = {});

Decomposition decompose(const Grid& target, const GameConfig& game, const DecomposeConfig& cfg,
                        const PrototypePull& pull = {});

/// Probability-weighted prototype mix for a part, probabilities being the
/// softmax of -||mu - phi||^2 / tau_ce. Throws for an empty part.
Vector predicate_embedding(const Grid& part, const PrototypeDictionary& dict,
                           const DescriptorConfig& descriptor = {});

}  // namespace tdl
