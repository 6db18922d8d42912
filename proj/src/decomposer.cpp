#include "tdl/decomposer.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>
#include <stdexcept>

namespace tdl {

void DecomposeConfig::validate() const {
  auto require = [](bool ok, const char* what) {
    if (!ok) throw std::invalid_argument(std::string("DecomposeConfig: ") + what);
  };
  require(n_players >= 1, "n_players must be >= 1");
  require(outer_steps >= 1 && inner_steps >= 1, "outer_steps and inner_steps must be >= 1");
  require(std::isfinite(step_size) && step_size > 0.0, "step_size must be > 0");
  require(std::isfinite(sigma_max) && sigma_min >= 0.0 && sigma_min <= sigma_max,
          "need 0 <= sigma_min <= sigma_max");
  require(std::isfinite(proto_pull) && proto_pull >= 0.0, "proto_pull must be >= 0");
  require(std::isfinite(init_scale) && init_scale >= 0.0, "init_scale must be >= 0");
  require(std::isfinite(loss_scale) && loss_scale > 0.0, "loss_scale must be > 0");
  require(std::isfinite(smoothing) && smoothing >= 0.0, "smoothing must be >= 0");
}

double DecomposeConfig::noise_level(int k) const {
  if (outer_steps == 1 || sigma_max == sigma_min) return sigma_max;
  const double t = static_cast<double>(k) / (outer_steps - 1);
  // A geometric schedule cannot reach zero; fall back to linear.
  if (sigma_min <= 0.0) return sigma_max * (1.0 - t);
  return sigma_max * std::pow(sigma_min / sigma_max, t);
}

namespace {

int coarse_stride(double width) { return std::max(1, static_cast<int>(width / 2.0)); }

// n x ceil(n / stride) map from a coarse lattice to pixels, Gaussian-weighted, with every
// row scaled to unit L2 norm so the mapped field has unit variance at each pixel.
const Matrix& field_operator(Eigen::Index n, double width) {
  thread_local std::map<std::pair<Eigen::Index, double>, Matrix> cache;
  auto [it, fresh] = cache.try_emplace({n, width});
  if (fresh) {
    const int stride = coarse_stride(width);
    const Eigen::Index m = (n + stride - 1) / stride;
    const int reach = static_cast<int>(std::ceil(3.0 * width));
    Matrix& b = it->second;
    b = Matrix::Zero(n, m);
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = 0; j < m; ++j) {
        const double d = static_cast<double>(i - j * stride);
        if (std::abs(d) <= reach) b(i, j) = std::exp(-0.5 * d * d / (width * width));
      }
      b.row(i) /= b.row(i).norm();
    }
  }
  return it->second;
}

std::vector<LogitGrid> snapshot(const std::vector<PlayerState>& states) {
  std::vector<LogitGrid> out;
  out.reserve(states.size());
  for (const auto& s : states) out.push_back(s.logits);
  return out;
}

}  // namespace

Field correlated_normal(Eigen::Index rows, Eigen::Index cols, double width,
                        std::mt19937_64& rng) {
  std::normal_distribution<double> z(0.0, 1.0);
  if (width <= 0.0) {
    Field out(rows, cols);
    for (Eigen::Index k = 0; k < out.size(); ++k) out.data()[k] = z(rng);
    return out;
  }
  const Matrix& br = field_operator(rows, width);
  const Matrix& bc = field_operator(cols, width);
  Matrix coarse(br.cols(), bc.cols());
  for (Eigen::Index k = 0; k < coarse.size(); ++k) coarse.data()[k] = z(rng);
  return br * coarse * bc.transpose();
}

double prototype_pull(std::span<const LogitGrid> logits, const PrototypePull& pull,
                      std::vector<Field>* grad) {
  if (grad) {
    grad->clear();
    for (const auto& l : logits) grad->push_back(Field::Zero(l.rows(), l.cols()));
  }
  if (!pull.active()) return 0.0;
  if (pull.dict->dim() != pull.descriptor.dim()) {
    throw std::invalid_argument("prototype_pull: dictionary dimension does not match descriptor");
  }
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const Grid mask = activate(logits[i]);
    const auto lin = LinearizedDescriptor::at(mask, pull.descriptor);
    if (!lin) continue;
    int row = 0;
    total += pull.dict->min_sq_distance(lin->value(), &row);
    if (grad) {
      const Vector diff = lin->value() - pull.dict->prototypes.row(row).transpose();
      const Grid d_mask = lin->pullback(2.0 * pull.weight * diff);
      (*grad)[i] = (d_mask.array() * mask.array() * (1.0 - mask.array())).matrix();
    }
  }
  return pull.weight * total;
}

std::vector<PlayerState> init_players(const Grid& target, const DecomposeConfig& cfg) {
  cfg.validate();
  std::vector<PlayerState> states(static_cast<std::size_t>(cfg.n_players));
  for (int i = 0; i < cfg.n_players; ++i) {
    auto& s = states[static_cast<std::size_t>(i)];
    const auto salt = 2 * static_cast<std::uint64_t>(i);
    s.player_index = i;
    std::mt19937_64 init(mix_seed(cfg.seed, salt));
    s.noise.seed(mix_seed(cfg.seed, salt + 1));
    s.logits =
        cfg.init_scale * correlated_normal(target.rows(), target.cols(), cfg.smoothing, init);
  }
  return states;
}

void langevin_step(std::vector<PlayerState>& states, const Grid& target, const GameConfig& game,
                   double noise, double eps, const StepOptions& opt) {
  if (!(noise >= 0.0)) throw std::invalid_argument("langevin_step: noise must be >= 0");
  if (!(eps >= 0.0)) throw std::invalid_argument("langevin_step: eps must be >= 0");
  const auto logits = snapshot(states);
  auto grads = gt_loss_grad(logits, target, game);
  if (opt.pull.active()) {
    std::vector<Field> pull_grad;
    prototype_pull(logits, opt.pull, &pull_grad);
    for (std::size_t i = 0; i < grads.size(); ++i) grads[i] += pull_grad[i];
  }
  const double spread = std::sqrt(2.0 * eps) * noise;
  for (std::size_t i = 0; i < states.size(); ++i) {
    if (!grads[i].allFinite()) {
      std::ostringstream msg;
      msg << "langevin_step: non-finite gradient for player " << states[i].player_index;
      throw std::runtime_error(msg.str());
    }
    auto& l = states[i].logits;
    l -= (eps * opt.loss_scale) * grads[i];
    if (spread > 0.0) {
      l += spread * correlated_normal(l.rows(), l.cols(), opt.smoothing, states[i].noise);
    }
  }
}

Decomposition decompose_from(std::vector<PlayerState> states, const Grid& target,
                             const GameConfig& game, const DecomposeConfig& cfg,
                             const PrototypePull& pull) {
  cfg.validate();
  game.validate();
  if (!is_valid_grid(target)) throw std::invalid_argument("decompose: target is not a valid grid");
  Decomposition out;
  const StepOptions opt{cfg.loss_scale, cfg.smoothing, pull};
  for (int k = 0; k < cfg.outer_steps; ++k) {
    const double sigma = cfg.noise_level(k);
    for (int s = 0; s < cfg.inner_steps; ++s) {
      langevin_step(states, target, game, sigma, cfg.step_size, opt);
      ++out.steps_run;
    }
  }
  const auto logits = snapshot(states);
  out.loss = gt_loss(logits, target, game);
  out.pull = prototype_pull(logits, pull, nullptr);
  for (const auto& l : logits) {
    Grid m = activate(l);
    out.parts.push_back((m.array() * target.array()).matrix());
    out.masks.push_back(std::move(m));
  }
  return out;
}

Decomposition decompose(const Grid& target, const GameConfig& game, const DecomposeConfig& cfg,
                        const PrototypePull& pull) {
  return decompose_from(init_players(target, cfg), target, game, cfg, pull);
}

Vector predicate_embedding(const Grid& part, const PrototypeDictionary& dict,
                           const DescriptorConfig& descriptor) {
  if (dict.arity != 1) {
    throw std::invalid_argument("predicate_embedding: needs an arity-1 dictionary");
  }
  const auto mu = embed_part(part, descriptor);
  if (!mu) throw std::invalid_argument("predicate_embedding: empty part");
  if (mu->values.size() != dict.dim()) {
    throw std::invalid_argument("predicate_embedding: dimension mismatch");
  }
  const Vector z =
      -(dict.prototypes.rowwise() - mu->values.transpose()).rowwise().squaredNorm() / dict.tau_ce;
  const Vector w = (z.array() - z.maxCoeff()).exp().matrix();
  return dict.prototypes.transpose() * (w / w.sum());
}

}  // namespace tdl
