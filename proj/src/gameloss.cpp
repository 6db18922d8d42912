#include "tdl/gameloss.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace tdl {

namespace {

void require(bool ok, const char* what) {
  if (!ok) throw std::invalid_argument(std::string("GameConfig: ") + what);
}

bool finite_nonneg(double v) { return std::isfinite(v) && v >= 0.0; }

// Per-pixel occupancy counted by the overlap term.
ArrayGrid occupancy(const Grid& g, const GameConfig& cfg) {
  if (cfg.th_s) return soft_step(g, *cfg.th_s, cfg.step_steepness).array();
  return g.array();
}

ArrayGrid clamp_probs(const Field& recon, double c) {
  return recon.array().max(c).min(1.0 - c);
}

struct FocalTerms {
  double value;
  ArrayGrid dvalue;  // derivative of the per-pixel loss w.r.t. the clamped probability
};

FocalTerms focal_terms(const ArrayGrid& p, const ArrayGrid& y, const GameConfig& cfg,
                       bool with_grad) {
  const double g = cfg.focal_gamma;
  const double a = cfg.focal_alpha;
  const ArrayGrid q = 1.0 - p;
  const ArrayGrid log_p = p.log();
  const ArrayGrid log_q = q.log();
  const ArrayGrid q_g = q.pow(g);
  const ArrayGrid p_g = p.pow(g);
  const ArrayGrid loss = -a * y * q_g * log_p - (1.0 - a) * (1.0 - y) * p_g * log_q;
  FocalTerms out{loss.mean(), {}};
  if (with_grad) {
    const ArrayGrid pos = q_g / p - g * q.pow(g - 1.0) * log_p;
    const ArrayGrid neg = g * p.pow(g - 1.0) * log_q - p_g / q;
    out.dvalue = (-a * y * pos - (1.0 - a) * (1.0 - y) * neg) / static_cast<double>(p.size());
  }
  return out;
}

struct DiceTerms {
  double value;
  ArrayGrid dvalue;
};

DiceTerms dice_terms(const ArrayGrid& p, const ArrayGrid& y, double smooth,
                     bool with_grad) {
  const double inter = (p * y).sum();
  const double denom = p.sum() + y.sum() + smooth;
  DiceTerms out{1.0 - (2.0 * inter + smooth) / denom, {}};
  if (with_grad) {
    out.dvalue = -(2.0 * y * denom - (2.0 * inter + smooth)) / (denom * denom);
  }
  return out;
}

std::vector<Grid> activate_all(std::span<const LogitGrid> logits, const Grid& target) {
  std::vector<Grid> parts;
  parts.reserve(logits.size());
  for (const auto& l : logits) {
    require_same_shape(l, target, "gt_loss");
    parts.push_back(activate(l));
  }
  return parts;
}

}  // namespace

void GameConfig::validate() const {
  require(finite_nonneg(alpha_overlap), "alpha_overlap must be finite and >= 0");
  require(finite_nonneg(alpha_resources), "alpha_resources must be finite and >= 0");
  require(finite_nonneg(alpha_norm), "alpha_norm must be finite and >= 0");
  require(finite_nonneg(lambda_sparse), "lambda_sparse must be finite and >= 0");
  require(finite_nonneg(quota), "quota must be finite and >= 0");
  require(!th_s || (*th_s > 0.0 && *th_s < 1.0), "th_s must lie in (0,1)");
  require(std::isfinite(step_steepness) && step_steepness > 0.0, "step_steepness must be > 0");
  require(finite_nonneg(focal_gamma), "focal_gamma must be finite and >= 0");
  require(focal_alpha > 0.0 && focal_alpha < 1.0, "focal_alpha must lie in (0,1)");
  require(std::isfinite(dice_smooth) && dice_smooth > 0.0, "dice_smooth must be > 0");
  require(prob_clamp > 0.0 && prob_clamp < 0.5, "prob_clamp must lie in (0,0.5)");
}

double weighted_total(const LossBreakdown& b, const GameConfig& cfg) {
  return b.rec + cfg.alpha_overlap * b.overlap + cfg.alpha_resources * b.resources +
         cfg.alpha_norm * b.norm + cfg.lambda_sparse * b.sparse;
}

double focal_loss(const Field& recon, const Grid& target, const GameConfig& cfg) {
  require_same_shape(recon, target, "focal_loss");
  return focal_terms(clamp_probs(recon, cfg.prob_clamp), target.array(), cfg, false).value;
}

double dice_loss(const Field& recon, const Grid& target, const GameConfig& cfg) {
  require_same_shape(recon, target, "dice_loss");
  return dice_terms(clamp_probs(recon, cfg.prob_clamp), target.array(), cfg.dice_smooth, false)
      .value;
}

double reconstruction_loss(const Field& recon, const Grid& target, const GameConfig& cfg) {
  return focal_loss(recon, target, cfg) + dice_loss(recon, target, cfg);
}

double overlap_penalty(std::span<const Grid> parts, const Grid& target, const GameConfig& cfg) {
  if (parts.empty()) throw std::invalid_argument("overlap_penalty: no parts");
  ArrayGrid occupied = ArrayGrid::Zero(target.rows(), target.cols());
  for (const auto& p : parts) {
    require_same_shape(p, target, "overlap_penalty");
    occupied += occupancy(p, cfg);
  }
  return (occupied - occupancy(target, cfg)).max(0.0).sum();
}

double resources_penalty(std::span<const Grid> parts, double quota, ResourcesHinge hinge) {
  double total = 0.0;
  for (const auto& p : parts) {
    const double m = mass(p);
    total += hinge == ResourcesHinge::AsWritten ? std::max(0.0, quota - m)
                                                : std::max(0.0, m - quota);
  }
  return total;
}

double norm_penalty(std::span<const LogitGrid> logits) {
  double total = 0.0;
  for (const auto& l : logits) total += l.squaredNorm();
  return total;
}

LossBreakdown gt_loss(std::span<const LogitGrid> logits, const Grid& target,
                      const GameConfig& cfg) {
  return gt_loss_and_grad(logits, target, cfg).loss;
}

std::vector<Field> gt_loss_grad(std::span<const LogitGrid> logits, const Grid& target,
                                const GameConfig& cfg) {
  return gt_loss_and_grad(logits, target, cfg).grad;
}

LossAndGrad gt_loss_and_grad(std::span<const LogitGrid> logits, const Grid& target,
                             const GameConfig& cfg) {
  if (logits.empty()) throw std::invalid_argument("gt_loss: no players");
  const auto parts = activate_all(logits, target);
  const std::size_t np = parts.size();
  const Eigen::Index n = target.size();
  const double* y = target.data();
  const double g = cfg.focal_gamma, a = cfg.focal_alpha, c = cfg.prob_clamp;
  const bool soft = cfg.th_s.has_value();
  const double th = soft ? *cfg.th_s : 0.0, k = cfg.step_steepness;
  auto pow_g = [g](double x) { return g == 2.0 ? x * x : std::pow(x, g); };
  auto pow_g1 = [g](double x) { return g == 2.0 ? x : std::pow(x, g - 1.0); };

  // Pass 1: reconstruction, focal value and derivative, dice sums, overlap.
  ArrayGrid d_rec(target.rows(), target.cols());
  ArrayGrid overlap_active(target.rows(), target.cols());
  std::vector<char> inside(static_cast<std::size_t>(n));
  std::vector<ArrayGrid> stepped(soft ? np : 0, ArrayGrid(target.rows(), target.cols()));
  double focal = 0.0, inter = 0.0, psum = 0.0, ysum = 0.0, overlap = 0.0;
  for (Eigen::Index j = 0; j < n; ++j) {
    double r = 0.0, occ = 0.0;
    for (std::size_t i = 0; i < np; ++i) {
      const double v = parts[i].data()[j];
      r += v;
      if (soft) {
        const double st = soft_step(v, th, k);
        stepped[i].data()[j] = st;
        occ += st;
      } else {
        occ += v;
      }
    }
    occ -= soft ? soft_step(y[j], th, k) : y[j];
    overlap += std::max(0.0, occ);
    overlap_active.data()[j] = occ > 0.0 ? 1.0 : 0.0;

    const double p = std::clamp(r, c, 1.0 - c), q = 1.0 - p, yj = y[j];
    const double log_p = std::log(p), log_q = std::log(q);
    focal += -a * yj * pow_g(q) * log_p - (1.0 - a) * (1.0 - yj) * pow_g(p) * log_q;
    const double pos = pow_g(q) / p - g * pow_g1(q) * log_p;
    const double neg = g * pow_g1(p) * log_q - pow_g(p) / q;
    const bool in = r > c && r < 1.0 - c;
    inside[static_cast<std::size_t>(j)] = in;
    d_rec.data()[j] = in ? (-a * yj * pos - (1.0 - a) * (1.0 - yj) * neg) / n : 0.0;
    inter += p * yj;
    psum += p;
    ysum += yj;
  }
  const double denom = psum + ysum + cfg.dice_smooth;
  const double num = 2.0 * inter + cfg.dice_smooth;
  for (Eigen::Index j = 0; j < n; ++j) {
    if (inside[static_cast<std::size_t>(j)]) {
      d_rec.data()[j] += -(2.0 * y[j] * denom - num) / (denom * denom);
    }
  }

  LossAndGrad out;
  LossBreakdown& b = out.loss;
  b.rec = focal / n + (1.0 - num / denom);
  b.overlap = overlap;
  b.norm = norm_penalty(logits);

  // Pass 2: per-player gradient.
  out.grad.reserve(np);
  for (std::size_t i = 0; i < np; ++i) {
    const double m = parts[i].sum();
    double d_res = 0.0;
    if (cfg.resources_hinge == ResourcesHinge::AsWritten) {
      b.resources += std::max(0.0, cfg.quota - m);
      d_res = cfg.quota - m > 0.0 ? -1.0 : 0.0;
    } else {
      b.resources += std::max(0.0, m - cfg.quota);
      d_res = m - cfg.quota > 0.0 ? 1.0 : 0.0;
    }
    if (cfg.lambda_sparse > 0.0) b.sparse += m;
    const double shared = cfg.alpha_resources * d_res + cfg.lambda_sparse;
    Field grad(target.rows(), target.cols());
    const double* pi = parts[i].data();
    const double* li = logits[i].data();
    double* gi = grad.data();
    for (Eigen::Index j = 0; j < n; ++j) {
      const double v = pi[j];
      double d_ov = overlap_active.data()[j];
      if (soft && d_ov != 0.0) {
        const double st = stepped[i].data()[j];
        d_ov *= k * st * (1.0 - st);
      }
      const double d_part = d_rec.data()[j] + cfg.alpha_overlap * d_ov + shared;
      gi[j] = d_part * v * (1.0 - v) + 2.0 * cfg.alpha_norm * li[j];
    }
    out.grad.push_back(std::move(grad));
  }
  b.total = weighted_total(b, cfg);
  return out;
}

}  // namespace tdl
