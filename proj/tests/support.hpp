#pragma once

#include "tdl/dictionary.hpp"
#include "tdl/gameloss.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <span>
#include <stdexcept>
#include <numeric>
#include <random>
#include <vector>

namespace tdl::testing {

inline Grid random_binary(int rows, int cols, double p, std::mt19937_64& rng) {
  std::bernoulli_distribution on(p);
  Grid g(rows, cols);
  for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = on(rng) ? 1.0 : 0.0;
  return g;
}

inline LogitGrid random_logits(int rows, int cols, double scale, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-scale, scale);
  LogitGrid g(rows, cols);
  for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = u(rng);
  return g;
}

/// Smallest distance of any hinge or clamp argument of the game loss to its kink.
inline double kink_margin(std::span<const LogitGrid> logits, const Grid& target,
                          const GameConfig& cfg) {
  double margin = std::numeric_limits<double>::infinity();
  const Eigen::Index n = target.size();
  for (Eigen::Index j = 0; j < n; ++j) {
    double r = 0.0, occ = 0.0;
    for (const auto& l : logits) {
      const double v = sigmoid(l.data()[j]);
      r += v;
      occ += cfg.th_s ? soft_step(v, *cfg.th_s, cfg.step_steepness) : v;
    }
    const double y = target.data()[j];
    occ -= cfg.th_s ? soft_step(y, *cfg.th_s, cfg.step_steepness) : y;
    margin = std::min({margin, std::abs(occ), std::abs(r - cfg.prob_clamp),
                       std::abs(r - (1.0 - cfg.prob_clamp))});
  }
  for (const auto& l : logits) {
    margin = std::min(margin, std::abs(cfg.quota - activate(l).sum()));
  }
  return margin;
}

/// Random instance whose hinge arguments all stay at least `margin` from
/// their kinks. Offending pixels are redrawn until none remain.
inline std::vector<LogitGrid> instance_away_from_kinks(int size, int players, const Grid& target,
                                                      const GameConfig& cfg, double margin,
                                                      std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-4.0, 4.0);
  std::vector<LogitGrid> logits;
  for (int i = 0; i < players; ++i) logits.push_back(random_logits(size, size, 4.0, rng));
  for (int round = 0; round < 10000; ++round) {
    bool clean = true;
    for (Eigen::Index j = 0; j < target.size(); ++j) {
      double r = 0.0, occ = 0.0;
      for (const auto& l : logits) {
        const double v = sigmoid(l.data()[j]);
        r += v;
        occ += cfg.th_s ? soft_step(v, *cfg.th_s, cfg.step_steepness) : v;
      }
      const double y = target.data()[j];
      occ -= cfg.th_s ? soft_step(y, *cfg.th_s, cfg.step_steepness) : y;
      if (std::abs(occ) <= margin || std::abs(r - (1.0 - cfg.prob_clamp)) <= margin) {
        for (auto& l : logits) l.data()[j] = u(rng);
        clean = false;
      }
    }
    if (clean && kink_margin(logits, target, cfg) > margin) return logits;
    if (clean) {
      for (auto& l : logits) l = random_logits(size, size, 4.0, rng);
    }
  }
  throw std::runtime_error("could not draw an instance away from the kinks");
}

struct GradCheck {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
};

/// Central differences of gt_loss().total against gt_loss_grad(). The
/// relative error of each entry is |analytic - numeric| / max(|numeric|,
/// 1e-3 * max|numeric|), so entries far below the gradient's scale are
/// judged on the scale rather than on their own roundoff.
inline GradCheck check_gradient(std::vector<LogitGrid> logits, const Grid& target,
                                const GameConfig& cfg, double h = 1e-4) {
  const auto analytic = gt_loss_grad(logits, target, cfg);
  std::vector<Field> numeric;
  double scale = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    Field fd(target.rows(), target.cols());
    for (Eigen::Index j = 0; j < target.size(); ++j) {
      const double keep = logits[i].data()[j];
      logits[i].data()[j] = keep + h;
      const double up = gt_loss(logits, target, cfg).total;
      logits[i].data()[j] = keep - h;
      const double down = gt_loss(logits, target, cfg).total;
      logits[i].data()[j] = keep;
      fd.data()[j] = (up - down) / (2.0 * h);
    }
    scale = std::max(scale, fd.cwiseAbs().maxCoeff());
    numeric.push_back(std::move(fd));
  }
  GradCheck out;
  const double floor = std::max(1e-3 * scale, 1e-12);
  for (std::size_t i = 0; i < logits.size(); ++i) {
    for (Eigen::Index j = 0; j < target.size(); ++j) {
      const double a = analytic[i].data()[j], f = numeric[i].data()[j];
      out.max_abs_error = std::max(out.max_abs_error, std::abs(a - f));
      out.max_rel_error =
          std::max(out.max_rel_error, std::abs(a - f) / std::max(std::abs(f), floor));
    }
  }
  return out;
}

/// Brute-force maximum of sum_i score(i, perm[i]) over all injective maps
/// of rows into columns; rows <= cols.
inline double brute_force_max_assignment(const Matrix& score) {
  const int rows = static_cast<int>(score.rows()), cols = static_cast<int>(score.cols());
  std::vector<int> perm(static_cast<std::size_t>(cols));
  std::iota(perm.begin(), perm.end(), 0);
  double best = -std::numeric_limits<double>::infinity();
  do {
    double s = 0.0;
    for (int r = 0; r < rows; ++r) s += score(r, perm[static_cast<std::size_t>(r)]);
    best = std::max(best, s);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

/// Adjusted Rand index from the contingency table.
inline double adjusted_rand_index(const std::vector<int>& a, const std::vector<int>& b) {
  const int ka = *std::max_element(a.begin(), a.end()) + 1;
  const int kb = *std::max_element(b.begin(), b.end()) + 1;
  std::vector<std::vector<double>> table(static_cast<std::size_t>(ka),
                                         std::vector<double>(static_cast<std::size_t>(kb), 0));
  for (std::size_t i = 0; i < a.size(); ++i) {
    table[static_cast<std::size_t>(a[i])][static_cast<std::size_t>(b[i])] += 1.0;
  }
  auto c2 = [](double n) { return n * (n - 1.0) / 2.0; };
  double sum_cells = 0.0, sum_rows = 0.0, sum_cols = 0.0;
  std::vector<double> col_tot(static_cast<std::size_t>(kb), 0.0);
  for (const auto& row : table) {
    double rt = 0.0;
    for (std::size_t c = 0; c < row.size(); ++c) {
      sum_cells += c2(row[c]);
      rt += row[c];
      col_tot[c] += row[c];
    }
    sum_rows += c2(rt);
  }
  for (double ct : col_tot) sum_cols += c2(ct);
  const double expected = sum_rows * sum_cols / c2(static_cast<double>(a.size()));
  const double max_index = 0.5 * (sum_rows + sum_cols);
  if (max_index == expected) return 1.0;
  return (sum_cells - expected) / (max_index - expected);
}

// 4-connected background reachable from the border stays off; everything
// else is switched on.
inline Grid fill_holes(const Grid& g) {
  const int rows = static_cast<int>(g.rows()), cols = static_cast<int>(g.cols());
  Grid outside = Grid::Zero(rows, cols);
  std::deque<std::pair<int, int>> queue;
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      const bool border = r == 0 || c == 0 || r == rows - 1 || c == cols - 1;
      if (border && g(r, c) <= 0.5) {
        outside(r, c) = 1.0;
        queue.emplace_back(r, c);
      }
    }
  }
  while (!queue.empty()) {
    auto [r, c] = queue.front();
    queue.pop_front();
    const int dr[] = {-1, 1, 0, 0}, dc[] = {0, 0, -1, 1};
    for (int k = 0; k < 4; ++k) {
      const int rr = r + dr[k], cc = c + dc[k];
      if (rr < 0 || cc < 0 || rr >= rows || cc >= cols) continue;
      if (outside(rr, cc) == 1.0 || g(rr, cc) > 0.5) continue;
      outside(rr, cc) = 1.0;
      queue.emplace_back(rr, cc);
    }
  }
  return (Grid::Ones(rows, cols) - outside);
}

// Connected random blob grown from the centre, holes filled.
inline Grid random_component(int size, int steps, std::mt19937_64& rng) {
  Grid g = Grid::Zero(size, size);
  std::vector<std::pair<int, int>> on = {{size / 2, size / 2}};
  g(size / 2, size / 2) = 1.0;
  std::uniform_int_distribution<int> dir(0, 7);
  const int dr[] = {-1, 1, 0, 0, -1, -1, 1, 1}, dc[] = {0, 0, -1, 1, -1, 1, -1, 1};
  for (int s = 0; s < steps; ++s) {
    const auto [r, c] = on[std::uniform_int_distribution<std::size_t>(0, on.size() - 1)(rng)];
    const int k = dir(rng);
    const int rr = r + dr[k], cc = c + dc[k];
    if (rr < 1 || cc < 1 || rr >= size - 1 || cc >= size - 1 || g(rr, cc) == 1.0) continue;
    g(rr, cc) = 1.0;
    on.emplace_back(rr, cc);
  }
  return fill_holes(g);
}

inline PrototypeDictionary dict_from(const Matrix& protos, int multi_k = 1, double tau = 0.1) {
  PrototypeDictionary d;
  d.prototypes = protos;
  d.multi_k = multi_k;
  d.tau_ce = tau;
  d.pi = Vector::Constant(d.n_classes(), 1.0 / d.n_classes());
  return d;
}

// Orthonormal rows.
inline Matrix orthonormal(int k, int dim, std::mt19937_64& rng) {
  Matrix a(dim, k);
  std::normal_distribution<double> z(0.0, 1.0);
  for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = z(rng);
  return Eigen::HouseholderQR<Matrix>(a).householderQ() * Matrix::Identity(dim, k);
}

}  // namespace tdl::testing
