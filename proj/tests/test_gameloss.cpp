#include "support.hpp"
#include "tdl/gameloss.hpp"

#include <doctest.h>

#include <random>

using namespace tdl;
using namespace tdl::testing;

namespace {

// Focal plus dice evaluated pixel by pixel with std::pow and std::log.
double reference_rec(const Field& recon, const Grid& target, double gamma, double alpha,
                     double smooth, double clamp) {
  double focal = 0.0, inter = 0.0, psum = 0.0, ysum = 0.0;
  for (int r = 0; r < recon.rows(); ++r) {
    for (int c = 0; c < recon.cols(); ++c) {
      const double p = std::min(std::max(recon(r, c), clamp), 1.0 - clamp);
      const double y = target(r, c);
      focal += y * (-alpha * std::pow(1.0 - p, gamma) * std::log(p));
      focal += (1.0 - y) * (-(1.0 - alpha) * std::pow(p, gamma) * std::log(1.0 - p));
      inter += p * y;
      psum += p;
      ysum += y;
    }
  }
  focal /= static_cast<double>(recon.size());
  return focal + 1.0 - (2.0 * inter + smooth) / (psum + ysum + smooth);
}

// L-shape on 8x8 split into its two strokes.
struct LShape {
  Grid target = Grid::Zero(8, 8);
  Grid vertical = Grid::Zero(8, 8);
  Grid horizontal = Grid::Zero(8, 8);
  LShape() {
    for (int r = 1; r <= 6; ++r) vertical(r, 1) = 1.0;
    for (int c = 2; c <= 6; ++c) horizontal(6, c) = 1.0;
    target = vertical + horizontal;
  }
};

LogitGrid saturate(const Grid& mask, double v) {
  return mask.unaryExpr([v](double x) { return x > 0.5 ? v : -v; });
}

}  // namespace

TEST_CASE("reconstruction loss of a perfect and a total miss") {
  std::mt19937_64 rng(1);
  GameConfig cfg;
  const Grid y = random_binary(8, 8, 0.4, rng);
  CHECK(reconstruction_loss(y, y, cfg) < 1e-5);
  const Field miss = Grid::Ones(8, 8) - y;
  CHECK(dice_loss(miss, y, cfg) == doctest::Approx(1.0).epsilon(0.05));
  CHECK_THROWS_AS(reconstruction_loss(Field::Zero(8, 7), y, cfg), ShapeMismatch);
}

TEST_CASE("reconstruction loss matches an independent focal plus dice sum") {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(-0.2, 1.3);
  GameConfig cfg;
  for (int t = 0; t < 50; ++t) {
    const Grid y = random_binary(8, 8, 0.3, rng);
    Field recon(8, 8);
    for (Eigen::Index i = 0; i < recon.size(); ++i) recon.data()[i] = u(rng);
    const double expected = reference_rec(recon, y, 2.0, 0.25, 1.0, 1e-6);
    CHECK(reconstruction_loss(recon, y, cfg) == doctest::Approx(expected).epsilon(1e-12));
    GameConfig odd = cfg;
    odd.focal_gamma = 1.5;
    odd.focal_alpha = 0.6;
    odd.dice_smooth = 0.5;
    CHECK(reconstruction_loss(recon, y, odd) ==
          doctest::Approx(reference_rec(recon, y, 1.5, 0.6, 0.5, 1e-6)).epsilon(1e-12));
  }
}

TEST_CASE("overlap penalty examples") {
  const LShape l;
  GameConfig hard;
  hard.th_s.reset();
  const Grid split[] = {l.vertical, l.horizontal};
  CHECK(overlap_penalty(split, l.target, hard) == 0.0);
  // Under the soft step every pixel of an exact partition carries the
  // residual occupancy of one idle player: soft_step(0).
  const double floor = soft_step(0.0, 0.3, 20.0);
  CHECK(overlap_penalty(split, l.target, GameConfig{}) ==
        doctest::Approx(l.target.size() * floor).epsilon(1e-12));

  const Grid twice[] = {l.target, l.target};
  CHECK(overlap_penalty(twice, l.target, hard) == doctest::Approx(l.target.sum()));
}

TEST_CASE("soft-step overlap catches the weak-overlap cheat") {
  const LShape l;
  const Grid half = 0.5 * l.target;
  const Grid cheat[] = {half, half};
  GameConfig soft;
  soft.th_s = 0.3;
  soft.step_steepness = 50.0;
  GameConfig hard = soft;
  hard.th_s.reset();
  CHECK(overlap_penalty(cheat, l.target, soft) > 0.5 * l.target.sum());
  CHECK(overlap_penalty(cheat, l.target, hard) == 0.0);
}

TEST_CASE("soft-step overlap is positive when two players claim an empty pixel") {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> above(0.31, 1.0), below(0.0, 0.3);
  GameConfig cfg;
  for (int t = 0; t < 200; ++t) {
    Grid target = Grid::Zero(4, 4);
    Grid a(4, 4), b(4, 4);
    for (Eigen::Index i = 0; i < a.size(); ++i) {
      a.data()[i] = below(rng);
      b.data()[i] = below(rng);
    }
    a(1, 2) = above(rng);
    b(1, 2) = above(rng);
    const Grid parts[] = {a, b};
    CHECK(overlap_penalty(parts, target, cfg) > 0.0);
  }
}

TEST_CASE("resources penalty examples") {
  Grid three = Grid::Zero(4, 4), ten = Grid::Zero(4, 4);
  three.topRows(1).leftCols(3).setOnes();
  ten.topRows(2).setOnes();
  ten(2, 0) = ten(2, 1) = 1.0;
  const Grid parts[] = {three, ten};
  CHECK(resources_penalty(parts, 8.0) == doctest::Approx(5.0));
  CHECK(resources_penalty(parts, 3.0) == 0.0);
  const Grid empty[] = {Grid::Zero(4, 4)};
  CHECK(resources_penalty(empty, 6.5) == doctest::Approx(6.5));
  CHECK(resources_penalty(parts, 8.0, ResourcesHinge::Flipped) == doctest::Approx(2.0));
}

TEST_CASE("norm penalty examples") {
  const LogitGrid zero[] = {LogitGrid::Zero(3, 3)};
  CHECK(norm_penalty(zero) == 0.0);
  const LogitGrid two[] = {LogitGrid::Constant(1, 1, 2.0)};
  CHECK(norm_penalty(two) == 4.0);
  std::mt19937_64 rng(5);
  const std::vector<LogitGrid> l = {random_logits(5, 5, 3.0, rng), random_logits(5, 5, 3.0, rng)};
  const std::vector<LogitGrid> scaled = {2.5 * l[0], 2.5 * l[1]};
  CHECK(norm_penalty(scaled) == doctest::Approx(6.25 * norm_penalty(l)).epsilon(1e-12));
}

TEST_CASE("empty game has zero loss") {
  GameConfig cfg;
  cfg.quota = 0.0;
  const std::vector<LogitGrid> l(2, LogitGrid::Constant(6, 6, -40.0));
  const auto b = gt_loss(l, Grid::Zero(6, 6), cfg);
  CHECK(b.rec < 1e-4);
  CHECK(b.overlap == doctest::Approx(36 * soft_step(0.0, 0.3, 20.0)).epsilon(1e-6));
  CHECK(b.resources == 0.0);
  GameConfig no_norm = cfg;
  no_norm.alpha_norm = 0.0;
  CHECK(gt_loss(l, Grid::Zero(6, 6), no_norm).total < 1e-2);
  no_norm.th_s.reset();
  CHECK(gt_loss(l, Grid::Zero(6, 6), no_norm).total < 1e-4);
}

TEST_CASE("loss breakdown equals its independently evaluated components") {
  std::mt19937_64 rng(6);
  for (int t = 0; t < 50; ++t) {
    GameConfig cfg;
    cfg.lambda_sparse = t % 2 ? 0.01 : 0.0;
    if (t % 3 == 0) cfg.th_s.reset();
    if (t % 5 == 0) cfg.resources_hinge = ResourcesHinge::Flipped;
    const Grid y = random_binary(10, 10, 0.3, rng);
    std::vector<LogitGrid> l;
    std::vector<Grid> parts;
    for (int i = 0; i < 3; ++i) {
      l.push_back(random_logits(10, 10, 5.0, rng));
      parts.push_back(activate(l.back()));
    }
    const auto b = gt_loss(l, y, cfg);
    CHECK(b.rec == doctest::Approx(reconstruction_loss(reconstruct(parts), y, cfg)).epsilon(1e-10));
    CHECK(b.overlap == doctest::Approx(overlap_penalty(parts, y, cfg)).epsilon(1e-10));
    CHECK(b.resources ==
          doctest::Approx(resources_penalty(parts, cfg.quota, cfg.resources_hinge)).epsilon(1e-10));
    CHECK(b.norm == doctest::Approx(norm_penalty(l)).epsilon(1e-12));
    double mass_sum = 0.0;
    for (const auto& p : parts) mass_sum += p.sum();
    CHECK(b.sparse == doctest::Approx(cfg.lambda_sparse > 0 ? mass_sum : 0.0));
    const double sum = b.rec + cfg.alpha_overlap * b.overlap + cfg.alpha_resources * b.resources +
                       cfg.alpha_norm * b.norm + cfg.lambda_sparse * b.sparse;
    CHECK(std::abs(b.total - sum) <= 1e-9 * std::abs(sum));
    for (double v : {b.rec, b.overlap, b.resources, b.norm, b.sparse, b.total}) CHECK(v >= 0.0);
  }
}

TEST_CASE("analytic gradient matches central differences away from kinks") {
  std::mt19937_64 rng(7);
  for (int t = 0; t < 12; ++t) {
    GameConfig cfg;
    if (t % 3 == 1) cfg.th_s.reset();
    if (t % 4 == 2) cfg.lambda_sparse = 0.02;
    if (t % 4 == 3) cfg.resources_hinge = ResourcesHinge::Flipped;
    cfg.alpha_norm = 1e-3;
    const Grid y = random_binary(8, 8, 0.3, rng);
    const auto l = instance_away_from_kinks(8, 3, y, cfg, 1e-2, rng);
    const auto res = check_gradient(l, y, cfg);
    CHECK(res.max_rel_error <= 1e-4);
  }
}

TEST_CASE("gradient vanishes at a constructed optimum") {
  const LShape l;
  GameConfig cfg;
  cfg.alpha_norm = 0.0;
  cfg.quota = 2.0;
  const std::vector<LogitGrid> logits = {saturate(l.vertical, 12.0),
                                         saturate(l.horizontal, 12.0)};
  const auto b = gt_loss(logits, l.target, cfg);
  CHECK(b.rec < 1e-3);
  CHECK(b.overlap < l.target.size() * 1.01 * soft_step(0.0, 0.3, 20.0));
  CHECK(b.resources == 0.0);
  double norm2 = 0.0;
  for (const auto& g : gt_loss_grad(logits, l.target, cfg)) norm2 += g.squaredNorm();
  CHECK(std::sqrt(norm2) < 1e-3);
}

TEST_CASE("saturated player has no gradient without the norm term") {
  std::mt19937_64 rng(8);
  GameConfig cfg;
  cfg.alpha_norm = 0.0;
  const Grid y = random_binary(8, 8, 0.4, rng);
  std::vector<LogitGrid> l = {random_logits(8, 8, 3.0, rng),
                              saturate(random_binary(8, 8, 0.5, rng), 40.0)};
  const auto g = gt_loss_grad(l, y, cfg);
  CHECK(g[1].cwiseAbs().maxCoeff() < 1e-12);
  CHECK(g[0].cwiseAbs().maxCoeff() > 1e-6);
}

TEST_CASE("loss and gradient reject bad input") {
  GameConfig cfg;
  CHECK_THROWS_AS(gt_loss(std::span<const LogitGrid>{}, Grid::Zero(2, 2), cfg),
                  std::invalid_argument);
  const LogitGrid wrong[] = {LogitGrid::Zero(2, 3)};
  CHECK_THROWS_AS(gt_loss(wrong, Grid::Zero(2, 2), cfg), ShapeMismatch);
  GameConfig bad = cfg;
  bad.prob_clamp = 0.5;
  CHECK_THROWS(bad.validate());
  bad = cfg;
  bad.th_s = 1.0;
  CHECK_THROWS(bad.validate());
  bad = cfg;
  bad.alpha_overlap = -1.0;
  CHECK_THROWS(bad.validate());
  CHECK_NOTHROW(cfg.validate());
}
