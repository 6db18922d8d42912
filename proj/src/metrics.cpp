#include "tdl/metrics.hpp"
#include "tdl/dictionary.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <stdexcept>

namespace tdl {

double perimeter(const Polyline& closed) {
  double total = 0.0;
  for (std::size_t i = 1; i < closed.size(); ++i) total += (closed[i] - closed[i - 1]).norm();
  return total;
}

double signed_area(const Polyline& closed) {
  double twice = 0.0;
  for (std::size_t i = 1; i < closed.size(); ++i) {
    twice += closed[i - 1].x() * closed[i].y() - closed[i].x() * closed[i - 1].y();
  }
  return 0.5 * twice;
}

Components connected_components(const Grid& mask, double threshold) {
  Components out;
  const Eigen::Index rows = mask.rows(), cols = mask.cols();
  out.labels.setConstant(rows, cols, -1);
  std::vector<std::pair<Eigen::Index, Eigen::Index>> stack;
  for (Eigen::Index r0 = 0; r0 < rows; ++r0) {
    for (Eigen::Index c0 = 0; c0 < cols; ++c0) {
      if (mask(r0, c0) <= threshold || out.labels(r0, c0) >= 0) continue;
      const int label = out.count();
      int size = 0;
      out.labels(r0, c0) = label;
      stack.push_back({r0, c0});
      while (!stack.empty()) {
        const auto [r, c] = stack.back();
        stack.pop_back();
        ++size;
        for (Eigen::Index dr = -1; dr <= 1; ++dr) {
          for (Eigen::Index dc = -1; dc <= 1; ++dc) {
            const Eigen::Index rr = r + dr, cc = c + dc;
            if (rr < 0 || rr >= rows || cc < 0 || cc >= cols) continue;
            if (mask(rr, cc) <= threshold || out.labels(rr, cc) >= 0) continue;
            out.labels(rr, cc) = label;
            stack.push_back({rr, cc});
          }
        }
      }
      out.sizes.push_back(size);
    }
  }
  return out;
}

Contour trace_contour(const Components& comps, int label) {
  const auto& lab = comps.labels;
  const Eigen::Index rows = lab.rows(), cols = lab.cols();
  auto inside = [&](Eigen::Index x, Eigen::Index y) {
    return x >= 0 && y >= 0 && x < cols && y < rows && lab(y, x) == label;
  };
  // Raster-first pixel: its top edge is on the outer boundary.
  Eigen::Index sx = -1, sy = -1;
  for (Eigen::Index y = 0; y < rows && sx < 0; ++y) {
    for (Eigen::Index x = 0; x < cols; ++x) {
      if (lab(y, x) == label) {
        sx = x;
        sy = y;
        break;
      }
    }
  }
  if (sx < 0) throw std::invalid_argument("trace_contour: no such component");

  Contour out;
  Eigen::Index x = sx, y = sy, dx = 1, dy = 0;
  out.cracks.emplace_back(x, y);
  auto push_centre = [&](Eigen::Index px, Eigen::Index py) {
    const Point p(px + 0.5, py + 0.5);
    if (out.centres.empty() || out.centres.back() != p) out.centres.push_back(p);
  };
  do {
    // The pixel on the right of the edge about to be walked.
    push_centre(x + (dx - dy - 1) / 2, y + (dy + dx - 1) / 2);
    x += dx;
    y += dy;
    out.cracks.emplace_back(x, y);
    // Pixels ahead-left and ahead-right of the new corner; y grows downward.
    const Eigen::Index lx = dy, ly = -dx;
    const Eigen::Index al_x = x + (dx + lx - 1) / 2, al_y = y + (dy + ly - 1) / 2;
    const Eigen::Index ar_x = x + (dx - lx - 1) / 2, ar_y = y + (dy - ly - 1) / 2;
    if (inside(al_x, al_y)) {
      dx = lx;
      dy = ly;
    } else if (!inside(ar_x, ar_y)) {
      dx = -lx;
      dy = -ly;
    }
  } while (!(x == sx && y == sy && dx == 1 && dy == 0));
  if (out.centres.size() == 1 || out.centres.front() != out.centres.back()) {
    out.centres.push_back(out.centres.front());
  }
  return out;
}

namespace {

double segment_distance(const Point& p, const Point& a, const Point& b) {
  const Point ab = b - a;
  const double len2 = ab.squaredNorm();
  if (len2 == 0.0) return (p - a).norm();
  const double t = std::clamp((p - a).dot(ab) / len2, 0.0, 1.0);
  return (p - (a + t * ab)).norm();
}

void rdp_recurse(const Polyline& line, std::size_t lo, std::size_t hi, double epsilon,
                 std::vector<bool>& keep) {
  if (hi <= lo + 1) return;
  double worst = -1.0;
  std::size_t at = lo;
  for (std::size_t i = lo + 1; i < hi; ++i) {
    const double d = segment_distance(line[i], line[lo], line[hi]);
    if (d > worst) {
      worst = d;
      at = i;
    }
  }
  if (worst >= epsilon) {
    keep[at] = true;
    rdp_recurse(line, lo, at, epsilon, keep);
    rdp_recurse(line, at, hi, epsilon, keep);
  }
}

}  // namespace

Polyline rdp_simplify(const Polyline& line, double epsilon) {
  if (line.size() < 2) throw std::invalid_argument("rdp_simplify: need at least 2 vertices");
  if (!(epsilon >= 0.0)) throw std::invalid_argument("rdp_simplify: epsilon must be >= 0");
  std::vector<bool> keep(line.size(), false);
  keep.front() = keep.back() = true;
  rdp_recurse(line, 0, line.size() - 1, epsilon, keep);
  Polyline out;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (keep[i]) out.push_back(line[i]);
  }
  return out;
}

Polyline rdp_simplify_closed(const Polyline& closed, double epsilon) {
  if (closed.size() < 3) return closed;
  std::size_t far = 0;
  double best = -1.0;
  for (std::size_t i = 1; i + 1 < closed.size(); ++i) {
    const double d = (closed[i] - closed.front()).squaredNorm();
    if (d > best) {
      best = d;
      far = i;
    }
  }
  if (far == 0) return closed;
  const Polyline a(closed.begin(), closed.begin() + static_cast<std::ptrdiff_t>(far) + 1);
  const Polyline b(closed.begin() + static_cast<std::ptrdiff_t>(far), closed.end());
  Polyline out = rdp_simplify(a, epsilon);
  const Polyline tail = rdp_simplify(b, epsilon);
  out.insert(out.end(), tail.begin() + 1, tail.end());
  return out;
}

Polyline convex_hull(std::span<const Point> points) {
  std::vector<Point> pts(points.begin(), points.end());
  std::sort(pts.begin(), pts.end(), [](const Point& a, const Point& b) {
    return a.x() < b.x() || (a.x() == b.x() && a.y() < b.y());
  });
  pts.erase(std::unique(pts.begin(), pts.end()), pts.end());
  if (pts.size() < 2) return Polyline(pts.begin(), pts.end());
  auto cross = [](const Point& o, const Point& a, const Point& b) {
    return (a.x() - o.x()) * (b.y() - o.y()) - (a.y() - o.y()) * (b.x() - o.x());
  };
  Polyline hull(2 * pts.size());
  std::size_t k = 0;
  for (const auto& p : pts) {
    while (k >= 2 && cross(hull[k - 2], hull[k - 1], p) <= 0.0) --k;
    hull[k++] = p;
  }
  for (std::size_t i = pts.size() - 1, lower = k + 1; i-- > 0;) {
    while (k >= lower && cross(hull[k - 2], hull[k - 1], pts[i]) <= 0.0) --k;
    hull[k++] = pts[i];
  }
  hull.resize(k);
  return hull;
}

ShapeScoreBreakdown shape_score(const Grid& part, const ShapeSettings& cfg) {
  ShapeScoreBreakdown out;
  const Components comps = connected_components(part, cfg.threshold);
  out.segment_count = comps.count();
  if (comps.count() == 0) return out;
  out.empty = false;

  double total_area = 0.0, largest_area = -1.0;
  Contour largest;
  for (int label = 0; label < comps.count(); ++label) {
    Contour c = trace_contour(comps, label);
    const double a = c.area();
    total_area += a;
    if (a > largest_area) {
      largest_area = a;
      largest = std::move(c);
    }
  }
  const double on = std::accumulate(comps.sizes.begin(), comps.sizes.end(), 0.0);
  out.r_cont = largest_area / total_area;
  out.r_solid = std::min(1.0, on / total_area);

  const double original = perimeter(largest.centres);
  if (original <= 0.0) {
    out.r_smooth = 1.0;
  } else {
    const Polyline smooth = cfg.smoothing == Smoothing::Rdp
                                ? rdp_simplify_closed(largest.centres, cfg.epsilon)
                                : convex_hull(largest.centres);
    out.r_smooth = std::clamp(perimeter(smooth) / original, 0.0, 1.0);
  }
  out.score = out.r_cont * out.r_solid * out.r_smooth;
  return out;
}

double mean_shape_score(std::span<const std::vector<Grid>> samples, const ShapeSettings& cfg) {
  double total = 0.0;
  int n = 0;
  for (const auto& parts : samples) {
    for (const auto& p : parts) {
      const auto s = shape_score(p, cfg);
      if (s.empty) continue;
      total += s.score;
      ++n;
    }
  }
  return n > 0 ? total / n : 0.0;
}

// ---------------------------------------------------------------------------
// Clustering information gain

PcaReducer PcaReducer::fit(const Matrix& points, int d) {
  if (points.rows() < 1) throw std::invalid_argument("pca: no points");
  if (d < 1) throw std::invalid_argument("pca: d must be positive");
  PcaReducer out;
  out.mean = points.colwise().mean().transpose();
  const Matrix x = points.rowwise() - out.mean.transpose();
  const Eigen::Index dim = x.cols();
  const int keep = static_cast<int>(std::min<Eigen::Index>(d, std::min(dim, x.rows())));
  if (x.rows() >= dim) {
    Eigen::SelfAdjointEigenSolver<Matrix> eig(x.transpose() * x);
    out.components = eig.eigenvectors().rightCols(keep).rowwise().reverse().transpose();
  } else {
    // Gram route: eigenvectors of X X^T mapped back through X^T.
    // Directions with a null eigenvalue carry no variance and are dropped.
    Eigen::SelfAdjointEigenSolver<Matrix> eig(x * x.transpose());
    const Vector& values = eig.eigenvalues();
    const double floor = 1e-12 * std::max(values.maxCoeff(), 0.0);
    int rank = 0;
    for (Eigen::Index i = values.size() - keep; i < values.size(); ++i) rank += values(i) > floor;
    const Matrix u = eig.eigenvectors().rightCols(rank).rowwise().reverse();
    Matrix v = x.transpose() * u;
    for (Eigen::Index c = 0; c < v.cols(); ++c) v.col(c) /= v.col(c).norm();
    out.components = v.transpose();
  }
  // Fix the sign of each direction so the largest-magnitude entry is positive.
  for (Eigen::Index r = 0; r < out.components.rows(); ++r) {
    Eigen::Index at = 0;
    out.components.row(r).cwiseAbs().maxCoeff(&at);
    if (out.components(r, at) < 0.0) out.components.row(r) *= -1.0;
  }
  return out;
}

Matrix PcaReducer::transform(const Matrix& points) const {
  return (points.rowwise() - mean.transpose()) * components.transpose();
}

PartMatrix flatten_parts(std::span<const std::vector<Grid>> samples, double empty_mass) {
  std::vector<const Grid*> parts;
  PartMatrix out;
  for (std::size_t s = 0; s < samples.size(); ++s) {
    for (const auto& p : samples[s]) {
      if (p.sum() < empty_mass || p.sum() <= 0.0) continue;
      parts.push_back(&p);
      out.sample.push_back(static_cast<int>(s));
    }
  }
  if (parts.empty()) return out;
  const Eigen::Index dim = parts.front()->size();
  out.rows.resize(static_cast<Eigen::Index>(parts.size()), dim);
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (parts[i]->size() != dim) throw ShapeMismatch("flatten_parts: parts differ in size");
    out.rows.row(static_cast<Eigen::Index>(i)) =
        Eigen::Map<const Eigen::RowVectorXd>(parts[i]->data(), dim);
  }
  return out;
}

namespace {

// Row order sorted lexicographically, so clustering ignores input order.
std::vector<Eigen::Index> canonical_order(const Matrix& m) {
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(m.rows()));
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](Eigen::Index a, Eigen::Index b) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      if (m(a, c) != m(b, c)) return m(a, c) < m(b, c);
    }
    return false;
  });
  return idx;
}

Matrix take_rows(const Matrix& m, const std::vector<Eigen::Index>& idx) {
  Matrix out(static_cast<Eigen::Index>(idx.size()), m.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(idx[i]);
  return out;
}

double mce_of(const PartMatrix& parts, std::size_t n_samples, const PcaReducer& reducer,
              const CigSettings& cfg) {
  if (parts.rows.rows() < cfg.k) throw std::invalid_argument("mce: fewer parts than clusters");
  const auto order = canonical_order(parts.rows);
  const Matrix reduced = reducer.transform(take_rows(parts.rows, order));
  const auto km = kmeans(reduced, cfg.k, cfg.seed, cfg.kmeans_iters);
  std::vector<double> dist(n_samples, 0.0);
  std::vector<int> count(n_samples, 0);
  for (std::size_t i = 0; i < order.size(); ++i) {
    const Eigen::Index row = static_cast<Eigen::Index>(i);
    const auto c = km.assignments[i];
    const auto s = static_cast<std::size_t>(parts.sample[static_cast<std::size_t>(order[i])]);
    dist[s] += (reduced.row(row) - km.centroids.row(c)).norm();
    ++count[s];
  }
  double total = 0.0;
  int used = 0;
  for (std::size_t s = 0; s < n_samples; ++s) {
    if (count[s] == 0) continue;
    total += dist[s] / count[s];
    ++used;
  }
  return total / used;
}

}  // namespace

double mce(std::span<const std::vector<Grid>> samples, const PcaReducer& reducer,
           const CigSettings& cfg) {
  return mce_of(flatten_parts(samples, cfg.empty_mass), samples.size(), reducer, cfg);
}

double mce(std::span<const std::vector<Grid>> samples, const CigSettings& cfg) {
  const PartMatrix parts = flatten_parts(samples, cfg.empty_mass);
  if (parts.rows.rows() < cfg.k) throw std::invalid_argument("mce: fewer parts than clusters");
  const auto reducer = PcaReducer::fit(take_rows(parts.rows, canonical_order(parts.rows)), cfg.d_pca);
  return mce_of(parts, samples.size(), reducer, cfg);
}

std::vector<Grid> random_parts(const Grid& input, int n_players, std::uint64_t seed) {
  // FNV-1a over the pixel bytes.
  std::uint64_t h = 1469598103934665603ULL;
  const auto* bytes = reinterpret_cast<const unsigned char*>(input.data());
  for (std::size_t i = 0; i < static_cast<std::size_t>(input.size()) * sizeof(double); ++i) {
    h = (h ^ bytes[i]) * 1099511628211ULL;
  }
  std::mt19937_64 rng(mix_seed(seed, h));
  std::normal_distribution<double> z(0.0, 1.0);
  std::vector<Grid> out;
  for (int i = 0; i < n_players; ++i) {
    Grid p(input.rows(), input.cols());
    for (Eigen::Index k = 0; k < p.size(); ++k) p.data()[k] = sigmoid(z(rng)) * input.data()[k];
    out.push_back(std::move(p));
  }
  return out;
}

CigResult cig(std::span<const std::vector<Grid>> model_parts, std::span<const Grid> inputs,
              const CigSettings& cfg) {
  if (model_parts.size() != inputs.size()) {
    throw std::invalid_argument("cig: model parts and inputs differ in sample count");
  }
  std::vector<std::vector<Grid>> rand;
  rand.reserve(inputs.size());
  for (const auto& x : inputs) rand.push_back(random_parts(x, cfg.n_players, cfg.seed));

  const PartMatrix model = flatten_parts(model_parts, cfg.empty_mass);
  const PartMatrix random = flatten_parts(rand, cfg.empty_mass);
  if (model.rows.rows() < cfg.k || random.rows.rows() < cfg.k) {
    throw std::invalid_argument("cig: fewer parts than clusters");
  }
  Matrix pooled(model.rows.rows() + random.rows.rows(), model.rows.cols());
  pooled << model.rows, random.rows;
  const auto reducer = PcaReducer::fit(take_rows(pooled, canonical_order(pooled)), cfg.d_pca);

  CigResult out;
  out.mce_model = mce_of(model, model_parts.size(), reducer, cfg);
  out.mce_rand = mce_of(random, rand.size(), reducer, cfg);
  out.cig = out.mce_rand > 0.0 ? std::clamp(1.0 - out.mce_model / out.mce_rand, 0.0, 1.0) : 0.0;
  return out;
}

// ---------------------------------------------------------------------------
// Grounding

std::vector<int> hungarian(const Matrix& cost) {
  const int rows = static_cast<int>(cost.rows()), cols = static_cast<int>(cost.cols());
  const int n = std::max(rows, cols);
  if (n == 0) return {};
  // Pad to square with zeros; padded matches are dropped afterwards.
  Matrix a = Matrix::Zero(n, n);
  a.topLeftCorner(rows, cols) = cost;
  constexpr double inf = std::numeric_limits<double>::infinity();
  // Potentials-based O(n^3) method, 1-indexed.
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  std::vector<bool> used(n + 1);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), false);
    do {
      used[j0] = true;
      const int i0 = p[j0];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = a(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> out(static_cast<std::size_t>(rows), -1);
  for (int j = 1; j <= n; ++j) {
    const int i = p[j] - 1;
    if (i < rows && j - 1 < cols) out[static_cast<std::size_t>(i)] = j - 1;
  }
  return out;
}

Alignment iou_align(std::span<const Grid> pred, std::span<const Grid> gt, double threshold) {
  if (gt.empty()) throw std::invalid_argument("iou_align: no ground-truth parts");
  if (pred.empty()) throw std::invalid_argument("iou_align: no predicted parts");
  Matrix table(static_cast<Eigen::Index>(gt.size()), static_cast<Eigen::Index>(pred.size()));
  for (std::size_t g = 0; g < gt.size(); ++g) {
    for (std::size_t p = 0; p < pred.size(); ++p) {
      table(static_cast<Eigen::Index>(g), static_cast<Eigen::Index>(p)) =
          iou(gt[g], pred[p], threshold);
    }
  }
  Alignment out;
  out.gt_to_pred = hungarian(-table);
  out.ious.resize(gt.size(), 0.0);
  for (std::size_t g = 0; g < gt.size(); ++g) {
    const int p = out.gt_to_pred[g];
    if (p >= 0) out.ious[g] = table(static_cast<Eigen::Index>(g), p);
  }
  out.mean_iou = std::accumulate(out.ious.begin(), out.ious.end(), 0.0) / gt.size();
  return out;
}

RelationHits relation_hits(std::span<const Relation> pred, std::span<const Relation> gt,
                           std::span<const int> gt_to_pred) {
  RelationHits out;
  for (const auto& r : gt) {
    ++out.total;
    if (r.first < 0 || r.second < 0 || static_cast<std::size_t>(r.first) >= gt_to_pred.size() ||
        static_cast<std::size_t>(r.second) >= gt_to_pred.size()) {
      throw std::invalid_argument("relation_accuracy: relation index out of range");
    }
    const int a = gt_to_pred[static_cast<std::size_t>(r.first)];
    const int b = gt_to_pred[static_cast<std::size_t>(r.second)];
    if (a < 0 || b < 0) continue;
    for (const auto& q : pred) {
      const bool same = (q.first == a && q.second == b) || (q.first == b && q.second == a);
      if (same) {
        if (q.kind == r.kind) ++out.correct;
        break;
      }
    }
  }
  return out;
}

double relation_accuracy(std::span<const Relation> pred, std::span<const Relation> gt,
                         std::span<const int> gt_to_pred) {
  const auto h = relation_hits(pred, gt, gt_to_pred);
  if (h.total == 0) throw std::invalid_argument("relation_accuracy: no ground-truth relations");
  return static_cast<double>(h.correct) / h.total;
}

}  // namespace tdl
