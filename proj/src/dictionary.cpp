#include "tdl/dictionary.hpp"
#include "tdl/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <random>

namespace tdl {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Descriptors

namespace {

// Centre of mass as (row, col).
std::pair<double, double> centre_of_mass(const Grid& g) {
  const double m = g.sum();
  const Eigen::VectorXd rows = g.rowwise().sum();
  const Eigen::RowVectorXd cols = g.colwise().sum();
  double cr = 0.0, cc = 0.0;
  for (Eigen::Index r = 0; r < rows.size(); ++r) cr += static_cast<double>(r) * rows(r);
  for (Eigen::Index c = 0; c < cols.size(); ++c) cc += static_cast<double>(c) * cols(c);
  return {cr / m, cc / m};
}

}  // namespace

std::optional<LinearizedDescriptor> LinearizedDescriptor::at(const Grid& part,
                                                             const DescriptorConfig& cfg) {
  if (part.rows() < cfg.size || part.cols() < cfg.size) {
    throw std::invalid_argument("embed_part: grid smaller than descriptor size");
  }
  if (!(part.sum() >= cfg.empty_mass) || part.sum() <= 0.0) return std::nullopt;

  LinearizedDescriptor d;
  d.rows_ = static_cast<int>(part.rows());
  d.cols_ = static_cast<int>(part.cols());
  d.size_ = cfg.size;
  const auto [cr, cc] = centre_of_mass(part);

  // A pixel is a unit box; after shifting it overlaps at most two pooling cells.
  auto taps = [&](int n, double shift) {
    std::vector<Taps> out(static_cast<std::size_t>(n));
    const double width = static_cast<double>(n) / cfg.size;
    for (int i = 0; i < n; ++i) {
      const double x = i + shift;
      const int k0 = static_cast<int>(std::floor(x / width));
      const double boundary = -0.5 + (k0 + 1) * width;
      const double w0 = std::min(1.0, boundary - (x - 0.5));
      Taps t{{k0, k0 + 1}, {w0, 1.0 - w0}};
      for (int j = 0; j < 2; ++j) {
        if (t.cell[j] < 0 || t.cell[j] >= cfg.size || t.weight[j] <= 0.0) {
          t.cell[j] = -1;
          t.weight[j] = 0.0;
        }
      }
      out[static_cast<std::size_t>(i)] = t;
    }
    return out;
  };
  d.row_taps_ = taps(d.rows_, (d.rows_ - 1) / 2.0 - cr);
  d.col_taps_ = taps(d.cols_, (d.cols_ - 1) / 2.0 - cc);

  // Pool columns first, then rows.
  Matrix by_col = Matrix::Zero(d.rows_, cfg.size);
  for (int r = 0; r < d.rows_; ++r) {
    for (int c = 0; c < d.cols_; ++c) {
      const double v = part(r, c);
      if (v == 0.0) continue;
      const auto& t = d.col_taps_[static_cast<std::size_t>(c)];
      for (int j = 0; j < 2; ++j) {
        if (t.cell[j] >= 0) by_col(r, t.cell[j]) += t.weight[j] * v;
      }
    }
  }
  GridT<double> pooled = GridT<double>::Zero(cfg.size, cfg.size);
  for (int r = 0; r < d.rows_; ++r) {
    const auto& t = d.row_taps_[static_cast<std::size_t>(r)];
    for (int j = 0; j < 2; ++j) {
      if (t.cell[j] >= 0) pooled.row(t.cell[j]) += t.weight[j] * by_col.row(r);
    }
  }
  const Vector v = Eigen::Map<const Vector>(pooled.data(), pooled.size());
  d.norm_ = v.norm();
  if (!(d.norm_ > 0.0)) return std::nullopt;
  d.unit_ = v / d.norm_;
  return d;
}

Grid LinearizedDescriptor::pullback(const Vector& grad_descriptor) const {
  const Vector g_v = (grad_descriptor - unit_ * unit_.dot(grad_descriptor)) / norm_;
  const Eigen::Map<const GridT<double>> g_cells(g_v.data(), size_, size_);
  // Transpose of the pooling: rows first, then columns.
  Matrix by_row = Matrix::Zero(rows_, size_);
  for (int r = 0; r < rows_; ++r) {
    const auto& t = row_taps_[static_cast<std::size_t>(r)];
    for (int j = 0; j < 2; ++j) {
      if (t.cell[j] >= 0) by_row.row(r) += t.weight[j] * g_cells.row(t.cell[j]);
    }
  }
  Grid out = Grid::Zero(rows_, cols_);
  for (int c = 0; c < cols_; ++c) {
    const auto& t = col_taps_[static_cast<std::size_t>(c)];
    for (int j = 0; j < 2; ++j) {
      if (t.cell[j] >= 0) out.col(c) += t.weight[j] * by_row.col(t.cell[j]);
    }
  }
  return out;
}

std::optional<PartDescriptor> embed_part(const Grid& part, const DescriptorConfig& cfg) {
  auto lin = LinearizedDescriptor::at(part, cfg);
  if (!lin) return std::nullopt;
  return PartDescriptor{lin->value(), part.sum()};
}

std::optional<PartDescriptor> embed_pair(const Grid& a, const Grid& b,
                                         const DescriptorConfig& cfg) {
  require_same_shape(a, b, "embed_pair");
  if (!(a.sum() >= cfg.empty_mass) || !(b.sum() >= cfg.empty_mass)) return std::nullopt;
  const Grid joint = (a + b).cwiseMin(1.0);
  return embed_part(joint, cfg);
}

// ---------------------------------------------------------------------------
// Dictionary

void PrototypeDictionary::validate() const {
  if (arity != 1 && arity != 2) throw std::invalid_argument("dictionary: arity must be 1 or 2");
  if (multi_k < 1) throw std::invalid_argument("dictionary: multi_k must be >= 1");
  if (prototypes.rows() % multi_k != 0) {
    throw std::invalid_argument("dictionary: prototype rows not a multiple of multi_k");
  }
  if (n_classes() < 2) throw std::invalid_argument("dictionary: need at least 2 classes");
  if (!prototypes.allFinite()) throw std::invalid_argument("dictionary: non-finite prototype");
  if (pi.size() != n_classes() || (pi.array() <= 0.0).any() ||
      std::abs(pi.sum() - 1.0) > 1e-9) {
    throw std::invalid_argument("dictionary: pi must be a positive simplex vector");
  }
  if (!(tau_ce > 0.0)) throw std::invalid_argument("dictionary: tau_ce must be > 0");
}

Vector PrototypeDictionary::class_logits(const Vector& x) const {
  const Vector z = -(prototypes.rowwise() - x.transpose()).rowwise().squaredNorm() / tau_ce;
  Vector out(n_classes());
  for (int c = 0; c < n_classes(); ++c) {
    const auto seg = z.segment(c * multi_k, multi_k);
    const double m = seg.maxCoeff();
    out(c) = m + std::log((seg.array() - m).exp().sum());
  }
  return out;
}

double PrototypeDictionary::min_sq_distance(const Vector& x, int* row) const {
  Eigen::Index best = 0;
  const double d = (prototypes.rowwise() - x.transpose()).rowwise().squaredNorm().minCoeff(&best);
  if (row) *row = static_cast<int>(best);
  return d;
}

int PrototypeDictionary::nearest_class(const Vector& x) const {
  int row = 0;
  min_sq_distance(x, &row);
  return row / multi_k;
}

json dictionary_to_json(const PrototypeDictionary& d) {
  json protos = json::array();
  for (Eigen::Index r = 0; r < d.prototypes.rows(); ++r) {
    std::vector<double> row(static_cast<std::size_t>(d.prototypes.cols()));
    for (Eigen::Index c = 0; c < d.prototypes.cols(); ++c) row[static_cast<std::size_t>(c)] = d.prototypes(r, c);
    protos.push_back(row);
  }
  return {{"arity", d.arity},
          {"d_mu", d.dim()},
          {"prototypes", protos},
          {"pi", std::vector<double>(d.pi.data(), d.pi.data() + d.pi.size())},
          {"tau_ce", d.tau_ce},
          {"multi_k", d.multi_k},
          {"meta", d.meta}};
}

PrototypeDictionary dictionary_from_json(const json& j) {
  PrototypeDictionary d;
  d.arity = j.at("arity").get<int>();
  const int dim = j.at("d_mu").get<int>();
  const auto& rows = j.at("prototypes");
  d.prototypes.resize(static_cast<Eigen::Index>(rows.size()), dim);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto v = rows[r].get<std::vector<double>>();
    if (static_cast<int>(v.size()) != dim) throw std::runtime_error("dictionary: bad row width");
    for (int c = 0; c < dim; ++c) d.prototypes(static_cast<Eigen::Index>(r), c) = v[static_cast<std::size_t>(c)];
  }
  const auto pi = j.at("pi").get<std::vector<double>>();
  d.pi = Eigen::Map<const Vector>(pi.data(), static_cast<Eigen::Index>(pi.size()));
  d.tau_ce = j.at("tau_ce").get<double>();
  d.multi_k = j.value("multi_k", 1);
  d.meta = j.value("meta", json::object());
  d.validate();
  return d;
}

void save_dictionary(const std::string& path, const PrototypeDictionary& d) {
  write_text(path, dictionary_to_json(d).dump(1) + "\n");
}

PrototypeDictionary load_dictionary(const std::string& path) {
  return dictionary_from_json(json::parse(read_text(path)));
}

void MemoryBank::push(const Vector& v) {
  if (capacity_ == 0) return;
  if (entries_.size() == capacity_) entries_.pop_front();
  entries_.push_back(v);
}

// ---------------------------------------------------------------------------
// K-Means

namespace {

// Squared distances, points (n x d) against centres (k x d).
Matrix sq_distances(const Matrix& points, const Matrix& centres) {
  Matrix d = -2.0 * points * centres.transpose();
  d.colwise() += points.rowwise().squaredNorm();
  d.rowwise() += centres.rowwise().squaredNorm().transpose();
  return d.cwiseMax(0.0);
}

}  // namespace

KMeansResult kmeans(const Matrix& points, int k, std::uint64_t seed, int max_iters, double tol) {
  const auto n = points.rows();
  if (k < 1) throw std::invalid_argument("kmeans: k must be positive");
  if (n < k) throw std::invalid_argument("kmeans: fewer points than clusters");
  std::mt19937_64 rng(seed);

  // k-means++ seeding
  Matrix centres(k, points.cols());
  std::vector<bool> taken(static_cast<std::size_t>(n), false);
  auto first = std::uniform_int_distribution<Eigen::Index>(0, n - 1)(rng);
  centres.row(0) = points.row(first);
  taken[static_cast<std::size_t>(first)] = true;
  Vector closest = (points.rowwise() - centres.row(0)).rowwise().squaredNorm();
  for (int c = 1; c < k; ++c) {
    const double total = closest.sum();
    Eigen::Index pick = -1;
    if (total > 0.0) {
      double u = std::uniform_real_distribution<double>(0.0, total)(rng);
      for (Eigen::Index i = 0; i < n; ++i) {
        u -= closest(i);
        if (u < 0.0 && closest(i) > 0.0) {
          pick = i;
          break;
        }
      }
      if (pick < 0) closest.maxCoeff(&pick);
    } else {
      // all remaining points coincide with a centre
      for (Eigen::Index i = 0; i < n && pick < 0; ++i) {
        if (!taken[static_cast<std::size_t>(i)]) pick = i;
      }
    }
    taken[static_cast<std::size_t>(pick)] = true;
    centres.row(c) = points.row(pick);
    closest = closest.cwiseMin((points.rowwise() - centres.row(c)).rowwise().squaredNorm());
  }

  KMeansResult res;
  res.assignments.assign(static_cast<std::size_t>(n), -1);
  Vector best(n);
  for (int it = 0; it < max_iters; ++it) {
    res.iterations = it + 1;
    const Matrix d = sq_distances(points, centres);
    bool changed = false;
    for (Eigen::Index i = 0; i < n; ++i) {
      Eigen::Index j = 0;
      best(i) = d.row(i).minCoeff(&j);
      if (res.assignments[static_cast<std::size_t>(i)] != j) {
        res.assignments[static_cast<std::size_t>(i)] = static_cast<int>(j);
        changed = true;
      }
    }
    Matrix next = Matrix::Zero(k, points.cols());
    std::vector<int> count(static_cast<std::size_t>(k), 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      const int a = res.assignments[static_cast<std::size_t>(i)];
      next.row(a) += points.row(i);
      ++count[static_cast<std::size_t>(a)];
    }
    for (int c = 0; c < k; ++c) {
      if (count[static_cast<std::size_t>(c)] > 0) {
        next.row(c) /= count[static_cast<std::size_t>(c)];
        continue;
      }
      Eigen::Index far = 0;
      best.maxCoeff(&far);
      next.row(c) = points.row(far);
      best(far) = 0.0;
      res.assignments[static_cast<std::size_t>(far)] = c;
      changed = true;
    }
    const double shift = (next - centres).rowwise().squaredNorm().maxCoeff();
    centres = std::move(next);
    if (!changed || shift <= tol) break;
  }
  const Matrix d = sq_distances(points, centres);
  res.inertia = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    Eigen::Index j = 0;
    res.inertia += d.row(i).minCoeff(&j);
    res.assignments[static_cast<std::size_t>(i)] = static_cast<int>(j);
  }
  res.centroids = std::move(centres);
  return res;
}

std::vector<int> assign_prototypes(const Matrix& centroids, const PrototypeDictionary& dict) {
  const int k = static_cast<int>(centroids.rows());
  const int classes = dict.n_classes();
  if (k > classes) throw std::invalid_argument("assign_prototypes: more centroids than classes");
  if (centroids.cols() != dict.dim()) {
    throw std::invalid_argument("assign_prototypes: dimension mismatch");
  }
  constexpr double inf = std::numeric_limits<double>::infinity();
  Matrix dist(k, classes);
  for (int i = 0; i < k; ++i) {
    for (int c = 0; c < classes; ++c) {
      double best = inf;
      for (int m = 0; m < dict.multi_k; ++m) {
        best = std::min(best,
                        (centroids.row(i) - dict.prototypes.row(c * dict.multi_k + m)).lpNorm<1>());
      }
      dist(i, c) = best;
    }
  }
  std::vector<int> out(static_cast<std::size_t>(k), -1);
  for (int step = 0; step < k; ++step) {
    Eigen::Index row = 0, col = 0;
    double best = inf;
    for (Eigen::Index i = 0; i < k; ++i) {
      for (Eigen::Index c = 0; c < classes; ++c) {
        if (dist(i, c) < best) {
          best = dist(i, c);
          row = i;
          col = c;
        }
      }
    }
    out[static_cast<std::size_t>(row)] = static_cast<int>(col);
    dist.row(row).setConstant(inf);
    dist.col(col).setConstant(inf);
  }
  return out;
}

CrossEntropy prototype_cross_entropy(const PrototypeDictionary& dict,
                                     std::span<const Vector> descriptors,
                                     std::span<const int> labels) {
  if (descriptors.size() != labels.size()) {
    throw std::invalid_argument("prototype_cross_entropy: label count mismatch");
  }
  CrossEntropy out;
  out.grad = Matrix::Zero(dict.prototypes.rows(), dict.prototypes.cols());
  if (descriptors.empty()) return out;
  const int classes = dict.n_classes();
  const int mk = dict.multi_k;
  for (std::size_t n = 0; n < descriptors.size(); ++n) {
    const Vector& x = descriptors[n];
    const Matrix diff = (-dict.prototypes).rowwise() + x.transpose();  // x - phi
    const Vector z = -diff.rowwise().squaredNorm() / dict.tau_ce;
    Vector score(classes);
    Vector within(z.size());
    for (int c = 0; c < classes; ++c) {
      const auto seg = z.segment(c * mk, mk);
      const double m = seg.maxCoeff();
      const Vector e = (seg.array() - m).exp();
      score(c) = m + std::log(e.sum());
      within.segment(c * mk, mk) = e / e.sum();
    }
    const double top = score.maxCoeff();
    const double lse = top + std::log((score.array() - top).exp().sum());
    const int y = labels[n];
    out.loss += lse - score(y);
    const Vector p = (score.array() - lse).exp();
    for (int r = 0; r < z.size(); ++r) {
      const int c = r / mk;
      const double coeff = (p(c) - (c == y ? 1.0 : 0.0)) * within(r);
      out.grad.row(r) += coeff * 2.0 / dict.tau_ce * diff.row(r);
    }
  }
  const double inv = 1.0 / static_cast<double>(descriptors.size());
  out.loss *= inv;
  out.grad *= inv;
  return out;
}

// ---------------------------------------------------------------------------
// Online clustering

namespace {

struct Bounds {
  int r0 = 0, c0 = 0, r1 = -1, c1 = -1;
  bool empty() const { return r1 < r0; }
};

Bounds on_bounds(const Grid& g) {
  Bounds b{static_cast<int>(g.rows()), static_cast<int>(g.cols()), -1, -1};
  for (int r = 0; r < g.rows(); ++r) {
    for (int c = 0; c < g.cols(); ++c) {
      if (g(r, c) > kDefaultThreshold) {
        b.r0 = std::min(b.r0, r);
        b.c0 = std::min(b.c0, c);
        b.r1 = std::max(b.r1, r);
        b.c1 = std::max(b.c1, c);
      }
    }
  }
  return b;
}

Matrix stack_rows(std::span<const Vector> a, const std::deque<Vector>& b) {
  const Eigen::Index d = !a.empty() ? a.front().size() : b.front().size();
  Matrix m(static_cast<Eigen::Index>(a.size() + b.size()), d);
  Eigen::Index r = 0;
  for (const auto& v : a) m.row(r++) = v.transpose();
  for (const auto& v : b) m.row(r++) = v.transpose();
  return m;
}

}  // namespace

bool keep_pair(const Grid& a, const Grid& b, const DescriptorConfig& cfg) {
  if (!(a.sum() >= cfg.empty_mass) || !(b.sum() >= cfg.empty_mass)) return false;
  const Bounds ba = on_bounds(a);
  const Bounds bb = on_bounds(b);
  if (ba.empty() || bb.empty()) return false;
  const int row_gap = std::max(ba.r0 - bb.r1, bb.r0 - ba.r1) - 1;
  const int col_gap = std::max(ba.c0 - bb.c1, bb.c0 - ba.c1) - 1;
  const int gap = std::max({0, row_gap, col_gap});
  return 2 * gap <= std::max(a.rows(), a.cols());
}

BatchDescriptors embed_batch(std::span<const SampleParts> batch, const DictionarySettings& s,
                             std::uint64_t seed) {
  BatchDescriptors out;
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution take(std::clamp(s.pair_sample_rate, 0.0, 1.0));
  for (const auto& parts : batch) {
    for (const auto& p : parts) {
      if (auto d = embed_part(p, s.descriptor)) out.unary.push_back(std::move(d->values));
    }
    if (s.pair_sample_rate <= 0.0) continue;
    for (std::size_t i = 0; i < parts.size(); ++i) {
      for (std::size_t j = i + 1; j < parts.size(); ++j) {
        if (!keep_pair(parts[i], parts[j], s.descriptor)) continue;
        if (!take(rng)) continue;
        if (auto d = embed_pair(parts[i], parts[j], s.descriptor)) {
          out.pair.push_back(std::move(d->values));
        }
      }
    }
  }
  return out;
}

ArityStats clustering_update(std::span<const Vector> batch, MemoryBank& bank,
                             PrototypeDictionary& dict, const DictionarySettings& s,
                             std::uint64_t seed) {
  ArityStats stats;
  stats.n_descriptors = static_cast<int>(batch.size());
  if (batch.empty()) return stats;
  const int classes = dict.n_classes();
  const Matrix pool = stack_rows(batch, bank.entries());
  if (pool.rows() >= classes) {
    const auto km = kmeans(pool, classes, seed, s.kmeans_iters);
    const auto mapping = assign_prototypes(km.centroids, dict);
    std::vector<int> labels(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
      labels[i] = mapping[static_cast<std::size_t>(km.assignments[i])];
    }
    const auto ce = prototype_cross_entropy(dict, batch, labels);
    stats.ce = ce.loss;
    stats.updated = true;
    dict.prototypes -= s.eta_proto * ce.grad;

    Vector counts = Vector::Ones(classes);
    for (int a : km.assignments) counts(mapping[static_cast<std::size_t>(a)]) += 1.0;
    dict.pi = counts / counts.sum();
  }
  for (const auto& v : batch) bank.push(v);
  return stats;
}

ClusteringStepResult clustering_step(const BatchDescriptors& batch, MemoryBank& unary_bank,
                                     MemoryBank& pair_bank, PrototypeDictionary& unary_dict,
                                     PrototypeDictionary& pair_dict, const DictionarySettings& s,
                                     std::uint64_t seed) {
  ClusteringStepResult out;
  out.unary = clustering_update(batch.unary, unary_bank, unary_dict, s, mix_seed(seed, 1));
  out.pair = clustering_update(batch.pair, pair_bank, pair_dict, s, mix_seed(seed, 2));
  out.loss = s.gamma * (out.unary.ce + out.pair.ce);
  return out;
}

PrototypeDictionary init_dictionary(int arity, std::span<const Vector> pool, int n_classes,
                                    int multi_k, double tau_ce, std::uint64_t seed) {
  const int needed = n_classes * multi_k;
  std::vector<std::size_t> order(pool.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::size_t> chosen;
  for (auto i : order) {
    const bool duplicate = std::any_of(chosen.begin(), chosen.end(), [&](std::size_t j) {
      return (pool[i] - pool[j]).squaredNorm() < 1e-12;
    });
    if (!duplicate) chosen.push_back(i);
    if (static_cast<int>(chosen.size()) == needed) break;
  }
  if (static_cast<int>(chosen.size()) < needed) {
    throw std::runtime_error("init_dictionary: not enough distinct descriptors");
  }
  PrototypeDictionary d;
  d.arity = arity;
  d.multi_k = multi_k;
  d.tau_ce = tau_ce;
  d.prototypes.resize(needed, pool[chosen[0]].size());
  for (int r = 0; r < needed; ++r) d.prototypes.row(r) = pool[chosen[static_cast<std::size_t>(r)]].transpose();
  d.pi = Vector::Constant(n_classes, 1.0 / n_classes);
  return d;
}

double mixture_log_density(const Vector& x, const PrototypeDictionary& dict, double tau_lik) {
  const double var = tau_lik * tau_lik;
  const Vector sq = (dict.prototypes.rowwise() - x.transpose()).rowwise().squaredNorm();
  Vector terms(sq.size());
  for (Eigen::Index r = 0; r < sq.size(); ++r) {
    const double weight = dict.pi(r / dict.multi_k) / dict.multi_k;
    terms(r) = std::log(weight) - sq(r) / (2.0 * var);
  }
  const double m = terms.maxCoeff();
  const double lse = m + std::log((terms.array() - m).exp().sum());
  return lse - 0.5 * static_cast<double>(x.size()) * std::log(2.0 * std::numbers::pi * var);
}

double log_likelihood(std::span<const BatchDescriptors> samples,
                      const PrototypeDictionary& unary, const PrototypeDictionary& pair,
                      double tau_lik) {
  double total = 0.0;
  for (const auto& s : samples) {
    for (const auto& v : s.unary) total += mixture_log_density(v, unary, tau_lik);
    for (const auto& v : s.pair) total += 2.0 * mixture_log_density(v, pair, tau_lik);
  }
  return total;
}

double log_likelihood(std::span<const SampleParts> samples, const PrototypeDictionary& unary,
                      const PrototypeDictionary& pair, const DictionarySettings& s) {
  DictionarySettings all = s;
  all.pair_sample_rate = 1.0;
  std::vector<BatchDescriptors> desc;
  desc.reserve(samples.size());
  for (const auto& parts : samples) {
    desc.push_back(embed_batch(std::span<const SampleParts>(&parts, 1), all, 0));
  }
  return log_likelihood(desc, unary, pair, s.tau_lik);
}

}  // namespace tdl
