#pragma once

#include "tdl/core.hpp"

#include <cstdint>
#include <deque>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace tdl {

// ---------------------------------------------------------------------------
// Descriptors

struct DescriptorConfig {
  /// Pooled silhouette is size x size.
  int size = 8;
  /// Parts lighter than this (pixel mass) have no descriptor.
  double empty_mass = 2.0;
  int dim() const { return size * size; }
};

struct PartDescriptor {
  Vector values;  // unit L2 norm
  double mass = 0.0;
};

/// Centre-of-mass-centred, area-pooled, L2-normalized silhouette.
/// Returns nullopt for parts below `cfg.empty_mass`.
std::optional<PartDescriptor> embed_part(const Grid& part, const DescriptorConfig& cfg = {});

/// Descriptor of min(1, a + b), centred on the joint centre of mass.
/// Returns nullopt when either part is empty.
std::optional<PartDescriptor> embed_pair(const Grid& a, const Grid& b,
                                         const DescriptorConfig& cfg = {});

/// embed_part with its centring shift frozen, so the map from pixels to the
/// descriptor can be differentiated: pooling is linear, normalization is not.
class LinearizedDescriptor {
 public:
  static std::optional<LinearizedDescriptor> at(const Grid& part, const DescriptorConfig& cfg = {});

  const Vector& value() const { return unit_; }
  /// Maps d(loss)/d(descriptor) to d(loss)/d(pixel).
  Grid pullback(const Vector& grad_descriptor) const;

 private:
  struct Taps {
    int cell[2];
    double weight[2];
  };
  int rows_ = 0, cols_ = 0, size_ = 0;
  std::vector<Taps> row_taps_, col_taps_;
  Vector unit_;
  double norm_ = 0.0;
};

// ---------------------------------------------------------------------------
// Dictionaries and banks

struct PrototypeDictionary {
  int arity = 1;
  /// (n_classes * multi_k) x d; class c owns rows [c*multi_k, (c+1)*multi_k).
  Matrix prototypes;
  /// Per-class weights, Laplace smoothed, sums to 1.
  Vector pi;
  double tau_ce = 0.1;
  int multi_k = 1;
  nlohmann::json meta = nlohmann::json::object();

  int n_classes() const { return static_cast<int>(prototypes.rows()) / multi_k; }
  int dim() const { return static_cast<int>(prototypes.cols()); }
  void validate() const;

  /// Class scores: log-sum-exp over each class's prototypes of -||x - phi||^2 / tau_ce.
  Vector class_logits(const Vector& x) const;
  /// Squared L2 distance from x to the nearest prototype.
  double min_sq_distance(const Vector& x, int* row = nullptr) const;
  int nearest_class(const Vector& x) const;
};

nlohmann::json dictionary_to_json(const PrototypeDictionary& d);
PrototypeDictionary dictionary_from_json(const nlohmann::json& j);
void save_dictionary(const std::string& path, const PrototypeDictionary& d);
PrototypeDictionary load_dictionary(const std::string& path);

class MemoryBank {
 public:
  MemoryBank(int arity, std::size_t capacity) : arity_(arity), capacity_(capacity) {}
  void push(const Vector& v);
  std::size_t size() const { return entries_.size(); }
  std::size_t capacity() const { return capacity_; }
  int arity() const { return arity_; }
  const std::deque<Vector>& entries() const { return entries_; }

 private:
  int arity_;
  std::size_t capacity_;
  std::deque<Vector> entries_;
};

// ---------------------------------------------------------------------------
// Clustering

struct KMeansResult {
  std::vector<int> assignments;
  Matrix centroids;  // k x d
  double inertia = 0.0;
  int iterations = 0;
};

/// Lloyd's algorithm with k-means++ seeding. Rows of `points` are samples.
/// Empty clusters are re-seeded at the point farthest from its centroid.
KMeansResult kmeans(const Matrix& points, int k, std::uint64_t seed, int max_iters = 100,
                    double tol = 1e-8);

/// Greedy matching of centroids to dictionary classes on the L1 distance
/// matrix: repeatedly take the globally smallest remaining entry. Returns the
/// class for each centroid row.
std::vector<int> assign_prototypes(const Matrix& centroids, const PrototypeDictionary& dict);

/// Mean cross-entropy of labels under class_logits, and its gradient
/// w.r.t. every prototype row.
struct CrossEntropy {
  double loss = 0.0;
  Matrix grad;  // same shape as prototypes
};
CrossEntropy prototype_cross_entropy(const PrototypeDictionary& dict,
                                     std::span<const Vector> descriptors,
                                     std::span<const int> labels);

struct DictionarySettings {
  int n_classes_unary = 10;
  int n_classes_pair = 8;
  int multi_k = 1;
  double tau_ce = 0.1;
  double tau_lik = 0.2;
  double eta_proto = 0.1;
  /// Weight of the clustering loss.
  double gamma = 0.01;
  double pair_sample_rate = 0.3;
  std::size_t bank_capacity_unary = 4096;
  std::size_t bank_capacity_pair = 8192;
  int kmeans_iters = 50;
  DescriptorConfig descriptor;
};

/// One part-list per sample.
using SampleParts = std::vector<Grid>;

/// Within-sample pairs kept for arity-2 terms: both parts non-empty and the
/// gap between their bounding boxes no larger than half the canvas.
bool keep_pair(const Grid& a, const Grid& b, const DescriptorConfig& cfg);

struct BatchDescriptors {
  std::vector<Vector> unary;
  std::vector<Vector> pair;
};

/// Embeds parts and a Bernoulli(pair_sample_rate) subset of pairs.
BatchDescriptors embed_batch(std::span<const SampleParts> batch, const DictionarySettings& s,
                             std::uint64_t seed);

struct ArityStats {
  double ce = 0.0;
  int n_descriptors = 0;
  bool updated = false;
};

struct ClusteringStepResult {
  double loss = 0.0;  // gamma * sum of per-arity CE
  ArityStats unary;
  ArityStats pair;
};

/// One online-clustering update: K-Means over batch + bank, greedy
/// assignment to prototypes, CE on the batch, one descent step on the
/// prototypes, frequency refresh, then the batch is pushed to the banks.
ClusteringStepResult clustering_step(const BatchDescriptors& batch, MemoryBank& unary_bank,
                                     MemoryBank& pair_bank, PrototypeDictionary& unary_dict,
                                     PrototypeDictionary& pair_dict, const DictionarySettings& s,
                                     std::uint64_t seed);

/// Same, for a single arity.
ArityStats clustering_update(std::span<const Vector> batch, MemoryBank& bank,
                             PrototypeDictionary& dict, const DictionarySettings& s,
                             std::uint64_t seed);

/// Prototypes drawn as `n_classes * multi_k` distinct rows of `pool`.
PrototypeDictionary init_dictionary(int arity, std::span<const Vector> pool, int n_classes,
                                    int multi_k, double tau_ce, std::uint64_t seed);

/// log sum_sigma pi_sigma N(x; phi_sigma, tau_lik^2 I).
double mixture_log_density(const Vector& x, const PrototypeDictionary& dict, double tau_lik);

/// Dataset log-likelihood: unary terms over non-empty parts plus pair terms
/// over ordered pairs of distinct non-empty parts.
double log_likelihood(std::span<const SampleParts> samples, const PrototypeDictionary& unary,
                      const PrototypeDictionary& pair, const DictionarySettings& s);

/// Same, from precomputed descriptors (unordered pairs are counted twice).
double log_likelihood(std::span<const BatchDescriptors> samples,
                      const PrototypeDictionary& unary, const PrototypeDictionary& pair,
                      double tau_lik);

}  // namespace tdl
