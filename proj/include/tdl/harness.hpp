#pragma once

#include "tdl/dataset.hpp"
#include "tdl/decomposer.hpp"
#include "tdl/dictionary.hpp"
#include "tdl/gameloss.hpp"
#include "tdl/metrics.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace tdl {

// ---------------------------------------------------------------------------
// Configuration

struct FitConfig {
  int epochs = 20;
  int batch_size = 32;
  int warmup_epochs = 2;
  GameConfig game;
  DecomposeConfig decompose;
  DictionarySettings dictionary;
  std::uint64_t seed = 0;

  void validate() const;
};

struct MetricsSettings {
  CigSettings cig;
  ShapeSettings shape;
  double iou_threshold = kDefaultThreshold;
};

/// Supervised fit of the relation head used for grounding.
struct GroundSettings {
  int steps = 1000;
  double learning_rate = 0.2;
  double tau_ce = 0.1;
  /// Prototypes per relation kind.
  int multi_k = 16;
  std::uint64_t seed = 0;
};

/// Everything a TOML file can set. Sections: [game], [decompose],
/// [dictionary], [fit], [metrics]. Unknown keys are rejected.
struct Config {
  FitConfig fit;
  MetricsSettings metrics;
  GroundSettings ground;
};

Config parse_config(std::string_view toml_text);
Config load_config(const std::filesystem::path& path);
/// Every field, including defaults.
nlohmann::json config_to_json(const Config& cfg);
nlohmann::json game_to_json(const GameConfig& g);
nlohmann::json loss_to_json(const LossBreakdown& b);

/// Runs fn(0..n-1) on up to `threads` workers. Rethrows the first exception.
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn);

// ---------------------------------------------------------------------------
// Fit

struct EpochRecord {
  int epoch = 0;
  bool warmup = true;
  /// Mean over samples.
  LossBreakdown loss;
  double pull = 0.0;
  /// Means over the epoch's clustering steps.
  double clustering_loss = 0.0;
  double ce_unary = 0.0;
  double ce_pair = 0.0;
  /// Dataset log-likelihood of the epoch's parts under the end-of-epoch dictionaries.
  std::optional<double> log_likelihood;
  int n_parts = 0;
};

struct RunManifest {
  nlohmann::json config;
  std::vector<EpochRecord> epochs;
  std::vector<std::string> dictionary_files;
  double wall_seconds = 0.0;
};

nlohmann::json manifest_to_json(const RunManifest& m, bool with_wall_clock = true);

struct FitOptions {
  int threads = 1;
  /// When set, manifest.json is rewritten after every epoch and the
  /// dictionaries are saved next to it.
  std::filesystem::path out_dir;
  std::function<void(const EpochRecord&)> on_epoch;
};

struct FitResult {
  RunManifest manifest;
  std::optional<PrototypeDictionary> unary;
  std::optional<PrototypeDictionary> pair;
  /// Parts from the last epoch, in dataset order.
  std::vector<std::vector<Grid>> final_parts;
};

FitResult fit(std::span<const Scene> data, const Config& cfg, const FitOptions& opt = {});
FitResult fit(const std::filesystem::path& data_dir, const Config& cfg, const FitOptions& opt = {});

/// Decomposition seed of sample `index`. The same in every epoch, so a
/// sample's parts change between epochs only through the dictionary.
std::uint64_t sample_seed(std::uint64_t seed, std::size_t index);

/// Decomposes every scene; the pull is active when `dict` is given and the
/// configured proto_pull is positive.
std::vector<Decomposition> decompose_dataset(std::span<const Scene> data, const Config& cfg,
                                             int threads, const PrototypeDictionary* dict = nullptr);

/// Layout: `<dir>/parts/<id>_<k>.pgm` and `<dir>/decomp/<id>.json`.
void save_decomposition(const std::filesystem::path& dir, const std::string& id,
                        const Decomposition& d);
/// Parts per id read back from `<dir>/parts`.
std::vector<std::vector<Grid>> load_predictions(const std::filesystem::path& dir,
                                                std::span<const std::string> ids);
std::vector<std::string> list_prediction_ids(const std::filesystem::path& dir);

// ---------------------------------------------------------------------------
// Evaluation

/// Mean over samples of iou(sum of parts, input).
double reconstruction_iou(std::span<const std::vector<Grid>> parts, std::span<const Grid> inputs,
                          double threshold = kDefaultThreshold);

/// Metrics: "iou", "cig", "sp". The report also carries "iou_aligned"
/// (mean iou_align against ground-truth parts) whenever "iou" is asked for.
nlohmann::json evaluate(std::span<const std::vector<Grid>> pred, std::span<const Scene> data,
                        std::span<const std::string> metrics, const MetricsSettings& s,
                        int threads = 1);
nlohmann::json run_eval(const std::filesystem::path& pred_dir,
                        const std::filesystem::path& data_dir,
                        std::span<const std::string> metrics, const MetricsSettings& s,
                        int threads = 1);

// ---------------------------------------------------------------------------
// Grounding

enum class GroundMode { GtParts, Decomposed };
std::string_view to_string(GroundMode m);
GroundMode ground_mode_from_string(std::string_view name);

/// Labeled pair descriptors of every annotated relation.
struct RelationSet {
  std::vector<Vector> descriptors;
  std::vector<int> labels;
};
RelationSet relation_descriptors(std::span<const Scene> scenes, const DescriptorConfig& d);

/// `multi_k` prototypes per relation kind, started at per-kind K-Means
/// centroids (the class mean when multi_k is 1) and refined by full-batch
/// descent on the prototype cross-entropy.
PrototypeDictionary fit_relation_head(std::span<const Scene> train, const GroundSettings& g,
                                      const DescriptorConfig& d);

/// Nearest relation prototype for every unordered pair of non-empty parts.
std::vector<Relation> predict_relations(std::span<const Grid> parts,
                                        const PrototypeDictionary& head,
                                        const DescriptorConfig& d);

struct GroundReport {
  GroundMode mode = GroundMode::GtParts;
  int n_samples = 0;
  RelationHits hits;
  double relation_accuracy = 0.0;
  std::optional<double> mean_iou;
};

GroundReport ground(std::span<const Scene> test, const PrototypeDictionary& head,
                    GroundMode mode, const Config& cfg, int threads = 1,
                    const PrototypeDictionary* unary = nullptr);
nlohmann::json ground_report_to_json(const GroundReport& r);

// ---------------------------------------------------------------------------
// Embedding dump

/// CSV rows `sample_id,part_idx,arity,v0..`; pair rows use `i-j` as part_idx.
std::string embeddings_csv(std::span<const std::string> ids,
                           std::span<const std::vector<Grid>> parts, const DescriptorConfig& d,
                           bool unary, bool pairs);

}  // namespace tdl
