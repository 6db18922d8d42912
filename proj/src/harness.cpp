#include "tdl/harness.hpp"

#include <toml.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <exception>
#include <map>
#include <mutex>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <thread>

namespace fs = std::filesystem;
using nlohmann::json;

namespace tdl {

// ---------------------------------------------------------------------------
// Configuration

void FitConfig::validate() const {
  if (epochs < 0) throw std::invalid_argument("FitConfig: epochs must be >= 0");
  if (batch_size < 1) throw std::invalid_argument("FitConfig: batch_size must be >= 1");
  if (warmup_epochs < 0) throw std::invalid_argument("FitConfig: warmup_epochs must be >= 0");
  if (epochs > 0 && warmup_epochs >= epochs) {
    throw std::invalid_argument("FitConfig: warmup_epochs must be < epochs");
  }
  const auto& d = dictionary;
  if (d.n_classes_unary < 2 || d.n_classes_pair < 2 || d.multi_k < 1) {
    throw std::invalid_argument("FitConfig: need >= 2 classes per arity and multi_k >= 1");
  }
  if (!(d.tau_ce > 0.0) || !(d.tau_lik > 0.0) || !(d.eta_proto >= 0.0) || !(d.gamma >= 0.0)) {
    throw std::invalid_argument("FitConfig: bad dictionary temperatures or rates");
  }
  if (!(d.pair_sample_rate >= 0.0 && d.pair_sample_rate <= 1.0)) {
    throw std::invalid_argument("FitConfig: pair_sample_rate must lie in [0, 1]");
  }
  game.validate();
  decompose.validate();
}

namespace {

using Setter = std::function<void(const toml::node&)>;

template <typename T>
T node_value(const toml::node& n, const std::string& key) {
  if constexpr (std::is_same_v<T, bool> || std::is_same_v<T, std::string>) {
    if (auto v = n.value_exact<T>()) return *v;
  } else if constexpr (std::is_floating_point_v<T>) {
    if (auto v = n.value<double>()) return static_cast<T>(*v);
  } else {
    if (auto v = n.value_exact<std::int64_t>()) {
      if constexpr (std::is_unsigned_v<T>) {
        if (*v < 0) throw std::invalid_argument("config: " + key + " must be >= 0");
      }
      return static_cast<T>(*v);
    }
  }
  throw std::invalid_argument("config: wrong type for " + key);
}

template <typename T>
Setter bind(T& field, const std::string& key) {
  return [&field, key](const toml::node& n) { field = node_value<T>(n, key); };
}

std::string_view to_string(ResourcesHinge h) {
  return h == ResourcesHinge::AsWritten ? "as_written" : "flipped";
}

std::string_view to_string(Smoothing s) { return s == Smoothing::Rdp ? "rdp" : "hull"; }

std::map<std::string, std::map<std::string, Setter>> binders(Config& c) {
  auto& g = c.fit.game;
  auto& d = c.fit.decompose;
  auto& s = c.fit.dictionary;
  auto& m = c.metrics;
  std::map<std::string, std::map<std::string, Setter>> out;
  out["game"] = {
      {"alpha_overlap", bind(g.alpha_overlap, "alpha_overlap")},
      {"alpha_resources", bind(g.alpha_resources, "alpha_resources")},
      {"alpha_norm", bind(g.alpha_norm, "alpha_norm")},
      {"lambda_sparse", bind(g.lambda_sparse, "lambda_sparse")},
      {"quota", bind(g.quota, "quota")},
      {"th_s",
       [&g](const toml::node& n) {
         if (auto off = n.value_exact<bool>()) {
           if (*off) throw std::invalid_argument("config: th_s = true is meaningless");
           g.th_s.reset();
         } else {
           g.th_s = node_value<double>(n, "th_s");
         }
       }},
      {"step_steepness", bind(g.step_steepness, "step_steepness")},
      {"focal_gamma", bind(g.focal_gamma, "focal_gamma")},
      {"focal_alpha", bind(g.focal_alpha, "focal_alpha")},
      {"dice_smooth", bind(g.dice_smooth, "dice_smooth")},
      {"prob_clamp", bind(g.prob_clamp, "prob_clamp")},
      {"resources_hinge",
       [&g](const toml::node& n) {
         const auto v = node_value<std::string>(n, "resources_hinge");
         if (v == "as_written") g.resources_hinge = ResourcesHinge::AsWritten;
         else if (v == "flipped") g.resources_hinge = ResourcesHinge::Flipped;
         else throw std::invalid_argument("config: unknown resources_hinge '" + v + "'");
       }},
  };
  out["decompose"] = {
      {"n_players", bind(d.n_players, "n_players")},
      {"outer_steps", bind(d.outer_steps, "outer_steps")},
      {"inner_steps", bind(d.inner_steps, "inner_steps")},
      {"step_size", bind(d.step_size, "step_size")},
      {"sigma_max", bind(d.sigma_max, "sigma_max")},
      {"sigma_min", bind(d.sigma_min, "sigma_min")},
      {"proto_pull", bind(d.proto_pull, "proto_pull")},
      {"init_scale", bind(d.init_scale, "init_scale")},
      {"loss_scale", bind(d.loss_scale, "loss_scale")},
      {"smoothing", bind(d.smoothing, "smoothing")},
  };
  out["dictionary"] = {
      {"n_classes_unary", bind(s.n_classes_unary, "n_classes_unary")},
      {"n_classes_pair", bind(s.n_classes_pair, "n_classes_pair")},
      {"multi_k", bind(s.multi_k, "multi_k")},
      {"tau_ce", bind(s.tau_ce, "tau_ce")},
      {"tau_lik", bind(s.tau_lik, "tau_lik")},
      {"eta_proto", bind(s.eta_proto, "eta_proto")},
      {"gamma", bind(s.gamma, "gamma")},
      {"pair_sample_rate", bind(s.pair_sample_rate, "pair_sample_rate")},
      {"bank_capacity_unary", bind(s.bank_capacity_unary, "bank_capacity_unary")},
      {"bank_capacity_pair", bind(s.bank_capacity_pair, "bank_capacity_pair")},
      {"kmeans_iters", bind(s.kmeans_iters, "kmeans_iters")},
      {"descriptor_size", bind(s.descriptor.size, "descriptor_size")},
      {"empty_mass", bind(s.descriptor.empty_mass, "empty_mass")},
      {"ground_steps", bind(c.ground.steps, "ground_steps")},
      {"ground_learning_rate", bind(c.ground.learning_rate, "ground_learning_rate")},
      {"ground_tau_ce", bind(c.ground.tau_ce, "ground_tau_ce")},
      {"ground_multi_k", bind(c.ground.multi_k, "ground_multi_k")},
  };
  out["fit"] = {
      {"epochs", bind(c.fit.epochs, "epochs")},
      {"batch_size", bind(c.fit.batch_size, "batch_size")},
      {"warmup_epochs", bind(c.fit.warmup_epochs, "warmup_epochs")},
      {"seed", bind(c.fit.seed, "seed")},
  };
  out["metrics"] = {
      {"k", bind(m.cig.k, "k")},
      {"d_pca", bind(m.cig.d_pca, "d_pca")},
      {"n_players", bind(m.cig.n_players, "n_players")},
      {"empty_mass", bind(m.cig.empty_mass, "empty_mass")},
      {"kmeans_iters", bind(m.cig.kmeans_iters, "kmeans_iters")},
      {"seed", bind(m.cig.seed, "seed")},
      {"smoothing",
       [&m](const toml::node& n) {
         const auto v = node_value<std::string>(n, "smoothing");
         if (v == "rdp") m.shape.smoothing = Smoothing::Rdp;
         else if (v == "hull") m.shape.smoothing = Smoothing::Hull;
         else throw std::invalid_argument("config: unknown smoothing '" + v + "'");
       }},
      {"epsilon", bind(m.shape.epsilon, "epsilon")},
      {"threshold", bind(m.shape.threshold, "threshold")},
      {"iou_threshold", bind(m.iou_threshold, "iou_threshold")},
  };
  return out;
}

}  // namespace

Config parse_config(std::string_view toml_text) {
  toml::table root;
  try {
    root = toml::parse(toml_text);
  } catch (const toml::parse_error& e) {
    throw std::invalid_argument(std::string("config: ") + std::string(e.description()));
  }
  Config cfg;
  auto sections = binders(cfg);
  for (auto&& [name, node] : root) {
    const std::string section(name.str());
    auto it = sections.find(section);
    if (it == sections.end()) throw std::invalid_argument("config: unknown section [" + section + "]");
    const auto* table = node.as_table();
    if (!table) throw std::invalid_argument("config: [" + section + "] must be a table");
    for (auto&& [key, value] : *table) {
      const std::string k(key.str());
      auto setter = it->second.find(k);
      if (setter == it->second.end()) {
        throw std::invalid_argument("config: unknown key " + section + "." + k);
      }
      setter->second(value);
    }
  }
  cfg.fit.validate();
  return cfg;
}

Config load_config(const fs::path& path) { return parse_config(read_text(path)); }

json game_to_json(const GameConfig& g) {
  return {{"alpha_overlap", g.alpha_overlap},
          {"alpha_resources", g.alpha_resources},
          {"alpha_norm", g.alpha_norm},
          {"lambda_sparse", g.lambda_sparse},
          {"quota", g.quota},
          {"th_s", g.th_s ? json(*g.th_s) : json(false)},
          {"step_steepness", g.step_steepness},
          {"focal_gamma", g.focal_gamma},
          {"focal_alpha", g.focal_alpha},
          {"dice_smooth", g.dice_smooth},
          {"prob_clamp", g.prob_clamp},
          {"resources_hinge", to_string(g.resources_hinge)}};
}

json loss_to_json(const LossBreakdown& b) {
  return {{"rec", b.rec},           {"overlap", b.overlap}, {"resources", b.resources},
          {"norm", b.norm},         {"sparse", b.sparse},   {"total", b.total}};
}

json config_to_json(const Config& c) {
  const auto& d = c.fit.decompose;
  const auto& s = c.fit.dictionary;
  const auto& m = c.metrics;
  return {
      {"game", game_to_json(c.fit.game)},
      {"decompose",
       {{"n_players", d.n_players},
        {"outer_steps", d.outer_steps},
        {"inner_steps", d.inner_steps},
        {"step_size", d.step_size},
        {"sigma_max", d.sigma_max},
        {"sigma_min", d.sigma_min},
        {"proto_pull", d.proto_pull},
        {"init_scale", d.init_scale},
        {"loss_scale", d.loss_scale},
        {"smoothing", d.smoothing}}},
      {"dictionary",
       {{"n_classes_unary", s.n_classes_unary},
        {"n_classes_pair", s.n_classes_pair},
        {"multi_k", s.multi_k},
        {"tau_ce", s.tau_ce},
        {"tau_lik", s.tau_lik},
        {"eta_proto", s.eta_proto},
        {"gamma", s.gamma},
        {"pair_sample_rate", s.pair_sample_rate},
        {"bank_capacity_unary", s.bank_capacity_unary},
        {"bank_capacity_pair", s.bank_capacity_pair},
        {"kmeans_iters", s.kmeans_iters},
        {"descriptor_size", s.descriptor.size},
        {"empty_mass", s.descriptor.empty_mass},
        {"ground_steps", c.ground.steps},
        {"ground_learning_rate", c.ground.learning_rate},
        {"ground_tau_ce", c.ground.tau_ce},
        {"ground_multi_k", c.ground.multi_k}}},
      {"fit",
       {{"epochs", c.fit.epochs},
        {"batch_size", c.fit.batch_size},
        {"warmup_epochs", c.fit.warmup_epochs},
        {"seed", c.fit.seed}}},
      {"metrics",
       {{"k", m.cig.k},
        {"d_pca", m.cig.d_pca},
        {"n_players", m.cig.n_players},
        {"empty_mass", m.cig.empty_mass},
        {"kmeans_iters", m.cig.kmeans_iters},
        {"seed", m.cig.seed},
        {"smoothing", to_string(m.shape.smoothing)},
        {"epsilon", m.shape.epsilon},
        {"threshold", m.shape.threshold},
        {"iou_threshold", m.iou_threshold}}},
  };
}

void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn) {
  const auto workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, threads)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_lock;
  auto work = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(error_lock);
        if (!error) error = std::current_exception();
        next = n;
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < workers; ++t) pool.emplace_back(work);
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

// ---------------------------------------------------------------------------
// Fit

namespace {

json record_to_json(const EpochRecord& r) {
  return {{"epoch", r.epoch},
          {"warmup", r.warmup},
          {"loss", loss_to_json(r.loss)},
          {"pull", r.pull},
          {"clustering_loss", r.clustering_loss},
          {"ce_unary", r.ce_unary},
          {"ce_pair", r.ce_pair},
          {"log_likelihood", r.log_likelihood ? json(*r.log_likelihood) : json(nullptr)},
          {"n_parts", r.n_parts}};
}

void add_into(LossBreakdown& acc, const LossBreakdown& b, double w) {
  acc.rec += w * b.rec;
  acc.overlap += w * b.overlap;
  acc.resources += w * b.resources;
  acc.norm += w * b.norm;
  acc.sparse += w * b.sparse;
  acc.total += w * b.total;
}

Decomposition decompose_sample(const Scene& scene, const Config& cfg, std::uint64_t seed,
                               const PrototypeDictionary* dict) {
  DecomposeConfig dc = cfg.fit.decompose;
  dc.seed = seed;
  PrototypePull pull;
  if (dict) pull = {dict, dc.proto_pull, cfg.fit.dictionary.descriptor};
  Decomposition d;
  try {
    d = decompose(scene.image, cfg.fit.game, dc, pull);
  } catch (const std::runtime_error& e) {
    throw std::runtime_error("sample " + scene.id + ": " + e.what());
  }
  if (!std::isfinite(d.loss.total)) {
    throw std::runtime_error("sample " + scene.id + ": non-finite loss");
  }
  d.source = scene.id;
  return d;
}

// Every part and every kept pair of the batch, for prototype initialization.
std::vector<Vector> init_pool(const BatchDescriptors& all, const MemoryBank& bank, int arity) {
  std::vector<Vector> pool = arity == 1 ? all.unary : all.pair;
  for (const auto& v : bank.entries()) pool.push_back(v);
  return pool;
}

void write_manifest(const FitOptions& opt, const RunManifest& m) {
  if (opt.out_dir.empty()) return;
  write_text(opt.out_dir / "manifest.json", manifest_to_json(m).dump(2) + "\n");
}

}  // namespace

json manifest_to_json(const RunManifest& m, bool with_wall_clock) {
  json epochs = json::array();
  for (const auto& r : m.epochs) epochs.push_back(record_to_json(r));
  json out = {{"config", m.config}, {"epochs", epochs}, {"dictionary_files", m.dictionary_files}};
  if (with_wall_clock) out["wall_seconds"] = m.wall_seconds;
  return out;
}

std::uint64_t sample_seed(std::uint64_t seed, std::size_t index) {
  return mix_seed(mix_seed(seed, ~0ULL), index);
}

std::vector<Decomposition> decompose_dataset(std::span<const Scene> data, const Config& cfg,
                                             int threads, const PrototypeDictionary* dict) {
  std::vector<Decomposition> out(data.size());
  parallel_for(data.size(), threads, [&](std::size_t i) {
    out[i] = decompose_sample(data[i], cfg, sample_seed(cfg.fit.seed, i), dict);
  });
  return out;
}

FitResult fit(std::span<const Scene> data, const Config& cfg, const FitOptions& opt) {
  const auto start = std::chrono::steady_clock::now();
  const auto& fc = cfg.fit;
  const auto& ds = fc.dictionary;
  fc.validate();
  FitResult result;
  RunManifest& manifest = result.manifest;
  manifest.config = config_to_json(cfg);
  if (!opt.out_dir.empty()) fs::create_directories(opt.out_dir);
  if (fc.epochs > 0 && data.empty()) throw std::invalid_argument("fit: empty dataset");

  MemoryBank unary_bank(1, ds.bank_capacity_unary);
  MemoryBank pair_bank(2, ds.bank_capacity_pair);
  std::optional<PrototypeDictionary>& unary = result.unary;
  std::optional<PrototypeDictionary>& pair = result.pair;
  DictionarySettings all_pairs = ds;
  all_pairs.pair_sample_rate = 1.0;

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t batch = static_cast<std::size_t>(fc.batch_size);

  for (int epoch = 0; epoch < fc.epochs; ++epoch) {
    const std::uint64_t epoch_seed = mix_seed(fc.seed, static_cast<std::uint64_t>(epoch));
    std::mt19937_64 shuffler(mix_seed(epoch_seed, 0));
    std::shuffle(order.begin(), order.end(), shuffler);

    EpochRecord rec;
    rec.epoch = epoch;
    rec.warmup = epoch < fc.warmup_epochs;
    std::vector<std::vector<Grid>> parts(data.size());
    int steps = 0;

    for (std::size_t b0 = 0, b = 0; b0 < order.size(); b0 += batch, ++b) {
      const std::size_t n = std::min(batch, order.size() - b0);
      const PrototypeDictionary* dict = rec.warmup || !unary ? nullptr : &*unary;
      std::vector<Decomposition> decs(n);
      parallel_for(n, opt.threads, [&](std::size_t j) {
        const std::size_t i = order[b0 + j];
        decs[j] = decompose_sample(data[i], cfg, sample_seed(fc.seed, i), dict);
      });

      std::vector<SampleParts> batch_parts;
      for (std::size_t j = 0; j < n; ++j) {
        add_into(rec.loss, decs[j].loss, 1.0 / static_cast<double>(data.size()));
        rec.pull += decs[j].pull / static_cast<double>(data.size());
        parts[order[b0 + j]] = decs[j].parts;
        batch_parts.push_back(std::move(decs[j].parts));
      }
      const auto desc = embed_batch(batch_parts, ds, mix_seed(epoch_seed, 2 * b + 1));
      rec.n_parts += static_cast<int>(desc.unary.size());

      const bool last_warmup_batch = rec.warmup && epoch == fc.warmup_epochs - 1 &&
                                     b0 + n == order.size();
      if (!unary && (last_warmup_batch || !rec.warmup)) {
        const auto everything = embed_batch(batch_parts, all_pairs, 0);
        const auto init_seed = mix_seed(epoch_seed, 2 * b + 2);
        const auto unary_pool = init_pool(everything, unary_bank, 1);
        const auto pair_pool = init_pool(everything, pair_bank, 2);
        unary = init_dictionary(1, unary_pool, ds.n_classes_unary, ds.multi_k, ds.tau_ce,
                                mix_seed(init_seed, 1));
        pair = init_dictionary(2, pair_pool, ds.n_classes_pair, ds.multi_k, ds.tau_ce,
                               mix_seed(init_seed, 2));
      }
      if (rec.warmup) {
        for (const auto& v : desc.unary) unary_bank.push(v);
        for (const auto& v : desc.pair) pair_bank.push(v);
        continue;
      }
      const auto step = clustering_step(desc, unary_bank, pair_bank, *unary, *pair, ds,
                                        mix_seed(epoch_seed, 2 * b + 2));
      rec.clustering_loss += step.loss;
      rec.ce_unary += step.unary.ce;
      rec.ce_pair += step.pair.ce;
      ++steps;
    }
    if (steps > 0) {
      rec.clustering_loss /= steps;
      rec.ce_unary /= steps;
      rec.ce_pair /= steps;
    }
    if (unary) rec.log_likelihood = log_likelihood(parts, *unary, *pair, ds);

    if (unary && !opt.out_dir.empty()) {
      for (auto* d : {&*unary, &*pair}) {
        d->meta = {{"epoch", epoch}, {"seed", fc.seed}};
      }
      save_dictionary((opt.out_dir / "dict_unary.json").string(), *unary);
      save_dictionary((opt.out_dir / "dict_pair.json").string(), *pair);
      manifest.dictionary_files = {"dict_unary.json", "dict_pair.json"};
    }
    manifest.epochs.push_back(rec);
    manifest.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    write_manifest(opt, manifest);
    if (opt.on_epoch) opt.on_epoch(rec);
    if (epoch + 1 == fc.epochs) result.final_parts = std::move(parts);
  }

  if (!opt.out_dir.empty() && !result.final_parts.empty()) {
    const auto dir = opt.out_dir / "parts";
    fs::create_directories(dir);
    for (std::size_t i = 0; i < data.size(); ++i) {
      const auto& p = result.final_parts[i];
      for (std::size_t k = 0; k < p.size(); ++k) {
        write_pgm(dir / (data[i].id + "_" + std::to_string(k) + ".pgm"), p[k]);
      }
    }
  }
  manifest.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  write_manifest(opt, manifest);
  return result;
}

FitResult fit(const fs::path& data_dir, const Config& cfg, const FitOptions& opt) {
  const auto data = load_dataset(data_dir);
  return fit(std::span<const Scene>(data), cfg, opt);
}

void save_decomposition(const fs::path& dir, const std::string& id, const Decomposition& d) {
  fs::create_directories(dir / "parts");
  fs::create_directories(dir / "decomp");
  for (std::size_t k = 0; k < d.parts.size(); ++k) {
    write_pgm(dir / "parts" / (id + "_" + std::to_string(k) + ".pgm"), d.parts[k]);
  }
  const json j = {{"id", id},
                  {"n_players", d.parts.size()},
                  {"loss", loss_to_json(d.loss)},
                  {"pull", d.pull},
                  {"steps_run", d.steps_run}};
  write_text(dir / "decomp" / (id + ".json"), j.dump(2) + "\n");
}

std::vector<std::vector<Grid>> load_predictions(const fs::path& dir,
                                                std::span<const std::string> ids) {
  std::vector<std::vector<Grid>> out;
  for (const auto& id : ids) {
    std::vector<Grid> parts;
    for (int k = 0;; ++k) {
      const auto path = dir / "parts" / (id + "_" + std::to_string(k) + ".pgm");
      if (!fs::exists(path)) break;
      parts.push_back(read_pgm(path));
    }
    if (parts.empty()) throw std::runtime_error("load_predictions: no parts for sample " + id);
    out.push_back(std::move(parts));
  }
  return out;
}

std::vector<std::string> list_prediction_ids(const fs::path& dir) {
  const auto parts = dir / "parts";
  if (!fs::is_directory(parts)) {
    throw std::runtime_error("list_prediction_ids: missing directory " + parts.string());
  }
  std::set<std::string> ids;
  for (const auto& e : fs::directory_iterator(parts)) {
    if (e.path().extension() != ".pgm") continue;
    const auto stem = e.path().stem().string();
    const auto cut = stem.rfind('_');
    if (cut == std::string::npos || cut == 0) continue;
    ids.insert(stem.substr(0, cut));
  }
  return {ids.begin(), ids.end()};
}

// ---------------------------------------------------------------------------
// Evaluation

double reconstruction_iou(std::span<const std::vector<Grid>> parts, std::span<const Grid> inputs,
                          double threshold) {
  if (parts.size() != inputs.size()) {
    throw std::invalid_argument("reconstruction_iou: sample count mismatch");
  }
  if (parts.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    total += iou(reconstruct(parts[i]), inputs[i], threshold);
  }
  return total / static_cast<double>(parts.size());
}

namespace {

std::vector<Grid> non_empty(std::span<const Grid> parts, double threshold) {
  std::vector<Grid> out;
  for (const auto& p : parts) {
    if ((p.array() > threshold).any()) out.push_back(p);
  }
  return out;
}

double aligned_iou(std::span<const Grid> pred, std::span<const Grid> gt, double threshold) {
  const auto kept = non_empty(pred, threshold);
  if (kept.empty()) return 0.0;
  return iou_align(kept, gt, threshold).mean_iou;
}

json metrics_config(std::span<const std::string> metrics, const MetricsSettings& s) {
  return {{"metrics", std::vector<std::string>(metrics.begin(), metrics.end())},
          {"iou_threshold", s.iou_threshold},
          {"cig",
           {{"k", s.cig.k},
            {"d_pca", s.cig.d_pca},
            {"n_players", s.cig.n_players},
            {"empty_mass", s.cig.empty_mass},
            {"kmeans_iters", s.cig.kmeans_iters},
            {"seed", s.cig.seed}}},
          {"shape",
           {{"smoothing", to_string(s.shape.smoothing)},
            {"epsilon", s.shape.epsilon},
            {"threshold", s.shape.threshold}}}};
}

}  // namespace

json evaluate(std::span<const std::vector<Grid>> pred, std::span<const Scene> data,
              std::span<const std::string> metrics, const MetricsSettings& s, int threads) {
  static const std::set<std::string> known = {"iou", "cig", "sp"};
  for (const auto& m : metrics) {
    if (!known.count(m)) throw std::invalid_argument("evaluate: unknown metric '" + m + "'");
  }
  if (pred.size() != data.size()) throw std::invalid_argument("evaluate: sample count mismatch");
  const std::set<std::string> wanted(metrics.begin(), metrics.end());
  std::vector<Grid> inputs;
  for (const auto& sc : data) inputs.push_back(sc.image);

  json report = {{"n_samples", data.size()}, {"config", metrics_config(metrics, s)}};
  if (wanted.count("iou")) {
    std::vector<double> recon(data.size()), aligned(data.size());
    parallel_for(data.size(), threads, [&](std::size_t i) {
      recon[i] = iou(reconstruct(pred[i]), inputs[i], s.iou_threshold);
      aligned[i] = aligned_iou(pred[i], data[i].parts, s.iou_threshold);
    });
    const double n = std::max<double>(1.0, static_cast<double>(data.size()));
    report["iou"] = std::accumulate(recon.begin(), recon.end(), 0.0) / n;
    report["iou_aligned"] = std::accumulate(aligned.begin(), aligned.end(), 0.0) / n;
  }
  if (wanted.count("cig")) {
    const auto r = cig(pred, inputs, s.cig);
    report["cig"] = r.cig;
    report["mce_model"] = r.mce_model;
    report["mce_rand"] = r.mce_rand;
  }
  if (wanted.count("sp")) report["sp"] = mean_shape_score(pred, s.shape);
  return report;
}

json run_eval(const fs::path& pred_dir, const fs::path& data_dir,
              std::span<const std::string> metrics, const MetricsSettings& s, int threads) {
  const auto data_ids = list_sample_ids(data_dir);
  const auto pred_ids = list_prediction_ids(pred_dir);
  if (data_ids != pred_ids) {
    std::vector<std::string> diff;
    std::set_symmetric_difference(data_ids.begin(), data_ids.end(), pred_ids.begin(),
                                  pred_ids.end(), std::back_inserter(diff));
    throw std::runtime_error("run_eval: sample ids differ between directories (e.g. " +
                             (diff.empty() ? std::string("?") : diff.front()) + ")");
  }
  const auto data = load_dataset(data_dir);
  const auto pred = load_predictions(pred_dir, data_ids);
  return evaluate(pred, data, metrics, s, threads);
}

// ---------------------------------------------------------------------------
// Grounding

std::string_view to_string(GroundMode m) {
  return m == GroundMode::GtParts ? "gt-parts" : "decomposed";
}

GroundMode ground_mode_from_string(std::string_view name) {
  if (name == "gt-parts") return GroundMode::GtParts;
  if (name == "decomposed") return GroundMode::Decomposed;
  throw std::invalid_argument("unknown grounding mode '" + std::string(name) + "'");
}

namespace {

int relation_index(RelationKind k) {
  return static_cast<int>(std::find(kAllRelations.begin(), kAllRelations.end(), k) -
                          kAllRelations.begin());
}

}  // namespace

RelationSet relation_descriptors(std::span<const Scene> scenes, const DescriptorConfig& d) {
  RelationSet out;
  for (const auto& sc : scenes) {
    for (const auto& r : sc.relations) {
      const auto n = static_cast<int>(sc.parts.size());
      if (r.first < 0 || r.second < 0 || r.first >= n || r.second >= n) {
        throw std::runtime_error("relation_descriptors: bad part index in sample " + sc.id);
      }
      const auto e = embed_pair(sc.parts[static_cast<std::size_t>(r.first)],
                                sc.parts[static_cast<std::size_t>(r.second)], d);
      if (!e) continue;
      out.descriptors.push_back(e->values);
      out.labels.push_back(relation_index(r.kind));
    }
  }
  return out;
}

PrototypeDictionary fit_relation_head(std::span<const Scene> train, const GroundSettings& g,
                                      const DescriptorConfig& d) {
  const auto rs = relation_descriptors(train, d);
  if (rs.descriptors.empty()) throw std::runtime_error("fit_relation_head: missing relation labels");
  const int classes = static_cast<int>(kAllRelations.size());
  if (g.multi_k < 1) throw std::invalid_argument("fit_relation_head: multi_k must be >= 1");
  PrototypeDictionary head;
  head.arity = 2;
  head.multi_k = g.multi_k;
  head.tau_ce = g.tau_ce;
  head.prototypes.resize(classes * g.multi_k, d.dim());
  Vector counts = Vector::Zero(classes);
  for (int c = 0; c < classes; ++c) {
    std::vector<Vector> members;
    for (std::size_t i = 0; i < rs.labels.size(); ++i) {
      if (rs.labels[i] == c) members.push_back(rs.descriptors[i]);
    }
    counts(c) = static_cast<double>(members.size());
    if (static_cast<int>(members.size()) < g.multi_k) {
      throw std::runtime_error("fit_relation_head: too few training pairs labeled " +
                               std::string(to_string(kAllRelations[static_cast<std::size_t>(c)])));
    }
    Matrix points(static_cast<Eigen::Index>(members.size()), d.dim());
    for (std::size_t i = 0; i < members.size(); ++i) {
      points.row(static_cast<Eigen::Index>(i)) = members[i].transpose();
    }
    head.prototypes.middleRows(c * g.multi_k, g.multi_k) =
        kmeans(points, g.multi_k, mix_seed(g.seed, static_cast<std::uint64_t>(c))).centroids;
  }
  head.pi = (counts.array() + 1.0) / (counts.sum() + classes);
  for (int step = 0; step < g.steps; ++step) {
    const auto ce = prototype_cross_entropy(head, rs.descriptors, rs.labels);
    head.prototypes -= g.learning_rate * ce.grad;
  }
  head.meta = {{"relations", json::array()}};
  for (auto k : kAllRelations) head.meta["relations"].push_back(to_string(k));
  return head;
}

std::vector<Relation> predict_relations(std::span<const Grid> parts,
                                        const PrototypeDictionary& head,
                                        const DescriptorConfig& d) {
  if (head.n_classes() != static_cast<int>(kAllRelations.size())) {
    throw std::invalid_argument("predict_relations: the head needs one class per relation kind");
  }
  std::vector<Relation> out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    for (std::size_t j = i + 1; j < parts.size(); ++j) {
      const auto e = embed_pair(parts[i], parts[j], d);
      if (!e) continue;
      const auto c = static_cast<std::size_t>(head.nearest_class(e->values));
      out.push_back({static_cast<int>(i), static_cast<int>(j), kAllRelations[c]});
    }
  }
  return out;
}

GroundReport ground(std::span<const Scene> test, const PrototypeDictionary& head, GroundMode mode,
                    const Config& cfg, int threads, const PrototypeDictionary* unary) {
  const auto& desc = cfg.fit.dictionary.descriptor;
  const double thr = cfg.metrics.iou_threshold;
  std::vector<RelationHits> hits(test.size());
  std::vector<double> ious(test.size(), 0.0);
  parallel_for(test.size(), threads, [&](std::size_t i) {
    const Scene& sc = test[i];
    if (mode == GroundMode::GtParts) {
      std::vector<int> identity(sc.parts.size());
      std::iota(identity.begin(), identity.end(), 0);
      hits[i] = relation_hits(predict_relations(sc.parts, head, desc), sc.relations, identity);
      return;
    }
    const auto d = decompose_sample(sc, cfg, sample_seed(cfg.fit.seed, i), unary);
    const auto kept = non_empty(d.parts, thr);
    std::vector<int> gt_to_pred(sc.parts.size(), -1);
    if (!kept.empty()) {
      const auto a = iou_align(kept, sc.parts, thr);
      gt_to_pred = a.gt_to_pred;
      ious[i] = a.mean_iou;
    }
    hits[i] = relation_hits(predict_relations(kept, head, desc), sc.relations, gt_to_pred);
  });

  GroundReport r;
  r.mode = mode;
  r.n_samples = static_cast<int>(test.size());
  for (const auto& h : hits) {
    r.hits.correct += h.correct;
    r.hits.total += h.total;
  }
  if (r.hits.total == 0) throw std::runtime_error("ground: missing relation labels");
  r.relation_accuracy = static_cast<double>(r.hits.correct) / r.hits.total;
  if (mode == GroundMode::Decomposed && !test.empty()) {
    r.mean_iou = std::accumulate(ious.begin(), ious.end(), 0.0) / static_cast<double>(test.size());
  }
  return r;
}

json ground_report_to_json(const GroundReport& r) {
  json j = {{"mode", to_string(r.mode)},
            {"n_samples", r.n_samples},
            {"relations_total", r.hits.total},
            {"relations_correct", r.hits.correct},
            {"relation_accuracy", r.relation_accuracy}};
  if (r.mean_iou) j["iou"] = *r.mean_iou;
  return j;
}

// ---------------------------------------------------------------------------
// Embedding dump

std::string embeddings_csv(std::span<const std::string> ids,
                           std::span<const std::vector<Grid>> parts, const DescriptorConfig& d,
                           bool unary, bool pairs) {
  if (ids.size() != parts.size()) throw std::invalid_argument("embeddings_csv: size mismatch");
  std::ostringstream out;
  out << "sample_id,part_idx,arity";
  for (int k = 0; k < d.dim(); ++k) out << ",v" << k;
  out << '\n';
  char buf[32];
  auto row = [&](const std::string& id, const std::string& idx, int arity, const Vector& v) {
    out << id << ',' << idx << ',' << arity;
    for (Eigen::Index k = 0; k < v.size(); ++k) {
      std::snprintf(buf, sizeof buf, "%.9g", v(k));
      out << ',' << buf;
    }
    out << '\n';
  };
  for (std::size_t s = 0; s < ids.size(); ++s) {
    const auto& p = parts[s];
    if (unary) {
      for (std::size_t i = 0; i < p.size(); ++i) {
        if (auto e = embed_part(p[i], d)) row(ids[s], std::to_string(i), 1, e->values);
      }
    }
    if (pairs) {
      for (std::size_t i = 0; i < p.size(); ++i) {
        for (std::size_t j = i + 1; j < p.size(); ++j) {
          if (!keep_pair(p[i], p[j], d)) continue;
          if (auto e = embed_pair(p[i], p[j], d)) {
            row(ids[s], std::to_string(i) + "-" + std::to_string(j), 2, e->values);
          }
        }
      }
    }
  }
  return out.str();
}

}  // namespace tdl
