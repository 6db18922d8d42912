#include "support.hpp"

#include <tdl/dataset.hpp>
#include <tdl/harness.hpp>

#include <doctest.h>

#include <algorithm>
#include <array>
#include <atomic>
#include <filesystem>
#include <sstream>

namespace fs = std::filesystem;
using namespace tdl;

namespace {

std::vector<Scene> lineworld(std::size_t n, std::uint64_t seed) {
  std::vector<Scene> out;
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back(gen_lineworld(seed + i));
    out.back().id = sample_id(i);
  }
  return out;
}

std::vector<Scene> lwg(std::size_t n, std::uint64_t seed) {
  std::vector<Scene> out;
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back(gen_lwg(seed + i, lwg_pattern_for_index(i)));
    out.back().id = sample_id(i);
  }
  return out;
}

Config tiny_config() {
  Config c;
  c.fit.epochs = 3;
  c.fit.warmup_epochs = 1;
  c.fit.batch_size = 8;
  c.fit.seed = 5;
  c.fit.decompose.outer_steps = 20;
  c.fit.decompose.inner_steps = 2;
  c.fit.dictionary.bank_capacity_unary = 64;
  c.fit.dictionary.bank_capacity_pair = 128;
  return c;
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("tdl_harness_" + name);
  fs::remove_all(p);
  return p;
}

std::vector<std::vector<Grid>> gt_parts(std::span<const Scene> data) {
  std::vector<std::vector<Grid>> out;
  for (const auto& s : data) out.push_back(s.parts);
  return out;
}

}  // namespace

TEST_CASE("parse_config reads sections and keeps defaults elsewhere") {
  const auto c = parse_config(R"(
[fit]
epochs = 7
seed = 11
[game]
th_s = false
resources_hinge = "flipped"
[decompose]
n_players = 3
[dictionary]
eta_proto = 0.2
ground_multi_k = 4
[metrics]
smoothing = "hull"
)");
  CHECK(c.fit.epochs == 7);
  CHECK(c.fit.seed == 11);
  CHECK_FALSE(c.fit.game.th_s.has_value());
  CHECK(c.fit.game.resources_hinge == ResourcesHinge::Flipped);
  CHECK(c.fit.decompose.n_players == 3);
  CHECK(c.fit.dictionary.eta_proto == doctest::Approx(0.2));
  CHECK(c.ground.multi_k == 4);
  CHECK(c.metrics.shape.smoothing == Smoothing::Hull);
  CHECK(c.fit.batch_size == Config{}.fit.batch_size);
}

TEST_CASE("parse_config rejects unknown keys, sections and bad values") {
  CHECK_THROWS(parse_config("[fit]\nepochz = 3\n"));
  CHECK_THROWS(parse_config("[fitness]\nepochs = 3\n"));
  CHECK_THROWS(parse_config("[game]\nresources_hinge = \"sideways\"\n"));
  CHECK_THROWS(parse_config("[fit]\nepochs = \"many\"\n"));
  CHECK_THROWS(parse_config("[fit\n"));
}

TEST_CASE("config_to_json round trips through TOML") {
  Config c;
  c.fit.epochs = 4;
  c.fit.game.th_s.reset();
  const auto j = config_to_json(c);
  CHECK(j["game"]["th_s"] == false);
  CHECK(j["fit"]["epochs"] == 4);
  std::ostringstream toml;
  for (const auto& [section, body] : j.items()) {
    toml << "[" << section << "]\n";
    for (const auto& [k, v] : body.items()) toml << k << " = " << v.dump() << "\n";
  }
  CHECK(config_to_json(parse_config(toml.str())) == j);
}

TEST_CASE("parallel_for visits every index once and rethrows") {
  for (int threads : {1, 3, 8}) {
    std::vector<std::atomic<int>> hits(37);
    parallel_for(hits.size(), threads, [&](std::size_t i) { hits[i]++; });
    for (auto& h : hits) CHECK(h.load() == 1);
  }
  CHECK_THROWS_AS(parallel_for(10, 2,
                               [](std::size_t i) {
                                 if (i == 6) throw std::runtime_error("boom");
                               }),
                  std::runtime_error);
  parallel_for(0, 4, [](std::size_t) { FAIL("called on empty range"); });
}

TEST_CASE("fit with zero epochs produces an empty manifest") {
  auto c = tiny_config();
  c.fit.epochs = 0;
  const auto data = lineworld(4, 1);
  const auto r = fit(std::span<const Scene>(data), c);
  CHECK(r.manifest.epochs.empty());
  CHECK(r.manifest.dictionary_files.empty());
  CHECK_FALSE(r.unary.has_value());
  CHECK_FALSE(r.pair.has_value());
  CHECK(r.manifest.config == config_to_json(c));
}

TEST_CASE("fit records consecutive epochs and is deterministic") {
  const auto c = tiny_config();
  const auto data = lineworld(16, 100);
  const auto out = scratch("fit");
  FitOptions opt;
  opt.out_dir = out;
  int callbacks = 0;
  opt.on_epoch = [&](const EpochRecord&) { ++callbacks; };
  const auto a = fit(std::span<const Scene>(data), c, opt);
  const auto b = fit(std::span<const Scene>(data), c);

  REQUIRE(a.manifest.epochs.size() == 3);
  CHECK(callbacks == 3);
  for (std::size_t e = 0; e < a.manifest.epochs.size(); ++e) {
    const auto& rec = a.manifest.epochs[e];
    CHECK(rec.epoch == static_cast<int>(e));
    CHECK(rec.warmup == (e == 0));
    CHECK(rec.log_likelihood.has_value());
    CHECK(std::isfinite(rec.loss.total));
    CHECK(rec.n_parts > 0);
  }
  CHECK(a.manifest.epochs[0].clustering_loss == 0.0);
  CHECK(a.manifest.epochs[1].clustering_loss > 0.0);
  CHECK(manifest_to_json(a.manifest, false)["epochs"] == manifest_to_json(b.manifest, false)["epochs"]);
  CHECK(a.unary->prototypes == b.unary->prototypes);
  CHECK(a.pair->prototypes == b.pair->prototypes);

  REQUIRE(a.final_parts.size() == data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    REQUIRE(a.final_parts[i].size() == b.final_parts[i].size());
    for (std::size_t k = 0; k < a.final_parts[i].size(); ++k) {
      CHECK(a.final_parts[i][k] == b.final_parts[i][k]);
    }
  }

  CHECK(fs::exists(out / "manifest.json"));
  CHECK(fs::exists(out / "dict_unary.json"));
  CHECK(fs::exists(out / "dict_pair.json"));
  const auto ids = list_prediction_ids(out);
  CHECK(ids.size() == data.size());
  const auto on_disk = nlohmann::json::parse(read_text(out / "manifest.json"));
  CHECK(on_disk["epochs"].size() == 3);
  CHECK(on_disk.contains("wall_seconds"));
  CHECK_FALSE(manifest_to_json(a.manifest, false).contains("wall_seconds"));
  fs::remove_all(out);
}

TEST_CASE("fit rejects invalid settings") {
  auto c = tiny_config();
  const auto data = lineworld(4, 1);
  c.fit.batch_size = 0;
  CHECK_THROWS(fit(std::span<const Scene>(data), c));
  c = tiny_config();
  CHECK_THROWS(fit(std::span<const Scene>(), c));
}

TEST_CASE("sample seeds are stable and distinct") {
  CHECK(sample_seed(3, 7) == sample_seed(3, 7));
  CHECK(sample_seed(3, 7) != sample_seed(3, 8));
  CHECK(sample_seed(3, 7) != sample_seed(4, 7));
}

TEST_CASE("decompose_dataset does not depend on the thread count") {
  auto c = tiny_config();
  const auto data = lineworld(6, 40);
  const auto a = decompose_dataset(data, c, 1);
  const auto b = decompose_dataset(data, c, 3);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t k = 0; k < a[i].parts.size(); ++k) CHECK(a[i].parts[k] == b[i].parts[k]);
  }
}

TEST_CASE("evaluate on ground-truth parts") {
  const auto data = lineworld(12, 7);
  const auto pred = gt_parts(data);
  MetricsSettings s;
  const std::vector<std::string> all = {"iou", "cig", "sp"};
  const auto r = evaluate(pred, data, all, s);
  CHECK(r["n_samples"] == data.size());
  CHECK(r["iou"].get<double>() == doctest::Approx(1.0));
  CHECK(r["iou_aligned"].get<double>() == doctest::Approx(1.0));
  CHECK(r["sp"].get<double>() > 0.9);
  CHECK(r.contains("cig"));
  CHECK(r.contains("mce_model"));
  CHECK(evaluate(pred, data, all, s) == r);
  CHECK(evaluate(pred, data, all, s, 4) == r);

  const auto meta = evaluate(pred, data, std::vector<std::string>{}, s);
  CHECK_FALSE(meta.contains("iou"));
  CHECK_FALSE(meta.contains("cig"));
  CHECK_FALSE(meta.contains("sp"));
  CHECK(meta.contains("config"));

  CHECK_THROWS_AS(evaluate(pred, data, std::vector<std::string>{"fid"}, s),
                  std::invalid_argument);
  CHECK_THROWS_AS(evaluate(std::span(pred).first(5), data, all, s), std::invalid_argument);
}

TEST_CASE("reconstruction_iou of empty predictions is zero") {
  const auto data = lineworld(3, 9);
  std::vector<std::vector<Grid>> pred;
  std::vector<Grid> inputs;
  for (const auto& s : data) {
    pred.push_back({Grid::Zero(s.image.rows(), s.image.cols())});
    inputs.push_back(s.image);
  }
  CHECK(reconstruction_iou(pred, inputs) == doctest::Approx(0.0));
  CHECK_THROWS(reconstruction_iou(pred, std::span(inputs).first(2)));
}

TEST_CASE("save_decomposition and run_eval read predictions back") {
  const auto data = lineworld(5, 21);
  const auto root = scratch("eval");
  const auto data_dir = root / "data";
  const auto pred_dir = root / "pred";
  for (const auto& s : data) save_scene(data_dir, s);
  for (const auto& s : data) {
    Decomposition d;
    d.parts = s.parts;
    save_decomposition(pred_dir, s.id, d);
  }
  std::vector<std::string> ids;
  for (const auto& s : data) ids.push_back(s.id);
  CHECK(list_prediction_ids(pred_dir) == ids);
  const auto back = load_predictions(pred_dir, ids);
  for (std::size_t i = 0; i < data.size(); ++i) {
    REQUIRE(back[i].size() == data[i].parts.size());
    for (std::size_t k = 0; k < back[i].size(); ++k) {
      CHECK((back[i][k].array() - data[i].parts[k].array()).abs().maxCoeff() < 1e-2);
    }
  }
  CHECK(fs::exists(pred_dir / "decomp" / (ids[0] + ".json")));

  const std::vector<std::string> iou = {"iou"};
  const auto r = run_eval(pred_dir, data_dir, iou, MetricsSettings{});
  CHECK(r["iou"].get<double>() == doctest::Approx(1.0));

  fs::remove(pred_dir / "parts" / (ids[2] + "_0.pgm"));
  for (const auto& e : fs::directory_iterator(pred_dir / "parts")) {
    if (e.path().filename().string().rfind(ids[2], 0) == 0) fs::remove(e.path());
  }
  CHECK_THROWS(run_eval(pred_dir, data_dir, iou, MetricsSettings{}));
  CHECK_THROWS(load_predictions(pred_dir, ids));
  fs::remove_all(root);
}

TEST_CASE("ground mode names") {
  CHECK(ground_mode_from_string("gt-parts") == GroundMode::GtParts);
  CHECK(ground_mode_from_string("decomposed") == GroundMode::Decomposed);
  CHECK(to_string(GroundMode::Decomposed) == "decomposed");
  CHECK_THROWS_AS(ground_mode_from_string("oracle"), std::invalid_argument);
}

TEST_CASE("relation head fits its own training split") {
  const auto train = lwg(800, 500);
  Config cfg;
  const auto& d = cfg.fit.dictionary.descriptor;
  const auto rs = relation_descriptors(train, d);
  CHECK(rs.descriptors.size() == rs.labels.size());
  CHECK(rs.descriptors.size() >= train.size());

  const auto head = fit_relation_head(train, cfg.ground, d);
  CHECK(head.prototypes.rows() == 4 * cfg.ground.multi_k);
  const auto r = ground(train, head, GroundMode::GtParts, cfg);
  CHECK(r.n_samples == static_cast<int>(train.size()));
  CHECK(r.hits.total == static_cast<int>(rs.labels.size()));
  CHECK_FALSE(r.mean_iou.has_value());
  CHECK(r.relation_accuracy >= 0.95);

  // gt-parts mode never decomposes.
  Config broken = cfg;
  broken.fit.decompose.n_players = 0;
  CHECK(ground(train, head, GroundMode::GtParts, broken).relation_accuracy ==
        r.relation_accuracy);

  const auto j = ground_report_to_json(r);
  CHECK(j["mode"] == "gt-parts");
  CHECK(j["relations_total"] == r.hits.total);
  CHECK_FALSE(j.contains("iou"));

  GroundSettings one = cfg.ground;
  one.multi_k = 1;
  CHECK(fit_relation_head(train, one, d).prototypes.rows() == 4);
  one.multi_k = 0;
  CHECK_THROWS(fit_relation_head(train, one, d));
  CHECK_THROWS(fit_relation_head(lineworld(3, 1), cfg.ground, d));
}

TEST_CASE("constant predictions on a balanced test set score chance") {
  auto test = lwg(200, 900);
  // Trim relation labels until every kind occurs equally often.
  std::array<int, kAllRelations.size()> seen{};
  for (const auto& s : test) {
    for (const auto& rel : s.relations) seen[static_cast<std::size_t>(rel.kind)]++;
  }
  const int per_kind = *std::min_element(seen.begin(), seen.end());
  REQUIRE(per_kind > 0);
  seen.fill(0);
  for (auto& s : test) {
    std::erase_if(s.relations, [&](const Relation& rel) {
      return ++seen[static_cast<std::size_t>(rel.kind)] > per_kind;
    });
  }
  Config cfg;
  const auto& d = cfg.fit.dictionary.descriptor;
  PrototypeDictionary head =
      fit_relation_head(test, GroundSettings{.steps = 0, .multi_k = 1}, d);
  // Every prototype on the same point: ties go to the first kind.
  for (Eigen::Index r = 1; r < head.prototypes.rows(); ++r) {
    head.prototypes.row(r) = head.prototypes.row(0);
  }
  const auto rep = ground(test, head, GroundMode::GtParts, cfg);
  CHECK(rep.hits.total == per_kind * static_cast<int>(kAllRelations.size()));
  CHECK(rep.hits.correct == per_kind);
  CHECK(rep.relation_accuracy == doctest::Approx(0.25));
}

TEST_CASE("decomposed grounding reports reconstruction IoU") {
  const auto test = lwg(4, 77);
  Config cfg;
  cfg.fit.decompose.outer_steps = 20;
  cfg.fit.decompose.inner_steps = 2;
  cfg.fit.decompose.n_players = 2;
  const auto head = fit_relation_head(lwg(80, 1), GroundSettings{.steps = 50, .multi_k = 1},
                                      cfg.fit.dictionary.descriptor);
  const auto r = ground(test, head, GroundMode::Decomposed, cfg, 2);
  REQUIRE(r.mean_iou.has_value());
  CHECK(*r.mean_iou >= 0.0);
  CHECK(*r.mean_iou <= 1.0);
  CHECK(r.relation_accuracy >= 0.0);
  CHECK(ground_report_to_json(r).contains("iou"));
}

TEST_CASE("embeddings_csv writes unary and pair rows") {
  const auto data = lineworld(3, 31);
  std::vector<std::string> ids;
  std::vector<std::vector<Grid>> parts;
  for (const auto& s : data) {
    ids.push_back(s.id);
    parts.push_back(s.parts);
  }
  DescriptorConfig d;
  const auto csv = embeddings_csv(ids, parts, d, true, true);
  std::istringstream in(csv);
  std::string header;
  std::getline(in, header);
  CHECK(header.rfind("sample_id,part_idx,arity,v0,", 0) == 0);
  CHECK(std::count(header.begin(), header.end(), ',') == 2 + d.dim());

  std::size_t unary = 0, pair = 0;
  std::string line;
  while (std::getline(in, line)) {
    const auto f1 = line.find(',');
    const auto f2 = line.find(',', f1 + 1);
    const auto arity = line.substr(f2 + 1, 1);
    const auto idx = line.substr(f1 + 1, f2 - f1 - 1);
    if (arity == "1") {
      ++unary;
      CHECK(idx.find('-') == std::string::npos);
    } else {
      ++pair;
      CHECK(idx.find('-') != std::string::npos);
    }
  }
  std::size_t want_unary = 0, want_pair = 0;
  for (const auto& p : parts) {
    want_unary += p.size();
    for (std::size_t i = 0; i < p.size(); ++i) {
      for (std::size_t j = i + 1; j < p.size(); ++j) want_pair += keep_pair(p[i], p[j], d);
    }
  }
  CHECK(unary == want_unary);
  CHECK(pair == want_pair);

  const auto only_unary = embeddings_csv(ids, parts, d, true, false);
  CHECK(std::count(only_unary.begin(), only_unary.end(), '\n') == 1 + static_cast<long>(want_unary));
  CHECK_THROWS(embeddings_csv(std::span(ids).first(2), parts, d, true, true));
}
