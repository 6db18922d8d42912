#include "tdl/harness.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using namespace tdl;

namespace {

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  for (std::string item; std::getline(in, item, ',');) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  write_text(path, j.dump(2) + "\n");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Transitional dictionary learning on synthetic line worlds"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  std::uint64_t seed = 0;
  int threads = 1;
  app.add_option("--config", config_path, "TOML configuration")->check(CLI::ExistingFile);
  auto* seed_opt = app.add_option("--seed", seed, "Global seed");
  app.add_option("--threads", threads, "Worker threads")->check(CLI::PositiveNumber);

  auto* gen = app.add_subcommand("gen", "Generate a dataset");
  std::string dataset = "lineworld", out_dir;
  std::size_t count = 0;
  int size = 32;
  gen->add_option("--dataset", dataset)->check(CLI::IsMember({"lineworld", "lwg"}));
  gen->add_option("--n", count)->required();
  gen->add_option("--size", size)->check(CLI::PositiveNumber);
  gen->add_option("--out", out_dir)->required();

  auto* dec = app.add_subcommand("decompose", "Decompose every sample of a dataset");
  std::string data_dir, dict_path;
  dec->add_option("--data", data_dir)->required()->check(CLI::ExistingDirectory);
  dec->add_option("--out", out_dir)->required();
  dec->add_option("--dict", dict_path, "Unary dictionary for the prototype pull")
      ->check(CLI::ExistingFile);

  auto* fit_cmd = app.add_subcommand("fit", "Fit the dictionaries");
  fit_cmd->add_option("--data", data_dir)->required()->check(CLI::ExistingDirectory);
  fit_cmd->add_option("--out", out_dir)->required();

  auto* eval = app.add_subcommand("eval", "Score predicted parts");
  std::string pred_dir, metric_list = "iou,cig,sp", report_path;
  std::optional<int> k;
  eval->add_option("--pred", pred_dir)->required()->check(CLI::ExistingDirectory);
  eval->add_option("--data", data_dir)->required()->check(CLI::ExistingDirectory);
  eval->add_option("--metrics", metric_list, "Comma-separated: iou, cig, sp");
  eval->add_option("--k", k, "K-Means clusters for CIG");
  eval->add_option("--report", report_path)->required();

  auto* grd = app.add_subcommand("ground", "Relation grounding on LW-G");
  std::string train_dir, mode = "gt-parts", head_path, save_head;
  grd->add_option("--train", train_dir, "Labeled split for the relation head")
      ->check(CLI::ExistingDirectory);
  grd->add_option("--data", data_dir)->required()->check(CLI::ExistingDirectory);
  grd->add_option("--mode", mode)->check(CLI::IsMember({"gt-parts", "decomposed"}));
  grd->add_option("--head", head_path, "Fitted relation head; skips training")
      ->check(CLI::ExistingFile);
  grd->add_option("--save-head", save_head);
  grd->add_option("--dict", dict_path, "Unary dictionary for the prototype pull")
      ->check(CLI::ExistingFile);
  grd->add_option("--report", report_path)->required();

  auto* dump = app.add_subcommand("dump-embeddings", "Write part descriptors as CSV");
  std::string arity = "1";
  auto* dump_data = dump->add_option("--data", data_dir, "Dataset (ground-truth parts)")
                        ->check(CLI::ExistingDirectory);
  dump->add_option("--pred", pred_dir, "Decomposition output")
      ->check(CLI::ExistingDirectory)
      ->excludes(dump_data);
  dump->add_option("--arity", arity)->check(CLI::IsMember({"1", "2", "both"}));
  dump->add_option("--out", out_dir, "CSV path")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    Config cfg = config_path.empty() ? Config{} : load_config(config_path);
    if (*seed_opt) {
      cfg.fit.seed = seed;
      cfg.metrics.cig.seed = seed;
    }

    if (*gen) {
      GeneratorConfig g;
      g.height = g.width = size;
      for (std::size_t i = 0; i < count; ++i) {
        Scene s = dataset == "lwg" ? gen_lwg(seed + i, lwg_pattern_for_index(i), g)
                                   : gen_lineworld(seed + i, g);
        s.id = sample_id(i);
        save_scene(out_dir, s);
      }
    } else if (*dec) {
      const auto data = load_dataset(data_dir);
      std::optional<PrototypeDictionary> dict;
      if (!dict_path.empty()) dict = load_dictionary(dict_path);
      const auto out = decompose_dataset(data, cfg, threads, dict ? &*dict : nullptr);
      for (std::size_t i = 0; i < data.size(); ++i) save_decomposition(out_dir, data[i].id, out[i]);
    } else if (*fit_cmd) {
      FitOptions opt;
      opt.threads = threads;
      opt.out_dir = out_dir;
      opt.on_epoch = [](const EpochRecord& r) {
        std::fprintf(stderr, "epoch %d%s loss %.4f clustering %.5f ll %s\n", r.epoch,
                     r.warmup ? " (warm-up)" : "", r.loss.total, r.clustering_loss,
                     r.log_likelihood ? std::to_string(*r.log_likelihood).c_str() : "-");
      };
      fit(fs::path(data_dir), cfg, opt);
    } else if (*eval) {
      if (k) cfg.metrics.cig.k = *k;
      const auto metrics = split_list(metric_list);
      write_json(report_path, run_eval(pred_dir, data_dir, metrics, cfg.metrics, threads));
    } else if (*grd) {
      PrototypeDictionary head;
      if (!head_path.empty()) {
        head = load_dictionary(head_path);
      } else {
        if (train_dir.empty()) throw std::invalid_argument("ground: need --train or --head");
        const auto train = load_dataset(train_dir);
        head = fit_relation_head(train, cfg.ground, cfg.fit.dictionary.descriptor);
      }
      if (!save_head.empty()) save_dictionary(save_head, head);
      std::optional<PrototypeDictionary> dict;
      if (!dict_path.empty()) dict = load_dictionary(dict_path);
      const auto test = load_dataset(data_dir);
      const auto report = ground(test, head, ground_mode_from_string(mode), cfg, threads,
                                 dict ? &*dict : nullptr);
      auto j = ground_report_to_json(report);
      j["config"] = config_to_json(cfg);
      write_json(report_path, j);
    } else if (*dump) {
      std::vector<std::string> ids;
      std::vector<std::vector<Grid>> parts;
      if (!pred_dir.empty()) {
        ids = list_prediction_ids(pred_dir);
        parts = load_predictions(pred_dir, ids);
      } else if (!data_dir.empty()) {
        for (auto& s : load_dataset(data_dir)) {
          ids.push_back(s.id);
          parts.push_back(std::move(s.parts));
        }
      } else {
        throw std::invalid_argument("dump-embeddings: need --data or --pred");
      }
      write_text(out_dir, embeddings_csv(ids, parts, cfg.fit.dictionary.descriptor,
                                         arity != "2", arity != "1"));
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
