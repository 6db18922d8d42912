#include "tdl/dataset.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace tdl {

namespace fs = std::filesystem;
using nlohmann::json;

std::vector<int> rle_encode(const Grid& mask, double threshold) {
  std::vector<int> runs;
  bool current = false;
  int run = 0;
  for (Eigen::Index i = 0; i < mask.size(); ++i) {
    const bool on = mask.data()[i] > threshold;
    if (on != current) {
      runs.push_back(run);
      run = 0;
      current = on;
    }
    ++run;
  }
  runs.push_back(run);
  return runs;
}

Grid rle_decode(const std::vector<int>& runs, int height, int width) {
  Grid g = Grid::Zero(height, width);
  Eigen::Index pos = 0;
  bool on = false;
  for (int run : runs) {
    if (run < 0 || pos + run > g.size()) throw std::runtime_error("rle: runs exceed mask size");
    if (on) std::fill_n(g.data() + pos, run, 1.0);
    pos += run;
    on = !on;
  }
  if (pos != g.size()) throw std::runtime_error("rle: runs do not cover the mask");
  return g;
}

json scene_to_json(const Scene& scene) {
  json j;
  j["id"] = scene.id;
  j["seed"] = scene.seed;
  j["size"] = {scene.image.rows(), scene.image.cols()};
  j["shape_kinds"] = scene.shape_kinds;
  json parts = json::array();
  for (const auto& p : scene.parts) parts.push_back(rle_encode(p));
  j["parts"] = parts;
  json rels = json::array();
  for (const auto& r : scene.relations) {
    rels.push_back({r.first, r.second, std::string(to_string(r.kind))});
  }
  j["relations"] = rels;
  json segs = json::array();
  for (const auto& s : scene.segments) {
    segs.push_back({s.start.row, s.start.col, s.end.row, s.end.col, s.thickness});
  }
  j["segments"] = segs;
  j["part_shape"] = scene.part_shape;
  j["colors"] = scene.colors;
  return j;
}

Scene scene_from_json(const json& j, Grid image) {
  Scene s;
  s.id = j.at("id").get<std::string>();
  s.seed = j.at("seed").get<std::uint64_t>();
  const int h = j.at("size").at(0).get<int>();
  const int w = j.at("size").at(1).get<int>();
  if (image.rows() != h || image.cols() != w) {
    throw std::runtime_error("annotation size does not match image for sample " + s.id);
  }
  s.image = std::move(image);
  s.shape_kinds = j.at("shape_kinds").get<std::vector<std::string>>();
  for (const auto& runs : j.at("parts")) s.parts.push_back(rle_decode(runs.get<std::vector<int>>(), h, w));
  for (const auto& r : j.at("relations")) {
    s.relations.push_back(
        {r.at(0).get<int>(), r.at(1).get<int>(), relation_from_string(r.at(2).get<std::string>())});
  }
  if (j.contains("segments")) {
    for (const auto& v : j["segments"]) {
      s.segments.push_back({{v.at(0).get<int>(), v.at(1).get<int>()},
                            {v.at(2).get<int>(), v.at(3).get<int>()},
                            v.at(4).get<int>()});
    }
  }
  if (j.contains("part_shape")) s.part_shape = j["part_shape"].get<std::vector<int>>();
  if (j.contains("colors")) s.colors = j["colors"].get<std::vector<int>>();
  for (const auto& r : s.relations) {
    const auto n = static_cast<int>(s.parts.size());
    if (r.first < 0 || r.second < 0 || r.first >= n || r.second >= n || r.first == r.second) {
      throw std::runtime_error("relation references a missing part in sample " + s.id);
    }
  }
  return s;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void save_scene(const fs::path& dir, const Scene& scene) {
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "annotations");
  write_pgm(dir / "images" / (scene.id + ".pgm"), scene.image);
  write_text(dir / "annotations" / (scene.id + ".json"), scene_to_json(scene).dump() + "\n");
}

Scene load_scene(const fs::path& dir, const std::string& id) {
  Grid image = read_pgm(dir / "images" / (id + ".pgm"));
  const auto j = json::parse(read_text(dir / "annotations" / (id + ".json")));
  return scene_from_json(j, std::move(image));
}

std::vector<std::string> list_sample_ids(const fs::path& dir) {
  if (!fs::is_directory(dir / "images")) {
    throw std::runtime_error("dataset directory has no images/: " + dir.string());
  }
  std::vector<std::string> ids;
  for (const auto& e : fs::directory_iterator(dir / "images")) {
    if (e.path().extension() == ".pgm") ids.push_back(e.path().stem().string());
  }
  std::sort(ids.begin(), ids.end());
  return ids;
}

std::vector<Scene> load_dataset(const fs::path& dir) {
  std::vector<Scene> out;
  for (const auto& id : list_sample_ids(dir)) out.push_back(load_scene(dir, id));
  return out;
}

std::string sample_id(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%06zu", index);
  return buf;
}

}  // namespace tdl
