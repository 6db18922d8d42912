#pragma once

#include "tdl/synthworld.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <string>
#include <vector>

namespace tdl {

/// Row-major run lengths of a binary mask, alternating off/on and starting
/// with background (so a mask whose first pixel is on starts with a 0 run).
std::vector<int> rle_encode(const Grid& mask, double threshold = kDefaultThreshold);
Grid rle_decode(const std::vector<int>& runs, int height, int width);

nlohmann::json scene_to_json(const Scene& scene);
/// Rebuilds a scene from its annotation; `image` is supplied separately.
Scene scene_from_json(const nlohmann::json& j, Grid image);

/// Layout: `<dir>/images/<id>.pgm` and `<dir>/annotations/<id>.json`.
void save_scene(const std::filesystem::path& dir, const Scene& scene);
Scene load_scene(const std::filesystem::path& dir, const std::string& id);
/// Sorted sample ids found under `<dir>/images`.
std::vector<std::string> list_sample_ids(const std::filesystem::path& dir);
std::vector<Scene> load_dataset(const std::filesystem::path& dir);

std::string sample_id(std::size_t index);

void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

}  // namespace tdl
