#include "tdl/core.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

namespace tdl {

double iou(const Grid& a, const Grid& b, double threshold) {
  require_same_shape(a, b, "iou");
  const auto on_a = (a.array() > threshold);
  const auto on_b = (b.array() > threshold);
  const auto inter = (on_a && on_b).count();
  const auto uni = (on_a || on_b).count();
  if (uni == 0) return 1.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

Field reconstruct(std::span<const Grid> parts) {
  if (parts.empty()) throw std::invalid_argument("reconstruct: empty part list");
  Field out = parts.front();
  for (std::size_t i = 1; i < parts.size(); ++i) {
    require_same_shape(out, parts[i], "reconstruct");
    out += parts[i];
  }
  return out;
}

Grid binarize(const Grid& g, double threshold) {
  return (g.array() > threshold).cast<double>().matrix();
}

std::string encode_pgm(const Grid& g) {
  std::ostringstream os;
  os << "P5\n" << g.cols() << ' ' << g.rows() << "\n255\n";
  std::string body(static_cast<std::size_t>(g.size()), '\0');
  for (Eigen::Index i = 0; i < g.size(); ++i) {
    const double v = std::clamp(g.data()[i], 0.0, 1.0);
    body[static_cast<std::size_t>(i)] = static_cast<char>(std::lround(v * 255.0));
  }
  return os.str() + body;
}

namespace {

// Reads the next whitespace-delimited header token, skipping '#' comments.
std::string next_token(const std::string& s, std::size_t& pos) {
  for (;;) {
    while (pos < s.size() && std::isspace(static_cast<unsigned char>(s[pos]))) ++pos;
    if (pos < s.size() && s[pos] == '#') {
      while (pos < s.size() && s[pos] != '\n') ++pos;
      continue;
    }
    break;
  }
  const std::size_t start = pos;
  while (pos < s.size() && !std::isspace(static_cast<unsigned char>(s[pos]))) ++pos;
  return s.substr(start, pos - start);
}

}  // namespace

Grid decode_pgm(const std::string& bytes) {
  std::size_t pos = 0;
  if (next_token(bytes, pos) != "P5") throw std::runtime_error("pgm: not a binary P5 file");
  const int width = std::stoi(next_token(bytes, pos));
  const int height = std::stoi(next_token(bytes, pos));
  const int maxval = std::stoi(next_token(bytes, pos));
  if (width < 1 || height < 1 || maxval < 1 || maxval > 255) {
    throw std::runtime_error("pgm: unsupported header");
  }
  ++pos;  // single whitespace before raster
  const auto n = static_cast<std::size_t>(width) * static_cast<std::size_t>(height);
  if (bytes.size() < pos + n) throw std::runtime_error("pgm: truncated raster");
  Grid g(height, width);
  for (std::size_t i = 0; i < n; ++i) {
    g.data()[i] = static_cast<unsigned char>(bytes[pos + i]) / static_cast<double>(maxval);
  }
  return g;
}

void write_pgm(const std::filesystem::path& path, const Grid& g) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << encode_pgm(g);
}

Grid read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_pgm(ss.str());
}

}  // namespace tdl
