#pragma once

#include "tdl/core.hpp"

#include <array>
#include <compare>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace tdl {

struct Pixel {
  int row = 0;
  int col = 0;
  friend auto operator<=>(const Pixel&, const Pixel&) = default;
};

/// Axis-aligned stroke. The centreline runs from `start` to `end`; the
/// stroke extends `thickness` pixels down (horizontal) or right (vertical)
/// of it. `start` is always the top/left end.
struct LineSegment {
  Pixel start;
  Pixel end;
  int thickness = 1;

  bool horizontal() const { return start.row == end.row && start.col != end.col; }
  bool vertical() const { return start.col == end.col && start.row != end.row; }
  bool degenerate() const { return start == end; }
  int length() const;
  friend bool operator==(const LineSegment&, const LineSegment&) = default;
};

enum class RelationKind { Parallel, VerticalMid, VerticalEdge, VerticalSepa };
inline constexpr std::array kAllRelations = {RelationKind::Parallel, RelationKind::VerticalMid,
                                              RelationKind::VerticalEdge,
                                              RelationKind::VerticalSepa};

std::string_view to_string(RelationKind kind);
RelationKind relation_from_string(std::string_view name);

enum class ShapeKind { Lshape, Tshape, Eshape, Rectangle, Hshape, Cshape, Ashape, Fshape };
inline constexpr std::array kAllShapes = {ShapeKind::Lshape,  ShapeKind::Tshape,
                                          ShapeKind::Eshape,  ShapeKind::Rectangle,
                                          ShapeKind::Hshape,  ShapeKind::Cshape,
                                          ShapeKind::Ashape,  ShapeKind::Fshape};

std::string_view to_string(ShapeKind kind);
int line_count(ShapeKind kind);

/// LW-G object patterns. `Basic` samples two lines in one of the four relations.
enum class Pattern { Basic, F, E, A, C, H, P, Rect };
inline constexpr std::array kAllPatterns = {Pattern::Basic, Pattern::F, Pattern::E,
                                            Pattern::A,     Pattern::C, Pattern::H,
                                            Pattern::P,     Pattern::Rect};

std::string_view to_string(Pattern p);
Pattern pattern_from_string(std::string_view name);

struct Relation {
  int first = 0;
  int second = 0;
  RelationKind kind = RelationKind::Parallel;
  friend bool operator==(const Relation&, const Relation&) = default;
};

struct Scene {
  std::string id;
  std::uint64_t seed = 0;
  Grid image;
  std::vector<Grid> parts;
  std::vector<LineSegment> segments;    // one per part
  std::vector<std::string> shape_kinds; // one per shape (or the LW-G pattern)
  std::vector<int> part_shape;          // shape index owning each part
  std::vector<int> colors;              // per shape (per line for LW-G); annotation only
  std::vector<Relation> relations;
};

struct GeneratorConfig {
  int height = 32;
  int width = 32;
  int thickness = 1;
  int min_length = 5;
  /// 0 derives a per-dataset default from the canvas size.
  int max_length = 0;
  int dilation = 1;
  int max_attempts = 200;
  int min_shapes = 1;
  int max_shapes = 3;
  /// Minimum empty pixels between two lines that are in the VerticalSepa relation.
  int sepa_min_gap = 2;
  int colors = 3;
};

struct PlacementError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

Grid rasterize(const LineSegment& seg, int height, int width);

/// Relation of two axis-aligned lines; endpoints within `tol` (Chebyshev,
/// measured on the centrelines) count as attached.
RelationKind classify_relation(const LineSegment& a, const LineSegment& b, int tol);

Scene gen_lineworld(std::uint64_t seed, const GeneratorConfig& cfg = {});
Scene gen_lwg(std::uint64_t seed, Pattern pattern, const GeneratorConfig& cfg = {});

/// Pattern for the i-th sample of an LW-G corpus (cycles through all patterns).
Pattern lwg_pattern_for_index(std::size_t index);

}  // namespace tdl
