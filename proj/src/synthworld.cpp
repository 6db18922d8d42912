#include "tdl/synthworld.hpp"

#include <algorithm>
#include <cstdlib>
#include <random>

namespace tdl {

int LineSegment::length() const {
  return std::max(std::abs(end.row - start.row), std::abs(end.col - start.col)) + 1;
}

std::string_view to_string(RelationKind kind) {
  switch (kind) {
    case RelationKind::Parallel: return "Parallel";
    case RelationKind::VerticalMid: return "VerticalMid";
    case RelationKind::VerticalEdge: return "VerticalEdge";
    case RelationKind::VerticalSepa: return "VerticalSepa";
  }
  return "?";
}

RelationKind relation_from_string(std::string_view name) {
  for (auto k : kAllRelations) {
    if (to_string(k) == name) return k;
  }
  throw std::invalid_argument("unknown relation kind: " + std::string(name));
}

std::string_view to_string(ShapeKind kind) {
  switch (kind) {
    case ShapeKind::Lshape: return "Lshape";
    case ShapeKind::Tshape: return "Tshape";
    case ShapeKind::Eshape: return "Eshape";
    case ShapeKind::Rectangle: return "Rectangle";
    case ShapeKind::Hshape: return "Hshape";
    case ShapeKind::Cshape: return "Cshape";
    case ShapeKind::Ashape: return "Ashape";
    case ShapeKind::Fshape: return "Fshape";
  }
  return "?";
}

int line_count(ShapeKind kind) {
  switch (kind) {
    case ShapeKind::Lshape:
    case ShapeKind::Tshape: return 2;
    case ShapeKind::Cshape:
    case ShapeKind::Fshape:
    case ShapeKind::Hshape: return 3;
    case ShapeKind::Ashape:
    case ShapeKind::Eshape:
    case ShapeKind::Rectangle: return 4;
  }
  return 0;
}

std::string_view to_string(Pattern p) {
  switch (p) {
    case Pattern::Basic: return "basic-4-relations";
    case Pattern::F: return "F";
    case Pattern::E: return "E";
    case Pattern::A: return "A";
    case Pattern::C: return "C";
    case Pattern::H: return "H";
    case Pattern::P: return "P";
    case Pattern::Rect: return "Rect";
  }
  return "?";
}

Pattern pattern_from_string(std::string_view name) {
  for (auto p : kAllPatterns) {
    if (to_string(p) == name) return p;
  }
  throw std::invalid_argument("unknown pattern: " + std::string(name));
}

Pattern lwg_pattern_for_index(std::size_t index) {
  return kAllPatterns[index % kAllPatterns.size()];
}

Grid rasterize(const LineSegment& seg, int height, int width) {
  Grid g = Grid::Zero(height, width);
  const int r1 = seg.horizontal() ? seg.start.row + seg.thickness - 1 : seg.end.row;
  const int c1 = seg.horizontal() ? seg.end.col : seg.start.col + seg.thickness - 1;
  for (int r = std::max(0, seg.start.row); r <= std::min(height - 1, r1); ++r) {
    for (int c = std::max(0, seg.start.col); c <= std::min(width - 1, c1); ++c) {
      g(r, c) = 1.0;
    }
  }
  return g;
}

namespace {

int chebyshev(Pixel a, Pixel b) {
  return std::max(std::abs(a.row - b.row), std::abs(a.col - b.col));
}

int distance_to_centreline(Pixel p, const LineSegment& s) {
  const Pixel nearest = s.horizontal()
                            ? Pixel{s.start.row, std::clamp(p.col, s.start.col, s.end.col)}
                            : Pixel{std::clamp(p.row, s.start.row, s.end.row), s.start.col};
  return chebyshev(p, nearest);
}

void require_axis_aligned(const LineSegment& s) {
  if (s.degenerate()) throw std::invalid_argument("classify_relation: zero-length segment");
  if (!s.horizontal() && !s.vertical()) {
    throw std::invalid_argument("classify_relation: segment is not axis-aligned");
  }
}

}  // namespace

RelationKind classify_relation(const LineSegment& a, const LineSegment& b, int tol) {
  require_axis_aligned(a);
  require_axis_aligned(b);
  if (a.horizontal() == b.horizontal()) return RelationKind::Parallel;

  const std::array ends_a = {a.start, a.end};
  const std::array ends_b = {b.start, b.end};
  for (auto pa : ends_a) {
    for (auto pb : ends_b) {
      if (chebyshev(pa, pb) <= tol) return RelationKind::VerticalEdge;
    }
  }
  for (auto pa : ends_a) {
    if (distance_to_centreline(pa, b) <= tol) return RelationKind::VerticalMid;
  }
  for (auto pb : ends_b) {
    if (distance_to_centreline(pb, a) <= tol) return RelationKind::VerticalMid;
  }
  return RelationKind::VerticalSepa;
}

namespace {

using Rng = std::mt19937_64;

int uniform(Rng& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

// Axis-aligned pixel rectangle in a shape's local frame.
struct Box {
  int r0, c0, r1, c1;
  bool horizontal;
};

// A shape (or LW-G object) before placement.
struct Local {
  std::vector<Box> boxes;
  std::vector<Relation> expected;
};

struct Sizes {
  int t;
  int lo;
  int hi;
};

Box vline(const Sizes& s, int r0, int c, int len) {
  return {r0, c, r0 + len - 1, c + s.t - 1, false};
}

Box hline(const Sizes& s, int r, int c0, int len) {
  return {r, c0, r + s.t - 1, c0 + len - 1, true};
}

std::optional<Local> build_shape(ShapeKind kind, const Sizes& s, Rng& rng) {
  const int t = s.t;
  const int L = uniform(rng, s.lo, s.hi);
  auto width = [&] { return uniform(rng, s.lo, s.hi); };
  auto mid_row = [&](int hi) -> std::optional<int> {
    if (hi < t + 1) return std::nullopt;
    return uniform(rng, t + 1, hi);
  };
  const Box spine = vline(s, 0, 0, L);
  using R = RelationKind;

  switch (kind) {
    case ShapeKind::Lshape:
      return Local{{spine, hline(s, 0, t, width())}, {{0, 1, R::VerticalEdge}}};
    case ShapeKind::Tshape: {
      auto m = mid_row(L - 2 - t);
      if (!m) return std::nullopt;
      return Local{{spine, hline(s, *m, t, width())}, {{0, 1, R::VerticalMid}}};
    }
    case ShapeKind::Cshape: {
      if (L < 2 * t + 1) return std::nullopt;
      return Local{{spine, hline(s, 0, t, width()), hline(s, L - t, t, width())},
                   {{0, 1, R::VerticalEdge}, {0, 2, R::VerticalEdge}, {1, 2, R::Parallel}}};
    }
    case ShapeKind::Fshape: {
      auto m = mid_row(L - 2 - t);
      if (!m) return std::nullopt;
      return Local{{spine, hline(s, *m, t, width()), hline(s, 0, t, width())},
                   {{0, 1, R::VerticalMid}, {0, 2, R::VerticalEdge}, {1, 2, R::Parallel}}};
    }
    case ShapeKind::Eshape: {
      auto m = mid_row(L - 2 * t - 1);
      if (!m) return std::nullopt;
      return Local{{spine, hline(s, *m, t, width()), hline(s, 0, t, width()),
                    hline(s, L - t, t, width())},
                   {{0, 1, R::VerticalMid},
                    {0, 2, R::VerticalEdge},
                    {0, 3, R::VerticalEdge},
                    {1, 2, R::Parallel},
                    {1, 3, R::Parallel}}};
    }
    case ShapeKind::Hshape: {
      auto m = mid_row(L - 2 - t);
      if (!m) return std::nullopt;
      const int w = width();
      const int len2 = uniform(rng, std::max(s.lo, 2 * t + 3), std::max(s.hi, 2 * t + 3));
      const int o_lo = *m - len2 + 2 + t;
      const int o_hi = *m - t - 1;
      if (o_lo > o_hi) return std::nullopt;
      const int o = uniform(rng, o_lo, o_hi);
      return Local{{spine, hline(s, *m, t, w), vline(s, o, t + w, len2)},
                   {{0, 1, R::VerticalMid}, {0, 2, R::Parallel}, {1, 2, R::VerticalMid}}};
    }
    case ShapeKind::Ashape: {
      auto m = mid_row(L - 2 - t);
      if (!m) return std::nullopt;
      const int w = width();
      return Local{{spine, hline(s, *m, t, w), hline(s, 0, t, w), vline(s, 0, t + w, L)},
                   {{0, 1, R::VerticalMid},
                    {0, 2, R::VerticalEdge},
                    {0, 3, R::Parallel},
                    {1, 3, R::VerticalMid},
                    {2, 3, R::VerticalEdge}}};
    }
    case ShapeKind::Rectangle: {
      if (L < 2 * t + 1) return std::nullopt;
      const int w = width();
      return Local{{spine, hline(s, 0, t, w), hline(s, L - t, t, w), vline(s, 0, t + w, L)},
                   {{0, 1, R::VerticalEdge},
                    {0, 2, R::VerticalEdge},
                    {0, 3, R::Parallel},
                    {1, 3, R::VerticalEdge},
                    {2, 3, R::VerticalEdge}}};
    }
  }
  return std::nullopt;
}

// P pattern: an F whose middle bar is closed off by a short line back to the top bar.
std::optional<Local> build_p(const Sizes& s, Rng& rng) {
  const int t = s.t;
  const int L = uniform(rng, s.lo, s.hi);
  const int m_lo = std::max(t + 1, s.lo - 1);
  const int m_hi = L - 2 - t;
  if (m_lo > m_hi) return std::nullopt;
  const int m = uniform(rng, m_lo, m_hi);
  const int w = uniform(rng, s.lo, s.hi);
  using R = RelationKind;
  return Local{{vline(s, 0, 0, L), hline(s, m, t, w), hline(s, 0, t, w), vline(s, 0, t + w, m + 1)},
               {{0, 1, R::VerticalMid},
                {0, 2, R::VerticalEdge},
                {0, 3, R::Parallel},
                {1, 3, R::VerticalEdge},
                {2, 3, R::VerticalEdge}}};
}

std::optional<Local> build_basic(const Sizes& s, int sepa_gap, Rng& rng) {
  const int t = s.t;
  const auto kind = kAllRelations[static_cast<std::size_t>(uniform(rng, 0, 3))];
  const int L = uniform(rng, s.lo, s.hi);
  const int w = uniform(rng, s.lo, s.hi);
  const Box spine = vline(s, 0, 0, L);
  switch (kind) {
    case RelationKind::Parallel: {
      const int gap = uniform(rng, 1, 6);
      const int off = uniform(rng, -w / 2, L - (w + 1) / 2);
      return Local{{spine, vline(s, off, t + gap, w)}, {{0, 1, kind}}};
    }
    case RelationKind::VerticalMid:
      return build_shape(ShapeKind::Tshape, s, rng);
    case RelationKind::VerticalEdge:
      return build_shape(ShapeKind::Lshape, s, rng);
    case RelationKind::VerticalSepa: {
      const int gap = uniform(rng, sepa_gap, sepa_gap + 4);
      if (uniform(rng, 0, 1) == 0) {
        // beside the line
        const int r = uniform(rng, 0, L - t);
        return Local{{spine, hline(s, r, t + gap, w)}, {{0, 1, kind}}};
      }
      // capping the line end, not touching it
      const int c0 = uniform(rng, -w + 1, t + 2);
      return Local{{spine, hline(s, -t - gap, c0, w)}, {{0, 1, kind}}};
    }
  }
  return std::nullopt;
}

// Shifts boxes to a non-negative origin, then applies one of the 8 symmetries
// of the square. Returns the transformed boxes and their extent.
struct Placed {
  std::vector<Box> boxes;
  int height;
  int width;
};

Placed orient(std::vector<Box> boxes, int symmetry) {
  int rmin = boxes[0].r0, cmin = boxes[0].c0, rmax = boxes[0].r1, cmax = boxes[0].c1;
  for (const auto& b : boxes) {
    rmin = std::min(rmin, b.r0);
    cmin = std::min(cmin, b.c0);
    rmax = std::max(rmax, b.r1);
    cmax = std::max(cmax, b.c1);
  }
  const int h = rmax - rmin + 1;
  const int w = cmax - cmin + 1;
  const bool transpose = symmetry >= 4;
  auto map = [&](int r, int c) -> Pixel {
    r -= rmin;
    c -= cmin;
    switch (symmetry) {
      case 0: return {r, c};
      case 1: return {r, w - 1 - c};
      case 2: return {h - 1 - r, c};
      case 3: return {h - 1 - r, w - 1 - c};
      case 4: return {c, r};
      case 5: return {c, h - 1 - r};
      case 6: return {w - 1 - c, r};
      default: return {w - 1 - c, h - 1 - r};
    }
  };
  for (auto& b : boxes) {
    const Pixel p = map(b.r0, b.c0);
    const Pixel q = map(b.r1, b.c1);
    b = {std::min(p.row, q.row), std::min(p.col, q.col), std::max(p.row, q.row),
         std::max(p.col, q.col), b.horizontal != transpose};
  }
  return {std::move(boxes), transpose ? w : h, transpose ? h : w};
}

LineSegment to_segment(const Box& b, int dr, int dc, int thickness) {
  const Pixel start{b.r0 + dr, b.c0 + dc};
  const Pixel end = b.horizontal ? Pixel{b.r0 + dr, b.c1 + dc} : Pixel{b.r1 + dr, b.c0 + dc};
  return {start, end, thickness};
}

struct BoxExtent {
  int r0, c0, r1, c1;
};

bool overlaps(const BoxExtent& a, const BoxExtent& b, int dilation) {
  return !(a.r1 + dilation < b.r0 || b.r1 + dilation < a.r0 || a.c1 + dilation < b.c0 ||
           b.c1 + dilation < a.c0);
}

// Rasterizes one placed object into the scene and checks its constructed
// relations against the classifier.
void add_object(Scene& scene, const std::vector<LineSegment>& segs,
                const std::vector<Relation>& expected, int shape_index, int tol, int height,
                int width) {
  const int base = static_cast<int>(scene.parts.size());
  for (const auto& e : expected) {
    const auto got = classify_relation(segs[static_cast<std::size_t>(e.first)],
                                       segs[static_cast<std::size_t>(e.second)], tol);
    if (got != e.kind) {
      throw std::logic_error("generator produced a relation that does not classify as built");
    }
  }
  for (const auto& s : segs) {
    scene.parts.push_back(rasterize(s, height, width));
    scene.segments.push_back(s);
    scene.part_shape.push_back(shape_index);
  }
  for (std::size_t i = 0; i < segs.size(); ++i) {
    for (std::size_t j = i + 1; j < segs.size(); ++j) {
      scene.relations.push_back({base + static_cast<int>(i), base + static_cast<int>(j),
                                 classify_relation(segs[i], segs[j], tol)});
    }
  }
}

void finish(Scene& scene, int height, int width) {
  scene.image = Grid::Zero(height, width);
  for (const auto& p : scene.parts) scene.image = scene.image.cwiseMax(p);
}

}  // namespace

Scene gen_lineworld(std::uint64_t seed, const GeneratorConfig& cfg) {
  if (cfg.height < 4 * cfg.min_length || cfg.width < 4 * cfg.min_length) {
    throw std::invalid_argument("gen_lineworld: canvas smaller than configured minimum");
  }
  Rng rng(seed);
  const int t = cfg.thickness;
  const Sizes sizes{t, cfg.min_length,
                    cfg.max_length > 0 ? cfg.max_length
                                       : std::max(cfg.min_length + 2,
                                                  std::min(cfg.height, cfg.width) / 3)};
  Scene scene;
  scene.seed = seed;
  const int n_shapes = uniform(rng, cfg.min_shapes, cfg.max_shapes);
  std::vector<BoxExtent> placed;
  for (int s = 0; s < n_shapes; ++s) {
    const auto kind = kAllShapes[static_cast<std::size_t>(uniform(rng, 0, 7))];
    bool ok = false;
    for (int attempt = 0; attempt < cfg.max_attempts && !ok; ++attempt) {
      auto local = build_shape(kind, sizes, rng);
      if (!local) continue;
      auto obj = orient(local->boxes, uniform(rng, 0, 7));
      if (obj.height > cfg.height || obj.width > cfg.width) continue;
      const int dr = uniform(rng, 0, cfg.height - obj.height);
      const int dc = uniform(rng, 0, cfg.width - obj.width);
      const BoxExtent ext{dr, dc, dr + obj.height - 1, dc + obj.width - 1};
      if (std::any_of(placed.begin(), placed.end(),
                      [&](const BoxExtent& o) { return overlaps(ext, o, cfg.dilation); })) {
        continue;
      }
      std::vector<LineSegment> segs;
      for (const auto& b : obj.boxes) segs.push_back(to_segment(b, dr, dc, t));
      add_object(scene, segs, local->expected, s, t, cfg.height, cfg.width);
      scene.shape_kinds.emplace_back(to_string(kind));
      scene.colors.push_back(uniform(rng, 0, cfg.colors - 1));
      placed.push_back(ext);
      ok = true;
    }
    if (!ok) {
      throw PlacementError("gen_lineworld: could not place shape " + std::to_string(s) +
                           " after " + std::to_string(cfg.max_attempts) + " attempts");
    }
  }
  finish(scene, cfg.height, cfg.width);
  return scene;
}

Scene gen_lwg(std::uint64_t seed, Pattern pattern, const GeneratorConfig& cfg) {
  Rng rng(seed);
  const int t = cfg.thickness;
  const Sizes sizes{t, cfg.min_length,
                    cfg.max_length > 0 ? cfg.max_length
                                       : std::max(cfg.min_length + 4,
                                                  std::min(cfg.height, cfg.width) / 2)};
  Scene scene;
  scene.seed = seed;
  for (int attempt = 0; attempt < cfg.max_attempts; ++attempt) {
    std::optional<Local> local;
    switch (pattern) {
      case Pattern::Basic: local = build_basic(sizes, cfg.sepa_min_gap, rng); break;
      case Pattern::F: local = build_shape(ShapeKind::Fshape, sizes, rng); break;
      case Pattern::E: local = build_shape(ShapeKind::Eshape, sizes, rng); break;
      case Pattern::A: local = build_shape(ShapeKind::Ashape, sizes, rng); break;
      case Pattern::C: local = build_shape(ShapeKind::Cshape, sizes, rng); break;
      case Pattern::H: local = build_shape(ShapeKind::Hshape, sizes, rng); break;
      case Pattern::P: local = build_p(sizes, rng); break;
      case Pattern::Rect: local = build_shape(ShapeKind::Rectangle, sizes, rng); break;
    }
    if (!local) continue;
    auto obj = orient(local->boxes, uniform(rng, 0, 7));
    if (obj.height > cfg.height || obj.width > cfg.width) continue;
    const int dr = uniform(rng, 0, cfg.height - obj.height);
    const int dc = uniform(rng, 0, cfg.width - obj.width);
    std::vector<LineSegment> segs;
    for (const auto& b : obj.boxes) segs.push_back(to_segment(b, dr, dc, t));
    add_object(scene, segs, local->expected, 0, t, cfg.height, cfg.width);
    scene.shape_kinds.emplace_back(to_string(pattern));
    for (std::size_t i = 0; i < segs.size(); ++i) scene.colors.push_back(uniform(rng, 0, 1));
    finish(scene, cfg.height, cfg.width);
    return scene;
  }
  throw PlacementError("gen_lwg: could not place pattern " + std::string(to_string(pattern)));
}

}  // namespace tdl
