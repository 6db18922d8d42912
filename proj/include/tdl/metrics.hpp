#pragma once

#include "tdl/core.hpp"
#include "tdl/synthworld.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace tdl {

using Point = Eigen::Vector2d;  // (x, y) = (col, row)
using Polyline = std::vector<Point>;

double perimeter(const Polyline& closed);
/// Signed shoelace area; positive for the outer contours traced below.
double signed_area(const Polyline& closed);

/// Outer boundary of one 8-connected component.
struct Contour {
  /// Crack-lattice corners, closed (front == back). The area they enclose is
  /// the pixel count plus any holes.
  Polyline cracks;
  /// Centres of the boundary pixels in tracing order, closed.
  Polyline centres;

  double area() const { return signed_area(cracks); }
};

/// Labels of the 8-connected components of `mask > threshold`; -1 is background.
struct Components {
  Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> labels;
  std::vector<int> sizes;
  int count() const { return static_cast<int>(sizes.size()); }
};
Components connected_components(const Grid& mask, double threshold = kDefaultThreshold);

/// Traces the outer boundary of component `label`, keeping it on the right.
Contour trace_contour(const Components& comps, int label);

/// Ramer-Douglas-Peucker. Keeps both endpoints and every vertex whose
/// deviation reaches epsilon.
Polyline rdp_simplify(const Polyline& line, double epsilon);
/// RDP on a closed polyline, split at the vertex farthest from the start.
Polyline rdp_simplify_closed(const Polyline& closed, double epsilon);
/// Convex hull, closed, counter-clockwise in (x, y).
Polyline convex_hull(std::span<const Point> points);

enum class Smoothing { Rdp, Hull };

struct ShapeSettings {
  Smoothing smoothing = Smoothing::Rdp;
  double epsilon = 1.0;
  double threshold = kDefaultThreshold;
};

struct ShapeScoreBreakdown {
  double r_cont = 0.0;
  double r_solid = 0.0;
  double r_smooth = 0.0;
  double score = 0.0;
  int segment_count = 0;
  bool empty = true;
};

ShapeScoreBreakdown shape_score(const Grid& part, const ShapeSettings& cfg = {});

/// Mean score over the non-empty parts; 0 when there are none.
double mean_shape_score(std::span<const std::vector<Grid>> samples, const ShapeSettings& cfg = {});

// ---------------------------------------------------------------------------
// Clustering information gain

struct PcaReducer {
  Vector mean;
  Matrix components;  // d x D, rows are unit principal directions

  static PcaReducer fit(const Matrix& points, int d);
  Matrix transform(const Matrix& points) const;
};

struct CigSettings {
  int k = 10;
  int d_pca = 32;
  /// Random-baseline parts per sample.
  int n_players = 4;
  /// Parts with less mass are not counted.
  double empty_mass = 1e-6;
  int kmeans_iters = 100;
  std::uint64_t seed = 0;
};

/// Flattened non-empty parts, one row each, with their sample index.
struct PartMatrix {
  Matrix rows;
  std::vector<int> sample;
};
PartMatrix flatten_parts(std::span<const std::vector<Grid>> samples, double empty_mass);

/// Mean over samples of the mean distance from each part to its nearest
/// K-Means centroid, in the reduced space.
double mce(std::span<const std::vector<Grid>> samples, const PcaReducer& reducer,
           const CigSettings& cfg);
/// Same with a reducer fit on the samples themselves.
double mce(std::span<const std::vector<Grid>> samples, const CigSettings& cfg);

/// sigmoid(z) * input with z ~ N(0,1) per pixel, `n_players` parts. Seeded
/// from the image content, so results do not depend on sample order.
std::vector<Grid> random_parts(const Grid& input, int n_players, std::uint64_t seed);

struct CigResult {
  double cig = 0.0;
  double mce_model = 0.0;
  double mce_rand = 0.0;
};

/// 1 - MCE_model / MCE_rand, clamped to [0, 1]; one PCA reducer fit on the
/// union of model and random parts.
CigResult cig(std::span<const std::vector<Grid>> model_parts, std::span<const Grid> inputs,
              const CigSettings& cfg);

// ---------------------------------------------------------------------------
// Grounding

/// Minimum-cost assignment of rows to columns of a rectangular cost matrix.
/// Returns the column of each row, or -1 when there are more rows than columns.
std::vector<int> hungarian(const Matrix& cost);

struct Alignment {
  /// Predicted index for each ground-truth part; -1 when unmatched.
  std::vector<int> gt_to_pred;
  std::vector<double> ious;
  double mean_iou = 0.0;
};

/// One-to-one matching maximizing total IoU; unmatched ground truth scores 0.
Alignment iou_align(std::span<const Grid> pred, std::span<const Grid> gt,
                    double threshold = kDefaultThreshold);

struct RelationHits {
  int correct = 0;
  int total = 0;
};

/// Ground-truth relations whose matched predicted pair carries the same kind.
/// A relation touching an unmatched part counts as wrong.
RelationHits relation_hits(std::span<const Relation> pred, std::span<const Relation> gt,
                           std::span<const int> gt_to_pred);
double relation_accuracy(std::span<const Relation> pred, std::span<const Relation> gt,
                         std::span<const int> gt_to_pred);

}  // namespace tdl
