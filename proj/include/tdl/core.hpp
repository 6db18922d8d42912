#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace tdl {

/// Row-major dense field. Images, masks and reconstructions all use this
/// layout so that `field(row, col)` matches raster order on disk.
template <typename Scalar>
using GridT = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Intensities in [0,1].
using Grid = GridT<double>;
/// Pre-activation player mask; unbounded.
using LogitGrid = GridT<double>;
/// Unconstrained real field (e.g. an unclamped reconstruction).
using Field = GridT<double>;
/// Coefficient-wise view type with the same layout as Grid.
using ArrayGrid = Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

inline constexpr double kDefaultThreshold = 0.5;

struct ShapeMismatch : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

template <typename A, typename B>
void require_same_shape(const Eigen::DenseBase<A>& a, const Eigen::DenseBase<B>& b,
                        const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeMismatch(std::string(what) + ": dimension mismatch (" +
                        std::to_string(a.rows()) + "x" + std::to_string(a.cols()) + " vs " +
                        std::to_string(b.rows()) + "x" + std::to_string(b.cols()) + ")");
  }
}

/// True when the field is non-empty and every value lies in [0,1].
template <typename Derived>
bool is_valid_grid(const Eigen::DenseBase<Derived>& g) {
  if (g.rows() < 1 || g.cols() < 1) return false;
  return ((g.derived().array() >= 0.0) && (g.derived().array() <= 1.0)).all();
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

template <typename Derived>
GridT<typename Derived::Scalar> activate(const Eigen::DenseBase<Derived>& logits) {
  return logits.derived().unaryExpr([](typename Derived::Scalar v) { return sigmoid(v); });
}

/// Logistic soft step centred on `threshold`.
inline double soft_step(double v, double threshold, double steepness) {
  return sigmoid(steepness * (v - threshold));
}

inline double soft_step_derivative(double v, double threshold, double steepness) {
  const double s = soft_step(v, threshold, steepness);
  return steepness * s * (1.0 - s);
}

template <typename Derived>
GridT<double> soft_step(const Eigen::DenseBase<Derived>& v, double threshold, double steepness) {
  return v.derived().unaryExpr(
      [=](double x) { return soft_step(x, threshold, steepness); });
}

template <typename Derived>
double mass(const Eigen::DenseBase<Derived>& g) {
  return g.derived().sum();
}

/// SplitMix64 finalizer; derives independent stream seeds from a base seed.
inline std::uint64_t mix_seed(std::uint64_t base, std::uint64_t salt) {
  std::uint64_t z = base + 0x9e3779b97f4a7c15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Intersection over union of the two fields binarized at `threshold`.
/// Two empty masks have IoU 1.
double iou(const Grid& a, const Grid& b, double threshold = kDefaultThreshold);

/// Pixelwise sum of the parts, unclamped.
Field reconstruct(std::span<const Grid> parts);

Grid binarize(const Grid& g, double threshold = kDefaultThreshold);

// 8-bit binary PGM (P5). 255 maps to 1.0.
void write_pgm(const std::filesystem::path& path, const Grid& g);
Grid read_pgm(const std::filesystem::path& path);
std::string encode_pgm(const Grid& g);
Grid decode_pgm(const std::string& bytes);

}  // namespace tdl
