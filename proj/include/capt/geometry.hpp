#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "capt/errors.hpp"
#include "capt/ops.hpp"

namespace capt {

using Vec3 = Eigen::Vector3d;

// Distance below which a point is treated as lying on an axis.
inline constexpr double kOnAxisTolerance = 1e-9;
inline constexpr double kUnitTolerance = 1e-9;

// Direction vector with a checked unit norm.
class UnitVec3 {
 public:
  UnitVec3() : v_(0.0, 0.0, 1.0) {}

  // Throws ContractError unless |v| is within kUnitTolerance of 1.
  static UnitVec3 checked(const Vec3& v) {
    if (std::abs(v.norm() - 1.0) > kUnitTolerance) throw ContractError("direction is not unit-norm");
    return UnitVec3(v);
  }

  // Throws DegenerateError for a (near) zero vector.
  static UnitVec3 normalized(const Vec3& v) {
    const double n = v.norm();
    if (!(n > 1e-12)) throw DegenerateError("cannot normalize a zero vector");
    return UnitVec3(v / n);
  }

  [[nodiscard]] const Vec3& vec() const { return v_; }
  [[nodiscard]] double x() const { return v_.x(); }
  [[nodiscard]] double y() const { return v_.y(); }
  [[nodiscard]] double z() const { return v_.z(); }
  operator const Vec3&() const { return v_; }  // NOLINT(google-explicit-constructor)
  UnitVec3 operator-() const { return UnitVec3(-v_); }

 private:
  explicit UnitVec3(const Vec3& v) : v_(v) {}
  Vec3 v_;
};

// Infinite line through `pivot` along `direction`.
struct Line3 {
  UnitVec3 direction;
  Vec3 pivot = Vec3::Zero();

  [[nodiscard]] Vec3 point_at(double t) const { return pivot + t * direction.vec(); }
};

// Rotation matrix for angle `alpha` about unit axis `u` (Rodrigues).
inline Eigen::Matrix3d axis_angle_matrix(const Vec3& u, double alpha) {
  Eigen::Matrix3d k;
  k << 0.0, -u.z(), u.y(), u.z(), 0.0, -u.x(), -u.y(), u.x(), 0.0;
  return Eigen::Matrix3d::Identity() + std::sin(alpha) * k + (1.0 - std::cos(alpha)) * (k * k);
}

inline Vec3 rodrigues_rotate(const Vec3& p, const Line3& axis, double alpha) {
  const Vec3& u = axis.direction.vec();
  const Vec3 v = p - axis.pivot;
  const double c = std::cos(alpha), s = std::sin(alpha);
  return axis.pivot + v * c + u.cross(v) * s + u * (u.dot(v) * (1.0 - c));
}

// Rigid rotation of every point about `axis` by `alpha` radians.
inline std::vector<Vec3> rodrigues_rotate(std::span<const Vec3> points, const Line3& axis, double alpha) {
  if (!std::isfinite(alpha)) throw ContractError("rotation angle must be finite");
  UnitVec3::checked(axis.direction.vec());
  std::vector<Vec3> out;
  out.reserve(points.size());
  for (const auto& p : points) out.push_back(rodrigues_rotate(p, axis, alpha));
  return out;
}

// |((p - q) . u) u - (p - q)|
inline double point_to_line_distance(const Vec3& p, const Vec3& q, const UnitVec3& u) {
  const Vec3 d = p - q;
  return (d.dot(u.vec()) * u.vec() - d).norm();
}

inline double cosine_similarity(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size()) throw DimensionError("cosine_similarity: length mismatch");
  double dot = 0, nu = 0, nv = 0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    dot += u[i] * v[i];
    nu += u[i] * u[i];
    nv += v[i] * v[i];
  }
  if (nu == 0.0 || nv == 0.0) throw DegenerateError("cosine_similarity of a zero vector");
  return std::clamp(dot / (std::sqrt(nu) * std::sqrt(nv)), -1.0, 1.0);
}

inline double cosine_similarity(const Vec3& u, const Vec3& v) {
  return cosine_similarity(std::span<const double>(u.data(), 3), std::span<const double>(v.data(), 3));
}

struct LineProjection {
  Vec3 foot;
  UnitVec3 pdir;  // from the point toward the foot, perpendicular to the axis
  double distance;
};

// Throws DegenerateError when p lies within kOnAxisTolerance of the axis,
// where the perpendicular direction is undefined.
inline LineProjection project_point_to_line(const Vec3& p, const Line3& axis) {
  const Vec3& u = axis.direction.vec();
  const Vec3 foot = axis.pivot + (p - axis.pivot).dot(u) * u;
  const Vec3 toward = foot - p;
  const double dist = toward.norm();
  if (dist < kOnAxisTolerance) throw DegenerateError("point lies on the axis; perpendicular direction undefined");
  return {foot, UnitVec3::normalized(toward), dist};
}

// Minimum distance between two infinite lines.
inline double line_to_line_distance(const Line3& a, const Line3& b) {
  const Vec3& ua = a.direction.vec();
  const Vec3& ub = b.direction.vec();
  const Vec3 w = b.pivot - a.pivot;
  const Vec3 n = ua.cross(ub);
  const double nn = n.norm();
  // Near-parallel lines: the cross-product formula loses precision, use the
  // perpendicular offset of b's pivot from a instead.
  if (nn < 1e-9) return point_to_line_distance(b.pivot, a.pivot, a.direction);
  return std::abs(w.dot(n)) / nn;
}

// Angle between two directed vectors in degrees. atan2 keeps full precision
// near 0 and 180 where acos of the cosine does not.
inline double angle_degrees(const Vec3& a, const Vec3& b) {
  if (a.norm() == 0.0 || b.norm() == 0.0) throw DegenerateError("angle with a zero vector");
  return std::atan2(a.cross(b).norm(), a.dot(b)) * 180.0 / 3.14159265358979323846;
}

namespace ad {

// Differentiable Rodrigues rotation of constant points (m x 3) about the axis
// given by `dir` (1 x 3, unit) through `pivot` (1 x 3). Gradients flow to
// `dir` and `pivot`; the derivative with respect to `dir` is taken with the
// formula's unit-norm constraint left to upstream normalization.
template <class T>
Tensor<T> rodrigues_rotate(const Tensor<T>& points, const Tensor<T>& dir, const Tensor<T>& pivot, T alpha) {
  if (points.rank() != 2 || points.dim(1) != 3) throw DimensionError("rodrigues_rotate: points must be m x 3");
  if (dir.numel() != 3 || pivot.numel() != 3) throw DimensionError("rodrigues_rotate: axis parameters must have 3 values");
  if (!std::isfinite(alpha)) throw ContractError("rotation angle must be finite");
  const T tol = std::is_same_v<T, float> ? T(1e-5) : T(kUnitTolerance);
  const auto u = dir.values();
  const auto q = pivot.values();
  const T un = std::sqrt(u[0] * u[0] + u[1] * u[1] + u[2] * u[2]);
  if (std::abs(un - T(1)) > tol) throw ContractError("rodrigues_rotate: direction is not unit-norm");
  const T c = std::cos(alpha), s = std::sin(alpha);
  const std::size_t m = points.dim(0);
  std::vector<T> out(m * 3);
  const auto pv = points.values();
  for (std::size_t i = 0; i < m; ++i) {
    const T v0 = pv[3 * i] - q[0], v1 = pv[3 * i + 1] - q[1], v2 = pv[3 * i + 2] - q[2];
    const T ud = u[0] * v0 + u[1] * v1 + u[2] * v2;
    const T cx = u[1] * v2 - u[2] * v1, cy = u[2] * v0 - u[0] * v2, cz = u[0] * v1 - u[1] * v0;
    out[3 * i] = q[0] + v0 * c + cx * s + u[0] * ud * (T(1) - c);
    out[3 * i + 1] = q[1] + v1 * c + cy * s + u[1] * ud * (T(1) - c);
    out[3 * i + 2] = q[2] + v2 * c + cz * s + u[2] * ud * (T(1) - c);
  }
  auto pn = points.node();
  auto dn = dir.node();
  auto qn = pivot.node();
  return detail::make_result<T>(
      "rodrigues_rotate", {m, 3}, std::move(out), {pn, dn, qn}, [pn, dn, qn, m, c, s](Node<T>& o) {
        const auto& u = dn->value;
        const auto& q = qn->value;
        T gu[3] = {0, 0, 0}, gq[3] = {0, 0, 0};
        T* gp = pn->requires_grad ? pn->ensure_grad().data() : nullptr;
        for (std::size_t i = 0; i < m; ++i) {
          const T* g = o.grad.data() + 3 * i;
          const T v0 = pn->value[3 * i] - q[0], v1 = pn->value[3 * i + 1] - q[1], v2 = pn->value[3 * i + 2] - q[2];
          const T ud = u[0] * v0 + u[1] * v1 + u[2] * v2;
          const T ug = u[0] * g[0] + u[1] * g[1] + u[2] * g[2];
          // R^T g = c g - s (u x g) + (1 - c) u (u . g)
          const T uxg0 = u[1] * g[2] - u[2] * g[1], uxg1 = u[2] * g[0] - u[0] * g[2], uxg2 = u[0] * g[1] - u[1] * g[0];
          const T rtg0 = c * g[0] - s * uxg0 + (T(1) - c) * u[0] * ug;
          const T rtg1 = c * g[1] - s * uxg1 + (T(1) - c) * u[1] * ug;
          const T rtg2 = c * g[2] - s * uxg2 + (T(1) - c) * u[2] * ug;
          if (gp) {
            gp[3 * i] += rtg0;
            gp[3 * i + 1] += rtg1;
            gp[3 * i + 2] += rtg2;
          }
          // d/dq: (I - R)^T g
          gq[0] += g[0] - rtg0;
          gq[1] += g[1] - rtg1;
          gq[2] += g[2] - rtg2;
          // d/du: s (v x g) + (1 - c) ((u . v) g + v (u . g))
          const T vxg0 = v1 * g[2] - v2 * g[1], vxg1 = v2 * g[0] - v0 * g[2], vxg2 = v0 * g[1] - v1 * g[0];
          gu[0] += s * vxg0 + (T(1) - c) * (ud * g[0] + v0 * ug);
          gu[1] += s * vxg1 + (T(1) - c) * (ud * g[1] + v1 * ug);
          gu[2] += s * vxg2 + (T(1) - c) * (ud * g[2] + v2 * ug);
        }
        if (dn->requires_grad) {
          auto& g = dn->ensure_grad();
          for (int k = 0; k < 3; ++k) g[k] += gu[k];
        }
        if (qn->requires_grad) {
          auto& g = qn->ensure_grad();
          for (int k = 0; k < 3; ++k) g[k] += gq[k];
        }
      });
}

}  // namespace ad

}  // namespace capt
