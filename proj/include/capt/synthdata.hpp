#pragma once

#include <Eigen/Geometry>

#include <algorithm>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "capt/category.hpp"
#include "capt/geometry.hpp"
#include "capt/rng.hpp"

namespace capt {

// Ground-truth revolute joint in the sample's coordinates.
struct JointSpec {
  Line3 axis;
  double state = 0.0;
  StateLimits limits;
};

struct AugmentParams {
  Vec3 rotation = Vec3::Zero();  // Euler angles about x, y, z (applied x first)
  Vec3 translation = Vec3::Zero();
  double scale = 1.0;

  [[nodiscard]] Eigen::Matrix3d rotation_matrix() const {
    return (Eigen::AngleAxisd(rotation.z(), Vec3::UnitZ()) * Eigen::AngleAxisd(rotation.y(), Vec3::UnitY()) *
            Eigen::AngleAxisd(rotation.x(), Vec3::UnitX()))
        .toRotationMatrix();
  }
};

struct Provenance {
  std::uint64_t seed = 0;
  std::string category;
  Vec3 camera = Vec3::UnitZ();
  AugmentParams augmentation;
};

struct SampleRecord {
  std::vector<Vec3> points;
  std::vector<std::uint8_t> labels;
  std::vector<JointSpec> joints;
  int active_link_count = 0;
  int active_joint_count = 0;
  Provenance provenance;

  [[nodiscard]] std::size_t size() const { return points.size(); }
};

inline constexpr std::size_t kMinSamplePoints = 64;

namespace detail {

struct Face {
  int link;
  Vec3 center, u, v, normal;  // u, v are half-extent spanning vectors
  double area;
};

inline std::vector<Face> posed_faces(const ArticulatedInstance& inst, const std::vector<Eigen::Isometry3d>& tf) {
  std::vector<Face> faces;
  for (std::size_t l = 0; l < inst.links.size(); ++l) {
    const Eigen::Matrix3d r = tf[l].linear();
    for (const auto& b : inst.links[l]) {
      for (int axis = 0; axis < 3; ++axis) {
        const int a1 = (axis + 1) % 3, a2 = (axis + 2) % 3;
        for (int sign : {-1, 1}) {
          Vec3 c = b.center;
          c[axis] += sign * b.half[axis];
          Face f;
          f.link = static_cast<int>(l);
          f.center = tf[l] * c;
          f.u = r.col(a1) * b.half[a1];
          f.v = r.col(a2) * b.half[a2];
          f.normal = r.col(axis) * static_cast<double>(sign);
          f.area = 4.0 * b.half[a1] * b.half[a2];
          faces.push_back(f);
        }
      }
    }
  }
  return faces;
}

}  // namespace detail

// Samples a partial view: points uniform by area over the faces that face
// the camera (normal . view < 0), exactly `n` of them. Throws DegenerateError
// when the visible area would yield fewer than n/4 of n area-uniform samples.
inline SampleRecord sample_view(const ArticulatedInstance& inst, std::span<const double> states, const Vec3& camera,
                                std::size_t n, std::uint64_t seed) {
  if (n < kMinSamplePoints) throw ContractError("sample_view needs n >= 64");
  if (states.size() != inst.joints.size()) throw ContractError("one state per joint required");
  for (std::size_t j = 0; j < states.size(); ++j)
    if (!inst.joints[j].limits.contains(states[j])) throw ContractError("joint state outside its limits");
  const UnitVec3 view = UnitVec3::normalized(camera);
  const auto tf = link_transforms(inst, states);
  const auto faces = detail::posed_faces(inst, tf);

  double total = 0.0, visible = 0.0;
  std::vector<double> cumulative;
  std::vector<const detail::Face*> shown;
  for (const auto& f : faces) {
    total += f.area;
    if (f.normal.dot(view.vec()) < 0.0) {
      visible += f.area;
      cumulative.push_back(visible);
      shown.push_back(&f);
    }
  }
  if (shown.empty() || visible / total * static_cast<double>(n) < static_cast<double>(n) / 4.0)
    throw DegenerateError("view leaves too few visible points; redraw the camera");

  Rng rng(seed);
  SampleRecord rec;
  rec.points.reserve(n);
  rec.labels.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double pick = rng.uniform() * visible;
    const auto k = std::min<std::size_t>(
        static_cast<std::size_t>(std::upper_bound(cumulative.begin(), cumulative.end(), pick) - cumulative.begin()),
        shown.size() - 1);
    const auto& f = *shown[k];
    rec.points.push_back(f.center + rng.uniform(-1, 1) * f.u + rng.uniform(-1, 1) * f.v);
    rec.labels.push_back(static_cast<std::uint8_t>(f.link));
  }
  for (std::size_t j = 0; j < inst.joints.size(); ++j)
    rec.joints.push_back({posed_axis(inst, tf, j), states[j], inst.joints[j].limits});
  rec.active_link_count = static_cast<int>(inst.links.size());
  rec.active_joint_count = static_cast<int>(inst.joints.size());
  rec.provenance.seed = inst.seed;
  rec.provenance.category = inst.category;
  rec.provenance.camera = view.vec();
  return rec;
}

// Applies p -> s R p + t to points and pivots, R to directions. States are
// unchanged.
inline SampleRecord apply_augmentation(SampleRecord rec, const AugmentParams& a) {
  const Eigen::Matrix3d r = a.rotation_matrix();
  for (auto& p : rec.points) p = a.scale * (r * p) + a.translation;
  for (auto& j : rec.joints) {
    j.axis.pivot = a.scale * (r * j.axis.pivot) + a.translation;
    j.axis.direction = UnitVec3::normalized(r * j.axis.direction.vec());
  }
  rec.provenance.augmentation = a;
  return rec;
}

// Random rotation about x, y, z in [-pi, pi], translation in [-1, 1]^3 and
// scale in [0.8, 1.2].
inline AugmentParams draw_augmentation(std::uint64_t seed) {
  Rng rng(seed);
  AugmentParams a;
  const double pi = std::numbers::pi;
  a.rotation = {rng.uniform(-pi, pi), rng.uniform(-pi, pi), rng.uniform(-pi, pi)};
  a.translation = {rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
  a.scale = rng.uniform(0.8, 1.2);
  return a;
}

inline SampleRecord augment(SampleRecord rec, std::uint64_t seed) {
  return apply_augmentation(std::move(rec), draw_augmentation(seed));
}

// Per-point supervision for every joint channel up to `max_joints`.
// Layout: index [joint][point] (x3 for vectors). Channels of inactive
// joints are zero with valid = 0.
struct PointwiseTargets {
  std::size_t n = 0;
  int max_joints = 0;
  int active_joints = 0;
  std::vector<double> dir;    // max_joints * n * 3
  std::vector<double> dist;   // max_joints * n
  std::vector<double> pdir;   // max_joints * n * 3
  std::vector<double> state;  // max_joints * n
  std::vector<std::uint8_t> valid;  // max_joints * n; 0 where pdir is undefined or the joint is inactive

  [[nodiscard]] Vec3 dir_at(int j, std::size_t i) const { return Vec3(&dir[(j * n + i) * 3]); }
  [[nodiscard]] Vec3 pdir_at(int j, std::size_t i) const { return Vec3(&pdir[(j * n + i) * 3]); }
};

inline PointwiseTargets compute_pointwise_targets(const SampleRecord& rec, int max_joints) {
  if (rec.active_joint_count > max_joints || static_cast<int>(rec.joints.size()) != rec.active_joint_count)
    throw ContractError("record joint count exceeds the category maximum");
  PointwiseTargets t;
  t.n = rec.size();
  t.max_joints = max_joints;
  t.active_joints = rec.active_joint_count;
  t.dir.assign(static_cast<std::size_t>(max_joints) * t.n * 3, 0.0);
  t.pdir.assign(t.dir.size(), 0.0);
  t.dist.assign(static_cast<std::size_t>(max_joints) * t.n, 0.0);
  t.state.assign(t.dist.size(), 0.0);
  t.valid.assign(t.dist.size(), 0);
  for (int j = 0; j < rec.active_joint_count; ++j) {
    const auto& joint = rec.joints[j];
    const Vec3& u = joint.axis.direction.vec();
    // Fixed substitute for points on the axis; excluded via the mask.
    const Vec3 fallback = u.unitOrthogonal();
    for (std::size_t i = 0; i < t.n; ++i) {
      const std::size_t k = j * t.n + i;
      const Vec3& p = rec.points[i];
      const Vec3 foot = joint.axis.pivot + (p - joint.axis.pivot).dot(u) * u;
      const Vec3 toward = foot - p;
      const double d = toward.norm();
      const Vec3 pd = d < kOnAxisTolerance ? fallback : Vec3(toward / d);
      for (int c = 0; c < 3; ++c) {
        t.dir[k * 3 + c] = u[c];
        t.pdir[k * 3 + c] = pd[c];
      }
      t.dist[k] = d;
      t.state[k] = joint.state;
      t.valid[k] = d < kOnAxisTolerance ? 0 : 1;
    }
  }
  return t;
}

}  // namespace capt
