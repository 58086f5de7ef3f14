#pragma once

// Procedural articulated categories built from boxes. Each category fixes the
// kinematic tree, the joint direction rule and the zero-state pose; instances
// randomize box dimensions around the nominal values.

#include <Eigen/Geometry>

#include <array>
#include <functional>
#include <string>
#include <vector>

#include "capt/errors.hpp"
#include "capt/geometry.hpp"
#include "capt/rng.hpp"

namespace capt {

struct StateLimits {
  double lo = 0.0;
  double hi = 0.0;
  [[nodiscard]] bool contains(double s) const { return s >= lo && s <= hi; }
};

struct CategorySpec {
  std::string name;
  int max_links = 0;
  int max_joints = 0;
  std::vector<int> joint_parent;  // parent link per joint; child link is joint + 1
  std::vector<StateLimits> limits;
  std::string direction_convention;
  std::string zero_state_convention;
  // Link relabeling under reflection through x = 0 in the object frame, when
  // that reflection maps every instance onto a valid instance. Empty if not.
  std::vector<int> mirror_links;

  // Throws ConfigError if the tree is malformed.
  void validate() const {
    if (max_links < 1 || max_joints != max_links - 1)
      throw ConfigError(name + ": a tree needs exactly max_links - 1 joints");
    if (static_cast<int>(joint_parent.size()) != max_joints || static_cast<int>(limits.size()) != max_joints)
      throw ConfigError(name + ": per-joint tables have the wrong length");
    for (int j = 0; j < max_joints; ++j) {
      // A parent must be the base or an earlier child, which rules out cycles.
      if (joint_parent[j] < 0 || joint_parent[j] > j) throw ConfigError(name + ": joint parent breaks the tree order");
      if (!(limits[j].lo < limits[j].hi)) throw ConfigError(name + ": empty state range");
      if (limits[j].lo <= -3.14159265358979 || limits[j].hi >= 3.14159265358979)
        throw ConfigError(name + ": state limits must stay inside (-pi, pi)");
    }
    if (!mirror_links.empty()) {
      std::vector<int> seen(static_cast<std::size_t>(max_links), 0);
      if (static_cast<int>(mirror_links.size()) != max_links || mirror_links[0] != 0)
        throw ConfigError(name + ": mirror map must cover every link and fix the base");
      for (int l : mirror_links) {
        if (l < 0 || l >= max_links || seen[static_cast<std::size_t>(l)]++)
          throw ConfigError(name + ": mirror map is not a permutation");
      }
    }
  }
};

// Oriented box, axis-aligned in its link frame.
struct Box {
  Vec3 center = Vec3::Zero();
  Vec3 half = Vec3::Constant(0.5);
};

struct JointFrame {
  int parent = 0;
  int child = 1;
  Line3 axis;  // in the zero-state pose
  StateLimits limits;
};

struct ArticulatedInstance {
  std::string category;
  std::uint64_t seed = 0;
  std::vector<std::vector<Box>> links;
  std::vector<JointFrame> joints;
};

namespace detail {

inline double jitter(Rng& rng, double nominal) { return nominal * rng.uniform(0.7, 1.3); }

inline Box box_from_bounds(const Vec3& lo, const Vec3& hi) { return {(lo + hi) / 2, (hi - lo) / 2}; }

inline UnitVec3 axis_dir(double x, double y, double z) { return UnitVec3::checked(Vec3(x, y, z)); }

// Base slab with a thinner lid hinged on its back edge. Zero state: lid
// coplanar with the base, extending backwards; positive state lifts the lid.
inline ArticulatedInstance build_laptop(Rng& rng) {
  const double w = jitter(rng, 1.0), d = jitter(rng, 0.7), tb = jitter(rng, 0.05);
  const double dl = d * rng.uniform(0.85, 1.0), tl = tb * rng.uniform(0.3, 0.5);
  ArticulatedInstance inst;
  inst.links.push_back({box_from_bounds({-w / 2, -d / 2, 0}, {w / 2, d / 2, tb})});
  inst.links.push_back({box_from_bounds({-w / 2, d / 2, tb - tl}, {w / 2, d / 2 + dl, tb})});
  inst.joints.push_back({0, 1, {axis_dir(1, 0, 0), Vec3(0, d / 2, tb)}, {}});
  return inst;
}

// Cabinet body with a front door hinged on its bottom edge, dropping forward.
inline ArticulatedInstance build_oven(Rng& rng) {
  const double w = jitter(rng, 0.8), d = jitter(rng, 0.7), h = jitter(rng, 0.6), t = jitter(rng, 0.04);
  const double m = 0.03 * h;
  ArticulatedInstance inst;
  inst.links.push_back({box_from_bounds({-w / 2, -d / 2, 0}, {w / 2, d / 2, h})});
  inst.links.push_back({box_from_bounds({-w / 2 + m, -d / 2 - t, m}, {w / 2 - m, -d / 2, h - m})});
  inst.joints.push_back({0, 1, {axis_dir(1, 0, 0), Vec3(0, -d / 2, m)}, {}});
  return inst;
}

// Front-loader: square door on the front face hinged on a vertical edge.
inline ArticulatedInstance build_washing_machine(Rng& rng) {
  const double w = jitter(rng, 0.6), d = jitter(rng, 0.6), h = jitter(rng, 0.85), t = jitter(rng, 0.05);
  const double s = std::min(w, h) * rng.uniform(0.55, 0.7);
  const double zc = h * rng.uniform(0.45, 0.6);
  ArticulatedInstance inst;
  inst.links.push_back({box_from_bounds({-w / 2, -d / 2, 0}, {w / 2, d / 2, h})});
  inst.links.push_back({box_from_bounds({-s / 2, -d / 2 - t, zc - s / 2}, {s / 2, -d / 2, zc + s / 2})});
  inst.joints.push_back({0, 1, {axis_dir(0, 0, -1), Vec3(-s / 2, -d / 2, zc)}, {}});
  return inst;
}

// Front frame with two temples hinged at its ends. Zero state: temples
// perpendicular to the frame; positive state folds each temple inwards.
inline ArticulatedInstance build_eyeglasses(Rng& rng) {
  const double w = jitter(rng, 1.0), fh = jitter(rng, 0.3), ft = jitter(rng, 0.04);
  const double len = jitter(rng, 0.9), at = jitter(rng, 0.03), ah = jitter(rng, 0.04);
  const double z = fh * rng.uniform(0.15, 0.35);
  ArticulatedInstance inst;
  inst.links.push_back({box_from_bounds({-w / 2, 0, -fh / 2}, {w / 2, ft, fh / 2})});
  inst.links.push_back({box_from_bounds({-w / 2, ft, z - ah / 2}, {-w / 2 + at, ft + len, z + ah / 2})});
  inst.links.push_back({box_from_bounds({w / 2 - at, ft, z - ah / 2}, {w / 2, ft + len, z + ah / 2})});
  inst.joints.push_back({0, 1, {axis_dir(0, 0, -1), Vec3(-w / 2, ft, z)}, {}});
  inst.joints.push_back({0, 2, {axis_dir(0, 0, 1), Vec3(w / 2, ft, z)}, {}});
  return inst;
}

// Central hub with two blades sharing the screw axis. Zero state: closed.
inline ArticulatedInstance build_scissors(Rng& rng) {
  const double hub = jitter(rng, 0.06), bw = jitter(rng, 0.08), bt = jitter(rng, 0.02);
  const double front = jitter(rng, 0.6), back = jitter(rng, 0.35);
  ArticulatedInstance inst;
  inst.links.push_back({box_from_bounds({-hub, -hub, -bt * 1.5}, {hub, hub, bt * 1.5})});
  inst.links.push_back({box_from_bounds({-bw / 2, -back, 0}, {bw / 2, front, bt})});
  inst.links.push_back({box_from_bounds({-bw / 2, -back, -bt}, {bw / 2, front, 0})});
  inst.joints.push_back({0, 1, {axis_dir(0, 0, 1), Vec3(0, 0, 0)}, {}});
  inst.joints.push_back({0, 2, {axis_dir(0, 0, -1), Vec3(0, 0, 0)}, {}});
  return inst;
}

}  // namespace detail

inline const std::vector<std::string>& category_names() {
  static const std::vector<std::string> names = {"laptop", "oven", "washing_machine", "eyeglasses", "scissors"};
  return names;
}

inline CategorySpec make_category(const std::string& name) {
  CategorySpec c;
  c.name = name;
  const std::string right_handed = "positive state rotates the child right-handedly about the joint direction";
  c.direction_convention = right_handed;
  if (name == "laptop") {
    c.max_links = 2;
    c.joint_parent = {0};
    c.limits = {{0.0, 2.4}};
    c.zero_state_convention = "lid coplanar with the base";
    c.mirror_links = {0, 1};
  } else if (name == "oven") {
    c.max_links = 2;
    c.joint_parent = {0};
    c.limits = {{0.0, 1.5}};
    c.zero_state_convention = "door closed";
    c.mirror_links = {0, 1};
  } else if (name == "washing_machine") {
    c.max_links = 2;
    c.joint_parent = {0};
    c.limits = {{0.0, 1.6}};
    c.zero_state_convention = "door closed";
  } else if (name == "eyeglasses") {
    c.max_links = 3;
    c.joint_parent = {0, 0};
    c.limits = {{0.0, 1.3}, {0.0, 1.3}};
    c.zero_state_convention = "temples perpendicular to the frame";
    c.mirror_links = {0, 2, 1};
  } else if (name == "scissors") {
    c.max_links = 3;
    c.joint_parent = {0, 0};
    c.limits = {{0.0, 0.8}, {0.0, 0.8}};
    c.zero_state_convention = "blades closed";
  } else {
    throw ConfigError("unknown category '" + name + "'");
  }
  c.max_joints = c.max_links - 1;
  c.validate();
  return c;
}

// Deterministic per seed: same (category, seed) gives identical geometry.
inline ArticulatedInstance build_instance(const CategorySpec& category, std::uint64_t seed) {
  category.validate();
  Rng rng(seed);
  ArticulatedInstance inst;
  if (category.name == "laptop") inst = detail::build_laptop(rng);
  else if (category.name == "oven") inst = detail::build_oven(rng);
  else if (category.name == "washing_machine") inst = detail::build_washing_machine(rng);
  else if (category.name == "eyeglasses") inst = detail::build_eyeglasses(rng);
  else if (category.name == "scissors") inst = detail::build_scissors(rng);
  else throw ConfigError("unknown category '" + category.name + "'");
  inst.category = category.name;
  inst.seed = seed;
  for (std::size_t j = 0; j < inst.joints.size(); ++j) {
    inst.joints[j].parent = category.joint_parent[j];
    inst.joints[j].limits = category.limits[j];
  }
  return inst;
}

// Rigid transform of every link for the given joint states.
inline std::vector<Eigen::Isometry3d> link_transforms(const ArticulatedInstance& inst, std::span<const double> states) {
  if (states.size() != inst.joints.size()) throw ContractError("one state per joint required");
  std::vector<Eigen::Isometry3d> t(inst.links.size(), Eigen::Isometry3d::Identity());
  for (std::size_t j = 0; j < inst.joints.size(); ++j) {
    const auto& jf = inst.joints[j];
    Eigen::Isometry3d local = Eigen::Isometry3d::Identity();
    local.translate(jf.axis.pivot);
    local.rotate(Eigen::AngleAxisd(states[j], jf.axis.direction.vec()));
    local.translate(-jf.axis.pivot);
    t[jf.child] = t[jf.parent] * local;
  }
  return t;
}

// Joint axis in world coordinates for the given pose.
inline Line3 posed_axis(const ArticulatedInstance& inst, const std::vector<Eigen::Isometry3d>& transforms, std::size_t j) {
  const auto& jf = inst.joints.at(j);
  const auto& tp = transforms[jf.parent];
  return {UnitVec3::normalized(tp.linear() * jf.axis.direction.vec()), tp * jf.axis.pivot};
}

}  // namespace capt
