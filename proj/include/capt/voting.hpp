#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "capt/geometry.hpp"
#include "capt/model.hpp"

namespace capt {

struct VotedJoint {
  UnitVec3 direction;
  Vec3 pivot = Vec3::Zero();
  double state = 0.0;
  std::size_t participant_count = 0;
  bool fallback = false;  // fine vote had no participants; coarse result kept

  [[nodiscard]] Line3 axis() const { return {direction, pivot}; }
};

struct VotingConfig {
  double omega0 = 0.5;
  double omega1 = 1.5;

  void validate() const {
    if (!(omega0 >= 0.0) || !(omega0 < omega1) || std::isnan(omega1))
      throw ConfigError("voting needs 0 <= omega0 < omega1");
  }
};

// Per-point fields of one joint channel, all of length n.
struct JointFields {
  std::vector<Vec3> points, dir, pdir;
  std::vector<double> dist, state;

  [[nodiscard]] std::size_t size() const { return points.size(); }
  [[nodiscard]] Vec3 pivot_at(std::size_t i) const { return points[i] + dist[i] * pdir[i]; }
};

template <class T>
JointFields joint_fields(const PerPointPrediction<T>& pred, std::size_t j) {
  JointFields f;
  const std::size_t n = pred.size();
  f.points.resize(n);
  f.dir.resize(n);
  f.pdir.resize(n);
  f.dist.resize(n);
  f.state.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (int c = 0; c < 3; ++c) {
      f.points[i][c] = pred.points.at(i, c);
      f.dir[i][c] = pred.dir.at(j).at(i, c);
      f.pdir[i][c] = pred.pdir.at(j).at(i, c);
    }
    f.dist[i] = pred.dist.at(j).at(i);
    f.state[i] = pred.state.at(j).at(i);
  }
  return f;
}

namespace detail {

inline VotedJoint mean_vote(const JointFields& f, const std::vector<std::size_t>& idx) {
  Vec3 dir = Vec3::Zero(), pivot = Vec3::Zero();
  double state = 0.0;
  for (auto i : idx) {
    dir += f.dir[i];
    pivot += f.pivot_at(i);
    state += f.state[i];
  }
  const double k = static_cast<double>(idx.size());
  dir /= k;
  if (dir.norm() < 1e-6) throw DegenerateError("voted direction cancels out");
  VotedJoint v;
  v.direction = UnitVec3::normalized(dir);
  v.pivot = pivot / k;
  v.state = state / k;
  v.participant_count = idx.size();
  return v;
}

}  // namespace detail

// Equal-weight mean over all points.
inline VotedJoint coarse_vote(const JointFields& f) {
  if (f.size() == 0) throw ContractError("coarse_vote on an empty cloud");
  std::vector<std::size_t> all(f.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return detail::mean_vote(f, all);
}

// Mean over points whose distance to the coarse axis lies in
// [omega0, omega1] times the (lower) median of those distances.
inline VotedJoint fine_vote(const JointFields& f, const VotedJoint& coarse, const VotingConfig& cfg) {
  cfg.validate();
  const std::size_t n = f.size();
  std::vector<double> d(n);
  for (std::size_t i = 0; i < n; ++i) d[i] = point_to_line_distance(f.points[i], coarse.pivot, coarse.direction);
  std::vector<double> sorted = d;
  const auto mid = sorted.begin() + static_cast<std::ptrdiff_t>((n - 1) / 2);
  std::nth_element(sorted.begin(), mid, sorted.end());
  const double m = *mid;
  const double lo = cfg.omega0 * m;
  const double hi = std::isinf(cfg.omega1) ? std::numeric_limits<double>::infinity() : cfg.omega1 * m;
  std::vector<std::size_t> kept;
  for (std::size_t i = 0; i < n; ++i)
    if (d[i] >= lo && d[i] <= hi) kept.push_back(i);
  if (kept.empty()) {
    VotedJoint v = coarse;
    v.fallback = true;
    return v;
  }
  return detail::mean_vote(f, kept);
}

struct VoteResult {
  std::vector<VotedJoint> coarse, fine;
};

inline VoteResult double_vote(const std::vector<JointFields>& joints, const VotingConfig& cfg) {
  cfg.validate();
  VoteResult r;
  for (const auto& f : joints) {
    r.coarse.push_back(coarse_vote(f));
    r.fine.push_back(fine_vote(f, r.coarse.back(), cfg));
  }
  return r;
}

template <class T>
VoteResult double_vote(const PerPointPrediction<T>& pred, const VotingConfig& cfg, std::size_t active_joints) {
  std::vector<JointFields> fields;
  for (std::size_t j = 0; j < active_joints; ++j) fields.push_back(joint_fields(pred, j));
  return double_vote(fields, cfg);
}

}  // namespace capt
