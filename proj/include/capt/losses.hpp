#pragma once

#include <array>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "capt/geometry.hpp"
#include "capt/model.hpp"
#include "capt/ops.hpp"
#include "capt/synthdata.hpp"

namespace capt {

inline constexpr std::array<const char*, 6> kLossTermNames = {"seg", "dir", "pdir", "dist", "state", "motion"};

struct LossWeights {
  double seg = 1, dir = 1, pdir = 1, dist = 1, state = 1, motion = 0.1;

  [[nodiscard]] std::array<double, 6> as_array() const { return {seg, dir, pdir, dist, state, motion}; }
  void validate() const {
    for (double w : as_array())
      if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("loss weights must be finite and nonnegative");
  }
};

struct MotionLossConfig {
  double alpha = std::numbers::pi / 2;
  void validate() const {
    if (alpha == 0.0 || !std::isfinite(alpha)) throw ConfigError("motion loss angle must be finite and nonzero");
  }
};

// Which points supervise a joint's dir/pdir/dist/state channels.
enum class JointPointSet { all, child_link };

namespace losses {

using ad::Tensor;

namespace detail {

// Column of per-point weights that sum to one over the selected points.
template <class T>
Tensor<T> mean_weights(const std::vector<std::uint8_t>& mask, std::size_t& count) {
  count = 0;
  for (auto m : mask) count += m ? 1 : 0;
  std::vector<T> w(mask.size(), T(0));
  if (count > 0)
    for (std::size_t i = 0; i < mask.size(); ++i) w[i] = mask[i] ? T(1) / static_cast<T>(count) : T(0);
  return Tensor<T>({mask.size(), 1}, std::move(w));
}

template <class T>
Tensor<T> mask_mean(const Tensor<T>& per_point, const std::vector<std::uint8_t>& mask, std::size_t& count) {
  if (mask.size() != per_point.rows()) throw DimensionError("loss mask length differs from point count");
  return ad::sum(ad::mul(per_point, mean_weights<T>(mask, count)));
}

// Row-wise Euclidean norm whose gradient at a zero row is taken as zero.
template <class T>
Tensor<T> row_distance(const Tensor<T>& a) {
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<T> out(r);
  const auto av = a.values();
  for (std::size_t i = 0; i < r; ++i) {
    T s = 0;
    for (std::size_t j = 0; j < c; ++j) s += av[i * c + j] * av[i * c + j];
    out[i] = std::sqrt(s);
  }
  auto an = a.node();
  return ad::detail::make_result<T>("row_distance", {r, 1}, std::move(out), {an}, [an, r, c](ad::Node<T>& o) {
    auto& ga = an->ensure_grad();
    for (std::size_t i = 0; i < r; ++i) {
      if (o.value[i] == T(0)) continue;
      const T g = o.grad[i] / o.value[i];
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g * an->value[i * c + j];
    }
  });
}

template <class T>
Tensor<T> constant_rows(const std::vector<Vec3>& rows) {
  std::vector<T> v(rows.size() * 3);
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (int c = 0; c < 3; ++c) v[i * 3 + c] = static_cast<T>(rows[i][c]);
  return Tensor<T>({rows.size(), 3}, std::move(v));
}

template <class T>
Tensor<T> column(std::span<const double> values) {
  std::vector<T> v(values.begin(), values.end());
  return Tensor<T>({values.size(), 1}, std::move(v));
}

template <class T>
Tensor<T> vec_rows(std::span<const double> values) {
  std::vector<T> v(values.begin(), values.end());
  return Tensor<T>({values.size() / 3, 3}, std::move(v));
}

}  // namespace detail

// Mean per-point cross-entropy of softmaxed logits.
template <class T>
Tensor<T> seg_loss(const Tensor<T>& logits, const std::vector<std::size_t>& labels) {
  if (labels.size() != logits.rows()) throw DimensionError("seg_loss: one label per point required");
  for (auto l : labels)
    if (l >= logits.cols()) throw ContractError("seg_loss: label " + std::to_string(l) + " out of range");
  return ad::scale(ad::mean(ad::pick(ad::log_softmax(logits, 1), labels)), T(-1));
}

// Mean of 1 - cos(pred, gt) over masked points. Rows are n x 3.
template <class T>
Tensor<T> cosine_loss(const Tensor<T>& pred, const Tensor<T>& gt, const std::vector<std::uint8_t>& mask,
                      std::size_t& count) {
  if (pred.shape() != gt.shape() || pred.cols() != 3) throw DimensionError("cosine loss: pred and gt must be n x 3");
  for (std::size_t i = 0; i < pred.rows(); ++i) {
    if (!mask[i]) continue;
    double pn = 0, gn = 0;
    for (int c = 0; c < 3; ++c) {
      pn += double(pred.at(i, c)) * pred.at(i, c);
      gn += double(gt.at(i, c)) * gt.at(i, c);
    }
    if (pn == 0.0 || gn == 0.0) throw DegenerateError("cosine loss on a zero vector");
  }
  const Tensor<T> cos = ad::div(ad::sum(ad::mul(pred, gt), 1), ad::mul(ad::l2norm(pred, 1), ad::l2norm(gt, 1)));
  return detail::mask_mean(ad::scale(ad::add_scalar(cos, T(-1)), T(-1)), mask, count);
}

template <class T>
Tensor<T> dir_loss(const Tensor<T>& pred, const Tensor<T>& gt, const std::vector<std::uint8_t>& mask) {
  std::size_t count = 0;
  return cosine_loss(pred, gt, mask, count);
}

template <class T>
Tensor<T> pdir_loss(const Tensor<T>& pred, const Tensor<T>& gt, const std::vector<std::uint8_t>& mask) {
  return dir_loss(pred, gt, mask);
}

template <class T>
Tensor<T> dist_loss(const Tensor<T>& pred, const Tensor<T>& gt, const std::vector<std::uint8_t>& mask) {
  std::size_t count = 0;
  return detail::mask_mean(ad::square(ad::sub(pred, gt)), mask, count);
}

template <class T>
Tensor<T> state_loss(const Tensor<T>& pred, const Tensor<T>& gt, const std::vector<std::uint8_t>& mask) {
  std::size_t count = 0;
  return detail::mask_mean(ad::abs(ad::sub(pred, gt)), mask, count);
}

// Mean distance between a point set rotated by alpha about the predicted axis
// (dir 1 x 3 unit, pivot 1 x 3) and about the ground-truth axis.
template <class T>
Tensor<T> motion_term(const std::vector<Vec3>& pts, const Tensor<T>& dir, const Tensor<T>& pivot, const Line3& gt,
                      double alpha) {
  const auto moved_gt = rodrigues_rotate(pts, gt, alpha);
  const Tensor<T> moved_pred = ad::rodrigues_rotate(detail::constant_rows<T>(pts), dir, pivot, static_cast<T>(alpha));
  return ad::mean(detail::row_distance(ad::sub(moved_pred, detail::constant_rows<T>(moved_gt))));
}

// Per-joint predicted axes (unit dir, pivot) against ground truth. Joints
// with an empty child-link set are skipped and left out of the average.
// Returns an untracked zero when no joint has points.
template <class T>
Tensor<T> motion_loss(const std::vector<std::vector<Vec3>>& child_points, const std::vector<Tensor<T>>& dirs,
                      const std::vector<Tensor<T>>& pivots, const std::vector<Line3>& gt,
                      const MotionLossConfig& cfg = {}) {
  cfg.validate();
  if (dirs.size() != gt.size() || pivots.size() != gt.size() || child_points.size() != gt.size())
    throw DimensionError("motion_loss: per-joint inputs differ in length");
  std::vector<Tensor<T>> terms;
  for (std::size_t j = 0; j < gt.size(); ++j) {
    if (child_points[j].empty()) continue;
    terms.push_back(motion_term(child_points[j], dirs[j], pivots[j], gt[j], cfg.alpha));
  }
  if (terms.empty()) return Tensor<T>::scalar(T(0));
  Tensor<T> total = terms[0];
  for (std::size_t k = 1; k < terms.size(); ++k) total = ad::add(total, terms[k]);
  return ad::scale(total, T(1) / static_cast<T>(terms.size()));
}

template <class T>
struct LossTerms {
  std::array<Tensor<T>, 6> terms;
  Tensor<T> total;

  [[nodiscard]] std::array<double, 6> values() const {
    std::array<double, 6> v{};
    for (std::size_t i = 0; i < 6; ++i) v[i] = terms[i].item();
    return v;
  }
};

// Weighted sum; a non-finite term raises NumericalFault naming the term.
template <class T>
Tensor<T> total_loss(const std::array<Tensor<T>, 6>& terms, const LossWeights& w) {
  const auto wa = w.as_array();
  Tensor<T> total;
  bool first = true;
  for (std::size_t i = 0; i < 6; ++i) {
    if (!std::isfinite(terms[i].item()))
      throw NumericalFault(std::string("loss term '") + kLossTermNames[i] + "' is not finite");
    const Tensor<T> part = ad::scale(terms[i], static_cast<T>(wa[i]));
    total = first ? part : ad::add(total, part);
    first = false;
  }
  return total;
}

struct LossOptions {
  LossWeights weights;
  MotionLossConfig motion;
  JointPointSet point_set = JointPointSet::all;
};

// Coarse (mean) axis of a joint channel in differentiable form.
template <class T>
std::pair<Tensor<T>, Tensor<T>> mean_axis(const PerPointPrediction<T>& pred, std::size_t j) {
  return {ad::normalize(ad::mean(pred.dir[j], 0), 1), ad::mean(pred.pivot(j), 0)};
}

// All six terms for one sample. Only active joint channels are supervised.
template <class T>
LossTerms<T> compute_losses(const PerPointPrediction<T>& pred, const SampleRecord& rec, const PointwiseTargets& tg,
                            const LossOptions& opt = {}) {
  opt.weights.validate();
  const std::size_t n = rec.size();
  if (pred.size() != n || tg.n != n) throw DimensionError("compute_losses: prediction, record and targets disagree on n");
  std::vector<std::size_t> labels(rec.labels.begin(), rec.labels.end());
  LossTerms<T> out;
  out.terms[0] = seg_loss(pred.seg_logits, labels);

  std::array<std::vector<Tensor<T>>, 4> per_joint;
  std::vector<std::vector<Vec3>> child_points;
  std::vector<Tensor<T>> dirs, pivots;
  std::vector<Line3> gt_axes;
  const auto active = static_cast<std::size_t>(tg.active_joints);
  for (std::size_t j = 0; j < active; ++j) {
    const auto child = static_cast<std::uint8_t>(j + 1);
    std::vector<std::uint8_t> all(n), valid(n);
    std::vector<Vec3> pk;
    for (std::size_t i = 0; i < n; ++i) {
      const bool in_child = rec.labels[i] == child;
      all[i] = opt.point_set == JointPointSet::all || in_child;
      valid[i] = all[i] && tg.valid[j * n + i];
      if (in_child) pk.push_back(rec.points[i]);
    }
    const std::span<const double> dir_t(tg.dir.data() + j * n * 3, n * 3), pdir_t(tg.pdir.data() + j * n * 3, n * 3);
    const std::span<const double> dist_t(tg.dist.data() + j * n, n), state_t(tg.state.data() + j * n, n);
    std::size_t c_all = 0, c_valid = 0;
    for (auto m : all) c_all += m;
    for (auto m : valid) c_valid += m;
    if (c_all > 0) {
      per_joint[0].push_back(dir_loss(pred.dir[j], detail::vec_rows<T>(dir_t), all));
      per_joint[3].push_back(state_loss(pred.state[j], detail::column<T>(state_t), all));
    }
    if (c_valid > 0) {
      per_joint[1].push_back(pdir_loss(pred.pdir[j], detail::vec_rows<T>(pdir_t), valid));
      per_joint[2].push_back(dist_loss(pred.dist[j], detail::column<T>(dist_t), valid));
    }
    child_points.push_back(std::move(pk));
    auto [d, p] = mean_axis(pred, j);
    dirs.push_back(d);
    pivots.push_back(p);
    gt_axes.push_back(rec.joints[j].axis);
  }
  for (std::size_t t = 0; t < 4; ++t) {
    auto& v = per_joint[t];
    if (v.empty()) {
      out.terms[t + 1] = Tensor<T>::scalar(T(0));
      continue;
    }
    Tensor<T> s = v[0];
    for (std::size_t k = 1; k < v.size(); ++k) s = ad::add(s, v[k]);
    out.terms[t + 1] = ad::scale(s, T(1) / static_cast<T>(v.size()));
  }
  if (opt.weights.motion > 0.0) {
    out.terms[5] = motion_loss(child_points, dirs, pivots, gt_axes, opt.motion);
  } else {
    // Still reported, but kept off the tape.
    ad::NoGradGuard off;
    out.terms[5] = motion_loss(child_points, dirs, pivots, gt_axes, opt.motion);
  }
  out.total = total_loss(out.terms, opt.weights);
  return out;
}

}  // namespace losses
}  // namespace capt
