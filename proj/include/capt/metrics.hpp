#pragma once

#include <cmath>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "capt/geometry.hpp"

namespace capt {

struct SegScores {
  double pa = 0.0;
  double miou = 0.0;
};

// Accuracy and mean IoU over the classes present in the ground truth.
inline SegScores seg_metrics(std::span<const int> pred, std::span<const int> gt) {
  if (pred.size() != gt.size()) throw DimensionError("seg_metrics: label arrays differ in length");
  if (gt.empty()) throw ContractError("seg_metrics on an empty cloud");
  int classes = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) classes = std::max({classes, gt[i] + 1, pred[i] + 1});
  std::vector<std::size_t> inter(classes, 0), gt_count(classes, 0), pred_count(classes, 0);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    ++gt_count[gt[i]];
    ++pred_count[pred[i]];
    if (pred[i] == gt[i]) {
      ++hit;
      ++inter[gt[i]];
    }
  }
  SegScores s;
  s.pa = static_cast<double>(hit) / static_cast<double>(gt.size());
  int present = 0;
  for (int c = 0; c < classes; ++c) {
    if (gt_count[c] == 0) continue;
    ++present;
    s.miou += static_cast<double>(inter[c]) / static_cast<double>(gt_count[c] + pred_count[c] - inter[c]);
  }
  s.miou /= present;
  return s;
}

// Angle between directed axes, degrees.
inline double direction_error(const UnitVec3& pred, const UnitVec3& gt) { return angle_degrees(pred.vec(), gt.vec()); }

inline double position_error(const Line3& pred, const Line3& gt) { return line_to_line_distance(pred, gt); }

inline double state_error_degrees(double pred, double gt) { return std::abs(pred - gt) * 180.0 / std::numbers::pi; }

struct Thresholds {
  double dir_deg[2] = {5.0, 10.0};
  double pos[2] = {0.01, 0.05};  // reported as AP1 and AP5
  double state_deg[2] = {5.0, 10.0};
};

struct JointErrors {
  double dir_deg = 0.0;
  double pos = 0.0;
  double state_deg = 0.0;
};

struct SampleEval {
  double pa = 0.0;
  double miou = 0.0;
  std::vector<JointErrors> joints;
};

struct JointSummary {
  double med_dir = 0, ap5_dir = 0, ap10_dir = 0;
  double aed = 0, ap1_pos = 0, ap5_pos = 0;
  double med_state = 0, ap5_state = 0, ap10_state = 0;
};

struct EvalReport {
  double pa = 0.0;
  double miou = 0.0;
  std::vector<JointSummary> joints;
  JointSummary mean;  // averaged over joints
  std::size_t samples = 0;
};

inline double fraction_below(std::span<const double> v, double threshold) {
  std::size_t c = 0;
  for (double x : v) c += x < threshold ? 1 : 0;
  return static_cast<double>(c) / static_cast<double>(v.size());
}

inline double mean_of(std::span<const double> v) {
  double s = 0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

inline EvalReport aggregate(const std::vector<SampleEval>& rows, const Thresholds& th = {}) {
  if (rows.empty()) throw ContractError("aggregate over an empty evaluation set");
  EvalReport r;
  r.samples = rows.size();
  const std::size_t nj = rows[0].joints.size();
  for (const auto& s : rows) {
    if (s.joints.size() != nj) throw DimensionError("aggregate: samples report different joint counts");
    r.pa += s.pa;
    r.miou += s.miou;
  }
  r.pa /= static_cast<double>(rows.size());
  r.miou /= static_cast<double>(rows.size());
  for (std::size_t j = 0; j < nj; ++j) {
    std::vector<double> dir, pos, st;
    for (const auto& s : rows) {
      dir.push_back(s.joints[j].dir_deg);
      pos.push_back(s.joints[j].pos);
      st.push_back(s.joints[j].state_deg);
    }
    JointSummary js;
    js.med_dir = mean_of(dir);
    js.ap5_dir = fraction_below(dir, th.dir_deg[0]);
    js.ap10_dir = fraction_below(dir, th.dir_deg[1]);
    js.aed = mean_of(pos);
    js.ap1_pos = fraction_below(pos, th.pos[0]);
    js.ap5_pos = fraction_below(pos, th.pos[1]);
    js.med_state = mean_of(st);
    js.ap5_state = fraction_below(st, th.state_deg[0]);
    js.ap10_state = fraction_below(st, th.state_deg[1]);
    r.joints.push_back(js);
  }
  if (nj > 0) {
    auto& m = r.mean;
    for (const auto& js : r.joints) {
      m.med_dir += js.med_dir;
      m.ap5_dir += js.ap5_dir;
      m.ap10_dir += js.ap10_dir;
      m.aed += js.aed;
      m.ap1_pos += js.ap1_pos;
      m.ap5_pos += js.ap5_pos;
      m.med_state += js.med_state;
      m.ap5_state += js.ap5_state;
      m.ap10_state += js.ap10_state;
    }
    const double k = static_cast<double>(nj);
    for (double* v : {&m.med_dir, &m.ap5_dir, &m.ap10_dir, &m.aed, &m.ap1_pos, &m.ap5_pos, &m.med_state,
                      &m.ap5_state, &m.ap10_state})
      *v /= k;
  }
  return r;
}

inline nlohmann::json joint_summary_json(const JointSummary& s) {
  return {{"MED_dir", s.med_dir},     {"AP5_dir", s.ap5_dir},     {"AP10_dir", s.ap10_dir},
          {"AED", s.aed},             {"AP1_pos", s.ap1_pos},     {"AP5_pos", s.ap5_pos},
          {"MED_state", s.med_state}, {"AP5_state", s.ap5_state}, {"AP10_state", s.ap10_state}};
}

inline nlohmann::json report_json(const EvalReport& r) {
  nlohmann::json j = {{"PA", r.pa}, {"mIoU", r.miou}, {"samples", r.samples}};
  j["joints"] = nlohmann::json::array();
  for (const auto& js : r.joints) j["joints"].push_back(joint_summary_json(js));
  j["mean"] = joint_summary_json(r.mean);
  return j;
}

}  // namespace capt
