#pragma once

// End-to-end commands: dataset generation, training, evaluation, inference.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <mutex>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "capt/dataset.hpp"
#include "capt/losses.hpp"
#include "capt/metrics.hpp"
#include "capt/model.hpp"
#include "capt/optim.hpp"
#include "capt/ply.hpp"
#include "capt/voting.hpp"

namespace capt {

struct TrainSettings {
  std::size_t epochs = 30;
  std::size_t batch = 8;
  ad::AdamConfig adam;
  bool cosine_schedule = true;
  double final_lr_fraction = 0.05;
  bool frame_augment = false;
  bool mirror_augment = true;
};

struct RunConfig {
  std::string category = "laptop";
  std::uint64_t seed = 0;
  unsigned threads = 1;
  std::size_t count = 100;       // gen: total samples
  std::optional<SplitCounts> split_counts;  // gen: overrides `count`
  std::size_t n_points = 1024;   // gen: points per sample
  ModelConfig model;
  LossWeights weights;
  MotionLossConfig motion;
  JointPointSet point_set = JointPointSet::all;
  VotingConfig voting;
  TrainSettings train;
  std::string dataset_dir;
  std::string checkpoint;
  std::string report;     // eval: output prefix (.json and .txt)
  std::string loss_csv;   // train: defaults to <checkpoint>.loss.csv
  std::string split = "test";
  bool verbose = true;
};

inline void load_run_config(RunConfig& rc, const nlohmann::json& j) {
  try {
    rc.category = j.value("category", rc.category);
    rc.seed = j.value("seed", rc.seed);
    rc.threads = j.value("threads", rc.threads);
    rc.count = j.value("count", rc.count);
    rc.n_points = j.value("n_points", rc.n_points);
    if (j.contains("model")) {
      auto m = model_config_to_json(rc.model);
      m.update(j["model"]);
      rc.model = model_config_from_json(m);
    }
    if (j.contains("loss")) {
      const auto& l = j["loss"];
      if (l.contains("weights")) {
        const auto& w = l["weights"];
        rc.weights.seg = w.value("seg", rc.weights.seg);
        rc.weights.dir = w.value("dir", rc.weights.dir);
        rc.weights.pdir = w.value("pdir", rc.weights.pdir);
        rc.weights.dist = w.value("dist", rc.weights.dist);
        rc.weights.state = w.value("state", rc.weights.state);
        rc.weights.motion = w.value("motion", rc.weights.motion);
      }
      rc.motion.alpha = l.value("alpha", rc.motion.alpha);
      const std::string ps = l.value("point_set", std::string("all"));
      if (ps == "all") rc.point_set = JointPointSet::all;
      else if (ps == "child_link") rc.point_set = JointPointSet::child_link;
      else throw ConfigError("loss.point_set must be 'all' or 'child_link'");
    }
    if (j.contains("voting")) {
      rc.voting.omega0 = j["voting"].value("omega0", rc.voting.omega0);
      rc.voting.omega1 = j["voting"].value("omega1", rc.voting.omega1);
    }
    if (j.contains("optim")) {
      const auto& o = j["optim"];
      rc.train.epochs = o.value("epochs", rc.train.epochs);
      rc.train.batch = o.value("batch", rc.train.batch);
      rc.train.adam.lr = o.value("lr", rc.train.adam.lr);
      rc.train.adam.beta1 = o.value("beta1", rc.train.adam.beta1);
      rc.train.adam.beta2 = o.value("beta2", rc.train.adam.beta2);
      rc.train.adam.eps = o.value("eps", rc.train.adam.eps);
      rc.train.cosine_schedule = o.value("cosine_schedule", rc.train.cosine_schedule);
      rc.train.frame_augment = o.value("frame_augment", rc.train.frame_augment);
      rc.train.mirror_augment = o.value("mirror_augment", rc.train.mirror_augment);
    }
    if (j.contains("paths")) {
      const auto& p = j["paths"];
      rc.dataset_dir = p.value("dataset", rc.dataset_dir);
      rc.checkpoint = p.value("checkpoint", rc.checkpoint);
      rc.report = p.value("report", rc.report);
      rc.loss_csv = p.value("loss_csv", rc.loss_csv);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("run config: ") + e.what());
  }
}

inline void load_run_config_file(RunConfig& rc, const std::string& path) {
  const auto bytes = ad::io::read_file(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  load_run_config(rc, j);
}

// Tensors are freed and reallocated every step; keep large blocks on the heap
// instead of round-tripping them through mmap.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 256 << 20);
#endif
}

inline void write_text(const std::string& path, const std::string& text) {
  ad::io::write_file(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

// ---------------------------------------------------------------- gen

inline DatasetManifest cmd_gen(const RunConfig& rc) {
  if (rc.dataset_dir.empty()) throw ConfigError("gen needs an output directory");
  DatasetRequest req{rc.category, rc.split_counts ? *rc.split_counts : split_by_ratio(rc.count), rc.seed, rc.n_points, rc.dataset_dir, rc.threads};
  return generate_dataset(req);
}

// ---------------------------------------------------------------- train

inline std::string model_json_path(const std::string& checkpoint) { return checkpoint + ".json"; }

inline DatasetManifest open_dataset(const std::string& dir) {
  const auto manifest = std::filesystem::path(dir) / "manifest.json";
  if (dir.empty() || !std::filesystem::exists(manifest)) throw ConfigError("no dataset manifest at " + manifest.string());
  return load_manifest(manifest.string());
}

inline std::vector<StoredSample> load_split(const DatasetManifest& m, const std::string& split, int max_joints) {
  std::vector<StoredSample> out;
  for (const auto& p : m.paths(split)) out.push_back(load_sample(p, max_joints));
  return out;
}

struct TrainResult {
  std::vector<std::array<double, 7>> steps;  // per optimizer step: six terms then total
  std::vector<double> val_loss;              // per epoch
  std::size_t best_epoch = 0;
  double seconds = 0;
};

inline losses::LossOptions loss_options(const RunConfig& rc) {
  losses::LossOptions o;
  o.weights = rc.weights;
  o.motion = rc.motion;
  o.point_set = rc.point_set;
  return o;
}

template <class T>
double mean_total_loss(const CaptModel<T>& model, const std::vector<StoredSample>& samples, const losses::LossOptions& opt) {
  ad::NoGradGuard off;
  double s = 0;
  for (const auto& smp : samples)
    s += losses::compute_losses(model.forward(smp.record.points), smp.record, smp.targets, opt).total.item();
  return samples.empty() ? 0.0 : s / static_cast<double>(samples.size());
}

// Reflection through the x = 0 plane, with links relabeled by `links`. A
// joint keeps its state when its direction becomes -M u, since
// M R_u(a) M = R_{-Mu}(a). Joint j drives link j + 1.
inline StoredSample mirrored(const StoredSample& s, std::span<const int> links) {
  StoredSample m{s.record, {}};
  for (auto& p : m.record.points) p.x() = -p.x();
  for (auto& l : m.record.labels) l = static_cast<std::uint8_t>(links[l]);
  for (std::size_t j = 0; j < m.record.joints.size(); ++j) {
    const auto from = static_cast<std::size_t>(links[j + 1] - 1);
    if (from >= s.record.joints.size()) throw ContractError("mirror map needs every joint active");
    const auto& src = s.record.joints[from];
    auto& dst = m.record.joints[j];
    dst = src;
    Vec3 u = -src.axis.direction.vec();
    u.x() = -u.x();
    dst.axis.direction = UnitVec3::normalized(u);
    dst.axis.pivot.x() = -src.axis.pivot.x();
  }
  m.targets = compute_pointwise_targets(m.record, s.targets.max_joints);
  return m;
}

// Mini-batch Adam on per-sample gradients accumulated in a fixed order.
inline TrainResult train_model(CaptModel<float>& model, const std::vector<StoredSample>& train,
                               const std::vector<StoredSample>& val, const RunConfig& rc) {
  if (train.empty()) throw ConfigError("training split is empty");
  if (rc.train.batch == 0 || rc.train.epochs == 0) throw ConfigError("epochs and batch must be positive");
  const auto opt = loss_options(rc);
  opt.weights.validate();
  opt.motion.validate();
  TrainResult res;
  const auto start = std::chrono::steady_clock::now();
  auto params = model.parameters();
  ad::AdamState<float> state;
  ad::AdamConfig adam = rc.train.adam;
  std::vector<ad::NamedArray> best = model.to_arrays();
  double best_val = std::numeric_limits<double>::infinity();
  const std::size_t steps_per_epoch = (train.size() + rc.train.batch - 1) / rc.train.batch;
  const std::size_t total_steps = steps_per_epoch * rc.train.epochs;
  std::vector<std::size_t> order(train.size());
  const auto mirror = rc.train.mirror_augment ? make_category(rc.category).mirror_links : std::vector<int>{};
  for (std::size_t e = 0; e < rc.train.epochs; ++e) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(mix_seed(rc.seed, 0x7a11 + e));
    for (std::size_t i = order.size() - 1; i > 0; --i) std::swap(order[i], order[rng.below(i + 1)]);
    for (std::size_t b = 0; b < order.size(); b += rc.train.batch) {
      const std::size_t end = std::min(order.size(), b + rc.train.batch);
      model.zero_grad();
      std::array<double, 7> logged{};
      for (std::size_t k = b; k < end; ++k) {
        const bool flip = !mirror.empty() && rng.below(2) == 1;
        const StoredSample flipped = flip ? mirrored(train[order[k]], mirror) : StoredSample{};
        const auto& s = flip ? flipped : train[order[k]];
        const auto& twist = rc.train.frame_augment ? detail::frame_symmetries()[rng.below(8)] : detail::frame_symmetries()[0];
        auto terms = losses::compute_losses(model.forward(s.record.points, twist), s.record, s.targets, opt);
        const auto v = terms.values();
        for (int t = 0; t < 6; ++t) logged[t] += v[t];
        logged[6] += terms.total.item();
        ad::backward(ad::scale(terms.total, 1.0f / static_cast<float>(end - b)));
      }
      for (auto& x : logged) x /= static_cast<double>(end - b);
      if (rc.train.cosine_schedule) {
        const double prog = static_cast<double>(res.steps.size()) / static_cast<double>(total_steps);
        const double f = rc.train.final_lr_fraction;
        adam.lr = rc.train.adam.lr * (f + (1 - f) * 0.5 * (1 + std::cos(std::numbers::pi * prog)));
      }
      ad::adam_step(params, state, adam);
      res.steps.push_back(logged);
    }
    const double vl = val.empty() ? res.steps.back()[6] : mean_total_loss(model, val, opt);
    res.val_loss.push_back(vl);
    if (vl < best_val) {
      best_val = vl;
      best = model.to_arrays();
      res.best_epoch = e;
    }
    if (rc.verbose)
      std::fprintf(stderr, "epoch %zu/%zu  train %.5f  val %.5f\n", e + 1, rc.train.epochs, res.steps.back()[6], vl);
  }
  model.load_arrays(best);
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return res;
}

inline std::string loss_csv(const TrainResult& r) {
  std::string out = "step";
  for (const char* n : kLossTermNames) out += std::string(",") + n;
  out += ",total\n";
  char buf[64];
  for (std::size_t s = 0; s < r.steps.size(); ++s) {
    out += std::to_string(s);
    for (double v : r.steps[s]) {
      std::snprintf(buf, sizeof buf, ",%.9g", v);
      out += buf;
    }
    out += "\n";
  }
  return out;
}

struct ModelBundle {
  std::string category;
  ModelConfig config;
  std::uint64_t seed = 0;
  bool motion_loss = true;
};

inline nlohmann::json bundle_json(const ModelBundle& b) {
  return {{"category", b.category}, {"seed", b.seed}, {"motion_loss", b.motion_loss},
          {"model", model_config_to_json(b.config)}};
}

inline ModelBundle load_bundle(const std::string& checkpoint) {
  const auto path = model_json_path(checkpoint);
  if (!std::filesystem::exists(checkpoint)) throw ConfigError("checkpoint not found: " + checkpoint);
  if (!std::filesystem::exists(path)) throw ConfigError("model config not found: " + path);
  const auto bytes = ad::io::read_file(path);
  ModelBundle b;
  try {
    const auto j = nlohmann::json::parse(bytes.begin(), bytes.end());
    b.category = j.at("category").get<std::string>();
    b.seed = j.value("seed", std::uint64_t{0});
    b.motion_loss = j.value("motion_loss", true);
    b.config = model_config_from_json(j.at("model"));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return b;
}

inline CaptModel<float> load_model(const std::string& checkpoint, ModelBundle* bundle = nullptr) {
  const auto b = load_bundle(checkpoint);
  CaptModel<float> m(b.config, b.seed);
  m.load_arrays(ad::load_checkpoint(checkpoint));
  if (bundle) *bundle = b;
  return m;
}

struct TrainOutcome {
  TrainResult result;
  std::string checkpoint, model_json, loss_csv;
};

inline TrainOutcome cmd_train(const RunConfig& rc) {
  if (rc.checkpoint.empty()) throw ConfigError("train needs a checkpoint path");
  const auto manifest = open_dataset(rc.dataset_dir);
  const auto cat = make_category(manifest.category);
  ModelConfig mc = rc.model;
  mc.n_links = static_cast<std::size_t>(cat.max_links);
  mc.n_joints = static_cast<std::size_t>(cat.max_joints);
  mc.n = manifest.n_points;
  mc.validate();
  const auto train = load_split(manifest, "train", cat.max_joints);
  const auto val = load_split(manifest, "val", cat.max_joints);
  CaptModel<float> model(mc, rc.seed);
  TrainOutcome out;
  RunConfig run = rc;
  run.category = manifest.category;
  out.result = train_model(model, train, val, run);
  out.checkpoint = rc.checkpoint;
  out.model_json = model_json_path(rc.checkpoint);
  out.loss_csv = rc.loss_csv.empty() ? rc.checkpoint + ".loss.csv" : rc.loss_csv;
  const auto parent = std::filesystem::path(rc.checkpoint).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  ad::save_checkpoint(rc.checkpoint, model.to_arrays());
  write_text(out.model_json, bundle_json({cat.name, mc, rc.seed, rc.weights.motion > 0}).dump(2) + "\n");
  write_text(out.loss_csv, loss_csv(out.result));
  return out;
}

// ---------------------------------------------------------------- eval

struct SamplePrediction {
  std::vector<int> labels;
  VoteResult votes;
};

template <class T>
SamplePrediction predict(const CaptModel<T>& model, std::span<const Vec3> points, const VotingConfig& voting,
                         std::size_t active_joints) {
  const auto pred = forward_frame_averaged(model, points);
  return {pred.labels(), double_vote(pred, voting, active_joints)};
}

inline SampleEval score_sample(const SamplePrediction& p, const SampleRecord& rec, bool fine) {
  std::vector<int> gt(rec.labels.begin(), rec.labels.end());
  const auto seg = seg_metrics(p.labels, gt);
  SampleEval e{seg.pa, seg.miou, {}};
  const auto& votes = fine ? p.votes.fine : p.votes.coarse;
  for (std::size_t j = 0; j < votes.size(); ++j) {
    const auto& g = rec.joints[j];
    e.joints.push_back({direction_error(votes[j].direction, g.axis.direction),
                        position_error(votes[j].axis(), g.axis), state_error_degrees(votes[j].state, g.state)});
  }
  return e;
}

struct EvalOutcome {
  EvalReport coarse, fine;
  double seconds_per_sample = 0;
};

// Runs every sample through forward + double voting; `threads` workers split
// the samples, results are reduced in sample order.
template <class T>
EvalOutcome evaluate(const CaptModel<T>& model, const std::vector<StoredSample>& samples, const VotingConfig& voting,
                     unsigned threads = 1) {
  if (samples.empty()) throw ConfigError("evaluation split is empty");
  voting.validate();
  std::vector<SamplePrediction> preds(samples.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  const auto start = std::chrono::steady_clock::now();
  auto worker = [&] {
    for (std::size_t k = next++; k < samples.size(); k = next++) {
      try {
        const auto& r = samples[k].record;
        preds[k] = predict(model, r.points, voting, static_cast<std::size_t>(r.active_joint_count));
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (unsigned t = 0; t < threads; ++t) pool.emplace_back(worker);
  }
  if (failure) std::rethrow_exception(failure);
  EvalOutcome out;
  out.seconds_per_sample =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count() / static_cast<double>(samples.size());
  std::vector<SampleEval> coarse, fine;
  for (std::size_t k = 0; k < samples.size(); ++k) {
    coarse.push_back(score_sample(preds[k], samples[k].record, false));
    fine.push_back(score_sample(preds[k], samples[k].record, true));
  }
  out.coarse = aggregate(coarse);
  out.fine = aggregate(fine);
  return out;
}

inline std::string report_table(const EvalOutcome& e) {
  std::ostringstream os;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-12s | %6s %6s | %8s %6s %6s | %8s %6s %6s | %8s %6s %6s\n", "", "PA", "mIoU",
                "MED", "AP5", "AP10", "AED", "AP1", "AP5", "MED", "AP5", "AP10");
  os << std::string(16, ' ') << "Segmentation    Joint Direction          Joint Position           Joint State\n";
  os << buf;
  os << std::string(std::string(buf).size() - 1, '-') << "\n";
  auto line = [&](const std::string& label, const EvalReport& r, const JointSummary& s) {
    std::snprintf(buf, sizeof buf, "%-12s | %6.3f %6.3f | %8.3f %6.3f %6.3f | %8.4f %6.3f %6.3f | %8.3f %6.3f %6.3f\n",
                  label.c_str(), r.pa, r.miou, s.med_dir, s.ap5_dir, s.ap10_dir, s.aed, s.ap1_pos, s.ap5_pos,
                  s.med_state, s.ap5_state, s.ap10_state);
    os << buf;
  };
  for (const auto* which : {&e.coarse, &e.fine}) {
    const std::string tag = which == &e.coarse ? "coarse" : "fine";
    for (std::size_t j = 0; j < which->joints.size(); ++j) line(tag + " J" + std::to_string(j), *which, which->joints[j]);
    if (which->joints.size() > 1) line(tag + " mean", *which, which->mean);
  }
  os << "samples: " << e.fine.samples << "\n";
  return os.str();
}

inline nlohmann::json eval_json(const EvalOutcome& e) {
  return {{"coarse", report_json(e.coarse)}, {"fine", report_json(e.fine)}};
}

inline EvalOutcome cmd_eval(const RunConfig& rc) {
  ModelBundle bundle;
  const auto model = load_model(rc.checkpoint, &bundle);
  const auto manifest = open_dataset(rc.dataset_dir);
  if (manifest.category != bundle.category)
    throw ConfigError("checkpoint was trained on '" + bundle.category + "', dataset is '" + manifest.category + "'");
  const auto cat = make_category(manifest.category);
  const auto samples = load_split(manifest, rc.split, cat.max_joints);
  auto out = evaluate(model, samples, rc.voting, rc.threads);
  if (!rc.report.empty()) {
    write_text(rc.report + ".json", eval_json(out).dump(2) + "\n");
    write_text(rc.report + ".txt", report_table(out));
  }
  return out;
}

// ---------------------------------------------------------------- infer

struct InferInput {
  std::vector<Vec3> points;
  std::vector<JointSpec> truth;  // empty when the input carries no ground truth
};

// Reads a sample file, or plain text with three coordinates per line.
inline InferInput read_cloud(const std::string& path, int max_joints) {
  const auto bytes = ad::io::read_file(path);
  InferInput in;
  if (bytes.size() >= 4 && std::string(bytes.begin(), bytes.begin() + 4) == "CPTS") {
    auto s = decode_sample(bytes, path, max_joints);
    in.points = std::move(s.record.points);
    in.truth = std::move(s.record.joints);
  } else {
    std::istringstream is(std::string(bytes.begin(), bytes.end()));
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      if (line.find_first_not_of(" \t\r") == std::string::npos || line[0] == '#') continue;
      std::istringstream ls(line);
      Vec3 p;
      std::string extra;
      if (!(ls >> p.x() >> p.y() >> p.z()) || (ls >> extra) || !p.allFinite())
        throw IoError(path + ":" + std::to_string(lineno) + ": expected three finite coordinates");
      in.points.push_back(p);
    }
  }
  if (in.points.size() < kMinSamplePoints)
    throw IoError(path + ": needs at least 64 points, found " + std::to_string(in.points.size()));
  return in;
}

struct InferOutcome {
  nlohmann::json record;
  SamplePrediction prediction;
  InferInput input;
};

inline nlohmann::json joint_record(const VotedJoint& v) {
  const auto& d = v.direction.vec();
  return {{"direction", {d.x(), d.y(), d.z()}},
          {"pivot", {v.pivot.x(), v.pivot.y(), v.pivot.z()}},
          {"state", v.state},
          {"participant_count", v.participant_count},
          {"fallback_flag", v.fallback}};
}

inline PlyScene inference_scene(const InferOutcome& o) {
  PlyScene s;
  Vec3 lo = o.input.points[0], hi = lo, center = Vec3::Zero();
  for (std::size_t i = 0; i < o.input.points.size(); ++i) {
    const auto& p = o.input.points[i];
    s.add_point(p, part_color(o.prediction.labels[i]));
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
    center += p;
  }
  center /= static_cast<double>(o.input.points.size());
  const double half = 0.5 * (hi - lo).norm();
  for (const auto& v : o.prediction.votes.fine) s.add_axis(v.axis(), center, half, kPredictedJointColor);
  for (const auto& t : o.input.truth) s.add_axis(t.axis, center, half, kTruthJointColor);
  return s;
}

inline InferOutcome cmd_infer(const RunConfig& rc, const std::string& input, const std::string& ply_path = "") {
  ModelBundle bundle;
  const auto model = load_model(rc.checkpoint, &bundle);
  rc.voting.validate();
  InferOutcome o;
  o.input = read_cloud(input, static_cast<int>(bundle.config.n_joints));
  o.prediction = predict(model, o.input.points, rc.voting, bundle.config.n_joints);
  o.record["category"] = bundle.category;
  o.record["points"] = o.input.points.size();
  o.record["joints"] = nlohmann::json::array();
  for (const auto& v : o.prediction.votes.fine) o.record["joints"].push_back(joint_record(v));
  if (!ply_path.empty()) write_ply(ply_path, inference_scene(o));
  return o;
}

}  // namespace capt
