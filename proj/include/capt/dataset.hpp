#pragma once

// On-disk dataset: one binary sample file per record plus a JSON manifest.
//
// Sample file (little-endian):
//   "CPTS" | version u32 | n u32 | n_L u8 | n_J u8 |
//   points f32[n][3] | labels u8[n] |
//   per joint: dir f32[3] | pivot f32[3] | state f32 |
//   per joint, per point: dir f32[3] | dist f32 | pdir f32[3] | state f32 |
//   per joint: valid u8[n]
// n_L and n_J are the record's active link and joint counts.

#include <array>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <string>
#include <mutex>
#include <thread>
#include <vector>

#include <json.hpp>

#include "capt/checkpoint.hpp"
#include "capt/synthdata.hpp"

namespace capt {

inline constexpr std::uint32_t kSampleVersion = 1;
inline constexpr const char* kGeneratorVersion = "capt-synth-1";

struct StoredSample {
  SampleRecord record;
  PointwiseTargets targets;
};

inline std::vector<std::uint8_t> encode_sample(const SampleRecord& rec, const PointwiseTargets& t) {
  namespace io = ad::io;
  if (t.n != rec.size() || t.active_joints != rec.active_joint_count)
    throw ContractError("targets do not belong to this record");
  std::vector<std::uint8_t> out;
  io::put_bytes(out, "CPTS", 4);
  io::put_le<std::uint32_t>(out, kSampleVersion);
  io::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(rec.size()));
  io::put_le<std::uint8_t>(out, static_cast<std::uint8_t>(rec.active_link_count));
  io::put_le<std::uint8_t>(out, static_cast<std::uint8_t>(rec.active_joint_count));
  for (const auto& p : rec.points)
    for (int c = 0; c < 3; ++c) io::put_le<float>(out, static_cast<float>(p[c]));
  io::put_bytes(out, rec.labels.data(), rec.labels.size());
  for (const auto& j : rec.joints) {
    for (int c = 0; c < 3; ++c) io::put_le<float>(out, static_cast<float>(j.axis.direction.vec()[c]));
    for (int c = 0; c < 3; ++c) io::put_le<float>(out, static_cast<float>(j.axis.pivot[c]));
    io::put_le<float>(out, static_cast<float>(j.state));
  }
  for (int j = 0; j < rec.active_joint_count; ++j)
    for (std::size_t i = 0; i < t.n; ++i) {
      const std::size_t k = j * t.n + i;
      for (int c = 0; c < 3; ++c) io::put_le<float>(out, static_cast<float>(t.dir[k * 3 + c]));
      io::put_le<float>(out, static_cast<float>(t.dist[k]));
      for (int c = 0; c < 3; ++c) io::put_le<float>(out, static_cast<float>(t.pdir[k * 3 + c]));
      io::put_le<float>(out, static_cast<float>(t.state[k]));
    }
  for (int j = 0; j < rec.active_joint_count; ++j) io::put_bytes(out, t.valid.data() + j * t.n, t.n);
  return out;
}

// Reads a sample and pads target channels up to `max_joints`. Joint
// directions are renormalized in double precision after the f32 round trip.
inline StoredSample decode_sample(std::vector<std::uint8_t> bytes, const std::string& path, int max_joints) {
  ad::io::Reader r(std::move(bytes), path);
  if (r.get_string(4) != "CPTS") throw IoError(path + ": bad sample magic");
  if (const auto v = r.get<std::uint32_t>(); v != kSampleVersion)
    throw IoError(path + ": unsupported sample version " + std::to_string(v));
  StoredSample s;
  auto& rec = s.record;
  const std::size_t n = r.get<std::uint32_t>();
  rec.active_link_count = r.get<std::uint8_t>();
  rec.active_joint_count = r.get<std::uint8_t>();
  if (rec.active_joint_count > max_joints) throw IoError(path + ": more joints than the category allows");
  rec.points.resize(n);
  for (auto& p : rec.points)
    for (int c = 0; c < 3; ++c) p[c] = r.get<float>();
  rec.labels.resize(n);
  for (auto& l : rec.labels) {
    l = r.get<std::uint8_t>();
    if (l >= rec.active_link_count) throw IoError(path + ": label outside the active link range");
  }
  for (int j = 0; j < rec.active_joint_count; ++j) {
    Vec3 d, q;
    for (int c = 0; c < 3; ++c) d[c] = r.get<float>();
    for (int c = 0; c < 3; ++c) q[c] = r.get<float>();
    const double state = r.get<float>();
    try {
      rec.joints.push_back({{UnitVec3::normalized(d), q}, state, {}});
    } catch (const DegenerateError&) {
      throw IoError(path + ": zero joint direction");
    }
  }
  auto& t = s.targets;
  t.n = n;
  t.max_joints = max_joints;
  t.active_joints = rec.active_joint_count;
  t.dir.assign(static_cast<std::size_t>(max_joints) * n * 3, 0.0);
  t.pdir.assign(t.dir.size(), 0.0);
  t.dist.assign(static_cast<std::size_t>(max_joints) * n, 0.0);
  t.state.assign(t.dist.size(), 0.0);
  t.valid.assign(t.dist.size(), 0);
  for (int j = 0; j < rec.active_joint_count; ++j)
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t k = j * n + i;
      for (int c = 0; c < 3; ++c) t.dir[k * 3 + c] = r.get<float>();
      t.dist[k] = r.get<float>();
      for (int c = 0; c < 3; ++c) t.pdir[k * 3 + c] = r.get<float>();
      t.state[k] = r.get<float>();
    }
  for (int j = 0; j < rec.active_joint_count; ++j)
    for (std::size_t i = 0; i < n; ++i) t.valid[j * n + i] = r.get<std::uint8_t>();
  if (!r.at_end()) throw IoError(path + ": trailing bytes after sample payload");
  return s;
}

inline void save_sample(const std::string& path, const SampleRecord& rec, const PointwiseTargets& t) {
  ad::io::write_file(path, encode_sample(rec, t));
}

inline StoredSample load_sample(const std::string& path, int max_joints) {
  return decode_sample(ad::io::read_file(path), path, max_joints);
}

struct SplitCounts {
  std::size_t train = 0, val = 0, test = 0;
  [[nodiscard]] std::size_t total() const { return train + val + test; }
};

// Rounds each share to the nearest integer; the test split takes the rest.
inline SplitCounts split_by_ratio(std::size_t total, std::array<double, 3> ratio = {7, 2, 1}) {
  const double sum = ratio[0] + ratio[1] + ratio[2];
  if (!(sum > 0) || ratio[0] < 0 || ratio[1] < 0 || ratio[2] < 0) throw ConfigError("invalid split ratio");
  SplitCounts c;
  c.train = static_cast<std::size_t>(std::llround(static_cast<double>(total) * ratio[0] / sum));
  c.val = static_cast<std::size_t>(std::llround(static_cast<double>(total) * ratio[1] / sum));
  if (c.train + c.val > total) c.val = total - c.train;
  c.test = total - c.train - c.val;
  return c;
}

inline constexpr std::size_t kMinDatasetCount = 10;

// Draws states, camera, surface samples and augmentation for one sample.
// Every random choice derives from `sample_seed`; the articulated instance
// is built from the same seed, so one sample = one unseen object.
inline SampleRecord generate_sample(const CategorySpec& cat, std::uint64_t sample_seed, std::size_t n,
                                    bool augmented = true) {
  const auto inst = build_instance(cat, sample_seed);
  Rng rng(mix_seed(sample_seed, 1));
  std::vector<double> states;
  for (const auto& j : inst.joints) states.push_back(rng.uniform(j.limits.lo, j.limits.hi));
  for (int attempt = 0; attempt < 64; ++attempt) {
    // Camera on the upper hemisphere, elevation 15..75 degrees, looking at the object.
    const double az = rng.uniform(-std::numbers::pi, std::numbers::pi);
    const double el = rng.uniform(15.0, 75.0) * std::numbers::pi / 180.0;
    const Vec3 eye(std::cos(el) * std::cos(az), std::cos(el) * std::sin(az), std::sin(el));
    try {
      auto rec = sample_view(inst, states, -eye, n, mix_seed(sample_seed, 2 + attempt));
      return augmented ? augment(std::move(rec), mix_seed(sample_seed, 1000)) : rec;
    } catch (const DegenerateError&) {
    }
  }
  throw DegenerateError("no usable camera found for sample seed " + std::to_string(sample_seed));
}

struct DatasetRequest {
  std::string category;
  SplitCounts counts;
  std::uint64_t seed = 0;
  std::size_t n_points = 1024;
  std::string out_dir;
  unsigned threads = 1;
};

struct DatasetManifest {
  std::string category;
  std::uint64_t seed = 0;
  std::string generator_version = kGeneratorVersion;
  std::size_t n_points = 0;
  std::array<std::vector<std::string>, 3> files;  // relative to the manifest directory
  std::array<std::vector<std::uint64_t>, 3> instance_seeds;
  std::string root;                               // directory holding manifest.json

  static constexpr std::array<const char*, 3> kSplitNames{"train", "val", "test"};

  [[nodiscard]] static int split_index(const std::string& name) {
    for (int i = 0; i < 3; ++i)
      if (name == kSplitNames[i]) return i;
    throw ConfigError("unknown split '" + name + "'");
  }
  [[nodiscard]] std::vector<std::string> paths(const std::string& split) const {
    std::vector<std::string> out;
    for (const auto& f : files[split_index(split)]) out.push_back((std::filesystem::path(root) / f).string());
    return out;
  }
};

inline nlohmann::json manifest_to_json(const DatasetManifest& m) {
  nlohmann::json j;
  j["category"] = m.category;
  j["seed"] = m.seed;
  j["generator_version"] = m.generator_version;
  j["n_points"] = m.n_points;
  for (int s = 0; s < 3; ++s) {
    j["splits"][DatasetManifest::kSplitNames[s]] = m.files[s];
    j["instance_seeds"][DatasetManifest::kSplitNames[s]] = m.instance_seeds[s];
    j["counts"][DatasetManifest::kSplitNames[s]] = m.files[s].size();
  }
  return j;
}

inline DatasetManifest load_manifest(const std::string& path) {
  const auto bytes = ad::io::read_file(path);
  DatasetManifest m;
  try {
    const auto j = nlohmann::json::parse(bytes.begin(), bytes.end());
    m.category = j.at("category").get<std::string>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.generator_version = j.at("generator_version").get<std::string>();
    m.n_points = j.value("n_points", std::size_t{0});
    for (int s = 0; s < 3; ++s) {
      m.files[s] = j.at("splits").at(DatasetManifest::kSplitNames[s]).get<std::vector<std::string>>();
      if (j.contains("instance_seeds"))
        m.instance_seeds[s] = j["instance_seeds"].at(DatasetManifest::kSplitNames[s]).get<std::vector<std::uint64_t>>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path + ": malformed manifest (" + e.what() + ")");
  }
  m.root = std::filesystem::path(path).parent_path().string();
  return m;
}

// Generates all samples (in parallel when threads > 1), then writes files and
// the manifest in a fixed order. Output bytes depend only on the request.
inline DatasetManifest generate_dataset(const DatasetRequest& req) {
  if (req.counts.total() < kMinDatasetCount)
    throw ConfigError("dataset needs at least " + std::to_string(kMinDatasetCount) + " samples");
  if (req.n_points < kMinSamplePoints) throw ConfigError("n_points must be at least 64");
  const auto cat = make_category(req.category);
  DatasetManifest m;
  m.category = cat.name;
  m.seed = req.seed;
  m.n_points = req.n_points;
  m.root = req.out_dir;

  struct Job {
    int split;
    std::size_t index;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  const std::array<std::size_t, 3> counts{req.counts.train, req.counts.val, req.counts.test};
  std::uint64_t global = 0;
  for (int s = 0; s < 3; ++s)
    for (std::size_t i = 0; i < counts[s]; ++i) jobs.push_back({s, i, mix_seed(req.seed, global++)});

  std::vector<std::vector<std::uint8_t>> blobs(jobs.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (std::size_t k = next++; k < jobs.size(); k = next++) {
      try {
        const auto rec = generate_sample(cat, jobs[k].seed, req.n_points);
        blobs[k] = encode_sample(rec, compute_pointwise_targets(rec, cat.max_joints));
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const unsigned threads = std::max(1u, req.threads);
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (unsigned t = 0; t < threads; ++t) pool.emplace_back(worker);
  }
  if (failure) std::rethrow_exception(failure);

  namespace fs = std::filesystem;
  std::error_code ec;
  for (const char* split : DatasetManifest::kSplitNames) {
    fs::create_directories(fs::path(req.out_dir) / split, ec);
    if (ec) throw IoError((fs::path(req.out_dir) / split).string() + ": " + ec.message());
  }
  for (std::size_t k = 0; k < jobs.size(); ++k) {
    char name[32];
    std::snprintf(name, sizeof(name), "sample_%05zu.cpts", jobs[k].index);
    const std::string rel = (fs::path(DatasetManifest::kSplitNames[jobs[k].split]) / name).string();
    ad::io::write_file((fs::path(req.out_dir) / rel).string(), blobs[k]);
    m.files[jobs[k].split].push_back(rel);
    m.instance_seeds[jobs[k].split].push_back(jobs[k].seed);
  }
  const std::string text = manifest_to_json(m).dump(2) + "\n";
  ad::io::write_file((fs::path(req.out_dir) / "manifest.json").string(),
                     std::vector<std::uint8_t>(text.begin(), text.end()));
  return m;
}

}  // namespace capt
