// Acceptance suite. Prints one PASS/FAIL line per criterion and exits
// non-zero if any criterion fails.
//
//   capt_acceptance [--only 1,4,...] [--keep DIR]

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numbers>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <unistd.h>
#include <vector>

#include <CLI11.hpp>

#include "capt/pipeline.hpp"
#include "gradcheck.hpp"

namespace fs = std::filesystem;
using namespace capt;
using ad::Tensor;
using capt::testing::max_gradient_error;
using capt::testing::random_tensor;

namespace {

struct Outcome {
  bool pass = true;
  std::vector<std::string> notes;

  void check(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      notes.push_back("FAILED " + what);
    }
  }
  void note(const std::string& s) { notes.push_back(s); }
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

Vec3 random_vec(Rng& rng, double s = 1.0) { return {rng.uniform(-s, s), rng.uniform(-s, s), rng.uniform(-s, s)}; }

UnitVec3 random_unit(Rng& rng) {
  Vec3 v;
  do v = Vec3(rng.normal(), rng.normal(), rng.normal());
  while (v.norm() < 1e-3);
  return UnitVec3::normalized(v);
}

Tensor<double> row(const Vec3& v, bool grad = true) { return Tensor<double>({1, 3}, {v.x(), v.y(), v.z()}, grad); }

std::vector<Vec3> random_points(std::size_t n, Rng& rng, double s = 1.0) {
  std::vector<Vec3> p(n);
  for (auto& x : p) x = random_vec(rng, s);
  return p;
}

// ---------------------------------------------------------------- 1

Outcome gradient_suite() {
  Outcome o;
  constexpr double kOpTol = 1e-6, kMotionTol = 1e-5;
  constexpr std::uint64_t kSeeds = 20;
  using BFn = std::function<Tensor<double>(const Tensor<double>&, const Tensor<double>&)>;
  using UFn = std::function<Tensor<double>(const Tensor<double>&)>;
  const std::vector<std::pair<const char*, BFn>> binary = {
      {"add", [](auto& a, auto& b) { return ad::add(a, b); }},
      {"sub", [](auto& a, auto& b) { return ad::sub(a, b); }},
      {"mul", [](auto& a, auto& b) { return ad::mul(a, b); }},
      {"div", [](auto& a, auto& b) { return ad::div(a, b); }},
      {"matmul", [](auto& a, auto& b) { return ad::matmul(a, ad::transpose(b)); }},
      {"broadcast_row", [](auto& a, auto& b) { return ad::add(a, ad::slice_cols(ad::reshape(b, {1, 12}), 0, 4)); }},
      {"broadcast_col", [](auto& a, auto& b) { return ad::mul(a, ad::slice_cols(b, 1, 1)); }},
      {"concat0", [](auto& a, auto& b) { return ad::concat<double>({a, b}, 0); }},
      {"concat1", [](auto& a, auto& b) { return ad::concat<double>({a, b}, 1); }},
  };
  const std::vector<std::pair<const char*, UFn>> unary = {
      {"relu", [](auto& a) { return ad::relu(ad::add_scalar(a, -1.2)); }},
      {"sqrt", [](auto& a) { return ad::sqrt(a); }},
      {"exp", [](auto& a) { return ad::exp(a); }},
      {"log", [](auto& a) { return ad::log(a); }},
      {"abs", [](auto& a) { return ad::abs(ad::add_scalar(a, -1.2)); }},
      {"square", [](auto& a) { return ad::square(a); }},
      {"scale", [](auto& a) { return ad::scale(a, -2.5); }},
      {"softplus", [](auto& a) { return ad::softplus(ad::scale(a, 3.0)); }},
      {"sum", [](auto& a) { return ad::sum(a); }},
      {"mean", [](auto& a) { return ad::mean(a); }},
      {"sum_axis1", [](auto& a) { return ad::sum(a, 1); }},
      {"mean_axis0", [](auto& a) { return ad::mean(a, 0); }},
      {"max_axis1", [](auto& a) { return ad::max(a, 1); }},
      {"group_max", [](auto& a) { return ad::group_max(a, 3); }},
      {"l2norm", [](auto& a) { return ad::l2norm(a, 1); }},
      {"normalize", [](auto& a) { return ad::normalize(a, 1); }},
      {"transpose", [](auto& a) { return ad::transpose(a); }},
      {"reshape", [](auto& a) { return ad::reshape(a, {2, 6}); }},
      {"repeat_rows", [](auto& a) { return ad::repeat_rows(ad::slice_cols(ad::reshape(a, {1, 12}), 2, 5), 4); }},
      {"softmax0", [](auto& a) { return ad::softmax(a, 0); }},
      {"softmax1", [](auto& a) { return ad::softmax(a, 1); }},
      {"log_softmax", [](auto& a) { return ad::log_softmax(a, 1); }},
      {"pick", [](auto& a) { return ad::pick(a, {0, 3, 1}); }},
  };
  double worst_op = 0;
  std::string worst_name;
  auto track = [&](double e, const std::string& name) {
    if (e > worst_op) {
      worst_op = e;
      worst_name = name;
    }
  };
  for (std::uint64_t s = 0; s < kSeeds; ++s) {
    for (const auto& [name, op] : binary) {
      auto a = random_tensor({3, 4}, 100 + s, 0.5, 2.0), b = random_tensor({3, 4}, 200 + s, 0.5, 2.0);
      auto w = random_tensor(op(a, b).shape(), 300 + s, -1, 1, false);
      ad::Tape<double>::active().clear();
      track(max_gradient_error([&] { return ad::sum(ad::mul(op(a, b), w)); }, {a, b}), name);
    }
    for (const auto& [name, op] : unary) {
      auto a = random_tensor({3, 4}, 400 + s, 0.5, 2.0);
      auto w = random_tensor(op(a).shape(), 500 + s, -1, 1, false);
      ad::Tape<double>::active().clear();
      track(max_gradient_error([&] { return ad::sum(ad::mul(op(a), w)); }, {a}), name);
    }
    // Rotation kernel w.r.t. the points and the pivot.
    {
      Rng rng(600 + s);
      auto pts = random_tensor({6, 3}, 700 + s, -2, 2);
      auto piv = random_tensor({1, 3}, 800 + s);
      const auto dir = row(random_unit(rng).vec(), false);
      auto w = random_tensor({6, 3}, 900 + s, -1, 1, false);
      const double alpha = rng.uniform(-3, 3);
      ad::Tape<double>::active().clear();
      track(max_gradient_error([&] { return ad::sum(ad::mul(ad::rodrigues_rotate(pts, dir, piv, alpha), w)); },
                               {pts, piv}),
            "rodrigues");
    }
    // Loss terms.
    {
      Rng rng(s);
      std::vector<std::uint8_t> mask(16);
      for (auto& m : mask) m = rng.uniform() < 0.7;
      mask[3] = 1;
      std::vector<std::size_t> labels(16);
      for (auto& l : labels) l = rng.below(3);
      const auto logits = random_tensor({16, 3}, s, -2, 2);
      track(max_gradient_error([&] { return losses::seg_loss(logits, labels); }, {logits}), "L_seg");
      const auto pd = random_tensor({16, 3}, s + 1), gd = random_tensor({16, 3}, s + 2, -1, 1, false);
      track(max_gradient_error([&] { return losses::dir_loss(pd, gd, mask); }, {pd}), "L_dir");
      track(max_gradient_error([&] { return losses::pdir_loss(pd, gd, mask); }, {pd}), "L_pdir");
      const auto px = random_tensor({16, 1}, s + 3, 0, 2), gx = random_tensor({16, 1}, s + 4, 0, 2, false);
      track(max_gradient_error([&] { return losses::dist_loss(px, gx, mask); }, {px}), "L_dist");
      track(max_gradient_error([&] { return losses::state_loss(px, gx, mask); }, {px}), "L_state");
    }
  }
  o.check(worst_op < kOpTol, "op/loss gradient error " + fmt("%.2e", worst_op) + " (" + worst_name + ")");
  o.note("ops+terms worst " + fmt("%.2e", worst_op) + " (" + worst_name + ")");

  double worst_motion = 0;
  for (std::uint64_t s = 0; s < kSeeds; ++s) {
    Rng rng(1000 + s);
    const auto pts = random_points(15, rng);
    const Line3 gt{random_unit(rng), random_vec(rng)};
    const auto raw = row(random_unit(rng).vec());
    const auto pivot = row(random_vec(rng));
    const auto f = [&] { return losses::motion_loss<double>({pts}, {ad::normalize(raw, 1)}, {pivot}, {gt}); };
    worst_motion = std::max({worst_motion, max_gradient_error(f, {pivot}), max_gradient_error(f, {raw})});
  }
  o.check(worst_motion < kMotionTol, "motion loss gradient error " + fmt("%.2e", worst_motion));
  o.note("motion worst " + fmt("%.2e", worst_motion));
  return o;
}

// ---------------------------------------------------------------- 2

Outcome geometry_suite() {
  Outcome o;
  Rng rng(2);
  double rot = 0, dist = 0, rigid = 0, inverse = 0;
  for (int t = 0; t < 1000; ++t) {
    const Line3 axis{random_unit(rng), random_vec(rng, 2)};
    const double alpha = rng.uniform(-std::numbers::pi, std::numbers::pi);
    const Vec3 p = random_vec(rng, 3);
    const Vec3 ref = Eigen::AngleAxisd(alpha, axis.direction.vec()).toRotationMatrix() * (p - axis.pivot) + axis.pivot;
    rot = std::max(rot, (rodrigues_rotate(p, axis, alpha) - ref).norm());
    const Vec3 q = random_vec(rng, 3);
    dist = std::max(dist, std::abs(point_to_line_distance(p, q, axis.direction) - (p - q).cross(axis.direction.vec()).norm()));
  }
  for (int t = 0; t < 50; ++t) {
    const Line3 axis{random_unit(rng), random_vec(rng)};
    const double alpha = rng.uniform(-3, 3);
    const auto pts = random_points(30, rng, 2);
    const auto r = rodrigues_rotate(pts, axis, alpha);
    const auto back = rodrigues_rotate(r, axis, -alpha);
    for (std::size_t i = 0; i < pts.size(); ++i) {
      inverse = std::max(inverse, (back[i] - pts[i]).norm());
      for (std::size_t j = 0; j < i; ++j)
        rigid = std::max(rigid, std::abs((r[i] - r[j]).norm() - (pts[i] - pts[j]).norm()));
    }
  }
  o.check(rot < 1e-10, "rotation vs matrix oracle " + fmt("%.2e", rot));
  o.check(dist < 1e-12, "distance vs cross-product oracle " + fmt("%.2e", dist));
  o.check(rigid < 1e-10, "rigidity " + fmt("%.2e", rigid));
  o.check(inverse < 1e-10, "inverse rotation " + fmt("%.2e", inverse));
  o.note("rot " + fmt("%.1e", rot) + ", dist " + fmt("%.1e", dist) + ", rigid " + fmt("%.1e", rigid) + ", inverse " +
         fmt("%.1e", inverse));
  return o;
}

// ---------------------------------------------------------------- 3

Outcome motion_analytics() {
  Outcome o;
  Rng rng(3);
  double at_gt = 0, closed = 0, slide = 0;
  for (int t = 0; t < 50; ++t) {
    const auto pts = random_points(25, rng);
    const Line3 gt{random_unit(rng), random_vec(rng)};
    const Vec3 u = gt.direction.vec();
    at_gt = std::max(at_gt, losses::motion_loss<double>({pts}, {row(u)}, {row(gt.pivot)}, {gt}).item());
    const Vec3 off = u.unitOrthogonal() * rng.uniform(0.01, 0.5);
    const Vec3 spin = Eigen::AngleAxisd(rng.uniform(0, 6.28), u) * off;
    const double l = losses::motion_loss<double>({pts}, {row(u)}, {row(gt.pivot + spin)}, {gt}).item();
    closed = std::max(closed, std::abs(l - std::sqrt(2.0) * spin.norm()));
    const Vec3 pu = random_unit(rng).vec(), pq = random_vec(rng);
    const double base = losses::motion_loss<double>({pts}, {row(pu)}, {row(pq)}, {gt}).item();
    for (double s : {-3.0, -0.4, 0.9, 4.0})
      slide = std::max(slide, std::abs(losses::motion_loss<double>({pts}, {row(pu)}, {row(pq + s * pu)}, {gt}).item() - base));
  }
  o.check(at_gt < 1e-12, "zero at ground truth " + fmt("%.2e", at_gt));
  o.check(closed < 1e-9, "sqrt(2)|t| closed form " + fmt("%.2e", closed));
  o.check(slide < 1e-10, "pivot slide invariance " + fmt("%.2e", slide));
  o.note("gt " + fmt("%.1e", at_gt) + ", closed form " + fmt("%.1e", closed) + ", slide " + fmt("%.1e", slide));
  return o;
}

// ---------------------------------------------------------------- 4

JointFields oracle_fields(const Line3& axis, double state, std::size_t n, Rng& rng) {
  JointFields f;
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3 p = random_vec(rng);
    const auto pr = project_point_to_line(p, axis);
    f.points.push_back(p);
    f.dir.push_back(axis.direction.vec());
    f.pdir.push_back(pr.pdir);
    f.dist.push_back(pr.distance);
    f.state.push_back(state);
  }
  return f;
}

Outcome voting_oracle() {
  Outcome o;
  Rng rng(4);
  double dir = 0, pos = 0;
  for (int t = 0; t < 100; ++t) {
    const Line3 axis{random_unit(rng), random_vec(rng, 0.5)};
    const auto r = double_vote({oracle_fields(axis, rng.uniform(0, 2), 200, rng)}, VotingConfig{});
    for (const auto& v : {r.coarse[0], r.fine[0]}) {
      dir = std::max(dir, direction_error(v.direction, axis.direction));
      pos = std::max(pos, position_error(v.axis(), axis));
    }
  }
  o.check(dir < 1e-7, "oracle direction error " + fmt("%.2e", dir) + " deg");
  o.check(pos < 1e-9, "oracle axis distance " + fmt("%.2e", pos));

  // Corrupt only points well outside the fine band.
  int wins = 0;
  const int trials = 200;
  for (int t = 0; t < trials; ++t) {
    const Line3 axis{random_unit(rng), random_vec(rng, 0.5)};
    auto f = oracle_fields(axis, 1.0, 200, rng);
    std::vector<double> d(f.size());
    for (std::size_t i = 0; i < f.size(); ++i) d[i] = f.dist[i];
    auto sorted = d;
    std::nth_element(sorted.begin(), sorted.begin() + 99, sorted.end());
    const double m = sorted[99];
    for (std::size_t i = 0; i < f.size(); ++i) {
      if (d[i] <= 1.65 * m) continue;
      f.dir[i] = (f.dir[i] + 0.8 * Vec3(rng.normal(), rng.normal(), rng.normal())).normalized();
      f.dist[i] *= rng.uniform(0.5, 1.5);
      f.state[i] += 0.5 * rng.normal();
    }
    const auto r = double_vote({f}, VotingConfig{});
    wins += direction_error(r.fine[0].direction, axis.direction) < direction_error(r.coarse[0].direction, axis.direction);
  }
  o.check(wins >= 190, "fine beats coarse in " + std::to_string(wins) + "/200");
  o.note("oracle dir " + fmt("%.1e", dir) + " deg, axis " + fmt("%.1e", pos) + ", fine<coarse " +
         std::to_string(wins) + "/200");
  return o;
}

// ---------------------------------------------------------------- 5, 6

struct Surrogate {
  std::string category;
  SplitCounts counts;
  std::size_t n_points;
  std::size_t epochs;
};

std::vector<StoredSample> split_of(const DatasetManifest& m, const std::string& s, int joints) {
  return load_split(m, s, joints);
}

DatasetManifest make_data(const Surrogate& s, std::uint64_t seed, const fs::path& dir) {
  return generate_dataset({s.category, s.counts, seed, s.n_points, dir.string(), 1});
}

RunConfig surrogate_config(const Surrogate& s, std::uint64_t seed) {
  RunConfig rc;
  rc.category = s.category;
  rc.seed = seed;
  rc.model.d_e = 64;
  rc.train.epochs = s.epochs;
  rc.train.batch = 2;
  rc.train.adam.lr = 1e-3;
  rc.verbose = false;
  return rc;
}

CaptModel<float> build_model(const RunConfig& rc, const DatasetManifest& m) {
  const auto cat = make_category(m.category);
  ModelConfig mc = rc.model;
  mc.n = m.n_points;
  mc.n_links = static_cast<std::size_t>(cat.max_links);
  mc.n_joints = static_cast<std::size_t>(cat.max_joints);
  return CaptModel<float>(mc, rc.seed);
}

Outcome laptop_surrogate(const fs::path& work) {
  Outcome o;
  const Surrogate s{"laptop", {200, 40, 20}, 512, 110};
  const auto start = std::chrono::steady_clock::now();
  const auto m = make_data(s, 2024, work / "laptop");
  const auto rc = surrogate_config(s, 1);
  auto model = build_model(rc, m);
  const auto tr = train_model(model, split_of(m, "train", 1), split_of(m, "val", 1), rc);
  const auto ev = evaluate(model, split_of(m, "test", 1), rc.voting);
  const double minutes = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count() / 60;
  const auto& j = ev.fine.joints[0];
  o.check(ev.fine.pa >= 0.90, "PA " + fmt("%.3f", ev.fine.pa) + " < 0.90");
  o.check(j.med_dir <= 15.0, "direction MED " + fmt("%.2f", j.med_dir) + " > 15 deg");
  o.check(j.aed <= 0.10, "AED " + fmt("%.4f", j.aed) + " > 0.10");
  o.check(j.med_state <= 20.0, "state MED " + fmt("%.2f", j.med_state) + " > 20 deg");
  o.check(minutes <= 30.0, "runtime " + fmt("%.1f", minutes) + " min > 30");
  o.note("PA " + fmt("%.3f", ev.fine.pa) + ", MED " + fmt("%.2f", j.med_dir) + " deg, AED " + fmt("%.4f", j.aed) +
         ", state MED " + fmt("%.2f", j.med_state) + " deg, " + std::to_string(s.epochs) + " epochs, best " +
         std::to_string(tr.best_epoch + 1) + ", " + fmt("%.1f", minutes) + " min");
  return o;
}

Outcome eyeglasses_ablation(const fs::path& work) {
  Outcome o;
  const Surrogate s{"eyeglasses", {100, 20, 20}, 256, 60};
  int holds = 0;
  std::string detail;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto m = make_data(s, 500 + seed, work / ("eyeglasses" + std::to_string(seed)));
    const auto train = split_of(m, "train", 2), val = split_of(m, "val", 2), test = split_of(m, "test", 2);
    double med[2];
    for (int plain = 0; plain < 2; ++plain) {
      auto rc = surrogate_config(s, seed);
      if (plain) rc.weights.motion = 0;
      auto model = build_model(rc, m);
      train_model(model, train, val, rc);
      const auto ev = evaluate(model, test, rc.voting);
      med[plain] = plain ? ev.coarse.mean.med_dir : ev.fine.mean.med_dir;
    }
    holds += med[0] <= med[1];
    detail += (seed > 1 ? ", " : "") + fmt("%.2f", med[0]) + "/" + fmt("%.2f", med[1]);
  }
  o.check(holds >= 3, "ordering held in " + std::to_string(holds) + "/5 seeds");
  o.note("MED full/plain per seed: " + detail + "; held " + std::to_string(holds) + "/5");
  return o;
}

// ---------------------------------------------------------------- 7

int run_cli(const std::string& args) {
  const std::string cmd = std::string(CAPT_BINARY) + " " + args + " >/dev/null 2>&1";
  const int st = std::system(cmd.c_str());
  return WIFEXITED(st) ? WEXITSTATUS(st) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string tree_bytes(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::string all;
  for (const auto& f : files) all += fs::relative(f, dir).string() + "\n" + slurp(f);
  return all;
}

Outcome equivariance_and_determinism(const fs::path& work) {
  Outcome o;
  ModelConfig cfg;
  cfg.n = 256;
  cfg.d_e = 32;
  cfg.n_links = 3;
  cfg.n_joints = 2;
  const CaptModel<double> model(cfg, 11);
  double worst = 0;
  for (std::uint64_t s = 0; s < 5; ++s) {
    const auto rec = generate_sample(make_category("eyeglasses"), 40 + s, cfg.n);
    std::vector<std::size_t> perm(rec.size());
    std::iota(perm.begin(), perm.end(), 0);
    Rng rng(s);
    for (std::size_t i = perm.size() - 1; i > 0; --i) std::swap(perm[i], perm[rng.below(i + 1)]);
    std::vector<Vec3> shuffled(rec.size());
    for (std::size_t i = 0; i < perm.size(); ++i) shuffled[i] = rec.points[perm[i]];
    ad::NoGradGuard off;
    const auto a = model.forward(rec.points), b = model.forward(shuffled);
    auto cmp = [&](const Tensor<double>& x, const Tensor<double>& y) {
      for (std::size_t i = 0; i < perm.size(); ++i)
        for (std::size_t c = 0; c < x.cols(); ++c) worst = std::max(worst, std::abs(x.at(perm[i], c) - y.at(i, c)));
    };
    cmp(a.seg_logits, b.seg_logits);
    for (std::size_t j = 0; j < cfg.n_joints; ++j) {
      cmp(a.dir[j], b.dir[j]);
      cmp(a.pdir[j], b.pdir[j]);
      cmp(a.dist[j], b.dist[j]);
      cmp(a.state[j], b.state[j]);
    }
  }
  o.check(worst < 1e-5, "permutation equivariance " + fmt("%.2e", worst));

  const fs::path cfg_path = work / "cli.json";
  std::ofstream(cfg_path) << R"({"model": {"d_e": 16, "neighbors": 8, "hidden": [16]}, "optim": {"epochs": 2, "batch": 4}})";
  bool same = true;
  std::string outputs[2];
  for (int rep = 0; rep < 2; ++rep) {
    const fs::path d = work / ("cli" + std::to_string(rep));
    const std::string g = "--threads 1 --seed 9 --config " + cfg_path.string() + " ";
    const std::string data = (d / "data").string(), ck = (d / "m.bin").string();
    bool ok = run_cli(g + "gen --category eyeglasses --splits 12 4 4 --points 128 --out " + data) == 0;
    ok = ok && run_cli(g + "train -q --data " + data + " --checkpoint " + ck) == 0;
    ok = ok && run_cli(g + "eval --data " + data + " --checkpoint " + ck + " --report " + (d / "report").string()) == 0;
    const auto sample = open_dataset(data).paths("test")[0];
    ok = ok && run_cli(g + "infer --checkpoint " + ck + " --input " + sample + " --json " + (d / "infer.json").string() +
                       " --ply " + (d / "infer.ply").string()) == 0;
    o.check(ok, "CLI run " + std::to_string(rep) + " exited non-zero");
    if (!ok) return o;
    outputs[rep] = tree_bytes(d);
  }
  same = outputs[0] == outputs[1];
  o.check(same, "CLI outputs differ between identical runs");
  o.note("forward worst " + fmt("%.1e", worst) + ", gen/train/eval/infer byte-identical: " + (same ? "yes" : "no"));
  return o;
}

// ---------------------------------------------------------------- 8

Outcome metric_suite() {
  Outcome o;
  Rng rng(8);
  double worst = 0;
  for (int t = 0; t < 500; ++t) {
    const int k = 2 + static_cast<int>(rng.below(5));
    std::vector<std::vector<int>> cm(k, std::vector<int>(k));
    for (auto& r : cm)
      for (auto& c : r) c = static_cast<int>(rng.below(15));
    cm[0][0] += 1;
    std::vector<int> pred, gt;
    double total = 0, diag = 0, iou = 0;
    int present = 0;
    for (int a = 0; a < k; ++a) {
      double rsum = 0, csum = 0;
      for (int b = 0; b < k; ++b) {
        for (int n = 0; n < cm[a][b]; ++n) {
          gt.push_back(a);
          pred.push_back(b);
        }
        rsum += cm[a][b];
        csum += cm[b][a];
      }
      total += rsum;
      diag += cm[a][a];
      if (rsum > 0) {
        ++present;
        iou += cm[a][a] / (rsum + csum - cm[a][a]);
      }
    }
    const auto s = seg_metrics(pred, gt);
    worst = std::max({worst, std::abs(s.pa - diag / total), std::abs(s.miou - iou / present)});
  }
  o.check(worst < 1e-12, "PA/mIoU oracle " + fmt("%.2e", worst));

  std::vector<SampleEval> rows;
  for (int i = 0; i < 200; ++i) rows.push_back({1, 1, {{rng.uniform(0, 30), rng.uniform(0, 0.1), rng.uniform(0, 30)}}});
  bool monotone = true;
  double prev_dir = -1, prev_pos = -1;
  for (int step = 0; step <= 100; ++step) {
    Thresholds th;
    th.dir_deg[0] = 0.35 * step;
    th.pos[0] = 0.0012 * step;
    const auto r = aggregate(rows, th).joints[0];
    monotone = monotone && r.ap5_dir >= prev_dir && r.ap1_pos >= prev_pos;
    prev_dir = r.ap5_dir;
    prev_pos = r.ap1_pos;
  }
  o.check(monotone && prev_dir == 1.0 && prev_pos == 1.0, "AP monotone in threshold");

  const Thresholds th;
  SampleEval a{1, 1, {{0, 0.005, 0}}}, b{1, 1, {{0, 0.03, 0}}}, c{1, 1, {{0, 0.07, 0}}};
  const auto r = aggregate({a, b, c}).joints[0];
  const bool mapping = th.pos[0] == 0.01 && th.pos[1] == 0.05 && std::abs(r.ap1_pos - 1.0 / 3) < 1e-15 &&
                       std::abs(r.ap5_pos - 2.0 / 3) < 1e-15;
  const auto j = report_json(aggregate({a, b, c}));
  o.check(mapping && j["joints"][0].contains("AP1_pos") && j["joints"][0].contains("AP5_pos"),
          "AP1 -> 0.01, AP5 -> 0.05 position mapping");
  o.note("oracle " + fmt("%.1e", worst) + ", monotone " + (monotone ? "yes" : "no") + ", AP1/AP5 mapping " +
         (mapping ? "ok" : "wrong"));
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance suite"};
  std::vector<int> only;
  std::string keep;
  app.add_option("--only", only, "criteria to run")->delimiter(',');
  app.add_option("--keep", keep, "work directory to keep instead of a temporary one");
  CLI11_PARSE(app, argc, argv);

  tune_allocator();
  const fs::path work =
      keep.empty() ? fs::temp_directory_path() / ("capt_acceptance_" + std::to_string(::getpid())) : fs::path(keep);
  fs::create_directories(work);

  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"gradient suite", gradient_suite},
      {"geometry suite", geometry_suite},
      {"motion-loss analytics", motion_analytics},
      {"voting oracle", voting_oracle},
      {"toy-laptop training surrogate", [&] { return laptop_surrogate(work); }},
      {"toy-eyeglasses motion/voting ablation", [&] { return eyeglasses_ablation(work); }},
      {"permutation equivariance and CLI determinism", [&] { return equivariance_and_determinism(work); }},
      {"metric suite", metric_suite},
  };
  const double limits_s[] = {60, 10, 0, 0, 0, 0, 0, 0};
  const std::set<int> selected(only.begin(), only.end());
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!selected.empty() && !selected.count(id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome out;
    try {
      out = criteria[i].second();
    } catch (const std::exception& e) {
      out.check(false, std::string("exception: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (limits_s[i] > 0) out.check(secs < limits_s[i], "runtime " + fmt("%.1f", secs) + " s over " + fmt("%.0f", limits_s[i]) + " s");
    failed += !out.pass;
    std::string notes;
    for (const auto& n : out.notes) notes += (notes.empty() ? "" : "; ") + n;
    std::printf("%s  criterion %d  %-46s %7.1f s  %s\n", out.pass ? "PASS" : "FAIL", id, criteria[i].first, secs,
                notes.c_str());
    std::fflush(stdout);
  }
  if (keep.empty()) fs::remove_all(work);
  std::printf("%d criteria failed\n", failed);
  return failed == 0 ? 0 : 1;
}
