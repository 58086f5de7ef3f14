#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "capt/dataset.hpp"
#include "capt/losses.hpp"
#include "capt/model.hpp"
#include "gradcheck.hpp"

using namespace capt;
using ad::Tensor;

namespace {

std::vector<Vec3> random_cloud(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Vec3> pts(n);
  for (auto& p : pts) p = Vec3(rng.uniform(-1, 1), rng.uniform(-0.5, 0.5), rng.uniform(-0.2, 0.2));
  return pts;
}

Tensor<double> cloud_tensor(const std::vector<Vec3>& pts) {
  std::vector<double> v;
  for (const auto& p : pts) v.insert(v.end(), {p.x(), p.y(), p.z()});
  return Tensor<double>({pts.size(), 3}, std::move(v));
}

ModelConfig small_config(std::size_t links = 3, std::size_t joints = 2) {
  ModelConfig c;
  c.n = 64;
  c.d_e = 16;
  c.neighbors = 8;
  c.hidden = {32, 16};
  c.n_links = links;
  c.n_joints = joints;
  return c;
}

std::vector<std::size_t> permutation(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), 0);
  Rng rng(seed);
  for (std::size_t i = n - 1; i > 0; --i) std::swap(p[i], p[rng.below(i + 1)]);
  return p;
}

double max_row_permuted_diff(const Tensor<double>& a, const Tensor<double>& b, const std::vector<std::size_t>& perm) {
  double worst = 0;
  for (std::size_t i = 0; i < perm.size(); ++i)
    for (std::size_t c = 0; c < a.cols(); ++c) worst = std::max(worst, std::abs(b.at(i, c) - a.at(perm[i], c)));
  return worst;
}

}  // namespace

TEST(ModelConfig, JsonRoundTripAndValidation) {
  ModelConfig c = small_config();
  c.canonicalize = false;
  const auto back = model_config_from_json(model_config_to_json(c));
  EXPECT_EQ(back.d_e, c.d_e);
  EXPECT_EQ(back.hidden, c.hidden);
  EXPECT_EQ(back.canonicalize, false);
  auto j = model_config_to_json(c);
  j["layers"] = 3;
  EXPECT_THROW(model_config_from_json(j), ConfigError);
  j = model_config_to_json(c);
  j["d_e"] = "wide";
  EXPECT_THROW(model_config_from_json(j), ConfigError);
}

TEST(Embed, ShapeAndPermutationEquivariance) {
  CaptModel<double> m(small_config(), 1);
  const auto pts = random_cloud(64, 2);
  const auto out = m.embed(cloud_tensor(pts));
  EXPECT_EQ(out.shape(), (ad::Shape{64, 16}));
  const auto perm = permutation(64, 3);
  std::vector<Vec3> shuffled(64);
  for (std::size_t i = 0; i < 64; ++i) shuffled[i] = pts[perm[i]];
  EXPECT_LT(max_row_permuted_diff(out, m.embed(cloud_tensor(shuffled)), perm), 1e-12);
  EXPECT_THROW(m.embed(cloud_tensor(random_cloud(4, 1))), ContractError);
}

TEST(Embed, TranslationOnlyReachesPointwisePathway) {
  CaptModel<double> m(small_config(), 4);
  const auto pts = random_cloud(64, 5);
  auto moved = pts;
  for (auto& p : moved) p += Vec3(0.3, -0.7, 0.2);
  const auto a = m.embed(cloud_tensor(pts)), b = m.embed(cloud_tensor(moved));
  double diff = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) diff = std::max(diff, std::abs(a.at(i) - b.at(i)));
  EXPECT_GT(diff, 1e-3);
  // With the pointwise weights frozen at zero only neighbor-relative features remain.
  for (auto& [name, t] : m.named_parameters())
    if (name.rfind("embed.point", 0) == 0)
      for (auto& v : t.mutable_values()) v = 0;
  const auto c = m.embed(cloud_tensor(pts)), d = m.embed(cloud_tensor(moved));
  for (std::size_t i = 0; i < c.numel(); ++i) EXPECT_NEAR(c.at(i), d.at(i), 1e-12);
}

TEST(Encode, OutputWidthAndAttentionRows) {
  ModelConfig c = small_config();
  c.d_e = 64;
  CaptModel<double> m(c, 6);
  const auto x = capt::testing::random_tensor({256, 64}, 7, -1, 1, false);
  std::vector<Tensor<double>> attn;
  const auto fe = m.encode(x, &attn);
  EXPECT_EQ(fe.shape(), (ad::Shape{256, 256}));
  ASSERT_EQ(attn.size(), 4u);
  for (const auto& a : attn)
    for (std::size_t r = 0; r < 256; ++r) {
      double s = 0;
      for (std::size_t k = 0; k < 256; ++k) s += a.at(r, k);
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
}

TEST(Encode, PermutationEquivariance) {
  CaptModel<double> m(small_config(), 8);
  const auto x = capt::testing::random_tensor({40, 16}, 9, -1, 1, false);
  const auto perm = permutation(40, 10);
  std::vector<double> pv;
  for (auto i : perm)
    for (std::size_t c = 0; c < 16; ++c) pv.push_back(x.at(i, c));
  EXPECT_LT(max_row_permuted_diff(m.encode(x), m.encode(Tensor<double>({40, 16}, pv)), perm), 1e-10);
}

TEST(Decode, SegmentationShapeAndSpread) {
  CaptModel<double> m(small_config(3, 2), 11);
  const auto pts = random_cloud(512, 12);
  const auto pred = m.forward(pts);
  EXPECT_EQ(pred.seg_logits.shape(), (ad::Shape{512, 3}));
  std::vector<int> counts(3, 0);
  for (int l : pred.labels()) {
    ASSERT_GE(l, 0);
    ASSERT_LT(l, 3);
    ++counts[l];
  }
  // Untrained weights should not funnel every point into one class.
  EXPECT_LT(*std::max_element(counts.begin(), counts.end()), 512 * 0.9);
}

TEST(Decode, HeadConstraints) {
  CaptModel<double> m(small_config(3, 2), 13);
  const auto pred = m.forward(random_cloud(100, 14));
  ASSERT_EQ(pred.joint_count(), 2u);
  for (std::size_t j = 0; j < 2; ++j) {
    EXPECT_EQ(pred.dir[j].shape(), (ad::Shape{100, 3}));
    EXPECT_EQ(pred.pivot(j).shape(), (ad::Shape{100, 3}));
    for (std::size_t i = 0; i < 100; ++i) {
      const Vec3 d(pred.dir[j].at(i, 0), pred.dir[j].at(i, 1), pred.dir[j].at(i, 2));
      const Vec3 p(pred.pdir[j].at(i, 0), pred.pdir[j].at(i, 1), pred.pdir[j].at(i, 2));
      EXPECT_NEAR(d.norm(), 1.0, 1e-6);
      EXPECT_NEAR(p.norm(), 1.0, 1e-6);
      EXPECT_GE(pred.dist[j].at(i), 0.0);
    }
  }
}

TEST(Forward, EyeglassesShapesAndDeterminism) {
  ModelConfig c = small_config(3, 2);
  c.n = 512;
  c.d_e = 64;
  c.neighbors = 16;
  c.hidden = {128, 64};
  CaptModel<float> m(c, 15);
  const auto pts = random_cloud(512, 16);
  const auto a = m.forward(pts), b = m.forward(pts);
  EXPECT_EQ(a.seg_logits.shape(), (ad::Shape{512, 3}));
  ASSERT_EQ(a.dir.size(), 2u);
  EXPECT_EQ(a.state[1].shape(), (ad::Shape{512, 1}));
  for (std::size_t j = 0; j < 2; ++j)
    for (std::size_t i = 0; i < a.dir[j].numel(); ++i) EXPECT_EQ(a.dir[j].at(i), b.dir[j].at(i));
}

TEST(Forward, PermutationEquivariance) {
  for (bool canon : {false, true}) {
    ModelConfig c = small_config(3, 2);
    c.canonicalize = canon;
    CaptModel<double> m(c, 17);
    const auto pts = random_cloud(80, 18);
    const auto perm = permutation(80, 19);
    std::vector<Vec3> shuffled(80);
    for (std::size_t i = 0; i < 80; ++i) shuffled[i] = pts[perm[i]];
    const auto a = m.forward(pts), b = m.forward(shuffled);
    EXPECT_LT(max_row_permuted_diff(a.seg_logits, b.seg_logits, perm), 1e-5);
    for (std::size_t j = 0; j < 2; ++j) {
      EXPECT_LT(max_row_permuted_diff(a.dir[j], b.dir[j], perm), 1e-5);
      EXPECT_LT(max_row_permuted_diff(a.pdir[j], b.pdir[j], perm), 1e-5);
      EXPECT_LT(max_row_permuted_diff(a.dist[j], b.dist[j], perm), 1e-5);
      EXPECT_LT(max_row_permuted_diff(a.state[j], b.state[j], perm), 1e-5);
    }
  }
}

// Canonicalized predictions follow a rigid rotation of the input.
TEST(Forward, CanonicalFrameIsRotationEquivariant) {
  CaptModel<double> m(small_config(3, 2), 20);
  const auto pts = random_cloud(64, 21);
  const Eigen::Matrix3d r = Eigen::AngleAxisd(0.7, Vec3(1, 2, 3).normalized()).toRotationMatrix();
  std::vector<Vec3> rotated;
  for (const auto& p : pts) rotated.push_back(r * p);
  const auto a = m.forward(pts), b = m.forward(rotated);
  for (std::size_t i = 0; i < 64; ++i) {
    const Vec3 da(a.dir[0].at(i, 0), a.dir[0].at(i, 1), a.dir[0].at(i, 2));
    const Vec3 db(b.dir[0].at(i, 0), b.dir[0].at(i, 1), b.dir[0].at(i, 2));
    EXPECT_LT((r * da - db).norm(), 1e-8);
    EXPECT_NEAR(a.dist[0].at(i), b.dist[0].at(i), 1e-8);
  }
}

TEST(Model, CheckpointRoundTrip) {
  CaptModel<float> a(small_config(), 22), b(small_config(), 23);
  const auto bytes = ad::encode_checkpoint(a.to_arrays());
  b.load_arrays(ad::decode_checkpoint(bytes, "mem"));
  EXPECT_EQ(ad::encode_checkpoint(b.to_arrays()), bytes);
  CaptModel<float> other(small_config(2, 1), 24);
  EXPECT_THROW(other.load_arrays(a.to_arrays()), ConfigError);
}

namespace {

struct TinyProblem {
  SampleRecord rec;
  PointwiseTargets targets;
};

TinyProblem tiny_problem(std::size_t n, std::uint64_t seed) {
  const auto cat = make_category("eyeglasses");
  TinyProblem p;
  p.rec = generate_sample(cat, seed, 64);
  p.rec.points.resize(n);
  p.rec.labels.resize(n);
  p.targets = compute_pointwise_targets(p.rec, cat.max_joints);
  return p;
}

}  // namespace

TEST(Model, EveryParameterReceivesGradient) {
  CaptModel<double> m(small_config(3, 2), 25);
  std::vector<bool> seen(m.parameters().size(), false);
  for (std::uint64_t s = 0; s < 4; ++s) {
    const auto p = tiny_problem(64, 100 + s);
    m.zero_grad();
    const auto pred = m.forward(p.rec.points);
    ad::backward(losses::compute_losses(pred, p.rec, p.targets).total);
    const auto params = m.parameters();
    for (std::size_t k = 0; k < params.size(); ++k)
      for (double g : params[k].grad())
        if (g != 0.0) seen[k] = true;
  }
  const auto names = m.named_parameters();
  for (std::size_t k = 0; k < seen.size(); ++k) EXPECT_TRUE(seen[k]) << names[k].first;
}

// Total loss on a 32-point cloud: every parameter gradient against central
// differences.
TEST(Model, FullLossGradientMatchesFiniteDifferences) {
  ModelConfig c;
  c.n = 32;
  c.d_e = 8;
  c.neighbors = 4;
  c.hidden = {8};
  c.n_links = 3;
  c.n_joints = 2;
  CaptModel<double> m(c, 26);
  const auto p = tiny_problem(32, 27);
  const auto f = [&] { return losses::compute_losses(m.forward(p.rec.points), p.rec, p.targets).total; };
  EXPECT_LT(capt::testing::max_gradient_error(f, m.parameters(), 1e-6, 1e-3), 1e-4);
}
