#pragma once

// Per-point transformer: kNN embedding, four offset-attention layers whose
// outputs are concatenated, and two decoder branches (segmentation and
// articulation fields) sized for the category maximum link/joint counts.

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "capt/checkpoint.hpp"
#include "capt/geometry.hpp"
#include "capt/ops.hpp"
#include "capt/rng.hpp"

namespace capt {

inline constexpr std::size_t kAttentionLayers = 4;

struct ModelConfig {
  std::size_t n = 1024;
  std::size_t d = 3;
  std::size_t d_e = 64;
  std::size_t n_links = 2;
  std::size_t n_joints = 1;
  std::size_t layers = kAttentionLayers;
  std::size_t neighbors = 16;
  std::vector<std::size_t> hidden = {128, 64};
  // Rotate the centered input into its principal-axis frame before the
  // network and rotate predicted vectors back afterwards.
  bool canonicalize = true;

  void validate() const {
    if (d != 3) throw ConfigError("model input dimension must be 3");
    if (layers != kAttentionLayers) throw ConfigError("encoder has exactly 4 attention layers");
    if (d_e < 4 || d_e % 4 != 0) throw ConfigError("d_e must be a positive multiple of 4");
    if (n_links < 1 || n_joints < 1) throw ConfigError("model needs at least one link and one joint channel");
    if (neighbors < 1) throw ConfigError("neighbor count must be positive");
    if (n < neighbors) throw ConfigError("n must be at least the neighbor count");
    if (hidden.empty()) throw ConfigError("decoder needs at least one hidden layer");
    for (auto h : hidden)
      if (h == 0) throw ConfigError("decoder hidden widths must be positive");
  }
};

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
  return {{"n", c.n},         {"d", c.d},           {"d_e", c.d_e},
          {"n_links", c.n_links}, {"n_joints", c.n_joints}, {"layers", c.layers},
          {"neighbors", c.neighbors}, {"hidden", c.hidden}, {"canonicalize", c.canonicalize}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.n = j.value("n", c.n);
    c.d = j.value("d", c.d);
    c.d_e = j.value("d_e", c.d_e);
    c.n_links = j.value("n_links", c.n_links);
    c.n_joints = j.value("n_joints", c.n_joints);
    c.layers = j.value("layers", c.layers);
    c.neighbors = j.value("neighbors", c.neighbors);
    c.hidden = j.value("hidden", c.hidden);
    c.canonicalize = j.value("canonicalize", c.canonicalize);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

// Per-point outputs. Vector fields are n x 3 per joint channel, scalars n x 1.
template <class T>
struct PerPointPrediction {
  ad::Tensor<T> seg_logits;  // n x n_links
  std::vector<ad::Tensor<T>> dir, dist, pdir, state;
  ad::Tensor<T> points;  // the input cloud, n x 3, constant

  [[nodiscard]] std::size_t size() const { return points.rows(); }
  [[nodiscard]] std::size_t joint_count() const { return dir.size(); }

  // Per-point pivot estimate p + dist * pdir.
  [[nodiscard]] ad::Tensor<T> pivot(std::size_t j) const { return ad::add(points, ad::mul(dist.at(j), pdir.at(j))); }

  [[nodiscard]] std::vector<int> labels() const {
    const std::size_t n = seg_logits.rows(), c = seg_logits.cols();
    std::vector<int> out(n);
    const auto v = seg_logits.values();
    for (std::size_t i = 0; i < n; ++i)
      out[i] = static_cast<int>(std::max_element(v.begin() + i * c, v.begin() + (i + 1) * c) - (v.begin() + i * c));
    return out;
  }
};

template <class T>
struct Linear {
  ad::Tensor<T> w;  // in x out
  ad::Tensor<T> b;  // 1 x out

  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng, double gain = std::sqrt(6.0), bool bias = true) {
    const double bound = gain / std::sqrt(static_cast<double>(in));
    std::vector<T> wv(in * out);
    for (auto& x : wv) x = static_cast<T>(rng.uniform(-bound, bound));
    w = ad::Tensor<T>({in, out}, std::move(wv), true);
    if (bias) {
      const double bb = 1.0 / std::sqrt(static_cast<double>(in));
      std::vector<T> bv(out);
      for (auto& x : bv) x = static_cast<T>(rng.uniform(-bb, bb));
      b = ad::Tensor<T>({1, out}, std::move(bv), true);
    }
  }

  [[nodiscard]] bool has_bias() const { return b.numel() > 0 && b.rank() == 2; }

  [[nodiscard]] ad::Tensor<T> operator()(const ad::Tensor<T>& x) const {
    auto y = ad::matmul(x, w);
    return has_bias() ? ad::add(y, b) : y;
  }
};

namespace detail {

// Indices of the k nearest points (self included), row-major n x k.
inline std::vector<std::size_t> knn(std::span<const double> xyz, std::size_t n, std::size_t k) {
  std::vector<std::size_t> out(n * k);
  std::vector<std::pair<double, std::size_t>> d(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const double dx = xyz[3 * j] - xyz[3 * i], dy = xyz[3 * j + 1] - xyz[3 * i + 1], dz = xyz[3 * j + 2] - xyz[3 * i + 2];
      d[j] = {dx * dx + dy * dy + dz * dz, j};
    }
    std::partial_sort(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(k), d.end());
    for (std::size_t t = 0; t < k; ++t) out[i * k + t] = d[t].second;
  }
  return out;
}

// Principal-axis frame of a centered cloud: rows are the axes, signs fixed
// by the third moment, right-handed.
inline Eigen::Matrix3d principal_frame(std::span<const Vec3> centered) {
  Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
  for (const auto& p : centered) cov += p * p.transpose();
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(cov);
  Eigen::Matrix3d r;
  for (int a = 0; a < 2; ++a) {
    Vec3 e = es.eigenvectors().col(2 - a);
    double skew = 0.0;
    for (const auto& p : centered) skew += std::pow(p.dot(e), 3);
    if (skew < 0) e = -e;
    r.row(a) = e.transpose();
  }
  r.row(2) = r.row(0).cross(r.row(1));
  return r;
}

// Proper rotations that swap or flip the two leading principal axes. These
// are the frame ambiguities PCA cannot resolve on near-symmetric shapes.
inline const std::array<Eigen::Matrix3d, 8>& frame_symmetries() {
  static const std::array<Eigen::Matrix3d, 8> group = [] {
    std::array<Eigen::Matrix3d, 8> g;
    std::size_t k = 0;
    for (int swap = 0; swap < 2; ++swap)
      for (int s0 : {1, -1})
        for (int s1 : {1, -1}) {
          Eigen::Matrix3d m = Eigen::Matrix3d::Zero();
          m(0, swap) = s0;
          m(1, 1 - swap) = s1;
          m.row(2) = m.row(0).cross(m.row(1));
          g[k++] = m;
        }
    return g;
  }();
  return group;
}

}  // namespace detail

template <class T>
class CaptModel {
 public:
  using Tensor = ad::Tensor<T>;

  CaptModel(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(seed);
    const std::size_t de = cfg_.d_e, half = de / 2, dk = de / 4;
    point_embed_ = Linear<T>(3, half, rng);
    neighbor_embed_ = Linear<T>(3, half, rng);
    fuse_ = Linear<T>(de, de, rng);
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
      Layer layer;
      layer.q = Linear<T>(de, dk, rng, std::sqrt(3.0), false);
      layer.k = Linear<T>(de, dk, rng, std::sqrt(3.0), false);
      layer.v = Linear<T>(de, de, rng, std::sqrt(3.0));
      layer.out = Linear<T>(de, de, rng, std::sqrt(3.0));
      layers_.push_back(std::move(layer));
    }
    seg_ = make_branch(cfg_.n_links, rng);
    arti_ = make_branch(8 * cfg_.n_joints, rng);
  }

  [[nodiscard]] const ModelConfig& config() const { return cfg_; }

  // Pointwise linear map of coordinates plus max-pooled kNN relative positions.
  [[nodiscard]] Tensor embed(const Tensor& pts) const {
    const std::size_t n = pts.rows(), k = cfg_.neighbors;
    if (pts.cols() != 3) throw DimensionError("embed: points must be n x 3");
    if (n < k) throw ContractError("embed: fewer points than neighbors");
    const auto xyz = pts.values();
    std::vector<double> xd(xyz.begin(), xyz.end());
    const auto idx = detail::knn(xd, n, k);
    std::vector<T> rel(n * k * 3);
    double spacing = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t t = 0; t < k; ++t) {
        double sq = 0.0;
        for (int c = 0; c < 3; ++c) {
          const double d = xd[idx[i * k + t] * 3 + c] - xd[i * 3 + c];
          rel[(i * k + t) * 3 + c] = static_cast<T>(d);
          sq += d * d;
        }
        spacing += std::sqrt(sq);
      }
    // Offsets in units of the mean neighbor distance, so thin structures
    // are not drowned out by the bias terms.
    spacing /= static_cast<double>(n * (k > 1 ? k - 1 : 1));
    if (spacing > 0)
      for (auto& v : rel) v = static_cast<T>(v / spacing);
    const Tensor local = ad::relu(point_embed_(pts));
    const Tensor neigh = ad::group_max(ad::relu(neighbor_embed_(Tensor({n * k, 3}, std::move(rel)))), k);
    return ad::relu(fuse_(ad::concat<T>({local, neigh}, 1)));
  }

  // Four offset-attention layers; returns their outputs concatenated (n x 4d_e).
  [[nodiscard]] Tensor encode(const Tensor& x0, std::vector<Tensor>* attention = nullptr) const {
    const T inv_sqrt_dk = T(1) / std::sqrt(static_cast<T>(cfg_.d_e / 4));
    std::vector<Tensor> outs;
    Tensor x = x0;
    for (const auto& layer : layers_) {
      const Tensor q = layer.q(x), k = layer.k(x), v = layer.v(x);
      const Tensor a = ad::softmax(ad::scale(ad::matmul(q, ad::transpose(k)), inv_sqrt_dk), 1);
      if (attention) attention->push_back(a);
      const Tensor offset = ad::sub(x, ad::matmul(a, v));
      x = ad::add(x, ad::relu(layer.out(offset)));
      outs.push_back(x);
    }
    return ad::concat(outs, 1);
  }

  [[nodiscard]] Tensor decode_seg(const Tensor& fe) const { return run_branch(seg_, fe); }

  // Articulation fields in the frame of `fe`'s input cloud.
  [[nodiscard]] PerPointPrediction<T> decode_arti(const Tensor& fe) const {
    const Tensor raw = run_branch(arti_, fe);
    PerPointPrediction<T> p;
    for (std::size_t j = 0; j < cfg_.n_joints; ++j) {
      const std::size_t o = 8 * j;
      p.dir.push_back(ad::normalize(ad::slice_cols(raw, o, 3), 1));
      p.dist.push_back(ad::softplus(ad::slice_cols(raw, o + 3, 1)));
      p.pdir.push_back(ad::normalize(ad::slice_cols(raw, o + 4, 3), 1));
      p.state.push_back(ad::slice_cols(raw, o + 7, 1));
    }
    return p;
  }

  // `twist` is applied after canonicalization; training draws it from
  // detail::frame_symmetries() as augmentation.
  [[nodiscard]] PerPointPrediction<T> forward(std::span<const Vec3> cloud,
                                              const Eigen::Matrix3d& twist = Eigen::Matrix3d::Identity()) const {
    const std::size_t n = cloud.size();
    if (n < cfg_.neighbors) throw ContractError("forward: fewer points than neighbors");
    Vec3 centroid = Vec3::Zero();
    for (const auto& p : cloud) centroid += p;
    centroid /= static_cast<double>(n);
    std::vector<Vec3> centered(n);
    for (std::size_t i = 0; i < n; ++i) centered[i] = cloud[i] - centroid;
    Eigen::Matrix3d r = Eigen::Matrix3d::Identity();
    if (cfg_.canonicalize) r = twist * detail::principal_frame(centered);
    // Unit RMS radius; predicted distances are scaled back below.
    double radius = 0.0;
    for (const auto& p : centered) radius += p.squaredNorm();
    radius = std::sqrt(radius / static_cast<double>(n));
    if (!(radius > 0)) throw DegenerateError("forward: all points coincide");

    std::vector<T> local(n * 3), world(n * 3);
    for (std::size_t i = 0; i < n; ++i) {
      const Vec3 q = r * centered[i] / radius;
      for (int c = 0; c < 3; ++c) {
        local[i * 3 + c] = static_cast<T>(q[c]);
        world[i * 3 + c] = static_cast<T>(cloud[i][c]);
      }
    }
    const Tensor fe = encode(embed(Tensor({n, 3}, std::move(local))));
    PerPointPrediction<T> p = decode_arti(fe);
    p.seg_logits = decode_seg(fe);
    p.points = Tensor({n, 3}, std::move(world));
    for (auto& d : p.dist) d = ad::scale(d, static_cast<T>(radius));
    if (cfg_.canonicalize) {
      // Row vectors map back to the input frame by right-multiplying with r.
      std::vector<T> rv(9);
      for (int a = 0; a < 3; ++a)
        for (int b = 0; b < 3; ++b) rv[a * 3 + b] = static_cast<T>(r(a, b));
      const Tensor back({3, 3}, std::move(rv));
      for (std::size_t j = 0; j < p.dir.size(); ++j) {
        p.dir[j] = ad::matmul(p.dir[j], back);
        p.pdir[j] = ad::matmul(p.pdir[j], back);
      }
    }
    return p;
  }

  // Trainable tensors with stable names, in a fixed order.
  [[nodiscard]] std::vector<std::pair<std::string, Tensor>> named_parameters() const {
    std::vector<std::pair<std::string, Tensor>> out;
    auto add = [&out](const std::string& name, const Linear<T>& l) {
      out.emplace_back(name + ".w", l.w);
      if (l.has_bias()) out.emplace_back(name + ".b", l.b);
    };
    add("embed.point", point_embed_);
    add("embed.neighbor", neighbor_embed_);
    add("embed.fuse", fuse_);
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const std::string p = "encoder." + std::to_string(l);
      add(p + ".q", layers_[l].q);
      add(p + ".k", layers_[l].k);
      add(p + ".v", layers_[l].v);
      add(p + ".out", layers_[l].out);
    }
    for (const auto* br : {&seg_, &arti_}) {
      const std::string p = br == &seg_ ? "seg" : "arti";
      add(p + ".local", br->first_local);
      add(p + ".global", br->first_global);
      for (std::size_t i = 0; i < br->rest.size(); ++i) add(p + "." + std::to_string(i + 1), br->rest[i]);
    }
    return out;
  }

  [[nodiscard]] std::vector<Tensor> parameters() const {
    std::vector<Tensor> out;
    for (auto& [name, t] : named_parameters()) out.push_back(t);
    return out;
  }

  [[nodiscard]] std::size_t parameter_count() const {
    std::size_t c = 0;
    for (const auto& t : parameters()) c += t.numel();
    return c;
  }

  void zero_grad() {
    for (auto& t : parameters()) t.zero_grad();
  }

  [[nodiscard]] std::vector<ad::NamedArray> to_arrays() const {
    std::vector<ad::NamedArray> out;
    for (const auto& [name, t] : named_parameters()) {
      ad::NamedArray a{name, t.shape(), {}};
      a.values.assign(t.values().begin(), t.values().end());
      out.push_back(std::move(a));
    }
    return out;
  }

  void load_arrays(const std::vector<ad::NamedArray>& arrays) {
    auto params = named_parameters();
    if (arrays.size() != params.size())
      throw ConfigError("checkpoint has " + std::to_string(arrays.size()) + " tensors, model expects " +
                        std::to_string(params.size()));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& [name, t] = params[i];
      if (arrays[i].name != name || arrays[i].shape != t.shape())
        throw ConfigError("checkpoint tensor '" + arrays[i].name + "' does not match model tensor '" + name + "'");
      auto dst = t.mutable_values();
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] = static_cast<T>(arrays[i].values[k]);
    }
  }

 private:
  struct Layer {
    Linear<T> q, k, v, out;
  };
  // First layer split into a per-point part and a part applied once to the
  // pooled global features (mean and max), broadcast over points.
  struct Branch {
    Linear<T> first_local, first_global;
    std::vector<Linear<T>> rest;
  };

  Branch make_branch(std::size_t outputs, Rng& rng) const {
    const std::size_t fe = kAttentionLayers * cfg_.d_e;
    Branch b;
    b.first_local = Linear<T>(fe, cfg_.hidden[0], rng, std::sqrt(2.0));
    b.first_global = Linear<T>(2 * fe, cfg_.hidden[0], rng, std::sqrt(2.0), false);
    for (std::size_t i = 1; i < cfg_.hidden.size(); ++i) b.rest.emplace_back(cfg_.hidden[i - 1], cfg_.hidden[i], rng);
    b.rest.emplace_back(cfg_.hidden.back(), outputs, rng, 1.0);
    return b;
  }

  Tensor run_branch(const Branch& b, const Tensor& fe) const {
    const Tensor global = ad::concat<T>({ad::mean(fe, 0), ad::max(fe, 0)}, 1);
    Tensor h = ad::relu(ad::add(b.first_local(fe), b.first_global(global)));
    for (std::size_t i = 0; i + 1 < b.rest.size(); ++i) h = ad::relu(b.rest[i](h));
    return b.rest.back()(h);
  }

  ModelConfig cfg_;
  Linear<T> point_embed_, neighbor_embed_, fuse_;
  std::vector<Layer> layers_;
  Branch seg_, arti_;
};

// Inference-only average over the frame symmetries: logits, distances and
// states are averaged, direction fields are averaged and renormalized.
template <class T>
PerPointPrediction<T> forward_frame_averaged(const CaptModel<T>& model, std::span<const Vec3> cloud) {
  ad::NoGradGuard off;
  const auto& group = detail::frame_symmetries();
  PerPointPrediction<T> acc = model.forward(cloud, group[0]);
  for (std::size_t g = 1; g < group.size(); ++g) {
    const auto p = model.forward(cloud, group[g]);
    acc.seg_logits = ad::add(acc.seg_logits, p.seg_logits);
    for (std::size_t j = 0; j < acc.dir.size(); ++j) {
      acc.dir[j] = ad::add(acc.dir[j], p.dir[j]);
      acc.pdir[j] = ad::add(acc.pdir[j], p.pdir[j]);
      acc.dist[j] = ad::add(acc.dist[j], p.dist[j]);
      acc.state[j] = ad::add(acc.state[j], p.state[j]);
    }
  }
  const T inv = T(1) / static_cast<T>(group.size());
  acc.seg_logits = ad::scale(acc.seg_logits, inv);
  for (std::size_t j = 0; j < acc.dir.size(); ++j) {
    acc.dir[j] = ad::normalize(acc.dir[j], 1);
    acc.pdir[j] = ad::normalize(acc.pdir[j], 1);
    acc.dist[j] = ad::scale(acc.dist[j], inv);
    acc.state[j] = ad::scale(acc.state[j], inv);
  }
  return acc;
}

}  // namespace capt
