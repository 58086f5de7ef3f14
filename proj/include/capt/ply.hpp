#pragma once

#include <array>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "capt/errors.hpp"
#include "capt/geometry.hpp"

namespace capt {

struct PlyColor {
  std::uint8_t r, g, b;
};

inline constexpr PlyColor kPredictedJointColor{255, 0, 0};
inline constexpr PlyColor kTruthJointColor{0, 255, 0};

inline PlyColor part_color(int label) {
  static constexpr std::array<PlyColor, 6> palette = {
      {{70, 130, 180}, {255, 165, 0}, {148, 103, 189}, {140, 86, 75}, {227, 119, 194}, {127, 127, 127}}};
  return palette[static_cast<std::size_t>(label) % palette.size()];
}

struct PlyScene {
  std::vector<Vec3> vertices;
  std::vector<PlyColor> colors;
  std::vector<std::array<int, 2>> edges;

  void add_point(const Vec3& p, PlyColor c) {
    vertices.push_back(p);
    colors.push_back(c);
  }

  // Segment along `axis` centered on the pivot's projection of `center`.
  void add_axis(const Line3& axis, const Vec3& center, double half_length, PlyColor c) {
    const Vec3 mid = project_point_to_line(center, axis).foot;
    const int first = static_cast<int>(vertices.size());
    add_point(mid - half_length * axis.direction.vec(), c);
    add_point(mid + half_length * axis.direction.vec(), c);
    edges.push_back({first, first + 1});
  }
};

inline std::string ply_header(std::size_t vertices, std::size_t edges) {
  return "ply\n"
         "format ascii 1.0\n"
         "element vertex " + std::to_string(vertices) + "\n"
         "property float x\n"
         "property float y\n"
         "property float z\n"
         "property uchar red\n"
         "property uchar green\n"
         "property uchar blue\n"
         "element edge " + std::to_string(edges) + "\n"
         "property int vertex1\n"
         "property int vertex2\n"
         "end_header\n";
}

inline std::string encode_ply(const PlyScene& s) {
  std::string out = ply_header(s.vertices.size(), s.edges.size());
  char buf[128];
  for (std::size_t i = 0; i < s.vertices.size(); ++i) {
    const auto& p = s.vertices[i];
    const auto& c = s.colors[i];
    std::snprintf(buf, sizeof buf, "%.6f %.6f %.6f %u %u %u\n", p.x(), p.y(), p.z(), c.r, c.g, c.b);
    out += buf;
  }
  for (const auto& e : s.edges) {
    std::snprintf(buf, sizeof buf, "%d %d\n", e[0], e[1]);
    out += buf;
  }
  return out;
}

inline void write_ply(const std::string& path, const PlyScene& s) {
  const std::string text = encode_ply(s);
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw IoError("cannot write " + path);
  const bool ok = std::fwrite(text.data(), 1, text.size(), f) == text.size();
  if (std::fclose(f) != 0 || !ok) throw IoError("failed writing " + path);
}

}  // namespace capt
