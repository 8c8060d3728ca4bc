#include "robusttraj/geometry.hpp"

#include <algorithm>
#include <limits>

namespace robusttraj {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t hash_string(const std::string& s) {
  // FNV-1a
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

namespace geometry {

namespace {

bool on_segment(Vec2 p, Vec2 a, Vec2 b) {
  const Vec2 ab = b - a;
  const Vec2 ap = p - a;
  if (std::abs(ab.cross(ap)) > 1e-9 * std::max(1.0, ab.norm())) return false;
  const double t = ap.dot(ab);
  return t >= -1e-12 && t <= ab.dot(ab) + 1e-12;
}

int orient(Vec2 a, Vec2 b, Vec2 c) {
  const double v = (b - a).cross(c - a);
  const double tol = 1e-10 * (b - a).norm() * (c - a).norm();
  if (v > tol) return 1;
  if (v < -tol) return -1;
  return 0;
}

bool segments_intersect(Vec2 p1, Vec2 p2, Vec2 q1, Vec2 q2) {
  const int o1 = orient(p1, p2, q1), o2 = orient(p1, p2, q2);
  const int o3 = orient(q1, q2, p1), o4 = orient(q1, q2, p2);
  if (o1 != o2 && o3 != o4) return true;
  if (o1 == 0 && on_segment(q1, p1, p2)) return true;
  if (o2 == 0 && on_segment(q2, p1, p2)) return true;
  if (o3 == 0 && on_segment(p1, q1, q2)) return true;
  if (o4 == 0 && on_segment(p2, q1, q2)) return true;
  return false;
}

}  // namespace

bool point_in_polygon(Vec2 p, const Polygon& poly) {
  const std::size_t n = poly.size();
  if (n < 3) return false;
  bool inside = false;
  for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
    const Vec2 a = poly[i], b = poly[j];
    if (on_segment(p, a, b)) return true;
    if ((a.y > p.y) != (b.y > p.y)) {
      const double xc = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
      if (p.x < xc) inside = !inside;
    }
  }
  return inside;
}

bool inside_any(Vec2 p, std::span<const Polygon> polys) {
  return std::any_of(polys.begin(), polys.end(), [p](const Polygon& poly) { return point_in_polygon(p, poly); });
}

bool is_simple(const Polygon& poly) {
  const std::size_t n = poly.size();
  if (n < 3) return false;
  for (std::size_t i = 0; i < n; ++i) {
    const Vec2 a1 = poly[i], a2 = poly[(i + 1) % n];
    for (std::size_t j = i + 1; j < n; ++j) {
      if (j == i + 1 || (i == 0 && j == n - 1)) continue;
      if (segments_intersect(a1, a2, poly[j], poly[(j + 1) % n])) return false;
    }
  }
  return true;
}

Polyline::Polyline(std::vector<Vec2> pts) : points(std::move(pts)) {
  if (points.size() < 2) throw std::invalid_argument("polyline: need at least two points");
  arclength.resize(points.size(), 0.0);
  for (std::size_t i = 1; i < points.size(); ++i) arclength[i] = arclength[i - 1] + (points[i] - points[i - 1]).norm();
}

namespace {
std::size_t segment_index(const std::vector<double>& arc, double s) {
  const auto it = std::upper_bound(arc.begin(), arc.end(), s);
  std::size_t i = it == arc.begin() ? 0 : std::size_t(it - arc.begin()) - 1;
  return std::min(i, arc.size() - 2);
}
}  // namespace

Vec2 Polyline::at(double s) const {
  const std::size_t i = segment_index(arclength, s);
  const double seg = arclength[i + 1] - arclength[i];
  const double t = seg > 0 ? (s - arclength[i]) / seg : 0.0;
  // Linear extrapolation past either end.
  return points[i] + (points[i + 1] - points[i]) * t;
}

Vec2 Polyline::tangent(double s) const {
  const std::size_t i = segment_index(arclength, s);
  const Vec2 d = points[i + 1] - points[i];
  const double n = d.norm();
  return n > 0 ? d * (1.0 / n) : Vec2{1.0, 0.0};
}

std::pair<double, double> Polyline::project(Vec2 p) const {
  double best = std::numeric_limits<double>::infinity();
  double best_s = 0.0, best_d = 0.0;
  for (std::size_t i = 0; i + 1 < points.size(); ++i) {
    const Vec2 a = points[i];
    const Vec2 ab = points[i + 1] - a;
    const double len2 = ab.dot(ab);
    double t = len2 > 0 ? (p - a).dot(ab) / len2 : 0.0;
    if (i == 0) t = std::min(t, 1.0);
    else if (i + 2 == points.size()) t = std::max(t, 0.0);
    else t = std::clamp(t, 0.0, 1.0);
    const Vec2 q = a + ab * t;
    const double dist = (p - q).norm();
    if (dist < best) {
      best = dist;
      best_s = arclength[i] + t * std::sqrt(len2);
      const Vec2 tan = len2 > 0 ? ab * (1.0 / std::sqrt(len2)) : Vec2{1, 0};
      best_d = tan.cross(p - q);
    }
  }
  return {best_s, best_d};
}

Polygon lane_polygon(const Polyline& center, double half_width) {
  Polygon left, right;
  const auto& pts = center.points;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    // Vertex normal: average of adjacent segment normals.
    Vec2 t{0, 0};
    if (i > 0) t += (pts[i] - pts[i - 1]) * (1.0 / (pts[i] - pts[i - 1]).norm());
    if (i + 1 < pts.size()) t += (pts[i + 1] - pts[i]) * (1.0 / (pts[i + 1] - pts[i]).norm());
    t = t * (1.0 / t.norm());
    const Vec2 n{-t.y, t.x};
    left.push_back(pts[i] + n * half_width);
    right.push_back(pts[i] - n * half_width);
  }
  Polygon poly = right;
  poly.insert(poly.end(), left.rbegin(), left.rend());
  return poly;
}

}  // namespace geometry
}  // namespace robusttraj
