#pragma once

#include <span>

#include "robusttraj/common.hpp"

namespace robusttraj::geometry {

// Even-odd ray casting; points on the boundary count as inside.
bool point_in_polygon(Vec2 p, const Polygon& poly);
bool inside_any(Vec2 p, std::span<const Polygon> polys);
// True when no two non-adjacent edges intersect.
bool is_simple(const Polygon& poly);

// Polyline helpers for lane centerlines.
struct Polyline {
  std::vector<Vec2> points;
  std::vector<double> arclength;  // cumulative, same length as points

  explicit Polyline(std::vector<Vec2> pts);
  double length() const { return arclength.back(); }
  Vec2 at(double s) const;
  // Unit tangent at arc length s.
  Vec2 tangent(double s) const;
  Vec2 normal(double s) const {
    const Vec2 t = tangent(s);
    return {-t.y, t.x};
  }
  // Arc length and signed lateral offset (left positive) of p's projection.
  std::pair<double, double> project(Vec2 p) const;
};

// Lane polygon: the strip of half-width w around a centerline.
Polygon lane_polygon(const Polyline& center, double half_width);

}  // namespace robusttraj::geometry
