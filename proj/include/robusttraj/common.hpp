#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace robusttraj {

// Schema / configuration violation. `path()` names the offending field.
class ValidationError : public std::runtime_error {
 public:
  ValidationError(std::string path, const std::string& msg)
      : std::runtime_error(path + ": " + msg), path_(std::move(path)) {}
  const std::string& path() const { return path_; }

 private:
  std::string path_;
};

class FormatVersionError : public ValidationError {
 public:
  FormatVersionError(std::string path, int found, int expected)
      : ValidationError(std::move(path), "format_version " + std::to_string(found) +
                                             " unsupported (expected " + std::to_string(expected) + ")") {}
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-finite loss or gradient during optimization.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Vec2 {
  double x = 0.0;
  double y = 0.0;

  Vec2 operator+(Vec2 o) const { return {x + o.x, y + o.y}; }
  Vec2 operator-(Vec2 o) const { return {x - o.x, y - o.y}; }
  Vec2 operator*(double s) const { return {x * s, y * s}; }
  Vec2& operator+=(Vec2 o) {
    x += o.x;
    y += o.y;
    return *this;
  }
  double dot(Vec2 o) const { return x * o.x + y * o.y; }
  double cross(Vec2 o) const { return x * o.y - y * o.x; }
  double norm() const { return std::hypot(x, y); }
  friend bool operator==(Vec2 a, Vec2 b) { return a.x == b.x && a.y == b.y; }
};

using Polygon = std::vector<Vec2>;

// Splittable seeds: derive(seed, a, b, ...) gives an independent stream per
// path, so adding a consumer never shifts the seeds of existing ones.
std::uint64_t splitmix64(std::uint64_t x);

inline std::uint64_t derive_seed(std::uint64_t base) { return splitmix64(base); }

template <class... Rest>
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t key, Rest... rest) {
  return derive_seed(splitmix64(base ^ splitmix64(key + 0x632be59bd9b4e019ULL)), static_cast<std::uint64_t>(rest)...);
}

std::uint64_t hash_string(const std::string& s);

}  // namespace robusttraj
