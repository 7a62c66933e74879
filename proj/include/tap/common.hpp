#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>

namespace tap {

// Every failure surfaced to callers carries a machine-readable code, a
// human-readable message and, when it applies, the offending input field.
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& message, std::string field = {})
      : std::runtime_error(message), code_(std::move(code)), field_(std::move(field)) {}

  const std::string& code() const { return code_; }
  const std::string& field() const { return field_; }

 private:
  std::string code_;
  std::string field_;
};

/// Pixel rectangle with half-open extent [x_min, x_max) x [y_min, y_max).
struct BoundingBox {
  int x_min = 0;
  int y_min = 0;
  int x_max = 0;
  int y_max = 0;

  int width() const { return x_max - x_min; }
  int height() const { return y_max - y_min; }
  std::int64_t area() const {
    return static_cast<std::int64_t>(width()) * static_cast<std::int64_t>(height());
  }
  bool contains(int x, int y) const { return x >= x_min && x < x_max && y >= y_min && y < y_max; }

  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

// Returns the rejection reason ("degenerate bbox" or "bbox out of bounds"),
// or nullopt when the box has positive area inside a width x height image.
std::optional<std::string> bbox_problem(const BoundingBox& box, int width, int height);

// Throws Error{"degenerate_bbox" | "bbox_out_of_bounds"} when bbox_problem
// reports one.
void require_valid_bbox(const BoundingBox& box, int width, int height);

// Parses "x0,y0,x1,y1".
BoundingBox parse_bbox(const std::string& text);

/// (screenshot_id, element_id); ordered lexicographically.
struct ElementRef {
  std::string screenshot_id;
  std::string element_id;

  friend auto operator<=>(const ElementRef&, const ElementRef&) = default;
  friend bool operator==(const ElementRef&, const ElementRef&) = default;
};

// Seeded generator whose derived distributions are implemented here rather
// than through <random> distributions, so streams are identical across
// standard library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }
  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Uniform integer in [lo, hi].
  int uniform_int(int lo, int hi);
  bool bernoulli(double p) { return uniform() < p; }
  // Standard normal via Box-Muller.
  double normal();

  template <typename T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(next() % i);
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
  std::optional<double> spare_normal_;
};

}  // namespace tap
