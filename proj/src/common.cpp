#include "tap/common.hpp"

#include <cmath>
#include <numbers>
#include <sstream>
#include <vector>

namespace tap {

std::optional<std::string> bbox_problem(const BoundingBox& box, int width, int height) {
  if (box.x_min >= box.x_max || box.y_min >= box.y_max) return "degenerate bbox";
  if (box.x_min < 0 || box.y_min < 0 || box.x_max > width || box.y_max > height) {
    return "bbox out of bounds";
  }
  return std::nullopt;
}

void require_valid_bbox(const BoundingBox& box, int width, int height) {
  if (auto problem = bbox_problem(box, width, height)) {
    const std::string code = *problem == "degenerate bbox" ? "degenerate_bbox" : "bbox_out_of_bounds";
    throw Error(code, *problem, "bbox");
  }
}

BoundingBox parse_bbox(const std::string& text) {
  std::vector<int> values;
  std::stringstream stream(text);
  std::string item;
  while (std::getline(stream, item, ',')) {
    try {
      std::size_t used = 0;
      values.push_back(std::stoi(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw Error("malformed_bbox", "bbox must be four integers x0,y0,x1,y1", "bbox");
    }
  }
  if (values.size() != 4) throw Error("malformed_bbox", "bbox must be four integers x0,y0,x1,y1", "bbox");
  return {values[0], values[1], values[2], values[3]};
}

int Rng::uniform_int(int lo, int hi) {
  if (hi <= lo) return lo;
  const auto span = static_cast<std::uint64_t>(static_cast<std::int64_t>(hi) - lo + 1);
  return lo + static_cast<int>(next() % span);
}

double Rng::normal() {
  if (spare_normal_) {
    const double value = *spare_normal_;
    spare_normal_.reset();
    return value;
  }
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  const double radius = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * std::numbers::pi * u2;
  spare_normal_ = radius * std::sin(angle);
  return radius * std::cos(angle);
}

}  // namespace tap
