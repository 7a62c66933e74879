#include <algorithm>
#include <cmath>

#include "tap/attribution.hpp"

namespace tap::attr {

Region Region::from_box(const BoundingBox& box, RegionSource source, std::string label) {
  Region r;
  r.source = source;
  r.label = std::move(label);
  for (int y = box.y_min; y < box.y_max; ++y) r.runs.push_back({y, box.x_min, box.x_max});
  return r;
}

std::int64_t Region::area() const {
  std::int64_t a = 0;
  for (const Run& run : runs) a += run.x_end - run.x_begin;
  return a;
}

BoundingBox Region::bounds() const {
  if (runs.empty()) return {};
  BoundingBox b{runs.front().x_begin, runs.front().y, runs.front().x_end, runs.back().y + 1};
  for (const Run& run : runs) {
    b.x_min = std::min(b.x_min, run.x_begin);
    b.x_max = std::max(b.x_max, run.x_end);
  }
  return b;
}

std::optional<BoundingBox> Region::as_box() const {
  if (runs.empty()) return std::nullopt;
  const BoundingBox b = bounds();
  if (static_cast<std::int64_t>(runs.size()) != b.height()) return std::nullopt;
  for (const Run& run : runs) {
    if (run.x_begin != b.x_min || run.x_end != b.x_max) return std::nullopt;
  }
  return b;
}

bool Region::contains(int x, int y) const {
  auto it = std::lower_bound(runs.begin(), runs.end(), Run{y, x + 1, 0}, [](const Run& l, const Run& r) {
    return l.y != r.y ? l.y < r.y : l.x_begin < r.x_begin;
  });
  if (it == runs.begin()) return false;
  --it;
  return it->y == y && x >= it->x_begin && x < it->x_end;
}

Region region_from_mask(std::span<const std::uint8_t> mask, int height, int width, RegionSource source,
                        std::string label) {
  if (mask.size() != static_cast<std::size_t>(height) * width) {
    throw Error("shape_mismatch", "mask must be " + std::to_string(height) + "x" + std::to_string(width));
  }
  Region r;
  r.source = source;
  r.label = std::move(label);
  for (int y = 0; y < height; ++y) {
    const std::uint8_t* row = mask.data() + static_cast<std::size_t>(y) * width;
    int x = 0;
    while (x < width) {
      if (!row[x]) {
        ++x;
        continue;
      }
      int end = x + 1;
      while (end < width && row[end]) ++end;
      r.runs.push_back({y, x, end});
      x = end;
    }
  }
  return r;
}

RegionSet regions_from_annotations(const std::vector<data::ElementAnnotation>& annotations,
                                   const model::TransformRecord& transform) {
  if (annotations.empty()) {
    throw Error("no_regions", "no annotation regions given; use felzenszwalb region mode instead", "regions");
  }
  const BoundingBox content = transform.content_box();
  RegionSet set;
  for (const auto& a : annotations) {
    const BoundingBox m = transform.map_box(a.bbox);
    const BoundingBox clipped{std::max(m.x_min, content.x_min), std::max(m.y_min, content.y_min),
                              std::min(m.x_max, content.x_max), std::min(m.y_max, content.y_max)};
    if (clipped.width() <= 0 || clipped.height() <= 0) {
      set.warnings.push_back("element " + a.element_id + " dropped: no area at model resolution");
      continue;
    }
    set.regions.push_back(Region::from_box(clipped, RegionSource::kUiBbox, a.element_id));
  }
  return set;
}

RegionAttribution aggregate_regions(const PixelAttribution& pixels, const std::vector<Region>& regions) {
  if (regions.empty()) throw Error("no_regions", "region aggregation needs at least one region", "regions");
  RegionAttribution out;
  out.height = pixels.height;
  out.width = pixels.width;
  out.ranked.resize(regions.size());
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < regions.size(); ++i) {
    double total = 0.0;
    for (const Run& run : regions[i].runs) {
      if (run.y < 0 || run.y >= pixels.height || run.x_begin < 0 || run.x_end > pixels.width) continue;
      const double* row = pixels.values.data() + static_cast<std::size_t>(run.y) * pixels.width;
      for (int x = run.x_begin; x < run.x_end; ++x) total += row[x];
    }
    out.ranked[i].total = total;
  }
  for (std::size_t i = 0; i < regions.size(); ++i) {
    const Region& r = regions[i];
    const std::int64_t area = r.area();
    bool inside = area > 0;
    for (const Run& run : r.runs) {
      inside = inside && run.y >= 0 && run.y < pixels.height && run.x_begin >= 0 && run.x_end <= pixels.width &&
               run.x_begin < run.x_end;
    }
    if (!inside) {
      throw Error("region_out_of_bounds", "region " + std::to_string(i) + " (" + r.label + ") is empty or outside " +
                                              std::to_string(pixels.width) + "x" + std::to_string(pixels.height),
                  "regions");
    }
    RankedRegion& rr = out.ranked[i];
    rr.region = r;
    rr.density = rr.total / static_cast<double>(area);
    rr.input_index = i;
  }
  std::stable_sort(out.ranked.begin(), out.ranked.end(), [](const RankedRegion& l, const RankedRegion& r) {
    if (l.density != r.density) return l.density > r.density;
    return l.total > r.total;
  });
  for (std::size_t i = 0; i < out.ranked.size(); ++i) out.ranked[i].rank = static_cast<int>(i) + 1;
  return out;
}

MergedRegion merge_to_threshold(const RegionAttribution& ranked, double area_fraction) {
  const double fraction = std::clamp(area_fraction, 1e-12, 1.0);
  const auto plane = static_cast<std::size_t>(ranked.height) * ranked.width;
  std::vector<std::uint8_t> covered(plane, 0);
  std::int64_t count = 0;
  MergedRegion out;
  for (const RankedRegion& rr : ranked.ranked) {
    for (const Run& run : rr.region.runs) {
      std::uint8_t* row = covered.data() + static_cast<std::size_t>(run.y) * ranked.width;
      for (int x = run.x_begin; x < run.x_end; ++x) {
        count += !row[x];
        row[x] = 1;
      }
    }
    ++out.regions_used;
    out.coverage = static_cast<double>(count) / static_cast<double>(plane);
    if (out.coverage > fraction) break;
  }
  out.region = region_from_mask(covered, ranked.height, ranked.width,
                                ranked.ranked.empty() ? RegionSource::kUiBbox : ranked.ranked.front().region.source,
                                "merged");
  return out;
}

std::vector<double> region_saliency(const RegionAttribution& ranked) {
  const auto plane = static_cast<std::size_t>(ranked.height) * ranked.width;
  if (ranked.ranked.empty()) return std::vector<double>(plane, 0.0);
  double lowest = ranked.ranked.front().density;
  for (const auto& rr : ranked.ranked) lowest = std::min(lowest, rr.density);
  std::vector<double> s(plane, lowest);
  std::vector<std::uint8_t> set(plane, 0);
  // Ranked order means the first region to claim a pixel has the highest density.
  for (const auto& rr : ranked.ranked) {
    for (const Run& run : rr.region.runs) {
      const std::size_t row = static_cast<std::size_t>(run.y) * ranked.width;
      for (int x = run.x_begin; x < run.x_end; ++x) {
        if (set[row + x]) continue;
        set[row + x] = 1;
        s[row + x] = rr.density;
      }
    }
  }
  return s;
}

}  // namespace tap::attr
