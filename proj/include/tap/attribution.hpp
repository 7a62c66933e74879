#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tap/common.hpp"
#include "tap/dataset.hpp"
#include "tap/image.hpp"
#include "tap/model.hpp"

namespace tap::attr {

// A scalar function of an interleaved RGB image (height x width x 3) that
// also sees a fixed mask plane; attribution targets implement this.
class Differentiable {
 public:
  virtual ~Differentiable() = default;
  virtual int height() const = 0;
  virtual int width() const = 0;
  virtual int max_batch() const { return 8; }
  // rgb holds `batch` images back to back. Writes one value per image and,
  // when grad is non-empty, d value / d rgb in the same layout.
  virtual void evaluate(std::span<const float> rgb, int batch, std::span<const float> mask, std::span<double> values,
                        std::span<float> grad) const = 0;
};

// The pre-softmax logit of one class of a classifier, in inference mode.
class ClassifierTarget : public Differentiable {
 public:
  explicit ClassifierTarget(const model::Classifier& model, int target_class = model::kTappableClass);
  int height() const override { return model::kInputHeight; }
  int width() const override { return model::kInputWidth; }
  void evaluate(std::span<const float> rgb, int batch, std::span<const float> mask, std::span<double> values,
                std::span<float> grad) const override;

 private:
  const model::Classifier& model_;
  int target_;
};

struct PixelAttribution {
  int height = 0;
  int width = 0;
  int steps = 0;
  std::vector<double> channels;  // height x width x 3
  std::vector<double> values;    // height x width, summed over RGB
  double input_value = 0.0;      // F(input)
  double baseline_value = 0.0;   // F(baseline)

  double total() const;
  // |total - (F(input) - F(baseline))| / |F(input) - F(baseline)|, or the
  // absolute gap when the output difference is zero.
  double completeness_error() const;
};

// Riemann-midpoint Integrated Gradients along the straight path from
// baseline to input; only RGB moves, the mask stays fixed. Throws
// Error{"invalid_steps"} and Error{"non_finite_gradient"}.
PixelAttribution integrated_gradients(const Differentiable& f, std::span<const float> input,
                                      std::span<const float> baseline, std::span<const float> mask, int steps);

// Baseline at a constant RGB level inside the content area. Padding keeps
// the input's zeros so it never receives attribution.
std::vector<float> constant_baseline(const model::ModelInput& input, float level);

// Mean of the black (0) and white (1) baseline attributions. total and the
// F values are the means of the two runs as well.
PixelAttribution dual_baseline_attribution(const Differentiable& f, const model::ModelInput& input, int steps);

enum class RegionSource { kUiBbox, kFelzenszwalb };

// Horizontal pixel run [x_begin, x_end) on row y.
struct Run {
  int y = 0;
  int x_begin = 0;
  int x_end = 0;
};

struct Region {
  RegionSource source = RegionSource::kUiBbox;
  std::string label;
  std::vector<Run> runs;  // sorted by (y, x_begin), non-overlapping

  static Region from_box(const BoundingBox& box, RegionSource source, std::string label);
  std::int64_t area() const;
  BoundingBox bounds() const;
  // Set when the region is exactly an axis-aligned rectangle.
  std::optional<BoundingBox> as_box() const;
  bool contains(int x, int y) const;
};

// Region made of the pixels where mask (height x width) is non-zero.
Region region_from_mask(std::span<const std::uint8_t> mask, int height, int width, RegionSource source,
                        std::string label);

struct FelzenszwalbOptions {
  std::vector<double> scales{50, 100, 150, 250, 500, 1200};
  double sigma = 0.8;  // Gaussian pre-smoothing, clamped to [0, 10]
  int min_size = 20;   // clamped to >= 1
};

// Per-pixel component ids (0..count-1) of one scale on an interleaved RGB
// image with values in [0, 1]; colors are compared on a 0..255 scale over
// the 8-connected pixel grid.
std::vector<int> felzenszwalb_labels(std::span<const float> rgb, int height, int width, double scale, double sigma,
                                     int min_size, int* count = nullptr);

// Segments every scale (edges are sorted once) and returns all regions,
// scale by scale. Regions are confined to `area` when given, in the full
// image's coordinates.
std::vector<Region> felzenszwalb_segments(std::span<const float> rgb, int height, int width,
                                          const FelzenszwalbOptions& options = {},
                                          std::optional<BoundingBox> area = std::nullopt);

struct RegionSet {
  std::vector<Region> regions;
  std::vector<std::string> warnings;
};

// One box region per annotation in model coordinates, clipped to the
// content area. Boxes that collapse or fall outside it are dropped with a
// warning; throws Error{"no_regions"} for an empty annotation list.
RegionSet regions_from_annotations(const std::vector<data::ElementAnnotation>& annotations,
                                   const model::TransformRecord& transform);

struct RankedRegion {
  Region region;
  double total = 0.0;
  double density = 0.0;  // total / area
  int rank = 0;          // 1-based
  std::size_t input_index = 0;
};

struct RegionAttribution {
  int height = 0;
  int width = 0;
  std::vector<RankedRegion> ranked;  // by density, then total, then input order
};

// Throws Error{"no_regions"} for an empty list and Error{"region_out_of_bounds"}.
RegionAttribution aggregate_regions(const PixelAttribution& pixels, const std::vector<Region>& regions);

struct MergedRegion {
  Region region;
  int regions_used = 0;
  double coverage = 0.0;  // covered pixels / (height * width)
};

// Union of ranked regions in order, stopping after the first region that
// takes coverage above area_fraction. area_fraction is clamped to (0, 1].
MergedRegion merge_to_threshold(const RegionAttribution& ranked, double area_fraction);

// Per-pixel saliency: the density of the best-ranked region covering each
// pixel; uncovered pixels take the lowest region density.
std::vector<double> region_saliency(const RegionAttribution& ranked);

struct Heatmap {
  RgbImage overlay;   // diverging map, min blue, mid white, max red
  RgbImage filtered;  // screenshot scaled by normalized saliency
};

enum class Colormap { kBlueWhiteRed, kGray };

// Throws Error{"invalid_colormap"}; names are "blue_white_red" and "gray".
Colormap colormap_named(const std::string& name);

// Blue (0) to white (0.5) to red (1).
std::array<std::uint8_t, 3> diverging_color(double v);
std::array<std::uint8_t, 3> map_color(Colormap map, double v);

// Renders over the letterboxed screenshot, cropped to its content area.
// Normalization is per example; constant saliency renders the map's middle
// color and an unchanged filtered view.
Heatmap render_heatmap(const RegionAttribution& ranked, const model::LetterboxedScreen& base,
                       Colormap map = Colormap::kBlueWhiteRed);

}  // namespace tap::attr
