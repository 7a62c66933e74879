#pragma once

#include <cstdint>

#include "tap/dataset.hpp"

namespace tap::data {

// Synthetic screens: a solid background with a vertical stack of elements.
// Filled rounded rectangles with centered text are tappable ("Button");
// bare text lines ("TextView") and decorative gradient images
// ("ImageView") are not. Every element carries five agreeing votes.
struct SyntheticOptions {
  int width = 360;
  int height = 640;
  int min_elements = 3;  // clamped to [2, 8]
  int max_elements = 6;  // clamped to [min_elements, 8]
  double tappable_share = 0.5;  // clamped to [0.2, 0.8]
};

Corpus generate_synthetic_corpus(int n_screens, std::uint64_t seed, const SyntheticOptions& options = {});

}  // namespace tap::data
