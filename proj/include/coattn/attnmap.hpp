#pragma once

#include <array>
#include <cstddef>
#include <vector>

#include "coattn/inputs.hpp"
#include "coattn/model.hpp"

namespace coattn {

/// Question-level attention over the T regions of one co-attention layer.
struct RegionAttention {
  std::size_t layer = 0;
  std::vector<double> values;
  std::vector<Box> boxes;
};

enum class MapNorm { raw, max1 };

/// Dense pixel grid of nonnegative intensities, row-major.
struct AttentionMap {
  int width = 0;
  int height = 0;
  std::vector<double> pixels;
  MapNorm norm = MapNorm::raw;
  /// Set by normalize_map when every pixel is zero.
  bool degenerate = false;

  AttentionMap() = default;
  AttentionMap(int w, int h, double fill = 0.0)
      : width(w), height(h), pixels(static_cast<std::size_t>(w) * h, fill) {}

  double& at(int x, int y) { return pixels[static_cast<std::size_t>(y) * width + x]; }
  double at(int x, int y) const { return pixels[static_cast<std::size_t>(y) * width + x]; }
};

inline constexpr int kGridSide = 14;
inline constexpr std::size_t kGridCells = kGridSide * kGridSide;

/// 14 x 14 comparison grid, row-major.
struct Grid14 {
  std::array<double, kGridCells> cells{};

  double& at(int col, int row) { return cells[static_cast<std::size_t>(row) * kGridSide + col]; }
  double at(int col, int row) const { return cells[static_cast<std::size_t>(row) * kGridSide + col]; }
  bool operator==(const Grid14&) const = default;
};

/// Mean over heads, then over the rows of the non-special question tokens, of the
/// language-to-region probabilities of `layer` (1-based).
RegionAttention average_heads_and_words(const CoAttentionTrace& trace, std::size_t layer,
                                        const TokenSequence& seq, const RegionSet& regions);

/// Each pixel receives the sum of the attention values of every box covering it.
AttentionMap rasterize(const RegionAttention& att, int width, int height);

/// Divides by the maximum pixel; an all-zero map stays zero and is flagged degenerate.
AttentionMap normalize_map(const AttentionMap& map);

/// Area-weighted mean pooling onto the 14 x 14 grid. Requires width, height >= 14.
Grid14 downscale_14x14(const AttentionMap& map);

/// Full chain for one layer: average, rasterize, normalize, downscale.
struct LayerMaps {
  RegionAttention attention;
  AttentionMap raw;
  AttentionMap normalized;
  Grid14 grid;
};
LayerMaps build_layer_maps(const CoAttentionTrace& trace, std::size_t layer, const TokenSequence& seq,
                           const RegionSet& regions);

}  // namespace coattn
