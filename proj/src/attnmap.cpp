#include "coattn/attnmap.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace coattn {

RegionAttention average_heads_and_words(const CoAttentionTrace& trace, std::size_t layer,
                                        const TokenSequence& seq, const RegionSet& regions) {
  if (layer == 0 || layer > trace.layers) {
    throw std::out_of_range("average_heads_and_words: layer " + std::to_string(layer) +
                            " outside 1.." + std::to_string(trace.layers));
  }
  std::vector<std::size_t> word_rows;
  for (std::size_t i = 0; i < seq.tokens.size(); ++i)
    if (!seq.tokens[i].is_special) word_rows.push_back(i);
  if (word_rows.empty()) throw std::invalid_argument("average_heads_and_words: question has no words");

  const Matrix& first = trace.l2r(layer, 0);
  if (first.rows() != seq.size() || first.cols() != regions.size()) {
    throw ShapeError("average_heads_and_words: trace " + first.shape_str() +
                     " does not match sequence/regions");
  }
  const std::size_t t = first.cols();
  const double heads = static_cast<double>(trace.heads);

  RegionAttention out;
  out.layer = layer;
  out.values.assign(t, 0.0);
  for (std::size_t row : word_rows) {
    for (std::size_t j = 0; j < t; ++j) {
      double head_sum = 0.0;
      for (std::size_t h = 0; h < trace.heads; ++h) head_sum += trace.l2r(layer, h)(row, j);
      out.values[j] += head_sum / heads;
    }
  }
  for (double& v : out.values) v /= static_cast<double>(word_rows.size());
  for (const auto& r : regions.regions) out.boxes.push_back(r.box);
  return out;
}

AttentionMap rasterize(const RegionAttention& att, int width, int height) {
  if (att.values.size() != att.boxes.size()) {
    throw ShapeError("rasterize: value/box count mismatch");
  }
  AttentionMap map(width, height);
  // Region order is fixed, so each pixel sums its covering regions in index order.
  for (std::size_t r = 0; r < att.boxes.size(); ++r) {
    const Box& b = att.boxes[r];
    const int x0 = std::max(b.x0, 0), x1 = std::min(b.x1, width);
    const int y0 = std::max(b.y0, 0), y1 = std::min(b.y1, height);
    for (int y = y0; y < y1; ++y)
      for (int x = x0; x < x1; ++x) map.at(x, y) += att.values[r];
  }
  return map;
}

AttentionMap normalize_map(const AttentionMap& map) {
  AttentionMap out = map;
  out.norm = MapNorm::max1;
  double peak = 0.0;
  for (double v : map.pixels) peak = std::max(peak, v);
  if (peak > 0.0) {
    for (double& v : out.pixels) v /= peak;
    out.degenerate = false;
  } else {
    std::fill(out.pixels.begin(), out.pixels.end(), 0.0);
    out.degenerate = true;
  }
  return out;
}

Grid14 downscale_14x14(const AttentionMap& map) {
  if (map.width < kGridSide || map.height < kGridSide) {
    throw std::invalid_argument("downscale_14x14: map " + std::to_string(map.width) + "x" +
                                std::to_string(map.height) + " smaller than 14x14");
  }
  const double sx = static_cast<double>(map.width) / kGridSide;
  const double sy = static_cast<double>(map.height) / kGridSide;
  Grid14 grid;
  for (int gy = 0; gy < kGridSide; ++gy) {
    const double ty0 = gy * sy, ty1 = (gy + 1) * sy;
    const int py0 = static_cast<int>(std::floor(ty0));
    const int py1 = std::min(map.height, static_cast<int>(std::ceil(ty1)));
    for (int gx = 0; gx < kGridSide; ++gx) {
      const double tx0 = gx * sx, tx1 = (gx + 1) * sx;
      const int px0 = static_cast<int>(std::floor(tx0));
      const int px1 = std::min(map.width, static_cast<int>(std::ceil(tx1)));
      double acc = 0.0;
      for (int y = py0; y < py1; ++y) {
        const double wy = std::min<double>(y + 1, ty1) - std::max<double>(y, ty0);
        double row = 0.0;
        for (int x = px0; x < px1; ++x) {
          const double wx = std::min<double>(x + 1, tx1) - std::max<double>(x, tx0);
          row += wx * map.at(x, y);
        }
        acc += wy * row;
      }
      grid.at(gx, gy) = acc / (sx * sy);
    }
  }
  return grid;
}

LayerMaps build_layer_maps(const CoAttentionTrace& trace, std::size_t layer, const TokenSequence& seq,
                           const RegionSet& regions) {
  LayerMaps out;
  out.attention = average_heads_and_words(trace, layer, seq, regions);
  out.raw = rasterize(out.attention, regions.image_width, regions.image_height);
  out.normalized = normalize_map(out.raw);
  out.grid = downscale_14x14(out.normalized);
  return out;
}

}  // namespace coattn
