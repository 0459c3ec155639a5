#pragma once

// Independent reference implementations used by the unit and acceptance tests.

#include <algorithm>
#include <cmath>
#include <vector>

#include "coattn/attnmap.hpp"
#include "coattn/random.hpp"

namespace oracle {

/// Ranks by repeated scanning: rank = 1 + #smaller + (#equal - 1) / 2.
inline std::vector<double> brute_ranks(const std::vector<double>& x) {
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    double less = 0, equal = 0;
    for (double y : x) {
      if (y < x[i]) less += 1;
      if (y == x[i]) equal += 1;
    }
    r[i] = 1.0 + less + (equal - 1.0) / 2.0;
  }
  return r;
}

inline double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  long double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= a.size();
  mb /= b.size();
  long double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return static_cast<double>(sab / std::sqrt(saa * sbb));
}

inline double brute_spearman(const std::vector<double>& a, const std::vector<double>& b) {
  return pearson(brute_ranks(a), brute_ranks(b));
}

/// 196 values with blocks of exact ties: a random value is repeated over runs of 1-8 cells.
inline std::vector<double> tied_grid(coattn::Rng& rng) {
  std::vector<double> v;
  while (v.size() < coattn::kGridCells) {
    double x = std::floor(coattn::uniform(rng, 0, 40)) / 8.0;
    int run = coattn::uniform_int(rng, 1, 8);
    for (int i = 0; i < run && v.size() < coattn::kGridCells; ++i) v.push_back(x);
  }
  coattn::shuffle_range(v.begin(), v.end(), rng);
  return v;
}

inline coattn::RegionAttention random_attention(coattn::Rng& rng, int w, int h, int count) {
  coattn::RegionAttention att;
  att.layer = 1;
  for (int i = 0; i < count; ++i) {
    int x0 = coattn::uniform_int(rng, 0, w - 1), y0 = coattn::uniform_int(rng, 0, h - 1);
    int x1 = coattn::uniform_int(rng, x0 + 1, w), y1 = coattn::uniform_int(rng, y0 + 1, h);
    att.boxes.push_back({x0, y0, x1, y1});
    att.values.push_back(coattn::uniform01(rng));
  }
  return att;
}

inline coattn::AttentionMap brute_rasterize(const coattn::RegionAttention& att, int w, int h) {
  coattn::AttentionMap m(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double s = 0.0;
      for (std::size_t i = 0; i < att.boxes.size(); ++i)
        if (att.boxes[i].contains(x, y)) s += att.values[i];
      m.at(x, y) = s;
    }
  return m;
}

/// Cell (c, r) covers [c W/14, (c+1) W/14) x [r H/14, (r+1) H/14); each pixel is weighted
/// by the area of its overlap with the cell, divided by the cell area.
inline coattn::Grid14 brute_downscale(const coattn::AttentionMap& m) {
  coattn::Grid14 g;
  const double cw = m.width / 14.0, ch = m.height / 14.0;
  for (int r = 0; r < 14; ++r)
    for (int c = 0; c < 14; ++c) {
      double x0 = c * cw, x1 = (c + 1) * cw, y0 = r * ch, y1 = (r + 1) * ch;
      long double s = 0;
      for (int y = 0; y < m.height; ++y)
        for (int x = 0; x < m.width; ++x) {
          double ox = std::max(0.0, std::min<double>(x + 1, x1) - std::max<double>(x, x0));
          double oy = std::max(0.0, std::min<double>(y + 1, y1) - std::max<double>(y, y0));
          s += ox * oy * m.at(x, y);
        }
      g.at(c, r) = static_cast<double>(s / (cw * ch));
    }
  return g;
}

}  // namespace oracle
