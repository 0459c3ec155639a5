#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "coattn/corpus.hpp"
#include "coattn/random.hpp"

namespace coattn {

bool SceneObject::covers(double x, double y) const {
  const double s = box.width();
  const double cx = box.x0 + 0.5 * s;
  const double cy = box.y0 + 0.5 * box.height();
  switch (shape) {
    case Shape::square:
      return x >= box.x0 && x < box.x1 && y >= box.y0 && y < box.y1;
    case Shape::circle: {
      const double r = 0.5 * s;
      return (x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r;
    }
    case Shape::triangle: {
      if (y < box.y0 || y >= box.y1) return false;
      const double half = 0.5 * (y - box.y0) * s / box.height();
      return std::abs(x - cx) <= half;
    }
  }
  return false;
}

Image render_scene(const std::vector<SceneObject>& objects, int width, int height) {
  Image img(width, height);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) std::copy(kBackground.begin(), kBackground.end(), img.pixel(x, y));
  std::vector<const SceneObject*> order;
  for (const auto& o : objects) order.push_back(&o);
  std::stable_sort(order.begin(), order.end(), [](auto* a, auto* b) { return a->z < b->z; });
  for (const SceneObject* o : order) {
    const PaletteColor& c = kPalette[o->color];
    for (int y = std::max(0, o->box.y0); y < std::min(height, o->box.y1); ++y) {
      for (int x = std::max(0, o->box.x0); x < std::min(width, o->box.x1); ++x) {
        if (!o->covers(x + 0.5, y + 0.5)) continue;
        std::uint8_t* p = img.pixel(x, y);
        p[0] = c.r;
        p[1] = c.g;
        p[2] = c.b;
      }
    }
  }
  return img;
}

void CorpusConfig::validate() const {
  if (pairs == 0) throw std::invalid_argument("corpus: pairs must be >= 1");
  if (image_size < 14 * refmap_scale || refmap_scale < 1) {
    throw std::invalid_argument("corpus: image_size must be >= 14 * refmap_scale");
  }
  if (min_objects < 2 || max_objects < min_objects) throw std::invalid_argument("corpus: bad object counts");
  if (min_object_size < 4 || max_object_size < min_object_size || max_object_size >= image_size) {
    throw std::invalid_argument("corpus: bad object sizes");
  }
  if (max_regions == 0) throw std::invalid_argument("corpus: max_regions must be >= 1");
  if (!(train_fraction >= 0.0 && train_fraction <= 1.0)) throw std::invalid_argument("corpus: bad train_fraction");
  if (weight_color < 0 || weight_left_of < 0 || weight_count < 0 ||
      weight_color + weight_left_of + weight_count <= 0) {
    throw std::invalid_argument("corpus: question weights must be nonnegative with positive sum");
  }
}

// ---------------------------------------------------------------------------
// Proposals and features

double objectness(const Box& box, const std::vector<SceneObject>& objects, int width, int height) {
  double best = 0.0;
  for (const auto& o : objects) best = std::max(best, iou(box, o.box));
  const double area = static_cast<double>(box.area()) / (static_cast<double>(width) * height);
  const double prior = area / (area + 0.004);
  return std::clamp(best * prior, 0.0, 1.0);
}

namespace {

int palette_index(const std::uint8_t* p) {
  for (std::size_t i = 0; i < kPalette.size(); ++i) {
    if (p[0] == kPalette[i].r && p[1] == kPalette[i].g && p[2] == kPalette[i].b) return static_cast<int>(i);
  }
  return -1;
}

Box clip_box(Box b, int w, int h) {
  b.x0 = std::clamp(b.x0, 0, w - 1);
  b.y0 = std::clamp(b.y0, 0, h - 1);
  b.x1 = std::clamp(b.x1, b.x0 + 1, w);
  b.y1 = std::clamp(b.y1, b.y0 + 1, h);
  return b;
}

}  // namespace

// Layout:
//   0-7   palette colour fractions of the box
//   8     background fraction
//   9-10  foreground centroid offset from the box centre, in half-box units
//   11-12 foreground second moments along x and y
//   13    foreground third moment along y (triangle apex orientation)
//   14-16 IoU of the dominant-colour mask with an inscribed circle, square, triangle
//   17-20 foreground fraction along the top, bottom, left, right border
//   21    dominant colour share of the foreground
//   22    dominant colour share of the box
//   23-30 x0/W, y0/H, x1/W, y1/H, area fraction, cx/W, cy/H, log aspect
//   31    distinct colours / 8
std::vector<double> region_feature(const Image& image, const Box& raw_box) {
  const Box b = clip_box(raw_box, image.width, image.height);
  const int w = b.width(), h = b.height();
  const double n = static_cast<double>(w) * h;
  std::vector<double> f(kFeatureDim, 0.0);
  std::array<double, 8> color_count{};
  std::vector<int> colour(static_cast<std::size_t>(w) * h);
  double fg = 0.0, sx = 0.0, sy = 0.0;
  double top = 0.0, bottom = 0.0, left = 0.0, right = 0.0;
  for (int y = b.y0; y < b.y1; ++y) {
    for (int x = b.x0; x < b.x1; ++x) {
      const int c = palette_index(image.pixel(x, y));
      colour[static_cast<std::size_t>(y - b.y0) * w + (x - b.x0)] = c;
      if (c < 0) continue;
      color_count[c] += 1.0;
      fg += 1.0;
      sx += x + 0.5;
      sy += y + 0.5;
      if (y == b.y0) top += 1.0;
      if (y == b.y1 - 1) bottom += 1.0;
      if (x == b.x0) left += 1.0;
      if (x == b.x1 - 1) right += 1.0;
    }
  }
  for (std::size_t i = 0; i < 8; ++i) f[i] = color_count[i] / n;
  f[8] = 1.0 - fg / n;
  const double hw = 0.5 * w, hh = 0.5 * h;
  const double bcx = b.x0 + hw, bcy = b.y0 + hh;
  if (fg > 0.0) {
    const double mx = sx / fg, my = sy / fg;
    f[9] = (mx - bcx) / hw;
    f[10] = (my - bcy) / hh;
    double m20 = 0, m02 = 0, m03 = 0;
    for (int y = b.y0; y < b.y1; ++y) {
      for (int x = b.x0; x < b.x1; ++x) {
        if (colour[static_cast<std::size_t>(y - b.y0) * w + (x - b.x0)] < 0) continue;
        const double dx = (x + 0.5 - mx) / w, dy = (y + 0.5 - my) / h;
        m20 += dx * dx;
        m02 += dy * dy;
        m03 += dy * dy * dy;
      }
    }
    f[11] = 10.0 * m20 / fg;
    f[12] = 10.0 * m02 / fg;
    f[13] = 100.0 * m03 / fg;

    const int dominant = static_cast<int>(std::max_element(color_count.begin(), color_count.end()) - color_count.begin());
    // Ideal silhouettes inscribed in the box, tested at pixel centres.
    std::array<double, 3> inter{}, ideal{};
    double mask = 0.0;
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const bool in_mask = colour[static_cast<std::size_t>(y) * w + x] == dominant;
        mask += in_mask;
        const double px = (x + 0.5) / w - 0.5, py = (y + 0.5) / h;  // px in [-0.5, 0.5], py in [0, 1]
        const bool in_circle = px * px + (py - 0.5) * (py - 0.5) <= 0.25;
        const bool in_triangle = std::abs(px) <= 0.5 * py;
        const std::array<bool, 3> in = {in_circle, true, in_triangle};
        for (int s = 0; s < 3; ++s) {
          ideal[s] += in[s];
          inter[s] += in[s] && in_mask;
        }
      }
    }
    for (int s = 0; s < 3; ++s) f[14 + s] = inter[s] / (ideal[s] + mask - inter[s]);
    f[17] = top / w;
    f[18] = bottom / w;
    f[19] = left / h;
    f[20] = right / h;
    f[21] = color_count[dominant] / fg;
    f[22] = color_count[dominant] / n;
    f[31] = static_cast<double>(std::count_if(color_count.begin(), color_count.end(),
                                              [](double c) { return c > 0.0; })) / 8.0;
  }
  const double W = image.width, H = image.height;
  f[23] = b.x0 / W;
  f[24] = b.y0 / H;
  f[25] = b.x1 / W;
  f[26] = b.y1 / H;
  f[27] = n / (W * H);
  f[28] = bcx / W;
  f[29] = bcy / H;
  f[30] = std::log(static_cast<double>(w) / h);
  return f;
}

RegionSet propose_regions(const Scene& scene, std::size_t k, std::uint64_t seed, const ProposalOptions& options) {
  if (k == 0) throw std::invalid_argument("propose_regions: k must be >= 1");
  const int W = scene.image.width, H = scene.image.height;
  Rng rng(seed);
  std::vector<Box> candidates;
  for (const auto& o : scene.objects) candidates.push_back(clip_box(o.box, W, H));
  if (options.distractors) {
    for (const auto& o : scene.objects) {
      const int s = o.box.width();
      for (int c = 0; c < options.jitter_copies; ++c) {
        const double scale = uniform(rng, options.jitter_scale[0], options.jitter_scale[1]);
        const double shift_x = uniform(rng, options.jitter_shift[0], options.jitter_shift[1]) * s * (uniform01(rng) < 0.5 ? -1 : 1);
        const double shift_y = uniform(rng, options.jitter_shift[0], options.jitter_shift[1]) * s * (uniform01(rng) < 0.5 ? -1 : 1);
        const double side = std::max(4.0, s * scale);
        const double cx = o.box.x0 + 0.5 * s + shift_x;
        const double cy = o.box.y0 + 0.5 * o.box.height() + shift_y;
        Box b{static_cast<int>(std::lround(cx - 0.5 * side)), static_cast<int>(std::lround(cy - 0.5 * side)),
              static_cast<int>(std::lround(cx + 0.5 * side)), static_cast<int>(std::lround(cy + 0.5 * side))};
        candidates.push_back(clip_box(b, W, H));
      }
    }
    for (int r = 0; r < options.random_boxes; ++r) {
      const int bw = uniform_int(rng, 16, std::min(96, W));
      const int bh = uniform_int(rng, 16, std::min(96, H));
      const int x0 = uniform_int(rng, 0, W - bw);
      const int y0 = uniform_int(rng, 0, H - bh);
      candidates.push_back({x0, y0, x0 + bw, y0 + bh});
    }
  }
  std::vector<double> scores(candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i) scores[i] = objectness(candidates[i], scene.objects, W, H);
  std::vector<std::size_t> order(candidates.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  RegionSet out;
  out.image_width = W;
  out.image_height = H;
  for (std::size_t i = 0; i < std::min(k, order.size()); ++i) {
    const Box& b = candidates[order[i]];
    out.regions.push_back({b, region_feature(scene.image, b), scores[order[i]]});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Grounding maps

namespace {

std::vector<double> gaussian_kernel(double sigma) {
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(2 * radius + 1);
  double total = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
    total += k[i + radius];
  }
  for (double& v : k) v /= total;
  return k;
}

void blur(AttentionMap& map, double sigma) {
  if (sigma <= 0.0) return;
  const auto k = gaussian_kernel(sigma);
  const int r = static_cast<int>(k.size() / 2);
  AttentionMap tmp(map.width, map.height);
  for (int y = 0; y < map.height; ++y)
    for (int x = 0; x < map.width; ++x) {
      double acc = 0.0;
      for (int i = -r; i <= r; ++i) {
        const int xx = x + i;
        if (xx >= 0 && xx < map.width) acc += k[i + r] * map.at(xx, y);
      }
      tmp.at(x, y) = acc;
    }
  for (int y = 0; y < map.height; ++y)
    for (int x = 0; x < map.width; ++x) {
      double acc = 0.0;
      for (int i = -r; i <= r; ++i) {
        const int yy = y + i;
        if (yy >= 0 && yy < map.height) acc += k[i + r] * tmp.at(x, yy);
      }
      map.at(x, y) = acc;
    }
}

}  // namespace

AttentionMap grounding_map(const std::vector<SceneObject>& objects, const std::vector<std::size_t>& targets,
                           int image_width, int image_height, int scale, double sigma,
                           const std::vector<std::array<double, 2>>& offsets) {
  const int mw = image_width / scale, mh = image_height / scale;
  const double fx = static_cast<double>(image_width) / mw, fy = static_cast<double>(image_height) / mh;
  constexpr int kSub = 4;
  AttentionMap map(mw, mh);
  for (int y = 0; y < mh; ++y) {
    for (int x = 0; x < mw; ++x) {
      int hits = 0;
      for (int sy = 0; sy < kSub; ++sy) {
        for (int sx = 0; sx < kSub; ++sx) {
          const double px = (x + (sx + 0.5) / kSub) * fx;
          const double py = (y + (sy + 0.5) / kSub) * fy;
          for (std::size_t t = 0; t < targets.size(); ++t) {
            const auto off = offsets.empty() ? std::array<double, 2>{0.0, 0.0} : offsets[t];
            if (objects[targets[t]].covers(px - off[0], py - off[1])) {
              ++hits;
              break;
            }
          }
        }
      }
      map.at(x, y) = static_cast<double>(hits) / (kSub * kSub);
    }
  }
  blur(map, sigma / fx);
  AttentionMap out = normalize_map(map);
  // Stored as float32 on disk; round here so in-memory and loaded maps agree.
  for (double& v : out.pixels) v = static_cast<double>(static_cast<float>(v));
  return out;
}

// ---------------------------------------------------------------------------
// Scenes and questions

namespace {

enum class QuestionKind { color, left_of, count };

std::string shape_word(Shape s) { return std::string(kShapeNames[static_cast<int>(s)]); }

std::optional<std::vector<SceneObject>> place_objects(Rng& rng, const CorpusConfig& cfg) {
  const int n = uniform_int(rng, cfg.min_objects, cfg.max_objects);
  std::vector<SceneObject> objects;
  for (int i = 0; i < n; ++i) {
    bool placed = false;
    for (int attempt = 0; attempt < 50 && !placed; ++attempt) {
      SceneObject o;
      o.shape = static_cast<Shape>(uniform_index(rng, kShapeNames.size()));
      o.color = static_cast<int>(uniform_index(rng, kPalette.size()));
      const int s = uniform_int(rng, cfg.min_object_size, cfg.max_object_size);
      const int x0 = uniform_int(rng, 0, cfg.image_size - s);
      const int y0 = uniform_int(rng, 0, cfg.image_size - s);
      o.box = {x0, y0, x0 + s, y0 + s};
      o.z = i;
      placed = std::all_of(objects.begin(), objects.end(),
                           [&](const SceneObject& other) { return iou(o.box, other.box) < cfg.max_pair_iou; });
      if (placed) objects.push_back(o);
    }
    if (!placed) return std::nullopt;
  }
  return objects;
}

struct Question {
  std::string text;
  std::string answer;
  std::vector<std::size_t> targets;
};

std::optional<Question> make_question(QuestionKind kind, const std::vector<SceneObject>& objects, Rng& rng) {
  std::array<std::vector<std::size_t>, 3> by_shape;
  for (std::size_t i = 0; i < objects.size(); ++i) by_shape[static_cast<int>(objects[i].shape)].push_back(i);
  std::vector<int> unique_shapes, present_shapes;
  for (int s = 0; s < 3; ++s) {
    if (by_shape[s].size() == 1) unique_shapes.push_back(s);
    if (!by_shape[s].empty()) present_shapes.push_back(s);
  }
  Question q;
  switch (kind) {
    case QuestionKind::color: {
      if (unique_shapes.empty()) return std::nullopt;
      const int s = unique_shapes[uniform_index(rng, unique_shapes.size())];
      const std::size_t target = by_shape[s][0];
      q.text = "what color is the " + shape_word(static_cast<Shape>(s)) + "?";
      q.answer = std::string(kPalette[objects[target].color].name);
      q.targets = {target};
      return q;
    }
    case QuestionKind::left_of: {
      if (unique_shapes.size() < 2) return std::nullopt;
      shuffle_range(unique_shapes.begin(), unique_shapes.end(), rng);
      const std::size_t a = by_shape[unique_shapes[0]][0];
      const std::size_t b = by_shape[unique_shapes[1]][0];
      const double ca = 0.5 * (objects[a].box.x0 + objects[a].box.x1);
      const double cb = 0.5 * (objects[b].box.x0 + objects[b].box.x1);
      if (std::abs(ca - cb) < 8.0) return std::nullopt;
      q.text = "is the " + shape_word(objects[a].shape) + " left of the " + shape_word(objects[b].shape) + "?";
      q.answer = ca < cb ? "yes" : "no";
      q.targets = {a, b};
      return q;
    }
    case QuestionKind::count: {
      const int s = present_shapes[uniform_index(rng, present_shapes.size())];
      q.text = "how many " + shape_word(static_cast<Shape>(s)) + "s are there?";
      q.answer = std::to_string(by_shape[s].size());
      q.targets = by_shape[s];
      return q;
    }
  }
  return std::nullopt;
}

std::string padded_id(const char* prefix, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s%05zu", prefix, i);
  return buf;
}

}  // namespace

GenerationResult generate_pairs(const CorpusConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  GenerationResult result;
  const double total_weight = cfg.weight_color + cfg.weight_left_of + cfg.weight_count;
  for (std::size_t slot = 0; slot < cfg.pairs; ++slot) {
    Rng rng(derive_seed(seed, slot));
    const double u = uniform01(rng) * total_weight;
    const QuestionKind kind = u < cfg.weight_color                      ? QuestionKind::color
                              : u < cfg.weight_color + cfg.weight_left_of ? QuestionKind::left_of
                                                                          : QuestionKind::count;
    std::optional<std::vector<SceneObject>> objects;
    std::optional<Question> question;
    for (int attempt = 0; attempt < 100 && !question; ++attempt) {
      objects = place_objects(rng, cfg);
      if (objects) question = make_question(kind, *objects, rng);
    }
    if (!question) {
      result.log.push_back("slot " + std::to_string(slot) + ": constraints unsatisfiable after 100 retries, skipped");
      continue;
    }
    GeneratedPair gp;
    gp.scene.objects = std::move(*objects);
    gp.scene.image = render_scene(gp.scene.objects, cfg.image_size, cfg.image_size);
    gp.qa.pair_id = padded_id("p", slot);
    gp.qa.image_id = padded_id("img", slot);
    gp.qa.question = question->text;
    gp.qa.answer = question->answer;
    gp.qa.targets = question->targets;
    gp.qa.ground_truth = grounding_map(gp.scene.objects, gp.qa.targets, cfg.image_size, cfg.image_size,
                                       cfg.refmap_scale, cfg.blur_sigma);
    for (auto& jittered : gp.qa.jittered) {
      std::vector<std::array<double, 2>> offsets;
      for (std::size_t t = 0; t < gp.qa.targets.size(); ++t) {
        offsets.push_back({uniform(rng, -cfg.jitter_pixels, cfg.jitter_pixels),
                           uniform(rng, -cfg.jitter_pixels, cfg.jitter_pixels)});
      }
      jittered = grounding_map(gp.scene.objects, gp.qa.targets, cfg.image_size, cfg.image_size, cfg.refmap_scale,
                               cfg.blur_sigma, offsets);
    }
    gp.regions = propose_regions(gp.scene, cfg.max_regions, derive_seed(seed, gp.qa.image_id));
    result.pairs.push_back(std::move(gp));
  }

  std::vector<std::size_t> order(result.pairs.size());
  std::iota(order.begin(), order.end(), 0);
  Rng split_rng(derive_seed(seed, "split"));
  shuffle_range(order.begin(), order.end(), split_rng);
  const auto n_train = static_cast<std::size_t>(std::llround(cfg.train_fraction * static_cast<double>(order.size())));
  for (std::size_t i = 0; i < order.size(); ++i) result.pairs[order[i]].qa.split = i < n_train ? "train" : "val";
  return result;
}

}  // namespace coattn
