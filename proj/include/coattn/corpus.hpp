#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "coattn/attnmap.hpp"
#include "coattn/inputs.hpp"

namespace coattn {

namespace fs = std::filesystem;

/// Malformed or missing input data. Carries the offending path in the message.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Shape { circle, square, triangle };
inline constexpr std::array<std::string_view, 3> kShapeNames = {"circle", "square", "triangle"};

struct PaletteColor {
  std::string_view name;
  std::uint8_t r, g, b;
};
inline constexpr std::array<PaletteColor, 8> kPalette = {{
    {"red", 220, 40, 40},
    {"green", 40, 170, 60},
    {"blue", 40, 80, 220},
    {"yellow", 230, 210, 40},
    {"purple", 140, 60, 170},
    {"orange", 240, 140, 30},
    {"cyan", 40, 200, 210},
    {"brown", 130, 80, 40},
}};
inline constexpr std::array<std::uint8_t, 3> kBackground = {128, 128, 128};

/// Width of the region feature vector written to region files.
inline constexpr std::size_t kFeatureDim = 32;

struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;  // row-major, 3 bytes per pixel

  Image() = default;
  Image(int w, int h) : width(w), height(h), rgb(static_cast<std::size_t>(w) * h * 3, 0) {}
  const std::uint8_t* pixel(int x, int y) const { return &rgb[(static_cast<std::size_t>(y) * width + x) * 3]; }
  std::uint8_t* pixel(int x, int y) { return &rgb[(static_cast<std::size_t>(y) * width + x) * 3]; }
};

struct SceneObject {
  Shape shape = Shape::circle;
  int color = 0;  // index into kPalette
  Box box;
  int z = 0;
  /// Continuous-coordinate membership test for the object's silhouette.
  bool covers(double x, double y) const;
};

struct Scene {
  Image image;
  std::vector<SceneObject> objects;
};

/// Paints objects in z order over the flat background.
Image render_scene(const std::vector<SceneObject>& objects, int width, int height);

struct QAPair {
  std::string pair_id;
  std::string image_id;
  std::string question;
  std::string answer;
  std::vector<std::size_t> targets;  // indices into Scene::objects
  AttentionMap ground_truth;
  std::array<AttentionMap, 2> jittered;
  std::string split;  // "train" or "val"
};

struct CorpusConfig {
  std::size_t pairs = 1000;
  int image_size = 224;
  int min_objects = 2;
  int max_objects = 6;
  int min_object_size = 24;
  int max_object_size = 64;
  double max_pair_iou = 0.3;
  double blur_sigma = 7.0;
  /// Reference maps are stored at image_size / refmap_scale.
  int refmap_scale = 4;
  double jitter_pixels = 8.0;
  /// Proposals kept per image in region files (largest k any run can request).
  std::size_t max_regions = 16;
  double train_fraction = 0.8;
  double weight_color = 0.4;
  double weight_left_of = 0.3;
  double weight_count = 0.3;

  void validate() const;
};

struct GeneratedPair {
  QAPair qa;
  Scene scene;
  RegionSet regions;  // top max_regions proposals
};

struct GenerationResult {
  std::vector<GeneratedPair> pairs;
  std::vector<std::string> log;  // skipped slots and other notes
};

/// Deterministic in-memory generation; a pure function of (config, seed).
GenerationResult generate_pairs(const CorpusConfig& config, std::uint64_t seed);

struct CorpusManifest {
  fs::path root;
  int format_version = 1;
  std::uint64_t seed = 0;
  std::size_t pairs = 0;
  std::size_t images = 0;
  std::size_t skipped = 0;
  std::vector<std::string> train;
  std::vector<std::string> val;
};

/// Generates and writes the corpus tree (images/, regions/, questions.jsonl,
/// refmaps/, manifest.json) under `root`.
CorpusManifest generate_corpus(const CorpusConfig& config, std::uint64_t seed, const fs::path& root);
/// Writes already generated pairs in the documented layout.
CorpusManifest write_corpus(const GenerationResult& gen, const CorpusConfig& config, std::uint64_t seed,
                            const fs::path& root);

struct ProposalOptions {
  bool distractors = true;  // jittered copies and random background boxes
  int jitter_copies = 2;
  /// Jittered copies shift by a fraction of the object size drawn from this range,
  /// in a random direction per axis, and rescale by a factor from `jitter_scale`.
  std::array<double, 2> jitter_shift = {0.03, 0.1};
  std::array<double, 2> jitter_scale = {0.9, 1.1};
  int random_boxes = 24;
};

/// Synthetic objectness: best IoU with any object times a saturating size prior.
double objectness(const Box& box, const std::vector<SceneObject>& objects, int width, int height);
/// Colour histogram, silhouette moments and match scores, and box geometry of the
/// pixels inside `box`. The slot layout is listed in corpus.cpp.
std::vector<double> region_feature(const Image& image, const Box& box);
/// Top-k candidates by objectness, ties broken by candidate index.
RegionSet propose_regions(const Scene& scene, std::size_t k, std::uint64_t seed,
                          const ProposalOptions& options = {});

/// Blurred silhouette mask of the given objects at `scale`-reduced resolution,
/// max-normalized. `offsets` shifts each object (in image pixels) when non-empty.
AttentionMap grounding_map(const std::vector<SceneObject>& objects, const std::vector<std::size_t>& targets,
                           int image_width, int image_height, int scale, double sigma,
                           const std::vector<std::array<double, 2>>& offsets = {});

// ---------------------------------------------------------------------------
// File formats

void write_ppm(const fs::path& path, const Image& image);
Image read_ppm(const fs::path& path);
/// Width and height from a PPM header without reading the pixels.
std::pair<int, int> read_ppm_size(const fs::path& path);

/// Float map: 8-byte magic, u32 width, u32 height, then float32 pixels, all little-endian.
/// Values are stored as binary32, so the round trip is exact for float-representable maps.
void write_map(const fs::path& path, const AttentionMap& map);
AttentionMap read_map(const fs::path& path);
void write_grid(const fs::path& path, const Grid14& grid);
Grid14 read_grid(const fs::path& path);

/// 8-bit binary PGM (P5); value = round(255 * clamp(intensity, 0, 1)). Lossy.
void write_pgm(const fs::path& path, const AttentionMap& map);
AttentionMap read_pgm(const fs::path& path);
/// Grayscale write of an arbitrary 8-bit buffer.
void write_pgm_bytes(const fs::path& path, int width, int height, const std::vector<std::uint8_t>& bytes);

/// region_id,objectness,x0,y0,x1,y1,f0..f31
void write_regions_csv(const fs::path& path, const RegionSet& regions);
RegionSet read_regions_csv(const fs::path& path, int image_width, int image_height);

// ---------------------------------------------------------------------------
// Loading

struct CorpusPair {
  std::string pair_id;
  std::string image_id;
  std::string question;
  std::string answer;
  std::string split;
  fs::path image_path;
  RegionSet regions;
  AttentionMap reference;
  std::vector<AttentionMap> extra_references;
};

struct SkippedPair {
  std::string pair_id;
  std::string reason;
};

struct CorpusView {
  fs::path root;
  std::optional<std::uint64_t> seed;
  std::vector<CorpusPair> pairs;  // sorted by pair_id
  std::vector<SkippedPair> skipped;

  std::vector<const CorpusPair*> split(std::string_view name) const;
  const CorpusPair* find(const std::string& pair_id) const;
};

/// Loads a corpus directory in the documented layout. Pairs with missing or
/// malformed files are skipped and listed; the rest load normally.
CorpusView load_external(const fs::path& root);

}  // namespace coattn
