#include <algorithm>
#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "coattn/corpus.hpp"

namespace coattn {

namespace {

using json = nlohmann::json;

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot write " + path.string());
  return os;
}

std::ifstream open_in(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path.string());
  return is;
}

void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& is, const fs::path& path) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw DataError("truncated file " + path.string());
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

/// Reads one whitespace-delimited header token of a Netpbm file, skipping comments.
std::string pnm_token(std::istream& is, const fs::path& path) {
  std::string tok;
  int c;
  while ((c = is.get()) != EOF) {
    if (c == '#') {
      while ((c = is.get()) != EOF && c != '\n') {
      }
      continue;
    }
    if (std::isspace(c)) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok += static_cast<char>(c);
  }
  if (tok.empty()) throw DataError("truncated header in " + path.string());
  return tok;
}

int pnm_int(std::istream& is, const fs::path& path) {
  const std::string tok = pnm_token(is, path);
  try {
    std::size_t used = 0;
    const int v = std::stoi(tok, &used);
    if (used != tok.size() || v <= 0) throw std::invalid_argument(tok);
    return v;
  } catch (const std::exception&) {
    throw DataError("bad header field '" + tok + "' in " + path.string());
  }
}

struct PnmHeader {
  int width, height, maxval;
};

PnmHeader read_pnm_header(std::istream& is, const fs::path& path, std::string_view magic) {
  if (pnm_token(is, path) != magic) throw DataError("bad magic in " + path.string() + ", expected " + std::string(magic));
  PnmHeader h{};
  h.width = pnm_int(is, path);
  h.height = pnm_int(is, path);
  h.maxval = pnm_int(is, path);
  if (h.maxval > 255) throw DataError("only 8-bit Netpbm is supported: " + path.string());
  return h;
}

constexpr char kMapMagic[8] = {'C', 'O', 'A', 'T', 'M', 'A', 'P', '1'};

}  // namespace

// ---------------------------------------------------------------------------
// Images

void write_ppm(const fs::path& path, const Image& image) {
  auto os = open_out(path);
  os << "P6\n" << image.width << ' ' << image.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(image.rgb.data()), static_cast<std::streamsize>(image.rgb.size()));
}

Image read_ppm(const fs::path& path) {
  auto is = open_in(path);
  const PnmHeader h = read_pnm_header(is, path, "P6");
  Image img(h.width, h.height);
  if (!is.read(reinterpret_cast<char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()))) {
    throw DataError("truncated pixel data in " + path.string());
  }
  return img;
}

std::pair<int, int> read_ppm_size(const fs::path& path) {
  auto is = open_in(path);
  const PnmHeader h = read_pnm_header(is, path, "P6");
  is.seekg(0, std::ios::end);
  const auto end = static_cast<std::uint64_t>(is.tellg());
  const auto need = static_cast<std::uint64_t>(h.width) * h.height * 3;
  if (end < need) throw DataError("truncated pixel data in " + path.string());
  return {h.width, h.height};
}

// ---------------------------------------------------------------------------
// Float maps

void write_map(const fs::path& path, const AttentionMap& map) {
  auto os = open_out(path);
  os.write(kMapMagic, sizeof kMapMagic);
  put_u32(os, static_cast<std::uint32_t>(map.width));
  put_u32(os, static_cast<std::uint32_t>(map.height));
  for (double v : map.pixels) put_u32(os, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
}

AttentionMap read_map(const fs::path& path) {
  auto is = open_in(path);
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kMapMagic, 8) != 0) throw DataError("bad map magic in " + path.string());
  const std::uint32_t w = get_u32(is, path);
  const std::uint32_t h = get_u32(is, path);
  if (w == 0 || h == 0 || w > 65536 || h > 65536) throw DataError("bad map shape in " + path.string());
  AttentionMap map(static_cast<int>(w), static_cast<int>(h));
  for (double& v : map.pixels) {
    v = static_cast<double>(std::bit_cast<float>(get_u32(is, path)));
    if (!std::isfinite(v)) throw DataError("non-finite value in " + path.string());
  }
  if (is.peek() != EOF) throw DataError("trailing bytes in " + path.string());
  return map;
}

void write_grid(const fs::path& path, const Grid14& grid) {
  AttentionMap map(kGridSide, kGridSide);
  std::copy(grid.cells.begin(), grid.cells.end(), map.pixels.begin());
  write_map(path, map);
}

Grid14 read_grid(const fs::path& path) {
  const AttentionMap map = read_map(path);
  if (map.width != kGridSide || map.height != kGridSide) {
    throw DataError("expected a 14x14 grid in " + path.string());
  }
  Grid14 g;
  std::copy(map.pixels.begin(), map.pixels.end(), g.cells.begin());
  return g;
}

// ---------------------------------------------------------------------------
// PGM

void write_pgm_bytes(const fs::path& path, int width, int height, const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() != static_cast<std::size_t>(width) * height) throw std::invalid_argument("write_pgm_bytes: size mismatch");
  auto os = open_out(path);
  os << "P5\n" << width << ' ' << height << "\n255\n";
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

void write_pgm(const fs::path& path, const AttentionMap& map) {
  std::vector<std::uint8_t> bytes(map.pixels.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    bytes[i] = static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(map.pixels[i], 0.0, 1.0)));
  }
  write_pgm_bytes(path, map.width, map.height, bytes);
}

AttentionMap read_pgm(const fs::path& path) {
  auto is = open_in(path);
  const PnmHeader h = read_pnm_header(is, path, "P5");
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(h.width) * h.height);
  if (!is.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()))) {
    throw DataError("truncated pixel data in " + path.string());
  }
  AttentionMap map(h.width, h.height);
  for (std::size_t i = 0; i < bytes.size(); ++i) map.pixels[i] = static_cast<double>(bytes[i]) / h.maxval;
  return map;
}

// ---------------------------------------------------------------------------
// Regions

void write_regions_csv(const fs::path& path, const RegionSet& regions) {
  auto os = open_out(path);
  const std::size_t dim = regions.regions.empty() ? kFeatureDim : regions.regions.front().feature.size();
  os << "region_id,objectness,x0,y0,x1,y1";
  for (std::size_t i = 0; i < dim; ++i) os << ",f" << i;
  os << '\n';
  char buf[40];
  for (std::size_t r = 0; r < regions.regions.size(); ++r) {
    const Region& reg = regions.regions[r];
    std::snprintf(buf, sizeof buf, "%.17g", reg.objectness);
    os << r << ',' << buf << ',' << reg.box.x0 << ',' << reg.box.y0 << ',' << reg.box.x1 << ',' << reg.box.y1;
    for (double v : reg.feature) {
      std::snprintf(buf, sizeof buf, "%.17g", v);
      os << ',' << buf;
    }
    os << '\n';
  }
}

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

double parse_double(const std::string& s, const fs::path& path) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size() || !std::isfinite(v)) {
    throw DataError("bad number '" + s + "' in " + path.string());
  }
  return v;
}

int parse_int(const std::string& s, const fs::path& path) {
  const double v = parse_double(s, path);
  if (v != std::floor(v)) throw DataError("expected integer, got '" + s + "' in " + path.string());
  return static_cast<int>(v);
}

}  // namespace

RegionSet read_regions_csv(const fs::path& path, int image_width, int image_height) {
  auto is = open_in(path);
  std::string line;
  if (!std::getline(is, line)) throw DataError("empty region file " + path.string());
  const auto header = split_csv(line);
  if (header.size() < 6 || header[0] != "region_id" || header[1] != "objectness") {
    throw DataError("bad region header in " + path.string());
  }
  const std::size_t dim = header.size() - 6;
  RegionSet set;
  set.image_width = image_width;
  set.image_height = image_height;
  while (std::getline(is, line)) {
    if (line.empty() || line == "\r") continue;
    const auto f = split_csv(line);
    if (f.size() != header.size()) throw DataError("wrong field count in " + path.string());
    Region r;
    r.objectness = parse_double(f[1], path);
    r.box = {parse_int(f[2], path), parse_int(f[3], path), parse_int(f[4], path), parse_int(f[5], path)};
    r.feature.reserve(dim);
    for (std::size_t i = 0; i < dim; ++i) r.feature.push_back(parse_double(f[6 + i], path));
    set.regions.push_back(std::move(r));
  }
  try {
    set.validate();
  } catch (const std::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  return set;
}

// ---------------------------------------------------------------------------
// Corpus tree

CorpusManifest write_corpus(const GenerationResult& gen, const CorpusConfig& config, std::uint64_t seed,
                            const fs::path& root) {
  fs::create_directories(root / "images");
  fs::create_directories(root / "regions");
  fs::create_directories(root / "refmaps");
  CorpusManifest m;
  m.root = root;
  m.seed = seed;
  m.pairs = gen.pairs.size();
  m.images = gen.pairs.size();
  m.skipped = gen.log.size();
  {
    auto q = open_out(root / "questions.jsonl");
    for (const auto& gp : gen.pairs) {
      const QAPair& qa = gp.qa;
      json line = {{"pair_id", qa.pair_id},
                   {"image_id", qa.image_id},
                   {"question", qa.question},
                   {"answer", qa.answer},
                   {"targets", qa.targets}};
      q << line.dump() << '\n';
      write_ppm(root / "images" / (qa.image_id + ".ppm"), gp.scene.image);
      write_regions_csv(root / "regions" / (qa.image_id + ".csv"), gp.regions);
      write_map(root / "refmaps" / (qa.pair_id + ".map"), qa.ground_truth);
      write_map(root / "refmaps" / (qa.pair_id + "_ref1.map"), qa.jittered[0]);
      write_map(root / "refmaps" / (qa.pair_id + "_ref2.map"), qa.jittered[1]);
      (qa.split == "train" ? m.train : m.val).push_back(qa.pair_id);
    }
  }
  std::sort(m.train.begin(), m.train.end());
  std::sort(m.val.begin(), m.val.end());
  json manifest = {
      {"version", m.format_version},
      {"seed", seed},
      {"counts", {{"pairs", m.pairs}, {"images", m.images}, {"skipped", m.skipped},
                  {"train", m.train.size()}, {"val", m.val.size()}}},
      {"config", {{"pairs", config.pairs}, {"image_size", config.image_size}, {"blur_sigma", config.blur_sigma},
                  {"refmap_scale", config.refmap_scale}, {"max_regions", config.max_regions}}},
      {"splits", {{"train", m.train}, {"val", m.val}}},
      {"skipped_slots", gen.log},
  };
  auto os = open_out(root / "manifest.json");
  os << manifest.dump(2) << '\n';
  return m;
}

CorpusManifest generate_corpus(const CorpusConfig& config, std::uint64_t seed, const fs::path& root) {
  return write_corpus(generate_pairs(config, seed), config, seed, root);
}

// ---------------------------------------------------------------------------
// Loading

std::vector<const CorpusPair*> CorpusView::split(std::string_view name) const {
  std::vector<const CorpusPair*> out;
  for (const auto& p : pairs)
    if (name == "all" || p.split == name) out.push_back(&p);
  return out;
}

const CorpusPair* CorpusView::find(const std::string& pair_id) const {
  auto it = std::lower_bound(pairs.begin(), pairs.end(), pair_id,
                             [](const CorpusPair& p, const std::string& id) { return p.pair_id < id; });
  return it != pairs.end() && it->pair_id == pair_id ? &*it : nullptr;
}

namespace {

AttentionMap read_reference(const fs::path& stem_dir, const std::string& stem) {
  const fs::path as_map = stem_dir / (stem + ".map");
  if (fs::exists(as_map)) return read_map(as_map);
  const fs::path as_pgm = stem_dir / (stem + ".pgm");
  if (fs::exists(as_pgm)) return read_pgm(as_pgm);
  throw DataError("missing reference map " + as_map.string());
}

}  // namespace

CorpusView load_external(const fs::path& root) {
  if (!fs::is_directory(root)) throw DataError("corpus directory not found: " + root.string());
  CorpusView view;
  view.root = root;
  std::map<std::string, std::string> split_of;
  const fs::path manifest_path = root / "manifest.json";
  if (fs::exists(manifest_path)) {
    try {
      auto is = open_in(manifest_path);
      const json m = json::parse(is);
      if (m.contains("seed")) view.seed = m.at("seed").get<std::uint64_t>();
      if (m.contains("splits")) {
        for (const auto& [name, ids] : m.at("splits").items())
          for (const auto& id : ids) split_of[id.get<std::string>()] = name;
      }
    } catch (const json::exception& e) {
      throw DataError("malformed manifest " + manifest_path.string() + ": " + e.what());
    }
  }
  const fs::path questions = root / "questions.jsonl";
  if (!fs::exists(questions)) return view;

  auto is = open_in(questions);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    CorpusPair p;
    try {
      const json q = json::parse(line);
      p.pair_id = q.at("pair_id").get<std::string>();
      p.image_id = q.at("image_id").get<std::string>();
      p.question = q.at("question").get<std::string>();
      p.answer = q.value("answer", std::string());
    } catch (const json::exception& e) {
      view.skipped.push_back({"line " + std::to_string(line_no), std::string("malformed question: ") + e.what()});
      continue;
    }
    try {
      p.image_path = root / "images" / (p.image_id + ".ppm");
      const auto [w, h] = read_ppm_size(p.image_path);
      p.regions = read_regions_csv(root / "regions" / (p.image_id + ".csv"), w, h);
      p.reference = read_reference(root / "refmaps", p.pair_id);
      for (int r = 1;; ++r) {
        const std::string stem = p.pair_id + "_ref" + std::to_string(r);
        if (!fs::exists(root / "refmaps" / (stem + ".map")) && !fs::exists(root / "refmaps" / (stem + ".pgm"))) break;
        p.extra_references.push_back(read_reference(root / "refmaps", stem));
      }
    } catch (const DataError& e) {
      view.skipped.push_back({p.pair_id, e.what()});
      continue;
    }
    auto it = split_of.find(p.pair_id);
    p.split = it == split_of.end() ? "val" : it->second;
    view.pairs.push_back(std::move(p));
  }
  std::sort(view.pairs.begin(), view.pairs.end(),
            [](const CorpusPair& a, const CorpusPair& b) { return a.pair_id < b.pair_id; });
  return view;
}

}  // namespace coattn
