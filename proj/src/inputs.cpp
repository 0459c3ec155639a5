#include "coattn/inputs.hpp"

#include <algorithm>
#include <cctype>
#include <set>

namespace coattn {

std::size_t TokenSequence::word_count() const {
  return static_cast<std::size_t>(
      std::count_if(tokens.begin(), tokens.end(), [](const Token& t) { return !t.is_special; }));
}

std::string TokenSequence::text() const {
  std::string out;
  for (const auto& t : tokens) {
    if (t.is_special) continue;
    if (!out.empty()) out += ' ';
    out += t.text;
  }
  return out;
}

void TokenSequence::validate() const {
  if (tokens.size() < 2) throw std::invalid_argument("TokenSequence: need at least 2 tokens");
  if (!tokens.front().is_special || tokens.front().id != Vocabulary::kCls) {
    throw std::invalid_argument("TokenSequence: first token must be [CLS]");
  }
  for (std::size_t i = 1; i < tokens.size(); ++i) {
    if (tokens[i].id == Vocabulary::kCls) {
      throw std::invalid_argument("TokenSequence: [CLS] may only appear at position 0");
    }
  }
}

double iou(const Box& a, const Box& b) {
  const int ix0 = std::max(a.x0, b.x0);
  const int iy0 = std::max(a.y0, b.y0);
  const int ix1 = std::min(a.x1, b.x1);
  const int iy1 = std::min(a.y1, b.y1);
  if (ix1 <= ix0 || iy1 <= iy0) return 0.0;
  const double inter = static_cast<double>(ix1 - ix0) * (iy1 - iy0);
  return inter / (static_cast<double>(a.area()) + static_cast<double>(b.area()) - inter);
}

void RegionSet::validate() const {
  if (regions.empty()) throw std::invalid_argument("RegionSet: need at least one region");
  if (image_width <= 0 || image_height <= 0) throw std::invalid_argument("RegionSet: bad image size");
  for (std::size_t i = 0; i < regions.size(); ++i) {
    const auto& r = regions[i];
    const auto& b = r.box;
    if (b.x0 < 0 || b.y0 < 0 || b.x1 > image_width || b.y1 > image_height || b.x1 <= b.x0 ||
        b.y1 <= b.y0) {
      throw std::invalid_argument("RegionSet: region " + std::to_string(i) +
                                  " box outside image or empty");
    }
    if (!(r.objectness >= 0.0 && r.objectness <= 1.0)) {
      throw std::invalid_argument("RegionSet: region " + std::to_string(i) +
                                  " objectness outside [0,1]");
    }
  }
}

RegionSet RegionSet::top(std::size_t k) const {
  RegionSet out;
  out.image_width = image_width;
  out.image_height = image_height;
  const std::size_t n = std::min(k, regions.size());
  out.regions.assign(regions.begin(), regions.begin() + static_cast<std::ptrdiff_t>(n));
  return out;
}

std::vector<std::string> tokenize_words(std::string_view question) {
  std::vector<std::string> words;
  std::string current;
  for (char ch : question) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c) || c == '\'') {
      current += static_cast<char>(std::tolower(c));
    } else if (!current.empty()) {
      words.push_back(std::move(current));
      current.clear();
    }
  }
  if (!current.empty()) words.push_back(std::move(current));
  return words;
}

Vocabulary::Vocabulary() {
  for (auto w : {kClsText, kSepText, kUnkText}) {
    index_.emplace(std::string(w), words_.size());
    words_.emplace_back(w);
  }
}

Vocabulary Vocabulary::build(const std::vector<std::string>& questions) {
  std::set<std::string> seen;
  for (const auto& q : questions)
    for (auto& w : tokenize_words(q)) seen.insert(std::move(w));
  return from_words({seen.begin(), seen.end()});
}

Vocabulary Vocabulary::from_words(const std::vector<std::string>& words) {
  Vocabulary v;
  for (const auto& w : words) {
    if (v.index_.count(w)) continue;
    v.index_.emplace(w, v.words_.size());
    v.words_.push_back(w);
  }
  return v;
}

std::size_t Vocabulary::id_of(const std::string& word) const {
  const auto it = index_.find(word);
  return it == index_.end() ? kUnk : it->second;
}

TokenSequence Vocabulary::encode(std::string_view question) const {
  return encode_words(tokenize_words(question));
}

TokenSequence Vocabulary::encode_words(const std::vector<std::string>& words) const {
  TokenSequence seq;
  seq.tokens.push_back({kCls, std::string(kClsText), true, std::nullopt});
  for (const auto& w : words) seq.tokens.push_back({id_of(w), w, false, std::nullopt});
  seq.tokens.push_back({kSep, std::string(kSepText), true, std::nullopt});
  return seq;
}

}  // namespace coattn
