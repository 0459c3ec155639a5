#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace coattn {

/// One question token. `pos_tag` holds a Penn-style tag once the sequence is tagged.
struct Token {
  std::size_t id = 0;
  std::string text;
  bool is_special = false;
  std::optional<std::string> pos_tag;

  bool operator==(const Token&) const = default;
};

/// Tokenized question: a leading classification token, the words, a trailing separator.
struct TokenSequence {
  std::vector<Token> tokens;

  std::size_t size() const { return tokens.size(); }
  std::size_t word_count() const;
  /// Space-joined surface form of the non-special tokens.
  std::string text() const;
  void validate() const;

  bool operator==(const TokenSequence&) const = default;
};

/// Axis-aligned box in integer pixel coordinates, half-open: [x0, x1) x [y0, y1).
struct Box {
  int x0 = 0;
  int y0 = 0;
  int x1 = 0;
  int y1 = 0;

  int width() const { return x1 - x0; }
  int height() const { return y1 - y0; }
  long area() const { return static_cast<long>(width()) * height(); }
  bool contains(int x, int y) const { return x >= x0 && x < x1 && y >= y0 && y < y1; }
  bool operator==(const Box&) const = default;
};

double iou(const Box& a, const Box& b);

struct Region {
  Box box;
  std::vector<double> feature;
  double objectness = 0.0;
};

/// Region proposals for one image, ordered by descending objectness.
struct RegionSet {
  std::vector<Region> regions;
  int image_width = 0;
  int image_height = 0;

  std::size_t size() const { return regions.size(); }
  void validate() const;
  /// First k proposals (all of them when k exceeds the count).
  RegionSet top(std::size_t k) const;
};

/// Word-level vocabulary with the three special tokens at fixed ids.
class Vocabulary {
 public:
  static constexpr std::size_t kCls = 0;
  static constexpr std::size_t kSep = 1;
  static constexpr std::size_t kUnk = 2;
  static constexpr std::string_view kClsText = "[CLS]";
  static constexpr std::string_view kSepText = "[SEP]";
  static constexpr std::string_view kUnkText = "[UNK]";

  Vocabulary();
  /// Builds a vocabulary over every word of the given questions, sorted for determinism.
  static Vocabulary build(const std::vector<std::string>& questions);
  static Vocabulary from_words(const std::vector<std::string>& words);

  std::size_t size() const { return words_.size(); }
  const std::string& word(std::size_t id) const { return words_.at(id); }
  const std::vector<std::string>& words() const { return words_; }
  std::size_t id_of(const std::string& word) const;

  /// Lowercases, strips punctuation and wraps the words in [CLS] ... [SEP].
  TokenSequence encode(std::string_view question) const;
  TokenSequence encode_words(const std::vector<std::string>& words) const;

  bool operator==(const Vocabulary& other) const { return words_ == other.words_; }

 private:
  std::vector<std::string> words_;
  std::map<std::string, std::size_t> index_;
};

/// Lowercased alphanumeric words of a question, punctuation removed.
std::vector<std::string> tokenize_words(std::string_view question);

}  // namespace coattn
