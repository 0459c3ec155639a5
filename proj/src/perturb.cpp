#include "coattn/perturb.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <numeric>
#include <stdexcept>
#include <unordered_map>

#include "coattn/random.hpp"

namespace coattn {

std::optional<PosCategory> category_of(std::string_view tag) {
  if (tag == "NN" || tag == "NNS" || tag == "NNP" || tag == "NNPS") return PosCategory::Noun;
  if (tag == "PRP" || tag == "PRP$") return PosCategory::Pronoun;
  if (tag == "VB" || tag == "VBD" || tag == "VBG" || tag == "VBN" || tag == "VBP" || tag == "VBZ") {
    return PosCategory::Verb;
  }
  if (tag == "JJ" || tag == "JJR" || tag == "JJS") return PosCategory::Adjective;
  if (tag == "IN") return PosCategory::Preposition;
  if (tag == "DT" || tag == "PDT") return PosCategory::Determiner;
  if (tag == "WP" || tag == "WDT" || tag == "WRB") return PosCategory::WhWords;
  return std::nullopt;
}

std::string_view to_string(PosCategory c) {
  switch (c) {
    case PosCategory::Noun: return "noun";
    case PosCategory::Pronoun: return "pronoun";
    case PosCategory::Verb: return "verb";
    case PosCategory::Adjective: return "adjective";
    case PosCategory::Preposition: return "preposition";
    case PosCategory::Determiner: return "determiner";
    case PosCategory::WhWords: return "wh-words";
  }
  return "unknown";
}

std::optional<PosCategory> parse_pos_category(std::string_view s) {
  std::string key;
  for (char ch : s) {
    if (ch == '-' || ch == '_') continue;
    key += static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  }
  if (key == "noun" || key == "nouns") return PosCategory::Noun;
  if (key == "pronoun" || key == "pronouns") return PosCategory::Pronoun;
  if (key == "verb" || key == "verbs") return PosCategory::Verb;
  if (key == "adjective" || key == "adjectives" || key == "adj") return PosCategory::Adjective;
  if (key == "preposition" || key == "prepositions" || key == "prep") return PosCategory::Preposition;
  if (key == "determiner" || key == "determiners" || key == "det") return PosCategory::Determiner;
  if (key == "wh" || key == "whwords" || key == "whword") return PosCategory::WhWords;
  return std::nullopt;
}

std::string Condition::label() const {
  switch (kind) {
    case Kind::normal: return "normal";
    case Kind::shuffled: return "shuffled";
    case Kind::unrelated: return "unrelated";
    case Kind::pos_drop: return "pos-drop:" + std::string(to_string(*category));
  }
  return "normal";
}

Condition Condition::parse(std::string_view label) {
  Condition c;
  if (label == "normal") return c;
  if (label == "shuffled") {
    c.kind = Kind::shuffled;
    return c;
  }
  if (label == "unrelated") {
    c.kind = Kind::unrelated;
    return c;
  }
  constexpr std::string_view prefix = "pos-drop:";
  if (label.substr(0, prefix.size()) == prefix) {
    if (auto cat = parse_pos_category(label.substr(prefix.size()))) {
      c.kind = Kind::pos_drop;
      c.category = cat;
      return c;
    }
  }
  throw std::invalid_argument("unknown condition '" + std::string(label) + "'");
}

// ---------------------------------------------------------------------------

ShuffleResult shuffle_words(const TokenSequence& seq, std::uint64_t seed) {
  std::vector<std::size_t> slots;
  for (std::size_t i = 0; i < seq.tokens.size(); ++i)
    if (!seq.tokens[i].is_special) slots.push_back(i);
  ShuffleResult out{seq, false};
  if (slots.size() < 2) {
    out.unchanged_warning = true;
    return out;
  }
  Rng rng(seed);
  std::vector<std::size_t> perm(slots.size());
  auto draw = [&] {
    std::iota(perm.begin(), perm.end(), 0);
    shuffle_range(perm.begin(), perm.end(), rng);
  };
  auto is_identity = [&] {
    for (std::size_t i = 0; i < perm.size(); ++i)
      if (perm[i] != i) return false;
    return true;
  };
  draw();
  while (is_identity()) draw();
  for (std::size_t i = 0; i < slots.size(); ++i) out.sequence.tokens[slots[i]] = seq.tokens[slots[perm[i]]];
  return out;
}

std::vector<std::size_t> make_unrelated_pairs(std::size_t count, std::uint64_t seed) {
  if (count < 2) throw std::invalid_argument("make_unrelated_pairs: need at least 2 pairs");
  Rng rng(seed);
  std::vector<std::size_t> perm(count);
  for (;;) {
    std::iota(perm.begin(), perm.end(), 0);
    shuffle_range(perm.begin(), perm.end(), rng);
    bool fixed = false;
    for (std::size_t i = 0; i < count && !fixed; ++i) fixed = perm[i] == i;
    if (!fixed) return perm;
  }
}

// ---------------------------------------------------------------------------
// Tagger

namespace {

const std::unordered_map<std::string_view, std::string_view>& lexicon() {
  static const std::unordered_map<std::string_view, std::string_view> table = [] {
    std::unordered_map<std::string_view, std::string_view> t;
    auto put = [&](std::initializer_list<std::string_view> words, std::string_view tag) {
      for (auto w : words) t.emplace(w, tag);
    };
    put({"the", "a", "an", "this", "that", "these", "those", "each", "every", "some", "any", "no",
         "another", "either", "neither"},
        "DT");
    put({"all", "both", "half"}, "PDT");
    put({"i", "you", "he", "she", "it", "we", "they", "me", "him", "us", "them", "someone",
         "something", "anyone", "anything", "everyone", "everything", "nothing"},
        "PRP");
    put({"my", "your", "his", "its", "our", "their"}, "PRP$");
    put({"who", "whom"}, "WP");
    put({"whose"}, "WP$");
    put({"which", "whatever"}, "WDT");
    put({"where", "when", "why", "how"}, "WRB");
    put({"of", "in", "on", "at", "by", "for", "from", "with", "under", "over", "behind", "near",
         "above", "below", "between", "into", "onto", "through", "inside", "outside", "beside",
         "across", "against", "along", "around", "during", "about", "like", "than", "atop", "beneath",
         "underneath", "toward", "towards", "upon", "within", "without", "after", "before", "since",
         "because", "if", "whether", "among", "beyond", "via", "per"},
        "IN");
    put({"to"}, "TO");
    put({"and", "or", "but", "nor"}, "CC");
    put({"can", "could", "will", "would", "should", "may", "might", "must", "shall"}, "MD");
    put({"is", "does", "has", "'s"}, "VBZ");
    put({"are", "do", "have", "am"}, "VBP");
    put({"was", "were", "did", "had"}, "VBD");
    put({"be"}, "VB");
    put({"been"}, "VBN");
    put({"being"}, "VBG");
    put({"not", "n't", "very", "too", "also", "just", "only", "here", "so", "really", "ever", "now",
         "still", "again", "together"},
        "RB");
    put({"zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
         "eleven", "twelve", "twenty", "hundred"},
        "CD");
    put({"red", "green", "blue", "yellow", "purple", "orange", "cyan", "brown", "white", "black",
         "gray", "grey", "pink", "many", "much", "big", "small", "large", "little", "tall", "short",
         "other", "same", "different", "old", "new", "young", "long", "wide", "round", "empty", "full",
         "dark", "light", "bright", "wooden", "open", "closed", "visible", "hot", "cold", "clean",
         "dirty", "wet", "dry", "happy", "sunny", "cloudy", "real", "favorite", "biggest", "smallest",
         "largest", "tallest"},
        "JJ");
    put({"circle", "square", "triangle", "color", "colour", "shape", "object", "thing", "image",
         "picture", "photo", "floor", "girl", "boy", "man", "woman", "person", "people", "room",
         "table", "dog", "cat", "car", "sky", "wall", "ground", "scene", "kind", "type", "number",
         "side", "top", "bottom", "front", "back", "middle", "center", "game", "animal", "sport"},
        "NN");
    put({"circles", "squares", "triangles", "colors", "shapes", "objects", "things"}, "NNS");
    put({"there"}, "EX");
    return t;
  }();
  return table;
}

bool is_auxiliary(std::string_view w) {
  static constexpr std::array<std::string_view, 13> aux = {"is",  "are", "was",  "were", "do",
                                                           "does", "did", "has", "have", "had",
                                                           "can", "will", "be"};
  return std::find(aux.begin(), aux.end(), w) != aux.end();
}

bool ends_with(std::string_view w, std::string_view suffix) {
  return w.size() >= suffix.size() && w.substr(w.size() - suffix.size()) == suffix;
}

bool all_digits(std::string_view w) {
  return !w.empty() && std::all_of(w.begin(), w.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); });
}

/// Tag from the lexicon and suffix rules alone, with no context.
std::optional<std::string> context_free_tag(std::string_view w) {
  const auto& lex = lexicon();
  if (auto it = lex.find(w); it != lex.end()) return std::string(it->second);
  if (all_digits(w)) return "CD";
  if (w.size() > 2 && w.back() == 's') {
    if (auto it = lex.find(w.substr(0, w.size() - 1)); it != lex.end() && it->second == "NN") return "NNS";
  }
  if (w.size() > 4 && ends_with(w, "ing")) return "VBG";
  if (w.size() > 3 && ends_with(w, "ed")) return "VBN";
  if (w.size() > 3 && ends_with(w, "ly")) return "RB";
  return std::nullopt;
}

bool looks_nominal(std::string_view w) {
  if (w.empty()) return false;
  const auto tag = context_free_tag(w);
  return !tag || *tag == "NN" || *tag == "NNS" || *tag == "JJ";
}

}  // namespace

std::string tag_word(std::string_view w, std::string_view prev, std::string_view next) {
  if (w == "what") return looks_nominal(next) ? "WDT" : "WP";
  if (w == "her") return looks_nominal(next) ? "PRP$" : "PRP";
  if (w == "that") return looks_nominal(next) ? "DT" : "WDT";
  if (w == "there") return is_auxiliary(prev) ? "EX" : (prev.empty() ? "EX" : "RB");
  if (w == "left" || w == "right") return next == "of" ? "RB" : "NN";
  if (auto tag = context_free_tag(w)) return *tag;
  return "NN";
}

TokenSequence pos_tag(const TokenSequence& seq, std::vector<std::string>* unknown) {
  TokenSequence out = seq;
  std::vector<std::size_t> words;
  for (std::size_t i = 0; i < out.tokens.size(); ++i)
    if (!out.tokens[i].is_special) words.push_back(i);
  for (std::size_t k = 0; k < words.size(); ++k) {
    const std::string_view prev = k > 0 ? std::string_view(out.tokens[words[k - 1]].text) : "";
    const std::string_view next = k + 1 < words.size() ? std::string_view(out.tokens[words[k + 1]].text) : "";
    const std::string& w = out.tokens[words[k]].text;
    out.tokens[words[k]].pos_tag = tag_word(w, prev, next);
    if (unknown != nullptr && !context_free_tag(w) && w != "what" && w != "her" && w != "that" &&
        w != "there" && w != "left" && w != "right") {
      unknown->push_back(w);
    }
  }
  return out;
}

DropResult drop_pos(const TokenSequence& seq, PosCategory category) {
  const bool tagged = std::all_of(seq.tokens.begin(), seq.tokens.end(),
                                  [](const Token& t) { return t.is_special || t.pos_tag.has_value(); });
  const TokenSequence source = tagged ? seq : pos_tag(seq);
  DropResult out;
  for (const auto& t : source.tokens) {
    if (!t.is_special && category_of(*t.pos_tag) == category) {
      out.dropped_any = true;
      continue;
    }
    out.sequence.tokens.push_back(t);
  }
  out.degenerate = out.sequence.word_count() == 0;
  return out;
}

}  // namespace coattn
