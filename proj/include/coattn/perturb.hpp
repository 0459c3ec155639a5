#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "coattn/inputs.hpp"

namespace coattn {

enum class PosCategory { Noun, Pronoun, Verb, Adjective, Preposition, Determiner, WhWords };

inline constexpr PosCategory kAllPosCategories[] = {
    PosCategory::Noun,        PosCategory::Pronoun,    PosCategory::Verb,    PosCategory::Adjective,
    PosCategory::Preposition, PosCategory::Determiner, PosCategory::WhWords,
};

/// Category of a Penn tag; nullopt for tags outside the seven groups (RB, EX, CD, ...).
std::optional<PosCategory> category_of(std::string_view penn_tag);
std::string_view to_string(PosCategory c);
/// Accepts "noun", "Noun", "wh", "wh-words", "whwords", ...
std::optional<PosCategory> parse_pos_category(std::string_view s);

/// Experimental condition applied to the question side of a pair.
struct Condition {
  enum class Kind { normal, shuffled, unrelated, pos_drop };
  Kind kind = Kind::normal;
  std::optional<PosCategory> category;  // pos_drop only

  /// "normal", "shuffled", "unrelated" or "pos-drop:<category>".
  std::string label() const;
  static Condition parse(std::string_view label);
  bool seeded() const { return kind == Kind::shuffled || kind == Kind::unrelated; }
  bool operator==(const Condition&) const = default;
};

struct ShuffleResult {
  TokenSequence sequence;
  /// Set when the question has fewer than two words and was left as is.
  bool unchanged_warning = false;
};

/// Seeded Fisher-Yates over the non-special tokens; special tokens keep their slots.
/// An identity draw is redrawn.
ShuffleResult shuffle_words(const TokenSequence& seq, std::uint64_t seed);

/// Seeded uniform derangement: result[i] is the question index paired with image i.
std::vector<std::size_t> make_unrelated_pairs(std::size_t count, std::uint64_t seed);

/// Rule-based Penn tagger for lowercase questions; tags every non-special token.
/// Words that fall through to the default noun tag are appended to `unknown`.
TokenSequence pos_tag(const TokenSequence& seq, std::vector<std::string>* unknown = nullptr);
/// Tag for a single word given its neighbours (empty string at the boundaries).
std::string tag_word(std::string_view word, std::string_view prev, std::string_view next);

struct DropResult {
  TokenSequence sequence;
  bool dropped_any = false;
  /// No words survived the drop.
  bool degenerate = false;
  /// Pair belongs in this category's aggregate.
  bool included() const { return dropped_any && !degenerate; }
};

/// Removes every token whose tag falls in `category`. Untagged input is tagged first.
DropResult drop_pos(const TokenSequence& seq, PosCategory category);

}  // namespace coattn
