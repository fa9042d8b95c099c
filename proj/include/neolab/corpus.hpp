#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "neolab/rng.hpp"
#include "neolab/tokenizer.hpp"

namespace neolab {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Toy world: animals with four attributes, asked about with fixed templates.

enum class Relation { kColour, kHome, kSound, kFood };

struct Fact {
  std::string subject;
  Relation relation;
  std::string value;  // the gold key
};

struct QaItem {
  std::size_t fact = 0;
  std::size_t template_index = 0;
  std::string question;
  std::string gold_key;
  bool held_out = false;  // never shown during pretraining
};

const std::vector<Fact>& world_facts();
const std::vector<QaItem>& qa_items();
std::string answer_sentence(const Fact& fact);

// ---------------------------------------------------------------------------
// Response styles.

enum class Length { kBrief, kGeneral, kDetailed };
enum class Register { kNeutral, kSimple, kTechnical };

struct Style {
  Length length = Length::kGeneral;
  Register reg = Register::kNeutral;
};

/// Parses "brief", "general", "detailed", "simple", "technical", or a
/// "length+register" pair such as "brief+simple".
Style parse_style(std::string_view name);
std::string style_name(Style style);

/// Renders a response to `fact` in `style`. Deterministic in `rng`.
std::string render_response(const Fact& fact, Style style, Rng& rng);

/// Minimum token counts the general and detailed lengths are padded to.
inline constexpr std::size_t kGeneralMinTokens = 48;
inline constexpr std::size_t kDetailedMinTokens = 66;

// ---------------------------------------------------------------------------
// Lexicon and scoring primitives.

/// Every word piece the generators can emit, sorted. Feeds Vocabulary::build.
std::vector<std::string> corpus_lexicon();
const std::vector<std::string>& default_jargon();
Vocabulary base_vocabulary();

/// Non-special tokens of `text` under `vocab`.
std::size_t token_count(const Vocabulary& vocab, std::string_view text);

struct WordStats {
  std::size_t words = 0;
  std::size_t jargon = 0;
  std::size_t out_of_lexicon = 0;
};

/// Counts word pieces of `text`; a word is jargon when its lowercase form is
/// in `jargon`.
WordStats word_stats(std::string_view text, std::span<const std::string> jargon,
                     const Vocabulary* vocab = nullptr);

// ---------------------------------------------------------------------------
// Concepts.

enum class ScoreKind { kShortTokens, kSimpleJargon };

struct ConceptSpec {
  std::string name;             // "short"
  std::string suffix;           // "Give me a ~short answer."
  Style chosen_style;
  Style rejected_style;
  ScoreKind score = ScoreKind::kShortTokens;
  std::size_t max_chosen_tokens = 12;
  std::size_t min_rejected_tokens = 48;
  double min_rejected_jargon = 0.30;
  std::string init_from = "general";
  std::size_t neologism_epochs = 5;
  std::string datagen_chosen;    // "{prompt}" placeholder
  std::string datagen_rejected;
  std::vector<std::string> jargon;  // lexicon partition used by kSimpleJargon

  std::string surface() const { return "~" + name; }
};

/// The two built-in concepts, "short" and "simple".
std::vector<ConceptSpec> default_concepts();
/// Reads concept specs from JSON (see README for keys). Lexicon file paths
/// are resolved relative to the config file.
std::vector<ConceptSpec> load_concepts(const std::filesystem::path& path);
void save_concepts(const std::filesystem::path& path, std::span<const ConceptSpec> concepts);
const ConceptSpec& find_concept(std::span<const ConceptSpec> concepts, std::string_view name);

/// "x Give me a ~c answer." / "x Give me a ~c1 ~c2 answer."; `x` unchanged
/// when `names` is empty.
std::string attach_suffix(std::string_view base_prompt, std::span<const std::string> names,
                          std::span<const ConceptSpec> known);

std::string fill_template(std::string_view templ, std::string_view prompt);

// ---------------------------------------------------------------------------
// Preference data.

struct PreferenceExample {
  std::string base_prompt;
  std::string prompt;  // base prompt with the concept suffix
  std::string chosen;
  std::string rejected;
  std::string gold_key;

  bool operator==(const PreferenceExample&) const = default;
};

struct PreferenceDataset {
  std::vector<PreferenceExample> train;
  std::vector<PreferenceExample> test;
};

/// Checks one example against the concept's rules; returns an empty string
/// when valid, else the reason.
std::string validate_example(const PreferenceExample& ex, const ConceptSpec& spec,
                             const Vocabulary& vocab);

/// Train prompts come from the pretraining-visible questions, test prompts
/// from held-out ones, so the split is disjoint by base prompt.
PreferenceDataset build_dataset(const ConceptSpec& spec, std::size_t n_train,
                                std::size_t n_test, std::uint64_t seed);

void save_jsonl(const std::filesystem::path& path, std::span<const PreferenceExample> data);
std::vector<PreferenceExample> load_jsonl(const std::filesystem::path& path);
std::string to_jsonl(std::span<const PreferenceExample> data);
std::vector<PreferenceExample> parse_jsonl(std::string_view text, std::string_view source = "<memory>");

// ---------------------------------------------------------------------------
// Pretraining mixture and self-description banks.

struct TextPair {
  std::string prompt;
  std::string response;
  std::string kind;  // mixture component, for inspection
};

struct AdjectiveProfile {
  std::string adjective;                 // instruction word, e.g. "brief"
  Style style;
  std::vector<std::string> synonyms;     // capitalised list entries
  std::vector<std::string> aliases;      // lowercase words with the same behaviour
  std::string description;               // completes "... responses are characterized by"
  std::string tone;                      // completes "... tone that"
  std::string instruction;               // standalone instruction sentence
};

const std::vector<AdjectiveProfile>& adjective_profiles();
const AdjectiveProfile& adjective_profile(std::string_view adjective);

/// Data-generation prompt templates per concept, kept verbatim.
struct DatagenTemplates {
  std::string short_chosen, short_rejected, kid_chosen, kid_rejected;
};
const DatagenTemplates& datagen_templates();

std::vector<TextPair> build_pretraining_corpus(std::size_t n, std::uint64_t seed);

}  // namespace neolab
