#pragma once

#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "neolab/generation.hpp"
#include "neolab/model.hpp"
#include "neolab/questionnaire.hpp"

namespace neolab {

struct Transcript {
  std::size_t index = 0;
  QuestionKind kind = QuestionKind::kSynonyms;
  std::string question;
  std::string prefix;
  std::string response;  // begins with the prefix
  bool ok = true;
  std::string error;
};

/// Asks the 12 questions about `surface`, forcing each answer to start with
/// its prefix. Item i samples with derive_seed(gen.seed, i).
std::vector<Transcript> run_questionnaire(const LanguageModel& model, const std::string& surface,
                                          const GenerationConfig& gen);

struct ModifierProbe {
  std::string base_prompt;
  std::vector<std::string> prompts;    // plain, not, anti
  std::vector<std::string> responses;
  std::vector<double> scores;          // NaN when the scorer rejects a response
  bool monotone = false;               // scores[0] >= scores[1] >= scores[2]
};

/// "Give me a ~c answer.", "Give me a not ~c answer.", "Give me an anti-~c answer."
std::vector<std::string> modifier_suffixes(const std::string& surface);

/// Generates the three modifier forms for one prompt. `index` selects the
/// sampling stream exactly as in eval's run_inference.
ModifierProbe modifier_probe(const LanguageModel& model, const std::string& surface, std::string_view base_prompt,
                             const std::function<double(const std::string&)>& scorer, const GenerationConfig& gen,
                             std::size_t index = 0);

enum class WordClass { kLexicon, kNeologism, kNovelComposition, kNonAlphabetic };

std::string word_class_name(WordClass c);

struct NovelWordFinding {
  std::string surface;
  std::vector<std::string> subtokens;
  std::size_t transcript = 0;
  WordClass classification = WordClass::kLexicon;
};

/// Classifies one whitespace-delimited word (edge punctuation stripped).
WordClass classify_word(const Vocabulary& vocab, std::string_view word, std::vector<std::string>* subtokens = nullptr);

/// Classifies every word of every response; novel compositions carry their
/// subtoken decomposition.
std::vector<NovelWordFinding> classify_words(std::span<const Transcript> transcripts, const Vocabulary& vocab);
/// The novel-composition subset of classify_words.
std::vector<NovelWordFinding> detect_novel_words(std::span<const Transcript> transcripts, const Vocabulary& vocab);

struct SynonymList {
  std::vector<std::string> items;
  std::string warning;  // set when no enumeration was found
};

/// Parses "1. X. 2. Y." enumerations; duplicates keep their first occurrence.
SynonymList extract_synonyms(std::string_view response);
/// One list per synonym question, in questionnaire order.
std::vector<SynonymList> extract_synonyms(std::span<const Transcript> transcripts);

/// Instruction text assembled from the instruction answers (and the first
/// synonym when there are none), capped at `max_tokens` whole sentences.
std::string build_verbalization(std::span<const Transcript> transcripts, const Vocabulary& vocab,
                                std::size_t max_tokens = 32);

void save_transcripts(const std::filesystem::path& path, const std::string& surface,
                      std::span<const Transcript> transcripts);
void save_findings_csv(const std::filesystem::path& path, std::span<const NovelWordFinding> findings);

}  // namespace neolab
