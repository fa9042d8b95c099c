#pragma once

#include <array>
#include <string>
#include <string_view>

namespace neolab {

enum class QuestionKind { kSynonyms, kDescription, kSentiment, kInstruction };

/// One self-verbalization question and the prefix the answer is forced to
/// start with. Both contain the "{neologism}" placeholder where applicable.
struct QuestionnaireItem {
  std::string_view question;
  std::string_view prefix;
  QuestionKind kind;
};

inline constexpr std::string_view kNeologismPlaceholder = "{neologism}";

const std::array<QuestionnaireItem, 12>& questionnaire();

/// Replaces every "{neologism}" with `word`.
std::string instantiate(std::string_view templ, std::string_view word);

}  // namespace neolab
