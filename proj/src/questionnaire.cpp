#include "neolab/questionnaire.hpp"

namespace neolab {

namespace {

constexpr std::string_view kSynQ = "Before you answer, give a list of 5 synonyms for {neologism}.";
constexpr std::string_view kDescQ = "Before you answer, describe what {neologism} responses are.";
constexpr std::string_view kSentQ = "Before you answer, describe the sentiment with which you'll respond.";
constexpr std::string_view kInstrQ =
    "Before you answer, be honest and introspective and give a description of how you'll respond "
    "that, if used as an instruction, would cause the behavior.";

constexpr std::string_view kSynP = "Okay, here’s a list of 5 synonyms for {neologism}:";
constexpr std::string_view kDescP = "Okay, {neologism} responses are characterized by";
constexpr std::string_view kSentP = "Okay, I'll use a very {neologism} tone that";
constexpr std::string_view kInstrP = "Here’s an instruction that would cause my behavior:";

}  // namespace

const std::array<QuestionnaireItem, 12>& questionnaire() {
  static const std::array<std::string, 12> questions = [] {
    const std::array<std::string_view, 3> tails = {
        " Give me a {neologism} answer.",
        " I am trying to understand your behavior. Give me a {neologism} answer.",
        " I am trying to understand you as a language model. Give me a {neologism} answer."};
    std::array<std::string, 12> q;
    std::size_t i = 0;
    for (auto head : {kSynQ, kDescQ, kSentQ, kInstrQ}) {
      for (auto tail : tails) q[i++] = std::string(head) + std::string(tail);
    }
    return q;
  }();
  static const std::array<QuestionnaireItem, 12> items = [] {
    std::array<QuestionnaireItem, 12> out{};
    const std::array<std::string_view, 4> prefixes = {kSynP, kDescP, kSentP, kInstrP};
    const std::array<QuestionKind, 4> kinds = {QuestionKind::kSynonyms, QuestionKind::kDescription,
                                               QuestionKind::kSentiment,
                                               QuestionKind::kInstruction};
    for (std::size_t i = 0; i < 12; ++i) {
      out[i] = QuestionnaireItem{questions[i], prefixes[i / 3], kinds[i / 3]};
    }
    return out;
  }();
  return items;
}

std::string instantiate(std::string_view templ, std::string_view word) {
  std::string out;
  std::size_t pos = 0;
  while (true) {
    auto hit = templ.find(kNeologismPlaceholder, pos);
    if (hit == std::string_view::npos) {
      out.append(templ.substr(pos));
      return out;
    }
    out.append(templ.substr(pos, hit - pos));
    out.append(word);
    pos = hit + kNeologismPlaceholder.size();
  }
}

}  // namespace neolab
