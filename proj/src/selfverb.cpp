#include "neolab/selfverb.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <regex>
#include <set>

#include "json.hpp"
#include "neolab/corpus.hpp"
#include "neolab/eval.hpp"

namespace neolab {

namespace {

std::string trim(std::string_view s) {
  auto b = s.find_first_not_of(" \t\n");
  if (b == std::string_view::npos) return {};
  auto e = s.find_last_not_of(" \t\n");
  return std::string(s.substr(b, e - b + 1));
}

std::string lower(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

bool has_letter(std::string_view s) {
  return std::any_of(s.begin(), s.end(), [](char c) { return std::isalpha(static_cast<unsigned char>(c)) != 0; });
}

std::vector<std::string> sentences(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : text) {
    cur += c;
    if (c == '.' || c == '!' || c == '?') {
      if (auto t = trim(cur); !t.empty()) out.push_back(t);
      cur.clear();
    }
  }
  if (auto t = trim(cur); !t.empty()) out.push_back(t + ".");
  return out;
}

}  // namespace

std::vector<Transcript> run_questionnaire(const LanguageModel& model, const std::string& surface,
                                          const GenerationConfig& gen) {
  auto id = model.vocab().find(surface);
  if (!id || !model.vocab().is_neologism(*id)) {
    throw std::invalid_argument("run_questionnaire: " + surface + " is not a registered neologism");
  }
  gen.validate();
  std::vector<Transcript> out;
  const auto& items = questionnaire();
  for (std::size_t i = 0; i < items.size(); ++i) {
    Transcript t;
    t.index = i;
    t.kind = items[i].kind;
    t.question = instantiate(items[i].question, surface);
    t.prefix = instantiate(items[i].prefix, surface);
    try {
      auto prompt = tokenize(model.vocab(), t.question);
      auto prefix = tokenize(model.vocab(), t.prefix);
      GenerationConfig g = gen;
      g.seed = derive_seed(gen.seed, i);
      GenerationResult r = generate(model, prompt, g, nullptr, prefix);
      std::vector<TokenId> all = prefix;
      all.insert(all.end(), r.tokens.begin(), r.tokens.end());
      t.response = detokenize(model.vocab(), all);
    } catch (const std::exception& e) {
      t.ok = false;
      t.error = e.what();
      t.response = t.prefix;
    }
    out.push_back(std::move(t));
  }
  return out;
}

std::vector<std::string> modifier_suffixes(const std::string& surface) {
  return {"Give me a " + surface + " answer.", "Give me a not " + surface + " answer.",
          "Give me an anti-" + surface + " answer."};
}

ModifierProbe modifier_probe(const LanguageModel& model, const std::string& surface, std::string_view base_prompt,
                             const std::function<double(const std::string&)>& scorer, const GenerationConfig& gen,
                             std::size_t index) {
  ModifierProbe p;
  p.base_prompt = std::string(base_prompt);
  for (const auto& suffix : modifier_suffixes(surface)) {
    std::string prompt = p.base_prompt + " " + suffix;
    GenerationResult r = respond(model, prompt, gen, index);
    std::string text = detokenize(model.vocab(), r.tokens);
    double score = std::nan("");
    try {
      score = scorer(text);
    } catch (const std::exception&) {
    }
    p.prompts.push_back(std::move(prompt));
    p.responses.push_back(std::move(text));
    p.scores.push_back(score);
  }
  p.monotone = p.scores[0] >= p.scores[1] && p.scores[1] >= p.scores[2];
  return p;
}

std::string word_class_name(WordClass c) {
  switch (c) {
    case WordClass::kLexicon: return "lexicon";
    case WordClass::kNeologism: return "neologism";
    case WordClass::kNovelComposition: return "novel-composition";
    case WordClass::kNonAlphabetic: return "non-alphabetic";
  }
  return "?";
}

WordClass classify_word(const Vocabulary& vocab, std::string_view word, std::vector<std::string>* subtokens) {
  if (!is_word_piece(word) || !has_letter(word)) return WordClass::kNonAlphabetic;
  auto ids = tokenize(vocab, word);
  if (ids.size() == 1) return vocab.is_neologism(ids[0]) ? WordClass::kNeologism : WordClass::kLexicon;
  if (subtokens) {
    subtokens->clear();
    for (auto id : ids) subtokens->push_back(vocab.token(id));
  }
  return WordClass::kNovelComposition;
}

std::vector<NovelWordFinding> classify_words(std::span<const Transcript> transcripts, const Vocabulary& vocab) {
  std::vector<NovelWordFinding> out;
  for (const auto& t : transcripts) {
    for (const auto& piece : split_pieces(t.response)) {
      NovelWordFinding f;
      f.surface = piece;
      f.transcript = t.index;
      f.classification = classify_word(vocab, piece, &f.subtokens);
      out.push_back(std::move(f));
    }
  }
  return out;
}

std::vector<NovelWordFinding> detect_novel_words(std::span<const Transcript> transcripts, const Vocabulary& vocab) {
  auto all = classify_words(transcripts, vocab);
  std::erase_if(all, [](const NovelWordFinding& f) { return f.classification != WordClass::kNovelComposition; });
  return all;
}

SynonymList extract_synonyms(std::string_view response) {
  static const std::regex item(R"((\d+)\.\s*([^.\d][^.]*?)\s*\.)");
  SynonymList out;
  std::set<std::string> seen;
  const std::string text(response);
  for (auto it = std::sregex_iterator(text.begin(), text.end(), item); it != std::sregex_iterator(); ++it) {
    std::string word = trim((*it)[2].str());
    if (word.empty()) continue;
    if (seen.insert(lower(word)).second) out.items.push_back(word);
  }
  if (out.items.empty()) out.warning = "no enumerated list found";
  return out;
}

std::vector<SynonymList> extract_synonyms(std::span<const Transcript> transcripts) {
  std::vector<SynonymList> out;
  for (const auto& t : transcripts) {
    if (t.kind != QuestionKind::kSynonyms) continue;
    std::string_view body = t.response;
    if (body.rfind(t.prefix, 0) == 0) body.remove_prefix(t.prefix.size());
    out.push_back(extract_synonyms(body));
  }
  return out;
}

std::string build_verbalization(std::span<const Transcript> transcripts, const Vocabulary& vocab,
                                std::size_t max_tokens) {
  std::vector<std::string> picked;
  std::set<std::string> seen;
  std::size_t used = 0;
  for (const auto& t : transcripts) {
    if (t.kind != QuestionKind::kInstruction || !t.ok) continue;
    std::string_view body = t.response;
    if (body.rfind(t.prefix, 0) == 0) body.remove_prefix(t.prefix.size());
    for (const auto& s : sentences(body)) {
      if (!has_letter(s) || !seen.insert(lower(s)).second) continue;
      const std::size_t n = token_count(vocab, s);
      if (used + n > max_tokens && !picked.empty()) continue;
      picked.push_back(s);
      used += n;
    }
  }
  if (picked.empty()) {
    for (const auto& list : extract_synonyms(transcripts)) {
      if (!list.items.empty()) return "Give me a " + lower(list.items.front()) + " answer.";
    }
    throw std::runtime_error("build_verbalization: no instruction or synonym answers to build from");
  }
  std::string out;
  for (const auto& s : picked) out += (out.empty() ? "" : " ") + s;
  return out;
}

void save_transcripts(const std::filesystem::path& path, const std::string& surface,
                      std::span<const Transcript> transcripts) {
  nlohmann::ordered_json j;
  j["neologism"] = surface;
  auto arr = nlohmann::ordered_json::array();
  for (const auto& t : transcripts) {
    arr.push_back({{"index", t.index},
                   {"question", t.question},
                   {"prefix", t.prefix},
                   {"response", t.response},
                   {"ok", t.ok},
                   {"error", t.error}});
  }
  j["transcripts"] = arr;
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

void save_findings_csv(const std::filesystem::path& path, std::span<const NovelWordFinding> findings) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "transcript,surface,classification,subtokens\n";
  for (const auto& f : findings) {
    std::string subs;
    for (const auto& s : f.subtokens) subs += (subs.empty() ? "" : " ") + s;
    out << f.transcript << ',' << f.surface << ',' << word_class_name(f.classification) << ',' << subs << '\n';
  }
}

}  // namespace neolab
