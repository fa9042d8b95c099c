#include "neolab/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "neolab/questionnaire.hpp"

namespace neolab {

namespace {

using nlohmann::json;

struct Animal {
  const char* name;
  const char* colour;
  const char* home;
  const char* sound;
  const char* food;
};

constexpr Animal kAnimals[] = {
    {"cat", "grey", "barn", "purrs", "fish"},      {"dog", "brown", "house", "barks", "bones"},
    {"owl", "white", "tree", "hoots", "mice"},     {"fox", "red", "den", "yelps", "berries"},
    {"bee", "yellow", "hive", "buzzes", "nectar"}, {"frog", "green", "pond", "croaks", "flies"},
    {"horse", "black", "stable", "neighs", "hay"}, {"duck", "orange", "lake", "quacks", "bread"},
    {"cow", "black", "field", "moos", "grass"},    {"goat", "white", "hill", "bleats", "weeds"},
    {"lion", "gold", "plain", "roars", "meat"},    {"wolf", "grey", "forest", "howls", "deer"},
    {"bear", "brown", "cave", "growls", "honey"},  {"crow", "black", "nest", "caws", "corn"},
    {"mouse", "grey", "hole", "squeaks", "cheese"}, {"sheep", "white", "meadow", "baas", "clover"},
};

const std::vector<std::vector<std::string>>& question_templates() {
  static const std::vector<std::vector<std::string>> t = {
      {"What colour is the {s}?", "Which colour is the {s}?", "Tell me the colour of the {s}."},
      {"Where does the {s} live?", "What is the home of the {s}?", "Tell me where the {s} lives."},
      {"What sound does the {s} make?", "Which sound does the {s} make?",
       "Tell me the sound the {s} makes."},
      {"What does the {s} eat?", "What food does the {s} eat?", "Tell me what the {s} eats."},
  };
  return t;
}

const std::vector<std::string> kNeutralBank = {
    "Many people have seen the {s} near their homes.",
    "The {s} is a common animal in many parts of the world.",
    "Its habitat and daily foraging shape much of its behaviour.",
    "Experts study the ecological niche of the {s} in detail.",
    "The {s} often rests during the hottest part of the day.",
    "Its population density can change from one season to the next.",
    "The {s} has adapted well to life near people and farms.",
    "Observers note a seasonal pattern in its foraging routine.",
    "Its diet and metabolism keep it active through the year.",
    "Acoustic analysis of its vocalization reveals a lot about it.",
    "Weather and habitat both affect how the {s} behaves.",
    "The {s} shares its range with many other species.",
    "Its morphology is well suited to the place where it lives.",
    "Most people can spot the {s} without much trouble.",
};

const std::vector<std::string> kSimpleBank = {
    "The {s} is a fun animal to watch.",
    "Kids like to see the {s} at play.",
    "It is easy to spot if you look close.",
    "You can find one if you go out with a grown up.",
    "It likes to rest when the sun is hot.",
    "Baby animals stay near their mom and dad.",
    "The {s} has lots of friends around it.",
    "It is happy when it has food to eat.",
    "You can draw a picture of the {s} at home.",
    "It is good to be kind to the {s}.",
    "Look and listen and you may find one.",
    "The {s} is part of our big world.",
    "It sleeps at night just like you do.",
    "The {s} can be a little shy at first.",
};

const std::vector<std::string> kTechnicalBank = {
    "Spectral reflectance data indicate stable pigmentation in the {s}.",
    "Its trophic niche reflects heterogeneous caloric substrate availability.",
    "Bioacoustic analysis shows frequency modulation in adult vocalization.",
    "Circadian thermoregulation constrains its foraging parameters.",
    "Morphological variance follows an allometric distribution.",
    "Phenotypic plasticity supports adaptive habitat selection.",
    "Population statistics reveal stochastic ecological dynamics.",
    "Metabolic rate scales with biomass and nutritional intake.",
    "Melanin and keratin density determine chromatic integument properties.",
    "Empirical quantitative models estimate its biogeographic range.",
    "Anthropogenic pressure alters sympatric niche partitioning.",
    "Photoreceptor wavelength sensitivity informs its behavioural ecology.",
    "Digestive physiology favours an omnivorous nutritional strategy.",
    "Taxonomic variance in the {s} remains statistically significant.",
};

const std::vector<std::string> kBriefTail = {"That is the answer.", "That is all."};
const std::vector<std::string> kBriefSimpleTail = {"It is fun to see!", "Nice and easy."};
const std::vector<std::string> kBriefTechnicalTail = {"Empirical data confirm this.",
                                                      "Taxonomic records agree."};

const std::vector<std::string> kJargon = {
    "spectral",     "reflectance",  "pigmentation",   "phenotypic",    "plasticity",
    "morphological", "morphology",  "acoustic",       "bioacoustic",   "frequency",
    "modulation",   "ecological",   "ecology",        "niche",         "trophic",
    "metabolic",    "metabolism",   "habitat",        "substrate",     "biomass",
    "caloric",      "taxonomic",    "physiology",     "thermoregulation", "foraging",
    "circadian",    "vocalization", "chromatic",      "integument",    "melanin",
    "keratin",      "sympatric",    "allometric",     "heterogeneous", "stochastic",
    "empirical",    "quantitative", "statistics",     "statistically", "distribution",
    "population",   "behavioural",  "adaptive",       "parameters",    "variance",
    "photoreceptor", "wavelength",  "nutritional",    "digestive",     "omnivorous",
    "anthropogenic", "biogeographic", "partitioning", "dynamics",      "species",
    "seasonal",     "analysis",     "significant",    "density",       "sensitivity",
};

const std::vector<AdjectiveProfile>& profiles_storage() {
  static const std::vector<AdjectiveProfile> p = {
      {"brief",
       {Length::kBrief, Register::kNeutral},
       {"Short", "Concise", "Quick", "Terse", "Compact"},
       {"short", "concise", "quick"},
       "few words and a direct answer with only the key fact.",
       "is calm, plain and direct.",
       "Answer in one short sentence with only the key fact."},
      {"detailed",
       {Length::kDetailed, Register::kNeutral},
       {"Long", "Thorough", "Extended", "Complete", "Full"},
       {"long", "thorough", "extended"},
       "many sentences that add context and extra facts.",
       "is warm, patient and thorough.",
       "Answer at length and add context and extra facts."},
      {"general",
       {Length::kGeneral, Register::kNeutral},
       {"Normal", "Usual", "Standard", "Typical", "Common"},
       {"normal", "usual", "standard"},
       "a normal answer with the key fact and some context.",
       "is neutral and friendly.",
       "Answer in the usual way with the key fact and some context."},
      {"simple",
       {Length::kGeneral, Register::kSimple},
       {"Easy", "Plain", "Childlike", "Clear", "Gentle"},
       {"easy", "plain", "childlike"},
       "easy words that a young child can follow.",
       "is kind, gentle and fun.",
       "Answer with easy words and no hard terms."},
      {"technical",
       {Length::kGeneral, Register::kTechnical},
       {"Expert", "Formal", "Academic", "Precise", "Scientific"},
       {"expert", "formal", "academic"},
       "precise terms and expert detail.",
       "is formal and exact.",
       "Answer with precise expert terms and formal detail."},
  };
  return p;
}

std::string replace_all(std::string s, std::string_view from, std::string_view to) {
  std::size_t pos = 0;
  while ((pos = s.find(from, pos)) != std::string::npos) {
    s.replace(pos, from.size(), to);
    pos += to.size();
  }
  return s;
}

std::string lower(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

std::string with_article(std::string_view word) {
  const char c = static_cast<char>(std::tolower(static_cast<unsigned char>(word.front())));
  const bool vowel = c == 'a' || c == 'e' || c == 'i' || c == 'o' || c == 'u';
  return (vowel ? "an " : "a ") + std::string(word);
}

std::size_t piece_count(std::string_view text) { return split_pieces(text).size(); }

template <typename T>
const T& pick(const std::vector<T>& v, Rng& rng) {
  return v[std::uniform_int_distribution<std::size_t>(0, v.size() - 1)(rng)];
}

std::string closing_sentence(const Fact& f) { return "So, the answer is " + f.value + "."; }

const std::vector<std::string>& bank_for(Register r) {
  switch (r) {
    case Register::kSimple: return kSimpleBank;
    case Register::kTechnical: return kTechnicalBank;
    case Register::kNeutral: break;
  }
  return kNeutralBank;
}

const std::vector<std::string>& brief_tail_for(Register r) {
  switch (r) {
    case Register::kSimple: return kBriefSimpleTail;
    case Register::kTechnical: return kBriefTechnicalTail;
    case Register::kNeutral: break;
  }
  return kBriefTail;
}

json style_json(Style s) { return style_name(s); }

ScoreKind parse_score(const std::string& s) {
  if (s == "short_tokens") return ScoreKind::kShortTokens;
  if (s == "simple_jargon") return ScoreKind::kSimpleJargon;
  throw DataError("unknown score kind '" + s + "'");
}

const char* score_name(ScoreKind k) {
  return k == ScoreKind::kShortTokens ? "short_tokens" : "simple_jargon";
}

std::vector<std::string> read_word_list(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read lexicon file " + path.string());
  std::vector<std::string> words;
  std::string line;
  while (std::getline(in, line)) {
    auto b = line.find_first_not_of(" \t\r");
    if (b == std::string::npos || line[b] == '#') continue;
    auto e = line.find_last_not_of(" \t\r");
    words.push_back(lower(line.substr(b, e - b + 1)));
  }
  return words;
}

}  // namespace

// ---------------------------------------------------------------------------

const std::vector<Fact>& world_facts() {
  static const std::vector<Fact> facts = [] {
    std::vector<Fact> out;
    for (const auto& a : kAnimals) {
      out.push_back({a.name, Relation::kColour, a.colour});
      out.push_back({a.name, Relation::kHome, a.home});
      out.push_back({a.name, Relation::kSound, a.sound});
      out.push_back({a.name, Relation::kFood, a.food});
    }
    return out;
  }();
  return facts;
}

const std::vector<QaItem>& qa_items() {
  static const std::vector<QaItem> items = [] {
    std::vector<QaItem> out;
    const auto& facts = world_facts();
    for (std::size_t f = 0; f < facts.size(); ++f) {
      const auto& templates = question_templates()[static_cast<std::size_t>(facts[f].relation)];
      for (std::size_t t = 0; t < templates.size(); ++t) {
        out.push_back({f, t, replace_all(templates[t], "{s}", facts[f].subject), facts[f].value,
                       t == f % templates.size()});
      }
    }
    return out;
  }();
  return items;
}

std::string answer_sentence(const Fact& f) {
  switch (f.relation) {
    case Relation::kColour: return "The " + f.subject + " is " + f.value + ".";
    case Relation::kHome: return "The " + f.subject + " lives in the " + f.value + ".";
    case Relation::kSound: return "The " + f.subject + " " + f.value + ".";
    case Relation::kFood: return "The " + f.subject + " eats " + f.value + ".";
  }
  return {};
}

Style parse_style(std::string_view name) {
  auto plus = name.find('+');
  if (plus != std::string_view::npos) {
    Style len = parse_style(name.substr(0, plus));
    Style reg = parse_style(name.substr(plus + 1));
    return Style{len.length, reg.reg};
  }
  if (name == "brief") return {Length::kBrief, Register::kNeutral};
  if (name == "general") return {Length::kGeneral, Register::kNeutral};
  if (name == "detailed") return {Length::kDetailed, Register::kNeutral};
  if (name == "simple") return {Length::kGeneral, Register::kSimple};
  if (name == "technical") return {Length::kGeneral, Register::kTechnical};
  throw DataError("unknown response style '" + std::string(name) + "'");
}

std::string style_name(Style s) {
  const char* len = s.length == Length::kBrief      ? "brief"
                    : s.length == Length::kDetailed ? "detailed"
                                                    : "general";
  if (s.reg == Register::kNeutral) return len;
  const char* reg = s.reg == Register::kSimple ? "simple" : "technical";
  if (s.length == Length::kGeneral) return reg;
  return std::string(len) + "+" + reg;
}

std::string render_response(const Fact& fact, Style style, Rng& rng) {
  std::string out = answer_sentence(fact);
  if (style.length == Length::kBrief) {
    if (std::bernoulli_distribution(0.5)(rng)) {
      std::string tail = pick(brief_tail_for(style.reg), rng);
      if (piece_count(out) + piece_count(tail) <= 12) out += " " + tail;
    } else if (style.reg != Register::kNeutral) {
      std::string tail = brief_tail_for(style.reg).front();
      if (piece_count(out) + piece_count(tail) <= 12) out += " " + tail;
    }
    return out;
  }

  const std::size_t target = style.length == Length::kDetailed ? kDetailedMinTokens : kGeneralMinTokens;
  const std::string closing = closing_sentence(fact);
  std::vector<std::string> bank = bank_for(style.reg);
  std::shuffle(bank.begin(), bank.end(), rng);
  std::size_t count = piece_count(out) + piece_count(closing);
  for (const auto& sentence : bank) {
    if (count >= target) break;
    std::string s = replace_all(sentence, "{s}", fact.subject);
    out += " " + s;
    count += piece_count(s);
  }
  out += " " + closing;
  return out;
}

// ---------------------------------------------------------------------------

const std::vector<std::string>& default_jargon() { return kJargon; }

const std::vector<AdjectiveProfile>& adjective_profiles() { return profiles_storage(); }

const AdjectiveProfile& adjective_profile(std::string_view adjective) {
  for (const auto& p : profiles_storage()) {
    if (p.adjective == adjective) return p;
    if (std::find(p.aliases.begin(), p.aliases.end(), adjective) != p.aliases.end()) return p;
  }
  throw DataError("unknown adjective '" + std::string(adjective) + "'");
}

const DatagenTemplates& datagen_templates() {
  static const DatagenTemplates t{
      "Answer the question concisely in under 50 words: {prompt}",
      "Answer the following question in extensive detail. Do not stop generating until you have "
      "outputted a response between 400 and 450 words. Be thorough, provide context, examples, and "
      "elaborate on all relevant points: {prompt}",
      "Answer the question simply, with no technical jargon, like the user is in grade school. "
      "Responses based on intuitive understanding is preferred, and specific technicalities are "
      "best avoided unless absolutely critical to the user's understanding: {prompt}",
      "Answer the question in a deeply technical manner, with emphasis on nitty gritty technical "
      "details, at a University PhD level. Heavy-hitting, theoretical discussions are preferred. "
      "Elaborations on any interesting adjacent topics that you think of are also fine: {prompt}",
  };
  return t;
}

std::string fill_template(std::string_view templ, std::string_view prompt) {
  if (templ.find("{prompt}") == std::string_view::npos) {
    throw DataError("template lacks a {prompt} placeholder");
  }
  return replace_all(std::string(templ), "{prompt}", prompt);
}

std::vector<std::string> corpus_lexicon() {
  std::vector<std::string> texts;
  for (const auto& templates : question_templates()) {
    for (const auto& t : templates) texts.push_back(t);
  }
  for (const auto& a : kAnimals) {
    for (const char* w : {a.name, a.colour, a.home, a.sound, a.food}) texts.emplace_back(w);
  }
  for (const auto& f : world_facts()) {
    texts.push_back(answer_sentence(f));
    texts.push_back(closing_sentence(f));
  }
  for (const auto* bank : {&kNeutralBank, &kSimpleBank, &kTechnicalBank, &kBriefTail,
                           &kBriefSimpleTail, &kBriefTechnicalTail, &kJargon}) {
    texts.insert(texts.end(), bank->begin(), bank->end());
  }
  for (const auto& p : profiles_storage()) {
    texts.push_back(p.adjective);
    texts.insert(texts.end(), p.synonyms.begin(), p.synonyms.end());
    texts.insert(texts.end(), p.aliases.begin(), p.aliases.end());
    texts.push_back(p.description);
    texts.push_back(p.tone);
    texts.push_back(p.instruction);
  }
  const auto& dg = datagen_templates();
  for (const auto* t : {&dg.short_chosen, &dg.short_rejected, &dg.kid_chosen, &dg.kid_rejected}) {
    texts.push_back(*t);
  }
  for (const auto& item : questionnaire()) {
    texts.emplace_back(item.question);
    texts.emplace_back(item.prefix);
  }
  texts.emplace_back("Give me a answer. Give me an anti- answer. not an");

  std::set<std::string> words;
  for (auto text : texts) {
    text = replace_all(replace_all(replace_all(text, "{s}", ""), "{prompt}", ""), "{neologism}", "");
    for (auto& piece : split_pieces(text)) {
      if (is_word_piece(piece) && piece.size() > 1) words.insert(piece);
    }
  }
  return {words.begin(), words.end()};
}

Vocabulary base_vocabulary() {
  auto lex = corpus_lexicon();
  return Vocabulary::build(lex);
}

std::size_t token_count(const Vocabulary& vocab, std::string_view text) {
  std::size_t n = 0;
  for (TokenId id : tokenize(vocab, text)) {
    if (!vocab.is_special(id)) ++n;
  }
  return n;
}

WordStats word_stats(std::string_view text, std::span<const std::string> jargon,
                     const Vocabulary* vocab) {
  WordStats s;
  for (const auto& piece : split_pieces(text)) {
    if (!is_word_piece(piece)) continue;
    ++s.words;
    const std::string w = lower(piece);
    if (std::find(jargon.begin(), jargon.end(), w) != jargon.end()) ++s.jargon;
    if (vocab != nullptr && !vocab->in_lexicon(piece) && !vocab->find(piece)) ++s.out_of_lexicon;
  }
  return s;
}

// ---------------------------------------------------------------------------

std::vector<ConceptSpec> default_concepts() {
  const auto& dg = datagen_templates();
  ConceptSpec shortc;
  shortc.name = "short";
  shortc.suffix = "Give me a ~short answer.";
  shortc.chosen_style = parse_style("brief");
  shortc.rejected_style = parse_style("general");
  shortc.score = ScoreKind::kShortTokens;
  shortc.neologism_epochs = 5;
  shortc.datagen_chosen = dg.short_chosen;
  shortc.datagen_rejected = dg.short_rejected;
  shortc.jargon = kJargon;

  ConceptSpec simple;
  simple.name = "simple";
  simple.suffix = "Give me a ~simple answer.";
  simple.chosen_style = parse_style("simple");
  simple.rejected_style = parse_style("technical");
  simple.score = ScoreKind::kSimpleJargon;
  simple.neologism_epochs = 10;
  simple.datagen_chosen = dg.kid_chosen;
  simple.datagen_rejected = dg.kid_rejected;
  simple.jargon = kJargon;
  return {shortc, simple};
}

std::vector<ConceptSpec> load_concepts(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read concept config " + path.string());
  json doc;
  try {
    in >> doc;
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  if (!doc.contains("concepts") || !doc["concepts"].is_array()) {
    throw DataError(path.string() + ": missing array 'concepts'");
  }
  std::vector<ConceptSpec> out;
  std::size_t i = 0;
  for (const auto& c : doc["concepts"]) {
    const std::string where = path.string() + ": concepts[" + std::to_string(i++) + "]";
    auto req = [&](const char* key) -> const json& {
      if (!c.contains(key)) throw DataError(where + ": missing key '" + key + "'");
      return c[key];
    };
    try {
      ConceptSpec s;
      s.name = req("name").get<std::string>();
      s.suffix = c.value("suffix", "Give me a ~" + s.name + " answer.");
      s.chosen_style = parse_style(req("chosen_style").get<std::string>());
      s.rejected_style = parse_style(req("rejected_style").get<std::string>());
      s.score = parse_score(req("score").get<std::string>());
      const json th = c.value("thresholds", json::object());
      s.max_chosen_tokens = th.value("max_chosen_tokens", s.max_chosen_tokens);
      s.min_rejected_tokens = th.value("min_rejected_tokens", s.min_rejected_tokens);
      s.min_rejected_jargon = th.value("min_rejected_jargon", s.min_rejected_jargon);
      s.init_from = c.value("init_from", s.init_from);
      s.neologism_epochs = c.value("neologism_epochs", s.neologism_epochs);
      s.datagen_chosen = req("datagen_chosen").get<std::string>();
      s.datagen_rejected = req("datagen_rejected").get<std::string>();
      if (c.contains("jargon_lexicon")) {
        s.jargon = read_word_list(path.parent_path() / c["jargon_lexicon"].get<std::string>());
      } else {
        s.jargon = kJargon;
      }
      if (s.suffix.find(s.surface()) == std::string::npos) {
        throw DataError(where + ": suffix must contain " + s.surface());
      }
      out.push_back(std::move(s));
    } catch (const json::exception& e) {
      throw DataError(where + ": " + e.what());
    }
  }
  return out;
}

void save_concepts(const std::filesystem::path& path, std::span<const ConceptSpec> concepts) {
  json arr = json::array();
  for (const auto& c : concepts) {
    arr.push_back({{"name", c.name},
                   {"suffix", c.suffix},
                   {"chosen_style", style_json(c.chosen_style)},
                   {"rejected_style", style_json(c.rejected_style)},
                   {"score", score_name(c.score)},
                   {"thresholds",
                    {{"max_chosen_tokens", c.max_chosen_tokens},
                     {"min_rejected_tokens", c.min_rejected_tokens},
                     {"min_rejected_jargon", c.min_rejected_jargon}}},
                   {"init_from", c.init_from},
                   {"neologism_epochs", c.neologism_epochs},
                   {"datagen_chosen", c.datagen_chosen},
                   {"datagen_rejected", c.datagen_rejected}});
  }
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << json{{"concepts", arr}}.dump(2) << '\n';
}

const ConceptSpec& find_concept(std::span<const ConceptSpec> concepts, std::string_view name) {
  for (const auto& c : concepts) {
    if (c.name == name) return c;
  }
  throw DataError("unknown concept '" + std::string(name) + "'");
}

std::string attach_suffix(std::string_view base_prompt, std::span<const std::string> names,
                          std::span<const ConceptSpec> known) {
  if (names.empty()) return std::string(base_prompt);
  for (const auto& n : names) find_concept(known, n);
  if (names.size() == 1) {
    return std::string(base_prompt) + " " + find_concept(known, names[0]).suffix;
  }
  std::string joined;
  for (const auto& n : names) joined += (joined.empty() ? "~" : " ~") + n;
  return std::string(base_prompt) + " Give me a " + joined + " answer.";
}

// ---------------------------------------------------------------------------

std::string validate_example(const PreferenceExample& ex, const ConceptSpec& c,
                             const Vocabulary& vocab) {
  if (ex.prompt.find(c.surface()) == std::string::npos) return "prompt lacks " + c.surface();
  auto has_key = [&](const std::string& text) {
    for (const auto& p : split_pieces(text)) {
      if (p == ex.gold_key) return true;
    }
    return false;
  };
  if (!has_key(ex.chosen)) return "chosen lacks gold key";
  if (!has_key(ex.rejected)) return "rejected lacks gold key";
  if (c.score == ScoreKind::kShortTokens) {
    const auto nc = token_count(vocab, ex.chosen);
    const auto nr = token_count(vocab, ex.rejected);
    if (nc > c.max_chosen_tokens) return "chosen has " + std::to_string(nc) + " tokens";
    if (nr < c.min_rejected_tokens) return "rejected has " + std::to_string(nr) + " tokens";
  } else {
    auto sc = word_stats(ex.chosen, c.jargon, &vocab);
    auto sr = word_stats(ex.rejected, c.jargon, &vocab);
    if (sc.jargon > 0 || sc.out_of_lexicon > 0) return "chosen uses non-core words";
    if (sr.words == 0 ||
        static_cast<double>(sr.jargon) < c.min_rejected_jargon * static_cast<double>(sr.words)) {
      return "rejected jargon fraction below threshold";
    }
  }
  return {};
}

PreferenceDataset build_dataset(const ConceptSpec& spec, std::size_t n_train,
                                std::size_t n_test, std::uint64_t seed) {
  if (n_train < 10 || n_test < 10) throw DataError("build_dataset: each split needs at least 10 examples");
  std::vector<const QaItem*> seen, held;
  for (const auto& item : qa_items()) (item.held_out ? held : seen).push_back(&item);
  const std::vector<ConceptSpec> known{spec};
  const Vocabulary vocab = base_vocabulary();
  Vocabulary with_neologism = vocab;
  with_neologism.add_neologism(spec.surface());

  auto make = [&](const QaItem& item, std::uint64_t stream) {
    Rng rng(derive_seed(seed, stream));
    const Fact& fact = world_facts()[item.fact];
    PreferenceExample ex;
    ex.base_prompt = item.question;
    ex.prompt = item.question + " " + spec.suffix;
    ex.chosen = render_response(fact, spec.chosen_style, rng);
    ex.rejected = render_response(fact, spec.rejected_style, rng);
    ex.gold_key = item.gold_key;
    if (auto why = validate_example(ex, spec, with_neologism); !why.empty()) {
      throw DataError("generator produced an invalid '" + spec.name + "' example: " + why);
    }
    return ex;
  };

  PreferenceDataset ds;
  Rng order_rng(derive_seed(seed, 0xA11CE));
  std::vector<const QaItem*> train_order = seen;
  for (std::size_t i = 0; i < n_train; ++i) {
    if (i % train_order.size() == 0) std::shuffle(train_order.begin(), train_order.end(), order_rng);
    ds.train.push_back(make(*train_order[i % train_order.size()], i));
  }
  std::vector<const QaItem*> test_order = held;
  std::shuffle(test_order.begin(), test_order.end(), order_rng);
  for (std::size_t j = 0; j < n_test; ++j) {
    ds.test.push_back(make(*test_order[j % test_order.size()], 1'000'000 + j));
  }
  return ds;
}

std::string to_jsonl(std::span<const PreferenceExample> data) {
  std::string out;
  for (const auto& ex : data) {
    json j = json::object();
    j["base_prompt"] = ex.base_prompt;
    j["prompt"] = ex.prompt;
    j["chosen"] = ex.chosen;
    j["rejected"] = ex.rejected;
    j["gold_key"] = ex.gold_key;
    out += j.dump();
    out += '\n';
  }
  return out;
}

std::vector<PreferenceExample> parse_jsonl(std::string_view text, std::string_view source) {
  std::vector<PreferenceExample> out;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    auto end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    const std::string where = std::string(source) + ":" + std::to_string(line_no);
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw DataError(where + ": malformed JSON: " + e.what());
    }
    if (!j.is_object()) throw DataError(where + ": expected an object");
    auto field = [&](const char* key) {
      if (!j.contains(key)) throw DataError(where + ": missing field '" + key + "'");
      if (!j[key].is_string()) throw DataError(where + ": field '" + key + "' must be a string");
      return j[key].get<std::string>();
    };
    out.push_back({field("base_prompt"), field("prompt"), field("chosen"), field("rejected"),
                   field("gold_key")});
  }
  return out;
}

void save_jsonl(const std::filesystem::path& path, std::span<const PreferenceExample> data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << to_jsonl(data);
}

std::vector<PreferenceExample> load_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_jsonl(ss.str(), path.string());
}

// ---------------------------------------------------------------------------

std::vector<TextPair> build_pretraining_corpus(std::size_t n, std::uint64_t seed) {
  std::vector<const QaItem*> seen;
  for (const auto& item : qa_items()) {
    if (!item.held_out) seen.push_back(&item);
  }
  const auto& profiles = profiles_storage();
  const auto& dg = datagen_templates();

  std::vector<std::string> all_adjectives;
  for (const auto& p : profiles) {
    all_adjectives.push_back(p.adjective);
    all_adjectives.insert(all_adjectives.end(), p.aliases.begin(), p.aliases.end());
  }
  struct Modified {
    const char* adjective;
    const char* as_not;
    const char* as_anti;
  };
  static const Modified kModifiers[] = {{"brief", "general", "detailed"},
                                        {"detailed", "brief", "brief"},
                                        {"simple", "general", "technical"},
                                        {"technical", "general", "simple"}};

  // Mixture weights in units of 1/100.
  const std::vector<std::pair<const char*, int>> mixture = {
      {"plain", 18},       {"adjective", 32},   {"pair", 8},          {"modifier", 6},
      {"datagen", 10},     {"instruction", 10}, {"questionnaire", 16},
  };
  std::vector<int> weights;
  for (const auto& m : mixture) weights.push_back(m.second);

  std::vector<TextPair> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng(derive_seed(seed, i));
    const std::string kind =
        mixture[std::discrete_distribution<std::size_t>(weights.begin(), weights.end())(rng)].first;
    const QaItem& item = *pick(seen, rng);
    const Fact& fact = world_facts()[item.fact];
    TextPair tp;
    tp.kind = kind;
    if (kind == "plain") {
      tp.prompt = item.question;
      tp.response = render_response(fact, parse_style("general"), rng);
    } else if (kind == "adjective") {
      const auto& adj = pick(all_adjectives, rng);
      tp.prompt = item.question + " Give me " + with_article(adj) + " answer.";
      tp.response = render_response(fact, adjective_profile(adj).style, rng);
    } else if (kind == "pair") {
      static const std::vector<std::string> lengths{"brief", "detailed", "short", "long"};
      static const std::vector<std::string> regs{"simple", "technical", "easy", "expert"};
      const auto& l = pick(lengths, rng);
      const auto& r = pick(regs, rng);
      const bool swap = std::bernoulli_distribution(0.5)(rng);
      tp.prompt = item.question + " Give me " + with_article(swap ? r + " " + l : l + " " + r) + " answer.";
      tp.response = render_response(
          fact, Style{adjective_profile(l).style.length, adjective_profile(r).style.reg}, rng);
    } else if (kind == "modifier") {
      const auto& m = kModifiers[std::uniform_int_distribution<std::size_t>(0, 3)(rng)];
      if (std::bernoulli_distribution(0.5)(rng)) {
        tp.prompt = item.question + " Give me a not " + m.adjective + " answer.";
        tp.response = render_response(fact, parse_style(m.as_not), rng);
      } else {
        tp.prompt = item.question + " Give me an anti-" + m.adjective + " answer.";
        tp.response = render_response(fact, parse_style(m.as_anti), rng);
      }
    } else if (kind == "datagen") {
      const std::pair<const std::string*, const char*> options[] = {
          {&dg.short_chosen, "brief"},
          {&dg.short_rejected, "detailed"},
          {&dg.kid_chosen, "simple"},
          {&dg.kid_rejected, "technical"}};
      const auto& o = options[std::uniform_int_distribution<std::size_t>(0, 3)(rng)];
      tp.prompt = fill_template(*o.first, item.question);
      tp.response = render_response(fact, parse_style(o.second), rng);
    } else if (kind == "instruction") {
      const auto& p = pick(profiles, rng);
      tp.prompt = p.instruction + " " + item.question;
      tp.response = render_response(fact, p.style, rng);
    } else {
      const auto& adj = pick(all_adjectives, rng);
      const auto& p = adjective_profile(adj);
      const auto& q = questionnaire()[std::uniform_int_distribution<std::size_t>(0, 11)(rng)];
      tp.prompt = instantiate(q.question, adj);
      std::string body;
      switch (q.kind) {
        case QuestionKind::kSynonyms:
          for (std::size_t k = 0; k < p.synonyms.size(); ++k) {
            body += (k ? " " : "") + std::to_string(k + 1) + ". " + p.synonyms[k] + ".";
          }
          break;
        case QuestionKind::kDescription: body = p.description; break;
        case QuestionKind::kSentiment: body = p.tone; break;
        case QuestionKind::kInstruction: body = p.instruction; break;
      }
      tp.response = instantiate(q.prefix, adj) + " " + body;
    }
    out.push_back(std::move(tp));
  }
  return out;
}

}  // namespace neolab
