#include "neolab/eval.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <unordered_map>

#include "json.hpp"

namespace neolab {

using nlohmann::ordered_json;

namespace {

std::string lower(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

double quantile(const std::vector<double>& sorted, double q) {
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw EvalError("cannot write " + path.string());
  out << text;
  if (!out) throw EvalError("write failed for " + path.string());
}

ordered_json stats_json(const Stats& s) {
  return ordered_json{{"n", s.n},       {"mean", s.mean}, {"median", s.median}, {"min", s.min},
                      {"q1", s.q1},     {"q3", s.q3},     {"max", s.max}};
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace

std::string mode_kind_name(ModeKind kind) {
  switch (kind) {
    case ModeKind::kBaseline: return "baseline";
    case ModeKind::kNeologism: return "neologism";
    case ModeKind::kLora: return "lora";
    case ModeKind::kDatagenPrompting: return "datagen_prompting";
    case ModeKind::kSelfverbPrompting: return "selfverb_prompting";
  }
  return "?";
}

ModeKind parse_mode_kind(std::string_view name) {
  for (auto k : {ModeKind::kBaseline, ModeKind::kNeologism, ModeKind::kLora, ModeKind::kDatagenPrompting,
                 ModeKind::kSelfverbPrompting}) {
    if (mode_kind_name(k) == name) return k;
  }
  throw EvalError("unknown inference mode '" + std::string(name) + "'");
}

std::string InferenceMode::label() const {
  switch (kind) {
    case ModeKind::kNeologism: {
      std::string s = "neologism:";
      for (std::size_t i = 0; i < concepts.size(); ++i) s += (i ? "+" : "") + concepts[i];
      return s;
    }
    case ModeKind::kDatagenPrompting:
    case ModeKind::kSelfverbPrompting:
      return mode_kind_name(kind) + ":" + concept_name;
    default:
      return mode_kind_name(kind);
  }
}

std::string mode_prompt(const InferenceMode& mode, std::string_view base_prompt,
                        std::span<const ConceptSpec> concepts) {
  switch (mode.kind) {
    case ModeKind::kBaseline:
    case ModeKind::kLora:
      return std::string(base_prompt);
    case ModeKind::kNeologism:
      if (mode.concepts.empty()) throw EvalError("neologism mode needs at least one concept");
      return attach_suffix(base_prompt, mode.concepts, concepts);
    case ModeKind::kDatagenPrompting:
      return fill_template(find_concept(concepts, mode.concept_name).datagen_chosen, base_prompt);
    case ModeKind::kSelfverbPrompting:
      if (mode.verbalization.empty()) throw EvalError("selfverb mode needs a verbalization");
      return mode.verbalization + " " + std::string(base_prompt);
  }
  throw EvalError("unhandled mode");
}

GenerationResult respond(const LanguageModel& model, std::string_view prompt_text, const GenerationConfig& gen,
                         std::size_t index, const ProjectionAdapter* adapter) {
  GenerationConfig g = gen;
  g.seed = derive_seed(gen.seed, index);
  return generate(model, tokenize(model.vocab(), prompt_text), g, adapter);
}

std::vector<ScoreSample> run_inference(const LanguageModel& model, const InferenceMode& mode,
                                       std::span<const PreferenceExample> examples,
                                       std::span<const ConceptSpec> concepts) {
  if (mode.kind == ModeKind::kLora && mode.adapter == nullptr) throw EvalError("lora mode needs an adapter");
  if (mode.kind == ModeKind::kNeologism) {
    for (const auto& c : mode.concepts) {
      auto id = model.vocab().find("~" + c);
      if (!id || !model.vocab().is_neologism(*id)) {
        throw EvalError("neologism mode: the model has no trained token ~" + c);
      }
    }
  }
  mode.generation.validate();
  const ProjectionAdapter* adapter = mode.kind == ModeKind::kLora ? mode.adapter : nullptr;

  std::vector<ScoreSample> out;
  out.reserve(examples.size());
  for (std::size_t i = 0; i < examples.size(); ++i) {
    ScoreSample s;
    s.id = i;
    s.mode = mode.label();
    s.gold_key = examples[i].gold_key;
    s.prompt = mode_prompt(mode, examples[i].base_prompt, concepts);
    try {
      GenerationResult r = respond(model, s.prompt, mode.generation, i, adapter);
      s.response = detokenize(model.vocab(), r.tokens);
      s.tokens = r.tokens.size();
      s.truncated = r.truncated;
    } catch (const ContextOverflow& e) {
      s.ok = false;
      s.error = std::string("context overflow: ") + e.what();
    } catch (const TokenizerError& e) {
      s.ok = false;
      s.error = std::string("tokenizer: ") + e.what();
    }
    out.push_back(std::move(s));
  }
  return out;
}

std::size_t adherence_short(std::string_view response) {
  std::istringstream in{std::string(response)};
  std::size_t n = 0;
  std::string w;
  while (in >> w) ++n;
  return n;
}

std::size_t adherence_short(const Vocabulary& vocab, std::string_view response) {
  return token_count(vocab, response);
}

double adherence_simple(std::string_view response, std::span<const std::string> jargon) {
  WordStats s = word_stats(response, jargon);
  if (s.words == 0) throw EvalError("adherence_simple: response has no content words");
  const double jf = static_cast<double>(s.jargon) / static_cast<double>(s.words);
  return 1.0 + 9.0 * (1.0 - jf);
}

double gap_closure(double x, double base, double train) {
  if (!std::isfinite(x) || !std::isfinite(base) || !std::isfinite(train)) {
    throw EvalError("gap_closure: non-finite input");
  }
  if (train == base) throw EvalError("gap_closure: training-data score equals base score");
  if (x == base) return 0.0;
  return 100.0 * (x - base) / (train - base);
}

double capability_score(std::string_view response, std::string_view gold_key) {
  const auto pieces = split_pieces(response);
  const std::string key = lower(gold_key);
  bool present = false;
  if (key.find(' ') == std::string::npos) {
    for (const auto& p : pieces) present = present || lower(p) == key;
  } else {
    present = lower(response).find(key) != std::string::npos;
  }
  if (!present) return 1.0;
  if (pieces.size() >= 20) {
    std::unordered_map<std::string, std::size_t> counts;
    std::size_t top = 0;
    for (const auto& p : pieces) top = std::max(top, ++counts[lower(p)]);
    if (static_cast<double>(top) > 0.25 * static_cast<double>(pieces.size())) return 5.0;
  }
  return 10.0;
}

double adherence(const ConceptSpec& spec, const Vocabulary& vocab, std::string_view response) {
  switch (spec.score) {
    case ScoreKind::kShortTokens: return static_cast<double>(adherence_short(vocab, response));
    case ScoreKind::kSimpleJargon: return adherence_simple(response, spec.jargon);
  }
  throw EvalError("unknown score kind");
}

void score_samples(std::vector<ScoreSample>& samples, const ConceptSpec& spec, const Vocabulary& vocab) {
  for (auto& s : samples) {
    if (!s.ok) continue;
    try {
      s.adherence = adherence(spec, vocab, s.response);
    } catch (const EvalError& e) {
      // Empty responses have no defined simplicity score.
      s.ok = false;
      s.error = e.what();
      continue;
    }
    s.capability = capability_score(s.response, s.gold_key);
    s.tokens = token_count(vocab, s.response);
  }
}

Stats summarize(std::span<const double> values) {
  if (values.empty()) throw EvalError("summarize: no values");
  std::vector<double> v(values.begin(), values.end());
  std::sort(v.begin(), v.end());
  Stats s;
  s.n = v.size();
  s.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  s.median = quantile(v, 0.5);
  s.min = v.front();
  s.max = v.back();
  s.q1 = quantile(v, 0.25);
  s.q3 = quantile(v, 0.75);
  return s;
}

EvalReport build_report(std::string concept_name, std::string adherence_unit, std::span<const ScoreSample> samples,
                        std::optional<Stats> training_data, std::vector<EfficiencyEntry> efficiency) {
  if (samples.empty()) throw EvalError("build_report: no samples");
  EvalReport report;
  report.concept_name = std::move(concept_name);
  report.adherence_unit = std::move(adherence_unit);
  report.training_data = training_data;
  report.efficiency = std::move(efficiency);

  std::vector<std::string> order;
  std::map<std::string, std::vector<const ScoreSample*>> by_mode;
  for (const auto& s : samples) {
    if (!by_mode.count(s.mode)) order.push_back(s.mode);
    by_mode[s.mode].push_back(&s);
  }
  for (const auto& mode : order) {
    ModeSummary m;
    m.mode = mode;
    std::vector<double> adh, cap, tok;
    for (const auto* s : by_mode[mode]) {
      if (!s->ok) {
        ++m.missing;
        continue;
      }
      adh.push_back(s->adherence);
      cap.push_back(s->capability);
      tok.push_back(static_cast<double>(s->tokens));
    }
    if (adh.empty()) throw EvalError("build_report: every sample failed for mode " + mode);
    m.adherence = summarize(adh);
    m.capability = summarize(cap);
    m.tokens = summarize(tok);
    m.adherence_values = std::move(adh);
    report.modes.push_back(std::move(m));
  }

  auto base = std::find_if(report.modes.begin(), report.modes.end(),
                           [&](const ModeSummary& m) { return m.mode == report.base_mode; });
  if (base != report.modes.end() && training_data) {
    const Stats b = base->adherence;
    for (auto& m : report.modes) {
      if (training_data->mean != b.mean) m.gap_mean = gap_closure(m.adherence.mean, b.mean, training_data->mean);
      if (training_data->median != b.median) {
        m.gap_median = gap_closure(m.adherence.median, b.median, training_data->median);
      }
    }
  }
  return report;
}

RawScoreTable load_raw_scores(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw EvalError("cannot read " + path.string());
  RawScoreTable t;
  try {
    ordered_json j = ordered_json::parse(in);
    t.concept_name = j.value("concept", "");
    t.base = j.at("base").get<double>();
    t.training_data = j.at("training_data").get<double>();
    for (const auto& [k, v] : j.at("methods").items()) t.methods.emplace_back(k, v.get<double>());
  } catch (const ordered_json::exception& e) {
    throw EvalError("bad score table " + path.string() + ": " + e.what());
  }
  return t;
}

std::vector<std::pair<std::string, double>> gap_closures(const RawScoreTable& table) {
  std::vector<std::pair<std::string, double>> out;
  for (const auto& [label, x] : table.methods) out.emplace_back(label, gap_closure(x, table.base, table.training_data));
  return out;
}

std::string report_json(const EvalReport& report, const std::map<std::string, std::string>& metadata) {
  ordered_json j;
  j["concept"] = report.concept_name;
  j["adherence_unit"] = report.adherence_unit;
  j["base_mode"] = report.base_mode;
  j["training_data"] = report.training_data ? stats_json(*report.training_data) : ordered_json(nullptr);
  ordered_json modes = ordered_json::array();
  for (const auto& m : report.modes) {
    ordered_json e;
    e["mode"] = m.mode;
    e["missing"] = m.missing;
    e["adherence"] = stats_json(m.adherence);
    e["capability"] = stats_json(m.capability);
    e["tokens"] = stats_json(m.tokens);
    e["gap_closure_mean"] = m.gap_mean ? ordered_json(*m.gap_mean) : ordered_json(nullptr);
    e["gap_closure_median"] = m.gap_median ? ordered_json(*m.gap_median) : ordered_json(nullptr);
    modes.push_back(e);
  }
  j["modes"] = modes;
  ordered_json meta = ordered_json::object();
  for (const auto& [k, v] : metadata) meta[k] = v;
  j["metadata"] = meta;
  return j.dump(2) + "\n";
}

std::string efficiency_json(std::span<const EfficiencyEntry> entries) {
  ordered_json eff = ordered_json::array();
  for (const auto& e : entries) {
    eff.push_back({{"run", e.run},
                   {"minutes_per_epoch", e.minutes_per_epoch},
                   {"trainable_parameters", e.trainable_parameters},
                   {"epochs", e.epochs}});
  }
  return eff.dump(2) + "\n";
}

std::string report_csv(const EvalReport& report) {
  std::ostringstream os;
  os << "concept,mode,n,missing,adherence_mean,adherence_median,gap_closure_mean,gap_closure_median,"
        "capability_mean,capability_median,tokens_mean,tokens_median\n";
  auto opt = [](const std::optional<double>& v) { return v ? fmt(*v) : std::string(); };
  for (const auto& m : report.modes) {
    os << csv_field(report.concept_name) << ',' << csv_field(m.mode) << ',' << m.adherence.n << ',' << m.missing
       << ',' << fmt(m.adherence.mean) << ',' << fmt(m.adherence.median) << ',' << opt(m.gap_mean) << ','
       << opt(m.gap_median) << ',' << fmt(m.capability.mean) << ',' << fmt(m.capability.median) << ','
       << fmt(m.tokens.mean) << ',' << fmt(m.tokens.median) << '\n';
  }
  if (report.training_data) {
    os << csv_field(report.concept_name) << ",training_data," << report.training_data->n << ",0,"
       << fmt(report.training_data->mean) << ',' << fmt(report.training_data->median) << ",100,100,,,,\n";
  }
  return os.str();
}

std::string box_plot_svg(const std::string& title,
                         const std::vector<std::pair<std::string, std::vector<double>>>& series) {
  const double width = 120.0 + 110.0 * static_cast<double>(series.size());
  const double height = 360.0, top = 40.0, bottom = 300.0, left = 60.0;
  double lo = 0.0, hi = 1.0;
  bool first = true;
  for (const auto& [_, v] : series) {
    for (double x : v) {
      lo = first ? x : std::min(lo, x);
      hi = first ? x : std::max(hi, x);
      first = false;
    }
  }
  if (hi == lo) hi = lo + 1.0;
  auto y = [&](double v) { return bottom - (v - lo) / (hi - lo) * (bottom - top); };

  std::ostringstream os;
  os << std::fixed << std::setprecision(1);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
     << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  os << "<text x=\"" << width / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << xml_escape(title)
     << "</text>\n";
  os << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << bottom
     << "\" stroke=\"black\"/>\n";
  for (int t = 0; t <= 4; ++t) {
    const double v = lo + (hi - lo) * t / 4.0;
    os << "<text x=\"" << left - 6 << "\" y=\"" << y(v) + 4 << "\" text-anchor=\"end\">" << v << "</text>\n";
  }
  for (std::size_t i = 0; i < series.size(); ++i) {
    const auto& [name, v] = series[i];
    const double cx = left + 60.0 + 110.0 * static_cast<double>(i);
    os << "<text x=\"" << cx << "\" y=\"" << bottom + 20 << "\" text-anchor=\"middle\">" << xml_escape(name)
       << "</text>\n";
    if (v.empty()) continue;
    Stats s = summarize(v);
    os << "<line x1=\"" << cx << "\" y1=\"" << y(s.min) << "\" x2=\"" << cx << "\" y2=\"" << y(s.max)
       << "\" stroke=\"#444\"/>\n";
    os << "<rect x=\"" << cx - 25 << "\" y=\"" << y(s.q3) << "\" width=\"50\" height=\""
       << std::max(1.0, y(s.q1) - y(s.q3)) << "\" fill=\"#9ecae1\" stroke=\"#444\"/>\n";
    os << "<line x1=\"" << cx - 25 << "\" y1=\"" << y(s.median) << "\" x2=\"" << cx + 25 << "\" y2=\""
       << y(s.median) << "\" stroke=\"#d62728\" stroke-width=\"2\"/>\n";
    os << "<circle cx=\"" << cx << "\" cy=\"" << y(s.mean) << "\" r=\"3\" fill=\"black\"/>\n";
  }
  os << "</svg>\n";
  return os.str();
}

void emit_report(const EvalReport& report, std::span<const ScoreSample> samples, const std::filesystem::path& dir,
                 const std::map<std::string, std::string>& metadata) {
  if (report.modes.empty() || samples.empty()) throw EvalError("emit_report: nothing to report");
  std::filesystem::create_directories(dir / "plots");
  write_text(dir / "results.json", report_json(report, metadata));
  write_text(dir / "results.csv", report_csv(report));
  if (!report.efficiency.empty()) write_text(dir / "efficiency.json", efficiency_json(report.efficiency));

  std::ostringstream rows;
  rows << "id,mode,ok,adherence,capability,tokens,truncated,gold_key,prompt,response,error\n";
  for (const auto& s : samples) {
    rows << s.id << ',' << csv_field(s.mode) << ',' << (s.ok ? 1 : 0) << ',' << fmt(s.adherence) << ','
         << fmt(s.capability) << ',' << s.tokens << ',' << (s.truncated ? 1 : 0) << ',' << csv_field(s.gold_key)
         << ',' << csv_field(s.prompt) << ',' << csv_field(s.response) << ',' << csv_field(s.error) << '\n';
  }
  write_text(dir / "samples.csv", rows.str());

  std::vector<std::pair<std::string, std::vector<double>>> adh, cap;
  std::map<std::string, std::vector<double>> cap_by_mode;
  for (const auto& s : samples) {
    if (s.ok) cap_by_mode[s.mode].push_back(s.capability);
  }
  for (const auto& m : report.modes) {
    adh.emplace_back(m.mode, m.adherence_values);
    cap.emplace_back(m.mode, cap_by_mode[m.mode]);
  }
  write_text(dir / "plots" / (report.concept_name + "_adherence.svg"),
             box_plot_svg(report.concept_name + " adherence (" + report.adherence_unit + ")", adh));
  write_text(dir / "plots" / (report.concept_name + "_capability.svg"),
             box_plot_svg(report.concept_name + " capability (1-10)", cap));
}

}  // namespace neolab
