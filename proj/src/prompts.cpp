#include "privsim/prompts.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>

#include "privsim/errors.hpp"

namespace privsim {

namespace detail {
const std::map<std::string, std::string_view, std::less<>>& embedded_templates();
}

std::string_view to_string(GenerationTemplate t) {
    switch (t) {
        case GenerationTemplate::basic: return "basic";
        case GenerationTemplate::bounded: return "bounded";
        case GenerationTemplate::calculus: return "calculus";
        case GenerationTemplate::pmt: return "pmt";
    }
    return "basic";
}

std::string_view to_string(PredictionTemplate t) {
    switch (t) {
        case PredictionTemplate::baseline: return "baseline";
        case PredictionTemplate::persona: return "persona";
        case PredictionTemplate::raw: return "raw";
    }
    return "baseline";
}

GenerationTemplate generation_template_from_string(std::string_view s) {
    for (auto t : kAllGenerationTemplates) {
        if (to_string(t) == s) return t;
    }
    throw UnknownTemplate("unknown generation template '" + std::string(s) + "'");
}

PredictionTemplate prediction_template_from_string(std::string_view s) {
    if (s == "baseline") return PredictionTemplate::baseline;
    if (s == "persona") return PredictionTemplate::persona;
    if (s == "raw") return PredictionTemplate::raw;
    throw UnknownTemplate("unknown prediction template '" + std::string(s) + "'");
}

std::string_view template_file_stem(GenerationTemplate t) {
    switch (t) {
        case GenerationTemplate::basic: return "gen_basic";
        case GenerationTemplate::bounded: return "gen_bounded";
        case GenerationTemplate::calculus: return "gen_calculus";
        case GenerationTemplate::pmt: return "gen_pmt";
    }
    return "gen_basic";
}

std::string_view template_file_stem(PredictionTemplate t) {
    return t == PredictionTemplate::baseline ? "predict_baseline" : "predict_persona";
}

std::string_view embedded_template(std::string_view name) {
    const auto& all = detail::embedded_templates();
    auto it = all.find(name);
    if (it == all.end()) throw UnknownTemplate("no template named '" + std::string(name) + "'");
    return it->second;
}

std::vector<std::string> embedded_template_names() {
    std::vector<std::string> out;
    for (const auto& [name, _] : detail::embedded_templates()) out.push_back(name);
    return out;
}

namespace {

std::string_view trim(std::string_view s) {
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
    return s;
}

std::string lower(std::string_view s) {
    std::string out(s);
    std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return std::tolower(c); });
    return out;
}

}  // namespace

RenderedPrompt render_template(std::string_view tmpl, const std::map<std::string, std::string>& values) {
    RenderedPrompt out;
    out.text.reserve(tmpl.size());
    std::size_t pos = 0;
    while (pos < tmpl.size()) {
        const auto open = tmpl.find("{{", pos);
        if (open == std::string_view::npos) {
            out.text.append(tmpl.substr(pos));
            break;
        }
        const auto close = tmpl.find("}}", open + 2);
        if (close == std::string_view::npos) {
            out.text.append(tmpl.substr(pos));
            break;
        }
        const auto name = std::string(trim(tmpl.substr(open + 2, close - open - 2)));
        auto it = values.find(name);
        if (it == values.end()) throw UnknownTemplate("no value for placeholder '" + name + "'");
        out.text.append(tmpl.substr(pos, open - pos));
        out.text.append(it->second);
        out.placeholders_filled.insert(name);
        pos = close + 2;
    }
    return out;
}

std::string format_answer_range(std::span<const std::string> answers) {
    std::string out;
    for (std::size_t i = 0; i < answers.size(); ++i) {
        if (i) out += ", ";
        out += '"';
        out += answers[i];
        out += '"';
    }
    return out;
}

std::string serialize_raw_narrative(const SurveyDataset& ds, std::span<const std::string> question_ids,
                                    const ResponseSet& responses) {
    std::vector<std::string> ids(question_ids.begin(), question_ids.end());
    ds.sort_by_column(ids);
    std::string out;
    for (const auto& id : ids) {
        const auto& q = ds.question(id);
        const auto* answer = responses.find(id);
        if (!answer) {
            throw MissingAnswer("respondent " + responses.respondent_id + " has no answer for question " + id);
        }
        if (!out.empty()) out += "\n\n";
        out += "Question: " + q.text + "\n";
        out += "Answer Range: " + format_answer_range(q.answers) + "\n";
        out += "User Answer: " + *answer;
    }
    return out;
}

RenderedPrompt render_generation_prompt(GenerationTemplate kind, std::string_view raw_narrative) {
    auto out = render_template(embedded_template(template_file_stem(kind)),
                               {{"raw_narrative", std::string(raw_narrative)}});
    out.kind = "generation:" + std::string(to_string(kind));
    if (trim(raw_narrative).empty()) out.lint_warnings.push_back("empty user history");
    return out;
}

RenderedPrompt render_prediction_prompt(PredictionTemplate kind, const std::optional<std::string>& persona,
                                        std::string_view question, std::span<const std::string> answer_range) {
    if (answer_range.empty()) throw SchemaError("prediction prompt needs a non-empty answer range");
    std::map<std::string, std::string> values{{"question", std::string(question)},
                                              {"answer_range", format_answer_range(answer_range)}};
    if (kind != PredictionTemplate::baseline) {
        if (!persona) throw MissingPersona(std::string(to_string(kind)) + " prediction needs a narrative");
        values["narrative"] = *persona;
    }
    auto out = render_template(embedded_template(template_file_stem(kind)), values);
    out.kind = "prediction:" + std::string(to_string(kind));
    return out;
}

RenderedPrompt render_feedback_prompt(std::string_view persona, std::span<const Misprediction> errors) {
    std::string listed;
    for (const auto& e : errors) {
        if (!listed.empty()) listed += "\n";
        listed += "- [" + e.question_id + "] " + e.question + "\n";
        listed += "  Predicted: " + e.predicted + "\n";
        listed += "  Actual answer: " + e.actual;
    }
    if (errors.empty()) listed = "None. The narrative predicted every answer correctly.";

    std::string criteria;
    if (!errors.empty()) {
        criteria +=
            "- Predictiveness: for each prediction error, name the part of the narrative that led to the wrong "
            "answer and the correction that makes it predict the actual answer.\n";
    }
    criteria +=
        "- Conciseness: identify content that can be removed or shortened without losing predictive "
        "information.\n"
        "- Generalization: identify statements that merely restate individual answers and suggest general "
        "decision rules that carry over to unseen questions.";

    auto out = render_template(embedded_template("feedback"),
                               {{"narrative", std::string(persona)}, {"mispredictions", listed}, {"criteria", criteria}});
    out.kind = "feedback";
    return out;
}

RenderedPrompt render_refine_prompt(std::string_view persona, std::string_view feedback) {
    auto out = render_template(embedded_template("refine"),
                               {{"narrative", std::string(persona)}, {"feedback", std::string(feedback)}});
    out.kind = "refine";
    return out;
}

namespace {

bool strip_wrapping(std::string_view& s) {
    static constexpr std::pair<std::string_view, std::string_view> kPairs[] = {
        {"\"", "\""}, {"'", "'"}, {"`", "`"}, {"**", "**"}, {"*", "*"},
        {"\xE2\x80\x9C", "\xE2\x80\x9D"},  // curly double quotes
        {"\xE2\x80\x98", "\xE2\x80\x99"},  // curly single quotes
    };
    for (const auto& [open, close] : kPairs) {
        if (s.size() >= open.size() + close.size() && s.starts_with(open) && s.ends_with(close)) {
            s = trim(s.substr(open.size(), s.size() - open.size() - close.size()));
            return true;
        }
    }
    return false;
}

bool strip_trailing_punct(std::string_view& s) {
    bool changed = false;
    while (!s.empty() && std::string_view(".,;:!?").find(s.back()) != std::string_view::npos) {
        s.remove_suffix(1);
        changed = true;
    }
    if (changed) s = trim(s);
    return changed;
}

const std::string* match(std::string_view candidate, std::span<const std::string> answers) {
    const auto key = lower(candidate);
    for (const auto& a : answers) {
        if (lower(trim(a)) == key) return &a;
    }
    return nullptr;
}

}  // namespace

std::string parse_answer(std::string_view raw_output, std::span<const std::string> answers) {
    if (answers.empty()) throw SchemaError("parse_answer needs a non-empty answer set");
    auto s = trim(raw_output);
    for (int round = 0; round < 8; ++round) {
        if (const auto* hit = match(s, answers)) return *hit;
        if (!strip_wrapping(s) && !strip_trailing_punct(s)) break;
    }
    if (const auto* hit = match(s, answers)) return *hit;

    const bool numeric = std::all_of(answers.begin(), answers.end(), [](const std::string& a) {
        return !a.empty() && std::all_of(a.begin(), a.end(), [](unsigned char c) { return std::isdigit(c); });
    });
    if (numeric) {
        auto digits = s;
        if (digits.starts_with('+')) digits.remove_prefix(1);
        long value = 0;
        const auto* end = digits.data() + digits.size();
        const auto [ptr, ec] = std::from_chars(digits.data(), end, value);
        if (!digits.empty() && ec == std::errc() && ptr == end) {
            for (const auto& a : answers) {
                long av = 0;
                std::from_chars(a.data(), a.data() + a.size(), av);
                if (av == value) return a;
            }
        }
    }
    throw UnparseableAnswer(std::string(raw_output));
}

std::size_t ApproxTokenizer::count(std::string_view text) const {
    std::size_t n = 0;
    bool in_word = false;
    for (unsigned char c : text) {
        const bool word = std::isalnum(c) || c >= 0x80;
        if (word) {
            if (!in_word) ++n;
            in_word = true;
        } else {
            in_word = false;
            if (!std::isspace(c)) ++n;
        }
    }
    return n;
}

const Tokenizer& default_tokenizer() {
    static const ApproxTokenizer kDefault;
    return kDefault;
}

std::size_t count_tokens(std::string_view text, const Tokenizer& tokenizer) { return tokenizer.count(text); }

double percent_reduction(double raw_tokens, double narrative_tokens) {
    if (raw_tokens <= 0.0) return 0.0;
    return 100.0 * (1.0 - narrative_tokens / raw_tokens);
}

}  // namespace privsim
