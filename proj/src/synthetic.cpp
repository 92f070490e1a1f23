#include "privsim/synthetic.hpp"

#include <cctype>
#include <sstream>

#include <fmt/format.h>

#include "privsim/errors.hpp"
#include "privsim/random.hpp"

namespace privsim {

namespace {

constexpr const char* kTopics[] = {
    "location history with a navigation app",
    "contact list with a messaging service",
    "health records with a fitness tracker vendor",
    "shopping history with an advertising network",
    "voice recordings with a smart speaker maker",
    "browsing history with a search engine",
    "photos with a cloud backup service",
    "thermostat readings with an entertainment provider",
    "sleep data with an insurance company",
    "email address with a newsletter publisher",
};

constexpr const char* kLikert[] = {"Strongly disagree", "Disagree", "Neutral", "Agree", "Strongly agree"};

int draw_type(const SyntheticSpec& spec, int j) {
    return static_cast<int>(derive_seed(spec.seed, "type", static_cast<std::uint64_t>(j)) %
                            static_cast<std::uint64_t>(spec.types));
}

bool in_gap(const SyntheticSpec& spec, int j) {
    const auto u = derive_seed(spec.seed, "gap", static_cast<std::uint64_t>(j)) % 10000;
    return static_cast<double>(u) / 10000.0 < spec.attitude_behavior_gap;
}

std::string respondent_id(int j) { return fmt::format("r{:03d}", j + 1); }

std::vector<std::pair<std::string, std::string>> parse_history(const std::string& prompt) {
    std::vector<std::pair<std::string, std::string>> out;
    std::istringstream in(prompt);
    std::string line, question;
    while (std::getline(in, line)) {
        if (line.starts_with("Question: ") && line.size() > 10) {
            question = line.substr(10);
        } else if (line.starts_with("User Answer: ") && !question.empty()) {
            out.emplace_back(question, line.substr(13));
            question.clear();
        }
    }
    return out;
}

std::int64_t words(const std::string& s) {
    std::istringstream in(s);
    std::int64_t n = 0;
    std::string w;
    while (in >> w) ++n;
    return n;
}

}  // namespace

SurveyDataset make_synthetic_dataset(const SyntheticSpec& spec) {
    if (spec.questions < 1 || spec.respondents < 1 || spec.types < 1) {
        throw ConfigError("synthetic dataset needs positive sizes");
    }
    std::vector<QuestionSpec> questions;
    const int half = spec.questions / 2;
    for (int i = 0; i < spec.questions; ++i) {
        QuestionSpec q;
        q.id = fmt::format("q{:02d}", i + 1);
        const auto* topic = kTopics[i % std::size(kTopics)];
        q.domain = i < half ? Domain::attitude : Domain::behavioral;
        if (i % 2 == 0) {
            q.text = fmt::format("[{}] I would be comfortable sharing my {}.", q.id, topic);
            q.answers.assign(std::begin(kLikert), std::end(kLikert));
        } else {
            q.text = fmt::format("[{}] Have you shared your {} in the past year?", q.id, topic);
            q.answers = {"Yes", "No"};
        }
        questions.push_back(std::move(q));
    }
    std::vector<ResponseSet> respondents;
    for (int j = 0; j < spec.respondents; ++j) {
        ResponseSet r;
        r.respondent_id = respondent_id(j);
        const int t = draw_type(spec, j);
        const bool gap = in_gap(spec, j);
        for (int i = 0; i < spec.questions; ++i) {
            const auto& q = questions[i];
            const int tt = gap && q.domain == Domain::attitude ? t + 1 : t;
            r.answers[q.id] = q.answers[static_cast<std::size_t>(tt + i) % q.answers.size()];
        }
        respondents.push_back(std::move(r));
    }
    return SurveyDataset("synthetic", std::nullopt, std::move(questions), std::move(respondents));
}

std::map<std::string, int> synthetic_types(const SyntheticSpec& spec) {
    std::map<std::string, int> out;
    for (int j = 0; j < spec.respondents; ++j) out[respondent_id(j)] = draw_type(spec, j);
    return out;
}

SyntheticRuleBackend::SyntheticRuleBackend(const SurveyDataset& ds, int types) : types_(types) {
    if (types < 1) throw ConfigError("synthetic backend needs at least one type");
    for (const auto& q : ds.questions()) by_text_[q.text] = Entry{ds.column(q.id), q.answers};
}

int SyntheticRuleBackend::infer_type(const std::vector<std::pair<std::string, std::string>>& history) const {
    int best = 0;
    int best_hits = -1;
    for (int t = 0; t < types_; ++t) {
        int hits = 0;
        for (const auto& [text, ans] : history) {
            auto it = by_text_.find(text);
            if (it != by_text_.end() && answer(t, it->second) == ans) ++hits;
        }
        if (hits > best_hits) {
            best = t;
            best_hits = hits;
        }
    }
    return best;
}

std::optional<int> SyntheticRuleBackend::named_type(const std::string& prompt) const {
    static const std::string kMarker = "Persona type ";
    const auto pos = prompt.find(kMarker);
    if (pos == std::string::npos) return std::nullopt;
    int t = 0;
    std::size_t k = pos + kMarker.size();
    if (k >= prompt.size() || !std::isdigit(static_cast<unsigned char>(prompt[k]))) return std::nullopt;
    while (k < prompt.size() && std::isdigit(static_cast<unsigned char>(prompt[k]))) t = t * 10 + (prompt[k++] - '0');
    return t;
}

std::string SyntheticRuleBackend::answer(int type, const Entry& e) const {
    return e.answers[(static_cast<std::size_t>(type) + e.column) % e.answers.size()];
}

llm::BackendReply SyntheticRuleBackend::call(const llm::ModelRequest& req, int) {
    std::string text;
    switch (req.role) {
        case llm::Role::generation: {
            const auto t = named_type(req.prompt);
            text = fmt::format("Persona type {}.", t ? *t : infer_type(parse_history(req.prompt)));
            break;
        }
        case llm::Role::feedback:
            text = "Keep the narrative as it is.";
            break;
        case llm::Role::prediction: {
            const auto anchor = req.prompt.rfind("uestion: \n");
            if (anchor == std::string::npos) {
                text = "unknown";
                break;
            }
            const auto start = anchor + 10;
            const auto end = req.prompt.find(" \n", start);
            auto it = by_text_.find(req.prompt.substr(start, end - start));
            if (it == by_text_.end()) {
                text = "unknown";
                break;
            }
            if (const auto t = named_type(req.prompt)) {
                text = answer(*t, it->second);
            } else if (req.prompt.find("User Answer: ") != std::string::npos) {
                text = answer(infer_type(parse_history(req.prompt)), it->second);
            } else {
                text = it->second.answers.front();
            }
            break;
        }
    }
    return {text, {words(req.prompt), words(text)}};
}

}  // namespace privsim
