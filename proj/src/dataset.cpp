#include "privsim/dataset.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <random>
#include <set>

#include "privsim/digest.hpp"
#include "privsim/errors.hpp"
#include "privsim/random.hpp"

namespace privsim {

using nlohmann::json;

std::string_view to_string(Domain d) {
    switch (d) {
        case Domain::demographic: return "demographic";
        case Domain::attitude: return "attitude";
        case Domain::behavioral: return "behavioral";
        case Domain::other: return "other";
    }
    return "other";
}

Domain domain_from_string(std::string_view s) {
    if (s == "demographic") return Domain::demographic;
    if (s == "attitude") return Domain::attitude;
    if (s == "behavioral") return Domain::behavioral;
    if (s == "other") return Domain::other;
    throw SchemaError("unknown domain tag '" + std::string(s) + "'");
}

bool QuestionSpec::is_discard(std::string_view answer) const {
    return std::find(discard_values.begin(), discard_values.end(), answer) != discard_values.end();
}

std::optional<int> QuestionSpec::find(std::string_view answer) const {
    auto it = std::find(answers.begin(), answers.end(), answer);
    if (it == answers.end()) return std::nullopt;
    return static_cast<int>(it - answers.begin()) + 1;
}

const std::string& QuestionSpec::answer_at(int value) const {
    if (value < 1 || static_cast<std::size_t>(value) > answers.size()) {
        throw AnswerDomainError("value " + std::to_string(value) + " outside 1.." +
                                std::to_string(answers.size()) + " for question " + id);
    }
    return answers[static_cast<std::size_t>(value - 1)];
}

bool QuestionSpec::is_numeric_scale() const {
    return !answers.empty() && std::all_of(answers.begin(), answers.end(), [](const std::string& a) {
        return !a.empty() && std::all_of(a.begin(), a.end(), [](unsigned char c) { return std::isdigit(c); });
    });
}

void QuestionSpec::validate() const {
    if (id.empty()) throw SchemaError("question with empty id");
    if (answers.size() < 2) throw SchemaError("question " + id + " needs at least 2 answers");
    std::set<std::string> seen;
    for (const auto& a : answers) {
        if (!seen.insert(a).second) throw SchemaError("question " + id + " repeats answer '" + a + "'");
    }
    for (const auto& d : discard_values) {
        if (!seen.count(d)) {
            throw SchemaError("question " + id + " discard value '" + d + "' is not an answer");
        }
    }
}

int answer_to_numeric(const QuestionSpec& q, std::string_view answer) {
    if (auto v = q.find(answer)) return *v;
    throw AnswerDomainError("answer '" + std::string(answer) + "' is not in the answer set of question " + q.id);
}

const std::string* ResponseSet::find(const std::string& question_id) const {
    auto it = answers.find(question_id);
    return it == answers.end() ? nullptr : &it->second;
}

SurveyDataset::SurveyDataset(std::string name, std::optional<std::string> collected_at,
                             std::vector<QuestionSpec> questions, std::vector<ResponseSet> respondents)
    : name_(std::move(name)),
      collected_at_(std::move(collected_at)),
      questions_(std::move(questions)),
      respondents_(std::move(respondents)) {
    if (questions_.empty()) throw SchemaError("dataset has no questions");
    if (respondents_.empty()) throw SchemaError("dataset has no respondents");
    for (std::size_t i = 0; i < questions_.size(); ++i) {
        questions_[i].validate();
        if (!question_index_.emplace(questions_[i].id, i).second) {
            throw SchemaError("duplicate question id " + questions_[i].id);
        }
    }
    for (std::size_t j = 0; j < respondents_.size(); ++j) {
        const auto& r = respondents_[j];
        if (r.respondent_id.empty()) throw SchemaError("respondent with empty id");
        if (!respondent_index_.emplace(r.respondent_id, j).second) {
            throw SchemaError("duplicate respondent id " + r.respondent_id);
        }
        for (const auto& [qid, answer] : r.answers) {
            auto it = question_index_.find(qid);
            if (it == question_index_.end()) {
                throw SchemaError("respondent " + r.respondent_id + " answers unknown question " + qid);
            }
            const auto& q = questions_[it->second];
            if (!q.find(answer)) {
                throw AnswerDomainError("respondent " + r.respondent_id + ", question " + qid +
                                        ": answer '" + answer + "' is not in the answer set");
            }
            if (q.is_discard(answer)) {
                throw SchemaError("respondent " + r.respondent_id + ", question " + qid +
                                  ": discard value present after load");
            }
        }
    }
}

const QuestionSpec& SurveyDataset::question(const std::string& id) const {
    return questions_[column(id)];
}

bool SurveyDataset::has_question(const std::string& id) const { return question_index_.count(id) > 0; }

std::size_t SurveyDataset::column(const std::string& id) const {
    auto it = question_index_.find(id);
    if (it == question_index_.end()) throw SchemaError("unknown question id " + id);
    return it->second;
}

const ResponseSet& SurveyDataset::respondent(const std::string& id) const {
    auto it = respondent_index_.find(id);
    if (it == respondent_index_.end()) throw SchemaError("unknown respondent id " + id);
    return respondents_[it->second];
}

std::vector<std::string> SurveyDataset::answered(const ResponseSet& r) const {
    std::vector<std::string> out;
    for (const auto& q : questions_) {
        if (r.answers.count(q.id)) out.push_back(q.id);
    }
    return out;
}

void SurveyDataset::sort_by_column(std::vector<std::string>& ids) const {
    std::sort(ids.begin(), ids.end(),
              [this](const std::string& a, const std::string& b) { return column(a) < column(b); });
}

namespace {

void warn_unknown(const json& obj, std::initializer_list<std::string_view> known, const std::string& where,
                  LoadReport* report) {
    if (!report || !obj.is_object()) return;
    for (const auto& [key, _] : obj.items()) {
        if (std::find(known.begin(), known.end(), key) == known.end()) {
            report->warnings.push_back("ignoring unknown field '" + key + "' in " + where);
        }
    }
}

const json& require(const json& obj, const char* key, const std::string& where) {
    if (!obj.is_object() || !obj.contains(key)) {
        throw SchemaError(std::string("missing field '") + key + "' in " + where);
    }
    return obj.at(key);
}

std::string require_string(const json& obj, const char* key, const std::string& where) {
    const auto& v = require(obj, key, where);
    if (!v.is_string()) throw SchemaError(std::string("field '") + key + "' in " + where + " must be a string");
    return v.get<std::string>();
}

std::vector<std::string> string_list(const json& v, const std::string& where) {
    if (!v.is_array()) throw SchemaError(where + " must be an array of strings");
    std::vector<std::string> out;
    for (const auto& e : v) {
        if (e.is_string()) {
            out.push_back(e.get<std::string>());
        } else if (e.is_number_integer()) {
            out.push_back(std::to_string(e.get<long long>()));
        } else {
            throw SchemaError(where + " must contain strings");
        }
    }
    return out;
}

}  // namespace

SurveyDataset dataset_from_json(const json& doc, LoadReport* report) {
    if (!doc.is_object()) throw SchemaError("dataset document must be an object");
    warn_unknown(doc, {"name", "collected_at", "questions", "respondents"}, "dataset", report);

    std::string name = require_string(doc, "name", "dataset");
    std::optional<std::string> collected_at;
    if (doc.contains("collected_at") && !doc.at("collected_at").is_null()) {
        if (!doc.at("collected_at").is_string()) throw SchemaError("collected_at must be a string");
        collected_at = doc.at("collected_at").get<std::string>();
    }

    const auto& jq = require(doc, "questions", "dataset");
    if (!jq.is_array()) throw SchemaError("questions must be an array");
    std::vector<QuestionSpec> questions;
    std::unordered_map<std::string, std::size_t> qindex;
    for (const auto& item : jq) {
        QuestionSpec q;
        q.id = require_string(item, "id", "question");
        const std::string where = "question " + q.id;
        warn_unknown(item, {"id", "text", "answers", "domain", "discard_values"}, where, report);
        q.text = require_string(item, "text", where);
        q.answers = string_list(require(item, "answers", where), where + " answers");
        q.domain = domain_from_string(require_string(item, "domain", where));
        if (item.contains("discard_values")) {
            q.discard_values = string_list(item.at("discard_values"), where + " discard_values");
        }
        q.validate();
        if (!qindex.emplace(q.id, questions.size()).second) throw SchemaError("duplicate question id " + q.id);
        questions.push_back(std::move(q));
    }

    const auto& jr = require(doc, "respondents", "dataset");
    if (!jr.is_array()) throw SchemaError("respondents must be an array");
    std::vector<ResponseSet> respondents;
    for (const auto& item : jr) {
        ResponseSet r;
        r.respondent_id = require_string(item, "respondent_id", "respondent");
        const std::string where = "respondent " + r.respondent_id;
        warn_unknown(item, {"respondent_id", "answers"}, where, report);
        const auto& answers = require(item, "answers", where);
        if (!answers.is_object()) throw SchemaError(where + ": answers must be an object");
        for (const auto& [qid, value] : answers.items()) {
            auto it = qindex.find(qid);
            if (it == qindex.end()) throw SchemaError(where + " answers unknown question " + qid);
            if (value.is_null()) continue;
            std::string a;
            if (value.is_string()) {
                a = value.get<std::string>();
            } else if (value.is_number_integer()) {
                a = std::to_string(value.get<long long>());
            } else {
                throw SchemaError(where + ", question " + qid + ": answer must be a string");
            }
            const auto& q = questions[it->second];
            if (q.is_discard(a)) {
                if (report) ++report->discarded_responses;
                continue;
            }
            if (!q.find(a)) {
                throw AnswerDomainError(where + ", question " + qid + ": answer '" + a +
                                        "' is not in the answer set");
            }
            r.answers.emplace(qid, std::move(a));
        }
        respondents.push_back(std::move(r));
    }
    return SurveyDataset(std::move(name), std::move(collected_at), std::move(questions), std::move(respondents));
}

SurveyDataset load_dataset(const std::filesystem::path& path, LoadReport* report) {
    json doc;
    try {
        doc = json::parse(read_file(path));
    } catch (const json::parse_error& e) {
        throw SchemaError(path.string() + ": " + e.what());
    }
    return dataset_from_json(doc, report);
}

json dataset_to_json(const SurveyDataset& ds) {
    json doc;
    doc["name"] = ds.name();
    doc["collected_at"] = ds.collected_at() ? json(*ds.collected_at()) : json(nullptr);
    doc["questions"] = json::array();
    for (const auto& q : ds.questions()) {
        doc["questions"].push_back({{"id", q.id},
                                    {"text", q.text},
                                    {"answers", q.answers},
                                    {"domain", std::string(to_string(q.domain))},
                                    {"discard_values", q.discard_values}});
    }
    doc["respondents"] = json::array();
    for (const auto& r : ds.respondents()) {
        doc["respondents"].push_back({{"respondent_id", r.respondent_id}, {"answers", r.answers}});
    }
    return doc;
}

std::string_view to_string(SplitScope s) {
    switch (s) {
        case SplitScope::all: return "all";
        case SplitScope::attitude: return "attitude";
        case SplitScope::behavioral: return "behavioral";
    }
    return "all";
}

SplitScope scope_from_string(std::string_view s) {
    if (s == "all") return SplitScope::all;
    if (s == "attitude" || s == "attitude-only") return SplitScope::attitude;
    if (s == "behavioral" || s == "behavioral-only") return SplitScope::behavioral;
    throw ConfigError("unknown scope '" + std::string(s) + "'");
}

bool QuestionSplit::in_gen(const std::string& id) const {
    return std::find(gen_ids.begin(), gen_ids.end(), id) != gen_ids.end();
}

bool QuestionSplit::in_eval(const std::string& id) const {
    return std::find(eval_ids.begin(), eval_ids.end(), id) != eval_ids.end();
}

bool in_scope(Domain d, SplitScope scope) {
    switch (scope) {
        case SplitScope::all: return true;
        case SplitScope::attitude: return d == Domain::attitude;
        case SplitScope::behavioral: return d == Domain::behavioral;
    }
    return false;
}

SplitResult split_questions(const SurveyDataset& ds, double ratio, std::uint64_t seed, SplitScope scope) {
    if (!(ratio > 0.0 && ratio < 1.0)) throw ConfigError("split ratio must lie in (0, 1)");
    SplitResult result;
    for (const auto& r : ds.respondents()) {
        std::vector<std::string> pool;
        for (const auto& q : ds.questions()) {
            if (r.answers.count(q.id) && in_scope(q.domain, scope)) pool.push_back(q.id);
        }
        if (pool.empty()) {
            result.skipped.push_back({r.respondent_id, std::string("no answered questions in scope '") +
                                                           std::string(to_string(scope)) + "'"});
            continue;
        }
        QuestionSplit split;
        split.respondent_id = r.respondent_id;
        split.seed = derive_seed(seed, "split:" + r.respondent_id);
        std::mt19937_64 rng(split.seed);
        std::shuffle(pool.begin(), pool.end(), rng);
        const auto n_gen = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(pool.size()) + 0.5));
        split.gen_ids.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(n_gen));
        split.eval_ids.assign(pool.begin() + static_cast<std::ptrdiff_t>(n_gen), pool.end());
        ds.sort_by_column(split.gen_ids);
        ds.sort_by_column(split.eval_ids);
        result.splits.push_back(std::move(split));
    }
    return result;
}

std::map<Domain, std::vector<std::string>> partition_by_domain(const SurveyDataset& ds) {
    std::map<Domain, std::vector<std::string>> out;
    for (const auto& q : ds.questions()) out[q.domain].push_back(q.id);
    return out;
}

json to_json(const QuestionSplit& s) {
    return {{"respondent_id", s.respondent_id}, {"gen_ids", s.gen_ids}, {"eval_ids", s.eval_ids}, {"seed", s.seed}};
}

QuestionSplit split_from_json(const json& j) {
    QuestionSplit s;
    s.respondent_id = j.at("respondent_id").get<std::string>();
    s.gen_ids = j.at("gen_ids").get<std::vector<std::string>>();
    s.eval_ids = j.at("eval_ids").get<std::vector<std::string>>();
    s.seed = j.value("seed", std::uint64_t{0});
    return s;
}

}  // namespace privsim
