#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

namespace privsim {

enum class Domain { demographic, attitude, behavioral, other };

std::string_view to_string(Domain d);
Domain domain_from_string(std::string_view s);  // throws SchemaError

/// One survey question: wording plus its ordered answer set. The numeric
/// mapping is implied by order, answers[k] maps to k + 1.
struct QuestionSpec {
    std::string id;
    std::string text;
    std::vector<std::string> answers;
    Domain domain = Domain::other;
    std::vector<std::string> discard_values;

    std::size_t size() const noexcept { return answers.size(); }
    bool is_discard(std::string_view answer) const;
    std::optional<int> find(std::string_view answer) const;
    const std::string& answer_at(int value) const;  // 1-based
    bool is_numeric_scale() const;

    void validate() const;  // throws SchemaError
};

/// 1-based position of `answer` in the question's ordered answer list.
int answer_to_numeric(const QuestionSpec& q, std::string_view answer);

struct ResponseSet {
    std::string respondent_id;
    std::map<std::string, std::string> answers;  // question id -> answer

    const std::string* find(const std::string& question_id) const;
};

/// The M x N response matrix. Immutable once constructed; the constructor
/// enforces the cross-reference invariants.
class SurveyDataset {
public:
    SurveyDataset(std::string name, std::optional<std::string> collected_at,
                  std::vector<QuestionSpec> questions, std::vector<ResponseSet> respondents);

    const std::string& name() const noexcept { return name_; }
    const std::optional<std::string>& collected_at() const noexcept { return collected_at_; }
    const std::vector<QuestionSpec>& questions() const noexcept { return questions_; }
    const std::vector<ResponseSet>& respondents() const noexcept { return respondents_; }

    const QuestionSpec& question(const std::string& id) const;
    bool has_question(const std::string& id) const;
    std::size_t column(const std::string& id) const;  // dataset column order
    const ResponseSet& respondent(const std::string& id) const;

    /// Answered question ids of one respondent, in column order.
    std::vector<std::string> answered(const ResponseSet& r) const;

    /// Sorts question ids into column order.
    void sort_by_column(std::vector<std::string>& ids) const;

private:
    std::string name_;
    std::optional<std::string> collected_at_;
    std::vector<QuestionSpec> questions_;
    std::vector<ResponseSet> respondents_;
    std::unordered_map<std::string, std::size_t> question_index_;
    std::unordered_map<std::string, std::size_t> respondent_index_;
};

struct LoadReport {
    std::vector<std::string> warnings;
    std::size_t discarded_responses = 0;
};

SurveyDataset load_dataset(const std::filesystem::path& path, LoadReport* report = nullptr);
SurveyDataset dataset_from_json(const nlohmann::json& doc, LoadReport* report = nullptr);
nlohmann::json dataset_to_json(const SurveyDataset& ds);

enum class SplitScope { all, attitude, behavioral };

std::string_view to_string(SplitScope s);
SplitScope scope_from_string(std::string_view s);  // throws ConfigError

/// Per-respondent generation/evaluation partition. Ids are kept in
/// dataset column order.
struct QuestionSplit {
    std::string respondent_id;
    std::vector<std::string> gen_ids;
    std::vector<std::string> eval_ids;
    std::uint64_t seed = 0;

    bool in_gen(const std::string& id) const;
    bool in_eval(const std::string& id) const;
};

struct SkipRecord {
    std::string respondent_id;
    std::string reason;
};

struct SplitResult {
    std::vector<QuestionSplit> splits;
    std::vector<SkipRecord> skipped;
};

bool in_scope(Domain d, SplitScope scope);

/// Shuffles each respondent's answered, in-scope questions with a stream
/// derived from (seed, respondent id) and keeps round-half-up(ratio * n) of
/// them for generation. Respondents with nothing in scope are skipped.
SplitResult split_questions(const SurveyDataset& ds, double ratio, std::uint64_t seed,
                            SplitScope scope = SplitScope::all);

std::map<Domain, std::vector<std::string>> partition_by_domain(const SurveyDataset& ds);

nlohmann::json to_json(const QuestionSplit& s);
QuestionSplit split_from_json(const nlohmann::json& j);

}  // namespace privsim
