#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "privsim/dataset.hpp"
#include "privsim/llm/backend.hpp"

namespace privsim {

/// A survey whose answers follow a known rule: respondent j has a latent
/// type t_j and answers question i (0-based column) with option
/// (t_j + i) mod m_i. Used for demos and end-to-end checks.
struct SyntheticSpec {
    int questions = 20;
    int respondents = 30;
    int types = 4;
    std::uint64_t seed = 7;
    /// Fraction of respondents whose attitude answers follow type t_j + 1
    /// while their behavioral answers follow t_j.
    double attitude_behavior_gap = 0.0;
};

SurveyDataset make_synthetic_dataset(const SyntheticSpec& spec);

/// Latent behavioral type of each respondent, as drawn by make_synthetic_dataset.
std::map<std::string, int> synthetic_types(const SyntheticSpec& spec);

/// Backend that obeys the synthetic rule.
///  - generation: infers the type from the answer history and replies
///    "Persona type <t>." (refinement prompts echo the current type)
///  - feedback: a fixed note
///  - prediction: applies the rule with the type named in the narrative, or
///    inferred from a raw history; with no narrative, picks the first option
class SyntheticRuleBackend : public llm::Backend {
public:
    SyntheticRuleBackend(const SurveyDataset& ds, int types);

    llm::BackendReply call(const llm::ModelRequest& req, int sample_index) override;
    std::string kind() const override { return "synthetic"; }

    /// Best-fitting type for (question text, answer) pairs; ties go to the
    /// lowest type.
    int infer_type(const std::vector<std::pair<std::string, std::string>>& history) const;

private:
    struct Entry {
        std::size_t column;
        std::vector<std::string> answers;
    };

    std::optional<int> named_type(const std::string& prompt) const;
    std::string answer(int type, const Entry& e) const;

    std::map<std::string, Entry> by_text_;
    int types_;
};

}  // namespace privsim
