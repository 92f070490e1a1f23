#pragma once

#include <map>
#include <functional>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "privsim/dataset.hpp"

namespace privsim {

/// Persona styles. `basic` is free-form; the other three impose a
/// privacy-theory section structure.
enum class GenerationTemplate { basic, bounded, calculus, pmt };
enum class PredictionTemplate { baseline, persona, raw };

inline constexpr GenerationTemplate kAllGenerationTemplates[] = {
    GenerationTemplate::basic, GenerationTemplate::bounded, GenerationTemplate::calculus, GenerationTemplate::pmt};

std::string_view to_string(GenerationTemplate t);
std::string_view to_string(PredictionTemplate t);
GenerationTemplate generation_template_from_string(std::string_view s);  // throws UnknownTemplate
PredictionTemplate prediction_template_from_string(std::string_view s);  // throws UnknownTemplate

/// Name of the checked-in template file backing each kind, without ".txt".
std::string_view template_file_stem(GenerationTemplate t);
std::string_view template_file_stem(PredictionTemplate t);

/// Template text compiled into the library from templates/<name>.txt.
/// Names: gen_basic, gen_bounded, gen_calculus, gen_pmt, predict_baseline,
/// predict_persona, feedback, refine.
std::string_view embedded_template(std::string_view name);  // throws UnknownTemplate
std::vector<std::string> embedded_template_names();

struct RenderedPrompt {
    std::string text;
    std::string kind;
    std::set<std::string> placeholders_filled;
    std::vector<std::string> lint_warnings;
};

/// Replaces every `{{ name }}` (inner whitespace optional) with values[name].
/// Single pass: substituted text is never rescanned. An unknown placeholder
/// name throws UnknownTemplate.
RenderedPrompt render_template(std::string_view tmpl, const std::map<std::string, std::string>& values);

/// `"A", "B", "C"`, in answer-set order.
std::string format_answer_range(std::span<const std::string> answers);

/// Question / Answer Range / User Answer blocks in dataset column order.
std::string serialize_raw_narrative(const SurveyDataset& ds, std::span<const std::string> question_ids,
                                    const ResponseSet& responses);

RenderedPrompt render_generation_prompt(GenerationTemplate kind, std::string_view raw_narrative);

/// `persona` is required for persona/raw kinds and ignored for baseline.
RenderedPrompt render_prediction_prompt(PredictionTemplate kind, const std::optional<std::string>& persona,
                                        std::string_view question, std::span<const std::string> answer_range);

struct Misprediction {
    std::string question_id;
    std::string question;
    std::string predicted;
    std::string actual;
};

RenderedPrompt render_feedback_prompt(std::string_view persona, std::span<const Misprediction> errors);
RenderedPrompt render_refine_prompt(std::string_view persona, std::string_view feedback);

/// Maps raw model output onto a member of `answers`. Whitespace, wrapping
/// quotes and trailing punctuation are stripped, comparison ignores case,
/// and on all-numeral answer sets any in-range integer is accepted.
/// Anything else throws UnparseableAnswer.
std::string parse_answer(std::string_view raw_output, std::span<const std::string> answers);

class Tokenizer {
public:
    virtual ~Tokenizer() = default;
    virtual std::size_t count(std::string_view text) const = 0;
    virtual std::string name() const = 0;
};

/// Runs of letters/digits count as one token, every other non-space
/// character counts as one token.
class ApproxTokenizer : public Tokenizer {
public:
    std::size_t count(std::string_view text) const override;
    std::string name() const override { return "approx-word-punct"; }
};

/// Adapter for an external tokenizer (e.g. a vendor SDK bound in by the caller).
class ExternalTokenizer : public Tokenizer {
public:
    using CountFn = std::function<std::size_t(std::string_view)>;
    ExternalTokenizer(std::string name, CountFn fn) : name_(std::move(name)), fn_(std::move(fn)) {}
    std::size_t count(std::string_view text) const override { return fn_(text); }
    std::string name() const override { return name_; }

private:
    std::string name_;
    CountFn fn_;
};

const Tokenizer& default_tokenizer();
std::size_t count_tokens(std::string_view text, const Tokenizer& tokenizer = default_tokenizer());

/// 100 * (1 - narrative / raw).
double percent_reduction(double raw_tokens, double narrative_tokens);

}  // namespace privsim
