#pragma once

#include <stdexcept>
#include <string>

namespace privsim {

/// Base of every error raised by the library. `kind()` is a stable,
/// machine-readable name used in CLI error records.
class Error : public std::runtime_error {
public:
    Error(std::string kind, const std::string& message)
        : std::runtime_error(message), kind_(std::move(kind)) {}

    const std::string& kind() const noexcept { return kind_; }

private:
    std::string kind_;
};

#define PRIVSIM_DEFINE_ERROR(Name, Base)                                      \
    class Name : public Base {                                                \
    public:                                                                   \
        explicit Name(const std::string& message) : Base(#Name, message) {}  \
                                                                              \
    protected:                                                                \
        Name(std::string kind, const std::string& message)                    \
            : Base(std::move(kind), message) {}                               \
    };

// dataset
PRIVSIM_DEFINE_ERROR(SchemaError, Error)
PRIVSIM_DEFINE_ERROR(AnswerDomainError, Error)
PRIVSIM_DEFINE_ERROR(EmptyScopeError, Error)
PRIVSIM_DEFINE_ERROR(IoError, Error)
PRIVSIM_DEFINE_ERROR(ConfigError, Error)

// backend / gateway. Anything deriving from TransientBackendError is retried.
PRIVSIM_DEFINE_ERROR(TransientBackendError, Error)
PRIVSIM_DEFINE_ERROR(PermanentBackendError, Error)
PRIVSIM_DEFINE_ERROR(InvalidRequest, PermanentBackendError)
PRIVSIM_DEFINE_ERROR(ScriptExhausted, PermanentBackendError)
PRIVSIM_DEFINE_ERROR(ReplayMiss, PermanentBackendError)
PRIVSIM_DEFINE_ERROR(BackendUnavailable, Error)
PRIVSIM_DEFINE_ERROR(BudgetExceeded, Error)
PRIVSIM_DEFINE_ERROR(EmptyCompletion, Error)

// prompts
PRIVSIM_DEFINE_ERROR(UnknownTemplate, Error)
PRIVSIM_DEFINE_ERROR(MissingPersona, Error)
PRIVSIM_DEFINE_ERROR(MissingAnswer, Error)

// persona / prediction
PRIVSIM_DEFINE_ERROR(AllCandidatesFailed, Error)
PRIVSIM_DEFINE_ERROR(NoScorableQuestions, Error)
PRIVSIM_DEFINE_ERROR(NoPersonasSurvive, Error)

// metrics
PRIVSIM_DEFINE_ERROR(NoScorable, Error)
PRIVSIM_DEFINE_ERROR(EmptySample, Error)
PRIVSIM_DEFINE_ERROR(SupportMismatch, Error)
PRIVSIM_DEFINE_ERROR(AllSkipped, Error)
PRIVSIM_DEFINE_ERROR(TooFewUnits, Error)

#undef PRIVSIM_DEFINE_ERROR

/// The model output could not be mapped onto the question's answer set.
class UnparseableAnswer : public Error {
public:
    explicit UnparseableAnswer(std::string raw_output)
        : Error("UnparseableAnswer", "model output does not match any answer: '" + raw_output + "'"),
          raw_output_(std::move(raw_output)) {}

    const std::string& raw_output() const noexcept { return raw_output_; }

private:
    std::string raw_output_;
};

}  // namespace privsim
