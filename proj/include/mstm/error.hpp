#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace mstm {

enum class ErrorCode {
    Config,
    DimensionMismatch,
    NonMonotonePoint,
    InfeasibleStart,
    MaxIterations,
    RankDeficient,
    BracketFailure,
    CovarianceNotPD,
    SingularSystem,
    NonFiniteLogDensity,
    NonFiniteGradient,
    LineSearchFailure,
    TooFewReplicates,
    DegenerateBudget,
    SingularFit,
    EmptySampleSet,
    Io,
};

std::string_view to_string(ErrorCode code);

/// Single exception type for the library; `code()` identifies the failure.
/// Config and Io errors map to CLI exit code 2, everything else to 3.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what)
        : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

    ErrorCode code() const noexcept { return code_; }
    bool is_numerical() const noexcept { return code_ != ErrorCode::Config && code_ != ErrorCode::Io; }

private:
    ErrorCode code_;
};

inline void require(bool condition, ErrorCode code, const std::string& what) {
    if (!condition) throw Error(code, what);
}

} // namespace mstm
