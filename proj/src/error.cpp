#include "mstm/error.hpp"

namespace mstm {

std::string_view to_string(ErrorCode code) {
    switch (code) {
    case ErrorCode::Config: return "ConfigError";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::NonMonotonePoint: return "NonMonotonePoint";
    case ErrorCode::InfeasibleStart: return "InfeasibleStart";
    case ErrorCode::MaxIterations: return "MaxIterations";
    case ErrorCode::RankDeficient: return "RankDeficient";
    case ErrorCode::BracketFailure: return "BracketFailure";
    case ErrorCode::CovarianceNotPD: return "CovarianceNotPD";
    case ErrorCode::SingularSystem: return "SingularSystem";
    case ErrorCode::NonFiniteLogDensity: return "NonFiniteLogDensity";
    case ErrorCode::NonFiniteGradient: return "NonFiniteGradient";
    case ErrorCode::LineSearchFailure: return "LineSearchFailure";
    case ErrorCode::TooFewReplicates: return "TooFewReplicates";
    case ErrorCode::DegenerateBudget: return "DegenerateBudget";
    case ErrorCode::SingularFit: return "SingularFit";
    case ErrorCode::EmptySampleSet: return "EmptySampleSet";
    case ErrorCode::Io: return "IoError";
    }
    return "UnknownError";
}

} // namespace mstm
