#pragma once

#include <stdexcept>
#include <string>

namespace bf {

enum class Errc {
    SingularBlock,
    SingularPrediction,
    NonStationary,
    NonFinite,
    OutOfSupport,
    DegenerateParams,
    NotApplicable,
    SingularQ,
    NonDifferentiable,
    NoArgmax,
    SingularInformation,
    ZeroObservation,
    NotConverged,
    IndefiniteDirection,
    InfoNotPD,
    SingularD,
    FilterFailed,
    NonFiniteObjective,
    OptimFailed,
    HessianNotInvertible,
    OutOfDomain,
    WeightCollapse,
    UnsupportedDimension,
    InvalidParams,
    LagWindowMissing,
    LengthMismatch,
};

inline const char* errc_name(Errc e) {
    switch (e) {
        case Errc::SingularBlock: return "SingularBlock";
        case Errc::SingularPrediction: return "SingularPrediction";
        case Errc::NonStationary: return "NonStationary";
        case Errc::NonFinite: return "NonFinite";
        case Errc::OutOfSupport: return "OutOfSupport";
        case Errc::DegenerateParams: return "DegenerateParams";
        case Errc::NotApplicable: return "NotApplicable";
        case Errc::SingularQ: return "SingularQ";
        case Errc::NonDifferentiable: return "NonDifferentiable";
        case Errc::NoArgmax: return "NoArgmax";
        case Errc::SingularInformation: return "SingularInformation";
        case Errc::ZeroObservation: return "ZeroObservation";
        case Errc::NotConverged: return "NotConverged";
        case Errc::IndefiniteDirection: return "IndefiniteDirection";
        case Errc::InfoNotPD: return "InfoNotPD";
        case Errc::SingularD: return "SingularD";
        case Errc::FilterFailed: return "FilterFailed";
        case Errc::NonFiniteObjective: return "NonFiniteObjective";
        case Errc::OptimFailed: return "OptimFailed";
        case Errc::HessianNotInvertible: return "HessianNotInvertible";
        case Errc::OutOfDomain: return "OutOfDomain";
        case Errc::WeightCollapse: return "WeightCollapse";
        case Errc::UnsupportedDimension: return "UnsupportedDimension";
        case Errc::InvalidParams: return "InvalidParams";
        case Errc::LagWindowMissing: return "LagWindowMissing";
        case Errc::LengthMismatch: return "LengthMismatch";
    }
    return "Unknown";
}

// All library failures surface as this type; code() identifies the condition.
class Error : public std::runtime_error {
public:
    Error(Errc code, const std::string& what)
        : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}
    Errc code() const noexcept { return code_; }

private:
    Errc code_;
};

// Failure inside a filter run, tagged with the (0-based) time index.
class FilterError : public Error {
public:
    FilterError(const Error& inner, long t)
        : Error(Errc::FilterFailed, "t=" + std::to_string(t) + " " + inner.what()),
          inner_(inner.code()), t_(t) {}
    Errc inner() const noexcept { return inner_; }
    long time() const noexcept { return t_; }

private:
    Errc inner_;
    long t_;
};

}  // namespace bf
