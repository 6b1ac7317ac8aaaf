#pragma once

#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

namespace dafkit {

enum class ErrorKind {
    invalid_input,
    certification,
    not_partially_hyperbolic,
    convergence,
    scale_not_found,
    integration,
    cone_exit,
    no_intersection,
    ambiguity,
    holonomy_undefined,
    tube_overlap,
    step,
    model_violation,
    tangency,
    resolution,
};

inline const char* to_string(ErrorKind k) {
    switch (k) {
    case ErrorKind::invalid_input: return "invalid-input";
    case ErrorKind::certification: return "certification";
    case ErrorKind::not_partially_hyperbolic: return "not-partially-hyperbolic";
    case ErrorKind::convergence: return "convergence";
    case ErrorKind::scale_not_found: return "scale-not-found";
    case ErrorKind::integration: return "integration";
    case ErrorKind::cone_exit: return "cone-exit";
    case ErrorKind::no_intersection: return "no-intersection";
    case ErrorKind::ambiguity: return "ambiguity";
    case ErrorKind::holonomy_undefined: return "holonomy-undefined";
    case ErrorKind::tube_overlap: return "tube-overlap";
    case ErrorKind::step: return "step";
    case ErrorKind::model_violation: return "model-violation";
    case ErrorKind::tangency: return "tangency";
    case ErrorKind::resolution: return "resolution";
    }
    return "unknown";
}

/// Library failure. Carries a kind and optional structured evidence.
class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what, nlohmann::json evidence = {})
        : std::runtime_error(std::string(to_string(kind)) + ": " + what),
          kind_(kind), evidence_(std::move(evidence)) {}

    ErrorKind kind() const noexcept { return kind_; }
    const nlohmann::json& evidence() const noexcept { return evidence_; }

private:
    ErrorKind kind_;
    nlohmann::json evidence_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what,
                              nlohmann::json evidence = {}) {
    throw Error(kind, what, std::move(evidence));
}

inline void require(bool cond, const std::string& what) {
    if (!cond) fail(ErrorKind::invalid_input, what);
}

} // namespace dafkit
