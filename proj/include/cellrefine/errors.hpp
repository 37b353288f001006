#pragma once

#include <stdexcept>
#include <string>

namespace cellrefine {

// Domain errors. Each maps to a named contract violation so callers and
// tests can distinguish them; the CLI maps DomainError -> exit 1 and
// ConfigError -> exit 2.

struct DomainError : std::runtime_error {
    explicit DomainError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

#define CELLREFINE_DOMAIN_ERROR(NAME)                                        \
    struct NAME : DomainError {                                              \
        explicit NAME(const std::string& msg) : DomainError(#NAME ": " + msg) {} \
    }

CELLREFINE_DOMAIN_ERROR(UnknownCellType);
CELLREFINE_DOMAIN_ERROR(InsufficientMarkers);
CELLREFINE_DOMAIN_ERROR(LengthMismatch);
CELLREFINE_DOMAIN_ERROR(AllZeroExpression);
CELLREFINE_DOMAIN_ERROR(RateOutOfRange);
CELLREFINE_DOMAIN_ERROR(SequenceTooLong);
CELLREFINE_DOMAIN_ERROR(UnknownGene);
CELLREFINE_DOMAIN_ERROR(AdaptersAlreadyAttached);
CELLREFINE_DOMAIN_ERROR(ZeroVector);
CELLREFINE_DOMAIN_ERROR(MissingPrototype);
CELLREFINE_DOMAIN_ERROR(EmptyMaskSet);
CELLREFINE_DOMAIN_ERROR(NonFiniteInput);
CELLREFINE_DOMAIN_ERROR(EmptyDataset);
CELLREFINE_DOMAIN_ERROR(IncompatibleTask);
CELLREFINE_DOMAIN_ERROR(StageOrderViolation);
CELLREFINE_DOMAIN_ERROR(KOutOfRange);
CELLREFINE_DOMAIN_ERROR(DegenerateCell);
CELLREFINE_DOMAIN_ERROR(DegenerateGroup);
CELLREFINE_DOMAIN_ERROR(LabelSpaceMismatch);
CELLREFINE_DOMAIN_ERROR(TooFewCategories);
CELLREFINE_DOMAIN_ERROR(InvalidConfig);
CELLREFINE_DOMAIN_ERROR(InvalidOntology);
CELLREFINE_DOMAIN_ERROR(IoError);

#undef CELLREFINE_DOMAIN_ERROR

}  // namespace cellrefine
