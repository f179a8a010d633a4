#pragma once

#include <stdexcept>
#include <string>

namespace boundless {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// numkernel
class DimensionError : public Error { using Error::Error; };
class LabelError : public Error { using Error::Error; };
class NumericError : public Error { using Error::Error; };
class ConditioningError : public Error { using Error::Error; };

// causal models
class IncompleteInputError : public Error { using Error::Error; };
class SpecError : public Error { using Error::Error; };
class HypothesisError : public Error { using Error::Error; };
class ModelError : public Error { using Error::Error; };

// networks
class CapacityError : public Error { using Error::Error; };
class TrainingError : public Error { using Error::Error; };
class SiteError : public Error { using Error::Error; };

// interventions
class PartitionError : public Error { using Error::Error; };
class ArityError : public Error { using Error::Error; };

// search / reporting
class DivergenceError : public Error { using Error::Error; };
class EvaluationError : public Error { using Error::Error; };
class ReportError : public Error { using Error::Error; };
class FormatError : public Error { using Error::Error; };
class ConfigError : public Error { using Error::Error; };

}  // namespace boundless
