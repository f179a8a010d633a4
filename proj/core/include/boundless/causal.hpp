#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "boundless/task.hpp"

namespace boundless::causal {

/// Closed interval of cents.
struct Interval {
  double lo = 0.0;
  double hi = 0.0;
  friend bool operator==(const Interval&, const Interval&) = default;
};

enum class Domain { Boolean, Real, Interval, Label };

/// Reals hold cents and are compared exactly; every value produced by the
/// builtin mechanisms is a multiple of 0.5 and therefore exact in binary.
using Value = std::variant<bool, double, Interval, Label>;

/// Builtin mechanism vocabulary. Models cannot carry arbitrary code.
enum class Mechanism {
  Input,
  GreaterEqual,        // comparison: parents (a, b) -> a >= b
  LessEqual,           // comparison: parents (a, b) -> a <= b
  Conjunction,         // all boolean parents true
  Midpoint,            // (a + b) / 2
  AbsoluteDistance,    // |a - b|
  HalfDistance,        // |a - b| / 2
  MakeInterval,        // [a, b]
  IntervalMembership,  // parents (x, interval) -> lo <= x <= hi
};

struct Variable {
  std::string name;
  Domain domain = Domain::Real;
  Mechanism mechanism = Mechanism::Input;
  std::vector<std::string> parents;
  bool alignable = false;
};

using VariableSetting = std::map<std::string, Value>;

/// One interchange: clamp `targets` to the values they take under `source`.
struct Interchange {
  std::vector<std::string> targets;
  VariableSetting source;
};

/// Interchanges with pairwise-disjoint target sets.
using InterventionSpec = std::vector<Interchange>;

/// Immutable acyclic causal model over named variables.
class CausalModel {
 public:
  /// Validates acyclicity, parent declarations, arities, and domains.
  CausalModel(std::string name, std::vector<Variable> variables, std::string output);

  const std::string& name() const noexcept { return name_; }
  std::span<const Variable> variables() const noexcept { return variables_; }
  const Variable& variable(std::string_view name) const;
  bool has_variable(std::string_view name) const;
  const std::string& output() const noexcept { return output_; }

  std::vector<std::string> inputs() const;
  /// Intermediate variables flagged as alignment targets, in declaration order.
  std::vector<std::string> alignable() const;
  /// Variables in evaluation order.
  const std::vector<std::string>& topological_order() const noexcept { return order_; }

  /// True if `descendant` is reachable from `ancestor` along mechanism edges.
  bool is_descendant(std::string_view descendant, std::string_view ancestor) const;

  /// Full setting of every variable for the given input setting.
  VariableSetting evaluate(const VariableSetting& input) const;
  /// As evaluate, but variables in `clamped` take the given values.
  VariableSetting evaluate_clamped(const VariableSetting& input,
                                   const VariableSetting& clamped) const;

  Label output_label(const VariableSetting& full) const;

 private:
  std::size_t index_of(std::string_view name) const;
  Value compute(const Variable& v, const VariableSetting& current) const;

  std::string name_;
  std::vector<Variable> variables_;
  std::string output_;
  std::vector<std::string> order_;
};

bool in_domain(const Value& value, Domain domain);
std::string describe(const Value& value);

/// Full setting after the interchange intervention.
VariableSetting interchange_setting(const CausalModel& model, const VariableSetting& base,
                                    const InterventionSpec& spec);
/// Output label of the base input under the interchange intervention.
Label interchange_intervene(const CausalModel& model, const VariableSetting& base,
                            const InterventionSpec& spec);

/// High-level input setting {lower, upper, amount} of a task instance.
VariableSetting tau(const task::TaskInstance& instance);

enum class Hypothesis { LeftBoundary, LeftAndRightBoundary, MidpointDistance, BracketIdentity };

std::string_view to_string(Hypothesis h);
/// Throws HypothesisError for unknown names.
Hypothesis parse_hypothesis(std::string_view name);
std::vector<Hypothesis> all_hypotheses();

CausalModel make_hypothesis(Hypothesis h);
CausalModel make_hypothesis(std::string_view name);

/// Declarative JSON form: {"name", "output", "variables": [{"name", "domain",
/// "mechanism", "op", "parents", "alignable"}]}.
CausalModel load_model_json(std::string_view text);
std::string model_to_json(const CausalModel& model);

}  // namespace boundless::causal
