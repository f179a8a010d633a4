#include "boundless/causal.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "boundless/errors.hpp"

namespace boundless::causal {

namespace {

using nlohmann::json;

struct MechanismInfo {
  Mechanism mechanism;
  const char* vocabulary;  // JSON mechanism name
  const char* op;          // JSON "op" for comparisons, else nullptr
  int arity;               // -1: variadic (>= 2)
};

constexpr MechanismInfo kMechanisms[] = {
    {Mechanism::Input, "input", nullptr, 0},
    {Mechanism::GreaterEqual, "comparison", "ge", 2},
    {Mechanism::LessEqual, "comparison", "le", 2},
    {Mechanism::Conjunction, "conjunction", nullptr, -1},
    {Mechanism::Midpoint, "midpoint", nullptr, 2},
    {Mechanism::AbsoluteDistance, "absolute-distance", nullptr, 2},
    {Mechanism::HalfDistance, "half-distance", nullptr, 2},
    {Mechanism::MakeInterval, "interval", nullptr, 2},
    {Mechanism::IntervalMembership, "interval-membership", nullptr, 2},
};

const MechanismInfo& info(Mechanism m) {
  for (const auto& i : kMechanisms) {
    if (i.mechanism == m) return i;
  }
  throw ModelError("unknown mechanism");
}

bool produces_boolean(Mechanism m) {
  return m == Mechanism::GreaterEqual || m == Mechanism::LessEqual ||
         m == Mechanism::Conjunction || m == Mechanism::IntervalMembership;
}

const char* domain_name(Domain d) {
  switch (d) {
    case Domain::Boolean: return "boolean";
    case Domain::Real: return "real";
    case Domain::Interval: return "interval";
    case Domain::Label: return "label";
  }
  return "?";
}

Domain parse_domain(const std::string& s) {
  if (s == "boolean") return Domain::Boolean;
  if (s == "real") return Domain::Real;
  if (s == "interval") return Domain::Interval;
  if (s == "label") return Domain::Label;
  throw ModelError("unknown domain '" + s + "'");
}

double as_real(const Value& v, const std::string& who) {
  if (const auto* d = std::get_if<double>(&v)) return *d;
  throw ModelError("variable '" + who + "' expected a real value, got " + describe(v));
}

bool as_bool(const Value& v, const std::string& who) {
  if (const auto* b = std::get_if<bool>(&v)) return *b;
  if (const auto* l = std::get_if<Label>(&v)) return *l == Label::Yes;
  throw ModelError("variable '" + who + "' expected a boolean value, got " + describe(v));
}

}  // namespace

bool in_domain(const Value& value, Domain domain) {
  switch (domain) {
    case Domain::Boolean: return std::holds_alternative<bool>(value);
    case Domain::Real: {
      const auto* d = std::get_if<double>(&value);
      return d != nullptr && std::isfinite(*d);
    }
    case Domain::Interval: {
      const auto* i = std::get_if<Interval>(&value);
      return i != nullptr && std::isfinite(i->lo) && std::isfinite(i->hi);
    }
    case Domain::Label: return std::holds_alternative<Label>(value);
  }
  return false;
}

std::string describe(const Value& value) {
  std::ostringstream s;
  std::visit([&](const auto& v) {
    using T = std::decay_t<decltype(v)>;
    if constexpr (std::is_same_v<T, bool>) {
      s << (v ? "true" : "false");
    } else if constexpr (std::is_same_v<T, double>) {
      s << v;
    } else if constexpr (std::is_same_v<T, Interval>) {
      s << '[' << v.lo << ", " << v.hi << ']';
    } else {
      s << to_string(v);
    }
  }, value);
  return s.str();
}

CausalModel::CausalModel(std::string name, std::vector<Variable> variables, std::string output)
    : name_(std::move(name)), variables_(std::move(variables)), output_(std::move(output)) {
  std::set<std::string> seen;
  for (const auto& v : variables_) {
    if (v.name.empty()) throw ModelError("variable with empty name");
    if (!seen.insert(v.name).second) throw ModelError("duplicate variable '" + v.name + "'");
  }
  for (const auto& v : variables_) {
    const auto& mi = info(v.mechanism);
    if (v.mechanism == Mechanism::Input) {
      if (!v.parents.empty()) throw ModelError("input '" + v.name + "' declares parents");
      if (v.alignable) throw ModelError("input '" + v.name + "' cannot be alignable");
      continue;
    }
    const int n = static_cast<int>(v.parents.size());
    if ((mi.arity >= 0 && n != mi.arity) || (mi.arity < 0 && n < 2)) {
      throw ModelError("variable '" + v.name + "': mechanism " + mi.vocabulary +
                       " has wrong number of parents");
    }
    for (const auto& p : v.parents) {
      if (!seen.contains(p)) {
        throw ModelError("variable '" + v.name + "' has undeclared parent '" + p + "'");
      }
    }
    const bool boolean_out = produces_boolean(v.mechanism);
    const bool ok = boolean_out ? (v.domain == Domain::Boolean || v.domain == Domain::Label)
                    : v.mechanism == Mechanism::MakeInterval ? v.domain == Domain::Interval
                                                             : v.domain == Domain::Real;
    if (!ok) {
      throw ModelError("variable '" + v.name + "': mechanism " + mi.vocabulary +
                       " cannot produce domain " + domain_name(v.domain));
    }
  }
  if (!seen.contains(output_)) throw ModelError("output variable '" + output_ + "' not declared");
  if (variable(output_).domain != Domain::Label) {
    throw ModelError("output variable '" + output_ + "' must have label domain");
  }

  // Kahn's algorithm in declaration order, so evaluation order is stable.
  std::vector<std::size_t> pending(variables_.size());
  for (std::size_t i = 0; i < variables_.size(); ++i) pending[i] = variables_[i].parents.size();
  std::vector<bool> done(variables_.size(), false);
  while (order_.size() < variables_.size()) {
    bool progressed = false;
    for (std::size_t i = 0; i < variables_.size(); ++i) {
      if (done[i]) continue;
      const auto& v = variables_[i];
      const bool ready = std::all_of(v.parents.begin(), v.parents.end(), [&](const auto& p) {
        return done[index_of(p)];
      });
      if (ready) {
        done[i] = true;
        order_.push_back(v.name);
        progressed = true;
      }
    }
    if (!progressed) throw ModelError("model '" + name_ + "' has a mechanism cycle");
  }
}

std::size_t CausalModel::index_of(std::string_view name) const {
  for (std::size_t i = 0; i < variables_.size(); ++i) {
    if (variables_[i].name == name) return i;
  }
  throw ModelError("unknown variable '" + std::string(name) + "'");
}

const Variable& CausalModel::variable(std::string_view name) const {
  return variables_[index_of(name)];
}

bool CausalModel::has_variable(std::string_view name) const {
  return std::any_of(variables_.begin(), variables_.end(),
                     [&](const Variable& v) { return v.name == name; });
}

std::vector<std::string> CausalModel::inputs() const {
  std::vector<std::string> out;
  for (const auto& v : variables_) {
    if (v.mechanism == Mechanism::Input) out.push_back(v.name);
  }
  return out;
}

std::vector<std::string> CausalModel::alignable() const {
  std::vector<std::string> out;
  for (const auto& v : variables_) {
    if (v.alignable) out.push_back(v.name);
  }
  return out;
}

bool CausalModel::is_descendant(std::string_view descendant, std::string_view ancestor) const {
  if (descendant == ancestor) return false;
  std::vector<std::string> stack{std::string(descendant)};
  std::set<std::string> visited;
  while (!stack.empty()) {
    std::string cur = std::move(stack.back());
    stack.pop_back();
    for (const auto& p : variable(cur).parents) {
      if (p == ancestor) return true;
      if (visited.insert(p).second) stack.push_back(p);
    }
  }
  return false;
}

Value CausalModel::compute(const Variable& v, const VariableSetting& cur) const {
  auto parent = [&](std::size_t i) -> const Value& { return cur.at(v.parents[i]); };
  auto real = [&](std::size_t i) { return as_real(parent(i), v.parents[i]); };
  Value out;
  switch (v.mechanism) {
    case Mechanism::Input:
      throw ModelError("compute() on input variable");
    case Mechanism::GreaterEqual: out = real(0) >= real(1); break;
    case Mechanism::LessEqual: out = real(0) <= real(1); break;
    case Mechanism::Conjunction: {
      bool all = true;
      for (std::size_t i = 0; i < v.parents.size(); ++i) all = all && as_bool(parent(i), v.parents[i]);
      out = all;
      break;
    }
    case Mechanism::Midpoint: out = (real(0) + real(1)) / 2.0; break;
    case Mechanism::AbsoluteDistance: out = std::abs(real(0) - real(1)); break;
    case Mechanism::HalfDistance: out = std::abs(real(0) - real(1)) / 2.0; break;
    case Mechanism::MakeInterval: out = Interval{real(0), real(1)}; break;
    case Mechanism::IntervalMembership: {
      const auto* iv = std::get_if<Interval>(&parent(1));
      if (iv == nullptr) throw ModelError("'" + v.parents[1] + "' is not an interval");
      const double x = real(0);
      out = iv->lo <= x && x <= iv->hi;
      break;
    }
  }
  if (v.domain == Domain::Label) {
    out = label_from_bool(std::get<bool>(out));
  }
  return out;
}

VariableSetting CausalModel::evaluate(const VariableSetting& input) const {
  return evaluate_clamped(input, {});
}

VariableSetting CausalModel::evaluate_clamped(const VariableSetting& input,
                                              const VariableSetting& clamped) const {
  VariableSetting cur;
  for (const auto& name : order_) {
    const Variable& v = variable(name);
    if (auto c = clamped.find(name); c != clamped.end()) {
      if (!in_domain(c->second, v.domain)) {
        throw SpecError("clamped value " + describe(c->second) + " outside domain of '" +
                        name + "'");
      }
      cur[name] = c->second;
      continue;
    }
    if (v.mechanism == Mechanism::Input) {
      auto it = input.find(name);
      if (it == input.end()) {
        throw IncompleteInputError("input setting is missing variable '" + name + "'");
      }
      if (!in_domain(it->second, v.domain)) {
        throw IncompleteInputError("input value " + describe(it->second) +
                                   " outside domain of '" + name + "'");
      }
      cur[name] = it->second;
    } else {
      cur[name] = compute(v, cur);
    }
  }
  return cur;
}

Label CausalModel::output_label(const VariableSetting& full) const {
  return std::get<Label>(full.at(output_));
}

VariableSetting interchange_setting(const CausalModel& model, const VariableSetting& base,
                                    const InterventionSpec& spec) {
  VariableSetting clamped;
  std::set<std::string> used;
  for (const auto& ic : spec) {
    const VariableSetting source_full = model.evaluate(ic.source);
    for (const auto& t : ic.targets) {
      if (!model.has_variable(t)) throw SpecError("unknown intervention target '" + t + "'");
      if (model.variable(t).mechanism == Mechanism::Input) {
        throw SpecError("intervention target '" + t + "' is an input variable");
      }
      if (!used.insert(t).second) {
        throw SpecError("intervention target sets overlap on '" + t + "'");
      }
      clamped[t] = source_full.at(t);
    }
  }
  return model.evaluate_clamped(base, clamped);
}

Label interchange_intervene(const CausalModel& model, const VariableSetting& base,
                            const InterventionSpec& spec) {
  return model.output_label(interchange_setting(model, base, spec));
}

VariableSetting tau(const task::TaskInstance& instance) {
  return {{"lower", static_cast<double>(instance.lower)},
          {"upper", static_cast<double>(instance.upper)},
          {"amount", static_cast<double>(instance.amount)}};
}

std::string_view to_string(Hypothesis h) {
  switch (h) {
    case Hypothesis::LeftBoundary: return "LeftBoundary";
    case Hypothesis::LeftAndRightBoundary: return "LeftAndRightBoundary";
    case Hypothesis::MidpointDistance: return "MidpointDistance";
    case Hypothesis::BracketIdentity: return "BracketIdentity";
  }
  return "?";
}

Hypothesis parse_hypothesis(std::string_view name) {
  for (Hypothesis h : all_hypotheses()) {
    if (to_string(h) == name) return h;
  }
  throw HypothesisError("unknown hypothesis '" + std::string(name) + "'");
}

std::vector<Hypothesis> all_hypotheses() {
  return {Hypothesis::LeftBoundary, Hypothesis::LeftAndRightBoundary,
          Hypothesis::MidpointDistance, Hypothesis::BracketIdentity};
}

CausalModel make_hypothesis(Hypothesis h) {
  auto input = [](const char* n) { return Variable{n, Domain::Real, Mechanism::Input, {}, false}; };
  std::vector<Variable> vars{input("lower"), input("upper"), input("amount")};
  switch (h) {
    case Hypothesis::LeftBoundary:
    case Hypothesis::LeftAndRightBoundary: {
      const bool both = h == Hypothesis::LeftAndRightBoundary;
      vars.push_back({"above_lower", Domain::Boolean, Mechanism::GreaterEqual,
                      {"amount", "lower"}, true});
      vars.push_back({"below_upper", Domain::Boolean, Mechanism::LessEqual,
                      {"amount", "upper"}, both});
      vars.push_back({"output", Domain::Label, Mechanism::Conjunction,
                      {"above_lower", "below_upper"}, false});
      break;
    }
    case Hypothesis::MidpointDistance:
      vars.push_back({"midpoint", Domain::Real, Mechanism::Midpoint, {"lower", "upper"}, true});
      vars.push_back({"distance", Domain::Real, Mechanism::AbsoluteDistance,
                      {"amount", "midpoint"}, false});
      vars.push_back({"half_width", Domain::Real, Mechanism::HalfDistance,
                      {"upper", "lower"}, false});
      vars.push_back({"output", Domain::Label, Mechanism::LessEqual,
                      {"distance", "half_width"}, false});
      break;
    case Hypothesis::BracketIdentity:
      vars.push_back({"bracket", Domain::Interval, Mechanism::MakeInterval,
                      {"lower", "upper"}, true});
      vars.push_back({"output", Domain::Label, Mechanism::IntervalMembership,
                      {"amount", "bracket"}, false});
      break;
  }
  return CausalModel(std::string(to_string(h)), std::move(vars), "output");
}

CausalModel make_hypothesis(std::string_view name) { return make_hypothesis(parse_hypothesis(name)); }

CausalModel load_model_json(std::string_view text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ModelError(std::string("model JSON: ") + e.what());
  }
  auto reject_unknown = [](const json& obj, std::initializer_list<const char*> allowed,
                           const std::string& where) {
    for (const auto& [key, _] : obj.items()) {
      if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; })) {
        throw ModelError("model JSON: unknown key '" + key + "' in " + where);
      }
    }
  };
  if (!doc.is_object()) throw ModelError("model JSON: top level must be an object");
  reject_unknown(doc, {"name", "output", "variables"}, "model");
  try {
    std::vector<Variable> vars;
    for (const auto& jv : doc.at("variables")) {
      Variable v;
      v.name = jv.at("name").get<std::string>();
      reject_unknown(jv, {"name", "domain", "mechanism", "op", "parents", "alignable"},
                     "variable '" + v.name + "'");
      v.domain = parse_domain(jv.at("domain").get<std::string>());
      const std::string mech = jv.value("mechanism", std::string("input"));
      const std::string op = jv.value("op", std::string());
      bool found = false;
      for (const auto& mi : kMechanisms) {
        if (mech == mi.vocabulary && (mi.op == nullptr ? op.empty() : op == mi.op)) {
          v.mechanism = mi.mechanism;
          found = true;
          break;
        }
      }
      if (!found) {
        throw ModelError("model JSON: variable '" + v.name + "' has unknown mechanism '" +
                         mech + (op.empty() ? "" : "/" + op) + "'");
      }
      v.parents = jv.value("parents", std::vector<std::string>{});
      v.alignable = jv.value("alignable", false);
      vars.push_back(std::move(v));
    }
    return CausalModel(doc.at("name").get<std::string>(), std::move(vars),
                       doc.at("output").get<std::string>());
  } catch (const json::exception& e) {
    throw ModelError(std::string("model JSON: ") + e.what());
  }
}

std::string model_to_json(const CausalModel& model) {
  json doc;
  doc["name"] = model.name();
  doc["output"] = model.output();
  json vars = json::array();
  for (const auto& v : model.variables()) {
    const auto& mi = info(v.mechanism);
    json jv{{"name", v.name}, {"domain", domain_name(v.domain)}, {"mechanism", mi.vocabulary}};
    if (mi.op != nullptr) jv["op"] = mi.op;
    if (!v.parents.empty()) jv["parents"] = v.parents;
    if (v.alignable) jv["alignable"] = true;
    vars.push_back(std::move(jv));
  }
  doc["variables"] = std::move(vars);
  return doc.dump(2);
}

}  // namespace boundless::causal
