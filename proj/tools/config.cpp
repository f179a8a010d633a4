#include "config.hpp"

#include <algorithm>
#include <cmath>
#include <nlohmann/json.hpp>
#include <set>
#include <sstream>

#include "boundless/causal.hpp"
#include "boundless/errors.hpp"
#include "boundless/io.hpp"

namespace boundless::cli {

namespace fs = std::filesystem;
using nlohmann::json;
using KeyPath = std::vector<std::string>;

namespace {

std::string join(const KeyPath& path) {
  std::string out;
  for (const auto& p : path) out += (out.empty() ? "" : ".") + p;
  return out.empty() ? "<root>" : out;
}

std::size_t line_at(const std::string& text, std::size_t offset) {
  return 1 + static_cast<std::size_t>(
                 std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(
                                                             std::min(offset, text.size())),
                            '\n'));
}

// Reads the document while remembering enough to point errors at lines.
class Reader {
 public:
  Reader(fs::path path, std::string text) : path_(std::move(path)), text_(std::move(text)) {
    try {
      root_ = json::parse(text_);
    } catch (const json::parse_error& e) {
      throw ConfigError(path_.string() + ":" + std::to_string(line_at(text_, e.byte == 0 ? 0 : e.byte - 1)) +
                        ": malformed JSON: " + e.what());
    }
    if (!root_.is_object()) fail({}, "top level must be an object");
  }

  const json& root() const { return root_; }
  const fs::path& path() const { return path_; }

  // Line of the key named by `path`, found by scanning for each component in
  // turn; falls back to the line of the last component found.
  std::size_t line_of(const KeyPath& path) const {
    std::size_t pos = 0;
    std::size_t found = std::string::npos;
    for (const auto& key : path) {
      if (!key.empty() && std::isdigit(static_cast<unsigned char>(key[0]))) continue;
      const std::size_t at = text_.find("\"" + key + "\"", pos);
      if (at == std::string::npos) break;
      found = at;
      pos = at + key.size() + 2;
    }
    return found == std::string::npos ? 1 : line_at(text_, found);
  }

  [[noreturn]] void fail(const KeyPath& path, const std::string& message) const {
    throw ConfigError(path_.string() + ":" + std::to_string(line_of(path)) + ": " + join(path) +
                      ": " + message);
  }

  const json& at(const KeyPath& path) const {
    const json* node = &root_;
    for (const auto& key : path) {
      if (node->is_array()) {
        node = &(*node)[std::stoul(key)];
      } else {
        node = &(*node)[key];
      }
    }
    return *node;
  }

  void only_keys(const KeyPath& path, std::initializer_list<const char*> allowed) const {
    const json& obj = at(path);
    if (!obj.is_object()) fail(path, "expected an object");
    for (const auto& [key, value] : obj.items()) {
      (void)value;
      if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; })) {
        KeyPath p = path;
        p.push_back(key);
        std::string list;
        for (const char* a : allowed) list += (list.empty() ? "" : ", ") + std::string(a);
        fail(p, "unknown key (allowed: " + list + ")");
      }
    }
  }

  bool has(const KeyPath& parent, const std::string& key) const {
    const json& obj = at(parent);
    return obj.is_object() && obj.contains(key);
  }

  double positive_number(const KeyPath& path) const {
    const json& v = at(path);
    if (!v.is_number()) fail(path, "expected a number");
    const double x = v.get<double>();
    if (!(x > 0.0) || !std::isfinite(x)) fail(path, "must be positive, got " + v.dump());
    return x;
  }

  double fraction(const KeyPath& path) const {
    const json& v = at(path);
    if (!v.is_number()) fail(path, "expected a number");
    const double x = v.get<double>();
    if (!(x >= 0.0 && x <= 1.0)) fail(path, "must lie in [0, 1], got " + v.dump());
    return x;
  }

  std::uint64_t count(const KeyPath& path, bool allow_zero = false) const {
    const json& v = at(path);
    if (!v.is_number_integer() || (v.is_number_integer() && v.get<std::int64_t>() < 0 && !v.is_number_unsigned())) {
      fail(path, "expected a non-negative integer, got " + v.dump());
    }
    const auto x = v.get<std::uint64_t>();
    if (x == 0 && !allow_zero) fail(path, "must be positive");
    return x;
  }

  std::string string(const KeyPath& path) const {
    const json& v = at(path);
    if (!v.is_string()) fail(path, "expected a string");
    return v.get<std::string>();
  }

  fs::path existing_file(const KeyPath& path, const fs::path& value) const {
    const fs::path resolved = value.is_absolute() ? value : path_.parent_path() / value;
    if (!fs::is_regular_file(resolved)) fail(path, "file '" + resolved.string() + "' does not exist");
    return resolved;
  }

 private:
  fs::path path_;
  std::string text_;
  json root_;
};

NetworkSpec parse_network(const Reader& r) {
  const KeyPath base{"network"};
  if (!r.at(base).is_object()) r.fail(base, "expected an object");
  NetworkSpec spec;
  if (r.has(base, "path")) {
    r.only_keys(base, {"path"});
    spec.source = NetworkSpec::Source::File;
    const fs::path stem = r.string({"network", "path"});
    const fs::path resolved = stem.is_absolute() ? stem : r.path().parent_path() / stem;
    r.existing_file({"network", "path"}, io::sidecar_path(resolved));
    r.existing_file({"network", "path"}, io::payload_path(resolved));
    spec.path = resolved;
    return spec;
  }
  if (!r.has(base, "kind")) r.fail(base, "needs \"kind\" (planted-mlp or seq-net) or \"path\"");
  const std::string kind = r.string({"network", "kind"});
  if (kind == "planted-mlp") {
    r.only_keys(base, {"kind", "hypothesis", "width", "seed"});
    spec.source = NetworkSpec::Source::Planted;
    if (!r.has(base, "hypothesis")) r.fail(base, "planted-mlp needs \"hypothesis\"");
    spec.planted_hypothesis = r.string({"network", "hypothesis"});
    try {
      causal::parse_hypothesis(spec.planted_hypothesis);
    } catch (const HypothesisError& e) {
      r.fail({"network", "hypothesis"}, e.what());
    }
    if (r.has(base, "width")) spec.width = r.count({"network", "width"});
    if (r.has(base, "seed")) spec.seed = r.count({"network", "seed"}, true);
    return spec;
  }
  if (kind == "seq-net") {
    r.only_keys(base, {"kind", "layers", "width", "heads", "mlp_ratio", "seed", "train_examples",
                       "test_examples", "epochs", "batch", "lr", "lr_final_fraction", "max_steps"});
    spec.source = NetworkSpec::Source::SeqNet;
    auto opt_count = [&](const char* key, std::size_t& dst, bool zero = false) {
      if (r.has(base, key)) dst = r.count({"network", key}, zero);
    };
    opt_count("layers", spec.arch.layers);
    opt_count("width", spec.arch.width);
    opt_count("heads", spec.arch.heads);
    opt_count("mlp_ratio", spec.arch.mlp_ratio);
    opt_count("train_examples", spec.training.train_examples);
    opt_count("test_examples", spec.training.test_examples);
    opt_count("epochs", spec.training.epochs);
    opt_count("batch", spec.training.batch);
    if (r.has(base, "seed")) spec.seed = spec.training.seed = r.count({"network", "seed"}, true);
    if (r.has(base, "lr")) spec.training.lr = r.positive_number({"network", "lr"});
    if (r.has(base, "lr_final_fraction")) {
      spec.training.lr_final_fraction = r.fraction({"network", "lr_final_fraction"});
    }
    if (r.has(base, "max_steps")) spec.training.max_steps = r.count({"network", "max_steps"}, true);
    if (spec.arch.width % spec.arch.heads != 0) r.fail({"network", "heads"}, "must divide width");
    return spec;
  }
  r.fail({"network", "kind"}, "unknown network kind '" + kind + "'");
}

void parse_train(const Reader& r, bdas::TrainConfig& cfg) {
  const KeyPath base{"train"};
  r.only_keys(base, {"lr_rotation", "lr_boundary", "batch", "epochs", "eval_every", "beta_start",
                     "beta_end", "train_size", "eval_size", "test_size", "test_seed"});
  auto num = [&](const char* key, double& dst) {
    if (r.has(base, key)) dst = r.positive_number({"train", key});
  };
  auto cnt = [&](const char* key, std::size_t& dst) {
    if (r.has(base, key)) dst = r.count({"train", key});
  };
  num("lr_rotation", cfg.lr_rotation);
  num("lr_boundary", cfg.lr_boundary);
  num("beta_start", cfg.beta_start);
  num("beta_end", cfg.beta_end);
  cnt("batch", cfg.batch);
  cnt("epochs", cfg.epochs);
  cnt("eval_every", cfg.eval_every);
  cnt("train_size", cfg.train_size);
  cnt("eval_size", cfg.eval_size);
  cnt("test_size", cfg.test_size);
  if (r.has(base, "test_seed")) cfg.test_seed = r.count({"train", "test_seed"}, true);
  if (!(cfg.beta_end < cfg.beta_start)) r.fail({"train", "beta_end"}, "must be below beta_start");
}

void parse_sites(const Reader& r, RunConfig& cfg) {
  const json& v = r.at({"sites"});
  if (v.is_string()) {
    if (v.get<std::string>() != "all") r.fail({"sites"}, "expected \"all\" or a list of sites");
    cfg.all_sites = true;
    return;
  }
  if (!v.is_array() || v.empty()) r.fail({"sites"}, "expected \"all\" or a non-empty list");
  for (std::size_t i = 0; i < v.size(); ++i) {
    const KeyPath p{"sites", std::to_string(i)};
    if (!v[i].is_object()) r.fail({"sites"}, "site " + std::to_string(i) + " must be an object");
    r.only_keys(p, {"layer", "position"});
    if (!v[i].contains("layer")) r.fail({"sites"}, "site " + std::to_string(i) + " needs \"layer\"");
    net::ActivationSite s;
    s.layer = r.count({"sites", std::to_string(i), "layer"}, true);
    if (v[i].contains("position")) s.position = r.count({"sites", std::to_string(i), "position"}, true);
    cfg.sites.push_back(s);
  }
}

}  // namespace

std::vector<std::uint64_t> parse_seed_list(const std::string& text) {
  std::vector<std::uint64_t> out;
  std::istringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (item.empty() || item.find_first_not_of("0123456789") != std::string::npos) {
      throw ConfigError("--seeds: '" + item + "' is not a non-negative integer");
    }
    out.push_back(std::stoull(item));
  }
  if (out.empty()) throw ConfigError("--seeds: empty seed list");
  return out;
}

RunConfig load_run_config(const fs::path& path, const std::string& command) {
  if (!fs::is_regular_file(path)) throw ConfigError(path.string() + ": config file does not exist");
  RunConfig cfg;
  cfg.path = path;
  cfg.text = io::read_text(path);
  const Reader r(path, cfg.text);

  r.only_keys({}, {"network", "hypothesis", "hypothesis_file", "sites", "train", "seeds", "jobs",
                   "output", "state", "data"});
  const json& root = r.root();

  if (root.contains("network")) cfg.network = parse_network(r);
  if (root.contains("hypothesis")) {
    cfg.hypothesis = r.string({"hypothesis"});
    try {
      causal::parse_hypothesis(*cfg.hypothesis);
    } catch (const HypothesisError& e) {
      r.fail({"hypothesis"}, e.what());
    }
  }
  if (root.contains("hypothesis_file")) {
    cfg.hypothesis_file = r.existing_file({"hypothesis_file"}, r.string({"hypothesis_file"}));
    try {
      causal::load_model_json(io::read_text(*cfg.hypothesis_file));
    } catch (const Error& e) {
      r.fail({"hypothesis_file"}, e.what());
    }
  }
  if (cfg.hypothesis && cfg.hypothesis_file) {
    r.fail({"hypothesis_file"}, "give either \"hypothesis\" or \"hypothesis_file\", not both");
  }
  if (root.contains("sites")) parse_sites(r, cfg);
  if (root.contains("train")) parse_train(r, cfg.train);
  if (root.contains("seeds")) {
    const json& s = root["seeds"];
    if (!s.is_array() || s.empty()) r.fail({"seeds"}, "expected a non-empty list of integers");
    cfg.seeds.clear();
    for (std::size_t i = 0; i < s.size(); ++i) cfg.seeds.push_back(r.count({"seeds", std::to_string(i)}, true));
  }
  if (root.contains("jobs")) cfg.jobs = r.count({"jobs"});
  if (root.contains("output")) {
    const fs::path out = r.string({"output"});
    cfg.output = out.is_absolute() ? out : path.parent_path() / out;
  }
  if (root.contains("state")) {
    const fs::path stem = r.string({"state"});
    const fs::path resolved = stem.is_absolute() ? stem : path.parent_path() / stem;
    r.existing_file({"state"}, io::sidecar_path(resolved));
    r.existing_file({"state"}, io::payload_path(resolved));
    cfg.state = resolved;
  }
  if (root.contains("data")) {
    r.only_keys({"data"}, {"n", "seed"});
    DataSpec d;
    if (r.has({"data"}, "n")) d.n = r.count({"data", "n"});
    if (r.has({"data"}, "seed")) d.seed = r.count({"data", "seed"}, true);
    cfg.data = d;
  }

  auto require = [&](bool ok, const std::string& key) {
    if (!ok) r.fail({}, "command '" + command + "' needs \"" + key + "\"");
  };
  if (command == "train" || command == "sweep" || command == "eval") {
    require(cfg.network.has_value(), "network");
    require(cfg.hypothesis || cfg.hypothesis_file, "hypothesis");
    require(cfg.all_sites || !cfg.sites.empty(), "sites");
  }
  if (command == "train" || command == "eval") {
    if (cfg.all_sites || cfg.sites.size() != 1) r.fail({"sites"}, "command '" + command + "' takes exactly one site");
  }
  if (command == "eval") require(cfg.state.has_value(), "state");
  if (command == "build-planted") {
    require(cfg.network.has_value(), "network");
    if (cfg.network->source != NetworkSpec::Source::Planted) {
      r.fail({"network", "kind"}, "build-planted needs a planted-mlp network");
    }
  }
  if (command == "gen-data") require(cfg.data.has_value(), "data");
  return cfg;
}

}  // namespace boundless::cli
