#include "cli.hpp"

#include <openssl/evp.h>

#include <CLI11.hpp>
#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <nlohmann/json.hpp>
#include <ostream>
#include <sstream>
#include <unistd.h>

#include "boundless/bdas.hpp"
#include "boundless/causal.hpp"
#include "boundless/errors.hpp"
#include "boundless/io.hpp"
#include "boundless/network.hpp"
#include "boundless/report.hpp"
#include "boundless/task.hpp"
#include "config.hpp"

#ifndef BOUNDLESS_VERSION
#define BOUNDLESS_VERSION "unknown"
#endif

namespace boundless::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string sha256_hex(std::string_view data) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw FormatError("sha256 failed");
  }
  std::ostringstream out;
  for (unsigned int i = 0; i < len; ++i) {
    out << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  }
  return out.str();
}

std::string site_tag(const net::ActivationSite& s) {
  return "L" + std::to_string(s.layer) + "_P" + std::to_string(s.position);
}

// Collects a command's files in a hidden directory next to the output and
// moves them into place only once the command succeeds.
class Staging {
 public:
  explicit Staging(fs::path out)
      : out_(std::move(out)), tmp_(out_ / (".partial-" + std::to_string(::getpid()))) {}
  Staging(const Staging&) = delete;
  Staging& operator=(const Staging&) = delete;
  ~Staging() {
    std::error_code ec;
    fs::remove_all(tmp_, ec);
    if (created_out_ && !committed_ && fs::is_empty(out_, ec)) fs::remove(out_, ec);
  }

  fs::path path(const fs::path& rel) {
    if (!started_) {
      created_out_ = !fs::exists(out_);
      started_ = true;
    }
    if (std::find(files_.begin(), files_.end(), rel) == files_.end()) files_.push_back(rel);
    const fs::path p = tmp_ / rel;
    fs::create_directories(p.parent_path());
    return p;
  }
  void text(const fs::path& rel, std::string_view contents) { io::write_atomic(path(rel), contents); }
  // Registers `<stem>.bin` and `<stem>.json` and returns the staged stem.
  fs::path stem(const fs::path& rel) {
    path(io::payload_path(rel));
    path(io::sidecar_path(rel));
    return tmp_ / rel;
  }

  json listing() const {
    json out = json::array();
    std::vector<fs::path> sorted = files_;
    std::sort(sorted.begin(), sorted.end());
    for (const auto& rel : sorted) {
      out.push_back({{"path", rel.generic_string()}, {"sha256", sha256_hex(io::read_text(tmp_ / rel))}});
    }
    return out;
  }

  void commit() {
    for (const auto& rel : files_) {
      const fs::path dst = out_ / rel;
      fs::create_directories(dst.parent_path());
      fs::rename(tmp_ / rel, dst);
    }
    committed_ = true;
  }

 private:
  fs::path out_;
  fs::path tmp_;
  std::vector<fs::path> files_;
  bool started_ = false;
  bool created_out_ = false;
  bool committed_ = false;
};

struct Options {
  std::string command;
  std::string config;
  std::string out;
  std::string seeds;
  std::size_t jobs = 0;
  std::vector<std::string> heatmaps;
  std::string reference;
};

void write_manifest(Staging& staging, const Options& opts, const RunConfig* cfg, const json& extra) {
  json m;
  m["command"] = opts.command;
  m["versions"] = {{"boundless", BOUNDLESS_VERSION},
                   {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                         std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                         std::to_string(NLOHMANN_JSON_VERSION_PATCH)}};
  if (cfg != nullptr) {
    m["config"] = fs::absolute(cfg->path).lexically_normal().generic_string();
    m["config_sha256"] = sha256_hex(cfg->text);
    m["seeds"] = cfg->seeds;
    m["jobs"] = cfg->jobs;
  }
  for (const auto& [k, v] : extra.items()) m[k] = v;
  m["artifacts"] = staging.listing();
  staging.text("manifest.json", m.dump(2) + "\n");
}

RunConfig load(const Options& opts) {
  RunConfig cfg = load_run_config(opts.config, opts.command);
  if (const char* env = std::getenv(kOutputEnv); env != nullptr && *env != '\0') cfg.output = env;
  if (!opts.out.empty()) cfg.output = opts.out;
  if (!opts.seeds.empty()) cfg.seeds = parse_seed_list(opts.seeds);
  if (opts.jobs > 0) cfg.jobs = opts.jobs;
  try {
    bdas::validate(cfg.train);
  } catch (const ConfigError& e) {
    throw ConfigError(cfg.path.string() + ": train: " + e.what());
  }
  return cfg;
}

causal::CausalModel hypothesis_of(const RunConfig& cfg) {
  if (cfg.hypothesis_file) return causal::load_model_json(io::read_text(*cfg.hypothesis_file));
  return causal::make_hypothesis(*cfg.hypothesis);
}

std::unique_ptr<net::Network> network_of(const RunConfig& cfg, Staging& staging, std::ostream& out) {
  const NetworkSpec& spec = *cfg.network;
  switch (spec.source) {
    case NetworkSpec::Source::File:
      return net::load_network(spec.path);
    case NetworkSpec::Source::Planted:
      try {
        return net::build_planted_net(causal::make_hypothesis(spec.planted_hypothesis), spec.width,
                                      spec.seed);
      } catch (const CapacityError& e) {
        throw ConfigError(cfg.path.string() + ": network: " + e.what());
      }
    case NetworkSpec::Source::SeqNet: {
      auto trained = net::train_task_net(spec.arch, spec.training);
      out << "trained seq-net: held-out task accuracy "
          << report::fixed2(trained->recorded_accuracy()) << "\n";
      trained->save(staging.stem("net"));
      return trained;
    }
  }
  throw ConfigError("unreachable network source");
}

// Site and capacity problems are configuration errors, caught before training.
std::vector<net::ActivationSite> sites_of(const RunConfig& cfg, const net::Network& network,
                                          const causal::CausalModel& hypothesis) {
  const std::vector<net::ActivationSite> sites = cfg.all_sites ? network.all_sites() : cfg.sites;
  for (const auto& s : sites) {
    try {
      network.check_site(s);
    } catch (const SiteError& e) {
      throw ConfigError(cfg.path.string() + ": sites: " + e.what());
    }
  }
  const std::size_t k = hypothesis.alignable().size();
  if (2 * k > network.width()) {
    throw ConfigError(cfg.path.string() + ": hypothesis: " + std::to_string(k) +
                      " alignable variables do not fit in width " + std::to_string(network.width()));
  }
  return sites;
}

json train_summary(const bdas::TrainResult& r, std::size_t d, std::optional<double> test_iia) {
  const bdas::Dynamics dyn = bdas::boundary_dynamics(r.log, d);
  json j = {{"seed", r.state.seed},
            {"best_eval_iia", r.best_eval_iia},
            {"best_step", r.best_step},
            {"final_snapped_width", dyn.final_snapped_width},
            {"unaligned", r.unaligned}};
  if (test_iia) j["test_iia"] = *test_iia;
  return j;
}

void write_log(Staging& staging, const fs::path& rel, const bdas::TrainResult& r) {
  std::ostringstream csv;
  bdas::write_log_csv(csv, r.log, r.state.slots());
  staging.text(rel, csv.str());
}

int cmd_train(const Options& opts, std::ostream& out) {
  const RunConfig cfg = load(opts);
  Staging staging(cfg.output);
  const auto model = hypothesis_of(cfg);
  const auto network = network_of(cfg, staging, out);
  const auto site = sites_of(cfg, *network, model).front();
  const auto testset = bdas::gen_counterfactual_dataset(model, cfg.train.test_size, cfg.train.test_seed,
                                                        bdas::Sampling::Balanced);
  json runs = json::array();
  for (std::uint64_t seed : cfg.seeds) {
    const auto result = bdas::train_alignment(*network, site, model, cfg.train, seed);
    const double iia = bdas::eval_iia(*network, site, model, result.state, testset);
    const std::string tag = site_tag(site) + "_seed" + std::to_string(seed);
    result.state.save(staging.stem("states/" + tag));
    write_log(staging, "logs/" + tag + ".csv", result);
    runs.push_back(train_summary(result, network->width(), iia));
    out << "seed " << seed << ": test IIA " << report::fixed2(iia) << ", best eval IIA "
        << report::fixed2(result.best_eval_iia) << " at step " << result.best_step
        << (result.unaligned ? ", unaligned" : "") << "\n";
  }
  staging.text("train.json", json({{"hypothesis", model.name()},
                                   {"site", {{"layer", site.layer}, {"position", site.position}}},
                                   {"runs", runs}})
                                     .dump(2) + "\n");
  write_manifest(staging, opts, &cfg, {{"hypothesis", model.name()}});
  staging.commit();
  return kExitOk;
}

std::string heatmap_grid(const bdas::IIAHeatmap& map) {
  std::map<std::size_t, std::map<std::size_t, const bdas::HeatmapCell*>> grid;
  std::vector<std::size_t> positions;
  for (const auto& c : map.cells) {
    grid[c.site.layer][c.site.position] = &c;
    positions.push_back(c.site.position);
  }
  std::sort(positions.begin(), positions.end());
  positions.erase(std::unique(positions.begin(), positions.end()), positions.end());
  std::ostringstream o;
  o << "layer\\pos";
  for (std::size_t p : positions) o << std::setw(6) << p;
  o << "\n";
  for (auto it = grid.rbegin(); it != grid.rend(); ++it) {
    o << std::setw(9) << it->first;
    for (std::size_t p : positions) {
      const auto found = it->second.find(p);
      std::string v = "";
      if (found != it->second.end()) v = found->second->iia ? report::fixed2(*found->second->iia) : "--";
      o << std::setw(6) << v;
    }
    o << "\n";
  }
  return o.str();
}

int cmd_sweep(const Options& opts, std::ostream& out, std::ostream& err) {
  const RunConfig cfg = load(opts);
  Staging staging(cfg.output);
  const auto model = hypothesis_of(cfg);
  const auto network = network_of(cfg, staging, out);
  const auto sites = sites_of(cfg, *network, model);
  std::vector<bdas::RunRecord> runs;
  const bdas::IIAHeatmap map = bdas::sweep(*network, sites, model, cfg.train, cfg.seeds, cfg.jobs, &runs);

  std::ostringstream csv;
  report::write_heatmap_csv(csv, map);
  staging.text("heatmap.csv", csv.str());
  staging.text("heatmap.meta.json", report::heatmap_meta_json(map));
  json summary = json::array();
  bool diverged = false;
  for (const auto& r : runs) {
    const std::string tag = site_tag(r.site) + "_seed" + std::to_string(r.seed);
    if (r.result) {
      r.result->state.save(staging.stem("states/" + tag));
      write_log(staging, "logs/" + tag + ".csv", *r.result);
      json j = train_summary(*r.result, network->width(), r.test_iia);
      j["layer"] = r.site.layer;
      j["position"] = r.site.position;
      summary.push_back(j);
    } else {
      err << "run " << tag << " failed: " << r.error << "\n";
    }
    diverged = diverged || r.diverged;
  }
  staging.text("runs.json", summary.dump(2) + "\n");
  write_manifest(staging, opts, &cfg, {{"hypothesis", model.name()}});
  staging.commit();

  out << "hypothesis " << map.hypothesis << ", task accuracy " << report::fixed2(map.task_accuracy)
      << ", base rate " << report::fixed2(map.base_rate) << "\n"
      << heatmap_grid(map);
  if (const auto* best = map.max_cell()) {
    out << "max IIA " << report::fixed2(*best->iia) << " at " << net::to_string(best->site) << "\n";
  }
  return diverged ? kExitDivergence : kExitOk;
}

int cmd_eval(const Options& opts, std::ostream& out) {
  const RunConfig cfg = load(opts);
  Staging staging(cfg.output);
  const auto model = hypothesis_of(cfg);
  const auto network = network_of(cfg, staging, out);
  const auto site = sites_of(cfg, *network, model).front();
  const auto state = intervene::AlignmentState::load(*cfg.state);
  if (state.dim() != network->width() || state.slot_variables != model.alignable()) {
    throw ConfigError(cfg.path.string() + ": state: saved alignment does not match the network width "
                      "or the hypothesis variables");
  }
  const auto testset = bdas::gen_counterfactual_dataset(model, cfg.train.test_size, cfg.train.test_seed,
                                                        bdas::Sampling::Balanced);
  const double iia = bdas::eval_iia(*network, site, model, state, testset);
  const double base = bdas::dummy_rate(testset);
  staging.text("eval.json", json({{"hypothesis", model.name()},
                                  {"site", {{"layer", site.layer}, {"position", site.position}}},
                                  {"iia", iia},
                                  {"base_rate", base}})
                                    .dump(2) + "\n");
  write_manifest(staging, opts, &cfg, {{"hypothesis", model.name()}});
  staging.commit();
  out << "IIA " << bdas::format_double(iia) << " (base rate " << report::fixed2(base) << ")\n";
  return kExitOk;
}

int cmd_build_planted(const Options& opts, std::ostream& out) {
  const RunConfig cfg = load(opts);
  Staging staging(cfg.output);
  const auto network = network_of(cfg, staging, out);
  network->save(staging.stem("net"));
  const double acc = net::task_accuracy(
      *network, task::gen_task_dataset(cfg.train.test_size, derive_seed(cfg.train.test_seed, 7)));
  write_manifest(staging, opts, &cfg, {{"task_accuracy", acc}});
  staging.commit();
  out << "planted network for " << cfg.network->planted_hypothesis << ", width " << network->width()
      << ", task accuracy " << report::fixed2(acc) << "\n";
  return kExitOk;
}

int cmd_gen_data(const Options& opts, std::ostream& out) {
  const RunConfig cfg = load(opts);
  Staging staging(cfg.output);
  const auto data = task::gen_task_dataset(cfg.data->n, cfg.data->seed);
  std::ostringstream csv;
  task::write_csv(csv, data);
  staging.text("tasks.csv", csv.str());
  write_manifest(staging, opts, &cfg, {{"n", cfg.data->n}, {"data_seed", cfg.data->seed}});
  staging.commit();
  out << "wrote " << data.size() << " instances\n";
  return kExitOk;
}

bdas::IIAHeatmap read_heatmap(const fs::path& path) {
  if (!fs::is_regular_file(path)) throw ReportError("heatmap '" + path.string() + "' does not exist");
  std::istringstream in(io::read_text(path));
  bdas::IIAHeatmap map = report::read_heatmap_csv(in);
  fs::path meta = path;
  meta.replace_extension(".meta.json");
  if (!fs::is_regular_file(meta)) throw ReportError("heatmap metadata '" + meta.string() + "' does not exist");
  report::apply_heatmap_meta(map, io::read_text(meta));
  return map;
}

// A file named heatmap.csv is labelled by its directory.
std::string experiment_name(const fs::path& path) {
  if (path.stem() == "heatmap" && path.has_parent_path()) return path.parent_path().filename().string();
  return path.stem().string();
}

int cmd_report(const Options& opts, std::ostream& out) {
  std::optional<bdas::IIAHeatmap> reference;
  if (!opts.reference.empty()) reference = read_heatmap(opts.reference);
  std::vector<report::SummaryRow> rows;
  json inputs = json::array();
  for (const auto& p : opts.heatmaps) {
    const auto map = read_heatmap(p);
    rows.push_back(report::summarize(experiment_name(p), map, reference ? &*reference : nullptr));
    inputs.push_back({{"path", p}, {"sha256", sha256_hex(io::read_text(p))}});
  }
  out << report::format_summary_table(rows);
  if (!opts.out.empty()) {
    Staging staging(opts.out);
    std::ostringstream csv;
    report::write_summary_csv(csv, rows);
    staging.text("summary.csv", csv.str());
    json extra = {{"inputs", inputs}};
    if (!opts.reference.empty()) {
      extra["reference"] = {{"path", opts.reference}, {"sha256", sha256_hex(io::read_text(opts.reference))}};
    }
    write_manifest(staging, opts, nullptr, extra);
    staging.commit();
  }
  return kExitOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Boundless DAS on Price Tagging networks", "boundless"};
  app.require_subcommand(1);
  Options opts;

  auto add_run = [&](const char* name, const char* help, bool seeds) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", opts.config, "JSON run configuration")->required();
    sub->add_option("--out", opts.out, "Output directory (overrides the config and BOUNDLESS_OUT)");
    if (seeds) {
      sub->add_option("--seeds", opts.seeds, "Comma-separated seed list");
      sub->add_option("--jobs", opts.jobs, "Parallel training runs")->check(CLI::PositiveNumber);
    }
    return sub;
  };
  add_run("train", "Train one alignment per seed at a single site", true);
  add_run("sweep", "Train alignments over a grid of sites and write an IIA heatmap", true);
  add_run("eval", "Evaluate a saved alignment on the held-out counterfactual set", false);
  add_run("gen-data", "Write a Price Tagging dataset as CSV", false);
  add_run("build-planted", "Build and save a planted network", false);
  CLI::App* rep = app.add_subcommand("report", "Summarize heatmaps");
  rep->add_option("heatmaps", opts.heatmaps, "Heatmap CSV files")->required();
  rep->add_option("--reference", opts.reference, "Reference heatmap for correlations");
  rep->add_option("--out", opts.out, "Directory for summary.csv");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "boundless: " << e.what() << "\n";
    return kExitConfig;
  }
  opts.command = app.get_subcommands().front()->get_name();

  try {
    if (opts.command == "train") return cmd_train(opts, out);
    if (opts.command == "sweep") return cmd_sweep(opts, out, err);
    if (opts.command == "eval") return cmd_eval(opts, out);
    if (opts.command == "gen-data") return cmd_gen_data(opts, out);
    if (opts.command == "build-planted") return cmd_build_planted(opts, out);
    return cmd_report(opts, out);
  } catch (const ConfigError& e) {
    err << "boundless: invalid config: " << e.what() << "\n";
    return kExitConfig;
  } catch (const DivergenceError& e) {
    err << "boundless: " << e.what() << "\n";
    return kExitDivergence;
  } catch (const TrainingError& e) {
    err << "boundless: " << e.what() << "\n";
    return kExitDivergence;
  } catch (const std::exception& e) {
    err << "boundless: " << e.what() << "\n";
    return kExitFailure;
  }
}

}  // namespace boundless::cli
