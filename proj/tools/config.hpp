#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "boundless/bdas.hpp"
#include "boundless/network.hpp"

namespace boundless::cli {

struct NetworkSpec {
  enum class Source { Planted, SeqNet, File };
  Source source = Source::Planted;
  std::string planted_hypothesis;
  std::size_t width = 16;
  std::uint64_t seed = 0;
  net::SeqNetArch arch;
  net::SeqNetTraining training;
  std::filesystem::path path;
};

struct DataSpec {
  std::size_t n = 1000;
  std::uint64_t seed = 0;
};

/// One run's configuration, parsed from a JSON document.
struct RunConfig {
  std::filesystem::path path;
  std::string text;

  std::optional<NetworkSpec> network;
  std::optional<std::string> hypothesis;
  std::optional<std::filesystem::path> hypothesis_file;
  bool all_sites = false;
  std::vector<net::ActivationSite> sites;
  bdas::TrainConfig train;
  std::vector<std::uint64_t> seeds{0};
  std::size_t jobs = 1;
  std::filesystem::path output = "out";
  std::optional<std::filesystem::path> state;
  std::optional<DataSpec> data;
};

/// Parses and validates a config for `command`. Relative paths resolve
/// against the config file's directory. Throws ConfigError with a
/// "<file>:<line>: <key path>: <message>" text.
RunConfig load_run_config(const std::filesystem::path& path, const std::string& command);

/// Parses "0,1,2". Throws ConfigError.
std::vector<std::uint64_t> parse_seed_list(const std::string& text);

}  // namespace boundless::cli
