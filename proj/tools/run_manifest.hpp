#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

namespace cranio::cli {

// Lowercase hex SHA-256 of a file's bytes.
std::string sha256_file(const std::filesystem::path& path);

// Makes `dir` ready to receive a run. A non-empty directory is refused unless
// `force` is set, and even then it is only cleared when it holds a previous
// run (a run.json at its root).
void prepare_output_dir(const std::filesystem::path& dir, bool force);

// The run.json written at the root of every run directory. Outputs are
// recorded relative to the run directory and checksummed when the run is
// finished; run.json itself is the only file not covered.
class RunManifest {
 public:
  RunManifest(std::string command, std::filesystem::path out_dir);

  void set_config(nlohmann::json config) { config_ = std::move(config); }
  void set_seed(std::uint64_t seed) { seed_ = seed; }
  void add_input(const std::string& role, const std::filesystem::path& path);
  // Every regular file under the run directory except run.json.
  void collect_outputs();
  // Checksums the outputs, confirms each is a non-empty readable file and
  // writes run.json.
  void finish();

  static constexpr const char* kFileName = "run.json";

 private:
  std::string command_;
  std::filesystem::path out_;
  nlohmann::json config_ = nlohmann::json::object();
  nlohmann::json inputs_ = nlohmann::json::object();
  std::optional<std::uint64_t> seed_;
  std::vector<std::string> outputs_;
  std::string started_;
};

// Verifies every checksum in a run directory's run.json; returns the paths
// that are missing or differ.
std::vector<std::string> verify_run(const std::filesystem::path& dir);

// UTC ISO-8601; SOURCE_DATE_EPOCH, when set, pins the clock.
std::string timestamp_now();

}  // namespace cranio::cli
