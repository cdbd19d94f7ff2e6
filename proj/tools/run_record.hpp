#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

namespace icmlm::cli {

// Provenance written to <out>/run.json whether the command succeeds or not.
class RunRecord {
 public:
  RunRecord(int argc, char** argv);

  void set_subcommand(std::string name) { subcommand_ = std::move(name); }
  void set_seed(std::uint64_t seed) { seed_ = seed; }
  void set_out(std::filesystem::path dir) { out_ = std::move(dir); }
  const std::filesystem::path& out() const { return out_; }

  // Records a CRC32 of a file, or of every file under a directory.
  void add_input(const std::string& role, const std::filesystem::path& path);
  void add_artifact(const std::filesystem::path& path) { artifacts_.push_back(path.string()); }

  // No-op without an output directory.
  void write(int exit_code, const std::string& error) const;

 private:
  std::vector<std::string> argv_;
  std::string subcommand_;
  std::uint64_t seed_ = 0;
  std::filesystem::path out_;
  nlohmann::json inputs_ = nlohmann::json::object();
  std::vector<std::string> artifacts_;
};

std::uint32_t path_checksum(const std::filesystem::path& path);

}  // namespace icmlm::cli
