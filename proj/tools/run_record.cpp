#include "run_record.hpp"

#include <algorithm>

#include "icmlm/image_io.hpp"
#include "icmlm/version.hpp"

namespace icmlm::cli {

namespace fs = std::filesystem;

RunRecord::RunRecord(int argc, char** argv) : argv_(argv, argv + argc) {}

std::uint32_t path_checksum(const fs::path& path) {
  if (!fs::is_directory(path)) return io::file_crc32(path);
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(path)) {
    if (e.is_regular_file() && e.path().filename() != "run.json") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::string listing;
  for (const auto& f : files) {
    listing += fs::relative(f, path).generic_string() + ":" + std::to_string(io::file_crc32(f)) + "\n";
  }
  return io::crc32(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(listing.data()),
                                                 listing.size()));
}

void RunRecord::add_input(const std::string& role, const fs::path& path) {
  inputs_[role] = {{"path", path.string()}, {"crc32", path_checksum(path)}};
}

void RunRecord::write(int exit_code, const std::string& error) const {
  if (out_.empty()) return;
  std::string command;
  for (const auto& a : argv_) {
    if (!command.empty()) command += ' ';
    command += a;
  }
  nlohmann::json j = {{"command", command},
                      {"argv", argv_},
                      {"subcommand", subcommand_},
                      {"seed", seed_},
                      {"git_describe", std::string(git_describe())},
                      {"inputs", inputs_},
                      {"artifacts", artifacts_},
                      {"exit_code", exit_code},
                      {"status", exit_code == 0 ? "ok" : "error"}};
  if (!error.empty()) j["error"] = error;
  std::error_code ec;
  fs::create_directories(out_, ec);
  io::write_text_file(out_ / "run.json", j.dump(2) + "\n");
}

}  // namespace icmlm::cli
