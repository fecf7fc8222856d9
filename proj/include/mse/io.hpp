#pragma once

// File plumbing shared by the CLI and tests: dataset JSON, CSV emission,
// atomic writes, content hashing, and per-run manifests.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mse/model.hpp"

namespace mse {

// Write-then-rename so interrupted runs never leave a partial file.
void atomic_write_file(const std::string& path, const std::string& content);

std::string read_file(const std::string& path);

// Hex-encoded SHA-256 of a byte string / file.
std::string sha256_hex(const std::string& bytes);
std::string sha256_file(const std::string& path);

// Shortest decimal form of a double that round-trips exactly.
std::string format_double(double value);

nlohmann::json dataset_to_json(const Dataset& data);
Dataset dataset_from_json(const nlohmann::json& j);
void save_dataset(const std::string& path, const Dataset& data);
Dataset load_dataset(const std::string& path);

struct CsvWriter {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    void add_row(std::vector<std::string> row);
    std::string to_string() const;
    void save(const std::string& path) const;
};

struct RunManifest {
    std::string command;                       // subcommand name
    std::vector<std::string> argv;             // full invocation
    nlohmann::json config;                     // resolved configuration snapshot
    std::uint64_t seed = 0;
    std::vector<std::string> input_paths;
    std::map<std::string, std::string> artifact_hashes;  // relative path -> sha256
    double wall_clock_seconds = 0.0;

    nlohmann::json to_json() const;
    // Hashes each artifact (paths relative to run_dir) and writes manifest.json.
    void finalize(const std::string& run_dir, const std::vector<std::string>& artifacts);
};

}  // namespace mse
