#include "mse/io.hpp"

#include <openssl/evp.h>
#include <unistd.h>

#include <array>
#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <stdexcept>
#include <system_error>

namespace mse {

namespace fs = std::filesystem;
using nlohmann::json;

void atomic_write_file(const std::string& path, const std::string& content) {
    const fs::path target(path);
    if (target.has_parent_path()) fs::create_directories(target.parent_path());
    const fs::path tmp = target.string() + ".tmp." + std::to_string(::getpid());
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
        out.write(content.data(), static_cast<std::streamsize>(content.size()));
        out.flush();
        if (!out) throw std::runtime_error("short write to " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, target, ec);
    if (ec) {
        fs::remove(tmp);
        throw std::runtime_error("rename to " + path + " failed: " + ec.message());
    }
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

std::string sha256_hex(const std::string& bytes) {
    std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), digest.data(), &len, EVP_sha256(), nullptr) != 1)
        throw std::runtime_error("sha256 digest failed");
    static const char* hex = "0123456789abcdef";
    std::string out;
    out.reserve(2 * len);
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(hex[digest[i] >> 4]);
        out.push_back(hex[digest[i] & 0xf]);
    }
    return out;
}

std::string sha256_file(const std::string& path) { return sha256_hex(read_file(path)); }

std::string format_double(double value) {
    std::array<char, 64> buf{};
    auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), value);
    if (ec != std::errc()) throw std::runtime_error("format_double failed");
    return std::string(buf.data(), ptr);
}

json dataset_to_json(const Dataset& data) {
    validate_dataset_shape(data);
    json j;
    j["k"] = data.k;
    if (data.interval) {
        j["censor_interval"] = {data.interval->lo, data.interval->hi};
    } else {
        j["censor_interval"] = nullptr;
    }
    const auto patterns = enumerate_patterns(data.k);
    json cells = json::array();
    for (std::size_t i = 0; i < patterns.size(); ++i) {
        json cell;
        cell["pattern"] = patterns[i].to_string();
        if (data.mask[i]) {
            cell["count"] = nullptr;
            cell["censored"] = true;
        } else {
            cell["count"] = data.counts[i];
            cell["censored"] = false;
        }
        cells.push_back(std::move(cell));
    }
    j["cells"] = std::move(cells);
    return j;
}

Dataset dataset_from_json(const json& j) {
    Dataset data;
    data.k = j.at("k").get<int>();
    if (data.k < 2 || data.k > 20) throw std::runtime_error("dataset: k out of range [2,20]");
    const auto& ji = j.at("censor_interval");
    if (!ji.is_null()) {
        if (!ji.is_array() || ji.size() != 2)
            throw std::runtime_error("dataset: censor_interval must be [a,b] or null");
        CensorInterval interval{ji[0].get<std::int64_t>(), ji[1].get<std::int64_t>()};
        if (interval.lo < 0 || interval.lo > interval.hi)
            throw std::runtime_error("dataset: censor_interval needs 0 <= a <= b");
        data.interval = interval;
    }

    const std::size_t n_cells = (std::size_t{1} << data.k) - 1;
    data.counts.assign(n_cells, 0);
    data.mask.assign(n_cells, 0);
    std::vector<bool> seen(n_cells, false);

    const auto& cells = j.at("cells");
    if (cells.size() != n_cells)
        throw std::runtime_error("dataset: expected " + std::to_string(n_cells) + " cells, got " +
                                 std::to_string(cells.size()));
    for (const auto& cell : cells) {
        const std::string pat = cell.at("pattern").get<std::string>();
        if (static_cast<int>(pat.size()) != data.k)
            throw std::runtime_error("dataset: pattern '" + pat + "' has wrong length for k=" +
                                     std::to_string(data.k));
        std::uint32_t mask_bits = 0;
        for (char c : pat) {
            if (c != '0' && c != '1')
                throw std::runtime_error("dataset: pattern '" + pat + "' has non-binary character");
            mask_bits = (mask_bits << 1) | static_cast<std::uint32_t>(c - '0');
        }
        if (mask_bits == 0) throw std::runtime_error("dataset: all-zero pattern '" + pat + "' not allowed");
        const std::size_t idx = mask_bits - 1;
        if (seen[idx]) throw std::runtime_error("dataset: duplicate pattern '" + pat + "'");
        seen[idx] = true;

        const bool censored = cell.at("censored").get<bool>();
        const auto& jc = cell.at("count");
        if (censored) {
            if (!jc.is_null())
                throw std::runtime_error("dataset: censored cell '" + pat + "' must have null count");
            if (!data.interval)
                throw std::runtime_error("dataset: censored cell '" + pat +
                                         "' but censor_interval is null");
            data.counts[idx] = -1;
            data.mask[idx] = 1;
        } else {
            if (jc.is_null())
                throw std::runtime_error("dataset: uncensored cell '" + pat + "' must have a count");
            const auto count = jc.get<std::int64_t>();
            if (count < 0)
                throw std::runtime_error("dataset: negative count for pattern '" + pat + "'");
            if (data.interval && count >= data.interval->lo && count <= data.interval->hi)
                throw std::runtime_error("dataset: uncensored count " + std::to_string(count) +
                                         " for pattern '" + pat + "' lies inside censor interval [" +
                                         std::to_string(data.interval->lo) + "," +
                                         std::to_string(data.interval->hi) + "]");
            data.counts[idx] = count;
            data.mask[idx] = 0;
        }
    }
    validate_dataset_shape(data);
    return data;
}

void save_dataset(const std::string& path, const Dataset& data) {
    atomic_write_file(path, dataset_to_json(data).dump(2) + "\n");
}

Dataset load_dataset(const std::string& path) {
    json j;
    try {
        j = json::parse(read_file(path));
    } catch (const json::exception& e) {
        throw std::runtime_error("dataset " + path + ": invalid JSON: " + e.what());
    }
    return dataset_from_json(j);
}

void CsvWriter::add_row(std::vector<std::string> row) {
    if (row.size() != header.size())
        throw std::invalid_argument("csv row width " + std::to_string(row.size()) +
                                    " != header width " + std::to_string(header.size()));
    rows.push_back(std::move(row));
}

std::string CsvWriter::to_string() const {
    std::string out;
    auto emit = [&out](const std::vector<std::string>& cells) {
        for (std::size_t i = 0; i < cells.size(); ++i) {
            if (i) out.push_back(',');
            out += cells[i];
        }
        out.push_back('\n');
    };
    emit(header);
    for (const auto& row : rows) emit(row);
    return out;
}

void CsvWriter::save(const std::string& path) const { atomic_write_file(path, to_string()); }

json RunManifest::to_json() const {
    json j;
    j["command"] = command;
    j["argv"] = argv;
    j["config"] = config;
    j["seed"] = seed;
    j["input_paths"] = input_paths;
    j["artifact_hashes"] = artifact_hashes;
    j["wall_clock_seconds"] = wall_clock_seconds;
    return j;
}

void RunManifest::finalize(const std::string& run_dir, const std::vector<std::string>& artifacts) {
    artifact_hashes.clear();
    for (const auto& rel : artifacts)
        artifact_hashes[rel] = sha256_file((fs::path(run_dir) / rel).string());
    atomic_write_file((fs::path(run_dir) / "manifest.json").string(), to_json().dump(2) + "\n");
}

}  // namespace mse
