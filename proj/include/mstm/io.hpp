#pragma once

// Persistence: sample matrices (raw float64 + JSON sidecar), CSV grids,
// observation files, run manifests with SHA-256 artifact hashes.

#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

namespace mstm {

struct SampleMatrixHeader {
    Eigen::Index rows = 0;
    Eigen::Index cols = 0;
    std::vector<std::string> column_names;
    std::uint64_t seed = 0;
    std::string created;
};

/// Writes `<base>.bin` (little-endian float64, row-major) and `<base>.json`.
void write_sample_matrix(const std::filesystem::path& base, const Eigen::MatrixXd& m,
                         std::vector<std::string> column_names = {}, std::uint64_t seed = 0);
Eigen::MatrixXd read_sample_matrix(const std::filesystem::path& base, SampleMatrixHeader* header = nullptr);

/// Default column names prefix0..prefix{n-1}.
std::vector<std::string> numbered_names(const std::string& prefix, Eigen::Index n);

void write_csv(const std::filesystem::path& path, const Eigen::MatrixXd& m, const std::vector<std::string>& header = {});

struct Observations {
    std::vector<std::vector<double>> locations;
    Eigen::VectorXd values;
    double noise_var = 0.0;
};
void to_json(nlohmann::json& j, const Observations& o);
void from_json(const nlohmann::json& j, Observations& o);

nlohmann::json read_json(const std::filesystem::path& path);
void write_json(const std::filesystem::path& path, const nlohmann::json& j);

std::string sha256_file(const std::filesystem::path& path);
std::string utc_timestamp();

/// Collects written artifacts and writes `manifest.json` into the run directory.
class RunManifest {
public:
    RunManifest(std::filesystem::path dir, std::string command, nlohmann::json config, std::uint64_t seed, int threads);
    const std::filesystem::path& dir() const { return dir_; }
    std::filesystem::path path(const std::string& name) const { return dir_ / name; }
    /// Registers a file (relative to the run directory) for hashing.
    void add(const std::string& relative);
    void set(const std::string& key, nlohmann::json value) { extra_[key] = std::move(value); }
    void write() const;

private:
    std::filesystem::path dir_;
    std::string command_;
    nlohmann::json config_;
    std::uint64_t seed_;
    int threads_;
    std::vector<std::string> files_;
    nlohmann::json extra_ = nlohmann::json::object();
};

} // namespace mstm
