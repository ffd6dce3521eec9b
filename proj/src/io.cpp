#include "mstm/io.hpp"

#include <bit>
#include <chrono>
#include <cstring>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <openssl/evp.h>

#include "mstm/error.hpp"

namespace mstm {

namespace fs = std::filesystem;

namespace {

fs::path with_suffix(const fs::path& base, const char* suffix) {
    fs::path p = base;
    p += suffix;
    return p;
}

void ensure_parent(const fs::path& p) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

std::uint64_t to_little(std::uint64_t v) {
    if constexpr (std::endian::native == std::endian::little) return v;
    else return __builtin_bswap64(v);
}

} // namespace

std::vector<std::string> numbered_names(const std::string& prefix, Eigen::Index n) {
    std::vector<std::string> names;
    names.reserve(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) names.push_back(prefix + std::to_string(i));
    return names;
}

std::string utc_timestamp() {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    std::ostringstream os;
    os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
    return os.str();
}

void write_sample_matrix(const fs::path& base, const Eigen::MatrixXd& m, std::vector<std::string> names,
                         std::uint64_t seed) {
    if (names.empty()) names = numbered_names("c", m.cols());
    require(static_cast<Eigen::Index>(names.size()) == m.cols(), ErrorCode::DimensionMismatch,
            "column name count differs from matrix width");
    ensure_parent(base);
    {
        std::ofstream out(with_suffix(base, ".bin"), std::ios::binary);
        require(static_cast<bool>(out), ErrorCode::Io, "cannot write " + with_suffix(base, ".bin").string());
        std::vector<std::uint64_t> row(static_cast<std::size_t>(m.cols()));
        for (Eigen::Index r = 0; r < m.rows(); ++r) {
            for (Eigen::Index c = 0; c < m.cols(); ++c) {
                std::uint64_t bits;
                const double v = m(r, c);
                std::memcpy(&bits, &v, sizeof bits);
                row[static_cast<std::size_t>(c)] = to_little(bits);
            }
            out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size() * 8));
        }
        require(static_cast<bool>(out), ErrorCode::Io, "write failed for " + base.string());
    }
    // "created" is kept out of the payload so identical runs give identical binaries
    write_json(with_suffix(base, ".json"), nlohmann::json{{"rows", m.rows()},
                                                          {"cols", m.cols()},
                                                          {"column_names", names},
                                                          {"seed", seed},
                                                          {"created", utc_timestamp()}});
}

Eigen::MatrixXd read_sample_matrix(const fs::path& base, SampleMatrixHeader* header) {
    const auto j = read_json(with_suffix(base, ".json"));
    SampleMatrixHeader h;
    h.rows = j.at("rows").get<Eigen::Index>();
    h.cols = j.at("cols").get<Eigen::Index>();
    h.column_names = j.value("column_names", std::vector<std::string>{});
    h.seed = j.value("seed", std::uint64_t{0});
    h.created = j.value("created", std::string{});
    const auto bin = with_suffix(base, ".bin");
    require(fs::exists(bin), ErrorCode::Io, "missing " + bin.string());
    require(static_cast<std::uintmax_t>(h.rows * h.cols * 8) == fs::file_size(bin), ErrorCode::Io,
            "payload length of " + bin.string() + " disagrees with its header");
    std::ifstream in(bin, std::ios::binary);
    Eigen::MatrixXd m(h.rows, h.cols);
    std::vector<std::uint64_t> row(static_cast<std::size_t>(h.cols));
    for (Eigen::Index r = 0; r < h.rows; ++r) {
        in.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size() * 8));
        for (Eigen::Index c = 0; c < h.cols; ++c) {
            const std::uint64_t bits = to_little(row[static_cast<std::size_t>(c)]);
            double v;
            std::memcpy(&v, &bits, sizeof v);
            m(r, c) = v;
        }
    }
    require(static_cast<bool>(in), ErrorCode::Io, "short read from " + bin.string());
    if (header) *header = std::move(h);
    return m;
}

void write_csv(const fs::path& path, const Eigen::MatrixXd& m, const std::vector<std::string>& header) {
    ensure_parent(path);
    std::ofstream out(path);
    require(static_cast<bool>(out), ErrorCode::Io, "cannot write " + path.string());
    out << std::setprecision(17);
    for (std::size_t c = 0; c < header.size(); ++c) out << (c ? "," : "") << header[c];
    if (!header.empty()) out << '\n';
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        for (Eigen::Index c = 0; c < m.cols(); ++c) out << (c ? "," : "") << m(r, c);
        out << '\n';
    }
}

void to_json(nlohmann::json& j, const Observations& o) {
    j = nlohmann::json{{"locations", o.locations},
                       {"values", std::vector<double>(o.values.begin(), o.values.end())},
                       {"noise_var", o.noise_var}};
}

void from_json(const nlohmann::json& j, Observations& o) {
    o.locations = j.at("locations").get<std::vector<std::vector<double>>>();
    const auto v = j.at("values").get<std::vector<double>>();
    o.values = Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
    o.noise_var = j.at("noise_var").get<double>();
    require(o.noise_var > 0.0, ErrorCode::Config, "noise_var must be positive");
    require(o.locations.size() == v.size(), ErrorCode::Config, "one location per observed value required");
}

nlohmann::json read_json(const fs::path& path) {
    std::ifstream in(path);
    require(static_cast<bool>(in), ErrorCode::Io, "cannot read " + path.string());
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::Config, path.string() + ": " + e.what());
    }
}

void write_json(const fs::path& path, const nlohmann::json& j) {
    ensure_parent(path);
    std::ofstream out(path);
    require(static_cast<bool>(out), ErrorCode::Io, "cannot write " + path.string());
    out << j.dump(2) << '\n';
}

std::string sha256_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    require(static_cast<bool>(in), ErrorCode::Io, "cannot hash " + path.string());
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
    std::vector<char> buf(1 << 16);
    while (in) {
        in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
        EVP_DigestUpdate(ctx, buf.data(), static_cast<std::size_t>(in.gcount()));
    }
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx, digest, &len);
    EVP_MD_CTX_free(ctx);
    std::ostringstream os;
    for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
    return os.str();
}

RunManifest::RunManifest(fs::path dir, std::string command, nlohmann::json config, std::uint64_t seed, int threads)
    : dir_(std::move(dir)), command_(std::move(command)), config_(std::move(config)), seed_(seed), threads_(threads) {
    fs::create_directories(dir_);
}

void RunManifest::add(const std::string& relative) { files_.push_back(relative); }

void RunManifest::write() const {
    nlohmann::json artifacts = nlohmann::json::array();
    for (const auto& f : files_) artifacts.push_back({{"path", f}, {"sha256", sha256_file(dir_ / f)}});
    nlohmann::json j{{"command", command_}, {"config", config_}, {"seed", seed_}, {"threads", threads_},
                     {"created", utc_timestamp()}, {"artifacts", artifacts}};
    for (const auto& [k, v] : extra_.items()) j[k] = v;
    write_json(dir_ / "manifest.json", j);
}

} // namespace mstm
