#include <doctest.h>

#include <filesystem>
#include <cstring>
#include <fstream>

#include <unistd.h>

#include "mstm/error.hpp"
#include "mstm/io.hpp"

using namespace mstm;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() : path(fs::temp_directory_path() / ("mstm_io_" + std::to_string(::getpid()))) {
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

} // namespace

TEST_CASE("sample matrices round-trip bit for bit") {
    TempDir tmp;
    Eigen::MatrixXd m(3, 2);
    m << 1.0, -2.5, 1e-300, 3.14159265358979, -0.0, 7e12;
    write_sample_matrix(tmp.path / "s", m, {"a", "b"}, 42);
    SampleMatrixHeader h;
    const Eigen::MatrixXd r = read_sample_matrix(tmp.path / "s", &h);
    CHECK(h.rows == 3);
    CHECK(h.cols == 2);
    CHECK(h.seed == 42);
    CHECK(h.column_names == std::vector<std::string>{"a", "b"});
    CHECK(!h.created.empty());
    CHECK(std::memcmp(r.data(), m.data(), sizeof(double) * 6) == 0);
    CHECK(fs::file_size(tmp.path / "s.bin") == 3 * 2 * 8);
}

TEST_CASE("payload is row-major little-endian float64") {
    TempDir tmp;
    Eigen::MatrixXd m(1, 2);
    m << 1.0, 2.0;
    write_sample_matrix(tmp.path / "e", m);
    std::ifstream in(tmp.path / "e.bin", std::ios::binary);
    unsigned char b[16];
    in.read(reinterpret_cast<char*>(b), 16);
    const unsigned char one[8] = {0, 0, 0, 0, 0, 0, 0xF0, 0x3F};
    const unsigned char two[8] = {0, 0, 0, 0, 0, 0, 0x00, 0x40};
    CHECK(std::memcmp(b, one, 8) == 0);
    CHECK(std::memcmp(b + 8, two, 8) == 0);
}

TEST_CASE("truncated payloads and missing files are reported") {
    TempDir tmp;
    write_sample_matrix(tmp.path / "t", Eigen::MatrixXd::Ones(4, 4));
    fs::resize_file(tmp.path / "t.bin", 40);
    CHECK_THROWS_AS(read_sample_matrix(tmp.path / "t"), Error);
    CHECK_THROWS_AS(read_sample_matrix(tmp.path / "missing"), Error);
    CHECK_THROWS_AS(write_sample_matrix(tmp.path / "n", Eigen::MatrixXd::Ones(2, 2), {"only_one"}), Error);
}

TEST_CASE("SHA-256 of a known message") {
    TempDir tmp;
    std::ofstream(tmp.path / "abc") << "abc";
    CHECK(sha256_file(tmp.path / "abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST_CASE("manifest lists artifacts with hashes and the config echo") {
    TempDir tmp;
    RunManifest man(tmp.path / "run", "toy", {{"K", 10}}, 9, 2);
    std::ofstream(man.path("x.txt")) << "abc";
    man.add("x.txt");
    man.set("note", "hello");
    man.write();
    const auto j = read_json(tmp.path / "run" / "manifest.json");
    CHECK(j.at("command") == "toy");
    CHECK(j.at("seed") == 9);
    CHECK(j.at("threads") == 2);
    CHECK(j.at("config").at("K") == 10);
    CHECK(j.at("artifacts")[0].at("sha256") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    CHECK(j.at("note") == "hello");
}

TEST_CASE("observation files validate their contents") {
    Observations o;
    o.locations = {{0.1}, {0.2}};
    o.values = Eigen::Vector2d(1.0, 2.0);
    o.noise_var = 1e-4;
    const nlohmann::json j = o;
    const auto back = j.get<Observations>();
    CHECK(back.values == o.values);
    nlohmann::json bad = j;
    bad["noise_var"] = 0.0;
    CHECK_THROWS_AS(bad.get<Observations>(), Error);
    bad = j;
    bad["values"] = {1.0};
    CHECK_THROWS_AS(bad.get<Observations>(), Error);
}

TEST_CASE("malformed JSON is a config error") {
    TempDir tmp;
    std::ofstream(tmp.path / "bad.json") << "{ not json";
    try {
        read_json(tmp.path / "bad.json");
        FAIL("expected failure");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::Config);
    }
}
