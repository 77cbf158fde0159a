#include <catch2/catch_amalgamated.hpp>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "mffm/container.hpp"

using namespace mffm;

namespace {

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("container round-trips arrays bitwise") {
    ArrayContainer c;
    std::vector<double> a(3 * 16 * 16);
    for (size_t i = 0; i < a.size(); ++i) a[i] = std::sin(0.1 * i) * 1e-3;
    c.add_f64("fields/a", {3, 16, 16}, a.data());
    std::vector<double> b = {1.5, -2.25, 1e30};
    c.add_f32("b", {3}, b.data());
    unsigned char img[4] = {0, 128, 200, 255};
    c.add_u8("img", {2, 2}, img);
    c.metadata = "build = test\nkey = value\n";

    const std::string path = temp_path("mffm_container_test.mffm");
    c.save(path);
    ArrayContainer r = ArrayContainer::load(path);

    REQUIRE(r.metadata == c.metadata);
    REQUIRE(r.get("fields/a").raw == c.get("fields/a").raw);
    REQUIRE(r.get("fields/a").as_doubles() == a);
    REQUIRE(r.get("b").dtype == Dtype::f32);
    REQUIRE(r.get("b").as_doubles()[0] == Catch::Approx(1.5));
    REQUIRE(r.get("img").raw == c.get("img").raw);
    REQUIRE(r.content_hash() == c.content_hash());
    std::filesystem::remove(path);
}

TEST_CASE("empty container round-trips") {
    ArrayContainer c;
    c.metadata = "nothing here";
    const std::string path = temp_path("mffm_container_empty.mffm");
    c.save(path);
    ArrayContainer r = ArrayContainer::load(path);
    REQUIRE(r.entries().empty());
    REQUIRE(r.metadata == "nothing here");
    std::filesystem::remove(path);
}

TEST_CASE("container rejects bad magic") {
    const std::string path = temp_path("mffm_container_bad.mffm");
    {
        std::ofstream out(path, std::ios::binary);
        out << "NOPE" << std::string(32, '\0');
    }
    REQUIRE_THROWS_AS(ArrayContainer::load(path), format_error);
    std::filesystem::remove(path);
}

TEST_CASE("container rejects truncation") {
    ArrayContainer c;
    std::vector<double> a(64, 1.0);
    c.add_f64("a", {64}, a.data());
    const std::string path = temp_path("mffm_container_trunc.mffm");
    c.save(path);
    const auto full = std::filesystem::file_size(path);
    std::filesystem::resize_file(path, full - 40);
    REQUIRE_THROWS_AS(ArrayContainer::load(path), format_error);
    std::filesystem::remove(path);
}

TEST_CASE("container rejects duplicate names") {
    ArrayContainer c;
    double x = 1.0;
    c.add_f64("dup", {1}, &x);
    REQUIRE_THROWS_AS(c.add_f64("dup", {1}, &x), format_error);
}
