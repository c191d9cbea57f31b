#include "doctest.h"

#include "osd/dataset.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>

using namespace osd;
using namespace osd::io;

namespace {

std::filesystem::path tmp(const char* name) {
  const auto dir = std::filesystem::temp_directory_path() / "osd_test_dataset";
  std::filesystem::create_directories(dir);
  return dir / name;
}

Dataset random_dataset(std::size_t n, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 100.0);
  Dataset d;
  d.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (int j = 0; j < kStateDim; ++j) d.X(i, j) = g(rng);
    d.u[i] = g(rng);
  }
  return d;
}

}  // namespace

TEST_CASE("write/read round trip is bitwise") {
  const auto d = random_dataset(10007, 1);
  const auto p = tmp("rt.osd");
  write_dataset(p, d);
  CHECK(std::filesystem::file_size(p) == 32 + 10007 * 72);
  CHECK(dataset_record_count(p) == 10007);
  const auto r = read_dataset(p);
  REQUIRE(r.size() == d.size());
  CHECK(std::memcmp(r.X.data(), d.X.data(), sizeof(double) * d.X.size()) == 0);
  CHECK(std::memcmp(r.u.data(), d.u.data(), sizeof(double) * d.u.size()) == 0);
}

TEST_CASE("empty dataset") {
  const auto p = tmp("empty.osd");
  write_dataset(p, Dataset{});
  CHECK(std::filesystem::file_size(p) == 32);
  CHECK(read_dataset(p).size() == 0);
}

TEST_CASE("header layout") {
  const auto p = tmp("hdr.osd");
  write_dataset(p, random_dataset(3, 2));
  std::ifstream in(p, std::ios::binary);
  unsigned char h[32];
  in.read(reinterpret_cast<char*>(h), 32);
  CHECK(std::string(reinterpret_cast<char*>(h), 4) == "OSD1");
  std::uint32_t version, dim;
  std::uint64_t count;
  std::memcpy(&version, h + 4, 4);
  std::memcpy(&dim, h + 8, 4);
  std::memcpy(&count, h + 12, 8);
  CHECK(version == 1);
  CHECK(dim == 8);
  CHECK(count == 3);
}

TEST_CASE("corruption is detected") {
  const auto p = tmp("bad.osd");
  write_dataset(p, random_dataset(5, 3));
  SUBCASE("magic") {
    std::fstream f(p, std::ios::in | std::ios::out | std::ios::binary);
    f.put('X');
    f.close();
    CHECK_THROWS_AS(read_dataset(p), IoError);
  }
  SUBCASE("truncation") {
    std::filesystem::resize_file(p, 32 + 4 * 72 + 10);
    CHECK_THROWS_AS(read_dataset(p), IoError);
  }
  SUBCASE("missing file") { CHECK_THROWS_AS(read_dataset(tmp("nope.osd")), IoError); }
}

TEST_CASE("push_back and from_pairs agree") {
  std::vector<DataPair> pairs;
  Dataset d;
  for (int i = 0; i < 10; ++i) {
    DataPair p;
    p.x.setConstant(i);
    p.u = -i;
    pairs.push_back(p);
    d.push_back(p);
  }
  const auto e = Dataset::from_pairs(pairs);
  CHECK(d.X == e.X);
  CHECK(d.u == e.u);
  CHECK(d[4].u == -4);
}
