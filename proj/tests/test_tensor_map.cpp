#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "doctest.h"
#include "ewr/error.hpp"
#include "ewr/tensor_map.hpp"
#include "test_util.hpp"

using namespace ewr;
using testutil::make_map;

namespace {

std::string read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
}

void write_bytes(const std::filesystem::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), bytes.size());
}

}  // namespace

TEST_CASE("save/load round-trip is exact") {
  testutil::TempDir dir("store_roundtrip");
  store::TensorMap map = make_map({{"w", {1.0f, 2.0f}}, {"v", {3.5f, -1.25f, 0.0f}}});
  map.set_metadata("role", "base");
  auto path = dir.path / "map.safetensors";
  store::save(map, path);
  store::TensorMap loaded = store::load(path);
  CHECK(store::bitwise_equal(map, loaded));
  CHECK(loaded.at("w").data == std::vector<float>{1.0f, 2.0f});

  // save(load(f)) is byte identical
  auto path2 = dir.path / "map2.safetensors";
  store::save(loaded, path2);
  CHECK(read_bytes(path) == read_bytes(path2));
}

TEST_CASE("empty map valid and deterministic") {
  testutil::TempDir dir("store_empty");
  store::TensorMap empty;
  auto path = dir.path / "empty.safetensors";
  store::save(empty, path);
  store::TensorMap loaded = store::load(path);
  CHECK(loaded.empty());
  // empty fingerprint is a fixed constant (sha256 of the empty stream)
  CHECK(store::fingerprint(empty) ==
        "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}

TEST_CASE("declared shape larger than buffer is a truncated-buffer error") {
  testutil::TempDir dir("store_trunc");
  // header declares shape [2,2] but buffer holds only 3 floats
  std::string header =
      R"({"w":{"dtype":"F32","shape":[2,2],"data_offsets":[0,16]}})";
  std::string file;
  std::uint64_t len = header.size();
  file.append(reinterpret_cast<const char*>(&len), 8);
  file += header;
  file.append(12, '\0');  // 3 floats
  auto path = dir.path / "bad.safetensors";
  write_bytes(path, file);
  CHECK_THROWS_WITH_AS(store::load(path), doctest::Contains("w"), Error);
  try {
    store::load(path);
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::truncated_buffer);
  }
}

TEST_CASE("malformed header variants") {
  testutil::TempDir dir("store_malformed");
  auto path = dir.path / "bad.safetensors";

  write_bytes(path, "abc");  // shorter than the length field
  CHECK_THROWS_AS(store::load(path), Error);

  std::string bogus = "{not json";
  std::string file;
  std::uint64_t len = bogus.size();
  file.append(reinterpret_cast<const char*>(&len), 8);
  file += bogus;
  write_bytes(path, file);
  try {
    store::load(path);
    CHECK(false);
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::malformed_header);
  }
}

TEST_CASE("duplicate tensor names rejected") {
  testutil::TempDir dir("store_dup");
  std::string header =
      R"({"w":{"dtype":"F32","shape":[1],"data_offsets":[0,4]},)"
      R"("w":{"dtype":"F32","shape":[1],"data_offsets":[4,8]}})";
  std::string file;
  std::uint64_t len = header.size();
  file.append(reinterpret_cast<const char*>(&len), 8);
  file += header;
  file.append(8, '\0');
  auto path = dir.path / "dup.safetensors";
  write_bytes(path, file);
  try {
    store::load(path);
    CHECK(false);
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::duplicate_name);
    CHECK(std::string(e.what()).find("w") != std::string::npos);
  }
}

TEST_CASE("non-finite values rejected unless flagged") {
  store::TensorMap map;
  store::Tensor t;
  t.shape = {2};
  t.data = {1.0f, std::nanf("")};
  CHECK_THROWS_AS(map.set("w", t), Error);

  store::TensorMap allowed;
  allowed.set_metadata(store::kAllowNonFiniteKey, "1");
  allowed.set("w", t);  // no throw
  CHECK(allowed.size() == 1);

  // save refuses a NaN smuggled in after the fact
  testutil::TempDir dir("store_nan");
  store::TensorMap sneaky;
  sneaky.set_metadata(store::kAllowNonFiniteKey, "1");
  sneaky.set("w", t);
  sneaky.metadata().erase(store::kAllowNonFiniteKey);
  CHECK_THROWS_AS(store::save(sneaky, dir.path / "nan.safetensors"), Error);
}

TEST_CASE("align reports") {
  store::TensorMap a = make_map({{"w", {1, 2}}});
  store::TensorMap b = make_map({{"w", {3, 4}}, {"v", {5}}});

  SUBCASE("identical maps are clean") {
    auto r = store::align(a, a);
    CHECK(r.mergeable());
    CHECK(r.shared_names == std::vector<std::string>{"w"});
  }
  SUBCASE("extra tensor shows in only_in_b") {
    auto r = store::align(a, b);
    CHECK_FALSE(r.mergeable());
    CHECK(r.only_in_b == std::vector<std::string>{"v"});
    CHECK(r.only_in_a.empty());
  }
  SUBCASE("shape mismatch is flagged and stays in shared") {
    store::TensorMap c = make_map({{"w", {1, 2, 3}}});
    auto r = store::align(a, c);
    CHECK(r.shape_mismatches.size() == 1);
    CHECK(r.shape_mismatches[0].name == "w");
    CHECK(r.shared_names == std::vector<std::string>{"w"});
    CHECK_FALSE(r.mergeable());
  }
}

TEST_CASE("mergeability is transitive over clean alignments") {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    store::TensorMap a = testutil::random_map(rng, 8);
    store::TensorMap b = testutil::random_map(rng, 8);
    store::TensorMap c = testutil::random_map(rng, 8);
    bool ab = store::align(a, b).mergeable();
    bool bc = store::align(b, c).mergeable();
    bool ac = store::align(a, c).mergeable();
    if (ab && bc) CHECK(ac);
  }
}

TEST_CASE("fingerprint ignores metadata, tracks content") {
  store::TensorMap a = make_map({{"w", {1.0f, 2.0f}}});
  store::TensorMap b = make_map({{"w", {1.0f, 2.0f}}});
  b.set_metadata("role", "expert");
  CHECK(store::fingerprint(a) == store::fingerprint(b));

  // flip one mantissa bit
  store::TensorMap c;
  store::Tensor t = a.at("w");
  std::uint32_t bits;
  std::memcpy(&bits, &t.data[0], 4);
  bits ^= 1u;
  std::memcpy(&t.data[0], &bits, 4);
  c.set("w", t);
  CHECK(store::fingerprint(a) != store::fingerprint(c));
}

TEST_CASE("atomic save leaves no temp file") {
  testutil::TempDir dir("store_atomic");
  store::TensorMap map = make_map({{"w", {1.0f}}});
  store::save(map, dir.path / "out.safetensors");
  int files = 0;
  for ([[maybe_unused]] auto& entry :
       std::filesystem::directory_iterator(dir.path))
    ++files;
  CHECK(files == 1);
}
