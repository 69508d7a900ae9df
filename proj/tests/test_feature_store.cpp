#include <cmath>

#include "doctest.h"
#include "mmt/feature_store.hpp"
#include "test_support.hpp"

using namespace mmt;

namespace {

VisualFeatures random_features(std::uint64_t seed) {
  Rng rng(seed);
  return synth_features(seed % 2 ? GenderLabel::male : GenderLabel::female, 0.5, rng);
}

bool bit_equal(const VisualFeatures& a, const VisualFeatures& b) {
  return a.grid.size() == b.grid.size() && a.pooled.size() == b.pooled.size() &&
         std::memcmp(a.grid.data(), b.grid.data(), sizeof(float) * a.grid.size()) == 0 &&
         std::memcmp(a.pooled.data(), b.pooled.data(), sizeof(float) * a.pooled.size()) == 0;
}

}  // namespace

TEST_CASE("synth_features carries the label") {
  Rng rng(3);
  const auto m = synth_features(GenderLabel::male, 0.0, rng);
  const auto f = synth_features(GenderLabel::female, 0.0, rng);
  CHECK(m.grid.rows() == 1024);
  CHECK(m.grid.cols() == 196);
  CHECK(m.pooled.size() == 2048);
  CHECK(m.pooled[0] == 1.0f);
  CHECK(f.pooled[0] == -1.0f);
  CHECK(m.pooled.tail(2047).isZero());
  CHECK((m.grid.row(0).array() == 1.0f).all());
  CHECK((f.grid.row(0).array() == -1.0f).all());
  CHECK(m.grid.bottomRows(1023).isZero());

  // Noise has the requested spread.
  const auto noisy = synth_features(GenderLabel::male, 0.1, rng);
  const double sd = std::sqrt((noisy.pooled.tail(2047).array().square()).mean());
  CHECK(sd == doctest::Approx(0.1).epsilon(0.1));
  CHECK_NOTHROW(noisy.validate());
}

TEST_CASE("validate rejects wrong shapes and non-finite values") {
  auto f = random_features(1);
  f.pooled.resize(10);
  CHECK_THROWS_AS(f.validate(), ShapeError);
  f = random_features(1);
  f.grid(3, 4) = std::nanf("");
  CHECK_THROWS_AS(f.validate(), Error);
}

TEST_CASE("store and load round trip bit-exactly") {
  const auto dir = testing::scratch_dir("store-rt");
  const auto a = random_features(11), b = random_features(12);
  store_features(dir, "img/a b", a);
  store_features(dir, "img-2", b);
  CHECK(bit_equal(load_features(dir, "img/a b"), a));
  CHECK(bit_equal(load_features(dir, "img-2"), b));

  FeatureStore reopened(dir);
  CHECK(reopened.size() == 2);
  CHECK(reopened.contains("img/a b"));
  CHECK(bit_equal(*reopened.get("img-2"), b));
  CHECK(std::filesystem::exists(dir / "features" / "img%2Fa%20b.f32"));
  CHECK(std::filesystem::file_size(dir / "features" / "img-2.f32") == FeatureStore::kRecordBytes);
}

TEST_CASE("missing ids and stores") {
  const auto dir = testing::scratch_dir("store-missing");
  store_features(dir, "x", random_features(1));
  CHECK_THROWS_AS(load_features(dir, "y"), NotFoundError);
  CHECK_THROWS_AS(load_features(dir / "nowhere", "x"), NotFoundError);
}

TEST_CASE("integrity failures are detected") {
  const auto dir = testing::scratch_dir("store-corrupt");
  store_features(dir, "flip", random_features(1));
  store_features(dir, "cut", random_features(2));
  store_features(dir, "gone", random_features(3));
  {
    std::fstream f(dir / "features" / "flip.f32", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(1000);
    f.put('\x7f');
  }
  std::filesystem::resize_file(dir / "features" / "cut.f32", 100);
  std::filesystem::remove(dir / "features" / "gone.f32");
  testing::spit(dir / "features" / "stray.f32", "junk");

  CHECK_THROWS_AS(load_features(dir, "flip"), IntegrityError);
  CHECK_THROWS_AS(load_features(dir, "cut"), IntegrityError);
  CHECK_THROWS_AS(load_features(dir, "gone"), IntegrityError);

  const FeatureStore store(dir);
  const auto v = store.validate({"flip", "cut", "gone", "absent"});
  CHECK_FALSE(v.ok());
  CHECK(v.missing == std::vector<std::string>{"absent"});
  CHECK(v.integrity_errors.size() == 3);
  CHECK(v.orphan_files == std::vector<std::string>{"stray.f32"});
}

TEST_CASE("overwrite replaces the record") {
  const auto dir = testing::scratch_dir("store-overwrite");
  store_features(dir, "x", random_features(1));
  const auto b = random_features(2);
  store_features(dir, "x", b);
  CHECK(bit_equal(load_features(dir, "x"), b));
  CHECK(FeatureStore(dir).size() == 1);
  CHECK(FeatureStore(dir).validate({"x"}).ok());
}

TEST_CASE("storing a malformed record is refused") {
  const auto dir = testing::scratch_dir("store-bad");
  auto f = random_features(1);
  f.grid.resize(10, 10);
  CHECK_THROWS_AS(store_features(dir, "x", f), ShapeError);
}

TEST_CASE("in-memory source") {
  InMemoryFeatures mem;
  mem.put("a", random_features(4));
  CHECK(mem.contains("a"));
  CHECK_THROWS_AS(mem.get("b"), NotFoundError);
}
