#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <set>

#include "mindloop/dataset.hpp"
#include "mindloop/decoder.hpp"
#include "mindloop/errors.hpp"

using namespace mindloop;

namespace {

DatasetConfig small_config() {
  DatasetConfig c;
  c.lvc_voxels = 32;
  c.hvc_voxels = 16;
  c.train_count = 40;
  c.test_count = 10;
  return c;
}

BrainResponse response(std::vector<double> v, std::vector<Roi> labels) {
  const std::size_t n = v.size();
  return {Tensor({n}, std::move(v)), std::move(labels), 1};
}

}  // namespace

TEST_SUITE("dataset") {

TEST_CASE("synthesis is a pure function of config and seed") {
  const auto a = synthesize(small_config(), 7), b = synthesize(small_config(), 7);
  REQUIRE(a.train.size() == b.train.size());
  for (std::size_t i = 0; i < a.train.size(); ++i) {
    CHECK(a.train[i].id == b.train[i].id);
    CHECK(std::ranges::equal(a.train[i].trials.data(), b.train[i].trials.data()));
    CHECK(std::ranges::equal(a.train[i].image.pixels.data(), b.train[i].image.pixels.data()));
    CHECK(a.train[i].image.caption_tokens == b.train[i].image.caption_tokens);
  }
  const auto c = synthesize(small_config(), 8);
  CHECK_FALSE(std::ranges::equal(a.train[0].trials.data(), c.train[0].trials.data()));
}

TEST_CASE("default config seed 7 is reproducible on disk") {
  const auto a = synthesize(DatasetConfig{}, 7);
  const auto dir = std::filesystem::temp_directory_path() / "mindloop_tests" / "ds_default";
  std::filesystem::remove_all(dir);
  save_dataset(a, dir);
  const auto b = load_dataset(dir);
  CHECK(b.seed == 7);
  CHECK(b.roi_labels == a.roi_labels);
  REQUIRE(b.test.size() == a.test.size());
  for (std::size_t i = 0; i < a.test.size(); ++i) {
    CHECK(std::ranges::equal(a.test[i].trials.data(), b.test[i].trials.data()));
    CHECK(std::ranges::equal(a.test[i].image.pixels.data(), b.test[i].image.pixels.data()));
    CHECK(a.test[i].image.class_id == b.test[i].image.class_id);
  }
}

TEST_CASE("record invariants") {
  const auto d = synthesize(small_config(), 3);
  CHECK(d.train.size() == 40);
  CHECK(d.test.size() == 10);
  CHECK(d.voxel_count() == 48);
  std::set<std::string> ids;
  for (const auto& r : d.train) ids.insert(r.id);
  for (const auto& r : d.test) CHECK(ids.count(r.id) == 0);
  for (const auto* split : {&d.train, &d.test})
    for (const auto& r : *split) {
      for (double p : r.image.pixels.data()) {
        CHECK(p >= 0.0);
        CHECK(p <= 1.0);
      }
      CHECK(r.image.caption_tokens.size() <= d.config.max_tokens);
      CHECK(r.trials.dim(0) >= 1);
      CHECK(r.trials.dim(0) <= 3);
      CHECK(r.trials.dim(1) == d.voxel_count());
    }
  // Disjoint stimuli, not just disjoint ids.
  for (const auto& t : d.test)
    for (const auto& r : d.train) CHECK_FALSE(std::ranges::equal(t.image.pixels.data(), r.image.pixels.data()));
}

TEST_CASE("degenerate configs are rejected") {
  auto c = small_config();
  c.num_classes = 1;
  CHECK_THROWS_AS(synthesize(c, 1), ConfigError);
  c = small_config();
  c.lvc_voxels = 0;
  CHECK_THROWS_AS(synthesize(c, 1), ConfigError);
  c = small_config();
  c.test_count = 0;
  CHECK_THROWS_AS(synthesize(c, 1), ConfigError);
  c = small_config();
  c.image_size = 8;
  CHECK_THROWS_AS(synthesize(c, 1), ConfigError);
}

TEST_CASE("noiseless responses depend only on the stimulus") {
  auto c = small_config();
  c.noise = 0.0;
  c.max_trials = 3;
  c.min_trials = 3;
  const auto d = synthesize(c, 5);
  for (const auto& r : d.train) {
    const auto trials = r.responses(d.roi_labels);
    for (std::size_t t = 1; t < trials.size(); ++t)
      CHECK(std::ranges::equal(trials[0].voxels.data(), trials[t].voxels.data()));
  }
}

TEST_CASE("LVC voxels track their noiseless projection at noise 0.1") {
  auto clean = small_config(), noisy = small_config();
  clean.noise = 0.0;
  noisy.train_count = clean.train_count = 200;
  const auto a = synthesize(clean, 9), b = synthesize(noisy, 9);
  for (std::size_t v = 0; v < clean.lvc_voxels; ++v) {
    std::vector<double> x, y;
    for (std::size_t i = 0; i < a.train.size(); ++i) {
      x.push_back(a.train[i].trials[v]);
      y.push_back(b.train[i].trials[v]);
    }
    CHECK(pearson(x, y).r > 0.9);
  }
}

TEST_CASE("average_trials") {
  const std::vector<Roi> labels{Roi::LVC, Roi::LVC, Roi::HVC};
  const auto one = response({1, -2, 3}, labels);
  const auto avg1 = average_trials(std::vector{one});
  CHECK(std::ranges::equal(avg1.voxels.data(), one.voxels.data()));
  CHECK(avg1.trial_count == 1);

  const auto neg = response({-1, 2, -3}, labels);
  const auto zero = average_trials(std::vector{one, neg});
  for (double v : zero.voxels.data()) CHECK(v == 0.0);
  CHECK(zero.trial_count == 2);

  Rng rng(2);
  std::vector<BrainResponse> three;
  for (int i = 0; i < 3; ++i) three.push_back({Tensor::randn({3}, rng), labels, 1});
  const auto avg = average_trials(three);
  for (std::size_t j = 0; j < 3; ++j) {
    double s = 0.0;
    for (const auto& r : three) s += r.voxels[j];
    CHECK(avg.voxels[j] == s / 3.0);
  }

  CHECK_THROWS_AS(average_trials(std::vector<BrainResponse>{}), ContractError);
  CHECK_THROWS_AS(average_trials(std::vector{one, response({1, 2}, {Roi::LVC, Roi::HVC})}), ContractError);
}

TEST_CASE("averaging three trials shrinks residual noise") {
  auto clean = small_config(), noisy = small_config();
  clean.noise = 0.0;
  clean.train_count = noisy.train_count = 100;
  clean.min_trials = clean.max_trials = noisy.min_trials = noisy.max_trials = 3;
  const auto a = synthesize(clean, 4), b = synthesize(noisy, 4);
  double var1 = 0.0, var3 = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < 100; ++i) {
    const auto trials = b.train[i].responses(b.roi_labels);
    const auto avg = average_trials(trials);
    for (std::size_t v = 0; v < b.voxel_count(); ++v) {
      const double s = a.train[i].trials[v];
      var1 += (trials[0].voxels[v] - s) * (trials[0].voxels[v] - s);
      var3 += (avg.voxels[v] - s) * (avg.voxels[v] - s);
      ++n;
    }
  }
  CHECK(var3 / static_cast<double>(n) < var1 / static_cast<double>(n));
}

TEST_CASE("roi_subset") {
  std::vector<Roi> labels(10, Roi::LVC);
  labels.insert(labels.end(), 5, Roi::HVC);
  // Interleave to check order preservation.
  std::swap(labels[2], labels[12]);
  std::vector<double> v(15);
  for (std::size_t i = 0; i < 15; ++i) v[i] = static_cast<double>(i);
  const auto r = response(v, labels);

  const auto all = roi_subset(r, RoiSet::all());
  CHECK(std::ranges::equal(all.voxels.data(), r.voxels.data()));
  const auto lvc = roi_subset(r, RoiSet::only(Roi::LVC));
  const auto hvc = roi_subset(r, RoiSet::only(Roi::HVC));
  CHECK(lvc.voxels.size() == 10);
  CHECK(hvc.voxels.size() == 5);
  CHECK(std::ranges::is_sorted(lvc.voxels.data()));
  CHECK(std::ranges::is_sorted(hvc.voxels.data()));
  for (auto l : lvc.roi_labels) CHECK(l == Roi::LVC);

  std::vector<double> joined(lvc.voxels.data().begin(), lvc.voxels.data().end());
  joined.insert(joined.end(), hvc.voxels.data().begin(), hvc.voxels.data().end());
  CHECK(std::ranges::is_permutation(joined, v));

  CHECK_THROWS_AS(roi_subset(r, RoiSet{false, false}), ContractError);
}

TEST_CASE("roi parsing") {
  CHECK(RoiSet::parse("lvc").contains(Roi::LVC));
  CHECK_FALSE(RoiSet::parse("lvc").contains(Roi::HVC));
  CHECK(RoiSet::parse("all").name() == "all");
  CHECK_THROWS_AS(RoiSet::parse("v1"), ConfigError);
}

TEST_CASE("captions use the fixed vocabulary") {
  const auto d = synthesize(small_config(), 1);
  for (const auto& r : d.train) {
    const std::string text = vocabulary::caption_text(r.image.caption_tokens);
    CHECK(text.find(vocabulary::class_name(r.image.class_id)) != std::string::npos);
  }
  CHECK_THROWS_AS(vocabulary::token("purple-ish"), ContractError);
}

TEST_CASE("loader rejects malformed directories") {
  const auto dir = std::filesystem::temp_directory_path() / "mindloop_tests" / "no_dataset";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  CHECK_THROWS_AS(load_dataset(dir), FormatError);
}

}  // TEST_SUITE
