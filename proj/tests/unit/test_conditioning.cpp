#include <cmath>
#include <filesystem>
#include <map>
#include <random>

#include "doctest.h"
#include "latentseg/conditioning.hpp"
#include "latentseg/episode_engine.hpp"
#include "latentseg/errors.hpp"
#include "support/gradcheck.hpp"

using namespace latentseg;
using testing::random_vector;

namespace {

SliceImage random_image(int h, int w, std::mt19937_64& rng) {
  SliceImage img(h, w);
  std::uniform_real_distribution<double> u(0, 1);
  for (auto& v : img.pixels) v = u(rng);
  return img;
}

FeatureMap random_features(int d, int h, int w, std::mt19937_64& rng) {
  FeatureMap f({1, d, h, w});
  f.data = random_vector(f.size(), rng);
  return f;
}

double cosine(const Prototype& a, const Prototype& b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) ab += a[i] * b[i], aa += a[i] * a[i], bb += b[i] * b[i];
  return ab / std::sqrt(aa * bb);
}

}  // namespace

TEST_CASE("vision features are deterministic with the expected grid") {
  std::mt19937_64 rng(31);
  const VisionEncoder encoder;
  const SliceImage img = random_image(64, 64, rng);
  const FeatureMap a = extract_features(img, encoder);
  CHECK(a.shape == std::vector<int>{1, 192, 8, 8});
  CHECK(extract_features(img, encoder) == a);
  CHECK(extract_features(img, VisionEncoder{}) == a);
  for (double v : a.data) CHECK(std::isfinite(v));
  CHECK_THROWS_AS(extract_features(random_image(60, 64, rng), encoder), ShapeError);
}

TEST_CASE("feature sidecar files round-trip and enforce the declared shape") {
  std::mt19937_64 rng(32);
  const FeatureMap f = random_features(6, 2, 3, rng);
  const auto path = (std::filesystem::temp_directory_path() / "latentseg_features.bin").string();
  write_feature_file(path, f);
  const FeatureMap back = read_feature_file(path, 6, 2, 3);
  REQUIRE(back.shape == f.shape);
  for (std::size_t i = 0; i < f.size(); ++i) CHECK(back.data[i] == static_cast<float>(f.data[i]));
  CHECK_THROWS_AS(read_feature_file(path, 192, 8, 8), ShapeError);
}

TEST_CASE("visual prototype pooling on hand examples") {
  FeatureMap f({1, 3, 1, 2});
  f.data = {1, 5, 3, 7, 2, 4};
  BinaryMask m(1, 2);
  m.pixels = {0, 1};
  CHECK(pool_visual_prototype(f, m) == Prototype{5, 7, 4});
  m.pixels = {1, 1};
  CHECK(pool_visual_prototype(f, m) == Prototype{3, 5, 3});
  m.pixels = {0, 0};
  CHECK_THROWS_AS(pool_visual_prototype(f, m), EmptyMaskError);
}

TEST_CASE("full-mask pooling is the spatial mean and pooling is linear") {
  std::mt19937_64 rng(33);
  for (int trial = 0; trial < 10; ++trial) {
    const FeatureMap f = random_features(16, 8, 8, rng), g = random_features(16, 8, 8, rng);
    BinaryMask full(64, 64);
    std::fill(full.pixels.begin(), full.pixels.end(), 1);
    const Prototype p = pool_visual_prototype(f, full);
    for (int d = 0; d < 16; ++d) {
      double sum = 0;
      for (int i = 0; i < 64; ++i) sum += f.data[d * 64 + i];
      CHECK(p[d] == doctest::Approx(sum / 64).epsilon(1e-12));
    }
    BinaryMask m(8, 8);
    std::bernoulli_distribution b(0.3);
    for (auto& v : m.pixels) v = b(rng);
    m.pixels[5] = 1;
    const double alpha = 0.7, beta = -1.3;
    FeatureMap mix = f;
    for (std::size_t i = 0; i < mix.size(); ++i) mix.data[i] = alpha * f.data[i] + beta * g.data[i];
    const Prototype pm = pool_visual_prototype(mix, m), pf = pool_visual_prototype(f, m), pg = pool_visual_prototype(g, m);
    for (int d = 0; d < 16; ++d) CHECK(pm[d] == doctest::Approx(alpha * pf[d] + beta * pg[d]).epsilon(1e-9));
  }
}

TEST_CASE("constant-feature region gives the constant regardless of size") {
  FeatureMap f({1, 2, 4, 4});
  for (int i = 0; i < 16; ++i) f.data[i] = 2.5, f.data[16 + i] = -1.0;
  for (int size = 1; size <= 4; ++size) {
    BinaryMask m(4, 4);
    for (int r = 0; r < size; ++r) {
      for (int c = 0; c < size; ++c) m.at(r, c) = 1;
    }
    CHECK(pool_visual_prototype(f, m) == Prototype{2.5, -1.0});
  }
}

TEST_CASE("prototype averaging over shots") {
  CHECK(average_prototypes({{1, 2}, {3, 6}}) == Prototype{2, 4});
  CHECK_THROWS_AS(average_prototypes({}), ShapeError);
  CHECK_THROWS_AS(average_prototypes({{1}, {1, 2}}), ShapeError);
}

TEST_CASE("projector shape, zero propagation and gradients") {
  std::mt19937_64 rng(34);
  Projector<double> proj(192, 256, 256, rng);
  const Tensor e = project_to_condition(random_vector(192, rng), proj);
  CHECK(e.shape == std::vector<int>{1, 1, 256});
  CHECK_THROWS_AS(project_to_condition(Prototype(10, 0.0), proj), ShapeError);

  for (auto& v : proj.fc1.bias.mutable_value()) v = 0;
  for (auto& v : proj.fc2.bias.mutable_value()) v = 0;
  for (double v : project_to_condition(Prototype(192, 0.0), proj).data) CHECK(v == 0.0);

  Projector<double> small(6, 5, 4, rng);
  nn::ParamList<double> params;
  small.collect("proj", params);
  auto p = nn::Var<double>::constant({1, 6}, random_vector(6, rng, -2, 2));
  const auto w = random_vector(4, rng);
  const auto r = testing::gradcheck(
      params, [&] { return nn::weighted_sum(small(p), std::span<const double>(w)); }, 0, rng);
  CHECK_MESSAGE(r.max_rel_error < 1e-4, r.worst);
}

TEST_CASE("frozen features separate classes on the synthetic corpus") {
  CorpusSpec spec;
  spec.samples_per_class = 4;
  spec.finalize();
  const Dataset ds = generate_synthetic_corpus(spec);
  const VisionEncoder encoder;
  std::map<int, std::vector<Prototype>> protos;
  for (const auto& vol : ds) {
    const std::size_t k = vol.num_slices() / 2;
    const FeatureMap f = extract_features(vol.slices[k], encoder);
    for (int cls : vol.class_ids) {
      try {
        protos[cls].push_back(pool_visual_prototype(f, vol.mask(cls, k)));
      } catch (const EmptyMaskError&) {
      }
    }
  }
  double within = 0, between = 0;
  int nw = 0, nb = 0;
  for (const auto& [ca, pa] : protos) {
    for (const auto& [cb, pb] : protos) {
      for (const auto& a : pa) {
        for (const auto& b : pb) {
          if (&a == &b) continue;
          (ca == cb ? within : between) += cosine(a, b);
          ++(ca == cb ? nw : nb);
        }
      }
    }
  }
  CHECK(within / nw > between / nb);
}
