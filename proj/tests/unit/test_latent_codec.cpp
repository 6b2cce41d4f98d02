#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>

#include "doctest.h"
#include "latentseg/container.hpp"
#include "latentseg/errors.hpp"
#include "latentseg/latent_codec.hpp"
#include "support/gradcheck.hpp"

using namespace latentseg;
namespace fs = std::filesystem;

namespace {

SliceImage random_image(int h, int w, std::mt19937_64& rng) {
  SliceImage img(h, w);
  std::uniform_real_distribution<double> u(0, 1);
  for (auto& v : img.pixels) v = u(rng);
  return img;
}

fs::path temp_path(const std::string& name) {
  auto dir = fs::temp_directory_path() / "latentseg_codec_test";
  fs::create_directories(dir);
  return dir / name;
}

// Direct 2D windowed SSIM, no separability.
double ssim_oracle(const SliceImage& a, const SliceImage& b) {
  double g[11][11], total = 0;
  for (int i = 0; i < 11; ++i) {
    for (int j = 0; j < 11; ++j) {
      g[i][j] = std::exp(-((i - 5) * (i - 5) + (j - 5) * (j - 5)) / (2 * 1.5 * 1.5));
      total += g[i][j];
    }
  }
  double acc = 0;
  int count = 0;
  for (int r = 0; r + 11 <= a.height; ++r) {
    for (int c = 0; c + 11 <= a.width; ++c) {
      double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
      for (int i = 0; i < 11; ++i) {
        for (int j = 0; j < 11; ++j) {
          const double wgt = g[i][j] / total, x = a.at(r + i, c + j), y = b.at(r + i, c + j);
          ma += wgt * x, mb += wgt * y, saa += wgt * x * x, sbb += wgt * y * y, sab += wgt * x * y;
        }
      }
      const double c1 = 1e-4, c2 = 9e-4;
      acc += (2 * ma * mb + c1) * (2 * (sab - ma * mb) + c2) /
             ((ma * ma + mb * mb + c1) * (saa - ma * ma + sbb - mb * mb + c2));
      ++count;
    }
  }
  return acc / count;
}

Dataset tiny_corpus() {
  CorpusSpec spec;
  spec.num_classes = 2;
  spec.samples_per_class = 2;
  spec.slices_per_volume = 4;
  spec.image_height = spec.image_width = 32;
  spec.min_radius = 5;
  spec.max_radius = 6;
  spec.finalize();
  return generate_synthetic_corpus(spec);
}

}  // namespace

TEST_CASE("pseudo-rgb maps endpoints and midpoint and replicates channels") {
  SliceImage img(1, 3);
  img.pixels = {0.0, 1.0, 0.5};
  const Tensor t = to_pseudo_rgb(img);
  REQUIRE(t.shape == std::vector<int>{3, 1, 3});
  for (int ch = 0; ch < 3; ++ch) {
    CHECK(t.data[ch * 3 + 0] == -1.0);
    CHECK(t.data[ch * 3 + 1] == 1.0);
    CHECK(t.data[ch * 3 + 2] == 0.0);
  }
  img.pixels[1] = 1.0001;
  CHECK_THROWS_AS(to_pseudo_rgb(img), DomainError);
  img.pixels[1] = std::nan("");
  CHECK_THROWS_AS(to_pseudo_rgb(img), DomainError);
}

TEST_CASE("channel averaging inverts replication exactly") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const SliceImage img = random_image(5, 7, rng);
    const Tensor avg = average_channels(to_pseudo_rgb(img));
    for (std::size_t i = 0; i < img.size(); ++i) CHECK(avg.data[i] == 2 * img.pixels[i] - 1);
  }
  Tensor t({3, 1, 3});
  t.data = {0.2, -1, 0.7, 0.4, 0, 0.7, 0.6, 1, 0.7};
  const Tensor avg = average_channels(t);
  CHECK(avg.data[0] == doctest::Approx(0.4));
  CHECK(avg.data[1] == 0.0);
  CHECK(avg.data[2] == doctest::Approx(0.7));
  CHECK_THROWS_AS(average_channels(Tensor({2, 2, 2})), ShapeError);
}

TEST_CASE("binarize uses a strict threshold and is idempotent") {
  Tensor s({1, 3});
  s.data = {0.3, -0.3, 0.0};
  const BinaryMask m = binarize(s);
  CHECK(m.pixels == std::vector<std::uint8_t>{1, 0, 0});
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> u(-2, 2);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor score({6, 6});
    for (auto& v : score.data) v = u(rng);
    const double t = u(rng) * 0.5;
    const BinaryMask first = binarize(score, t);
    Tensor coded({6, 6});
    for (std::size_t i = 0; i < coded.size(); ++i) coded.data[i] = first.pixels[i] ? 1.0 : -1.0;
    CHECK(binarize(coded, 0.0) == first);
  }
}

TEST_CASE("reconstruction metrics on identical and offset images") {
  std::mt19937_64 rng(13);
  SliceImage img = random_image(24, 24, rng);
  for (auto& v : img.pixels) v *= 0.8;
  const ReconMetrics same = reconstruction_metrics(img, img);
  CHECK(same.mse == 0.0);
  CHECK(same.psnr == std::numeric_limits<double>::infinity());
  CHECK(same.ssim == doctest::Approx(1.0).epsilon(1e-12));

  SliceImage shifted = img;
  for (auto& v : shifted.pixels) v += 0.1;
  const ReconMetrics off = reconstruction_metrics(img, shifted);
  CHECK(off.mse == doctest::Approx(0.01).epsilon(1e-9));
  CHECK(off.psnr == doctest::Approx(20.0).epsilon(1e-9));
}

TEST_CASE("ssim matches a direct windowed oracle and is symmetric") {
  std::mt19937_64 rng(14);
  for (int trial = 0; trial < 5; ++trial) {
    const SliceImage a = random_image(20, 17, rng);
    SliceImage b = a;
    std::normal_distribution<double> noise(0, 0.1 * (trial + 1));
    for (auto& v : b.pixels) v = std::clamp(v + noise(rng), 0.0, 1.0);
    CHECK(ssim(a, b) == doctest::Approx(ssim_oracle(a, b)).epsilon(1e-10));
    CHECK(ssim(a, b) == doctest::Approx(ssim(b, a)).epsilon(1e-14));
  }
  CHECK_THROWS_AS(ssim(SliceImage(8, 8), SliceImage(8, 8)), ShapeError);
  CHECK_THROWS_AS(ssim(SliceImage(12, 12), SliceImage(12, 13)), ShapeError);
}

TEST_CASE("identity codec passes arrays through") {
  std::mt19937_64 rng(15);
  const LatentCodec codec = LatentCodec::identity();
  CHECK(codec.downsample_factor() == 1);
  const Tensor x = to_pseudo_rgb(random_image(6, 5, rng));
  const LatentTensor z = codec.encode(x);
  CHECK(z.shape == std::vector<int>{1, 3, 6, 5});
  CHECK(z.data == x.data);
  const Tensor back = codec.decode(z);
  CHECK(back == x);
}

TEST_CASE("trained codec geometry follows the downsample factor") {
  const LatentCodec codec = LatentCodec::create(CodecArch{}, 1);
  std::mt19937_64 rng(16);
  const LatentTensor z = codec.encode(to_pseudo_rgb(random_image(64, 64, rng)));
  CHECK(z.shape == std::vector<int>{1, 4, 8, 8});
  CHECK(codec.decode(z).shape == std::vector<int>{3, 64, 64});
  CHECK_THROWS_AS(codec.encode(to_pseudo_rgb(random_image(60, 64, rng))), ShapeError);
  CHECK_THROWS_AS(codec.decode(LatentTensor({1, 3, 8, 8})), ShapeError);
  CHECK_THROWS_AS(LatentCodec::create(CodecArch{.downsample_factor = 6}, 1), ConfigError);
}

TEST_CASE("codec network gradients match finite differences") {
  std::mt19937_64 rng(17);
  CodecNet<double> net(CodecArch{.downsample_factor = 4, .latent_channels = 2, .base_width = 3, .max_width = 4},
                       rng);
  auto params = net.parameters();
  nn::randomize_params(params, rng, 0.5);
  auto x = nn::Var<double>::parameter({1, 3, 8, 8}, testing::random_vector(192, rng));
  params.push_back({"x", x});
  const auto w = testing::random_vector(192, rng);
  auto loss = [&] { return nn::weighted_sum(net.decode(net.encode(x)), std::span<const double>(w)); };
  const auto r = testing::gradcheck(params, loss, 4, rng);
  CHECK_MESSAGE(r.max_rel_error < 1e-5, r.worst);
}

TEST_CASE("container round-trips headers and arrays bit-exactly") {
  Container c;
  c.set("kind", "test");
  c.set("note", "a b c");
  c.add_array("w", {2, 3}, {1.5f, -0.0f, 3e-38f, std::numeric_limits<float>::infinity(), 7, 8});
  c.add_array("b", {1}, {42});
  const auto path = temp_path("c.bin").string();
  write_container(path, c);
  const Container back = read_container(path);
  CHECK(back.header == c.header);
  REQUIRE(back.arrays.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(back.arrays[i].name == c.arrays[i].name);
    CHECK(back.arrays[i].shape == c.arrays[i].shape);
    CHECK(std::memcmp(back.arrays[i].values.data(), c.arrays[i].values.data(), 4 * c.arrays[i].values.size()) == 0);
  }
  CHECK_THROWS_AS(c.add_array("bad", {2}, {1}), IoError);

  std::ofstream(temp_path("junk.bin")) << "not a container\n";
  CHECK_THROWS_AS(read_container(temp_path("junk.bin").string()), IoError);
  const auto full = fs::file_size(path);
  fs::resize_file(path, full - 3);
  CHECK_THROWS_AS(read_container(path), IoError);
}

TEST_CASE("codec checkpoints reload to identical encodings") {
  LatentCodec codec = LatentCodec::create(CodecArch{}, 3);
  codec.set_latent_scale(2.5);
  const auto path = temp_path("codec.ckpt").string();
  codec.save(path);
  const LatentCodec back = LatentCodec::load(path);
  CHECK(back.latent_scale() == 2.5);
  std::mt19937_64 rng(18);
  const Tensor x = to_pseudo_rgb(random_image(32, 32, rng));
  CHECK(back.encode(x) == codec.encode(x));

  LatentCodec::identity().save(path);
  CHECK(LatentCodec::load(path).mode() == CodecMode::Identity);
}

TEST_CASE("codec training lowers the loss and is deterministic") {
  const Dataset ds = tiny_corpus();
  CodecArch arch{.downsample_factor = 4, .latent_channels = 4, .base_width = 8, .max_width = 16};
  CodecTrainConfig cfg;
  cfg.steps = 60;
  cfg.batch = 2;
  cfg.lr = 3e-3;
  CodecTrainReport report;
  const LatentCodec a = train_codec(ds, arch, cfg, &report);
  REQUIRE(report.losses.size() == 60u);
  double head = 0, tail = 0;
  for (int i = 0; i < 10; ++i) head += report.losses[i], tail += report.losses[50 + i];
  CHECK(tail < 0.6 * head);
  CHECK(a.latent_scale() > 0);

  cfg.steps = 3;
  const LatentCodec b = train_codec(ds, arch, cfg);
  const LatentCodec c = train_codec(ds, arch, cfg);
  const auto pb = b.parameters(), pc = c.parameters();
  for (std::size_t i = 0; i < pb.size(); ++i) {
    CHECK(std::vector<float>(pb[i].var.value().begin(), pb[i].var.value().end()) ==
          std::vector<float>(pc[i].var.value().begin(), pc[i].var.value().end()));
  }
}

TEST_CASE("codec training errors") {
  CHECK_THROWS_AS(train_codec({}, CodecArch{}, CodecTrainConfig{}), TrainingError);
  CodecTrainConfig cfg;
  cfg.steps = 50;
  cfg.batch = 1;
  cfg.lr = 1e30;
  cfg.final_lr = 1e30;
  try {
    train_codec(tiny_corpus(), CodecArch{.downsample_factor = 4, .base_width = 4, .max_width = 4}, cfg);
    FAIL("expected divergence");
  } catch (const TrainingError& e) {
    CHECK(e.step() >= 0);
    CHECK(e.step() < 50);
  }
}

TEST_CASE("reconstruction study and table") {
  const Dataset ds = tiny_corpus();
  const auto rows = reconstruction_study(LatentCodec::identity(), ds, 3);
  REQUIRE(rows.size() == 2u);
  CHECK(rows[0].type == "image");
  CHECK(rows[0].samples == 3);
  CHECK(rows[0].ssim == doctest::Approx(1.0));
  CHECK(rows[1].dice == 1.0);
  const std::string table = format_recon_table("synthetic", rows);
  CHECK(table.find("dataset") != std::string::npos);
  CHECK(table.find("synthetic    mask") != std::string::npos);
}
