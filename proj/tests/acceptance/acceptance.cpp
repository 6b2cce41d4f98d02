// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits nonzero when any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <sys/wait.h>

#include "latentseg/errors.hpp"
#include "latentseg/run_config.hpp"
#include "support/gradcheck.hpp"

using namespace latentseg;
namespace fs = std::filesystem;
using testing::random_vector;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int digits = 4) {
  std::ostringstream s;
  s.precision(digits);
  s << std::fixed << v;
  return s.str();
}

std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2e", v);
  return buf;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

// ---------------------------------------------------------------------------
// random instances

LatentTensor random_latent(int c, int h, int w, std::mt19937_64& rng) {
  LatentTensor z({1, c, h, w});
  z.data = random_vector(z.size(), rng);
  return z;
}

BinaryMask random_mask(int h, int w, double p, std::mt19937_64& rng) {
  BinaryMask m(h, w);
  std::bernoulli_distribution b(p);
  for (auto& v : m.pixels) v = b(rng);
  return m;
}

int uniform_int(int lo, int hi, std::mt19937_64& rng) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

double zval(const LatentTensor& z, int ch, int i, int j) { return z.data[(ch * z.dim(2) + i) * z.dim(3) + j]; }

// ---------------------------------------------------------------------------
// brute-force oracles

// Cell (i, j) of an h x w grid samples mask pixel at the cell center.
bool mask_at_cell(const BinaryMask& m, int h, int w, int i, int j) {
  const int r = std::min(m.height - 1, static_cast<int>(std::floor((i + 0.5) * m.height / h)));
  const int c = std::min(m.width - 1, static_cast<int>(std::floor((j + 0.5) * m.width / w)));
  return m.at(r, c);
}

std::vector<double> oracle_pool(const LatentTensor& z, const BinaryMask& m) {
  const int c = z.dim(1), h = z.dim(2), w = z.dim(3);
  std::vector<double> out(c, 0.0);
  int count = 0;
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) {
      if (!mask_at_cell(m, h, w, i, j)) continue;
      ++count;
      for (int ch = 0; ch < c; ++ch) out[ch] += zval(z, ch, i, j);
    }
  }
  for (auto& v : out) v /= count;
  return out;
}

double oracle_cos(const std::vector<double>& p, const LatentTensor& z, int i, int j) {
  double dot = 0, np = 0, nz = 0;
  for (int ch = 0; ch < z.dim(1); ++ch) {
    const double v = zval(z, ch, i, j);
    dot += p[ch] * v;
    np += p[ch] * p[ch];
    nz += v * v;
  }
  return dot / (std::sqrt(np) * std::sqrt(nz) + 1e-8);
}

std::vector<double> oracle_query_prototype(const LatentTensor& z, const Tensor& prob, double tau) {
  const int c = z.dim(1), h = z.dim(2), w = z.dim(3);
  std::vector<std::pair<int, int>> cells;
  int best_i = 0, best_j = 0;
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) {
      const double v = prob.data[i * w + j];
      if (v > tau) cells.emplace_back(i, j);
      if (v > prob.data[best_i * w + best_j]) best_i = i, best_j = j;
    }
  }
  if (cells.empty()) cells.emplace_back(best_i, best_j);
  std::vector<double> out(c, 0.0);
  for (const auto& [i, j] : cells) {
    for (int ch = 0; ch < c; ++ch) out[ch] += zval(z, ch, i, j) / cells.size();
  }
  return out;
}

std::vector<std::pair<int, int>> oracle_boundary(const BinaryMask& m) {
  std::vector<std::pair<int, int>> out;
  for (int r = 0; r < m.height; ++r) {
    for (int c = 0; c < m.width; ++c) {
      if (!m.at(r, c)) continue;
      const bool edge = r == 0 || c == 0 || r == m.height - 1 || c == m.width - 1 || !m.at(r - 1, c) ||
                        !m.at(r + 1, c) || !m.at(r, c - 1) || !m.at(r, c + 1);
      if (edge) out.emplace_back(r, c);
    }
  }
  return out;
}

std::pair<double, double> oracle_surface(const BinaryMask& p, const BinaryMask& g) {
  const auto bp = oracle_boundary(p), bg = oracle_boundary(g);
  auto directed = [](const auto& from, const auto& to) {
    std::vector<double> d;
    for (const auto& [r, c] : from) {
      double best = 1e300;
      for (const auto& [r2, c2] : to) best = std::min(best, std::hypot(double(r - r2), double(c - c2)));
      d.push_back(best);
    }
    return d;
  };
  const auto dp = directed(bp, bg), dg = directed(bg, bp);
  std::vector<double> all = dp;
  all.insert(all.end(), dg.begin(), dg.end());
  std::sort(all.begin(), all.end());
  const double pos = 0.95 * (all.size() - 1);
  const auto lo = static_cast<std::size_t>(pos);
  const double hd = lo + 1 < all.size() ? all[lo] + (pos - lo) * (all[lo + 1] - all[lo]) : all[lo];
  const double as = (std::accumulate(dp.begin(), dp.end(), 0.0) / dp.size() +
                     std::accumulate(dg.begin(), dg.end(), 0.0) / dg.size()) /
                    2;
  return {hd, as};
}

// ---------------------------------------------------------------------------
// criteria

Outcome oracle_equivalence() {
  std::mt19937_64 rng(101);
  const int n = 150;
  double worst = 0, worst_loss = 0;
  int counts[7] = {};
  for (int t = 0; t < n; ++t) {
    const int c = uniform_int(1, 8, rng), h = uniform_int(1, 16, rng), w = uniform_int(1, 16, rng);
    const LatentTensor z = random_latent(c, h, w, rng);

    // Pooling with masks at latent and at higher resolution.
    const int scale = uniform_int(1, 3, rng);
    BinaryMask m = random_mask(std::min(16, h * scale), std::min(16, w * scale), 0.4, rng);
    m.at(static_cast<int>(0.5 * m.height / h), static_cast<int>(0.5 * m.width / w)) = 1;
    const Prototype p = masked_average_pool(z, m);
    const auto po = oracle_pool(z, m);
    for (int ch = 0; ch < c; ++ch) worst = std::max(worst, std::abs(p[ch] - po[ch]));
    ++counts[0];

    const auto proto = random_vector(c, rng);
    const Tensor cos = cosine_similarity_map(proto, z);
    for (int i = 0; i < h; ++i) {
      for (int j = 0; j < w; ++j) worst = std::max(worst, std::abs(cos.data[i * w + j] - oracle_cos(proto, z, i, j)));
    }
    ++counts[1];

    for (double tau : {0.7, 0.2, 0.99}) {
      const auto q = extract_query_prototype(z, cos, tau);
      const auto qo = oracle_query_prototype(z, cos, tau);
      for (int ch = 0; ch < c; ++ch) worst = std::max(worst, std::abs(q[ch] - qo[ch]));
    }
    ++counts[2];

    const LatentTensor a = random_latent(c, h, w, rng), b = random_latent(c, h, w, rng);
    double acc = 0;
    for (std::size_t k = 0; k < a.size(); ++k) acc += (a.data[k] - b.data[k]) * (a.data[k] - b.data[k]);
    worst_loss = std::max(worst_loss, std::abs(training_loss(a, b) - acc / a.size()));
    ++counts[3];

    const BinaryMask pm = random_mask(h, w, 0.35, rng), gm = random_mask(h, w, 0.35, rng);
    int inter = 0, np = 0, ng = 0;
    for (std::size_t k = 0; k < pm.size(); ++k) inter += pm.pixels[k] && gm.pixels[k], np += pm.pixels[k], ng += gm.pixels[k];
    worst = std::max(worst, std::abs(dice(pm, gm) - (np + ng == 0 ? 1.0 : 2.0 * inter / (np + ng))));
    ++counts[4];
    if (np > 0 && ng > 0) {
      const auto [hd, as] = oracle_surface(pm, gm);
      worst = std::max(worst, std::abs(hd95(pm, gm) - hd));
      worst = std::max(worst, std::abs(assd(pm, gm) - as));
      ++counts[5];
      ++counts[6];
    }
  }
  // Surface metrics need both masks nonempty; top up until each has 100 instances.
  while (counts[5] < n) {
    const int h = uniform_int(2, 16, rng), w = uniform_int(2, 16, rng);
    BinaryMask pm = random_mask(h, w, 0.3, rng), gm = random_mask(h, w, 0.3, rng);
    pm.pixels[0] = 1;
    gm.pixels.back() = 1;
    const auto [hd, as] = oracle_surface(pm, gm);
    worst = std::max(worst, std::abs(hd95(pm, gm) - hd));
    worst = std::max(worst, std::abs(assd(pm, gm) - as));
    ++counts[5];
    ++counts[6];
  }
  const int fewest = *std::min_element(std::begin(counts), std::end(counts));
  return {worst <= 1e-6 && worst_loss <= 1e-9 && fewest >= 100,
          std::to_string(fewest) + "+ instances per function, max abs err " + sci(worst) + ", loss " + sci(worst_loss)};
}

DenoiserConfig gradcheck_denoiser() {
  DenoiserConfig cfg;
  cfg.latent_channels = 4;
  cfg.base_channels = 8;
  cfg.heads = 2;
  cfg.text_dim = 6;
  cfg.groups = 2;
  cfg.ff_mult = 2;
  cfg.time_embed_dim = 8;
  return cfg;
}

Outcome gradient_suite() {
  std::mt19937_64 rng(202);
  double worst = 0;
  int checked = 0;

  {
    SIIBlock<double> block(8, 6, 2, rng);
    nn::ParamList<double> params;
    block.collect("sii", params);
    nn::randomize_params(params, rng, 0.5);
    auto q = nn::Var<double>::parameter({64, 8}, random_vector(64 * 8, rng));
    auto s = nn::Var<double>::parameter({64, 8}, random_vector(64 * 8, rng));
    auto e = nn::Var<double>::parameter({1, 6}, random_vector(6, rng));
    params.push_back({"q", q});
    params.push_back({"s", s});
    params.push_back({"e", e});
    // Mean over tokens keeps the loss small, so round-off stays below the zero-gradient floor.
    auto w = random_vector(64 * 8, rng);
    for (auto& v : w) v /= 64;
    const auto r = testing::gradcheck(
        params, [&] { return nn::weighted_sum(block(q, s, e), std::span<const double>(w)); }, 40, rng);
    worst = std::max(worst, r.max_rel_error);
    checked += r.checked;
  }
  {
    Projector<double> projector(6, 5, 4, rng);
    nn::ParamList<double> params;
    projector.collect("projector", params);
    auto p = nn::Var<double>::parameter({1, 6}, random_vector(6, rng, -2, 2));
    params.push_back({"prototype", p});
    const auto w = random_vector(4, rng);
    const auto r = testing::gradcheck(
        params, [&] { return nn::weighted_sum(projector(p), std::span<const double>(w)); }, 0, rng);
    worst = std::max(worst, r.max_rel_error);
    checked += r.checked;
  }
  for (auto source : {SupportTokenSource::UNet, SupportTokenSource::Raw}) {
    DenoiserConfig cfg = gradcheck_denoiser();
    cfg.support_tokens = source;
    const UNet<double> unet(cfg, rng);
    const Projector<double> projector(5, 7, 6, rng);
    nn::ParamList<double> params = unet.parameters();
    projector.collect("projector", params);
    nn::randomize_params(params, rng, 0.3);
    EpisodeLatents episode;
    episode.supports.push_back(random_latent(8, 8, 8, rng));
    episode.query = random_latent(8, 8, 8, rng);
    episode.target = random_latent(4, 8, 8, rng);
    episode.visual_prototype = random_vector(5, rng);
    const auto r =
        testing::gradcheck_subset(params, [&] { return episode_loss(unet, projector, episode); }, 60, rng);
    worst = std::max(worst, r.max_rel_error);
    checked += r.checked;
  }
  return {worst < 1e-4, std::to_string(checked) + " coordinates, max rel err " + sci(worst)};
}

Outcome zero_init_identity(const LatentCodec& codec, const Dataset& dataset) {
  std::mt19937_64 rng(303);
  const RunConfig run;
  bool invariant = true;
  {
    const auto& d = run.model.denoiser;
    SIIBlock<float> block(d.base_channels, d.text_dim, d.heads, rng);
    std::vector<float> qv(64 * d.base_channels);
    for (auto& v : qv) v = std::uniform_real_distribution<float>(-1, 1)(rng);
    const auto query = nn::Var<float>::constant({64, d.base_channels}, qv);
    std::vector<float> ev(d.text_dim);
    for (auto& v : ev) v = std::uniform_real_distribution<float>(-1, 1)(rng);
    const auto e = nn::Var<float>::constant({1, d.text_dim}, ev);
    const auto reference = block(query, nn::Var<float>(), e);
    for (int n_support : {1, 16, 64, 256}) {
      std::vector<float> sv(static_cast<std::size_t>(n_support) * d.base_channels);
      for (auto& v : sv) v = std::uniform_real_distribution<float>(-5, 5)(rng);
      const auto out = block(query, nn::Var<float>::constant({n_support, d.base_channels}, sv), e);
      invariant &= std::equal(out.value().begin(), out.value().end(), reference.value().begin());
    }
  }

  ModelConfig cfg = run.model;
  cfg.denoiser.latent_channels = codec.latent_channels();
  cfg.vision.patch = codec.downsample_factor();
  const SegmentationModel model(cfg, codec);
  const EpisodeSampler sampler(dataset, dataset_classes(dataset), codec.downsample_factor());
  const BinaryMask reference = model.predict_mask(sampler.sample(1, rng));
  bool constant = true, zero_latent = true;
  const int episodes = 40;
  for (int i = 0; i < episodes; ++i) {
    const Episode ep = sampler.sample(1 + i % 3, rng);
    constant &= model.predict_mask(ep) == reference;
    for (double v : model.predict_latent(model.prepare(ep)).data) zero_latent &= v == 0.0;
  }
  return {invariant && constant && zero_latent,
          std::string("support invariance ") + (invariant ? "bitwise" : "broken") + ", untrained prediction " +
              (constant && zero_latent ? "constant" : "varies") + " over " + std::to_string(episodes) + " episodes"};
}

Outcome overfit(const LatentCodec& codec, const Dataset& dataset) {
  RunConfig run;
  run.model.denoiser.latent_channels = codec.latent_channels();
  run.model.vision.patch = codec.downsample_factor();
  SegmentationModel model(run.model, codec);
  TrainConfig cfg = run.train;
  cfg.augment = false;
  const EpisodeSampler sampler(dataset, {1}, codec.downsample_factor());
  const EpisodeLatents latents = model.prepare(sample_training_episode(sampler, cfg, 0));
  Trainer trainer(model, cfg);
  double first = 0, last = 0;
  for (int i = 0; i < 300; ++i) {
    const double loss = trainer.step(latents).loss;
    if (i == 0) first = loss;
    last = loss;
  }
  return {last * 10 <= first, "loss " + fmt(first) + " -> " + sci(last) + " (" + fmt(first / last, 1) + "x)"};
}

SegmentationModel fresh_model(const RunConfig& run, const LatentCodec& codec) {
  ModelConfig cfg = run.model;
  cfg.denoiser.latent_channels = codec.latent_channels();
  cfg.vision.patch = codec.downsample_factor();
  return SegmentationModel(cfg, codec);
}

struct FoldResult {
  int held_out = 0;
  double dice = 0;
  double baseline = 0;
};

FoldResult evaluate_fold(const SegmentationModel& trained, const Dataset& dataset, const RunConfig& run) {
  FoldResult r;
  r.held_out = *run.test_classes.begin();
  r.dice = evaluate(trained, dataset, run.eval_spec()).mean_dice;
  r.baseline = evaluate(fresh_model(run, trained.codec), dataset, run.eval_spec()).mean_dice;
  return r;
}

// Fold k holds out one class of a corpus drawn with seed 42 + k; classes cycle.
FoldResult train_fold(int k, const LatentCodec& codec) {
  RunConfig run;
  run.set_seed(42 + k);
  const std::set<int> classes{1, 2, 3};
  run.test_classes = {(k + 2) % 3 + 1};
  const Dataset dataset = generate_synthetic_corpus(run.corpus);
  SegmentationModel model = fresh_model(run, codec);
  run_training(model, dataset, run.train_classes(classes), run.train);
  return evaluate_fold(model, dataset, run);
}

Outcome generalization(const fs::path& run_dir, const LatentCodec& codec, std::vector<FoldResult>& folds) {
  RunConfig run;
  const Dataset dataset = read_dataset((run_dir / "data").string());
  const SegmentationModel trained = SegmentationModel::load((run_dir / "train" / "final.bin").string());
  folds.push_back(evaluate_fold(trained, dataset, run));
  std::cout << "  fold 0 (class " << folds[0].held_out << "): dice " << fmt(folds[0].dice) << " baseline "
            << fmt(folds[0].baseline) << "\n"
            << std::flush;
  for (int k = 1; k < 5; ++k) {
    const auto t0 = std::chrono::steady_clock::now();
    folds.push_back(train_fold(k, codec));
    const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cout << "  fold " << k << " (class " << folds[k].held_out << "): dice " << fmt(folds[k].dice) << " baseline "
              << fmt(folds[k].baseline) << " in " << fmt(sec, 0) << " s\n"
              << std::flush;
  }
  const FoldResult& main = folds[0];
  double lowest = 1;
  std::string per_fold;
  for (const auto& f : folds) {
    lowest = std::min(lowest, f.dice);
    per_fold += (per_fold.empty() ? "" : " ") + fmt(f.dice, 3);
  }
  const bool pass = main.dice >= 0.60 && main.dice >= main.baseline + 0.15 && lowest >= 0.50;
  return {pass, "held-out dice " + fmt(main.dice) + " (baseline " + fmt(main.baseline) + "), folds [" + per_fold +
                    "], min " + fmt(lowest)};
}

Outcome conditioning_efficacy(const fs::path& run_dir) {
  const RunConfig run;
  const Dataset dataset = read_dataset((run_dir / "data").string());
  const SegmentationModel model = SegmentationModel::load((run_dir / "train" / "final.bin").string());
  const EpisodeSampler sampler(dataset, run.test_classes, model.codec.downsample_factor());
  std::mt19937_64 rng(606);
  const int n = 60;
  double total = 0;
  for (int i = 0; i < n; ++i) {
    const Episode ep = sampler.sample(1, rng);
    total += dice(model.predict_mask(ep, ConditionMode::Projected), model.predict_mask(ep, ConditionMode::Zero));
  }
  const double mean = total / n;
  return {mean < 0.95, "dice(conditioned, zero-conditioned) " + fmt(mean) + " over " + std::to_string(n) +
                           " held-out episodes"};
}

Outcome codec_study(const LatentCodec& codec) {
  RunConfig run;
  run.set_seed(1042);
  const Dataset unseen = generate_synthetic_corpus(run.corpus);
  double psnr = 0, mask_dice = 0;
  for (const auto& row : reconstruction_study(codec, unseen, 120)) {
    if (row.type == "image") psnr = row.psnr;
    if (row.type == "mask") mask_dice = row.dice;
  }
  return {psnr >= 25 && mask_dice >= 0.95, "image PSNR " + fmt(psnr, 2) + " dB, mask dice " + fmt(mask_dice)};
}

VolumeRecord protocol_volume(const std::string& id, int eligible, std::mt19937_64& rng) {
  // Eligible slices scattered among empty ones.
  VolumeRecord v;
  v.patient_id = id;
  v.class_ids = {1};
  int placed = 0;
  while (placed < eligible) {
    const bool present = std::bernoulli_distribution(0.7)(rng);
    v.slices.emplace_back(8, 8, 0.1);
    BinaryMask m(8, 8);
    if (present) {
      m.at(3, 3) = 1;
      ++placed;
    }
    v.masks[1].push_back(m);
  }
  return v;
}

Outcome protocol_correctness() {
  std::mt19937_64 rng(808);
  int plans = 0, failures = 0;
  for (int ns = 3; ns <= 30; ++ns) {
    for (int nq = 3; nq <= 30; ++nq) {
      Dataset ds{protocol_volume("s", ns, rng), protocol_volume("q", nq, rng)};
      const ProtocolPlan plan = plan_protocol(ds, 1, 0, {0, 1});
      ++plans;
      bool ok = plan.support_eligible.size() == static_cast<std::size_t>(ns) && plan.queries.size() == static_cast<std::size_t>(nq);
      auto check_parts = [&](const std::array<Part, 3>& parts, int n) {
        ok &= parts[0].begin == 0 && parts[2].end == n;
        int lo = n, hi = 0;
        for (int i = 0; i < 3; ++i) {
          ok &= parts[i].size() >= 1;
          if (i > 0) ok &= parts[i].begin == parts[i - 1].end;
          lo = std::min(lo, parts[i].size());
          hi = std::max(hi, parts[i].size());
          const int len = parts[i].size();
          ok &= parts[i].middle() == parts[i].begin + (len - 1) / 2;
        }
        ok &= hi - lo <= 1;
      };
      check_parts(plan.support_parts, ns);
      for (int i = 0; i < 3; ++i) ok &= plan.support_slices[i] == plan.support_eligible[plan.support_parts[i].middle()];
      // Query parts from the assignment sequence: consecutive, covering, balanced.
      const auto qparts = split_three(nq);
      check_parts(qparts, nq);
      for (int idx = 0; idx < nq; ++idx) {
        const auto& a = plan.queries[idx];
        ok &= a.volume == 1;
        const int expected = idx < qparts[0].end ? 0 : idx < qparts[1].end ? 1 : 2;
        ok &= a.part == expected;
      }
      failures += !ok;
    }
  }
  return {failures == 0, std::to_string(plans) + " plans over eligible lengths 3-30, " + std::to_string(failures) +
                             " violations"};
}

int run_cli(const fs::path& dir, const std::string& args) {
  const std::string cmd = "cd '" + dir.string() + "' && '" + LATENTSEG_CLI + "' " + args + " >> pipeline.log 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

bool run_pipeline(const fs::path& dir) {
  fs::remove_all(dir);
  fs::create_directories(dir);
  for (const char* step : {"synth --out data", "train-codec --data data --out codec",
                           "train --data data --codec codec/codec.bin --out train",
                           "eval --data data --model train/final.bin --out eval"}) {
    if (run_cli(dir, std::string("--seed 42 ") + step) != 0) {
      std::cerr << "pipeline step failed: " << step << " (see " << (dir / "pipeline.log").string() << ")\n";
      return false;
    }
  }
  return true;
}

Outcome determinism(const fs::path& a, const fs::path& b) {
  bool same = true;
  for (const char* f : {"eval/report.txt", "eval/report.csv", "train/final.bin", "codec/codec.bin"}) {
    same &= fs::exists(a / f) && slurp(a / f) == slurp(b / f);
  }
  return {same, std::string("report, model and codec ") + (same ? "bit-identical" : "differ") + " across two runs"};
}

}  // namespace

// Usage: acceptance [work_dir] [criterion numbers...]; no numbers runs all.
int main(int argc, char** argv) {
  const fs::path root = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "latentseg_acceptance";
  std::set<int> selected;
  for (int i = 2; i < argc; ++i) selected.insert(std::atoi(argv[i]));
  if (selected.empty()) selected = {1, 2, 3, 4, 5, 6, 7, 8, 9};
  auto wants = [&](std::initializer_list<int> ids) {
    return std::any_of(ids.begin(), ids.end(), [&](int id) { return selected.count(id) > 0; });
  };
  const auto t0 = std::chrono::steady_clock::now();
  auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); };

  bool first = false, second = false;
  if (wants({3, 4, 5, 6, 7, 9})) {
    std::cout << "running the pipeline under " << root.string() << "\n" << std::flush;
    first = run_pipeline(root / "run1");
    second = first && wants({9}) && run_pipeline(root / "run2");
    std::cout << "pipelines done in " << fmt(elapsed(), 0) << " s\n" << std::flush;
  }

  std::vector<std::pair<std::string, Outcome>> results;
  auto record = [&](int id, const std::string& name, const std::function<Outcome()>& check) {
    if (!selected.count(id)) return;
    const double start = elapsed();
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    o.detail += " [" + fmt(elapsed() - start, 1) + " s]";
    const std::string label = std::to_string(id) + " " + name;
    std::cout << (o.pass ? "PASS " : "FAIL ") << label << ": " << o.detail << "\n" << std::flush;
    results.emplace_back(label, o);
  };
  auto needs_pipeline = [&](const std::function<Outcome()>& check) {
    return [=] { return first ? check() : Outcome{false, "pipeline failed"}; };
  };

  std::optional<LatentCodec> codec;
  std::optional<Dataset> dataset;
  if (first) {
    codec = LatentCodec::load((root / "run1" / "codec" / "codec.bin").string());
    dataset = read_dataset((root / "run1" / "data").string());
  }
  std::vector<FoldResult> folds;

  record(1, "oracle equivalence", oracle_equivalence);
  record(2, "gradient suite", gradient_suite);
  record(3, "zero-init identity", needs_pipeline([&] { return zero_init_identity(*codec, *dataset); }));
  record(4, "overfit smoke test", needs_pipeline([&] { return overfit(*codec, *dataset); }));
  record(5, "toy generalization", needs_pipeline([&] { return generalization(root / "run1", *codec, folds); }));
  record(6, "conditioning efficacy", needs_pipeline([&] { return conditioning_efficacy(root / "run1"); }));
  record(7, "codec study", needs_pipeline([&] { return codec_study(*codec); }));
  record(8, "protocol correctness", protocol_correctness);
  record(9, "determinism",
         [&] { return second ? determinism(root / "run1", root / "run2") : Outcome{false, "pipeline failed"}; });

  int failed = 0;
  std::cout << "\nsummary\n";
  for (const auto& [name, o] : results) {
    std::cout << (o.pass ? "PASS " : "FAIL ") << name << "\n";
    failed += !o.pass;
  }
  std::cout << results.size() - failed << "/" << results.size() << " criteria passed in " << fmt(elapsed(), 0)
            << " s\n";
  return failed == 0 ? 0 : 1;
}
