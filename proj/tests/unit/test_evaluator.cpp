#include <algorithm>
#include <cmath>
#include <random>

#include "doctest.h"
#include "latentseg/errors.hpp"
#include "latentseg/evaluator.hpp"

using namespace latentseg;

namespace {

BinaryMask random_mask(int h, int w, double p, std::mt19937_64& rng) {
  BinaryMask m(h, w);
  std::bernoulli_distribution b(p);
  for (auto& v : m.pixels) v = b(rng);
  return m;
}

BinaryMask from_rows(const std::vector<std::string>& rows) {
  BinaryMask m(static_cast<int>(rows.size()), static_cast<int>(rows[0].size()));
  for (int r = 0; r < m.height; ++r) {
    for (int c = 0; c < m.width; ++c) m.at(r, c) = rows[r][c] == '#';
  }
  return m;
}

// Brute force: boundary by explicit neighbor test, all-pairs distances,
// percentile by sorting and interpolating.
struct Oracle {
  double hd95 = 0, assd = 0;
};

std::vector<std::pair<int, int>> oracle_boundary(const BinaryMask& m) {
  std::vector<std::pair<int, int>> out;
  for (int r = 0; r < m.height; ++r) {
    for (int c = 0; c < m.width; ++c) {
      if (!m.at(r, c)) continue;
      const int dr[] = {-1, 1, 0, 0}, dc[] = {0, 0, -1, 1};
      bool edge = false;
      for (int k = 0; k < 4; ++k) {
        const int rr = r + dr[k], cc = c + dc[k];
        if (rr < 0 || cc < 0 || rr >= m.height || cc >= m.width || !m.at(rr, cc)) edge = true;
      }
      if (edge) out.emplace_back(r, c);
    }
  }
  return out;
}

Oracle oracle_surface(const BinaryMask& p, const BinaryMask& g) {
  const auto bp = oracle_boundary(p), bg = oracle_boundary(g);
  auto directed = [](const auto& from, const auto& to) {
    std::vector<double> d;
    for (const auto& [r, c] : from) {
      double best = 1e300;
      for (const auto& [r2, c2] : to) best = std::min(best, std::sqrt(double((r - r2) * (r - r2) + (c - c2) * (c - c2))));
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
  const double frac = pos - lo;
  Oracle o;
  o.hd95 = lo + 1 < all.size() ? all[lo] * (1 - frac) + all[lo + 1] * frac : all[lo];
  double sp = 0, sg = 0;
  for (double d : dp) sp += d;
  for (double d : dg) sg += d;
  o.assd = (sp / dp.size() + sg / dg.size()) / 2;
  return o;
}

BinaryMask shifted(const BinaryMask& m, int dr, int dc, int h, int w) {
  BinaryMask out(h, w);
  for (int r = 0; r < m.height; ++r) {
    for (int c = 0; c < m.width; ++c) out.at(r + dr, c + dc) = m.at(r, c);
  }
  return out;
}

VolumeRecord volume_with(const std::string& id, int cls, const std::vector<int>& present, int slices) {
  VolumeRecord v;
  v.patient_id = id;
  v.class_ids = {cls};
  for (int s = 0; s < slices; ++s) {
    v.slices.emplace_back(8, 8, 0.1);
    BinaryMask m(8, 8);
    if (std::find(present.begin(), present.end(), s) != present.end()) m.at(3, 3) = 1;
    v.masks[cls].push_back(m);
  }
  return v;
}

}  // namespace

TEST_CASE("dice on fixed cases") {
  const BinaryMask g = from_rows({"##..", "##..", "....", "...."});
  CHECK(dice(g, g) == 1.0);
  CHECK(dice(g, from_rows({"....", "....", "..##", "...."})) == 0.0);
  CHECK(dice(from_rows({"##..", "....", "....", "...."}), g) == doctest::Approx(4.0 / 6.0).epsilon(1e-12));
  CHECK(dice(BinaryMask(4, 4), BinaryMask(4, 4)) == 1.0);
  CHECK_THROWS_AS(dice(g, BinaryMask(3, 4)), ShapeError);
}

TEST_CASE("dice matches set counting and is symmetric") {
  std::mt19937_64 rng(61);
  for (int trial = 0; trial < 200; ++trial) {
    const int h = 1 + trial % 16, w = 1 + (trial * 7) % 16;
    const auto a = random_mask(h, w, 0.4, rng), b = random_mask(h, w, 0.4, rng);
    int inter = 0, na = 0, nb = 0;
    for (int r = 0; r < h; ++r) {
      for (int c = 0; c < w; ++c) inter += a.at(r, c) && b.at(r, c), na += a.at(r, c), nb += b.at(r, c);
    }
    const double expected = na + nb == 0 ? 1.0 : 2.0 * inter / (na + nb);
    CHECK(std::abs(dice(a, b) - expected) <= 1e-12);
    CHECK(dice(a, b) == dice(b, a));
  }
}

TEST_CASE("surface distances on fixed cases") {
  const BinaryMask a = from_rows({"....", ".#..", "....", "...."});
  const BinaryMask b = from_rows({"....", "..#.", "....", "...."});
  CHECK(hd95(a, a) == 0.0);
  CHECK(assd(a, a) == 0.0);
  CHECK(hd95(a, b) == doctest::Approx(1.0));
  CHECK(assd(a, b) == doctest::Approx(1.0));
  const auto empty = surface_distances(a, BinaryMask(4, 4));
  CHECK(empty.sentinel);
  CHECK(empty.hd95 == doctest::Approx(std::sqrt(32.0)));
  CHECK(surface_distances(BinaryMask(4, 4), BinaryMask(4, 4)).hd95 == 0.0);
  CHECK(boundary_points(from_rows({"###", "###", "###"})).size() == 8);
}

TEST_CASE("surface distances match an all-pairs oracle") {
  std::mt19937_64 rng(62);
  int checked = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const int h = 2 + trial % 15, w = 2 + (trial * 5) % 15;
    const auto p = random_mask(h, w, 0.3, rng), g = random_mask(h, w, 0.3, rng);
    if (p.empty_foreground() || g.empty_foreground()) continue;
    const Oracle o = oracle_surface(p, g);
    const auto s = surface_distances(p, g);
    CHECK(std::abs(s.hd95 - o.hd95) <= 1e-6);
    CHECK(std::abs(s.assd - o.assd) <= 1e-6);
    CHECK(s.hd95 >= 0);
    CHECK(s.assd >= 0);
    ++checked;
  }
  CHECK(checked >= 100);
}

TEST_CASE("distance transform matches brute force") {
  std::mt19937_64 rng(63);
  for (int trial = 0; trial < 50; ++trial) {
    const auto m = random_mask(1 + trial % 16, 1 + (trial * 3) % 16, 0.1, rng);
    const auto dt = distance_transform(m);
    for (int r = 0; r < m.height; ++r) {
      for (int c = 0; c < m.width; ++c) {
        double best = std::numeric_limits<double>::infinity();
        for (int r2 = 0; r2 < m.height; ++r2) {
          for (int c2 = 0; c2 < m.width; ++c2) {
            if (m.at(r2, c2)) best = std::min(best, std::hypot(double(r - r2), double(c - c2)));
          }
        }
        const double got = dt[static_cast<std::size_t>(r) * m.width + c];
        if (std::isinf(best)) {
          CHECK(std::isinf(got));
        } else {
          CHECK(got == doctest::Approx(best).epsilon(1e-12));
        }
      }
    }
  }
}

TEST_CASE("metrics are translation invariant and vanish only on coinciding boundaries") {
  std::mt19937_64 rng(64);
  for (int trial = 0; trial < 50; ++trial) {
    const auto p = random_mask(8, 8, 0.4, rng), g = random_mask(8, 8, 0.4, rng);
    if (p.empty_foreground() || g.empty_foreground()) continue;
    const auto ps = shifted(p, 3, 5, 16, 16), gs = shifted(g, 3, 5, 16, 16);
    // The shifted copies sit away from the image edge, so compare against an
    // unshifted pair padded the same way.
    const auto pp = shifted(p, 4, 4, 16, 16), gp = shifted(g, 4, 4, 16, 16);
    CHECK(dice(ps, gs) == dice(p, g));
    CHECK(hd95(ps, gs) == doctest::Approx(hd95(pp, gp)));
    CHECK(assd(ps, gs) == doctest::Approx(assd(pp, gp)));
    const bool same = oracle_boundary(p) == oracle_boundary(g);
    CHECK((hd95(p, g) == 0.0) == same);
    CHECK((assd(p, g) == 0.0) == same);
  }
}

TEST_CASE("three-way split of every length from 3 to 30") {
  for (int n = 3; n <= 30; ++n) {
    CAPTURE(n);
    const auto parts = split_three(n);
    CHECK(parts[0].begin == 0);
    CHECK(parts[2].end == n);
    int lo = n, hi = 0;
    for (int i = 0; i < 3; ++i) {
      CHECK(parts[i].size() >= 1);
      if (i > 0) CHECK(parts[i].begin == parts[i - 1].end);
      lo = std::min(lo, parts[i].size()), hi = std::max(hi, parts[i].size());
      const int len = parts[i].size();
      CHECK(parts[i].middle() == parts[i].begin + (len % 2 ? len / 2 : len / 2 - 1));
    }
    CHECK(hi - lo <= 1);
    CHECK(parts[0].size() == (n + 2) / 3);
  }
  auto middles = [](int n) {
    const auto p = split_three(n);
    return std::vector<int>{p[0].middle(), p[1].middle(), p[2].middle()};
  };
  CHECK(middles(9) == std::vector<int>{1, 4, 7});
  CHECK(middles(3) == std::vector<int>{0, 1, 2});
  CHECK(middles(10) == std::vector<int>{1, 5, 8});
  CHECK(split_three(10)[1].size() == 3);
  CHECK_THROWS_AS(split_three(2), ProtocolError);
}

TEST_CASE("protocol plan excludes the support patient and maps parts to support slices") {
  Dataset ds{volume_with("p0", 1, {2, 3, 4, 5, 6, 7, 8, 9, 10}, 12), volume_with("p1", 1, {0, 1, 2, 3}, 6),
             volume_with("p0", 1, {1, 2, 3}, 5), volume_with("p2", 1, {4}, 6)};
  const auto plan = plan_protocol(ds, 1, 0, {0, 1, 2}, 1);
  CHECK(plan.support_patient == "p0");
  CHECK(plan.support_slices == std::array<int, 3>{3, 6, 9});
  REQUIRE(plan.queries.size() == 4);
  for (const auto& q : plan.queries) CHECK(q.patient_id == "p1");
  CHECK(plan.queries[0].part == 0);
  CHECK(plan.queries[1].part == 0);
  CHECK(plan.queries[2].part == 1);
  CHECK(plan.queries[3].part == 2);
  CHECK(plan.queries[3].slice == 3);
  try {
    plan_protocol(ds, 1, 0, {3}, 1);
    FAIL("expected a protocol error");
  } catch (const ProtocolError& e) {
    CHECK(std::string(e.what()).find("p2") != std::string::npos);
  }
}

TEST_CASE("report means are arithmetic means of the listed volumes") {
  MetricReport r;
  r.volumes = {{1, "a", 3, 0.5, 2, 1, 0}, {1, "b", 3, 0.7, 4, 3, 0}, {2, "a", 3, 0.9, 1, 1, 0}};
  summarize(r);
  REQUIRE(r.classes.size() == 2);
  CHECK(r.classes[0].dice == doctest::Approx(0.6));
  CHECK(r.classes[0].hd95 == doctest::Approx(3.0));
  CHECK(r.mean_dice == doctest::Approx(0.75));
  CHECK(r.to_text().find("0.7500") != std::string::npos);
  CHECK(r.to_csv().find("volume,1,b,3,0.69999999999999996") != std::string::npos);
}

TEST_CASE("evaluation never queries the support patient and is deterministic") {
  CorpusSpec spec;
  spec.samples_per_class = 2;
  spec.slices_per_volume = 8;
  spec.finalize();
  const Dataset ds = generate_synthetic_corpus(spec);
  ModelConfig cfg;
  cfg.denoiser.base_channels = 8;
  cfg.denoiser.heads = 2;
  cfg.denoiser.text_dim = 8;
  cfg.denoiser.groups = 2;
  cfg.denoiser.time_embed_dim = 8;
  cfg.vision.feature_dim = 8;
  cfg.vision.blocks = 0;
  cfg.projector_hidden = 8;
  CodecArch arch;
  arch.base_width = 4;
  arch.max_width = 4;
  const SegmentationModel model(cfg, LatentCodec::create(arch, 3));
  EvalSpec es;
  es.test_classes = {3};
  const MetricReport r = evaluate(model, ds, es);
  REQUIRE(r.classes.size() == 1);
  CHECK(r.episodes > 0);
  for (const auto& v : r.volumes) CHECK(v.patient_id != r.classes[0].support_patient);
  double sum = 0;
  for (const auto& v : r.volumes) sum += v.dice;
  CHECK(r.classes[0].dice == doctest::Approx(sum / r.volumes.size()));
  CHECK(evaluate(model, ds, es).to_csv() == r.to_csv());

  es.support_patient = "nobody";
  CHECK_THROWS_AS(evaluate(model, ds, es), ProtocolError);
}
