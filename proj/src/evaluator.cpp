#include "latentseg/evaluator.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>

#include "latentseg/errors.hpp"

namespace latentseg {

double dice(const BinaryMask& pred, const BinaryMask& gt) {
  require_same_shape(pred, gt, "dice");
  std::size_t inter = 0, total = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    inter += pred.pixels[i] & gt.pixels[i];
    total += pred.pixels[i] + gt.pixels[i];
  }
  return total == 0 ? 1.0 : 2.0 * static_cast<double>(inter) / static_cast<double>(total);
}

std::vector<std::pair<int, int>> boundary_points(const BinaryMask& mask) {
  std::vector<std::pair<int, int>> out;
  auto fg = [&](int r, int c) { return r >= 0 && c >= 0 && r < mask.height && c < mask.width && mask.at(r, c); };
  for (int r = 0; r < mask.height; ++r) {
    for (int c = 0; c < mask.width; ++c) {
      if (fg(r, c) && (!fg(r - 1, c) || !fg(r + 1, c) || !fg(r, c - 1) || !fg(r, c + 1))) out.emplace_back(r, c);
    }
  }
  return out;
}

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Lower envelope of parabolas: out[q] = min_p (q - p)^2 + f[p].
void squared_distance_1d(const std::vector<double>& f, std::vector<double>& out) {
  const int n = static_cast<int>(f.size());
  std::vector<int> v(n);
  std::vector<double> z(n + 1);
  int k = -1;
  for (int q = 0; q < n; ++q) {
    if (f[q] == kInf) continue;
    if (k < 0) {
      k = 0, v[0] = q, z[0] = -kInf, z[1] = kInf;
      continue;
    }
    double s;
    while (true) {
      const int p = v[k];
      s = ((f[q] + double(q) * q) - (f[p] + double(p) * p)) / (2.0 * (q - p));
      if (s > z[k] || k == 0) break;
      --k;
    }
    if (s <= z[k]) {
      v[0] = q, z[0] = -kInf, z[1] = kInf, k = 0;
      continue;
    }
    ++k;
    v[k] = q, z[k] = s, z[k + 1] = kInf;
  }
  out.assign(n, kInf);
  if (k < 0) return;
  int j = 0;
  for (int q = 0; q < n; ++q) {
    while (z[j + 1] < q) ++j;
    const double d = q - v[j];
    out[q] = d * d + f[v[j]];
  }
}

BinaryMask from_points(const std::vector<std::pair<int, int>>& points, int h, int w) {
  BinaryMask m(h, w);
  for (const auto& [r, c] : points) m.at(r, c) = 1;
  return m;
}

double percentile(std::vector<double> values, double q) {
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

}  // namespace

std::vector<double> distance_transform(const BinaryMask& targets) {
  const int h = targets.height, w = targets.width;
  std::vector<double> grid(static_cast<std::size_t>(h) * w, kInf), line, out;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if (targets.pixels[i]) grid[i] = 0;
  }
  for (int c = 0; c < w; ++c) {
    line.assign(h, kInf);
    for (int r = 0; r < h; ++r) line[r] = grid[static_cast<std::size_t>(r) * w + c];
    squared_distance_1d(line, out);
    for (int r = 0; r < h; ++r) grid[static_cast<std::size_t>(r) * w + c] = out[r];
  }
  for (int r = 0; r < h; ++r) {
    line.assign(grid.begin() + static_cast<std::ptrdiff_t>(r) * w, grid.begin() + static_cast<std::ptrdiff_t>(r + 1) * w);
    squared_distance_1d(line, out);
    for (int c = 0; c < w; ++c) grid[static_cast<std::size_t>(r) * w + c] = std::sqrt(out[c]);
  }
  return grid;
}

SurfaceDistances surface_distances(const BinaryMask& pred, const BinaryMask& gt) {
  require_same_shape(pred, gt, "surface_distances");
  SurfaceDistances out;
  const bool pe = pred.empty_foreground(), ge = gt.empty_foreground();
  if (pe && ge) return out;
  if (pe || ge) {
    out.hd95 = out.assd = std::hypot(double(pred.height), double(pred.width));
    out.sentinel = true;
    return out;
  }
  const auto bp = boundary_points(pred), bg = boundary_points(gt);
  const auto to_gt = distance_transform(from_points(bg, gt.height, gt.width));
  const auto to_pred = distance_transform(from_points(bp, pred.height, pred.width));
  std::vector<double> pooled;
  pooled.reserve(bp.size() + bg.size());
  double sum_p = 0, sum_g = 0;
  for (const auto& [r, c] : bp) {
    const double d = to_gt[static_cast<std::size_t>(r) * gt.width + c];
    pooled.push_back(d), sum_p += d;
  }
  for (const auto& [r, c] : bg) {
    const double d = to_pred[static_cast<std::size_t>(r) * pred.width + c];
    pooled.push_back(d), sum_g += d;
  }
  out.hd95 = percentile(std::move(pooled), 0.95);
  out.assd = 0.5 * (sum_p / static_cast<double>(bp.size()) + sum_g / static_cast<double>(bg.size()));
  return out;
}

double hd95(const BinaryMask& pred, const BinaryMask& gt) { return surface_distances(pred, gt).hd95; }
double assd(const BinaryMask& pred, const BinaryMask& gt) { return surface_distances(pred, gt).assd; }

// ---------------------------------------------------------------------------
// protocol

std::array<Part, 3> split_three(int n) {
  if (n < 3) throw ProtocolError("cannot split " + std::to_string(n) + " slices into three parts");
  std::array<Part, 3> parts;
  int begin = 0;
  for (int i = 0; i < 3; ++i) {
    const int size = n / 3 + (i < n % 3 ? 1 : 0);
    parts[i] = Part{begin, begin + size};
    begin += size;
  }
  return parts;
}

std::vector<int> eligible_slices(const VolumeRecord& volume, int class_id, int grid_factor) {
  std::vector<int> out;
  const auto it = volume.masks.find(class_id);
  if (it == volume.masks.end()) return out;
  for (std::size_t s = 0; s < it->second.size(); ++s) {
    if (is_eligible(it->second[s], grid_factor)) out.push_back(static_cast<int>(s));
  }
  return out;
}

ProtocolPlan plan_protocol(const Dataset& dataset, int class_id, std::size_t support_volume,
                           const std::vector<std::size_t>& query_volumes, int grid_factor) {
  if (support_volume >= dataset.size()) throw ProtocolError("support volume index out of range");
  auto eligible_or_throw = [&](std::size_t v) {
    auto slices = eligible_slices(dataset[v], class_id, grid_factor);
    if (slices.size() < 3) {
      throw ProtocolError("patient " + dataset[v].patient_id + " has " + std::to_string(slices.size()) +
                          " slices with class " + std::to_string(class_id) + ", need at least 3");
    }
    return slices;
  };
  ProtocolPlan plan;
  plan.class_id = class_id;
  plan.support_volume = support_volume;
  plan.support_patient = dataset[support_volume].patient_id;
  plan.support_eligible = eligible_or_throw(support_volume);
  plan.support_parts = split_three(static_cast<int>(plan.support_eligible.size()));
  for (int i = 0; i < 3; ++i) plan.support_slices[i] = plan.support_eligible[plan.support_parts[i].middle()];

  for (std::size_t v : query_volumes) {
    if (v >= dataset.size()) throw ProtocolError("query volume index out of range");
    if (dataset[v].patient_id == plan.support_patient) continue;
    const auto slices = eligible_or_throw(v);
    const auto parts = split_three(static_cast<int>(slices.size()));
    for (int i = 0; i < 3; ++i) {
      for (int k = parts[i].begin; k < parts[i].end; ++k) {
        plan.queries.push_back({v, dataset[v].patient_id, slices[k], i});
      }
    }
  }
  return plan;
}

// ---------------------------------------------------------------------------
// evaluation

void summarize(MetricReport& report) {
  std::map<int, ClassScore> by_class;
  for (const auto& c : report.classes) by_class[c.class_id] = ClassScore{c.class_id, c.support_patient};
  for (const auto& v : report.volumes) {
    auto& c = by_class[v.class_id];
    c.class_id = v.class_id;
    ++c.volumes;
    c.dice += v.dice, c.hd95 += v.hd95, c.assd += v.assd;
  }
  report.classes.clear();
  report.mean_dice = report.mean_hd95 = report.mean_assd = 0;
  for (auto& [id, c] : by_class) {
    if (c.volumes > 0) c.dice /= c.volumes, c.hd95 /= c.volumes, c.assd /= c.volumes;
    report.mean_dice += c.dice, report.mean_hd95 += c.hd95, report.mean_assd += c.assd;
    report.classes.push_back(c);
  }
  if (!report.classes.empty()) {
    const double n = static_cast<double>(report.classes.size());
    report.mean_dice /= n, report.mean_hd95 /= n, report.mean_assd /= n;
  }
}

MetricReport evaluate(const SegmentationModel& model, const Dataset& dataset, const EvalSpec& spec) {
  const int grid = model.codec.downsample_factor();
  MetricReport report;
  for (int cls : spec.test_classes) {
    std::vector<std::size_t> with_class;
    for (std::size_t v = 0; v < dataset.size(); ++v) {
      if (dataset[v].class_ids.count(cls)) with_class.push_back(v);
    }
    std::size_t support = dataset.size();
    for (std::size_t v : with_class) {
      const bool named = !spec.support_patient.empty() && dataset[v].patient_id == spec.support_patient;
      const bool first_ok = spec.support_patient.empty() && eligible_slices(dataset[v], cls, grid).size() >= 3;
      if (named || first_ok) {
        support = v;
        break;
      }
    }
    if (support == dataset.size()) {
      throw ProtocolError(spec.support_patient.empty()
                              ? "no volume can supply support slices for class " + std::to_string(cls)
                              : "support patient " + spec.support_patient + " has no class " + std::to_string(cls));
    }
    std::vector<std::size_t> queries;
    for (std::size_t v : with_class) {
      if (v != support && eligible_slices(dataset[v], cls, grid).size() >= 3) queries.push_back(v);
    }
    if (queries.empty()) {
      throw ProtocolError("class " + std::to_string(cls) + ": no query volumes besides support patient " +
                          dataset[support].patient_id);
    }
    const ProtocolPlan plan = plan_protocol(dataset, cls, support, queries, grid);
    report.classes.push_back(ClassScore{cls, plan.support_patient});

    const auto& sv = dataset[support];
    std::map<std::size_t, VolumeScore> per_volume;
    for (const auto& q : plan.queries) {
      const auto& qv = dataset[q.volume];
      const int s = plan.support_slices[q.part];
      const BinaryMask pred =
          model.predict_mask({sv.slices[s]}, {sv.mask(cls, s)}, qv.slices[q.slice], spec.condition);
      const BinaryMask& gt = qv.mask(cls, q.slice);
      const SurfaceDistances sd = surface_distances(pred, gt);
      auto& score = per_volume[q.volume];
      score.class_id = cls;
      score.patient_id = q.patient_id;
      ++score.slices;
      score.dice += dice(pred, gt);
      score.hd95 += sd.hd95;
      score.assd += sd.assd;
      score.sentinel_slices += sd.sentinel;
      ++report.episodes;
    }
    for (auto& [v, score] : per_volume) {
      score.dice /= score.slices, score.hd95 /= score.slices, score.assd /= score.slices;
      report.volumes.push_back(score);
    }
  }
  summarize(report);
  return report;
}

namespace {

std::string fixed(double v, int precision) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(precision) << v;
  return out.str();
}

}  // namespace

std::string MetricReport::to_text() const {
  std::ostringstream out;
  out << std::left << std::setw(10) << "class" << std::setw(12) << "support" << std::right << std::setw(8)
      << "volumes" << std::setw(10) << "Dice" << std::setw(10) << "HD95" << std::setw(10) << "ASSD" << "\n";
  for (const auto& c : classes) {
    out << std::left << std::setw(10) << c.class_id << std::setw(12) << c.support_patient << std::right
        << std::setw(8) << c.volumes << std::setw(10) << fixed(c.dice, 4) << std::setw(10) << fixed(c.hd95, 3)
        << std::setw(10) << fixed(c.assd, 3) << "\n";
  }
  int volume_count = 0;
  for (const auto& c : classes) volume_count += c.volumes;
  out << std::left << std::setw(10) << "mean" << std::setw(12) << "-" << std::right << std::setw(8) << volume_count
      << std::setw(10) << fixed(mean_dice, 4) << std::setw(10) << fixed(mean_hd95, 3) << std::setw(10)
      << fixed(mean_assd, 3) << "\n";
  out << "episodes " << episodes << "\n";
  return out.str();
}

std::string MetricReport::to_csv() const {
  std::ostringstream out;
  out << std::setprecision(17) << "level,class,patient,count,dice,hd95,assd,sentinel_slices\n";
  for (const auto& v : volumes) {
    out << "volume," << v.class_id << "," << v.patient_id << "," << v.slices << "," << v.dice << "," << v.hd95 << ","
        << v.assd << "," << v.sentinel_slices << "\n";
  }
  for (const auto& c : classes) {
    out << "class," << c.class_id << "," << c.support_patient << "," << c.volumes << "," << c.dice << "," << c.hd95
        << "," << c.assd << ",\n";
  }
  out << "mean,,," << episodes << "," << mean_dice << "," << mean_hd95 << "," << mean_assd << ",\n";
  return out.str();
}

}  // namespace latentseg
