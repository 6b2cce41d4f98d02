#include "latentseg/episode_engine.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>

#include "latentseg/image_io.hpp"

namespace latentseg {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// shapes

std::string to_string(ShapeFamily family) {
  switch (family) {
    case ShapeFamily::Ellipse: return "ellipse";
    case ShapeFamily::Rectangle: return "rectangle";
    case ShapeFamily::Triangle: return "triangle";
    case ShapeFamily::Annulus: return "annulus";
    case ShapeFamily::Cross: return "cross";
  }
  return "unknown";
}

ShapeFamily parse_shape_family(const std::string& name) {
  for (auto f : {ShapeFamily::Ellipse, ShapeFamily::Rectangle, ShapeFamily::Triangle,
                 ShapeFamily::Annulus, ShapeFamily::Cross}) {
    if (to_string(f) == name) return f;
  }
  throw ConfigError("unknown shape family '" + name + "'");
}

bool ShapeInstance::contains(double row, double col) const {
  // Offsets in the shape's own frame.
  const double dr = row - center_row;
  const double dc = col - center_col;
  const double ca = std::cos(angle), sa = std::sin(angle);
  const double u = dc * ca + dr * sa;
  const double v = -dc * sa + dr * ca;
  switch (family) {
    case ShapeFamily::Ellipse: {
      const double a = radius, b = radius * aspect;
      return (u * u) / (a * a) + (v * v) / (b * b) <= 1.0;
    }
    case ShapeFamily::Rectangle: {
      const double a = 0.7 * radius, b = 0.7 * radius * aspect;
      return std::abs(u) <= a && std::abs(v) <= b;
    }
    case ShapeFamily::Triangle: {
      // Equilateral, inscribed in the bounding circle: inside when every
      // edge's inward normal test passes (apothem = radius / 2).
      for (int k = 0; k < 3; ++k) {
        const double phi = std::numbers::pi / 2 + k * 2 * std::numbers::pi / 3 + std::numbers::pi / 3;
        if (u * std::cos(phi) + v * std::sin(phi) > radius / 2) return false;
      }
      return true;
    }
    case ShapeFamily::Annulus: {
      const double d2 = u * u + v * v;
      return d2 <= radius * radius && d2 >= 0.25 * radius * radius;
    }
    case ShapeFamily::Cross: {
      const double arm = 0.95 * radius, half = 0.3 * radius;
      return (std::abs(u) <= arm && std::abs(v) <= half) || (std::abs(v) <= arm && std::abs(u) <= half);
    }
  }
  return false;
}

// ---------------------------------------------------------------------------
// volumes

const BinaryMask& VolumeRecord::mask(int class_id, std::size_t slice) const {
  auto it = masks.find(class_id);
  if (it == masks.end()) {
    throw SamplingError("patient " + patient_id + " has no masks for class " + std::to_string(class_id));
  }
  return it->second.at(slice);
}

std::set<int> dataset_classes(const Dataset& dataset) {
  std::set<int> out;
  for (const auto& v : dataset) out.insert(v.class_ids.begin(), v.class_ids.end());
  return out;
}

// ---------------------------------------------------------------------------
// corpus spec

void CorpusSpec::finalize() {
  if (num_classes < 2) throw ConfigError("corpus: num_classes must be at least 2");
  if (num_classes > 5) throw ConfigError("corpus: at most 5 classes (one per shape family)");
  if (samples_per_class < 1) throw ConfigError("corpus: samples_per_class must be positive");
  if (image_height != image_width) throw ConfigError("corpus: image must be square");
  if (image_height <= 0 || image_height % 8 != 0) {
    throw ConfigError("corpus: image size must be a positive multiple of 8");
  }
  if (slices_per_volume < 3) throw ConfigError("corpus: slices_per_volume must be at least 3");
  if (objects_per_volume < 1 || objects_per_volume > num_classes) {
    throw ConfigError("corpus: objects_per_volume must be between 1 and num_classes");
  }
  if (!(min_radius > 0 && max_radius >= min_radius)) throw ConfigError("corpus: bad radius range");
  if (noise_level < 0) throw ConfigError("corpus: noise_level must be non-negative");
  if (families.empty()) {
    const ShapeFamily order[] = {ShapeFamily::Ellipse, ShapeFamily::Rectangle, ShapeFamily::Triangle,
                                 ShapeFamily::Annulus, ShapeFamily::Cross};
    for (int c = 0; c < num_classes; ++c) families.push_back(order[c]);
  }
  if (static_cast<int>(families.size()) != num_classes) {
    throw ConfigError("corpus: families list must have one entry per class");
  }
  if (std::set<ShapeFamily>(families.begin(), families.end()).size() != families.size()) {
    throw ConfigError("corpus: shape families must be distinct across classes");
  }
  if (intensities.empty()) {
    for (int c = 0; c < num_classes; ++c) intensities.push_back(0.35 + 0.6 * c / (num_classes - 1));
  }
  if (static_cast<int>(intensities.size()) != num_classes) {
    throw ConfigError("corpus: intensities list must have one entry per class");
  }
}

const std::set<std::string>& CorpusSpec::config_keys() {
  static const std::set<std::string> keys = {
      "num_classes",      "samples_per_class", "image_size",        "image_height",
      "image_width",      "slices_per_volume", "families",          "intensities",
      "background",       "intensity_jitter",  "texture_amplitude", "noise_level",
      "min_radius",       "max_radius",        "objects_per_volume", "corpus_seed"};
  return keys;
}

CorpusSpec CorpusSpec::from_config(const KeyValueConfig& cfg) {
  CorpusSpec s;
  s.num_classes = static_cast<int>(cfg.get_int("num_classes", s.num_classes));
  s.samples_per_class = static_cast<int>(cfg.get_int("samples_per_class", s.samples_per_class));
  const int size = static_cast<int>(cfg.get_int("image_size", s.image_height));
  s.image_height = static_cast<int>(cfg.get_int("image_height", size));
  s.image_width = static_cast<int>(cfg.get_int("image_width", size));
  s.slices_per_volume = static_cast<int>(cfg.get_int("slices_per_volume", s.slices_per_volume));
  s.objects_per_volume = static_cast<int>(cfg.get_int("objects_per_volume", s.objects_per_volume));
  if (cfg.has("families")) {
    std::istringstream in(cfg.get_string("families", ""));
    std::string item;
    while (std::getline(in, item, ',')) {
      item.erase(0, item.find_first_not_of(' '));
      item.erase(item.find_last_not_of(' ') + 1);
      if (!item.empty()) s.families.push_back(parse_shape_family(item));
    }
  }
  if (cfg.has("intensities")) {
    std::istringstream in(cfg.get_string("intensities", ""));
    std::string item;
    while (std::getline(in, item, ',')) {
      KeyValueConfig one;
      one.set("v", item.substr(item.find_first_not_of(' ')));
      s.intensities.push_back(one.get_double("v", 0));
    }
  }
  s.background = cfg.get_double("background", s.background);
  s.intensity_jitter = cfg.get_double("intensity_jitter", s.intensity_jitter);
  s.texture_amplitude = cfg.get_double("texture_amplitude", s.texture_amplitude);
  s.noise_level = cfg.get_double("noise_level", s.noise_level);
  s.min_radius = cfg.get_double("min_radius", s.min_radius);
  s.max_radius = cfg.get_double("max_radius", s.max_radius);
  s.seed = cfg.get_uint("corpus_seed", s.seed);
  s.finalize();
  return s;
}

void CorpusSpec::to_config(KeyValueConfig& cfg) const {
  cfg.set("num_classes", std::to_string(num_classes));
  cfg.set("samples_per_class", std::to_string(samples_per_class));
  cfg.set("image_height", std::to_string(image_height));
  cfg.set("image_width", std::to_string(image_width));
  cfg.set("slices_per_volume", std::to_string(slices_per_volume));
  cfg.set("objects_per_volume", std::to_string(objects_per_volume));
  std::string fam, inten;
  for (std::size_t i = 0; i < families.size(); ++i) fam += (i ? "," : "") + to_string(families[i]);
  for (std::size_t i = 0; i < intensities.size(); ++i) inten += (i ? "," : "") + format_double(intensities[i]);
  if (!fam.empty()) cfg.set("families", fam);
  if (!inten.empty()) cfg.set("intensities", inten);
  cfg.set("background", format_double(background));
  cfg.set("intensity_jitter", format_double(intensity_jitter));
  cfg.set("texture_amplitude", format_double(texture_amplitude));
  cfg.set("noise_level", format_double(noise_level));
  cfg.set("min_radius", format_double(min_radius));
  cfg.set("max_radius", format_double(max_radius));
  cfg.set("corpus_seed", std::to_string(seed));
}

// ---------------------------------------------------------------------------
// corpus generation

namespace {

struct ObjectPlan {
  int class_id = 0;
  int first_slice = 0;
  int run_length = 0;
  double center_row = 0, center_col = 0;
  double drift_row = 0, drift_col = 0;
  double radius = 0, aspect = 1, angle = 0, spin = 0;
  double intensity = 0;
  double tex_period = 8, tex_angle = 0, tex_phase = 0;
};

constexpr double kDriftPx = 1.5;

std::vector<ObjectPlan> plan_volume(const CorpusSpec& spec, int primary_class, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };
  const int S = spec.slices_per_volume;
  const double size = spec.image_height;

  // Primary class first, then distinct distractor classes.
  std::vector<int> others;
  for (int c = 1; c <= spec.num_classes; ++c) {
    if (c != primary_class) others.push_back(c);
  }
  std::shuffle(others.begin(), others.end(), rng);
  std::vector<int> present{primary_class};
  for (int c : others) {
    if (static_cast<int>(present.size()) >= spec.objects_per_volume) break;
    present.push_back(c);
  }

  std::vector<ObjectPlan> plans;
  for (int c : present) {
    ObjectPlan p;
    p.class_id = c;
    const int min_run = std::min(S, std::max(3, static_cast<int>(std::ceil(0.6 * S))));
    p.run_length = min_run + static_cast<int>(unit(rng) * (S - min_run + 1));
    p.run_length = std::min(p.run_length, S);
    p.first_slice = static_cast<int>(unit(rng) * (S - p.run_length + 1));
    p.first_slice = std::min(p.first_slice, S - p.run_length);
    p.radius = uniform(spec.min_radius, spec.max_radius);
    p.aspect = uniform(0.6, 0.9);
    p.angle = uniform(0.0, 2 * std::numbers::pi);
    p.spin = uniform(-0.04, 0.04);
    p.drift_row = uniform(-kDriftPx, kDriftPx);
    p.drift_col = uniform(-kDriftPx, kDriftPx);
    p.intensity = spec.intensities[c - 1] + uniform(-spec.intensity_jitter, spec.intensity_jitter);
    p.tex_period = uniform(6.0, 12.0);
    p.tex_angle = uniform(0.0, std::numbers::pi);
    p.tex_phase = uniform(0.0, 2 * std::numbers::pi);
    plans.push_back(p);
  }

  // Non-overlapping placement by rejection sampling.
  for (int attempt = 0; attempt < 2000; ++attempt) {
    bool ok = true;
    for (std::size_t i = 0; i < plans.size() && ok; ++i) {
      const double bound = plans[i].radius + kDriftPx + 1.0;
      const double lo = bound, hi = size - 1.0 - bound;
      if (hi <= lo) throw ConfigError("corpus: objects do not fit in the image");
      plans[i].center_row = uniform(lo, hi);
      plans[i].center_col = uniform(lo, hi);
      for (std::size_t j = 0; j < i; ++j) {
        const double dr = plans[i].center_row - plans[j].center_row;
        const double dc = plans[i].center_col - plans[j].center_col;
        const double need = plans[i].radius + plans[j].radius + 2 * kDriftPx + 2.0;
        if (dr * dr + dc * dc < need * need) {
          ok = false;
          break;
        }
      }
    }
    if (ok) return plans;
  }
  throw ConfigError("corpus: could not place objects without overlap; reduce radii or classes");
}

}  // namespace

Dataset generate_synthetic_corpus(const CorpusSpec& in) {
  CorpusSpec spec = in;
  spec.finalize();
  std::mt19937_64 rng(spec.seed);
  const int H = spec.image_height, W = spec.image_width, S = spec.slices_per_volume;
  const int num_volumes = spec.num_classes * spec.samples_per_class;

  Dataset dataset;
  dataset.reserve(num_volumes);
  for (int v = 0; v < num_volumes; ++v) {
    const int primary = v % spec.num_classes + 1;
    auto plans = plan_volume(spec, primary, rng);
    std::normal_distribution<double> noise(0.0, 1.0);

    VolumeRecord vol;
    char id[16];
    std::snprintf(id, sizeof(id), "p%03d", v);
    vol.patient_id = id;
    for (const auto& p : plans) {
      vol.class_ids.insert(p.class_id);
      vol.masks[p.class_id].assign(S, BinaryMask(H, W));
      vol.shapes[p.class_id].assign(S, std::nullopt);
    }

    for (int s = 0; s < S; ++s) {
      SliceImage img(H, W, spec.background);
      for (const auto& p : plans) {
        const int t = s - p.first_slice;
        if (t < 0 || t >= p.run_length) continue;
        const double phase = (t + 0.5) / p.run_length;
        const double frac = p.run_length > 1 ? static_cast<double>(t) / (p.run_length - 1) - 0.5 : 0.0;
        ShapeInstance shape;
        shape.family = spec.family_of(p.class_id);
        shape.radius = p.radius * (0.75 + 0.25 * std::sin(std::numbers::pi * phase));
        shape.center_row = p.center_row + p.drift_row * frac;
        shape.center_col = p.center_col + p.drift_col * frac;
        shape.aspect = p.aspect;
        shape.angle = p.angle + p.spin * t;
        vol.shapes[p.class_id][s] = shape;

        BinaryMask& m = vol.masks[p.class_id][s];
        const double ct = std::cos(p.tex_angle), st = std::sin(p.tex_angle);
        for (int r = 0; r < H; ++r) {
          for (int c = 0; c < W; ++c) {
            if (!shape.contains(r, c)) continue;
            m.at(r, c) = 1;
            img.at(r, c) = p.intensity + spec.texture_amplitude *
                                             std::sin(2 * std::numbers::pi * (r * st + c * ct) / p.tex_period +
                                                      p.tex_phase);
          }
        }
      }
      if (spec.noise_level > 0) {
        for (auto& px : img.pixels) px += spec.noise_level * noise(rng);
      }
      for (auto& px : img.pixels) px = std::clamp(px, 0.0, 1.0);
      vol.slices.push_back(std::move(img));
    }
    dataset.push_back(std::move(vol));
  }
  return dataset;
}

// ---------------------------------------------------------------------------
// on-disk layout

void write_dataset(const std::string& root, const Dataset& dataset) {
  fs::create_directories(root);
  std::ostringstream manifest;
  manifest << "latentseg-dataset 1\n";
  manifest << "patients " << dataset.size() << "\n";
  for (const auto& vol : dataset) {
    if (vol.slices.empty()) throw IoError("volume " + vol.patient_id + " has no slices");
    const fs::path dir = fs::path(root) / vol.patient_id;
    fs::create_directories(dir);
    manifest << "patient " << vol.patient_id << " slices " << vol.slices.size() << " size "
             << vol.slices[0].height << " " << vol.slices[0].width << " classes";
    for (int c : vol.class_ids) manifest << " " << c;
    manifest << "\n";
    for (std::size_t k = 0; k < vol.slices.size(); ++k) {
      write_png((dir / ("img_" + std::to_string(k) + ".png")).string(), vol.slices[k]);
      for (int c : vol.class_ids) {
        write_png((dir / ("mask_" + std::to_string(c) + "_" + std::to_string(k) + ".png")).string(),
                  vol.mask(c, k));
      }
    }
  }
  std::ofstream out(fs::path(root) / "manifest.txt");
  if (!out) throw IoError("cannot write manifest in " + root);
  out << manifest.str();
}

Dataset read_dataset(const std::string& root) {
  const fs::path manifest_path = fs::path(root) / "manifest.txt";
  std::ifstream in(manifest_path);
  if (!in) throw IoError("missing dataset manifest: " + manifest_path.string());
  std::string line;
  std::getline(in, line);
  if (line != "latentseg-dataset 1") throw IoError("unrecognized manifest header in " + manifest_path.string());
  Dataset dataset;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (tag != "patient") continue;
    VolumeRecord vol;
    std::string word;
    std::size_t slices = 0;
    int h = 0, w = 0;
    ls >> vol.patient_id >> word >> slices >> word >> h >> w >> word;
    if (!ls || word != "classes") throw IoError("malformed manifest line: " + line);
    int c = 0;
    while (ls >> c) vol.class_ids.insert(c);
    const fs::path dir = fs::path(root) / vol.patient_id;
    for (std::size_t k = 0; k < slices; ++k) {
      SliceImage img = read_png_image((dir / ("img_" + std::to_string(k) + ".png")).string());
      if (img.height != h || img.width != w) throw IoError("slice size mismatch in " + dir.string());
      vol.slices.push_back(std::move(img));
      for (int cls : vol.class_ids) {
        vol.masks[cls].push_back(
            read_png_mask((dir / ("mask_" + std::to_string(cls) + "_" + std::to_string(k) + ".png")).string()));
      }
    }
    dataset.push_back(std::move(vol));
  }
  return dataset;
}

// ---------------------------------------------------------------------------
// pseudo-labels

double otsu_threshold(const std::vector<const SliceImage*>& slices) {
  double lo = 1e300, hi = -1e300;
  std::size_t n = 0;
  for (const auto* s : slices) {
    for (double v : s->pixels) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
      ++n;
    }
  }
  if (n == 0 || hi <= lo) return hi;
  constexpr int kBins = 256;
  std::vector<double> hist(kBins, 0.0);
  auto bin_of = [&](double v) {
    return std::min(kBins - 1, static_cast<int>((v - lo) / (hi - lo) * kBins));
  };
  for (const auto* s : slices) {
    for (double v : s->pixels) hist[bin_of(v)] += 1;
  }
  double total_mean = 0;
  for (int b = 0; b < kBins; ++b) total_mean += b * hist[b];
  total_mean /= n;
  double w0 = 0, sum0 = 0, best = -1;
  int best_bin = 0;
  for (int b = 0; b < kBins - 1; ++b) {
    w0 += hist[b];
    sum0 += b * hist[b];
    if (w0 == 0 || w0 == static_cast<double>(n)) continue;
    const double m0 = sum0 / w0;
    const double m1 = (total_mean * n - sum0) / (n - w0);
    const double between = w0 * (n - w0) * (m0 - m1) * (m0 - m1);
    if (between > best) {
      best = between;
      best_bin = b;
    }
  }
  // Upper edge of the last background bin.
  return lo + (hi - lo) * (best_bin + 1) / kBins;
}

VolumeRecord generate_pseudo_labels(const VolumeRecord& volume, const PseudoLabelParams& params) {
  if (volume.slices.empty()) throw ShapeError("pseudo-labels: volume has no slices");
  const int D = static_cast<int>(volume.slices.size());
  const int H = volume.slices[0].height, W = volume.slices[0].width;
  std::vector<const SliceImage*> ptrs;
  for (const auto& s : volume.slices) {
    if (s.height != H || s.width != W) throw ShapeError("pseudo-labels: slice shapes differ");
    ptrs.push_back(&s);
  }
  const double threshold = params.threshold ? *params.threshold : otsu_threshold(ptrs);

  const std::size_t plane = static_cast<std::size_t>(H) * W;
  std::vector<int> label(plane * D, -1);  // -1 foreground unvisited, 0 background
  for (int z = 0; z < D; ++z) {
    for (std::size_t i = 0; i < plane; ++i) {
      label[z * plane + i] = volume.slices[z].pixels[i] > threshold ? -1 : 0;
    }
  }

  VolumeRecord out;
  out.patient_id = volume.patient_id;
  out.slices = volume.slices;
  int next = 0;
  std::vector<std::size_t> component;
  std::deque<std::size_t> queue;
  for (std::size_t start = 0; start < label.size(); ++start) {
    if (label[start] != -1) continue;
    component.clear();
    label[start] = -2;
    queue.push_back(start);
    while (!queue.empty()) {
      const std::size_t idx = queue.front();
      queue.pop_front();
      component.push_back(idx);
      const int z = static_cast<int>(idx / plane);
      const int r = static_cast<int>((idx % plane) / W);
      const int c = static_cast<int>(idx % W);
      const int nb[6][3] = {{z - 1, r, c}, {z + 1, r, c}, {z, r - 1, c}, {z, r + 1, c}, {z, r, c - 1}, {z, r, c + 1}};
      for (const auto& n : nb) {
        if (n[0] < 0 || n[0] >= D || n[1] < 0 || n[1] >= H || n[2] < 0 || n[2] >= W) continue;
        const std::size_t j = n[0] * plane + static_cast<std::size_t>(n[1]) * W + n[2];
        if (label[j] == -1) {
          label[j] = -2;
          queue.push_back(j);
        }
      }
    }
    if (static_cast<int>(component.size()) < params.min_voxels) {
      for (auto idx : component) label[idx] = 0;
      continue;
    }
    ++next;
    for (auto idx : component) label[idx] = next;
    out.class_ids.insert(next);
    auto& masks = out.masks[next];
    masks.assign(D, BinaryMask(H, W));
    for (auto idx : component) masks[idx / plane].pixels[idx % plane] = 1;
  }
  return out;
}

// ---------------------------------------------------------------------------
// augmentation

std::pair<double, double> rotate_offset(double dr, double dc, double angle, double scale) {
  const double ca = std::cos(angle), sa = std::sin(angle);
  return {scale * (dr * ca - dc * sa), scale * (dr * sa + dc * ca)};
}

AugmentParams sample_augment_params(const AugmentConfig& config, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };
  AugmentParams p;
  const double max_rot = config.max_rotation_deg * std::numbers::pi / 180.0;
  p.rotation_rad = uniform(-max_rot, max_rot);
  p.scale = uniform(config.min_scale, config.max_scale);
  p.translate_row = uniform(-config.max_translate_px, config.max_translate_px);
  p.translate_col = uniform(-config.max_translate_px, config.max_translate_px);
  if (config.elastic_px > 0 && config.elastic_grid >= 2) {
    p.elastic_grid = config.elastic_grid;
    const int n = config.elastic_grid * config.elastic_grid;
    for (int i = 0; i < n; ++i) p.elastic_row.push_back(uniform(-config.elastic_px, config.elastic_px));
    for (int i = 0; i < n; ++i) p.elastic_col.push_back(uniform(-config.elastic_px, config.elastic_px));
  }
  return p;
}

namespace {

double keys_weight(double x) {
  constexpr double a = -0.5;
  x = std::abs(x);
  if (x <= 1) return (a + 2) * x * x * x - (a + 3) * x * x + 1;
  if (x < 2) return a * x * x * x - 5 * a * x * x + 8 * a * x - 4 * a;
  return 0;
}

double snap(double x) {
  const double r = std::round(x);
  return std::abs(x - r) < 1e-9 ? r : x;
}

}  // namespace

std::vector<double> bicubic_upsample(const std::vector<double>& grid, int grid_h, int grid_w, int height,
                                     int width) {
  std::vector<double> out(static_cast<std::size_t>(height) * width, 0.0);
  auto g = [&](int i, int j) {
    i = std::clamp(i, 0, grid_h - 1);
    j = std::clamp(j, 0, grid_w - 1);
    return grid[static_cast<std::size_t>(i) * grid_w + j];
  };
  for (int r = 0; r < height; ++r) {
    const double gy = height > 1 ? static_cast<double>(r) * (grid_h - 1) / (height - 1) : 0.0;
    const int iy = static_cast<int>(std::floor(gy));
    for (int c = 0; c < width; ++c) {
      const double gx = width > 1 ? static_cast<double>(c) * (grid_w - 1) / (width - 1) : 0.0;
      const int ix = static_cast<int>(std::floor(gx));
      double acc = 0;
      for (int m = -1; m <= 2; ++m) {
        const double wy = keys_weight(gy - (iy + m));
        if (wy == 0) continue;
        for (int n = -1; n <= 2; ++n) acc += wy * keys_weight(gx - (ix + n)) * g(iy + m, ix + n);
      }
      out[static_cast<std::size_t>(r) * width + c] = acc;
    }
  }
  return out;
}

std::pair<SliceImage, BinaryMask> apply_augment(const SliceImage& image, const BinaryMask& mask,
                                                const AugmentParams& params) {
  require_same_shape(image, mask, "augment");
  const int H = image.height, W = image.width;
  const double cy = (H - 1) / 2.0, cx = (W - 1) / 2.0;
  std::vector<double> field_r, field_c;
  if (params.elastic_grid >= 2) {
    field_r = bicubic_upsample(params.elastic_row, params.elastic_grid, params.elastic_grid, H, W);
    field_c = bicubic_upsample(params.elastic_col, params.elastic_grid, params.elastic_grid, H, W);
  }
  const double ca = std::cos(params.rotation_rad), sa = std::sin(params.rotation_rad);

  SliceImage out_img(H, W);
  BinaryMask out_mask(H, W);
  for (int r = 0; r < H; ++r) {
    for (int c = 0; c < W; ++c) {
      double qr = r, qc = c;
      if (!field_r.empty()) {
        qr += field_r[static_cast<std::size_t>(r) * W + c];
        qc += field_c[static_cast<std::size_t>(r) * W + c];
      }
      const double ur = qr - cy - params.translate_row;
      const double uc = qc - cx - params.translate_col;
      const double sr = snap(cy + (ur * ca + uc * sa) / params.scale);
      const double sc = snap(cx + (-ur * sa + uc * ca) / params.scale);

      // Bilinear, edge-clamped.
      const double yr = std::clamp(sr, 0.0, H - 1.0), xr = std::clamp(sc, 0.0, W - 1.0);
      const int y0 = static_cast<int>(std::floor(yr)), x0 = static_cast<int>(std::floor(xr));
      const int y1 = std::min(y0 + 1, H - 1), x1 = std::min(x0 + 1, W - 1);
      const double fy = yr - y0, fx = xr - x0;
      double v = image.at(y0, x0);
      if (fy != 0 || fx != 0) {
        v = (1 - fy) * ((1 - fx) * image.at(y0, x0) + fx * image.at(y0, x1)) +
            fy * ((1 - fx) * image.at(y1, x0) + fx * image.at(y1, x1));
      }
      out_img.at(r, c) = v;

      const int nr = static_cast<int>(std::floor(sr + 0.5)), nc = static_cast<int>(std::floor(sc + 0.5));
      out_mask.at(r, c) = (nr >= 0 && nr < H && nc >= 0 && nc < W) ? mask.at(nr, nc) : 0;
    }
  }
  return {std::move(out_img), std::move(out_mask)};
}

std::pair<SliceImage, BinaryMask> augment(const SliceImage& image, const BinaryMask& mask,
                                          const AugmentConfig& config, std::mt19937_64& rng) {
  return apply_augment(image, mask, sample_augment_params(config, rng));
}

SliceImage adjust_gamma(const SliceImage& image, double gamma) {
  if (!(gamma > 0)) throw DomainError("adjust_gamma: gamma must be positive");
  SliceImage out = image;
  for (auto& v : out.pixels) v = std::pow(std::clamp(v, 0.0, 1.0), gamma);
  return out;
}

double sample_gamma(double max_gamma, std::mt19937_64& rng) {
  if (max_gamma <= 1.0) return 1.0;
  const double span = std::log(max_gamma);
  return std::exp(std::uniform_real_distribution<double>(-span, span)(rng));
}

double IntensityCurve::operator()(double v) const {
  if (knots.size() < 2) throw DomainError("intensity curve needs at least two knots");
  const double x = std::clamp(v, 0.0, 1.0) * static_cast<double>(knots.size() - 1);
  const std::size_t k = std::min(static_cast<std::size_t>(x), knots.size() - 2);
  const double t = x - static_cast<double>(k);
  return (1 - t) * knots[k] + t * knots[k + 1];
}

IntensityCurve sample_intensity_curve(int knots, double floor, std::mt19937_64& rng) {
  if (knots < 2) throw DomainError("intensity curve needs at least two knots");
  if (!(floor >= 0 && floor < 1)) throw DomainError("intensity curve floor must be in [0, 1)");
  IntensityCurve curve;
  std::uniform_real_distribution<double> above(floor, 1.0);
  for (int k = 0; k < knots; ++k) {
    const double x = static_cast<double>(k) / (knots - 1);
    curve.knots.push_back(x <= floor ? x : above(rng));
  }
  return curve;
}

SliceImage remap_intensity(const SliceImage& image, const IntensityCurve& curve) {
  SliceImage out = image;
  for (auto& v : out.pixels) v = curve(v);
  return out;
}

// ---------------------------------------------------------------------------
// episodes

BinaryMask downsample_nearest(const BinaryMask& mask, int h, int w) {
  if (h <= 0 || w <= 0) throw ShapeError("downsample_nearest: empty target grid");
  BinaryMask out(h, w);
  for (int i = 0; i < h; ++i) {
    const int sr = std::min(mask.height - 1, static_cast<int>((i + 0.5) * mask.height / h));
    for (int j = 0; j < w; ++j) {
      const int sc = std::min(mask.width - 1, static_cast<int>((j + 0.5) * mask.width / w));
      out.at(i, j) = mask.at(sr, sc);
    }
  }
  return out;
}

bool is_eligible(const BinaryMask& mask, int grid_factor) {
  if (grid_factor <= 1) return !mask.empty_foreground();
  return !downsample_nearest(mask, mask.height / grid_factor, mask.width / grid_factor).empty_foreground();
}

ClassSplit ClassSplit::hold_out(const std::set<int>& all_classes, const std::set<int>& test_classes) {
  ClassSplit split;
  for (int c : test_classes) {
    if (!all_classes.count(c)) throw ConfigError("split: test class " + std::to_string(c) + " not in dataset");
  }
  split.test = test_classes;
  for (int c : all_classes) {
    if (!test_classes.count(c)) split.train.insert(c);
  }
  if (split.train.empty()) throw ConfigError("split: no training classes remain");
  if (split.test.empty()) throw ConfigError("split: no test classes given");
  for (int c : split.train) {
    if (split.test.count(c)) throw ConfigError("split: class " + std::to_string(c) + " in both train and test");
  }
  return split;
}

std::vector<ClassSplit> make_folds(const std::set<int>& all_classes, int num_folds) {
  if (num_folds < 1 || num_folds > static_cast<int>(all_classes.size())) {
    throw ConfigError("folds: need between 1 and " + std::to_string(all_classes.size()) + " folds");
  }
  std::vector<int> ordered(all_classes.begin(), all_classes.end());
  std::vector<ClassSplit> folds;
  for (int f = 0; f < num_folds; ++f) folds.push_back(ClassSplit::hold_out(all_classes, {ordered[f]}));
  return folds;
}

EpisodeSampler::EpisodeSampler(const Dataset& dataset, const std::set<int>& classes, int grid_factor)
    : dataset_(&dataset), classes_(classes), grid_factor_(grid_factor) {
  for (int c : classes_) {
    auto& refs = eligible_[c];
    for (std::size_t v = 0; v < dataset.size(); ++v) {
      auto it = dataset[v].masks.find(c);
      if (it == dataset[v].masks.end()) continue;
      for (std::size_t s = 0; s < it->second.size(); ++s) {
        if (is_eligible(it->second[s], grid_factor)) refs.push_back({v, static_cast<int>(s)});
      }
    }
  }
}

const std::vector<SliceRef>& EpisodeSampler::eligible(int class_id) const {
  auto it = eligible_.find(class_id);
  if (it == eligible_.end()) throw SamplingError("class " + std::to_string(class_id) + " is not in this sampler");
  return it->second;
}

Episode EpisodeSampler::sample(int class_id, int shots, std::mt19937_64& rng) const {
  if (shots < 1) throw SamplingError("episode: shots must be at least 1");
  const auto& refs = eligible(class_id);
  if (refs.size() < static_cast<std::size_t>(shots) + 1) {
    throw SamplingError("class " + std::to_string(class_id) + ": need " + std::to_string(shots + 1) +
                        " slices with nonempty masks, found " + std::to_string(refs.size()));
  }
  // Partial Fisher-Yates over indices.
  std::vector<std::size_t> idx(refs.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  for (int i = 0; i <= shots; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, idx.size() - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  Episode ep;
  ep.class_id = class_id;
  for (int i = 0; i < shots; ++i) {
    const SliceRef r = refs[idx[i]];
    const auto& vol = (*dataset_)[r.volume];
    ep.support_images.push_back(vol.slices[r.slice]);
    ep.support_masks.push_back(vol.mask(class_id, r.slice));
    ep.support_refs.push_back(r);
  }
  ep.query_ref = refs[idx[shots]];
  const auto& qv = (*dataset_)[ep.query_ref.volume];
  ep.query_image = qv.slices[ep.query_ref.slice];
  ep.query_mask = qv.mask(class_id, ep.query_ref.slice);
  return ep;
}

Episode EpisodeSampler::sample(int shots, std::mt19937_64& rng) const {
  if (classes_.empty()) throw SamplingError("episode sampler has no classes");
  std::vector<int> cls(classes_.begin(), classes_.end());
  std::uniform_int_distribution<std::size_t> pick(0, cls.size() - 1);
  return sample(cls[pick(rng)], shots, rng);
}

}  // namespace latentseg
