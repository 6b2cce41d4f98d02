#pragma once

// Datasets, synthetic corpus, pseudo-labels, augmentation and episodic
// sampling for 1-way K-shot segmentation.

#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "latentseg/kv_config.hpp"
#include "latentseg/types.hpp"

namespace latentseg {

enum class ShapeFamily { Ellipse, Rectangle, Triangle, Annulus, Cross };

std::string to_string(ShapeFamily family);
ShapeFamily parse_shape_family(const std::string& name);

// One analytic object outline in pixel coordinates (row, col of pixel centers).
struct ShapeInstance {
  ShapeFamily family = ShapeFamily::Ellipse;
  double center_row = 0;
  double center_col = 0;
  double radius = 0;  // bounding-circle radius
  double aspect = 1;  // minor/major ratio for ellipse and rectangle
  double angle = 0;   // radians

  bool contains(double row, double col) const;
};

struct VolumeRecord {
  std::string patient_id;
  std::vector<SliceImage> slices;
  // class id -> one mask per slice (empty masks where the class is absent).
  std::map<int, std::vector<BinaryMask>> masks;
  std::set<int> class_ids;
  // Generating outlines for synthetic volumes: class id -> per slice.
  std::map<int, std::vector<std::optional<ShapeInstance>>> shapes;

  std::size_t num_slices() const { return slices.size(); }
  const BinaryMask& mask(int class_id, std::size_t slice) const;
};

using Dataset = std::vector<VolumeRecord>;

std::set<int> dataset_classes(const Dataset& dataset);

struct CorpusSpec {
  int num_classes = 3;
  int samples_per_class = 10;  // volumes generated per class
  int image_height = 64;
  int image_width = 64;
  int slices_per_volume = 12;
  int objects_per_volume = 2;  // the volume's own class plus random other classes
  std::vector<ShapeFamily> families;  // per class; defaults cycle through all families
  std::vector<double> intensities;    // per class; defaults evenly spaced in [0.35, 0.95]
  double background = 0.1;
  double intensity_jitter = 0.03;  // per-volume class intensity offset
  double texture_amplitude = 0.04;
  double noise_level = 0.01;
  double min_radius = 8.0;
  double max_radius = 11.0;
  std::uint64_t seed = 7;

  // Fills families/intensities defaults and validates; throws ConfigError.
  void finalize();
  ShapeFamily family_of(int class_id) const { return families.at(class_id - 1); }

  static CorpusSpec from_config(const KeyValueConfig& cfg);
  void to_config(KeyValueConfig& cfg) const;
  static const std::set<std::string>& config_keys();
};

// Volume v belongs to class v % num_classes + 1 and also holds objects of
// other classes up to objects_per_volume. Each object is visible in a contiguous
// run of slices with smoothly varying size and position. Class ids are
// 1..num_classes; 0 is reserved for background.
Dataset generate_synthetic_corpus(const CorpusSpec& spec);

// ---- on-disk layout ----
// <root>/manifest.txt, <root>/<patient>/img_<k>.png, <root>/<patient>/mask_<class>_<k>.png
void write_dataset(const std::string& root, const Dataset& dataset);
Dataset read_dataset(const std::string& root);

// ---- pseudo-labels ----
struct PseudoLabelParams {
  std::optional<double> threshold;  // empty: Otsu threshold of the volume
  int min_voxels = 100;
};

// Foreground = intensity strictly above the threshold; pseudo-classes are the
// 6-connected 3D components with at least min_voxels voxels, numbered 1..n in
// raster order of their first voxel. Returns the volume with masks replaced.
VolumeRecord generate_pseudo_labels(const VolumeRecord& volume, const PseudoLabelParams& params);

double otsu_threshold(const std::vector<const SliceImage*>& slices);

// ---- augmentation ----
struct AugmentConfig {
  double max_rotation_deg = 15.0;
  double min_scale = 0.9;
  double max_scale = 1.1;
  double max_translate_px = 4.0;
  double elastic_px = 4.0;  // peak control-point displacement
  int elastic_grid = 4;     // control points per side
};

// Output pixel q samples the source at A^-1 (q + d(q) - center - t) + center,
// where A = scale * R(angle) acts on (row, col) offsets from the center as
// (dr, dc) -> scale * (dr cos - dc sin, dr sin + dc cos). With rows growing
// downward a positive angle turns content counterclockwise on screen.
struct AugmentParams {
  double rotation_rad = 0;
  double scale = 1;
  double translate_row = 0;
  double translate_col = 0;
  int elastic_grid = 0;  // 0 disables the elastic field
  std::vector<double> elastic_row;  // grid*grid control displacements
  std::vector<double> elastic_col;
};

// Forward map of an offset from the image center under rotation+scale.
std::pair<double, double> rotate_offset(double dr, double dc, double angle, double scale);

AugmentParams sample_augment_params(const AugmentConfig& config, std::mt19937_64& rng);

// Image resampled bilinearly (edge-clamped), mask by nearest neighbor (zero outside).
std::pair<SliceImage, BinaryMask> apply_augment(const SliceImage& image, const BinaryMask& mask,
                                                const AugmentParams& params);

std::pair<SliceImage, BinaryMask> augment(const SliceImage& image, const BinaryMask& mask,
                                          const AugmentConfig& config, std::mt19937_64& rng);

// Intensity transform v -> v^gamma, applied pixelwise.
SliceImage adjust_gamma(const SliceImage& image, double gamma);

// gamma = exp(u), u ~ U(-log(max_gamma), log(max_gamma)); 1 when max_gamma <= 1.
double sample_gamma(double max_gamma, std::mt19937_64& rng);

// Piecewise-linear intensity curve through evenly spaced knots on [0, 1].
struct IntensityCurve {
  std::vector<double> knots;  // values at x = k / (knots.size() - 1)
  double operator()(double v) const;
};

// Knots at or below `floor` keep their identity value; the rest are drawn
// independently from U(floor, 1), so the curve need not be monotone above it.
IntensityCurve sample_intensity_curve(int knots, double floor, std::mt19937_64& rng);
SliceImage remap_intensity(const SliceImage& image, const IntensityCurve& curve);

// Keys bicubic upsampling of a grid_h x grid_w field to height x width, with
// control points spread evenly over the image extent.
std::vector<double> bicubic_upsample(const std::vector<double>& grid, int grid_h, int grid_w,
                                     int height, int width);

// ---- episodes ----
struct SliceRef {
  std::size_t volume = 0;
  int slice = 0;
  bool operator==(const SliceRef&) const = default;
  auto operator<=>(const SliceRef&) const = default;
};

struct Episode {
  int class_id = 0;
  std::vector<SliceImage> support_images;
  std::vector<BinaryMask> support_masks;
  SliceImage query_image;
  BinaryMask query_mask;
  std::vector<SliceRef> support_refs;
  SliceRef query_ref;

  std::size_t shots() const { return support_images.size(); }
};

// Train/test class partition; construction rejects any overlap.
struct ClassSplit {
  std::set<int> train;
  std::set<int> test;

  static ClassSplit hold_out(const std::set<int>& all_classes, const std::set<int>& test_classes);
};

// One class held out per fold, cycling through classes in order.
std::vector<ClassSplit> make_folds(const std::set<int>& all_classes, int num_folds);

class EpisodeSampler {
 public:
  // A slice is eligible for a class when its mask stays nonempty after
  // nearest-neighbor downsampling by grid_factor.
  EpisodeSampler(const Dataset& dataset, const std::set<int>& classes, int grid_factor = 1);

  Episode sample(int class_id, int shots, std::mt19937_64& rng) const;
  // Uniform class choice over the sampler's classes.
  Episode sample(int shots, std::mt19937_64& rng) const;

  const std::vector<SliceRef>& eligible(int class_id) const;
  const std::set<int>& classes() const { return classes_; }
  int grid_factor() const { return grid_factor_; }

 private:
  const Dataset* dataset_;
  std::set<int> classes_;
  std::map<int, std::vector<SliceRef>> eligible_;
  int grid_factor_ = 1;
};

bool is_eligible(const BinaryMask& mask, int grid_factor);

}  // namespace latentseg
