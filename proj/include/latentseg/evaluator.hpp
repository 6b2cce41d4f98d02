#pragma once

// Overlap and surface metrics, the three-part volume protocol, and
// held-out-class evaluation.

#include <array>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "latentseg/denoiser.hpp"
#include "latentseg/episode_engine.hpp"
#include "latentseg/types.hpp"

namespace latentseg {

// 2|P & G| / (|P| + |G|); 1 when both are empty.
double dice(const BinaryMask& pred, const BinaryMask& gt);

// Foreground pixels with at least one background 4-neighbor. Pixels outside
// the image count as background. Returned as (row, col), row-major order.
std::vector<std::pair<int, int>> boundary_points(const BinaryMask& mask);

// Euclidean distance from every pixel to the nearest set pixel; +inf
// everywhere when no pixel is set.
std::vector<double> distance_transform(const BinaryMask& targets);

struct SurfaceDistances {
  double hd95 = 0;
  double assd = 0;
  bool sentinel = false;  // exactly one mask empty: both set to the image diagonal
};

// hd95: 95th percentile (linear interpolation) of the pooled directed
// boundary-to-boundary distances. assd: mean of the two directed means.
// Both empty gives zeros.
SurfaceDistances surface_distances(const BinaryMask& pred, const BinaryMask& gt);
double hd95(const BinaryMask& pred, const BinaryMask& gt);
double assd(const BinaryMask& pred, const BinaryMask& gt);

// ---- protocol ----

struct Part {
  int begin = 0;  // positions in the eligible-slice list, [begin, end)
  int end = 0;
  int size() const { return end - begin; }
  // Lower middle for even sizes.
  int middle() const { return begin + (size() - 1) / 2; }
};

// n >= 3 items into 3 consecutive parts; the first n % 3 parts get one extra.
std::array<Part, 3> split_three(int n);

struct QueryAssignment {
  std::size_t volume = 0;
  std::string patient_id;
  int slice = 0;
  int part = 0;  // index of the support slice used
};

struct ProtocolPlan {
  int class_id = 0;
  std::size_t support_volume = 0;
  std::string support_patient;
  std::vector<int> support_eligible;     // slice indices containing the class
  std::array<Part, 3> support_parts;
  std::array<int, 3> support_slices{};   // middle slice of each support part
  std::vector<QueryAssignment> queries;
};

// Slices whose class mask survives downsampling by grid_factor.
std::vector<int> eligible_slices(const VolumeRecord& volume, int class_id, int grid_factor = 1);

// Splits the eligible slices of the support volume and of each query volume
// into three parts; query part i uses support slice i. Query volumes from the
// support patient are skipped. Throws ProtocolError naming the patient when a
// volume has fewer than three eligible slices.
ProtocolPlan plan_protocol(const Dataset& dataset, int class_id, std::size_t support_volume,
                           const std::vector<std::size_t>& query_volumes, int grid_factor = 1);

// ---- evaluation ----

struct VolumeScore {
  int class_id = 0;
  std::string patient_id;
  int slices = 0;
  double dice = 0;  // means over the volume's evaluated slices
  double hd95 = 0;
  double assd = 0;
  int sentinel_slices = 0;  // slices where a surface sentinel was used
};

struct ClassScore {
  int class_id = 0;
  std::string support_patient;
  int volumes = 0;
  double dice = 0;  // means over query volumes
  double hd95 = 0;
  double assd = 0;
};

struct MetricReport {
  std::vector<VolumeScore> volumes;
  std::vector<ClassScore> classes;
  int episodes = 0;
  double mean_dice = 0;  // means over classes
  double mean_hd95 = 0;
  double mean_assd = 0;

  // Rows per class with Dice, HD95 and ASSD, then the mean row.
  std::string to_text() const;
  // One row per volume, then one per class, then the overall mean.
  std::string to_csv() const;
};

struct EvalSpec {
  std::set<int> test_classes;
  // Patient supplying the support slices. Empty: the first volume, in
  // dataset order, with at least three eligible slices for the class.
  std::string support_patient;
  ConditionMode condition = ConditionMode::Projected;
};

MetricReport evaluate(const SegmentationModel& model, const Dataset& dataset, const EvalSpec& spec);

// Aggregates volume scores into class and overall means.
void summarize(MetricReport& report);

}  // namespace latentseg
