#pragma once

// Episodic optimization of the U-Net and projector with frozen codec and
// vision encoder.

#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "latentseg/container.hpp"
#include "latentseg/denoiser.hpp"
#include "latentseg/episode_engine.hpp"
#include "latentseg/kv_config.hpp"
#include "latentseg/optim.hpp"

namespace latentseg {

// Where training masks come from: ground-truth masks of the train classes,
// or class-agnostic pseudo-labels computed from the images.
enum class Supervision { GroundTruth, Pseudo };
std::string to_string(Supervision supervision);
Supervision parse_supervision(const std::string& name);

struct TrainConfig {
  long iterations = 2000;
  int shots = 1;
  double weight_decay = 1e-2;
  double lr_unet = 3e-4;
  double lr_mlp = 1.5e-3;
  double grad_clip_norm = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  unsigned long long seed = 42;
  long checkpoint_every = 0;  // 0: final checkpoint only
  bool augment = true;
  AugmentConfig augment_config;
  double max_gamma = 1.5;  // shared by support and query of one episode
  // Chance of a random intensity curve shared by support and query.
  double intensity_remap_prob = 0.0;
  int intensity_remap_knots = 6;
  double intensity_remap_floor = 0.2;  // darker values are left unchanged
  Supervision supervision = Supervision::GroundTruth;
  double pseudo_threshold = -1;  // negative: Otsu per volume
  int pseudo_min_voxels = 100;
  // Pseudo mode: drop regions overlapping any class outside the train set.
  bool pseudo_exclude_held_out = true;
  // Never train on slices that show a class outside the train set.
  bool exclude_held_out_slices = true;

  // Rates and iteration count of the original large-scale setup.
  static TrainConfig large_scale();
  // Desk-scale defaults.
  static TrainConfig desk() { return {}; }

  void validate() const;  // throws ConfigError
  static TrainConfig from_config(const KeyValueConfig& cfg);
  void to_config(KeyValueConfig& cfg) const;
  static const std::set<std::string>& config_keys();
};

// Classes and masks the sampler draws training episodes from.
struct TrainingSource {
  Dataset dataset;
  std::set<int> classes;
};

// Ground truth: the dataset restricted to `train_classes`. Pseudo: every
// volume's pseudo-labels, renumbered so ids are unique across volumes, keeping
// regions with enough eligible slices for one episode. With
// exclude_held_out_slices, slices showing a non-train class carry no masks.
TrainingSource build_training_source(const Dataset& dataset, const std::set<int>& train_classes,
                                     const TrainConfig& config, int grid_factor);

// Per-step deterministic episode: rng seeded from (seed, step), uniform
// train class, optional spatial augmentation per slice and one gamma per
// episode.
Episode sample_training_episode(const EpisodeSampler& sampler, const TrainConfig& config, long step);

// "c<class>/v<volume>s<slice>" for the query, with the support refs.
std::string episode_id(const Episode& episode);

struct StepResult {
  double loss = 0;
  double grad_norm = 0;          // before clipping
  double clipped_grad_norm = 0;  // after clipping
};

class Trainer {
 public:
  // Group 0: U-Net at lr_unet; group 1: projector at lr_mlp.
  Trainer(SegmentationModel& model, const TrainConfig& config);

  // One forward/backward/clip/update. Throws TrainingError on a non-finite
  // loss, naming the step and the episode id.
  StepResult step(const EpisodeLatents& latents, const std::string& id = "");
  StepResult step(const Episode& episode);

  long steps_done() const { return optimizer_.steps_taken(); }
  const std::vector<double>& losses() const { return losses_; }
  const TrainConfig& config() const { return config_; }
  SegmentationModel& model() { return *model_; }
  nn::ParamList<float> trainable() const;

  // Model, optimizer moments, step index, loss history and config echo.
  // `extra` entries are added to the header as-is.
  void write_checkpoint(const std::string& path, const std::map<std::string, std::string>& extra = {}) const;
  // Restores into this trainer; the model architecture must match.
  void read_checkpoint(const std::string& path);

 private:
  SegmentationModel* model_;
  TrainConfig config_;
  nn::AdamW<float> optimizer_;
  std::vector<double> losses_;
};

struct TrainOptions {
  std::string checkpoint_dir;   // empty: no files written
  std::string resume_from;      // checkpoint to continue from
  std::function<void(long step, const StepResult&)> progress;
  std::map<std::string, std::string> header;  // extra checkpoint header entries
};

struct TrainSummary {
  std::vector<double> losses;
  long steps = 0;
  std::string final_checkpoint;
  double seconds = 0;
};

// Samples episodes from `train_classes` only. Writes ckpt_<step>.bin every
// checkpoint_every steps, final.bin and losses.csv into checkpoint_dir.
TrainSummary run_training(SegmentationModel& model, const Dataset& dataset, const std::set<int>& train_classes,
                          const TrainConfig& config, const TrainOptions& options = {});

void write_loss_csv(const std::string& path, const std::vector<double>& losses);

}  // namespace latentseg
