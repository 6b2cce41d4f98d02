#include "latentseg/trainer.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "latentseg/errors.hpp"

namespace latentseg {

TrainConfig TrainConfig::large_scale() {
  TrainConfig c;
  c.iterations = 15000;
  c.lr_unet = 1e-5;
  c.lr_mlp = 5e-5;
  return c;
}

std::string to_string(Supervision supervision) {
  return supervision == Supervision::GroundTruth ? "gt" : "pseudo";
}

Supervision parse_supervision(const std::string& name) {
  if (name == "gt") return Supervision::GroundTruth;
  if (name == "pseudo") return Supervision::Pseudo;
  throw ConfigError("unknown supervision '" + name + "' (expected gt or pseudo)");
}

void TrainConfig::validate() const {
  if (iterations < 0) throw ConfigError("iterations must be >= 0");
  if (shots < 1) throw ConfigError("shots must be >= 1");
  if (!(lr_unet > 0) || !(lr_mlp > 0)) throw ConfigError("learning rates must be positive");
  if (weight_decay < 0) throw ConfigError("weight_decay must be >= 0");
  if (!(grad_clip_norm > 0)) throw ConfigError("grad_clip_norm must be positive");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1 && eps > 0)) throw ConfigError("invalid optimizer moments");
  if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be >= 0");
  if (max_gamma < 1) throw ConfigError("max_gamma must be >= 1");
  if (!(intensity_remap_prob >= 0 && intensity_remap_prob <= 1)) throw ConfigError("intensity_remap_prob must be in [0, 1]");
  if (intensity_remap_knots < 2) throw ConfigError("intensity_remap_knots must be >= 2");
  if (!(intensity_remap_floor >= 0 && intensity_remap_floor < 1)) throw ConfigError("intensity_remap_floor must be in [0, 1)");
  if (pseudo_min_voxels < 1) throw ConfigError("pseudo_min_voxels must be >= 1");
}

const std::set<std::string>& TrainConfig::config_keys() {
  static const std::set<std::string> keys = {
      "iterations", "shots",        "weight_decay",     "lr_unet",   "lr_mlp",        "grad_clip_norm",
      "beta1",      "beta2",        "adam_eps",         "seed",      "checkpoint_every", "augment",
      "max_gamma",  "max_rotation_deg", "min_scale",    "max_scale", "max_translate_px", "elastic_px",
      "elastic_grid", "intensity_remap_prob", "intensity_remap_knots", "intensity_remap_floor", "supervision", "pseudo_threshold", "pseudo_min_voxels", "pseudo_exclude_held_out",
      "exclude_held_out_slices"};
  return keys;
}

TrainConfig TrainConfig::from_config(const KeyValueConfig& cfg) {
  TrainConfig c;
  c.iterations = cfg.get_int("iterations", c.iterations);
  c.shots = static_cast<int>(cfg.get_int("shots", c.shots));
  c.weight_decay = cfg.get_double("weight_decay", c.weight_decay);
  c.lr_unet = cfg.get_double("lr_unet", c.lr_unet);
  c.lr_mlp = cfg.get_double("lr_mlp", c.lr_mlp);
  c.grad_clip_norm = cfg.get_double("grad_clip_norm", c.grad_clip_norm);
  c.beta1 = cfg.get_double("beta1", c.beta1);
  c.beta2 = cfg.get_double("beta2", c.beta2);
  c.eps = cfg.get_double("adam_eps", c.eps);
  c.seed = cfg.get_uint("seed", c.seed);
  c.checkpoint_every = cfg.get_int("checkpoint_every", c.checkpoint_every);
  c.augment = cfg.get_bool("augment", c.augment);
  c.max_gamma = cfg.get_double("max_gamma", c.max_gamma);
  auto& a = c.augment_config;
  a.max_rotation_deg = cfg.get_double("max_rotation_deg", a.max_rotation_deg);
  a.min_scale = cfg.get_double("min_scale", a.min_scale);
  a.max_scale = cfg.get_double("max_scale", a.max_scale);
  a.max_translate_px = cfg.get_double("max_translate_px", a.max_translate_px);
  a.elastic_px = cfg.get_double("elastic_px", a.elastic_px);
  a.elastic_grid = static_cast<int>(cfg.get_int("elastic_grid", a.elastic_grid));
  c.intensity_remap_prob = cfg.get_double("intensity_remap_prob", c.intensity_remap_prob);
  c.intensity_remap_knots = static_cast<int>(cfg.get_int("intensity_remap_knots", c.intensity_remap_knots));
  c.intensity_remap_floor = cfg.get_double("intensity_remap_floor", c.intensity_remap_floor);
  c.supervision = parse_supervision(cfg.get_string("supervision", to_string(c.supervision)));
  c.pseudo_threshold = cfg.get_double("pseudo_threshold", c.pseudo_threshold);
  c.pseudo_min_voxels = static_cast<int>(cfg.get_int("pseudo_min_voxels", c.pseudo_min_voxels));
  c.pseudo_exclude_held_out = cfg.get_bool("pseudo_exclude_held_out", c.pseudo_exclude_held_out);
  c.exclude_held_out_slices = cfg.get_bool("exclude_held_out_slices", c.exclude_held_out_slices);
  c.validate();
  return c;
}

void TrainConfig::to_config(KeyValueConfig& cfg) const {
  cfg.set("iterations", std::to_string(iterations));
  cfg.set("shots", std::to_string(shots));
  cfg.set("weight_decay", format_double(weight_decay));
  cfg.set("lr_unet", format_double(lr_unet));
  cfg.set("lr_mlp", format_double(lr_mlp));
  cfg.set("grad_clip_norm", format_double(grad_clip_norm));
  cfg.set("beta1", format_double(beta1));
  cfg.set("beta2", format_double(beta2));
  cfg.set("adam_eps", format_double(eps));
  cfg.set("seed", std::to_string(seed));
  cfg.set("checkpoint_every", std::to_string(checkpoint_every));
  cfg.set("augment", augment ? "true" : "false");
  cfg.set("max_gamma", format_double(max_gamma));
  cfg.set("max_rotation_deg", format_double(augment_config.max_rotation_deg));
  cfg.set("min_scale", format_double(augment_config.min_scale));
  cfg.set("max_scale", format_double(augment_config.max_scale));
  cfg.set("max_translate_px", format_double(augment_config.max_translate_px));
  cfg.set("elastic_px", format_double(augment_config.elastic_px));
  cfg.set("elastic_grid", std::to_string(augment_config.elastic_grid));
  cfg.set("intensity_remap_prob", format_double(intensity_remap_prob));
  cfg.set("intensity_remap_knots", std::to_string(intensity_remap_knots));
  cfg.set("intensity_remap_floor", format_double(intensity_remap_floor));
  cfg.set("supervision", to_string(supervision));
  cfg.set("pseudo_threshold", format_double(pseudo_threshold));
  cfg.set("pseudo_min_voxels", std::to_string(pseudo_min_voxels));
  cfg.set("pseudo_exclude_held_out", pseudo_exclude_held_out ? "true" : "false");
  cfg.set("exclude_held_out_slices", exclude_held_out_slices ? "true" : "false");
}

namespace {

bool overlaps(const std::vector<BinaryMask>& a, const std::vector<BinaryMask>& b) {
  for (std::size_t k = 0; k < a.size() && k < b.size(); ++k) {
    if (a[k].size() != b[k].size()) continue;
    for (std::size_t i = 0; i < a[k].size(); ++i) {
      if (a[k].pixels[i] && b[k].pixels[i]) return true;
    }
  }
  return false;
}

// Slices of `volume` showing any class outside `train_classes`.
std::vector<bool> held_out_slices(const VolumeRecord& volume, const std::set<int>& train_classes) {
  std::vector<bool> out(volume.num_slices(), false);
  for (const auto& [cls, masks] : volume.masks) {
    if (train_classes.count(cls)) continue;
    for (std::size_t s = 0; s < masks.size() && s < out.size(); ++s) out[s] = out[s] || !masks[s].empty_foreground();
  }
  return out;
}

// Empties every mask on the flagged slices so the sampler never draws them.
void drop_slices(VolumeRecord& volume, const std::vector<bool>& flagged) {
  for (auto& [cls, masks] : volume.masks) {
    for (std::size_t s = 0; s < masks.size() && s < flagged.size(); ++s) {
      if (flagged[s]) masks[s] = BinaryMask(masks[s].height, masks[s].width);
    }
  }
}

}  // namespace

TrainingSource build_training_source(const Dataset& dataset, const std::set<int>& train_classes,
                                     const TrainConfig& config, int grid_factor) {
  if (train_classes.empty()) throw ConfigError("no train classes");
  TrainingSource source;
  if (config.supervision == Supervision::GroundTruth) {
    source.dataset = dataset;
    source.classes = train_classes;
    if (config.exclude_held_out_slices) {
      for (auto& volume : source.dataset) drop_slices(volume, held_out_slices(volume, train_classes));
    }
    return source;
  }
  PseudoLabelParams params;
  if (config.pseudo_threshold >= 0) params.threshold = config.pseudo_threshold;
  params.min_voxels = config.pseudo_min_voxels;
  int next_id = 1;
  std::set<int> candidates;
  for (const auto& volume : dataset) {
    VolumeRecord labeled = generate_pseudo_labels(volume, params);
    VolumeRecord renumbered = labeled;
    renumbered.masks.clear();
    renumbered.class_ids.clear();
    renumbered.shapes.clear();
    for (const auto& [local, masks] : labeled.masks) {
      bool held_out = false;
      if (config.pseudo_exclude_held_out) {
        for (const auto& [cls, gt] : volume.masks) {
          if (!train_classes.count(cls) && overlaps(masks, gt)) held_out = true;
        }
      }
      if (held_out) continue;
      renumbered.masks[next_id] = masks;
      renumbered.class_ids.insert(next_id);
      candidates.insert(next_id);
      ++next_id;
    }
    if (config.exclude_held_out_slices) drop_slices(renumbered, held_out_slices(volume, train_classes));
    source.dataset.push_back(std::move(renumbered));
  }
  const EpisodeSampler probe(source.dataset, candidates, grid_factor);
  for (int id : candidates) {
    if (static_cast<int>(probe.eligible(id).size()) > config.shots) source.classes.insert(id);
  }
  if (source.classes.empty()) throw ConfigError("pseudo-labels produced no usable training regions");
  return source;
}

Episode sample_training_episode(const EpisodeSampler& sampler, const TrainConfig& config, long step) {
  std::seed_seq seq{static_cast<std::uint32_t>(config.seed), static_cast<std::uint32_t>(config.seed >> 32),
                    static_cast<std::uint32_t>(step), static_cast<std::uint32_t>(step >> 32)};
  std::mt19937_64 rng(seq);
  Episode ep = sampler.sample(config.shots, rng);
  if (!config.augment) return ep;
  for (std::size_t k = 0; k < ep.shots(); ++k) {
    auto [img, mask] = augment(ep.support_images[k], ep.support_masks[k], config.augment_config, rng);
    // Keep the original pair when augmentation pushes the object off the latent grid.
    if (!is_eligible(mask, sampler.grid_factor())) continue;
    ep.support_images[k] = std::move(img);
    ep.support_masks[k] = std::move(mask);
  }
  auto [img, mask] = augment(ep.query_image, ep.query_mask, config.augment_config, rng);
  ep.query_image = std::move(img);
  ep.query_mask = std::move(mask);
  const double gamma = sample_gamma(config.max_gamma, rng);
  for (auto& s : ep.support_images) s = adjust_gamma(s, gamma);
  ep.query_image = adjust_gamma(ep.query_image, gamma);
  if (std::uniform_real_distribution<double>(0.0, 1.0)(rng) < config.intensity_remap_prob) {
    const IntensityCurve curve = sample_intensity_curve(config.intensity_remap_knots, config.intensity_remap_floor, rng);
    for (auto& s : ep.support_images) s = remap_intensity(s, curve);
    ep.query_image = remap_intensity(ep.query_image, curve);
  }
  return ep;
}

std::string episode_id(const Episode& episode) {
  std::ostringstream out;
  out << "c" << episode.class_id << "/q:v" << episode.query_ref.volume << "s" << episode.query_ref.slice;
  for (const auto& r : episode.support_refs) out << "/s:v" << r.volume << "s" << r.slice;
  return out.str();
}

Trainer::Trainer(SegmentationModel& model, const TrainConfig& config) : model_(&model), config_(config) {
  config_.validate();
  nn::AdamW<float>::Hyper unet{config.lr_unet, config.beta1, config.beta2, config.eps, config.weight_decay};
  nn::AdamW<float>::Hyper mlp{config.lr_mlp, config.beta1, config.beta2, config.eps, config.weight_decay};
  optimizer_.add_group(model.unet_parameters(), unet);
  optimizer_.add_group(model.projector_parameters(), mlp);
}

nn::ParamList<float> Trainer::trainable() const {
  nn::ParamList<float> out = model_->unet_parameters();
  for (auto& p : model_->projector_parameters()) out.push_back(p);
  return out;
}

StepResult Trainer::step(const EpisodeLatents& latents, const std::string& id) {
  const long index = steps_done();
  optimizer_.zero_grad();
  auto loss = episode_loss(model_->unet, model_->projector, latents);
  StepResult r;
  r.loss = loss.value()[0];
  if (!std::isfinite(r.loss)) {
    throw TrainingError("non-finite loss at step " + std::to_string(index) + (id.empty() ? "" : " (episode " + id + ")"),
                        index);
  }
  loss.backward();
  const auto params = trainable();
  r.grad_norm = nn::clip_grad_norm(params, config_.grad_clip_norm);
  r.clipped_grad_norm = nn::global_grad_norm(params);
  if (!std::isfinite(r.grad_norm)) {
    throw TrainingError("non-finite gradient at step " + std::to_string(index) +
                        (id.empty() ? "" : " (episode " + id + ")"),
                        index);
  }
  optimizer_.step();
  losses_.push_back(r.loss);
  return r;
}

StepResult Trainer::step(const Episode& episode) { return step(model_->prepare(episode), episode_id(episode)); }

void Trainer::write_checkpoint(const std::string& path, const std::map<std::string, std::string>& extra) const {
  Container c;
  for (const auto& [k, v] : extra) c.set(k, v);
  c.set("kind", "train_state");
  model_->write_to(c);
  c.set("train.step", std::to_string(steps_done()));
  KeyValueConfig echo;
  config_.to_config(echo);
  for (const auto& [k, v] : echo.entries()) c.set("train." + k, v);
  for (const auto& s : optimizer_.slots()) {
    c.add_array("adam.m." + s.name, s.param.shape(), std::vector<float>(s.m.begin(), s.m.end()));
    c.add_array("adam.v." + s.name, s.param.shape(), std::vector<float>(s.v.begin(), s.v.end()));
  }
  c.add_array("loss_history", {static_cast<int>(losses_.size())}, std::vector<float>(losses_.begin(), losses_.end()));
  write_container(path, c);
}

void Trainer::read_checkpoint(const std::string& path) {
  const Container c = read_container(path);
  if (c.get("kind") != "train_state") throw IoError(path + ": not a training checkpoint");
  load_params(c, model_->unet_parameters());
  load_params(c, model_->projector_parameters());
  for (auto& s : optimizer_.slots()) {
    const auto& m = c.array("adam.m." + s.name);
    const auto& v = c.array("adam.v." + s.name);
    if (m.values.size() != s.m.size() || v.values.size() != s.v.size()) {
      throw IoError(path + ": optimizer state for " + s.name + " has the wrong size");
    }
    std::copy(m.values.begin(), m.values.end(), s.m.begin());
    std::copy(v.values.begin(), v.values.end(), s.v.begin());
  }
  optimizer_.set_steps_taken(std::stol(c.get("train.step")));
  const auto& history = c.array("loss_history").values;
  losses_.assign(history.begin(), history.end());
}

void write_loss_csv(const std::string& path, const std::vector<double>& losses) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << "step,loss\n" << std::setprecision(17);
  for (std::size_t i = 0; i < losses.size(); ++i) out << i << "," << losses[i] << "\n";
}

TrainSummary run_training(SegmentationModel& model, const Dataset& dataset, const std::set<int>& train_classes,
                          const TrainConfig& config, const TrainOptions& options) {
  if (train_classes.empty()) throw ConfigError("run_training: no train classes");
  const auto t0 = std::chrono::steady_clock::now();
  const int grid = model.codec.downsample_factor();
  const TrainingSource source = build_training_source(dataset, train_classes, config, grid);
  const EpisodeSampler sampler(source.dataset, source.classes, grid);
  Trainer trainer(model, config);
  if (!options.resume_from.empty()) trainer.read_checkpoint(options.resume_from);
  const bool write = !options.checkpoint_dir.empty();
  if (write) std::filesystem::create_directories(options.checkpoint_dir);
  const auto dir = std::filesystem::path(options.checkpoint_dir);

  for (long step = trainer.steps_done(); step < config.iterations; ++step) {
    const Episode ep = sample_training_episode(sampler, config, step);
    const StepResult r = trainer.step(ep);
    if (options.progress) options.progress(step, r);
    if (write && config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0 &&
        step + 1 < config.iterations) {
      trainer.write_checkpoint((dir / ("ckpt_" + std::to_string(step + 1) + ".bin")).string(), options.header);
    }
  }

  TrainSummary summary;
  summary.losses = trainer.losses();
  summary.steps = trainer.steps_done();
  if (write) {
    summary.final_checkpoint = (dir / "final.bin").string();
    trainer.write_checkpoint(summary.final_checkpoint, options.header);
    write_loss_csv((dir / "losses.csv").string(), summary.losses);
  }
  summary.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return summary;
}

}  // namespace latentseg
