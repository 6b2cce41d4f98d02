#include "latentseg/run_config.hpp"

#include "latentseg/errors.hpp"

namespace latentseg {

namespace {

KeyValueConfig section(const KeyValueConfig& cfg, const std::string& prefix) {
  KeyValueConfig out;
  for (const auto& [k, v] : cfg.entries()) {
    if (k.rfind(prefix, 0) == 0) out.set(k.substr(prefix.size()), v);
  }
  return out;
}

void merge(KeyValueConfig& into, const KeyValueConfig& from, const std::string& prefix) {
  for (const auto& [k, v] : from.entries()) into.set(prefix + k, v);
}

const std::set<std::string> kCodecKeys = {"downsample_factor", "latent_channels", "base_width", "max_width",
                                          "steps",  "batch",  "lr",  "final_lr",  "weight_decay",
                                          "mask_fraction", "augment", "max_gamma"};
const std::set<std::string> kModelKeys = {"base_channels", "heads", "text_dim", "timestep", "groups",
                                          "ff_mult", "time_embed_dim", "support_tokens", "vision_feature_dim",
                                          "vision_blocks", "vision_seed", "projector_hidden", "tau"};
const std::set<std::string> kOtherKeys = {"seed", "eval.test_classes", "eval.support_patient", "eval.condition",
                                          "recon.slices", "paths.data", "paths.codec", "paths.model"};

int to_int(long v) { return static_cast<int>(v); }

}  // namespace

std::string to_string(ConditionMode mode) { return mode == ConditionMode::Projected ? "projected" : "zero"; }

ConditionMode parse_condition_mode(const std::string& name) {
  if (name == "projected") return ConditionMode::Projected;
  if (name == "zero") return ConditionMode::Zero;
  throw ConfigError("unknown condition mode '" + name + "' (expected projected or zero)");
}

RunConfig::RunConfig() {
  corpus.finalize();
  set_seed(seed);
}

const std::set<std::string>& RunConfig::keys() {
  static const std::set<std::string> all = [] {
    std::set<std::string> k = kOtherKeys;
    for (const auto& c : CorpusSpec::config_keys()) {
      if (c != "corpus_seed") k.insert("corpus." + c);
    }
    for (const auto& c : kCodecKeys) k.insert("codec." + c);
    for (const auto& c : kModelKeys) k.insert("model." + c);
    for (const auto& c : TrainConfig::config_keys()) {
      if (c != "seed") k.insert("train." + c);
    }
    return k;
  }();
  return all;
}

void RunConfig::set_seed(unsigned long long value) {
  seed = value;
  corpus.seed = value;
  codec_train.seed = value;
  model.init_seed = value;
  train.seed = value;
}

RunConfig RunConfig::from_config(const KeyValueConfig& cfg) {
  cfg.reject_unknown(keys());
  RunConfig r;

  r.corpus = CorpusSpec::from_config(section(cfg, "corpus."));
  r.corpus.finalize();

  const KeyValueConfig codec = section(cfg, "codec.");
  r.codec_arch.downsample_factor = to_int(codec.get_int("downsample_factor", r.codec_arch.downsample_factor));
  r.codec_arch.latent_channels = to_int(codec.get_int("latent_channels", r.codec_arch.latent_channels));
  r.codec_arch.base_width = to_int(codec.get_int("base_width", r.codec_arch.base_width));
  r.codec_arch.max_width = to_int(codec.get_int("max_width", r.codec_arch.max_width));
  auto& ct = r.codec_train;
  ct.steps = codec.get_int("steps", ct.steps);
  ct.batch = to_int(codec.get_int("batch", ct.batch));
  ct.lr = codec.get_double("lr", ct.lr);
  ct.final_lr = codec.get_double("final_lr", ct.final_lr);
  ct.weight_decay = codec.get_double("weight_decay", ct.weight_decay);
  ct.mask_fraction = codec.get_double("mask_fraction", ct.mask_fraction);
  ct.augment = codec.get_bool("augment", ct.augment);
  ct.max_gamma = codec.get_double("max_gamma", ct.max_gamma);

  const KeyValueConfig model = section(cfg, "model.");
  auto& d = r.model.denoiser;
  d.latent_channels = r.codec_arch.latent_channels;
  d.base_channels = to_int(model.get_int("base_channels", d.base_channels));
  d.heads = to_int(model.get_int("heads", d.heads));
  d.text_dim = to_int(model.get_int("text_dim", d.text_dim));
  d.timestep = to_int(model.get_int("timestep", d.timestep));
  d.groups = to_int(model.get_int("groups", d.groups));
  d.ff_mult = to_int(model.get_int("ff_mult", d.ff_mult));
  d.time_embed_dim = to_int(model.get_int("time_embed_dim", d.time_embed_dim));
  d.support_tokens = parse_support_token_source(model.get_string("support_tokens", to_string(d.support_tokens)));
  auto& v = r.model.vision;
  v.patch = r.codec_arch.downsample_factor;
  v.feature_dim = to_int(model.get_int("vision_feature_dim", v.feature_dim));
  v.blocks = to_int(model.get_int("vision_blocks", v.blocks));
  v.seed = model.get_uint("vision_seed", v.seed);
  r.model.projector_hidden = to_int(model.get_int("projector_hidden", r.model.projector_hidden));
  r.model.tau = model.get_double("tau", r.model.tau);

  r.train = TrainConfig::from_config(section(cfg, "train."));

  const std::vector<int> test = cfg.get_int_list("eval.test_classes", {3});
  r.test_classes = std::set<int>(test.begin(), test.end());
  if (r.test_classes.empty()) throw ConfigError("eval.test_classes must name at least one class");
  r.support_patient = cfg.get_string("eval.support_patient", "");
  r.condition = parse_condition_mode(cfg.get_string("eval.condition", "projected"));
  r.recon_slices = static_cast<std::size_t>(cfg.get_uint("recon.slices", 0));
  r.data_dir = cfg.get_string("paths.data", r.data_dir);
  r.codec_path = cfg.get_string("paths.codec", r.codec_path);
  r.model_path = cfg.get_string("paths.model", r.model_path);

  r.set_seed(cfg.get_uint("seed", r.seed));
  return r;
}

RunConfig RunConfig::load(const std::string& path) { return from_config(KeyValueConfig::load(path)); }

KeyValueConfig RunConfig::to_config() const {
  KeyValueConfig out;
  out.set("seed", std::to_string(seed));

  KeyValueConfig corpus_cfg;
  corpus.to_config(corpus_cfg);
  KeyValueConfig corpus_kept;
  for (const auto& [k, v] : corpus_cfg.entries()) {
    if (k != "corpus_seed") corpus_kept.set(k, v);
  }
  merge(out, corpus_kept, "corpus.");

  out.set("codec.downsample_factor", std::to_string(codec_arch.downsample_factor));
  out.set("codec.latent_channels", std::to_string(codec_arch.latent_channels));
  out.set("codec.base_width", std::to_string(codec_arch.base_width));
  out.set("codec.max_width", std::to_string(codec_arch.max_width));
  out.set("codec.steps", std::to_string(codec_train.steps));
  out.set("codec.batch", std::to_string(codec_train.batch));
  out.set("codec.lr", format_double(codec_train.lr));
  out.set("codec.final_lr", format_double(codec_train.final_lr));
  out.set("codec.weight_decay", format_double(codec_train.weight_decay));
  out.set("codec.mask_fraction", format_double(codec_train.mask_fraction));
  out.set("codec.augment", codec_train.augment ? "true" : "false");
  out.set("codec.max_gamma", format_double(codec_train.max_gamma));

  const auto& d = model.denoiser;
  out.set("model.base_channels", std::to_string(d.base_channels));
  out.set("model.heads", std::to_string(d.heads));
  out.set("model.text_dim", std::to_string(d.text_dim));
  out.set("model.timestep", std::to_string(d.timestep));
  out.set("model.groups", std::to_string(d.groups));
  out.set("model.ff_mult", std::to_string(d.ff_mult));
  out.set("model.time_embed_dim", std::to_string(d.time_embed_dim));
  out.set("model.support_tokens", to_string(d.support_tokens));
  out.set("model.vision_feature_dim", std::to_string(model.vision.feature_dim));
  out.set("model.vision_blocks", std::to_string(model.vision.blocks));
  out.set("model.vision_seed", std::to_string(model.vision.seed));
  out.set("model.projector_hidden", std::to_string(model.projector_hidden));
  out.set("model.tau", format_double(model.tau));

  KeyValueConfig train_cfg;
  train.to_config(train_cfg);
  KeyValueConfig train_kept;
  for (const auto& [k, v] : train_cfg.entries()) {
    if (k != "seed") train_kept.set(k, v);
  }
  merge(out, train_kept, "train.");

  out.set("eval.test_classes", join_ints(std::vector<int>(test_classes.begin(), test_classes.end())));
  out.set("eval.support_patient", support_patient);
  out.set("eval.condition", to_string(condition));
  out.set("recon.slices", std::to_string(recon_slices));
  out.set("paths.data", data_dir);
  out.set("paths.codec", codec_path);
  out.set("paths.model", model_path);
  return out;
}

std::set<int> RunConfig::train_classes(const std::set<int>& all_classes) const {
  std::set<int> out;
  for (int c : all_classes) {
    if (!test_classes.count(c)) out.insert(c);
  }
  return out;
}

EvalSpec RunConfig::eval_spec() const {
  EvalSpec spec;
  spec.test_classes = test_classes;
  spec.support_patient = support_patient;
  spec.condition = condition;
  return spec;
}

}  // namespace latentseg
