#pragma once

// Flat configuration for a whole pipeline run. Keys carry a section prefix
// (corpus., codec., model., train., eval., recon., paths.) except `seed`.

#include <set>
#include <string>

#include "latentseg/evaluator.hpp"
#include "latentseg/kv_config.hpp"
#include "latentseg/latent_codec.hpp"
#include "latentseg/trainer.hpp"

namespace latentseg {

std::string to_string(ConditionMode mode);
ConditionMode parse_condition_mode(const std::string& name);

struct RunConfig {
  // Drives the corpus, codec training, model initialization and training.
  unsigned long long seed = 42;
  CorpusSpec corpus;
  CodecArch codec_arch;
  CodecTrainConfig codec_train;
  ModelConfig model;
  TrainConfig train;
  std::set<int> test_classes{3};
  std::string support_patient;
  ConditionMode condition = ConditionMode::Projected;
  std::size_t recon_slices = 0;  // 0: every slice
  std::string data_dir = "data";
  std::string codec_path = "codec/codec.bin";
  std::string model_path = "train/final.bin";

  RunConfig();

  // Unknown keys throw ConfigError naming the key.
  static RunConfig from_config(const KeyValueConfig& cfg);
  static RunConfig load(const std::string& path);
  KeyValueConfig to_config() const;
  std::string to_text() const { return to_config().to_text(); }

  // Sets `seed` and every seed derived from it.
  void set_seed(unsigned long long value);
  // Corpus classes minus the test classes.
  std::set<int> train_classes(const std::set<int>& all_classes) const;
  EvalSpec eval_spec() const;

  static const std::set<std::string>& keys();
};

}  // namespace latentseg
