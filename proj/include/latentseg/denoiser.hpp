#pragma once

// One-step latent segmentation network: a two-resolution U-Net whose
// attention sites are SII blocks, plus the end-to-end episode pipeline.

#include <map>
#include <random>
#include <string>
#include <vector>

#include "latentseg/conditioning.hpp"
#include "latentseg/container.hpp"
#include "latentseg/episode_engine.hpp"
#include "latentseg/interaction.hpp"
#include "latentseg/kv_config.hpp"
#include "latentseg/latent_codec.hpp"
#include "latentseg/layers.hpp"
#include "latentseg/nn.hpp"

namespace latentseg {

// Where SII keys/values come from: a support pass through the same U-Net,
// or a learned projection of the pooled raw support latent.
enum class SupportTokenSource { UNet, Raw };
std::string to_string(SupportTokenSource source);
SupportTokenSource parse_support_token_source(const std::string& name);

struct DenoiserConfig {
  int latent_channels = 4;
  int base_channels = 64;  // second resolution uses twice this
  int heads = 4;
  int text_dim = 256;
  int timestep = 999;
  int groups = 8;          // GroupNorm groups in residual blocks
  int ff_mult = 4;
  int time_embed_dim = 256;
  SupportTokenSource support_tokens = SupportTokenSource::UNet;
};

// Token sequence entering each SII site, keyed by site name.
template <typename Real>
using SupportCache = std::map<std::string, nn::Var<Real>>;

template <typename Real>
class ResBlock {
 public:
  ResBlock() = default;
  ResBlock(int in, int out, int time_dim, int groups, std::mt19937_64& rng);
  nn::Var<Real> operator()(const nn::Var<Real>& x, const nn::Var<Real>& temb) const;
  void collect(const std::string& prefix, nn::ParamList<Real>& out) const;

 private:
  nn::GroupNorm<Real> norm1_, norm2_;
  nn::Conv2d<Real> conv1_, conv2_, skip_;
  nn::Linear<Real> time_proj_;
  bool has_skip_ = false;
};

template <typename Real>
class UNet {
 public:
  static const std::vector<std::string>& sites();  // down0, down1, up1, up0

  UNet() = default;
  UNet(const DenoiserConfig& config, std::mt19937_64& rng);

  // support: (1,2c,h,w); condition: (1,text_dim). Runs the network without
  // support injection and records the tokens entering every site.
  SupportCache<Real> encode_support_tokens(const nn::Var<Real>& support, const nn::Var<Real>& condition) const;

  // query: (1,2c,h,w) -> (1,c,h,w) predicted mask latent.
  nn::Var<Real> forward(const nn::Var<Real>& query, const SupportCache<Real>& cache, const nn::Var<Real>& condition,
                        int timestep) const;
  nn::Var<Real> forward(const nn::Var<Real>& query, const SupportCache<Real>& cache,
                        const nn::Var<Real>& condition) const {
    return forward(query, cache, condition, config_.timestep);
  }

  nn::ParamList<Real> parameters() const;
  const DenoiserConfig& config() const { return config_; }
  // Exposed for tests: the attention block at a site.
  const SIIBlock<Real>& block(const std::string& site) const;
  SIIBlock<Real>& block(const std::string& site);

 private:
  nn::Var<Real> run(const nn::Var<Real>& x, const nn::Var<Real>& condition, const SupportCache<Real>* cache,
                    SupportCache<Real>* record, int timestep) const;
  nn::Var<Real> time_embedding(int timestep) const;
  nn::Var<Real> site(const std::string& name, const nn::Var<Real>& h, const nn::Var<Real>& condition,
                     const SupportCache<Real>* cache, SupportCache<Real>* record) const;

  DenoiserConfig config_;
  nn::Linear<Real> time_fc1_, time_fc2_;
  nn::Conv2d<Real> conv_in_, down_sample_, up_conv_, conv_out_;
  ResBlock<Real> res_down0_, res_down1_, res_mid_, res_up1_, res_up0_;
  nn::GroupNorm<Real> norm_out_;
  std::map<std::string, SIIBlock<Real>> blocks_;
  std::map<std::string, nn::Linear<Real>> raw_proj_;
};

// [z_si || z_sm]; both (1,c,h,w).
LatentTensor assemble_support_latent(const LatentTensor& image_latent, const LatentTensor& mask_latent);

// Mean squared error over every element (channels included).
template <typename Real>
nn::Var<Real> training_loss(const nn::Var<Real>& prediction, const nn::Var<Real>& target);
double training_loss(const LatentTensor& prediction, const LatentTensor& target);

// Everything the trainable networks consume for one episode.
struct EpisodeLatents {
  std::vector<LatentTensor> supports;  // per shot, (1,2c,h,w)
  LatentTensor query;                  // enhanced query, (1,2c,h,w)
  LatentTensor target;                 // query mask latent (1,c,h,w); empty at inference
  Prototype visual_prototype;          // averaged over shots
};

enum class ConditionMode { Projected, Zero };

template <typename Real>
nn::Var<Real> predict_latent(const UNet<Real>& unet, const Projector<Real>& projector, const EpisodeLatents& latents,
                             ConditionMode mode = ConditionMode::Projected);

template <typename Real>
nn::Var<Real> episode_loss(const UNet<Real>& unet, const Projector<Real>& projector, const EpisodeLatents& latents);

nn::Var<float> to_var(const Tensor& t);
Tensor to_tensor(const nn::Var<float>& v);

struct ModelConfig {
  DenoiserConfig denoiser;
  VisionEncoderConfig vision;
  int projector_hidden = 256;
  double tau = 0.7;
  unsigned long long init_seed = 42;

  void write_header(Container& container) const;
  static ModelConfig read_header(const Container& container);
};

// Codec + frozen vision encoder + trainable U-Net and projector.
class SegmentationModel {
 public:
  SegmentationModel(const ModelConfig& config, LatentCodec codec);

  EpisodeLatents prepare(const std::vector<SliceImage>& support_images, const std::vector<BinaryMask>& support_masks,
                         const SliceImage& query_image, const BinaryMask* query_mask = nullptr) const;
  EpisodeLatents prepare(const Episode& episode) const;

  LatentTensor predict_latent(const EpisodeLatents& latents, ConditionMode mode = ConditionMode::Projected) const;
  // encode -> enhance -> condition -> U-Net -> decode -> average -> binarize.
  BinaryMask predict_mask(const std::vector<SliceImage>& support_images, const std::vector<BinaryMask>& support_masks,
                          const SliceImage& query_image, ConditionMode mode = ConditionMode::Projected) const;
  BinaryMask predict_mask(const Episode& episode, ConditionMode mode = ConditionMode::Projected) const;

  nn::ParamList<float> unet_parameters() const { return unet.parameters(); }
  nn::ParamList<float> projector_parameters() const;

  // Model container: config header, U-Net and projector arrays, and the
  // codec under the "codec." prefix.
  void write_to(Container& container) const;
  static SegmentationModel read_from(const Container& container);
  void save(const std::string& path) const;
  // Accepts model and training checkpoints.
  static SegmentationModel load(const std::string& path);

  ModelConfig config;
  LatentCodec codec;
  VisionEncoder vision;
  UNet<float> unet;
  Projector<float> projector;
};

}  // namespace latentseg
