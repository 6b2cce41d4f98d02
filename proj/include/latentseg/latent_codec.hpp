#pragma once

// Image/mask <-> latent mapping. A small convolutional autoencoder stands in
// for a pretrained VAE; identity mode passes pseudo-RGB arrays through.

#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "latentseg/container.hpp"
#include "latentseg/episode_engine.hpp"
#include "latentseg/layers.hpp"
#include "latentseg/nn.hpp"
#include "latentseg/types.hpp"

namespace latentseg {

// (3,H,W) array with every channel equal to 2v - 1.
Tensor to_pseudo_rgb(const SliceImage& image);
Tensor to_pseudo_rgb(const BinaryMask& mask);

// (3,H,W) -> (H,W) channel mean.
Tensor average_channels(const Tensor& img3);

// 1 where score > threshold. Accepts (H,W) or (1,H,W).
BinaryMask binarize(const Tensor& score, double threshold = 0.0);

// Maps a score map from [-1,1] back to an image in [0,1], clamping.
SliceImage to_image(const Tensor& score);

struct ReconMetrics {
  double mse = 0;
  double psnr = 0;  // +inf when mse == 0
  double ssim = 0;
};

// Peak 1.0; SSIM uses an 11x11 Gaussian window (sigma 1.5), K1 = 0.01,
// K2 = 0.03, averaged over window positions fully inside the image.
ReconMetrics reconstruction_metrics(const SliceImage& original, const SliceImage& reconstruction);
double ssim(const SliceImage& a, const SliceImage& b);

struct CodecArch {
  int downsample_factor = 8;  // power of two; one stride-2 level per halving
  int latent_channels = 4;
  int base_width = 16;        // width doubles per level, capped at max_width
  int max_width = 64;

  std::vector<int> level_widths() const;
};

// Encoder: conv_in, then per level a stride-2 conv and a residual conv,
// then conv_out to the latent channels. The decoder mirrors it with nearest
// upsampling.
template <typename Real>
class CodecNet {
 public:
  CodecNet() = default;
  CodecNet(const CodecArch& arch, std::mt19937_64& rng);

  nn::Var<Real> encode(const nn::Var<Real>& rgb) const;    // (1,3,H,W) -> (1,c,h,w)
  nn::Var<Real> decode(const nn::Var<Real>& latent) const; // (1,c,h,w) -> (1,3,H,W)
  nn::ParamList<Real> parameters() const;
  const CodecArch& arch() const { return arch_; }

 private:
  CodecArch arch_;
  nn::Conv2d<Real> enc_in_, enc_out_, dec_in_, dec_out_;
  std::vector<nn::Conv2d<Real>> enc_down_, enc_res_, dec_up_, dec_res_;
};

enum class CodecMode { Trained, Identity };

class LatentCodec {
 public:
  // Identity codec: factor 1, three latent channels.
  static LatentCodec identity();
  // Randomly initialized trainable codec.
  static LatentCodec create(const CodecArch& arch, unsigned long long seed);

  CodecMode mode() const { return mode_; }
  int downsample_factor() const;
  int latent_channels() const;

  // (3,H,W) -> (1,c,H/f,W/f). Deterministic.
  LatentTensor encode(const Tensor& rgb) const;
  // (1,c,h,w) -> (3,h*f,w*f).
  Tensor decode(const LatentTensor& latent) const;

  LatentTensor encode_image(const SliceImage& image) const { return encode(to_pseudo_rgb(image)); }
  LatentTensor encode_mask(const BinaryMask& mask) const { return encode(to_pseudo_rgb(mask)); }
  // decode -> average_channels -> binarize.
  BinaryMask decode_mask(const LatentTensor& latent, double threshold = 0.0) const;
  SliceImage decode_image(const LatentTensor& latent) const;

  // Multiplier applied to raw encoder outputs so latents have unit spread.
  double latent_scale() const { return latent_scale_; }
  void set_latent_scale(double s) { latent_scale_ = s; }

  CodecNet<float>& net() { return *net_; }
  const CodecNet<float>& net() const { return *net_; }
  nn::ParamList<float> parameters() const;

  // Header keys and arrays are prefixed so a codec can share a container.
  void write_to(Container& container, const std::string& prefix) const;
  static LatentCodec read_from(const Container& container, const std::string& prefix);
  void save(const std::string& path) const;
  static LatentCodec load(const std::string& path);

 private:
  CodecMode mode_ = CodecMode::Identity;
  double latent_scale_ = 1.0;
  std::shared_ptr<CodecNet<float>> net_;
};

struct CodecTrainConfig {
  long steps = 1500;
  int batch = 4;             // samples accumulated per optimizer step
  double lr = 2e-3;          // cosine-decayed to final_lr
  double final_lr = 1e-4;
  double weight_decay = 0.0;
  double mask_fraction = 0.5;  // share of samples that are masks
  bool augment = true;
  AugmentConfig augment_config;
  double max_gamma = 2.0;
  unsigned long long seed = 42;
};

struct CodecTrainReport {
  std::vector<double> losses;  // per optimizer step
};

using ProgressFn = std::function<void(long step, double loss)>;

// Minimizes pixel MSE on pseudo-RGB images and masks, then calibrates the
// latent scale. Throws TrainingError on a non-finite loss.
LatentCodec train_codec(const Dataset& dataset, const CodecArch& arch, const CodecTrainConfig& config,
                        CodecTrainReport* report = nullptr, const ProgressFn& progress = {});

struct ReconSummary {
  std::string type;  // "image" or "mask"
  int samples = 0;
  double mse = 0;
  double psnr = 0;   // mean over finite values; +inf if all identical
  double ssim = 0;
  double dice = 0;   // masks only: mean Dice after binarization
};

// Round-trips up to `max_slices` slices (and their nonempty class masks)
// through the codec.
std::vector<ReconSummary> reconstruction_study(const LatentCodec& codec, const Dataset& dataset,
                                               std::size_t max_slices = 0);

// Plain-text table with columns dataset, type, MSE, PSNR, SSIM, Dice.
std::string format_recon_table(const std::string& dataset_name, const std::vector<ReconSummary>& rows);

}  // namespace latentseg
