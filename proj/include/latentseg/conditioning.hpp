#pragma once

// Visual-to-text conditioning: frozen image features, mask pooling to a
// class prototype, and an MLP into a single conditioning token.

#include <memory>
#include <random>
#include <string>
#include <vector>

#include "latentseg/layers.hpp"
#include "latentseg/nn.hpp"
#include "latentseg/types.hpp"

namespace latentseg {

using FeatureMap = Tensor;  // (1, d_img, h_f, w_f)

struct VisionEncoderConfig {
  int feature_dim = 192;
  int patch = 8;   // stride of the feature grid
  int blocks = 2;  // residual 3x3 conv blocks after the patch embedding
  unsigned long long seed = 1234;
};

// Randomly initialized, seeded and never trained.
class VisionEncoder {
 public:
  explicit VisionEncoder(const VisionEncoderConfig& config = {});

  // Image must be divisible by the patch size.
  FeatureMap extract(const SliceImage& image) const;
  const VisionEncoderConfig& config() const { return config_; }
  nn::ParamList<float> parameters() const;

 private:
  VisionEncoderConfig config_;
  nn::Conv2d<float> patch_embed_;
  std::vector<nn::Conv2d<float>> blocks_;
};

FeatureMap extract_features(const SliceImage& image, const VisionEncoder& encoder);

// Feature sidecar files: container with d_img, h_f, w_f and one array.
void write_feature_file(const std::string& path, const FeatureMap& features);
// Throws ShapeError when the stored shape differs from the declared one.
FeatureMap read_feature_file(const std::string& path, int feature_dim, int grid_h, int grid_w);

// Mean feature under the nearest-resampled mask; EmptyMaskError if empty.
Prototype pool_visual_prototype(const FeatureMap& features, const BinaryMask& mask);

// Elementwise mean over shots.
Prototype average_prototypes(const std::vector<Prototype>& prototypes);

// Two-layer MLP d_img -> hidden -> d_text with tanh in between.
template <typename Real>
class Projector {
 public:
  Projector() = default;
  Projector(int in_dim, int hidden_dim, int out_dim, std::mt19937_64& rng);

  // (1, in_dim) -> (1, out_dim)
  nn::Var<Real> operator()(const nn::Var<Real>& prototype) const;
  void collect(const std::string& prefix, nn::ParamList<Real>& out) const;
  int in_dim() const { return fc1.in_features(); }
  int out_dim() const { return fc2.out_features(); }

  nn::Linear<Real> fc1, fc2;
};

// (1,1,d_text) embedding of a prototype.
template <typename Real>
Tensor project_to_condition(const Prototype& prototype, const Projector<Real>& projector);

}  // namespace latentseg
