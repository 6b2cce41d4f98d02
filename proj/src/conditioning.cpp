#include "latentseg/conditioning.hpp"

#include <cmath>

#include "latentseg/container.hpp"
#include "latentseg/errors.hpp"
#include "latentseg/interaction.hpp"

namespace latentseg {

using nn::Var;

VisionEncoder::VisionEncoder(const VisionEncoderConfig& config) : config_(config) {
  if (config.feature_dim < 1 || config.patch < 1 || config.blocks < 0) {
    throw ConfigError("vision encoder: feature_dim and patch must be positive");
  }
  std::mt19937_64 rng(config.seed);
  patch_embed_ = nn::Conv2d<float>(1, config.feature_dim, config.patch, config.patch, 0, rng);
  for (int b = 0; b < config.blocks; ++b) blocks_.emplace_back(config.feature_dim, config.feature_dim, 3, 1, 1, rng);
}

FeatureMap VisionEncoder::extract(const SliceImage& image) const {
  if (image.height % config_.patch != 0 || image.width % config_.patch != 0) {
    throw ShapeError("extract_features: image " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                     " not divisible by patch " + std::to_string(config_.patch));
  }
  nn::NoGradGuard no_grad;
  std::vector<float> pixels(image.size());
  for (std::size_t i = 0; i < pixels.size(); ++i) pixels[i] = static_cast<float>(2.0 * image.pixels[i] - 1.0);
  auto h = patch_embed_(Var<float>::constant({1, 1, image.height, image.width}, std::move(pixels)));
  // Uniform init shrinks activations; rescale so each block sees unit-order inputs.
  const float gain = std::sqrt(3.0f);
  h = nn::scale(h, gain);
  for (const auto& block : blocks_) h = nn::add(h, nn::scale(block(nn::gelu(h)), gain));
  FeatureMap out(h.shape());
  std::copy(h.value().begin(), h.value().end(), out.data.begin());
  return out;
}

nn::ParamList<float> VisionEncoder::parameters() const {
  nn::ParamList<float> out;
  patch_embed_.collect("vision.patch_embed", out);
  for (std::size_t b = 0; b < blocks_.size(); ++b) blocks_[b].collect("vision.block" + std::to_string(b), out);
  return out;
}

FeatureMap extract_features(const SliceImage& image, const VisionEncoder& encoder) { return encoder.extract(image); }

void write_feature_file(const std::string& path, const FeatureMap& features) {
  if (features.rank() != 4 || features.dim(0) != 1) {
    throw ShapeError("write_feature_file: expected (1,d,h,w), got " + nn::shape_str(features.shape));
  }
  Container c;
  c.set("kind", "features");
  c.set("d_img", std::to_string(features.dim(1)));
  c.set("h_f", std::to_string(features.dim(2)));
  c.set("w_f", std::to_string(features.dim(3)));
  c.add_array("features", features.shape, std::vector<float>(features.data.begin(), features.data.end()));
  write_container(path, c);
}

FeatureMap read_feature_file(const std::string& path, int feature_dim, int grid_h, int grid_w) {
  const Container c = read_container(path);
  if (c.get("kind") != "features") throw IoError(path + ": not a feature file");
  const std::vector<int> declared{1, feature_dim, grid_h, grid_w};
  const NamedArray& a = c.array("features");
  const std::vector<int> header{1, std::stoi(c.get("d_img")), std::stoi(c.get("h_f")), std::stoi(c.get("w_f"))};
  if (header != a.shape) throw IoError(path + ": header and array shape disagree");
  if (a.shape != declared) {
    throw ShapeError(path + ": features have shape " + nn::shape_str(a.shape) + ", expected " +
                     nn::shape_str(declared));
  }
  FeatureMap out(a.shape);
  std::copy(a.values.begin(), a.values.end(), out.data.begin());
  return out;
}

Prototype pool_visual_prototype(const FeatureMap& features, const BinaryMask& mask) {
  return masked_average_pool(features, mask);
}

Prototype average_prototypes(const std::vector<Prototype>& prototypes) {
  if (prototypes.empty()) throw ShapeError("average_prototypes: no prototypes");
  Prototype out(prototypes.front().size(), 0.0);
  for (const auto& p : prototypes) {
    if (p.size() != out.size()) throw ShapeError("average_prototypes: length mismatch");
    for (std::size_t i = 0; i < p.size(); ++i) out[i] += p[i];
  }
  for (auto& v : out) v /= static_cast<double>(prototypes.size());
  return out;
}

template <typename Real>
Projector<Real>::Projector(int in_dim, int hidden_dim, int out_dim, std::mt19937_64& rng)
    : fc1(in_dim, hidden_dim, rng), fc2(hidden_dim, out_dim, rng) {}

template <typename Real>
Var<Real> Projector<Real>::operator()(const Var<Real>& prototype) const {
  if (prototype.shape() != nn::Shape{1, in_dim()}) {
    throw ShapeError("projector: expected (1," + std::to_string(in_dim()) + "), got " +
                     nn::shape_str(prototype.shape()));
  }
  return fc2(nn::tanh(fc1(prototype)));
}

template <typename Real>
void Projector<Real>::collect(const std::string& prefix, nn::ParamList<Real>& out) const {
  fc1.collect(prefix + ".fc1", out);
  fc2.collect(prefix + ".fc2", out);
}

template <typename Real>
Tensor project_to_condition(const Prototype& prototype, const Projector<Real>& projector) {
  nn::NoGradGuard no_grad;
  const auto p = Var<Real>::constant({1, static_cast<int>(prototype.size())},
                                     std::vector<Real>(prototype.begin(), prototype.end()));
  const auto e = projector(p);
  Tensor out({1, 1, projector.out_dim()});
  std::copy(e.value().begin(), e.value().end(), out.data.begin());
  return out;
}

template class Projector<float>;
template class Projector<double>;
template Tensor project_to_condition(const Prototype&, const Projector<float>&);
template Tensor project_to_condition(const Prototype&, const Projector<double>&);

}  // namespace latentseg
