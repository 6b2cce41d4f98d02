#include "latentseg/denoiser.hpp"

#include <cmath>

#include "latentseg/errors.hpp"

namespace latentseg {

using nn::Var;

std::string to_string(SupportTokenSource source) { return source == SupportTokenSource::UNet ? "unet" : "raw"; }

SupportTokenSource parse_support_token_source(const std::string& name) {
  if (name == "unet") return SupportTokenSource::UNet;
  if (name == "raw") return SupportTokenSource::Raw;
  throw ConfigError("support_tokens must be 'unet' or 'raw', got '" + name + "'");
}

namespace {

template <typename Real>
Var<Real> constant_of(const Tensor& t) {
  return Var<Real>::constant(t.shape, std::vector<Real>(t.data.begin(), t.data.end()));
}

void require_latent(const Tensor& t, const char* what) {
  if (t.rank() != 4 || t.dim(0) != 1) {
    throw ShapeError(std::string(what) + ": expected (1,c,h,w), got " + nn::shape_str(t.shape));
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// residual block

template <typename Real>
ResBlock<Real>::ResBlock(int in, int out, int time_dim, int groups, std::mt19937_64& rng)
    : norm1_(in, groups),
      norm2_(out, groups),
      conv1_(in, out, 3, 1, 1, rng),
      conv2_(out, out, 3, 1, 1, rng),
      time_proj_(time_dim, out, rng),
      has_skip_(in != out) {
  if (in % groups != 0 || out % groups != 0) {
    throw ConfigError("ResBlock: channels " + std::to_string(in) + "/" + std::to_string(out) +
                      " not divisible by " + std::to_string(groups) + " groups");
  }
  if (has_skip_) skip_ = nn::Conv2d<Real>(in, out, 1, 1, 0, rng);
}

template <typename Real>
Var<Real> ResBlock<Real>::operator()(const Var<Real>& x, const Var<Real>& temb) const {
  auto h = conv1_(nn::silu(norm1_(x)));
  h = nn::add_channel_bias(h, time_proj_(nn::silu(temb)));
  h = conv2_(nn::silu(norm2_(h)));
  return nn::add(has_skip_ ? skip_(x) : x, h);
}

template <typename Real>
void ResBlock<Real>::collect(const std::string& prefix, nn::ParamList<Real>& out) const {
  norm1_.collect(prefix + ".norm1", out);
  conv1_.collect(prefix + ".conv1", out);
  time_proj_.collect(prefix + ".time_proj", out);
  norm2_.collect(prefix + ".norm2", out);
  conv2_.collect(prefix + ".conv2", out);
  if (has_skip_) skip_.collect(prefix + ".skip", out);
}

// ---------------------------------------------------------------------------
// U-Net

template <typename Real>
const std::vector<std::string>& UNet<Real>::sites() {
  static const std::vector<std::string> names{"down0", "down1", "up1", "up0"};
  return names;
}

template <typename Real>
UNet<Real>::UNet(const DenoiserConfig& config, std::mt19937_64& rng) : config_(config) {
  const int c = config.latent_channels, b = config.base_channels, b2 = 2 * config.base_channels;
  const int td = config.time_embed_dim;
  if (c < 1 || b < 1 || td < 1 || config.text_dim < 1) throw ConfigError("denoiser: dimensions must be positive");
  time_fc1_ = nn::Linear<Real>(b, td, rng);
  time_fc2_ = nn::Linear<Real>(td, td, rng);
  conv_in_ = nn::Conv2d<Real>(2 * c, b, 3, 1, 1, rng);
  res_down0_ = ResBlock<Real>(b, b, td, config.groups, rng);
  down_sample_ = nn::Conv2d<Real>(b, b, 3, 2, 1, rng);
  res_down1_ = ResBlock<Real>(b, b2, td, config.groups, rng);
  res_mid_ = ResBlock<Real>(b2, b2, td, config.groups, rng);
  res_up1_ = ResBlock<Real>(2 * b2, b2, td, config.groups, rng);
  up_conv_ = nn::Conv2d<Real>(b2, b2, 3, 1, 1, rng);
  res_up0_ = ResBlock<Real>(b2 + b, b, td, config.groups, rng);
  norm_out_ = nn::GroupNorm<Real>(b, config.groups);
  conv_out_ = nn::Conv2d<Real>(b, c, 3, 1, 1, rng);
  conv_out_.zero_init();
  const std::map<std::string, int> widths{{"down0", b}, {"down1", b2}, {"up1", b2}, {"up0", b}};
  for (const auto& name : sites()) {
    blocks_.emplace(name, SIIBlock<Real>(widths.at(name), config.text_dim, config.heads, rng, config.ff_mult));
    if (config.support_tokens == SupportTokenSource::Raw) {
      raw_proj_.emplace(name, nn::Linear<Real>(2 * c, widths.at(name), rng));
    }
  }
}

template <typename Real>
Var<Real> UNet<Real>::time_embedding(int timestep) const {
  const int dim = config_.base_channels, half = dim / 2;
  std::vector<Real> emb(dim, Real(0));
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * i / half);
    emb[i] = Real(std::sin(timestep * freq));
    emb[half + i] = Real(std::cos(timestep * freq));
  }
  const auto t = Var<Real>::constant({1, dim}, std::move(emb));
  return time_fc2_(nn::silu(time_fc1_(t)));
}

template <typename Real>
Var<Real> UNet<Real>::site(const std::string& name, const Var<Real>& h, const Var<Real>& condition,
                           const SupportCache<Real>* cache, SupportCache<Real>* record) const {
  const int height = h.dim(2), width = h.dim(3);
  const auto tokens = nn::to_tokens(h);
  if (record) (*record)[name] = tokens;
  Var<Real> support;
  if (cache) {
    const auto it = cache->find(name);
    if (it == cache->end()) throw InternalError("support cache has no entry for site '" + name + "'");
    support = it->second;
  }
  return nn::from_tokens(blocks_.at(name)(tokens, support, condition), height, width);
}

template <typename Real>
Var<Real> UNet<Real>::run(const Var<Real>& x, const Var<Real>& condition, const SupportCache<Real>* cache,
                          SupportCache<Real>* record, int timestep) const {
  const int c = config_.latent_channels;
  if (x.shape().size() != 4 || x.dim(0) != 1 || x.dim(1) != 2 * c || x.dim(2) % 2 != 0 || x.dim(3) % 2 != 0) {
    throw ShapeError("unet: expected (1," + std::to_string(2 * c) + ",h,w) with even h,w, got " +
                     nn::shape_str(x.shape()));
  }
  if (condition.shape() != nn::Shape{1, config_.text_dim}) {
    throw ShapeError("unet: condition must be (1," + std::to_string(config_.text_dim) + "), got " +
                     nn::shape_str(condition.shape()));
  }
  const auto temb = time_embedding(timestep);
  auto h = res_down0_(conv_in_(x), temb);
  h = site("down0", h, condition, cache, record);
  const auto skip0 = h;
  h = res_down1_(down_sample_(h), temb);
  h = site("down1", h, condition, cache, record);
  const auto skip1 = h;
  h = res_mid_(h, temb);
  h = res_up1_(nn::concat_channels(h, skip1), temb);
  h = site("up1", h, condition, cache, record);
  h = up_conv_(nn::upsample_nearest2x(h));
  h = res_up0_(nn::concat_channels(h, skip0), temb);
  h = site("up0", h, condition, cache, record);
  return conv_out_(nn::silu(norm_out_(h)));
}

template <typename Real>
SupportCache<Real> UNet<Real>::encode_support_tokens(const Var<Real>& support, const Var<Real>& condition) const {
  SupportCache<Real> cache;
  if (config_.support_tokens == SupportTokenSource::UNet) {
    run(support, condition, nullptr, &cache, config_.timestep);
    return cache;
  }
  if (support.shape().size() != 4 || support.dim(1) != 2 * config_.latent_channels) {
    throw ShapeError("encode_support_tokens: bad support latent " + nn::shape_str(support.shape()));
  }
  for (const auto& name : sites()) {
    const int factor = (name == "down0" || name == "up0") ? 1 : 2;
    const auto pooled = factor == 1 ? support : nn::avg_pool(support, factor);
    cache[name] = raw_proj_.at(name)(nn::to_tokens(pooled));
  }
  return cache;
}

template <typename Real>
Var<Real> UNet<Real>::forward(const Var<Real>& query, const SupportCache<Real>& cache, const Var<Real>& condition,
                              int timestep) const {
  return run(query, condition, &cache, nullptr, timestep);
}

template <typename Real>
nn::ParamList<Real> UNet<Real>::parameters() const {
  nn::ParamList<Real> out;
  time_fc1_.collect("unet.time_fc1", out);
  time_fc2_.collect("unet.time_fc2", out);
  conv_in_.collect("unet.conv_in", out);
  res_down0_.collect("unet.res_down0", out);
  down_sample_.collect("unet.down_sample", out);
  res_down1_.collect("unet.res_down1", out);
  res_mid_.collect("unet.res_mid", out);
  res_up1_.collect("unet.res_up1", out);
  up_conv_.collect("unet.up_conv", out);
  res_up0_.collect("unet.res_up0", out);
  norm_out_.collect("unet.norm_out", out);
  conv_out_.collect("unet.conv_out", out);
  for (const auto& name : sites()) {
    blocks_.at(name).collect("unet.sii_" + name, out);
    if (const auto it = raw_proj_.find(name); it != raw_proj_.end()) it->second.collect("unet.raw_" + name, out);
  }
  return out;
}

template <typename Real>
const SIIBlock<Real>& UNet<Real>::block(const std::string& site) const {
  const auto it = blocks_.find(site);
  if (it == blocks_.end()) throw InternalError("unknown SII site '" + site + "'");
  return it->second;
}

template <typename Real>
SIIBlock<Real>& UNet<Real>::block(const std::string& site) {
  const auto it = blocks_.find(site);
  if (it == blocks_.end()) throw InternalError("unknown SII site '" + site + "'");
  return it->second;
}

// ---------------------------------------------------------------------------
// losses and the episode pipeline

LatentTensor assemble_support_latent(const LatentTensor& image_latent, const LatentTensor& mask_latent) {
  require_latent(image_latent, "assemble_support_latent");
  require_latent(mask_latent, "assemble_support_latent");
  if (image_latent.shape != mask_latent.shape) {
    throw ShapeError("assemble_support_latent: " + nn::shape_str(image_latent.shape) + " vs " +
                     nn::shape_str(mask_latent.shape));
  }
  LatentTensor out({1, 2 * image_latent.dim(1), image_latent.dim(2), image_latent.dim(3)});
  std::copy(image_latent.data.begin(), image_latent.data.end(), out.data.begin());
  std::copy(mask_latent.data.begin(), mask_latent.data.end(), out.data.begin() + image_latent.size());
  return out;
}

template <typename Real>
Var<Real> training_loss(const Var<Real>& prediction, const Var<Real>& target) {
  return nn::mse_loss(prediction, target);
}

double training_loss(const LatentTensor& prediction, const LatentTensor& target) {
  if (prediction.shape != target.shape) {
    throw ShapeError("training_loss: " + nn::shape_str(prediction.shape) + " vs " + nn::shape_str(target.shape));
  }
  if (prediction.size() == 0) throw ShapeError("training_loss: empty tensors");
  double acc = 0;
  for (std::size_t i = 0; i < prediction.size(); ++i) {
    const double d = prediction.data[i] - target.data[i];
    acc += d * d;
  }
  return acc / static_cast<double>(prediction.size());
}

template <typename Real>
Var<Real> predict_latent(const UNet<Real>& unet, const Projector<Real>& projector, const EpisodeLatents& latents,
                         ConditionMode mode) {
  if (latents.supports.empty()) throw ShapeError("predict_latent: no support latents");
  const int text_dim = unet.config().text_dim;
  Var<Real> condition;
  if (mode == ConditionMode::Projected) {
    const auto& p = latents.visual_prototype;
    condition = projector(Var<Real>::constant({1, static_cast<int>(p.size())}, std::vector<Real>(p.begin(), p.end())));
  } else {
    condition = Var<Real>::constant({1, text_dim}, Real(0));
  }
  SupportCache<Real> cache;
  for (const auto& support : latents.supports) {
    auto shot = unet.encode_support_tokens(constant_of<Real>(support), condition);
    if (cache.empty()) {
      cache = std::move(shot);
      continue;
    }
    for (auto& [name, tokens] : cache) tokens = nn::concat_rows(tokens, shot.at(name));
  }
  return unet.forward(constant_of<Real>(latents.query), cache, condition);
}

template <typename Real>
Var<Real> episode_loss(const UNet<Real>& unet, const Projector<Real>& projector, const EpisodeLatents& latents) {
  if (latents.target.size() == 0) throw ShapeError("episode_loss: episode has no target latent");
  return training_loss(predict_latent(unet, projector, latents), constant_of<Real>(latents.target));
}

Var<float> to_var(const Tensor& t) { return constant_of<float>(t); }

Tensor to_tensor(const Var<float>& v) {
  Tensor out(v.shape());
  std::copy(v.value().begin(), v.value().end(), out.data.begin());
  return out;
}

// ---------------------------------------------------------------------------
// model

void ModelConfig::write_header(Container& c) const {
  c.set("latent_channels", std::to_string(denoiser.latent_channels));
  c.set("base_channels", std::to_string(denoiser.base_channels));
  c.set("heads", std::to_string(denoiser.heads));
  c.set("text_dim", std::to_string(denoiser.text_dim));
  c.set("timestep", std::to_string(denoiser.timestep));
  c.set("groups", std::to_string(denoiser.groups));
  c.set("ff_mult", std::to_string(denoiser.ff_mult));
  c.set("time_embed_dim", std::to_string(denoiser.time_embed_dim));
  c.set("support_tokens", to_string(denoiser.support_tokens));
  c.set("vision.feature_dim", std::to_string(vision.feature_dim));
  c.set("vision.patch", std::to_string(vision.patch));
  c.set("vision.blocks", std::to_string(vision.blocks));
  c.set("vision.seed", std::to_string(vision.seed));
  c.set("projector_hidden", std::to_string(projector_hidden));
  c.set("tau", format_double(tau));
  c.set("init_seed", std::to_string(init_seed));
}

ModelConfig ModelConfig::read_header(const Container& c) {
  ModelConfig m;
  try {
    m.denoiser.latent_channels = std::stoi(c.get("latent_channels"));
    m.denoiser.base_channels = std::stoi(c.get("base_channels"));
    m.denoiser.heads = std::stoi(c.get("heads"));
    m.denoiser.text_dim = std::stoi(c.get("text_dim"));
    m.denoiser.timestep = std::stoi(c.get("timestep"));
    m.denoiser.groups = std::stoi(c.get("groups"));
    m.denoiser.ff_mult = std::stoi(c.get("ff_mult"));
    m.denoiser.time_embed_dim = std::stoi(c.get("time_embed_dim"));
    m.denoiser.support_tokens = parse_support_token_source(c.get("support_tokens"));
    m.vision.feature_dim = std::stoi(c.get("vision.feature_dim"));
    m.vision.patch = std::stoi(c.get("vision.patch"));
    m.vision.blocks = std::stoi(c.get("vision.blocks"));
    m.vision.seed = std::stoull(c.get("vision.seed"));
    m.projector_hidden = std::stoi(c.get("projector_hidden"));
    m.tau = std::stod(c.get("tau"));
    m.init_seed = std::stoull(c.get("init_seed"));
  } catch (const std::logic_error&) {
    throw IoError("malformed model header");
  }
  return m;
}

namespace {

UNet<float> make_unet(const ModelConfig& config, std::mt19937_64& rng) { return UNet<float>(config.denoiser, rng); }

}  // namespace

SegmentationModel::SegmentationModel(const ModelConfig& cfg, LatentCodec codec_)
    : config(cfg), codec(std::move(codec_)), vision(cfg.vision) {
  if (codec.latent_channels() != config.denoiser.latent_channels) {
    throw ConfigError("codec has " + std::to_string(codec.latent_channels()) + " latent channels, denoiser expects " +
                      std::to_string(config.denoiser.latent_channels));
  }
  if (config.vision.patch != codec.downsample_factor()) {
    throw ConfigError("vision patch " + std::to_string(config.vision.patch) + " must equal the codec factor " +
                      std::to_string(codec.downsample_factor()));
  }
  std::mt19937_64 rng(config.init_seed);
  unet = make_unet(config, rng);
  projector = Projector<float>(config.vision.feature_dim, config.projector_hidden, config.denoiser.text_dim, rng);
}

EpisodeLatents SegmentationModel::prepare(const std::vector<SliceImage>& support_images,
                                          const std::vector<BinaryMask>& support_masks,
                                          const SliceImage& query_image, const BinaryMask* query_mask) const {
  if (support_images.empty() || support_images.size() != support_masks.size()) {
    throw ShapeError("prepare: need matching nonempty support images and masks");
  }
  EpisodeLatents out;
  Prototype support_proto;
  std::vector<Prototype> visual;
  for (std::size_t k = 0; k < support_images.size(); ++k) {
    require_same_shape(support_images[k], support_masks[k], "prepare");
    const auto zi = codec.encode_image(support_images[k]);
    out.supports.push_back(assemble_support_latent(zi, codec.encode_mask(support_masks[k])));
    const Prototype p = masked_average_pool(zi, support_masks[k]);
    if (support_proto.empty()) {
      support_proto = p;
    } else {
      for (std::size_t i = 0; i < p.size(); ++i) support_proto[i] += p[i];
    }
    visual.push_back(pool_visual_prototype(vision.extract(support_images[k]), support_masks[k]));
  }
  for (auto& v : support_proto) v /= static_cast<double>(support_images.size());
  const auto zq = codec.encode_image(query_image);
  const Prototype query_proto = extract_query_prototype(zq, cosine_similarity_map(support_proto, zq), config.tau);
  out.query = enhance_query(zq, query_proto);
  out.visual_prototype = average_prototypes(visual);
  if (query_mask) {
    require_same_shape(query_image, *query_mask, "prepare");
    out.target = codec.encode_mask(*query_mask);
  }
  return out;
}

EpisodeLatents SegmentationModel::prepare(const Episode& episode) const {
  return prepare(episode.support_images, episode.support_masks, episode.query_image, &episode.query_mask);
}

LatentTensor SegmentationModel::predict_latent(const EpisodeLatents& latents, ConditionMode mode) const {
  nn::NoGradGuard no_grad;
  return to_tensor(latentseg::predict_latent(unet, projector, latents, mode));
}

BinaryMask SegmentationModel::predict_mask(const std::vector<SliceImage>& support_images,
                                           const std::vector<BinaryMask>& support_masks,
                                           const SliceImage& query_image, ConditionMode mode) const {
  return codec.decode_mask(predict_latent(prepare(support_images, support_masks, query_image), mode));
}

BinaryMask SegmentationModel::predict_mask(const Episode& episode, ConditionMode mode) const {
  return predict_mask(episode.support_images, episode.support_masks, episode.query_image, mode);
}

nn::ParamList<float> SegmentationModel::projector_parameters() const {
  nn::ParamList<float> out;
  projector.collect("projector", out);
  return out;
}

void SegmentationModel::write_to(Container& c) const {
  config.write_header(c);
  store_params(c, unet_parameters());
  store_params(c, projector_parameters());
  codec.write_to(c, "codec.");
}

SegmentationModel SegmentationModel::read_from(const Container& c) {
  SegmentationModel model(ModelConfig::read_header(c), LatentCodec::read_from(c, "codec."));
  load_params(c, model.unet_parameters());
  load_params(c, model.projector_parameters());
  return model;
}

void SegmentationModel::save(const std::string& path) const {
  Container c;
  c.set("kind", "model");
  write_to(c);
  write_container(path, c);
}

SegmentationModel SegmentationModel::load(const std::string& path) {
  const Container c = read_container(path);
  const std::string kind = c.get("kind");
  if (kind != "model" && kind != "train_state") throw IoError(path + ": not a model checkpoint (kind " + kind + ")");
  return read_from(c);
}

template class ResBlock<float>;
template class ResBlock<double>;
template class UNet<float>;
template class UNet<double>;
template Var<float> training_loss(const Var<float>&, const Var<float>&);
template Var<double> training_loss(const Var<double>&, const Var<double>&);
template Var<float> predict_latent(const UNet<float>&, const Projector<float>&, const EpisodeLatents&, ConditionMode);
template Var<double> predict_latent(const UNet<double>&, const Projector<double>&, const EpisodeLatents&,
                                    ConditionMode);
template Var<float> episode_loss(const UNet<float>&, const Projector<float>&, const EpisodeLatents&);
template Var<double> episode_loss(const UNet<double>&, const Projector<double>&, const EpisodeLatents&);

}  // namespace latentseg
