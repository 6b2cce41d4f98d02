#include "latentseg/latent_codec.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numbers>

#include "latentseg/container.hpp"
#include "latentseg/errors.hpp"
#include "latentseg/kv_config.hpp"
#include "latentseg/optim.hpp"

namespace latentseg {

using nn::Var;

// ---------------------------------------------------------------------------
// pixel-space helpers

Tensor to_pseudo_rgb(const SliceImage& image) {
  Tensor out({3, image.height, image.width});
  const std::size_t n = image.size();
  for (std::size_t i = 0; i < n; ++i) {
    const double v = image.pixels[i];
    if (!(v >= 0.0 && v <= 1.0)) {
      throw DomainError("to_pseudo_rgb: pixel " + std::to_string(i) + " = " + std::to_string(v) +
                        " outside [0,1]");
    }
    const double y = 2.0 * v - 1.0;
    out.data[i] = out.data[n + i] = out.data[2 * n + i] = y;
  }
  return out;
}

Tensor to_pseudo_rgb(const BinaryMask& mask) {
  Tensor out({3, mask.height, mask.width});
  const std::size_t n = mask.size();
  for (std::size_t i = 0; i < n; ++i) {
    if (mask.pixels[i] > 1) throw DomainError("to_pseudo_rgb: mask value outside {0,1}");
    const double y = mask.pixels[i] ? 1.0 : -1.0;
    out.data[i] = out.data[n + i] = out.data[2 * n + i] = y;
  }
  return out;
}

Tensor average_channels(const Tensor& img3) {
  if (img3.rank() != 3 || img3.dim(0) != 3) {
    throw ShapeError("average_channels: expected (3,H,W), got " + nn::shape_str(img3.shape));
  }
  Tensor out({img3.dim(1), img3.dim(2)});
  const std::size_t n = out.size();
  for (std::size_t i = 0; i < n; ++i) {
    // Offsets from channel 0 keep replicated inputs exact.
    const double base = img3.data[i];
    out.data[i] = base + ((img3.data[n + i] - base) + (img3.data[2 * n + i] - base)) / 3.0;
  }
  return out;
}

namespace {

std::pair<int, int> plane_dims(const Tensor& t, const char* op) {
  if (t.rank() == 2) return {t.dim(0), t.dim(1)};
  if (t.rank() == 3 && t.dim(0) == 1) return {t.dim(1), t.dim(2)};
  throw ShapeError(std::string(op) + ": expected (H,W) or (1,H,W), got " + nn::shape_str(t.shape));
}

}  // namespace

BinaryMask binarize(const Tensor& score, double threshold) {
  const auto [h, w] = plane_dims(score, "binarize");
  BinaryMask out(h, w);
  for (std::size_t i = 0; i < out.size(); ++i) out.pixels[i] = score.data[i] > threshold ? 1 : 0;
  return out;
}

SliceImage to_image(const Tensor& score) {
  const auto [h, w] = plane_dims(score, "to_image");
  SliceImage out(h, w);
  for (std::size_t i = 0; i < out.size(); ++i) out.pixels[i] = std::clamp((score.data[i] + 1.0) / 2.0, 0.0, 1.0);
  return out;
}

// ---------------------------------------------------------------------------
// reconstruction metrics

namespace {

constexpr int kSsimRadius = 5;
constexpr double kSsimSigma = 1.5;

std::vector<double> gaussian_kernel() {
  std::vector<double> k(2 * kSsimRadius + 1);
  double sum = 0;
  for (int i = -kSsimRadius; i <= kSsimRadius; ++i) {
    k[i + kSsimRadius] = std::exp(-0.5 * i * i / (kSsimSigma * kSsimSigma));
    sum += k[i + kSsimRadius];
  }
  for (auto& v : k) v /= sum;
  return k;
}

// Separable Gaussian filter evaluated only where the window fits.
std::vector<double> valid_filter(const std::vector<double>& x, int h, int w, const std::vector<double>& k) {
  const int ks = static_cast<int>(k.size());
  const int ow = w - ks + 1, oh = h - ks + 1;
  std::vector<double> rows(static_cast<std::size_t>(h) * ow, 0.0);
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < ow; ++c) {
      double acc = 0;
      for (int t = 0; t < ks; ++t) acc += k[t] * x[static_cast<std::size_t>(r) * w + c + t];
      rows[static_cast<std::size_t>(r) * ow + c] = acc;
    }
  }
  std::vector<double> out(static_cast<std::size_t>(oh) * ow, 0.0);
  for (int r = 0; r < oh; ++r) {
    for (int c = 0; c < ow; ++c) {
      double acc = 0;
      for (int t = 0; t < ks; ++t) acc += k[t] * rows[static_cast<std::size_t>(r + t) * ow + c];
      out[static_cast<std::size_t>(r) * ow + c] = acc;
    }
  }
  return out;
}

void require_same_image_shape(const SliceImage& a, const SliceImage& b, const char* op) {
  if (a.height != b.height || a.width != b.width) {
    throw ShapeError(std::string(op) + ": image shapes differ");
  }
}

}  // namespace

double ssim(const SliceImage& a, const SliceImage& b) {
  require_same_image_shape(a, b, "ssim");
  const int win = 2 * kSsimRadius + 1;
  if (a.height < win || a.width < win) throw ShapeError("ssim: image smaller than the 11x11 window");
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  const auto k = gaussian_kernel();
  const int h = a.height, w = a.width;
  std::vector<double> aa(a.size()), bb(a.size()), ab(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    aa[i] = a.pixels[i] * a.pixels[i];
    bb[i] = b.pixels[i] * b.pixels[i];
    ab[i] = a.pixels[i] * b.pixels[i];
  }
  const auto mu_a = valid_filter(a.pixels, h, w, k);
  const auto mu_b = valid_filter(b.pixels, h, w, k);
  const auto e_aa = valid_filter(aa, h, w, k);
  const auto e_bb = valid_filter(bb, h, w, k);
  const auto e_ab = valid_filter(ab, h, w, k);
  double total = 0;
  for (std::size_t i = 0; i < mu_a.size(); ++i) {
    const double va = e_aa[i] - mu_a[i] * mu_a[i];
    const double vb = e_bb[i] - mu_b[i] * mu_b[i];
    const double cov = e_ab[i] - mu_a[i] * mu_b[i];
    total += ((2 * mu_a[i] * mu_b[i] + c1) * (2 * cov + c2)) /
             ((mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + c1) * (va + vb + c2));
  }
  return total / static_cast<double>(mu_a.size());
}

ReconMetrics reconstruction_metrics(const SliceImage& original, const SliceImage& reconstruction) {
  require_same_image_shape(original, reconstruction, "reconstruction_metrics");
  ReconMetrics m;
  double acc = 0;
  for (std::size_t i = 0; i < original.size(); ++i) {
    const double d = original.pixels[i] - reconstruction.pixels[i];
    acc += d * d;
  }
  m.mse = original.size() ? acc / static_cast<double>(original.size()) : 0.0;
  m.psnr = m.mse == 0.0 ? std::numeric_limits<double>::infinity() : -10.0 * std::log10(m.mse);
  m.ssim = ssim(original, reconstruction);
  return m;
}

// ---------------------------------------------------------------------------
// network

std::vector<int> CodecArch::level_widths() const {
  if (downsample_factor < 1 || (downsample_factor & (downsample_factor - 1)) != 0) {
    throw ConfigError("codec downsample_factor must be a power of two, got " + std::to_string(downsample_factor));
  }
  if (latent_channels < 1 || base_width < 1 || max_width < base_width) {
    throw ConfigError("codec widths/channels must be positive with max_width >= base_width");
  }
  std::vector<int> widths{base_width};
  for (int f = downsample_factor; f > 1; f /= 2) widths.push_back(std::min(widths.back() * 2, max_width));
  return widths;
}

template <typename Real>
CodecNet<Real>::CodecNet(const CodecArch& arch, std::mt19937_64& rng) : arch_(arch) {
  const auto w = arch.level_widths();
  const int levels = static_cast<int>(w.size()) - 1;
  enc_in_ = nn::Conv2d<Real>(3, w[0], 3, 1, 1, rng);
  for (int i = 0; i < levels; ++i) {
    enc_down_.emplace_back(w[i], w[i + 1], 3, 2, 1, rng);
    enc_res_.emplace_back(w[i + 1], w[i + 1], 3, 1, 1, rng);
  }
  enc_out_ = nn::Conv2d<Real>(w[levels], arch.latent_channels, 3, 1, 1, rng);
  dec_in_ = nn::Conv2d<Real>(arch.latent_channels, w[levels], 3, 1, 1, rng);
  for (int i = 0; i < levels; ++i) {
    dec_up_.emplace_back(w[i + 1], w[i], 3, 1, 1, rng);
    dec_res_.emplace_back(w[i], w[i], 3, 1, 1, rng);
  }
  dec_out_ = nn::Conv2d<Real>(w[0], 3, 3, 1, 1, rng);
}

template <typename Real>
Var<Real> CodecNet<Real>::encode(const Var<Real>& rgb) const {
  auto h = nn::silu(enc_in_(rgb));
  for (std::size_t i = 0; i < enc_down_.size(); ++i) {
    h = nn::silu(enc_down_[i](h));
    h = nn::add(h, nn::silu(enc_res_[i](h)));
  }
  return enc_out_(h);
}

template <typename Real>
Var<Real> CodecNet<Real>::decode(const Var<Real>& latent) const {
  auto h = nn::silu(dec_in_(latent));
  for (std::size_t k = dec_up_.size(); k-- > 0;) {
    h = nn::silu(dec_up_[k](nn::upsample_nearest2x(h)));
    h = nn::add(h, nn::silu(dec_res_[k](h)));
  }
  return dec_out_(h);
}

template <typename Real>
nn::ParamList<Real> CodecNet<Real>::parameters() const {
  nn::ParamList<Real> out;
  enc_in_.collect("encoder.conv_in", out);
  for (std::size_t i = 0; i < enc_down_.size(); ++i) {
    enc_down_[i].collect("encoder.down" + std::to_string(i), out);
    enc_res_[i].collect("encoder.res" + std::to_string(i), out);
  }
  enc_out_.collect("encoder.conv_out", out);
  dec_in_.collect("decoder.conv_in", out);
  for (std::size_t i = 0; i < dec_up_.size(); ++i) {
    dec_up_[i].collect("decoder.up" + std::to_string(i), out);
    dec_res_[i].collect("decoder.res" + std::to_string(i), out);
  }
  dec_out_.collect("decoder.conv_out", out);
  return out;
}

template class CodecNet<float>;
template class CodecNet<double>;

// ---------------------------------------------------------------------------
// codec

LatentCodec LatentCodec::identity() { return LatentCodec(); }

LatentCodec LatentCodec::create(const CodecArch& arch, unsigned long long seed) {
  std::mt19937_64 rng(seed);
  LatentCodec codec;
  codec.mode_ = CodecMode::Trained;
  codec.net_ = std::make_shared<CodecNet<float>>(arch, rng);
  return codec;
}

int LatentCodec::downsample_factor() const {
  return mode_ == CodecMode::Identity ? 1 : net_->arch().downsample_factor;
}

int LatentCodec::latent_channels() const { return mode_ == CodecMode::Identity ? 3 : net_->arch().latent_channels; }

nn::ParamList<float> LatentCodec::parameters() const {
  return mode_ == CodecMode::Identity ? nn::ParamList<float>{} : net_->parameters();
}

LatentTensor LatentCodec::encode(const Tensor& rgb) const {
  if (rgb.rank() != 3 || rgb.dim(0) != 3) {
    throw ShapeError("encode: expected a (3,H,W) array, got " + nn::shape_str(rgb.shape));
  }
  const int f = downsample_factor();
  const int h = rgb.dim(1), w = rgb.dim(2);
  if (h % f != 0 || w % f != 0) {
    throw ShapeError("encode: spatial size " + std::to_string(h) + "x" + std::to_string(w) +
                     " not divisible by downsample factor " + std::to_string(f));
  }
  if (mode_ == CodecMode::Identity) {
    LatentTensor z = rgb;
    z.shape = {1, 3, h, w};
    return z;
  }
  nn::NoGradGuard no_grad;
  auto x = Var<float>::constant({1, 3, h, w}, std::vector<float>(rgb.data.begin(), rgb.data.end()));
  auto z = net_->encode(x);
  LatentTensor out(z.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = z.value()[i] * latent_scale_;
  return out;
}

Tensor LatentCodec::decode(const LatentTensor& latent) const {
  const int c = latent_channels();
  if (latent.rank() != 4 || latent.dim(0) != 1 || latent.dim(1) != c) {
    throw ShapeError("decode: expected (1," + std::to_string(c) + ",h,w), got " + nn::shape_str(latent.shape));
  }
  if (mode_ == CodecMode::Identity) {
    Tensor out = latent;
    out.shape = {3, latent.dim(2), latent.dim(3)};
    return out;
  }
  nn::NoGradGuard no_grad;
  std::vector<float> values(latent.size());
  for (std::size_t i = 0; i < values.size(); ++i) values[i] = static_cast<float>(latent.data[i] / latent_scale_);
  auto y = net_->decode(Var<float>::constant(latent.shape, std::move(values)));
  Tensor out({3, y.dim(2), y.dim(3)});
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = y.value()[i];
  return out;
}

BinaryMask LatentCodec::decode_mask(const LatentTensor& latent, double threshold) const {
  return binarize(average_channels(decode(latent)), threshold);
}

SliceImage LatentCodec::decode_image(const LatentTensor& latent) const {
  return to_image(average_channels(decode(latent)));
}

void LatentCodec::write_to(Container& c, const std::string& prefix) const {
  c.set(prefix + "mode", mode_ == CodecMode::Identity ? "identity" : "trained");
  c.set(prefix + "downsample_factor", std::to_string(downsample_factor()));
  c.set(prefix + "latent_channels", std::to_string(latent_channels()));
  if (mode_ == CodecMode::Trained) {
    c.set(prefix + "base_width", std::to_string(net_->arch().base_width));
    c.set(prefix + "max_width", std::to_string(net_->arch().max_width));
    c.set(prefix + "latent_scale", format_double(latent_scale_));
    store_params(c, net_->parameters(), prefix);
  }
}

LatentCodec LatentCodec::read_from(const Container& c, const std::string& prefix) {
  const std::string mode = c.get(prefix + "mode");
  if (mode == "identity") return identity();
  if (mode != "trained") throw IoError("unknown codec mode '" + mode + "'");
  CodecArch arch;
  try {
    arch.downsample_factor = std::stoi(c.get(prefix + "downsample_factor"));
    arch.latent_channels = std::stoi(c.get(prefix + "latent_channels"));
    arch.base_width = std::stoi(c.get(prefix + "base_width"));
    arch.max_width = std::stoi(c.get(prefix + "max_width"));
    LatentCodec codec = create(arch, 0);
    load_params(c, codec.net_->parameters(), prefix);
    codec.latent_scale_ = std::stod(c.get(prefix + "latent_scale"));
    return codec;
  } catch (const std::logic_error&) {
    throw IoError("malformed codec header");
  }
}

void LatentCodec::save(const std::string& path) const {
  Container c;
  c.set("kind", "codec");
  write_to(c, "");
  write_container(path, c);
}

LatentCodec LatentCodec::load(const std::string& path) {
  const Container c = read_container(path);
  if (c.get("kind") != "codec") throw IoError(path + ": not a codec checkpoint (kind " + c.get("kind") + ")");
  return read_from(c, "");
}

// ---------------------------------------------------------------------------
// training

namespace {

// Random (augmented) image or class mask from a random slice.
Tensor draw_sample(const Dataset& dataset, const CodecTrainConfig& config, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> pick_volume(0, dataset.size() - 1);
  const VolumeRecord& vol = dataset[pick_volume(rng)];
  std::uniform_int_distribution<std::size_t> pick_slice(0, vol.num_slices() - 1);
  const std::size_t k = pick_slice(rng);
  const bool want_mask = std::uniform_real_distribution<double>(0, 1)(rng) < config.mask_fraction;

  std::vector<int> present;
  for (int cls : vol.class_ids) {
    if (!vol.mask(cls, k).empty_foreground()) present.push_back(cls);
  }
  BinaryMask mask(vol.slices[k].height, vol.slices[k].width);
  if (!present.empty()) {
    std::uniform_int_distribution<std::size_t> pick_class(0, present.size() - 1);
    mask = vol.mask(present[pick_class(rng)], k);
  }
  SliceImage image = vol.slices[k];
  if (config.augment) {
    std::tie(image, mask) = augment(image, mask, config.augment_config, rng);
    image = adjust_gamma(image, sample_gamma(config.max_gamma, rng));
  }
  return want_mask ? to_pseudo_rgb(mask) : to_pseudo_rgb(image);
}

Var<float> as_input(const Tensor& rgb) {
  return Var<float>::constant({1, 3, rgb.dim(1), rgb.dim(2)}, std::vector<float>(rgb.data.begin(), rgb.data.end()));
}

}  // namespace

LatentCodec train_codec(const Dataset& dataset, const CodecArch& arch, const CodecTrainConfig& config,
                        CodecTrainReport* report, const ProgressFn& progress) {
  if (dataset.empty()) throw TrainingError("train_codec: empty dataset", 0);
  if (config.steps < 0 || config.batch < 1) throw ConfigError("train_codec: steps >= 0 and batch >= 1 required");
  LatentCodec codec = LatentCodec::create(arch, config.seed);
  const auto params = codec.parameters();
  nn::AdamW<float> opt;
  opt.add_group(params, {.lr = config.lr, .weight_decay = config.weight_decay});
  std::mt19937_64 rng(config.seed ^ 0x9e3779b97f4a7c15ULL);

  for (long step = 0; step < config.steps; ++step) {
    const double progress_frac = config.steps > 1 ? double(step) / double(config.steps - 1) : 1.0;
    opt.set_lr(0, config.final_lr +
                      0.5 * (config.lr - config.final_lr) * (1.0 + std::cos(std::numbers::pi * progress_frac)));
    opt.zero_grad();
    double loss_sum = 0;
    for (int b = 0; b < config.batch; ++b) {
      auto x = as_input(draw_sample(dataset, config, rng));
      auto loss = nn::mse_loss(codec.net().decode(codec.net().encode(x)), x);
      loss_sum += loss.value()[0];
      nn::scale(loss, 1.0f / static_cast<float>(config.batch)).backward();
    }
    const double loss = loss_sum / config.batch;
    if (!std::isfinite(loss)) throw TrainingError("codec loss is not finite", step);
    nn::clip_grad_norm(params, 1.0);
    opt.step();
    if (report) report->losses.push_back(loss);
    if (progress) progress(step, loss);
  }

  // Calibrate the latent scale to unit RMS over un-augmented data.
  double sum_sq = 0;
  std::size_t count = 0;
  std::mt19937_64 cal_rng(config.seed + 1);
  CodecTrainConfig plain = config;
  plain.augment = false;
  for (int i = 0; i < 64; ++i) {
    const LatentTensor z = codec.encode(draw_sample(dataset, plain, cal_rng));
    for (double v : z.data) sum_sq += v * v;
    count += z.size();
  }
  const double rms = std::sqrt(sum_sq / static_cast<double>(count));
  if (!(rms > 0) || !std::isfinite(rms)) throw TrainingError("codec latents degenerate after training", config.steps);
  codec.set_latent_scale(1.0 / rms);
  return codec;
}

// ---------------------------------------------------------------------------
// reconstruction study

namespace {

double mask_dice(const BinaryMask& a, const BinaryMask& b) {
  std::size_t inter = 0, total = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    inter += a.pixels[i] & b.pixels[i];
    total += a.pixels[i] + b.pixels[i];
  }
  return total == 0 ? 1.0 : 2.0 * double(inter) / double(total);
}

SliceImage mask_as_image(const BinaryMask& m) {
  SliceImage out(m.height, m.width);
  for (std::size_t i = 0; i < m.size(); ++i) out.pixels[i] = m.pixels[i];
  return out;
}

struct Accumulator {
  int n = 0, finite_psnr = 0;
  double mse = 0, psnr = 0, ssim = 0, dice = 0;
  void add(const ReconMetrics& m) {
    ++n;
    mse += m.mse;
    ssim += m.ssim;
    if (std::isfinite(m.psnr)) {
      psnr += m.psnr;
      ++finite_psnr;
    }
  }
  ReconSummary summary(const std::string& type) const {
    ReconSummary s;
    s.type = type;
    s.samples = n;
    if (n == 0) return s;
    s.mse = mse / n;
    s.ssim = ssim / n;
    s.psnr = finite_psnr ? psnr / finite_psnr : std::numeric_limits<double>::infinity();
    s.dice = dice / n;
    return s;
  }
};

}  // namespace

std::vector<ReconSummary> reconstruction_study(const LatentCodec& codec, const Dataset& dataset,
                                               std::size_t max_slices) {
  Accumulator images, masks;
  std::size_t seen = 0;
  for (const auto& vol : dataset) {
    for (std::size_t k = 0; k < vol.num_slices(); ++k) {
      if (max_slices && seen >= max_slices) break;
      ++seen;
      const SliceImage& img = vol.slices[k];
      images.add(reconstruction_metrics(img, codec.decode_image(codec.encode_image(img))));
      for (int cls : vol.class_ids) {
        const BinaryMask& m = vol.mask(cls, k);
        if (m.empty_foreground()) continue;
        const Tensor score = average_channels(codec.decode(codec.encode_mask(m)));
        masks.add(reconstruction_metrics(mask_as_image(m), to_image(score)));
        masks.dice += mask_dice(m, binarize(score));
      }
    }
  }
  return {images.summary("image"), masks.summary("mask")};
}

std::string format_recon_table(const std::string& dataset_name, const std::vector<ReconSummary>& rows) {
  std::string out;
  char line[256];
  std::snprintf(line, sizeof line, "%-12s %-6s %8s %10s %10s %8s %8s\n", "dataset", "type", "samples", "MSE", "PSNR",
                "SSIM", "Dice");
  out += line;
  for (const auto& r : rows) {
    const std::string dice = r.type == "mask" ? std::to_string(r.dice).substr(0, 6) : "-";
    std::snprintf(line, sizeof line, "%-12s %-6s %8d %10.6f %10.4f %8.4f %8s\n", dataset_name.c_str(), r.type.c_str(),
                  r.samples, r.mse, r.psnr, r.ssim, dice.c_str());
    out += line;
  }
  return out;
}

}  // namespace latentseg
