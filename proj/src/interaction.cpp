#include "latentseg/interaction.hpp"

#include <cmath>

#include "latentseg/errors.hpp"

namespace latentseg {

namespace {

void require_latent(const LatentTensor& z, const char* op) {
  if (z.rank() != 4 || z.dim(0) != 1) {
    throw ShapeError(std::string(op) + ": expected a (1,c,h,w) latent, got " + nn::shape_str(z.shape));
  }
}

}  // namespace

Prototype masked_average_pool(const LatentTensor& z, const BinaryMask& mask) {
  require_latent(z, "masked_average_pool");
  const int c = z.dim(1), h = z.dim(2), w = z.dim(3);
  const BinaryMask m = (mask.height == h && mask.width == w) ? mask : downsample_nearest(mask, h, w);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  Prototype p(c, 0.0);
  std::size_t count = 0;
  for (std::size_t i = 0; i < plane; ++i) {
    if (!m.pixels[i]) continue;
    ++count;
    for (int ch = 0; ch < c; ++ch) p[ch] += z.data[ch * plane + i];
  }
  if (count == 0) {
    throw EmptyMaskError("masked_average_pool: mask is empty on the " + std::to_string(h) + "x" +
                         std::to_string(w) + " latent grid");
  }
  for (auto& v : p) v /= static_cast<double>(count);
  return p;
}

Tensor cosine_similarity_map(const Prototype& prototype, const LatentTensor& z) {
  require_latent(z, "cosine_similarity_map");
  const int c = z.dim(1), h = z.dim(2), w = z.dim(3);
  if (static_cast<int>(prototype.size()) != c) {
    throw ShapeError("cosine_similarity_map: prototype has " + std::to_string(prototype.size()) +
                     " channels, latent has " + std::to_string(c));
  }
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  double pnorm = 0;
  for (double v : prototype) pnorm += v * v;
  pnorm = std::sqrt(pnorm);
  Tensor prob({1, h, w});
  for (std::size_t i = 0; i < plane; ++i) {
    double dot = 0, znorm = 0;
    for (int ch = 0; ch < c; ++ch) {
      const double v = z.data[ch * plane + i];
      dot += prototype[ch] * v;
      znorm += v * v;
    }
    prob.data[i] = dot / (pnorm * std::sqrt(znorm) + 1e-8);
  }
  return prob;
}

Prototype extract_query_prototype(const LatentTensor& z, const Tensor& prob, double tau,
                                  std::vector<std::size_t>* selected) {
  require_latent(z, "extract_query_prototype");
  const int c = z.dim(1), h = z.dim(2), w = z.dim(3);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  if (prob.size() != plane) {
    throw ShapeError("extract_query_prototype: probability map " + nn::shape_str(prob.shape) +
                     " does not match latent grid " + std::to_string(h) + "x" + std::to_string(w));
  }
  std::vector<std::size_t> picked;
  for (std::size_t i = 0; i < plane; ++i) {
    if (prob.data[i] > tau) picked.push_back(i);
  }
  if (picked.empty()) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < plane; ++i) {
      if (prob.data[i] > prob.data[best]) best = i;
    }
    picked.push_back(best);
  }
  Prototype p(c, 0.0);
  for (std::size_t i : picked) {
    for (int ch = 0; ch < c; ++ch) p[ch] += z.data[ch * plane + i];
  }
  for (auto& v : p) v /= static_cast<double>(picked.size());
  if (selected) *selected = std::move(picked);
  return p;
}

LatentTensor enhance_query(const LatentTensor& z, const Prototype& prototype) {
  require_latent(z, "enhance_query");
  const int c = z.dim(1), h = z.dim(2), w = z.dim(3);
  if (static_cast<int>(prototype.size()) != c) throw ShapeError("enhance_query: prototype/latent channel mismatch");
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  LatentTensor out({1, 2 * c, h, w});
  std::copy(z.data.begin(), z.data.end(), out.data.begin());
  for (int ch = 0; ch < c; ++ch) {
    std::fill_n(out.data.begin() + static_cast<std::ptrdiff_t>((c + ch) * plane), plane, prototype[ch]);
  }
  return out;
}

LatentTensor query_enhancement(const LatentTensor& support_latent, const BinaryMask& support_mask,
                               const LatentTensor& query_latent, double tau) {
  const Prototype ps = masked_average_pool(support_latent, support_mask);
  const Tensor prob = cosine_similarity_map(ps, query_latent);
  return enhance_query(query_latent, extract_query_prototype(query_latent, prob, tau));
}

// ---------------------------------------------------------------------------
// SII block

namespace {

template <typename Real>
typename SIIBlock<Real>::Attention make_attention(int channels, int kv_dim, std::mt19937_64& rng) {
  return {nn::Linear<Real>(channels, channels, rng), nn::Linear<Real>(kv_dim, channels, rng),
          nn::Linear<Real>(kv_dim, channels, rng), nn::Linear<Real>(channels, channels, rng)};
}

template <typename Real>
nn::Var<Real> run_attention(const typename SIIBlock<Real>::Attention& a, const nn::Var<Real>& x,
                            const nn::Var<Real>& context, int heads, std::vector<double>* trace) {
  std::vector<Real> probs;
  auto y = nn::attention(a.q(x), a.k(context), a.v(context), heads, trace ? &probs : nullptr);
  if (trace) trace->assign(probs.begin(), probs.end());
  return a.out(y);
}

template <typename Real>
void collect_attention(const typename SIIBlock<Real>::Attention& a, const std::string& prefix,
                       nn::ParamList<Real>& out) {
  a.q.collect(prefix + ".q", out);
  a.k.collect(prefix + ".k", out);
  a.v.collect(prefix + ".v", out);
  a.out.collect(prefix + ".out", out);
}

}  // namespace

template <typename Real>
SIIBlock<Real>::SIIBlock(int channels, int text_dim, int heads, std::mt19937_64& rng, int ff_mult)
    : norm_self(channels),
      norm_support(channels),
      norm_text(channels),
      norm_ff(channels),
      channels_(channels),
      heads_(heads) {
  if (heads < 1 || channels % heads != 0) {
    throw ShapeError("SIIBlock: " + std::to_string(channels) + " channels not divisible by " +
                     std::to_string(heads) + " heads");
  }
  self_attn = make_attention<Real>(channels, channels, rng);
  support_attn = make_attention<Real>(channels, channels, rng);
  support_attn.out.zero_init();
  text_attn = make_attention<Real>(channels, text_dim, rng);
  ff_in = nn::Linear<Real>(channels, ff_mult * channels, rng);
  ff_out = nn::Linear<Real>(ff_mult * channels, channels, rng);
}

template <typename Real>
nn::Var<Real> SIIBlock<Real>::operator()(const nn::Var<Real>& query, const nn::Var<Real>& support,
                                         const nn::Var<Real>& text, SIITrace* trace) const {
  if (query.shape().size() != 2 || query.dim(1) != channels_) {
    throw ShapeError("SIIBlock: query tokens " + nn::shape_str(query.shape()) + ", expected (n," +
                     std::to_string(channels_) + ")");
  }
  if (support.defined() && (support.shape().size() != 2 || support.dim(1) != channels_)) {
    throw ShapeError("SIIBlock: support tokens " + nn::shape_str(support.shape()) + " do not have " +
                     std::to_string(channels_) + " channels");
  }
  if (text.shape().size() != 2 || text.dim(0) != 1) {
    throw ShapeError("SIIBlock: condition must be a single token, got " + nn::shape_str(text.shape()));
  }
  auto h = norm_self(query);
  auto x = nn::add(query, run_attention(self_attn, h, h, heads_, trace ? &trace->self_attention : nullptr));
  if (support.defined()) {
    x = nn::add(x, run_attention(support_attn, norm_support(x), support, heads_,
                                 trace ? &trace->support_attention : nullptr));
  }
  x = nn::add(x, run_attention(text_attn, norm_text(x), text, heads_, trace ? &trace->text_attention : nullptr));
  return nn::add(x, ff_out(nn::gelu(ff_in(norm_ff(x)))));
}

template <typename Real>
void SIIBlock<Real>::collect(const std::string& prefix, nn::ParamList<Real>& out) const {
  norm_self.collect(prefix + ".norm_self", out);
  collect_attention(self_attn, prefix + ".self_attn", out);
  norm_support.collect(prefix + ".norm_support", out);
  collect_attention(support_attn, prefix + ".support_attn", out);
  norm_text.collect(prefix + ".norm_text", out);
  collect_attention(text_attn, prefix + ".text_attn", out);
  norm_ff.collect(prefix + ".norm_ff", out);
  ff_in.collect(prefix + ".ff_in", out);
  ff_out.collect(prefix + ".ff_out", out);
}

template class SIIBlock<float>;
template class SIIBlock<double>;

}  // namespace latentseg
