#pragma once

// Support-query interaction: prototype-based query enhancement on latents,
// and the transformer block that injects support tokens into query tokens.

#include <random>
#include <string>
#include <vector>

#include "latentseg/layers.hpp"
#include "latentseg/nn.hpp"
#include "latentseg/types.hpp"

namespace latentseg {

// Foreground mean of z (1,c,h,w) under `mask`, which is nearest-resampled to
// (h,w) first. Throws EmptyMaskError when no latent cell is selected.
Prototype masked_average_pool(const LatentTensor& z, const BinaryMask& mask);

// prob(i,j) = <p, z_ij> / (|p| |z_ij| + 1e-8), returned as (1,h,w).
Tensor cosine_similarity_map(const Prototype& prototype, const LatentTensor& z);

// Mean of z over cells with prob > tau. With no such cell, the single argmax
// cell (first in row-major order on ties) is used. `selected` receives the
// flat indices that were averaged.
Prototype extract_query_prototype(const LatentTensor& z, const Tensor& prob, double tau = 0.7,
                                  std::vector<std::size_t>* selected = nullptr);

// (1,c,h,w) -> (1,2c,h,w): z followed by the prototype broadcast over (h,w).
LatentTensor enhance_query(const LatentTensor& z, const Prototype& prototype);

// Full enhancement path for one episode: support prototype, similarity on
// the query latent, query prototype, concatenation.
LatentTensor query_enhancement(const LatentTensor& support_latent, const BinaryMask& support_mask,
                               const LatentTensor& query_latent, double tau = 0.7);

// Attention maps recorded by one block call, each (heads, n_query, n_key).
struct SIITrace {
  std::vector<double> self_attention;
  std::vector<double> support_attention;
  std::vector<double> text_attention;
};

// Pre-norm transformer block: self-attention, support cross-attention
// (out-projection zero at init), text cross-attention, GELU feed-forward,
// each with a residual connection. Tokens are (n, channels).
template <typename Real>
class SIIBlock {
 public:
  SIIBlock() = default;
  SIIBlock(int channels, int text_dim, int heads, std::mt19937_64& rng, int ff_mult = 4);

  // `support` may be undefined, which skips the injection stage.
  nn::Var<Real> operator()(const nn::Var<Real>& query, const nn::Var<Real>& support,
                           const nn::Var<Real>& text, SIITrace* trace = nullptr) const;

  void collect(const std::string& prefix, nn::ParamList<Real>& out) const;
  int channels() const { return channels_; }
  int heads() const { return heads_; }

  struct Attention {
    nn::Linear<Real> q, k, v, out;
  };
  nn::LayerNorm<Real> norm_self, norm_support, norm_text, norm_ff;
  Attention self_attn, support_attn, text_attn;
  nn::Linear<Real> ff_in, ff_out;

 private:
  int channels_ = 0;
  int heads_ = 1;
};

}  // namespace latentseg
