#pragma once

#include <memory>
#include <string>
#include <vector>

#include "hrmlm/rng.hpp"
#include "hrmlm/tensor.hpp"

namespace hrmlm {

// Precomputed rotary tables: cs[(pos*half + j)*2] = cos(pos * theta_j),
// cs[...*2 + 1] = sin(pos * theta_j), theta_j = base^(-2j/d_k), applied to
// consecutive element pairs (2j, 2j+1) of every d_k-wide head slice.
struct RopeTable {
  int64_t max_pos = 0;
  int64_t head_dim = 0;
  std::shared_ptr<std::vector<double>> cs;
};

RopeTable make_rope_table(int64_t max_pos, int64_t head_dim, double base);

// Rotate each d_k-wide head slice of x ([n, H*d_k]) by the position-dependent
// angles of its row index. Norm-preserving per pair.
Tensor rope_apply(const Tensor& x, const RopeTable& table);

// Additive attention mask: 0 where key <= query position, -inf above.
Tensor causal_mask(int64_t n);

// Multi-head self-attention with rotary positions and a causal mask.
// x: [n, d]; w_qkv: [d, 3d] (fused Q|K|V); w_o: [d, d]. If attn_probs is
// given, the per-head attention matrices ([n, n], row-stochastic over the
// causal prefix) are appended to it.
Tensor causal_mhsa(const Tensor& x, const Tensor& w_qkv, const Tensor& w_o,
                   int64_t heads, const RopeTable& rope,
                   std::vector<Tensor>* attn_probs = nullptr);

// silu(x w1) * (x w2) projected by w3. w1, w2: [d, 4d]; w3: [4d, d].
Tensor swiglu(const Tensor& x, const Tensor& w1, const Tensor& w2,
              const Tensor& w3);

// One pre-activation residual block, the unit every model here reuses:
//   x'  = rms_norm(x + mhsa(x))
//   x'' = rms_norm(x' + swiglu(x'))
struct AttnBlockParams {
  Tensor w_qkv;      // [d, 3d]
  Tensor w_o;        // [d, d]
  Tensor w_ffn1;     // [d, 4d]
  Tensor w_ffn2;     // [d, 4d]
  Tensor w_ffn3;     // [4d, d]
  Tensor norm_attn;  // [d]
  Tensor norm_ffn;   // [d]
};

AttnBlockParams make_attn_block(int64_t d, Rng& rng, double init_std);

void collect_block_params(const std::string& prefix, AttnBlockParams& p,
                          std::vector<NamedParam>& out);

Tensor attn_block_forward(const Tensor& x, const AttnBlockParams& p,
                          int64_t heads, const RopeTable& rope, double norm_eps);

// Closed-form parameter count of one block: 16 d^2 + 2 d
// (3d^2 qkv + d^2 out + 12d^2 ffn + 2d norm scales).
int64_t block_param_count(int64_t d);

}  // namespace hrmlm
