#include "hrmlm/blocks.hpp"

#include <cmath>
#include <limits>

#include "hrmlm/errors.hpp"

namespace hrmlm {

RopeTable make_rope_table(int64_t max_pos, int64_t head_dim, double base) {
  if (head_dim <= 0 || head_dim % 2 != 0) {
    throw config_error("rotary positions need an even head dimension, got " +
                       std::to_string(head_dim));
  }
  if (max_pos <= 0) throw config_error("rope table needs max_pos > 0");
  if (base <= 0.0) throw config_error("rope base must be positive");
  const int64_t half = head_dim / 2;
  RopeTable t;
  t.max_pos = max_pos;
  t.head_dim = head_dim;
  t.cs = std::make_shared<std::vector<double>>(static_cast<size_t>(max_pos * half * 2));
  for (int64_t pos = 0; pos < max_pos; ++pos) {
    for (int64_t j = 0; j < half; ++j) {
      const double theta =
          std::pow(base, -2.0 * static_cast<double>(j) / static_cast<double>(head_dim));
      const double a = static_cast<double>(pos) * theta;
      (*t.cs)[static_cast<size_t>((pos * half + j) * 2)] = std::cos(a);
      (*t.cs)[static_cast<size_t>((pos * half + j) * 2 + 1)] = std::sin(a);
    }
  }
  return t;
}

Tensor rope_apply(const Tensor& x, const RopeTable& table) {
  if (x.rank() != 2) throw config_error("rope_apply: input must be rank 2");
  const int64_t n = x.dim(0), w = x.dim(1);
  const int64_t dk = table.head_dim, half = dk / 2;
  if (w % dk != 0) {
    throw config_error("rope_apply: width " + std::to_string(w) +
                       " is not a multiple of head dimension " + std::to_string(dk));
  }
  if (n > table.max_pos) {
    throw config_error("rope_apply: " + std::to_string(n) +
                       " rows exceed the table's " + std::to_string(table.max_pos) +
                       " positions");
  }
  const int64_t blocks = w / dk;
  std::vector<double> out(static_cast<size_t>(n * w));
  const std::vector<double>& cs = *table.cs;
  for (int64_t t = 0; t < n; ++t) {
    const double* xr = x.data() + t * w;
    double* orow = out.data() + t * w;
    for (int64_t b = 0; b < blocks; ++b) {
      for (int64_t j = 0; j < half; ++j) {
        const double c = cs[static_cast<size_t>((t * half + j) * 2)];
        const double s = cs[static_cast<size_t>((t * half + j) * 2 + 1)];
        const double x0 = xr[b * dk + 2 * j], x1 = xr[b * dk + 2 * j + 1];
        orow[b * dk + 2 * j] = c * x0 - s * x1;
        orow[b * dk + 2 * j + 1] = s * x0 + c * x1;
      }
    }
  }
  detail::Node* px = x.node().get();
  auto cs_ptr = table.cs;
  return Tensor::make_op(
      "rope_apply", x.shape(), std::move(out), {x},
      [px, cs_ptr, n, w, dk, half, blocks](detail::Node& self) {
        if (!px->tracked) return;
        px->ensure_grad();
        const std::vector<double>& cs = *cs_ptr;
        for (int64_t t = 0; t < n; ++t) {
          const double* gr = self.grad.data() + t * w;
          double* xg = px->grad.data() + t * w;
          for (int64_t b = 0; b < blocks; ++b) {
            for (int64_t j = 0; j < half; ++j) {
              const double c = cs[static_cast<size_t>((t * half + j) * 2)];
              const double s = cs[static_cast<size_t>((t * half + j) * 2 + 1)];
              const double g0 = gr[b * dk + 2 * j], g1 = gr[b * dk + 2 * j + 1];
              xg[b * dk + 2 * j] += c * g0 + s * g1;
              xg[b * dk + 2 * j + 1] += -s * g0 + c * g1;
            }
          }
        }
      });
}

Tensor causal_mask(int64_t n) {
  const double ninf = -std::numeric_limits<double>::infinity();
  std::vector<double> m(static_cast<size_t>(n * n), 0.0);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = i + 1; j < n; ++j) m[static_cast<size_t>(i * n + j)] = ninf;
  return Tensor::from_data({n, n}, std::move(m));
}

Tensor causal_mhsa(const Tensor& x, const Tensor& w_qkv, const Tensor& w_o,
                   int64_t heads, const RopeTable& rope,
                   std::vector<Tensor>* attn_probs) {
  if (x.rank() != 2) throw config_error("causal_mhsa: input must be rank 2");
  const int64_t n = x.dim(0), d = x.dim(1);
  if (heads <= 0 || d % heads != 0) {
    throw config_error("causal_mhsa: width " + std::to_string(d) +
                       " is not divisible into " + std::to_string(heads) + " heads");
  }
  const int64_t dk = d / heads;
  if (dk != rope.head_dim) {
    throw config_error("causal_mhsa: head dimension " + std::to_string(dk) +
                       " does not match the rope table's " +
                       std::to_string(rope.head_dim));
  }
  if (w_qkv.dim(0) != d || w_qkv.dim(1) != 3 * d) {
    throw config_error("causal_mhsa: w_qkv must be [d, 3d]");
  }
  if (w_o.dim(0) != d || w_o.dim(1) != d) {
    throw config_error("causal_mhsa: w_o must be [d, d]");
  }
  Tensor qkv = matmul(x, w_qkv);  // [n, 3d]
  Tensor q = rope_apply(slice_cols(qkv, 0, d), rope);
  Tensor k = rope_apply(slice_cols(qkv, d, d), rope);
  Tensor v = slice_cols(qkv, 2 * d, d);
  Tensor mask = causal_mask(n);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dk));
  std::vector<Tensor> head_out;
  head_out.reserve(static_cast<size_t>(heads));
  for (int64_t h = 0; h < heads; ++h) {
    Tensor qh = slice_cols(q, h * dk, dk);
    Tensor kh = slice_cols(k, h * dk, dk);
    Tensor vh = slice_cols(v, h * dk, dk);
    Tensor scores = scale(matmul_nt(qh, kh), inv_sqrt);  // [n, n]
    Tensor probs = softmax_lastdim(scores, &mask);
    if (attn_probs) attn_probs->push_back(probs);
    head_out.push_back(matmul(probs, vh));  // [n, dk]
  }
  return matmul(concat_cols(head_out), w_o);
}

Tensor swiglu(const Tensor& x, const Tensor& w1, const Tensor& w2,
              const Tensor& w3) {
  return matmul(mul(silu(matmul(x, w1)), matmul(x, w2)), w3);
}

AttnBlockParams make_attn_block(int64_t d, Rng& rng, double init_std) {
  if (d <= 0) throw config_error("block width must be positive");
  auto mat = [&](int64_t r, int64_t c) {
    Tensor t = Tensor::zeros({r, c}, true);
    for (double& v : t.vec()) v = rng.normal(0.0, init_std);
    return t;
  };
  AttnBlockParams p;
  p.w_qkv = mat(d, 3 * d);
  p.w_o = mat(d, d);
  p.w_ffn1 = mat(d, 4 * d);
  p.w_ffn2 = mat(d, 4 * d);
  p.w_ffn3 = mat(4 * d, d);
  p.norm_attn = Tensor::full({d}, 1.0, true);
  p.norm_ffn = Tensor::full({d}, 1.0, true);
  return p;
}

void collect_block_params(const std::string& prefix, AttnBlockParams& p,
                          std::vector<NamedParam>& out) {
  out.push_back({prefix + ".w_qkv", p.w_qkv, true});
  out.push_back({prefix + ".w_o", p.w_o, true});
  out.push_back({prefix + ".w_ffn1", p.w_ffn1, true});
  out.push_back({prefix + ".w_ffn2", p.w_ffn2, true});
  out.push_back({prefix + ".w_ffn3", p.w_ffn3, true});
  out.push_back({prefix + ".norm_attn", p.norm_attn, false});
  out.push_back({prefix + ".norm_ffn", p.norm_ffn, false});
}

Tensor attn_block_forward(const Tensor& x, const AttnBlockParams& p,
                          int64_t heads, const RopeTable& rope, double norm_eps) {
  Tensor att = causal_mhsa(x, p.w_qkv, p.w_o, heads, rope);
  Tensor x1 = rms_norm(add(x, att), p.norm_attn, norm_eps);
  Tensor ff = swiglu(x1, p.w_ffn1, p.w_ffn2, p.w_ffn3);
  return rms_norm(add(x1, ff), p.norm_ffn, norm_eps);
}

int64_t block_param_count(int64_t d) { return 16 * d * d + 2 * d; }

}  // namespace hrmlm
