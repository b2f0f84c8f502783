#pragma once

#include <optional>
#include <vector>

#include "xmla/ratio.hpp"
#include "xmla/rng.hpp"
#include "xmla/tensor.hpp"

namespace xmla {

// Symbol home for the attention dimensions. n_kv < n_h means GQA; the
// latent ranks r_q / r_kv only matter for MLA weights.
struct AttentionGeometry {
    int64_t d = 0;     // model hidden width
    int64_t n_h = 0;   // query heads
    int64_t n_kv = 0;  // key/value heads
    int64_t d_h = 0;   // value head width
    int64_t d_qk = 0;  // NoPE query/key head width
    int64_t d_r = 0;   // RoPE head width
    int64_t r_q = 0;   // query latent rank
    int64_t r_kv = 0;  // KV latent rank

    void validate() const;
    int64_t group_size() const { return n_h / n_kv; }
    AttentionGeometry expanded() const;  // n_kv := n_h
    AttentionGeometry with_ranks(int64_t rq, int64_t rkv) const;
};

struct MhaWeights {
    Tensor w_q;  // d x (n_h * d_h)
    Tensor w_k;  // d x (n_kv * d_h)
    Tensor w_v;  // d x (n_kv * d_h)
    Tensor w_o;  // (n_h * d_h) x d

    static MhaWeights random(const AttentionGeometry& geo, Rng& rng);
    void validate(const AttentionGeometry& geo) const;
    std::vector<Tensor*> params();
};

struct LayerNormParams {
    Tensor gain;
    Tensor bias;
    static LayerNormParams identity(int64_t width);
};

struct MlaWeights {
    Tensor w_dq;   // d x r_q
    Tensor w_uq;   // r_q x (n_h * d_qk)
    Tensor w_qr;   // r_q x (n_h * d_r)
    Tensor w_dkv;  // d x r_kv
    Tensor w_uk;   // r_kv x (n_h * d_qk)
    Tensor w_uv;   // r_kv x (n_h * d_h)
    Tensor w_kr;   // d x d_r (shared RoPE key; see note below)
    Tensor w_o;    // (n_h * d_h) x d
    std::optional<LayerNormParams> ln_q;   // over r_q
    std::optional<LayerNormParams> ln_kv;  // over r_kv

    // Actual ranks carried by this weight set (may differ per layer under
    // dynamic rank selection).
    int64_t rank_q() const { return w_dq.shape()[1]; }
    int64_t rank_kv() const { return w_dkv.shape()[1]; }

    void validate(const AttentionGeometry& geo) const;
    std::vector<Tensor*> params();
};

// Decode-path weights with the key/value up-projections folded away so a
// step touches only the latent cache. w_dkv and w_kr are carried unchanged
// to append new cache rows.
struct AbsorbedMlaWeights {
    Tensor w_q_abs;    // d x (n_h * r_kv)
    Tensor w_o_abs;    // (n_h * r_kv) x d
    Tensor w_qr_path;  // d x (n_h * d_r), w_dq * w_qr folded
    Tensor w_kr;       // d x d_r
    Tensor w_dkv;      // d x r_kv
};

// Rolling per-layer cache. Append-only within a generation session.
class KvCacheState {
public:
    enum class Kind { Full, Latent };

    static KvCacheState full() { return KvCacheState(Kind::Full); }
    static KvCacheState latent() { return KvCacheState(Kind::Latent); }

    Kind kind() const { return kind_; }
    int64_t length() const { return length_; }
    int64_t scalar_count() const;

    // Full variant
    const Tensor& k() const;
    const Tensor& v() const;
    void append_full(const Tensor& k_new, const Tensor& v_new);

    // Latent variant
    const Tensor& c_kv() const;
    const Tensor& k_r() const;
    void append_latent(const Tensor& c_new, const Tensor& k_r_new);

private:
    explicit KvCacheState(Kind kind) : kind_(kind) {}
    Kind kind_;
    int64_t length_ = 0;
    Tensor a_, b_;  // k/v or c_kv/k_r
};

struct AttnOptions {
    bool causal = true;
    bool apply_rope = true;
    double theta_base = 10000.0;
};

// Rotate consecutive coordinate pairs of each head by pos * theta^(-2i/d),
// the usual rotary embedding. head_dim must be even. Taped.
Tensor rope_apply(const Tensor& x, const std::vector<int64_t>& positions, int64_t head_dim,
                  double theta_base);

// Standard multi-head / grouped-query attention. New K/V rows are appended
// to the cache; output is l x d. Cache must be the Full variant.
Tensor mha_forward(const Tensor& h, const MhaWeights& w, const AttentionGeometry& geo,
                   KvCacheState& cache, const AttnOptions& opts = {});

// Latent attention, reconstruction path: keys/values are rebuilt from the
// cached latents every call. Cache must be the Latent variant.
Tensor mla_forward_naive(const Tensor& h, const MlaWeights& w, const AttentionGeometry& geo,
                         KvCacheState& cache, const AttnOptions& opts = {});

// Fold w_uk into the query path and w_uv into the output path. Refuses
// weights with intermediate LayerNorm (folding through a nonlinearity is
// not representable).
AbsorbedMlaWeights absorb(const MlaWeights& w, const AttentionGeometry& geo);
AbsorbedMlaWeights absorb(const AbsorbedMlaWeights& w, const AttentionGeometry& geo);

Tensor mla_forward_absorbed(const Tensor& h, const AbsorbedMlaWeights& aw,
                            const AttentionGeometry& geo, KvCacheState& cache,
                            const AttnOptions& opts = {});

enum class AttentionKind { Attention, Mla };

struct CacheFootprint {
    int64_t scalars = 0;   // cached scalars for the given layout
    int64_t baseline = 0;  // all-GQA baseline at the same geometry
    Ratio ratio;           // scalars / baseline
};

// Cached scalars per token per layer: 2*n_kv*d_h for MHA/GQA, r_kv + d_r
// for MLA. Aggregated over a per-layer kind map against the all-GQA
// baseline of the same geometry.
CacheFootprint cache_footprint(const AttentionGeometry& geo, const std::vector<AttentionKind>& layer_kinds,
                               int64_t seq_len);
CacheFootprint cache_footprint(const AttentionGeometry& geo, AttentionKind kind, int64_t seq_len,
                               int64_t n_layers);

int64_t per_token_scalars(const AttentionGeometry& geo, AttentionKind kind);

}  // namespace xmla
