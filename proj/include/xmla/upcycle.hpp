#pragma once

#include <cstdint>
#include <vector>

#include "xmla/attention.hpp"

namespace xmla {

// How to pick the latent ranks: constants across layers, or per-layer from
// the singular spectrum via an energy threshold in (0, 1].
struct RankSpec {
    enum class Kind { Fixed, Dynamic };
    Kind kind = Kind::Fixed;
    int64_t r_q = 0;
    int64_t r_kv = 0;
    double delta_q = 0.0;
    double delta_kv = 0.0;

    static RankSpec fixed(int64_t r_q, int64_t r_kv);
    static RankSpec dynamic(double delta_q, double delta_kv);
    void validate() const;
};

struct UpcycleReport {
    int64_t r_q = 0;
    int64_t r_kv = 0;
    double energy_q = 0.0;   // fraction of squared singular mass captured
    double energy_kv = 0.0;
    double recon_err_q = 0.0;   // ||W - W_lowrank||_F / ||W||_F
    double recon_err_kv = 0.0;  // joint [W^K | W^V]
    Ratio cache_ratio;          // (r_kv + d_r) / (2 * n_kv * d_h), donor baseline
    int64_t param_delta = 0;    // projection parameters vs donor q/k/v
};

// Duplicate each KV head's weight columns group-wise so a GQA donor looks
// like plain MHA. Forward outputs are unchanged.
MhaWeights expand_gqa_to_mha(const MhaWeights& w, const AttentionGeometry& geo);

// Smallest R whose leading squared singular mass reaches delta * total.
int64_t select_rank_dynamic(const std::vector<double>& sigma, double delta);

struct QueryFactors {
    Tensor w_dq, w_uq, w_qr;
};
struct KvFactors {
    Tensor w_dkv, w_uk, w_uv;
};

// SVD of W^Q; U becomes the down-projection, sigma*V^T is viewed per head
// and split into the first-d_qk (NoPE) and last-d_r (RoPE) column slices.
// When d_qk + d_r > d_h the slices deliberately overlap.
QueryFactors init_query_path(const Tensor& w_q, int64_t r_q, const AttentionGeometry& geo);

// Joint SVD of [W^K | W^V]; W^UV takes the value half of sigma*V^T whole,
// W^UK takes the first d_qk columns of each head of the key half.
KvFactors init_kv_path(const Tensor& w_k, const Tensor& w_v, int64_t r_kv, const AttentionGeometry& geo);

// Head-averaged key projection, last d_r columns.
Tensor init_rope_key(const Tensor& w_k, const AttentionGeometry& geo);

// Full conversion of one attention block: GQA expansion, rank resolution,
// the three factor initializations, verbatim W^O. Dynamic ranks are rounded
// up to the next multiple of 8 (clamped to the spectrum length).
std::pair<MlaWeights, UpcycleReport> upcycle_attention(const MhaWeights& w, const AttentionGeometry& geo,
                                                       const RankSpec& spec, bool enable_ln);

// Baseline initializer: same shapes, Glorot-normal entries. Fixed ranks only.
MlaWeights random_init_attention(const AttentionGeometry& geo, const RankSpec& spec, uint64_t seed,
                                 bool enable_ln = false);

}  // namespace xmla
