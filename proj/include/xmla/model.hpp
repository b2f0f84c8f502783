#pragma once

#include <string>
#include <vector>

#include "xmla/attention.hpp"
#include "xmla/upcycle.hpp"

namespace xmla {

// Byte-level tokenizer: token ids 0..255 are raw bytes, 256 is a BOS marker.
constexpr int64_t kByteVocab = 256;
constexpr int64_t kBosToken = 256;
constexpr int64_t kDefaultVocab = 257;

struct ModelConfig {
    int64_t vocab_size = kDefaultVocab;
    int64_t n_layers = 0;
    int64_t mlp_hidden = 0;
    AttentionGeometry geometry;
    std::vector<AttentionKind> layer_kinds;  // one per layer
    bool tie_embeddings = true;
    bool mla_layernorm = false;  // intermediate LayerNorm inside MLA blocks
    double theta_base = 10000.0;

    void validate() const;
    // Closed-form scalar count of a freshly constructed model (fixed-rank
    // MLA layers at geometry.r_q / geometry.r_kv).
    int64_t param_count() const;
};

struct MlpWeights {
    Tensor w_gate;  // d x hidden
    Tensor w_up;    // d x hidden
    Tensor w_down;  // hidden x d
};

struct LayerWeights {
    AttentionKind kind = AttentionKind::Attention;
    MhaWeights attn;  // valid when kind == Attention
    MlaWeights mla;   // valid when kind == Mla
    Tensor attn_norm_gain;
    Tensor mlp_norm_gain;
    MlpWeights mlp;
};

// Pre-norm decoder: RMS-normalized residual blocks, gated MLP, byte-level
// vocabulary, optionally tied input/output embeddings.
struct LmModel {
    ModelConfig config;
    Tensor tok_emb;  // vocab x d
    std::vector<LayerWeights> layers;
    Tensor final_norm_gain;
    Tensor lm_head;  // d x vocab, only when !tie_embeddings

    static LmModel random(const ModelConfig& cfg, uint64_t seed);

    std::vector<std::pair<std::string, Tensor>> named_params();
    std::vector<Tensor> params();
    int64_t num_params() const;
    LmModel clone() const;
    void set_requires_grad(bool v);
    void zero_grads();
};

std::vector<KvCacheState> make_caches(const ModelConfig& cfg);

// Causal forward over `tokens`, appending to the per-layer caches.
// Returns logits, one row per input token.
Tensor lm_forward(const LmModel& model, const std::vector<int64_t>& tokens,
                  std::vector<KvCacheState>& caches, const AttnOptions& opts = {});
// Convenience: fresh caches, full sequence.
Tensor lm_forward(const LmModel& model, const std::vector<int64_t>& tokens,
                  const AttnOptions& opts = {});

// Greedy decoding; ties break toward the lowest token id. The cache-taking
// overload leaves one cached row per sequence token.
std::vector<int64_t> generate(const LmModel& model, const std::vector<int64_t>& prompt, int64_t n_new,
                              std::vector<KvCacheState>& caches);
std::vector<int64_t> generate(const LmModel& model, const std::vector<int64_t>& prompt, int64_t n_new);

// exp(mean causal next-token NLL) over the stream, evaluated in windows of
// `context_len` tokens.
double perplexity(const LmModel& model, const std::vector<int64_t>& corpus, int64_t context_len);

struct ModelUpcycleReport {
    std::vector<int64_t> converted_layers;
    std::vector<UpcycleReport> per_layer;
    Ratio cache_ratio;  // whole-model, heterogeneous ranks included
};

// Convert selected Attention layers to MLA via the SVD initialization; all
// other weights are copied verbatim. The donor is untouched. An empty
// selection list with all_layers=false converts nothing.
LmModel upcycle_model(const LmModel& donor, const RankSpec& spec, bool all_layers,
                      const std::vector<int64_t>& layer_selection, bool enable_ln,
                      ModelUpcycleReport* report = nullptr);

// Whole-model footprint with per-layer actual ranks read from the weights.
CacheFootprint model_cache_footprint(const LmModel& model, int64_t seq_len);

}  // namespace xmla
