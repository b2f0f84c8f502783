#include "xmla/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <thread>

namespace xmla {

void ModelConfig::validate() const {
    if (vocab_size < 2) throw ConfigError("model config: vocab_size must be >= 2");
    if (n_layers < 1) throw ConfigError("model config: n_layers must be >= 1");
    if (mlp_hidden < 1) throw ConfigError("model config: mlp_hidden must be >= 1");
    if (static_cast<int64_t>(layer_kinds.size()) != n_layers)
        throw ConfigError("model config: layer_kinds has " + std::to_string(layer_kinds.size()) +
                          " entries for " + std::to_string(n_layers) + " layers");
    geometry.validate();
}

int64_t ModelConfig::param_count() const {
    const AttentionGeometry& g = geometry;
    int64_t mha = g.d * g.n_h * g.d_h + 2 * g.d * g.n_kv * g.d_h + g.n_h * g.d_h * g.d;
    int64_t mla = g.d * g.r_q + g.r_q * g.n_h * (g.d_qk + g.d_r) + g.d * g.r_kv +
                  g.r_kv * g.n_h * (g.d_qk + g.d_h) + g.d * g.d_r + g.n_h * g.d_h * g.d;
    if (mla_layernorm) mla += 2 * (g.r_q + g.r_kv);
    int64_t total = vocab_size * g.d;  // embeddings
    for (AttentionKind k : layer_kinds) {
        total += (k == AttentionKind::Mla ? mla : mha);
        total += 2 * g.d;                  // the two pre-norm gains
        total += 3 * g.d * mlp_hidden;     // gate, up, down
    }
    total += g.d;  // final norm
    if (!tie_embeddings) total += g.d * vocab_size;
    return total;
}

namespace {

Tensor glorot(int64_t rows, int64_t cols, Rng& rng) {
    double stddev = std::sqrt(2.0 / static_cast<double>(rows + cols));
    Tensor t({rows, cols}, 0.0);
    for (double& v : t.data()) v = rng.normal(0.0, stddev);
    return t;
}

}  // namespace

LmModel LmModel::random(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    const AttentionGeometry& g = cfg.geometry;
    LmModel m;
    m.config = cfg;
    Rng root(seed);
    Rng rng = root.substream("model-init");
    m.tok_emb = glorot(cfg.vocab_size, g.d, rng);
    for (int64_t i = 0; i < cfg.n_layers; ++i) {
        LayerWeights lw;
        lw.kind = cfg.layer_kinds[static_cast<size_t>(i)];
        if (lw.kind == AttentionKind::Attention) {
            lw.attn = MhaWeights::random(g, rng);
        } else {
            RankSpec spec = RankSpec::fixed(g.r_q, g.r_kv);
            lw.mla = random_init_attention(g, spec, rng.next_u64(), cfg.mla_layernorm);
        }
        lw.attn_norm_gain = Tensor::ones({g.d});
        lw.mlp_norm_gain = Tensor::ones({g.d});
        lw.mlp.w_gate = glorot(g.d, cfg.mlp_hidden, rng);
        lw.mlp.w_up = glorot(g.d, cfg.mlp_hidden, rng);
        lw.mlp.w_down = glorot(cfg.mlp_hidden, g.d, rng);
        m.layers.push_back(std::move(lw));
    }
    m.final_norm_gain = Tensor::ones({g.d});
    if (!cfg.tie_embeddings) m.lm_head = glorot(g.d, cfg.vocab_size, rng);
    return m;
}

std::vector<std::pair<std::string, Tensor>> LmModel::named_params() {
    std::vector<std::pair<std::string, Tensor>> out;
    out.emplace_back("tok_emb", tok_emb);
    for (size_t i = 0; i < layers.size(); ++i) {
        std::string p = "layers." + std::to_string(i) + ".";
        LayerWeights& lw = layers[i];
        out.emplace_back(p + "attn_norm.gain", lw.attn_norm_gain);
        if (lw.kind == AttentionKind::Attention) {
            out.emplace_back(p + "attn.w_q", lw.attn.w_q);
            out.emplace_back(p + "attn.w_k", lw.attn.w_k);
            out.emplace_back(p + "attn.w_v", lw.attn.w_v);
            out.emplace_back(p + "attn.w_o", lw.attn.w_o);
        } else {
            out.emplace_back(p + "attn.w_dq", lw.mla.w_dq);
            out.emplace_back(p + "attn.w_uq", lw.mla.w_uq);
            out.emplace_back(p + "attn.w_qr", lw.mla.w_qr);
            out.emplace_back(p + "attn.w_dkv", lw.mla.w_dkv);
            out.emplace_back(p + "attn.w_uk", lw.mla.w_uk);
            out.emplace_back(p + "attn.w_uv", lw.mla.w_uv);
            out.emplace_back(p + "attn.w_kr", lw.mla.w_kr);
            out.emplace_back(p + "attn.w_o", lw.mla.w_o);
            if (lw.mla.ln_q) {
                out.emplace_back(p + "attn.ln_q.gain", lw.mla.ln_q->gain);
                out.emplace_back(p + "attn.ln_q.bias", lw.mla.ln_q->bias);
            }
            if (lw.mla.ln_kv) {
                out.emplace_back(p + "attn.ln_kv.gain", lw.mla.ln_kv->gain);
                out.emplace_back(p + "attn.ln_kv.bias", lw.mla.ln_kv->bias);
            }
        }
        out.emplace_back(p + "mlp_norm.gain", lw.mlp_norm_gain);
        out.emplace_back(p + "mlp.w_gate", lw.mlp.w_gate);
        out.emplace_back(p + "mlp.w_up", lw.mlp.w_up);
        out.emplace_back(p + "mlp.w_down", lw.mlp.w_down);
    }
    out.emplace_back("final_norm.gain", final_norm_gain);
    if (!config.tie_embeddings) out.emplace_back("lm_head", lm_head);
    return out;
}

std::vector<Tensor> LmModel::params() {
    std::vector<Tensor> out;
    for (auto& [name, t] : named_params()) out.push_back(t);
    return out;
}

int64_t LmModel::num_params() const {
    int64_t n = 0;
    for (auto& [name, t] : const_cast<LmModel*>(this)->named_params()) n += t.numel();
    return n;
}

LmModel LmModel::clone() const {
    LmModel m;
    m.config = config;
    m.tok_emb = tok_emb.clone();
    for (const LayerWeights& lw : layers) {
        LayerWeights c;
        c.kind = lw.kind;
        if (lw.kind == AttentionKind::Attention) {
            c.attn.w_q = lw.attn.w_q.clone();
            c.attn.w_k = lw.attn.w_k.clone();
            c.attn.w_v = lw.attn.w_v.clone();
            c.attn.w_o = lw.attn.w_o.clone();
        } else {
            c.mla.w_dq = lw.mla.w_dq.clone();
            c.mla.w_uq = lw.mla.w_uq.clone();
            c.mla.w_qr = lw.mla.w_qr.clone();
            c.mla.w_dkv = lw.mla.w_dkv.clone();
            c.mla.w_uk = lw.mla.w_uk.clone();
            c.mla.w_uv = lw.mla.w_uv.clone();
            c.mla.w_kr = lw.mla.w_kr.clone();
            c.mla.w_o = lw.mla.w_o.clone();
            if (lw.mla.ln_q) c.mla.ln_q = LayerNormParams{lw.mla.ln_q->gain.clone(), lw.mla.ln_q->bias.clone()};
            if (lw.mla.ln_kv) c.mla.ln_kv = LayerNormParams{lw.mla.ln_kv->gain.clone(), lw.mla.ln_kv->bias.clone()};
        }
        c.attn_norm_gain = lw.attn_norm_gain.clone();
        c.mlp_norm_gain = lw.mlp_norm_gain.clone();
        c.mlp.w_gate = lw.mlp.w_gate.clone();
        c.mlp.w_up = lw.mlp.w_up.clone();
        c.mlp.w_down = lw.mlp.w_down.clone();
        m.layers.push_back(std::move(c));
    }
    m.final_norm_gain = final_norm_gain.clone();
    if (lm_head.defined()) m.lm_head = lm_head.clone();
    return m;
}

void LmModel::set_requires_grad(bool v) {
    for (auto& [name, t] : named_params()) t.set_requires_grad(v);
}

void LmModel::zero_grads() {
    for (auto& [name, t] : named_params()) t.zero_grad();
}

std::vector<KvCacheState> make_caches(const ModelConfig& cfg) {
    std::vector<KvCacheState> caches;
    caches.reserve(static_cast<size_t>(cfg.n_layers));
    for (AttentionKind k : cfg.layer_kinds)
        caches.push_back(k == AttentionKind::Mla ? KvCacheState::latent() : KvCacheState::full());
    return caches;
}

Tensor lm_forward(const LmModel& model, const std::vector<int64_t>& tokens,
                  std::vector<KvCacheState>& caches, const AttnOptions& opts) {
    const ModelConfig& cfg = model.config;
    if (static_cast<int64_t>(caches.size()) != cfg.n_layers)
        throw CacheError("lm_forward: " + std::to_string(caches.size()) + " caches for " +
                         std::to_string(cfg.n_layers) + " layers");
    for (int64_t t : tokens)
        if (t < 0 || t >= cfg.vocab_size)
            throw VocabError("lm_forward: token id " + std::to_string(t) + " out of range [0," +
                             std::to_string(cfg.vocab_size) + ")");

    AttnOptions layer_opts = opts;
    layer_opts.theta_base = cfg.theta_base;

    Tensor x = embedding_lookup(model.tok_emb, tokens);
    for (int64_t i = 0; i < cfg.n_layers; ++i) {
        const LayerWeights& lw = model.layers[static_cast<size_t>(i)];
        Tensor normed = rms_norm_rows(x, lw.attn_norm_gain);
        Tensor attn_out;
        if (lw.kind == AttentionKind::Attention) {
            attn_out = mha_forward(normed, lw.attn, cfg.geometry, caches[static_cast<size_t>(i)], layer_opts);
        } else {
            attn_out = mla_forward_naive(normed, lw.mla, cfg.geometry, caches[static_cast<size_t>(i)], layer_opts);
        }
        x = add(x, attn_out);
        Tensor normed2 = rms_norm_rows(x, lw.mlp_norm_gain);
        Tensor gated = mul(silu(matmul(normed2, lw.mlp.w_gate)), matmul(normed2, lw.mlp.w_up));
        x = add(x, matmul(gated, lw.mlp.w_down));
    }
    x = rms_norm_rows(x, model.final_norm_gain);
    return cfg.tie_embeddings ? matmul(x, transpose(model.tok_emb)) : matmul(x, model.lm_head);
}

Tensor lm_forward(const LmModel& model, const std::vector<int64_t>& tokens, const AttnOptions& opts) {
    auto caches = make_caches(model.config);
    return lm_forward(model, tokens, caches, opts);
}

std::vector<int64_t> generate(const LmModel& model, const std::vector<int64_t>& prompt, int64_t n_new,
                              std::vector<KvCacheState>& caches) {
    if (n_new < 0) throw DataError("generate: n_new must be >= 0");
    std::vector<int64_t> out = prompt;
    if (n_new == 0) return out;
    if (prompt.empty()) throw DataError("generate: empty prompt");

    // Every emitted token goes through the model so the caches track the full
    // sequence (prompt + n_new rows on exit).
    Tensor logits = lm_forward(model, prompt, caches);
    for (int64_t step = 0; step < n_new; ++step) {
        int64_t l = logits.shape()[0];
        int64_t v = logits.shape()[1];
        const double* row = logits.data().data() + (l - 1) * v;
        int64_t best = 0;
        for (int64_t j = 1; j < v; ++j)
            if (row[j] > row[best]) best = j;
        out.push_back(best);
        logits = lm_forward(model, {best}, caches);
    }
    return out;
}

std::vector<int64_t> generate(const LmModel& model, const std::vector<int64_t>& prompt, int64_t n_new) {
    auto caches = make_caches(model.config);
    return generate(model, prompt, n_new, caches);
}

double perplexity(const LmModel& model, const std::vector<int64_t>& corpus, int64_t context_len) {
    if (corpus.size() < 2) throw DataError("perplexity: corpus must hold at least 2 tokens");
    if (context_len < 1) throw DataError("perplexity: context length must be >= 1");

    double nll = 0.0;
    int64_t count = 0;
    int64_t n = static_cast<int64_t>(corpus.size());
    for (int64_t s = 0; s + 1 < n; s += context_len) {
        int64_t len = std::min(context_len + 1, n - s);
        if (len < 2) break;
        std::vector<int64_t> window(corpus.begin() + s, corpus.begin() + s + len);
        Tensor logits = lm_forward(model, window);
        Tensor ls = log_softmax_rows(logits);
        for (int64_t t = 0; t + 1 < len; ++t) {
            nll -= ls.at(t, window[static_cast<size_t>(t + 1)]);
            ++count;
        }
    }
    return std::exp(nll / static_cast<double>(count));
}

namespace {

int64_t env_thread_cap() {
    const char* s = std::getenv("XMLA_THREADS");
    if (!s) return 1;
    long v = std::strtol(s, nullptr, 10);
    return v >= 1 ? static_cast<int64_t>(v) : 1;
}

}  // namespace

LmModel upcycle_model(const LmModel& donor, const RankSpec& spec, bool all_layers,
                      const std::vector<int64_t>& layer_selection, bool enable_ln,
                      ModelUpcycleReport* report) {
    std::vector<int64_t> selected;
    if (all_layers) {
        for (int64_t i = 0; i < donor.config.n_layers; ++i) selected.push_back(i);
    } else {
        selected = layer_selection;
        std::sort(selected.begin(), selected.end());
    }
    for (int64_t i : selected) {
        if (i < 0 || i >= donor.config.n_layers)
            throw ConfigError("upcycle_model: layer index " + std::to_string(i) + " out of range");
        if (donor.layers[static_cast<size_t>(i)].kind != AttentionKind::Attention)
            throw KindError("upcycle_model: layer " + std::to_string(i) + " is already MLA");
    }

    LmModel out = donor.clone();
    std::vector<UpcycleReport> reports(selected.size());
    std::vector<MlaWeights> converted(selected.size());

    auto convert_range = [&](size_t begin, size_t end) {
        for (size_t si = begin; si < end; ++si) {
            int64_t li = selected[si];
            auto [mla, rep] = upcycle_attention(donor.layers[static_cast<size_t>(li)].attn,
                                                donor.config.geometry, spec, enable_ln);
            converted[si] = std::move(mla);
            reports[si] = rep;
        }
    };

    // Per-layer conversions are pure; XMLA_THREADS > 1 fans them out.
    int64_t threads = std::min<int64_t>(env_thread_cap(), static_cast<int64_t>(selected.size()));
    if (threads > 1) {
        std::vector<std::thread> pool;
        size_t chunk = (selected.size() + static_cast<size_t>(threads) - 1) / static_cast<size_t>(threads);
        for (int64_t t = 0; t < threads; ++t) {
            size_t b = static_cast<size_t>(t) * chunk;
            size_t e = std::min(selected.size(), b + chunk);
            if (b < e) pool.emplace_back(convert_range, b, e);
        }
        for (auto& th : pool) th.join();
    } else if (!selected.empty()) {
        convert_range(0, selected.size());
    }

    for (size_t si = 0; si < selected.size(); ++si) {
        LayerWeights& lw = out.layers[static_cast<size_t>(selected[si])];
        lw.kind = AttentionKind::Mla;
        lw.mla = std::move(converted[si]);
        lw.attn = MhaWeights{};
        out.config.layer_kinds[static_cast<size_t>(selected[si])] = AttentionKind::Mla;
    }
    out.config.mla_layernorm = enable_ln;
    if (spec.kind == RankSpec::Kind::Fixed && !selected.empty()) {
        out.config.geometry.r_q = spec.r_q;
        out.config.geometry.r_kv = spec.r_kv;
    }

    if (report) {
        report->converted_layers = selected;
        report->per_layer = reports;
        report->cache_ratio = model_cache_footprint(out, 1).ratio;
    }
    return out;
}

CacheFootprint model_cache_footprint(const LmModel& model, int64_t seq_len) {
    const AttentionGeometry& g = model.config.geometry;
    int64_t per_layer_base = 2 * g.n_kv * g.d_h;
    int64_t per_token = 0;
    for (const LayerWeights& lw : model.layers)
        per_token += lw.kind == AttentionKind::Mla ? lw.mla.rank_kv() + g.d_r : per_layer_base;
    int64_t baseline_per_token = per_layer_base * model.config.n_layers;

    CacheFootprint fp;
    fp.scalars = per_token * seq_len;
    fp.baseline = baseline_per_token * seq_len;
    fp.ratio = Ratio(per_token, baseline_per_token);
    return fp;
}

}  // namespace xmla
