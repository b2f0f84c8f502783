#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "xmla/model.hpp"

using namespace xmla;

namespace {

ModelConfig toy_config(int64_t n_layers = 2, AttentionKind kind = AttentionKind::Attention) {
    ModelConfig cfg;
    cfg.vocab_size = 61;
    cfg.n_layers = n_layers;
    cfg.mlp_hidden = 24;
    cfg.geometry.d = 16;
    cfg.geometry.n_h = 2;
    cfg.geometry.n_kv = 2;
    cfg.geometry.d_h = 8;
    cfg.geometry.d_qk = 4;
    cfg.geometry.d_r = 4;
    cfg.geometry.r_q = 12;
    cfg.geometry.r_kv = 10;
    cfg.layer_kinds.assign(static_cast<size_t>(n_layers), kind);
    return cfg;
}

std::vector<int64_t> random_tokens(int64_t n, int64_t vocab, uint64_t seed) {
    Rng rng(seed);
    std::vector<int64_t> toks(static_cast<size_t>(n));
    for (auto& t : toks) t = rng.uniform_int(0, vocab - 1);
    return toks;
}

double max_logit_diff(const Tensor& a, const Tensor& b) {
    double worst = 0.0;
    for (size_t i = 0; i < a.data().size(); ++i) worst = std::max(worst, std::abs(a.data()[i] - b.data()[i]));
    return worst;
}

}  // namespace

TEST_CASE("zero-initialized mlp and output head give all-zero logits") {
    ModelConfig cfg = toy_config(1);
    cfg.tie_embeddings = false;
    LmModel m = LmModel::random(cfg, 1);
    for (auto& lw : m.layers) {
        for (double& v : lw.mlp.w_gate.data()) v = 0.0;
        for (double& v : lw.mlp.w_up.data()) v = 0.0;
        for (double& v : lw.mlp.w_down.data()) v = 0.0;
    }
    for (double& v : m.lm_head.data()) v = 0.0;
    Tensor logits = lm_forward(m, {5});
    for (double v : logits.data()) CHECK(v == 0.0);
}

TEST_CASE("token id out of range raises vocab error") {
    LmModel m = LmModel::random(toy_config(), 2);
    CHECK_THROWS_AS(lm_forward(m, {60, 61}), VocabError);
}

TEST_CASE("cache/kind mismatch raises cache error") {
    LmModel m = LmModel::random(toy_config(2, AttentionKind::Mla), 3);
    std::vector<KvCacheState> wrong(2, KvCacheState::full());
    CHECK_THROWS_AS(lm_forward(m, {1, 2}, wrong), CacheError);
}

TEST_CASE("incremental decoding equals full forward: mha, mla, hybrid") {
    for (int variant = 0; variant < 3; ++variant) {
        ModelConfig cfg = toy_config(4);
        if (variant == 1) cfg.layer_kinds.assign(4, AttentionKind::Mla);
        if (variant == 2)
            for (size_t i = 1; i < 4; i += 2) cfg.layer_kinds[i] = AttentionKind::Mla;
        LmModel m = LmModel::random(cfg, 17 + static_cast<uint64_t>(variant));
        auto tokens = random_tokens(7, cfg.vocab_size, 99);

        Tensor full = lm_forward(m, tokens);
        auto caches = make_caches(cfg);
        double worst = 0.0;
        for (size_t t = 0; t < tokens.size(); ++t) {
            Tensor step = lm_forward(m, {tokens[t]}, caches);
            for (int64_t j = 0; j < cfg.vocab_size; ++j)
                worst = std::max(worst, std::abs(step.at(0, j) - full.at(static_cast<int64_t>(t), j)));
        }
        CHECK(worst <= 1e-6);
    }
}

TEST_CASE("hybrid layer map runs and yields finite logits") {
    ModelConfig cfg = toy_config(4);
    for (size_t i = 1; i < 4; i += 2) cfg.layer_kinds[i] = AttentionKind::Mla;
    LmModel m = LmModel::random(cfg, 23);
    Tensor logits = lm_forward(m, random_tokens(6, cfg.vocab_size, 5));
    for (double v : logits.data()) CHECK(std::isfinite(v));
}

TEST_CASE("model-level causality is exact") {
    ModelConfig cfg = toy_config(3);
    cfg.layer_kinds[1] = AttentionKind::Mla;
    LmModel m = LmModel::random(cfg, 29);
    auto tokens = random_tokens(6, cfg.vocab_size, 31);
    auto perturbed = tokens;
    perturbed[5] = (perturbed[5] + 7) % cfg.vocab_size;

    Tensor a = lm_forward(m, tokens);
    Tensor b = lm_forward(m, perturbed);
    for (int64_t t = 0; t < 5; ++t)
        for (int64_t j = 0; j < cfg.vocab_size; ++j) CHECK(a.at(t, j) == b.at(t, j));
}

TEST_CASE("generate: no-op, determinism, cache accounting") {
    LmModel m = LmModel::random(toy_config(), 37);
    std::vector<int64_t> prompt{3, 1, 4};

    CHECK(generate(m, prompt, 0) == prompt);

    auto out1 = generate(m, prompt, 6);
    auto out2 = generate(m, prompt, 6);
    CHECK(out1 == out2);
    CHECK(out1.size() == prompt.size() + 6);

    auto caches = make_caches(m.config);
    generate(m, prompt, 6, caches);
    for (auto& c : caches) CHECK(c.length() == static_cast<int64_t>(prompt.size()) + 6);
}

TEST_CASE("perplexity: uniform logits give vocab size") {
    ModelConfig cfg = toy_config(1);
    cfg.tie_embeddings = false;
    LmModel m = LmModel::random(cfg, 41);
    for (double& v : m.lm_head.data()) v = 0.0;  // logits all zero -> uniform
    auto corpus = random_tokens(160, cfg.vocab_size, 43);
    double ppl = perplexity(m, corpus, 32);
    CHECK(std::abs(ppl - static_cast<double>(cfg.vocab_size)) <= 1e-9);
}

TEST_CASE("perplexity: exact copy scores identically; short corpus errors") {
    LmModel m = LmModel::random(toy_config(), 47);
    auto corpus = random_tokens(100, m.config.vocab_size, 49);
    double p1 = perplexity(m, corpus, 24);
    double p2 = perplexity(m.clone(), corpus, 24);
    CHECK(p1 == p2);
    CHECK_THROWS_AS(perplexity(m, {1}, 24), DataError);
}

TEST_CASE("a model scores its own greedy text below random streams") {
    LmModel m = LmModel::random(toy_config(3), 53);
    auto own = generate(m, {7}, 96);
    auto noise = random_tokens(97, m.config.vocab_size, 55);
    CHECK(perplexity(m, own, 32) < perplexity(m, noise, 32));
}

TEST_CASE("parameter-count formula matches actual scalars for random configs") {
    Rng rng(59);
    for (int trial = 0; trial < 10; ++trial) {
        ModelConfig cfg;
        cfg.vocab_size = rng.uniform_int(8, 300);
        cfg.n_layers = rng.uniform_int(1, 5);
        cfg.mlp_hidden = rng.uniform_int(4, 48);
        cfg.tie_embeddings = trial % 2 == 0;
        cfg.mla_layernorm = trial % 3 == 0;
        int64_t d_h = 2 * rng.uniform_int(2, 8);
        cfg.geometry.d = 4 * rng.uniform_int(2, 10);
        cfg.geometry.n_h = static_cast<int64_t>(1) << rng.uniform_int(0, 2);
        cfg.geometry.n_kv = cfg.geometry.n_h;
        cfg.geometry.d_h = d_h;
        cfg.geometry.d_qk = d_h / 2;
        cfg.geometry.d_r = d_h / 2;
        cfg.geometry.r_q = rng.uniform_int(1, std::min(cfg.geometry.d, cfg.geometry.n_h * d_h));
        cfg.geometry.r_kv = rng.uniform_int(1, std::min(cfg.geometry.d, 2 * cfg.geometry.n_h * d_h));
        cfg.layer_kinds.clear();
        for (int64_t i = 0; i < cfg.n_layers; ++i)
            cfg.layer_kinds.push_back(rng.uniform() < 0.5 ? AttentionKind::Attention : AttentionKind::Mla);
        if (cfg.geometry.d_qk % 2 != 0) continue;

        LmModel m = LmModel::random(cfg, 1000 + static_cast<uint64_t>(trial));
        CHECK(m.num_params() == cfg.param_count());
    }
}

TEST_CASE("upcycle_model: empty selection clones the donor") {
    LmModel donor = LmModel::random(toy_config(3), 61);
    LmModel same = upcycle_model(donor, RankSpec::fixed(12, 10), false, {}, false);
    auto a = donor.named_params();
    auto b = same.named_params();
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) CHECK(a[i].second.data() == b[i].second.data());
}

TEST_CASE("upcycle_model: selecting an mla layer is a kind error") {
    ModelConfig cfg = toy_config(2);
    cfg.layer_kinds[1] = AttentionKind::Mla;
    LmModel donor = LmModel::random(cfg, 67);
    CHECK_THROWS_AS(upcycle_model(donor, RankSpec::fixed(12, 10), false, {1}, false), KindError);
    CHECK_THROWS_AS(upcycle_model(donor, RankSpec::fixed(12, 10), false, {5}, false), ConfigError);
}

TEST_CASE("upcycle_model: half-selection on a 16-layer toy hits the formula ratio") {
    ModelConfig cfg = toy_config(16);
    LmModel donor = LmModel::random(cfg, 71);
    RankSpec spec = RankSpec::fixed(12, 10);
    ModelUpcycleReport rep;
    LmModel up = upcycle_model(donor, spec, false, {1, 3, 5, 7, 8, 10, 12, 14}, false, &rep);

    std::vector<AttentionKind> kinds(16, AttentionKind::Attention);
    for (int64_t i : {1, 3, 5, 7, 8, 10, 12, 14}) kinds[static_cast<size_t>(i)] = AttentionKind::Mla;
    CacheFootprint expect = cache_footprint(cfg.geometry.with_ranks(12, 10), kinds, 11);
    CHECK(rep.cache_ratio == expect.ratio);
    CHECK(model_cache_footprint(up, 11).scalars == expect.scalars);
    CHECK(rep.converted_layers.size() == 8);

    // donor untouched
    CHECK(donor.layers[1].kind == AttentionKind::Attention);
    CHECK(donor.config.layer_kinds[1] == AttentionKind::Attention);
}

TEST_CASE("upcycle_model: full-rank conversion matches donor logits with rope off") {
    // Restricted equivalence at the model level: shared last-d_r key blocks
    // per layer, full-rank spec, rotary disabled on both forwards.
    ModelConfig cfg = toy_config(2);
    cfg.geometry.n_h = 2;
    cfg.geometry.n_kv = 2;
    LmModel donor = LmModel::random(cfg, 73);
    Rng rng(79);
    for (auto& lw : donor.layers) {
        const auto& g = cfg.geometry;
        Tensor shared({g.d, g.d_r}, 0.0);
        for (double& v : shared.data()) v = rng.normal(0.0, 0.5);
        for (int64_t r = 0; r < g.d; ++r)
            for (int64_t h = 0; h < g.n_h; ++h)
                for (int64_t c = 0; c < g.d_r; ++c)
                    lw.attn.w_k.at(r, h * g.d_h + (g.d_h - g.d_r) + c) = shared.at(r, c);
    }
    const auto& g = cfg.geometry;
    RankSpec spec = RankSpec::fixed(std::min(g.d, g.n_h * g.d_h), std::min(g.d, 2 * g.n_h * g.d_h));
    LmModel up = upcycle_model(donor, spec, true, {}, false);

    AttnOptions opts;
    opts.apply_rope = false;
    auto tokens = random_tokens(5, cfg.vocab_size, 83);
    auto dc = make_caches(donor.config);
    auto uc = make_caches(up.config);
    Tensor d_logits = lm_forward(donor, tokens, dc, opts);
    Tensor u_logits = lm_forward(up, tokens, uc, opts);
    CHECK(max_logit_diff(d_logits, u_logits) <= 1e-6);
}

TEST_CASE("config validation") {
    ModelConfig cfg = toy_config(2);
    cfg.layer_kinds.pop_back();
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = toy_config(2);
    cfg.vocab_size = 1;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}
