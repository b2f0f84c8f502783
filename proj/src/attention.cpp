#include "xmla/attention.hpp"

#include <cmath>
#include <string>

namespace xmla {

namespace {
constexpr double kMaskValue = -1e30;  // stands in for -inf; exp underflows to exact 0
}

// -- Geometry -------------------------------------------------------------------

void AttentionGeometry::validate() const {
    if (d <= 0 || n_h <= 0 || n_kv <= 0 || d_h <= 0 || d_qk <= 0 || d_r <= 0)
        throw GeometryError("geometry: all dimensions must be positive");
    if (n_h % n_kv != 0)
        throw GeometryError("geometry: n_kv=" + std::to_string(n_kv) + " must divide n_h=" + std::to_string(n_h));
    if (d_qk != d_r || d_r > d_h)
        throw GeometryError("geometry: requires d_qk == d_r <= d_h, got d_qk=" + std::to_string(d_qk) +
                            " d_r=" + std::to_string(d_r) + " d_h=" + std::to_string(d_h));
    if (d_r % 2 != 0) throw GeometryError("geometry: d_r must be even for rotary pairs");
    if (r_q < 1 || r_q > std::min(d, n_h * d_h))
        throw GeometryError("geometry: r_q=" + std::to_string(r_q) + " outside [1, min(d, n_h*d_h)]");
    if (r_kv < 1 || r_kv > std::min(d, 2 * n_h * d_h))
        throw GeometryError("geometry: r_kv=" + std::to_string(r_kv) + " outside [1, min(d, 2*n_h*d_h)]");
}

AttentionGeometry AttentionGeometry::expanded() const {
    AttentionGeometry g = *this;
    g.n_kv = n_h;
    return g;
}

AttentionGeometry AttentionGeometry::with_ranks(int64_t rq, int64_t rkv) const {
    AttentionGeometry g = *this;
    g.r_q = rq;
    g.r_kv = rkv;
    return g;
}

// -- Weights --------------------------------------------------------------------

MhaWeights MhaWeights::random(const AttentionGeometry& geo, Rng& rng) {
    auto glorot = [&](int64_t rows, int64_t cols) {
        double stddev = std::sqrt(2.0 / static_cast<double>(rows + cols));
        Tensor t({rows, cols}, 0.0);
        for (double& v : t.data()) v = rng.normal(0.0, stddev);
        return t;
    };
    MhaWeights w;
    w.w_q = glorot(geo.d, geo.n_h * geo.d_h);
    w.w_k = glorot(geo.d, geo.n_kv * geo.d_h);
    w.w_v = glorot(geo.d, geo.n_kv * geo.d_h);
    w.w_o = glorot(geo.n_h * geo.d_h, geo.d);
    return w;
}

void MhaWeights::validate(const AttentionGeometry& geo) const {
    auto expect = [](const Tensor& t, int64_t r, int64_t c, const char* name) {
        if (t.shape() != Shape{r, c})
            throw DimensionError(std::string(name) + ": expected [" + std::to_string(r) + "x" + std::to_string(c) +
                                 "], got " + shape_string(t.shape()));
    };
    expect(w_q, geo.d, geo.n_h * geo.d_h, "w_q");
    expect(w_k, geo.d, geo.n_kv * geo.d_h, "w_k");
    expect(w_v, geo.d, geo.n_kv * geo.d_h, "w_v");
    expect(w_o, geo.n_h * geo.d_h, geo.d, "w_o");
}

std::vector<Tensor*> MhaWeights::params() { return {&w_q, &w_k, &w_v, &w_o}; }

LayerNormParams LayerNormParams::identity(int64_t width) {
    return LayerNormParams{Tensor::ones({width}), Tensor::zeros({width})};
}

void MlaWeights::validate(const AttentionGeometry& geo) const {
    auto expect = [](const Tensor& t, int64_t r, int64_t c, const char* name) {
        if (t.shape() != Shape{r, c})
            throw DimensionError(std::string(name) + ": expected [" + std::to_string(r) + "x" + std::to_string(c) +
                                 "], got " + shape_string(t.shape()));
    };
    int64_t rq = rank_q(), rkv = rank_kv();
    expect(w_dq, geo.d, rq, "w_dq");
    expect(w_uq, rq, geo.n_h * geo.d_qk, "w_uq");
    expect(w_qr, rq, geo.n_h * geo.d_r, "w_qr");
    expect(w_dkv, geo.d, rkv, "w_dkv");
    expect(w_uk, rkv, geo.n_h * geo.d_qk, "w_uk");
    expect(w_uv, rkv, geo.n_h * geo.d_h, "w_uv");
    expect(w_kr, geo.d, geo.d_r, "w_kr");
    expect(w_o, geo.n_h * geo.d_h, geo.d, "w_o");
    if (ln_q.has_value() != ln_kv.has_value())
        throw DimensionError("MlaWeights: ln_q and ln_kv must be enabled together");
}

std::vector<Tensor*> MlaWeights::params() {
    std::vector<Tensor*> ps = {&w_dq, &w_uq, &w_qr, &w_dkv, &w_uk, &w_uv, &w_kr, &w_o};
    if (ln_q) {
        ps.push_back(&ln_q->gain);
        ps.push_back(&ln_q->bias);
    }
    if (ln_kv) {
        ps.push_back(&ln_kv->gain);
        ps.push_back(&ln_kv->bias);
    }
    return ps;
}

// -- Cache ----------------------------------------------------------------------

int64_t KvCacheState::scalar_count() const {
    int64_t n = 0;
    if (a_.defined()) n += a_.numel();
    if (b_.defined()) n += b_.numel();
    return n;
}

const Tensor& KvCacheState::k() const {
    if (kind_ != Kind::Full) throw CacheError("cache: k() on a Latent cache");
    return a_;
}
const Tensor& KvCacheState::v() const {
    if (kind_ != Kind::Full) throw CacheError("cache: v() on a Latent cache");
    return b_;
}
const Tensor& KvCacheState::c_kv() const {
    if (kind_ != Kind::Latent) throw CacheError("cache: c_kv() on a Full cache");
    return a_;
}
const Tensor& KvCacheState::k_r() const {
    if (kind_ != Kind::Latent) throw CacheError("cache: k_r() on a Full cache");
    return b_;
}

void KvCacheState::append_full(const Tensor& k_new, const Tensor& v_new) {
    if (kind_ != Kind::Full) throw CacheError("cache: append_full on a Latent cache");
    if (k_new.shape()[0] != v_new.shape()[0])
        throw CacheError("cache: k/v row counts differ");
    a_ = a_.defined() ? concat_rows(a_, k_new) : k_new;
    b_ = b_.defined() ? concat_rows(b_, v_new) : v_new;
    length_ += k_new.shape()[0];
}

void KvCacheState::append_latent(const Tensor& c_new, const Tensor& k_r_new) {
    if (kind_ != Kind::Latent) throw CacheError("cache: append_latent on a Full cache");
    if (c_new.shape()[0] != k_r_new.shape()[0])
        throw CacheError("cache: c_kv/k_r row counts differ");
    a_ = a_.defined() ? concat_rows(a_, c_new) : c_new;
    b_ = b_.defined() ? concat_rows(b_, k_r_new) : k_r_new;
    length_ += c_new.shape()[0];
}

// -- RoPE -----------------------------------------------------------------------

Tensor rope_apply(const Tensor& x, const std::vector<int64_t>& positions, int64_t head_dim,
                  double theta_base) {
    if (head_dim <= 0 || head_dim % 2 != 0)
        throw GeometryError("rope_apply: head width must be positive and even, got " + std::to_string(head_dim));
    int64_t l = x.shape()[0], width = x.shape()[1];
    if (width % head_dim != 0)
        throw DimensionError("rope_apply: row width " + std::to_string(width) + " not a multiple of head width " +
                             std::to_string(head_dim));
    if (static_cast<int64_t>(positions.size()) != l)
        throw DimensionError("rope_apply: need one position per row, got " + std::to_string(positions.size()) +
                             " for " + std::to_string(l) + " rows");

    int64_t n_heads = width / head_dim;
    int64_t n_pairs = head_dim / 2;
    std::vector<double> inv_freq(static_cast<size_t>(n_pairs));
    for (int64_t i = 0; i < n_pairs; ++i)
        inv_freq[static_cast<size_t>(i)] =
            std::pow(theta_base, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));

    // cos/sin per (row, pair), shared across heads
    std::vector<double> cs(static_cast<size_t>(l * n_pairs)), sn(static_cast<size_t>(l * n_pairs));
    for (int64_t t = 0; t < l; ++t) {
        double pos = static_cast<double>(positions[static_cast<size_t>(t)]);
        for (int64_t i = 0; i < n_pairs; ++i) {
            double angle = pos * inv_freq[static_cast<size_t>(i)];
            cs[static_cast<size_t>(t * n_pairs + i)] = std::cos(angle);
            sn[static_cast<size_t>(t * n_pairs + i)] = std::sin(angle);
        }
    }

    // Captures by value: the backward replay outlives this frame.
    auto rotate = [cs, sn, l, n_heads, n_pairs, width, head_dim](const std::vector<double>& src,
                                                                 std::vector<double>& dst, bool inverse) {
        for (int64_t t = 0; t < l; ++t)
            for (int64_t h = 0; h < n_heads; ++h)
                for (int64_t i = 0; i < n_pairs; ++i) {
                    size_t idx = static_cast<size_t>(t * width + h * head_dim + 2 * i);
                    double c = cs[static_cast<size_t>(t * n_pairs + i)];
                    double s = inverse ? -sn[static_cast<size_t>(t * n_pairs + i)]
                                       : sn[static_cast<size_t>(t * n_pairs + i)];
                    double x0 = src[idx], x1 = src[idx + 1];
                    dst[idx] = c * x0 - s * x1;
                    dst[idx + 1] = s * x0 + c * x1;
                }
    };

    Tensor out(x.shape(), 0.0);
    rotate(x.data(), out.data(), false);
    if (tape_should_record(x)) {
        GradTape::active()->record(out, [x = x, out = out, rotate]() mutable {
            // rotation is orthogonal: pull the gradient back by the inverse rotation
            std::vector<double> gx(x.numel());
            rotate(out.impl()->grad, gx, true);
            x.accumulate_grad(gx);
        });
    }
    return out;
}

// -- Shared attention core --------------------------------------------------------

namespace {

// Causal mask for `l` query rows beginning at absolute position `start`
// against `total` cached positions. Realized as an additive constant.
Tensor causal_mask(int64_t l, int64_t start, int64_t total) {
    Tensor m({l, total}, 0.0);
    for (int64_t i = 0; i < l; ++i)
        for (int64_t j = start + i + 1; j < total; ++j) m.data()[static_cast<size_t>(i * total + j)] = kMaskValue;
    return m;
}

std::vector<int64_t> new_positions(int64_t start, int64_t l) {
    std::vector<int64_t> p(static_cast<size_t>(l));
    for (int64_t i = 0; i < l; ++i) p[static_cast<size_t>(i)] = start + i;
    return p;
}

}  // namespace

Tensor mha_forward(const Tensor& h, const MhaWeights& w, const AttentionGeometry& geo,
                   KvCacheState& cache, const AttnOptions& opts) {
    if (cache.kind() != KvCacheState::Kind::Full)
        throw CacheError("mha_forward: needs a Full cache, got Latent");
    w.validate(geo);
    int64_t l = h.shape()[0];
    int64_t start = cache.length();
    auto pos = new_positions(start, l);

    Tensor q = matmul(h, w.w_q);
    Tensor k_new = matmul(h, w.w_k);
    Tensor v_new = matmul(h, w.w_v);
    if (opts.apply_rope) {
        q = rope_apply(q, pos, geo.d_h, opts.theta_base);
        k_new = rope_apply(k_new, pos, geo.d_h, opts.theta_base);
    }
    cache.append_full(k_new, v_new);

    int64_t total = cache.length();
    double inv_scale = 1.0 / std::sqrt(static_cast<double>(geo.d_h));
    Tensor mask = opts.causal ? causal_mask(l, start, total) : Tensor();

    Tensor out_heads;
    for (int64_t i = 0; i < geo.n_h; ++i) {
        int64_t g = i / geo.group_size();
        Tensor q_i = slice_cols(q, i * geo.d_h, (i + 1) * geo.d_h);
        Tensor k_g = slice_cols(cache.k(), g * geo.d_h, (g + 1) * geo.d_h);
        Tensor v_g = slice_cols(cache.v(), g * geo.d_h, (g + 1) * geo.d_h);
        Tensor scores = scale(matmul(q_i, transpose(k_g)), inv_scale);
        if (opts.causal) scores = add(scores, mask);
        Tensor a = softmax_rows(scores);
        Tensor o_i = matmul(a, v_g);
        out_heads = out_heads.defined() ? concat_cols(out_heads, o_i) : o_i;
    }
    return matmul(out_heads, w.w_o);
}

Tensor mla_forward_naive(const Tensor& h, const MlaWeights& w, const AttentionGeometry& geo,
                         KvCacheState& cache, const AttnOptions& opts) {
    if (cache.kind() != KvCacheState::Kind::Latent)
        throw CacheError("mla_forward_naive: needs a Latent cache, got Full");
    w.validate(geo);
    int64_t l = h.shape()[0];
    int64_t start = cache.length();
    auto pos = new_positions(start, l);

    Tensor c_q = matmul(h, w.w_dq);
    if (w.ln_q) c_q = layer_norm_rows(c_q, w.ln_q->gain, w.ln_q->bias);
    Tensor q_c = matmul(c_q, w.w_uq);
    Tensor q_r = matmul(c_q, w.w_qr);
    if (opts.apply_rope) q_r = rope_apply(q_r, pos, geo.d_r, opts.theta_base);

    Tensor c_new = matmul(h, w.w_dkv);
    if (w.ln_kv) c_new = layer_norm_rows(c_new, w.ln_kv->gain, w.ln_kv->bias);
    Tensor k_r_new = matmul(h, w.w_kr);
    if (opts.apply_rope) k_r_new = rope_apply(k_r_new, pos, geo.d_r, opts.theta_base);
    cache.append_latent(c_new, k_r_new);

    // Reconstruct keys and values over the whole cache.
    Tensor k_c = matmul(cache.c_kv(), w.w_uk);
    Tensor v_c = matmul(cache.c_kv(), w.w_uv);

    int64_t total = cache.length();
    double inv_scale = 1.0 / std::sqrt(static_cast<double>(geo.d_qk + geo.d_r));
    Tensor mask = opts.causal ? causal_mask(l, start, total) : Tensor();
    Tensor k_r_t = transpose(cache.k_r());

    Tensor out_heads;
    for (int64_t i = 0; i < geo.n_h; ++i) {
        Tensor q_c_i = slice_cols(q_c, i * geo.d_qk, (i + 1) * geo.d_qk);
        Tensor q_r_i = slice_cols(q_r, i * geo.d_r, (i + 1) * geo.d_r);
        Tensor k_c_i = slice_cols(k_c, i * geo.d_qk, (i + 1) * geo.d_qk);
        Tensor v_c_i = slice_cols(v_c, i * geo.d_h, (i + 1) * geo.d_h);
        // K^R is shared: every head sees the same rotary key rows.
        Tensor scores = scale(add(matmul(q_c_i, transpose(k_c_i)), matmul(q_r_i, k_r_t)), inv_scale);
        if (opts.causal) scores = add(scores, mask);
        Tensor a = softmax_rows(scores);
        Tensor o_i = matmul(a, v_c_i);
        out_heads = out_heads.defined() ? concat_cols(out_heads, o_i) : o_i;
    }
    return matmul(out_heads, w.w_o);
}

AbsorbedMlaWeights absorb(const MlaWeights& w, const AttentionGeometry& geo) {
    if (w.ln_kv || w.ln_q)
        throw UnsupportedError("absorb: intermediate LayerNorm blocks matrix absorption; disable it first");
    w.validate(geo);

    AbsorbedMlaWeights aw;
    aw.w_kr = w.w_kr.clone();
    aw.w_dkv = w.w_dkv.clone();
    aw.w_qr_path = matmul(w.w_dq.detach(), w.w_qr.detach());

    // Per head: fold W^DQ W^UQ_i (W^UK_i)^T into one d x r_kv map, and
    // W^UV_i W^O_i into one r_kv x d map.
    for (int64_t i = 0; i < geo.n_h; ++i) {
        Tensor uq_i = slice_cols(w.w_uq.detach(), i * geo.d_qk, (i + 1) * geo.d_qk);
        Tensor uk_i = slice_cols(w.w_uk.detach(), i * geo.d_qk, (i + 1) * geo.d_qk);
        Tensor q_map = matmul(matmul(w.w_dq.detach(), uq_i), transpose(uk_i));  // d x r_kv
        aw.w_q_abs = aw.w_q_abs.defined() ? concat_cols(aw.w_q_abs, q_map) : q_map;

        Tensor uv_i = slice_cols(w.w_uv.detach(), i * geo.d_h, (i + 1) * geo.d_h);
        Tensor o_i = slice_rows(w.w_o.detach(), i * geo.d_h, (i + 1) * geo.d_h);
        Tensor o_map = matmul(uv_i, o_i);  // r_kv x d
        aw.w_o_abs = aw.w_o_abs.defined() ? concat_rows(aw.w_o_abs, o_map) : o_map;
    }
    return aw;
}

AbsorbedMlaWeights absorb(const AbsorbedMlaWeights&, const AttentionGeometry&) {
    throw ContractError("absorb: weights are already absorbed");
}

Tensor mla_forward_absorbed(const Tensor& h, const AbsorbedMlaWeights& aw,
                            const AttentionGeometry& geo, KvCacheState& cache,
                            const AttnOptions& opts) {
    if (cache.kind() != KvCacheState::Kind::Latent)
        throw CacheError("mla_forward_absorbed: needs a Latent cache, got Full");
    int64_t l = h.shape()[0];
    int64_t start = cache.length();
    auto pos = new_positions(start, l);
    int64_t rkv = aw.w_dkv.shape()[1];

    Tensor q_abs = matmul(h, aw.w_q_abs);  // l x (n_h * r_kv)
    Tensor q_r = matmul(h, aw.w_qr_path);
    if (opts.apply_rope) q_r = rope_apply(q_r, pos, geo.d_r, opts.theta_base);

    Tensor c_new = matmul(h, aw.w_dkv);
    Tensor k_r_new = matmul(h, aw.w_kr);
    if (opts.apply_rope) k_r_new = rope_apply(k_r_new, pos, geo.d_r, opts.theta_base);
    cache.append_latent(c_new, k_r_new);

    int64_t total = cache.length();
    double inv_scale = 1.0 / std::sqrt(static_cast<double>(geo.d_qk + geo.d_r));
    Tensor mask = opts.causal ? causal_mask(l, start, total) : Tensor();
    Tensor c_t = transpose(cache.c_kv());
    Tensor k_r_t = transpose(cache.k_r());

    // Scores hit the latents directly; per-head context stays in latent
    // space until the folded output map.
    Tensor z_heads;
    for (int64_t i = 0; i < geo.n_h; ++i) {
        Tensor q_abs_i = slice_cols(q_abs, i * rkv, (i + 1) * rkv);
        Tensor q_r_i = slice_cols(q_r, i * geo.d_r, (i + 1) * geo.d_r);
        Tensor scores = scale(add(matmul(q_abs_i, c_t), matmul(q_r_i, k_r_t)), inv_scale);
        if (opts.causal) scores = add(scores, mask);
        Tensor a = softmax_rows(scores);
        Tensor z_i = matmul(a, cache.c_kv());  // l x r_kv
        z_heads = z_heads.defined() ? concat_cols(z_heads, z_i) : z_i;
    }
    return matmul(z_heads, aw.w_o_abs);
}

// -- Footprint accounting ----------------------------------------------------------

int64_t per_token_scalars(const AttentionGeometry& geo, AttentionKind kind) {
    return kind == AttentionKind::Mla ? geo.r_kv + geo.d_r : 2 * geo.n_kv * geo.d_h;
}

CacheFootprint cache_footprint(const AttentionGeometry& geo, const std::vector<AttentionKind>& layer_kinds,
                               int64_t seq_len) {
    if (seq_len < 0) throw DataError("cache_footprint: negative sequence length");
    int64_t per_layer_base = 2 * geo.n_kv * geo.d_h;
    int64_t scalars = 0;
    for (AttentionKind k : layer_kinds) scalars += per_token_scalars(geo, k) * seq_len;
    int64_t baseline = per_layer_base * static_cast<int64_t>(layer_kinds.size()) * seq_len;

    CacheFootprint fp;
    fp.scalars = scalars;
    fp.baseline = baseline;
    // The ratio is a per-token property; keep it meaningful at seq_len == 0.
    int64_t rnum = 0, rden = per_layer_base * static_cast<int64_t>(layer_kinds.size());
    for (AttentionKind k : layer_kinds) rnum += per_token_scalars(geo, k);
    fp.ratio = layer_kinds.empty() ? Ratio(1, 1) : Ratio(rnum, rden);
    return fp;
}

CacheFootprint cache_footprint(const AttentionGeometry& geo, AttentionKind kind, int64_t seq_len,
                               int64_t n_layers) {
    return cache_footprint(geo, std::vector<AttentionKind>(static_cast<size_t>(n_layers), kind), seq_len);
}

}  // namespace xmla
