#include "xmla/upcycle.hpp"

#include <cmath>

#include "xmla/svd.hpp"

namespace xmla {

RankSpec RankSpec::fixed(int64_t r_q, int64_t r_kv) {
    RankSpec s;
    s.kind = Kind::Fixed;
    s.r_q = r_q;
    s.r_kv = r_kv;
    return s;
}

RankSpec RankSpec::dynamic(double delta_q, double delta_kv) {
    RankSpec s;
    s.kind = Kind::Dynamic;
    s.delta_q = delta_q;
    s.delta_kv = delta_kv;
    return s;
}

void RankSpec::validate() const {
    if (kind == Kind::Fixed) {
        if (r_q < 1 || r_kv < 1) throw RankError("rank spec: fixed ranks must be >= 1");
    } else {
        if (!(delta_q > 0.0 && delta_q <= 1.0) || !(delta_kv > 0.0 && delta_kv <= 1.0))
            throw RankError("rank spec: energy thresholds must lie in (0, 1]");
    }
}

MhaWeights expand_gqa_to_mha(const MhaWeights& w, const AttentionGeometry& geo) {
    w.validate(geo);
    if (geo.n_h % geo.n_kv != 0)
        throw GeometryError("expand_gqa_to_mha: n_kv=" + std::to_string(geo.n_kv) + " must divide n_h=" +
                            std::to_string(geo.n_h));
    if (geo.n_kv == geo.n_h) {
        MhaWeights out;
        out.w_q = w.w_q.clone();
        out.w_k = w.w_k.clone();
        out.w_v = w.w_v.clone();
        out.w_o = w.w_o.clone();
        return out;
    }
    int64_t reps = geo.group_size();
    auto repeat_heads = [&](const Tensor& t) {
        int64_t d = t.shape()[0];
        Tensor out({d, geo.n_h * geo.d_h}, 0.0);
        for (int64_t row = 0; row < d; ++row)
            for (int64_t g = 0; g < geo.n_kv; ++g)
                for (int64_t r = 0; r < reps; ++r)
                    for (int64_t c = 0; c < geo.d_h; ++c)
                        out.data()[static_cast<size_t>(row * geo.n_h * geo.d_h + (g * reps + r) * geo.d_h + c)] =
                            t.data()[static_cast<size_t>(row * geo.n_kv * geo.d_h + g * geo.d_h + c)];
        return out;
    };
    MhaWeights out;
    out.w_q = w.w_q.clone();
    out.w_k = repeat_heads(w.w_k);
    out.w_v = repeat_heads(w.w_v);
    out.w_o = w.w_o.clone();
    return out;
}

int64_t select_rank_dynamic(const std::vector<double>& sigma, double delta) {
    if (sigma.empty()) throw SpectrumError("select_rank_dynamic: empty spectrum");
    if (!(delta > 0.0 && delta <= 1.0))
        throw SpectrumError("select_rank_dynamic: threshold must lie in (0, 1], got " + std::to_string(delta));
    double total = 0.0;
    for (size_t j = 0; j < sigma.size(); ++j) {
        if (sigma[j] < 0.0) throw SpectrumError("select_rank_dynamic: negative singular value");
        if (j + 1 < sigma.size() && sigma[j] < sigma[j + 1])
            throw SpectrumError("select_rank_dynamic: spectrum not descending");
        total += sigma[j] * sigma[j];
    }
    if (total == 0.0) throw SpectrumError("select_rank_dynamic: all-zero spectrum");
    double cum = 0.0;
    for (size_t j = 0; j < sigma.size(); ++j) {
        cum += sigma[j] * sigma[j];
        if (cum >= delta * total) return static_cast<int64_t>(j + 1);
    }
    return static_cast<int64_t>(sigma.size());
}

namespace {

// Per-head column slice of a factor viewed as (rank, n_heads, d_h):
// keep [col_begin, col_end) of every head and flatten back.
Tensor slice_heads(const Tensor& factor, int64_t n_heads, int64_t head_width, int64_t col_begin,
                   int64_t col_end) {
    int64_t rank = factor.shape()[0];
    int64_t w = col_end - col_begin;
    Tensor out({rank, n_heads * w}, 0.0);
    for (int64_t r = 0; r < rank; ++r)
        for (int64_t h = 0; h < n_heads; ++h)
            for (int64_t c = 0; c < w; ++c)
                out.data()[static_cast<size_t>(r * n_heads * w + h * w + c)] =
                    factor.data()[static_cast<size_t>(r * n_heads * head_width + h * head_width + col_begin + c)];
    return out;
}

Tensor scaled_vt(const SvdResult& svd) {
    Tensor sv = svd.vt.clone();
    int64_t n = sv.shape()[1];
    for (int64_t i = 0; i < static_cast<int64_t>(svd.sigma.size()); ++i)
        for (int64_t j = 0; j < n; ++j) sv.data()[static_cast<size_t>(i * n + j)] *= svd.sigma[static_cast<size_t>(i)];
    return sv;
}

double captured_energy(const std::vector<double>& spectrum, int64_t rank) {
    double head = 0.0, total = 0.0;
    for (int64_t j = 0; j < static_cast<int64_t>(spectrum.size()); ++j) {
        double e = spectrum[static_cast<size_t>(j)] * spectrum[static_cast<size_t>(j)];
        total += e;
        if (j < rank) head += e;
    }
    return total > 0.0 ? head / total : 1.0;
}

int64_t round_up_multiple_of_8(int64_t r, int64_t cap) {
    int64_t aligned = ((r + 7) / 8) * 8;
    return std::min(aligned, cap);
}

}  // namespace

QueryFactors init_query_path(const Tensor& w_q, int64_t r_q, const AttentionGeometry& geo) {
    int64_t d = w_q.shape()[0];
    int64_t width = w_q.shape()[1];
    if (width != geo.n_h * geo.d_h)
        throw DimensionError("init_query_path: w_q width " + std::to_string(width) + " != n_h*d_h");
    if (r_q < 1 || r_q > std::min(d, width))
        throw RankError("init_query_path: rank " + std::to_string(r_q) + " outside [1," +
                        std::to_string(std::min(d, width)) + "]");

    SvdResult svd = svd_truncated(w_q, r_q);
    Tensor sv = scaled_vt(svd);  // r_q x (n_h * d_h)

    QueryFactors f;
    f.w_dq = svd.u;
    f.w_uq = slice_heads(sv, geo.n_h, geo.d_h, 0, geo.d_qk);
    f.w_qr = slice_heads(sv, geo.n_h, geo.d_h, geo.d_h - geo.d_r, geo.d_h);
    return f;
}

KvFactors init_kv_path(const Tensor& w_k, const Tensor& w_v, int64_t r_kv, const AttentionGeometry& geo) {
    int64_t width = geo.n_h * geo.d_h;
    if (w_k.shape() != Shape{geo.d, width} || w_v.shape() != Shape{geo.d, width})
        throw DimensionError("init_kv_path: expects expanded d x (n_h*d_h) weights, got " +
                             shape_string(w_k.shape()) + " and " + shape_string(w_v.shape()));
    if (r_kv < 1 || r_kv > std::min(geo.d, 2 * width))
        throw RankError("init_kv_path: rank " + std::to_string(r_kv) + " outside [1," +
                        std::to_string(std::min(geo.d, 2 * width)) + "]");

    Tensor joint = concat_cols(w_k.detach(), w_v.detach());
    SvdResult svd = svd_truncated(joint, r_kv);
    Tensor sv = scaled_vt(svd);  // r_kv x (2 * n_h * d_h)

    KvFactors f;
    f.w_dkv = svd.u;
    Tensor key_half = slice_cols(sv, 0, width);
    f.w_uk = slice_heads(key_half, geo.n_h, geo.d_h, 0, geo.d_qk);
    f.w_uv = slice_cols(sv, width, 2 * width);
    return f;
}

Tensor init_rope_key(const Tensor& w_k, const AttentionGeometry& geo) {
    int64_t width = geo.n_h * geo.d_h;
    if (w_k.shape() != Shape{geo.d, width})
        throw DimensionError("init_rope_key: expects expanded d x (n_h*d_h) key weights, got " +
                             shape_string(w_k.shape()));
    Tensor avg({geo.d, geo.d_h}, 0.0);
    for (int64_t r = 0; r < geo.d; ++r)
        for (int64_t h = 0; h < geo.n_h; ++h)
            for (int64_t c = 0; c < geo.d_h; ++c)
                avg.data()[static_cast<size_t>(r * geo.d_h + c)] +=
                    w_k.data()[static_cast<size_t>(r * width + h * geo.d_h + c)] / static_cast<double>(geo.n_h);
    return slice_cols(avg, geo.d_h - geo.d_r, geo.d_h);
}

std::pair<MlaWeights, UpcycleReport> upcycle_attention(const MhaWeights& w, const AttentionGeometry& geo,
                                                       const RankSpec& spec, bool enable_ln) {
    spec.validate();
    AttentionGeometry ex_geo = geo.expanded();
    MhaWeights ex = expand_gqa_to_mha(w, geo);

    Tensor joint = concat_cols(ex.w_k.detach(), ex.w_v.detach());
    std::vector<double> sq = singular_values(ex.w_q);
    std::vector<double> skv = singular_values(joint);

    int64_t r_q = 0, r_kv = 0;
    if (spec.kind == RankSpec::Kind::Fixed) {
        r_q = spec.r_q;
        r_kv = spec.r_kv;
    } else {
        r_q = round_up_multiple_of_8(select_rank_dynamic(sq, spec.delta_q), static_cast<int64_t>(sq.size()));
        r_kv = round_up_multiple_of_8(select_rank_dynamic(skv, spec.delta_kv), static_cast<int64_t>(skv.size()));
    }

    MlaWeights mla;
    QueryFactors qf = init_query_path(ex.w_q, r_q, ex_geo);
    mla.w_dq = qf.w_dq;
    mla.w_uq = qf.w_uq;
    mla.w_qr = qf.w_qr;
    KvFactors kf = init_kv_path(ex.w_k, ex.w_v, r_kv, ex_geo);
    mla.w_dkv = kf.w_dkv;
    mla.w_uk = kf.w_uk;
    mla.w_uv = kf.w_uv;
    mla.w_kr = init_rope_key(ex.w_k, ex_geo);
    mla.w_o = ex.w_o;
    if (enable_ln) {
        mla.ln_q = LayerNormParams::identity(r_q);
        mla.ln_kv = LayerNormParams::identity(r_kv);
    }

    UpcycleReport rep;
    rep.r_q = r_q;
    rep.r_kv = r_kv;
    rep.energy_q = captured_energy(sq, r_q);
    rep.energy_kv = captured_energy(skv, r_kv);
    rep.recon_err_q = relative_frobenius_error(ex.w_q, svd_multiply_back(svd_truncated(ex.w_q, r_q)));
    rep.recon_err_kv = relative_frobenius_error(joint, svd_multiply_back(svd_truncated(joint, r_kv)));
    rep.cache_ratio = Ratio(r_kv + geo.d_r, 2 * geo.n_kv * geo.d_h);

    int64_t mla_params = geo.d * r_q + r_q * geo.n_h * (geo.d_qk + geo.d_r) + geo.d * r_kv +
                         r_kv * geo.n_h * (geo.d_qk + geo.d_h) + geo.d * geo.d_r;
    int64_t donor_params = geo.d * geo.n_h * geo.d_h + 2 * geo.d * geo.n_kv * geo.d_h;
    rep.param_delta = mla_params - donor_params;
    return {std::move(mla), rep};
}

MlaWeights random_init_attention(const AttentionGeometry& geo, const RankSpec& spec, uint64_t seed,
                                 bool enable_ln) {
    if (spec.kind != RankSpec::Kind::Fixed)
        throw UnsupportedError("random_init_attention: dynamic rank selection needs donor spectra; use fixed ranks");
    spec.validate();
    AttentionGeometry g = geo.expanded().with_ranks(spec.r_q, spec.r_kv);
    g.validate();

    Rng rng = Rng(seed).substream("mla-random-init");
    auto glorot = [&](int64_t rows, int64_t cols) {
        double stddev = std::sqrt(2.0 / static_cast<double>(rows + cols));
        Tensor t({rows, cols}, 0.0);
        for (double& v : t.data()) v = rng.normal(0.0, stddev);
        return t;
    };

    MlaWeights w;
    w.w_dq = glorot(g.d, g.r_q);
    w.w_uq = glorot(g.r_q, g.n_h * g.d_qk);
    w.w_qr = glorot(g.r_q, g.n_h * g.d_r);
    w.w_dkv = glorot(g.d, g.r_kv);
    w.w_uk = glorot(g.r_kv, g.n_h * g.d_qk);
    w.w_uv = glorot(g.r_kv, g.n_h * g.d_h);
    w.w_kr = glorot(g.d, g.d_r);
    w.w_o = glorot(g.n_h * g.d_h, g.d);
    if (enable_ln) {
        w.ln_q = LayerNormParams::identity(g.r_q);
        w.ln_kv = LayerNormParams::identity(g.r_kv);
    }
    return w;
}

}  // namespace xmla
