#include "xmla/svd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace xmla {

namespace {

// One-sided Jacobi for m >= n: rotate column pairs of B until all are
// mutually orthogonal. On exit B = U * diag(sigma) (scaled left vectors)
// and V accumulates the right rotations, so A = normalize(B) * sigma * V^T.
struct JacobiFactors {
    std::vector<double> b;  // m x n, column-orthogonal on exit
    std::vector<double> v;  // n x n
};

JacobiFactors one_sided_jacobi(const std::vector<double>& a, int64_t m, int64_t n) {
    JacobiFactors f{a, std::vector<double>(static_cast<size_t>(n * n), 0.0)};
    for (int64_t i = 0; i < n; ++i) f.v[static_cast<size_t>(i * n + i)] = 1.0;

    const double tol = 1e-15;
    const int max_sweeps = 60;
    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        bool rotated = false;
        for (int64_t p = 0; p < n - 1; ++p) {
            for (int64_t q = p + 1; q < n; ++q) {
                double alpha = 0.0, beta = 0.0, gamma = 0.0;
                for (int64_t i = 0; i < m; ++i) {
                    double bp = f.b[static_cast<size_t>(i * n + p)];
                    double bq = f.b[static_cast<size_t>(i * n + q)];
                    alpha += bp * bp;
                    beta += bq * bq;
                    gamma += bp * bq;
                }
                if (gamma == 0.0 || std::abs(gamma) <= tol * std::sqrt(alpha * beta)) continue;
                rotated = true;
                double zeta = (beta - alpha) / (2.0 * gamma);
                double t = (zeta >= 0.0 ? 1.0 : -1.0) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                double c = 1.0 / std::sqrt(1.0 + t * t);
                double s = c * t;
                for (int64_t i = 0; i < m; ++i) {
                    double bp = f.b[static_cast<size_t>(i * n + p)];
                    double bq = f.b[static_cast<size_t>(i * n + q)];
                    f.b[static_cast<size_t>(i * n + p)] = c * bp - s * bq;
                    f.b[static_cast<size_t>(i * n + q)] = s * bp + c * bq;
                }
                for (int64_t i = 0; i < n; ++i) {
                    double vp = f.v[static_cast<size_t>(i * n + p)];
                    double vq = f.v[static_cast<size_t>(i * n + q)];
                    f.v[static_cast<size_t>(i * n + p)] = c * vp - s * vq;
                    f.v[static_cast<size_t>(i * n + q)] = s * vp + c * vq;
                }
            }
        }
        if (!rotated) break;
    }
    return f;
}

struct FullSvd {
    Tensor u;                   // m x k
    std::vector<double> sigma;  // k, descending
    Tensor vt;                  // k x n
};

// Deterministic full SVD: Jacobi on whichever orientation has fewer columns,
// descending sort, null-space completion, then the sign convention (largest
// |entry| of each left singular vector made nonnegative).
FullSvd svd_full(const Tensor& a) {
    int64_t m = a.shape()[0], n = a.shape()[1];
    bool flipped = m < n;
    int64_t wm = flipped ? n : m;  // worked matrix dims, wm >= wn
    int64_t wn = flipped ? m : n;

    std::vector<double> work(static_cast<size_t>(wm * wn));
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) {
            double v = a.data()[static_cast<size_t>(i * n + j)];
            if (flipped)
                work[static_cast<size_t>(j * wn + i)] = v;
            else
                work[static_cast<size_t>(i * wn + j)] = v;
        }

    JacobiFactors f = one_sided_jacobi(work, wm, wn);

    std::vector<double> sigma(static_cast<size_t>(wn));
    for (int64_t j = 0; j < wn; ++j) {
        double s = 0.0;
        for (int64_t i = 0; i < wm; ++i) {
            double v = f.b[static_cast<size_t>(i * wn + j)];
            s += v * v;
        }
        sigma[static_cast<size_t>(j)] = std::sqrt(s);
    }

    std::vector<int64_t> order(static_cast<size_t>(wn));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int64_t x, int64_t y) {
        return sigma[static_cast<size_t>(x)] > sigma[static_cast<size_t>(y)];
    });

    // wu gets normalized columns of B; columns whose singular value vanishes
    // are completed to an orthonormal set from canonical basis vectors.
    std::vector<double> wu(static_cast<size_t>(wm * wn), 0.0);
    std::vector<double> wvt(static_cast<size_t>(wn * wn), 0.0);
    std::vector<double> sorted_sigma(static_cast<size_t>(wn));
    double smax = sigma[static_cast<size_t>(order[0])];
    double null_tol = smax * 1e-13 + std::numeric_limits<double>::min();
    int64_t next_basis = 0;
    for (int64_t jj = 0; jj < wn; ++jj) {
        int64_t j = order[static_cast<size_t>(jj)];
        double s = sigma[static_cast<size_t>(j)];
        if (s > null_tol) {
            sorted_sigma[static_cast<size_t>(jj)] = s;
            for (int64_t i = 0; i < wm; ++i)
                wu[static_cast<size_t>(i * wn + jj)] = f.b[static_cast<size_t>(i * wn + j)] / s;
        } else {
            sorted_sigma[static_cast<size_t>(jj)] = 0.0;
            while (next_basis < wm) {
                std::vector<double> cand(static_cast<size_t>(wm), 0.0);
                cand[static_cast<size_t>(next_basis++)] = 1.0;
                for (int64_t prev = 0; prev < jj; ++prev) {
                    double dot = 0.0;
                    for (int64_t i = 0; i < wm; ++i) dot += cand[static_cast<size_t>(i)] * wu[static_cast<size_t>(i * wn + prev)];
                    for (int64_t i = 0; i < wm; ++i) cand[static_cast<size_t>(i)] -= dot * wu[static_cast<size_t>(i * wn + prev)];
                }
                double nrm = 0.0;
                for (double v : cand) nrm += v * v;
                nrm = std::sqrt(nrm);
                if (nrm > 1e-8) {
                    for (int64_t i = 0; i < wm; ++i) wu[static_cast<size_t>(i * wn + jj)] = cand[static_cast<size_t>(i)] / nrm;
                    break;
                }
            }
        }
        // Row jj of worked V^T = column j of V.
        for (int64_t i = 0; i < wn; ++i)
            wvt[static_cast<size_t>(jj * wn + i)] = f.v[static_cast<size_t>(i * wn + j)];
    }

    FullSvd out;
    out.sigma = std::move(sorted_sigma);
    int64_t k = wn;  // == min(m, n)
    out.u = Tensor({m, k}, 0.0);
    out.vt = Tensor({k, n}, 0.0);
    if (!flipped) {
        out.u.data() = std::move(wu);
        out.vt.data() = std::move(wvt);
    } else {
        // a^T = wu * sigma * wvt  =>  a = wvt^T * sigma * wu^T
        for (int64_t i = 0; i < m; ++i)
            for (int64_t j = 0; j < k; ++j) out.u.data()[static_cast<size_t>(i * k + j)] = wvt[static_cast<size_t>(j * wn + i)];
        for (int64_t j = 0; j < k; ++j)
            for (int64_t i = 0; i < n; ++i) out.vt.data()[static_cast<size_t>(j * n + i)] = wu[static_cast<size_t>(i * wn + j)];
    }

    for (int64_t j = 0; j < k; ++j) {
        double best = 0.0, val = 0.0;
        for (int64_t i = 0; i < m; ++i) {
            double v = out.u.data()[static_cast<size_t>(i * k + j)];
            if (std::abs(v) > best) {
                best = std::abs(v);
                val = v;
            }
        }
        if (val < 0.0) {
            for (int64_t i = 0; i < m; ++i) out.u.data()[static_cast<size_t>(i * k + j)] *= -1.0;
            for (int64_t i = 0; i < n; ++i) out.vt.data()[static_cast<size_t>(j * n + i)] *= -1.0;
        }
    }
    return out;
}

}  // namespace

SvdResult svd_truncated(const Tensor& a, int64_t r) {
    if (a.ndim() != 2) throw DimensionError("svd_truncated: expected 2-D tensor, got " + shape_string(a.shape()));
    int64_t m = a.shape()[0], n = a.shape()[1];
    int64_t kmax = std::min(m, n);
    if (r < 1 || r > kmax)
        throw RankError("svd_truncated: rank " + std::to_string(r) + " outside [1," + std::to_string(kmax) +
                        "] for " + shape_string(a.shape()));

    FullSvd full = svd_full(a);
    SvdResult res;
    res.sigma.assign(full.sigma.begin(), full.sigma.begin() + r);
    res.u = Tensor({m, r}, 0.0);
    int64_t k = full.u.shape()[1];
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < r; ++j)
            res.u.data()[static_cast<size_t>(i * r + j)] = full.u.data()[static_cast<size_t>(i * k + j)];
    res.vt = Tensor({r, n}, std::vector<double>(full.vt.data().begin(), full.vt.data().begin() + r * n));
    return res;
}

std::vector<double> singular_values(const Tensor& a) {
    if (a.ndim() != 2) throw DimensionError("singular_values: expected 2-D tensor, got " + shape_string(a.shape()));
    return svd_full(a).sigma;
}

Tensor svd_multiply_back(const SvdResult& svd) {
    int64_t r = static_cast<int64_t>(svd.sigma.size());
    Tensor sv = svd.vt.clone();
    int64_t n = sv.shape()[1];
    for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < n; ++j) sv.data()[static_cast<size_t>(i * n + j)] *= svd.sigma[static_cast<size_t>(i)];
    return matmul(svd.u.detach(), sv.detach());
}

double relative_frobenius_error(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw DimensionError("relative_frobenius_error: shapes differ, " + shape_string(a.shape()) + " vs " +
                             shape_string(b.shape()));
    double num = 0.0, den = 0.0;
    for (size_t i = 0; i < a.data().size(); ++i) {
        double d = a.data()[i] - b.data()[i];
        num += d * d;
        den += a.data()[i] * a.data()[i];
    }
    if (den == 0.0) return num == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
    return std::sqrt(num / den);
}

}  // namespace xmla
