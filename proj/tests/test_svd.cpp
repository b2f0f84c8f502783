#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "xmla/svd.hpp"

using namespace xmla;

namespace {

Tensor random_matrix(int64_t m, int64_t n, uint64_t seed) {
    Rng rng(seed);
    Tensor t({m, n}, 0.0);
    for (double& v : t.data()) v = rng.normal();
    return t;
}

void check_orthonormal_cols(const Tensor& u, double tol) {
    int64_t m = u.shape()[0], r = u.shape()[1];
    for (int64_t a = 0; a < r; ++a)
        for (int64_t b = a; b < r; ++b) {
            double dot = 0.0;
            for (int64_t i = 0; i < m; ++i) dot += u.at(i, a) * u.at(i, b);
            CHECK(std::abs(dot - (a == b ? 1.0 : 0.0)) <= tol);
        }
}

}  // namespace

TEST_CASE("identity matrix at full rank") {
    Tensor eye({2, 2}, {1, 0, 0, 1});
    SvdResult s = svd_truncated(eye, 2);
    CHECK(s.sigma[0] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(s.sigma[1] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(relative_frobenius_error(eye, svd_multiply_back(s)) <= 1e-12);
}

TEST_CASE("diagonal matrix spectrum") {
    Tensor d({2, 2}, {3, 0, 0, 2});
    SvdResult s = svd_truncated(d, 2);
    CHECK(s.sigma[0] == doctest::Approx(3.0).epsilon(1e-12));
    CHECK(s.sigma[1] == doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("full-rank reconstruction of fixed-seed 4x3 within 1e-8") {
    Tensor a = random_matrix(4, 3, 123);
    SvdResult s = svd_truncated(a, 3);
    CHECK(relative_frobenius_error(a, svd_multiply_back(s)) <= 1e-8);
}

TEST_CASE("rank bounds are enforced") {
    Tensor a = random_matrix(4, 3, 5);
    CHECK_THROWS_AS(svd_truncated(a, 0), RankError);
    CHECK_THROWS_AS(svd_truncated(a, 4), RankError);
}

TEST_CASE("factors are orthonormal and sigma descending, both orientations") {
    for (auto [m, n, seed] : {std::tuple<int64_t, int64_t, uint64_t>{6, 4, 9},
                              {4, 6, 10},
                              {5, 5, 11}}) {
        Tensor a = random_matrix(m, n, seed);
        int64_t k = std::min(m, n);
        SvdResult s = svd_truncated(a, k);
        for (size_t j = 0; j + 1 < s.sigma.size(); ++j) {
            CHECK(s.sigma[j] >= s.sigma[j + 1]);
            CHECK(s.sigma[j + 1] >= 0.0);
        }
        check_orthonormal_cols(s.u, 1e-8);
        check_orthonormal_cols(transpose(s.vt), 1e-8);
        CHECK(relative_frobenius_error(a, svd_multiply_back(s)) <= 1e-8);
    }
}

TEST_CASE("Eckart-Young: truncation error energy equals tail singular energy") {
    for (uint64_t seed = 0; seed < 20; ++seed) {
        int64_t m = 5 + static_cast<int64_t>(seed % 4);
        int64_t n = 4 + static_cast<int64_t>(seed % 3);
        Tensor a = random_matrix(m, n, 1000 + seed);
        std::vector<double> sigma = singular_values(a);
        int64_t kmax = std::min(m, n);
        for (int64_t r = 1; r <= kmax; ++r) {
            SvdResult s = svd_truncated(a, r);
            Tensor approx = svd_multiply_back(s);
            double err_sq = 0.0;
            for (size_t i = 0; i < a.data().size(); ++i) {
                double d = a.data()[i] - approx.data()[i];
                err_sq += d * d;
            }
            double tail = 0.0;
            for (int64_t j = r; j < kmax; ++j) tail += sigma[static_cast<size_t>(j)] * sigma[static_cast<size_t>(j)];
            double denom = std::max(tail, 1e-12);
            CHECK(std::abs(err_sq - tail) / denom <= 1e-6);
        }
    }
}

TEST_CASE("deterministic sign convention: repeated runs bit-identical") {
    Tensor a = random_matrix(6, 5, 77);
    SvdResult s1 = svd_truncated(a, 4);
    SvdResult s2 = svd_truncated(a, 4);
    CHECK(s1.u.data() == s2.u.data());
    CHECK(s1.vt.data() == s2.vt.data());
    CHECK(s1.sigma == s2.sigma);
    for (int64_t j = 0; j < 4; ++j) {
        double best = 0.0, val = 0.0;
        for (int64_t i = 0; i < 6; ++i) {
            double v = s1.u.at(i, j);
            if (std::abs(v) > best) {
                best = std::abs(v);
                val = v;
            }
        }
        CHECK(val >= 0.0);
    }
}

TEST_CASE("rank-deficient input at full rank keeps orthonormal factors") {
    // rank-1 outer product, full-rank request exercises null-space completion
    Tensor u({4, 1}, {1, 2, 3, 4});
    Tensor v({1, 3}, {1, -1, 2});
    Tensor a = matmul(u, v);
    SvdResult s = svd_truncated(a, 3);
    CHECK(s.sigma[1] == doctest::Approx(0.0).epsilon(1e-10));
    CHECK(s.sigma[2] == doctest::Approx(0.0).epsilon(1e-10));
    check_orthonormal_cols(s.u, 1e-8);
    CHECK(relative_frobenius_error(a, svd_multiply_back(s)) <= 1e-8);
}
