#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "xmla/tensor.hpp"
#include "xmla/train.hpp"

using namespace xmla;

namespace {

Tensor random_tensor(Shape shape, Rng& rng) {
    Tensor t(std::move(shape), 0.0);
    for (double& v : t.data()) v = rng.normal();
    return t;
}

// Local central-difference check, independent of train::grad_check.
double fd_max_rel_err(const std::function<Tensor()>& loss_fn, std::vector<Tensor> params,
                      double h = 1e-5) {
    for (Tensor& p : params) {
        p.set_requires_grad(true);
        p.zero_grad();
    }
    GradTape tape;
    {
        GradTape::Scope scope(tape);
        tape.backward(loss_fn());
    }
    double worst = 0.0;
    for (Tensor& p : params) {
        for (size_t i = 0; i < p.data().size(); ++i) {
            double saved = p.data()[i];
            p.data()[i] = saved + h;
            double up = loss_fn().item();
            p.data()[i] = saved - h;
            double down = loss_fn().item();
            p.data()[i] = saved;
            double numeric = (up - down) / (2.0 * h);
            double analytic = p.has_grad() ? p.impl()->grad[i] : 0.0;
            double rel = std::abs(numeric - analytic) / std::max({std::abs(numeric), std::abs(analytic), 1e-6});
            worst = std::max(worst, rel);
        }
        p.zero_grad();
    }
    return worst;
}

}  // namespace

TEST_CASE("matmul identity and hand arithmetic") {
    Tensor eye({2, 2}, {1, 0, 0, 1});
    Tensor a({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor prod = matmul(eye, a);
    for (int64_t i = 0; i < 2; ++i)
        for (int64_t j = 0; j < 3; ++j) CHECK(prod.at(i, j) == a.at(i, j));

    Tensor b({2, 2}, {1, 2, 3, 4});
    Tensor ones({2, 1}, {1, 1});
    Tensor r = matmul(b, ones);
    CHECK(r.at(0, 0) == doctest::Approx(3.0));
    CHECK(r.at(1, 0) == doctest::Approx(7.0));
}

TEST_CASE("matmul shape mismatch names both shapes") {
    Tensor a({2, 3}, 1.0);
    Tensor b({2, 3}, 1.0);
    try {
        matmul(a, b);
        FAIL("expected DimensionError");
    } catch (const DimensionError& e) {
        std::string msg = e.what();
        CHECK(msg.find("[2x3]") != std::string::npos);
    }
}

TEST_CASE("matmul gradient vs central differences") {
    Rng rng(42);
    Tensor a = random_tensor({5, 4}, rng);
    Tensor b = random_tensor({4, 3}, rng);
    double err = fd_max_rel_err([&]() { return sum(matmul(a, b)); }, {a, b});
    CHECK(err <= 1e-6);
}

TEST_CASE("softmax rows: symmetry, overflow, closed form") {
    Tensor x({1, 3}, {0, 0, 0});
    Tensor y = softmax_rows(x);
    for (int64_t j = 0; j < 3; ++j) CHECK(y.at(0, j) == doctest::Approx(1.0 / 3).epsilon(1e-12));

    Tensor big({1, 2}, {1000, 0});
    Tensor yb = softmax_rows(big);
    CHECK(yb.at(0, 0) == doctest::Approx(1.0));
    CHECK(yb.at(0, 1) == doctest::Approx(0.0));
    CHECK(std::isfinite(yb.at(0, 0)));

    Tensor ln2({1, 2}, {std::log(2.0), 0.0});
    Tensor yl = softmax_rows(ln2);
    CHECK(yl.at(0, 0) == doctest::Approx(2.0 / 3).epsilon(1e-12));
    CHECK(yl.at(0, 1) == doctest::Approx(1.0 / 3).epsilon(1e-12));
}

TEST_CASE("softmax rows sum to one within 1e-12, entries up to 1e3") {
    Rng rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor x({4, 6}, 0.0);
        for (double& v : x.data()) v = rng.uniform(-1e3, 1e3);
        Tensor y = softmax_rows(x);
        for (int64_t i = 0; i < 4; ++i) {
            double s = 0.0;
            for (int64_t j = 0; j < 6; ++j) {
                s += y.at(i, j);
                CHECK(y.at(i, j) >= 0.0);
            }
            CHECK(std::abs(s - 1.0) <= 1e-12);
        }
    }
}

TEST_CASE("backward: sum gives ones, quadratic gives x") {
    Rng rng(3);
    Tensor x = random_tensor({3, 4}, rng);
    x.set_requires_grad(true);

    GradTape tape;
    {
        GradTape::Scope scope(tape);
        tape.backward(sum(x));
    }
    for (double g : x.impl()->grad) CHECK(g == doctest::Approx(1.0));
    x.zero_grad();

    GradTape tape2;
    {
        GradTape::Scope scope(tape2);
        tape2.backward(scale(sum(mul(x, x)), 0.5));
    }
    for (size_t i = 0; i < x.data().size(); ++i)
        CHECK(x.impl()->grad[i] == doctest::Approx(x.data()[i]).epsilon(1e-12));
}

TEST_CASE("backward accumulates across calls until cleared") {
    Tensor x({2}, {1.0, 2.0}, true);
    GradTape tape;
    Tensor loss;
    {
        GradTape::Scope scope(tape);
        loss = sum(x);
    }
    tape.backward(loss);
    tape.backward(loss);
    CHECK(x.impl()->grad[0] == doctest::Approx(2.0));
    x.zero_grad();
    CHECK_FALSE(x.has_grad());
}

TEST_CASE("backward rejects non-scalar loss") {
    Tensor x({2, 2}, 1.0, true);
    GradTape tape;
    Tensor y;
    {
        GradTape::Scope scope(tape);
        y = scale(x, 2.0);
    }
    CHECK_THROWS_AS(tape.backward(y), ContractError);
}

TEST_CASE("every primitive passes the finite-difference suite") {
    Rng rng(11);
    double tol = 1e-4;

    SUBCASE("add/sub/mul/scale") {
        Tensor a = random_tensor({3, 4}, rng), b = random_tensor({3, 4}, rng);
        CHECK(fd_max_rel_err([&]() { return sum(add(a, b)); }, {a, b}) <= tol);
        CHECK(fd_max_rel_err([&]() { return sum(sub(a, b)); }, {a, b}) <= tol);
        CHECK(fd_max_rel_err([&]() { return sum(mul(a, b)); }, {a, b}) <= tol);
        CHECK(fd_max_rel_err([&]() { return sum(scale(a, -1.7)); }, {a}) <= tol);
    }
    SUBCASE("transpose/reshape/concat/slice") {
        Tensor a = random_tensor({3, 4}, rng), b = random_tensor({3, 2}, rng);
        Tensor c = random_tensor({2, 4}, rng);
        Tensor wt = random_tensor({3, 2}, rng).detach(), wr = random_tensor({4, 3}, rng).detach();
        CHECK(fd_max_rel_err([&]() { return sum(matmul(transpose(a), wt)); }, {a}) <= tol);
        CHECK(fd_max_rel_err([&]() { return sum(mul(reshape(a, {4, 3}), wr)); }, {a}) <= tol);
        CHECK(fd_max_rel_err([&]() { return sum(mul(concat_cols(a, b), concat_cols(a, b))); }, {a, b}) <= tol);
        CHECK(fd_max_rel_err([&]() { return sum(mul(concat_rows(a, c), concat_rows(a, c))); }, {a, c}) <= tol);
        CHECK(fd_max_rel_err([&]() { return sum(mul(slice_cols(a, 1, 3), slice_cols(a, 0, 2))); }, {a}) <= tol);
        CHECK(fd_max_rel_err([&]() { return sum(mul(slice_rows(a, 1, 3), slice_rows(a, 0, 2))); }, {a}) <= tol);
    }
    SUBCASE("softmax/log-softmax/mean") {
        Tensor a = random_tensor({3, 5}, rng);
        Tensor w = random_tensor({3, 5}, rng).detach();
        CHECK(fd_max_rel_err([&]() { return sum(mul(softmax_rows(a), w)); }, {a}) <= tol);
        CHECK(fd_max_rel_err([&]() { return sum(mul(log_softmax_rows(a), w)); }, {a}) <= tol);
        CHECK(fd_max_rel_err([&]() { return mean(mul(a, a)); }, {a}) <= tol);
    }
    SUBCASE("layer norm and rms norm") {
        Tensor a = random_tensor({3, 6}, rng);
        Tensor gain = random_tensor({6}, rng);
        Tensor bias = random_tensor({6}, rng);
        Tensor w = random_tensor({3, 6}, rng).detach();
        CHECK(fd_max_rel_err([&]() { return sum(mul(layer_norm_rows(a, gain, bias), w)); },
                             {a, gain, bias}) <= tol);
        CHECK(fd_max_rel_err([&]() { return sum(mul(rms_norm_rows(a, gain), w)); }, {a, gain}) <= tol);
    }
    SUBCASE("silu/softplus/gather/embedding") {
        Tensor a = random_tensor({3, 4}, rng);
        CHECK(fd_max_rel_err([&]() { return sum(silu(a)); }, {a}) <= tol);
        CHECK(fd_max_rel_err([&]() { return sum(softplus(a)); }, {a}) <= tol);
        std::vector<int64_t> ids{2, 0, 3};
        CHECK(fd_max_rel_err([&]() { return sum(gather_cols(a, ids)); }, {a}) <= tol);
        Tensor table = random_tensor({5, 3}, rng);
        std::vector<int64_t> toks{4, 1, 1, 0};
        CHECK(fd_max_rel_err([&]() { return sum(mul(embedding_lookup(table, toks),
                                                    embedding_lookup(table, toks))); },
                             {table}) <= tol);
    }
}

TEST_CASE("gather and embedding reject out-of-range ids") {
    Tensor a({2, 3}, 1.0);
    CHECK_THROWS_AS(gather_cols(a, {0, 3}), VocabError);
    CHECK_THROWS_AS(embedding_lookup(a, {2}), VocabError);
}

TEST_CASE("finite-check mode flags NaN") {
    set_finite_checks(true);
    Tensor a({1, 2}, {1e308, 1e308});
    Tensor b({1, 2}, {1e308, 1e308});
    CHECK_THROWS_AS(add(a, b), DataError);
    set_finite_checks(false);
    CHECK_NOTHROW(add(a, b));
}

TEST_CASE("tensor invariants: shape/data agreement") {
    CHECK_THROWS_AS(Tensor({2, 2}, std::vector<double>{1.0}), DimensionError);
    Tensor t({2, 3}, 0.0);
    CHECK(t.numel() == 6);
    CHECK_THROWS_AS(t.item(), ContractError);
}
