#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "ferformer/gradcheck.hpp"
#include "ferformer/ops.hpp"
#include "ferformer/rng.hpp"
#include "ferformer/tape.hpp"
#include "ferformer/tensor.hpp"

using namespace ferformer;
using Catch::Matchers::WithinAbs;

namespace {

Tensor<double> random_tensor(Shape shape, std::mt19937& rng, double lo = -1.0, double hi = 1.0) {
    Tensor<double> t(shape);
    std::uniform_real_distribution<double> d(lo, hi);
    for (auto& v : t.data()) v = d(rng);
    return t;
}

// Independent oracle: naive triple loop.
Tensor<double> matmul_oracle(const Tensor<double>& a, const Tensor<double>& b) {
    const std::size_t m = a.dim(0), k = a.dim(1), p = b.dim(1);
    Tensor<double> out(Shape{m, p});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < p; ++j) {
            double acc = 0.0;
            for (std::size_t kk = 0; kk < k; ++kk) acc += a.at(i, kk) * b.at(kk, j);
            out.at(i, j) = acc;
        }
    return out;
}

Tensor<double> identity(std::size_t n) {
    Tensor<double> t(Shape{n, n});
    for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
    return t;
}

} // namespace

TEST_CASE("matmul identity and values") {
    Tensor<double> b(Shape{2, 2}, {1, 2, 3, 4});
    Tensor<double> out = matmul(identity(2), b);
    for (std::size_t i = 0; i < 4; ++i) CHECK(out[i] == b[i]);
}

TEST_CASE("matmul gradient of a linear map is ones") {
    Tensor<double> x(Shape{2, 2}, {1, 0, 0, 1});
    x.set_requires_grad(true);
    Tape<double> tape;
    TapeScope<double> scope(tape);
    Tensor<double> loss = sum(matmul(x, identity(2)));
    tape.backward(loss);
    for (double g : x.grad()) CHECK(g == 1.0);
}

TEST_CASE("matmul agrees with triple-loop oracle") {
    std::mt19937 rng(42);
    Tensor<double> a = random_tensor({3, 4}, rng);
    Tensor<double> b = random_tensor({4, 2}, rng);
    Tensor<double> got = matmul(a, b);
    Tensor<double> want = matmul_oracle(a, b);
    for (std::size_t i = 0; i < got.numel(); ++i)
        CHECK_THAT(got[i], WithinAbs(want[i], 1e-12));
}

TEST_CASE("matmul shape error names both shapes") {
    Tensor<double> a(Shape{2, 3});
    Tensor<double> b(Shape{4, 2});
    CHECK_THROWS_MATCHES(matmul(a, b), ShapeError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("[2x3]") &&
                             Catch::Matchers::ContainsSubstring("[4x2]")));
}

TEST_CASE("matmul associativity with identity is bitwise") {
    std::mt19937 rng(7);
    Tensor<double> a = random_tensor({3, 3}, rng);
    Tensor<double> b = random_tensor({3, 3}, rng);
    Tensor<double> i3 = identity(3);
    Tensor<double> left = matmul(matmul(a, i3), b);
    Tensor<double> right = matmul(a, matmul(i3, b));
    Tensor<double> direct = matmul(a, b);
    for (std::size_t i = 0; i < direct.numel(); ++i) {
        CHECK(left[i] == direct[i]);
        CHECK(right[i] == direct[i]);
    }
}

TEST_CASE("softmax basics") {
    SECTION("symmetry") {
        Tensor<double> x(Shape{2}, {0, 0});
        Tensor<double> y = softmax(x);
        CHECK(y[0] == 0.5);
        CHECK(y[1] == 0.5);
    }
    SECTION("closed form ln 1..3") {
        Tensor<double> x(Shape{3}, {std::log(1.0), std::log(2.0), std::log(3.0)});
        Tensor<double> y = softmax(x);
        CHECK_THAT(y[0], WithinAbs(1.0 / 6.0, 1e-12));
        CHECK_THAT(y[1], WithinAbs(2.0 / 6.0, 1e-12));
        CHECK_THAT(y[2], WithinAbs(3.0 / 6.0, 1e-12));
    }
    SECTION("shift invariance") {
        std::mt19937 rng(3);
        for (int rep = 0; rep < 20; ++rep) {
            Tensor<double> x = random_tensor({5}, rng, -3, 3);
            double c = uniform(rng, -10.0, 10.0);
            Tensor<double> shifted = x.clone();
            for (auto& v : shifted.data()) v += c;
            Tensor<double> a = softmax(x), b = softmax(shifted);
            for (std::size_t i = 0; i < 5; ++i) CHECK_THAT(a[i], WithinAbs(b[i], 1e-12));
        }
    }
    SECTION("rows sum to one, any axis") {
        std::mt19937 rng(11);
        for (int rep = 0; rep < 30; ++rep) {
            Tensor<double> x = random_tensor({4, 6}, rng, -30, 30);
            int axis = rep % 2 == 0 ? -1 : 0;
            Tensor<double> y = softmax(x, axis);
            const std::size_t n = axis == -1 ? 6 : 4;
            const std::size_t slices = axis == -1 ? 4 : 6;
            for (std::size_t s = 0; s < slices; ++s) {
                double total = 0;
                for (std::size_t i = 0; i < n; ++i)
                    total += axis == -1 ? y.at(s, i) : y.at(i, s);
                CHECK_THAT(total, WithinAbs(1.0, 1e-6));
                for (std::size_t i = 0; i < n; ++i)
                    CHECK((axis == -1 ? y.at(s, i) : y.at(i, s)) >= 0.0);
            }
        }
    }
}

TEST_CASE("cross entropy closed forms") {
    SECTION("uniform logits give ln M") {
        Tensor<double> logits(Shape{1, 3}, {0, 0, 0});
        CHECK_THAT(cross_entropy_from_logits(logits, {0}).item(),
                   WithinAbs(std::log(3.0), 1e-12));
    }
    SECTION("two-class closed form") {
        Tensor<double> logits(Shape{1, 2}, {1, 0});
        // -log(e^1 / (e^1 + e^0)) = ln(1 + e^-1)
        CHECK_THAT(cross_entropy_from_logits(logits, {0}).item(),
                   WithinAbs(0.3132616875182228, 1e-12));
    }
    SECTION("saturated case") {
        Tensor<double> logits(Shape{1, 3}, {50, 0, 0});
        CHECK(cross_entropy_from_logits(logits, {0}).item() < 1e-9);
    }
    SECTION("out-of-range target") {
        Tensor<double> logits(Shape{1, 3});
        CHECK_THROWS_AS(cross_entropy_from_logits(logits, {3}), IndexError);
        CHECK_THROWS_AS(cross_entropy_from_logits(logits, {-1}), IndexError);
    }
    SECTION("gradient equals (softmax - onehot)/B") {
        std::mt19937 rng(5);
        Tensor<double> logits = random_tensor({3, 4}, rng, -2, 2);
        logits.set_requires_grad(true);
        std::vector<int> targets{1, 0, 3};
        Tape<double> tape;
        TapeScope<double> scope(tape);
        Tensor<double> loss = cross_entropy_from_logits(logits, targets);
        tape.backward(loss);
        Tensor<double> p = softmax(logits.clone(), -1);
        for (std::size_t i = 0; i < 3; ++i)
            for (std::size_t j = 0; j < 4; ++j) {
                double onehot = static_cast<std::size_t>(targets[i]) == j ? 1.0 : 0.0;
                CHECK_THAT(logits.grad()[i * 4 + j], WithinAbs((p.at(i, j) - onehot) / 3.0, 1e-12));
            }
    }
}

TEST_CASE("layer norm") {
    SECTION("constant vector maps to zero") {
        Tensor<double> x(Shape{1, 4}, {3, 3, 3, 3});
        Tensor<double> y = layer_norm(x, Tensor<double>::ones({4}), Tensor<double>::zeros({4}));
        for (double v : y.data()) CHECK_THAT(v, WithinAbs(0.0, 1e-12));
    }
    SECTION("zero mean unit variance before affine") {
        std::mt19937 rng(9);
        Tensor<double> x = random_tensor({2, 16}, rng, -5, 5);
        Tensor<double> y = layer_norm(x, Tensor<double>::ones({16}), Tensor<double>::zeros({16}));
        for (std::size_t r = 0; r < 2; ++r) {
            double mu = 0, var = 0;
            for (std::size_t j = 0; j < 16; ++j) mu += y.at(r, j);
            mu /= 16;
            for (std::size_t j = 0; j < 16; ++j) var += (y.at(r, j) - mu) * (y.at(r, j) - mu);
            var /= 16;
            CHECK_THAT(mu, WithinAbs(0.0, 1e-9));
            CHECK_THAT(var, WithinAbs(1.0, 1e-4));
        }
    }
    SECTION("gradient matches finite differences") {
        std::mt19937 rng(13);
        Tensor<double> gain = random_tensor({6}, rng, 0.5, 1.5);
        Tensor<double> bias = random_tensor({6}, rng);
        Tensor<double> x = random_tensor({3, 6}, rng);
        auto fx = [&](const Tensor<double>& t) { return sum(mul(layer_norm(t, gain, bias), t.clone())); };
        auto report = grad_check<double>(fx, x, 1e-6, 1e-4);
        CHECK(report.pass);
        auto fg = [&](const Tensor<double>&) { return sum(layer_norm(x, gain, bias)); };
        CHECK(grad_check<double>(fg, gain, 1e-6, 1e-4).pass);
        CHECK(grad_check<double>(fg, bias, 1e-6, 1e-4).pass);
    }
}

TEST_CASE("gelu and l2 normalize") {
    Tensor<double> zero(Shape{1}, {0.0});
    CHECK(gelu(zero)[0] == 0.0);

    Tensor<double> v(Shape{1, 2}, {3, 4});
    Tensor<double> n = l2_normalize(v);
    CHECK_THAT(n[0], WithinAbs(0.6, 1e-12));
    CHECK_THAT(n[1], WithinAbs(0.8, 1e-12));

    // zero vector is clamped, not divided by zero
    Tensor<double> z(Shape{1, 3});
    Tensor<double> nz = l2_normalize(z);
    for (double x : nz.data()) CHECK(x == 0.0);
}

TEST_CASE("adaptive average pooling") {
    SECTION("constant map stays constant") {
        Tensor<double> x = Tensor<double>::full({2, 14, 14}, 0.7);
        Tensor<double> y = adaptive_avg_pool2d(x, 12, 12);
        CHECK(y.shape() == Shape{2, 12, 12});
        for (double v : y.data()) CHECK_THAT(v, WithinAbs(0.7, 1e-12));
    }
    SECTION("identity when sizes match") {
        std::mt19937 rng(17);
        Tensor<double> x = random_tensor({1, 12, 12}, rng);
        Tensor<double> y = adaptive_avg_pool2d(x, 12, 12);
        for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y[i] == x[i]);
    }
    SECTION("upsample request is a shape error") {
        Tensor<double> x(Shape{1, 8, 8});
        CHECK_THROWS_AS(adaptive_avg_pool2d(x, 12, 12), ShapeError);
    }
    SECTION("global mean preserved for multiples of 12") {
        std::mt19937 rng(19);
        Tensor<double> x = random_tensor({3, 24, 36}, rng);
        Tensor<double> y = adaptive_avg_pool2d(x, 12, 12);
        double min = 0, mout = 0;
        for (double v : x.data()) min += v;
        for (double v : y.data()) mout += v;
        CHECK_THAT(min / x.numel(), WithinAbs(mout / y.numel(), 1e-6));
    }
}

TEST_CASE("backward basics") {
    SECTION("sum gives ones") {
        Tensor<double> x(Shape{2, 3}, {1, 2, 3, 4, 5, 6});
        x.set_requires_grad(true);
        Tape<double> tape;
        TapeScope<double> scope(tape);
        tape.backward(sum(x));
        for (double g : x.grad()) CHECK(g == 1.0);
    }
    SECTION("quadratic") {
        Tensor<double> x(Shape{2}, {1, 2});
        x.set_requires_grad(true);
        Tape<double> tape;
        TapeScope<double> scope(tape);
        tape.backward(sum(mul(x, x)));
        CHECK(x.grad()[0] == 2.0);
        CHECK(x.grad()[1] == 4.0);
    }
    SECTION("shared subexpressions accumulate") {
        Tensor<double> x(Shape{2}, {0.5, -1.5});
        x.set_requires_grad(true);
        Tensor<double> c1(Shape{2}, {2, 3});
        Tensor<double> c2(Shape{2}, {-1, 4});
        Tape<double> tape;
        TapeScope<double> scope(tape);
        Tensor<double> loss = add(sum(mul(x, c1)), sum(mul(x, c2)));
        tape.backward(loss);
        // hand-expanded: d/dx (x.c1 + x.c2) = c1 + c2
        CHECK(x.grad()[0] == 1.0);
        CHECK(x.grad()[1] == 7.0);
    }
    SECTION("backward twice without reset is an error") {
        Tensor<double> x(Shape{2}, {1, 2});
        x.set_requires_grad(true);
        Tape<double> tape;
        TapeScope<double> scope(tape);
        Tensor<double> loss = sum(x);
        tape.backward(loss);
        CHECK_THROWS_AS(tape.backward(loss), UsageError);
        tape.reset();
        Tensor<double> loss2 = sum(x);
        tape.backward(loss2); // fine after reset
    }
    SECTION("non-scalar loss rejected") {
        Tensor<double> x(Shape{2}, {1, 2});
        x.set_requires_grad(true);
        Tape<double> tape;
        TapeScope<double> scope(tape);
        Tensor<double> y = mul(x, x);
        CHECK_THROWS_AS(tape.backward(y), UsageError);
    }
}

namespace {

// test-only op whose registered backward is wrong by 10%
Tensor<double> scale_with_corrupted_grad(const Tensor<double>& x) {
    Tensor<double> out(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) out[i] = 2.0 * x[i];
    if (active_tape<double>() && x.requires_grad()) {
        out.set_requires_grad(true);
        auto xi = x.impl(), oi = out.impl();
        active_tape<double>()->record(oi, [xi, oi]() {
            ensure_grad(xi);
            for (std::size_t i = 0; i < xi->grad.size(); ++i)
                xi->grad[i] += oi->grad[i] * 2.0 * 1.1;
        });
    }
    return out;
}

} // namespace

TEST_CASE("grad_check") {
    std::mt19937 rng(23);
    SECTION("sum of squares passes at 1e-6") {
        Tensor<double> x = random_tensor({3, 3}, rng);
        auto report = grad_check<double>([](const Tensor<double>& t) { return sum(mul(t, t)); }, x,
                                         1e-6, 1e-6);
        CHECK(report.pass);
        CHECK(report.checked == 9);
    }
    SECTION("softmax then cross entropy passes at 1e-5") {
        Tensor<double> x = random_tensor({2, 5}, rng);
        auto f = [](const Tensor<double>& t) {
            return cross_entropy_from_logits(mul_scalar(softmax(t, -1), 3.0), {1, 4});
        };
        CHECK(grad_check<double>(f, x, 1e-6, 1e-5).pass);
    }
    SECTION("corrupted gradient fails") {
        Tensor<double> x = random_tensor({4}, rng);
        auto f = [](const Tensor<double>& t) { return sum(scale_with_corrupted_grad(t)); };
        CHECK_FALSE(grad_check<double>(f, x, 1e-6, 1e-5).pass);
    }
    SECTION("non-deterministic f detected") {
        Tensor<double> x = random_tensor({2}, rng);
        int calls = 0;
        auto f = [&calls](const Tensor<double>& t) {
            return add(sum(t), Tensor<double>::scalar(0.001 * calls++));
        };
        CHECK_THROWS_AS(grad_check<double>(f, x, 1e-6, 1e-5), DeterminismError);
    }
    SECTION("eps domain enforced") {
        Tensor<double> x = random_tensor({2}, rng);
        auto f = [](const Tensor<double>& t) { return sum(t); };
        CHECK_THROWS_AS(grad_check<double>(f, x, 0.0, 1e-5), UsageError);
        CHECK_THROWS_AS(grad_check<double>(f, x, 0.5, 1e-5), UsageError);
    }
}

TEST_CASE("every primitive passes grad_check on random small shapes") {
    std::mt19937 rng(29);
    const double eps = 1e-6, tol = 1e-5;
    auto pass = [&](auto f, Tensor<double> x) {
        auto report = grad_check<double>(f, std::move(x), eps, tol);
        INFO("max_rel_err = " << report.max_rel_err);
        return report.pass;
    };

    Tensor<double> a34 = random_tensor({3, 4}, rng);
    Tensor<double> b42 = random_tensor({4, 2}, rng);
    CHECK(pass([&](const Tensor<double>& t) { return sum(matmul(t, b42)); }, a34.clone()));
    CHECK(pass([&](const Tensor<double>& t) { return sum(matmul(a34, t)); }, b42.clone()));
    CHECK(pass([&](const Tensor<double>& t) { return sum(transpose(t)); }, a34.clone()));

    Tensor<double> m23 = random_tensor({2, 3}, rng);
    Tensor<double> v3 = random_tensor({3}, rng);
    CHECK(pass([&](const Tensor<double>& t) { return sum(mul(add(t, v3), add(t, v3))); }, m23.clone()));
    CHECK(pass([&](const Tensor<double>& t) { return sum(mul(add(m23, t), add(m23, t))); }, v3.clone()));
    CHECK(pass([&](const Tensor<double>& t) { return sum(mul(add_rowwise(m23, t), m23)); },
               random_tensor({2}, rng)));
    CHECK(pass([&](const Tensor<double>& t) { return mean(mul(sub(t, m23), sub(t, m23))); }, m23.clone()));
    CHECK(pass([&](const Tensor<double>& t) { return sum(gelu(t)); }, random_tensor({7}, rng, -3, 3)));
    CHECK(pass([&](const Tensor<double>& t) { return sum(mul(softmax(t, -1), m23)); }, m23.clone()));
    CHECK(pass([&](const Tensor<double>& t) { return sum(mul(l2_normalize(t), m23)); }, m23.clone()));
    CHECK(pass([&](const Tensor<double>& t) { return cross_entropy_from_logits(t, {2, 0}); }, m23.clone()));
    CHECK(pass([&](const Tensor<double>& t) { return sum(mul(reshape(t, {3, 2}), reshape(m23, {3, 2}))); },
               m23.clone()));
    CHECK(pass([&](const Tensor<double>& t) { return sum(mul(slice_rows(t, 1, 2), slice_rows(t, 0, 2))); },
               random_tensor({4, 3}, rng)));
    CHECK(pass([&](const Tensor<double>& t) {
        return sum(mul(concat_rows(std::vector<Tensor<double>>{t, t}),
                       concat_rows(std::vector<Tensor<double>>{m23, m23})));
    }, m23.clone()));
    CHECK(pass([&](const Tensor<double>& t) { return sum(mul(gather_rows(t, {0, 2, 2}), Tensor<double>::ones({3, 3}))); },
               random_tensor({4, 3}, rng)));

    Tensor<double> img = random_tensor({2, 6, 6}, rng);
    CHECK(pass([&](const Tensor<double>& t) { return sum(mul(adaptive_avg_pool2d(t, 4, 4), adaptive_avg_pool2d(img, 4, 4))); },
               img.clone()));
    CHECK(pass([&](const Tensor<double>& t) { return sum(unfold(t, 3, 3, 2, 1)); }, img.clone()));

    Tensor<double> w = random_tensor({3, 2, 3, 3}, rng, -0.5, 0.5);
    Tensor<double> cb = random_tensor({3}, rng);
    CHECK(pass([&](const Tensor<double>& t) { return sum(gelu(conv2d(t, w, cb, 2, 1))); }, img.clone()));
    CHECK(pass([&](const Tensor<double>& t) { return sum(gelu(conv2d(img, t, cb, 2, 1))); }, w.clone()));
    CHECK(pass([&](const Tensor<double>& t) { return sum(conv2d(img, w, t, 2, 1)); }, cb.clone()));

    CHECK(pass([&](const Tensor<double>& t) {
        std::mt19937 drop_rng(99); // re-seeded per call so f stays deterministic
        return sum(dropout(t, 0.3, drop_rng));
    }, random_tensor({5, 5}, rng)));

    Tensor<double> ln_g = random_tensor({4}, rng, 0.5, 1.5);
    Tensor<double> ln_b = random_tensor({4}, rng);
    Tensor<double> ln_x = random_tensor({3, 4}, rng);
    CHECK(pass([&](const Tensor<double>& t) { return sum(mul(layer_norm(t, ln_g, ln_b), ln_x)); }, ln_x.clone()));
}
