#include <doctest.h>

#include <cmath>
#include <limits>

#include "iot/tensor.hpp"
#include "test_util.hpp"

using namespace iot;
using iot_test::max_fd_error;
using iot_test::PrecisionGuard;
using iot_test::random_tensor;
using iot_test::rel_err;

TEST_SUITE_BEGIN("tensor");

TEST_CASE("tensor shape/data invariants") {
    CHECK_THROWS_AS(Tensor({2, 3}, {1.0, 2.0}), Error);
    CHECK_THROWS_AS(Tensor({0, 3}), Error);
    Tensor t({2, 3});
    CHECK(t.numel() == 6);
    CHECK_THROWS_AS(constant(Tensor({1}, {std::numeric_limits<double>::quiet_NaN()})), Error);
    CHECK_THROWS_AS(constant(Tensor({1}, {std::numeric_limits<double>::infinity()})), Error);
}

TEST_CASE("non-finite op outputs are rejected with op name and index") {
    Var x = constant(Tensor({2}, {1.0, 1000.0}));
    CHECK_THROWS_WITH_AS(exp_elem(x), "exp: non-finite value at flat index 1", Error);
    Var z = constant(Tensor({2}, {0.0, 1.0}));
    CHECK_THROWS_AS(log_elem(z), Error);  // log(0) = -inf
}

TEST_CASE("softmax symmetry, shift invariance, oracle") {
    Var s = softmax_lastdim(constant(Tensor({2}, {0.0, 0.0})));
    CHECK(s.value()[0] == doctest::Approx(0.5).epsilon(1e-9));
    CHECK(s.value()[1] == doctest::Approx(0.5).epsilon(1e-9));

    for (double x : {-3.0, 0.0, 7.5}) {
        for (double c : {0.25, 1.0, 4.0}) {
            Var y = softmax_lastdim(constant(Tensor({2}, {x, x + c})));
            CHECK(rel_err(y.value()[0], 1.0 / (1.0 + std::exp(c))) < 1e-6);
            CHECK(rel_err(y.value()[1], std::exp(c) / (1.0 + std::exp(c))) < 1e-6);
        }
    }

    // Independent scalar-loop evaluation of softmax([1, 2, 3]).
    {
        PrecisionGuard g(Precision::f64);
        const double in[3] = {1.0, 2.0, 3.0};
        double ref[3], total = 0.0;
        for (int i = 0; i < 3; ++i) total += std::exp(in[i]);
        for (int i = 0; i < 3; ++i) ref[i] = std::exp(in[i]) / total;
        Var y = softmax_lastdim(constant(Tensor({3}, {1.0, 2.0, 3.0})));
        for (int i = 0; i < 3; ++i) CHECK(std::abs(y.value()[i] - ref[i]) < 1e-6);
    }
}

TEST_CASE("softmax slices sum to one and survive large inputs") {
    RngStream rng(7);
    Var y = softmax_lastdim(constant(random_tensor({4, 5, 6}, rng, 3.0)));
    for (int s = 0; s < 20; ++s) {
        double sum = 0.0;
        for (int i = 0; i < 6; ++i) sum += y.value()[s * 6 + i];
        CHECK(std::abs(sum - 1.0) < 1e-6);
    }
    // Max-subtraction keeps huge logits finite.
    Var big = softmax_lastdim(constant(Tensor({2}, {1000.0, 1000.5})));
    CHECK(big.value()[0] + big.value()[1] == doctest::Approx(1.0));
}

TEST_CASE("cross entropy trivial values") {
    // Uniform logits, eps = 0, V = 4 -> log 4.
    Var z = constant(Tensor({1, 4}));
    Var l = cross_entropy_ls(z, {2}, 0.0, -1);
    CHECK(l.scalar() == doctest::Approx(std::log(4.0)).epsilon(1e-6));

    // One-hot-correct logits: loss -> 0 as the margin grows.
    Var sharp = constant(Tensor({1, 3}, {30.0, 0.0, 0.0}));
    CHECK(cross_entropy_ls(sharp, {0}, 0.0, -1).scalar() < 1e-8);
    Var sharper = constant(Tensor({1, 3}, {60.0, 0.0, 0.0}));
    CHECK(cross_entropy_ls(sharper, {0}, 0.0, -1).scalar() <
          cross_entropy_ls(sharp, {0}, 0.0, -1).scalar() + 1e-12);
}

TEST_CASE("cross entropy label smoothing oracle") {
    PrecisionGuard g(Precision::f64);
    // V=3, logits [1,0,0], target 0, eps=0.1, evaluated by direct formula.
    const double z[3] = {1.0, 0.0, 0.0};
    double total = 0.0;
    for (double v : z) total += std::exp(v);
    double nll_target = -(z[0] - std::log(total));
    double mean_nll = 0.0;
    for (double v : z) mean_nll += -(v - std::log(total));
    mean_nll /= 3.0;
    const double expected = 0.9 * nll_target + 0.1 * mean_nll;

    Var logits = constant(Tensor({1, 3}, {1.0, 0.0, 0.0}));
    CHECK(cross_entropy_ls(logits, {0}, 0.1, -1).scalar() ==
          doctest::Approx(expected).epsilon(1e-9));
}

TEST_CASE("cross entropy pad handling") {
    Var z = constant(Tensor({3, 4}));
    CHECK_THROWS_WITH_AS(cross_entropy_ls(z, {0, 0, 0}, 0.0, 0), "cross_entropy: empty target",
                         Error);
    // Pad positions are excluded from the mean.
    Var z2 = constant(Tensor({2, 4}, {5.0, 0.0, 0.0, 0.0, 9.0, 9.0, 9.0, 9.0}));
    Var with_pad = cross_entropy_ls(z2, {1, 0}, 0.0, 0);  // row 1 padded out
    Var single = cross_entropy_ls(constant(Tensor({1, 4}, {5.0, 0.0, 0.0, 0.0})), {1}, 0.0, 0);
    CHECK(with_pad.scalar() == doctest::Approx(single.scalar()));
    CHECK_THROWS_AS(cross_entropy_ls(z, {0, 9, 0}, 0.0, 0), Error);  // out of vocab
}

TEST_CASE("backward basics: sum and quadratic") {
    Var p = parameter(Tensor({3}, {1.0, -2.0, 0.5}), "p");
    Var loss = sum_all(p);
    backward(loss);
    for (double g : p.grad()) CHECK(g == doctest::Approx(1.0));

    Var q = parameter(Tensor({3}, {1.0, -2.0, 0.5}), "q");
    Var loss2 = sum_all(mul(q, q));
    backward(loss2);
    auto g = q.grad();
    CHECK(g[0] == doctest::Approx(2.0));
    CHECK(g[1] == doctest::Approx(-4.0));
    CHECK(g[2] == doctest::Approx(1.0));
}

TEST_CASE("backward twice without reset errors; non-participants get zero grad") {
    Var p = parameter(Tensor({2}, {1.0, 2.0}), "p");
    Var unused = parameter(Tensor({2}, {3.0, 4.0}), "unused");
    Var loss = sum_all(mul(p, p));
    backward(loss);
    CHECK_THROWS_WITH_AS(backward(loss), "backward: called twice on the same graph without reset",
                         Error);
    auto g = unused.grad();
    CHECK(g[0] == 0.0);
    CHECK(g[1] == 0.0);
    CHECK_THROWS_AS(backward(p), Error);  // non-scalar loss
}

TEST_CASE("finite differences: every op, 64-bit") {
    PrecisionGuard g(Precision::f64);
    RngStream rng(42);
    const double tol = 1e-5;

    CHECK(max_fd_error([](const std::vector<Var>& v) { return add(v[0], v[1]); },
                       {random_tensor({3, 4}, rng), random_tensor({3, 4}, rng)}) < tol);
    CHECK(max_fd_error([](const std::vector<Var>& v) { return add(v[0], v[1]); },
                       {random_tensor({3, 4}, rng), random_tensor({4}, rng)}) < tol);
    CHECK(max_fd_error([](const std::vector<Var>& v) { return sub(v[0], v[1]); },
                       {random_tensor({2, 3}, rng), random_tensor({2, 3}, rng)}) < tol);
    CHECK(max_fd_error([](const std::vector<Var>& v) { return mul(v[0], v[1]); },
                       {random_tensor({3, 4}, rng), random_tensor({3, 4}, rng)}) < tol);
    CHECK(max_fd_error([](const std::vector<Var>& v) { return scalar_mul(v[0], -2.5); },
                       {random_tensor({5}, rng)}) < tol);
    CHECK(max_fd_error([](const std::vector<Var>& v) { return add_scalar(v[0], 1.25); },
                       {random_tensor({5}, rng)}) < tol);
    CHECK(max_fd_error([](const std::vector<Var>& v) { return mul_scalar_var(v[0], v[1]); },
                       {random_tensor({3, 2}, rng), random_tensor({1}, rng)}) < tol);
    CHECK(max_fd_error([](const std::vector<Var>& v) { return matmul(v[0], v[1]); },
                       {random_tensor({3, 4}, rng), random_tensor({4, 2}, rng)}) < tol);
    CHECK(max_fd_error([](const std::vector<Var>& v) { return matmul(v[0], v[1]); },
                       {random_tensor({2, 3, 4}, rng), random_tensor({2, 4, 2}, rng)}) < tol);
    CHECK(max_fd_error([](const std::vector<Var>& v) { return matmul(v[0], v[1]); },
                       {random_tensor({2, 3, 4}, rng), random_tensor({4, 2}, rng)}) < tol);
    CHECK(max_fd_error([](const std::vector<Var>& v) { return transpose_last2(v[0]); },
                       {random_tensor({2, 3, 4}, rng)}) < tol);
    CHECK(max_fd_error([](const std::vector<Var>& v) { return reshape(v[0], {6, 2}); },
                       {random_tensor({3, 4}, rng)}) < tol);
    CHECK(max_fd_error([](const std::vector<Var>& v) { return split_heads(v[0], 2); },
                       {random_tensor({3, 8}, rng)}) < tol);
    CHECK(max_fd_error([](const std::vector<Var>& v) { return merge_heads(v[0]); },
                       {random_tensor({2, 3, 4}, rng)}) < tol);
    CHECK(max_fd_error([](const std::vector<Var>& v) { return sum_all(v[0]); },
                       {random_tensor({3, 4}, rng)}) < tol);
    CHECK(max_fd_error([](const std::vector<Var>& v) { return mean_axis(v[0], 0); },
                       {random_tensor({3, 4}, rng)}) < tol);
    CHECK(max_fd_error([](const std::vector<Var>& v) { return mean_axis(v[0], 1); },
                       {random_tensor({3, 4, 2}, rng)}) < tol);
    CHECK(max_fd_error([](const std::vector<Var>& v) { return index(v[0], 2); },
                       {random_tensor({5}, rng)}) < tol);
    CHECK(max_fd_error([](const std::vector<Var>& v) { return concat({v[0], v[1]}, 0); },
                       {random_tensor({2, 3}, rng), random_tensor({4, 3}, rng)}) < tol);
    CHECK(max_fd_error([](const std::vector<Var>& v) { return concat({v[0], v[1]}, 1); },
                       {random_tensor({2, 3}, rng), random_tensor({2, 2}, rng)}) < tol);
    CHECK(max_fd_error([](const std::vector<Var>& v) { return stack_rows({v[0], v[1]}); },
                       {random_tensor({4}, rng), random_tensor({4}, rng)}) < tol);
    CHECK(max_fd_error([](const std::vector<Var>& v) { return softmax_lastdim(v[0]); },
                       {random_tensor({3, 5}, rng)}) < tol);
    {
        Tensor pos = random_tensor({3, 4}, rng);
        for (double& x : pos.data()) x = std::abs(x) + 0.5;
        CHECK(max_fd_error([](const std::vector<Var>& v) { return log_elem(v[0]); }, {pos}) < tol);
    }
    CHECK(max_fd_error([](const std::vector<Var>& v) { return exp_elem(v[0]); },
                       {random_tensor({3, 4}, rng)}) < tol);
    {
        Tensor away = random_tensor({4, 4}, rng);
        for (double& x : away.data()) {
            if (std::abs(x) < 0.05) x += 0.2;  // keep clear of the relu kink
        }
        CHECK(max_fd_error([](const std::vector<Var>& v) { return relu(v[0]); }, {away}) < tol);
        CHECK(max_fd_error([](const std::vector<Var>& v) { return clamp_min(v[0], 0.3); }, {away}) <
              tol);
    }
    CHECK(max_fd_error(
              [](const std::vector<Var>& v) { return layer_norm(v[0], v[1], v[2]); },
              {random_tensor({3, 6}, rng), random_tensor({6}, rng), random_tensor({6}, rng)}) < tol);
    CHECK(max_fd_error(
              [](const std::vector<Var>& v) { return embedding(v[0], {2, 0, 2, 1}); },
              {random_tensor({3, 4}, rng)}) < tol);
    {
        Tensor mask({2, 3}, {0, 1, 0, 1, 0, 1});
        CHECK(max_fd_error(
                  [&](const std::vector<Var>& v) { return masked_fill(v[0], constant(mask), -5.0); },
                  {random_tensor({4, 2, 3}, rng)}) < tol);
    }
    CHECK(max_fd_error(
              [](const std::vector<Var>& v) {
                  return dropout(v[0], 0.4, RngStream(99).derive("fd_dropout"));
              },
              {random_tensor({4, 5}, rng)}) < tol);
    {
        Tensor mask({4}, {1, 1, 0, 1});
        CHECK(max_fd_error(
                  [&](const std::vector<Var>& v) { return masked_mean_rows(v[0], constant(mask)); },
                  {random_tensor({4, 3}, rng)}) < tol);
    }
    CHECK(max_fd_error(
              [](const std::vector<Var>& v) {
                  return cross_entropy_ls(v[0], {1, 3, 0}, 0.1, -1);
              },
              {random_tensor({3, 5}, rng)}) < tol);
    CHECK(max_fd_error(
              [](const std::vector<Var>& v) {
                  return cross_entropy_ls(v[0], {1, 0, 2}, 0.0, 0);  // middle row padded
              },
              {random_tensor({3, 5}, rng)}) < tol);
}

TEST_CASE("finite differences: random 3-layer composite") {
    PrecisionGuard g(Precision::f64);
    RngStream rng(314);
    auto composite = [](const std::vector<Var>& v) {
        Var h = relu(add(matmul(v[0], v[1]), v[2]));
        Var h2 = layer_norm(matmul(h, v[3]), v[4], v[5]);
        return softmax_lastdim(h2);
    };
    CHECK(max_fd_error(composite,
                       {random_tensor({3, 4}, rng), random_tensor({4, 6}, rng),
                        random_tensor({6}, rng), random_tensor({6, 5}, rng),
                        random_tensor({5}, rng), random_tensor({5}, rng)}) < 1e-5);
}

TEST_CASE("finite differences: 32-bit mode within 1e-3") {
    PrecisionGuard g(Precision::f32);
    RngStream rng(55);
    const double step = 5e-3;
    const double floor = 1e-2;  // f32 FD resolution limit for O(1)-scale losses
    CHECK(max_fd_error([](const std::vector<Var>& v) { return matmul(v[0], v[1]); },
                       {random_tensor({3, 4}, rng), random_tensor({4, 2}, rng)}, step, floor) <
          1e-3);
    CHECK(max_fd_error([](const std::vector<Var>& v) { return softmax_lastdim(v[0]); },
                       {random_tensor({2, 4}, rng)}, step, floor) < 1e-3);
    CHECK(max_fd_error(
              [](const std::vector<Var>& v) { return layer_norm(v[0], v[1], v[2]); },
              {random_tensor({2, 6}, rng), random_tensor({6}, rng), random_tensor({6}, rng)},
              step, floor) < 1e-3);
    CHECK(max_fd_error(
              [](const std::vector<Var>& v) { return cross_entropy_ls(v[0], {1, 2}, 0.1, -1); },
              {random_tensor({2, 5}, rng)}, step, floor) < 1e-3);
}

TEST_CASE("layer norm normalizes before gain/bias") {
    RngStream rng(11);
    Var x = constant(random_tensor({8, 16}, rng, 2.0));
    Var y = layer_norm(x, constant(Tensor::full({16}, 1.0)), constant(Tensor({16})));
    for (int s = 0; s < 8; ++s) {
        double mean = 0.0;
        for (int i = 0; i < 16; ++i) mean += y.value()[s * 16 + i];
        mean /= 16.0;
        double var = 0.0;
        for (int i = 0; i < 16; ++i) {
            const double c = y.value()[s * 16 + i] - mean;
            var += c * c;
        }
        var /= 16.0;
        CHECK(std::abs(mean) < 1e-5);
        CHECK(std::abs(var - 1.0) < 1e-4);
    }
}

TEST_CASE("clamp_min gradient is zero on the clamped side") {
    PrecisionGuard g(Precision::f64);
    Var p = parameter(Tensor({3}, {0.5, 0.02, 0.05}), "p");
    Var loss = sum_all(clamp_min(p, 0.05));
    backward(loss);
    auto gr = p.grad();
    CHECK(gr[0] == doctest::Approx(1.0));
    CHECK(gr[1] == 0.0);
    CHECK(gr[2] == 0.0);  // exactly at the floor counts as clamped
}

TEST_CASE("dropout semantics") {
    RngStream rng(21);
    Tensor x = random_tensor({64, 8}, rng);
    Var y = dropout(constant(x), 0.5, RngStream(3).derive("drop"));
    int kept = 0;
    for (int i = 0; i < y.numel(); ++i) {
        if (y.value()[i] != 0.0) {
            ++kept;
            CHECK(y.value()[i] == doctest::Approx(x[i] * 2.0));
        }
    }
    CHECK(kept > 180);
    CHECK(kept < 350);
    // p = 0 is identity.
    Var z = constant(x);
    CHECK(dropout(z, 0.0, RngStream(3)).node() == z.node());
    CHECK_THROWS_AS(dropout(z, 1.0, RngStream(3)), Error);
}

TEST_CASE("determinism: identical seeds give bit-identical forwards") {
    auto run = [](uint64_t seed) {
        RngStream init(seed);
        Tensor x = random_tensor({6, 8}, init);
        Var h = dropout(constant(x), 0.3, RngStream(seed).derive("d1"));
        Var y = softmax_lastdim(matmul(h, constant(random_tensor({8, 4}, init))));
        return y.value().data();
    };
    auto a = run(123);
    auto b = run(123);
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i] == b[i]);  // exact bit equality
    }
}

TEST_CASE("gumbel fixed point and open-interval guard") {
    // Draws land strictly inside (0, 1) so -log(-log u) can never be NaN.
    RngStream rng(77);
    for (int i = 0; i < 10000; ++i) {
        const double u = rng.next_unit_open();
        CHECK(u > 0.0);
        CHECK(u < 1.0);
    }
    const double g = -std::log(-std::log(1.0 / std::exp(1.0)));
    CHECK(g == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("f32 mode rounds stored values to float grid") {
    PrecisionGuard g(Precision::f32);
    Var x = constant(Tensor({1}, {0.1}));
    CHECK(x.value()[0] == static_cast<double>(static_cast<float>(0.1)));
    PrecisionGuard g2(Precision::f64);
    Var y = constant(Tensor({1}, {0.1}));
    CHECK(y.value()[0] == 0.1);
}

TEST_SUITE_END();
