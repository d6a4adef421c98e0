#include <doctest.h>

#include <cmath>

#include "fd_check.hpp"
#include "forge/autodiff.hpp"
#include "forge/rng.hpp"

using namespace forge;
using namespace forge::ad;

namespace {

// Finite-difference check of a random linear functional of op(x). The probe
// keeps the objective sensitive for ops whose plain sum is invariant
// (softmax, normalization).
void check_unary(const std::function<Var(const Var&)>& op, Tensor x, double tol = 2e-6) {
    Tensor probe;
    auto loss = [&](const Var& v) {
        Var y = op(v);
        if (probe.empty()) {
            Rng prng(99);
            probe = prng.normal_tensor(y.val().dims());
        }
        return sum_all(mul(y, constant(probe)));
    };
    Var vx = leaf(x);
    Var y = loss(vx);
    backward(y);
    for (int64_t i = 0; i < x.numel(); ++i) {
        auto f = [&]() { return loss(leaf(x, false)).item(); };
        double fd = testutil::fd_grad(x, i, f, 1e-5);
        CHECK(testutil::rel_err(vx.grad()[i], fd, 1e-8) < tol);
    }
}

Tensor rand_tensor(Rng& rng, std::vector<int64_t> dims, double scale = 1.0) {
    return rng.normal_tensor(std::move(dims), scale);
}

}  // namespace

TEST_CASE("elementwise op gradients match finite differences") {
    Rng rng(42);
    Tensor x = rand_tensor(rng, {3, 4});
    check_unary([](const Var& v) { return silu(v); }, x);
    check_unary([](const Var& v) { return sigmoid(v); }, x);
    check_unary([](const Var& v) { return softplus(v); }, x);
    check_unary([](const Var& v) { return square(v); }, x);
    check_unary([](const Var& v) { return exp(v); }, x);
    check_unary([](const Var& v) { return scale(add_scalar(v, 0.5), -1.7); }, x);

    Tensor pos = rand_tensor(rng, {3, 4});
    for (int64_t i = 0; i < pos.numel(); ++i) pos[i] = std::abs(pos[i]) + 0.5;
    check_unary([](const Var& v) { return log(v); }, pos);
    check_unary([](const Var& v) { return recip(v); }, pos);
}

TEST_CASE("binary op gradients match finite differences") {
    Rng rng(7);
    Tensor a = rand_tensor(rng, {4, 3});
    Tensor b = rand_tensor(rng, {4, 3});

    auto run = [&](bool wrt_a, const std::function<Var(const Var&, const Var&)>& op) {
        Var va = leaf(a), vb = leaf(b);
        Var y = sum_all(op(va, vb));
        backward(y);
        Tensor& target = wrt_a ? a : b;
        const Tensor& g = wrt_a ? va.grad() : vb.grad();
        for (int64_t i = 0; i < target.numel(); ++i) {
            auto f = [&]() {
                return sum_all(op(leaf(a, false), leaf(b, false))).item();
            };
            double fd = testutil::fd_grad(target, i, f, 1e-5);
            CHECK(testutil::rel_err(g[i], fd, 1e-8) < 2e-6);
        }
    };
    run(true, [](const Var& x, const Var& y) { return mul(x, y); });
    run(false, [](const Var& x, const Var& y) { return mul(x, y); });
    run(true, [](const Var& x, const Var& y) { return sub(x, y); });
    run(false, [](const Var& x, const Var& y) { return sub(x, y); });
}

TEST_CASE("matmul gradients in all transpose modes") {
    Rng rng(3);
    for (bool ta : {false, true})
        for (bool tb : {false, true}) {
            Tensor a = ta ? rand_tensor(rng, {5, 3}) : rand_tensor(rng, {3, 5});
            Tensor b = tb ? rand_tensor(rng, {4, 5}) : rand_tensor(rng, {5, 4});
            Var va = leaf(a), vb = leaf(b);
            Var y = sum_all(square(matmul(va, vb, ta, tb)));
            backward(y);
            auto f = [&]() {
                return sum_all(square(matmul(leaf(a, false), leaf(b, false), ta, tb))).item();
            };
            for (int64_t i = 0; i < a.numel(); ++i)
                CHECK(testutil::rel_err(va.grad()[i], testutil::fd_grad(a, i, f, 1e-5), 1e-8) < 1e-5);
            for (int64_t i = 0; i < b.numel(); ++i)
                CHECK(testutil::rel_err(vb.grad()[i], testutil::fd_grad(b, i, f, 1e-5), 1e-8) < 1e-5);
        }
}

TEST_CASE("row-structured op gradients") {
    Rng rng(11);
    Tensor x = rand_tensor(rng, {4, 6});
    check_unary([](const Var& v) { return softmax_rows(v); }, x, 1e-5);
    check_unary([](const Var& v) { return logsumexp_rows(v); }, x, 1e-5);
    
    check_unary([](const Var& v) { return layer_norm_rows(v); }, x, 1e-4);
    check_unary([](const Var& v) { return l2_normalize_rows(v); }, x, 1e-4);
    check_unary([](const Var& v) { return square(transpose2d(v)); }, x);
    check_unary([](const Var& v) { return square(slice_cols(v, 1, 3)); }, x);
    check_unary([](const Var& v) { return square(slice_rows(v, 1, 2)); }, x);
    check_unary([](const Var& v) { return square(repeat_rows(v, 3)); }, x);

    Tensor sq = rand_tensor(rng, {5, 5});
    check_unary([](const Var& v) { return square(take_diag(v)); }, sq);

    Tensor vec = rand_tensor(rng, {6});
    Var vx = leaf(x), vv = leaf(vec);
    Var y = sum_all(square(add_rowvec(mul_rowvec(vx, vv), vv)));
    backward(y);
    auto f = [&]() {
        Var a = leaf(x, false), b = leaf(vec, false);
        return sum_all(square(add_rowvec(mul_rowvec(a, b), b))).item();
    };
    for (int64_t i = 0; i < vec.numel(); ++i)
        CHECK(testutil::rel_err(vv.grad()[i], testutil::fd_grad(vec, i, f, 1e-5), 1e-8) < 1e-5);
    for (int64_t i = 0; i < x.numel(); ++i)
        CHECK(testutil::rel_err(vx.grad()[i], testutil::fd_grad(x, i, f, 1e-5), 1e-8) < 1e-5);
}

TEST_CASE("concat and scale_by_var gradients") {
    Rng rng(13);
    Tensor a = rand_tensor(rng, {2, 3});
    Tensor b = rand_tensor(rng, {4, 3});
    Tensor s = Tensor::scalar(0.7);
    Var va = leaf(a), vb = leaf(b), vs = leaf(s);
    Var y = sum_all(square(scale_by_var(concat_axis0({va, vb}), vs)));
    backward(y);
    auto f = [&]() {
        return sum_all(square(scale_by_var(concat_axis0({leaf(a, false), leaf(b, false)}),
                                           leaf(s, false))))
            .item();
    };
    for (int64_t i = 0; i < a.numel(); ++i)
        CHECK(testutil::rel_err(va.grad()[i], testutil::fd_grad(a, i, f, 1e-5), 1e-8) < 1e-5);
    for (int64_t i = 0; i < b.numel(); ++i)
        CHECK(testutil::rel_err(vb.grad()[i], testutil::fd_grad(b, i, f, 1e-5), 1e-8) < 1e-5);
    CHECK(testutil::rel_err(vs.grad()[0], testutil::fd_grad(s, 0, f, 1e-5), 1e-8) < 1e-5);
}

TEST_CASE("conv3d matches direct convolution and its gradients check out") {
    Rng rng(17);
    Tensor x = rand_tensor(rng, {2, 6, 5, 5});
    Tensor w = rand_tensor(rng, {3, 2, 3, 3, 3}, 0.5);
    Tensor b = rand_tensor(rng, {3}, 0.1);
    Conv3dSpec spec{{3, 3, 3}, {1, 2, 2}, {1, 1, 1}};

    Var vx = leaf(x), vw = leaf(w), vbias = leaf(b);
    Var out = conv3d(vx, vw, vbias, spec);

    // Direct convolution reference.
    auto dims = conv3d_out_dims({6, 5, 5}, spec);
    for (int64_t co = 0; co < 3; ++co)
        for (int64_t to = 0; to < dims[0]; ++to)
            for (int64_t ho = 0; ho < dims[1]; ++ho)
                for (int64_t wo = 0; wo < dims[2]; ++wo) {
                    double acc = b[co];
                    for (int64_t ci = 0; ci < 2; ++ci)
                        for (int64_t dt = 0; dt < 3; ++dt)
                            for (int64_t dh = 0; dh < 3; ++dh)
                                for (int64_t dw = 0; dw < 3; ++dw) {
                                    int64_t t = to * 1 - 1 + dt;
                                    int64_t h = ho * 2 - 1 + dh;
                                    int64_t wi = wo * 2 - 1 + dw;
                                    if (t < 0 || t >= 6 || h < 0 || h >= 5 || wi < 0 || wi >= 5)
                                        continue;
                                    acc += x.at(ci, t, h, wi) * w[(((co * 2 + ci) * 3 + dt) * 3 + dh) * 3 + dw];
                                }
                    CHECK(out.val().at(co, to, ho, wo) == doctest::Approx(acc).epsilon(1e-12));
                }

    Var y = sum_all(square(out));
    backward(y);
    auto f = [&]() {
        return sum_all(square(conv3d(leaf(x, false), leaf(w, false), leaf(b, false), spec))).item();
    };
    Rng pick(5);
    for (int k = 0; k < 12; ++k) {
        int64_t i = pick.integer(0, x.numel() - 1);
        CHECK(testutil::rel_err(vx.grad()[i], testutil::fd_grad(x, i, f, 1e-5), 1e-8) < 1e-5);
        int64_t j = pick.integer(0, w.numel() - 1);
        CHECK(testutil::rel_err(vw.grad()[j], testutil::fd_grad(w, j, f, 1e-5), 1e-8) < 1e-5);
    }
    for (int64_t j = 0; j < 3; ++j)
        CHECK(testutil::rel_err(vbias.grad()[j], testutil::fd_grad(b, j, f, 1e-5), 1e-8) < 1e-5);
}

TEST_CASE("max pool and global average pool gradients") {
    Rng rng(19);
    Tensor x = rand_tensor(rng, {2, 4, 6, 6});
    Conv3dSpec spec{{1, 3, 3}, {1, 2, 2}, {0, 1, 1}};
    Var vx = leaf(x);
    Var y = sum_all(square(max_pool3d(vx, spec)));
    backward(y);
    auto f = [&]() { return sum_all(square(max_pool3d(leaf(x, false), spec))).item(); };
    Rng pick(23);
    for (int k = 0; k < 20; ++k) {
        int64_t i = pick.integer(0, x.numel() - 1);
        CHECK(testutil::rel_err(vx.grad()[i], testutil::fd_grad(x, i, f, 1e-6), 1e-8) < 1e-4);
    }

    check_unary([](const Var& v) { return square(global_avg_pool(v)); }, x);
}

TEST_CASE("repeated use of one variable accumulates gradient") {
    Tensor x = Tensor::from({2}, {1.5, -2.0});
    Var vx = leaf(x);
    Var y = sum_all(mul(vx, vx));  // d/dx sum(x^2) = 2x
    backward(y);
    CHECK(vx.grad()[0] == doctest::Approx(3.0));
    CHECK(vx.grad()[1] == doctest::Approx(-4.0));
}

TEST_CASE("constants receive no gradient and prune the graph") {
    Tensor x = Tensor::from({2}, {1.0, 2.0});
    Var c = constant(x);
    Var l = leaf(x);
    Var y = sum_all(mul(c, l));
    backward(y);
    CHECK(l.grad()[0] == doctest::Approx(1.0));
    CHECK(c.grad().empty());
}
