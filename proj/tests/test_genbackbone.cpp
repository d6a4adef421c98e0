#include <doctest.h>

#include <Eigen/Dense>

#include <cmath>

#include "fd_check.hpp"
#include "forge/genbackbone.hpp"

using namespace forge;
using namespace forge::gen;

namespace {

BackboneConfig tiny_cfg() {
    BackboneConfig c;
    c.latent_len = 8;
    c.latent_dim = 4;
    c.cond_dim = 6;
    c.hidden = 8;
    c.heads = 2;
    c.mm_blocks = 1;
    c.sm_blocks = 1;
    c.time_embed_dim = 4;
    c.mlp_ratio = 2;
    c.t_spec = 32;
    c.n_mels = 4;
    c.segments = 4;
    return c;
}

Tensor rand_feats(Rng& rng, const BackboneConfig& cfg) {
    return rng.normal_tensor({cfg.segments, cfg.cond_dim});
}

}  // namespace

TEST_CASE("latent codec: zero in, zero out, basis orthonormal") {
    BackboneConfig cfg = tiny_cfg();
    for (const char* basis : {"dct", "random"}) {
        cfg.basis = basis;
        LatentCodec codec(cfg, 3);
        Tensor zero({cfg.t_spec, cfg.n_mels});
        Tensor lat = codec.encode(zero);
        for (int64_t i = 0; i < lat.numel(); ++i) CHECK(lat[i] == 0.0);
        Tensor rec = codec.decode(lat);
        for (int64_t i = 0; i < rec.numel(); ++i) CHECK(rec[i] == 0.0);

        const Tensor& b = codec.basis();
        for (int64_t i = 0; i < b.dim(1); ++i)
            for (int64_t j = 0; j < b.dim(1); ++j) {
                double dot = 0.0;
                for (int64_t r = 0; r < b.dim(0); ++r) dot += b.at(r, i) * b.at(r, j);
                CHECK(std::abs(dot - (i == j ? 1.0 : 0.0)) < 1e-12);
            }
    }
}

TEST_CASE("full-dimension codec reconstructs exactly") {
    BackboneConfig cfg = tiny_cfg();
    cfg.latent_dim = static_cast<int>(cfg.patch_dim());  // square orthogonal map
    for (const char* basis : {"dct", "random"}) {
        cfg.basis = basis;
        LatentCodec codec(cfg, 5);
        Rng rng(8);
        Tensor x = rng.normal_tensor({cfg.t_spec, cfg.n_mels});
        Tensor rec = codec.decode(codec.encode(x));
        for (int64_t i = 0; i < x.numel(); ++i) CHECK(rec[i] == doctest::Approx(x[i]).epsilon(1e-10));
    }
}

TEST_CASE("reconstruction error equals the least-squares projection residual") {
    BackboneConfig cfg = tiny_cfg();
    LatentCodec codec(cfg, 7);
    Rng rng(12);
    Tensor x = rng.normal_tensor({cfg.t_spec, cfg.n_mels});
    Tensor rec = codec.decode(codec.encode(x));
    double err2 = 0.0;
    for (int64_t i = 0; i < x.numel(); ++i) err2 += (x[i] - rec[i]) * (x[i] - rec[i]);

    // Independent oracle: per-patch least squares against the basis columns.
    const Tensor& b = codec.basis();
    Eigen::MatrixXd B(b.dim(0), b.dim(1));
    for (int64_t i = 0; i < b.dim(0); ++i)
        for (int64_t j = 0; j < b.dim(1); ++j) B(i, j) = b.at(i, j);
    double oracle = 0.0;
    int64_t patch_dim = cfg.patch_dim();
    for (int64_t p = 0; p < cfg.latent_len; ++p) {
        Eigen::VectorXd v(patch_dim);
        for (int64_t r = 0; r < patch_dim; ++r) v(r) = x[p * patch_dim + r];
        Eigen::VectorXd c = B.colPivHouseholderQr().solve(v);
        oracle += (v - B * c).squaredNorm();
    }
    CHECK(std::abs(err2 - oracle) < 1e-9);
}

TEST_CASE("interpolation path endpoints and velocity") {
    Rng rng(4);
    Tensor x0 = rng.normal_tensor({6, 3});
    Tensor x1 = rng.normal_tensor({6, 3});

    auto [xt0, ut0] = interpolate_path(x0, x1, 0.0);
    for (int64_t i = 0; i < x0.numel(); ++i) {
        CHECK(xt0[i] == x0[i]);
        CHECK(ut0[i] == x1[i] - x0[i]);
    }
    auto [xt1, ut1] = interpolate_path(x0, x1, 1.0);
    for (int64_t i = 0; i < x0.numel(); ++i) CHECK(xt1[i] == x1[i]);

    Tensor zero({6, 3});
    auto [xt, ut] = interpolate_path(zero, x1, 0.37);
    for (int64_t i = 0; i < x1.numel(); ++i) CHECK(ut[i] == x1[i]);

    CHECK_THROWS_AS(interpolate_path(x0, x1, -0.1), ContractViolation);
    CHECK_THROWS_AS(interpolate_path(x0, x1, 1.1), ContractViolation);
}

TEST_CASE("interpolation is affine in t: vanishing second differences") {
    Rng rng(5);
    Tensor x0 = rng.normal_tensor({4, 4});
    Tensor x1 = rng.normal_tensor({4, 4});
    const int n = 11;
    std::vector<Tensor> xs;
    for (int k = 0; k < n; ++k)
        xs.push_back(interpolate_path(x0, x1, static_cast<double>(k) / (n - 1)).first);
    for (int k = 1; k + 1 < n; ++k)
        for (int64_t i = 0; i < x0.numel(); ++i)
            CHECK(std::abs(xs[k + 1][i] - 2.0 * xs[k][i] + xs[k - 1][i]) < 1e-9);
}

TEST_CASE("velocity field is deterministic, shape-stable, and validates inputs") {
    BackboneConfig cfg = tiny_cfg();
    nn::ParamStore params = init_backbone_params(cfg, 42);
    Rng rng(6);
    Tensor feats = rand_feats(rng, cfg);
    ConditionSet cond = make_conditions(feats, 0.25, cfg);
    Tensor x = rng.normal_tensor({cfg.latent_len, cfg.latent_dim});

    Tensor v1 = velocity_forward_value(params, 0.25, cond, x, cfg);
    Tensor v2 = velocity_forward_value(params, 0.25, cond, x, cfg);
    REQUIRE(v1.dims() == std::vector<int64_t>{cfg.latent_len, cfg.latent_dim});
    for (int64_t i = 0; i < v1.numel(); ++i) CHECK(v1[i] == v2[i]);

    Tensor bad = rng.normal_tensor({cfg.latent_len + 1, cfg.latent_dim});
    CHECK_THROWS_AS(velocity_forward_value(params, 0.25, cond, bad, cfg), ContractViolation);
    ConditionSet bad_cond = cond;
    bad_cond.f_c = rng.normal_tensor({cfg.latent_len - 1, cfg.cond_dim});
    CHECK_THROWS_AS(velocity_forward_value(params, 0.25, bad_cond, x, cfg), ContractViolation);
}

TEST_CASE("mapping a permuted batch permutes the outputs identically") {
    BackboneConfig cfg = tiny_cfg();
    nn::ParamStore params = init_backbone_params(cfg, 42);
    Rng rng(61);
    Tensor feats = rand_feats(rng, cfg);
    ConditionSet cond = make_conditions(feats, 0.5, cfg);
    std::vector<Tensor> xs;
    for (int i = 0; i < 4; ++i) xs.push_back(rng.normal_tensor({cfg.latent_len, cfg.latent_dim}));

    std::vector<Tensor> outs;
    for (const auto& x : xs) outs.push_back(velocity_forward_value(params, 0.5, cond, x, cfg));
    std::vector<int> perm = {2, 0, 3, 1};
    for (int i = 0; i < 4; ++i) {
        Tensor o = velocity_forward_value(params, 0.5, cond, xs[static_cast<size_t>(perm[i])], cfg);
        for (int64_t k = 0; k < o.numel(); ++k)
            CHECK(o[k] == outs[static_cast<size_t>(perm[i])][k]);
    }
}

TEST_CASE("flow-matching loss identities and oracle") {
    Rng rng(71);
    Tensor u = rng.normal_tensor({5, 3});

    // A prediction equal to the target velocity gives exactly zero.
    CHECK(flow_mse(ad::constant(u), u).item() == 0.0);

    // A constant offset c gives mean-per-element ||c||^2.
    Tensor off = u;
    for (int64_t i = 0; i < off.numel(); ++i) off[i] += 0.7;
    CHECK(flow_mse(ad::constant(off), u).item() == doctest::Approx(0.49).epsilon(1e-12));

    // Random prediction matches an element-wise oracle.
    Tensor v = rng.normal_tensor({5, 3});
    double oracle = 0.0;
    for (int64_t i = 0; i < v.numel(); ++i) oracle += (v[i] - u[i]) * (v[i] - u[i]);
    oracle /= static_cast<double>(v.numel());
    CHECK(std::abs(flow_mse(ad::constant(v), u).item() - oracle) < 1e-9);
}

TEST_CASE("full-batch flow loss matches a brute-force oracle") {
    BackboneConfig cfg = tiny_cfg();
    nn::ParamStore params = init_backbone_params(cfg, 9);
    Rng rng(81);
    Tensor feats = rand_feats(rng, cfg);
    std::vector<FlowItem> batch;
    for (int i = 0; i < 3; ++i) {
        FlowItem it;
        it.x0 = rng.normal_tensor({cfg.latent_len, cfg.latent_dim});
        it.x1 = rng.normal_tensor({cfg.latent_len, cfg.latent_dim});
        it.t = rng.uniform();
        it.seg_feats = &feats;
        batch.push_back(std::move(it));
    }
    double loss = cfm_loss_value(params, batch, cfg);
    double oracle = 0.0;
    for (const auto& it : batch) {
        auto [xt, ut] = interpolate_path(it.x0, it.x1, it.t);
        ConditionSet cond = make_conditions(feats, it.t, cfg);
        Tensor v = velocity_forward_value(params, it.t, cond, xt, cfg);
        double mse = 0.0;
        for (int64_t k = 0; k < v.numel(); ++k) mse += (v[k] - ut[k]) * (v[k] - ut[k]);
        oracle += mse / static_cast<double>(v.numel());
    }
    oracle /= static_cast<double>(batch.size());
    CHECK(std::abs(loss - oracle) < 1e-9);
}

TEST_CASE("Euler integration is exact for constant fields") {
    Rng rng(91);
    Tensor x0 = rng.normal_tensor({4, 2});
    Tensor c = rng.normal_tensor({4, 2});
    for (int steps : {1, 3, 25}) {
        Tensor out = euler_integrate([&](double, const Tensor&) { return c; }, x0, steps);
        for (int64_t i = 0; i < x0.numel(); ++i)
            CHECK(out[i] == doctest::Approx(x0[i] + c[i]).epsilon(1e-12));
    }
}

TEST_CASE("Euler error halves when steps double on the linear field v=-x") {
    Rng rng(92);
    Tensor x0 = rng.normal_tensor({6});
    auto field = [](double, const Tensor& x) {
        Tensor v = x;
        v.scale_(-1.0);
        return v;
    };
    // Analytic solution at t=1 is e^-1 x0.
    auto err_at = [&](int steps) {
        Tensor out = euler_integrate(field, x0, steps);
        double e = 0.0;
        for (int64_t i = 0; i < x0.numel(); ++i) {
            double d = out[i] - std::exp(-1.0) * x0[i];
            e += d * d;
        }
        return std::sqrt(e);
    };
    double prev = err_at(16);
    for (int steps : {32, 64, 128}) {
        double cur = err_at(steps);
        double ratio = prev / cur;
        CHECK(ratio > 2.0 * 0.8);
        CHECK(ratio < 2.0 * 1.2);
        prev = cur;
    }
}

TEST_CASE("sampling is bit-deterministic in (params, conditions, seed, steps)") {
    BackboneConfig cfg = tiny_cfg();
    nn::ParamStore params = init_backbone_params(cfg, 33);
    Rng rng(44);
    Tensor feats = rand_feats(rng, cfg);
    Tensor a = sample(params, feats, 5, 1234, cfg);
    Tensor b = sample(params, feats, 5, 1234, cfg);
    for (int64_t i = 0; i < a.numel(); ++i) CHECK(a[i] == b[i]);
    Tensor c = sample(params, feats, 5, 1235, cfg);
    bool any_diff = false;
    for (int64_t i = 0; i < a.numel(); ++i) any_diff = any_diff || a[i] != c[i];
    CHECK(any_diff);
}

TEST_CASE("analytic gradient of the flow loss matches central differences") {
    BackboneConfig cfg = tiny_cfg();
    nn::ParamStore store = init_backbone_params(cfg, 55);
    Rng rng(56);
    Tensor feats = rand_feats(rng, cfg);
    std::vector<FlowItem> batch;
    for (int i = 0; i < 2; ++i) {
        FlowItem it;
        it.x0 = rng.normal_tensor({cfg.latent_len, cfg.latent_dim});
        it.x1 = rng.normal_tensor({cfg.latent_len, cfg.latent_dim});
        it.t = rng.uniform();
        it.seg_feats = &feats;
        batch.push_back(std::move(it));
    }

    auto loss_and_grads = [&]() {
        store.zero_grads();
        nn::ParamGraph p(store, false);
        ad::backward(cfm_loss(p, batch, cfg));
        p.harvest_grads();
    };
    auto loss_only = [&]() { return cfm_loss_value(store, batch, cfg); };

    Rng pick(57);
    auto names = store.names();
    for (int k = 0; k < 6; ++k) {
        const std::string& name =
            names[static_cast<size_t>(pick.integer(0, static_cast<int64_t>(names.size()) - 1))];
        auto& p = store.at(name);
        std::vector<int64_t> idx;
        for (int j = 0; j < 3; ++j) idx.push_back(pick.integer(0, p.value.numel() - 1));
        auto res = testutil::check_param_grads(store, name, idx, loss_and_grads, loss_only);
        INFO("param ", name, " worst rel err ", res.worst);
        CHECK(res.failed == 0);
    }
}

TEST_CASE("zero training steps leave backbone parameters at initialization") {
    BackboneConfig cfg = tiny_cfg();
    Rng rng(58);
    std::vector<ClipData> data(2);
    for (int i = 0; i < 2; ++i) {
        data[static_cast<size_t>(i)].clip_id = "c" + std::to_string(i);
        data[static_cast<size_t>(i)].latent = rng.normal_tensor({cfg.latent_len, cfg.latent_dim});
        data[static_cast<size_t>(i)].seg_feats = rand_feats(rng, cfg);
    }
    TrainBaseHyper hy;
    hy.steps = 0;
    hy.seed = 77;
    TrainBaseResult r = train_base(data, cfg, hy);
    nn::ParamStore fresh = init_backbone_params(cfg, 77);
    for (const auto& name : fresh.names()) {
        const Tensor& a = r.params.at(name).value;
        const Tensor& b = fresh.at(name).value;
        for (int64_t i = 0; i < a.numel(); ++i) CHECK(a[i] == b[i]);
    }
}

TEST_CASE("short training runs reduce the flow loss across seeds") {
    BackboneConfig cfg = tiny_cfg();
    Rng rng(59);
    std::vector<ClipData> data(4);
    for (int i = 0; i < 4; ++i) {
        data[static_cast<size_t>(i)].clip_id = "c" + std::to_string(i);
        data[static_cast<size_t>(i)].latent = rng.normal_tensor({cfg.latent_len, cfg.latent_dim});
        data[static_cast<size_t>(i)].seg_feats = rand_feats(rng, cfg);
    }
    int improved = 0;
    for (uint64_t seed : {3ull, 4ull, 5ull}) {
        TrainBaseHyper hy;
        hy.steps = 60;
        hy.batch_clips = 4;
        hy.lr = 1e-3;
        hy.seed = seed;
        TrainBaseResult r = train_base(data, cfg, hy);
        double head = (r.loss_history[0] + r.loss_history[1] + r.loss_history[2]) / 3.0;
        double tail = (r.loss_history[57] + r.loss_history[58] + r.loss_history[59]) / 3.0;
        if (tail < head) ++improved;
    }
    CHECK(improved >= 2);
}

TEST_CASE("default sampler step count") { CHECK(kDefaultSampleSteps == 25); }
