#include <doctest.h>

#include <cmath>

#include "fd_check.hpp"
#include "forge/sfcavp.hpp"

using namespace forge;
using namespace forge::cavp;

namespace {

SlowFastConfig tiny_cfg() {
    SlowFastConfig c;
    c.alpha = 2;
    c.beta = 2;
    c.base_channels = 4;
    c.stage_channels = {8};
    c.stage_depths = {1};
    c.t_video = 4;
    c.height = 8;
    c.width = 8;
    c.t_audio = 8;
    c.n_mels = 8;
    return c;
}

// Brute-force softmax cross-entropy oracle, written independently of the
// autodiff path.
double infonce_oracle(const Tensor& a, const Tensor& v, double tau) {
    int64_t n = a.dim(0), d = a.dim(1);
    double total = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        double pos = 0.0;
        for (int64_t k = 0; k < d; ++k) pos += a.at(i, k) * v.at(i, k);
        pos /= tau;
        double denom = 0.0;
        for (int64_t j = 0; j < n; ++j) {
            double dot = 0.0;
            for (int64_t k = 0; k < d; ++k) dot += a.at(i, k) * v.at(j, k);
            denom += std::exp(dot / tau);
        }
        total += -(pos - std::log(denom));
    }
    return total / static_cast<double>(n);
}

}  // namespace

TEST_CASE("embedding length is the sum of pooled stream widths") {
    SlowFastConfig toy;  // defaults: stages {32,64,128}, beta 8
    CHECK(toy.embed_dim() == 144);

    SlowFastConfig full = SlowFastConfig::full_size();
    CHECK(full.embed_dim() == 2304);
    CHECK(full.embed_dim() == 2048 + 256);
}

TEST_CASE("tiny encoder is deterministic and validates input shapes") {
    SlowFastConfig cfg = tiny_cfg();
    nn::ParamStore params = init_params(cfg, 7);
    Rng rng(3);
    Tensor vid = rng.normal_tensor({cfg.t_video, cfg.height, cfg.width});

    Tensor e1 = encode_segment_value(params, vid, Modality::video, cfg);
    Tensor e2 = encode_segment_value(params, vid, Modality::video, cfg);
    REQUIRE(e1.numel() == cfg.embed_dim());
    for (int64_t i = 0; i < e1.numel(); ++i) CHECK(e1[i] == e2[i]);

    // Unit norm after the normalization stage.
    double norm = 0.0;
    for (int64_t i = 0; i < e1.numel(); ++i) norm += e1[i] * e1[i];
    CHECK(std::abs(std::sqrt(norm) - 1.0) < 1e-6);

    Tensor bad = rng.normal_tensor({cfg.t_video, cfg.height, cfg.width + 1});
    CHECK_THROWS_AS(encode_segment_value(params, bad, Modality::video, cfg), ContractViolation);
}

TEST_CASE("temporal and channel ratios hold at every stage across configs") {
    struct GridPoint {
        int alpha, beta, base;
        std::vector<int> chans;
    };
    std::vector<GridPoint> grid = {
        {2, 2, 4, {8, 16}},  {4, 2, 8, {8, 16}},   {2, 4, 16, {16, 32}},
        {4, 4, 16, {16}},    {2, 8, 32, {32, 64}}, {4, 8, 32, {32, 64, 128}},
        {8, 2, 8, {8}},      {4, 8, 64, {64, 128}}, {2, 2, 8, {16, 32, 64}},
        {4, 4, 32, {32, 64}},
    };
    for (const auto& g : grid) {
        SlowFastConfig cfg;
        cfg.alpha = g.alpha;
        cfg.beta = g.beta;
        cfg.base_channels = g.base;
        cfg.stage_channels = g.chans;
        cfg.stage_depths.assign(g.chans.size(), 1);
        cfg.t_video = 2 * g.alpha;
        cfg.height = cfg.width = 16;
        cfg.t_audio = 4 * g.alpha;
        cfg.n_mels = 16;
        nn::ParamStore params = init_params(cfg, 11);
        Rng rng(5);
        for (Modality m : {Modality::video, Modality::audio}) {
            StageTrace trace;
            Tensor in = m == Modality::video
                            ? rng.normal_tensor({cfg.t_video, cfg.height, cfg.width})
                            : rng.normal_tensor({cfg.t_audio, cfg.n_mels});
            Tensor e = encode_segment_value(params, in, m, cfg, &trace);
            CHECK(e.numel() == cfg.embed_dim());
            REQUIRE(trace.size() == g.chans.size() + 1);
            for (const auto& st : trace) {
                CHECK(st.slow_t * g.alpha == st.fast_t);
                CHECK(st.fast_channels * g.beta == st.slow_channels);
            }
        }
    }
}

TEST_CASE("single-pair InfoNCE loss is exactly zero") {
    Tensor a = Tensor::from({1, 3}, {0.6, 0.8, 0.0});
    Tensor v = Tensor::from({1, 3}, {0.0, 0.6, 0.8});
    CHECK(infonce_directional(a, v, 0.1) == 0.0);
}

TEST_CASE("uniform similarities give ln(N)") {
    // All embeddings identical: every dot product equal.
    int64_t n = 6, d = 4;
    Tensor a({n, d}), v({n, d});
    for (int64_t i = 0; i < n; ++i) {
        a.at(i, 0) = 1.0;
        v.at(i, 0) = 1.0;
    }
    CHECK(infonce_directional(a, v, 0.5) == doctest::Approx(std::log(6.0)).epsilon(1e-12));
}

TEST_CASE("identity similarity matrix at tau=1 gives ln(1+e^-1)") {
    Tensor a = Tensor::from({2, 2}, {1.0, 0.0, 0.0, 1.0});
    Tensor v = Tensor::from({2, 2}, {1.0, 0.0, 0.0, 1.0});
    double expected = std::log(1.0 + std::exp(-1.0));  // 0.31326168751822286
    CHECK(infonce_directional(a, v, 1.0) == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("InfoNCE and symmetric loss match the brute-force oracle") {
    Rng rng(21);
    for (int trial = 0; trial < 20; ++trial) {
        int64_t n = rng.integer(1, 8), d = rng.integer(2, 6);
        Tensor a = rng.normal_tensor({n, d});
        Tensor v = rng.normal_tensor({n, d});
        double tau = rng.uniform(0.05, 1.0);
        CHECK(std::abs(infonce_directional(a, v, tau) - infonce_oracle(a, v, tau)) < 1e-9);
        double sym = cavp_loss(a, v, tau);
        CHECK(std::abs(sym - 0.5 * (infonce_oracle(a, v, tau) + infonce_oracle(v, a, tau))) < 1e-9);
        // Definition is symmetric under swapping modalities.
        CHECK(std::abs(sym - cavp_loss(v, a, tau)) < 1e-12);
        CHECK(sym >= 0.0);
    }
}

TEST_CASE("composite loss equals the mean of the two directional calls") {
    Rng rng(33);
    Tensor a = rng.normal_tensor({5, 4});
    Tensor v = rng.normal_tensor({5, 4});
    double s = cavp_loss(a, v, 0.3);
    double m = 0.5 * (infonce_directional(a, v, 0.3) + infonce_directional(v, a, 0.3));
    CHECK(std::abs(s - m) < 1e-12);
}

TEST_CASE("invalid InfoNCE inputs are rejected") {
    Tensor a = Tensor::from({1, 2}, {1.0, 0.0});
    CHECK_THROWS_AS(infonce_directional(a, a, 0.0), ContractViolation);
    CHECK_THROWS_AS(infonce_directional(a, a, -1.0), ContractViolation);
    Tensor empty({0, 2});
    CHECK_THROWS_AS(infonce_directional(empty, empty, 0.5), ContractViolation);
}

TEST_CASE("identical batch permutation leaves the loss unchanged") {
    Rng rng(44);
    int64_t n = 7, d = 5;
    Tensor a = rng.normal_tensor({n, d});
    Tensor v = rng.normal_tensor({n, d});
    double base = cavp_loss(a, v, 0.2);

    std::vector<int64_t> perm = {3, 0, 6, 2, 5, 1, 4};
    Tensor ap({n, d}), vp({n, d});
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < d; ++j) {
            ap.at(i, j) = a.at(perm[static_cast<size_t>(i)], j);
            vp.at(i, j) = v.at(perm[static_cast<size_t>(i)], j);
        }
    CHECK(std::abs(cavp_loss(ap, vp, 0.2) - base) < 1e-12);
}

TEST_CASE("cosine similarity basics and oracle") {
    Rng rng(9);
    Tensor x = rng.normal_tensor({12});
    CHECK(cosine_similarity(x, x) == doctest::Approx(1.0).epsilon(1e-12));
    Tensor nx = x;
    nx.scale_(-1.0);
    CHECK(cosine_similarity(x, nx) == doctest::Approx(-1.0).epsilon(1e-12));

    Tensor y = rng.normal_tensor({12});
    double dot = 0.0, nx2 = 0.0, ny2 = 0.0;
    for (int64_t i = 0; i < 12; ++i) {
        dot += x[i] * y[i];
        nx2 += x[i] * x[i];
        ny2 += y[i] * y[i];
    }
    CHECK(std::abs(cosine_similarity(x, y) - dot / std::sqrt(nx2 * ny2)) < 1e-9);

    Tensor zero({12});
    CHECK_THROWS_AS(cosine_similarity(x, zero), ContractViolation);
}

TEST_CASE("analytic gradient of the contrastive loss matches central differences") {
    SlowFastConfig cfg = tiny_cfg();
    nn::ParamStore store = init_params(cfg, 101);
    Rng rng(55);
    const int pairs = 3;
    std::vector<Tensor> vids, auds;
    for (int i = 0; i < pairs; ++i) {
        vids.push_back(rng.normal_tensor({cfg.t_video, cfg.height, cfg.width}));
        auds.push_back(rng.normal_tensor({cfg.t_audio, cfg.n_mels}));
    }

    auto build_loss = [&](bool frozen) {
        nn::ParamGraph g(store, frozen);
        std::vector<ad::Var> a_rows, v_rows;
        for (int i = 0; i < pairs; ++i) {
            a_rows.push_back(ad::reshape(encode_segment(g, auds[static_cast<size_t>(i)],
                                                        Modality::audio, cfg),
                                         {1, cfg.embed_dim()}));
            v_rows.push_back(ad::reshape(encode_segment(g, vids[static_cast<size_t>(i)],
                                                        Modality::video, cfg),
                                         {1, cfg.embed_dim()}));
        }
        ad::Var loss = cavp_loss(ad::concat_axis0(a_rows), ad::concat_axis0(v_rows), g("tau"));
        return std::make_pair(loss, std::move(g));
    };

    auto loss_and_grads = [&]() {
        store.zero_grads();
        auto [loss, g] = build_loss(false);
        ad::backward(loss);
        g.harvest_grads();
    };
    auto loss_only = [&]() { return build_loss(true).first.item(); };

    Rng pick(77);
    auto names = store.names();
    int checked_params = 0;
    for (int k = 0; k < 6; ++k) {
        const std::string& name =
            k == 0 ? "tau" : names[static_cast<size_t>(pick.integer(0, static_cast<int64_t>(names.size()) - 1))];
        auto& p = store.at(name);
        std::vector<int64_t> idx;
        for (int j = 0; j < 3; ++j) idx.push_back(pick.integer(0, p.value.numel() - 1));
        auto res = testutil::check_param_grads(store, name, idx, loss_and_grads, loss_only);
        INFO("param ", name, " worst rel err ", res.worst);
        CHECK(res.failed == 0);
        ++checked_params;
    }
    CHECK(checked_params >= 5);
}

TEST_CASE("zero pretraining steps leave parameters at initialization") {
    SlowFastConfig cfg = tiny_cfg();
    synth::DatasetConfig dcfg;
    dcfg.render.t_raw = 8;
    dcfg.render.height = 8;
    dcfg.render.width = 8;
    dcfg.render.t_spec = 16;
    dcfg.render.n_mels = 8;
    dcfg.segments = 2;
    dcfg.track.clip_len = 2.0;
    dcfg.track.n_classes = 4;
    dcfg.track.time_quantum = 2.0 / 8.0;
    std::vector<synth::SyntheticClip> clips;
    for (int i = 0; i < 2; ++i)
        clips.push_back(synth::render_clip(synth::gen_event_track(i, dcfg.track), dcfg.render,
                                           static_cast<uint64_t>(i), "c" + std::to_string(i)));

    PretrainHyper hyper;
    hyper.steps = 0;
    hyper.seed = 5;
    PretrainResult r = pretrain_avp(clips, dcfg.segments, cfg, hyper);
    nn::ParamStore fresh = init_params(cfg, 5);
    for (const auto& name : fresh.names()) {
        const Tensor& a = r.params.at(name).value;
        const Tensor& b = fresh.at(name).value;
        REQUIRE(a.same_shape(b));
        for (int64_t i = 0; i < a.numel(); ++i) CHECK(a[i] == b[i]);
    }
}
