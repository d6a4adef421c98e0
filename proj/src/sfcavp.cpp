#include "forge/sfcavp.hpp"

#include <cmath>

#include "forge/parallel.hpp"

namespace forge::cavp {

using ad::Var;
using nn::ParamGraph;
using nn::ParamStore;

void SlowFastConfig::validate() const {
    if (alpha < 2) throw ConfigError("encoder: alpha must be >= 2");
    if (beta < 2) throw ConfigError("encoder: beta must be >= 2");
    if (base_channels < beta || base_channels % beta != 0)
        throw ConfigError("encoder: base_channels must be a positive multiple of beta");
    if (stage_channels.empty() || stage_channels.size() != stage_depths.size())
        throw ConfigError("encoder: stage_channels and stage_depths must be non-empty and equal length");
    for (size_t i = 0; i < stage_channels.size(); ++i) {
        if (stage_channels[i] % (4 * beta) != 0)
            throw ConfigError("encoder: stage_channels[" + std::to_string(i) +
                              "] must be divisible by 4*beta for exact fast/slow width ratios");
        if (stage_depths[i] < 1) throw ConfigError("encoder: stage_depths must be >= 1");
    }
    if (t_video < alpha || t_video % alpha != 0)
        throw ConfigError("encoder: t_video must be a positive multiple of alpha");
    if (t_audio < alpha || t_audio % alpha != 0)
        throw ConfigError("encoder: t_audio must be a positive multiple of alpha");
    if (height < 1 || width < 1 || n_mels < 1)
        throw ConfigError("encoder: spatial/frequency sizes must be >= 1");
    if (tau_init < kTauMin || tau_init > kTauMax)
        throw ConfigError("encoder: tau_init outside clamp range");
}

SlowFastConfig SlowFastConfig::full_size() {
    SlowFastConfig c;
    c.alpha = 4;
    c.beta = 8;
    c.base_channels = 64;
    c.stage_channels = {256, 512, 1024, 2048};
    c.stage_depths = {3, 4, 6, 3};
    c.t_video = 32;
    c.height = 32;
    c.width = 32;
    c.t_audio = 128;
    c.n_mels = 32;
    return c;
}

namespace {

const char* mod_prefix(Modality m) { return m == Modality::video ? "video" : "audio"; }

// Slow stages use degenerate temporal kernels in the earlier half of the
// network and size-3 kernels afterwards; fast stages are always size 3.
int slow_temporal_kernel(int stage, int n_stages) { return stage >= n_stages / 2 ? 3 : 1; }

struct Geometry {
    // kernels/strides/pads expressed over (T, H, W); audio maps (T, F) to
    // (T, F, 1) so frequency plays the role of H.
    ad::Conv3dSpec stem_slow, stem_fast, pool;
    bool spatial_w;  // video convolves over W as well
};

Geometry geometry(Modality m) {
    Geometry g;
    if (m == Modality::video) {
        g.stem_slow = {{1, 7, 7}, {1, 2, 2}, {0, 3, 3}};
        g.stem_fast = {{5, 7, 7}, {1, 2, 2}, {2, 3, 3}};
        g.pool = {{1, 3, 3}, {1, 2, 2}, {0, 1, 1}};
        g.spatial_w = true;
    } else {
        g.stem_slow = {{1, 7, 1}, {1, 2, 1}, {0, 3, 0}};
        g.stem_fast = {{5, 7, 1}, {1, 2, 1}, {2, 3, 0}};
        g.pool = {{1, 3, 1}, {1, 2, 1}, {0, 1, 0}};
        g.spatial_w = false;
    }
    return g;
}

ad::Conv3dSpec block_mid_spec(bool spatial_w, int64_t stride) {
    if (spatial_w) return {{1, 3, 3}, {1, stride, stride}, {0, 1, 1}};
    return {{1, 3, 1}, {1, stride, 1}, {0, 1, 0}};
}

ad::Conv3dSpec pointwise_spec(int64_t kt, int64_t stride_hw = 1, bool spatial_w = true) {
    return {{kt, 1, 1},
            {1, stride_hw, spatial_w ? stride_hw : 1},
            {kt / 2, 0, 0}};
}

void add_conv(ParamStore& store, Rng& rng, const std::string& name, int64_t cout, int64_t cin,
              const std::array<int64_t, 3>& k) {
    int64_t fan_in = cin * k[0] * k[1] * k[2];
    store.add(name + ".w", nn::he_init(rng, {cout, cin, k[0], k[1], k[2]}, fan_in));
    store.add(name + ".b", Tensor::zeros({cout}));
}

Var conv(ParamGraph& p, const std::string& name, const Var& x, const ad::Conv3dSpec& spec) {
    return ad::conv3d(x, p(name + ".w"), p(name + ".b"), spec);
}

// Bottleneck residual block: kt x 1 reduce, spatial 3 conv, 1x1 expand.
Var bottleneck(ParamGraph& p, const std::string& name, const Var& x, int64_t kt, int64_t stride,
               bool spatial_w, bool project) {
    Var h = ad::silu(conv(p, name + ".c1", x, pointwise_spec(kt, 1, spatial_w)));
    h = ad::silu(conv(p, name + ".c2", h, block_mid_spec(spatial_w, stride)));
    h = conv(p, name + ".c3", h, pointwise_spec(1, 1, spatial_w));
    Var skip = project ? conv(p, name + ".skip", x, pointwise_spec(1, stride, spatial_w)) : x;
    return ad::silu(ad::add(h, skip));
}

void add_bottleneck(ParamStore& store, Rng& rng, const std::string& name, int64_t cin,
                    int64_t cout, int64_t kt, bool spatial_w, bool project) {
    int64_t inner = cout / 4;
    add_conv(store, rng, name + ".c1", inner, cin, {kt, 1, 1});
    add_conv(store, rng, name + ".c2", inner, inner, {1, 3, spatial_w ? 3 : 1});
    add_conv(store, rng, name + ".c3", cout, inner, {1, 1, 1});
    if (project) add_conv(store, rng, name + ".skip", cout, cin, {1, 1, 1});
}

Tensor to_chw(const Tensor& input, Modality m, const SlowFastConfig& cfg) {
    if (m == Modality::video) {
        require_shape(input, {cfg.t_video, cfg.height, cfg.width}, "encode_segment(video)");
        return input.reshaped({1, cfg.t_video, cfg.height, cfg.width});
    }
    require_shape(input, {cfg.t_audio, cfg.n_mels}, "encode_segment(audio)");
    return input.reshaped({1, cfg.t_audio, cfg.n_mels, 1});
}

Tensor temporal_subsample(const Tensor& x, int64_t alpha) {
    int64_t c = x.dim(0), t = x.dim(1), h = x.dim(2), w = x.dim(3);
    Tensor out({c, t / alpha, h, w});
    for (int64_t ci = 0; ci < c; ++ci)
        for (int64_t ti = 0; ti < t / alpha; ++ti)
            std::memcpy(out.data() + (ci * (t / alpha) + ti) * h * w,
                        x.data() + (ci * t + ti * alpha) * h * w,
                        static_cast<size_t>(h * w) * sizeof(double));
    return out;
}

}  // namespace

void init_encoder_params(ParamStore& store, Rng& rng, const SlowFastConfig& cfg,
                         Modality modality) {
    cfg.validate();
    const std::string m = mod_prefix(modality);
    const bool sw = modality == Modality::video;
    const int n = cfg.n_stages();
    const int base_fast = cfg.base_channels / cfg.beta;

    add_conv(store, rng, m + ".slow.stem", cfg.base_channels, 1,
             {1, 7, sw ? 7 : 1});
    add_conv(store, rng, m + ".fast.stem", base_fast, 1, {5, 7, sw ? 7 : 1});

    for (int i = 0; i < n; ++i) {
        int64_t slow_in = (i == 0) ? cfg.base_channels : cfg.stage_channels[static_cast<size_t>(i - 1)];
        int64_t fast_in = slow_in / cfg.beta;
        // Lateral projection feeding this stage doubles the fast width.
        add_conv(store, rng, m + ".lat" + std::to_string(i), 2 * fast_in, fast_in, {5, 1, 1});
        int64_t slow_cat = slow_in + 2 * fast_in;
        int64_t slow_out = cfg.stage_channels[static_cast<size_t>(i)];
        int64_t fast_out = slow_out / cfg.beta;
        int kt_slow = slow_temporal_kernel(i, n);
        for (int j = 0; j < cfg.stage_depths[static_cast<size_t>(i)]; ++j) {
            std::string sname = m + ".slow.res" + std::to_string(i) + ".blk" + std::to_string(j);
            std::string fname = m + ".fast.res" + std::to_string(i) + ".blk" + std::to_string(j);
            if (j == 0) {
                add_bottleneck(store, rng, sname, slow_cat, slow_out, kt_slow, sw, true);
                add_bottleneck(store, rng, fname, fast_in, fast_out, 3, sw, true);
            } else {
                add_bottleneck(store, rng, sname, slow_out, slow_out, kt_slow, sw, false);
                add_bottleneck(store, rng, fname, fast_out, fast_out, 3, sw, false);
            }
        }
    }
}

ParamStore init_params(const SlowFastConfig& cfg, uint64_t seed) {
    ParamStore store;
    Rng vr(derive_seed(seed, "sfcavp.video"));
    init_encoder_params(store, vr, cfg, Modality::video);
    Rng ar(derive_seed(seed, "sfcavp.audio"));
    init_encoder_params(store, ar, cfg, Modality::audio);
    store.add("tau", Tensor::scalar(cfg.tau_init));
    return store;
}

Var encode_segment(ParamGraph& p, const Tensor& input, Modality modality,
                   const SlowFastConfig& cfg, StageTrace* trace) {
    cfg.validate();
    const std::string m = mod_prefix(modality);
    const Geometry g = geometry(modality);
    const int n = cfg.n_stages();

    Tensor whole = to_chw(input, modality, cfg);
    Var fast = ad::constant(whole);
    Var slow = ad::constant(temporal_subsample(whole, cfg.alpha));

    slow = ad::max_pool3d(ad::silu(conv(p, m + ".slow.stem", slow, g.stem_slow)), g.pool);
    fast = ad::max_pool3d(ad::silu(conv(p, m + ".fast.stem", fast, g.stem_fast)), g.pool);
    if (trace)
        trace->push_back({"stem", slow.val().dim(0), slow.val().dim(1), fast.val().dim(0),
                          fast.val().dim(1)});

    for (int i = 0; i < n; ++i) {
        // Time-strided lateral connection, fused into slow by concatenation.
        ad::Conv3dSpec lat{{5, 1, 1}, {cfg.alpha, 1, 1}, {2, 0, 0}};
        Var lateral = conv(p, m + ".lat" + std::to_string(i), fast, lat);
        Var slow_cat = ad::concat_axis0({slow, lateral});

        int64_t stride = (i == 0) ? 1 : 2;
        int kt_slow = slow_temporal_kernel(i, n);
        for (int j = 0; j < cfg.stage_depths[static_cast<size_t>(i)]; ++j) {
            std::string sname = m + ".slow.res" + std::to_string(i) + ".blk" + std::to_string(j);
            std::string fname = m + ".fast.res" + std::to_string(i) + ".blk" + std::to_string(j);
            int64_t s = (j == 0) ? stride : 1;
            slow_cat = bottleneck(p, sname, slow_cat, kt_slow, s, g.spatial_w, j == 0);
            fast = bottleneck(p, fname, fast, 3, s, g.spatial_w, j == 0);
        }
        slow = slow_cat;
        if (trace)
            trace->push_back({"res" + std::to_string(i), slow.val().dim(0), slow.val().dim(1),
                              fast.val().dim(0), fast.val().dim(1)});
    }

    Var emb = ad::concat_axis0({ad::global_avg_pool(slow), ad::global_avg_pool(fast)});
    emb = ad::reshape(emb, {1, static_cast<int64_t>(cfg.embed_dim())});
    emb = ad::l2_normalize_rows(emb);
    return ad::reshape(emb, {static_cast<int64_t>(cfg.embed_dim())});
}

Tensor encode_segment_value(const ParamStore& params, const Tensor& input, Modality modality,
                            const SlowFastConfig& cfg, StageTrace* trace) {
    ParamGraph p(const_cast<ParamStore&>(params), /*frozen=*/true);
    return encode_segment(p, input, modality, cfg, trace).val();
}

Var infonce_directional(const Var& a, const Var& v, const Var& tau) {
    if (a.val().rank() != 2 || v.val().rank() != 2 || !a.val().same_shape(v.val()))
        throw ContractViolation("infonce: embeddings must be equal-shape (N, D) matrices");
    if (a.val().dim(0) < 1) throw ContractViolation("infonce: empty batch");
    if (tau.val()[0] <= 0.0) throw ContractViolation("infonce: tau must be positive");
    Var logits = ad::scale_by_var(ad::matmul(a, v, false, true), ad::recip(tau));
    Var per_pair = ad::sub(ad::logsumexp_rows(logits), ad::take_diag(logits));
    return ad::mean_all(per_pair);
}

double infonce_directional(const Tensor& a, const Tensor& v, double tau) {
    return infonce_directional(ad::constant(a), ad::constant(v), ad::constant(Tensor::scalar(tau)))
        .item();
}

Var cavp_loss(const Var& a, const Var& v, const Var& tau) {
    Var l_av = infonce_directional(a, v, tau);
    Var l_va = infonce_directional(v, a, tau);
    return ad::scale(ad::add(l_av, l_va), 0.5);
}

double cavp_loss(const Tensor& a, const Tensor& v, double tau) {
    return cavp_loss(ad::constant(a), ad::constant(v), ad::constant(Tensor::scalar(tau))).item();
}

double cosine_similarity(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b))
        throw ContractViolation("cosine_similarity: shapes " + a.shape_str() + " vs " +
                                b.shape_str());
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0) throw ContractViolation("cosine_similarity: zero vector");
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

namespace {

Tensor slice_time(const Tensor& x, int64_t t0, int64_t len) {
    int64_t inner = x.numel() / x.dim(0);
    std::vector<int64_t> dims = x.dims();
    dims[0] = len;
    Tensor out(dims);
    std::memcpy(out.data(), x.data() + t0 * inner, static_cast<size_t>(len * inner) * sizeof(double));
    return out;
}

}  // namespace

std::vector<double> segment_similarities(const ParamStore& frozen, const SlowFastConfig& cfg,
                                         const Tensor& video, const Tensor& audio, int segments) {
    if (video.dim(0) % segments != 0 || audio.dim(0) % segments != 0)
        throw ContractViolation("segment_similarities: segment count " + std::to_string(segments) +
                                " does not divide temporal lengths " + video.shape_str() + ", " +
                                audio.shape_str());
    int64_t tv = video.dim(0) / segments;
    int64_t ta = audio.dim(0) / segments;
    std::vector<double> sims(static_cast<size_t>(segments));
    parallel_for(segments, [&](int64_t s) {
        Tensor ev = encode_segment_value(frozen, slice_time(video, s * tv, tv), Modality::video, cfg);
        Tensor ea = encode_segment_value(frozen, slice_time(audio, s * ta, ta), Modality::audio, cfg);
        sims[static_cast<size_t>(s)] = cosine_similarity(ea, ev);
    });
    return sims;
}

// ---------------------------------------------------------------------------
// pretraining
// ---------------------------------------------------------------------------

namespace {

struct EncodeJob {
    std::unique_ptr<ParamGraph> graph;
    Var emb;
};

}  // namespace

PretrainResult pretrain_avp(const std::vector<synth::SyntheticClip>& clips, int segments,
                            const SlowFastConfig& cfg, const PretrainHyper& hyper) {
    cfg.validate();
    if (clips.empty()) throw ContractViolation("pretrain_avp: empty dataset");
    if (hyper.batch_clips < 1) throw ConfigError("pretrain_avp: batch_clips must be >= 1");

    PretrainResult res;
    res.params = init_params(cfg, hyper.seed);
    nn::AdamW opt({.lr = hyper.lr});
    Rng order_rng(derive_seed(hyper.seed, "pretrain.order"));

    std::vector<size_t> order(clips.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    size_t cursor = order.size();  // triggers reshuffle on first use

    const int B = hyper.batch_clips;
    const int n_pairs = B * segments;

    for (int step = 0; step < hyper.steps; ++step) {
        std::vector<size_t> batch;
        for (int b = 0; b < B; ++b) {
            if (cursor >= order.size()) {
                order_rng.shuffle(order);
                cursor = 0;
            }
            batch.push_back(order[cursor++]);
        }

        // Phase 1: independent encoder graphs (audio then video per pair).
        std::vector<EncodeJob> jobs(static_cast<size_t>(2 * n_pairs));
        parallel_for(2 * n_pairs, [&](int64_t j) {
            int pair = static_cast<int>(j / 2);
            bool is_audio = (j % 2) == 0;
            const auto& clip = clips[batch[static_cast<size_t>(pair / segments)]];
            int s = pair % segments;
            auto g = std::make_unique<ParamGraph>(res.params, /*frozen=*/false);
            const Tensor& src = is_audio ? clip.audio : clip.video;
            int64_t seg_len = src.dim(0) / segments;
            Tensor seg = slice_time(src, s * seg_len, seg_len);
            jobs[static_cast<size_t>(j)].emb = encode_segment(
                *g, seg, is_audio ? Modality::audio : Modality::video, cfg);
            jobs[static_cast<size_t>(j)].graph = std::move(g);
        }, hyper.threads);

        // Phase 2: loss over embedding leaves.
        std::vector<Var> a_rows, v_rows;
        std::vector<Var> a_leaves, v_leaves;
        for (int pair = 0; pair < n_pairs; ++pair) {
            Var a = ad::leaf(jobs[static_cast<size_t>(2 * pair)].emb.val());
            Var v = ad::leaf(jobs[static_cast<size_t>(2 * pair + 1)].emb.val());
            a_leaves.push_back(a);
            v_leaves.push_back(v);
            a_rows.push_back(ad::reshape(a, {1, cfg.embed_dim()}));
            v_rows.push_back(ad::reshape(v, {1, cfg.embed_dim()}));
        }
        ParamGraph tau_graph(res.params, false);
        Var loss = cavp_loss(ad::concat_axis0(a_rows), ad::concat_axis0(v_rows), tau_graph("tau"));
        double loss_val = loss.item();
        if (!std::isfinite(loss_val))
            throw NumericalError("pretrain_avp: non-finite loss at step " + std::to_string(step));
        res.loss_history.push_back(loss_val);

        res.params.zero_grads();
        ad::backward(loss);

        // Phase 3: push leaf gradients through each encoder graph.
        parallel_for(2 * n_pairs, [&](int64_t j) {
            int pair = static_cast<int>(j / 2);
            const Var& lf = (j % 2) == 0 ? a_leaves[static_cast<size_t>(pair)]
                                         : v_leaves[static_cast<size_t>(pair)];
            if (!lf.grad().empty()) ad::backward(jobs[static_cast<size_t>(j)].emb, lf.grad());
        }, hyper.threads);

        // Phase 4: deterministic ordered gradient harvest.
        for (auto& job : jobs) job.graph->harvest_grads();
        tau_graph.harvest_grads();

        opt.step(res.params);
        double& tau = res.params.at("tau").value[0];
        tau = std::min(kTauMax, std::max(kTauMin, tau));
    }
    return res;
}

double retrieval_top1(const ParamStore& frozen, const SlowFastConfig& cfg,
                      const std::vector<synth::SyntheticClip>& clips, int segments,
                      int batch_segments, int n_batches, uint64_t seed) {
    if (clips.empty()) throw ContractViolation("retrieval_top1: empty clip set");
    Rng rng(derive_seed(seed, "retrieval"));
    int correct = 0, total = 0;
    for (int b = 0; b < n_batches; ++b) {
        std::vector<Tensor> a_embs(static_cast<size_t>(batch_segments));
        std::vector<Tensor> v_embs(static_cast<size_t>(batch_segments));
        std::vector<std::pair<size_t, int>> picks;
        for (int i = 0; i < batch_segments; ++i)
            picks.emplace_back(static_cast<size_t>(rng.integer(0, static_cast<int64_t>(clips.size()) - 1)),
                               static_cast<int>(rng.integer(0, segments - 1)));
        parallel_for(batch_segments, [&](int64_t i) {
            const auto& clip = clips[picks[static_cast<size_t>(i)].first];
            int s = picks[static_cast<size_t>(i)].second;
            int64_t tv = clip.video.dim(0) / segments;
            int64_t ta = clip.audio.dim(0) / segments;
            v_embs[static_cast<size_t>(i)] = encode_segment_value(
                frozen, slice_time(clip.video, s * tv, tv), Modality::video, cfg);
            a_embs[static_cast<size_t>(i)] = encode_segment_value(
                frozen, slice_time(clip.audio, s * ta, ta), Modality::audio, cfg);
        });
        for (int i = 0; i < batch_segments; ++i) {
            int best = -1;
            double best_sim = -2.0;
            for (int j = 0; j < batch_segments; ++j) {
                double sim = cosine_similarity(a_embs[static_cast<size_t>(i)],
                                               v_embs[static_cast<size_t>(j)]);
                if (sim > best_sim) {
                    best_sim = sim;
                    best = j;
                }
            }
            if (best == i) ++correct;
            ++total;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(total);
}

}  // namespace forge::cavp
