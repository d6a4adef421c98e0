#include "forge/genbackbone.hpp"

#include <Eigen/Dense>

#include <cmath>

#include "forge/parallel.hpp"

namespace forge::gen {

using ad::Var;
using nn::ParamGraph;
using nn::ParamStore;

void BackboneConfig::validate() const {
    if (latent_len < 1 || latent_dim < 1 || cond_dim < 1 || hidden < 1)
        throw ConfigError("backbone: dimensions must be >= 1");
    if (heads < 1 || hidden % heads != 0)
        throw ConfigError("backbone: hidden must be divisible by heads");
    if (mm_blocks < 1 || sm_blocks < 1)
        throw ConfigError("backbone: at least one multimodal and one single-modal block required");
    if (time_embed_dim < 2 || time_embed_dim % 2 != 0)
        throw ConfigError("backbone: time_embed_dim must be even and >= 2");
    if (mlp_ratio < 1) throw ConfigError("backbone: mlp_ratio must be >= 1");
    if (basis != "dct" && basis != "random")
        throw ConfigError("backbone: basis must be 'dct' or 'random'");
    if (t_spec % latent_len != 0)
        throw ConfigError("backbone: t_spec must be divisible by latent_len");
    if (latent_dim > patch_dim())
        throw ConfigError("backbone: latent_dim exceeds patch size " + std::to_string(patch_dim()));
    if (segments < 1 || latent_len % segments != 0)
        throw ConfigError("backbone: latent_len must be divisible by segments");
}

// ---------------------------------------------------------------------------
// latent codec
// ---------------------------------------------------------------------------

namespace {

// Orthonormal 2-D DCT-II basis over a (patch_len x n_mels) patch. Modes are
// ordered frequency-first (temporal mode 0 with all frequency modes, then
// temporal mode 1, ...) so small latent_dim keeps full frequency resolution.
Tensor dct_basis(int64_t patch_len, int64_t n_mels, int64_t d) {
    Tensor basis({patch_len * n_mels, d});
    const double pi = 3.14159265358979323846;
    for (int64_t m = 0; m < d; ++m) {
        int64_t ti = m / n_mels;
        int64_t fj = m % n_mels;
        double ct = ti == 0 ? std::sqrt(1.0 / static_cast<double>(patch_len))
                            : std::sqrt(2.0 / static_cast<double>(patch_len));
        double cf = fj == 0 ? std::sqrt(1.0 / static_cast<double>(n_mels))
                            : std::sqrt(2.0 / static_cast<double>(n_mels));
        for (int64_t pt = 0; pt < patch_len; ++pt)
            for (int64_t pf = 0; pf < n_mels; ++pf)
                basis.at(pt * n_mels + pf, m) =
                    ct * std::cos(pi * (2.0 * pt + 1.0) * ti / (2.0 * patch_len)) * cf *
                    std::cos(pi * (2.0 * pf + 1.0) * fj / (2.0 * n_mels));
    }
    return basis;
}

Tensor qr_orthonormal_columns(const Tensor& gaussian, int64_t keep) {
    using EMat = Eigen::MatrixXd;
    int64_t rows = gaussian.dim(0), cols = gaussian.dim(1);
    EMat a(rows, cols);
    for (int64_t i = 0; i < rows; ++i)
        for (int64_t j = 0; j < cols; ++j) a(i, j) = gaussian.at(i, j);
    Eigen::HouseholderQR<EMat> qr(a);
    EMat q = qr.householderQ() * EMat::Identity(rows, keep);
    EMat r = qr.matrixQR().topLeftCorner(keep, keep).triangularView<Eigen::Upper>();
    // Fix signs so the factorization (and file hashes) are deterministic.
    for (int64_t j = 0; j < keep; ++j)
        if (r(j, j) < 0) q.col(j) *= -1.0;
    Tensor out({rows, keep});
    for (int64_t i = 0; i < rows; ++i)
        for (int64_t j = 0; j < keep; ++j) out.at(i, j) = q(i, j);
    return out;
}

}  // namespace

LatentCodec::LatentCodec(const BackboneConfig& cfg, uint64_t seed) : cfg_(cfg) {
    cfg.validate();
    if (cfg.basis == "dct") {
        basis_ = dct_basis(cfg.patch_len(), cfg.n_mels, cfg.latent_dim);
    } else {
        Rng rng(derive_seed(seed, "latent_basis"));
        Tensor g = rng.normal_tensor({cfg.patch_dim(), cfg.patch_dim()});
        basis_ = qr_orthonormal_columns(g, cfg.latent_dim);
    }
}

Tensor LatentCodec::encode(const Tensor& spectrogram) const {
    require_shape(spectrogram, {static_cast<int64_t>(cfg_.t_spec), static_cast<int64_t>(cfg_.n_mels)},
                  "LatentCodec::encode");
    // Rows of the patch matrix are exactly consecutive spectrogram rows, so
    // reinterpreting the buffer gives (L, patch_dim) for free.
    Tensor patches = spectrogram.reshaped({cfg_.latent_len, cfg_.patch_dim()});
    return ad::matmul(ad::constant(patches), ad::constant(basis_)).val();
}

Tensor LatentCodec::decode(const Tensor& latent) const {
    require_shape(latent, {static_cast<int64_t>(cfg_.latent_len), static_cast<int64_t>(cfg_.latent_dim)},
                  "LatentCodec::decode");
    Tensor patches = ad::matmul(ad::constant(latent), ad::constant(basis_), false, true).val();
    return patches.reshaped({cfg_.t_spec, cfg_.n_mels});
}

// ---------------------------------------------------------------------------
// conditions
// ---------------------------------------------------------------------------

Tensor timestep_embedding(double t, int dim) {
    Tensor emb({dim});
    int half = dim / 2;
    for (int k = 0; k < half; ++k) {
        double freq = std::pow(1000.0, static_cast<double>(k) / std::max(1, half - 1));
        emb[k] = std::sin(t * freq);
        emb[half + k] = std::cos(t * freq);
    }
    return emb;
}

Tensor orthonormal_projection(int64_t in_dim, int64_t out_dim, uint64_t seed) {
    if (out_dim > in_dim)
        throw ConfigError("orthonormal_projection: out_dim exceeds in_dim");
    Rng rng(derive_seed(seed, "cond_projection"));
    Tensor g = rng.normal_tensor({in_dim, in_dim});
    return qr_orthonormal_columns(g, out_dim);
}

ConditionSet make_conditions(const Tensor& seg_feats, double t, const BackboneConfig& cfg) {
    require_shape(seg_feats, {static_cast<int64_t>(cfg.segments), static_cast<int64_t>(cfg.cond_dim)},
                  "make_conditions");
    if (t < 0.0 || t > 1.0) throw ContractViolation("make_conditions: t outside [0, 1]");
    ConditionSet c;
    c.g_c = Tensor({static_cast<int64_t>(cfg.global_dim())});
    for (int64_t j = 0; j < cfg.cond_dim; ++j) {
        double mean = 0.0;
        for (int64_t s = 0; s < cfg.segments; ++s) mean += seg_feats.at(s, j);
        c.g_c[j] = mean / static_cast<double>(cfg.segments);
    }
    Tensor temb = timestep_embedding(t, cfg.time_embed_dim);
    for (int64_t k = 0; k < cfg.time_embed_dim; ++k) c.g_c[cfg.cond_dim + k] = temb[k];

    int64_t rep = cfg.latent_len / cfg.segments;
    c.f_c = ad::repeat_rows(ad::constant(seg_feats), rep).val();
    return c;
}

// ---------------------------------------------------------------------------
// velocity network
// ---------------------------------------------------------------------------

namespace {

Tensor sinusoidal_positions(int64_t n, int64_t dim) {
    Tensor pe({n, dim});
    for (int64_t pos = 0; pos < n; ++pos)
        for (int64_t k = 0; k < dim / 2; ++k) {
            double freq = std::pow(10000.0, -2.0 * static_cast<double>(k) / static_cast<double>(dim));
            pe.at(pos, 2 * k) = std::sin(static_cast<double>(pos) * freq);
            pe.at(pos, 2 * k + 1) = std::cos(static_cast<double>(pos) * freq);
        }
    return pe;
}

struct Mod6 {
    Var s1, sh1, g1, s2, sh2, g2;  // each (n, hidden)
};

// Six per-token modulation signals: a broadcast component from the global
// condition plus (optionally) a per-token component from the frame-aligned
// condition.
Mod6 adaln6(ParamGraph& p, const std::string& name, const Var& g_row, const Var* f_tokens,
            int64_t n_tokens, int64_t hidden) {
    Var g6 = nn::linear(p, name + ".adaln", ad::silu(g_row));  // (1, 6h)
    Var mod = ad::repeat_rows(g6, n_tokens);
    if (f_tokens) mod = ad::add(mod, nn::linear(p, name + ".adaln_f", *f_tokens));
    Mod6 m;
    m.s1 = ad::slice_cols(mod, 0, hidden);
    m.sh1 = ad::slice_cols(mod, hidden, hidden);
    m.g1 = ad::slice_cols(mod, 2 * hidden, hidden);
    m.s2 = ad::slice_cols(mod, 3 * hidden, hidden);
    m.sh2 = ad::slice_cols(mod, 4 * hidden, hidden);
    m.g2 = ad::slice_cols(mod, 5 * hidden, hidden);
    return m;
}

Var modulate(const Var& x, const Var& scale, const Var& shift) {
    return ad::add(ad::mul(x, ad::add_scalar(scale, 1.0)), shift);
}

// Multi-head attention over a single joined token sequence.
Var attention(const Var& q, const Var& k, const Var& v, int heads) {
    int64_t h = q.val().dim(1);
    int64_t dh = h / heads;
    double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Var> heads_t;
    heads_t.reserve(static_cast<size_t>(heads));
    for (int i = 0; i < heads; ++i) {
        Var qi = ad::slice_cols(q, i * dh, dh);
        Var ki = ad::slice_cols(k, i * dh, dh);
        Var vi = ad::slice_cols(v, i * dh, dh);
        Var att = ad::softmax_rows(ad::scale(ad::matmul(qi, ki, false, true), inv_sqrt));
        heads_t.push_back(ad::transpose2d(ad::matmul(att, vi)));  // (dh, n)
    }
    return ad::transpose2d(ad::concat_axis0(heads_t));  // (n, h)
}

Var mlp(ParamGraph& p, const std::string& name, const Var& x) {
    return nn::linear(p, name + ".fc2", ad::silu(nn::linear(p, name + ".fc1", x)));
}

void add_attn(ParamStore& store, Rng& rng, const std::string& name, int64_t h) {
    nn::add_linear(store, rng, name + ".q", h, h);
    nn::add_linear(store, rng, name + ".k", h, h);
    nn::add_linear(store, rng, name + ".v", h, h);
    nn::add_linear(store, rng, name + ".o", h, h, 0.5);
}

void add_block(ParamStore& store, Rng& rng, const std::string& name, const BackboneConfig& cfg,
               bool with_frame_cond) {
    int64_t h = cfg.hidden;
    nn::add_linear(store, rng, name + ".adaln", cfg.global_dim(), 6 * h, 0.1);
    if (with_frame_cond) nn::add_linear(store, rng, name + ".adaln_f", cfg.cond_dim, 6 * h, 0.1);
    add_attn(store, rng, name + ".attn", h);
    nn::add_linear(store, rng, name + ".mlp.fc1", h, cfg.mlp_ratio * h);
    nn::add_linear(store, rng, name + ".mlp.fc2", cfg.mlp_ratio * h, h, 0.5);
}

}  // namespace

ParamStore init_backbone_params(const BackboneConfig& cfg, uint64_t seed) {
    cfg.validate();
    ParamStore store;
    Rng rng(derive_seed(seed, "backbone"));
    nn::add_linear(store, rng, "in.audio", cfg.latent_dim, cfg.hidden);
    nn::add_linear(store, rng, "in.video", cfg.cond_dim, cfg.hidden);
    for (int i = 0; i < cfg.mm_blocks; ++i) {
        add_block(store, rng, "mm" + std::to_string(i) + ".a", cfg, true);
        add_block(store, rng, "mm" + std::to_string(i) + ".v", cfg, false);
    }
    for (int i = 0; i < cfg.sm_blocks; ++i)
        add_block(store, rng, "sm" + std::to_string(i), cfg, true);
    nn::add_linear(store, rng, "head.adaln", cfg.global_dim(), 2 * cfg.hidden, 0.1);
    nn::add_linear(store, rng, "head.adaln_f", cfg.cond_dim, 2 * cfg.hidden, 0.1);
    int64_t fan_in = cfg.hidden * 3;
    Tensor conv_w = nn::he_init(rng, {cfg.latent_dim, cfg.hidden, 3, 1, 1}, fan_in);
    conv_w.scale_(0.1);
    store.add("head.conv.w", std::move(conv_w));
    store.add("head.conv.b", Tensor::zeros({cfg.latent_dim}));
    return store;
}

Var velocity_forward(ParamGraph& p, double t, const ConditionSet& cond, const Var& x_t,
                     const BackboneConfig& cfg) {
    const int64_t L = cfg.latent_len;
    const int64_t h = cfg.hidden;
    require_shape(x_t.val(), {L, static_cast<int64_t>(cfg.latent_dim)}, "velocity_forward: x_t");
    require_shape(cond.f_c, {L, static_cast<int64_t>(cfg.cond_dim)},
                  "velocity_forward: frame-aligned condition");
    require_shape(cond.g_c, {static_cast<int64_t>(cfg.global_dim())},
                  "velocity_forward: global condition");
    if (t < 0.0 || t > 1.0) throw ContractViolation("velocity_forward: t outside [0, 1]");

    Var g_row = ad::reshape(ad::constant(cond.g_c), {1, static_cast<int64_t>(cfg.global_dim())});
    Var f_tok = ad::constant(cond.f_c);
    Tensor pos = sinusoidal_positions(L, h);

    Var xa = ad::add(nn::linear(p, "in.audio", x_t), ad::constant(pos));
    Var xv = ad::add(nn::linear(p, "in.video", f_tok), ad::constant(pos));

    for (int i = 0; i < cfg.mm_blocks; ++i) {
        std::string na = "mm" + std::to_string(i) + ".a";
        std::string nv = "mm" + std::to_string(i) + ".v";
        Mod6 ma = adaln6(p, na, g_row, &f_tok, L, h);
        Mod6 mv = adaln6(p, nv, g_row, nullptr, L, h);

        Var ha = modulate(ad::layer_norm_rows(xa), ma.s1, ma.sh1);
        Var hv = modulate(ad::layer_norm_rows(xv), mv.s1, mv.sh1);
        // The two streams keep separate projections but attend over the
        // joined token sequence.
        Var q = ad::concat_axis0({nn::linear(p, na + ".attn.q", ha), nn::linear(p, nv + ".attn.q", hv)});
        Var k = ad::concat_axis0({nn::linear(p, na + ".attn.k", ha), nn::linear(p, nv + ".attn.k", hv)});
        Var v = ad::concat_axis0({nn::linear(p, na + ".attn.v", ha), nn::linear(p, nv + ".attn.v", hv)});
        Var joint = attention(q, k, v, cfg.heads);
        Var out_a = nn::linear(p, na + ".attn.o", ad::slice_rows(joint, 0, L));
        Var out_v = nn::linear(p, nv + ".attn.o", ad::slice_rows(joint, L, L));
        xa = ad::add(xa, ad::mul(ma.g1, out_a));
        xv = ad::add(xv, ad::mul(mv.g1, out_v));

        Var ma2 = modulate(ad::layer_norm_rows(xa), ma.s2, ma.sh2);
        Var mv2 = modulate(ad::layer_norm_rows(xv), mv.s2, mv.sh2);
        xa = ad::add(xa, ad::mul(ma.g2, mlp(p, na + ".mlp", ma2)));
        xv = ad::add(xv, ad::mul(mv.g2, mlp(p, nv + ".mlp", mv2)));
    }

    for (int i = 0; i < cfg.sm_blocks; ++i) {
        std::string nm = "sm" + std::to_string(i);
        Mod6 m = adaln6(p, nm, g_row, &f_tok, L, h);
        Var hx = modulate(ad::layer_norm_rows(xa), m.s1, m.sh1);
        Var att = attention(nn::linear(p, nm + ".attn.q", hx), nn::linear(p, nm + ".attn.k", hx),
                            nn::linear(p, nm + ".attn.v", hx), cfg.heads);
        xa = ad::add(xa, ad::mul(m.g1, nn::linear(p, nm + ".attn.o", att)));
        Var m2 = modulate(ad::layer_norm_rows(xa), m.s2, m.sh2);
        xa = ad::add(xa, ad::mul(m.g2, mlp(p, nm + ".mlp", m2)));
    }

    // Final modulation followed by a 1-D convolution along the token axis.
    Var mod = ad::repeat_rows(nn::linear(p, "head.adaln", ad::silu(g_row)), L);
    mod = ad::add(mod, nn::linear(p, "head.adaln_f", f_tok));
    Var y = modulate(ad::layer_norm_rows(xa), ad::slice_cols(mod, 0, h), ad::slice_cols(mod, h, h));
    Var y_chw = ad::reshape(ad::transpose2d(y), {h, L, 1, 1});
    ad::Conv3dSpec spec{{3, 1, 1}, {1, 1, 1}, {1, 0, 0}};
    Var out = ad::conv3d(y_chw, p("head.conv.w"), p("head.conv.b"), spec);
    return ad::transpose2d(ad::reshape(out, {static_cast<int64_t>(cfg.latent_dim), L}));
}

Tensor velocity_forward_value(const ParamStore& params, double t, const ConditionSet& cond,
                              const Tensor& x_t, const BackboneConfig& cfg) {
    ParamGraph p(const_cast<ParamStore&>(params), /*frozen=*/true);
    return velocity_forward(p, t, cond, ad::constant(x_t), cfg).val();
}

// ---------------------------------------------------------------------------
// flow matching
// ---------------------------------------------------------------------------

std::pair<Tensor, Tensor> interpolate_path(const Tensor& x0, const Tensor& x1, double t) {
    if (!x0.same_shape(x1))
        throw ContractViolation("interpolate_path: shapes " + x0.shape_str() + " vs " +
                                x1.shape_str());
    if (t < 0.0 || t > 1.0) throw ContractViolation("interpolate_path: t outside [0, 1]");
    Tensor xt(x0.dims()), ut(x0.dims());
    for (int64_t i = 0; i < x0.numel(); ++i) {
        xt[i] = t * x1[i] + (1.0 - t) * x0[i];
        ut[i] = x1[i] - x0[i];
    }
    return {std::move(xt), std::move(ut)};
}

Var flow_mse(const Var& v, const Tensor& u) {
    return ad::mean_all(ad::square(ad::sub(v, ad::constant(u))));
}

Var cfm_loss(ParamGraph& params, const std::vector<FlowItem>& batch, const BackboneConfig& cfg) {
    if (batch.empty()) throw ContractViolation("cfm_loss: empty batch");
    Var total;
    for (const auto& item : batch) {
        auto [xt, ut] = interpolate_path(item.x0, item.x1, item.t);
        ConditionSet cond = make_conditions(*item.seg_feats, item.t, cfg);
        Var v = velocity_forward(params, item.t, cond, ad::constant(xt), cfg);
        Var e = flow_mse(v, ut);
        total = total.defined() ? ad::add(total, e) : e;
    }
    return ad::scale(total, 1.0 / static_cast<double>(batch.size()));
}

double cfm_loss_value(const ParamStore& params, const std::vector<FlowItem>& batch,
                      const BackboneConfig& cfg) {
    ParamGraph p(const_cast<ParamStore&>(params), /*frozen=*/true);
    return cfm_loss(p, batch, cfg).item();
}

Tensor euler_integrate(const VelocityFn& field, Tensor x0, int n_steps) {
    if (n_steps < 1) throw ContractViolation("euler_integrate: n_steps must be >= 1");
    double dt = 1.0 / static_cast<double>(n_steps);
    Tensor x = std::move(x0);
    for (int i = 0; i < n_steps; ++i) {
        Tensor v = field(static_cast<double>(i) * dt, x);
        if (!v.same_shape(x)) throw ContractViolation("euler_integrate: field changed shape");
        for (int64_t j = 0; j < x.numel(); ++j) {
            x[j] += dt * v[j];
            if (!std::isfinite(x[j]))
                throw NumericalError("euler_integrate: non-finite state at step " + std::to_string(i));
        }
    }
    return x;
}

Tensor sample(const ParamStore& params, const Tensor& seg_feats, int n_steps, uint64_t seed,
              const BackboneConfig& cfg) {
    Rng rng(derive_seed(seed, "sample_noise"));
    Tensor x0 = rng.normal_tensor({static_cast<int64_t>(cfg.latent_len),
                                   static_cast<int64_t>(cfg.latent_dim)});
    auto field = [&](double t, const Tensor& x) {
        ConditionSet cond = make_conditions(seg_feats, t, cfg);
        return velocity_forward_value(params, t, cond, x, cfg);
    };
    return euler_integrate(field, std::move(x0), n_steps);
}

// ---------------------------------------------------------------------------
// base training
// ---------------------------------------------------------------------------

std::vector<ClipData> prepare_clip_data(const std::vector<synth::SyntheticClip>& clips,
                                        const ParamStore& avp_params,
                                        const cavp::SlowFastConfig& avp_cfg,
                                        const BackboneConfig& cfg, const LatentCodec& codec,
                                        int threads) {
    Tensor proj = orthonormal_projection(avp_cfg.embed_dim(), cfg.cond_dim, /*seed=*/0);
    std::vector<ClipData> out(clips.size());
    parallel_for(static_cast<int64_t>(clips.size()), [&](int64_t i) {
        const auto& clip = clips[static_cast<size_t>(i)];
        ClipData d;
        d.clip_id = clip.clip_id;
        d.latent = codec.encode(clip.audio);
        Tensor embs({static_cast<int64_t>(cfg.segments), static_cast<int64_t>(avp_cfg.embed_dim())});
        int64_t tv = clip.video.dim(0) / cfg.segments;
        for (int s = 0; s < cfg.segments; ++s) {
            Tensor seg({tv, clip.video.dim(1), clip.video.dim(2)});
            std::memcpy(seg.data(), clip.video.data() + s * tv * clip.video.dim(1) * clip.video.dim(2),
                        static_cast<size_t>(seg.numel()) * sizeof(double));
            Tensor e = cavp::encode_segment_value(avp_params, seg, cavp::Modality::video, avp_cfg);
            std::memcpy(embs.data() + s * avp_cfg.embed_dim(), e.data(),
                        static_cast<size_t>(e.numel()) * sizeof(double));
        }
        d.seg_feats = ad::matmul(ad::constant(embs), ad::constant(proj)).val();
        out[static_cast<size_t>(i)] = std::move(d);
    }, threads);
    return out;
}

TrainBaseResult train_base(const std::vector<ClipData>& data, const BackboneConfig& cfg,
                           const TrainBaseHyper& hyper) {
    cfg.validate();
    if (data.empty()) throw ContractViolation("train_base: empty dataset");

    TrainBaseResult res;
    res.params = init_backbone_params(cfg, hyper.seed);
    nn::AdamW opt({.lr = hyper.lr});
    Rng rng(derive_seed(hyper.seed, "train_base"));

    std::vector<size_t> order(data.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    size_t cursor = order.size();

    for (int step = 0; step < hyper.steps; ++step) {
        std::vector<FlowItem> batch;
        for (int b = 0; b < hyper.batch_clips; ++b) {
            if (cursor >= order.size()) {
                rng.shuffle(order);
                cursor = 0;
            }
            const ClipData& d = data[order[cursor++]];
            FlowItem item;
            item.x1 = d.latent;
            item.x0 = rng.normal_tensor(d.latent.dims());
            item.t = rng.uniform();
            item.seg_feats = &d.seg_feats;
            batch.push_back(std::move(item));
        }
        ParamGraph p(res.params, false);
        Var loss = cfm_loss(p, batch, cfg);
        double lv = loss.item();
        if (!std::isfinite(lv))
            throw NumericalError("train_base: non-finite loss at step " + std::to_string(step));
        res.loss_history.push_back(lv);
        res.params.zero_grads();
        ad::backward(loss);
        p.harvest_grads();
        opt.step(res.params);
    }
    return res;
}

}  // namespace forge::gen
