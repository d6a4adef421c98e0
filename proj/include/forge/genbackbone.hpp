#pragma once

#include <functional>
#include <string>
#include <vector>

#include "forge/nn.hpp"
#include "forge/sfcavp.hpp"
#include "forge/synthdata.hpp"

namespace forge::gen {

// Two-stream joint-attention velocity field over audio latent tokens,
// conditioned on per-segment video features, trained by regressing the
// straight-path flow velocity.
struct BackboneConfig {
    int latent_len = 64;   // L
    int latent_dim = 16;   // d
    int cond_dim = 32;     // d_c
    int hidden = 64;
    int heads = 4;
    int mm_blocks = 2;  // joint-attention blocks (audio + video streams)
    int sm_blocks = 2;  // audio-only blocks
    int time_embed_dim = 32;
    int mlp_ratio = 4;
    std::string basis = "dct";  // latent codec basis: "dct" | "random"

    // Spectrogram / segment geometry this backbone is bound to.
    int t_spec = 512;
    int n_mels = 32;
    int segments = 8;

    int64_t patch_len() const { return t_spec / latent_len; }
    int64_t patch_dim() const { return patch_len() * n_mels; }
    int global_dim() const { return cond_dim + time_embed_dim; }
    void validate() const;
};

// Fixed (non-learned) orthogonal map between spectrogram time patches and
// latent tokens. encode . decode is the identity on the projected subspace;
// with latent_dim == patch_dim it is a bijection.
class LatentCodec {
public:
    LatentCodec(const BackboneConfig& cfg, uint64_t seed = 0);

    Tensor encode(const Tensor& spectrogram) const;  // (t_spec, n_mels) -> (L, d)
    Tensor decode(const Tensor& latent) const;       // (L, d) -> (t_spec, n_mels)

    const Tensor& basis() const { return basis_; }  // (patch_dim, d), orthonormal columns

private:
    BackboneConfig cfg_;
    Tensor basis_;
};

struct ConditionSet {
    Tensor g_c;  // (cond_dim + time_embed_dim): pooled video feature ++ timestep embedding
    Tensor f_c;  // (L, cond_dim): per-segment features upsampled to the token rate
};

Tensor timestep_embedding(double t, int dim);

// Orthonormal-column projection used to map frozen encoder embeddings into
// the conditioning space. Deterministic in (dims, seed).
Tensor orthonormal_projection(int64_t in_dim, int64_t out_dim, uint64_t seed);

// seg_feats: (segments, cond_dim).
ConditionSet make_conditions(const Tensor& seg_feats, double t, const BackboneConfig& cfg);

nn::ParamStore init_backbone_params(const BackboneConfig& cfg, uint64_t seed);

// x_t: (L, d) latent point; returns the predicted velocity, same shape.
ad::Var velocity_forward(nn::ParamGraph& params, double t, const ConditionSet& cond,
                         const ad::Var& x_t, const BackboneConfig& cfg);
Tensor velocity_forward_value(const nn::ParamStore& params, double t, const ConditionSet& cond,
                              const Tensor& x_t, const BackboneConfig& cfg);

// x_t = t*x1 + (1-t)*x0, u_t = x1 - x0. Requires t in [0, 1].
std::pair<Tensor, Tensor> interpolate_path(const Tensor& x0, const Tensor& x1, double t);

// Mean over elements of ||a - b||^2 (the reduction used by every
// flow-matching error in this codebase).
ad::Var flow_mse(const ad::Var& v, const Tensor& u);

struct FlowItem {
    Tensor x0, x1;
    double t = 0.0;
    const Tensor* seg_feats = nullptr;  // (segments, cond_dim)
};

ad::Var cfm_loss(nn::ParamGraph& params, const std::vector<FlowItem>& batch,
                 const BackboneConfig& cfg);
double cfm_loss_value(const nn::ParamStore& params, const std::vector<FlowItem>& batch,
                      const BackboneConfig& cfg);

// Explicit Euler from t=0 to t=1 in n_steps equal steps.
using VelocityFn = std::function<Tensor(double t, const Tensor& x)>;
Tensor euler_integrate(const VelocityFn& field, Tensor x0, int n_steps);

constexpr int kDefaultSampleSteps = 25;

// Draws x0 from a seeded standard normal and integrates the learned field.
Tensor sample(const nn::ParamStore& params, const Tensor& seg_feats, int n_steps, uint64_t seed,
              const BackboneConfig& cfg);

// Cached per-clip inputs: ground-truth latent plus projected per-segment
// video features from the frozen contrastive encoder.
struct ClipData {
    std::string clip_id;
    Tensor latent;     // (L, d)
    Tensor seg_feats;  // (segments, cond_dim)
};

std::vector<ClipData> prepare_clip_data(const std::vector<synth::SyntheticClip>& clips,
                                        const nn::ParamStore& avp_params,
                                        const cavp::SlowFastConfig& avp_cfg,
                                        const BackboneConfig& cfg, const LatentCodec& codec,
                                        int threads = 0);

struct TrainBaseHyper {
    double lr = 3e-4;
    int steps = 600;
    int batch_clips = 6;
    uint64_t seed = 0;
};

struct TrainBaseResult {
    nn::ParamStore params;
    std::vector<double> loss_history;
};

TrainBaseResult train_base(const std::vector<ClipData>& data, const BackboneConfig& cfg,
                           const TrainBaseHyper& hyper);

}  // namespace forge::gen
