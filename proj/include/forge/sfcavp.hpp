#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "forge/nn.hpp"
#include "forge/synthdata.hpp"

namespace forge::cavp {

enum class Modality { audio, video };

// Dual-stream encoder family. Both modalities share the structure: a slow
// stream sampling every alpha-th time step at full width, a fast stream at
// full temporal resolution with 1/beta channels, per-stage time-strided
// lateral connections fast->slow, global average pooling per stream, and
// concatenation to an embedding of length embed_dim().
struct SlowFastConfig {
    int alpha = 4;
    int beta = 8;
    int base_channels = 32;                       // stem width (slow stream)
    std::vector<int> stage_channels = {32, 64, 128};  // slow widths per residual stage
    std::vector<int> stage_depths = {1, 1, 1};
    double tau_init = 0.07;

    // Segment input geometry.
    int t_video = 16, height = 32, width = 32;
    int t_audio = 64, n_mels = 32;

    int embed_dim() const { return stage_channels.back() + stage_channels.back() / beta; }
    int n_stages() const { return static_cast<int>(stage_channels.size()); }
    void validate() const;

    // ResNet-50 widths (stages 256/512/1024/2048, depths 3/4/6/3, stem 64).
    // Spatial extent is kept small; pooling makes the output length depend on
    // widths only.
    static SlowFastConfig full_size();
};

struct StageShape {
    std::string name;
    int64_t slow_channels, slow_t;
    int64_t fast_channels, fast_t;
};
using StageTrace = std::vector<StageShape>;

// Registers all parameters of one encoder under "<video|audio>.*".
void init_encoder_params(nn::ParamStore& store, Rng& rng, const SlowFastConfig& cfg,
                         Modality modality);
// Both encoders plus the learnable temperature "tau".
nn::ParamStore init_params(const SlowFastConfig& cfg, uint64_t seed);

// input: (t_video, height, width) or (t_audio, n_mels). Returns the
// L2-normalized embedding of length embed_dim().
ad::Var encode_segment(nn::ParamGraph& params, const Tensor& input, Modality modality,
                       const SlowFastConfig& cfg, StageTrace* trace = nullptr);
Tensor encode_segment_value(const nn::ParamStore& params, const Tensor& input, Modality modality,
                            const SlowFastConfig& cfg, StageTrace* trace = nullptr);

// -log softmax of the diagonal over rows of (a . v^T) / tau; embeddings are
// index-aligned positives, every row of `v` serves as a negative.
ad::Var infonce_directional(const ad::Var& audio_embs, const ad::Var& video_embs,
                            const ad::Var& tau);
double infonce_directional(const Tensor& audio_embs, const Tensor& video_embs, double tau);

// Symmetric total: (L_av + L_va) / 2.
ad::Var cavp_loss(const ad::Var& audio_embs, const ad::Var& video_embs, const ad::Var& tau);
double cavp_loss(const Tensor& audio_embs, const Tensor& video_embs, double tau);

double cosine_similarity(const Tensor& a, const Tensor& b);

// Per-segment cosine similarities between a clip's video and an audio
// spectrogram under frozen encoder parameters.
std::vector<double> segment_similarities(const nn::ParamStore& frozen, const SlowFastConfig& cfg,
                                         const Tensor& video, const Tensor& audio, int segments);

struct PretrainHyper {
    double lr = 1e-3;
    int steps = 300;
    int batch_clips = 4;
    uint64_t seed = 0;
    int threads = 0;  // 0 = auto
};

struct PretrainResult {
    nn::ParamStore params;
    std::vector<double> loss_history;
};

PretrainResult pretrain_avp(const std::vector<synth::SyntheticClip>& clips, int segments,
                            const SlowFastConfig& cfg, const PretrainHyper& hyper);

// Mean top-1 audio->video retrieval accuracy over batches of
// `batch_segments` random held-out segment pairs.
double retrieval_top1(const nn::ParamStore& frozen, const SlowFastConfig& cfg,
                      const std::vector<synth::SyntheticClip>& clips, int segments,
                      int batch_segments, int n_batches, uint64_t seed);

// Clamp range for the learnable temperature.
constexpr double kTauMin = 0.01;
constexpr double kTauMax = 1.0;

}  // namespace forge::cavp
