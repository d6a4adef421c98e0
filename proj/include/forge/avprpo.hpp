#pragma once

#include <set>
#include <string>
#include <vector>

#include "forge/genbackbone.hpp"
#include "forge/sfcavp.hpp"

namespace forge::rpo {

enum class WinnerMode { ground_truth, best_generated };
enum class LossMode { avp_rpo, dpo_fm_only };
enum class FinetuneMode { freeze_top, full };

WinnerMode winner_mode_from_string(const std::string& s);
LossMode loss_mode_from_string(const std::string& s);
FinetuneMode finetune_mode_from_string(const std::string& s);

struct RPOConfig {
    int iterations = 5;
    int steps_per_iter = 1000;  // optimizer steps per iteration
    int candidates = 5;         // generated audio clips per video
    double lr = 5.0e-6;
    double weight_decay = 1.0e-4;
    int warmup_steps = 100;  // linear warmup, then cosine decay
    std::string schedule = "cosine";
    int grad_accum = 2;  // preference pairs accumulated per optimizer step
    double grad_clip = 1.0;
    double beta_w = 2000.0;
    WinnerMode winner_mode = WinnerMode::ground_truth;
    LossMode loss_mode = LossMode::avp_rpo;
    FinetuneMode finetune_mode = FinetuneMode::freeze_top;
    int sample_steps = gen::kDefaultSampleSteps;

    void validate() const;
};

struct RewardScore {
    std::vector<double> per_segment;  // S cosine similarities
    double s_fs = 0.0;                // mean of the max(1, floor(S/4)) smallest
};

// Mean of the max(1, floor(S/4)) smallest similarities.
double order_stat_score(const std::vector<double>& sims);

RewardScore score_candidate(const nn::ParamStore& avp_params, const cavp::SlowFastConfig& avp_cfg,
                            const Tensor& clip_video, const Tensor& audio_latent,
                            const gen::LatentCodec& codec, int segments);

struct CandidateSet {
    std::string clip_id;
    Tensor ground_truth;             // latent
    std::vector<Tensor> candidates;  // latents, one per seed
    std::vector<uint64_t> seeds;
};

CandidateSet generate_candidates(const nn::ParamStore& model, const gen::BackboneConfig& cfg,
                                 const gen::ClipData& clip, int n_candidates,
                                 const std::vector<uint64_t>& seeds, int sample_steps);

struct PreferencePair {
    std::string clip_id;
    Tensor winner, loser;  // latents
    int loser_index = -1;
    int winner_index = -1;  // -1 means the ground-truth audio
};

PreferencePair create_preference_pair(const CandidateSet& set,
                                      const std::vector<RewardScore>& scores, WinnerMode mode);

// Per-term running [min, max] used to normalize loss terms to [0, 1].
// Seeded by plain min/max over the first `seed_count` observations, then
// updated by exponential moving bounds that always include the newest value.
class RunningNorm {
public:
    explicit RunningNorm(double decay = 0.99, int seed_count = 10)
        : decay_(decay), seed_count_(seed_count) {}

    void update(double v);
    double normalize(double v);              // update followed by mapping
    double normalize_frozen(double v) const;  // mapping only
    double affine_scale() const;             // 1/(max-min), 0 when degenerate
    double lo() const { return mn_; }
    double hi() const { return mx_; }
    bool initialized() const { return count_ > 0; }

private:
    double decay_;
    int seed_count_;
    int count_ = 0;
    double mn_ = 0.0, mx_ = 0.0;
};

struct DpoDraws {
    double t = 0.0;     // shared between winner and loser
    Tensor x0_winner;   // independent noise draws
    Tensor x0_loser;
};

struct DpoTerms {
    ad::Var dpo;     // -log sigmoid(-beta_w * gap)
    ad::Var fm_win;  // flow-matching error of the winner under the policy
};

// Scalar form of the preference loss:
// softplus(beta_w * ((e_w - e_ref_w) - (e_l - e_ref_l))).
double dpo_fm_scalar(double e_w, double e_l, double e_ref_w, double e_ref_l, double beta_w);

// Flow-matching DPO: gap = (e_w - e_ref_w) - (e_l - e_ref_l) with e the
// per-element mean squared velocity error; loss = softplus(beta_w * gap).
DpoTerms dpo_fm_terms(nn::ParamGraph& policy, const nn::ParamStore& reference,
                      const Tensor& seg_feats, const PreferencePair& pair, const DpoDraws& draws,
                      double beta_w, const gen::BackboneConfig& cfg);

// Combined objective. In avp_rpo mode both terms are normalized to [0, 1]
// (updating the trackers unless update_stats is false) and summed; in
// dpo_fm_only mode the raw DPO term passes through.
ad::Var avp_rpo_loss(const DpoTerms& terms, RunningNorm& dpo_norm, RunningNorm& fm_norm,
                     LossMode mode, bool update_stats = true);

// Names of trainable parameters. freeze_top keeps the last single-modal
// block, the adaLN layers after it, and the convolution head.
std::set<std::string> build_freeze_mask(const nn::ParamStore& params, FinetuneMode mode,
                                        const gen::BackboneConfig& cfg);

struct RpoSetup {
    const nn::ParamStore* avp_params = nullptr;
    const cavp::SlowFastConfig* avp_cfg = nullptr;
    const gen::BackboneConfig* backbone_cfg = nullptr;
    const gen::LatentCodec* codec = nullptr;
    const std::vector<gen::ClipData>* train_clips = nullptr;
    const std::vector<synth::SyntheticClip>* train_raw = nullptr;  // index-aligned with train_clips
    const std::vector<gen::ClipData>* holdout_clips = nullptr;
    const std::vector<synth::SyntheticClip>* holdout_raw = nullptr;
    RPOConfig config;
    int threads = 0;
};

struct HoldoutEval {
    double mean_s_fs = 0.0, min_s_fs = 0.0, max_s_fs = 0.0;
    double mean_alignment = 0.0;
};

// Samples one candidate per held-out clip and scores it.
HoldoutEval evaluate_holdout(const nn::ParamStore& model, const RpoSetup& setup, uint64_t seed);

struct IterationReport {
    int iteration = 0;
    uint64_t seed = 0;
    HoldoutEval holdout;
    double mean_loss = 0.0;
    double mean_dpo_raw = 0.0;
    double mean_fm_win_raw = 0.0;
    std::vector<double> loss_history;
};

// One full alignment iteration: snapshot the reference, generate and score
// candidates, build preference pairs, fine-tune under the freeze mask, and
// evaluate the result on held-out clips.
nn::ParamStore rpo_iterate(const nn::ParamStore& base, const RpoSetup& setup, int iteration,
                           uint64_t seed, IterationReport* report);

}  // namespace forge::rpo
