#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "forge/genbackbone.hpp"
#include "forge/sfcavp.hpp"
#include "forge/synthdata.hpp"

namespace forge::eval {

// Plain mean of the per-segment cosine similarities (not the order statistic
// used for reward ranking).
double alignment_score(const nn::ParamStore& avp, const cavp::SlowFastConfig& avp_cfg,
                       const Tensor& video, const Tensor& audio, int segments);

// Mean of the clip's segment audio embeddings; the unit used for the
// distribution-matching metric.
Tensor clip_audio_embedding(const nn::ParamStore& avp, const cavp::SlowFastConfig& avp_cfg,
                            const Tensor& audio, int segments);

// ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)) over row sets of
// embeddings. Falls back to diagonal covariances when either set is smaller
// than D+1 rows; near-singular covariances get a 1e-6 jitter with a warning.
double frechet_embedding_distance(const Tensor& set_a, const Tensor& set_b);

// Mean absolute onset misalignment in seconds between threshold-crossing
// onsets detected per class band and the track's ground-truth onsets.
// Unmatched ground-truth onsets contribute one segment duration each.
double onset_sync_error(const Tensor& audio, const synth::EventTrack& track, int segments);

struct ClipEvalRecord {
    std::string clip_id;
    double s_fs = 0.0;
    double alignment = 0.0;
    double onset_err = 0.0;
};

struct ModelEval {
    double mean_s_fs = 0.0;
    double mean_alignment = 0.0;
    double fed = 0.0;
    double mean_onset_err = 0.0;
    std::vector<ClipEvalRecord> per_clip;  // every held-out clip exactly once
};

// Samples one clip per held-out video and scores the generated audio against
// ground truth. The reference set for the distribution metric is the
// ground-truth audio passed through the same latent round trip, so both sides
// live in the codec's representable subspace.
ModelEval evaluate_model(const nn::ParamStore& model, const gen::BackboneConfig& bb_cfg,
                         const nn::ParamStore& avp, const cavp::SlowFastConfig& avp_cfg,
                         const gen::LatentCodec& codec,
                         const std::vector<gen::ClipData>& holdout,
                         const std::vector<synth::SyntheticClip>& holdout_raw, int sample_steps,
                         uint64_t seed, int threads = 0);

// Reads rpo/iter_<k>.json rows from a run directory and writes
// eval/report.json plus eval/curves.csv (one row per iteration, 0-based,
// iteration 0 being the unaligned base model).
void make_report(const std::filesystem::path& run_dir);

}  // namespace forge::eval
