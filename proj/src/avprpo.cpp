#include "forge/avprpo.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "forge/parallel.hpp"

namespace forge::rpo {

using ad::Var;
using nn::ParamGraph;
using nn::ParamStore;

WinnerMode winner_mode_from_string(const std::string& s) {
    if (s == "ground_truth") return WinnerMode::ground_truth;
    if (s == "best_generated") return WinnerMode::best_generated;
    throw ConfigError("rpo: unknown winner_mode '" + s + "'");
}

LossMode loss_mode_from_string(const std::string& s) {
    if (s == "avp_rpo") return LossMode::avp_rpo;
    if (s == "dpo_fm_only") return LossMode::dpo_fm_only;
    throw ConfigError("rpo: unknown loss_mode '" + s + "'");
}

FinetuneMode finetune_mode_from_string(const std::string& s) {
    if (s == "freeze_top") return FinetuneMode::freeze_top;
    if (s == "full") return FinetuneMode::full;
    throw ConfigError("rpo: unknown finetune_mode '" + s + "'");
}

void RPOConfig::validate() const {
    if (iterations < 1) throw ConfigError("rpo: iterations must be >= 1");
    if (steps_per_iter < 1) throw ConfigError("rpo: steps_per_iter must be >= 1");
    if (candidates < 1) throw ConfigError("rpo: candidates must be >= 1");
    if (lr <= 0.0) throw ConfigError("rpo: lr must be positive");
    if (weight_decay < 0.0) throw ConfigError("rpo: weight_decay must be >= 0");
    if (warmup_steps < 0) throw ConfigError("rpo: warmup_steps must be >= 0");
    if (schedule != "cosine" && schedule != "constant")
        throw ConfigError("rpo: schedule must be 'cosine' or 'constant'");
    if (grad_accum < 1) throw ConfigError("rpo: grad_accum must be >= 1");
    if (grad_clip <= 0.0) throw ConfigError("rpo: grad_clip must be positive");
    if (beta_w <= 0.0) throw ConfigError("rpo: beta_w must be positive");
    if (sample_steps < 1) throw ConfigError("rpo: sample_steps must be >= 1");
}

double order_stat_score(const std::vector<double>& sims) {
    if (sims.empty()) throw ContractViolation("order_stat_score: empty similarity list");
    size_t k = std::max<size_t>(1, sims.size() / 4);
    std::vector<double> sorted = sims;
    std::sort(sorted.begin(), sorted.end());
    double acc = 0.0;
    for (size_t i = 0; i < k; ++i) acc += sorted[i];
    return acc / static_cast<double>(k);
}

RewardScore score_candidate(const ParamStore& avp_params, const cavp::SlowFastConfig& avp_cfg,
                            const Tensor& clip_video, const Tensor& audio_latent,
                            const gen::LatentCodec& codec, int segments) {
    Tensor spec = codec.decode(audio_latent);
    RewardScore score;
    score.per_segment =
        cavp::segment_similarities(avp_params, avp_cfg, clip_video, spec, segments);
    score.s_fs = order_stat_score(score.per_segment);
    return score;
}

CandidateSet generate_candidates(const ParamStore& model, const gen::BackboneConfig& cfg,
                                 const gen::ClipData& clip, int n_candidates,
                                 const std::vector<uint64_t>& seeds, int sample_steps) {
    if (static_cast<int>(seeds.size()) != n_candidates)
        throw ContractViolation("generate_candidates: need exactly " +
                                std::to_string(n_candidates) + " seeds, got " +
                                std::to_string(seeds.size()));
    std::set<uint64_t> unique(seeds.begin(), seeds.end());
    if (unique.size() != seeds.size())
        throw ContractViolation("generate_candidates: seed collision");

    CandidateSet set;
    set.clip_id = clip.clip_id;
    set.ground_truth = clip.latent;
    set.seeds = seeds;
    set.candidates.resize(seeds.size());
    for (size_t j = 0; j < seeds.size(); ++j)
        set.candidates[j] = gen::sample(model, clip.seg_feats, sample_steps, seeds[j], cfg);
    return set;
}

PreferencePair create_preference_pair(const CandidateSet& set,
                                      const std::vector<RewardScore>& scores, WinnerMode mode) {
    if (scores.size() != set.candidates.size())
        throw ContractViolation("create_preference_pair: score count mismatch");
    int loser = 0, best = 0;
    for (size_t i = 1; i < scores.size(); ++i) {
        if (scores[i].s_fs < scores[static_cast<size_t>(loser)].s_fs) loser = static_cast<int>(i);
        if (scores[i].s_fs > scores[static_cast<size_t>(best)].s_fs) best = static_cast<int>(i);
    }
    PreferencePair pair;
    pair.clip_id = set.clip_id;
    pair.loser = set.candidates[static_cast<size_t>(loser)];
    pair.loser_index = loser;
    if (mode == WinnerMode::ground_truth) {
        pair.winner = set.ground_truth;
        pair.winner_index = -1;
    } else {
        pair.winner = set.candidates[static_cast<size_t>(best)];
        pair.winner_index = best;
    }
    return pair;
}

// ---------------------------------------------------------------------------
// normalization
// ---------------------------------------------------------------------------

void RunningNorm::update(double v) {
    if (count_ == 0) {
        mn_ = mx_ = v;
    } else if (count_ < seed_count_) {
        mn_ = std::min(mn_, v);
        mx_ = std::max(mx_, v);
    } else {
        mn_ = std::min(v, decay_ * mn_ + (1.0 - decay_) * v);
        mx_ = std::max(v, decay_ * mx_ + (1.0 - decay_) * v);
    }
    ++count_;
}

double RunningNorm::normalize_frozen(double v) const {
    if (count_ == 0) throw ContractViolation("RunningNorm: normalize before any update");
    double span = mx_ - mn_;
    if (span < 1e-8) return 0.5;
    double out = (v - mn_) / span;
    return std::min(1.0, std::max(0.0, out));
}

double RunningNorm::normalize(double v) {
    update(v);
    return normalize_frozen(v);
}

double RunningNorm::affine_scale() const {
    double span = mx_ - mn_;
    return span < 1e-8 ? 0.0 : 1.0 / span;
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

double dpo_fm_scalar(double e_w, double e_l, double e_ref_w, double e_ref_l, double beta_w) {
    double gap = beta_w * ((e_w - e_ref_w) - (e_l - e_ref_l));
    return std::max(gap, 0.0) + std::log1p(std::exp(-std::abs(gap)));
}

DpoTerms dpo_fm_terms(ParamGraph& policy, const ParamStore& reference, const Tensor& seg_feats,
                      const PreferencePair& pair, const DpoDraws& draws, double beta_w,
                      const gen::BackboneConfig& cfg) {
    if (beta_w <= 0.0) throw ContractViolation("dpo_fm_terms: beta_w must be positive");
    auto [xt_w, ut_w] = gen::interpolate_path(draws.x0_winner, pair.winner, draws.t);
    auto [xt_l, ut_l] = gen::interpolate_path(draws.x0_loser, pair.loser, draws.t);
    gen::ConditionSet cond = gen::make_conditions(seg_feats, draws.t, cfg);

    Var e_w = gen::flow_mse(gen::velocity_forward(policy, draws.t, cond, ad::constant(xt_w), cfg),
                            ut_w);
    Var e_l = gen::flow_mse(gen::velocity_forward(policy, draws.t, cond, ad::constant(xt_l), cfg),
                            ut_l);

    double e_ref_w, e_ref_l;
    {
        ParamGraph ref(const_cast<ParamStore&>(reference), /*frozen=*/true);
        e_ref_w = gen::flow_mse(gen::velocity_forward(ref, draws.t, cond, ad::constant(xt_w), cfg),
                                ut_w)
                      .item();
        e_ref_l = gen::flow_mse(gen::velocity_forward(ref, draws.t, cond, ad::constant(xt_l), cfg),
                                ut_l)
                      .item();
    }

    Var gap = ad::sub(ad::add_scalar(e_w, -e_ref_w), ad::add_scalar(e_l, -e_ref_l));
    DpoTerms terms;
    terms.dpo = ad::softplus(ad::scale(gap, beta_w));
    terms.fm_win = e_w;
    double dv = terms.dpo.item();
    if (!std::isfinite(dv)) throw NumericalError("dpo_fm_terms: non-finite loss");
    return terms;
}

Var avp_rpo_loss(const DpoTerms& terms, RunningNorm& dpo_norm, RunningNorm& fm_norm,
                 LossMode mode, bool update_stats) {
    if (mode == LossMode::dpo_fm_only) return terms.dpo;
    double dpo_v = terms.dpo.item();
    double fm_v = terms.fm_win.item();
    if (update_stats) {
        dpo_norm.update(dpo_v);
        fm_norm.update(fm_v);
    }
    auto normalized = [](const Var& term, const RunningNorm& n) {
        double s = n.affine_scale();
        if (s == 0.0) return ad::add_scalar(ad::scale(term, 0.0), 0.5);
        return ad::scale(ad::add_scalar(term, -n.lo()), s);
    };
    return ad::add(normalized(terms.dpo, dpo_norm), normalized(terms.fm_win, fm_norm));
}

std::set<std::string> build_freeze_mask(const ParamStore& params, FinetuneMode mode,
                                        const gen::BackboneConfig& cfg) {
    std::set<std::string> trainable;
    if (mode == FinetuneMode::full) {
        for (const auto& name : params.names()) trainable.insert(name);
        return trainable;
    }
    std::string last_sm = "sm" + std::to_string(cfg.sm_blocks - 1) + ".";
    for (const auto& name : params.names())
        if (name.rfind(last_sm, 0) == 0 || name.rfind("head.", 0) == 0) trainable.insert(name);
    if (trainable.empty())
        throw ContractViolation("build_freeze_mask: no parameters match " + last_sm + " or head.");
    return trainable;
}

// ---------------------------------------------------------------------------
// iteration
// ---------------------------------------------------------------------------

HoldoutEval evaluate_holdout(const ParamStore& model, const RpoSetup& setup, uint64_t seed) {
    const auto& holdout = *setup.holdout_clips;
    const auto& raw = *setup.holdout_raw;
    if (holdout.empty()) throw ContractViolation("evaluate_holdout: empty holdout set");

    std::vector<double> sfs(holdout.size()), align(holdout.size());
    parallel_for(static_cast<int64_t>(holdout.size()), [&](int64_t i) {
        uint64_t s = derive_seed(seed, "holdout_sample", static_cast<uint64_t>(i));
        Tensor latent = gen::sample(model, holdout[static_cast<size_t>(i)].seg_feats,
                                    setup.config.sample_steps, s, *setup.backbone_cfg);
        RewardScore score = score_candidate(*setup.avp_params, *setup.avp_cfg,
                                            raw[static_cast<size_t>(i)].video, latent,
                                            *setup.codec, setup.backbone_cfg->segments);
        sfs[static_cast<size_t>(i)] = score.s_fs;
        double mean = 0.0;
        for (double v : score.per_segment) mean += v;
        align[static_cast<size_t>(i)] = mean / static_cast<double>(score.per_segment.size());
    }, setup.threads);

    HoldoutEval ev;
    ev.min_s_fs = sfs[0];
    ev.max_s_fs = sfs[0];
    for (size_t i = 0; i < sfs.size(); ++i) {
        ev.mean_s_fs += sfs[i];
        ev.mean_alignment += align[i];
        ev.min_s_fs = std::min(ev.min_s_fs, sfs[i]);
        ev.max_s_fs = std::max(ev.max_s_fs, sfs[i]);
    }
    ev.mean_s_fs /= static_cast<double>(sfs.size());
    ev.mean_alignment /= static_cast<double>(sfs.size());
    return ev;
}

ParamStore rpo_iterate(const ParamStore& base, const RpoSetup& setup, int iteration, uint64_t seed,
                       IterationReport* report) {
    setup.config.validate();
    const auto& cfg = *setup.backbone_cfg;
    const RPOConfig& rc = setup.config;
    const auto& train = *setup.train_clips;
    const auto& train_raw = *setup.train_raw;
    if (train.empty()) throw ContractViolation("rpo_iterate: empty training set");
    if (train.size() != train_raw.size())
        throw ContractViolation("rpo_iterate: clip data and raw clips misaligned");

    // The reference model is re-snapshotted from the iteration's base.
    ParamStore reference = base.clone();
    ParamStore policy = base.clone();

    // Candidate generation, scoring, preference construction (read-only
    // against frozen models; parallel across clips).
    std::vector<PreferencePair> pairs(train.size());
    uint64_t iter_seed = derive_seed(seed, "rpo_iter", static_cast<uint64_t>(iteration));
    parallel_for(static_cast<int64_t>(train.size()), [&](int64_t i) {
        std::vector<uint64_t> seeds;
        for (int j = 0; j < rc.candidates; ++j)
            seeds.push_back(derive_seed(iter_seed, "cand",
                                        static_cast<uint64_t>(i) * static_cast<uint64_t>(rc.candidates) +
                                            static_cast<uint64_t>(j)));
        CandidateSet set = generate_candidates(reference, cfg, train[static_cast<size_t>(i)],
                                               rc.candidates, seeds, rc.sample_steps);
        std::vector<RewardScore> scores;
        scores.reserve(set.candidates.size());
        for (const auto& cand : set.candidates)
            scores.push_back(score_candidate(*setup.avp_params, *setup.avp_cfg,
                                             train_raw[static_cast<size_t>(i)].video, cand,
                                             *setup.codec, cfg.segments));
        pairs[static_cast<size_t>(i)] = create_preference_pair(set, scores, rc.winner_mode);
    }, setup.threads);

    // Fine-tuning.
    std::set<std::string> trainable = build_freeze_mask(policy, rc.finetune_mode, cfg);
    nn::AdamW opt({.lr = rc.lr, .weight_decay = rc.weight_decay});
    RunningNorm dpo_norm, fm_norm;
    Rng rng(derive_seed(iter_seed, "train"));

    std::vector<size_t> order(pairs.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    size_t cursor = order.size();

    IterationReport rep;
    rep.iteration = iteration;
    rep.seed = seed;

    for (int step = 0; step < rc.steps_per_iter; ++step) {
        policy.zero_grads();
        double loss_acc = 0.0;
        for (int micro = 0; micro < rc.grad_accum; ++micro) {
            if (cursor >= order.size()) {
                rng.shuffle(order);
                cursor = 0;
            }
            size_t pi = order[cursor++];
            const PreferencePair& pair = pairs[pi];
            DpoDraws draws;
            draws.t = rng.uniform();
            draws.x0_winner = rng.normal_tensor(pair.winner.dims());
            draws.x0_loser = rng.normal_tensor(pair.loser.dims());

            ParamGraph pg(policy, false);
            DpoTerms terms = dpo_fm_terms(pg, reference, train[pi].seg_feats, pair, draws,
                                          rc.beta_w, cfg);
            Var loss = avp_rpo_loss(terms, dpo_norm, fm_norm, rc.loss_mode);
            double lv = loss.item();
            if (!std::isfinite(lv))
                throw NumericalError("rpo_iterate: non-finite loss at step " +
                                     std::to_string(step));
            loss_acc += lv;
            rep.mean_dpo_raw += terms.dpo.item();
            rep.mean_fm_win_raw += terms.fm_win.item();
            ad::backward(loss);
            pg.harvest_grads();
        }
        // Mean over accumulated micro-batches, then global norm clip.
        for (auto& [name, p] : policy) {
            (void)name;
            p.grad.scale_(1.0 / static_cast<double>(rc.grad_accum));
        }
        nn::clip_grad_norm(policy, rc.grad_clip, &trainable);

        double lr_scale;
        if (step < rc.warmup_steps) {
            lr_scale = static_cast<double>(step + 1) / static_cast<double>(rc.warmup_steps);
        } else if (rc.schedule == "cosine") {
            double progress = static_cast<double>(step - rc.warmup_steps) /
                              std::max(1.0, static_cast<double>(rc.steps_per_iter - rc.warmup_steps));
            lr_scale = 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
        } else {
            lr_scale = 1.0;
        }
        opt.step(policy, lr_scale, &trainable);
        rep.loss_history.push_back(loss_acc / rc.grad_accum);
    }

    double total = 0.0;
    for (double v : rep.loss_history) total += v;
    rep.mean_loss = rep.loss_history.empty() ? 0.0 : total / rep.loss_history.size();
    int n_micro = rc.steps_per_iter * rc.grad_accum;
    rep.mean_dpo_raw /= n_micro;
    rep.mean_fm_win_raw /= n_micro;

    if (setup.holdout_clips && !setup.holdout_clips->empty())
        rep.holdout = evaluate_holdout(policy, setup, derive_seed(iter_seed, "eval"));
    if (report) *report = rep;
    return policy;
}

}  // namespace forge::rpo
