#include "forge/evalmetrics.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>

#include <json.hpp>

#include "forge/avprpo.hpp"
#include "forge/parallel.hpp"
#include "forge/serial.hpp"

namespace forge::eval {

using nlohmann::json;

double alignment_score(const nn::ParamStore& avp, const cavp::SlowFastConfig& avp_cfg,
                       const Tensor& video, const Tensor& audio, int segments) {
    auto sims = cavp::segment_similarities(avp, avp_cfg, video, audio, segments);
    double acc = 0.0;
    for (double s : sims) acc += s;
    return acc / static_cast<double>(sims.size());
}

Tensor clip_audio_embedding(const nn::ParamStore& avp, const cavp::SlowFastConfig& avp_cfg,
                            const Tensor& audio, int segments) {
    if (audio.dim(0) % segments != 0)
        throw ContractViolation("clip_audio_embedding: segments do not divide " + audio.shape_str());
    int64_t ta = audio.dim(0) / segments;
    Tensor mean({static_cast<int64_t>(avp_cfg.embed_dim())});
    for (int s = 0; s < segments; ++s) {
        Tensor seg({ta, audio.dim(1)});
        std::memcpy(seg.data(), audio.data() + s * ta * audio.dim(1),
                    static_cast<size_t>(seg.numel()) * sizeof(double));
        Tensor e = cavp::encode_segment_value(avp, seg, cavp::Modality::audio, avp_cfg);
        for (int64_t i = 0; i < e.numel(); ++i) mean[i] += e[i];
    }
    mean.scale_(1.0 / static_cast<double>(segments));
    return mean;
}

namespace {

struct Moments {
    Eigen::VectorXd mu;
    Eigen::MatrixXd cov;       // full covariance (population)
    Eigen::VectorXd var_diag;  // diagonal variances
};

Moments fit_moments(const Tensor& set) {
    int64_t n = set.dim(0), d = set.dim(1);
    Moments m;
    m.mu = Eigen::VectorXd::Zero(d);
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < d; ++j) m.mu(j) += set.at(i, j);
    m.mu /= static_cast<double>(n);
    m.cov = Eigen::MatrixXd::Zero(d, d);
    m.var_diag = Eigen::VectorXd::Zero(d);
    for (int64_t i = 0; i < n; ++i) {
        Eigen::VectorXd x(d);
        for (int64_t j = 0; j < d; ++j) x(j) = set.at(i, j) - m.mu(j);
        m.cov.noalias() += x * x.transpose();
        m.var_diag += x.cwiseProduct(x);
    }
    m.cov /= static_cast<double>(n);
    m.var_diag /= static_cast<double>(n);
    return m;
}

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& sym) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(sym);
    Eigen::VectorXd vals = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return eig.eigenvectors() * vals.asDiagonal() * eig.eigenvectors().transpose();
}

}  // namespace

double frechet_embedding_distance(const Tensor& set_a, const Tensor& set_b) {
    if (set_a.rank() != 2 || set_b.rank() != 2 || set_a.dim(1) != set_b.dim(1))
        throw ContractViolation("frechet_embedding_distance: sets must be (n, D) with equal D");
    if (set_a.dim(0) < 1 || set_b.dim(0) < 1)
        throw ContractViolation("frechet_embedding_distance: empty set");

    int64_t d = set_a.dim(1);
    Moments ma = fit_moments(set_a);
    Moments mb = fit_moments(set_b);
    double mean_term = (ma.mu - mb.mu).squaredNorm();

    bool full = std::min(set_a.dim(0), set_b.dim(0)) >= d + 1;
    double trace_term;
    if (!full) {
        trace_term = 0.0;
        for (int64_t j = 0; j < d; ++j) {
            double va = ma.var_diag(j), vb = mb.var_diag(j);
            trace_term += va + vb - 2.0 * std::sqrt(std::max(0.0, va * vb));
        }
    } else {
        auto ensure_regular = [&](Eigen::MatrixXd& cov, const char* which) {
            Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
            if (eig.eigenvalues().minCoeff() < 1e-10) {
                std::fprintf(stderr,
                             "frechet_embedding_distance: near-singular %s covariance, "
                             "applying 1e-6 jitter\n",
                             which);
                cov += 1e-6 * Eigen::MatrixXd::Identity(cov.rows(), cov.cols());
            }
        };
        ensure_regular(ma.cov, "first");
        ensure_regular(mb.cov, "second");
        Eigen::MatrixXd root_a = psd_sqrt(ma.cov);
        // sqrt(S_a S_b) has the same trace as sqrt(root_a S_b root_a), which
        // is symmetric PSD and numerically well behaved.
        Eigen::MatrixXd inner = root_a * mb.cov * root_a;
        inner = 0.5 * (inner + inner.transpose());
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(inner);
        double tr_sqrt = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
        trace_term = ma.cov.trace() + mb.cov.trace() - 2.0 * tr_sqrt;
    }
    return std::max(0.0, mean_term + trace_term);
}

double onset_sync_error(const Tensor& audio, const synth::EventTrack& track, int segments) {
    if (track.events.empty()) throw ContractViolation("onset_sync_error: empty track");
    if (audio.rank() != 2) throw ContractViolation("onset_sync_error: audio must be (T, F)");
    int64_t t_spec = audio.dim(0), n_mels = audio.dim(1);
    double bin_dur = track.clip_len / static_cast<double>(t_spec);
    double seg_dur = track.clip_len / static_cast<double>(segments);

    // Per-class ground-truth onsets and a threshold at half the class's
    // intensity scale.
    std::map<int, std::vector<double>> truth;
    std::map<int, double> scale;
    for (const auto& e : track.events) {
        truth[e.class_id].push_back(e.onset);
        scale[e.class_id] = std::max(scale[e.class_id], e.intensity);
    }

    double total = 0.0;
    int n_onsets = 0;
    for (auto& [cls, onsets] : truth) {
        auto [lo, hi] = synth::class_band(cls, track.n_classes, static_cast<int>(n_mels));
        double thr = 0.5 * scale[cls];

        std::vector<double> detected;
        double prev = 0.0;
        for (int64_t b = 0; b < t_spec; ++b) {
            double energy = 0.0;
            for (int f = lo; f < hi && f < n_mels; ++f) energy += audio.at(b, f);
            energy /= static_cast<double>(hi - lo);
            if (energy >= thr && (b == 0 || prev < thr))
                detected.push_back(static_cast<double>(b) * bin_dur);
            prev = energy;
        }

        // Greedy proximity matching: smallest |dt| first, each side used once.
        struct Cand {
            double dt;
            size_t ti, di;
        };
        std::vector<Cand> cands;
        for (size_t ti = 0; ti < onsets.size(); ++ti)
            for (size_t di = 0; di < detected.size(); ++di)
                cands.push_back({std::abs(onsets[ti] - detected[di]), ti, di});
        std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
            if (a.dt != b.dt) return a.dt < b.dt;
            if (a.ti != b.ti) return a.ti < b.ti;
            return a.di < b.di;
        });
        std::vector<bool> used_t(onsets.size()), used_d(detected.size());
        for (const auto& c : cands) {
            if (used_t[c.ti] || used_d[c.di]) continue;
            used_t[c.ti] = true;
            used_d[c.di] = true;
            total += c.dt;
        }
        for (size_t ti = 0; ti < onsets.size(); ++ti)
            if (!used_t[ti]) total += seg_dur;
        n_onsets += static_cast<int>(onsets.size());
    }
    return total / static_cast<double>(n_onsets);
}

ModelEval evaluate_model(const nn::ParamStore& model, const gen::BackboneConfig& bb_cfg,
                         const nn::ParamStore& avp, const cavp::SlowFastConfig& avp_cfg,
                         const gen::LatentCodec& codec,
                         const std::vector<gen::ClipData>& holdout,
                         const std::vector<synth::SyntheticClip>& holdout_raw, int sample_steps,
                         uint64_t seed, int threads) {
    if (holdout.empty()) throw ContractViolation("evaluate_model: empty holdout set");
    if (holdout.size() != holdout_raw.size())
        throw ContractViolation("evaluate_model: clip data and raw clips misaligned");

    size_t n = holdout.size();
    ModelEval ev;
    ev.per_clip.resize(n);
    Tensor gen_set({static_cast<int64_t>(n), static_cast<int64_t>(avp_cfg.embed_dim())});
    Tensor ref_set({static_cast<int64_t>(n), static_cast<int64_t>(avp_cfg.embed_dim())});

    parallel_for(static_cast<int64_t>(n), [&](int64_t i) {
        const auto& clip = holdout_raw[static_cast<size_t>(i)];
        uint64_t s = derive_seed(seed, "eval_sample", static_cast<uint64_t>(i));
        Tensor latent = gen::sample(model, holdout[static_cast<size_t>(i)].seg_feats, sample_steps,
                                    s, bb_cfg);
        Tensor spec = codec.decode(latent);

        ClipEvalRecord rec;
        rec.clip_id = clip.clip_id;
        auto sims = cavp::segment_similarities(avp, avp_cfg, clip.video, spec, bb_cfg.segments);
        rec.s_fs = rpo::order_stat_score(sims);
        double mean = 0.0;
        for (double v : sims) mean += v;
        rec.alignment = mean / static_cast<double>(sims.size());
        rec.onset_err = onset_sync_error(spec, clip.track, bb_cfg.segments);
        ev.per_clip[static_cast<size_t>(i)] = rec;

        Tensor e_gen = clip_audio_embedding(avp, avp_cfg, spec, bb_cfg.segments);
        Tensor ref_spec = codec.decode(holdout[static_cast<size_t>(i)].latent);
        Tensor e_ref = clip_audio_embedding(avp, avp_cfg, ref_spec, bb_cfg.segments);
        std::memcpy(gen_set.data() + i * avp_cfg.embed_dim(), e_gen.data(),
                    static_cast<size_t>(e_gen.numel()) * sizeof(double));
        std::memcpy(ref_set.data() + i * avp_cfg.embed_dim(), e_ref.data(),
                    static_cast<size_t>(e_ref.numel()) * sizeof(double));
    }, threads);

    for (const auto& rec : ev.per_clip) {
        ev.mean_s_fs += rec.s_fs;
        ev.mean_alignment += rec.alignment;
        ev.mean_onset_err += rec.onset_err;
    }
    ev.mean_s_fs /= static_cast<double>(n);
    ev.mean_alignment /= static_cast<double>(n);
    ev.mean_onset_err /= static_cast<double>(n);
    ev.fed = frechet_embedding_distance(gen_set, ref_set);
    return ev;
}

void make_report(const std::filesystem::path& run_dir) {
    namespace fs = std::filesystem;
    fs::path rpo_dir = run_dir / "rpo";
    if (!fs::exists(rpo_dir))
        throw IngestionError("make_report: no iteration outputs in " + rpo_dir.string());

    std::map<int, json> rows;
    for (const auto& entry : fs::directory_iterator(rpo_dir)) {
        std::string name = entry.path().filename().string();
        if (name.rfind("iter_", 0) != 0 || entry.path().extension() != ".json") continue;
        json j = json::parse(read_text_file(entry.path()));
        rows[j.at("iteration").get<int>()] = j;
    }
    if (rows.empty())
        throw IngestionError("make_report: no iteration outputs in " + rpo_dir.string());
    int expect = 0;
    for (const auto& [k, j] : rows) {
        if (k != expect)
            throw IngestionError("make_report: missing iteration " + std::to_string(expect) +
                                 " in " + rpo_dir.string());
        ++expect;
    }

    fs::create_directories(run_dir / "eval");
    std::string csv = "iteration,mean_s_fs,alignment,fed,onset_err\n";
    json report_rows = json::array();
    char line[256];
    for (const auto& [k, j] : rows) {
        std::snprintf(line, sizeof line, "%d,%.9g,%.9g,%.9g,%.9g\n", k,
                      j.at("mean_s_fs").get<double>(), j.at("alignment").get<double>(),
                      j.at("fed").get<double>(), j.at("onset_err").get<double>());
        csv += line;
        report_rows.push_back(j);
    }
    write_text_file(run_dir / "eval" / "curves.csv", csv);
    json report{{"iterations", report_rows},
                {"n_rows", rows.size()},
                {"proxy_note", "all metrics are desk-scale proxies computed from the frozen "
                               "contrastive encoder and synthetic ground truth"}};
    write_text_file(run_dir / "eval" / "report.json", report.dump(2) + "\n");
}

}  // namespace forge::eval
