// forge: config-driven training and evaluation pipeline for the synthetic
// audio-video generation stack. Subcommands mirror the pipeline stages plus
// ad-hoc generation/scoring utilities.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <optional>

#include "forge/avprpo.hpp"
#include "forge/checkpoint.hpp"
#include "forge/config.hpp"
#include "forge/evalmetrics.hpp"
#include "forge/pipeline.hpp"
#include "forge/serial.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace forge;

namespace {

config::RunConfig load_or_default(const std::string& config_path,
                                  std::optional<uint64_t> seed_override) {
    config::RunConfig cfg =
        config_path.empty() ? config::defaults() : config::load_config(config_path);
    if (seed_override) {
        cfg.seed = *seed_override;
        cfg.config_hash = hash_hex(config::canonical_dump(cfg));
    }
    return cfg;
}

struct LoadedDataset {
    synth::Manifest manifest;
    std::vector<synth::SyntheticClip> clips;
};

LoadedDataset load_dataset(const std::string& dir) {
    LoadedDataset d;
    d.manifest = synth::load_manifest(dir);
    for (size_t i = 0; i < d.manifest.clips.size(); ++i)
        d.clips.push_back(synth::load_clip(dir, d.manifest, i));
    return d;
}

std::vector<synth::SyntheticClip> train_split(const config::RunConfig& cfg,
                                              const std::vector<synth::SyntheticClip>& clips) {
    size_t n = std::min<size_t>(clips.size(), static_cast<size_t>(cfg.train_clip_count()));
    return {clips.begin(), clips.begin() + n};
}

int run_synth(const std::string& config_path, const std::string& out, int n_override,
              const std::string& preset, std::optional<uint64_t> seed) {
    config::RunConfig cfg = load_or_default(config_path, seed);
    if (!preset.empty()) cfg.dataset.apply_preset(preset);
    int n = n_override >= 0 ? n_override : cfg.n_clips;
    synth::Manifest m = synth::build_dataset(cfg.dataset, n, out,
                                             pipeline::stage_seed(cfg, "synth"));
    std::printf("wrote %zu clips to %s (content hash %s)\n", m.clips.size(), out.c_str(),
                m.content_hash.c_str());
    return 0;
}

int run_pretrain(const std::string& config_path, const std::string& data, const std::string& out,
                 std::optional<uint64_t> seed) {
    config::RunConfig cfg = load_or_default(config_path, seed);
    LoadedDataset d = load_dataset(data);
    cavp::PretrainHyper hyper = cfg.pretrain;
    hyper.seed = pipeline::stage_seed(cfg, "pretrain-avp");
    hyper.threads = cfg.threads;
    auto res = cavp::pretrain_avp(train_split(cfg, d.clips), cfg.dataset.segments, cfg.encoder,
                                  hyper);
    CheckpointMeta meta;
    meta.section = "sfcavp";
    meta.config_hash = cfg.config_hash;
    meta.extra = json{{"alpha", cfg.encoder.alpha},
                      {"beta", cfg.encoder.beta},
                      {"embed_dim", cfg.encoder.embed_dim()},
                      {"tau", res.params.at("tau").value[0]}};
    save_checkpoint(out, res.params, meta);
    std::printf("pretrained %d steps: loss %.4f -> %.4f, checkpoint %s\n", cfg.pretrain.steps,
                res.loss_history.empty() ? 0.0 : res.loss_history.front(),
                res.loss_history.empty() ? 0.0 : res.loss_history.back(), out.c_str());
    return 0;
}

int run_train_base(const std::string& config_path, const std::string& data,
                   const std::string& avp_path, const std::string& out,
                   std::optional<uint64_t> seed) {
    config::RunConfig cfg = load_or_default(config_path, seed);
    LoadedDataset d = load_dataset(data);
    auto [avp, avp_meta] = load_checkpoint(avp_path);
    gen::LatentCodec codec(cfg.backbone, cfg.seed);
    auto clip_data = gen::prepare_clip_data(train_split(cfg, d.clips), avp, cfg.encoder,
                                            cfg.backbone, codec, cfg.threads);
    gen::TrainBaseHyper hyper = cfg.train_base;
    hyper.seed = pipeline::stage_seed(cfg, "train-base");
    auto res = gen::train_base(clip_data, cfg.backbone, hyper);
    CheckpointMeta meta;
    meta.section = "genbackbone";
    meta.config_hash = cfg.config_hash;
    meta.extra = json{{"latent_len", cfg.backbone.latent_len},
                      {"latent_dim", cfg.backbone.latent_dim}};
    save_checkpoint(out, res.params, meta);
    std::printf("trained %d steps: loss %.4f -> %.4f, checkpoint %s\n", cfg.train_base.steps,
                res.loss_history.empty() ? 0.0 : res.loss_history.front(),
                res.loss_history.empty() ? 0.0 : res.loss_history.back(), out.c_str());
    return 0;
}

int run_generate(const std::string& config_path, const std::string& model_path,
                 const std::string& avp_path, const std::string& data, const std::string& video,
                 int n, int steps, std::optional<uint64_t> seed_opt, const std::string& out) {
    config::RunConfig cfg = load_or_default(config_path, seed_opt);
    auto [model, model_meta] = load_checkpoint(model_path);
    auto [avp, avp_meta] = load_checkpoint(avp_path);
    gen::LatentCodec codec(cfg.backbone, cfg.seed);

    std::string data_dir = data.empty() ? video : data;
    LoadedDataset d = load_dataset(data_dir);
    std::vector<size_t> targets;
    for (size_t i = 0; i < d.clips.size(); ++i)
        if (video.empty() || video == data_dir || d.clips[i].clip_id == video) targets.push_back(i);
    if (targets.empty()) throw IngestionError("no clip matching '" + video + "' in " + data_dir);

    std::vector<synth::SyntheticClip> selected;
    for (size_t i : targets) selected.push_back(d.clips[i]);
    auto clip_data = gen::prepare_clip_data(selected, avp, cfg.encoder, cfg.backbone, codec,
                                            cfg.threads);

    fs::create_directories(out);
    json manifest = json::array();
    for (size_t i = 0; i < clip_data.size(); ++i) {
        for (int k = 0; k < n; ++k) {
            uint64_t s = derive_seed(cfg.seed, "generate",
                                     static_cast<uint64_t>(i) * static_cast<uint64_t>(n) +
                                         static_cast<uint64_t>(k));
            Tensor latent = gen::sample(model, clip_data[i].seg_feats, steps, s, cfg.backbone);
            Tensor spec = codec.decode(latent);
            std::string stem = clip_data[i].clip_id + ".gen" + std::to_string(k);
            write_array_file(fs::path(out) / (stem + ".latent.bin"), latent);
            write_array_file(fs::path(out) / (stem + ".spec.bin"), spec);
            manifest.push_back({{"clip_id", clip_data[i].clip_id},
                                {"sample", k},
                                {"seed", s},
                                {"latent_file", stem + ".latent.bin"},
                                {"spec_file", stem + ".spec.bin"}});
        }
    }
    write_text_file(fs::path(out) / "gen_manifest.json",
                    json{{"samples", manifest}, {"steps", steps}}.dump(2) + "\n");
    std::printf("generated %zu samples into %s\n", manifest.size(), out.c_str());
    return 0;
}

int run_score(const std::string& config_path, const std::string& avp_path, const std::string& data,
              const std::string& gen_dir, const std::string& out) {
    config::RunConfig cfg = load_or_default(config_path, std::nullopt);
    auto [avp, avp_meta] = load_checkpoint(avp_path);
    gen::LatentCodec codec(cfg.backbone, cfg.seed);
    LoadedDataset d = load_dataset(data);

    json gm = json::parse(read_text_file(fs::path(gen_dir) / "gen_manifest.json"));
    json rows = json::array();
    for (const auto& sample : gm.at("samples")) {
        std::string clip_id = sample.at("clip_id").get<std::string>();
        const synth::SyntheticClip* clip = nullptr;
        for (const auto& c : d.clips)
            if (c.clip_id == clip_id) clip = &c;
        if (!clip) throw IngestionError("scored clip '" + clip_id + "' not in dataset " + data);
        Tensor latent = read_array_file(fs::path(gen_dir) /
                                        sample.at("latent_file").get<std::string>());
        rpo::RewardScore score = rpo::score_candidate(avp, cfg.encoder, clip->video, latent, codec,
                                                      cfg.dataset.segments);
        rows.push_back({{"clip_id", clip_id},
                        {"sample", sample.at("sample")},
                        {"s_fs", score.s_fs},
                        {"per_segment", score.per_segment}});
        std::printf("%s sample %d: s_fs=%.4f\n", clip_id.c_str(), sample.at("sample").get<int>(),
                    score.s_fs);
    }
    if (!out.empty()) write_text_file(out, json{{"scores", rows}}.dump(2) + "\n");
    return 0;
}

int run_rpo(const std::string& config_path, const std::string& base_path,
            const std::string& avp_path, const std::string& data, int iters_override,
            std::optional<uint64_t> seed, const std::string& out) {
    config::RunConfig cfg = load_or_default(config_path, seed);
    if (iters_override > 0) cfg.rpo.iterations = iters_override;
    auto [avp, avp_meta] = load_checkpoint(avp_path);
    auto [base, base_meta] = load_checkpoint(base_path);
    gen::LatentCodec codec(cfg.backbone, cfg.seed);
    LoadedDataset d = load_dataset(data);

    auto train_all = train_split(cfg, d.clips);
    std::vector<synth::SyntheticClip> train_raw(
        train_all.begin(),
        train_all.begin() + std::min<size_t>(train_all.size(),
                                             static_cast<size_t>(cfg.rpo_train_clips)));
    std::vector<synth::SyntheticClip> holdout_raw(d.clips.begin() + train_all.size(),
                                                  d.clips.end());
    auto train_data = gen::prepare_clip_data(train_raw, avp, cfg.encoder, cfg.backbone, codec,
                                             cfg.threads);
    auto holdout_data = gen::prepare_clip_data(holdout_raw, avp, cfg.encoder, cfg.backbone, codec,
                                               cfg.threads);

    rpo::RpoSetup setup;
    setup.avp_params = &avp;
    setup.avp_cfg = &cfg.encoder;
    setup.backbone_cfg = &cfg.backbone;
    setup.codec = &codec;
    setup.train_clips = &train_data;
    setup.train_raw = &train_raw;
    setup.holdout_clips = &holdout_data;
    setup.holdout_raw = &holdout_raw;
    setup.config = cfg.rpo;
    setup.threads = cfg.threads;

    fs::create_directories(out);
    uint64_t rpo_seed = pipeline::stage_seed(cfg, "rpo");
    std::string curve = "iteration,mean_s_fs,min_s_fs,max_s_fs,alignment\n";
    char line[192];
    auto add_curve_row = [&](int k, const rpo::HoldoutEval& h) {
        std::snprintf(line, sizeof line, "%d,%.9g,%.9g,%.9g,%.9g\n", k, h.mean_s_fs, h.min_s_fs,
                      h.max_s_fs, h.mean_alignment);
        curve += line;
    };

    rpo::HoldoutEval base_eval =
        rpo::evaluate_holdout(base, setup, derive_seed(rpo_seed, "baseline"));
    add_curve_row(0, base_eval);
    write_text_file(fs::path(out) / "iter_0.json",
                    json{{"iteration", 0},
                         {"mean_s_fs", base_eval.mean_s_fs},
                         {"min_s_fs", base_eval.min_s_fs},
                         {"max_s_fs", base_eval.max_s_fs},
                         {"alignment", base_eval.mean_alignment},
                         {"seed", rpo_seed}}
                            .dump(2) +
                        "\n");

    nn::ParamStore model = base.clone();
    for (int k = 1; k <= cfg.rpo.iterations; ++k) {
        rpo::IterationReport report;
        model = rpo::rpo_iterate(model, setup, k - 1, rpo_seed, &report);
        fs::path ckpt = fs::path(out) / ("model_iter_" + std::to_string(k) + ".ckpt");
        CheckpointMeta meta;
        meta.section = "genbackbone";
        meta.config_hash = cfg.config_hash;
        auto mask = rpo::build_freeze_mask(model, cfg.rpo.finetune_mode, cfg.backbone);
        meta.extra = json{{"iteration", k},
                          {"trainable", std::vector<std::string>(mask.begin(), mask.end())}};
        save_checkpoint(ckpt, model, meta);
        json row{{"iteration", k},
                 {"mean_s_fs", report.holdout.mean_s_fs},
                 {"min_s_fs", report.holdout.min_s_fs},
                 {"max_s_fs", report.holdout.max_s_fs},
                 {"alignment", report.holdout.mean_alignment},
                 {"mean_loss", report.mean_loss},
                 {"mean_dpo_raw", report.mean_dpo_raw},
                 {"mean_fm_win_raw", report.mean_fm_win_raw},
                 {"seed", rpo_seed}};
        write_text_file(fs::path(out) / ("iter_" + std::to_string(k) + ".json"),
                        row.dump(2) + "\n");
        add_curve_row(k, report.holdout);
        std::printf("iteration %d: mean holdout s_fs %.4f, alignment %.4f, mean loss %.4f\n", k,
                    report.holdout.mean_s_fs, report.holdout.mean_alignment, report.mean_loss);
    }
    write_text_file(fs::path(out) / "rpo_curve.csv", curve);
    return 0;
}

int run_eval(const std::string& config_path, const std::string& model_path,
             const std::string& avp_path, const std::string& data, const std::string& out,
             std::optional<uint64_t> seed) {
    config::RunConfig cfg = load_or_default(config_path, seed);
    auto [avp, avp_meta] = load_checkpoint(avp_path);
    auto [model, model_meta] = load_checkpoint(model_path);
    gen::LatentCodec codec(cfg.backbone, cfg.seed);
    LoadedDataset d = load_dataset(data);
    auto train_all = train_split(cfg, d.clips);
    std::vector<synth::SyntheticClip> holdout_raw(d.clips.begin() + train_all.size(),
                                                  d.clips.end());
    if (holdout_raw.empty()) throw ConfigError("eval: dataset has no held-out clips");
    auto holdout_data = gen::prepare_clip_data(holdout_raw, avp, cfg.encoder, cfg.backbone, codec,
                                               cfg.threads);
    eval::ModelEval ev = eval::evaluate_model(model, cfg.backbone, avp, cfg.encoder, codec,
                                              holdout_data, holdout_raw, cfg.eval_sample_steps,
                                              pipeline::stage_seed(cfg, "eval"), cfg.threads);
    json per_clip = json::array();
    for (const auto& r : ev.per_clip)
        per_clip.push_back({{"clip_id", r.clip_id},
                            {"s_fs", r.s_fs},
                            {"alignment", r.alignment},
                            {"onset_err", r.onset_err}});
    json report{{"metadata",
                 {{"model_hash", params_hash(model)},
                  {"dataset_hash", d.manifest.content_hash},
                  {"seed", pipeline::stage_seed(cfg, "eval")},
                  {"proxy_note", "all metrics are desk-scale proxies computed from the frozen "
                                 "contrastive encoder and synthetic ground truth"}}},
                {"set_level",
                 {{"fed", ev.fed},
                  {"mean_s_fs", ev.mean_s_fs},
                  {"mean_alignment", ev.mean_alignment},
                  {"mean_onset_err", ev.mean_onset_err}}},
                {"per_clip", per_clip}};
    write_text_file(out, report.dump(2) + "\n");
    std::printf("eval: fed %.4f, mean s_fs %.4f, alignment %.4f, onset err %.4f s -> %s\n", ev.fed,
                ev.mean_s_fs, ev.mean_alignment, ev.mean_onset_err, out.c_str());
    return 0;
}

int run_full_pipeline(const std::string& config_path, const std::string& out,
                      const std::string& stages_csv, std::optional<uint64_t> seed) {
    config::RunConfig cfg = load_or_default(config_path, seed);
    std::vector<std::string> stages;
    if (!stages_csv.empty()) {
        size_t pos = 0;
        while (pos <= stages_csv.size()) {
            size_t next = stages_csv.find(',', pos);
            if (next == std::string::npos) {
                stages.push_back(stages_csv.substr(pos));
                break;
            }
            stages.push_back(stages_csv.substr(pos, next - pos));
            pos = next + 1;
        }
    }
    pipeline::RunManifest m = pipeline::run_pipeline(cfg, out, stages);
    std::printf("pipeline complete: %zu stages, manifest content hash %s\n", m.stages.size(),
                m.content_hash.c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"forge: synthetic audio-video generation training stack"};
    app.require_subcommand(1);

    std::string config_path, data, out, avp_path, model_path, base_path, video, preset, gen_dir,
        stages_csv;
    int n_override = -1, n_samples = 1, steps = gen::kDefaultSampleSteps, iters = -1;
    std::optional<uint64_t> seed;
    auto add_seed = [&](CLI::App* cmd) {
        cmd->add_option("--seed", seed, "override the config's global seed");
    };

    auto* synth_cmd = app.add_subcommand("synth", "generate a synthetic paired dataset");
    synth_cmd->add_option("--config", config_path, "run config JSON");
    synth_cmd->add_option("--out", out, "output dataset directory")->required();
    synth_cmd->add_option("--n", n_override, "number of clips (overrides config)");
    synth_cmd->add_option("--preset", preset, "single | multi");
    add_seed(synth_cmd);

    auto* pre_cmd = app.add_subcommand("pretrain-avp", "contrastive pretraining of the encoders");
    pre_cmd->add_option("--config", config_path, "run config JSON");
    pre_cmd->add_option("--data", data, "dataset directory")->required();
    pre_cmd->add_option("--out", out, "output checkpoint")->required();
    add_seed(pre_cmd);

    auto* base_cmd = app.add_subcommand("train-base", "flow-matching training of the backbone");
    base_cmd->add_option("--config", config_path, "run config JSON");
    base_cmd->add_option("--data", data, "dataset directory")->required();
    base_cmd->add_option("--avp", avp_path, "encoder checkpoint")->required();
    base_cmd->add_option("--out", out, "output checkpoint")->required();
    add_seed(base_cmd);

    auto* gen_cmd = app.add_subcommand("generate", "sample audio latents for videos");
    gen_cmd->add_option("--config", config_path, "run config JSON");
    gen_cmd->add_option("--model", model_path, "backbone checkpoint")->required();
    gen_cmd->add_option("--avp", avp_path, "encoder checkpoint")->required();
    gen_cmd->add_option("--video", video, "clip id within --data, or a dataset directory");
    gen_cmd->add_option("--data", data, "dataset directory (when --video is a clip id)");
    gen_cmd->add_option("--n", n_samples, "samples per clip");
    gen_cmd->add_option("--steps", steps, "integration steps");
    gen_cmd->add_option("--out", out, "output directory")->required();
    add_seed(gen_cmd);

    auto* score_cmd = app.add_subcommand("score", "reward-score generated audio");
    score_cmd->add_option("--config", config_path, "run config JSON");
    score_cmd->add_option("--avp", avp_path, "encoder checkpoint")->required();
    score_cmd->add_option("--data", data, "dataset directory")->required();
    score_cmd->add_option("--gen", gen_dir, "directory produced by generate")->required();
    score_cmd->add_option("--out", out, "optional scores JSON");

    auto* rpo_cmd = app.add_subcommand("rpo", "preference-optimization iterations");
    rpo_cmd->add_option("--config", config_path, "run config JSON");
    rpo_cmd->add_option("--base", base_path, "base backbone checkpoint")->required();
    rpo_cmd->add_option("--avp", avp_path, "encoder checkpoint")->required();
    rpo_cmd->add_option("--data", data, "dataset directory")->required();
    rpo_cmd->add_option("--iters", iters, "number of iterations (overrides config)");
    rpo_cmd->add_option("--out", out, "output directory")->required();
    add_seed(rpo_cmd);

    auto* eval_cmd = app.add_subcommand("eval", "evaluate a model on held-out clips");
    eval_cmd->add_option("--config", config_path, "run config JSON");
    eval_cmd->add_option("--model", model_path, "backbone checkpoint")->required();
    eval_cmd->add_option("--avp", avp_path, "encoder checkpoint")->required();
    eval_cmd->add_option("--data", data, "dataset directory")->required();
    eval_cmd->add_option("--out", out, "report JSON path")->required();
    add_seed(eval_cmd);

    auto* report_cmd = app.add_subcommand("report", "aggregate iteration rows into curves");
    report_cmd->add_option("--run", out, "run directory")->required();

    auto* pipe_cmd = app.add_subcommand("pipeline", "run all stages end to end");
    pipe_cmd->add_option("--config", config_path, "run config JSON");
    pipe_cmd->add_option("--out", out, "run directory")->required();
    pipe_cmd->add_option("--stages", stages_csv, "comma-separated stage subset");
    add_seed(pipe_cmd);

    CLI11_PARSE(app, argc, argv);

    try {
        if (synth_cmd->parsed()) return run_synth(config_path, out, n_override, preset, seed);
        if (pre_cmd->parsed()) return run_pretrain(config_path, data, out, seed);
        if (base_cmd->parsed()) return run_train_base(config_path, data, avp_path, out, seed);
        if (gen_cmd->parsed())
            return run_generate(config_path, model_path, avp_path, data, video, n_samples, steps,
                                seed, out);
        if (score_cmd->parsed()) return run_score(config_path, avp_path, data, gen_dir, out);
        if (rpo_cmd->parsed())
            return run_rpo(config_path, base_path, avp_path, data, iters, seed, out);
        if (eval_cmd->parsed())
            return run_eval(config_path, model_path, avp_path, data, out, seed);
        if (report_cmd->parsed()) {
            eval::make_report(out);
            std::printf("report written to %s\n", (fs::path(out) / "eval").string().c_str());
            return 0;
        }
        if (pipe_cmd->parsed()) return run_full_pipeline(config_path, out, stages_csv, seed);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const DependencyError& e) {
        std::fprintf(stderr, "dependency error: %s\n", e.what());
        return 3;
    } catch (const IngestionError& e) {
        std::fprintf(stderr, "input error: %s\n", e.what());
        return 3;
    } catch (const NumericalError& e) {
        std::fprintf(stderr, "numerical abort: %s\n", e.what());
        return 4;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
