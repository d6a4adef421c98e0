#include "forge/pipeline.hpp"

#include <algorithm>
#include <chrono>

#include <json.hpp>

#include "forge/avprpo.hpp"
#include "forge/checkpoint.hpp"
#include "forge/evalmetrics.hpp"
#include "forge/serial.hpp"

namespace forge::pipeline {

using nlohmann::json;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

const std::vector<std::string>& all_stages() {
    static const std::vector<std::string> stages = {"synth",     "pretrain-avp", "train-base",
                                                    "rpo",       "eval",         "report"};
    return stages;
}

uint64_t stage_seed(const config::RunConfig& cfg, const std::string& stage) {
    return derive_seed(cfg.seed, "stage." + stage);
}

namespace {

struct Context {
    const config::RunConfig& cfg;
    fs::path dir;

    // Lazily loaded shared state.
    std::unique_ptr<synth::Manifest> manifest;
    std::vector<synth::SyntheticClip> clips;  // all clips, manifest order

    void require(const fs::path& p, const std::string& stage) const {
        if (!fs::exists(p))
            throw DependencyError("stage '" + stage + "' requires missing input " + p.string());
    }

    void load_dataset(const std::string& stage) {
        require(dir / "data" / "manifest.json", stage);
        if (manifest) return;
        manifest = std::make_unique<synth::Manifest>(synth::load_manifest(dir / "data"));
        clips.clear();
        clips.reserve(manifest->clips.size());
        for (size_t i = 0; i < manifest->clips.size(); ++i)
            clips.push_back(synth::load_clip(dir / "data", *manifest, i));
    }

    std::vector<synth::SyntheticClip> train_clips() const {
        int n_train = std::min<int>(cfg.train_clip_count(), static_cast<int>(clips.size()));
        return {clips.begin(), clips.begin() + n_train};
    }
    std::vector<synth::SyntheticClip> holdout_raw() const {
        int n_train = std::min<int>(cfg.train_clip_count(), static_cast<int>(clips.size()));
        return {clips.begin() + n_train, clips.end()};
    }
};

std::string file_hash(const fs::path& p) { return hash_file_hex(p); }

void add_output(StageRecord& rec, const fs::path& run_dir, const fs::path& p) {
    rec.outputs.emplace_back(fs::relative(p, run_dir).string(), file_hash(p));
}

json iteration_row(int k, const eval::ModelEval& ev, uint64_t seed, double mean_loss) {
    double mn = ev.per_clip.empty() ? 0.0 : ev.per_clip[0].s_fs;
    double mx = mn;
    for (const auto& r : ev.per_clip) {
        mn = std::min(mn, r.s_fs);
        mx = std::max(mx, r.s_fs);
    }
    return json{{"iteration", k},
                {"mean_s_fs", ev.mean_s_fs},
                {"min_s_fs", mn},
                {"max_s_fs", mx},
                {"alignment", ev.mean_alignment},
                {"fed", ev.fed},
                {"onset_err", ev.mean_onset_err},
                {"mean_loss", mean_loss},
                {"seed", seed}};
}

StageRecord stage_synth(Context& ctx) {
    StageRecord rec;
    rec.name = "synth";
    rec.seed = stage_seed(ctx.cfg, "synth");
    rec.input_hashes["config"] = ctx.cfg.config_hash;
    synth::Manifest m = synth::build_dataset(ctx.cfg.dataset, ctx.cfg.n_clips, ctx.dir / "data",
                                             rec.seed);
    add_output(rec, ctx.dir, ctx.dir / "data" / "manifest.json");
    return rec;
}

StageRecord stage_pretrain(Context& ctx) {
    StageRecord rec;
    rec.name = "pretrain-avp";
    rec.seed = stage_seed(ctx.cfg, "pretrain-avp");
    ctx.load_dataset(rec.name);
    rec.input_hashes["config"] = ctx.cfg.config_hash;
    rec.input_hashes["dataset"] = ctx.manifest->content_hash;

    cavp::PretrainHyper hyper = ctx.cfg.pretrain;
    hyper.seed = rec.seed;
    hyper.threads = ctx.cfg.threads;
    auto train = ctx.train_clips();
    cavp::PretrainResult res = cavp::pretrain_avp(train, ctx.cfg.dataset.segments,
                                                  ctx.cfg.encoder, hyper);

    fs::create_directories(ctx.dir / "ckpt");
    CheckpointMeta meta;
    meta.section = "sfcavp";
    meta.config_hash = ctx.cfg.config_hash;
    meta.extra = json{{"alpha", ctx.cfg.encoder.alpha},
                      {"beta", ctx.cfg.encoder.beta},
                      {"embed_dim", ctx.cfg.encoder.embed_dim()},
                      {"tau", res.params.at("tau").value[0]},
                      {"steps", hyper.steps}};
    save_checkpoint(ctx.dir / "ckpt" / "avp.ckpt", res.params, meta);
    write_text_file(ctx.dir / "ckpt" / "avp_log.json",
                    json{{"loss", res.loss_history}}.dump(2) + "\n");
    add_output(rec, ctx.dir, ctx.dir / "ckpt" / "avp.ckpt");
    add_output(rec, ctx.dir, ctx.dir / "ckpt" / "avp_log.json");
    return rec;
}

StageRecord stage_train_base(Context& ctx) {
    StageRecord rec;
    rec.name = "train-base";
    rec.seed = stage_seed(ctx.cfg, "train-base");
    ctx.load_dataset(rec.name);
    ctx.require(ctx.dir / "ckpt" / "avp.ckpt", rec.name);
    rec.input_hashes["config"] = ctx.cfg.config_hash;
    rec.input_hashes["dataset"] = ctx.manifest->content_hash;
    rec.input_hashes["avp"] = file_hash(ctx.dir / "ckpt" / "avp.ckpt");

    auto [avp, avp_meta] = load_checkpoint(ctx.dir / "ckpt" / "avp.ckpt");
    gen::LatentCodec codec(ctx.cfg.backbone, ctx.cfg.seed);
    auto train = ctx.train_clips();
    auto data = gen::prepare_clip_data(train, avp, ctx.cfg.encoder, ctx.cfg.backbone, codec,
                                       ctx.cfg.threads);
    gen::TrainBaseHyper hyper = ctx.cfg.train_base;
    hyper.seed = rec.seed;
    gen::TrainBaseResult res = gen::train_base(data, ctx.cfg.backbone, hyper);

    CheckpointMeta meta;
    meta.section = "genbackbone";
    meta.config_hash = ctx.cfg.config_hash;
    meta.extra = json{{"latent_len", ctx.cfg.backbone.latent_len},
                      {"latent_dim", ctx.cfg.backbone.latent_dim},
                      {"steps", hyper.steps}};
    save_checkpoint(ctx.dir / "ckpt" / "base.ckpt", res.params, meta);
    write_text_file(ctx.dir / "ckpt" / "base_log.json",
                    json{{"loss", res.loss_history}}.dump(2) + "\n");
    add_output(rec, ctx.dir, ctx.dir / "ckpt" / "base.ckpt");
    add_output(rec, ctx.dir, ctx.dir / "ckpt" / "base_log.json");
    return rec;
}

StageRecord stage_rpo(Context& ctx) {
    StageRecord rec;
    rec.name = "rpo";
    rec.seed = stage_seed(ctx.cfg, "rpo");
    ctx.load_dataset(rec.name);
    ctx.require(ctx.dir / "ckpt" / "avp.ckpt", rec.name);
    ctx.require(ctx.dir / "ckpt" / "base.ckpt", rec.name);
    rec.input_hashes["config"] = ctx.cfg.config_hash;
    rec.input_hashes["dataset"] = ctx.manifest->content_hash;
    rec.input_hashes["avp"] = file_hash(ctx.dir / "ckpt" / "avp.ckpt");
    rec.input_hashes["base"] = file_hash(ctx.dir / "ckpt" / "base.ckpt");

    auto [avp, avp_meta] = load_checkpoint(ctx.dir / "ckpt" / "avp.ckpt");
    auto [base, base_meta] = load_checkpoint(ctx.dir / "ckpt" / "base.ckpt");
    gen::LatentCodec codec(ctx.cfg.backbone, ctx.cfg.seed);

    auto train_raw_all = ctx.train_clips();
    std::vector<synth::SyntheticClip> train_raw(
        train_raw_all.begin(),
        train_raw_all.begin() + std::min<size_t>(train_raw_all.size(),
                                                 static_cast<size_t>(ctx.cfg.rpo_train_clips)));
    auto holdout_raw = ctx.holdout_raw();
    auto train_data = gen::prepare_clip_data(train_raw, avp, ctx.cfg.encoder, ctx.cfg.backbone,
                                             codec, ctx.cfg.threads);
    auto holdout_data = gen::prepare_clip_data(holdout_raw, avp, ctx.cfg.encoder, ctx.cfg.backbone,
                                               codec, ctx.cfg.threads);

    rpo::RpoSetup setup;
    setup.avp_params = &avp;
    setup.avp_cfg = &ctx.cfg.encoder;
    setup.backbone_cfg = &ctx.cfg.backbone;
    setup.codec = &codec;
    setup.train_clips = &train_data;
    setup.train_raw = &train_raw;
    setup.config = ctx.cfg.rpo;
    setup.threads = ctx.cfg.threads;
    // Holdout scoring happens below through the shared evaluation path;
    // skip the in-loop evaluation.
    std::vector<gen::ClipData> no_holdout;
    std::vector<synth::SyntheticClip> no_holdout_raw;
    setup.holdout_clips = &no_holdout;
    setup.holdout_raw = &no_holdout_raw;

    fs::create_directories(ctx.dir / "rpo");
    // One shared evaluation seed so every iteration row is a paired
    // comparison over the same noise draws.
    uint64_t eval_seed = derive_seed(rec.seed, "iteration_eval");

    eval::ModelEval ev0 = eval::evaluate_model(base, ctx.cfg.backbone, avp, ctx.cfg.encoder, codec,
                                               holdout_data, holdout_raw,
                                               ctx.cfg.eval_sample_steps, eval_seed,
                                               ctx.cfg.threads);
    write_text_file(ctx.dir / "rpo" / "iter_0.json",
                    iteration_row(0, ev0, rec.seed, 0.0).dump(2) + "\n");
    add_output(rec, ctx.dir, ctx.dir / "rpo" / "iter_0.json");

    nn::ParamStore model = base.clone();
    for (int k = 1; k <= ctx.cfg.rpo.iterations; ++k) {
        rpo::IterationReport report;
        model = rpo::rpo_iterate(model, setup, k - 1, rec.seed, &report);

        fs::path ckpt = ctx.dir / "rpo" / ("model_iter_" + std::to_string(k) + ".ckpt");
        CheckpointMeta meta;
        meta.section = "genbackbone";
        meta.config_hash = ctx.cfg.config_hash;
        auto mask = rpo::build_freeze_mask(model, ctx.cfg.rpo.finetune_mode, ctx.cfg.backbone);
        meta.extra = json{{"iteration", k},
                          {"mean_loss", report.mean_loss},
                          {"trainable", std::vector<std::string>(mask.begin(), mask.end())}};
        save_checkpoint(ckpt, model, meta);

        eval::ModelEval ev = eval::evaluate_model(model, ctx.cfg.backbone, avp, ctx.cfg.encoder,
                                                  codec, holdout_data, holdout_raw,
                                                  ctx.cfg.eval_sample_steps, eval_seed,
                                                  ctx.cfg.threads);
        write_text_file(ctx.dir / "rpo" / ("iter_" + std::to_string(k) + ".json"),
                        iteration_row(k, ev, rec.seed, report.mean_loss).dump(2) + "\n");
        add_output(rec, ctx.dir, ckpt);
        add_output(rec, ctx.dir, ctx.dir / "rpo" / ("iter_" + std::to_string(k) + ".json"));
    }
    return rec;
}

StageRecord stage_eval(Context& ctx) {
    StageRecord rec;
    rec.name = "eval";
    rec.seed = stage_seed(ctx.cfg, "eval");
    ctx.load_dataset(rec.name);
    ctx.require(ctx.dir / "ckpt" / "avp.ckpt", rec.name);
    fs::path model_path = ctx.dir / "rpo" /
                          ("model_iter_" + std::to_string(ctx.cfg.rpo.iterations) + ".ckpt");
    if (!fs::exists(model_path)) model_path = ctx.dir / "ckpt" / "base.ckpt";
    ctx.require(model_path, rec.name);
    rec.input_hashes["config"] = ctx.cfg.config_hash;
    rec.input_hashes["dataset"] = ctx.manifest->content_hash;
    rec.input_hashes["model"] = file_hash(model_path);

    auto [avp, avp_meta] = load_checkpoint(ctx.dir / "ckpt" / "avp.ckpt");
    auto [model, model_meta] = load_checkpoint(model_path);
    gen::LatentCodec codec(ctx.cfg.backbone, ctx.cfg.seed);
    auto holdout_raw = ctx.holdout_raw();
    auto holdout_data = gen::prepare_clip_data(holdout_raw, avp, ctx.cfg.encoder, ctx.cfg.backbone,
                                               codec, ctx.cfg.threads);
    eval::ModelEval ev = eval::evaluate_model(model, ctx.cfg.backbone, avp, ctx.cfg.encoder, codec,
                                              holdout_data, holdout_raw, ctx.cfg.eval_sample_steps,
                                              rec.seed, ctx.cfg.threads);

    json per_clip = json::array();
    for (const auto& r : ev.per_clip)
        per_clip.push_back({{"clip_id", r.clip_id},
                            {"s_fs", r.s_fs},
                            {"alignment", r.alignment},
                            {"onset_err", r.onset_err}});
    json out{{"metadata",
              {{"model_hash", params_hash(model)},
               {"dataset_hash", ctx.manifest->content_hash},
               {"seed", rec.seed},
               {"proxy_note", "all metrics are desk-scale proxies computed from the frozen "
                              "contrastive encoder and synthetic ground truth"}}},
             {"set_level",
              {{"fed", ev.fed},
               {"mean_s_fs", ev.mean_s_fs},
               {"mean_alignment", ev.mean_alignment},
               {"mean_onset_err", ev.mean_onset_err}}},
             {"per_clip", per_clip}};
    fs::create_directories(ctx.dir / "eval");
    write_text_file(ctx.dir / "eval" / "model_eval.json", out.dump(2) + "\n");
    add_output(rec, ctx.dir, ctx.dir / "eval" / "model_eval.json");
    return rec;
}

StageRecord stage_report(Context& ctx) {
    StageRecord rec;
    rec.name = "report";
    rec.seed = stage_seed(ctx.cfg, "report");
    rec.input_hashes["config"] = ctx.cfg.config_hash;
    eval::make_report(ctx.dir);
    add_output(rec, ctx.dir, ctx.dir / "eval" / "curves.csv");
    add_output(rec, ctx.dir, ctx.dir / "eval" / "report.json");
    return rec;
}

json manifest_to_json_body(const RunManifest& m) {
    json stages = json::array();
    for (const auto& s : m.stages) {
        json outs = json::array();
        for (const auto& [path, hash] : s.outputs) outs.push_back({{"path", path}, {"hash", hash}});
        stages.push_back({{"name", s.name},
                          {"input_hashes", s.input_hashes},
                          {"outputs", outs},
                          {"seed", s.seed}});
    }
    return json{{"format_version", m.format_version},
                {"config_hash", m.config_hash},
                {"stages", stages}};
}

}  // namespace

std::string manifest_content_hash(const RunManifest& m) {
    return hash_hex(manifest_to_json_body(m).dump());
}

RunManifest run_pipeline(const config::RunConfig& cfg, const fs::path& run_dir,
                         std::vector<std::string> stages) {
    cfg.validate();
    if (stages.empty()) stages = all_stages();
    // Execute in dependency order regardless of the order given.
    std::vector<std::string> ordered;
    for (const auto& s : all_stages())
        if (std::find(stages.begin(), stages.end(), s) != stages.end()) ordered.push_back(s);
    if (ordered.size() != stages.size()) {
        std::string bad;
        for (const auto& s : stages)
            if (std::find(all_stages().begin(), all_stages().end(), s) == all_stages().end())
                bad += (bad.empty() ? "" : ", ") + s;
        throw ConfigError("unknown stage(s): " + bad);
    }

    fs::create_directories(run_dir);
    RunManifest manifest;
    manifest.config_hash = cfg.config_hash;
    Context ctx{cfg, run_dir, nullptr, {}};

    for (const auto& stage : ordered) {
        auto t0 = Clock::now();
        StageRecord rec;
        if (stage == "synth") rec = stage_synth(ctx);
        else if (stage == "pretrain-avp") rec = stage_pretrain(ctx);
        else if (stage == "train-base") rec = stage_train_base(ctx);
        else if (stage == "rpo") rec = stage_rpo(ctx);
        else if (stage == "eval") rec = stage_eval(ctx);
        else rec = stage_report(ctx);
        rec.wall_ms = std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
        manifest.stages.push_back(std::move(rec));
    }

    manifest.content_hash = manifest_content_hash(manifest);
    json j = manifest_to_json_body(manifest);
    j["content_hash"] = manifest.content_hash;
    json walls = json::array();
    for (const auto& s : manifest.stages) walls.push_back(s.wall_ms);
    j["wall_ms"] = walls;
    write_text_file(run_dir / "manifest.json", j.dump(2) + "\n");
    return manifest;
}

RunManifest load_run_manifest(const fs::path& run_dir) {
    json j = json::parse(read_text_file(run_dir / "manifest.json"));
    RunManifest m;
    m.format_version = j.at("format_version").get<int>();
    m.config_hash = j.at("config_hash").get<std::string>();
    for (const auto& js : j.at("stages")) {
        StageRecord s;
        s.name = js.at("name").get<std::string>();
        for (auto it = js.at("input_hashes").begin(); it != js.at("input_hashes").end(); ++it)
            s.input_hashes[it.key()] = it.value().get<std::string>();
        for (const auto& jo : js.at("outputs"))
            s.outputs.emplace_back(jo.at("path").get<std::string>(),
                                   jo.at("hash").get<std::string>());
        s.seed = js.at("seed").get<uint64_t>();
        m.stages.push_back(std::move(s));
    }
    m.content_hash = j.at("content_hash").get<std::string>();
    return m;
}

}  // namespace forge::pipeline
