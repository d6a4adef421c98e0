#include "forge/config.hpp"

#include <set>

#include "forge/serial.hpp"

namespace forge::config {

using nlohmann::json;

namespace {

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& section) {
    std::string bad;
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!known.count(it.key())) bad += (bad.empty() ? "" : ", ") + it.key();
    if (!bad.empty())
        throw ConfigError("unknown key(s) in " + section + ": " + bad);
}

template <typename T>
void get_if(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

void parse_dataset(const json& j, RunConfig& cfg) {
    reject_unknown(j, {"n_clips", "holdout_clips", "preset", "clip_len", "n_classes", "min_simul",
                       "max_simul", "event_rate", "t_raw", "height", "width", "t_spec", "n_mels",
                       "segments", "noise_floor", "noise_sigma"},
                   "dataset");
    if (j.contains("preset")) cfg.dataset.apply_preset(j.at("preset").get<std::string>());
    get_if(j, "n_clips", cfg.n_clips);
    get_if(j, "holdout_clips", cfg.holdout_clips);
    get_if(j, "clip_len", cfg.dataset.track.clip_len);
    get_if(j, "n_classes", cfg.dataset.track.n_classes);
    get_if(j, "min_simul", cfg.dataset.track.min_simul);
    get_if(j, "max_simul", cfg.dataset.track.max_simul);
    get_if(j, "event_rate", cfg.dataset.track.event_rate);
    get_if(j, "t_raw", cfg.dataset.render.t_raw);
    get_if(j, "height", cfg.dataset.render.height);
    get_if(j, "width", cfg.dataset.render.width);
    get_if(j, "t_spec", cfg.dataset.render.t_spec);
    get_if(j, "n_mels", cfg.dataset.render.n_mels);
    get_if(j, "segments", cfg.dataset.segments);
    get_if(j, "noise_floor", cfg.dataset.render.noise_floor);
    get_if(j, "noise_sigma", cfg.dataset.render.noise_sigma);
}

void parse_encoder(const json& j, RunConfig& cfg) {
    reject_unknown(j, {"alpha", "beta", "base_channels", "stage_channels", "stage_depths",
                       "tau_init"},
                   "encoder");
    get_if(j, "alpha", cfg.encoder.alpha);
    get_if(j, "beta", cfg.encoder.beta);
    get_if(j, "base_channels", cfg.encoder.base_channels);
    get_if(j, "stage_channels", cfg.encoder.stage_channels);
    get_if(j, "stage_depths", cfg.encoder.stage_depths);
    get_if(j, "tau_init", cfg.encoder.tau_init);
}

void parse_pretrain(const json& j, RunConfig& cfg) {
    reject_unknown(j, {"lr", "steps", "batch_clips"}, "pretrain");
    get_if(j, "lr", cfg.pretrain.lr);
    get_if(j, "steps", cfg.pretrain.steps);
    get_if(j, "batch_clips", cfg.pretrain.batch_clips);
}

void parse_backbone(const json& j, RunConfig& cfg) {
    reject_unknown(j, {"latent_len", "latent_dim", "cond_dim", "hidden", "heads", "mm_blocks",
                       "sm_blocks", "time_embed_dim", "mlp_ratio", "basis"},
                   "backbone");
    get_if(j, "latent_len", cfg.backbone.latent_len);
    get_if(j, "latent_dim", cfg.backbone.latent_dim);
    get_if(j, "cond_dim", cfg.backbone.cond_dim);
    get_if(j, "hidden", cfg.backbone.hidden);
    get_if(j, "heads", cfg.backbone.heads);
    get_if(j, "mm_blocks", cfg.backbone.mm_blocks);
    get_if(j, "sm_blocks", cfg.backbone.sm_blocks);
    get_if(j, "time_embed_dim", cfg.backbone.time_embed_dim);
    get_if(j, "mlp_ratio", cfg.backbone.mlp_ratio);
    get_if(j, "basis", cfg.backbone.basis);
}

void parse_train_base(const json& j, RunConfig& cfg) {
    reject_unknown(j, {"lr", "steps", "batch_clips"}, "train_base");
    get_if(j, "lr", cfg.train_base.lr);
    get_if(j, "steps", cfg.train_base.steps);
    get_if(j, "batch_clips", cfg.train_base.batch_clips);
}

void parse_rpo(const json& j, RunConfig& cfg) {
    reject_unknown(j, {"iterations", "steps_per_iter", "candidates", "lr", "weight_decay",
                       "warmup_steps", "schedule", "grad_accum", "grad_clip", "beta_w",
                       "winner_mode", "loss_mode", "finetune_mode", "sample_steps", "train_clips"},
                   "rpo");
    get_if(j, "iterations", cfg.rpo.iterations);
    get_if(j, "steps_per_iter", cfg.rpo.steps_per_iter);
    get_if(j, "candidates", cfg.rpo.candidates);
    get_if(j, "lr", cfg.rpo.lr);
    get_if(j, "weight_decay", cfg.rpo.weight_decay);
    get_if(j, "warmup_steps", cfg.rpo.warmup_steps);
    get_if(j, "schedule", cfg.rpo.schedule);
    get_if(j, "grad_accum", cfg.rpo.grad_accum);
    get_if(j, "grad_clip", cfg.rpo.grad_clip);
    get_if(j, "beta_w", cfg.rpo.beta_w);
    if (j.contains("winner_mode"))
        cfg.rpo.winner_mode = rpo::winner_mode_from_string(j.at("winner_mode").get<std::string>());
    if (j.contains("loss_mode"))
        cfg.rpo.loss_mode = rpo::loss_mode_from_string(j.at("loss_mode").get<std::string>());
    if (j.contains("finetune_mode"))
        cfg.rpo.finetune_mode =
            rpo::finetune_mode_from_string(j.at("finetune_mode").get<std::string>());
    get_if(j, "sample_steps", cfg.rpo.sample_steps);
    get_if(j, "train_clips", cfg.rpo_train_clips);
}

void parse_eval(const json& j, RunConfig& cfg) {
    reject_unknown(j, {"sample_steps"}, "eval");
    get_if(j, "sample_steps", cfg.eval_sample_steps);
}

void derive_geometry(RunConfig& cfg) {
    const auto& d = cfg.dataset;
    cfg.dataset.track.time_quantum = d.track.clip_len / d.render.t_raw;
    cfg.encoder.t_video = d.render.t_raw / std::max(1, d.segments);
    cfg.encoder.height = d.render.height;
    cfg.encoder.width = d.render.width;
    cfg.encoder.t_audio = d.render.t_spec / std::max(1, d.segments);
    cfg.encoder.n_mels = d.render.n_mels;
    cfg.backbone.t_spec = d.render.t_spec;
    cfg.backbone.n_mels = d.render.n_mels;
    cfg.backbone.segments = d.segments;
}

}  // namespace

void RunConfig::validate() const {
    std::string errors;
    auto run = [&](const char* what, const std::function<void()>& fn) {
        try {
            fn();
        } catch (const std::exception& e) {
            errors += std::string(errors.empty() ? "" : "; ") + what + ": " + e.what();
        }
    };
    run("dataset", [&] { dataset.validate(); });
    run("encoder", [&] { encoder.validate(); });
    run("backbone", [&] { backbone.validate(); });
    run("rpo", [&] { rpo.validate(); });
    run("counts", [&] {
        if (n_clips < 0) throw ConfigError("n_clips must be >= 0");
        if (holdout_clips < 0 || holdout_clips >= std::max(1, n_clips))
            throw ConfigError("holdout_clips must be in [0, n_clips)");
        if (rpo_train_clips < 1 || rpo_train_clips > train_clip_count())
            throw ConfigError("rpo train_clips must be in [1, n_clips - holdout_clips]");
        if (pretrain.lr <= 0 || pretrain.steps < 0 || pretrain.batch_clips < 1)
            throw ConfigError("pretrain hyperparameters out of range");
        if (train_base.lr <= 0 || train_base.steps < 0 || train_base.batch_clips < 1)
            throw ConfigError("train_base hyperparameters out of range");
        if (eval_sample_steps < 1) throw ConfigError("eval sample_steps must be >= 1");
        if (threads < 0) throw ConfigError("threads must be >= 0");
    });
    if (!errors.empty()) throw ConfigError(errors);
}

RunConfig defaults() {
    RunConfig cfg;
    derive_geometry(cfg);
    cfg.config_hash = hash_hex(canonical_dump(cfg));
    return cfg;
}

RunConfig from_json(const json& j) {
    RunConfig cfg;
    reject_unknown(j, {"seed", "threads", "dataset", "encoder", "pretrain", "backbone",
                       "train_base", "rpo", "eval"},
                   "top level");
    get_if(j, "seed", cfg.seed);
    get_if(j, "threads", cfg.threads);
    if (j.contains("dataset")) parse_dataset(j.at("dataset"), cfg);
    if (j.contains("encoder")) parse_encoder(j.at("encoder"), cfg);
    if (j.contains("pretrain")) parse_pretrain(j.at("pretrain"), cfg);
    if (j.contains("backbone")) parse_backbone(j.at("backbone"), cfg);
    if (j.contains("train_base")) parse_train_base(j.at("train_base"), cfg);
    if (j.contains("rpo")) parse_rpo(j.at("rpo"), cfg);
    if (j.contains("eval")) parse_eval(j.at("eval"), cfg);
    derive_geometry(cfg);
    cfg.validate();
    cfg.config_hash = hash_hex(canonical_dump(cfg));
    return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
    json j;
    try {
        j = json::parse(read_text_file(path));
    } catch (const json::parse_error& e) {
        throw ConfigError("config parse error in " + path.string() + ": " + e.what());
    }
    return from_json(j);
}

json to_json(const RunConfig& cfg) {
    const char* winner = cfg.rpo.winner_mode == rpo::WinnerMode::ground_truth ? "ground_truth"
                                                                              : "best_generated";
    const char* loss = cfg.rpo.loss_mode == rpo::LossMode::avp_rpo ? "avp_rpo" : "dpo_fm_only";
    const char* ft = cfg.rpo.finetune_mode == rpo::FinetuneMode::freeze_top ? "freeze_top" : "full";
    return json{
        {"seed", cfg.seed},
        {"threads", cfg.threads},
        {"dataset",
         {{"n_clips", cfg.n_clips},
          {"holdout_clips", cfg.holdout_clips},
          {"clip_len", cfg.dataset.track.clip_len},
          {"n_classes", cfg.dataset.track.n_classes},
          {"min_simul", cfg.dataset.track.min_simul},
          {"max_simul", cfg.dataset.track.max_simul},
          {"event_rate", cfg.dataset.track.event_rate},
          {"t_raw", cfg.dataset.render.t_raw},
          {"height", cfg.dataset.render.height},
          {"width", cfg.dataset.render.width},
          {"t_spec", cfg.dataset.render.t_spec},
          {"n_mels", cfg.dataset.render.n_mels},
          {"segments", cfg.dataset.segments},
          {"noise_floor", cfg.dataset.render.noise_floor},
          {"noise_sigma", cfg.dataset.render.noise_sigma}}},
        {"encoder",
         {{"alpha", cfg.encoder.alpha},
          {"beta", cfg.encoder.beta},
          {"base_channels", cfg.encoder.base_channels},
          {"stage_channels", cfg.encoder.stage_channels},
          {"stage_depths", cfg.encoder.stage_depths},
          {"tau_init", cfg.encoder.tau_init}}},
        {"pretrain",
         {{"lr", cfg.pretrain.lr}, {"steps", cfg.pretrain.steps},
          {"batch_clips", cfg.pretrain.batch_clips}}},
        {"backbone",
         {{"latent_len", cfg.backbone.latent_len},
          {"latent_dim", cfg.backbone.latent_dim},
          {"cond_dim", cfg.backbone.cond_dim},
          {"hidden", cfg.backbone.hidden},
          {"heads", cfg.backbone.heads},
          {"mm_blocks", cfg.backbone.mm_blocks},
          {"sm_blocks", cfg.backbone.sm_blocks},
          {"time_embed_dim", cfg.backbone.time_embed_dim},
          {"mlp_ratio", cfg.backbone.mlp_ratio},
          {"basis", cfg.backbone.basis}}},
        {"train_base",
         {{"lr", cfg.train_base.lr}, {"steps", cfg.train_base.steps},
          {"batch_clips", cfg.train_base.batch_clips}}},
        {"rpo",
         {{"iterations", cfg.rpo.iterations},
          {"steps_per_iter", cfg.rpo.steps_per_iter},
          {"candidates", cfg.rpo.candidates},
          {"lr", cfg.rpo.lr},
          {"weight_decay", cfg.rpo.weight_decay},
          {"warmup_steps", cfg.rpo.warmup_steps},
          {"schedule", cfg.rpo.schedule},
          {"grad_accum", cfg.rpo.grad_accum},
          {"grad_clip", cfg.rpo.grad_clip},
          {"beta_w", cfg.rpo.beta_w},
          {"winner_mode", winner},
          {"loss_mode", loss},
          {"finetune_mode", ft},
          {"sample_steps", cfg.rpo.sample_steps},
          {"train_clips", cfg.rpo_train_clips}}},
        {"eval", {{"sample_steps", cfg.eval_sample_steps}}}};
}

std::string canonical_dump(const RunConfig& cfg) { return to_json(cfg).dump(); }

}  // namespace forge::config
