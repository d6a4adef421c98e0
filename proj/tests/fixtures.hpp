#pragma once

// Miniature end-to-end stack (dataset -> encoder -> backbone) used by the
// alignment-loop and metric tests. Dimensions are deliberately tiny so whole
// iterations run in milliseconds.

#include <vector>

#include "forge/avprpo.hpp"
#include "forge/genbackbone.hpp"
#include "forge/sfcavp.hpp"
#include "forge/synthdata.hpp"

namespace forge::testutil {

struct MiniStack {
    synth::DatasetConfig dcfg;
    std::vector<synth::SyntheticClip> clips;
    cavp::SlowFastConfig avp_cfg;
    nn::ParamStore avp;
    gen::BackboneConfig bb_cfg;
    gen::LatentCodec codec;
    std::vector<gen::ClipData> data;

    MiniStack(int n_clips, uint64_t seed) : codec(make_bb_cfg(), 0) {
        dcfg = make_dcfg();
        avp_cfg = make_avp_cfg();
        bb_cfg = make_bb_cfg();
        for (int i = 0; i < n_clips; ++i) {
            uint64_t s = derive_seed(seed, "mini_clip", static_cast<uint64_t>(i));
            clips.push_back(synth::render_clip(synth::gen_event_track(s, dcfg.track), dcfg.render,
                                               s, "mini_" + std::to_string(i)));
        }
        avp = cavp::init_params(avp_cfg, derive_seed(seed, "mini_avp"));
        data = gen::prepare_clip_data(clips, avp, avp_cfg, bb_cfg, codec);
    }

    static synth::DatasetConfig make_dcfg() {
        synth::DatasetConfig d;
        d.render.t_raw = 8;
        d.render.height = 8;
        d.render.width = 8;
        d.render.t_spec = 16;
        d.render.n_mels = 8;
        d.segments = 2;
        d.track.clip_len = 2.0;
        d.track.n_classes = 4;
        d.track.time_quantum = 2.0 / 8.0;
        d.track.min_simul = 1;
        d.track.max_simul = 2;
        return d;
    }

    static cavp::SlowFastConfig make_avp_cfg() {
        cavp::SlowFastConfig c;
        c.alpha = 2;
        c.beta = 2;
        c.base_channels = 4;
        c.stage_channels = {8};
        c.stage_depths = {1};
        c.t_video = 4;
        c.height = 8;
        c.width = 8;
        c.t_audio = 8;
        c.n_mels = 8;
        return c;
    }

    static gen::BackboneConfig make_bb_cfg() {
        gen::BackboneConfig c;
        c.latent_len = 4;
        c.latent_dim = 4;
        c.cond_dim = 6;
        c.hidden = 8;
        c.heads = 2;
        c.mm_blocks = 2;
        c.sm_blocks = 2;
        c.time_embed_dim = 4;
        c.mlp_ratio = 2;
        c.t_spec = 16;
        c.n_mels = 8;
        c.segments = 2;
        return c;
    }

    rpo::RpoSetup setup(const std::vector<gen::ClipData>& train,
                        const std::vector<synth::SyntheticClip>& train_raw,
                        const std::vector<gen::ClipData>& holdout,
                        const std::vector<synth::SyntheticClip>& holdout_raw) const {
        rpo::RpoSetup s;
        s.avp_params = &avp;
        s.avp_cfg = &avp_cfg;
        s.backbone_cfg = &bb_cfg;
        s.codec = &codec;
        s.train_clips = &train;
        s.train_raw = &train_raw;
        s.holdout_clips = &holdout;
        s.holdout_raw = &holdout_raw;
        return s;
    }
};

}  // namespace forge::testutil
