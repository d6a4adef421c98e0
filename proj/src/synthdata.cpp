#include "forge/synthdata.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

#include "forge/errors.hpp"
#include "forge/rng.hpp"
#include "forge/serial.hpp"

namespace forge::synth {

using nlohmann::json;

namespace {
constexpr double kEps = 1e-9;

bool is_integer_multiple(double value, double quantum) {
    double q = value / quantum;
    return std::abs(q - std::round(q)) < 1e-6;
}
}  // namespace

void TrackConfig::validate() const {
    if (clip_len <= 0.0) throw ConfigError("track: clip_len must be positive");
    if (n_classes < 1) throw ConfigError("track: n_classes must be >= 1");
    if (min_simul < 0) throw ConfigError("track: min_simul must be >= 0");
    if (max_simul < 1) throw ConfigError("track: max_simul must be >= 1");
    if (min_simul > max_simul)
        throw ConfigError("track: min_simul (" + std::to_string(min_simul) +
                          ") exceeds max_simul (" + std::to_string(max_simul) + ")");
    if (event_rate <= 0.0) throw ConfigError("track: event_rate must be positive");
    if (time_quantum <= 0.0) throw ConfigError("track: time_quantum must be positive");
    if (!is_integer_multiple(clip_len, time_quantum))
        throw ConfigError("track: clip_len must be an integer multiple of time_quantum");
}

void EventTrack::validate() const {
    double prev_onset = -1.0;
    for (const auto& e : events) {
        if (e.onset < -kEps || e.onset + e.duration > clip_len + kEps)
            throw ContractViolation("event outside clip: onset " + std::to_string(e.onset) +
                                    " duration " + std::to_string(e.duration));
        if (e.duration <= 0.0) throw ContractViolation("event duration must be positive");
        if (e.intensity <= 0.0 || e.intensity > 1.0)
            throw ContractViolation("event intensity must be in (0, 1]");
        if (e.class_id < 0 || e.class_id >= n_classes)
            throw ContractViolation("event class out of range");
        if (e.onset < prev_onset - kEps) throw ContractViolation("events not sorted by onset");
        prev_onset = e.onset;
    }
}

int EventTrack::active_at(double t) const {
    int n = 0;
    for (const auto& e : events)
        if (t >= e.onset - kEps && t < e.onset + e.duration - kEps) ++n;
    return n;
}

void RenderConfig::validate() const {
    if (t_raw < 1 || height < 1 || width < 1 || t_spec < 1 || n_mels < 1)
        throw ConfigError("render: all dimensions must be >= 1");
    if (noise_sigma < 0.0) throw ConfigError("render: noise_sigma must be >= 0");
}

void DatasetConfig::validate() const {
    track.validate();
    render.validate();
    if (segments < 1) throw ConfigError("dataset: segments must be >= 1");
    if (render.t_raw % segments != 0)
        throw ConfigError("dataset: t_raw (" + std::to_string(render.t_raw) +
                          ") not divisible by segments (" + std::to_string(segments) + ")");
    if (render.t_spec % segments != 0)
        throw ConfigError("dataset: t_spec not divisible by segments");
    if (track.n_classes > render.n_mels)
        throw ConfigError("dataset: n_classes exceeds n_mels, bands would be empty");
    if (!is_integer_multiple(track.clip_len / track.time_quantum,
                             track.clip_len / render.t_raw / track.time_quantum))
        throw ConfigError("dataset: time_quantum incompatible with t_raw");
}

void DatasetConfig::apply_preset(const std::string& preset) {
    if (preset == "single") {
        track.min_simul = 1;
        track.max_simul = 1;
    } else if (preset == "multi") {
        track.min_simul = 2;
        track.max_simul = 4;
    } else {
        throw ConfigError("unknown preset '" + preset + "' (expected single or multi)");
    }
}

BlobSpec class_location(int class_id, int n_classes, int height, int width) {
    double angle = 6.283185307179586 * (static_cast<double>(class_id) + 0.5) /
                   static_cast<double>(std::max(n_classes, 1));
    BlobSpec b;
    b.cx = 0.5 * width + 0.30 * width * std::cos(angle);
    b.cy = 0.5 * height + 0.30 * height * std::sin(angle);
    b.sigma = height / 10.0;
    return b;
}

std::pair<int, int> class_band(int class_id, int n_classes, int n_mels) {
    int lo = static_cast<int>(static_cast<int64_t>(class_id) * n_mels / n_classes);
    int hi = static_cast<int>(static_cast<int64_t>(class_id + 1) * n_mels / n_classes);
    return {lo, std::max(hi, lo + 1)};
}

EventTrack gen_event_track(uint64_t seed, const TrackConfig& cfg) {
    cfg.validate();
    Rng rng(derive_seed(seed, "event_track"));

    const double q = cfg.time_quantum;
    const int64_t n_q = static_cast<int64_t>(std::llround(cfg.clip_len / q));
    const double mean_dur = 1.0 / cfg.event_rate;

    auto sample_quanta = [&](double mean_seconds) {
        double secs = rng.uniform(0.5, 1.5) * mean_seconds;
        return std::max<int64_t>(1, static_cast<int64_t>(std::llround(secs / q)));
    };

    EventTrack track;
    track.clip_len = cfg.clip_len;
    track.n_classes = cfg.n_classes;

    // One lane per allowed concurrent event. The first min_simul lanes tile
    // the clip with back-to-back events, pinning the lower concurrency bound;
    // the rest may leave gaps, so concurrency never exceeds max_simul.
    for (int lane = 0; lane < cfg.max_simul; ++lane) {
        bool full = lane < cfg.min_simul;
        int64_t t = 0;
        while (t < n_q) {
            if (!full && rng.uniform() < 0.35) {
                t += sample_quanta(0.5 * mean_dur);
                if (t >= n_q) break;
            }
            int64_t dur = std::min(sample_quanta(mean_dur), n_q - t);
            Event e;
            e.onset = static_cast<double>(t) * q;
            e.duration = static_cast<double>(dur) * q;
            e.class_id = static_cast<int>(rng.integer(0, cfg.n_classes - 1));
            e.intensity = 0.3 + 0.7 * rng.uniform();
            track.events.push_back(e);
            t += dur;
        }
    }

    std::sort(track.events.begin(), track.events.end(), [](const Event& a, const Event& b) {
        if (a.onset != b.onset) return a.onset < b.onset;
        if (a.duration != b.duration) return a.duration < b.duration;
        if (a.class_id != b.class_id) return a.class_id < b.class_id;
        return a.intensity < b.intensity;
    });
    track.validate();
    return track;
}

SyntheticClip render_clip(const EventTrack& track, const RenderConfig& cfg, uint64_t seed,
                          std::string clip_id) {
    cfg.validate();
    track.validate();

    SyntheticClip clip;
    clip.clip_id = std::move(clip_id);
    clip.seed = seed;
    clip.track = track;
    clip.video = Tensor::zeros({cfg.t_raw, cfg.height, cfg.width});
    clip.audio = Tensor::zeros({cfg.t_spec, cfg.n_mels});

    const double frame_dur = track.clip_len / cfg.t_raw;
    const double bin_dur = track.clip_len / cfg.t_spec;

    for (const auto& e : track.events) {
        double t0 = e.onset, t1 = e.onset + e.duration;

        // Video: a Gaussian blob in every frame whose interval overlaps the event.
        BlobSpec blob = class_location(e.class_id, track.n_classes, cfg.height, cfg.width);
        int64_t f0 = std::max<int64_t>(0, static_cast<int64_t>(std::floor(t0 / frame_dur + kEps)));
        int64_t f1 = std::min<int64_t>(cfg.t_raw,
                                       static_cast<int64_t>(std::ceil(t1 / frame_dur - kEps)));
        double inv2s2 = 1.0 / (2.0 * blob.sigma * blob.sigma);
        for (int64_t f = f0; f < f1; ++f)
            for (int64_t y = 0; y < cfg.height; ++y)
                for (int64_t x = 0; x < cfg.width; ++x) {
                    double dx = static_cast<double>(x) - blob.cx;
                    double dy = static_cast<double>(y) - blob.cy;
                    clip.video.at(f, y, x) += e.intensity * std::exp(-(dx * dx + dy * dy) * inv2s2);
                }

        // Audio: constant band energy in every bin overlapping the event.
        auto [lo, hi] = class_band(e.class_id, track.n_classes, cfg.n_mels);
        int64_t b0 = std::max<int64_t>(0, static_cast<int64_t>(std::floor(t0 / bin_dur + kEps)));
        int64_t b1 = std::min<int64_t>(cfg.t_spec,
                                       static_cast<int64_t>(std::ceil(t1 / bin_dur - kEps)));
        for (int64_t b = b0; b < b1; ++b)
            for (int f = lo; f < hi && f < cfg.n_mels; ++f) clip.audio.at(b, f) += e.intensity;
    }

    if (cfg.noise_floor) {
        Rng vn(derive_seed(seed, "video_noise"));
        for (int64_t i = 0; i < clip.video.numel(); ++i)
            clip.video[i] += cfg.noise_sigma * vn.normal();
        Rng an(derive_seed(seed, "audio_noise"));
        for (int64_t i = 0; i < clip.audio.numel(); ++i)
            clip.audio[i] = std::max(0.0, clip.audio[i] + cfg.noise_sigma * an.normal());
    }
    return clip;
}

std::vector<SegmentPair> split_segments(const SyntheticClip& clip, int segments) {
    if (segments < 1) throw ConfigError("split_segments: segments must be >= 1");
    int64_t t_raw = clip.video.dim(0), t_spec = clip.audio.dim(0);
    if (t_raw % segments != 0 || t_spec % segments != 0)
        throw ConfigError("split_segments: lengths (" + std::to_string(t_raw) + ", " +
                          std::to_string(t_spec) + ") not divisible by " + std::to_string(segments));
    int64_t tv = t_raw / segments, ta = t_spec / segments;
    int64_t vstride = clip.video.dim(1) * clip.video.dim(2);
    int64_t astride = clip.audio.dim(1);

    std::vector<SegmentPair> out;
    out.reserve(static_cast<size_t>(segments));
    for (int s = 0; s < segments; ++s) {
        SegmentPair p;
        p.segment_index = s;
        p.clip_id = clip.clip_id;
        p.video_seg = Tensor({tv, clip.video.dim(1), clip.video.dim(2)});
        std::memcpy(p.video_seg.data(), clip.video.data() + s * tv * vstride,
                    static_cast<size_t>(tv * vstride) * sizeof(double));
        p.audio_seg = Tensor({ta, astride});
        std::memcpy(p.audio_seg.data(), clip.audio.data() + s * ta * astride,
                    static_cast<size_t>(ta * astride) * sizeof(double));
        out.push_back(std::move(p));
    }
    return out;
}

// ---------------------------------------------------------------------------
// dataset io
// ---------------------------------------------------------------------------

namespace {

json events_to_json(const std::vector<Event>& events) {
    json arr = json::array();
    for (const auto& e : events)
        arr.push_back({{"onset", e.onset},
                       {"duration", e.duration},
                       {"class_id", e.class_id},
                       {"intensity", e.intensity}});
    return arr;
}

std::vector<Event> events_from_json(const json& arr) {
    std::vector<Event> out;
    for (const auto& j : arr) {
        Event e;
        e.onset = j.at("onset").get<double>();
        e.duration = j.at("duration").get<double>();
        e.class_id = j.at("class_id").get<int>();
        e.intensity = j.at("intensity").get<double>();
        out.push_back(e);
    }
    return out;
}

json config_to_json(const DatasetConfig& c) {
    return json{{"clip_len", c.track.clip_len},
                {"n_classes", c.track.n_classes},
                {"min_simul", c.track.min_simul},
                {"max_simul", c.track.max_simul},
                {"event_rate", c.track.event_rate},
                {"time_quantum", c.track.time_quantum},
                {"t_raw", c.render.t_raw},
                {"height", c.render.height},
                {"width", c.render.width},
                {"t_spec", c.render.t_spec},
                {"n_mels", c.render.n_mels},
                {"noise_floor", c.render.noise_floor},
                {"noise_sigma", c.render.noise_sigma},
                {"segments", c.segments}};
}

DatasetConfig config_from_json(const json& j) {
    DatasetConfig c;
    c.track.clip_len = j.at("clip_len").get<double>();
    c.track.n_classes = j.at("n_classes").get<int>();
    c.track.min_simul = j.at("min_simul").get<int>();
    c.track.max_simul = j.at("max_simul").get<int>();
    c.track.event_rate = j.at("event_rate").get<double>();
    c.track.time_quantum = j.at("time_quantum").get<double>();
    c.render.t_raw = j.at("t_raw").get<int>();
    c.render.height = j.at("height").get<int>();
    c.render.width = j.at("width").get<int>();
    c.render.t_spec = j.at("t_spec").get<int>();
    c.render.n_mels = j.at("n_mels").get<int>();
    c.render.noise_floor = j.at("noise_floor").get<bool>();
    c.render.noise_sigma = j.at("noise_sigma").get<double>();
    c.segments = j.at("segments").get<int>();
    return c;
}

json manifest_body(const Manifest& m) {
    json clips = json::array();
    for (const auto& e : m.clips)
        clips.push_back({{"clip_id", e.clip_id},
                         {"seed", e.seed},
                         {"video_file", e.video_file},
                         {"audio_file", e.audio_file},
                         {"video_hash", e.video_hash},
                         {"audio_hash", e.audio_hash},
                         {"events", events_to_json(e.events)}});
    return json{{"format_version", m.format_version},
                {"base_seed", m.base_seed},
                {"config", config_to_json(m.config)},
                {"clips", clips}};
}

}  // namespace

std::string manifest_to_json(const Manifest& m) {
    json j = manifest_body(m);
    j["content_hash"] = m.content_hash;
    return j.dump(2) + "\n";
}

Manifest build_dataset(const DatasetConfig& cfg, int n_clips,
                       const std::filesystem::path& out_dir, uint64_t base_seed) {
    cfg.validate();
    if (n_clips < 0) throw ConfigError("build_dataset: n_clips must be >= 0");
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw IngestionError("cannot create dataset dir: " + out_dir.string());

    Manifest m;
    m.base_seed = base_seed;
    m.config = cfg;

    for (int i = 0; i < n_clips; ++i) {
        uint64_t clip_seed = derive_seed(base_seed, "clip", static_cast<uint64_t>(i));
        char idbuf[32];
        std::snprintf(idbuf, sizeof idbuf, "clip_%05d", i);
        EventTrack track = gen_event_track(clip_seed, cfg.track);
        SyntheticClip clip = render_clip(track, cfg.render, clip_seed, idbuf);

        ManifestEntry e;
        e.clip_id = clip.clip_id;
        e.seed = clip_seed;
        e.video_file = e.clip_id + ".video.bin";
        e.audio_file = e.clip_id + ".audio.bin";
        e.events = track.events;

        auto vbytes = serialize_array(clip.video);
        auto abytes = serialize_array(clip.audio);
        Hasher vh, ah;
        vh.update(vbytes.data(), vbytes.size());
        ah.update(abytes.data(), abytes.size());
        e.video_hash = vh.hex();
        e.audio_hash = ah.hex();

        write_array_file(out_dir / e.video_file, clip.video);
        write_array_file(out_dir / e.audio_file, clip.audio);
        m.clips.push_back(std::move(e));
    }

    m.content_hash = hash_hex(manifest_body(m).dump());
    write_text_file(out_dir / "manifest.json", manifest_to_json(m));
    return m;
}

Manifest load_manifest(const std::filesystem::path& dir) {
    auto path = dir / "manifest.json";
    if (!std::filesystem::exists(path))
        throw IngestionError("manifest not found: " + path.string());
    json j = json::parse(read_text_file(path));
    Manifest m;
    m.format_version = j.at("format_version").get<int>();
    m.base_seed = j.at("base_seed").get<uint64_t>();
    m.config = config_from_json(j.at("config"));
    for (const auto& je : j.at("clips")) {
        ManifestEntry e;
        e.clip_id = je.at("clip_id").get<std::string>();
        e.seed = je.at("seed").get<uint64_t>();
        e.video_file = je.at("video_file").get<std::string>();
        e.audio_file = je.at("audio_file").get<std::string>();
        e.video_hash = je.at("video_hash").get<std::string>();
        e.audio_hash = je.at("audio_hash").get<std::string>();
        e.events = events_from_json(je.at("events"));
        m.clips.push_back(std::move(e));
    }
    m.content_hash = j.at("content_hash").get<std::string>();
    return m;
}

SyntheticClip load_clip(const std::filesystem::path& dir, const Manifest& manifest, size_t index) {
    if (index >= manifest.clips.size())
        throw IngestionError("clip index out of range: " + std::to_string(index));
    const auto& e = manifest.clips[index];
    SyntheticClip clip;
    clip.clip_id = e.clip_id;
    clip.seed = e.seed;
    clip.track.clip_len = manifest.config.track.clip_len;
    clip.track.n_classes = manifest.config.track.n_classes;
    clip.track.events = e.events;
    clip.video = read_array_file(dir / e.video_file);
    clip.audio = read_array_file(dir / e.audio_file);
    return clip;
}

}  // namespace forge::synth
