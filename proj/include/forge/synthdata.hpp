#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "forge/tensor.hpp"

namespace forge::synth {

struct Event {
    double onset = 0.0;     // seconds
    double duration = 0.0;  // seconds
    int class_id = 0;
    double intensity = 1.0;  // in (0, 1]
};

struct TrackConfig {
    double clip_len = 8.0;
    int n_classes = 8;
    int min_simul = 2;  // lower bound on concurrently active events at any instant
    int max_simul = 4;
    double event_rate = 0.5;  // mean events per second per lane (mean duration = 1/rate)
    // Onsets and durations snap to this grid so that audio bins and video
    // frames start exactly at event boundaries. Kept equal to the video frame
    // duration by the dataset config.
    double time_quantum = 8.0 / 128.0;

    void validate() const;
};

struct EventTrack {
    std::vector<Event> events;  // sorted ascending by onset
    double clip_len = 8.0;
    int n_classes = 8;

    void validate() const;
    // Number of events whose [onset, onset+duration) contains time t.
    int active_at(double t) const;
};

struct RenderConfig {
    int t_raw = 128;  // video frames
    int height = 32;
    int width = 32;
    int t_spec = 512;  // spectrogram time bins
    int n_mels = 32;   // spectrogram frequency bins
    bool noise_floor = false;
    double noise_sigma = 0.01;

    void validate() const;
};

struct SyntheticClip {
    std::string clip_id;
    uint64_t seed = 0;
    EventTrack track;
    Tensor video;  // (t_raw, height, width)
    Tensor audio;  // (t_spec, n_mels), all values >= 0
};

struct SegmentPair {
    Tensor video_seg;  // (t_raw/S, height, width)
    Tensor audio_seg;  // (t_spec/S, n_mels)
    int segment_index = 0;
    std::string clip_id;
};

// Deterministic class-conditioned placement shared by the renderer and the
// evaluation oracles.
struct BlobSpec {
    double cx, cy, sigma;
};
BlobSpec class_location(int class_id, int n_classes, int height, int width);
// Frequency rows [lo, hi) energized by the class.
std::pair<int, int> class_band(int class_id, int n_classes, int n_mels);

EventTrack gen_event_track(uint64_t seed, const TrackConfig& cfg);

SyntheticClip render_clip(const EventTrack& track, const RenderConfig& cfg, uint64_t seed,
                          std::string clip_id);

std::vector<SegmentPair> split_segments(const SyntheticClip& clip, int segments);

struct DatasetConfig {
    TrackConfig track;
    RenderConfig render;
    int segments = 8;

    void validate() const;
    // single: exactly one active event at all times; multi: 2-4 simultaneous.
    void apply_preset(const std::string& preset);
};

struct ManifestEntry {
    std::string clip_id;
    uint64_t seed = 0;
    std::string video_file, audio_file;
    std::string video_hash, audio_hash;
    std::vector<Event> events;
};

struct Manifest {
    int format_version = 1;
    uint64_t base_seed = 0;
    DatasetConfig config;
    std::vector<ManifestEntry> clips;
    std::string content_hash;  // over everything above
};

Manifest build_dataset(const DatasetConfig& cfg, int n_clips,
                       const std::filesystem::path& out_dir, uint64_t base_seed);

Manifest load_manifest(const std::filesystem::path& dir);
SyntheticClip load_clip(const std::filesystem::path& dir, const Manifest& manifest, size_t index);

std::string manifest_to_json(const Manifest& m);

}  // namespace forge::synth
