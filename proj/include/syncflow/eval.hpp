#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "syncflow/codec.hpp"
#include "syncflow/media.hpp"
#include "syncflow/rfm.hpp"

namespace syncflow::eval {

struct EvalConfig {
    double hit_window_frames = 2.0;
    int fps = 8;
    int feature_dim = 16;
    std::uint64_t feature_seed = 0xfea7;
    std::vector<double> guidance_sweep{1, 2, 4, 6, 8};
    int sweep_samples = 12;

    void validate() const; // ConfigError
};

struct OnsetParams {
    double hop_seconds = 0.01;
    double threshold_ratio = 4.0; // times the median frame energy
    double min_energy = 1e-6;     // absolute floor so exact silence stays silent
    double refractory_seconds = 0.05;
};

// Onset times in seconds from short-time energy crossings.
std::vector<double> detect_audio_onsets(const AudioWave& wave, const OnsetParams& params = {});

struct ImpactDetection {
    std::vector<int> frames;
    std::vector<int> skipped_frames; // frames without a visible disc
    std::vector<double> rows;        // centroid row per frame, NaN when skipped
};

// Disc centroid per frame; impacts at local maxima of the row (floor contact).
ImpactDetection detect_visual_impacts(const VideoTensor& video, double brightness = 0.2, int refractory = 2);

struct SyncResult {
    double mean_error = 0; // seconds
    double hit_rate = 1;
    int matched = 0;
    int unmatched = 0;
};

// Greedy nearest-time matching; unmatched events on either side cost the
// clip duration.
SyncResult onset_sync_error(const std::vector<double>& onsets, const std::vector<double>& impacts, double duration,
                            double hit_window_seconds);
SyncResult onset_sync_error(const VideoTensor& video, const AudioWave& audio, const EvalConfig& config = {});

struct FrechetResult {
    double distance = 0;
    bool regularized = false;
};

// Rows are samples. Covariances are unbiased.
FrechetResult frechet_distance(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b);

// Seeded random projections of fixed hand-made features.
std::vector<double> video_features(const VideoTensor& video, int dim, std::uint64_t seed);
std::vector<double> audio_features(const AudioWave& audio, int dim, std::uint64_t seed);

struct CaptionMatch {
    bool color_hit = false; // video chroma and audio tone both match
    bool speed_hit = false;
    bool no_color = false;
    int video_color = -1; // BallColor index or -1
    int audio_color = -1;
    int impacts = 0;
};

CaptionMatch caption_match(const VideoTensor& video, const AudioWave& audio, const std::string& caption);

struct SampleRecord {
    std::string name;
    std::string caption;
    double sync_error = 0;
    double hit_rate = 0;
    bool color_hit = false;
    bool speed_hit = false;
    int impacts = 0;
    int onsets = 0;
    int skipped_frames = 0;
};

struct EvalReport {
    double onset_sync_error_mean = 0;
    double onset_sync_hit_rate = 0;
    double frechet_audio = 0;
    double frechet_video = 0;
    bool frechet_regularized = false;
    double caption_color_acc = 0;
    double caption_speed_acc = 0;
    std::vector<SampleRecord> samples;

    std::string to_json() const;
    std::string summary() const; // one line
};

struct NamedClip {
    std::string name;
    MediaPair pair;
};

// Sync and caption metrics over `generated`; Fréchet distances against `reference`.
EvalReport evaluate(const std::vector<NamedClip>& generated, const std::vector<NamedClip>& reference,
                    const EvalConfig& config = {});

struct SweepRow {
    double guidance = 0;
    EvalReport report;
    double mean_abs_latent_diff = 0; // against the w = 0 latents of the same seeds
};

// Samples every caption at each guidance weight with paired seeds, decodes,
// and evaluates against the reference clips.
std::vector<SweepRow> guidance_sweep(const SyncFlowModel& model, const LatentCodec& codec,
                                     const std::vector<std::string>& captions, const std::vector<double>& weights,
                                     int steps, std::uint64_t seed, const std::vector<NamedClip>& reference,
                                     const EvalConfig& config = {});
std::string sweep_table(const std::vector<SweepRow>& rows);

double mean_abs_diff(const Tensor& a, const Tensor& b);

// Decodes a sampled latent pair item into a clip.
MediaPair decode_item(const LatentCodec& codec, const rfm::LatentPair& batch, std::int64_t item,
                      const std::string& caption, int sample_rate = 8000);

} // namespace syncflow::eval
