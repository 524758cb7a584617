#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "syncflow/media.hpp"

// Deterministic bouncing-ball clips with a tone burst at every floor impact.
namespace syncflow::synth {

struct ClipFormat {
    int frames = 16;
    int height = 32;
    int width = 32;
    int fps = 8;
    int sample_rate = 8000;
    double disc_radius = 3.0;
    double burst_seconds = 0.1;
    double burst_amplitude = 0.7;
    // Bounces with a shorter airborne time are suppressed and the ball rests.
    double min_flight_seconds = 0.3;

    double duration() const { return static_cast<double>(frames) / fps; }
    std::int64_t samples() const { return static_cast<std::int64_t>(frames) * sample_rate / fps; }
    // Row of the disc centre when resting on the floor.
    double rest_row() const { return height - 2.0 - disc_radius; }
};

struct SceneParams {
    BallColor color = BallColor::kRed;
    Speed speed = Speed::kSlow;
    double initial_height = 16.0; // pixels above the resting position
    double restitution = 0.94;
    double column = 16.0;          // horizontal disc centre, pixels
    std::uint64_t seed = 0;
};

// Gravity in px/s^2: slow 64, fast 256.
double gravity(Speed speed);
// RGB of the disc.
std::array<float, 3> disc_rgb(BallColor color);

// Floor-contact times in [0, duration) from the closed-form ballistic motion.
std::vector<double> impact_times(const SceneParams& params, const ClipFormat& format = {});
// Height above the resting position at time t.
double height_at(const SceneParams& params, double t, const ClipFormat& format = {});

MediaPair generate_sample(const SceneParams& params, const ClipFormat& format = {});

// Scene parameters for one sample: (color, speed) fixed by combination index
// mod 6, continuous fields drawn from splitmix64(seed).
SceneParams draw_scene(std::uint64_t seed, int combination);

struct Splits {
    std::vector<SceneParams> train, val, test;
};

// Per-sample seed = master_seed + global index, so the splits never share a
// seed and any sample regenerates on its own.
Splits make_splits(int n_train, int n_val, int n_test, std::uint64_t master_seed);

std::vector<MediaPair> render_all(const std::vector<SceneParams>& scenes, const ClipFormat& format = {});

} // namespace syncflow::synth
