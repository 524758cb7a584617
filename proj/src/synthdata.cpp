#include "syncflow/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "syncflow/errors.hpp"
#include "syncflow/rng.hpp"

namespace syncflow::synth {

namespace {

// Walks the bounce recurrence and calls visit(impact_time) for every floor
// contact until the ball rests or `horizon` passes. Returns the time the
// ball comes to rest (infinity if still bouncing at the horizon).
template <class Visit>
double walk_impacts(const SceneParams& p, const ClipFormat& f, double horizon, Visit&& visit)
{
    const double g = gravity(p.speed);
    if (p.initial_height <= 0.0) {
        visit(0.0);
        return 0.0;
    }
    double t = std::sqrt(2.0 * p.initial_height / g);
    double v = g * t;
    while (t < horizon) {
        visit(t);
        v *= p.restitution;
        const double flight = 2.0 * v / g;
        if (flight < f.min_flight_seconds) return t;
        t += flight;
    }
    return std::numeric_limits<double>::infinity();
}

} // namespace

double gravity(Speed speed)
{
    return speed == Speed::kSlow ? 64.0 : 256.0;
}

std::array<float, 3> disc_rgb(BallColor color)
{
    switch (color) {
    case BallColor::kRed: return {0.9f, 0.1f, 0.1f};
    case BallColor::kGreen: return {0.1f, 0.9f, 0.1f};
    default: return {0.15f, 0.25f, 0.95f};
    }
}

std::vector<double> impact_times(const SceneParams& params, const ClipFormat& format)
{
    std::vector<double> times;
    walk_impacts(params, format, format.duration(), [&](double t) { times.push_back(t); });
    return times;
}

double height_at(const SceneParams& params, double t, const ClipFormat& format)
{
    const double g = gravity(params.speed);
    if (params.initial_height <= 0.0) return 0.0;
    const double first = std::sqrt(2.0 * params.initial_height / g);
    if (t <= first) return params.initial_height - 0.5 * g * t * t;
    double last_impact = first;
    double speed_after = 0.0;
    double v = g * first;
    double impact = first;
    for (;;) {
        v *= params.restitution;
        const double flight = 2.0 * v / g;
        if (flight < format.min_flight_seconds) return 0.0; // resting
        if (t <= impact + flight) {
            last_impact = impact;
            speed_after = v;
            break;
        }
        impact += flight;
    }
    const double s = t - last_impact;
    return std::max(0.0, speed_after * s - 0.5 * g * s * s);
}

MediaPair generate_sample(const SceneParams& params, const ClipFormat& format)
{
    MediaPair pair;
    pair.caption = make_caption(params.color, params.speed);
    pair.impact_times = impact_times(params, format);
    for (double t : pair.impact_times)
        pair.impact_frames.push_back(std::min(format.frames - 1, static_cast<int>(std::lround(t * format.fps))));

    // video: anti-aliased disc on black
    pair.video = VideoTensor(format.frames, format.height, format.width);
    const auto rgb = disc_rgb(params.color);
    for (int f = 0; f < format.frames; ++f) {
        const double t = static_cast<double>(f) / format.fps;
        const double cy = format.rest_row() - height_at(params, t, format);
        const double cx = params.column;
        for (int y = 0; y < format.height; ++y)
            for (int x = 0; x < format.width; ++x) {
                const double d = std::hypot(y - cy, x - cx);
                const double cover = std::clamp(format.disc_radius + 0.5 - d, 0.0, 1.0);
                if (cover <= 0.0) continue;
                for (int c = 0; c < 3; ++c) pair.video.at(f, c, y, x) = static_cast<float>(cover * rgb[static_cast<std::size_t>(c)]);
            }
    }

    // audio: Hann-windowed sinusoid starting at each impact
    pair.audio.sample_rate = format.sample_rate;
    pair.audio.samples.assign(static_cast<std::size_t>(format.samples()), 0.0f);
    const double freq = tone_frequency(params.color);
    const auto burst = static_cast<std::int64_t>(std::lround(format.burst_seconds * format.sample_rate));
    for (double t : pair.impact_times) {
        const auto start = static_cast<std::int64_t>(std::lround(t * format.sample_rate));
        for (std::int64_t n = 0; n < burst; ++n) {
            const std::int64_t i = start + n;
            if (i >= format.samples()) break;
            const double window = 0.5 * (1.0 - std::cos(2.0 * std::numbers::pi * static_cast<double>(n) / static_cast<double>(burst - 1)));
            const double tone = std::sin(2.0 * std::numbers::pi * freq * static_cast<double>(n) / format.sample_rate);
            pair.audio.samples[static_cast<std::size_t>(i)] += static_cast<float>(format.burst_amplitude * window * tone);
        }
    }
    return pair;
}

SceneParams draw_scene(std::uint64_t seed, int combination)
{
    Rng rng(seed);
    SceneParams p;
    const int combo = ((combination % 6) + 6) % 6;
    p.color = static_cast<BallColor>(combo / 2);
    p.speed = static_cast<Speed>(combo % 2);
    p.initial_height = rng.uniform(12.0, 20.0);
    p.restitution = rng.uniform(0.9, 0.98);
    p.column = rng.uniform(8.0, 24.0);
    p.seed = seed;
    return p;
}

Splits make_splits(int n_train, int n_val, int n_test, std::uint64_t master_seed)
{
    if (n_train < 1 || n_val < 1 || n_test < 1) throw ContractError("make_splits: every split needs at least one sample");
    Splits s;
    std::uint64_t index = 0;
    auto fill = [&](std::vector<SceneParams>& out, int n) {
        for (int i = 0; i < n; ++i, ++index) out.push_back(draw_scene(master_seed + index, i));
    };
    fill(s.train, n_train);
    fill(s.val, n_val);
    fill(s.test, n_test);
    return s;
}

std::vector<MediaPair> render_all(const std::vector<SceneParams>& scenes, const ClipFormat& format)
{
    std::vector<MediaPair> out;
    out.reserve(scenes.size());
    for (const auto& p : scenes) out.push_back(generate_sample(p, format));
    return out;
}

} // namespace syncflow::synth
