#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace syncflow {

// RGB clip, values in [0, 1], layout [frame][channel][row][col].
struct VideoTensor {
    static constexpr std::int64_t kChannels = 3;

    std::int64_t frames = 0;
    std::int64_t height = 0;
    std::int64_t width = 0;
    std::vector<float> data;

    VideoTensor() = default;
    VideoTensor(std::int64_t f, std::int64_t h, std::int64_t w)
        : frames(f), height(h), width(w), data(static_cast<std::size_t>(f * kChannels * h * w), 0.0f)
    {
    }

    std::size_t index(std::int64_t f, std::int64_t c, std::int64_t y, std::int64_t x) const
    {
        return static_cast<std::size_t>(((f * kChannels + c) * height + y) * width + x);
    }
    float& at(std::int64_t f, std::int64_t c, std::int64_t y, std::int64_t x) { return data[index(f, c, y, x)]; }
    float at(std::int64_t f, std::int64_t c, std::int64_t y, std::int64_t x) const { return data[index(f, c, y, x)]; }
};

// Mono waveform, values in [-1, 1].
struct AudioWave {
    int sample_rate = 8000;
    std::vector<float> samples;

    double duration() const { return static_cast<double>(samples.size()) / sample_rate; }
};

enum class BallColor { kRed = 0, kGreen = 1, kBlue = 2 };
enum class Speed { kSlow = 0, kFast = 1 };

struct MediaPair {
    VideoTensor video;
    AudioWave audio;
    std::string caption;
    std::vector<int> impact_frames;
    std::vector<double> impact_times; // seconds
};

const char* color_name(BallColor c);
const char* speed_name(Speed s);
double tone_frequency(BallColor c); // 330 / 440 / 550 Hz

// "a {color} ball bouncing {speed}"
std::string make_caption(BallColor color, Speed speed);
// Inverse of make_caption; false if the caption is not a template sentence.
bool parse_caption(const std::string& caption, BallColor& color, Speed& speed);

} // namespace syncflow
