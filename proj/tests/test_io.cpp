#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "syncflow/errors.hpp"
#include "syncflow/io.hpp"
#include "syncflow/synthdata.hpp"
#include "test_util.hpp"

using namespace syncflow;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name)
{
    const fs::path p = fs::temp_directory_path() / ("syncflow_io_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::uint16_t le16(const std::string& b, std::size_t at)
{
    return static_cast<std::uint16_t>(static_cast<unsigned char>(b[at]) | (static_cast<unsigned char>(b[at + 1]) << 8));
}

std::uint32_t le32(const std::string& b, std::size_t at)
{
    return le16(b, at) | (static_cast<std::uint32_t>(le16(b, at + 2)) << 16);
}

} // namespace

TEST_CASE("io: tensor files round-trip bit-exactly over random shapes")
{
    Rng rng(21);
    for (int trial = 0; trial < 30; ++trial) {
        const int rank = static_cast<int>(rng.below(5));
        Shape s;
        for (int i = 0; i < rank; ++i) s.push_back(static_cast<std::int64_t>(1 + rng.below(5)));
        const DType dt = trial % 3 == 0 ? DType::kF64 : DType::kF32;
        const Tensor t = testing::random_tensor(s, rng, 3.0, dt);
        std::istringstream in(io::tensor_bytes(t), std::ios::binary);
        const Tensor back = io::read_tensor(in);
        CHECK(back.shape() == t.shape());
        CHECK(back.dtype() == t.dtype());
        CHECK(back.to_f64_vector() == t.to_f64_vector());
    }
}

TEST_CASE("io: tensor header layout is little-endian")
{
    const Tensor t(Shape{2, 3}, std::vector<float>{1, 2, 3, 4, 5, -0.0f});
    const std::string b = io::tensor_bytes(t);
    CHECK(b.substr(0, 4) == "SYTF");
    CHECK(le16(b, 4) == io::kTensorVersion);
    CHECK(le16(b, 6) == 2);
    CHECK(le32(b, 8) == 2);
    CHECK(le32(b, 12) == 3);
    CHECK(b[16] == 0);
    CHECK(b.size() == 17 + 4 * 6);
    float first;
    std::memcpy(&first, b.data() + 17, 4);
    CHECK(first == 1.0f);
}

TEST_CASE("io: corrupt tensor files are rejected")
{
    const Tensor t(Shape{4}, std::vector<float>{1, 2, 3, 4});
    const std::string good = io::tensor_bytes(t);
    auto parse = [](std::string b) {
        std::istringstream in(b, std::ios::binary);
        return io::read_tensor(in);
    };
    std::string bad_magic = good;
    bad_magic[0] = 'X';
    CHECK_THROWS_AS(parse(bad_magic), FormatError);
    std::string bad_version = good;
    bad_version[4] = 9;
    CHECK_THROWS_AS(parse(bad_version), FormatError);
    std::string bad_dtype = good;
    bad_dtype[12] = 7;
    CHECK_THROWS_AS(parse(bad_dtype), FormatError);
    CHECK_THROWS_AS(parse(good.substr(0, good.size() - 1)), FormatError);
    CHECK_THROWS_AS(parse(good.substr(0, 3)), FormatError);
}

TEST_CASE("io: wav round trip, layout and quantization")
{
    const fs::path dir = scratch("wav");
    AudioWave w;
    w.sample_rate = 8000;
    Rng rng(3);
    for (int i = 0; i < 16000; ++i) w.samples.push_back(static_cast<float>(rng.uniform(-1.0, 1.0)));
    w.samples[0] = 1.0f;
    w.samples[1] = -1.0f;
    io::write_wav(w, dir / "a.wav");
    const std::string b = io::read_file(dir / "a.wav");
    CHECK(b.substr(0, 4) == "RIFF");
    CHECK(b.substr(36, 4) == "data");
    CHECK(le32(b, 40) == 32000);
    CHECK(b.size() == 44 + 32000);
    CHECK(le16(b, 44) == 32767);
    CHECK(static_cast<std::int16_t>(le16(b, 46)) == -32767);

    const AudioWave back = io::read_wav(dir / "a.wav");
    REQUIRE(back.samples.size() == w.samples.size());
    CHECK(back.sample_rate == 8000);
    double worst = 0;
    for (std::size_t i = 0; i < w.samples.size(); ++i)
        worst = std::max(worst, static_cast<double>(std::abs(back.samples[i] - w.samples[i])));
    CHECK(worst <= 1.0 / 32767.0);

    AudioWave zero;
    zero.samples.assign(100, 0.0f);
    const std::string z = io::wav_bytes(zero);
    CHECK(z.substr(44).find_first_not_of('\0') == std::string::npos);
}

TEST_CASE("io: quantization rounds halves away from zero")
{
    // 0.5 / 32767 and friends land on exact halves after scaling by 32767 in
    // double only approximately, so check symmetric behaviour instead.
    AudioWave w;
    w.samples = {0.25f, -0.25f, 0.0f};
    const std::string b = io::wav_bytes(w);
    const auto pos = static_cast<std::int16_t>(le16(b, 44));
    const auto neg = static_cast<std::int16_t>(le16(b, 46));
    CHECK(pos == -neg);
    CHECK(pos == 8192); // 8191.75 -> 8192
}

TEST_CASE("io: malformed and unsupported wav files")
{
    AudioWave w;
    w.samples = {0.1f, 0.2f};
    const std::string good = io::wav_bytes(w);
    CHECK_THROWS_AS(io::parse_wav("RIFX" + good.substr(4)), FormatError);
    std::string stereo = good;
    stereo[22] = 2;
    CHECK_THROWS_AS(io::parse_wav(stereo), FormatError);
    std::string eight_bit = good;
    eight_bit[34] = 8;
    CHECK_THROWS_AS(io::parse_wav(eight_bit), FormatError);
    std::string float_fmt = good;
    float_fmt[20] = 3;
    CHECK_THROWS_AS(io::parse_wav(float_fmt), FormatError);
    CHECK_THROWS_AS(io::parse_wav(good.substr(0, 20)), FormatError);
    AudioWave loud;
    loud.samples = {1.5f};
    CHECK_THROWS_AS(io::wav_bytes(loud), DomainError);
}

TEST_CASE("io: frames round trip, naming and gaps")
{
    const fs::path dir = scratch("frames");
    const MediaPair p = synth::generate_sample(synth::draw_scene(5, 3));
    io::write_frames(p.video, dir / "clip");
    for (int f = 0; f < 16; ++f) {
        char name[16];
        std::snprintf(name, sizeof name, "%03d.ppm", f);
        CHECK(fs::exists(dir / "clip" / name));
    }
    const VideoTensor back = io::read_frames(dir / "clip");
    REQUIRE(back.data.size() == p.video.data.size());
    double worst = 0;
    for (std::size_t i = 0; i < back.data.size(); ++i)
        worst = std::max(worst, static_cast<double>(std::abs(back.data[i] - p.video.data[i])));
    CHECK(worst <= 0.5 / 255.0 + 1e-7);

    fs::remove(dir / "clip" / "007.ppm");
    try {
        io::read_frames(dir / "clip");
        FAIL("expected a format error");
    } catch (const FormatError& e) {
        CHECK(std::string(e.what()) == "missing frame 007");
    }
}

TEST_CASE("io: ppm header comments are skipped")
{
    const fs::path dir = scratch("ppm");
    std::ofstream(dir / "000.ppm", std::ios::binary) << "P6\n# made by hand\n1 1\n255\n" << std::string("\xff\x00\x80", 3);
    const VideoTensor v = io::read_frames(dir);
    CHECK(v.frames == 1);
    CHECK(v.at(0, 0, 0, 0) == doctest::Approx(1.0));
    CHECK(v.at(0, 1, 0, 0) == doctest::Approx(0.0));
    CHECK(v.at(0, 2, 0, 0) == doctest::Approx(128.0 / 255.0));
    std::ofstream(dir / "001.ppm", std::ios::binary) << "P3\n1 1\n255\n0 0 0\n";
    CHECK_THROWS_AS(io::read_frames(dir), FormatError);
}

TEST_CASE("io: clip directories round trip with their sidecar")
{
    const fs::path dir = scratch("clips");
    const MediaPair p = synth::generate_sample(synth::draw_scene(9, 1));
    io::write_clip(p, dir / "0001");
    io::write_clip(synth::generate_sample(synth::draw_scene(10, 2)), dir / "0000");
    fs::create_directories(dir / "not_a_clip");
    const auto clips = io::list_clips(dir);
    REQUIRE(clips.size() == 2);
    CHECK(clips[0].filename() == "0000");
    const MediaPair back = io::read_clip(dir / "0001");
    CHECK(back.caption == p.caption);
    CHECK(back.impact_frames == p.impact_frames);
    CHECK(back.impact_times == p.impact_times);
    CHECK(back.video.frames == 16);
    CHECK(back.audio.samples.size() == 16000);
    CHECK_THROWS_AS(io::list_clips(dir / "missing"), FormatError);
}
