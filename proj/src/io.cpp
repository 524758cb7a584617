#include "syncflow/io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cctype>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include "json.hpp"

#include "syncflow/errors.hpp"

namespace syncflow::io {

namespace {

constexpr char kTensorMagic[4] = {'S', 'Y', 'T', 'F'};

template <class U>
void put_le(std::ostream& out, U v)
{
    char buf[sizeof(U)];
    for (std::size_t i = 0; i < sizeof(U); ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    out.write(buf, sizeof(U));
}

template <class U>
U get_le(std::istream& in)
{
    unsigned char buf[sizeof(U)];
    if (!in.read(reinterpret_cast<char*>(buf), sizeof(U))) throw FormatError("unexpected end of data");
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(buf[i]) << (8 * i);
    return v;
}

} // namespace

void put_u8(std::ostream& out, std::uint8_t v) { put_le(out, v); }
void put_u16(std::ostream& out, std::uint16_t v) { put_le(out, v); }
void put_u32(std::ostream& out, std::uint32_t v) { put_le(out, v); }
void put_u64(std::ostream& out, std::uint64_t v) { put_le(out, v); }
std::uint8_t get_u8(std::istream& in) { return get_le<std::uint8_t>(in); }
std::uint16_t get_u16(std::istream& in) { return get_le<std::uint16_t>(in); }
std::uint32_t get_u32(std::istream& in) { return get_le<std::uint32_t>(in); }
std::uint64_t get_u64(std::istream& in) { return get_le<std::uint64_t>(in); }

void put_string(std::ostream& out, const std::string& s)
{
    put_u32(out, static_cast<std::uint32_t>(s.size()));
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::istream& in)
{
    const std::uint32_t n = get_u32(in);
    std::string s(n, '\0');
    if (n && !in.read(s.data(), n)) throw FormatError("unexpected end of data");
    return s;
}

void write_tensor(std::ostream& out, const Tensor& t)
{
    out.write(kTensorMagic, 4);
    put_u16(out, kTensorVersion);
    put_u16(out, static_cast<std::uint16_t>(t.rank()));
    for (auto d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
    put_u8(out, static_cast<std::uint8_t>(t.dtype()));
    if (t.dtype() == DType::kF32) {
        for (float v : t.data<float>()) put_u32(out, std::bit_cast<std::uint32_t>(v));
    } else {
        for (double v : t.data<double>()) put_u64(out, std::bit_cast<std::uint64_t>(v));
    }
}

Tensor read_tensor(std::istream& in)
{
    char magic[4];
    if (!in.read(magic, 4)) throw FormatError("tensor file truncated");
    if (std::memcmp(magic, kTensorMagic, 4) != 0) throw FormatError("bad tensor magic");
    const auto version = get_u16(in);
    if (version != kTensorVersion) throw FormatError("unsupported tensor version " + std::to_string(version));
    const auto rank = get_u16(in);
    Shape shape(rank);
    for (auto& d : shape) d = get_u32(in);
    const auto code = get_u8(in);
    if (code > 1) throw FormatError("unknown tensor dtype code " + std::to_string(code));
    Tensor t(shape, static_cast<DType>(code));
    try {
        if (code == 0) {
            for (auto& v : t.data<float>()) v = std::bit_cast<float>(get_u32(in));
        } else {
            for (auto& v : t.data<double>()) v = std::bit_cast<double>(get_u64(in));
        }
    } catch (const FormatError&) {
        throw FormatError("tensor payload truncated");
    }
    return t;
}

std::string tensor_bytes(const Tensor& t)
{
    std::ostringstream out(std::ios::binary);
    write_tensor(out, t);
    return out.str();
}

void save_tensor(const Tensor& t, const fs::path& path) { atomic_write(path, tensor_bytes(t)); }

Tensor load_tensor(const fs::path& path)
{
    std::istringstream in(read_file(path), std::ios::binary);
    Tensor t = read_tensor(in);
    if (in.peek() != std::char_traits<char>::eof()) throw FormatError("trailing bytes after tensor in " + path.string());
    return t;
}

void atomic_write(const fs::path& path, const std::string& bytes)
{
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw FormatError("cannot write " + tmp.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw FormatError("cannot write " + tmp.string());
    }
    fs::rename(tmp, path);
}

std::string read_file(const fs::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot read " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// WAV

std::string wav_bytes(const AudioWave& wave)
{
    const auto n = static_cast<std::uint32_t>(wave.samples.size());
    std::ostringstream out(std::ios::binary);
    out.write("RIFF", 4);
    put_u32(out, 36 + 2 * n);
    out.write("WAVE", 4);
    out.write("fmt ", 4);
    put_u32(out, 16);
    put_u16(out, 1); // PCM
    put_u16(out, 1); // mono
    put_u32(out, static_cast<std::uint32_t>(wave.sample_rate));
    put_u32(out, static_cast<std::uint32_t>(wave.sample_rate) * 2);
    put_u16(out, 2);
    put_u16(out, 16);
    out.write("data", 4);
    put_u32(out, 2 * n);
    for (float x : wave.samples) {
        if (!(x >= -1.0f && x <= 1.0f)) throw DomainError("write_wav: sample outside [-1, 1]");
        // lround rounds halves away from zero
        const long q = std::lround(static_cast<double>(x) * 32767.0);
        put_u16(out, static_cast<std::uint16_t>(static_cast<std::int16_t>(q)));
    }
    return out.str();
}

void write_wav(const AudioWave& wave, const fs::path& path) { atomic_write(path, wav_bytes(wave)); }

AudioWave parse_wav(const std::string& bytes)
{
    std::istringstream in(bytes, std::ios::binary);
    char id[4];
    auto tag = [&](const char* want) {
        if (!in.read(id, 4)) throw FormatError("wav: truncated header");
        return std::memcmp(id, want, 4) == 0;
    };
    if (!tag("RIFF")) throw FormatError("wav: missing RIFF header");
    get_u32(in);
    if (!tag("WAVE")) throw FormatError("wav: missing WAVE tag");
    bool have_fmt = false;
    AudioWave wave;
    while (true) {
        if (!in.read(id, 4)) throw FormatError("wav: no data chunk");
        const std::uint32_t size = get_u32(in);
        if (std::memcmp(id, "fmt ", 4) == 0) {
            if (size < 16) throw FormatError("wav: short fmt chunk");
            const auto format = get_u16(in);
            const auto channels = get_u16(in);
            wave.sample_rate = static_cast<int>(get_u32(in));
            get_u32(in);
            get_u16(in);
            const auto bits = get_u16(in);
            if (format != 1) throw FormatError("wav: unsupported encoding " + std::to_string(format) + " (PCM only)");
            if (channels != 1) throw FormatError("wav: expected mono, got " + std::to_string(channels) + " channels");
            if (bits != 16) throw FormatError("wav: expected 16-bit samples, got " + std::to_string(bits));
            in.ignore(size - 16 + (size & 1));
            have_fmt = true;
        } else if (std::memcmp(id, "data", 4) == 0) {
            if (!have_fmt) throw FormatError("wav: data chunk before fmt chunk");
            if (size % 2) throw FormatError("wav: odd data chunk size");
            wave.samples.resize(size / 2);
            for (auto& s : wave.samples) s = static_cast<float>(static_cast<std::int16_t>(get_u16(in)) / 32767.0);
            return wave;
        } else {
            in.ignore(size + (size & 1));
        }
    }
}

AudioWave read_wav(const fs::path& path) { return parse_wav(read_file(path)); }

// PPM

namespace {

std::string frame_name(std::int64_t i, std::int64_t frames)
{
    int width = 3;
    for (std::int64_t n = frames - 1; n >= 1000; n /= 10) ++width;
    std::ostringstream s;
    s << std::setw(width) << std::setfill('0') << i;
    return s.str();
}

std::uint8_t quantize(float v)
{
    const double c = std::clamp(static_cast<double>(v), 0.0, 1.0);
    return static_cast<std::uint8_t>(std::lround(c * 255.0));
}

// Next header token, skipping whitespace and '#' comments.
std::string ppm_token(std::istream& in)
{
    std::string tok;
    int c;
    while ((c = in.get()) != EOF) {
        if (c == '#') {
            while ((c = in.get()) != EOF && c != '\n') {}
            continue;
        }
        if (std::isspace(c)) {
            if (!tok.empty()) return tok;
            continue;
        }
        tok.push_back(static_cast<char>(c));
    }
    if (tok.empty()) throw FormatError("ppm: truncated header");
    return tok;
}

long ppm_int(std::istream& in)
{
    const std::string tok = ppm_token(in);
    try {
        std::size_t used = 0;
        const long v = std::stol(tok, &used);
        if (used != tok.size() || v <= 0) throw FormatError("");
        return v;
    } catch (const std::exception&) {
        throw FormatError("ppm: bad header field '" + tok + "'");
    }
}

} // namespace

std::string ppm_bytes(const VideoTensor& video, std::int64_t frame)
{
    std::ostringstream out(std::ios::binary);
    out << "P6\n" << video.width << ' ' << video.height << "\n255\n";
    for (std::int64_t y = 0; y < video.height; ++y)
        for (std::int64_t x = 0; x < video.width; ++x)
            for (std::int64_t c = 0; c < VideoTensor::kChannels; ++c)
                out.put(static_cast<char>(quantize(video.at(frame, c, y, x))));
    return out.str();
}

void write_frames(const VideoTensor& video, const fs::path& dir)
{
    fs::create_directories(dir);
    for (std::int64_t f = 0; f < video.frames; ++f)
        atomic_write(dir / (frame_name(f, video.frames) + ".ppm"), ppm_bytes(video, f));
}

VideoTensor read_frames(const fs::path& dir)
{
    if (!fs::is_directory(dir)) throw FormatError("not a frame directory: " + dir.string());
    std::map<long, fs::path> found;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (e.path().extension() != ".ppm") continue;
        const std::string stem = e.path().stem().string();
        if (stem.empty() || !std::all_of(stem.begin(), stem.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); }))
            continue;
        found[std::stol(stem)] = e.path();
    }
    if (found.empty()) throw FormatError("no frames in " + dir.string());
    const long last = found.rbegin()->first;
    for (long i = 0; i <= last; ++i)
        if (!found.count(i)) throw FormatError("missing frame " + frame_name(i, last + 1));

    VideoTensor video;
    int idx = 0;
    for (const auto& [i, path] : found) {
        std::istringstream in(read_file(path), std::ios::binary);
        if (ppm_token(in) != "P6") throw FormatError("ppm: " + path.string() + " is not binary P6");
        const long w = ppm_int(in), h = ppm_int(in), maxval = ppm_int(in);
        if (maxval != 255) throw FormatError("ppm: unsupported maxval " + std::to_string(maxval));
        if (idx == 0) {
            video = VideoTensor(static_cast<std::int64_t>(found.size()), h, w);
        } else if (h != video.height || w != video.width) {
            throw FormatError("ppm: frame " + path.filename().string() + " has a different size");
        }
        std::string px(static_cast<std::size_t>(3 * w * h), '\0');
        if (!in.read(px.data(), static_cast<std::streamsize>(px.size()))) throw FormatError("ppm: truncated pixels in " + path.string());
        std::size_t k = 0;
        for (long y = 0; y < h; ++y)
            for (long x = 0; x < w; ++x)
                for (int c = 0; c < 3; ++c)
                    video.at(idx, c, y, x) = static_cast<float>(static_cast<unsigned char>(px[k++]) / 255.0);
        ++idx;
    }
    return video;
}

// Clip directories

std::string impact_sidecar(const MediaPair& clip)
{
    nlohmann::ordered_json j{{"caption", clip.caption}, {"impact_frames", clip.impact_frames}, {"impact_times", clip.impact_times}};
    return j.dump(2) + "\n";
}

void write_clip(const MediaPair& clip, const fs::path& dir, const std::string& meta_json)
{
    write_frames(clip.video, dir / "frames");
    write_wav(clip.audio, dir / "audio.wav");
    atomic_write(dir / "caption.txt", clip.caption + "\n");
    atomic_write(dir / "meta.json", meta_json.empty() ? impact_sidecar(clip) : meta_json);
}

MediaPair read_clip(const fs::path& dir)
{
    MediaPair clip;
    clip.video = read_frames(dir / "frames");
    clip.audio = read_wav(dir / "audio.wav");
    clip.caption = read_file(dir / "caption.txt");
    while (!clip.caption.empty() && (clip.caption.back() == '\n' || clip.caption.back() == '\r')) clip.caption.pop_back();
    if (fs::exists(dir / "meta.json")) {
        try {
            const auto j = nlohmann::json::parse(read_file(dir / "meta.json"));
            if (j.contains("impact_frames")) clip.impact_frames = j.at("impact_frames").get<std::vector<int>>();
            if (j.contains("impact_times")) clip.impact_times = j.at("impact_times").get<std::vector<double>>();
        } catch (const nlohmann::json::exception& e) {
            throw FormatError("bad sidecar " + (dir / "meta.json").string() + ": " + e.what());
        }
    }
    return clip;
}

std::vector<fs::path> list_clips(const fs::path& dir)
{
    if (!fs::is_directory(dir)) throw FormatError("not a clip directory: " + dir.string());
    std::vector<fs::path> out;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_directory() && fs::exists(e.path() / "caption.txt")) out.push_back(e.path());
    std::sort(out.begin(), out.end());
    return out;
}

} // namespace syncflow::io
