#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "syncflow/media.hpp"
#include "syncflow/tensor.hpp"

namespace syncflow::io {

namespace fs = std::filesystem;

// SYTF: magic, u16 version, u16 rank, u32 dims, u8 dtype (0 f32, 1 f64),
// row-major payload. Everything little-endian.
inline constexpr std::uint16_t kTensorVersion = 1;

void write_tensor(std::ostream& out, const Tensor& t);
Tensor read_tensor(std::istream& in); // FormatError
std::string tensor_bytes(const Tensor& t);
void save_tensor(const Tensor& t, const fs::path& path);
Tensor load_tensor(const fs::path& path);

// Little-endian primitives shared by the binary formats.
void put_u8(std::ostream& out, std::uint8_t v);
void put_u16(std::ostream& out, std::uint16_t v);
void put_u32(std::ostream& out, std::uint32_t v);
void put_u64(std::ostream& out, std::uint64_t v);
std::uint8_t get_u8(std::istream& in);
std::uint16_t get_u16(std::istream& in);
std::uint32_t get_u32(std::istream& in);
std::uint64_t get_u64(std::istream& in);
void put_string(std::ostream& out, const std::string& s); // u32 length + bytes
std::string get_string(std::istream& in);

// Writes to a sibling temporary and renames it over path.
void atomic_write(const fs::path& path, const std::string& bytes);
std::string read_file(const fs::path& path); // FormatError when unreadable

// PCM 16-bit mono RIFF/WAVE, round half away from zero.
std::string wav_bytes(const AudioWave& wave);
void write_wav(const AudioWave& wave, const fs::path& path);
AudioWave parse_wav(const std::string& bytes);
AudioWave read_wav(const fs::path& path);

// One binary PPM per frame: 000.ppm, 001.ppm, ...
std::string ppm_bytes(const VideoTensor& video, std::int64_t frame);
void write_frames(const VideoTensor& video, const fs::path& dir);
VideoTensor read_frames(const fs::path& dir);

// A clip directory: frames/NNN.ppm, audio.wav, caption.txt and an optional
// meta.json sidecar with the impact frames and times.
void write_clip(const MediaPair& clip, const fs::path& dir, const std::string& meta_json = {});
MediaPair read_clip(const fs::path& dir);
// Subdirectories holding a caption.txt, sorted by name.
std::vector<fs::path> list_clips(const fs::path& dir);
std::string impact_sidecar(const MediaPair& clip);

} // namespace syncflow::io
