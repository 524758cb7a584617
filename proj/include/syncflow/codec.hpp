#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "syncflow/media.hpp"
#include "syncflow/nn.hpp"
#include "syncflow/optim.hpp"

namespace syncflow {

enum class CodecMode { kLossless, kTrainedVae };

const char* codec_mode_name(CodecMode mode);
CodecMode parse_codec_mode(const std::string& name);

struct CodecConfig {
    int temporal_factor = 4;  // r_t
    int spatial_factor = 4;   // r_s
    int audio_factor = 160;   // r_a
    int audio_dim = 160;      // D_A
    CodecMode mode = CodecMode::kLossless;
    // Powers of two so that the value map is exactly invertible.
    double video_scale = 1.0;
    double audio_scale = 1.0;
    std::uint64_t permutation_seed = 0x5eedULL;
    int vae_hidden = 64;
    double vae_beta = 1e-4;

    static CodecConfig desk() { return {}; }
    static CodecConfig full_scale();

    std::int64_t video_channels() const { return 3LL * temporal_factor * spatial_factor * spatial_factor; }
    // Throws ConfigError.
    void validate() const;
};

// Latents are tensors: video [F', C_z, H', W'], audio [T, D_A].
class LatentCodec {
public:
    explicit LatentCodec(CodecConfig config = {}, std::uint64_t init_seed = 0);

    const CodecConfig& config() const { return config_; }
    Shape video_latent_shape(std::int64_t frames, std::int64_t height, std::int64_t width) const;
    Shape audio_latent_shape(std::int64_t samples) const;

    // `noise` draws the VAE sample z = mu + sigma * eps; null gives the mean.
    Tensor encode_video(const VideoTensor& video, Rng* noise = nullptr) const;
    VideoTensor decode_video(const Tensor& latent) const;
    Tensor encode_audio(const AudioWave& wave, Rng* noise = nullptr) const;
    AudioWave decode_audio(const Tensor& latent, int sample_rate) const;

    // Chooses the power-of-two scales from the RMS of the training clips
    // (lossless mode only; the VAE latents are already regularized by KL).
    void fit_scales(const std::vector<MediaPair>& train);

    // Differentiable pieces of the trained-VAE path.
    struct Moments {
        Tensor mu;
        Tensor logvar;
    };
    Moments video_moments(const Tensor& raw) const; // raw [F, 3, H, W]
    Moments audio_moments(const Tensor& raw) const; // raw [M]
    Tensor video_decoder(const Tensor& latent) const; // unclamped [F, 3, H, W]
    Tensor audio_decoder(const Tensor& latent) const; // unclamped [M]

    void visit(const std::string& prefix, const nn::ParamVisitor& fn);
    NamedParams parameters();

    std::int64_t permutation_at(std::int64_t d) const { return perm_[static_cast<std::size_t>(d)]; }
    float sign_at(std::int64_t d) const { return signs_[static_cast<std::size_t>(d)]; }

private:
    struct VaeHalf {
        nn::Linear enc1, enc2, dec1, dec2;
        void visit(const std::string& prefix, const nn::ParamVisitor& fn);
    };

    void check_video(std::int64_t frames, std::int64_t height, std::int64_t width) const;
    Tensor to_blocks(const Tensor& raw) const;   // [F,3,H,W] -> [F',C_z,H',W']
    Tensor from_blocks(const Tensor& z) const;   // inverse
    Tensor stack_frames(const Tensor& raw) const; // [M] -> [T, D_A]
    Tensor unstack_frames(const Tensor& z) const; // inverse

    CodecConfig config_;
    std::vector<std::int64_t> perm_;
    std::vector<std::int64_t> inverse_perm_;
    std::vector<float> signs_;
    VaeHalf video_vae_;
    VaeHalf audio_vae_;
};

Tensor video_to_tensor(const VideoTensor& v);
Tensor audio_to_tensor(const AudioWave& a);

// 0.5 * sum(mu^2 + exp(logvar) - 1 - logvar)
double kl_diag_gaussian(const Tensor& mu, const Tensor& logvar);
// Differentiable version of the same sum.
Tensor kl_term(const Tensor& mu, const Tensor& logvar);

// Reconstruction MSE (video + audio) + beta * KL averaged per latent element.
Tensor vae_objective(const LatentCodec& codec, const MediaPair& sample, double beta, Rng& noise);

struct VaeTrainOptions {
    int steps = 200;
    int batch = 4;
    double lr = 1e-3;
    double beta = 1e-4;
    std::uint64_t seed = 0;
};

struct VaeTrainReport {
    std::vector<double> losses;
    bool diverged = false;
    int completed_steps = 0;
};

// On a non-finite loss the parameters of the last good step are restored.
VaeTrainReport train_vae(LatentCodec& codec, const std::vector<MediaPair>& data, const VaeTrainOptions& options);

} // namespace syncflow
