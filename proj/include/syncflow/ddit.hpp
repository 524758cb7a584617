#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "syncflow/nn.hpp"
#include "syncflow/optim.hpp"
#include "syncflow/text.hpp"

namespace syncflow {

struct TowerConfig {
    int layers = 4;
    int video_dim = 64; // E_v, also the text width
    int audio_dim = 64; // E_a
    int heads = 4;
    int patch = 2;
    int mlp_ratio = 4;
    // Latent geometry the positional tables are built for.
    int latent_frames = 4;
    int latent_height = 8;
    int latent_width = 8;
    int video_channels = 192;
    int audio_frames = 100;
    int audio_channels = 160;
    // Ablations.
    bool use_adaptor = true;
    bool audio_text_cross_attn = false;
    bool audio_only = false;

    static TowerConfig desk() { return {}; }
    static TowerConfig full_scale();
    void validate() const; // ConfigError
    bool operator==(const TowerConfig&) const = default;
};

enum class ParamGroup { kVideoTower = 0, kAudioTower = 1, kAdaptors = 2, kTextEncoder = 3 };
const char* group_name(ParamGroup g);
ParamGroup group_of(const std::string& param_name);

struct DualVelocity {
    Tensor video; // [B, T', C_z, H', W']
    Tensor audio; // [B, T_a, D_A]
};

class SyncFlowModel {
public:
    SyncFlowModel() = default;
    SyncFlowModel(const TowerConfig& config, Vocabulary vocab, std::uint64_t seed);

    const TowerConfig& config() const { return config_; }
    const TextEncoder& text_encoder() const { return text_; }
    DType dtype() const;

    // Encodes captions; items with drop[i] use the null condition.
    TextBatch encode_text(const std::vector<std::string>& captions, const std::vector<bool>& drop = {}) const;
    TextBatch null_text(std::int64_t batch) const;

    struct VideoPass {
        Tensor velocity;
        std::vector<Tensor> features; // per layer, [B, T', E_v]
    };
    // zv: [B, T', C_z, H', W']; t: one value per item in [0, 1].
    VideoPass forward_video(const Tensor& zv, const std::vector<double>& t, const TextBatch& text) const;
    // za: [B, T_a, D_A]. `features` is ignored in audio-only mode.
    Tensor forward_audio(const Tensor& za, const std::vector<double>& t, const std::vector<Tensor>& features,
                         const TextBatch& text) const;
    DualVelocity forward(const Tensor& zv, const Tensor& za, const std::vector<double>& t, const TextBatch& text) const;

    // Building blocks exposed for tests.
    Tensor patchify(const Tensor& zv) const;                     // -> [B, T', S, E_v]
    Tensor unpatchify(const Tensor& tokens, std::int64_t h, std::int64_t w) const; // [B,T',S,p²C] -> latent
    Tensor timestep_embedding(const std::vector<double>& t, bool audio) const; // [B, E]
    Tensor adaptor(int layer, const Tensor& features) const;     // [B, T', E_v] -> [B, T', E_a]
    // One video layer's sub-blocks on h [B, T', S, E_v]; c is silu(t-embedding).
    Tensor spatial_attention(int layer, const Tensor& h, const Tensor& c, const TextBatch& text) const;
    // Returns the new stream and the spatially pooled feature [B, T', E_v].
    std::pair<Tensor, Tensor> temporal_attention(int layer, const Tensor& h, const Tensor& c, const TextBatch& text) const;
    Tensor spatial_positions(std::int64_t grid_h, std::int64_t grid_w) const; // [S, E_v]

    void visit(const nn::ParamVisitor& fn);
    NamedParams parameters();
    NamedParams parameters(ParamGroup group);
    std::int64_t parameter_count();
    std::int64_t parameter_count(ParamGroup group);
    // FNV-1a over the raw parameter bytes of a group.
    std::uint64_t group_hash(ParamGroup group);

    // Deep copy with every parameter converted to dtype.
    SyncFlowModel converted(DType dtype) const;

private:
    struct VideoLayer {
        nn::Linear ada; // -> 6E: shift/scale for spatial, temporal, mlp
        nn::Attention spatial_self, spatial_cross, temporal_self, temporal_cross;
        nn::LayerNorm spatial_cross_norm, temporal_cross_norm;
        nn::Mlp mlp;
    };
    struct AudioLayer {
        nn::Attention self_attn, cross_attn;
        nn::LayerNorm norm1, norm2, norm3;
        nn::Mlp mlp;
    };
    struct Adaptor {
        nn::Attention attn;
        nn::LayerNorm norm;
        nn::Linear proj;
    };
    struct TimeMlp {
        nn::Linear fc1, fc2;
    };

    Tensor video_time(const std::vector<double>& t) const;
    void check_time(const std::vector<double>& t, std::int64_t batch) const;

    TowerConfig config_;
    TextEncoder text_;
    // video tower
    Tensor conv_weight_, conv_bias_;
    nn::Linear patch_embed_;
    Tensor video_pos_t_, video_pos_s_;
    TimeMlp video_time_;
    std::vector<VideoLayer> video_layers_;
    nn::Linear final_ada_, video_out_;
    // audio tower
    nn::Linear audio_in_;
    Tensor audio_pos_;
    TimeMlp audio_time_;
    std::vector<AudioLayer> audio_layers_;
    nn::LayerNorm audio_final_norm_;
    nn::Linear audio_out_;
    nn::Linear text_proj_; // only with audio text conditioning
    std::vector<Adaptor> adaptors_;
};

// Bilinear (half-pixel, clamped) resampling matrix from a src grid to a dst
// grid, rows indexed by dst cell: [dh*dw, sh*sw].
std::vector<double> bilinear_matrix(std::int64_t sh, std::int64_t sw, std::int64_t dh, std::int64_t dw);

} // namespace syncflow
