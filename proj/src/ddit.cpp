#include "syncflow/ddit.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "syncflow/errors.hpp"

namespace syncflow {

TowerConfig TowerConfig::full_scale()
{
    TowerConfig c;
    c.layers = 28;
    c.video_dim = 1152;
    c.audio_dim = 1152;
    c.heads = 16;
    c.latent_frames = 4;
    c.latent_height = 32;
    c.latent_width = 32;
    c.video_channels = 768;
    c.audio_frames = 500;
    c.audio_channels = 1142;
    return c;
}

void TowerConfig::validate() const
{
    if (layers < 1) throw ConfigError("tower needs at least one layer");
    if (heads < 1 || video_dim % heads != 0 || audio_dim % heads != 0)
        throw ConfigError("tower widths must be divisible by the head count");
    if (patch < 1 || latent_height % patch != 0 || latent_width % patch != 0)
        throw ConfigError("latent grid not divisible by the patch size");
    if (latent_frames < 1 || video_channels < 1 || audio_frames < 1 || audio_channels < 1 || mlp_ratio < 1)
        throw ConfigError("tower geometry must be positive");
    if (!use_adaptor && video_dim != audio_dim)
        throw ConfigError("running without adaptors requires equal video and audio widths");
}

const char* group_name(ParamGroup g)
{
    switch (g) {
    case ParamGroup::kVideoTower: return "video_tower";
    case ParamGroup::kAudioTower: return "audio_tower";
    case ParamGroup::kAdaptors: return "adaptors";
    default: return "text_encoder";
    }
}

ParamGroup group_of(const std::string& name)
{
    for (auto g : {ParamGroup::kVideoTower, ParamGroup::kAudioTower, ParamGroup::kAdaptors, ParamGroup::kTextEncoder}) {
        const std::string prefix = std::string(group_name(g)) + ".";
        if (name.compare(0, prefix.size(), prefix) == 0) return g;
    }
    throw ContractError("parameter '" + name + "' belongs to no group");
}

std::vector<double> bilinear_matrix(std::int64_t sh, std::int64_t sw, std::int64_t dh, std::int64_t dw)
{
    std::vector<double> m(static_cast<std::size_t>(dh * dw * sh * sw), 0.0);
    auto taps = [](std::int64_t src, std::int64_t dst, std::int64_t i) {
        const double x = std::clamp((static_cast<double>(i) + 0.5) * static_cast<double>(src) / static_cast<double>(dst) - 0.5,
                                    0.0, static_cast<double>(src - 1));
        const auto lo = static_cast<std::int64_t>(std::floor(x));
        const std::int64_t hi = std::min(lo + 1, src - 1);
        return std::tuple{lo, hi, x - static_cast<double>(lo)};
    };
    for (std::int64_t y = 0; y < dh; ++y) {
        const auto [y0, y1, fy] = taps(sh, dh, y);
        for (std::int64_t x = 0; x < dw; ++x) {
            const auto [x0, x1, fx] = taps(sw, dw, x);
            double* row = m.data() + (y * dw + x) * sh * sw;
            row[y0 * sw + x0] += (1 - fy) * (1 - fx);
            row[y0 * sw + x1] += (1 - fy) * fx;
            row[y1 * sw + x0] += fy * (1 - fx);
            row[y1 * sw + x1] += fy * fx;
        }
    }
    return m;
}

SyncFlowModel::SyncFlowModel(const TowerConfig& config, Vocabulary vocab, std::uint64_t seed) : config_(config)
{
    config_.validate();
    Rng rng(seed);
    const std::int64_t ev = config_.video_dim, ea = config_.audio_dim, h = config_.heads;
    const std::int64_t p2 = static_cast<std::int64_t>(config_.patch) * config_.patch;
    text_ = TextEncoder(std::move(vocab), ev, h, rng);

    conv_weight_ = nn::normal_param({27LL * config_.video_channels, ev}, rng);
    conv_bias_ = nn::zeros_param({ev});
    patch_embed_ = nn::Linear(p2 * ev, ev, rng);
    video_pos_t_ = nn::normal_param({config_.latent_frames, ev}, rng);
    video_pos_s_ = nn::normal_param({(config_.latent_height / config_.patch) * (config_.latent_width / config_.patch), ev}, rng);
    video_time_ = {nn::Linear(ev, ev, rng), nn::Linear(ev, ev, rng)};
    for (int l = 0; l < config_.layers; ++l) {
        video_layers_.push_back({nn::Linear(ev, 6 * ev, rng, true), nn::Attention(ev, h, rng), nn::Attention(ev, h, rng),
                                 nn::Attention(ev, h, rng), nn::Attention(ev, h, rng), nn::LayerNorm(ev),
                                 nn::LayerNorm(ev), nn::Mlp(ev, ev * config_.mlp_ratio, rng)});
    }
    final_ada_ = nn::Linear(ev, 2 * ev, rng, true);
    video_out_ = nn::Linear(ev, p2 * config_.video_channels, rng, true);

    audio_in_ = nn::Linear(config_.audio_channels, ea, rng);
    audio_pos_ = nn::normal_param({config_.audio_frames, ea}, rng);
    audio_time_ = {nn::Linear(ea, ea, rng), nn::Linear(ea, ea, rng)};
    for (int l = 0; l < config_.layers; ++l) {
        audio_layers_.push_back({nn::Attention(ea, h, rng), nn::Attention(ea, h, rng), nn::LayerNorm(ea),
                                 nn::LayerNorm(ea), nn::LayerNorm(ea), nn::Mlp(ea, ea * config_.mlp_ratio, rng)});
    }
    audio_final_norm_ = nn::LayerNorm(ea);
    audio_out_ = nn::Linear(ea, config_.audio_channels, rng, true);
    if (config_.audio_text_cross_attn || config_.audio_only) text_proj_ = nn::Linear(ev, ea, rng);

    if (config_.use_adaptor)
        for (int l = 0; l < config_.layers; ++l)
            adaptors_.push_back({nn::Attention(ev, h, rng), nn::LayerNorm(ev), nn::Linear(ev, ea, rng)});
}

DType SyncFlowModel::dtype() const
{
    return conv_weight_.dtype();
}

TextBatch SyncFlowModel::encode_text(const std::vector<std::string>& captions, const std::vector<bool>& drop) const
{
    std::vector<TextCondition> conds;
    for (std::size_t i = 0; i < captions.size(); ++i)
        conds.push_back(i < drop.size() && drop[i] ? text_.null_condition() : text_.encode(captions[i]));
    return batch_conditions(conds);
}

TextBatch SyncFlowModel::null_text(std::int64_t batch) const
{
    return batch_conditions(std::vector<TextCondition>(static_cast<std::size_t>(batch), text_.null_condition()));
}

void SyncFlowModel::check_time(const std::vector<double>& t, std::int64_t batch) const
{
    if (static_cast<std::int64_t>(t.size()) != batch)
        throw ShapeError("expected one t per batch item (" + std::to_string(batch) + "), got " + std::to_string(t.size()));
    for (double v : t)
        if (!(v >= 0.0 && v <= 1.0)) throw DomainError("flow time t must lie in [0, 1], got " + std::to_string(v));
}

Tensor SyncFlowModel::timestep_embedding(const std::vector<double>& t, bool audio) const
{
    for (double v : t)
        if (!(v >= 0.0 && v <= 1.0)) throw DomainError("flow time t must lie in [0, 1], got " + std::to_string(v));
    std::vector<double> scaled(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) scaled[i] = 1000.0 * t[i];
    const TimeMlp& mlp = audio ? audio_time_ : video_time_;
    const std::int64_t e = audio ? config_.audio_dim : config_.video_dim;
    return mlp.fc2(silu(mlp.fc1(nn::sinusoidal_features(scaled, e, 10000.0, dtype()))));
}

Tensor SyncFlowModel::spatial_positions(std::int64_t gh, std::int64_t gw) const
{
    const std::int64_t th = config_.latent_height / config_.patch, tw = config_.latent_width / config_.patch;
    if (gh == th && gw == tw) return video_pos_s_;
    Tensor m({gh * gw, th * tw}, bilinear_matrix(th, tw, gh, gw));
    return matmul(m.to(dtype()), video_pos_s_);
}

Tensor SyncFlowModel::patchify(const Tensor& zv) const
{
    if (zv.rank() != 5 || zv.dim(2) != config_.video_channels)
        throw ConfigError("video latent " + shape_str(zv.shape()) + " does not match the tower's " +
                          std::to_string(config_.video_channels) + " channels");
    const std::int64_t B = zv.dim(0), T = zv.dim(1), H = zv.dim(3), W = zv.dim(4), p = config_.patch;
    if (H % p != 0) throw ShapeError("latent height axis (" + std::to_string(H) + ") not divisible by patch " + std::to_string(p));
    if (W % p != 0) throw ShapeError("latent width axis (" + std::to_string(W) + ") not divisible by patch " + std::to_string(p));
    const std::int64_t E = config_.video_dim;
    Tensor x = conv3d(permute(zv, {0, 1, 3, 4, 2}), conv_weight_, conv_bias_, {3, 3, 3}); // [B,T,H,W,E]
    x = reshape(x, {B, T, H / p, p, W / p, p, E});
    x = permute(x, {0, 1, 2, 4, 3, 5, 6});
    x = reshape(x, {B, T, (H / p) * (W / p), p * p * E});
    return patch_embed_(x);
}

Tensor SyncFlowModel::unpatchify(const Tensor& tokens, std::int64_t H, std::int64_t W) const
{
    const std::int64_t B = tokens.dim(0), T = tokens.dim(1), p = config_.patch, C = config_.video_channels;
    Tensor x = reshape(tokens, {B, T, H / p, W / p, p, p, C});
    x = permute(x, {0, 1, 6, 2, 4, 3, 5});
    return reshape(x, {B, T, C, H, W});
}

namespace {

Tensor modulate(const Tensor& x, const Tensor& shift, const Tensor& scale_)
{
    return add(mul(layer_norm(x, {}, {}, -1), add_scalar(scale_, 1.0)), shift);
}

std::vector<std::int64_t> repeat_each(std::int64_t n, std::int64_t times)
{
    std::vector<std::int64_t> idx;
    idx.reserve(static_cast<std::size_t>(n * times));
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t k = 0; k < times; ++k) idx.push_back(i);
    return idx;
}

} // namespace

SyncFlowModel::VideoPass SyncFlowModel::forward_video(const Tensor& zv, const std::vector<double>& t,
                                                      const TextBatch& text) const
{
    if (zv.rank() != 5) throw ConfigError("video latent batch must be [B, T', C, H', W'], got " + shape_str(zv.shape()));
    const std::int64_t B = zv.dim(0), T = zv.dim(1), H = zv.dim(3), W = zv.dim(4), p = config_.patch;
    const std::int64_t E = config_.video_dim;
    check_time(t, B);
    if (T > config_.latent_frames)
        throw ConfigError("video latent has " + std::to_string(T) + " frames; the tower supports " +
                          std::to_string(config_.latent_frames));
    if (text.embeddings.dim(0) != B) throw ShapeError("text batch size differs from latent batch size");

    Tensor h = patchify(zv);
    const std::int64_t S = h.dim(2);
    const Tensor pos_t = reshape(slice(video_pos_t_, 0, 0, T), {1, T, 1, E});
    const Tensor pos_s = reshape(spatial_positions(H / p, W / p), {1, 1, S, E});
    h = add(add(h, pos_t), pos_s);

    const Tensor c = silu(timestep_embedding(t, false)); // [B, E]
    VideoPass out;
    for (int l = 0; l < config_.layers; ++l) {
        const auto& layer = video_layers_[static_cast<std::size_t>(l)];
        h = spatial_attention(l, h, c, text);
        auto [next, feature] = temporal_attention(l, h, c, text);
        out.features.push_back(feature);
        const Tensor mod = reshape(layer.ada(c), {B, 1, 1, 6 * E});
        h = add(next, layer.mlp(modulate(next, slice(mod, 3, 4 * E, E), slice(mod, 3, 5 * E, E))));
    }
    const Tensor fmod = reshape(final_ada_(c), {B, 1, 1, 2 * E});
    const Tensor y = video_out_(modulate(h, slice(fmod, 3, 0, E), slice(fmod, 3, E, E)));
    out.velocity = unpatchify(y, H, W);
    return out;
}

Tensor SyncFlowModel::spatial_attention(int l, const Tensor& h, const Tensor& c, const TextBatch& text) const
{
    const auto& layer = video_layers_.at(static_cast<std::size_t>(l));
    const std::int64_t B = h.dim(0), T = h.dim(1), S = h.dim(2), E = h.dim(3);
    const Tensor mod = reshape(layer.ada(c), {B, 1, 1, 6 * E});
    // frames are independent sequences of S patches
    Tensor x = reshape(modulate(h, slice(mod, 3, 0, E), slice(mod, 3, E, E)), {B * T, S, E});
    Tensor out = add(h, reshape(layer.spatial_self.self(x), {B, T, S, E}));
    x = reshape(layer.spatial_cross_norm(out), {B * T, S, E});
    const auto rep = repeat_each(B, T);
    const Tensor ctx = layer.spatial_cross(x, index_select(text.embeddings, 0, rep), index_select(text.key_bias, 0, rep));
    return add(out, reshape(ctx, {B, T, S, E}));
}

std::pair<Tensor, Tensor> SyncFlowModel::temporal_attention(int l, const Tensor& h, const Tensor& c,
                                                            const TextBatch& text) const
{
    const auto& layer = video_layers_.at(static_cast<std::size_t>(l));
    const std::int64_t B = h.dim(0), T = h.dim(1), S = h.dim(2), E = h.dim(3);
    const Tensor mod = reshape(layer.ada(c), {B, 1, 1, 6 * E});
    // patches are independent sequences of T frames
    Tensor hp = permute(h, {0, 2, 1, 3});
    Tensor x = reshape(modulate(hp, slice(mod, 3, 2 * E, E), slice(mod, 3, 3 * E, E)), {B * S, T, E});
    hp = add(hp, reshape(layer.temporal_self.self(x), {B, S, T, E}));
    x = reshape(layer.temporal_cross_norm(hp), {B * S, T, E});
    const auto rep = repeat_each(B, S);
    const Tensor ctx = layer.temporal_cross(x, index_select(text.embeddings, 0, rep), index_select(text.key_bias, 0, rep));
    hp = add(hp, reshape(ctx, {B, S, T, E}));
    return {permute(hp, {0, 2, 1, 3}), mean_axis(hp, 1)};
}

Tensor SyncFlowModel::adaptor(int layer, const Tensor& f) const
{
    if (!config_.use_adaptor) return f;
    const auto& a = adaptors_.at(static_cast<std::size_t>(layer));
    return a.proj(a.norm(add(f, a.attn.self(f))));
}

Tensor SyncFlowModel::forward_audio(const Tensor& za, const std::vector<double>& t, const std::vector<Tensor>& features,
                                    const TextBatch& text) const
{
    if (za.rank() != 3 || za.dim(2) != config_.audio_channels)
        throw ConfigError("audio latent " + shape_str(za.shape()) + " does not match the tower's " +
                          std::to_string(config_.audio_channels) + " channels");
    const std::int64_t B = za.dim(0), Ta = za.dim(1), E = config_.audio_dim;
    check_time(t, B);
    if (Ta > config_.audio_frames)
        throw ConfigError("audio latent has " + std::to_string(Ta) + " frames; the tower supports " +
                          std::to_string(config_.audio_frames));
    if (!config_.audio_only && static_cast<int>(features.size()) != config_.layers)
        throw ContractError("forward_audio needs one video feature tensor per layer");

    Tensor h = add(audio_in_(za), reshape(slice(audio_pos_, 0, 0, Ta), {1, Ta, E}));
    const Tensor t_tok = reshape(timestep_embedding(t, true), {B, 1, E});
    const bool with_text = config_.audio_only || config_.audio_text_cross_attn;
    Tensor text_tokens, text_bias;
    if (with_text) {
        if (text.embeddings.dim(0) != B) throw ShapeError("text batch size differs from latent batch size");
        text_tokens = text_proj_(text.embeddings);
        text_bias = text.key_bias;
    }

    for (int l = 0; l < config_.layers; ++l) {
        const auto& layer = audio_layers_[static_cast<std::size_t>(l)];
        std::vector<Tensor> parts, biases;
        if (!config_.audio_only) {
            const Tensor v = adaptor(l, features[static_cast<std::size_t>(l)]);
            parts.push_back(v);
            biases.push_back(Tensor({B, 1, 1, v.dim(1)}, dtype()));
        }
        if (with_text) {
            parts.push_back(text_tokens);
            biases.push_back(text_bias);
        }
        parts.push_back(t_tok);
        biases.push_back(Tensor({B, 1, 1, 1}, dtype()));
        const Tensor cond = parts.size() == 1 ? parts[0] : concat(parts, 1);
        const Tensor cond_bias = with_text ? concat(biases, 3) : Tensor();

        h = layer.norm1(add(h, layer.self_attn.self(h)));
        h = layer.norm2(add(h, layer.cross_attn(h, cond, cond_bias)));
        h = layer.norm3(add(h, layer.mlp(h)));
    }
    return audio_out_(audio_final_norm_(h));
}

DualVelocity SyncFlowModel::forward(const Tensor& zv, const Tensor& za, const std::vector<double>& t,
                                    const TextBatch& text) const
{
    if (config_.audio_only) return {Tensor(zv.shape(), dtype()), forward_audio(za, t, {}, text)};
    if (zv.dim(0) != za.dim(0)) throw ShapeError("video and audio batch sizes differ");
    VideoPass vp = forward_video(zv, t, text);
    return {vp.velocity, forward_audio(za, t, vp.features, text)};
}

void SyncFlowModel::visit(const nn::ParamVisitor& fn)
{
    text_.visit("text_encoder", fn);
    fn("video_tower.conv.weight", conv_weight_);
    fn("video_tower.conv.bias", conv_bias_);
    patch_embed_.visit("video_tower.patch_embed", fn);
    fn("video_tower.pos_t", video_pos_t_);
    fn("video_tower.pos_s", video_pos_s_);
    video_time_.fc1.visit("video_tower.time.fc1", fn);
    video_time_.fc2.visit("video_tower.time.fc2", fn);
    for (std::size_t l = 0; l < video_layers_.size(); ++l) {
        auto& L = video_layers_[l];
        const std::string p = "video_tower.layers." + std::to_string(l);
        L.ada.visit(p + ".ada", fn);
        L.spatial_self.visit(p + ".spatial_self", fn);
        L.spatial_cross.visit(p + ".spatial_cross", fn);
        L.spatial_cross_norm.visit(p + ".spatial_cross_norm", fn);
        L.temporal_self.visit(p + ".temporal_self", fn);
        L.temporal_cross.visit(p + ".temporal_cross", fn);
        L.temporal_cross_norm.visit(p + ".temporal_cross_norm", fn);
        L.mlp.visit(p + ".mlp", fn);
    }
    final_ada_.visit("video_tower.final_ada", fn);
    video_out_.visit("video_tower.out", fn);

    audio_in_.visit("audio_tower.in", fn);
    fn("audio_tower.pos", audio_pos_);
    audio_time_.fc1.visit("audio_tower.time.fc1", fn);
    audio_time_.fc2.visit("audio_tower.time.fc2", fn);
    for (std::size_t l = 0; l < audio_layers_.size(); ++l) {
        auto& L = audio_layers_[l];
        const std::string p = "audio_tower.layers." + std::to_string(l);
        L.self_attn.visit(p + ".self_attn", fn);
        L.cross_attn.visit(p + ".cross_attn", fn);
        L.norm1.visit(p + ".norm1", fn);
        L.norm2.visit(p + ".norm2", fn);
        L.norm3.visit(p + ".norm3", fn);
        L.mlp.visit(p + ".mlp", fn);
    }
    audio_final_norm_.visit("audio_tower.final_norm", fn);
    audio_out_.visit("audio_tower.out", fn);
    if (text_proj_.weight.defined()) text_proj_.visit("audio_tower.text_proj", fn);

    for (std::size_t l = 0; l < adaptors_.size(); ++l) {
        const std::string p = "adaptors." + std::to_string(l);
        adaptors_[l].attn.visit(p + ".attn", fn);
        adaptors_[l].norm.visit(p + ".norm", fn);
        adaptors_[l].proj.visit(p + ".proj", fn);
    }
}

NamedParams SyncFlowModel::parameters()
{
    NamedParams out;
    visit([&](const std::string& name, Tensor& t) { out.emplace_back(name, &t); });
    return out;
}

NamedParams SyncFlowModel::parameters(ParamGroup group)
{
    NamedParams out;
    visit([&](const std::string& name, Tensor& t) {
        if (group_of(name) == group) out.emplace_back(name, &t);
    });
    return out;
}

std::int64_t SyncFlowModel::parameter_count()
{
    std::int64_t n = 0;
    for (auto& [name, t] : parameters()) n += t->numel();
    return n;
}

std::int64_t SyncFlowModel::parameter_count(ParamGroup group)
{
    std::int64_t n = 0;
    for (auto& [name, t] : parameters(group)) n += t->numel();
    return n;
}

std::uint64_t SyncFlowModel::group_hash(ParamGroup group)
{
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&](const void* data, std::size_t bytes) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < bytes; ++i) {
            h ^= p[i];
            h *= 0x100000001b3ULL;
        }
    };
    for (auto& [name, t] : parameters(group)) {
        mix(name.data(), name.size());
        dispatch_dtype(t->dtype(), [&]<class T>(std::type_identity<T>) {
            const auto d = std::as_const(*t).data<T>();
            mix(d.data(), d.size_bytes());
        });
    }
    return h;
}

SyncFlowModel SyncFlowModel::converted(DType dtype) const
{
    SyncFlowModel copy = *this;
    copy.visit([&](const std::string&, Tensor& t) {
        t = t.to(dtype);
        t.set_requires_grad(true);
    });
    return copy;
}

} // namespace syncflow
