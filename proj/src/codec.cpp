#include "syncflow/codec.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "syncflow/errors.hpp"

namespace syncflow {

const char* codec_mode_name(CodecMode mode)
{
    return mode == CodecMode::kLossless ? "lossless" : "trained-vae";
}

CodecMode parse_codec_mode(const std::string& name)
{
    if (name == "lossless") return CodecMode::kLossless;
    if (name == "trained-vae") return CodecMode::kTrainedVae;
    throw ConfigError("unknown codec mode '" + name + "'");
}

CodecConfig CodecConfig::full_scale()
{
    CodecConfig c;
    c.temporal_factor = 4;
    c.spatial_factor = 8;
    c.audio_factor = 960;
    c.audio_dim = 1142;
    return c;
}

void CodecConfig::validate() const
{
    if (temporal_factor < 1 || spatial_factor < 1 || audio_factor < 1 || audio_dim < 1)
        throw ConfigError("codec factors and audio_dim must be >= 1");
    if (mode == CodecMode::kLossless && audio_dim < audio_factor)
        throw ConfigError("lossless codec needs audio_dim >= audio_factor");
    if (vae_hidden < 1) throw ConfigError("vae_hidden must be >= 1");
    if (vae_beta < 0) throw ConfigError("vae_beta must be >= 0");
    for (double s : {video_scale, audio_scale}) {
        int e = 0;
        if (!(s > 0) || std::frexp(s, &e) != 0.5) throw ConfigError("codec scales must be positive powers of two");
    }
}

void LatentCodec::VaeHalf::visit(const std::string& prefix, const nn::ParamVisitor& fn)
{
    enc1.visit(prefix + ".enc1", fn);
    enc2.visit(prefix + ".enc2", fn);
    dec1.visit(prefix + ".dec1", fn);
    dec2.visit(prefix + ".dec2", fn);
}

LatentCodec::LatentCodec(CodecConfig config, std::uint64_t init_seed) : config_(config)
{
    config_.validate();
    const auto ra = static_cast<std::size_t>(config_.audio_factor);
    perm_.resize(ra);
    std::iota(perm_.begin(), perm_.end(), 0);
    Rng prng(config_.permutation_seed);
    for (std::size_t i = ra; i > 1; --i) std::swap(perm_[i - 1], perm_[prng.below(i)]);
    inverse_perm_.resize(ra);
    for (std::size_t i = 0; i < ra; ++i) inverse_perm_[static_cast<std::size_t>(perm_[i])] = static_cast<std::int64_t>(i);
    signs_.resize(ra);
    for (auto& s : signs_) s = (prng.next_u64() >> 63) ? -1.0f : 1.0f;

    if (config_.mode == CodecMode::kTrainedVae) {
        Rng rng(init_seed);
        const std::int64_t h = config_.vae_hidden;
        const std::int64_t cz = config_.video_channels();
        video_vae_ = {nn::Linear(cz, h, rng), nn::Linear(h, 2 * cz, rng), nn::Linear(cz, h, rng), nn::Linear(h, cz, rng)};
        const std::int64_t ra_i = config_.audio_factor, da = config_.audio_dim;
        audio_vae_ = {nn::Linear(ra_i, h, rng), nn::Linear(h, 2 * da, rng), nn::Linear(da, h, rng), nn::Linear(h, ra_i, rng)};
    }
}

void LatentCodec::check_video(std::int64_t frames, std::int64_t height, std::int64_t width) const
{
    if (frames % config_.temporal_factor != 0)
        throw ShapeError("video frames axis (" + std::to_string(frames) + ") not divisible by temporal factor " +
                         std::to_string(config_.temporal_factor));
    if (height % config_.spatial_factor != 0)
        throw ShapeError("video height axis (" + std::to_string(height) + ") not divisible by spatial factor " +
                         std::to_string(config_.spatial_factor));
    if (width % config_.spatial_factor != 0)
        throw ShapeError("video width axis (" + std::to_string(width) + ") not divisible by spatial factor " +
                         std::to_string(config_.spatial_factor));
}

Shape LatentCodec::video_latent_shape(std::int64_t frames, std::int64_t height, std::int64_t width) const
{
    check_video(frames, height, width);
    return {frames / config_.temporal_factor, config_.video_channels(), height / config_.spatial_factor,
            width / config_.spatial_factor};
}

Shape LatentCodec::audio_latent_shape(std::int64_t samples) const
{
    if (samples % config_.audio_factor != 0)
        throw ShapeError("audio samples axis (" + std::to_string(samples) + ") not divisible by audio factor " +
                         std::to_string(config_.audio_factor));
    return {samples / config_.audio_factor, config_.audio_dim};
}

Tensor LatentCodec::to_blocks(const Tensor& raw) const
{
    const std::int64_t F = raw.dim(0), H = raw.dim(2), W = raw.dim(3);
    const std::int64_t rt = config_.temporal_factor, rs = config_.spatial_factor;
    check_video(F, H, W);
    // [F', rt, 3, H', rs, W', rs] -> [F', rt, 3, rs, rs, H', W']
    Tensor x = reshape(raw, {F / rt, rt, 3, H / rs, rs, W / rs, rs});
    x = permute(x, {0, 1, 2, 4, 6, 3, 5});
    return reshape(x, {F / rt, config_.video_channels(), H / rs, W / rs});
}

Tensor LatentCodec::from_blocks(const Tensor& z) const
{
    if (z.rank() != 4 || z.dim(1) != config_.video_channels())
        throw ShapeError("video latent shape " + shape_str(z.shape()) + " does not match the codec channels " +
                         std::to_string(config_.video_channels()));
    const std::int64_t Fp = z.dim(0), Hp = z.dim(2), Wp = z.dim(3);
    const std::int64_t rt = config_.temporal_factor, rs = config_.spatial_factor;
    Tensor x = reshape(z, {Fp, rt, 3, rs, rs, Hp, Wp});
    x = permute(x, {0, 1, 2, 5, 3, 6, 4});
    return reshape(x, {Fp * rt, 3, Hp * rs, Wp * rs});
}

Tensor LatentCodec::stack_frames(const Tensor& raw) const
{
    const Shape s = audio_latent_shape(raw.numel());
    const std::int64_t T = s[0], ra = config_.audio_factor;
    Tensor frames = index_select(reshape(raw, {T, ra}), 1, perm_);
    frames = mul(frames, Tensor({ra}, signs_).to(raw.dtype()));
    if (config_.audio_dim > ra) frames = concat({frames, Tensor({T, config_.audio_dim - ra}, raw.dtype())}, 1);
    return frames;
}

Tensor LatentCodec::unstack_frames(const Tensor& z) const
{
    if (z.rank() != 2 || z.dim(1) != config_.audio_dim)
        throw ShapeError("audio latent shape " + shape_str(z.shape()) + " does not match audio_dim " +
                         std::to_string(config_.audio_dim));
    const std::int64_t ra = config_.audio_factor;
    Tensor frames = config_.audio_dim > ra ? slice(z, 1, 0, ra) : z;
    frames = mul(frames, Tensor({ra}, signs_).to(z.dtype()));
    frames = index_select(frames, 1, inverse_perm_);
    return reshape(frames, {z.dim(0) * ra});
}

Tensor video_to_tensor(const VideoTensor& v)
{
    return Tensor({v.frames, VideoTensor::kChannels, v.height, v.width}, v.data);
}

Tensor audio_to_tensor(const AudioWave& a)
{
    return Tensor({static_cast<std::int64_t>(a.samples.size())}, a.samples);
}

namespace {

Tensor sample_latent(const LatentCodec::Moments& m, Rng* noise)
{
    if (!noise) return m.mu;
    Tensor eps(m.mu.shape(), m.mu.dtype());
    for (std::int64_t i = 0; i < eps.numel(); ++i) eps.set(i, noise->normal());
    return add(m.mu, mul(exp(scale(m.logvar, 0.5)), eps));
}

} // namespace

LatentCodec::Moments LatentCodec::video_moments(const Tensor& raw) const
{
    const Tensor blocks = to_blocks(raw);
    const std::int64_t Fp = blocks.dim(0), cz = blocks.dim(1), Hp = blocks.dim(2), Wp = blocks.dim(3);
    Tensor tokens = reshape(permute(blocks, {0, 2, 3, 1}), {-1, cz});
    Tensor out = video_vae_.enc2(gelu(video_vae_.enc1(tokens)));
    auto back = [&](const Tensor& t) { return permute(reshape(t, {Fp, Hp, Wp, cz}), {0, 3, 1, 2}); };
    return {back(slice(out, 1, 0, cz)), back(slice(out, 1, cz, cz))};
}

LatentCodec::Moments LatentCodec::audio_moments(const Tensor& raw) const
{
    const Shape s = audio_latent_shape(raw.numel());
    Tensor out = audio_vae_.enc2(gelu(audio_vae_.enc1(reshape(raw, {s[0], config_.audio_factor}))));
    return {slice(out, 1, 0, config_.audio_dim), slice(out, 1, config_.audio_dim, config_.audio_dim)};
}

Tensor LatentCodec::video_decoder(const Tensor& latent) const
{
    if (latent.rank() != 4 || latent.dim(1) != config_.video_channels())
        throw ShapeError("video latent shape " + shape_str(latent.shape()) + " does not match the codec");
    const std::int64_t Fp = latent.dim(0), cz = latent.dim(1), Hp = latent.dim(2), Wp = latent.dim(3);
    Tensor tokens = reshape(permute(latent, {0, 2, 3, 1}), {-1, cz});
    Tensor out = video_vae_.dec2(gelu(video_vae_.dec1(tokens)));
    return from_blocks(permute(reshape(out, {Fp, Hp, Wp, cz}), {0, 3, 1, 2}));
}

Tensor LatentCodec::audio_decoder(const Tensor& latent) const
{
    if (latent.rank() != 2 || latent.dim(1) != config_.audio_dim)
        throw ShapeError("audio latent shape " + shape_str(latent.shape()) + " does not match audio_dim");
    return reshape(audio_vae_.dec2(gelu(audio_vae_.dec1(latent))), {-1});
}

Tensor LatentCodec::encode_video(const VideoTensor& video, Rng* noise) const
{
    if (video.data.size() != static_cast<std::size_t>(video.frames * VideoTensor::kChannels * video.height * video.width))
        throw ShapeError("video data size does not match its dimensions");
    const Tensor raw = video_to_tensor(video);
    if (config_.mode == CodecMode::kTrainedVae) return sample_latent(video_moments(raw), noise);
    return scale(to_blocks(raw), config_.video_scale);
}

VideoTensor LatentCodec::decode_video(const Tensor& latent) const
{
    Tensor raw = config_.mode == CodecMode::kTrainedVae ? video_decoder(latent)
                                                          : from_blocks(scale(latent, 1.0 / config_.video_scale));
    VideoTensor v(raw.dim(0), raw.dim(2), raw.dim(3));
    v.data = raw.to_f32_vector();
    for (float& x : v.data) x = std::clamp(x, 0.0f, 1.0f);
    return v;
}

Tensor LatentCodec::encode_audio(const AudioWave& wave, Rng* noise) const
{
    const Tensor raw = audio_to_tensor(wave);
    if (config_.mode == CodecMode::kTrainedVae) return sample_latent(audio_moments(raw), noise);
    return scale(stack_frames(raw), config_.audio_scale);
}

AudioWave LatentCodec::decode_audio(const Tensor& latent, int sample_rate) const
{
    Tensor raw = config_.mode == CodecMode::kTrainedVae ? audio_decoder(latent)
                                                          : unstack_frames(scale(latent, 1.0 / config_.audio_scale));
    AudioWave a;
    a.sample_rate = sample_rate;
    a.samples = raw.to_f32_vector();
    for (float& x : a.samples) x = std::clamp(x, -1.0f, 1.0f);
    return a;
}

void LatentCodec::fit_scales(const std::vector<MediaPair>& train)
{
    if (config_.mode != CodecMode::kLossless || train.empty()) return;
    auto pow2_for = [](double sum_sq, double count) {
        const double rms = std::sqrt(sum_sq / std::max(count, 1.0));
        if (!(rms > 0)) return 1.0;
        // never shrink: a scale below one could round subnormals
        return std::ldexp(1.0, std::max(0, static_cast<int>(std::lround(-std::log2(rms)))));
    };
    double vs = 0, vn = 0, as = 0, an = 0;
    for (const auto& p : train) {
        for (float x : p.video.data) vs += static_cast<double>(x) * x;
        for (float x : p.audio.samples) as += static_cast<double>(x) * x;
        vn += static_cast<double>(p.video.data.size());
        an += static_cast<double>(p.audio.samples.size());
    }
    config_.video_scale = pow2_for(vs, vn);
    config_.audio_scale = pow2_for(as, an);
}

void LatentCodec::visit(const std::string& prefix, const nn::ParamVisitor& fn)
{
    if (config_.mode != CodecMode::kTrainedVae) return;
    video_vae_.visit(prefix + ".video", fn);
    audio_vae_.visit(prefix + ".audio", fn);
}

NamedParams LatentCodec::parameters()
{
    NamedParams out;
    visit("codec", [&](const std::string& name, Tensor& t) { out.emplace_back(name, &t); });
    return out;
}

double kl_diag_gaussian(const Tensor& mu, const Tensor& logvar)
{
    if (mu.shape() != logvar.shape()) throw ShapeError("kl_diag_gaussian: mu and logvar shapes differ");
    double total = 0.0;
    for (std::int64_t i = 0; i < mu.numel(); ++i) {
        const double m = mu.at(i), lv = logvar.at(i);
        // expm1 keeps precision when logvar is tiny
        total += m * m + (std::expm1(lv) - lv);
    }
    return 0.5 * total;
}

Tensor kl_term(const Tensor& mu, const Tensor& logvar)
{
    Tensor inner = sub(add(square(mu), exp(logvar)), add_scalar(logvar, 1.0));
    return scale(sum(inner), 0.5);
}

Tensor vae_objective(const LatentCodec& codec, const MediaPair& sample, double beta, Rng& noise)
{
    const Tensor video = video_to_tensor(sample.video);
    const Tensor audio = audio_to_tensor(sample.audio);
    const auto vm = codec.video_moments(video);
    const auto am = codec.audio_moments(audio);
    const Tensor rec_v = mse(codec.video_decoder(sample_latent(vm, &noise)), video);
    const Tensor rec_a = mse(codec.audio_decoder(sample_latent(am, &noise)), audio);
    Tensor loss = add(rec_v, rec_a);
    if (beta == 0.0) return loss;
    const double nv = static_cast<double>(vm.mu.numel()), na = static_cast<double>(am.mu.numel());
    Tensor kl = add(scale(kl_term(vm.mu, vm.logvar), 1.0 / nv), scale(kl_term(am.mu, am.logvar), 1.0 / na));
    return add(loss, scale(kl, beta));
}

VaeTrainReport train_vae(LatentCodec& codec, const std::vector<MediaPair>& data, const VaeTrainOptions& options)
{
    if (codec.config().mode != CodecMode::kTrainedVae) throw ContractError("train_vae requires trained-vae mode");
    if (data.empty()) throw ContractError("train_vae: empty dataset");
    VaeTrainReport report;
    Rng rng(options.seed);
    Adam adam(AdamConfig{options.lr, 0.9, 0.999, 1e-8, 0});
    const NamedParams params = codec.parameters();
    std::vector<Tensor> good;
    for (const auto& [name, p] : params) good.push_back(p->clone());

    std::size_t cursor = 0;
    for (int step = 0; step < options.steps; ++step) {
        zero_grads(params);
        GradTape tape;
        double value = 0.0;
        try {
            TapeScope scope(tape);
            Tensor total;
            for (int b = 0; b < options.batch; ++b) {
                const Tensor l = vae_objective(codec, data[cursor++ % data.size()], options.beta, rng);
                total = total.defined() ? add(total, l) : l;
            }
            total = scale(total, 1.0 / options.batch);
            value = total.item();
            if (!std::isfinite(value)) throw NumericalError("train_vae: non-finite loss");
            tape.backward(total);
            adam.step(params);
            for (const auto& [name, p] : params)
                for (float v : p->data<float>())
                    if (!std::isfinite(v)) throw NumericalError("train_vae: non-finite parameter");
        } catch (const NumericalError&) {
            for (std::size_t i = 0; i < params.size(); ++i) params[i].second->assign(good[i]);
            report.diverged = true;
            break;
        }
        for (std::size_t i = 0; i < params.size(); ++i) good[i].assign(*params[i].second);
        report.losses.push_back(value);
        report.completed_steps = step + 1;
    }
    zero_grads(params);
    return report;
}

} // namespace syncflow
