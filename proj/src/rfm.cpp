#include "syncflow/rfm.hpp"

#include <cmath>
#include <limits>

#include "syncflow/errors.hpp"

namespace syncflow::rfm {

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op)
{
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " differ");
}

Tensor stack_items(const std::vector<Tensor>& items)
{
    std::vector<Tensor> parts;
    for (const auto& it : items) {
        Shape s = it.shape();
        s.insert(s.begin(), 1);
        parts.push_back(reshape(it, s));
    }
    return parts.size() == 1 ? parts[0] : concat(parts, 0);
}

} // namespace

Tensor interpolate(const Tensor& x0, const Tensor& x1, const std::vector<double>& t)
{
    require_same_shape(x0, x1, "interpolate");
    const std::int64_t n = t.size() == 1 ? 1 : x0.dim(0);
    if (t.size() != 1 && static_cast<std::int64_t>(t.size()) != n)
        throw ShapeError("interpolate: expected one t per item");
    for (double v : t)
        if (!(v >= 0.0 && v <= 1.0)) throw DomainError("interpolate: t outside [0, 1]");
    Tensor out(x0.shape(), x0.dtype());
    const std::int64_t per = x0.numel() / n;
    dispatch_dtype(x0.dtype(), [&]<class T>(std::type_identity<T>) {
        const auto a = x0.data<T>();
        const auto b = x1.data<T>();
        auto o = out.data<T>();
        for (std::int64_t i = 0; i < x0.numel(); ++i) {
            const double ti = t[static_cast<std::size_t>(i / per)];
            o[static_cast<std::size_t>(i)] =
                static_cast<T>((1.0 - ti) * static_cast<double>(a[static_cast<std::size_t>(i)]) +
                               ti * static_cast<double>(b[static_cast<std::size_t>(i)]));
        }
    });
    return out;
}

Tensor interpolate(const Tensor& x0, const Tensor& x1, double t)
{
    return interpolate(x0, x1, std::vector<double>{t});
}

Tensor velocity_target(const Tensor& x0, const Tensor& x1)
{
    require_same_shape(x0, x1, "velocity_target");
    Tensor out(x0.shape(), x0.dtype());
    dispatch_dtype(x0.dtype(), [&]<class T>(std::type_identity<T>) {
        const auto a = x0.data<T>();
        const auto b = x1.data<T>();
        auto o = out.data<T>();
        for (std::size_t i = 0; i < o.size(); ++i) o[i] = b[i] - a[i];
    });
    return out;
}

std::vector<std::int64_t> hungarian(const std::vector<double>& cost, std::int64_t n)
{
    if (static_cast<std::int64_t>(cost.size()) != n * n) throw ContractError("hungarian: cost matrix is not n*n");
    const double inf = std::numeric_limits<double>::infinity();
    // potentials, 1-indexed with a virtual column 0
    std::vector<double> u(static_cast<std::size_t>(n + 1), 0.0), v(static_cast<std::size_t>(n + 1), 0.0);
    std::vector<std::int64_t> match(static_cast<std::size_t>(n + 1), 0), way(static_cast<std::size_t>(n + 1), 0);
    auto c = [&](std::int64_t i, std::int64_t j) { return cost[static_cast<std::size_t>((i - 1) * n + (j - 1))]; };
    for (std::int64_t i = 1; i <= n; ++i) {
        match[0] = i;
        std::int64_t j0 = 0;
        std::vector<double> minv(static_cast<std::size_t>(n + 1), inf);
        std::vector<bool> used(static_cast<std::size_t>(n + 1), false);
        do {
            used[static_cast<std::size_t>(j0)] = true;
            const std::int64_t i0 = match[static_cast<std::size_t>(j0)];
            double delta = inf;
            std::int64_t j1 = 0;
            for (std::int64_t j = 1; j <= n; ++j) {
                const auto js = static_cast<std::size_t>(j);
                if (used[js]) continue;
                const double cur = c(i0, j) - u[static_cast<std::size_t>(i0)] - v[js];
                if (cur < minv[js]) {
                    minv[js] = cur;
                    way[js] = j0;
                }
                if (minv[js] < delta) {
                    delta = minv[js];
                    j1 = j;
                }
            }
            for (std::int64_t j = 0; j <= n; ++j) {
                const auto js = static_cast<std::size_t>(j);
                if (used[js]) {
                    u[static_cast<std::size_t>(match[js])] += delta;
                    v[js] -= delta;
                } else {
                    minv[js] -= delta;
                }
            }
            j0 = j1;
        } while (match[static_cast<std::size_t>(j0)] != 0);
        do {
            const std::int64_t j1 = way[static_cast<std::size_t>(j0)];
            match[static_cast<std::size_t>(j0)] = match[static_cast<std::size_t>(j1)];
            j0 = j1;
        } while (j0 != 0);
    }
    std::vector<std::int64_t> col(static_cast<std::size_t>(n));
    for (std::int64_t j = 1; j <= n; ++j) col[static_cast<std::size_t>(match[static_cast<std::size_t>(j)] - 1)] = j - 1;
    return col;
}

namespace {

std::vector<double> pair_costs(const std::vector<Tensor>& noise, const std::vector<Tensor>& data, std::int64_t& n)
{
    if (noise.size() != data.size() || noise.empty()) throw ContractError("ot_pair: modality lists differ");
    n = noise[0].dim(0);
    for (std::size_t m = 0; m < noise.size(); ++m) {
        if (noise[m].dim(0) != n || data[m].dim(0) != n)
            throw ContractError("ot_pair: noise and data batches must have equal sizes");
        if (noise[m].numel() != data[m].numel()) throw ContractError("ot_pair: item sizes differ");
    }
    std::vector<double> cost(static_cast<std::size_t>(n * n), 0.0);
    for (std::size_t m = 0; m < noise.size(); ++m) {
        const auto a = noise[m].to_f64_vector();
        const auto b = data[m].to_f64_vector();
        const std::int64_t per = noise[m].numel() / std::max<std::int64_t>(n, 1);
        for (std::int64_t i = 0; i < n; ++i)
            for (std::int64_t j = 0; j < n; ++j) {
                double s = 0;
                const double* pa = a.data() + i * per;
                const double* pb = b.data() + j * per;
                for (std::int64_t k = 0; k < per; ++k) {
                    const double d = pa[k] - pb[k];
                    s += d * d;
                }
                cost[static_cast<std::size_t>(i * n + j)] += s;
            }
    }
    return cost;
}

} // namespace

std::vector<std::int64_t> ot_pair(const std::vector<Tensor>& noise, const std::vector<Tensor>& data)
{
    std::int64_t n = 0;
    const auto cost = pair_costs(noise, data, n);
    return hungarian(cost, n);
}

double coupling_cost(const std::vector<Tensor>& noise, const std::vector<Tensor>& data,
                     const std::vector<std::int64_t>& perm)
{
    std::int64_t n = 0;
    const auto cost = pair_costs(noise, data, n);
    double total = 0;
    for (std::int64_t i = 0; i < n; ++i) total += cost[static_cast<std::size_t>(i * n + perm[static_cast<std::size_t>(i)])];
    return total;
}

FmLoss fm_loss(const SyncFlowModel& model, const LatentPair& x0, const LatentPair& x1, const std::vector<double>& t,
               const TextBatch& text, LossParts parts)
{
    FmLoss out;
    const bool want_video = parts != LossParts::kAudioOnly && !model.config().audio_only;
    const bool want_audio = parts != LossParts::kVideoOnly;
    const Tensor xt_v = interpolate(x0.video, x1.video, t);
    SyncFlowModel::VideoPass vp;
    if (!model.config().audio_only) {
        if (want_video) {
            vp = model.forward_video(xt_v, t, text);
        } else {
            NoTapeScope frozen;
            vp = model.forward_video(xt_v, t, text);
        }
    }
    Tensor err_v, err_a;
    double n_v = 0, n_a = 0;
    if (want_video) {
        err_v = sum(square(sub(vp.velocity, velocity_target(x0.video, x1.video))));
        n_v = static_cast<double>(x1.video.numel());
        out.video = scale(err_v, 1.0 / n_v);
    }
    if (want_audio) {
        const Tensor xt_a = interpolate(x0.audio, x1.audio, t);
        const Tensor va = model.forward_audio(xt_a, t, vp.features, text);
        err_a = sum(square(sub(va, velocity_target(x0.audio, x1.audio))));
        n_a = static_cast<double>(x1.audio.numel());
        out.audio = scale(err_a, 1.0 / n_a);
    }
    if (err_v.defined() && err_a.defined()) out.total = scale(add(err_v, err_a), 1.0 / (n_v + n_a));
    else out.total = err_v.defined() ? out.video : out.audio;
    return out;
}

Tensor cfg_combine(const Tensor& cond, const Tensor& uncond, double w)
{
    require_same_shape(cond, uncond, "cfg_velocity");
    Tensor out(cond.shape(), cond.dtype());
    dispatch_dtype(cond.dtype(), [&]<class T>(std::type_identity<T>) {
        const auto c = cond.data<T>();
        const auto u = uncond.data<T>();
        auto o = out.data<T>();
        for (std::size_t i = 0; i < o.size(); ++i)
            o[i] = static_cast<T>((1.0 - w) * static_cast<double>(u[i]) + w * static_cast<double>(c[i]));
    });
    return out;
}

DualVelocity cfg_velocity(const DualVelocity& cond, const DualVelocity& uncond, double w)
{
    return {cfg_combine(cond.video, uncond.video, w), cfg_combine(cond.audio, uncond.audio, w)};
}

const char* sample_mode_name(SampleMode m)
{
    switch (m) {
    case SampleMode::kT2AV: return "t2av";
    case SampleMode::kV2AInversion: return "v2a";
    default: return "audio-only";
    }
}

SampleMode parse_sample_mode(const std::string& name)
{
    if (name == "t2av") return SampleMode::kT2AV;
    if (name == "v2a") return SampleMode::kV2AInversion;
    if (name == "audio-only") return SampleMode::kAudioOnly;
    throw ConfigError("unknown sample mode '" + name + "'");
}

LatentPair euler_integrate(const VelocityField& field, const LatentPair& x0, int steps, const Tensor* video_anchor,
                           const StepObserver& observer)
{
    if (steps < 1) throw ContractError("euler sampling needs at least one step");
    if (video_anchor) require_same_shape(x0.video, *video_anchor, "v2a_inversion_sample");
    const auto start_v = x0.video.to_f64_vector();
    const auto start_a = x0.audio.to_f64_vector();
    std::vector<double> acc_v(start_v.size(), 0.0), acc_a(start_a.size(), 0.0);
    LatentPair state{x0.video.clone(), x0.audio.clone()};
    const double n = static_cast<double>(steps);

    auto accumulate = [&](const Tensor& v, std::vector<double>& acc, int k, const char* what) {
        const auto vals = v.to_f64_vector();
        if (vals.size() != acc.size()) throw ShapeError(std::string("velocity for ") + what + " has the wrong size");
        for (std::size_t i = 0; i < vals.size(); ++i) {
            if (!std::isfinite(vals[i]))
                throw NumericalError(std::string("non-finite ") + what + " velocity at sampling step " + std::to_string(k));
            acc[i] += vals[i];
        }
    };
    auto place = [&](Tensor& dst, const std::vector<double>& start, const std::vector<double>& acc) {
        for (std::size_t i = 0; i < acc.size(); ++i) dst.set(static_cast<std::int64_t>(i), start[i] + acc[i] / n);
    };

    for (int k = 0; k < steps; ++k) {
        const double t = static_cast<double>(k) / n;
        if (video_anchor) state.video = interpolate(x0.video, *video_anchor, t);
        if (observer) observer(k, t, state);
        const DualVelocity v = field(state, t);
        accumulate(v.audio, acc_a, k, "audio");
        place(state.audio, start_a, acc_a);
        if (!video_anchor) {
            accumulate(v.video, acc_v, k, "video");
            place(state.video, start_v, acc_v);
        }
    }
    if (video_anchor) state.video = video_anchor->clone();
    return state;
}

LatentPair prior_sample(std::uint64_t seed, const Shape& video_item, const Shape& audio_item, DType dtype)
{
    Rng rng(seed);
    LatentPair x{Tensor(video_item, dtype), Tensor(audio_item, dtype)};
    for (std::int64_t i = 0; i < x.video.numel(); ++i) x.video.set(i, rng.normal());
    for (std::int64_t i = 0; i < x.audio.numel(); ++i) x.audio.set(i, rng.normal());
    return x;
}

LatentPair sample(const SyncFlowModel& model, const std::vector<SampleRequest>& requests, const StepObserver& observer)
{
    if (requests.empty()) throw ContractError("sample: no requests");
    const SampleRequest& first = requests.front();
    for (const auto& r : requests) {
        if (r.guidance != first.guidance || r.steps != first.steps || r.mode != first.mode ||
            r.latent_height != first.latent_height || r.latent_width != first.latent_width)
            throw ContractError("sample: batched requests must share guidance, steps, mode and resolution");
        if (r.guidance < 0) throw ContractError("guidance weight must be >= 0");
        if (r.steps < 1) throw ContractError("steps must be >= 1");
        if (r.mode == SampleMode::kV2AInversion && !r.video_latent.defined())
            throw ContractError("v2a inversion needs the ground-truth video latent");
    }
    const auto& cfg = model.config();
    if (first.mode == SampleMode::kAudioOnly && !cfg.audio_only)
        throw ContractError("audio-only sampling needs a model built in audio-only mode");
    if (first.mode != SampleMode::kAudioOnly && cfg.audio_only)
        throw ContractError("an audio-only model can only sample in audio-only mode");

    const std::int64_t h = first.latent_height ? first.latent_height : cfg.latent_height;
    const std::int64_t w = first.latent_width ? first.latent_width : cfg.latent_width;
    const Shape video_item{cfg.latent_frames, cfg.video_channels, h, w};
    const Shape audio_item{cfg.audio_frames, cfg.audio_channels};
    const auto B = static_cast<std::int64_t>(requests.size());

    std::vector<Tensor> v0, a0, anchors;
    std::vector<TextCondition> conds;
    for (const auto& r : requests) {
        auto x = prior_sample(r.seed, video_item, audio_item, model.dtype());
        v0.push_back(x.video);
        a0.push_back(x.audio);
        conds.push_back(model.text_encoder().encode(r.caption));
        if (r.mode == SampleMode::kV2AInversion) {
            if (r.video_latent.shape() != video_item)
                throw ShapeError("v2a video latent " + shape_str(r.video_latent.shape()) + " does not match " +
                                 shape_str(video_item));
            anchors.push_back(r.video_latent.to(model.dtype()));
        }
    }
    for (std::int64_t b = 0; b < B; ++b) conds.push_back(model.text_encoder().null_condition());
    const TextBatch text = batch_conditions(conds);
    const LatentPair x0{stack_items(v0), stack_items(a0)};
    const Tensor anchor = anchors.empty() ? Tensor() : stack_items(anchors);
    const double guidance = first.guidance;

    NoTapeScope no_grad;
    VelocityField field = [&](const LatentPair& s, double t) {
        const Tensor zv = concat({s.video, s.video}, 0);
        const Tensor za = concat({s.audio, s.audio}, 0);
        const DualVelocity both = model.forward(zv, za, std::vector<double>(static_cast<std::size_t>(2 * B), t), text);
        const DualVelocity cond{slice(both.video, 0, 0, B), slice(both.audio, 0, 0, B)};
        const DualVelocity uncond{slice(both.video, 0, B, B), slice(both.audio, 0, B, B)};
        return cfg_velocity(cond, uncond, guidance);
    };
    return euler_integrate(field, x0, first.steps, anchor.defined() ? &anchor : nullptr, observer);
}

LatentPair euler_sample(const SyncFlowModel& model, const SampleRequest& request)
{
    return sample(model, {request});
}

LatentPair v2a_inversion_sample(const SyncFlowModel& model, const SampleRequest& request)
{
    if (!request.video_latent.defined()) throw ContractError("v2a inversion needs the ground-truth video latent");
    SampleRequest r = request;
    r.mode = SampleMode::kV2AInversion;
    return sample(model, {r});
}

} // namespace syncflow::rfm
