// Acceptance suite: one PASS/FAIL line per criterion. Criteria 9-13 share one
// desk training run whose checkpoints and curves land in the work directory.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "cli.hpp"
#include "syncflow/config.hpp"
#include "syncflow/errors.hpp"
#include "syncflow/eval.hpp"
#include "syncflow/gradcheck.hpp"
#include "syncflow/io.hpp"
#include "syncflow/rfm.hpp"
#include "syncflow/synthdata.hpp"
#include "syncflow/training.hpp"

using namespace syncflow;
namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0)
{
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v, int prec = 4)
{
    std::ostringstream s;
    s << std::setprecision(prec) << v;
    return s.str();
}

Tensor noise(Shape shape, Rng& rng, DType dtype = DType::kF32)
{
    Tensor t(std::move(shape), dtype);
    for (std::int64_t i = 0; i < t.numel(); ++i) t.set(i, rng.normal());
    return t;
}

void randomize(SyncFlowModel& m, std::uint64_t seed, double stddev)
{
    Rng rng(seed);
    m.visit([&](const std::string&, Tensor& t) {
        for (std::int64_t i = 0; i < t.numel(); ++i) t.set(i, rng.normal() * stddev);
    });
}

bool same_bits(const Tensor& a, const Tensor& b)
{
    return a.shape() == b.shape() && a.to_f32_vector() == b.to_f32_vector();
}

TowerConfig one_layer_tower()
{
    TowerConfig c;
    c.layers = 1;
    c.video_dim = 16;
    c.audio_dim = 16;
    c.heads = 2;
    c.latent_frames = 2;
    c.latent_height = 4;
    c.latent_width = 4;
    c.video_channels = 12;
    c.audio_frames = 8;
    c.audio_channels = 6;
    return c;
}

// ---- 1-8, 14: algebra and oracles ---------------------------------------

Outcome gradient_correctness()
{
    const auto t0 = std::chrono::steady_clock::now();
    SyncFlowModel m(one_layer_tower(), Vocabulary::synthetic(), 7);
    randomize(m, 8, 0.2);
    SyncFlowModel ref = m.converted(DType::kF64);
    Rng rng(9);
    const auto& c = m.config();
    const rfm::LatentPair x0{noise({2, c.latent_frames, c.video_channels, c.latent_height, c.latent_width}, rng),
                             noise({2, c.audio_frames, c.audio_channels}, rng)};
    const rfm::LatentPair x1{noise(x0.video.shape(), rng), noise(x0.audio.shape(), rng)};
    const rfm::LatentPair x0d{x0.video.to(DType::kF64), x0.audio.to(DType::kF64)};
    const rfm::LatentPair x1d{x1.video.to(DType::kF64), x1.audio.to(DType::kF64)};
    const std::vector<double> t{0.3, 0.8};
    const std::vector<std::string> caps{"a red ball bouncing fast", "a blue ball"};
    const auto r = grad_check_params(
        [&] { return rfm::fm_loss(m, x0, x1, t, m.encode_text(caps, {false, true})).total; }, m.parameters(),
        [&] { return rfm::fm_loss(ref, x0d, x1d, t, ref.encode_text(caps, {false, true})).total.item(); },
        ref.parameters(), 1e-3, 6, 10);
    const double secs = seconds_since(t0);
    return {r.max_rel_error < 1e-3 && secs < 60.0,
            "max rel error " + fmt(r.max_rel_error) + " over " + std::to_string(r.coordinates) + " coordinates (worst " +
                r.worst_param + "), " + fmt(secs, 3) + " s"};
}

Outcome rfm_algebra()
{
    Rng rng(21);
    double worst = 0;
    bool endpoints = true;
    for (int trial = 0; trial < 100; ++trial) {
        const auto x0 = noise({7}, rng), x1 = noise({7}, rng);
        const double t = rng.uniform();
        const auto xt = rfm::interpolate(x0, x1, t);
        const auto v = rfm::velocity_target(x0, x1);
        for (std::int64_t i = 0; i < 7; ++i) worst = std::max(worst, std::abs(xt.at(i) + (1 - t) * v.at(i) - x1.at(i)));
        endpoints = endpoints && same_bits(rfm::interpolate(x0, x1, 0.0), x0) && same_bits(rfm::interpolate(x0, x1, 1.0), x1);
    }
    return {endpoints && worst < 1e-6, "endpoints exact: " + std::string(endpoints ? "yes" : "no") + ", max residual " + fmt(worst)};
}

Outcome sampler_exactness()
{
    Rng rng(31);
    const rfm::LatentPair x0{noise({2, 3, 4}, rng), noise({5, 2}, rng)};
    const DualVelocity c{noise({2, 3, 4}, rng), noise({5, 2}, rng)};
    const rfm::VelocityField field = [&](const rfm::LatentPair&, double) { return c; };
    bool ok = true;
    for (int n : {1, 7, 50}) {
        const auto out = rfm::euler_integrate(field, x0, n);
        const auto v = out.video.to_f32_vector(), a = out.audio.to_f32_vector();
        const auto xv = x0.video.to_f32_vector(), xa = x0.audio.to_f32_vector();
        const auto cv = c.video.to_f32_vector(), ca = c.audio.to_f32_vector();
        for (std::size_t i = 0; i < v.size(); ++i) ok = ok && v[i] == xv[i] + cv[i];
        for (std::size_t i = 0; i < a.size(); ++i) ok = ok && a[i] == xa[i] + ca[i];
    }
    return {ok, ok ? "x0 + c bitwise for N = 1, 7, 50" : "bitwise mismatch"};
}

Outcome cfg_identities()
{
    Rng rng(41);
    bool exact = true;
    double worst = 0;
    for (int trial = 0; trial < 50; ++trial) {
        const DualVelocity cond{noise({3, 4}, rng), noise({6}, rng)};
        const DualVelocity unc{noise({3, 4}, rng), noise({6}, rng)};
        exact = exact && same_bits(rfm::cfg_velocity(cond, unc, 0.0).video, unc.video) &&
                same_bits(rfm::cfg_velocity(cond, unc, 0.0).audio, unc.audio) &&
                same_bits(rfm::cfg_velocity(cond, unc, 1.0).video, cond.video) &&
                same_bits(rfm::cfg_velocity(cond, unc, 1.0).audio, cond.audio);
        // u(a w1 + b w2) = a u(w1) + b u(w2) for a + b = 1
        const double w1 = rng.uniform(0, 8), w2 = rng.uniform(0, 8), a = rng.uniform();
        const auto lhs = rfm::cfg_velocity(cond, unc, a * w1 + (1 - a) * w2).audio;
        const auto u1 = rfm::cfg_velocity(cond, unc, w1).audio, u2 = rfm::cfg_velocity(cond, unc, w2).audio;
        for (std::int64_t i = 0; i < 6; ++i)
            worst = std::max(worst, std::abs(lhs.at(i) - (a * u1.at(i) + (1 - a) * u2.at(i))) /
                                        std::max(1.0, std::abs(lhs.at(i))));
    }
    return {exact && worst < 1e-6, std::string("endpoints ") + (exact ? "exact" : "inexact") + ", linearity error " + fmt(worst)};
}

double min_cost_exhaustive(const std::vector<double>& cost, int n)
{
    std::vector<int> p(static_cast<std::size_t>(n));
    std::iota(p.begin(), p.end(), 0);
    double best = 1e300;
    do {
        double s = 0;
        for (int i = 0; i < n; ++i) s += cost[static_cast<std::size_t>(i * n + p[static_cast<std::size_t>(i)])];
        best = std::min(best, s);
    } while (std::next_permutation(p.begin(), p.end()));
    return best;
}

Outcome ot_oracle()
{
    Rng rng(51);
    int agree = 0;
    for (int trial = 0; trial < 100; ++trial) {
        const int n = 1 + trial % 6;
        const auto nv = noise({n, 5}, rng), na = noise({n, 3}, rng);
        const auto dv = noise({n, 5}, rng), da = noise({n, 3}, rng);
        const auto perm = rfm::ot_pair({nv, na}, {dv, da});
        std::vector<double> cost(static_cast<std::size_t>(n * n));
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) {
                double s = 0;
                for (int k = 0; k < 5; ++k) s += std::pow(nv.at(i * 5 + k) - dv.at(j * 5 + k), 2);
                for (int k = 0; k < 3; ++k) s += std::pow(na.at(i * 3 + k) - da.at(j * 3 + k), 2);
                cost[static_cast<std::size_t>(i * n + j)] = s;
            }
        double got = 0;
        std::set<std::int64_t> used(perm.begin(), perm.end());
        for (int i = 0; i < n; ++i) got += cost[static_cast<std::size_t>(i * n + perm[static_cast<std::size_t>(i)])];
        const double best = min_cost_exhaustive(cost, n);
        if (static_cast<int>(used.size()) == n && std::abs(got - best) <= 1e-9 * std::max(1.0, best)) ++agree;
    }
    return {agree == 100, std::to_string(agree) + "/100 trials match the exhaustive minimum"};
}

Outcome freeze_discipline()
{
    Rng rng(61);
    train::LatentDataset data, val;
    for (int i = 0; i < 16; ++i) {
        data.video.push_back(noise({2, 12, 4, 4}, rng));
        data.audio.push_back(noise({8, 6}, rng));
        data.captions.push_back(make_caption(static_cast<BallColor>(i % 3), static_cast<Speed>((i / 3) % 2)));
    }
    for (int i = 0; i < 2; ++i) {
        val.video.push_back(data.video[static_cast<std::size_t>(i)]);
        val.audio.push_back(data.audio[static_cast<std::size_t>(i)]);
        val.captions.push_back(data.captions[static_cast<std::size_t>(i)]);
    }
    train::TrainState st(one_layer_tower(), LatentCodec(), 62);
    const auto before = st.model.group_hash(ParamGroup::kVideoTower);
    train::StageSpec spec;
    spec.stage = train::Stage::kAudioAdapt;
    spec.steps = 100;
    spec.batch = 4;
    spec.warmup_steps = 10;
    spec.eval_interval = 0;
    train::train_stage(st, spec, data, val);
    const auto after_adapt = st.model.group_hash(ParamGroup::kVideoTower);
    spec.stage = train::Stage::kJointFinetune;
    spec.steps = 10;
    train::train_stage(st, spec, data, val);
    const auto after_joint = st.model.group_hash(ParamGroup::kVideoTower);
    return {before == after_adapt && after_joint != after_adapt,
            std::string("video hash ") + (before == after_adapt ? "unchanged" : "CHANGED") + " after 100 audio steps, " +
                (after_joint != after_adapt ? "changed" : "UNCHANGED") + " after 10 joint steps"};
}

Outcome no_back_channel()
{
    const TowerConfig desk{};
    SyncFlowModel m(desk, Vocabulary::synthetic(), 71);
    randomize(m, 72, 0.2);
    Rng rng(73);
    const auto zv = noise({1, desk.latent_frames, desk.video_channels, desk.latent_height, desk.latent_width}, rng);
    const auto za = noise({1, desk.audio_frames, desk.audio_channels}, rng);
    const std::vector<double> t{0.4};
    const auto text = m.encode_text({"a green ball bouncing fast"});
    NoTapeScope no_grad;
    const auto base = m.forward(zv, za, t, text);
    const double eps = 1e-2;
    double worst = 0, audio_response = 0;
    auto probe = [&](const Tensor& za2) {
        const auto out = m.forward(zv, za2, t, text);
        for (std::int64_t i = 0; i < base.video.numel(); ++i)
            worst = std::max(worst, std::abs(out.video.at(i) - base.video.at(i)) / eps);
        for (std::int64_t i = 0; i < base.audio.numel(); ++i)
            audio_response = std::max(audio_response, std::abs(out.audio.at(i) - base.audio.at(i)) / eps);
    };
    for (int k = 0; k < 24; ++k) {
        Tensor za2 = za.clone();
        const auto idx = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(za.numel())));
        za2.set(idx, za2.at(idx) + eps);
        probe(za2);
    }
    Tensor za2 = za.clone();
    for (std::int64_t i = 0; i < za.numel(); ++i) za2.set(i, za2.at(i) + eps * rng.normal());
    probe(za2);
    // the probe is live only if the audio side does respond
    return {worst < 1e-6 && audio_response > 1e-6,
            "max |dv_video/dz_audio| " + fmt(worst) + " (audio self-response " + fmt(audio_response) + ")"};
}

Outcome codec_identity()
{
    LatentCodec codec;
    const auto splits = synth::make_splits(8, 1, 1, 81);
    codec.fit_scales(synth::render_all(splits.train));
    Rng rng(82);
    int exact = 0;
    for (int trial = 0; trial < 50; ++trial) {
        VideoTensor v(16, 32, 32);
        for (float& x : v.data) x = static_cast<float>(rng.uniform());
        AudioWave a;
        a.samples.resize(16000);
        for (float& x : a.samples) x = static_cast<float>(rng.uniform(-1.0, 1.0));
        const bool ok = codec.decode_video(codec.encode_video(v)).data == v.data &&
                        codec.decode_audio(codec.encode_audio(a), a.sample_rate).samples == a.samples;
        exact += ok;
    }
    return {exact == 50, std::to_string(exact) + "/50 video+audio samples bit-exact"};
}

std::vector<std::vector<double>> gaussian_column(int n, double mu, double sigma, std::uint64_t seed)
{
    Rng rng(seed);
    std::vector<std::vector<double>> out(static_cast<std::size_t>(n));
    for (auto& row : out) row = {mu + sigma * rng.normal()};
    return out;
}

Outcome frechet_sanity()
{
    const int n = 10000;
    double worst = 0;
    const std::vector<std::array<double, 4>> cases{{0, 1, 1, 1}, {0, 1, 0, 2}, {0.5, 0.5, -1, 1.5}};
    std::uint64_t seed = 91;
    for (const auto& c : cases) {
        const auto a = gaussian_column(n, c[0], c[1], seed++);
        const auto b = gaussian_column(n, c[2], c[3], seed++);
        // closed form on the sample moments, which is what the estimator sees
        auto moments = [](const std::vector<std::vector<double>>& x) {
            double m = 0, s = 0;
            for (const auto& r : x) m += r[0];
            m /= static_cast<double>(x.size());
            for (const auto& r : x) s += (r[0] - m) * (r[0] - m);
            return std::pair{m, std::sqrt(s / static_cast<double>(x.size() - 1))};
        };
        const auto [ma, sa] = moments(a);
        const auto [mb, sb] = moments(b);
        const double closed = (ma - mb) * (ma - mb) + (sa - sb) * (sa - sb);
        worst = std::max(worst, std::abs(eval::frechet_distance(a, b).distance - closed));
    }
    const auto x = gaussian_column(n, 0.3, 1.2, 99);
    const double self = eval::frechet_distance(x, x).distance;
    return {worst < 0.05 && std::abs(self) < 1e-8, "max |FD - closed form| " + fmt(worst) + ", self distance " + fmt(self)};
}

// ---- 9-13: desk run --------------------------------------------------------

struct Desk {
    RunConfig cfg;
    synth::Splits splits;
    std::vector<MediaPair> test_clips;
    train::TrainState joint;       // after all three stages
    train::TrainState with_adapt;  // after stage 2
    Json summary;
};

std::vector<train::CurveRow> run_logged(train::TrainState& st, const train::StageSpec& spec,
                                        const train::LatentDataset& tr, const train::LatentDataset& val,
                                        const std::string& label, bool& ok)
{
    const auto t0 = std::chrono::steady_clock::now();
    train::StageOptions opts;
    opts.on_row = [&](const train::CurveRow& r) {
        std::cerr << "  [" << label << "] step " << r.step << " loss_v " << fmt(r.loss_video) << " loss_a "
                  << fmt(r.loss_audio) << " val_v " << fmt(r.val_loss_video) << " val_a " << fmt(r.val_loss_audio)
                  << " (" << fmt(seconds_since(t0), 5) << " s)\n";
    };
    const auto res = train::train_stage(st, spec, tr, val, opts);
    ok = ok && res.status == train::StageStatus::kCompleted;
    return res.curve;
}

Json curve_json(const std::vector<train::CurveRow>& rows)
{
    return {{"first_val_audio", rows.front().val_loss_audio},
            {"final_val_audio", rows.back().val_loss_audio},
            {"first_val_video", rows.front().val_loss_video},
            {"final_val_video", rows.back().val_loss_video}};
}

Desk desk_run(const fs::path& dir, bool reuse)
{
    Desk d;
    d.splits = synth::make_splits(d.cfg.data.n_train, d.cfg.data.n_val, d.cfg.data.n_test, d.cfg.data.seed);
    d.test_clips = synth::render_all(d.splits.test);
    const fs::path summary_path = dir / "desk_summary.json";
    if (reuse && fs::exists(summary_path) && fs::exists(dir / "stage3_joint.syck") && fs::exists(dir / "stage2_audio.syck")) {
        std::cerr << "reusing desk run in " << dir << "\n";
        d.summary = Json::parse(io::read_file(summary_path));
        d.joint = train::load_checkpoint(dir / "stage3_joint.syck");
        d.with_adapt = train::load_checkpoint(dir / "stage2_audio.syck");
        return d;
    }
    fs::create_directories(dir);
    const auto t_all = std::chrono::steady_clock::now();
    const std::uint64_t seed = d.cfg.data.seed;
    const auto train_clips = synth::render_all(d.splits.train);
    const auto val_clips = synth::render_all(d.splits.val);
    LatentCodec codec(d.cfg.codec, seed);
    codec.fit_scales(train_clips);
    const auto lat_train = train::encode_dataset(codec, train_clips);
    const auto lat_val = train::encode_dataset(codec, val_clips);

    bool ok = true;
    train::TrainState st(d.cfg.tower, codec, seed);
    train::StageSpec s1 = d.cfg.stage;
    s1.stage = train::Stage::kVideoPretrain;
    s1.steps = 3000;
    const auto c1 = run_logged(st, s1, lat_train, lat_val, "stage1 video", ok);
    io::atomic_write(dir / "stage1_video.csv", train::curve_csv(c1));
    const std::string stage1_bytes = train::checkpoint_bytes(st);
    io::atomic_write(dir / "stage1_video.syck", stage1_bytes);

    // ablation twin: same weights, same RNG state, same schedule, no adaptors
    train::TrainState ablate = train::parse_checkpoint(stage1_bytes);
    TowerConfig no_adaptor = d.cfg.tower;
    no_adaptor.use_adaptor = false;
    ablate.model = SyncFlowModel(no_adaptor, Vocabulary::synthetic(), seed);
    train::copy_parameters(st.model, ablate.model, {ParamGroup::kVideoTower, ParamGroup::kAudioTower, ParamGroup::kTextEncoder});

    train::StageSpec s2 = d.cfg.stage;
    s2.stage = train::Stage::kAudioAdapt;
    s2.steps = 2000;
    const auto c2 = run_logged(st, s2, lat_train, lat_val, "stage2 audio", ok);
    io::atomic_write(dir / "stage2_audio.csv", train::curve_csv(c2));
    train::save_checkpoint(st, dir / "stage2_audio.syck");
    const std::string stage2_bytes = train::checkpoint_bytes(st);

    const auto c2n = run_logged(ablate, s2, lat_train, lat_val, "stage2 audio, no adaptor", ok);
    io::atomic_write(dir / "stage2_audio_no_adaptor.csv", train::curve_csv(c2n));
    train::save_checkpoint(ablate, dir / "stage2_audio_no_adaptor.syck");

    train::StageSpec s3 = d.cfg.stage;
    s3.stage = train::Stage::kJointFinetune;
    s3.steps = 500;
    const auto c3 = run_logged(st, s3, lat_train, lat_val, "stage3 joint", ok);
    io::atomic_write(dir / "stage3_joint.csv", train::curve_csv(c3));
    train::save_checkpoint(st, dir / "stage3_joint.syck");

    d.summary = Json{{"completed", ok},
                     {"runtime_seconds", seconds_since(t_all)},
                     {"steps", {s1.steps, s2.steps, s3.steps}},
                     {"stage1", curve_json(c1)},
                     {"stage2", curve_json(c2)},
                     {"stage2_no_adaptor", curve_json(c2n)},
                     {"stage3", curve_json(c3)}};
    io::atomic_write(summary_path, d.summary.dump(2) + "\n");
    d.joint = std::move(st);
    d.with_adapt = train::parse_checkpoint(stage2_bytes);
    return d;
}

Outcome desk_training(const Desk& d)
{
    const auto& s = d.summary;
    const double zero = s["stage2"]["first_val_audio"], last = s["stage2"]["final_val_audio"];
    const double drop = 1.0 - last / zero;
    const double hours = s["runtime_seconds"].get<double>() / 3600.0;
    const bool steps = s["steps"][0] >= 3000 && s["steps"][1] >= 2000 && s["steps"][2] >= 500;
    return {s["completed"].get<bool>() && steps && drop >= 0.30 && hours <= 4.0,
            "stage-2 val audio " + fmt(zero) + " -> " + fmt(last) + " (drop " + fmt(100 * drop, 3) + "%), runtime " +
                fmt(hours, 3) + " h"};
}

Outcome adaptor_ablation(const Desk& d)
{
    const double with = d.summary["stage2"]["final_val_audio"];
    const double without = d.summary["stage2_no_adaptor"]["final_val_audio"];
    return {with <= without, "final stage-2 val audio with adaptor " + fmt(with, 5) + ", without " + fmt(without, 5)};
}

Outcome zero_shot_v2a(const Desk& d)
{
    const int n = 50;
    const int chunk = 10;
    const auto& model = d.joint.model;
    const auto& codec = d.joint.codec;
    double t2av = 0, v2a = 0, hit_t2av = 0, hit_v2a = 0;
    for (int start = 0; start < n; start += chunk) {
        std::vector<rfm::SampleRequest> gen, inv;
        for (int i = start; i < start + chunk; ++i) {
            const auto& clip = d.test_clips[static_cast<std::size_t>(i)];
            rfm::SampleRequest r;
            r.caption = clip.caption;
            r.seed = 5000 + static_cast<std::uint64_t>(i);
            gen.push_back(r);
            r.mode = rfm::SampleMode::kV2AInversion;
            r.video_latent = codec.encode_video(clip.video);
            inv.push_back(r);
        }
        const auto a = rfm::sample(model, gen);
        const auto b = rfm::sample(model, inv);
        for (int k = 0; k < chunk; ++k) {
            const auto ca = eval::decode_item(codec, a, k, gen[static_cast<std::size_t>(k)].caption);
            const auto cb = eval::decode_item(codec, b, k, inv[static_cast<std::size_t>(k)].caption);
            const auto sa = eval::onset_sync_error(ca.video, ca.audio, d.cfg.eval);
            const auto sb = eval::onset_sync_error(cb.video, cb.audio, d.cfg.eval);
            t2av += sa.mean_error;
            v2a += sb.mean_error;
            hit_t2av += sa.hit_rate;
            hit_v2a += sb.hit_rate;
        }
        std::cerr << "  v2a probe " << start + chunk << "/" << n << "\n";
    }
    t2av /= n;
    v2a /= n;
    return {v2a <= t2av, "mean onset sync error v2a " + fmt(v2a) + " s (hit " + fmt(hit_v2a / n, 3) + "), t2av " +
                             fmt(t2av) + " s (hit " + fmt(hit_t2av / n, 3) + ") over " + std::to_string(n) + " captions"};
}

Outcome zero_shot_resolution(const Desk& d)
{
    const auto& model = d.joint.model;
    const auto& codec = d.joint.codec;
    const int rs = codec.config().spatial_factor;
    std::string detail;
    bool ok = true;
    for (std::int64_t px : {16, 64}) {
        rfm::SampleRequest r;
        r.caption = "a blue ball bouncing slow";
        r.seed = 12;
        r.latent_height = px / rs;
        r.latent_width = px / rs;
        try {
            const auto out = rfm::sample(model, {r});
            const auto clip = eval::decode_item(codec, out, 0, r.caption);
            bool finite = true;
            for (std::int64_t i = 0; i < out.video.numel(); ++i) finite = finite && std::isfinite(out.video.at(i));
            for (std::int64_t i = 0; i < out.audio.numel(); ++i) finite = finite && std::isfinite(out.audio.at(i));
            for (float v : clip.video.data) finite = finite && std::isfinite(v);
            const bool shape = clip.video.height == px && clip.video.width == px && clip.video.frames == 16 &&
                               clip.audio.samples.size() == 16000;
            ok = ok && finite && shape;
            detail += (detail.empty() ? "" : ", ") + std::to_string(px) + "x" + std::to_string(px) + " -> " +
                      std::to_string(clip.video.frames) + "x" + std::to_string(clip.video.height) + "x" +
                      std::to_string(clip.video.width) + (finite ? " finite" : " NON-FINITE");
        } catch (const std::exception& e) {
            ok = false;
            detail += (detail.empty() ? "" : ", ") + std::to_string(px) + ": " + e.what();
        }
    }
    return {ok, detail};
}

Outcome cfg_sweep(const Desk& d, const fs::path& dir)
{
    const fs::path ref = dir / "test_clips";
    for (std::size_t i = 0; i < d.test_clips.size(); ++i) {
        std::ostringstream name;
        name << std::setw(4) << std::setfill('0') << i;
        io::write_clip(d.test_clips[i], ref / name.str(), io::impact_sidecar(d.test_clips[i]));
    }
    const std::string ckpt = (dir / "stage3_joint.syck").string();
    const std::string report = (dir / "cfg_sweep.json").string();
    const std::vector<std::string> args{"syncflow", "eval", "--ref", ref.string(), "--out", report,
                                        "--ckpt", ckpt, "--guidance-sweep"};
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
    if (code != 0) return {false, "eval --guidance-sweep exited " + std::to_string(code) + ": " + err.str()};
    std::cerr << out.str();
    const auto j = Json::parse(io::read_file(report));
    std::set<double> seen;
    double diff6 = 0;
    for (const auto& row : j["sweep"]) {
        seen.insert(row["guidance"].get<double>());
        if (row["guidance"].get<double>() == 6.0) diff6 = row["latent_diff_vs_w0"];
    }
    const bool all = seen == std::set<double>{1, 2, 4, 6, 8};
    return {all && diff6 > 0, std::string("table rows for w in {1,2,4,6,8}: ") + (all ? "yes" : "no") +
                                  ", mean |z(w=6) - z(w=0)| = " + fmt(diff6)};
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"SyncFlow acceptance criteria"};
    std::string workdir = "acceptance";
    bool reuse = false;
    std::vector<int> only;
    app.add_option("--workdir", workdir, "Where the desk run writes checkpoints and curves");
    app.add_flag("--reuse", reuse, "Reuse a finished desk run from the work directory");
    app.add_option("--only", only, "Run only these criteria")->delimiter(',');
    CLI11_PARSE(app, argc, argv);

    auto wanted = [&](int k) { return only.empty() || std::find(only.begin(), only.end(), k) != only.end(); };
    int failures = 0;
    auto report = [&](int k, const char* name, const std::function<Outcome()>& fn) {
        if (!wanted(k)) return;
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = fn();
        } catch (const std::exception& e) {
            o = {false, std::string("threw: ") + e.what()};
        }
        failures += !o.pass;
        std::cout << (o.pass ? "PASS" : "FAIL") << "  " << std::setw(2) << k << "  " << name << ": " << o.detail << " ["
                  << fmt(seconds_since(t0), 3) << " s]" << std::endl;
    };

    report(1, "gradient correctness", gradient_correctness);
    report(2, "rfm algebra", rfm_algebra);
    report(3, "sampler exactness", sampler_exactness);
    report(4, "cfg identities", cfg_identities);
    report(5, "ot oracle", ot_oracle);
    report(6, "freeze discipline", freeze_discipline);
    report(7, "no back-channel", no_back_channel);
    report(8, "codec identity", codec_identity);

    if (wanted(9) || wanted(10) || wanted(11) || wanted(12) || wanted(13)) {
        std::optional<Desk> desk;
        std::string error;
        try {
            desk = desk_run(workdir, reuse);
        } catch (const std::exception& e) {
            error = std::string("desk run threw: ") + e.what();
        }
        auto with_desk = [&](const std::function<Outcome(const Desk&)>& fn) {
            return [&, fn] { return desk ? fn(*desk) : Outcome{false, error}; };
        };
        report(9, "desk training run", with_desk(desk_training));
        report(10, "adaptor ablation", with_desk(adaptor_ablation));
        report(11, "zero-shot v2a", with_desk(zero_shot_v2a));
        report(12, "zero-shot resolution", with_desk(zero_shot_resolution));
        report(13, "cfg sweep harness", with_desk([&](const Desk& d) { return cfg_sweep(d, workdir); }));
    }
    report(14, "frechet sanity", frechet_sanity);

    std::cout << (failures ? std::to_string(failures) + " criteria failed" : std::string("all criteria passed")) << std::endl;
    return failures ? 1 : 0;
}
