#include <doctest.h>

#include <cmath>

#include "syncflow/errors.hpp"
#include "syncflow/synthdata.hpp"
#include "syncflow/training.hpp"
#include "test_util.hpp"

using namespace syncflow;
using namespace syncflow::train;

namespace {

TowerConfig small_tower()
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

LatentDataset random_dataset(int n, std::uint64_t seed)
{
    Rng rng(seed);
    LatentDataset d;
    for (int i = 0; i < n; ++i) {
        d.video.push_back(testing::random_tensor({2, 12, 4, 4}, rng, 0.5));
        d.audio.push_back(testing::random_tensor({8, 6}, rng, 0.5));
        d.captions.push_back(make_caption(static_cast<BallColor>(i % 3), static_cast<Speed>((i / 3) % 2)));
    }
    return d;
}

StageSpec quick(Stage s, std::int64_t steps)
{
    StageSpec spec;
    spec.stage = s;
    spec.steps = steps;
    spec.batch = 4;
    spec.warmup_steps = 2;
    spec.eval_interval = 0;
    return spec;
}

TrainState fresh(std::uint64_t seed = 11, TowerConfig tower = small_tower())
{
    return TrainState(tower, LatentCodec(), seed);
}

} // namespace

TEST_CASE("training: stage groups partition the model and guard the video tower")
{
    for (auto s : {Stage::kVideoPretrain, Stage::kAudioAdapt, Stage::kJointFinetune}) {
        StageSpec spec;
        spec.stage = s;
        CHECK_NOTHROW(spec.validate());
        auto tr = spec.trainable_groups();
        auto fr = spec.frozen_groups();
        CHECK(tr.size() + fr.size() == 4);
        for (auto g : fr) CHECK(std::find(tr.begin(), tr.end(), g) == tr.end());
    }
    StageSpec audio;
    audio.stage = Stage::kAudioAdapt;
    const auto fr = audio.frozen_groups();
    CHECK(std::find(fr.begin(), fr.end(), ParamGroup::kVideoTower) != fr.end());
    audio.trainable = std::vector<ParamGroup>{ParamGroup::kVideoTower, ParamGroup::kAudioTower};
    CHECK_THROWS_AS(audio.validate(), ConfigError);
    StageSpec empty;
    empty.trainable = std::vector<ParamGroup>{};
    CHECK_THROWS_AS(empty.validate(), ConfigError);
    StageSpec bad;
    bad.text_dropout = 1.5;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    CHECK(parse_stage("joint") == Stage::kJointFinetune);
    CHECK_THROWS_AS(parse_stage("music"), ConfigError);
}

TEST_CASE("training: audio adaptation leaves the video tower byte-identical")
{
    const auto data = random_dataset(12, 1);
    const auto val = random_dataset(2, 2);
    TrainState st = fresh();
    const auto video0 = st.model.group_hash(ParamGroup::kVideoTower);
    const auto text0 = st.model.group_hash(ParamGroup::kTextEncoder);
    const auto audio0 = st.model.group_hash(ParamGroup::kAudioTower);
    const auto adapt0 = st.model.group_hash(ParamGroup::kAdaptors);
    const auto r = train_stage(st, quick(Stage::kAudioAdapt, 100), data, val);
    CHECK(r.status == StageStatus::kCompleted);
    CHECK(st.model.group_hash(ParamGroup::kVideoTower) == video0);
    CHECK(st.model.group_hash(ParamGroup::kTextEncoder) == text0);
    CHECK(st.model.group_hash(ParamGroup::kAudioTower) != audio0);
    CHECK(st.model.group_hash(ParamGroup::kAdaptors) != adapt0);

    train_stage(st, quick(Stage::kJointFinetune, 10), data, val);
    CHECK(st.model.group_hash(ParamGroup::kVideoTower) != video0);
    REQUIRE(st.history.size() == 2);
    CHECK(st.history[0].completed);
    CHECK(st.history[1].steps_done == 10);
}

TEST_CASE("training: video pretraining never touches the audio side")
{
    const auto data = random_dataset(8, 3);
    TrainState st = fresh();
    const auto audio0 = st.model.group_hash(ParamGroup::kAudioTower);
    const auto adapt0 = st.model.group_hash(ParamGroup::kAdaptors);
    const auto video0 = st.model.group_hash(ParamGroup::kVideoTower);
    const auto r = train_stage(st, quick(Stage::kVideoPretrain, 5), data, random_dataset(2, 4));
    CHECK(st.model.group_hash(ParamGroup::kAudioTower) == audio0);
    CHECK(st.model.group_hash(ParamGroup::kAdaptors) == adapt0);
    CHECK(st.model.group_hash(ParamGroup::kVideoTower) != video0);
    REQUIRE(r.curve.size() == 2);
    CHECK(std::isnan(r.curve.back().loss_audio));
    CHECK(std::isfinite(r.curve.back().loss_video));
}

TEST_CASE("training: dropout probability is honoured exactly at the extremes")
{
    const auto data = random_dataset(6, 5);
    const LatentDataset none;
    TrainState st = fresh();
    auto spec = quick(Stage::kJointFinetune, 6);
    spec.text_dropout = 0.0;
    CHECK(train_stage(st, spec, data, none).null_conditions_used == 0);
    TrainState st2 = fresh();
    spec.text_dropout = 1.0;
    CHECK(train_stage(st2, spec, data, none).null_conditions_used == 6 * spec.batch);
}

TEST_CASE("training: with full dropout the captions are irrelevant")
{
    const auto data = random_dataset(6, 6);
    auto swapped = data;
    std::reverse(swapped.captions.begin(), swapped.captions.end());
    for (auto& c : swapped.captions) c = "something else entirely";
    auto spec = quick(Stage::kJointFinetune, 4);
    spec.text_dropout = 1.0;
    spec.eval_interval = 1;
    TrainState a = fresh(), b = fresh();
    const auto val = random_dataset(2, 7);
    const auto ra = train_stage(a, spec, data, val);
    const auto rb = train_stage(b, spec, swapped, val);
    REQUIRE(ra.curve.size() == rb.curve.size());
    for (std::size_t i = 1; i < ra.curve.size(); ++i) {
        CHECK(ra.curve[i].loss_video == rb.curve[i].loss_video);
        CHECK(ra.curve[i].loss_audio == rb.curve[i].loss_audio);
    }
    CHECK(checkpoint_bytes(a).size() == checkpoint_bytes(b).size());
    for (auto g : {ParamGroup::kVideoTower, ParamGroup::kAudioTower, ParamGroup::kAdaptors})
        CHECK(a.model.group_hash(g) == b.model.group_hash(g));
}

TEST_CASE("training: one small step on one item lowers that item's loss")
{
    const auto data = random_dataset(1, 8);
    for (auto stage : {Stage::kVideoPretrain, Stage::kAudioAdapt, Stage::kJointFinetune}) {
        TrainState st = fresh(13);
        // move the zero heads off zero so every group sees a gradient
        train_stage(st, quick(Stage::kJointFinetune, 3), data, {});
        auto spec = quick(stage, 1);
        spec.batch = 1;
        spec.lr = 1e-4;
        spec.warmup_steps = 0;
        spec.text_dropout = 0.0;
        Rng probe(st.rng.state());
        const auto b = draw_batch(probe, spec, data, DType::kF32);
        const auto parts = stage == Stage::kVideoPretrain ? rfm::LossParts::kVideoOnly
                           : stage == Stage::kAudioAdapt  ? rfm::LossParts::kAudioOnly
                                                          : rfm::LossParts::kBoth;
        auto loss = [&] {
            NoTapeScope no_tape;
            return rfm::fm_loss(st.model, b.x0, b.x1, b.t, st.model.encode_text(b.captions), parts).total.item();
        };
        const double before = loss();
        train_stage(st, spec, data, {});
        const double after = loss();
        INFO("stage " << stage_name(stage));
        CHECK(after < before);
    }
}

TEST_CASE("training: a non-finite loss halts without consuming the step")
{
    const auto data = random_dataset(4, 9);
    TrainState st = fresh();
    st.model.parameters(ParamGroup::kVideoTower).front().second->set(0, std::nan(""));
    const auto rng_before = st.rng.state();
    const auto audio0 = st.model.group_hash(ParamGroup::kAudioTower);
    const auto r = train_stage(st, quick(Stage::kJointFinetune, 5), data, {});
    CHECK(r.status == StageStatus::kNumericalHalt);
    CHECK(r.message.find("stage step 0") != std::string::npos);
    CHECK(st.rng.state() == rng_before);
    CHECK(st.history.back().steps_done == 0);
    CHECK(st.model.group_hash(ParamGroup::kAudioTower) == audio0);
}

TEST_CASE("training: validation is deterministic and equals target energy at zero init")
{
    const auto val = random_dataset(3, 10);
    TrainState st = fresh();
    ValidationSet set;
    set.batch = 5;
    const auto a = validate(st.model, val, set);
    const auto b = validate(st.model, val, set);
    CHECK(a.video == b.video);
    CHECK(a.audio == b.audio);

    // both output heads start at zero, so the loss is the mean of (x1 - x0)^2
    double ev = 0, ea = 0, nv = 0, na = 0;
    for (std::size_t i = 0; i < val.size(); ++i)
        for (std::size_t j = 0; j < set.t_grid.size(); ++j) {
            const auto x0 = rfm::prior_sample(set.noise_seed + i * set.t_grid.size() + j, val.video[i].shape(),
                                              val.audio[i].shape(), DType::kF64);
            for (std::int64_t k = 0; k < x0.video.numel(); ++k) {
                const double d = val.video[i].at(k) - x0.video.at(k);
                ev += d * d;
            }
            for (std::int64_t k = 0; k < x0.audio.numel(); ++k) {
                const double d = val.audio[i].at(k) - x0.audio.at(k);
                ea += d * d;
            }
            nv += static_cast<double>(x0.video.numel());
            na += static_cast<double>(x0.audio.numel());
        }
    CHECK(a.video == doctest::Approx(ev / nv).epsilon(1e-5));
    CHECK(a.audio == doctest::Approx(ea / na).epsilon(1e-5));
}

TEST_CASE("training: curves have the documented columns and cadence")
{
    const auto data = random_dataset(4, 12);
    TrainState st = fresh();
    auto spec = quick(Stage::kJointFinetune, 7);
    spec.eval_interval = 3;
    int seen = 0;
    StageOptions opt;
    opt.on_row = [&](const CurveRow&) { ++seen; };
    const auto r = train_stage(st, spec, data, random_dataset(2, 13), opt);
    REQUIRE(r.curve.size() == 4);
    CHECK(seen == 4);
    CHECK(r.curve[0].step == 0);
    CHECK(r.curve[1].step == 3);
    CHECK(r.curve[2].step == 6);
    CHECK(r.curve[3].step == 7);
    const std::string csv = curve_csv(r.curve);
    CHECK(csv.rfind("step,loss_video,loss_audio,val_loss_video,val_loss_audio\n", 0) == 0);
    CHECK(csv.find("\n0,,,") != std::string::npos);
}

TEST_CASE("training: checkpoints are idempotent and resume bit-exactly")
{
    const auto data = random_dataset(10, 14);
    const LatentDataset none;
    auto spec = quick(Stage::kJointFinetune, 10);

    TrainState straight = fresh(21);
    train_stage(straight, spec, data, none);

    TrainState first = fresh(21);
    StageOptions half;
    half.stop_after = 5;
    CHECK(train_stage(first, spec, data, none, half).status == StageStatus::kStopped);
    const std::string bytes = checkpoint_bytes(first);
    TrainState resumed = parse_checkpoint(bytes);
    CHECK(checkpoint_bytes(resumed) == bytes);
    CHECK(train_stage(resumed, spec, data, none).steps_run == 5);

    CHECK(checkpoint_bytes(resumed) == checkpoint_bytes(straight));
    CHECK(resumed.global_step == 10);
}

TEST_CASE("training: checkpoint errors")
{
    TrainState st = fresh();
    const std::string bytes = checkpoint_bytes(st);
    TowerConfig other = small_tower();
    other.layers = 2;
    CHECK_THROWS_AS(parse_checkpoint(bytes, &other), ConfigError);
    const TowerConfig same = small_tower();
    CHECK_NOTHROW(parse_checkpoint(bytes, &same));
    CHECK_THROWS_AS(parse_checkpoint(bytes.substr(0, bytes.size() / 2)), FormatError);
    std::string wrong_version = bytes;
    wrong_version[4] = 42;
    CHECK_THROWS_AS(parse_checkpoint(wrong_version), FormatError);
    CHECK_THROWS_AS(parse_checkpoint("SYTF" + bytes.substr(4)), FormatError);
    CHECK_THROWS_AS(parse_checkpoint(bytes + "x"), FormatError);
}

TEST_CASE("training: parameters transplant by name across ablation configs")
{
    TrainState with = fresh(3);
    TowerConfig no_adaptor = small_tower();
    no_adaptor.use_adaptor = false;
    SyncFlowModel without(no_adaptor, Vocabulary::synthetic(), 99);
    const int n = copy_parameters(with.model, without,
                                  {ParamGroup::kVideoTower, ParamGroup::kAudioTower, ParamGroup::kTextEncoder});
    CHECK(n > 0);
    for (auto g : {ParamGroup::kVideoTower, ParamGroup::kAudioTower, ParamGroup::kTextEncoder})
        CHECK(without.group_hash(g) == with.model.group_hash(g));
    CHECK(without.parameter_count(ParamGroup::kAdaptors) == 0);
}

TEST_CASE("training: encode_dataset keeps captions and latent shapes")
{
    const auto splits = synth::make_splits(3, 1, 1, 40);
    const auto clips = synth::render_all(splits.train);
    const LatentCodec codec;
    const auto d = encode_dataset(codec, clips);
    REQUIRE(d.size() == 3);
    CHECK(d.video[0].shape() == Shape{4, 192, 8, 8});
    CHECK(d.audio[0].shape() == Shape{100, 160});
    CHECK(d.captions[2] == clips[2].caption);
    const auto b = gather(d, {2, 0});
    CHECK(b.video.shape() == Shape{2, 4, 192, 8, 8});
    CHECK(testing::max_abs_diff(reshape(slice(b.audio, 0, 1, 1), {100, 160}), d.audio[0]) == 0.0);
}
