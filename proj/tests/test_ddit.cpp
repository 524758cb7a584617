#include <doctest.h>

#include "syncflow/ddit.hpp"
#include "syncflow/errors.hpp"
#include "test_util.hpp"

using namespace syncflow;

namespace {

TowerConfig small_config()
{
    TowerConfig c;
    c.layers = 2;
    c.video_dim = 16;
    c.audio_dim = 16;
    c.heads = 2;
    c.latent_frames = 2;
    c.latent_height = 4;
    c.latent_width = 4;
    c.video_channels = 6;
    c.audio_frames = 8;
    c.audio_channels = 5;
    return c;
}

// Replaces every parameter (zero-initialized ones too) with fresh noise.
void randomize(SyncFlowModel& m, std::uint64_t seed, double stddev = 0.2)
{
    Rng rng(seed);
    m.visit([&](const std::string&, Tensor& t) {
        for (std::int64_t i = 0; i < t.numel(); ++i) t.set(i, rng.normal() * stddev);
    });
}

struct Inputs {
    Tensor zv, za;
    std::vector<double> t;
    TextBatch text;
};

Inputs make_inputs(const SyncFlowModel& m, std::int64_t B, Rng& rng, std::int64_t h = 4, std::int64_t w = 4)
{
    const auto& c = m.config();
    Inputs in;
    in.zv = testing::random_tensor({B, c.latent_frames, c.video_channels, h, w}, rng);
    in.za = testing::random_tensor({B, c.audio_frames, c.audio_channels}, rng);
    for (std::int64_t b = 0; b < B; ++b) in.t.push_back(rng.uniform());
    std::vector<std::string> caps;
    for (std::int64_t b = 0; b < B; ++b) caps.push_back(b % 2 ? "a red ball bouncing fast" : "a blue ball bouncing slow");
    in.text = m.encode_text(caps);
    return in;
}

} // namespace

TEST_CASE("ddit: patchify shapes and unpatchify rearrangement oracle")
{
    SyncFlowModel m(TowerConfig::desk(), Vocabulary::synthetic(), 1);
    Rng rng(1);
    const auto zv = testing::random_tensor({2, 4, 192, 8, 8}, rng);
    CHECK(m.patchify(zv).shape() == Shape{2, 4, 16, 64});

    const std::int64_t B = 2, T = 4, C = 192, H = 8, W = 8, p = 2, gw = W / p;
    Tensor tokens({B, T, (H / p) * gw, p * p * C});
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t t = 0; t < T; ++t)
            for (std::int64_t c = 0; c < C; ++c)
                for (std::int64_t y = 0; y < H; ++y)
                    for (std::int64_t x = 0; x < W; ++x) {
                        const std::int64_t s = (y / p) * gw + x / p;
                        const std::int64_t k = ((y % p) * p + x % p) * C + c;
                        tokens.set(((b * T + t) * 16 + s) * p * p * C + k, zv.at((((b * T + t) * C + c) * H + y) * W + x));
                    }
    CHECK(testing::bitwise_equal(m.unpatchify(tokens, H, W), zv));
    CHECK_THROWS_AS(m.patchify(testing::random_tensor({1, 4, 192, 7, 8}, rng)), ShapeError);
    CHECK_THROWS_AS(m.patchify(testing::random_tensor({1, 4, 48, 8, 8}, rng)), ConfigError);
}

TEST_CASE("ddit: zero-initialized output heads give exactly zero velocity")
{
    SyncFlowModel m(small_config(), Vocabulary::synthetic(), 3);
    Rng rng(2);
    const auto in = make_inputs(m, 2, rng);
    const auto v = m.forward(in.zv, in.za, in.t, in.text);
    CHECK(v.video.shape() == in.zv.shape());
    CHECK(v.audio.shape() == in.za.shape());
    for (float x : v.video.data<float>()) CHECK(x == 0.0f);
    for (float x : v.audio.data<float>()) CHECK(x == 0.0f);
}

TEST_CASE("ddit: video drives audio but audio never reaches video")
{
    SyncFlowModel m(small_config(), Vocabulary::synthetic(), 4);
    randomize(m, 5);
    Rng rng(3);
    auto in = make_inputs(m, 1, rng);
    const auto base = m.forward(in.zv, in.za, in.t, in.text);

    Tensor zv2 = in.zv.clone();
    zv2.set(7, zv2.at(7) + 0.5);
    CHECK(testing::max_abs_diff(m.forward(zv2, in.za, in.t, in.text).audio, base.audio) > 1e-6);

    Tensor za2 = testing::random_tensor(in.za.shape(), rng);
    const auto other = m.forward(in.zv, za2, in.t, in.text);
    CHECK(testing::bitwise_equal(other.video, base.video));
    CHECK(testing::max_abs_diff(other.audio, base.audio) > 1e-6);
}

TEST_CASE("ddit: spatial attention is frame-equivariant, temporal attention patch-equivariant")
{
    SyncFlowModel m(small_config(), Vocabulary::synthetic(), 6);
    randomize(m, 7);
    Rng rng(8);
    const std::int64_t B = 2, T = 2, S = 4, E = 16;
    const auto h = testing::random_tensor({B, T, S, E}, rng);
    const auto c = silu(m.timestep_embedding({0.2, 0.7}, false));
    const auto text = m.encode_text({"a red ball bouncing fast", "a green ball"});

    const std::vector<std::int64_t> frame_perm{1, 0};
    const auto sp = m.spatial_attention(0, h, c, text);
    const auto sp_perm = m.spatial_attention(0, index_select(h, 1, frame_perm), c, text);
    CHECK(testing::max_abs_diff(index_select(sp, 1, frame_perm), sp_perm) < 1e-5);

    const std::vector<std::int64_t> patch_perm{2, 0, 3, 1};
    const auto [tp, feat] = m.temporal_attention(0, h, c, text);
    const auto [tp_perm, feat_perm] = m.temporal_attention(0, index_select(h, 2, patch_perm), c, text);
    CHECK(testing::max_abs_diff(index_select(tp, 2, patch_perm), tp_perm) < 1e-5);
    CHECK(feat.shape() == Shape{B, T, E});
    CHECK(testing::max_abs_diff(feat, feat_perm) < 1e-5);
    CHECK(sp.shape() == h.shape());
}

TEST_CASE("ddit: identical batch items produce identical outputs")
{
    SyncFlowModel m(small_config(), Vocabulary::synthetic(), 9);
    randomize(m, 10);
    Rng rng(11);
    auto one = make_inputs(m, 1, rng);
    const Tensor zv = concat({one.zv, one.zv}, 0);
    const Tensor za = concat({one.za, one.za}, 0);
    const auto text = m.encode_text({"a blue ball bouncing slow", "a blue ball bouncing slow"});
    const auto v = m.forward(zv, za, {one.t[0], one.t[0]}, text);
    const std::int64_t nv = one.zv.numel(), na = one.za.numel();
    // GEMM kernels may block rows differently, so allow float reassociation
    for (std::int64_t i = 0; i < nv; ++i) REQUIRE(std::abs(v.video.at(i) - v.video.at(nv + i)) < 1e-6);
    for (std::int64_t i = 0; i < na; ++i) REQUIRE(std::abs(v.audio.at(i) - v.audio.at(na + i)) < 1e-6);
}

TEST_CASE("ddit: adaptor shapes, per-layer parameters, and constant output on zero input")
{
    auto cfg = small_config();
    cfg.audio_dim = 8;
    SyncFlowModel m(cfg, Vocabulary::synthetic(), 12);
    randomize(m, 13);
    const auto out = m.adaptor(1, Tensor({2, 3, 16}));
    CHECK(out.shape() == Shape{2, 3, 8});
    for (std::int64_t row = 1; row < 6; ++row)
        for (std::int64_t j = 0; j < 8; ++j) CHECK(out.at(row * 8 + j) == doctest::Approx(out.at(j)).epsilon(1e-6));
    // zero features: attention returns o(v.bias) for every row
    Tensor v_bias, o_w, o_b, n_g, n_b, p_w, p_b;
    m.visit([&](const std::string& name, Tensor& t) {
        if (name == "adaptors.1.attn.v.bias") v_bias = t;
        if (name == "adaptors.1.attn.o.weight") o_w = t;
        if (name == "adaptors.1.attn.o.bias") o_b = t;
        if (name == "adaptors.1.norm.gain") n_g = t;
        if (name == "adaptors.1.norm.bias") n_b = t;
        if (name == "adaptors.1.proj.weight") p_w = t;
        if (name == "adaptors.1.proj.bias") p_b = t;
    });
    const Tensor direct = add(matmul(layer_norm(add(matmul(reshape(v_bias, {1, 16}), o_w), o_b), n_g, n_b), p_w), p_b);
    for (std::int64_t j = 0; j < 8; ++j) CHECK(out.at(j) == doctest::Approx(direct.at(j)).epsilon(1e-5));

    auto c1 = small_config();
    c1.layers = 1;
    auto c3 = small_config();
    c3.layers = 3;
    SyncFlowModel m1(c1, Vocabulary::synthetic(), 1), m3(c3, Vocabulary::synthetic(), 1);
    CHECK(m3.parameter_count(ParamGroup::kAdaptors) == 3 * m1.parameter_count(ParamGroup::kAdaptors));
}

TEST_CASE("ddit: timestep embedding")
{
    SyncFlowModel m(small_config(), Vocabulary::synthetic(), 14);
    const auto e = m.timestep_embedding({0.0, 1.0}, true);
    CHECK(e.shape() == Shape{2, 16});
    double diff = 0;
    for (std::int64_t j = 0; j < 16; ++j) diff += std::abs(e.at(j) - e.at(16 + j));
    CHECK(diff > 1e-4);
    CHECK(testing::bitwise_equal(e, m.timestep_embedding({0.0, 1.0}, true)));
    CHECK_THROWS_AS(m.timestep_embedding({1.5}, true), DomainError);
    CHECK_THROWS_AS(m.timestep_embedding({-0.1}, false), DomainError);
}

TEST_CASE("ddit: audio conditioning is live")
{
    SyncFlowModel m(small_config(), Vocabulary::synthetic(), 15);
    randomize(m, 16);
    Rng rng(17);
    auto in = make_inputs(m, 1, rng);
    const auto vp = m.forward_video(in.zv, in.t, in.text);
    const auto a = m.forward_audio(in.za, in.t, vp.features, in.text);
    std::vector<Tensor> zeros;
    for (const auto& f : vp.features) zeros.push_back(Tensor(f.shape()));
    CHECK(testing::max_abs_diff(a, m.forward_audio(in.za, in.t, zeros, in.text)) > 1e-6);
    // T_a (8) and T_v (2) differ without issue
    CHECK(a.shape() == Shape{1, 8, 5});
}

TEST_CASE("ddit: new latent resolutions run with interpolated spatial positions")
{
    SyncFlowModel m(small_config(), Vocabulary::synthetic(), 18);
    randomize(m, 19);
    Rng rng(20);
    CHECK(testing::bitwise_equal(m.spatial_positions(2, 2), m.spatial_positions(2, 2)));
    for (std::int64_t side : {2, 8}) {
        auto in = make_inputs(m, 1, rng, side, side);
        const auto v = m.forward(in.zv, in.za, in.t, in.text);
        CHECK(v.video.shape() == in.zv.shape());
        CHECK(v.audio.shape() == in.za.shape());
        for (float x : v.video.data<float>()) REQUIRE(std::isfinite(x));
        const auto vp = m.forward_video(in.zv, in.t, in.text);
        CHECK(m.adaptor(0, vp.features[0]).shape() == Shape{1, 2, 16});
    }
    CHECK_THROWS_AS(m.forward(testing::random_tensor({1, 2, 6, 5, 4}, rng), testing::random_tensor({1, 8, 5}, rng), {0.5},
                              m.encode_text({"a"})),
                    ShapeError);
    // bilinear weights are a partition of unity
    const auto w = bilinear_matrix(2, 2, 8, 8);
    for (int r = 0; r < 64; ++r) {
        double s = 0;
        for (int k = 0; k < 4; ++k) s += w[static_cast<std::size_t>(r * 4 + k)];
        CHECK(s == doctest::Approx(1.0));
    }
}

TEST_CASE("ddit: parameter groups partition the model and configs validate")
{
    SyncFlowModel m(TowerConfig::desk(), Vocabulary::synthetic(), 21);
    std::int64_t total = 0;
    for (auto g : {ParamGroup::kVideoTower, ParamGroup::kAudioTower, ParamGroup::kAdaptors, ParamGroup::kTextEncoder})
        total += m.parameter_count(g);
    CHECK(total == m.parameter_count());
    CHECK(m.parameter_count(ParamGroup::kTextEncoder) > 0);
    CHECK(m.parameter_count(ParamGroup::kAdaptors) > 0);

    auto bad = TowerConfig::desk();
    bad.heads = 5;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    CHECK_NOTHROW(TowerConfig::full_scale().validate());
}

TEST_CASE("ddit: audio-only and text-conditioned audio ablations")
{
    auto cfg = small_config();
    cfg.audio_only = true;
    SyncFlowModel m(cfg, Vocabulary::synthetic(), 22);
    randomize(m, 23);
    Rng rng(24);
    auto in = make_inputs(m, 2, rng);
    const auto v = m.forward(in.zv, in.za, in.t, in.text);
    for (float x : v.video.data<float>()) CHECK(x == 0.0f);
    const auto other_text = m.encode_text({"a green ball bouncing slow", "a green ball bouncing slow"});
    CHECK(testing::max_abs_diff(v.audio, m.forward(in.zv, in.za, in.t, other_text).audio) > 1e-6);

    auto cfg2 = small_config();
    cfg2.audio_text_cross_attn = true;
    SyncFlowModel m2(cfg2, Vocabulary::synthetic(), 25);
    randomize(m2, 26);
    auto in2 = make_inputs(m2, 2, rng);
    const auto a = m2.forward(in2.zv, in2.za, in2.t, in2.text).audio;
    CHECK(a.shape() == in2.za.shape());
}

TEST_CASE("ddit: converted copies are deep and keep outputs")
{
    SyncFlowModel m(small_config(), Vocabulary::synthetic(), 27);
    randomize(m, 28);
    auto m64 = m.converted(DType::kF64);
    CHECK(m64.dtype() == DType::kF64);
    Rng rng(29);
    auto in = make_inputs(m, 1, rng);
    const auto v32 = m.forward(in.zv, in.za, in.t, in.text);
    const auto text64 = m64.encode_text({"a blue ball bouncing slow"});
    const auto v64 = m64.forward(in.zv.to(DType::kF64), in.za.to(DType::kF64), in.t, text64);
    CHECK(testing::max_abs_diff(v32.audio, v64.audio) < 1e-3);
    const auto before = m.group_hash(ParamGroup::kVideoTower);
    m64.visit([](const std::string&, Tensor& t) { t.set(0, 1.0); });
    CHECK(m.group_hash(ParamGroup::kVideoTower) == before);
}
