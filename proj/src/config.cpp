#include "syncflow/config.hpp"

#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "syncflow/errors.hpp"

namespace syncflow {

namespace {

// Reads the keys of one object and rejects whatever is left over.
class Fields {
public:
    Fields(const Json& j, std::string section) : j_(j), section_(std::move(section))
    {
        if (!j_.is_object()) throw ConfigError("config section '" + section_ + "' must be an object");
    }

    template <class T>
    void get(const char* key, T& out)
    {
        if (!j_.contains(key)) return;
        seen_.insert(key);
        try {
            out = j_.at(key).template get<T>();
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(section_ + "." + key + ": " + e.what());
        }
    }

    const Json* sub(const char* key)
    {
        if (!j_.contains(key)) return nullptr;
        seen_.insert(key);
        return &j_.at(key);
    }

    void finish() const
    {
        for (const auto& [k, v] : j_.items())
            if (!seen_.count(k)) throw ConfigError("unknown config key '" + (section_.empty() ? k : section_ + "." + k) + "'");
    }

private:
    const Json& j_;
    std::string section_;
    std::set<std::string> seen_;
};

ParamGroup parse_group(const std::string& name)
{
    for (auto g : {ParamGroup::kVideoTower, ParamGroup::kAudioTower, ParamGroup::kAdaptors, ParamGroup::kTextEncoder})
        if (name == group_name(g)) return g;
    throw ConfigError("unknown parameter group '" + name + "'");
}

} // namespace

Json to_json(const CodecConfig& c)
{
    return Json{{"mode", codec_mode_name(c.mode)},
                {"temporal_factor", c.temporal_factor},
                {"spatial_factor", c.spatial_factor},
                {"audio_factor", c.audio_factor},
                {"audio_dim", c.audio_dim},
                {"video_scale", c.video_scale},
                {"audio_scale", c.audio_scale},
                {"permutation_seed", c.permutation_seed},
                {"vae_hidden", c.vae_hidden},
                {"vae_beta", c.vae_beta}};
}

CodecConfig codec_from_json(const Json& j)
{
    CodecConfig c;
    Fields f(j, "codec");
    std::string mode = codec_mode_name(c.mode);
    f.get("mode", mode);
    try {
        c.mode = parse_codec_mode(mode);
    } catch (const Error& e) {
        throw ConfigError(e.what());
    }
    f.get("temporal_factor", c.temporal_factor);
    f.get("spatial_factor", c.spatial_factor);
    f.get("audio_factor", c.audio_factor);
    f.get("audio_dim", c.audio_dim);
    f.get("video_scale", c.video_scale);
    f.get("audio_scale", c.audio_scale);
    f.get("permutation_seed", c.permutation_seed);
    f.get("vae_hidden", c.vae_hidden);
    f.get("vae_beta", c.vae_beta);
    f.finish();
    return c;
}

Json to_json(const TowerConfig& c)
{
    return Json{{"layers", c.layers},
                {"video_dim", c.video_dim},
                {"audio_dim", c.audio_dim},
                {"heads", c.heads},
                {"patch", c.patch},
                {"mlp_ratio", c.mlp_ratio},
                {"latent_frames", c.latent_frames},
                {"latent_height", c.latent_height},
                {"latent_width", c.latent_width},
                {"video_channels", c.video_channels},
                {"audio_frames", c.audio_frames},
                {"audio_channels", c.audio_channels},
                {"use_adaptor", c.use_adaptor},
                {"audio_text_cross_attn", c.audio_text_cross_attn},
                {"audio_only", c.audio_only}};
}

TowerConfig tower_from_json(const Json& j)
{
    TowerConfig c;
    Fields f(j, "tower");
    f.get("layers", c.layers);
    f.get("video_dim", c.video_dim);
    f.get("audio_dim", c.audio_dim);
    f.get("heads", c.heads);
    f.get("patch", c.patch);
    f.get("mlp_ratio", c.mlp_ratio);
    f.get("latent_frames", c.latent_frames);
    f.get("latent_height", c.latent_height);
    f.get("latent_width", c.latent_width);
    f.get("video_channels", c.video_channels);
    f.get("audio_frames", c.audio_frames);
    f.get("audio_channels", c.audio_channels);
    f.get("use_adaptor", c.use_adaptor);
    f.get("audio_text_cross_attn", c.audio_text_cross_attn);
    f.get("audio_only", c.audio_only);
    f.finish();
    return c;
}

Json to_json(const train::StageSpec& s)
{
    Json j{{"stage", train::stage_name(s.stage)},
                {"steps", s.steps},
                {"batch", s.batch},
                {"lr", s.lr},
                {"warmup_steps", s.warmup_steps},
                {"text_dropout", s.text_dropout},
                {"lambda_video", s.lambda_video},
                {"lambda_audio", s.lambda_audio},
                {"ot_coupling", s.ot_coupling},
                {"eval_interval", s.eval_interval}};
    if (s.trainable) {
        Json groups = Json::array();
        for (auto g : *s.trainable) groups.push_back(group_name(g));
        j["trainable"] = groups;
    }
    return j;
}

train::StageSpec stage_from_json(const Json& j)
{
    train::StageSpec s;
    Fields f(j, "stage");
    std::string stage = train::stage_name(s.stage);
    f.get("stage", stage);
    try {
        s.stage = train::parse_stage(stage);
    } catch (const Error& e) {
        throw ConfigError(e.what());
    }
    f.get("steps", s.steps);
    f.get("batch", s.batch);
    f.get("lr", s.lr);
    f.get("warmup_steps", s.warmup_steps);
    f.get("text_dropout", s.text_dropout);
    f.get("lambda_video", s.lambda_video);
    f.get("lambda_audio", s.lambda_audio);
    f.get("ot_coupling", s.ot_coupling);
    f.get("eval_interval", s.eval_interval);
    if (j.contains("trainable")) {
        std::vector<std::string> groups;
        f.get("trainable", groups);
        s.trainable.emplace();
        for (const auto& g : groups) s.trainable->push_back(parse_group(g));
    }
    f.finish();
    return s;
}

Json to_json(const SampleConfig& s)
{
    return Json{{"mode", rfm::sample_mode_name(s.mode)}, {"guidance", s.guidance}, {"steps", s.steps}, {"seed", s.seed}};
}

SampleConfig sample_from_json(const Json& j)
{
    SampleConfig s;
    Fields f(j, "sample");
    std::string mode = rfm::sample_mode_name(s.mode);
    f.get("mode", mode);
    try {
        s.mode = rfm::parse_sample_mode(mode);
    } catch (const Error& e) {
        throw ConfigError(e.what());
    }
    f.get("guidance", s.guidance);
    f.get("steps", s.steps);
    f.get("seed", s.seed);
    f.finish();
    return s;
}

Json to_json(const eval::EvalConfig& e)
{
    return Json{{"hit_window_frames", e.hit_window_frames},
                {"fps", e.fps},
                {"feature_dim", e.feature_dim},
                {"feature_seed", e.feature_seed},
                {"guidance_sweep", e.guidance_sweep},
                {"sweep_samples", e.sweep_samples}};
}

eval::EvalConfig eval_from_json(const Json& j)
{
    eval::EvalConfig e;
    Fields f(j, "eval");
    f.get("hit_window_frames", e.hit_window_frames);
    f.get("fps", e.fps);
    f.get("feature_dim", e.feature_dim);
    f.get("feature_seed", e.feature_seed);
    f.get("guidance_sweep", e.guidance_sweep);
    f.get("sweep_samples", e.sweep_samples);
    f.finish();
    return e;
}

Json to_json(const DataConfig& d)
{
    return Json{{"n_train", d.n_train}, {"n_val", d.n_val}, {"n_test", d.n_test}, {"seed", d.seed}};
}

DataConfig data_from_json(const Json& j)
{
    DataConfig d;
    Fields f(j, "data");
    f.get("n_train", d.n_train);
    f.get("n_val", d.n_val);
    f.get("n_test", d.n_test);
    f.get("seed", d.seed);
    f.finish();
    return d;
}

Json to_json(const RunConfig& r)
{
    return Json{{"codec", to_json(r.codec)}, {"tower", to_json(r.tower)}, {"stage", to_json(r.stage)},
                {"sample", to_json(r.sample)}, {"eval", to_json(r.eval)},   {"data", to_json(r.data)}};
}

RunConfig run_config_from_json(const Json& j)
{
    RunConfig r;
    Fields f(j, "");
    if (auto* s = f.sub("codec")) r.codec = codec_from_json(*s);
    if (auto* s = f.sub("tower")) r.tower = tower_from_json(*s);
    if (auto* s = f.sub("stage")) r.stage = stage_from_json(*s);
    if (auto* s = f.sub("sample")) r.sample = sample_from_json(*s);
    if (auto* s = f.sub("eval")) r.eval = eval_from_json(*s);
    if (auto* s = f.sub("data")) r.data = data_from_json(*s);
    f.finish();
    return r;
}

void RunConfig::validate() const
{
    codec.validate();
    tower.validate();
    stage.validate();
    eval.validate();
    if (data.n_train < 1 || data.n_val < 1 || data.n_test < 1) throw ConfigError("data: split sizes must be >= 1");
    if (sample.steps < 1) throw ConfigError("sample.steps must be >= 1");
    if (!(sample.guidance >= 0)) throw ConfigError("sample.guidance must be >= 0");
    if (tower.video_channels != codec.video_channels())
        throw ConfigError("tower.video_channels " + std::to_string(tower.video_channels) + " does not match the codec's " +
                          std::to_string(codec.video_channels()));
    if (tower.audio_channels != codec.audio_dim)
        throw ConfigError("tower.audio_channels " + std::to_string(tower.audio_channels) + " does not match codec.audio_dim " +
                          std::to_string(codec.audio_dim));
}

RunConfig parse_run_config(const std::string& text)
{
    Json j;
    try {
        j = Json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    RunConfig r = run_config_from_json(j);
    r.validate();
    return r;
}

RunConfig load_run_config(const std::string& path)
{
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_run_config(ss.str());
}

std::string dump_run_config(const RunConfig& r) { return to_json(r).dump(2) + "\n"; }

std::uint64_t resolve_seed(std::optional<std::uint64_t> flag, std::uint64_t config_value)
{
    if (flag) return *flag;
    if (const char* env = std::getenv("SYNCFLOW_SEED"); env && *env) {
        try {
            std::size_t used = 0;
            const auto v = std::stoull(env, &used, 0);
            if (used != std::string(env).size()) throw std::invalid_argument("trailing");
            return v;
        } catch (const std::exception&) {
            throw ConfigError(std::string("SYNCFLOW_SEED is not an unsigned integer: '") + env + "'");
        }
    }
    return config_value;
}

} // namespace syncflow
