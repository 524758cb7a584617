#include "cli.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"

#include "syncflow/config.hpp"
#include "syncflow/errors.hpp"
#include "syncflow/eval.hpp"
#include "syncflow/io.hpp"
#include "syncflow/synthdata.hpp"
#include "syncflow/training.hpp"

namespace syncflow::cli {

namespace {

namespace fs = std::filesystem;

enum Exit { kOk = 0, kUsage = 1, kConfig = 2, kData = 3, kNumerical = 4 };

RunConfig load_config(const std::string& path)
{
    return path.empty() ? RunConfig{} : load_run_config(path);
}

std::vector<MediaPair> load_split(const fs::path& dir)
{
    std::vector<MediaPair> clips;
    for (const auto& c : io::list_clips(dir)) clips.push_back(io::read_clip(c));
    if (clips.empty()) throw FormatError("no clips in " + dir.string());
    return clips;
}

// A directory that is itself a clip, or a directory of clips.
std::vector<eval::NamedClip> load_named(const fs::path& dir)
{
    std::vector<eval::NamedClip> out;
    if (fs::exists(dir / "caption.txt")) {
        out.push_back({dir.filename().string(), io::read_clip(dir)});
        return out;
    }
    for (const auto& c : io::list_clips(dir)) out.push_back({c.filename().string(), io::read_clip(c)});
    if (out.empty()) throw FormatError("no clips in " + dir.string());
    return out;
}

std::string clip_name(std::size_t i)
{
    std::ostringstream s;
    s << std::setw(4) << std::setfill('0') << i;
    return s.str();
}

struct GenData {
    std::string config, out;
    std::optional<std::uint64_t> seed;
};

int cmd_gen_data(const GenData& o, std::ostream& out)
{
    RunConfig cfg = load_config(o.config);
    cfg.data.seed = resolve_seed(o.seed, cfg.data.seed);
    const auto splits = synth::make_splits(cfg.data.n_train, cfg.data.n_val, cfg.data.n_test, cfg.data.seed);
    const fs::path root(o.out);
    auto write = [&](const char* name, const std::vector<synth::SceneParams>& scenes) {
        for (std::size_t i = 0; i < scenes.size(); ++i) {
            const auto clip = synth::generate_sample(scenes[i]);
            nlohmann::ordered_json meta = nlohmann::ordered_json::parse(io::impact_sidecar(clip));
            meta["scene"] = {{"color", color_name(scenes[i].color)},
                             {"speed", speed_name(scenes[i].speed)},
                             {"initial_height", scenes[i].initial_height},
                             {"restitution", scenes[i].restitution},
                             {"column", scenes[i].column},
                             {"seed", scenes[i].seed}};
            io::write_clip(clip, root / name / clip_name(i), meta.dump(2) + "\n");
        }
    };
    write("train", splits.train);
    write("val", splits.val);
    write("test", splits.test);
    io::atomic_write(root / "config.json", dump_run_config(cfg));
    nlohmann::ordered_json manifest{{"seed", cfg.data.seed},
                                    {"splits", {{"train", splits.train.size()}, {"val", splits.val.size()}, {"test", splits.test.size()}}}};
    io::atomic_write(root / "manifest.json", manifest.dump(2) + "\n");
    out << "wrote " << splits.train.size() << "/" << splits.val.size() << "/" << splits.test.size()
        << " clips (train/val/test) to " << root.string() << " with seed " << cfg.data.seed << "\n";
    return kOk;
}

struct Train {
    std::string stage, config, data, ckpt_in, ckpt_out, curve;
    std::optional<std::int64_t> steps;
    std::optional<std::uint64_t> seed;
};

int cmd_train(const Train& o, std::ostream& out, std::ostream& err)
{
    RunConfig cfg = load_config(o.config);
    const std::uint64_t seed = resolve_seed(o.seed, cfg.data.seed);
    train::StageSpec spec = cfg.stage;
    spec.stage = train::parse_stage(o.stage);
    if (o.steps) spec.steps = *o.steps;
    spec.validate();

    const auto train_clips = load_split(fs::path(o.data) / "train");
    const auto val_clips = load_split(fs::path(o.data) / "val");

    train::TrainState state;
    if (!o.ckpt_in.empty()) {
        state = train::load_checkpoint(o.ckpt_in, &cfg.tower);
    } else {
        LatentCodec codec(cfg.codec, seed);
        if (cfg.codec.mode == CodecMode::kLossless) {
            codec.fit_scales(train_clips);
        } else {
            VaeTrainOptions vo;
            vo.seed = seed;
            vo.beta = cfg.codec.vae_beta;
            const auto rep = train_vae(codec, train_clips, vo);
            if (rep.diverged) throw NumericalError("codec training diverged");
        }
        state = train::TrainState(cfg.tower, codec, seed);
    }
    const auto lat_train = train::encode_dataset(state.codec, train_clips);
    const auto lat_val = train::encode_dataset(state.codec, val_clips);

    const auto start = std::chrono::steady_clock::now();
    train::StageOptions opts;
    opts.on_row = [&](const train::CurveRow& r) {
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        out << train::stage_name(spec.stage) << " step " << r.step << "/" << spec.steps << std::setprecision(5)
            << " loss_video " << r.loss_video << " loss_audio " << r.loss_audio << " val_video " << r.val_loss_video
            << " val_audio " << r.val_loss_audio << " (" << std::fixed << std::setprecision(1) << secs << "s)"
            << std::defaultfloat << "\n";
        out.flush();
    };
    const auto result = train::train_stage(state, spec, lat_train, lat_val, opts);

    const fs::path curve = o.curve.empty() ? fs::path(o.ckpt_out + ".curve.csv") : fs::path(o.curve);
    io::atomic_write(curve, train::curve_csv(result.curve));
    train::save_checkpoint(state, o.ckpt_out);
    if (result.status == train::StageStatus::kNumericalHalt) {
        err << "error: " << result.message << "; last good state saved to " << o.ckpt_out << "\n";
        return kNumerical;
    }
    out << "saved " << o.ckpt_out << " and " << curve.string() << "\n";
    return kOk;
}

struct Sample {
    std::string mode = "t2av", caption, ckpt, out, video, resolution, config;
    std::optional<double> guidance;
    std::optional<int> steps;
    std::optional<std::uint64_t> seed;
};

int cmd_sample(const Sample& o, std::ostream& out)
{
    const RunConfig cfg = load_config(o.config);
    train::TrainState state = train::load_checkpoint(o.ckpt);
    rfm::SampleRequest req;
    req.caption = o.caption;
    req.mode = rfm::parse_sample_mode(o.mode);
    req.guidance = o.guidance.value_or(cfg.sample.guidance);
    req.steps = o.steps.value_or(cfg.sample.steps);
    req.seed = resolve_seed(o.seed, cfg.sample.seed);
    const int rs = state.codec.config().spatial_factor;
    if (!o.resolution.empty()) {
        int h = 0, w = 0;
        char x = 0;
        std::istringstream in(o.resolution);
        if (!(in >> h >> x >> w) || (x != 'x' && x != 'X') || h <= 0 || w <= 0)
            throw ContractError("--resolution expects HxW in pixels, got '" + o.resolution + "'");
        if (h % rs || w % rs) throw ContractError("--resolution must be a multiple of the codec's spatial factor " + std::to_string(rs));
        req.latent_height = h / rs;
        req.latent_width = w / rs;
    }
    if (req.mode == rfm::SampleMode::kV2AInversion) {
        if (o.video.empty()) throw ContractError("v2a sampling needs --video DIR");
        const fs::path dir = fs::exists(fs::path(o.video) / "frames") ? fs::path(o.video) / "frames" : fs::path(o.video);
        const VideoTensor v = io::read_frames(dir);
        req.video_latent = state.codec.encode_video(v);
        req.latent_height = req.video_latent.dim(2);
        req.latent_width = req.video_latent.dim(3);
    }
    const auto latents = rfm::sample(state.model, {req});
    const fs::path dir(o.out);
    const int rate = 8000;
    MediaPair clip = eval::decode_item(state.codec, latents, 0, req.caption, rate);
    nlohmann::ordered_json meta{{"caption", req.caption},
                                {"mode", rfm::sample_mode_name(req.mode)},
                                {"guidance", req.guidance},
                                {"steps", req.steps},
                                {"seed", req.seed}};
    if (req.mode == rfm::SampleMode::kAudioOnly) {
        fs::create_directories(dir);
        io::write_wav(clip.audio, dir / "audio.wav");
        io::atomic_write(dir / "caption.txt", req.caption + "\n");
        io::atomic_write(dir / "meta.json", meta.dump(2) + "\n");
    } else {
        io::write_clip(clip, dir, meta.dump(2) + "\n");
    }
    io::save_tensor(reshape(latents.video, Shape(latents.video.shape().begin() + 1, latents.video.shape().end())),
                    dir / "video_latent.sytf");
    io::save_tensor(reshape(latents.audio, Shape(latents.audio.shape().begin() + 1, latents.audio.shape().end())),
                    dir / "audio_latent.sytf");
    out << "wrote " << dir.string() << " (" << rfm::sample_mode_name(req.mode) << ", w=" << req.guidance
        << ", steps=" << req.steps << ", seed=" << req.seed << ", video " << clip.video.height << "x" << clip.video.width
        << ")\n";
    return kOk;
}

struct Eval {
    std::string gen, ref, out, config, ckpt;
    bool sweep = false;
    std::optional<std::uint64_t> seed;
};

int cmd_eval(const Eval& o, std::ostream& out)
{
    const RunConfig cfg = load_config(o.config);
    const auto ref = load_named(o.ref);
    if (o.sweep) {
        if (o.ckpt.empty()) throw ContractError("--guidance-sweep needs --ckpt");
        train::TrainState state = train::load_checkpoint(o.ckpt);
        std::vector<std::string> captions;
        for (std::size_t i = 0; i < ref.size() && static_cast<int>(i) < cfg.eval.sweep_samples; ++i)
            captions.push_back(ref[i].pair.caption);
        const auto rows = eval::guidance_sweep(state.model, state.codec, captions, cfg.eval.guidance_sweep, cfg.sample.steps,
                                               resolve_seed(o.seed, cfg.sample.seed), ref, cfg.eval);
        nlohmann::ordered_json j = nlohmann::ordered_json::array();
        for (const auto& r : rows) {
            auto rep = nlohmann::ordered_json::parse(r.report.to_json());
            rep.erase("samples");
            j.push_back({{"guidance", r.guidance}, {"latent_diff_vs_w0", r.mean_abs_latent_diff}, {"metrics", rep}});
        }
        io::atomic_write(o.out, nlohmann::ordered_json{{"sweep", j}}.dump(2) + "\n");
        const std::string table = eval::sweep_table(rows);
        fs::path csv(o.out);
        csv.replace_extension(".csv");
        io::atomic_write(csv, table);
        out << table;
        return kOk;
    }
    if (o.gen.empty()) throw ContractError("eval needs --gen DIR (or --guidance-sweep with --ckpt)");
    const auto report = eval::evaluate(load_named(o.gen), ref, cfg.eval);
    io::atomic_write(o.out, report.to_json());
    out << report.summary() << "\n";
    return kOk;
}

int cmd_inspect(const std::string& ckpt, std::ostream& out)
{
    train::TrainState state = train::load_checkpoint(ckpt);
    out << "tower " << to_json(state.model.config()).dump() << "\n";
    out << "codec " << to_json(state.codec.config()).dump() << "\n";
    out << "parameters " << state.model.parameter_count() << "\n";
    for (auto g : {ParamGroup::kVideoTower, ParamGroup::kAudioTower, ParamGroup::kAdaptors, ParamGroup::kTextEncoder}) {
        std::ostringstream hash;
        hash << std::hex << std::setw(16) << std::setfill('0') << state.model.group_hash(g);
        out << "  " << std::left << std::setw(13) << group_name(g) << std::right << std::setw(9)
            << state.model.parameter_count(g) << "  hash " << hash.str() << "\n";
    }
    out << "global step " << state.global_step << ", optimizer step " << state.optimizer.steps() << "\n";
    out << "stages";
    if (state.history.empty()) out << " none";
    out << "\n";
    for (const auto& h : state.history)
        out << "  " << train::stage_name(h.stage) << " " << h.steps_done << "/" << h.steps_planned
            << (h.completed ? " completed" : " in progress") << "\n";
    return kOk;
}

} // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err)
{
    CLI::App app{"syncflow: joint text-to-audio-video generation with rectified flow matching"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "Show help for every subcommand");

    GenData gd;
    auto* gen = app.add_subcommand("gen-data", "Generate the synthetic bouncing-ball splits");
    gen->add_option("--config", gd.config, "RunConfig JSON");
    gen->add_option("--out", gd.out, "Output directory")->required();
    gen->add_option("--seed", gd.seed, "Overrides SYNCFLOW_SEED and data.seed");

    Train tr;
    auto* train_cmd = app.add_subcommand("train", "Run one training stage");
    train_cmd->add_option("--stage", tr.stage, "video | audio | joint")->required()->check(CLI::IsMember({"video", "audio", "joint"}));
    train_cmd->add_option("--config", tr.config, "RunConfig JSON");
    train_cmd->add_option("--data", tr.data, "Directory written by gen-data")->required();
    train_cmd->add_option("--ckpt-in", tr.ckpt_in, "Checkpoint to continue from");
    train_cmd->add_option("--ckpt-out", tr.ckpt_out, "Checkpoint to write")->required();
    train_cmd->add_option("--curve", tr.curve, "Loss CSV (default <ckpt-out>.curve.csv)");
    train_cmd->add_option("--steps", tr.steps, "Override stage.steps");
    train_cmd->add_option("--seed", tr.seed, "Run seed for a fresh model");

    Sample sm;
    auto* sample_cmd = app.add_subcommand("sample", "Generate one clip from a checkpoint");
    sample_cmd->add_option("--mode", sm.mode, "t2av | v2a | audio-only")->check(CLI::IsMember({"t2av", "v2a", "audio-only"}));
    sample_cmd->add_option("--caption", sm.caption, "Text prompt")->required();
    sample_cmd->add_option("--guidance", sm.guidance, "CFG weight w (default 6.0)");
    sample_cmd->add_option("--steps", sm.steps, "Euler steps (default 50)");
    sample_cmd->add_option("--seed", sm.seed, "Noise seed");
    sample_cmd->add_option("--ckpt", sm.ckpt, "Checkpoint")->required();
    sample_cmd->add_option("--out", sm.out, "Output clip directory")->required();
    sample_cmd->add_option("--video", sm.video, "Frames (or clip) directory for v2a");
    sample_cmd->add_option("--resolution", sm.resolution, "HxW in pixels for zero-shot resolution");
    sample_cmd->add_option("--config", sm.config, "RunConfig JSON");

    Eval ev;
    auto* eval_cmd = app.add_subcommand("eval", "Score generated clips or run a guidance sweep");
    eval_cmd->add_option("--gen", ev.gen, "Generated clip directory");
    eval_cmd->add_option("--ref", ev.ref, "Reference clip directory")->required();
    eval_cmd->add_option("--out", ev.out, "Report JSON")->required();
    eval_cmd->add_option("--config", ev.config, "RunConfig JSON");
    eval_cmd->add_option("--ckpt", ev.ckpt, "Checkpoint for --guidance-sweep");
    eval_cmd->add_flag("--guidance-sweep", ev.sweep, "Sample at every eval.guidance_sweep weight and tabulate");
    eval_cmd->add_option("--seed", ev.seed, "Sweep noise seed");

    std::string inspect_ckpt;
    auto* inspect = app.add_subcommand("inspect", "Describe a checkpoint");
    inspect->add_option("--ckpt", inspect_ckpt, "Checkpoint")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kOk;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n\n" << app.help();
        return kUsage;
    }

    try {
        if (*gen) return cmd_gen_data(gd, out);
        if (*train_cmd) return cmd_train(tr, out, err);
        if (*sample_cmd) return cmd_sample(sm, out);
        if (*eval_cmd) return cmd_eval(ev, out);
        if (*inspect) return cmd_inspect(inspect_ckpt, out);
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << "\n";
        return kConfig;
    } catch (const NumericalError& e) {
        err << "numerical failure: " << e.what() << "\n";
        return kNumerical;
    } catch (const ContractError& e) {
        err << "usage error: " << e.what() << "\n";
        return kUsage;
    } catch (const Error& e) {
        err << "data error: " << e.what() << "\n";
        return kData;
    } catch (const fs::filesystem_error& e) {
        err << "data error: " << e.what() << "\n";
        return kData;
    }
    return kUsage;
}

} // namespace syncflow::cli
