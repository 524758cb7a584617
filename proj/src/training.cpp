#include "syncflow/training.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <sstream>

#include "syncflow/config.hpp"
#include "syncflow/errors.hpp"
#include "syncflow/io.hpp"

namespace syncflow::train {

namespace {

constexpr char kCheckpointMagic[4] = {'S', 'Y', 'C', 'K'};
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

const ParamGroup kAllGroups[] = {ParamGroup::kVideoTower, ParamGroup::kAudioTower, ParamGroup::kAdaptors,
                                 ParamGroup::kTextEncoder};

bool contains(const std::vector<ParamGroup>& gs, ParamGroup g) { return std::find(gs.begin(), gs.end(), g) != gs.end(); }

// Frozen parameters stop recording gradients for the duration of a stage.
class FreezeGuard {
public:
    FreezeGuard(SyncFlowModel& model, const std::vector<ParamGroup>& frozen)
    {
        for (auto g : frozen)
            for (auto& [name, p] : model.parameters(g)) {
                if (!p->requires_grad()) continue;
                p->set_requires_grad(false);
                touched_.push_back(p);
            }
    }
    ~FreezeGuard()
    {
        for (Tensor* p : touched_) p->set_requires_grad(true);
    }
    FreezeGuard(const FreezeGuard&) = delete;
    FreezeGuard& operator=(const FreezeGuard&) = delete;

private:
    std::vector<Tensor*> touched_;
};

Tensor normal_like(const Shape& shape, DType dtype, Rng& rng)
{
    Tensor t(shape, dtype);
    for (std::int64_t i = 0; i < t.numel(); ++i) t.set(i, rng.normal());
    return t;
}

Tensor stack(const std::vector<Tensor>& items, const std::vector<std::size_t>& idx)
{
    std::vector<Tensor> parts;
    parts.reserve(idx.size());
    for (auto i : idx) {
        Shape s = items.at(i).shape();
        s.insert(s.begin(), 1);
        parts.push_back(reshape(items[i], s));
    }
    return parts.size() == 1 ? parts[0].clone() : concat(parts, 0);
}

bool finite(double v) { return std::isfinite(v); }

std::string fmt(double v)
{
    if (std::isnan(v)) return "";
    std::ostringstream s;
    s.precision(9);
    s << v;
    return s.str();
}

} // namespace

const char* stage_name(Stage s)
{
    switch (s) {
    case Stage::kVideoPretrain: return "video";
    case Stage::kAudioAdapt: return "audio";
    default: return "joint";
    }
}

Stage parse_stage(const std::string& name)
{
    if (name == "video") return Stage::kVideoPretrain;
    if (name == "audio") return Stage::kAudioAdapt;
    if (name == "joint") return Stage::kJointFinetune;
    throw ConfigError("unknown stage '" + name + "' (expected video, audio or joint)");
}

std::vector<ParamGroup> default_trainable(Stage s)
{
    switch (s) {
    case Stage::kVideoPretrain: return {ParamGroup::kVideoTower, ParamGroup::kTextEncoder};
    case Stage::kAudioAdapt: return {ParamGroup::kAudioTower, ParamGroup::kAdaptors};
    default: return {ParamGroup::kVideoTower, ParamGroup::kAudioTower, ParamGroup::kAdaptors, ParamGroup::kTextEncoder};
    }
}

std::vector<ParamGroup> StageSpec::trainable_groups() const
{
    return trainable ? *trainable : default_trainable(stage);
}

std::vector<ParamGroup> StageSpec::frozen_groups() const
{
    const auto tr = trainable_groups();
    std::vector<ParamGroup> out;
    for (auto g : kAllGroups)
        if (!contains(tr, g)) out.push_back(g);
    return out;
}

void StageSpec::validate() const
{
    if (steps < 1) throw ConfigError("stage.steps must be >= 1");
    if (batch < 1) throw ConfigError("stage.batch must be >= 1");
    if (!(lr > 0)) throw ConfigError("stage.lr must be > 0");
    if (warmup_steps < 0) throw ConfigError("stage.warmup_steps must be >= 0");
    if (!(text_dropout >= 0 && text_dropout <= 1)) throw ConfigError("stage.text_dropout must lie in [0, 1]");
    if (!(lambda_video >= 0 && lambda_audio >= 0)) throw ConfigError("stage loss weights must be >= 0");
    if (eval_interval < 0) throw ConfigError("stage.eval_interval must be >= 0");
    const auto tr = trainable_groups();
    if (tr.empty()) throw ConfigError("stage has no trainable parameter group");
    if (stage == Stage::kAudioAdapt && contains(tr, ParamGroup::kVideoTower))
        throw ConfigError("the audio adaptation stage keeps the video tower frozen");
}

LatentDataset encode_dataset(const LatentCodec& codec, const std::vector<MediaPair>& clips)
{
    LatentDataset d;
    for (const auto& c : clips) {
        d.video.push_back(codec.encode_video(c.video));
        d.audio.push_back(codec.encode_audio(c.audio));
        d.captions.push_back(c.caption);
    }
    return d;
}

rfm::LatentPair gather(const LatentDataset& data, const std::vector<std::size_t>& items)
{
    return {stack(data.video, items), stack(data.audio, items)};
}

TrainState::TrainState(const TowerConfig& tower, const LatentCodec& c, std::uint64_t seed)
    : model(tower, Vocabulary::synthetic(), seed), codec(c), rng(seed ^ 0x5ca1ab1eULL)
{
}

std::string curve_csv(const std::vector<CurveRow>& rows)
{
    std::string out = "step,loss_video,loss_audio,val_loss_video,val_loss_audio\n";
    for (const auto& r : rows)
        out += std::to_string(r.step) + "," + fmt(r.loss_video) + "," + fmt(r.loss_audio) + "," + fmt(r.val_loss_video) +
               "," + fmt(r.val_loss_audio) + "\n";
    return out;
}

ValLoss validate(const SyncFlowModel& model, const LatentDataset& val, const ValidationSet& set)
{
    if (val.size() == 0) throw ContractError("validate: empty validation set");
    if (set.batch < 1 || set.t_grid.empty()) throw ConfigError("validation needs a batch size and a t grid");
    NoTapeScope no_tape;
    struct Entry {
        std::size_t item;
        std::size_t tj;
    };
    std::vector<Entry> entries;
    for (std::size_t i = 0; i < val.size(); ++i)
        for (std::size_t j = 0; j < set.t_grid.size(); ++j) entries.push_back({i, j});

    double sum_v = 0, sum_a = 0;
    bool have_v = false;
    for (std::size_t start = 0; start < entries.size(); start += static_cast<std::size_t>(set.batch)) {
        const std::size_t end = std::min(entries.size(), start + static_cast<std::size_t>(set.batch));
        std::vector<std::size_t> items;
        std::vector<double> t;
        std::vector<std::string> caps;
        std::vector<Tensor> nv, na;
        for (std::size_t k = start; k < end; ++k) {
            const auto& e = entries[k];
            items.push_back(e.item);
            t.push_back(set.t_grid[e.tj]);
            caps.push_back(val.captions[e.item]);
            const auto noise = rfm::prior_sample(set.noise_seed + e.item * set.t_grid.size() + e.tj, val.video[e.item].shape(),
                                                 val.audio[e.item].shape(), model.dtype());
            nv.push_back(noise.video);
            na.push_back(noise.audio);
        }
        std::vector<std::size_t> seq(items.size());
        for (std::size_t k = 0; k < seq.size(); ++k) seq[k] = k;
        const rfm::LatentPair x0{stack(nv, seq), stack(na, seq)};
        rfm::LatentPair x1 = gather(val, items);
        if (x1.video.dtype() != model.dtype()) x1 = {x1.video.to(model.dtype()), x1.audio.to(model.dtype())};
        const auto loss = rfm::fm_loss(model, x0, x1, t, model.encode_text(caps));
        const double n = static_cast<double>(end - start);
        if (loss.video.defined()) {
            sum_v += loss.video.item() * n;
            have_v = true;
        }
        sum_a += loss.audio.item() * n;
    }
    const double total = static_cast<double>(entries.size());
    return {have_v ? sum_v / total : kNaN, sum_a / total};
}

BatchDraw draw_batch(Rng& rng, const StageSpec& spec, const LatentDataset& train, DType dtype)
{
    const auto n = static_cast<std::uint64_t>(train.size());
    BatchDraw b;
    b.items.resize(static_cast<std::size_t>(spec.batch));
    for (auto& i : b.items) i = static_cast<std::size_t>(rng.below(n));
    b.t.resize(b.items.size());
    for (auto& v : b.t) v = rng.uniform();
    b.drop.resize(b.items.size());
    for (std::size_t i = 0; i < b.drop.size(); ++i) b.drop[i] = rng.uniform() < spec.text_dropout;

    auto load = [&] {
        rfm::LatentPair x = gather(train, b.items);
        if (x.video.dtype() != dtype) x = {x.video.to(dtype), x.audio.to(dtype)};
        return x;
    };
    b.x1 = load();
    b.x0 = {normal_like(b.x1.video.shape(), dtype, rng), normal_like(b.x1.audio.shape(), dtype, rng)};
    if (spec.ot_coupling && b.items.size() > 1) {
        const auto perm = rfm::ot_pair({b.x0.video, b.x0.audio}, {b.x1.video, b.x1.audio});
        std::vector<std::size_t> coupled(b.items.size());
        for (std::size_t i = 0; i < b.items.size(); ++i) coupled[i] = b.items[static_cast<std::size_t>(perm[i])];
        b.items = coupled;
        b.x1 = load();
    }
    for (auto i : b.items) b.captions.push_back(train.captions[i]);
    return b;
}

StageResult train_stage(TrainState& state, const StageSpec& spec, const LatentDataset& train, const LatentDataset& val,
                        const StageOptions& options)
{
    spec.validate();
    if (train.size() == 0) throw ContractError("train_stage: empty training set");
    SyncFlowModel& model = state.model;
    if (model.config().audio_only && spec.stage == Stage::kVideoPretrain)
        throw ConfigError("an audio-only model has no video tower to pretrain");

    const bool resume = !state.history.empty() && !state.history.back().completed && state.history.back().stage == spec.stage;
    if (!resume) {
        state.history.push_back({spec.stage, 0, spec.steps, false});
        state.optimizer = Adam(AdamConfig{spec.lr, 0.9, 0.999, 1e-8, spec.warmup_steps});
    }
    StageRecord& record = state.history.back();
    record.steps_planned = spec.steps;

    NamedParams trainable;
    for (auto g : spec.trainable_groups())
        for (auto& p : model.parameters(g)) trainable.push_back(p);
    const NamedParams all = model.parameters();
    FreezeGuard freeze(model, spec.frozen_groups());

    const rfm::LossParts parts = spec.stage == Stage::kVideoPretrain ? rfm::LossParts::kVideoOnly
                                 : spec.stage == Stage::kAudioAdapt  ? rfm::LossParts::kAudioOnly
                                                                     : rfm::LossParts::kBoth;

    StageResult result;
    double win_v = 0, win_a = 0;
    int win_n = 0;
    bool win_has_v = false, win_has_a = false;
    auto emit = [&](std::int64_t step) {
        CurveRow row;
        row.step = step;
        row.loss_video = win_n && win_has_v ? win_v / win_n : kNaN;
        row.loss_audio = win_n && win_has_a ? win_a / win_n : kNaN;
        const auto vl = validate(model, val, options.validation);
        row.val_loss_video = vl.video;
        row.val_loss_audio = vl.audio;
        result.curve.push_back(row);
        if (options.on_row) options.on_row(row);
        win_v = win_a = 0;
        win_n = 0;
        win_has_v = win_has_a = false;
    };
    if (!resume && val.size() > 0) emit(0);

    const DType dtype = model.dtype();
    while (record.steps_done < spec.steps) {
        if (options.stop_after > 0 && result.steps_run >= options.stop_after) {
            result.status = StageStatus::kStopped;
            return result;
        }
        const std::uint64_t rng_before = state.rng.state();

        const BatchDraw b = draw_batch(state.rng, spec, train, dtype);

        GradTape tape;
        double lv = kNaN, la = kNaN;
        Tensor objective;
        std::string failure;
        try {
            TapeScope scope(tape);
            const auto loss = rfm::fm_loss(model, b.x0, b.x1, b.t, model.encode_text(b.captions, b.drop), parts);
            if (loss.video.defined()) lv = loss.video.item();
            if (loss.audio.defined()) la = loss.audio.item();
            if (loss.video.defined() && loss.audio.defined())
                objective = add(scale(loss.video, spec.lambda_video), scale(loss.audio, spec.lambda_audio));
            else
                objective = loss.total;
            if (!finite(objective.item())) failure = "non-finite training loss";
            else tape.backward(objective);
        } catch (const NumericalError& e) {
            failure = e.what();
        }
        if (!failure.empty()) {
            zero_grads(all);
            state.rng.set_state(rng_before);
            result.status = StageStatus::kNumericalHalt;
            result.message = failure + " at stage step " + std::to_string(record.steps_done) + " (" + stage_name(spec.stage) + ")";
            return result;
        }
        for (bool d : b.drop) result.null_conditions_used += d ? 1 : 0;
        state.optimizer.step(trainable);
        zero_grads(all);

        if (finite(lv)) {
            win_v += lv;
            win_has_v = true;
        }
        if (finite(la)) {
            win_a += la;
            win_has_a = true;
        }
        ++win_n;
        ++record.steps_done;
        ++state.global_step;
        ++result.steps_run;
        const bool last = record.steps_done == spec.steps;
        if (val.size() > 0 && (last || (spec.eval_interval > 0 && record.steps_done % spec.eval_interval == 0)))
            emit(record.steps_done);
    }
    record.completed = true;
    result.status = StageStatus::kCompleted;
    return result;
}

int copy_parameters(SyncFlowModel& from, SyncFlowModel& to, const std::vector<ParamGroup>& groups)
{
    std::map<std::string, Tensor*> src;
    for (auto& [name, p] : from.parameters()) src[name] = p;
    int copied = 0;
    for (auto g : groups)
        for (auto& [name, p] : to.parameters(g)) {
            auto it = src.find(name);
            if (it == src.end() || it->second->shape() != p->shape()) continue;
            p->assign(*it->second);
            ++copied;
        }
    return copied;
}

// Checkpoints

std::string checkpoint_bytes(TrainState& state)
{
    const auto& ac = state.optimizer.config();
    Json history = Json::array();
    for (const auto& h : state.history)
        history.push_back(Json{{"stage", stage_name(h.stage)},
                               {"steps_done", h.steps_done},
                               {"steps_planned", h.steps_planned},
                               {"completed", h.completed}});
    const Json header{{"tower", to_json(state.model.config())},
                      {"codec", to_json(state.codec.config())},
                      {"vocab", state.model.text_encoder().vocab().words()},
                      {"dtype", state.model.dtype() == DType::kF32 ? "f32" : "f64"},
                      {"rng", state.rng.state()},
                      {"global_step", state.global_step},
                      {"adam",
                       {{"lr", ac.lr},
                        {"beta1", ac.beta1},
                        {"beta2", ac.beta2},
                        {"eps", ac.eps},
                        {"warmup_steps", ac.warmup_steps},
                        {"steps", state.optimizer.steps()}}},
                      {"history", history}};

    std::vector<std::pair<std::string, const Tensor*>> tensors;
    for (auto& [name, p] : state.model.parameters()) tensors.emplace_back("model/" + name, p);
    for (const auto& [name, mo] : state.optimizer.state()) {
        tensors.emplace_back("adam.m/" + name, &mo.m);
        tensors.emplace_back("adam.v/" + name, &mo.v);
    }
    for (auto& [name, p] : state.codec.parameters()) tensors.emplace_back(name, p);

    std::ostringstream out(std::ios::binary);
    out.write(kCheckpointMagic, 4);
    io::put_u16(out, kCheckpointVersion);
    io::put_string(out, header.dump());
    io::put_u32(out, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        io::put_string(out, name);
        io::write_tensor(out, *t);
    }
    return out.str();
}

void save_checkpoint(TrainState& state, const std::filesystem::path& path)
{
    io::atomic_write(path, checkpoint_bytes(state));
}

TrainState parse_checkpoint(const std::string& bytes, const TowerConfig* expected)
{
    std::istringstream in(bytes, std::ios::binary);
    char magic[4];
    if (!in.read(magic, 4)) throw FormatError("checkpoint truncated");
    if (std::string(magic, 4) != std::string(kCheckpointMagic, 4)) throw FormatError("not a checkpoint (bad magic)");
    Json header;
    std::map<std::string, Tensor> tensors;
    try {
        const auto version = io::get_u16(in);
        if (version != kCheckpointVersion)
            throw FormatError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                              std::to_string(kCheckpointVersion) + ")");
        header = Json::parse(io::get_string(in));
        const auto count = io::get_u32(in);
        for (std::uint32_t i = 0; i < count; ++i) {
            std::string name = io::get_string(in);
            tensors[name] = io::read_tensor(in);
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint header is corrupt: ") + e.what());
    } catch (const FormatError& e) {
        throw FormatError(std::string("checkpoint truncated or corrupt: ") + e.what());
    }
    if (in.peek() != std::char_traits<char>::eof()) throw FormatError("checkpoint has trailing bytes");

    TrainState state;
    try {
        const TowerConfig tower = tower_from_json(header.at("tower"));
        if (expected && !(tower == *expected))
            throw ConfigError("checkpoint tower configuration differs from the requested one:\n  checkpoint " +
                              to_json(tower).dump() + "\n  requested  " + to_json(*expected).dump());
        const CodecConfig codec = codec_from_json(header.at("codec"));
        state.model = SyncFlowModel(tower, Vocabulary(header.at("vocab").get<std::vector<std::string>>()), 0);
        if (header.at("dtype").get<std::string>() == "f64") state.model = state.model.converted(DType::kF64);
        state.codec = LatentCodec(codec, 0);
        state.rng.set_state(header.at("rng").get<std::uint64_t>());
        state.global_step = header.at("global_step").get<std::int64_t>();
        const auto& a = header.at("adam");
        state.optimizer = Adam(AdamConfig{a.at("lr").get<double>(), a.at("beta1").get<double>(), a.at("beta2").get<double>(),
                                          a.at("eps").get<double>(), a.at("warmup_steps").get<int>()});
        for (const auto& h : header.at("history"))
            state.history.push_back({parse_stage(h.at("stage").get<std::string>()), h.at("steps_done").get<std::int64_t>(),
                                     h.at("steps_planned").get<std::int64_t>(), h.at("completed").get<bool>()});

        auto take = [&](const std::string& key, Tensor& dst) {
            auto it = tensors.find(key);
            if (it == tensors.end()) throw FormatError("checkpoint is missing tensor '" + key + "'");
            if (it->second.shape() != dst.shape())
                throw FormatError("checkpoint tensor '" + key + "' has shape " + shape_str(it->second.shape()) + ", expected " +
                                  shape_str(dst.shape()));
            dst.assign(it->second);
            tensors.erase(it);
        };
        for (auto& [name, p] : state.model.parameters()) take("model/" + name, *p);
        for (auto& [name, p] : state.codec.parameters()) take(name, *p);
        std::map<std::string, Adam::Moments> moments;
        for (auto it = tensors.begin(); it != tensors.end();) {
            const std::string& key = it->first;
            if (key.rfind("adam.m/", 0) == 0) moments[key.substr(7)].m = it->second;
            else if (key.rfind("adam.v/", 0) == 0) moments[key.substr(7)].v = it->second;
            else throw FormatError("checkpoint has unexpected tensor '" + key + "'");
            it = tensors.erase(it);
        }
        for (const auto& [name, mo] : moments)
            if (!mo.m.defined() || !mo.v.defined()) throw FormatError("checkpoint optimizer state incomplete for '" + name + "'");
        state.optimizer.restore(a.at("steps").get<std::int64_t>(), std::move(moments));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint header is incomplete: ") + e.what());
    }
    return state;
}

TrainState load_checkpoint(const std::filesystem::path& path, const TowerConfig* expected)
{
    return parse_checkpoint(io::read_file(path), expected);
}

} // namespace syncflow::train
