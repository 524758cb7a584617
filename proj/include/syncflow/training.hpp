#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "syncflow/codec.hpp"
#include "syncflow/ddit.hpp"
#include "syncflow/optim.hpp"
#include "syncflow/rfm.hpp"

namespace syncflow::train {

enum class Stage { kVideoPretrain = 0, kAudioAdapt = 1, kJointFinetune = 2 };
const char* stage_name(Stage s); // video / audio / joint
Stage parse_stage(const std::string& name);
std::vector<ParamGroup> default_trainable(Stage s);

struct StageSpec {
    Stage stage = Stage::kVideoPretrain;
    std::int64_t steps = 1000;
    int batch = 8;
    double lr = 1e-3;
    int warmup_steps = 100;
    double text_dropout = 0.10;
    double lambda_video = 1.0;
    double lambda_audio = 1.0;
    bool ot_coupling = true;
    int eval_interval = 250; // train/val rows every this many steps; 0 = only at the ends
    // Unset means default_trainable(stage).
    std::optional<std::vector<ParamGroup>> trainable;

    std::vector<ParamGroup> trainable_groups() const;
    std::vector<ParamGroup> frozen_groups() const;
    void validate() const; // ConfigError
};

// Pre-encoded latents, one item per clip.
struct LatentDataset {
    std::vector<Tensor> video; // [T', C_z, H', W']
    std::vector<Tensor> audio; // [T_a, D_A]
    std::vector<std::string> captions;

    std::size_t size() const { return captions.size(); }
};

LatentDataset encode_dataset(const LatentCodec& codec, const std::vector<MediaPair>& clips);
// Stacks the chosen items into a batch.
rfm::LatentPair gather(const LatentDataset& data, const std::vector<std::size_t>& items);

struct StageRecord {
    Stage stage = Stage::kVideoPretrain;
    std::int64_t steps_done = 0;
    std::int64_t steps_planned = 0;
    bool completed = false;
};

// Everything that determines the rest of a training run.
struct TrainState {
    SyncFlowModel model;
    LatentCodec codec;
    Adam optimizer;
    Rng rng{0};
    std::int64_t global_step = 0;
    std::vector<StageRecord> history;

    TrainState() = default;
    TrainState(const TowerConfig& tower, const LatentCodec& codec, std::uint64_t seed);
};

struct CurveRow {
    std::int64_t step = 0; // step within the stage
    double loss_video = 0; // mean over the rows' window; NaN when not trained
    double loss_audio = 0;
    double val_loss_video = 0;
    double val_loss_audio = 0;
};

std::string curve_csv(const std::vector<CurveRow>& rows);

struct ValidationSet {
    std::vector<double> t_grid{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
    std::uint64_t noise_seed = 0x7a11d;
    int batch = 16;
};

struct ValLoss {
    double video = 0;
    double audio = 0;
};

// Mean squared velocity error over every (item, t) pair with full text
// conditioning. Pair (i, j) uses prior_sample(noise_seed + i * |t_grid| + j).
ValLoss validate(const SyncFlowModel& model, const LatentDataset& val, const ValidationSet& set = {});

// One training step's random draws, in this order from the state RNG: batch
// items, t per item, dropout per item, then video and audio noise. With OT the
// data items are reordered to their coupled noise.
struct BatchDraw {
    std::vector<std::size_t> items;
    std::vector<double> t;
    std::vector<bool> drop;
    rfm::LatentPair x0;
    rfm::LatentPair x1;
    std::vector<std::string> captions;
};

BatchDraw draw_batch(Rng& rng, const StageSpec& spec, const LatentDataset& train, DType dtype);

enum class StageStatus { kCompleted, kStopped, kNumericalHalt };

struct StageResult {
    StageStatus status = StageStatus::kCompleted;
    std::vector<CurveRow> curve;
    std::int64_t null_conditions_used = 0;
    std::int64_t steps_run = 0;
    std::string message;
};

struct StageOptions {
    ValidationSet validation;
    // Return early after this many steps of this call (resume tests); 0 = run to the end.
    std::int64_t stop_after = 0;
    std::function<void(const CurveRow&)> on_row;
};

// Runs (or resumes) one stage. A stage in progress in state.history is
// continued when its kind matches spec.stage; otherwise a new stage starts
// with a fresh optimizer. On a non-finite loss the update is skipped and the
// state is left as it was after the last good step.
StageResult train_stage(TrainState& state, const StageSpec& spec, const LatentDataset& train,
                        const LatentDataset& val, const StageOptions& options = {});

// Copies parameters with matching names and shapes; returns how many.
int copy_parameters(SyncFlowModel& from, SyncFlowModel& to, const std::vector<ParamGroup>& groups);

// SYCK: magic, u16 version, JSON header, then named SYTF tensors.
inline constexpr std::uint16_t kCheckpointVersion = 1;
std::string checkpoint_bytes(TrainState& state);
void save_checkpoint(TrainState& state, const std::filesystem::path& path);
// FormatError on bad magic/version/truncation. With `expected` set, a
// different tower configuration is a ConfigError.
TrainState parse_checkpoint(const std::string& bytes, const TowerConfig* expected = nullptr);
TrainState load_checkpoint(const std::filesystem::path& path, const TowerConfig* expected = nullptr);

} // namespace syncflow::train
