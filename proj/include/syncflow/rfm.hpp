#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "syncflow/ddit.hpp"

namespace syncflow::rfm {

struct LatentPair {
    Tensor video; // [B, T', C_z, H', W']
    Tensor audio; // [B, T_a, D_A]
};

// x_t = (1 - t) x0 + t x1, with one t per leading-axis item (or a single t).
Tensor interpolate(const Tensor& x0, const Tensor& x1, const std::vector<double>& t);
Tensor interpolate(const Tensor& x0, const Tensor& x1, double t);
// v = x1 - x0
Tensor velocity_target(const Tensor& x0, const Tensor& x1);

// Exact min-cost assignment for a square cost matrix (row-major n*n);
// returns col[row].
std::vector<std::int64_t> hungarian(const std::vector<double>& cost, std::int64_t n);
// perm[i] is the data item paired with noise item i; items are flattened
// along everything but the leading axis and the modalities are concatenated.
std::vector<std::int64_t> ot_pair(const std::vector<Tensor>& noise, const std::vector<Tensor>& data);
double coupling_cost(const std::vector<Tensor>& noise, const std::vector<Tensor>& data,
                     const std::vector<std::int64_t>& perm);

struct FmLoss {
    Tensor total; // squared error summed over both modalities / element count
    Tensor video; // mean over video elements (undefined when not computed)
    Tensor audio;
};

enum class LossParts { kBoth, kVideoOnly, kAudioOnly };

// x0 must already be coupled to x1 item by item. With kAudioOnly the video
// tower runs without recording gradients and only conditions the audio tower.
FmLoss fm_loss(const SyncFlowModel& model, const LatentPair& x0, const LatentPair& x1, const std::vector<double>& t,
               const TextBatch& text, LossParts parts = LossParts::kBoth);

// u_uncond + w (u_cond - u_uncond), evaluated as (1 - w) u_uncond + w u_cond
// so both endpoints are reproduced exactly.
Tensor cfg_combine(const Tensor& cond, const Tensor& uncond, double w);
DualVelocity cfg_velocity(const DualVelocity& cond, const DualVelocity& uncond, double w);

enum class SampleMode { kT2AV, kV2AInversion, kAudioOnly };
const char* sample_mode_name(SampleMode m);
SampleMode parse_sample_mode(const std::string& name);

struct SampleRequest {
    std::string caption;
    double guidance = 6.0;
    int steps = 50;
    std::uint64_t seed = 0;
    SampleMode mode = SampleMode::kT2AV;
    // Latent grid; 0 uses the model's training grid.
    std::int64_t latent_height = 0;
    std::int64_t latent_width = 0;
    // Ground-truth video latent [T', C_z, H', W'] for V2A inversion.
    Tensor video_latent;
};

// Called before each velocity evaluation with the state the model sees.
using StepObserver = std::function<void(int step, double t, const LatentPair& state)>;
// Guided velocity of the whole batch at time t.
using VelocityField = std::function<DualVelocity(const LatentPair& state, double t)>;

// Euler integration from t = 0 to 1 with t_k = k / N. The displacement is
// accumulated in double as x_k = x0 + (sum of velocities) / N, the same
// recurrence as x += v / N without the per-step rounding. If video_anchor is
// set, the video state is replaced by interpolate(x0_v, anchor, t_k) before
// every evaluation and the final video equals the anchor.
LatentPair euler_integrate(const VelocityField& field, const LatentPair& x0, int steps,
                           const Tensor* video_anchor = nullptr, const StepObserver& observer = {});

// Standard-normal prior draw: video first, then audio, from splitmix64(seed).
LatentPair prior_sample(std::uint64_t seed, const Shape& video_item, const Shape& audio_item, DType dtype);

// Samples a batch of requests that share guidance, steps, mode and grid.
LatentPair sample(const SyncFlowModel& model, const std::vector<SampleRequest>& requests,
                  const StepObserver& observer = {});
LatentPair euler_sample(const SyncFlowModel& model, const SampleRequest& request);
LatentPair v2a_inversion_sample(const SyncFlowModel& model, const SampleRequest& request);

} // namespace syncflow::rfm
