#include "syncflow/eval.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numbers>
#include <sstream>

#include <Eigen/Dense>

#include "json.hpp"

#include "syncflow/errors.hpp"
#include "syncflow/synthdata.hpp"

namespace syncflow::eval {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::vector<double> project(const std::vector<double>& raw, int dim, std::uint64_t seed)
{
    Rng rng(seed ^ (static_cast<std::uint64_t>(raw.size()) * 0x9e3779b97f4a7c15ULL));
    const double norm = 1.0 / std::sqrt(static_cast<double>(raw.size()));
    std::vector<double> out(static_cast<std::size_t>(dim), 0.0);
    for (auto& o : out)
        for (double r : raw) o += rng.normal() * norm * r;
    return out;
}

Eigen::MatrixXd to_matrix(const std::vector<std::vector<double>>& rows)
{
    const auto n = static_cast<Eigen::Index>(rows.size());
    const auto d = static_cast<Eigen::Index>(rows.front().size());
    Eigen::MatrixXd m(n, d);
    for (Eigen::Index i = 0; i < n; ++i) {
        if (static_cast<Eigen::Index>(rows[static_cast<std::size_t>(i)].size()) != d)
            throw ShapeError("frechet_distance: feature vectors differ in length");
        for (Eigen::Index j = 0; j < d; ++j) m(i, j) = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
    }
    return m;
}

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m)
{
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
    const Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

bool rank_deficient(const Eigen::MatrixXd& cov)
{
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov, Eigen::EigenvaluesOnly);
    const double hi = es.eigenvalues().maxCoeff();
    return !(es.eigenvalues().minCoeff() > 1e-12 * std::max(hi, 1e-300));
}

// Goertzel power at one frequency over the whole signal.
double tone_power(const std::vector<float>& x, double freq, int sample_rate)
{
    const double w = 2.0 * std::numbers::pi * freq / sample_rate;
    const double c = 2.0 * std::cos(w);
    double s1 = 0, s2 = 0;
    for (float v : x) {
        const double s0 = v + c * s1 - s2;
        s2 = s1;
        s1 = s0;
    }
    return s1 * s1 + s2 * s2 - c * s1 * s2;
}

double mean(const std::vector<double>& v)
{
    if (v.empty()) return 0;
    double s = 0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

} // namespace

void EvalConfig::validate() const
{
    if (!(hit_window_frames > 0)) throw ConfigError("eval.hit_window_frames must be > 0");
    if (fps < 1) throw ConfigError("eval.fps must be >= 1");
    if (feature_dim < 1) throw ConfigError("eval.feature_dim must be >= 1");
    if (sweep_samples < 1) throw ConfigError("eval.sweep_samples must be >= 1");
    for (double w : guidance_sweep)
        if (!(w >= 0)) throw ConfigError("eval.guidance_sweep weights must be >= 0");
}

std::vector<double> detect_audio_onsets(const AudioWave& wave, const OnsetParams& params)
{
    const auto hop = static_cast<std::size_t>(std::max(1L, std::lround(params.hop_seconds * wave.sample_rate)));
    const std::size_t frames = wave.samples.size() / hop;
    if (frames == 0) return {};
    std::vector<double> energy(frames, 0.0);
    for (std::size_t k = 0; k < frames; ++k) {
        double e = 0;
        for (std::size_t i = 0; i < hop; ++i) {
            const double v = wave.samples[k * hop + i];
            e += v * v;
        }
        energy[k] = e / static_cast<double>(hop);
    }
    std::vector<double> sorted = energy;
    std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(frames / 2), sorted.end());
    const double median = sorted[frames / 2];
    const double threshold = std::max(params.threshold_ratio * median, params.min_energy);

    std::vector<double> onsets;
    bool above_before = false;
    double last = -1e300;
    for (std::size_t k = 0; k < frames; ++k) {
        const bool above = energy[k] > threshold;
        const double t = static_cast<double>(k * hop) / wave.sample_rate;
        if (above && !above_before && t - last >= params.refractory_seconds) {
            onsets.push_back(t);
            last = t;
        }
        above_before = above;
    }
    return onsets;
}

ImpactDetection detect_visual_impacts(const VideoTensor& video, double brightness, int refractory)
{
    ImpactDetection out;
    out.rows.assign(static_cast<std::size_t>(video.frames), kNaN);
    std::vector<int> valid;
    for (std::int64_t f = 0; f < video.frames; ++f) {
        double wsum = 0, ysum = 0;
        for (std::int64_t y = 0; y < video.height; ++y)
            for (std::int64_t x = 0; x < video.width; ++x) {
                const double v = std::max({video.at(f, 0, y, x), video.at(f, 1, y, x), video.at(f, 2, y, x)});
                if (v <= brightness) continue;
                wsum += v;
                ysum += v * static_cast<double>(y);
            }
        if (wsum > 0) {
            out.rows[static_cast<std::size_t>(f)] = ysum / wsum;
            valid.push_back(static_cast<int>(f));
        } else {
            out.skipped_frames.push_back(static_cast<int>(f));
        }
    }
    if (valid.size() < 2) return out;

    double lo = 1e300, hi = -1e300;
    for (int f : valid) {
        lo = std::min(lo, out.rows[static_cast<std::size_t>(f)]);
        hi = std::max(hi, out.rows[static_cast<std::size_t>(f)]);
    }
    // Contact frames sit in the lower part of the observed vertical range.
    const double floor_band = hi - (0.4 * (hi - lo) + 1.0);
    constexpr double kRise = 0.25; // pixels
    // sampled rows stop short of the true contact row
    constexpr double kFloorMargin = 2.0;

    // A peak rises above the two frames before it (plateaus count once) and
    // is not clearly below the next frame. The last frame also owns contacts in
    // the following frame period, so a descending disc there counts when the
    // last three rows show a bounce (row acceleration turned upward) or their
    // parabola reaches the lowest observed row within one more frame.
    int last = -1000;
    for (std::size_t k = 0; k < valid.size(); ++k) {
        const int f = valid[k];
        const double y = out.rows[static_cast<std::size_t>(f)];
        if (y < floor_band) continue;
        auto row = [&](std::size_t i) { return out.rows[static_cast<std::size_t>(valid[i])]; };
        bool peak;
        if (k == 0) {
            peak = valid.size() > 1 && y > row(1) + kRise;
        } else {
            const double before = k >= 2 ? std::min(row(k - 1), row(k - 2)) : row(k - 1);
            const bool rise = y > before + kRise && y > row(k - 1) - kRise;
            if (k + 1 < valid.size()) {
                peak = rise && y + kRise >= row(k + 1);
            } else if (!rise || k < 2) {
                peak = false;
            } else {
                const double a = y - 2.0 * row(k - 1) + row(k - 2);
                const double v = y - row(k - 1) + 0.5 * a;
                peak = a < -kRise || y + v + 0.5 * a >= hi + kFloorMargin;
            }
        }
        if (!peak || f - last <= refractory) continue;
        out.frames.push_back(f);
        last = f;
    }
    return out;
}

SyncResult onset_sync_error(const std::vector<double>& onsets, const std::vector<double>& impacts, double duration,
                            double hit_window_seconds)
{
    struct Cand {
        double d;
        std::size_t i, j;
    };
    std::vector<Cand> cands;
    for (std::size_t i = 0; i < onsets.size(); ++i)
        for (std::size_t j = 0; j < impacts.size(); ++j) cands.push_back({std::abs(onsets[i] - impacts[j]), i, j});
    std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) { return a.d < b.d; });
    std::vector<bool> used_o(onsets.size()), used_i(impacts.size());
    SyncResult r;
    double total = 0;
    int hits = 0;
    for (const auto& c : cands) {
        if (used_o[c.i] || used_i[c.j]) continue;
        used_o[c.i] = used_i[c.j] = true;
        ++r.matched;
        total += c.d;
        if (c.d <= hit_window_seconds) ++hits;
    }
    r.unmatched = static_cast<int>(onsets.size() + impacts.size()) - 2 * r.matched;
    total += duration * r.unmatched;
    const int events = r.matched + r.unmatched;
    if (events == 0) return r;
    r.mean_error = total / events;
    r.hit_rate = static_cast<double>(hits) / events;
    return r;
}

SyncResult onset_sync_error(const VideoTensor& video, const AudioWave& audio, const EvalConfig& config)
{
    const auto det = detect_visual_impacts(video);
    std::vector<double> impacts;
    for (int f : det.frames) impacts.push_back(static_cast<double>(f) / config.fps);
    return onset_sync_error(detect_audio_onsets(audio), impacts, static_cast<double>(video.frames) / config.fps,
                            config.hit_window_frames / config.fps);
}

FrechetResult frechet_distance(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b)
{
    if (a.size() < 2 || b.size() < 2) throw ContractError("frechet_distance needs at least two samples per set");
    const Eigen::MatrixXd xa = to_matrix(a), xb = to_matrix(b);
    if (xa.cols() != xb.cols()) throw ShapeError("frechet_distance: feature dimensions differ");
    const Eigen::RowVectorXd ma = xa.colwise().mean(), mb = xb.colwise().mean();
    const Eigen::MatrixXd ca0 = xa.rowwise() - ma, cb0 = xb.rowwise() - mb;
    Eigen::MatrixXd ca = (ca0.transpose() * ca0) / static_cast<double>(xa.rows() - 1);
    Eigen::MatrixXd cb = (cb0.transpose() * cb0) / static_cast<double>(xb.rows() - 1);
    FrechetResult r;
    if (rank_deficient(ca) || rank_deficient(cb)) {
        const auto eye = Eigen::MatrixXd::Identity(ca.rows(), ca.cols());
        ca += 1e-6 * eye;
        cb += 1e-6 * eye;
        r.regularized = true;
    }
    // Tr sqrt(Sa^1/2 Sb Sa^1/2) is the nuclear norm of Sb^1/2 Sa^1/2; the SVD
    // route avoids squaring the small eigenvalues.
    const Eigen::MatrixXd m = psd_sqrt(cb) * psd_sqrt(ca);
    const double tr_sqrt = Eigen::JacobiSVD<Eigen::MatrixXd>(m).singularValues().sum();
    const double d = (ma - mb).squaredNorm() + ca.trace() + cb.trace() - 2.0 * tr_sqrt;
    r.distance = std::max(0.0, d);
    return r;
}

std::vector<double> video_features(const VideoTensor& video, int dim, std::uint64_t seed)
{
    std::vector<double> raw;
    const double px = static_cast<double>(video.height * video.width);
    for (std::int64_t f = 0; f < video.frames; ++f)
        for (std::int64_t c = 0; c < 3; ++c) {
            double s = 0;
            for (std::int64_t y = 0; y < video.height; ++y)
                for (std::int64_t x = 0; x < video.width; ++x) s += video.at(f, c, y, x);
            raw.push_back(s / px);
        }
    // motion-energy histogram over per-pixel frame differences
    constexpr int kBins = 8;
    std::vector<double> hist(kBins, 0.0);
    double count = 0;
    for (std::int64_t f = 1; f < video.frames; ++f)
        for (std::int64_t y = 0; y < video.height; ++y)
            for (std::int64_t x = 0; x < video.width; ++x) {
                double m = 0;
                for (std::int64_t c = 0; c < 3; ++c) m = std::max(m, static_cast<double>(std::abs(video.at(f, c, y, x) - video.at(f - 1, c, y, x))));
                hist[static_cast<std::size_t>(std::min(kBins - 1, static_cast<int>(m * kBins)))] += 1;
                count += 1;
            }
    for (double h : hist) raw.push_back(count > 0 ? h / count : 0.0);
    return project(raw, dim, seed);
}

std::vector<double> audio_features(const AudioWave& audio, int dim, std::uint64_t seed)
{
    constexpr std::size_t kFrame = 256;
    constexpr int kBands = 16;
    const std::size_t frames = audio.samples.size() / kFrame;
    const std::size_t bins = kFrame / 2 + 1;
    std::vector<double> window(kFrame), cosv(kFrame * bins), sinv(kFrame * bins);
    for (std::size_t n = 0; n < kFrame; ++n) window[n] = 0.5 * (1.0 - std::cos(2.0 * std::numbers::pi * n / kFrame));
    for (std::size_t k = 0; k < bins; ++k)
        for (std::size_t n = 0; n < kFrame; ++n) {
            const double a = 2.0 * std::numbers::pi * static_cast<double>(k * n) / kFrame;
            cosv[k * kFrame + n] = std::cos(a);
            sinv[k * kFrame + n] = std::sin(a);
        }
    // log-spaced band edges between 50 Hz and Nyquist
    const double nyq = audio.sample_rate / 2.0;
    std::vector<std::size_t> band_of(bins, kBands);
    for (std::size_t k = 0; k < bins; ++k) {
        const double hz = static_cast<double>(k) * audio.sample_rate / kFrame;
        if (hz < 50.0) continue;
        const double pos = std::log(hz / 50.0) / std::log(nyq / 50.0);
        band_of[k] = static_cast<std::size_t>(std::min(kBands - 1, static_cast<int>(pos * kBands)));
    }
    std::vector<double> bands(kBands, 0.0);
    std::vector<double> xw(kFrame);
    for (std::size_t f = 0; f < frames; ++f) {
        for (std::size_t n = 0; n < kFrame; ++n) xw[n] = audio.samples[f * kFrame + n] * window[n];
        for (std::size_t k = 0; k < bins; ++k) {
            if (band_of[k] >= static_cast<std::size_t>(kBands)) continue;
            double re = 0, im = 0;
            for (std::size_t n = 0; n < kFrame; ++n) {
                re += xw[n] * cosv[k * kFrame + n];
                im -= xw[n] * sinv[k * kFrame + n];
            }
            bands[band_of[k]] += re * re + im * im;
        }
    }
    std::vector<double> raw;
    for (double b : bands) raw.push_back(std::log(1e-8 + b / std::max<std::size_t>(frames, 1)));
    return project(raw, dim, seed + 1);
}

CaptionMatch caption_match(const VideoTensor& video, const AudioWave& audio, const std::string& caption)
{
    CaptionMatch m;
    double rgb[3] = {0, 0, 0};
    double count = 0;
    for (std::int64_t f = 0; f < video.frames; ++f)
        for (std::int64_t y = 0; y < video.height; ++y)
            for (std::int64_t x = 0; x < video.width; ++x) {
                const double r = video.at(f, 0, y, x), g = video.at(f, 1, y, x), b = video.at(f, 2, y, x);
                if (std::max({r, g, b}) <= 0.2) continue;
                rgb[0] += r;
                rgb[1] += g;
                rgb[2] += b;
                count += 1;
            }
    if (count == 0) {
        m.no_color = true;
    } else {
        const double n = std::sqrt(rgb[0] * rgb[0] + rgb[1] * rgb[1] + rgb[2] * rgb[2]);
        double best = -2;
        for (int c = 0; c < 3; ++c) {
            const auto ref = synth::disc_rgb(static_cast<BallColor>(c));
            const double rn = std::sqrt(ref[0] * ref[0] + ref[1] * ref[1] + ref[2] * ref[2]);
            const double cosine = (rgb[0] * ref[0] + rgb[1] * ref[1] + rgb[2] * ref[2]) / (n * rn);
            if (cosine > best) {
                best = cosine;
                m.video_color = c;
            }
        }
    }
    double best_power = 0;
    for (int c = 0; c < 3; ++c) {
        const double p = tone_power(audio.samples, tone_frequency(static_cast<BallColor>(c)), audio.sample_rate);
        if (p > best_power) {
            best_power = p;
            m.audio_color = c;
        }
    }
    m.impacts = static_cast<int>(detect_visual_impacts(video).frames.size());
    BallColor color;
    Speed speed;
    if (!parse_caption(caption, color, speed)) return m;
    const int want = static_cast<int>(color);
    m.color_hit = !m.no_color && m.video_color == want && m.audio_color == want;
    m.speed_hit = (m.impacts >= 3) == (speed == Speed::kFast);
    return m;
}

std::string EvalReport::to_json() const
{
    nlohmann::ordered_json j{{"onset_sync_error_mean", onset_sync_error_mean},
                             {"onset_sync_hit_rate", onset_sync_hit_rate},
                             {"frechet_audio", frechet_audio},
                             {"frechet_video", frechet_video},
                             {"frechet_regularized", frechet_regularized},
                             {"caption_color_acc", caption_color_acc},
                             {"caption_speed_acc", caption_speed_acc}};
    auto& recs = j["samples"] = nlohmann::ordered_json::array();
    for (const auto& s : samples)
        recs.push_back({{"name", s.name},
                        {"caption", s.caption},
                        {"sync_error", s.sync_error},
                        {"hit_rate", s.hit_rate},
                        {"color_hit", s.color_hit},
                        {"speed_hit", s.speed_hit},
                        {"impacts", s.impacts},
                        {"onsets", s.onsets},
                        {"skipped_frames", s.skipped_frames}});
    return j.dump(2) + "\n";
}

std::string EvalReport::summary() const
{
    std::ostringstream s;
    s << std::fixed << std::setprecision(4) << "n=" << samples.size() << " sync_error=" << onset_sync_error_mean
      << "s hit_rate=" << onset_sync_hit_rate << " frechet_audio=" << frechet_audio << " frechet_video=" << frechet_video
      << " color_acc=" << caption_color_acc << " speed_acc=" << caption_speed_acc;
    if (frechet_regularized) s << " (covariance regularized)";
    return s.str();
}

EvalReport evaluate(const std::vector<NamedClip>& generated, const std::vector<NamedClip>& reference, const EvalConfig& config)
{
    config.validate();
    if (generated.empty()) throw ContractError("evaluate: no generated clips");
    EvalReport rep;
    std::vector<double> errs, hits;
    double color = 0, speed = 0;
    std::vector<std::vector<double>> ga, gv, ra, rv;
    for (const auto& c : generated) {
        SampleRecord r;
        r.name = c.name;
        r.caption = c.pair.caption;
        const auto det = detect_visual_impacts(c.pair.video);
        std::vector<double> impacts;
        for (int f : det.frames) impacts.push_back(static_cast<double>(f) / config.fps);
        const auto onsets = detect_audio_onsets(c.pair.audio);
        const auto sync = onset_sync_error(onsets, impacts, static_cast<double>(c.pair.video.frames) / config.fps,
                                           config.hit_window_frames / config.fps);
        const auto cm = caption_match(c.pair.video, c.pair.audio, c.pair.caption);
        r.sync_error = sync.mean_error;
        r.hit_rate = sync.hit_rate;
        r.color_hit = cm.color_hit;
        r.speed_hit = cm.speed_hit;
        r.impacts = static_cast<int>(impacts.size());
        r.onsets = static_cast<int>(onsets.size());
        r.skipped_frames = static_cast<int>(det.skipped_frames.size());
        errs.push_back(r.sync_error);
        hits.push_back(r.hit_rate);
        color += cm.color_hit;
        speed += cm.speed_hit;
        rep.samples.push_back(r);
        ga.push_back(audio_features(c.pair.audio, config.feature_dim, config.feature_seed));
        gv.push_back(video_features(c.pair.video, config.feature_dim, config.feature_seed));
    }
    for (const auto& c : reference) {
        ra.push_back(audio_features(c.pair.audio, config.feature_dim, config.feature_seed));
        rv.push_back(video_features(c.pair.video, config.feature_dim, config.feature_seed));
    }
    const double n = static_cast<double>(generated.size());
    rep.onset_sync_error_mean = mean(errs);
    rep.onset_sync_hit_rate = mean(hits);
    rep.caption_color_acc = color / n;
    rep.caption_speed_acc = speed / n;
    if (ga.size() >= 2 && ra.size() >= 2) {
        const auto fa = frechet_distance(ga, ra);
        const auto fv = frechet_distance(gv, rv);
        rep.frechet_audio = fa.distance;
        rep.frechet_video = fv.distance;
        rep.frechet_regularized = fa.regularized || fv.regularized;
    }
    return rep;
}

double mean_abs_diff(const Tensor& a, const Tensor& b)
{
    if (a.shape() != b.shape()) throw ShapeError("mean_abs_diff: shapes differ");
    double s = 0;
    for (std::int64_t i = 0; i < a.numel(); ++i) s += std::abs(a.at(i) - b.at(i));
    return a.numel() ? s / static_cast<double>(a.numel()) : 0.0;
}

MediaPair decode_item(const LatentCodec& codec, const rfm::LatentPair& batch, std::int64_t item, const std::string& caption,
                      int sample_rate)
{
    auto take = [&](const Tensor& t) {
        Shape s(t.shape().begin() + 1, t.shape().end());
        return reshape(slice(t, 0, item, 1), s);
    };
    MediaPair p;
    p.caption = caption;
    p.video = codec.decode_video(take(batch.video));
    p.audio = codec.decode_audio(take(batch.audio), sample_rate);
    return p;
}

std::vector<SweepRow> guidance_sweep(const SyncFlowModel& model, const LatentCodec& codec,
                                     const std::vector<std::string>& captions, const std::vector<double>& weights, int steps,
                                     std::uint64_t seed, const std::vector<NamedClip>& reference, const EvalConfig& config)
{
    if (captions.empty()) throw ContractError("guidance_sweep: no captions");
    auto run = [&](double w) {
        std::vector<rfm::SampleRequest> reqs;
        for (std::size_t i = 0; i < captions.size(); ++i) {
            rfm::SampleRequest r;
            r.caption = captions[i];
            r.guidance = w;
            r.steps = steps;
            r.seed = seed + i;
            reqs.push_back(r);
        }
        return rfm::sample(model, reqs);
    };
    const auto base = run(0.0);
    std::vector<SweepRow> rows;
    for (double w : weights) {
        const auto out = w == 0.0 ? base : run(w);
        SweepRow row;
        row.guidance = w;
        row.mean_abs_latent_diff = 0.5 * (mean_abs_diff(out.video, base.video) + mean_abs_diff(out.audio, base.audio));
        std::vector<NamedClip> clips;
        for (std::size_t i = 0; i < captions.size(); ++i)
            clips.push_back({"w" + std::to_string(w) + "_" + std::to_string(i),
                             decode_item(codec, out, static_cast<std::int64_t>(i), captions[i])});
        row.report = evaluate(clips, reference, config);
        rows.push_back(std::move(row));
    }
    return rows;
}

std::string sweep_table(const std::vector<SweepRow>& rows)
{
    std::ostringstream s;
    s << "guidance,sync_error,hit_rate,frechet_audio,frechet_video,color_acc,speed_acc,latent_diff_vs_w0\n";
    s << std::setprecision(6);
    for (const auto& r : rows)
        s << r.guidance << "," << r.report.onset_sync_error_mean << "," << r.report.onset_sync_hit_rate << ","
          << r.report.frechet_audio << "," << r.report.frechet_video << "," << r.report.caption_color_acc << ","
          << r.report.caption_speed_acc << "," << r.mean_abs_latent_diff << "\n";
    return s.str();
}

} // namespace syncflow::eval
