#include "b2lora/combiner.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

#include "dsp.hpp"

namespace b2lora::combine {

namespace {

constexpr double kTwoPi = 2 * std::numbers::pi;
constexpr double kDecodeSerLimit = 0.01;  // decoded := SER below one percent
constexpr double kAdmitTolDb = 0.25;      // quality dip still counted as a tie

double nan_value() { return std::numeric_limits<double>::quiet_NaN(); }

}  // namespace

std::vector<std::complex<double>> coherent_combine(
    const std::vector<std::vector<std::complex<double>>>& packets) {
    if (packets.empty()) return {};
    const std::size_t len = packets.front().size();
    for (const auto& p : packets)
        if (p.size() != len) throw std::invalid_argument("coherent_combine: length mismatch");
    std::vector<std::complex<double>> out(len, {0, 0});
    for (const auto& p : packets)
        for (std::size_t i = 0; i < len; ++i) out[i] += p[i];
    const double scale = 1.0 / packets.size();
    for (auto& v : out) v *= scale;
    return out;
}

ResidualReport residual_correction(std::vector<std::complex<double>>& frame,
                                   const LoraConfig& cfg, double max_spread_bins,
                                   double max_slope_hz_s) {
    cfg.validate();
    if (frame.size() < static_cast<std::size_t>(cfg.block_samples()))
        throw std::invalid_argument("residual_correction: frame shorter than the known prefix");

    const int spc = cfg.samples_per_chirp();
    const int chips = cfg.chips();
    const int osf = cfg.oversample();
    const double fs = cfg.sample_rate_hz;
    const double bin_hz = cfg.bin_width_hz();

    // One fractional-bin measurement per hop-free known chirp: up-chirps
    // read (freq - time), down-chirps (freq + time), both drifting
    // linearly. Sync chirps are skipped: their intra-chirp hop carries a
    // phase step that skews the apparent fractional bin, and they sit at
    // maximum leverage for the rate fit.
    struct Obs {
        double t;     // chirp center, seconds from frame start
        double bins;  // wrapped fractional peak bin
        double sgn;   // -1 for up-chirp time term, +1 for down
    };
    std::vector<Obs> obs;
    auto measure = [&](int offset, bool up) {
        auto folded = dechirp_window(
            cfg, {frame.data() + offset, static_cast<std::size_t>(spc)}, up);
        std::size_t pk = dsp::peak_index(folded);
        double bins = dsp::wrap_bins(dsp::dirichlet_peak_bin(folded, pk), chips);
        obs.push_back({(offset + 0.5 * spc) / fs, bins, up ? -1.0 : 1.0});
    };
    const int n_up = cfg.preamble_len + cfg.sync_len;
    for (int k = 0; k < cfg.preamble_len; ++k) measure(k * spc, true);
    const int n_down = cfg.sfd_samples() / spc;
    for (int j = 0; j < n_down; ++j) measure((n_up + j) * spc, false);

    // Payload chirps carry the same drift in the fractional part of their
    // peak: the unknown symbol moves the integer part only. Each payload
    // window therefore contributes a mod-1 observation on the up-chirp
    // line; without them the rate fitted on the short prefix would be
    // extrapolated across a payload several times longer, where even a
    // small rate error walks the tones across a bin boundary. They are
    // only worth folding in when that extrapolation could actually move a
    // tone: when even the largest admissible rate stays under a fraction
    // of a bin across the frame, the payload fractions add measurement
    // noise without constraining anything.
    const double frame_duration_s = cfg.frame_samples() / fs;
    const double lever_bins = max_slope_hz_s / bin_hz * frame_duration_s;
    const double kPayloadLeverMinBins = 0.25;
    struct PayObs {
        double t;
        double frac;
        double bins;
    };
    std::vector<PayObs> pay;
    if (lever_bins > kPayloadLeverMinBins &&
        frame.size() >= static_cast<std::size_t>(cfg.frame_samples())) {
        for (int k = 0; k < cfg.payload_len; ++k) {
            int offset = cfg.payload_offset() + k * spc;
            auto folded = dechirp_window(
                cfg, {frame.data() + offset, static_cast<std::size_t>(spc)}, true);
            std::size_t pk = dsp::peak_index(folded);
            double frac = dsp::dirichlet_peak_bin(folded, pk) - static_cast<double>(pk);
            pay.push_back({(offset + 0.5 * spc) / fs, frac, 0});
        }
    }

    // Unwrap each chirp type against its predecessor; the sequences move
    // by fractions of a bin chirp to chirp even when the absolute offset
    // is large.
    auto unwrap_chain = [&](double sgn) {
        double prev = 0;
        bool first = true;
        for (auto& o : obs) {
            if (o.sgn != sgn) continue;
            if (!first) o.bins = prev + dsp::wrap_bins(o.bins - prev, chips);
            prev = o.bins;
            first = false;
        }
    };
    unwrap_chain(-1.0);
    unwrap_chain(+1.0);

    // The up-chirps identify the rate on their own; the down-chirps sit
    // in one time cluster at the end, and letting them pull the rate
    // makes rate and time nearly collinear, dumping measurement noise on
    // both. Fit the up line bins(t) = a_up + r*t first, then read the
    // up/down split from the rate-corrected down mean: a_up = f0 - T,
    // a_down = f0 + T.
    double su_1 = 0, su_t = 0, su_tt = 0, bu_1 = 0, bu_t = 0;
    for (const auto& o : obs) {
        if (o.sgn > 0) continue;
        su_1 += 1;
        su_t += o.t;
        su_tt += o.t * o.t;
        bu_1 += o.bins;
        bu_t += o.bins * o.t;
    }
    double det = su_1 * su_tt - su_t * su_t;
    if (std::abs(det) < 1e-12) return {};
    double r = (su_1 * bu_t - su_t * bu_1) / det;
    const double r_max = max_slope_hz_s / bin_hz;
    r = std::clamp(r, -r_max, r_max);
    // Least-squares intercept with the rate pinned; equals the joint fit
    // when the clamp is inactive.
    double a_up = (bu_1 - r * su_t) / su_1;

    // Fold the payload observations in: predict each window from the
    // previous one (adjacent windows drift by far less than a bin, so the
    // nearest congruent value is unambiguous), then refit the line over
    // prefix and payload together. A second pass re-unwraps against the
    // improved rate, and a final pass drops payload windows still sitting
    // far off the line: the intra-chirp hop splits a window into short
    // segments whose leakage can swamp the neighbor-ratio estimate, and
    // those windows read as large symmetric scatter rather than drift.
    const double kPayloadTrimBins = 0.2;
    for (int pass = 0; pass < 3 && !pay.empty(); ++pass) {
        if (pass < 2) {
            double prev_t = 0, prev_b = 0;
            bool first = true;
            for (auto& p : pay) {
                double pred = first ? a_up + r * p.t : prev_b + r * (p.t - prev_t);
                double d = p.frac - pred;
                d -= std::round(d);
                p.bins = pred + d;
                prev_t = p.t;
                prev_b = p.bins;
                first = false;
            }
        }
        double s1 = su_1, st = su_t, stt = su_tt, b1 = bu_1, bt = bu_t;
        for (const auto& p : pay) {
            if (pass == 2 && std::abs(p.bins - (a_up + r * p.t)) > kPayloadTrimBins) continue;
            s1 += 1;
            st += p.t;
            stt += p.t * p.t;
            b1 += p.bins;
            bt += p.bins * p.t;
        }
        double det2 = s1 * stt - st * st;
        if (std::abs(det2) < 1e-12) break;
        r = std::clamp((s1 * bt - st * b1) / det2, -r_max, r_max);
        a_up = (b1 - r * st) / s1;
    }
    for (const auto& p : pay)
        if (std::abs(p.bins - (a_up + r * p.t)) <= kPayloadTrimBins)
            obs.push_back({p.t, p.bins, -1.0});

    double f0 = a_up;
    double tbins = 0;
    if (n_down >= 1) {
        double a_down = 0;
        for (const auto& o : obs)
            if (o.sgn > 0) a_down += (o.bins - r * o.t) / n_down;
        f0 = (a_up + a_down) / 2;
        tbins = (a_down - a_up) / 2;
    }

    // The up/down half-sum is ambiguous by chips/2; take the branch with
    // the smaller time residue.
    if (std::abs(tbins) > chips / 4.0) {
        double shift = tbins > 0 ? chips / 2.0 : -chips / 2.0;
        tbins -= shift;
        f0 += shift;  // sign balances: up-chirps see f0 - T, downs f0 + T
    }

    ResidualReport rep;
    rep.freq_hz = f0 * bin_hz;
    rep.slope_hz_s = r * bin_hz;
    rep.time_samples = tbins * osf;
    double spread = 0;
    for (const auto& o : obs)
        spread = std::max(spread, std::abs(dsp::wrap_bins(
                                      o.bins - (f0 + r * o.t + o.sgn * tbins), chips)));
    rep.bin_spread = spread;
    if (spread > max_spread_bins) return rep;

    for (std::size_t i = 0; i < frame.size(); ++i) {
        double t = i / fs;
        frame[i] *= std::polar(1.0, -kTwoPi * (rep.freq_hz * t + 0.5 * rep.slope_hz_s * t * t));
    }
    if (std::abs(rep.time_samples) > 1e-6)
        frame = dsp::extract_at(frame, rep.time_samples, static_cast<int>(frame.size()));
    rep.applied = true;
    return rep;
}

double prefix_peak_ratio_db(std::span<const std::complex<double>> frame, const LoraConfig& cfg) {
    cfg.validate();
    const auto block = static_cast<std::size_t>(cfg.block_samples());
    if (frame.size() < block)
        throw std::invalid_argument("prefix_peak_ratio_db: frame shorter than the known prefix");
    LoraConfig prefix_cfg = cfg;
    prefix_cfg.payload_len = 0;
    IqSignal prefix = modulate_packet(prefix_cfg, {});

    std::vector<std::complex<double>> prod(block);
    for (std::size_t i = 0; i < block; ++i) prod[i] = frame[i] * std::conj(prefix.samples[i]);
    std::vector<std::complex<double>> spec;
    dsp::fft(prod, spec);
    std::size_t pk = dsp::peak_index(spec);
    double floor_power = dsp::offpeak_mean_power(spec, pk, 64);
    if (floor_power <= 0) return 0;
    return 10 * std::log10(std::norm(spec[pk]) / floor_power);
}

double frame_peak_ratio_db(std::span<const std::complex<double>> frame, const LoraConfig& cfg) {
    cfg.validate();
    if (frame.size() < static_cast<std::size_t>(cfg.frame_samples()))
        throw std::invalid_argument("frame_peak_ratio_db: frame shorter than one frame");
    const int spc = cfg.samples_per_chirp();
    const int n_up = cfg.preamble_len + cfg.sync_len;
    const int n_down = cfg.sfd_samples() / spc;
    constexpr std::size_t kGuard = 4;
    double sum_db = 0;
    int n_windows = 0;
    auto score = [&](long long offset, bool up) {
        auto folded = dechirp_window(
            cfg, {frame.data() + offset, static_cast<std::size_t>(spc)}, up);
        std::size_t pk = dsp::peak_index(folded);
        double floor_power = dsp::offpeak_mean_power(folded, pk, kGuard);
        if (floor_power <= 0) return;
        sum_db += 10 * std::log10(std::norm(folded[pk]) / floor_power);
        ++n_windows;
    };
    for (int k = 0; k < n_up; ++k) score(static_cast<long long>(k) * spc, true);
    for (int j = 0; j < n_down; ++j) score(static_cast<long long>(n_up + j) * spc, false);
    for (int k = 0; k < cfg.payload_len; ++k)
        score(cfg.payload_offset() + static_cast<long long>(k) * spc, true);
    return n_windows ? sum_db / n_windows : 0.0;
}

double estimate_snr_gain_db(const std::vector<std::vector<std::complex<double>>>& before,
                            std::span<const std::complex<double>> after, const LoraConfig& cfg) {
    if (before.empty()) return 0;
    double best = -std::numeric_limits<double>::infinity();
    for (const auto& p : before) best = std::max(best, prefix_peak_ratio_db(p, cfg));
    return prefix_peak_ratio_db(after, cfg) - best;
}

const char* method_name(Method m) {
    switch (m) {
        case Method::b2lora: return "b2lora";
        case Method::lora_baseline: return "lora-baseline";
        case Method::combine_no_freq_align: return "combine-no-freq-align";
        case Method::b2lora_no_phase: return "b2lora-no-phase";
    }
    return "unknown";
}

std::optional<Method> method_from_name(const std::string& name) {
    for (Method m : {Method::b2lora, Method::lora_baseline, Method::combine_no_freq_align,
                     Method::b2lora_no_phase})
        if (name == method_name(m)) return m;
    return std::nullopt;
}

PipelineOptions PipelineOptions::for_method(Method m) {
    PipelineOptions opt;
    switch (m) {
        case Method::b2lora:
            break;
        case Method::lora_baseline:
            opt.joint_inference = false;
            opt.block_chirps = 1;
            opt.max_packets = 1;
            opt.freq_align = false;
            opt.slope_align = false;
            opt.phase_align = false;
            break;
        case Method::combine_no_freq_align:
            opt.freq_align = false;
            opt.slope_align = false;
            break;
        case Method::b2lora_no_phase:
            opt.phase_align = false;
            break;
    }
    return opt;
}

namespace {

CombineReport joint_pipeline(const IqSignal& capture, const LoraConfig& cfg,
                             int n_transmissions, double tau_s, double slope_max_hz_s,
                             const PipelineOptions& opt, const SymbolSeq& reference,
                             ScanCache* cache) {
    CombineReport rep;
    const double block = opt.block_chirps > 0 ? opt.block_chirps : cfg.block_chirps();
    const int stride = opt.stride > 0 ? opt.stride : cfg.samples_per_chirp() / 4;
    const detect::PeakSeries* series = nullptr;
    detect::PeakSeries local;
    if (cache && cache->valid && cache->block_chirps == block && cache->stride == stride) {
        series = &cache->series;
    } else {
        local = detect::chaining_dechirp_scan(capture, cfg, block, stride);
        if (cache) {
            cache->series = std::move(local);
            cache->block_chirps = block;
            cache->stride = stride;
            cache->valid = true;
            series = &cache->series;
        } else {
            series = &local;
        }
    }
    auto map = detect::build_heatmap(*series, tau_s);
    detect::denoise(map, opt.denoise_k);
    auto fit = detect::fit_packet_line(map, 5e-3, opt.line_accept_factor);
    if (!fit.accepted) {
        rep.ser = nan_value();
        rep.failure = "no-detection";
        return rep;
    }
    auto events = detect::line_arrivals(map, fit);

    align::AlignOptions ao;
    ao.freq_align = opt.freq_align;
    ao.slope_align = opt.slope_align;
    ao.phase_align = opt.phase_align;
    ao.max_packets = opt.max_packets;
    ao.phase_candidates = opt.phase_candidates;
    auto aligned = align::align_all(capture, cfg, events, slope_max_hz_s, ao);

    rep.detected = static_cast<int>(aligned.confirmed_periods.size());
    rep.prr = n_transmissions > 0 ? static_cast<double>(rep.detected) / n_transmissions : 0;
    rep.excluded = aligned.excluded;
    if (aligned.packets.empty()) {
        rep.ser = nan_value();
        rep.failure = "no-confirmation";
        return rep;
    }

    std::vector<std::vector<std::complex<double>>> buffers;
    buffers.reserve(aligned.packets.size());
    for (const auto& p : aligned.packets) buffers.push_back(p.samples);

    // Packets arrive quality-sorted. Each copy is admitted only if the
    // measured whole-frame quality of the running sum does not drop, so a
    // copy whose misalignment erodes the demodulation margin is skipped
    // while the later, well-aligned copies stay eligible. The tolerance
    // admits ties, which is all a good copy adds once the floor is
    // leakage-limited rather than noise-limited.
    std::vector<std::complex<double>> running(buffers[0].size(), 0.0);
    std::vector<std::vector<std::complex<double>>> admitted;
    std::vector<std::complex<double>> combined;
    double cur_ratio = 0;
    for (auto& buf : buffers) {
        const auto n = static_cast<double>(admitted.size() + 1);
        std::vector<std::complex<double>> mean(running.size());
        for (std::size_t i = 0; i < running.size(); ++i)
            mean[i] = (running[i] + buf[i]) / n;
        double ratio = frame_peak_ratio_db(mean, cfg);
        if (admitted.empty() || ratio >= cur_ratio - kAdmitTolDb) {
            for (std::size_t i = 0; i < running.size(); ++i) running[i] += buf[i];
            admitted.push_back(std::move(buf));
            combined = std::move(mean);
            cur_ratio = ratio;
        }
    }
    rep.n_combined = static_cast<int>(admitted.size());
    if (rep.n_combined > 1) rep.snr_gain_db = estimate_snr_gain_db(admitted, combined, cfg);

    rep.residual = residual_correction(combined, cfg, 2.0, slope_max_hz_s);

    IqSignal frame;
    frame.samples = std::move(combined);
    frame.sample_rate_hz = cfg.sample_rate_hz;
    rep.symbols = demodulate(cfg, frame);
    if (!reference.empty()) {
        rep.ser = symbol_error_rate(reference, rep.symbols);
        rep.decoded = rep.ser < kDecodeSerLimit;
    } else {
        rep.ser = nan_value();
    }
    return rep;
}

CombineReport baseline_pipeline(const IqSignal& capture, const LoraConfig& cfg,
                                int n_transmissions, double tau_s, double slope_max_hz_s,
                                const SymbolSeq& reference) {
    CombineReport rep;
    auto events = detect::single_chirp_detect(capture, cfg, tau_s);
    rep.detected = static_cast<int>(events.size());
    rep.prr = n_transmissions > 0 ? static_cast<double>(rep.detected) / n_transmissions : 0;
    if (events.empty()) {
        rep.ser = nan_value();
        rep.failure = "no-detection";
        return rep;
    }

    // Conventional single-packet receive: frame sync, its own residual
    // correction, demodulation; the best packet of the pass is scored.
    const int spc = cfg.samples_per_chirp();
    const int frame_len = cfg.frame_samples();
    const double fs = cfg.sample_rate_hz;
    bool any = false;
    double best_ser = std::numeric_limits<double>::infinity();
    SymbolSeq best_symbols;
    ResidualReport best_residual;
    for (const auto& ev : events) {
        auto sync = detect::frame_sync(capture, cfg, ev.coarse_time_s * fs, spc);
        if (!sync) continue;
        if (sync->start_sample < 1 ||
            sync->start_sample + frame_len + 1 > static_cast<double>(capture.samples.size()))
            continue;
        auto frame = dsp::extract_at(capture.samples, sync->start_sample, frame_len);
        auto residual = residual_correction(frame, cfg, 2.0, slope_max_hz_s);
        IqSignal pkt;
        pkt.samples = std::move(frame);
        pkt.sample_rate_hz = fs;
        SymbolSeq symbols = demodulate(cfg, pkt);
        double ser = reference.empty() ? nan_value() : symbol_error_rate(reference, symbols);
        if (!any || (ser == ser && ser < best_ser)) {
            any = true;
            best_ser = ser;
            best_symbols = std::move(symbols);
            best_residual = residual;
        }
    }
    if (!any) {
        rep.ser = nan_value();
        rep.failure = "no-sync";
        return rep;
    }
    rep.n_combined = 1;
    rep.symbols = std::move(best_symbols);
    rep.residual = best_residual;
    if (!reference.empty()) {
        rep.ser = best_ser;
        rep.decoded = rep.ser < kDecodeSerLimit;
    } else {
        rep.ser = nan_value();
    }
    return rep;
}

}  // namespace

CombineReport run_pipeline(const IqSignal& capture, const LoraConfig& cfg,
                           int n_transmissions, double tau_s, double slope_max_hz_s,
                           const PipelineOptions& opt, const SymbolSeq& reference,
                           ScanCache* cache) {
    cfg.validate();
    if (tau_s <= 0) throw std::invalid_argument("run_pipeline: tau must be positive");
    if (opt.joint_inference)
        return joint_pipeline(capture, cfg, n_transmissions, tau_s, slope_max_hz_s, opt,
                              reference, cache);
    return baseline_pipeline(capture, cfg, n_transmissions, tau_s, slope_max_hz_s, reference);
}

}  // namespace b2lora::combine
