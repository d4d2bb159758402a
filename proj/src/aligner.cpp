#include "b2lora/aligner.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "dsp.hpp"

namespace b2lora::align {

namespace {

constexpr double kTwoPi = 2 * std::numbers::pi;

std::vector<std::complex<double>> rotate_by(std::span<const std::complex<double>> x,
                                            double freq_hz, double sample_rate_hz) {
    std::vector<std::complex<double>> out(x.size());
    for (std::size_t n = 0; n < x.size(); ++n)
        out[n] = x[n] * std::polar(1.0, -kTwoPi * freq_hz * n / sample_rate_hz);
    return out;
}

// Full-chirp windows of a frame in time order: known ups, full SFD downs,
// payload ups.
struct ChirpWindow {
    int offset;
    bool up;
};
std::vector<ChirpWindow> frame_windows(const LoraConfig& cfg) {
    const int spc = cfg.samples_per_chirp();
    std::vector<ChirpWindow> wins;
    const int n_up = cfg.preamble_len + cfg.sync_len;
    for (int k = 0; k < n_up; ++k) wins.push_back({k * spc, true});
    const int n_down = cfg.sfd_samples() / spc;
    for (int j = 0; j < n_down; ++j) wins.push_back({(n_up + j) * spc, false});
    for (int k = 0; k < cfg.payload_len; ++k)
        wins.push_back({cfg.payload_offset() + k * spc, true});
    return wins;
}

}  // namespace

std::vector<std::complex<double>> doppler_chirp(std::span<const std::complex<double>> anchor,
                                                std::span<const std::complex<double>> target) {
    if (anchor.empty() || anchor.size() != target.size())
        throw std::invalid_argument("doppler_chirp: size mismatch or empty input");
    std::vector<std::complex<double>> out(anchor.size());
    for (std::size_t i = 0; i < anchor.size(); ++i) out[i] = anchor[i] * std::conj(target[i]);
    return out;
}

MatchedDopplerChirp matched_doppler_chirp(const LoraConfig& cfg,
                                          std::span<const std::complex<double>> anchor,
                                          std::span<const std::complex<double>> target,
                                          double anchor_freq_hz, double target_freq_hz) {
    cfg.validate();
    const auto frame = static_cast<std::size_t>(cfg.frame_samples());
    if (anchor.size() < frame || target.size() < frame)
        throw std::invalid_argument("matched_doppler_chirp: inputs shorter than one frame");

    const int spc = cfg.samples_per_chirp();
    const double fs = cfg.sample_rate_hz;
    auto rot_a = rotate_by(anchor.first(frame), anchor_freq_hz, fs);
    auto rot_t = rotate_by(target.first(frame), target_freq_hz, fs);

    MatchedDopplerChirp out;
    out.prerotated_delta_hz = target_freq_hz - anchor_freq_hz;
    const int chips = cfg.chips();
    int n_ups = 0;
    for (const ChirpWindow& w : frame_windows(cfg)) {
        auto a_fold = dechirp_window(
            cfg, {rot_a.data() + w.offset, static_cast<std::size_t>(spc)}, w.up);
        auto t_fold = dechirp_window(
            cfg, {rot_t.data() + w.offset, static_cast<std::size_t>(spc)}, w.up);
        // Both buffers are pre-rotated by their own frequency estimates, so
        // the preamble and SFD tones sit within a bin of zero and need no
        // peak search; elsewhere the anchor's peak locates the tone. The
        // product is summed over the immediate neighbors as well, keeping
        // both images of a tone that straddles a bin edge, where a single
        // bin would halve the coherent energy.
        bool known = !w.up || n_ups < cfg.preamble_len;
        if (w.up) ++n_ups;
        std::size_t b = known ? 0 : dsp::peak_index(a_fold);
        std::complex<double> z = 0;
        for (int d = -1; d <= 1; ++d) {
            std::size_t bb = (b + static_cast<std::size_t>(chips + d)) % chips;
            z += a_fold[bb] * std::conj(t_fold[bb]);
        }
        out.z.push_back(z);
        out.t_s.push_back((w.offset + 0.5 * spc) / fs);
    }
    return out;
}

std::optional<FreqAlignment> rotate_search(const MatchedDopplerChirp& dchirp,
                                           double slope_max_hz_s, double intercept_range_hz) {
    const std::size_t n = dchirp.z.size();
    if (n != dchirp.t_s.size()) throw std::invalid_argument("rotate_search: z/t size mismatch");
    if (n < 4) return std::nullopt;

    std::vector<double> gaps;
    for (std::size_t i = 1; i < n; ++i) gaps.push_back(dchirp.t_s[i] - dchirp.t_s[i - 1]);
    const double dt = dsp::median(gaps);
    const double span = dchirp.t_s.back() - dchirp.t_s.front() + dt;
    if (dt <= 0 || span <= 0) return std::nullopt;

    if (intercept_range_hz <= 0) intercept_range_hz = 0.5 / dt;
    const double f_step = 0.25 / span;
    const double s_step = 0.5 / (span * span);
    const double slope_max = std::abs(slope_max_hz_s);
    const int n_f = static_cast<int>(std::ceil(intercept_range_hz / f_step));
    const int n_s = slope_max > 0 ? static_cast<int>(std::ceil(slope_max / s_step)) : 0;
    const int freqs = 2 * n_f + 1;
    const int slopes = 2 * n_s + 1;

    // metric(f, s) = |sum_k z_k U_k(f) V_k(s)| is separable in the two
    // phase factors, so both are tabulated once.
    std::vector<std::complex<double>> u_tab(static_cast<std::size_t>(freqs) * n);
    for (int fi = 0; fi < freqs; ++fi) {
        double f = (fi - n_f) * f_step;
        for (std::size_t k = 0; k < n; ++k)
            u_tab[static_cast<std::size_t>(fi) * n + k] =
                std::polar(1.0, -kTwoPi * f * dchirp.t_s[k]);
    }
    std::vector<std::complex<double>> v_tab(static_cast<std::size_t>(slopes) * n);
    for (int si = 0; si < slopes; ++si) {
        double s = (si - n_s) * s_step;
        for (std::size_t k = 0; k < n; ++k)
            v_tab[static_cast<std::size_t>(si) * n + k] =
                std::polar(1.0, -kTwoPi * 0.5 * s * dchirp.t_s[k] * dchirp.t_s[k]);
    }

    double best = -1;
    int best_fi = 0, best_si = 0;
    std::vector<double> floor_samples;
    const int stride_s = std::max(1, slopes / 41);
    const int stride_f = std::max(1, freqs / 53);
    std::vector<std::complex<double>> w(n);
    for (int si = 0; si < slopes; ++si) {
        const std::complex<double>* v = v_tab.data() + static_cast<std::size_t>(si) * n;
        for (std::size_t k = 0; k < n; ++k) w[k] = dchirp.z[k] * v[k];
        for (int fi = 0; fi < freqs; ++fi) {
            const std::complex<double>* u = u_tab.data() + static_cast<std::size_t>(fi) * n;
            std::complex<double> acc = 0;
            for (std::size_t k = 0; k < n; ++k) acc += w[k] * u[k];
            double mag = std::abs(acc);
            if (mag > best) {
                best = mag;
                best_fi = fi;
                best_si = si;
            }
            if (si % stride_s == 0 && fi % stride_f == 0) floor_samples.push_back(mag);
        }
    }
    if (floor_samples.empty()) return std::nullopt;
    double sigma = dsp::median(floor_samples) / 1.1774;
    if (sigma <= 0) return std::nullopt;

    const double cells_f = std::max(1.0, 2 * intercept_range_hz * span);
    const double cells_s = std::max(1.0, slope_max * span * span);
    const double n_eff = std::max(2.0, cells_f * cells_s);
    const double accept = std::sqrt(2 * std::log(n_eff)) + kRotateAcceptMargin;
    const double peak_sigma = best / sigma;
    if (peak_sigma < accept) return std::nullopt;

    auto metric = [&](double f, double s) {
        std::complex<double> acc = 0;
        for (std::size_t k = 0; k < n; ++k)
            acc += dchirp.z[k] *
                   std::polar(1.0, -kTwoPi * (f * dchirp.t_s[k] +
                                              0.5 * s * dchirp.t_s[k] * dchirp.t_s[k]));
        return std::abs(acc);
    };
    double f_hat = (best_fi - n_f) * f_step;
    double s_hat = (best_si - n_s) * s_step;
    f_hat += f_step * dsp::parabolic_offset(metric(f_hat - f_step, s_hat), best,
                                            metric(f_hat + f_step, s_hat));
    if (n_s > 0) {
        double c = metric(f_hat, s_hat);
        s_hat += s_step * dsp::parabolic_offset(metric(f_hat, s_hat - s_step), c,
                                                metric(f_hat, s_hat + s_step));
    }

    FreqAlignment fa;
    fa.delta_f0_hz = f_hat;
    fa.slope_hz_s = s_hat;
    fa.peak_sigma = peak_sigma;
    fa.accept_sigma = accept;
    return fa;
}

void compensate_freq(std::vector<std::complex<double>>& packet, double sample_rate_hz,
                     const FreqAlignment& fa) {
    if (sample_rate_hz <= 0) throw std::invalid_argument("compensate_freq: bad sample rate");
    for (std::size_t i = 0; i < packet.size(); ++i) {
        double t = i / sample_rate_hz;
        packet[i] *= std::polar(1.0, kTwoPi * (fa.delta_f0_hz * t + 0.5 * fa.slope_hz_s * t * t));
    }
}

PhaseAlignment phase_search(std::span<const std::complex<double>> anchor,
                            std::span<const std::complex<double>> target,
                            const LoraConfig& cfg, int n) {
    cfg.validate();
    if (n < 1) throw std::invalid_argument("phase_search: need at least one candidate");
    const auto block = static_cast<std::size_t>(cfg.block_samples());
    if (anchor.size() < block || target.size() < block)
        throw std::invalid_argument("phase_search: inputs shorter than the known prefix");

    LoraConfig prefix_cfg = cfg;
    prefix_cfg.payload_len = 0;
    IqSignal prefix = modulate_packet(prefix_cfg, {});

    std::vector<std::complex<double>> prod_a(block), prod_t(block);
    for (std::size_t i = 0; i < block; ++i) {
        auto ref = std::conj(prefix.samples[i]);
        prod_a[i] = anchor[i] * ref;
        prod_t[i] = target[i] * ref;
    }
    std::vector<std::complex<double>> spec_a, spec_t;
    dsp::fft(prod_a, spec_a);
    dsp::fft(prod_t, spec_t);

    PhaseAlignment pa;
    pa.n_candidates = n;
    double best = -1;
    for (int k = 1; k <= n; ++k) {
        double phi = kTwoPi * k / n;
        auto rot = std::polar(1.0, phi);
        double peak = 0;
        for (std::size_t b = 0; b < block; ++b)
            peak = std::max(peak, std::norm(spec_a[b] + rot * spec_t[b]));
        if (peak > best) {
            best = peak;
            pa.phi_rad = k == n ? 0.0 : phi;
        }
    }
    return pa;
}

AlignResult align_all(const IqSignal& capture, const LoraConfig& cfg,
                      const std::vector<detect::DetectionEvent>& events,
                      double slope_max_hz_s, const AlignOptions& opt) {
    cfg.validate();
    if (capture.sample_rate_hz != cfg.sample_rate_hz)
        throw std::invalid_argument("align_all: capture rate != config rate");

    AlignResult res;
    const double fs = cfg.sample_rate_hz;
    const int spc = cfg.samples_per_chirp();
    const int frame = cfg.frame_samples();
    const auto n_samples = static_cast<long long>(capture.samples.size());
    const int search = std::max(1, opt.refine_span_slots) * (spc / 4);

    struct Synced {
        detect::DetectionEvent ev;
        detect::RefineResult r;
    };
    std::vector<Synced> synced;
    for (const auto& ev : events) {
        auto r = detect::refine_arrival(capture, cfg, 0.0, ev.coarse_time_s * fs, search);
        if (!r) {
            res.excluded.push_back({ev.period_index, "confirm", static_cast<double>(ev.cell_value)});
            continue;
        }
        synced.push_back({ev, *r});
        res.confirmed_periods.push_back(ev.period_index);
    }
    std::sort(res.confirmed_periods.begin(), res.confirmed_periods.end());
    if (synced.empty()) return res;

    std::sort(synced.begin(), synced.end(), [](const Synced& a, const Synced& b) {
        if (a.r.quality != b.r.quality) return a.r.quality > b.r.quality;
        return a.ev.period_index < b.ev.period_index;
    });

    // Anchor: best-quality packet whose whole frame is inside the capture.
    std::vector<char> consumed(synced.size(), 0);
    int anchor_idx = -1;
    for (std::size_t i = 0; i < synced.size(); ++i) {
        long long a0 = std::llround(synced[i].r.target_start_sample);
        if (a0 >= 0 && a0 + frame <= n_samples) {
            anchor_idx = static_cast<int>(i);
            break;
        }
        res.excluded.push_back({synced[i].ev.period_index, "bounds",
                                synced[i].r.target_start_sample});
        consumed[i] = 1;
    }
    if (anchor_idx < 0) return res;

    const Synced& anchor = synced[anchor_idx];
    const long long a0 = std::llround(anchor.r.target_start_sample);
    const double a_frac = anchor.r.target_start_sample - a0;
    res.anchor_start_sample = anchor.r.target_start_sample;
    res.anchor_freq_offset_hz = anchor.r.freq_offset_hz;

    AlignedPacket head;
    head.period_index = anchor.ev.period_index;
    head.samples.assign(capture.samples.begin() + a0, capture.samples.begin() + a0 + frame);
    head.start_sample = anchor.r.target_start_sample;
    head.is_anchor = true;
    res.packets.push_back(std::move(head));
    consumed[anchor_idx] = 1;

    const int max_packets = std::max(1, opt.max_packets);

    // Aligned copies accumulate into a running reference for the matched
    // filter and the phase search: every admitted copy raises the reference
    // SNR for the next candidate. The sum only grows when both alignment
    // stages are active, since copies with a random relative phase or an
    // uncompensated frequency offset can cancel instead of adding.
    std::vector<std::complex<double>> ref = res.packets[0].samples;
    const bool grow_ref = opt.freq_align && opt.phase_align;

    auto try_align = [&](const Synced& s) -> std::optional<AlignedPacket> {
        // Offsetting by the anchor's fraction gives both buffers the same
        // sub-sample phase against their sample grids.
        const double desired = s.r.target_start_sample - a_frac;
        auto target = dsp::extract_at(capture.samples, desired, frame);

        FreqAlignment fa;
        if (opt.freq_align) {
            auto md = matched_doppler_chirp(cfg, ref, target,
                                            anchor.r.freq_offset_hz, s.r.freq_offset_hz);
            auto found = rotate_search(md, opt.slope_align ? slope_max_hz_s : 0.0);
            if (!found) return std::nullopt;
            fa = *found;
            fa.delta_f0_hz -= md.prerotated_delta_hz;
            compensate_freq(target, fs, fa);
        }

        PhaseAlignment pa;
        if (opt.phase_align) {
            pa = phase_search(ref, target, cfg, opt.phase_candidates);
            auto rot = std::polar(1.0, pa.phi_rad);
            for (auto& v : target) v *= rot;
        }

        AlignedPacket ap;
        ap.period_index = s.ev.period_index;
        ap.samples = std::move(target);
        ap.start_sample = s.r.target_start_sample;
        ap.freq = fa;
        ap.phase = pa;
        return ap;
    };
    auto admit = [&](AlignedPacket&& ap) {
        if (grow_ref)
            for (std::size_t k = 0; k < ref.size(); ++k) ref[k] += ap.samples[k];
        res.packets.push_back(std::move(ap));
    };

    std::vector<const Synced*> retry;
    for (std::size_t i = 0; i < synced.size(); ++i) {
        if (consumed[i]) continue;
        const Synced& s = synced[i];
        if (static_cast<int>(res.packets.size()) >= max_packets) {
            res.excluded.push_back({s.ev.period_index, "capacity", s.r.quality});
            continue;
        }
        const double desired = s.r.target_start_sample - a_frac;
        if (desired < 1 || desired + frame + 1 > static_cast<double>(n_samples)) {
            res.excluded.push_back({s.ev.period_index, "bounds", s.r.target_start_sample});
            continue;
        }
        if (auto ap = try_align(s)) admit(std::move(*ap));
        else retry.push_back(&s);
    }
    // Candidates that failed the frequency gate faced an early, weak
    // reference; give them one more pass against the accumulated one.
    for (const Synced* s : retry) {
        if (static_cast<int>(res.packets.size()) >= max_packets) {
            res.excluded.push_back({s->ev.period_index, "capacity", s->r.quality});
            continue;
        }
        if (auto ap = try_align(*s)) admit(std::move(*ap));
        else res.excluded.push_back({s->ev.period_index, "freq-align", s->r.quality});
    }
    return res;
}

}  // namespace b2lora::align
