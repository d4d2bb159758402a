#pragma once

#include <optional>
#include <vector>

#include "b2lora/phy.hpp"
#include "b2lora/detector.hpp"

namespace b2lora::align {

// Conjugate product of two time-aligned copies of the same frame. Symbol
// content cancels, leaving a slow chirp whose intercept is the frequency
// difference at the packet start and whose slope is the Doppler-rate
// difference. Raw-sample form; its peak statistic is quadratic in SNR,
// so it is only usable well above threshold.
std::vector<std::complex<double>> doppler_chirp(std::span<const std::complex<double>> anchor,
                                                std::span<const std::complex<double>> target);

// Despread form of the same product: each packet is counter-rotated by its
// own measured frequency offset and dechirped chirp by chirp; the folded
// spectra are then conjugate-multiplied around the tone (bin zero for the
// known chirps, the anchor's argmax elsewhere, plus immediate neighbors for
// straddling tones), one complex sample per full chirp, timestamped at the
// chirp center relative to the frame start. Per-chirp despreading keeps the
// statistic linear in each packet's SNR, which is what lets frequency
// alignment work on packets too weak to decode. The pre-rotation removes each packet's
// own kHz-scale offset, so the sequence carries only the residual
// difference, inside the chirp-rate Nyquist range. The quarter-chirp SFD
// remainder makes the timestamps slightly non-uniform, hence explicit t_s.
struct MatchedDopplerChirp {
    std::vector<std::complex<double>> z;
    std::vector<double> t_s;
    double prerotated_delta_hz = 0;  // target_freq - anchor_freq, removed up front
};
MatchedDopplerChirp matched_doppler_chirp(const LoraConfig& cfg,
                                          std::span<const std::complex<double>> anchor,
                                          std::span<const std::complex<double>> target,
                                          double anchor_freq_hz, double target_freq_hz);

struct FreqAlignment {
    double delta_f0_hz = 0;    // anchor minus target frequency at the frame start
    double slope_hz_s = 0;     // linear rate of that difference
    double peak_sigma = 0;     // winning peak in noise sigmas
    double accept_sigma = 0;   // adaptive threshold it had to clear
};

// Search the despread doppler chirp over a separable (intercept, slope)
// grid: metric(f, s) = |sum_k z_k exp(-j*2*pi*(f*t_k + s*t_k^2/2))|,
// slope covering +/-slope_max at half the 1/span^2 resolution, intercept
// covering +/-intercept_range (0 = the sequence's Nyquist range) at a
// quarter of the 1/span resolution, winner refined parabolically on both
// axes. The peak must clear an adaptive max-statistics threshold over the
// decorrelated cell count; returns nullopt otherwise. The intercept is
// the sequence's own residual; the caller composes it with the removed
// pre-rotation to get the full anchor-target difference.
std::optional<FreqAlignment> rotate_search(const MatchedDopplerChirp& dchirp,
                                           double slope_max_hz_s,
                                           double intercept_range_hz = 0);

// Margin above the max-statistics noise level for rotate_search.
inline constexpr double kRotateAcceptMargin = 1.5;

// Multiply by exp(+j*2*pi*(delta_f0*t + slope*t^2/2)) so the target's
// frequency track lands on the anchor's.
void compensate_freq(std::vector<std::complex<double>>& packet, double sample_rate_hz,
                     const FreqAlignment& fa);

struct PhaseAlignment {
    double phi_rad = 0;   // chosen rotation, in [0, 2*pi)
    int n_candidates = 0;
};

// Try n rotations 2*pi*k/n (k = 1..n) of the target against the anchor,
// keep the one maximizing the dechirped peak of the summed known prefix.
PhaseAlignment phase_search(std::span<const std::complex<double>> anchor,
                            std::span<const std::complex<double>> target,
                            const LoraConfig& cfg, int n = 4);

struct AlignedPacket {
    int period_index = 0;
    std::vector<std::complex<double>> samples;  // time/freq/phase aligned to the anchor
    double start_sample = 0;                    // refined start within the capture
    FreqAlignment freq;
    PhaseAlignment phase;
    bool is_anchor = false;
};

struct ExclusionRecord {
    int period_index = 0;
    const char* stage = "";
    double detail = 0;
};

struct AlignOptions {
    bool freq_align = true;    // estimate and compensate the Doppler-chirp intercept
    bool slope_align = true;   // include the slope axis in rotate_search
    bool phase_align = true;
    int max_packets = 8;
    int phase_candidates = 4;
    int refine_span_slots = 4;
};

struct AlignResult {
    std::vector<AlignedPacket> packets;          // anchor first
    std::vector<ExclusionRecord> excluded;
    std::vector<int> confirmed_periods;          // refine-confirmed detections (all periods)
    double anchor_start_sample = 0;
    double anchor_freq_offset_hz = 0;            // coarse scan estimate, diagnostic
};

// Pick the strongest event as anchor, frame-sync it, then refine, frequency
// align, and phase align every other event against it. Packets failing any
// stage are excluded with the stage recorded. Confirmation (for PRR) runs
// for all events; combining keeps at most max_packets.
AlignResult align_all(const IqSignal& capture, const LoraConfig& cfg,
                      const std::vector<detect::DetectionEvent>& events,
                      double slope_max_hz_s, const AlignOptions& opt);

}  // namespace b2lora::align
