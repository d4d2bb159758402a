#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "b2lora/phy.hpp"

namespace b2lora::detect {

// Sliding chaining-dechirp metric: at each stride offset, the capture
// window is multiplied by the conjugate of the clean known prefix
// (preamble + sync + SFD, or any block_chirps length) and DFT'd; the
// maximum folded magnitude and its frequency are recorded.
struct PeakSeries {
    std::vector<float> peak;      // max |DFT| per window
    std::vector<float> freq_hz;   // frequency of that maximum
    int stride = 0;
    double sample_rate_hz = 0;
    int block_samples = 0;

    double slot_s() const { return stride / sample_rate_hz; }
    double time_of(std::size_t i) const { return i * stride / sample_rate_hz; }
};

PeakSeries chaining_dechirp_scan(const IqSignal& capture, const LoraConfig& cfg,
                                 double block_chirps, int stride);

// Period-folded heatmap: row = transmission period index, column = time
// slot within the period; cell = max peak landing in that slot.
struct Heatmap {
    int n_rows = 0;
    int n_cols = 0;
    double slot_s = 0;
    double tau_s = 0;
    std::vector<float> cells;

    float& at(int row, int col) { return cells[static_cast<std::size_t>(row) * n_cols + col]; }
    float at(int row, int col) const { return cells[static_cast<std::size_t>(row) * n_cols + col]; }
};

Heatmap build_heatmap(const PeakSeries& series, double tau_s);

// Zero all cells below k times their row mean (row means computed before
// any zeroing).
void denoise(Heatmap& map, double k = 1.5);

// Line fit through the surviving cells: column(row) = a + b*row, chosen to
// maximize the along-line energy (sum over rows of the best cell^2 within
// one slot of the line); a center-of-mass fit would drift off the narrow
// alignment ridge onto the band of partial-overlap energy. |b| is bounded
// by max_drift_s_per_period. The line is accepted when its energy exceeds
// accept_factor times the 95th percentile of random-line energies.
struct LineFit {
    double a_slots = 0;
    double b_slots_per_period = 0;
    double score = 0;            // along-line sum of cell^2
    double noise_score_p95 = 0;  // 95th percentile of random-line sums
    bool accepted = false;
    std::vector<char> row_evidence;  // per row: a surviving cell near the line
};

LineFit fit_packet_line(const Heatmap& map, double max_drift_s_per_period = 5e-3,
                        double accept_factor = 2.0, std::uint64_t seed = 12345);

// Coarse arrival produced by the detector for each period.
struct DetectionEvent {
    int period_index = 0;
    double coarse_time_s = 0;   // capture time of the predicted packet start
    float cell_value = 0;
    bool evidenced = false;     // its own heatmap cell survived denoise
};

std::vector<DetectionEvent> line_arrivals(const Heatmap& map, const LineFit& fit);

// Conventional per-packet detection: single-chirp dechirp windows at
// chirp stride must agree on the argmax bin (within +/-1) over
// min_consecutive windows, with peaks above a robust magnitude threshold.
std::vector<DetectionEvent> single_chirp_detect(const IqSignal& capture, const LoraConfig& cfg,
                                                double tau_s, int min_consecutive = 6);

// Fine arrival refinement. Timing comes from the frame's own up/down-chirp
// bin split (candidate starts on a samples_per_chirp/4 grid across
// +/-search_samples, each refined by estimate_frame_offset); a delay moves
// up-chirp and SFD bins in opposite directions, which is the only
// time-vs-frequency discriminator a blind receiver has. The refined start
// is confirmed when the known-chirp folded-spectrum quality clears an
// adaptive chi-square max-statistics threshold; a clean-reference
// statistic stays linear in SNR where any product of two noisy packets
// would be quadratic and useless. The anchor start is accepted for
// interface symmetry; the measurement itself is anchor-free. Returns
// nullopt when confirmation fails.
struct RefineResult {
    double target_start_sample = 0;
    double quality = 0;        // averaged folded-spectrum peak / offpeak mean
    double accept_quality = 0; // adaptive threshold it had to clear
    double freq_offset_hz = 0; // frame-measured frequency offset
};
std::optional<RefineResult> refine_arrival(const IqSignal& capture, const LoraConfig& cfg,
                                           double anchor_start_sample,
                                           double target_coarse_sample,
                                           int search_samples);

// Acceptance quality for a peak-to-offpeak-mean ratio of |folded|^2
// spectra averaged over n_windows known chirps, sized so that the
// max over n_eff independent noise bins exceeds it with probability
// about kRefineFalseAlarm.
double refine_accept_quality(int n_windows, double n_eff);
inline constexpr double kRefineFalseAlarm = 1e-4;

// Frame-level sync against the nominal grid: candidate starts at
// samples_per_chirp/4 spacing across +/-search_samples, each scored by
// the known-up-chirp averaged folded spectrum's peak-to-offpeak-mean
// ratio (quality), the winner refined by iterating estimate_frame_offset.
struct FrameSync {
    double start_sample = 0;
    double freq_hz = 0;
    double quality = 0;
    int n_candidates = 0;  // candidate starts scored, for max-statistics
};
std::optional<FrameSync> frame_sync(const IqSignal& capture, const LoraConfig& cfg,
                                    double coarse_sample, int search_samples);

}  // namespace b2lora::detect
