#pragma once

#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "b2lora/aligner.hpp"
#include "b2lora/detector.hpp"
#include "b2lora/phy.hpp"

namespace b2lora::combine {

// Sample-wise mean of aligned packets. Throws on length mismatch; empty
// input returns an empty signal.
std::vector<std::complex<double>> coherent_combine(
    const std::vector<std::vector<std::complex<double>>>& packets);

// Residual frequency offset + drift of a combined frame, measured from
// the hop-free known chirps plus the symbol-independent fractional peak
// offsets of the payload chirps (the unknown symbol moves the integer
// part only), then counter-rotated (and the sub-sample timing residue
// shifted out). The payload observations stretch the rate fit over the
// whole frame instead of extrapolating the short prefix. If the
// per-chirp estimates spread by more than max_spread_bins the frame is
// returned unchanged and `applied` is false. The fitted rate is clamped
// to +/-max_slope_hz_s: the residual cannot drift faster than the worst
// uncompensated Doppler, while an unbounded fit lets per-chirp
// measurement noise tilt the frame by a full bin.
struct ResidualReport {
    double freq_hz = 0;
    double slope_hz_s = 0;
    double time_samples = 0;
    double bin_spread = 0;
    bool applied = false;
};
ResidualReport residual_correction(std::vector<std::complex<double>>& frame,
                                   const LoraConfig& cfg, double max_spread_bins = 2.0,
                                   double max_slope_hz_s =
                                       std::numeric_limits<double>::infinity());

// Dechirp-peak-to-noise-floor ratio of the known prefix, in dB. The gain
// of a combination is the ratio after minus the best ratio before.
double prefix_peak_ratio_db(std::span<const std::complex<double>> frame, const LoraConfig& cfg);

// Mean per-chirp peak-to-floor ratio over the whole frame, in dB. Payload
// windows score blind (the ratio needs no symbol), so this tracks the
// demodulation margin: a copy coherent over the short prefix can still
// rotate far enough across the payload to hurt the decode.
double frame_peak_ratio_db(std::span<const std::complex<double>> frame, const LoraConfig& cfg);
double estimate_snr_gain_db(const std::vector<std::vector<std::complex<double>>>& before,
                            std::span<const std::complex<double>> after, const LoraConfig& cfg);

enum class Method { b2lora, lora_baseline, combine_no_freq_align, b2lora_no_phase };

const char* method_name(Method m);
std::optional<Method> method_from_name(const std::string& name);

struct PipelineOptions {
    double block_chirps = 0;     // 0 = full known prefix from the config
    int stride = 0;              // 0 = samples_per_chirp / 4
    int max_packets = 8;
    bool joint_inference = true; // heatmap line fit; off = per-packet detection
    bool freq_align = true;
    bool slope_align = true;
    bool phase_align = true;
    int phase_candidates = 4;
    double denoise_k = 1.5;
    double line_accept_factor = 2.0;

    static PipelineOptions for_method(Method m);
};

struct CombineReport {
    int detected = 0;            // refine-confirmed periods (or per-packet detections)
    int n_combined = 0;          // packets entering the coherent sum
    double ser = 1.0;            // against the reference payload; 1.0 if nothing decoded
    bool decoded = false;
    double snr_gain_db = 0;      // 0 dB by definition when n_combined <= 1
    double prr = 0;
    SymbolSeq symbols;           // decoded payload
    ResidualReport residual;
    std::vector<align::ExclusionRecord> excluded;
    std::string failure;         // empty on success; otherwise why nothing decoded
};

// Optional reuse of the detection scan across methods that share the same
// block and stride on one capture (the scan dominates the runtime).
struct ScanCache {
    bool valid = false;
    double block_chirps = -1;
    int stride = -1;
    detect::PeakSeries series;
};

// Full receive chain on one capture: scan, heatmap, line fit (or per-packet
// detection), refinement, frequency/phase alignment, combination, residual
// correction, demodulation. Packets enter the sum in quality order and each
// is kept only if the whole-frame quality of the running sum does not drop,
// so combining never does worse than the admitted partial sum. `reference`
// (when non-empty) is used for SER.
CombineReport run_pipeline(const IqSignal& capture, const LoraConfig& cfg,
                           int n_transmissions, double tau_s, double slope_max_hz_s,
                           const PipelineOptions& opt, const SymbolSeq& reference,
                           ScanCache* cache = nullptr);

}  // namespace b2lora::combine
