#pragma once

#include <complex>
#include <span>
#include <vector>

namespace b2lora {

// Complex baseband samples with their rate and capture-relative start time.
struct IqSignal {
    std::vector<std::complex<double>> samples;
    double sample_rate_hz = 0.0;
    double t0_s = 0.0;

    double duration_s() const {
        return sample_rate_hz > 0 ? samples.size() / sample_rate_hz : 0.0;
    }
};

using SymbolSeq = std::vector<int>;

// CSS frame parameters. sample_rate must be an integer multiple of bw;
// the frame is preamble up-chirps, sync up-chirps (symbols 8, 16), a
// 2.25-chirp SFD of down-chirps, then payload up-chirps. Every chirp
// starts at phase 0 at the transmitter.
struct LoraConfig {
    int sf = 11;
    double bw_hz = 125e3;
    double sample_rate_hz = 250e3;
    int preamble_len = 8;
    int sync_len = 2;
    double sfd_len = 2.25;
    int payload_len = 20;
    double carrier_hz = 503e6;

    int chips() const { return 1 << sf; }
    double chirp_duration_s() const { return chips() / bw_hz; }
    int oversample() const { return static_cast<int>(sample_rate_hz / bw_hz + 0.5); }
    int samples_per_chirp() const { return chips() * oversample(); }
    double bin_width_hz() const { return bw_hz / chips(); }

    double frame_chirps() const { return preamble_len + sync_len + sfd_len + payload_len; }
    double block_chirps() const { return preamble_len + sync_len + sfd_len; }
    int sfd_samples() const;
    int block_samples() const;  // known prefix: preamble + sync + SFD
    int frame_samples() const;
    int payload_offset() const;  // first payload sample within the frame
    double packet_duration_s() const { return frame_samples() / sample_rate_hz; }

    void validate() const;  // throws std::invalid_argument
};

// Sync word symbols used when sync_len > 0.
SymbolSeq sync_symbols(const LoraConfig& cfg);

// Single chirp for `symbol`; down-chirps are the conjugate sweep.
IqSignal make_chirp(const LoraConfig& cfg, int symbol, bool up = true);

// Full frame: preamble, sync word, SFD, payload.
IqSignal modulate_packet(const LoraConfig& cfg, const SymbolSeq& payload);

// Multiply a chirp-length window by the conjugate reference chirp, DFT,
// and fold the spectrum to 2^sf bins (complex sum of aliased bins).
std::vector<std::complex<double>> dechirp_window(const LoraConfig& cfg,
                                                 std::span<const std::complex<double>> window,
                                                 bool up = true);

// argmax bin of the folded dechirp spectrum, and a fractional peak
// position in bins (wrapped to [-chips/2, chips/2)), interpolated from
// the Dirichlet-kernel neighbor ratio.
int dechirp_argmax(const LoraConfig& cfg, std::span<const std::complex<double>> window,
                   bool up = true);
double dechirp_peak_bin(const LoraConfig& cfg, std::span<const std::complex<double>> window,
                        bool up = true);

// Demodulate the payload of a frame-aligned packet (frame starts at sample 0).
SymbolSeq demodulate(const LoraConfig& cfg, const IqSignal& packet);

// Fraction of mismatched symbols; throws on length mismatch or empty input.
double symbol_error_rate(const SymbolSeq& reference, const SymbolSeq& decoded);

// Frequency-hop layout of one frame, used by the channel model to inject
// per-hop phase perturbations. One entry per chirp of the frame.
struct ChirpHop {
    int start_sample = 0;
    int n_samples = 0;
    int hop_sample = -1;          // intra-chirp hop position, -1 if none
    double boundary_hop_hz = 0;   // frequency step entering this chirp
    double intra_hop_hz = 0;      // frequency step at hop_sample (always -bw)
};
std::vector<ChirpHop> frame_hops(const LoraConfig& cfg, const SymbolSeq& payload);

// Frame-level offsets of a packet relative to its nominal grid, measured
// from the hop-free known chirps: preamble up-chirps and SFD down-chirps
// (sync chirps hop mid-window, which skews their apparent peak).
// Up-chirp bins move by freq - time, down-chirp bins by freq + time (in
// bin units), so the pair separates the two up to a joint chips/2
// ambiguity, resolved toward the smaller |freq|: valid whenever the true
// offset stays below bw/4, and in exchange time is trusted over the full
// +/-spc/2 window.
struct FrameOffset {
    double freq_hz = 0;
    double time_samples = 0;
    double bin_spread = 0;  // max spread of per-chirp estimates, bins
};
FrameOffset estimate_frame_offset(const LoraConfig& cfg,
                                  std::span<const std::complex<double>> frame);

}  // namespace b2lora
