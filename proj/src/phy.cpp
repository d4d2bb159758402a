#include "b2lora/phy.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "dsp.hpp"

namespace b2lora {

namespace {
constexpr double kPi = std::numbers::pi;

void check_window(const LoraConfig& cfg, std::size_t n) {
    if (n != static_cast<std::size_t>(cfg.samples_per_chirp()))
        throw std::invalid_argument("dechirp_window: window length != samples_per_chirp");
}
}  // namespace

int LoraConfig::sfd_samples() const {
    double s = sfd_len * samples_per_chirp();
    double r = std::round(s);
    if (std::abs(s - r) > 1e-9) throw std::invalid_argument("LoraConfig: sfd_len*spc not integral");
    return static_cast<int>(r);
}

int LoraConfig::block_samples() const {
    return (preamble_len + sync_len) * samples_per_chirp() + sfd_samples();
}

int LoraConfig::frame_samples() const {
    return block_samples() + payload_len * samples_per_chirp();
}

int LoraConfig::payload_offset() const { return block_samples(); }

void LoraConfig::validate() const {
    if (sf < 7 || sf > 12) throw std::invalid_argument("LoraConfig: sf out of [7,12]");
    if (bw_hz <= 0) throw std::invalid_argument("LoraConfig: bw must be positive");
    double ratio = sample_rate_hz / bw_hz;
    if (std::abs(ratio - std::round(ratio)) > 1e-9 || ratio < 1)
        throw std::invalid_argument("LoraConfig: sample_rate must be an integer multiple of bw");
    if (preamble_len < 1) throw std::invalid_argument("LoraConfig: preamble_len < 1");
    if (sync_len < 0 || sync_len > 2) throw std::invalid_argument("LoraConfig: sync_len out of [0,2]");
    if (sfd_len < 0) throw std::invalid_argument("LoraConfig: sfd_len negative");
    if (payload_len < 0) throw std::invalid_argument("LoraConfig: payload_len negative");
    if (carrier_hz <= 0) throw std::invalid_argument("LoraConfig: carrier must be positive");
    (void)sfd_samples();  // throws if not integral
}

SymbolSeq sync_symbols(const LoraConfig& cfg) {
    static const int kSync[2] = {8, 16};
    SymbolSeq s;
    for (int i = 0; i < cfg.sync_len; ++i) s.push_back(kSync[i]);
    return s;
}

// Instantaneous frequency starts at f_sym = symbol*bw/2^sf - bw/2, sweeps up
// at rate k = bw/chirp_duration, and falls back by bw at
// t_sym = (bw/2 - f_sym)/k. The phase 2*pi*f(t)*t is continuous at the hop
// because bw*t_sym is an integer, and is 0 at every chirp start.
IqSignal make_chirp(const LoraConfig& cfg, int symbol, bool up) {
    if (symbol < 0 || symbol >= cfg.chips())
        throw std::invalid_argument("make_chirp: symbol out of [0, 2^sf)");
    const int n = cfg.samples_per_chirp();
    const double fs = cfg.sample_rate_hz;
    const double bw = cfg.bw_hz;
    const double k = bw / cfg.chirp_duration_s();
    const double f_sym = symbol * bw / cfg.chips() - bw / 2;
    const double t_sym = (bw / 2 - f_sym) / k;

    IqSignal out;
    out.sample_rate_hz = fs;
    out.samples.resize(n);
    for (int i = 0; i < n; ++i) {
        double t = i / fs;
        double f = (t <= t_sym) ? f_sym + 0.5 * k * t : f_sym - bw + 0.5 * k * t;
        double phi = 2 * kPi * f * t;
        if (!up) phi = -phi;
        out.samples[i] = {std::cos(phi), std::sin(phi)};
    }
    return out;
}

IqSignal modulate_packet(const LoraConfig& cfg, const SymbolSeq& payload) {
    cfg.validate();
    if (static_cast<int>(payload.size()) != cfg.payload_len)
        throw std::invalid_argument("modulate_packet: payload length != config payload_len");
    for (int s : payload)
        if (s < 0 || s >= cfg.chips())
            throw std::invalid_argument("modulate_packet: payload symbol out of range");

    const int spc = cfg.samples_per_chirp();
    IqSignal out;
    out.sample_rate_hz = cfg.sample_rate_hz;
    out.samples.reserve(cfg.frame_samples());

    auto append = [&](const IqSignal& c, int count) {
        out.samples.insert(out.samples.end(), c.samples.begin(), c.samples.begin() + count);
    };

    IqSignal up0 = make_chirp(cfg, 0, true);
    for (int i = 0; i < cfg.preamble_len; ++i) append(up0, spc);
    for (int s : sync_symbols(cfg)) append(make_chirp(cfg, s, true), spc);

    IqSignal down0 = make_chirp(cfg, 0, false);
    int sfd_left = cfg.sfd_samples();
    while (sfd_left > 0) {
        int take = std::min(sfd_left, spc);
        append(down0, take);
        sfd_left -= take;
    }
    for (int s : payload) append(make_chirp(cfg, s, true), spc);
    return out;
}

std::vector<std::complex<double>> dechirp_window(const LoraConfig& cfg,
                                                 std::span<const std::complex<double>> window,
                                                 bool up) {
    check_window(cfg, window.size());
    const IqSignal ref = make_chirp(cfg, 0, up);
    std::vector<std::complex<double>> prod(window.size());
    for (std::size_t i = 0; i < window.size(); ++i) prod[i] = window[i] * std::conj(ref.samples[i]);

    std::vector<std::complex<double>> spec;
    dsp::fft(prod, spec);

    const int chips = cfg.chips();
    const int osf = cfg.oversample();
    std::vector<std::complex<double>> folded(chips);
    for (int b = 0; b < chips; ++b) {
        std::complex<double> acc = 0;
        for (int m = 0; m < osf; ++m) acc += spec[b + m * chips];
        folded[b] = acc;
    }
    return folded;
}

int dechirp_argmax(const LoraConfig& cfg, std::span<const std::complex<double>> window, bool up) {
    auto folded = dechirp_window(cfg, window, up);
    return static_cast<int>(dsp::peak_index(folded));
}

double dechirp_peak_bin(const LoraConfig& cfg, std::span<const std::complex<double>> window,
                        bool up) {
    auto folded = dechirp_window(cfg, window, up);
    std::size_t i = dsp::peak_index(folded);
    double bin = dsp::dirichlet_peak_bin(folded, i);
    return dsp::wrap_bins(bin, cfg.chips());
}

SymbolSeq demodulate(const LoraConfig& cfg, const IqSignal& packet) {
    cfg.validate();
    const int spc = cfg.samples_per_chirp();
    if (packet.samples.size() < static_cast<std::size_t>(cfg.frame_samples()))
        throw std::invalid_argument("demodulate: packet shorter than one frame");
    SymbolSeq out(cfg.payload_len);
    const std::complex<double>* base = packet.samples.data() + cfg.payload_offset();
    for (int k = 0; k < cfg.payload_len; ++k)
        out[k] = dechirp_argmax(cfg, {base + static_cast<std::size_t>(k) * spc,
                                      static_cast<std::size_t>(spc)});
    return out;
}

double symbol_error_rate(const SymbolSeq& reference, const SymbolSeq& decoded) {
    if (reference.empty()) throw std::invalid_argument("symbol_error_rate: empty reference");
    if (reference.size() != decoded.size())
        throw std::invalid_argument("symbol_error_rate: length mismatch");
    std::size_t bad = 0;
    for (std::size_t i = 0; i < reference.size(); ++i)
        if (reference[i] != decoded[i]) ++bad;
    return static_cast<double>(bad) / reference.size();
}

std::vector<ChirpHop> frame_hops(const LoraConfig& cfg, const SymbolSeq& payload) {
    if (static_cast<int>(payload.size()) != cfg.payload_len)
        throw std::invalid_argument("frame_hops: payload length != config payload_len");
    const int spc = cfg.samples_per_chirp();
    const double bw = cfg.bw_hz;
    const int chips = cfg.chips();
    auto f_start = [&](int s) { return s * bw / chips - bw / 2; };

    struct Sym {
        int symbol;
        bool up;
        int n;
    };
    std::vector<Sym> syms;
    for (int i = 0; i < cfg.preamble_len; ++i) syms.push_back({0, true, spc});
    for (int s : sync_symbols(cfg)) syms.push_back({s, true, spc});
    int sfd_left = cfg.sfd_samples();
    while (sfd_left > 0) {
        int take = std::min(sfd_left, spc);
        syms.push_back({0, false, take});
        sfd_left -= take;
    }
    for (int s : payload) syms.push_back({s, true, spc});

    std::vector<ChirpHop> hops;
    hops.reserve(syms.size());
    int pos = 0;
    double prev_end = 0;
    bool first = true;
    for (const Sym& sym : syms) {
        ChirpHop h;
        h.start_sample = pos;
        h.n_samples = sym.n;
        double start_f, end_f;
        if (sym.up) {
            start_f = f_start(sym.symbol);
            // hop at t_sym, only when it falls inside the chirp
            int hop_at = cfg.oversample() * (chips - sym.symbol);
            if (sym.symbol > 0 && hop_at < sym.n) {
                h.hop_sample = hop_at;
                h.intra_hop_hz = -bw;
            }
            end_f = (h.hop_sample >= 0) ? start_f : start_f + bw * sym.n / spc;
            if (h.hop_sample >= 0) end_f = start_f;  // sweep returns to f_start after the hop
        } else {
            start_f = bw / 2;
            end_f = bw / 2 - bw * sym.n / spc;
        }
        h.boundary_hop_hz = first ? 0.0 : start_f - prev_end;
        prev_end = end_f;
        first = false;
        pos += sym.n;
        hops.push_back(h);
    }
    return hops;
}

FrameOffset estimate_frame_offset(const LoraConfig& cfg,
                                  std::span<const std::complex<double>> frame) {
    const int spc = cfg.samples_per_chirp();
    const int chips = cfg.chips();
    if (frame.size() < static_cast<std::size_t>(cfg.block_samples()))
        throw std::invalid_argument("estimate_frame_offset: frame shorter than the known prefix");

    // Accumulate |folded|^2 across hop-free known chirps. Sync chirps are
    // left out: their intra-chirp hop carries a phase step that skews the
    // apparent fractional bin of the window.
    std::vector<double> up_acc(chips, 0.0), down_acc(chips, 0.0);
    std::vector<double> up_peaks;
    auto add_window = [&](std::vector<double>& acc, int offset, bool up, bool record_peak) {
        auto folded = dechirp_window(cfg, frame.subspan(offset, spc), up);
        for (int b = 0; b < chips; ++b) acc[b] += std::norm(folded[b]);
        if (record_peak) {
            int pk = static_cast<int>(dsp::peak_index(folded));
            up_peaks.push_back(dsp::wrap_bins(pk, chips));
        }
    };

    for (int i = 0; i < cfg.preamble_len; ++i) add_window(up_acc, i * spc, true, true);
    int n_down = cfg.sfd_samples() / spc;
    for (int j = 0; j < n_down; ++j)
        add_window(down_acc, (cfg.preamble_len + cfg.sync_len) * spc + j * spc, false, false);

    auto peak_of = [&](const std::vector<double>& acc) {
        int i = static_cast<int>(std::max_element(acc.begin(), acc.end()) - acc.begin());
        constexpr int kGuard = 4;
        double floor_sum = 0;
        int floor_n = 0;
        for (int b = 0; b < chips; ++b) {
            int d = std::min((b - i + chips) % chips, (i - b + chips) % chips);
            if (d <= kGuard) continue;
            floor_sum += acc[b];
            ++floor_n;
        }
        double p_floor = floor_n ? floor_sum / floor_n : 0.0;
        double frac = dsp::dirichlet_peak_offset(acc[(i + chips - 1) % chips], acc[i],
                                                 acc[(i + 1) % chips], p_floor);
        return dsp::wrap_bins(i + frac, chips);
    };

    FrameOffset off;
    double u = peak_of(up_acc);
    if (n_down > 0) {
        // Up-chirp bins move by (freq - time), down-chirp bins by (freq + time);
        // wrap each combination into the unambiguous half-range.
        double d = peak_of(down_acc);
        double f_bins = dsp::wrap_bins((u + d) / 2, chips);
        double t_bins = dsp::wrap_bins((d - u) / 2, chips);
        // The half-sum has a chips/2 ambiguity. The two branches differ by
        // bw/2 in frequency, so picking the smaller |freq| is decisive
        // whenever the true offset is below bw/4, which covers any Doppler
        // plus oscillator error by a wide margin; this keeps the time
        // estimate valid over the full +/-spc/2 window. Smaller |time|
        // breaks exact ties.
        double f2 = dsp::wrap_bins(f_bins + chips / 2.0, chips);
        double t2 = dsp::wrap_bins(t_bins + chips / 2.0, chips);
        if (std::abs(f2) < std::abs(f_bins) ||
            (std::abs(f2) == std::abs(f_bins) && std::abs(t2) < std::abs(t_bins))) {
            f_bins = f2;
            t_bins = t2;
        }
        off.freq_hz = f_bins * cfg.bin_width_hz();
        off.time_samples = t_bins * cfg.oversample();
    } else {
        off.freq_hz = u * cfg.bin_width_hz();
        off.time_samples = 0;
    }
    double spread = 0;
    for (double p : up_peaks) spread = std::max(spread, std::abs(p - u));
    off.bin_spread = spread;
    return off;
}

}  // namespace b2lora
