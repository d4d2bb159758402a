#include "b2lora/orbit.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <stdexcept>

#include "dsp.hpp"

namespace b2lora::orbit {

namespace {
constexpr double kPi = std::numbers::pi;

// Pass time of the capture-window origin. A shortened pass_duration is a
// window centered on the peak of the full geometric pass.
double window_offset(const PassProfile& p) {
    return (p.horizon_duration_s() - p.duration_s()) / 2;
}
}  // namespace

double PassProfile::angular_rate_rad_s() const {
    double rs = orbit_radius_m();
    return std::sqrt(kGM / (rs * rs * rs));
}

double PassProfile::beta0_rad() const {
    // Solve elevation(t_peak) = max_elevation for the cross-track angle.
    double rs = orbit_radius_m();
    double lo = 0.0, hi = std::acos(kEarthRadius / rs) - 1e-12;
    auto elev_at = [&](double beta) {
        double cl = std::cos(beta);
        double d = std::sqrt(kEarthRadius * kEarthRadius + rs * rs - 2 * kEarthRadius * rs * cl);
        return std::asin((rs * cl - kEarthRadius) / d);
    };
    if (max_elevation_rad >= kPi / 2 - 1e-12) return 0.0;
    for (int i = 0; i < 200; ++i) {
        double mid = (lo + hi) / 2;
        if (elev_at(mid) > max_elevation_rad)
            lo = mid;
        else
            hi = mid;
    }
    return (lo + hi) / 2;
}

double PassProfile::horizon_duration_s() const {
    // Elevation crosses zero when cos(lambda) = Re/Rs.
    double c = (kEarthRadius / orbit_radius_m()) / std::cos(beta0_rad());
    c = std::clamp(c, -1.0, 1.0);
    return 2 * std::acos(c) / angular_rate_rad_s();
}

double PassProfile::duration_s() const {
    double full = horizon_duration_s();
    return pass_duration_s > 0 ? std::min(pass_duration_s, full) : full;
}

double PassProfile::slant_range_m(double t) const {
    double rs = orbit_radius_m();
    double dt = (t + window_offset(*this)) - horizon_duration_s() / 2;
    double cl = std::cos(beta0_rad()) * std::cos(angular_rate_rad_s() * dt);
    return std::sqrt(kEarthRadius * kEarthRadius + rs * rs - 2 * kEarthRadius * rs * cl);
}

double PassProfile::range_rate_m_s(double t) const {
    double rs = orbit_radius_m();
    double om = angular_rate_rad_s();
    double dt = (t + window_offset(*this)) - horizon_duration_s() / 2;
    double d = slant_range_m(t);
    return kEarthRadius * rs * om * std::cos(beta0_rad()) * std::sin(om * dt) / d;
}

double PassProfile::elevation_rad(double t) const {
    double rs = orbit_radius_m();
    double dt = (t + window_offset(*this)) - horizon_duration_s() / 2;
    double cl = std::cos(beta0_rad()) * std::cos(angular_rate_rad_s() * dt);
    double d = slant_range_m(t);
    return std::asin((rs * cl - kEarthRadius) / d);
}

void PassProfile::validate() const {
    if (altitude_m <= 0) throw std::invalid_argument("PassProfile: altitude must be positive");
    if (max_elevation_rad <= 0 || max_elevation_rad > kPi / 2 + 1e-12)
        throw std::invalid_argument("PassProfile: max_elevation out of (0, pi/2]");
    if (carrier_hz <= 0) throw std::invalid_argument("PassProfile: carrier must be positive");
    if (tau_s <= 0) throw std::invalid_argument("PassProfile: tau must be positive");
    if (n_transmissions < 0) throw std::invalid_argument("PassProfile: n_transmissions negative");
    if (pass_duration_s < 0) throw std::invalid_argument("PassProfile: pass_duration negative");
    if (n_transmissions > 0 && n_transmissions * tau_s > duration_s() + 1e-9)
        throw std::invalid_argument("PassProfile: n_transmissions*tau exceeds the pass duration");
}

double doppler_hz(const PassProfile& pass, double t) {
    return -(pass.carrier_hz / kLightSpeed) * pass.range_rate_m_s(t);
}

double doppler_rate_hz_s(const PassProfile& pass, double t) {
    double rs = pass.orbit_radius_m();
    double om = pass.angular_rate_rad_s();
    double dt = (t + window_offset(pass)) - pass.horizon_duration_s() / 2;
    double d = pass.slant_range_m(t);
    double dd = pass.range_rate_m_s(t);
    double d2 = (kEarthRadius * rs * om * om * std::cos(pass.beta0_rad()) * std::cos(om * dt) -
                 dd * dd) /
                d;
    return -(pass.carrier_hz / kLightSpeed) * d2;
}

double linear_approx_error_hz(const PassProfile& pass, double t_s, double t_a) {
    if (t_a <= 0) throw std::invalid_argument("linear_approx_error: t_a must be positive");
    return doppler_hz(pass, t_s) + doppler_rate_hz_s(pass, t_s) * t_a - doppler_hz(pass, t_s + t_a);
}

double max_linear_approx_error_hz(const PassProfile& pass, double t_a) {
    double T = pass.duration_s();
    if (t_a >= T) throw std::invalid_argument("max_linear_approx_error: t_a exceeds the pass");
    const int n = 4096;
    double worst = 0;
    for (int i = 0; i <= n; ++i) {
        double t_s = (T - t_a) * i / n;
        worst = std::max(worst, std::abs(linear_approx_error_hz(pass, t_s, t_a)));
    }
    return worst;
}

void ImpairmentSpec::validate(int n) const {
    auto check = [&](const std::vector<double>& v, const char* name) {
        if (!v.empty() && v.size() != static_cast<std::size_t>(n))
            throw std::invalid_argument(std::string("ImpairmentSpec: ") + name +
                                        " length != n_transmissions");
    };
    check(cfo_hz, "cfo_hz");
    check(sto_fraction, "sto_fraction");
    check(initial_phase_rad, "initial_phase_rad");
    check(arrival_jitter_s, "arrival_jitter_s");
    check(amplitude, "amplitude");
    for (double s : sto_fraction)
        if (s < 0 || s >= 1) throw std::invalid_argument("ImpairmentSpec: sto_fraction not in [0,1)");
    if (hop_phase_jitter_rsd < 0)
        throw std::invalid_argument("ImpairmentSpec: hop_phase_jitter_rsd negative");
}

IqSignal apply_channel(const IqSignal& packet, const LoraConfig& cfg, const SymbolSeq& payload,
                       const PassProfile& pass, const ImpairmentSpec& imp, int index, double t_s) {
    if (packet.samples.empty()) throw std::invalid_argument("apply_channel: empty packet");
    if (index < 0) throw std::invalid_argument("apply_channel: negative index");
    auto at = [&](const std::vector<double>& v, double fallback) {
        return static_cast<std::size_t>(index) < v.size() ? v[index] : fallback;
    };
    const double fs = packet.sample_rate_hz;
    const double cfo = at(imp.cfo_hz, 0.0);
    const double sto = at(imp.sto_fraction, 0.0);
    const double phi0 = at(imp.initial_phase_rad, 0.0);
    const double amp = at(imp.amplitude, 1.0);

    // Per-chirp phase offsets from PLL hop response: each hop contributes
    // -k*df (k = 5.226 rad per full-band hop) with a per-packet relative
    // jitter; offsets reset at each chirp start so drift does not accumulate
    // across symbols, and the pattern is common-mode across re-transmissions.
    std::vector<double> drift(packet.samples.size(), 0.0);
    std::mt19937_64 rng(imp.seed * 0x9E3779B97F4A7C15ULL + static_cast<unsigned>(index) * 2 + 1);
    std::normal_distribution<double> jitter(0.0, imp.hop_phase_jitter_rsd);
    for (const ChirpHop& h : frame_hops(cfg, payload)) {
        double theta = -kHopDriftRadPerBw * (h.boundary_hop_hz / cfg.bw_hz) * (1 + jitter(rng));
        double theta2 = theta;
        if (h.hop_sample >= 0)
            theta2 += -kHopDriftRadPerBw * (h.intra_hop_hz / cfg.bw_hz) * (1 + jitter(rng));
        int hop_at = h.hop_sample >= 0 ? h.hop_sample : h.n_samples;
        for (int i = 0; i < h.n_samples; ++i) {
            std::size_t idx = h.start_sample + i;
            if (idx >= drift.size()) break;
            drift[idx] = i < hop_at ? theta : theta2;
        }
    }

    // Doppler phase along the exact slant-range profile:
    // phi_D(t) = -2*pi*(fc/c) * (d(t_s+t) - d(t_s)).
    const double fc = pass.carrier_hz;
    const double d0 = pass.slant_range_m(t_s);
    IqSignal out;
    out.sample_rate_hz = fs;
    out.t0_s = packet.t0_s;
    out.samples.resize(packet.samples.size());
    for (std::size_t i = 0; i < packet.samples.size(); ++i) {
        double t = i / fs;
        double phi_d = -2 * kPi * (fc / kLightSpeed) * (pass.slant_range_m(t_s + t) - d0);
        double phi = phi_d + 2 * kPi * cfo * t + drift[i] + phi0;
        out.samples[i] = amp * packet.samples[i] * std::complex<double>(std::cos(phi), std::sin(phi));
    }
    if (sto != 0.0) out.samples = dsp::fractional_delay(out.samples, sto);
    return out;
}

namespace {

// Draw any unspecified per-packet impairments, in a fixed order so a seed
// fully determines the pass.
ImpairmentSpec resolve(const ImpairmentSpec& imp, const LoraConfig&, const PassProfile& pass,
                       const std::vector<double>& emission_s) {
    ImpairmentSpec r = imp;
    const int n = pass.n_transmissions;
    std::mt19937_64 rng(imp.seed);
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    std::normal_distribution<double> gauss(0.0, 1.0);
    if (r.cfo_hz.empty()) {
        for (int i = 0; i < n; ++i) r.cfo_hz.push_back(r.cfo_base_hz + r.cfo_jitter_hz * gauss(rng));
    }
    if (r.sto_fraction.empty()) {
        for (int i = 0; i < n; ++i) r.sto_fraction.push_back(uni(rng));
    }
    if (r.initial_phase_rad.empty()) {
        for (int i = 0; i < n; ++i) r.initial_phase_rad.push_back(2 * kPi * uni(rng));
    }
    if (r.arrival_jitter_s.empty()) {
        for (int i = 0; i < n; ++i)
            r.arrival_jitter_s.push_back((2 * uni(rng) - 1) * r.arrival_jitter_max_s);
    }
    if (r.amplitude.empty()) {
        double d_peak = pass.slant_range_m(pass.t_peak_s());
        for (int i = 0; i < n; ++i) r.amplitude.push_back(d_peak / pass.slant_range_m(emission_s[i]));
    }
    return r;
}

}  // namespace

SynthesisResult synthesize_pass(const LoraConfig& cfg, const PassProfile& pass,
                                const ImpairmentSpec& imp, const SymbolSeq& payload) {
    cfg.validate();
    pass.validate();
    imp.validate(pass.n_transmissions);
    const int n = pass.n_transmissions;
    const double fs = cfg.sample_rate_hz;
    const double T = pass.duration_s();
    const double t_a = cfg.packet_duration_s();
    if (t_a >= pass.tau_s)
        throw std::invalid_argument("synthesize_pass: packet duration exceeds the transmit period");

    // Emission grid centered in the capture window.
    std::vector<double> emission(n);
    double span = n > 0 ? (n - 1) * pass.tau_s + t_a : 0.0;
    if (span > T) throw std::invalid_argument("synthesize_pass: transmissions outrun the pass");
    double first = (T - span) / 2;
    for (int i = 0; i < n; ++i) emission[i] = first + i * pass.tau_s;

    ImpairmentSpec r = resolve(imp, cfg, pass, emission);

    SynthesisResult res;
    res.capture.sample_rate_hz = fs;
    res.capture.t0_s = 0.0;
    res.capture.samples.assign(static_cast<std::size_t>(std::llround(T * fs)), {0.0, 0.0});

    IqSignal base = modulate_packet(cfg, payload);
    double powage = 0;
    for (int i = 0; i < n; ++i) {
        IqSignal impaired = apply_channel(base, cfg, payload, pass, r, i, emission[i]);
        double arrival = emission[i] + pass.slant_range_m(emission[i]) / kLightSpeed +
                         r.arrival_jitter_s[i];
        auto n0 = static_cast<long long>(std::llround(arrival * fs));
        double true_arrival = n0 / fs + r.sto_fraction[i] / fs;
        if (n0 < 0 || n0 + static_cast<long long>(impaired.samples.size()) >
                          static_cast<long long>(res.capture.samples.size()))
            throw std::invalid_argument("synthesize_pass: packet falls outside the capture");
        if (i > 0 && true_arrival < res.packets[i - 1].arrival_s + t_a)
            throw std::invalid_argument("synthesize_pass: packets overlap");
        for (std::size_t k = 0; k < impaired.samples.size(); ++k)
            res.capture.samples[n0 + k] += impaired.samples[k];

        PacketRecord rec;
        rec.emission_s = emission[i];
        rec.arrival_s = true_arrival;
        rec.cfo_hz = r.cfo_hz[i];
        rec.sto_fraction = r.sto_fraction[i];
        rec.initial_phase_rad = r.initial_phase_rad[i];
        rec.amplitude = r.amplitude[i];
        rec.doppler_at_emission_hz = doppler_hz(pass, emission[i]);
        res.packets.push_back(rec);
        powage += r.amplitude[i] * r.amplitude[i];
    }

    res.signal_power = n > 0 ? powage / n : 1.0;
    res.noise_power = res.signal_power / std::pow(10.0, imp.rgr_db / 10.0);
    std::mt19937_64 rng(imp.seed ^ 0xC0FFEE5EEDULL);
    std::normal_distribution<double> gauss(0.0, std::sqrt(res.noise_power / 2));
    for (auto& s : res.capture.samples) s += std::complex<double>(gauss(rng), gauss(rng));
    return res;
}

double add_noise_rgr(IqSignal& signal, double rgr_db, std::uint64_t seed) {
    if (signal.samples.empty()) throw std::invalid_argument("add_noise_rgr: empty signal");
    double power = 0;
    for (const auto& s : signal.samples) power += std::norm(s);
    power /= signal.samples.size();
    if (power == 0) power = 1.0;  // noise-only convention: unit reference
    double noise_power = power / std::pow(10.0, rgr_db / 10.0);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, std::sqrt(noise_power / 2));
    for (auto& s : signal.samples) s += std::complex<double>(gauss(rng), gauss(rng));
    return noise_power;
}

}  // namespace b2lora::orbit
