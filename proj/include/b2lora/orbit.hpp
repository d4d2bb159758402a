#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "b2lora/phy.hpp"

namespace b2lora::orbit {

inline constexpr double kGM = 3.986004418e14;        // m^3/s^2
inline constexpr double kEarthRadius = 6371e3;       // m
inline constexpr double kLightSpeed = 299792458.0;   // m/s

// Circular orbit over a spherical, non-rotating Earth. The pass is
// parameterized by the maximum elevation seen from the ground station;
// t = 0 is the rising horizon crossing and t_peak = duration/2.
struct PassProfile {
    double altitude_m = 530e3;
    double max_elevation_rad = 1.5707963267948966;
    double carrier_hz = 503e6;
    double tau_s = 30.0;          // transmit period
    int n_transmissions = 8;
    double pass_duration_s = 0;   // 0 = full horizon-to-horizon duration

    double orbit_radius_m() const { return kEarthRadius + altitude_m; }
    double angular_rate_rad_s() const;   // orbital angular rate seen from Earth's center
    double beta0_rad() const;            // cross-track angle hitting max_elevation
    double horizon_duration_s() const;   // full pass duration
    double duration_s() const;           // pass_duration_s if set, else full
    double t_peak_s() const { return duration_s() / 2; }

    // Geometry as a function of capture time t in [0, duration].
    double slant_range_m(double t) const;
    double range_rate_m_s(double t) const;
    double elevation_rad(double t) const;

    void validate() const;
};

// Doppler shift D(t) = -(carrier/c) * d'(t); positive while approaching.
double doppler_hz(const PassProfile& pass, double t);
// Time derivative of D(t).
double doppler_rate_hz_s(const PassProfile& pass, double t);
// End-of-packet error of the linear Doppler approximation for a packet
// transmitted at t_s with duration t_a:
//   df = D(t_s) + D'(t_s) * t_a - D(t_s + t_a)
double linear_approx_error_hz(const PassProfile& pass, double t_s, double t_a);
// max |linear_approx_error| over all packet start times within the pass.
double max_linear_approx_error_hz(const PassProfile& pass, double t_a);

// Per-pass impairments; vectors are per transmission (empty = draw from
// seed / derive from geometry at synthesis time).
struct ImpairmentSpec {
    double rgr_db = 0.0;                     // mean packet power / added noise power
    std::vector<double> cfo_hz;              // per-packet carrier frequency offset
    std::vector<double> sto_fraction;        // fractional-sample timing offset, [0,1)
    std::vector<double> initial_phase_rad;   // per-packet phase at packet start
    std::vector<double> arrival_jitter_s;    // added to the nominal emission grid
    std::vector<double> amplitude;           // linear gain; empty = slant-range profile
    double hop_phase_jitter_rsd = 0.03;      // relative spread of per-hop phase drift
    double cfo_base_hz = 0.0;                // mean of drawn CFO when cfo_hz is empty
    double cfo_jitter_hz = 20.0;             // spread of drawn CFO
    double arrival_jitter_max_s = 2e-3;      // half-range of drawn uniform jitter
    std::uint64_t seed = 1;

    void validate(int n_transmissions) const;
};

// Phase drift of 5.226 rad per full-band hop, scaled linearly with hop size.
inline constexpr double kHopDriftRadPerBw = 5.226;

// One packet through the pass channel: Doppler phase along the exact
// slant-range profile, CFO, per-hop phase perturbations, initial phase,
// amplitude, and fractional-sample delay. Noise is NOT added here.
// `t_s` is the emission time within the pass; `index` selects per-packet
// impairment values. Sample count is preserved (the fractional-delay
// filter's integer group delay is compensated).
IqSignal apply_channel(const IqSignal& packet, const LoraConfig& cfg,
                       const SymbolSeq& payload, const PassProfile& pass,
                       const ImpairmentSpec& imp, int index, double t_s);

// Fully resolved per-packet draws, recorded into the manifest.
struct PacketRecord {
    double emission_s = 0;       // transmit time within the pass
    double arrival_s = 0;        // capture time of the packet start (incl. delay+jitter)
    double cfo_hz = 0;
    double sto_fraction = 0;
    double initial_phase_rad = 0;
    double amplitude = 1;
    double doppler_at_emission_hz = 0;
};

struct SynthesisResult {
    IqSignal capture;
    std::vector<PacketRecord> packets;
    double noise_power = 0;      // added complex-noise power (variance)
    double signal_power = 0;     // mean per-packet power used as the RGR reference
};

// One continuous capture of the pass: n_transmissions impaired copies of
// the same payload on the tau grid, plus white complex Gaussian noise at
// the configured RGR. Throws if packets would overlap or outrun the pass.
SynthesisResult synthesize_pass(const LoraConfig& cfg, const PassProfile& pass,
                                const ImpairmentSpec& imp, const SymbolSeq& payload);

// Add circular complex Gaussian noise with power = signal_power / 10^(rgr/10),
// where signal_power is the mean |x|^2 over the input. Returns noise power.
double add_noise_rgr(IqSignal& signal, double rgr_db, std::uint64_t seed);

}  // namespace b2lora::orbit
