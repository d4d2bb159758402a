#pragma once

// Internal DSP helpers shared by the library implementation. Not installed.

#include <complex>
#include <cstddef>
#include <span>
#include <vector>

namespace b2lora::dsp {

// Forward/inverse c2c DFT (unnormalized, FFTW convention). Plans are cached
// per size with FFTW_ESTIMATE so results are run-to-run deterministic.
void fft(std::span<const std::complex<double>> in, std::vector<std::complex<double>>& out);
void ifft(std::span<const std::complex<double>> in, std::vector<std::complex<double>>& out);

// Single-precision forward DFT for the detection scan hot path.
void fft_f(std::span<const std::complex<float>> in, std::vector<std::complex<float>>& out);

// max |spectrum| and its index.
std::size_t peak_index(std::span<const std::complex<double>> spectrum);
std::size_t peak_index_f(std::span<const std::complex<float>> spectrum);

// Parabolic refinement of a peak on a smooth metric surface from three
// equally spaced samples. Returns the fractional offset in (-0.5, 0.5).
double parabolic_offset(double m_left, double m_center, double m_right);

// Fractional displacement of a DFT peak from bin powers. A rectangular
// window leaks as the Dirichlet kernel, whose runner-up-to-peak amplitude
// ratio r fixes the displacement exactly as r/(1+r); a parabola through
// the same bins compresses the fraction several fold. `p_floor` is a
// per-bin noise power estimate removed before the ratio.
double dirichlet_peak_offset(double p_left, double p_center, double p_right,
                             double p_floor = 0.0);
double dirichlet_peak_bin(std::span<const std::complex<double>> spectrum, std::size_t i);

// Robust scale: median of |x - median| magnitudes on a magnitude vector.
double median(std::vector<double> v);  // by value: partial_sorts in place

// Mean |X[k]|^2 over bins at least `guard` away (cyclically) from `center`.
double offpeak_mean_power(std::span<const std::complex<double>> spectrum, std::size_t center,
                          std::size_t guard);

// 64-tap Blackman-windowed-sinc fractional delay by `frac` in [0, 1);
// integer group delay is compensated so y[n] ~= x(n - frac). Edges are
// zero-padded.
std::vector<std::complex<double>> fractional_delay(std::span<const std::complex<double>> x,
                                                   double frac);

// y[i] = x(start + i) for i < len, fractional starts interpolated with the
// same windowed sinc, positions outside x read as zero.
std::vector<std::complex<double>> extract_at(std::span<const std::complex<double>> x,
                                             double start, int len);

// Wrap to (-pi, pi].
double wrap_phase(double phi);
// Wrap a bin offset to [-n/2, n/2).
double wrap_bins(double bins, double n);

// Inverse standard normal CDF (Acklam's rational approximation,
// relative error < 1.2e-9). p must be in (0, 1).
double normal_quantile(double p);

}  // namespace b2lora::dsp
