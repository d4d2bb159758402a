#include "dsp.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <memory>
#include <numbers>
#include <stdexcept>

namespace b2lora::dsp {

namespace {

// FFTW plans are reused per (size, direction). Buffers are owned by the
// cache entry; callers copy in/out, which is cheap next to the transform.
struct PlanD {
    fftw_plan plan = nullptr;
    fftw_complex* in = nullptr;
    fftw_complex* out = nullptr;
    std::size_t n = 0;

    PlanD(std::size_t size, int sign) : n(size) {
        in = fftw_alloc_complex(n);
        out = fftw_alloc_complex(n);
        plan = fftw_plan_dft_1d(static_cast<int>(n), in, out, sign, FFTW_ESTIMATE);
        if (!plan) throw std::runtime_error("fftw plan failed");
    }
    ~PlanD() {
        if (plan) fftw_destroy_plan(plan);
        if (in) fftw_free(in);
        if (out) fftw_free(out);
    }
    PlanD(const PlanD&) = delete;
    PlanD& operator=(const PlanD&) = delete;
};

struct PlanF {
    fftwf_plan plan = nullptr;
    fftwf_complex* in = nullptr;
    fftwf_complex* out = nullptr;
    std::size_t n = 0;

    PlanF(std::size_t size, int sign) : n(size) {
        in = fftwf_alloc_complex(n);
        out = fftwf_alloc_complex(n);
        plan = fftwf_plan_dft_1d(static_cast<int>(n), in, out, sign, FFTW_ESTIMATE);
        if (!plan) throw std::runtime_error("fftwf plan failed");
    }
    ~PlanF() {
        if (plan) fftwf_destroy_plan(plan);
        if (in) fftwf_free(in);
        if (out) fftwf_free(out);
    }
    PlanF(const PlanF&) = delete;
    PlanF& operator=(const PlanF&) = delete;
};

PlanD& plan_d(std::size_t n, int sign) {
    static std::map<std::pair<std::size_t, int>, std::unique_ptr<PlanD>> cache;
    auto& slot = cache[{n, sign}];
    if (!slot) slot = std::make_unique<PlanD>(n, sign);
    return *slot;
}

PlanF& plan_f(std::size_t n, int sign) {
    static std::map<std::pair<std::size_t, int>, std::unique_ptr<PlanF>> cache;
    auto& slot = cache[{n, sign}];
    if (!slot) slot = std::make_unique<PlanF>(n, sign);
    return *slot;
}

void run_d(std::span<const std::complex<double>> in, std::vector<std::complex<double>>& out,
           int sign) {
    if (in.empty()) throw std::invalid_argument("fft: empty input");
    PlanD& p = plan_d(in.size(), sign);
    std::copy(in.begin(), in.end(), reinterpret_cast<std::complex<double>*>(p.in));
    fftw_execute(p.plan);
    out.assign(reinterpret_cast<std::complex<double>*>(p.out),
               reinterpret_cast<std::complex<double>*>(p.out) + p.n);
}

}  // namespace

void fft(std::span<const std::complex<double>> in, std::vector<std::complex<double>>& out) {
    run_d(in, out, FFTW_FORWARD);
}

void ifft(std::span<const std::complex<double>> in, std::vector<std::complex<double>>& out) {
    run_d(in, out, FFTW_BACKWARD);
}

void fft_f(std::span<const std::complex<float>> in, std::vector<std::complex<float>>& out) {
    if (in.empty()) throw std::invalid_argument("fft_f: empty input");
    PlanF& p = plan_f(in.size(), FFTW_FORWARD);
    std::copy(in.begin(), in.end(), reinterpret_cast<std::complex<float>*>(p.in));
    fftwf_execute(p.plan);
    out.assign(reinterpret_cast<std::complex<float>*>(p.out),
               reinterpret_cast<std::complex<float>*>(p.out) + p.n);
}

std::size_t peak_index(std::span<const std::complex<double>> spectrum) {
    std::size_t best = 0;
    double best_m = -1;
    for (std::size_t i = 0; i < spectrum.size(); ++i) {
        double m = std::norm(spectrum[i]);
        if (m > best_m) {
            best_m = m;
            best = i;
        }
    }
    return best;
}

std::size_t peak_index_f(std::span<const std::complex<float>> spectrum) {
    std::size_t best = 0;
    float best_m = -1;
    for (std::size_t i = 0; i < spectrum.size(); ++i) {
        float m = std::norm(spectrum[i]);
        if (m > best_m) {
            best_m = m;
            best = i;
        }
    }
    return best;
}

double parabolic_offset(double m_left, double m_center, double m_right) {
    double denom = m_left - 2 * m_center + m_right;
    if (std::abs(denom) < 1e-300) return 0.0;
    double off = 0.5 * (m_left - m_right) / denom;
    return std::clamp(off, -0.5, 0.5);
}

double dirichlet_peak_offset(double p_left, double p_center, double p_right, double p_floor) {
    double c = p_center - p_floor;
    if (c <= 0) return 0.0;
    double l = p_left - p_floor;
    double r = p_right - p_floor;
    double n = std::max(l, r);
    if (n <= 0) return 0.0;
    double ratio = std::sqrt(n / c);
    double off = ratio / (1 + ratio);
    return r >= l ? off : -off;
}

double dirichlet_peak_bin(std::span<const std::complex<double>> spectrum, std::size_t i) {
    std::size_t n = spectrum.size();
    if (n < 3) return static_cast<double>(i);
    constexpr std::size_t kGuard = 4;
    double floor_sum = 0;
    std::size_t floor_n = 0;
    for (std::size_t b = 0; b < n; ++b) {
        std::size_t d = (b + n - i) % n;
        if (d <= kGuard || d + kGuard >= n) continue;
        floor_sum += std::norm(spectrum[b]);
        ++floor_n;
    }
    double p_floor = floor_n ? floor_sum / static_cast<double>(floor_n) : 0.0;
    double l = std::norm(spectrum[(i + n - 1) % n]);
    double c = std::norm(spectrum[i]);
    double r = std::norm(spectrum[(i + 1) % n]);
    return static_cast<double>(i) + dirichlet_peak_offset(l, c, r, p_floor);
}

double median(std::vector<double> v) {
    if (v.empty()) throw std::invalid_argument("median: empty input");
    std::size_t mid = v.size() / 2;
    std::nth_element(v.begin(), v.begin() + mid, v.end());
    double hi = v[mid];
    if (v.size() % 2) return hi;
    std::nth_element(v.begin(), v.begin() + mid - 1, v.begin() + mid);
    return 0.5 * (hi + v[mid - 1]);
}

double offpeak_mean_power(std::span<const std::complex<double>> spectrum, std::size_t center,
                          std::size_t guard) {
    std::size_t n = spectrum.size();
    double sum = 0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t d = i > center ? i - center : center - i;
        d = std::min(d, n - d);
        if (d <= guard) continue;
        sum += std::norm(spectrum[i]);
        ++count;
    }
    return count ? sum / count : 0.0;
}

std::vector<std::complex<double>> fractional_delay(std::span<const std::complex<double>> x,
                                                   double frac) {
    if (frac < 0.0 || frac >= 1.0) throw std::invalid_argument("fractional_delay: frac not in [0,1)");
    constexpr int kTaps = 64;
    constexpr int kCenter = kTaps / 2 - 1;  // delay compensated to `frac` samples net
    if (frac == 0.0) return {x.begin(), x.end()};

    double h[kTaps];
    double sum = 0;
    for (int k = 0; k < kTaps; ++k) {
        double t = k - kCenter - frac;
        double sinc = t == 0.0 ? 1.0 : std::sin(std::numbers::pi * t) / (std::numbers::pi * t);
        double w = 0.42 - 0.5 * std::cos(2 * std::numbers::pi * k / (kTaps - 1)) +
                   0.08 * std::cos(4 * std::numbers::pi * k / (kTaps - 1));
        h[k] = sinc * w;
        sum += h[k];
    }
    for (double& c : h) c /= sum;

    std::vector<std::complex<double>> y(x.size());
    auto n = static_cast<long>(x.size());
    for (long i = 0; i < n; ++i) {
        std::complex<double> acc = 0;
        for (int k = 0; k < kTaps; ++k) {
            long j = i - (k - kCenter);
            if (j >= 0 && j < n) acc += h[k] * x[j];
        }
        y[i] = acc;
    }
    return y;
}

std::vector<std::complex<double>> extract_at(std::span<const std::complex<double>> x,
                                             double start, int len) {
    if (len < 0) throw std::invalid_argument("extract_at: negative length");
    auto n0 = static_cast<long long>(std::floor(start));
    double frac = start - n0;
    auto sample = [&](long long j) -> std::complex<double> {
        return (j >= 0 && j < static_cast<long long>(x.size())) ? x[j]
                                                                : std::complex<double>(0, 0);
    };
    std::vector<std::complex<double>> out(len);
    if (frac < 1e-9 || frac > 1 - 1e-9) {
        long long base = frac > 0.5 ? n0 + 1 : n0;
        for (int i = 0; i < len; ++i) out[i] = sample(base + i);
        return out;
    }
    // Delaying the region that starts one sample later by (1 - frac) puts
    // y[i] at x(n0 + frac + i); padding gives the filter context.
    constexpr int kPad = 40;
    std::vector<std::complex<double>> region(static_cast<std::size_t>(len) + 2 * kPad);
    for (std::size_t i = 0; i < region.size(); ++i)
        region[i] = sample(n0 + 1 - kPad + static_cast<long long>(i));
    auto delayed = fractional_delay(region, 1.0 - frac);
    for (int i = 0; i < len; ++i) out[i] = delayed[kPad + i];
    return out;
}

double wrap_phase(double phi) {
    phi = std::remainder(phi, 2 * std::numbers::pi);
    if (phi <= -std::numbers::pi) phi += 2 * std::numbers::pi;
    return phi;
}

double wrap_bins(double bins, double n) {
    double b = std::fmod(bins, n);
    if (b < -n / 2) b += n;
    if (b >= n / 2) b -= n;
    return b;
}

double normal_quantile(double p) {
    if (p <= 0.0 || p >= 1.0) throw std::invalid_argument("normal_quantile: p not in (0,1)");
    // Acklam's piecewise rational approximation.
    static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                               -2.759285104469687e+02, 1.383577518672690e+02,
                               -3.066479806614716e+01, 2.506628277459239e+00};
    static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                               -1.556989798598866e+02, 6.680131188771972e+01,
                               -1.328068155288572e+01};
    static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                               -2.400758277161838e+00, -2.549732539343734e+00,
                               4.374664141464968e+00,  2.938163982698783e+00};
    static const double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                               2.445134137142996e+00, 3.754408661907416e+00};
    constexpr double p_low = 0.02425;

    if (p < p_low) {
        double q = std::sqrt(-2 * std::log(p));
        return (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
               ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1);
    }
    if (p > 1 - p_low) {
        double q = std::sqrt(-2 * std::log(1 - p));
        return -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
               ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1);
    }
    double q = p - 0.5;
    double r = q * q;
    return (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
           (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1);
}

}  // namespace b2lora::dsp
