#include "b2lora/detector.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <random>
#include <stdexcept>

#include "dsp.hpp"

namespace b2lora::detect {

namespace {

// Clean known prefix, truncated to n_samples and conjugated, in single
// precision for the scan hot path.
std::vector<std::complex<float>> conj_prefix_f(const LoraConfig& cfg, int n_samples) {
    LoraConfig prefix_cfg = cfg;
    prefix_cfg.payload_len = 0;
    IqSignal prefix = modulate_packet(prefix_cfg, {});
    if (n_samples < 1 || n_samples > static_cast<int>(prefix.samples.size()))
        throw std::invalid_argument("chaining_dechirp_scan: block length outside the known prefix");
    std::vector<std::complex<float>> out(n_samples);
    for (int i = 0; i < n_samples; ++i)
        out[i] = std::conj(std::complex<float>(prefix.samples[i]));
    return out;
}

int cyclic_distance(int a, int b, int n) {
    int d = std::abs(a - b) % n;
    return std::min(d, n - d);
}

}  // namespace

PeakSeries chaining_dechirp_scan(const IqSignal& capture, const LoraConfig& cfg,
                                 double block_chirps, int stride) {
    cfg.validate();
    if (capture.sample_rate_hz != cfg.sample_rate_hz)
        throw std::invalid_argument("chaining_dechirp_scan: capture rate != config rate");
    const int spc = cfg.samples_per_chirp();
    if (block_chirps <= 0) block_chirps = cfg.block_chirps();
    if (stride <= 0) stride = spc / 4;

    const int block = static_cast<int>(std::llround(block_chirps * spc));
    const auto conj_block = conj_prefix_f(cfg, block);

    // Keeping every q-th spectral bin equals summing q time segments before
    // a block/q point transform; the worst-case straddle loss matches the
    // full transform's scallop loss, so nothing is given up.
    int q = 1;
    for (int cand : {8, 4, 2})
        if (block % cand == 0) {
            q = cand;
            break;
        }
    const int fft_len = block / q;

    PeakSeries series;
    series.stride = stride;
    series.sample_rate_hz = capture.sample_rate_hz;
    series.block_samples = block;
    const auto& x = capture.samples;
    if (static_cast<int>(x.size()) < block) return series;

    const std::size_t n_win = (x.size() - block) / stride + 1;
    series.peak.resize(n_win);
    series.freq_hz.resize(n_win);

    std::vector<std::complex<float>> folded(fft_len);
    std::vector<std::complex<float>> spec;
    const double fs = capture.sample_rate_hz;
    for (std::size_t w = 0; w < n_win; ++w) {
        const std::complex<double>* base = x.data() + w * stride;
        std::fill(folded.begin(), folded.end(), std::complex<float>(0.f, 0.f));
        for (int m = 0; m < q; ++m) {
            const std::complex<double>* xb = base + static_cast<std::size_t>(m) * fft_len;
            const std::complex<float>* cb = conj_block.data() + static_cast<std::size_t>(m) * fft_len;
            for (int n = 0; n < fft_len; ++n) folded[n] += std::complex<float>(xb[n]) * cb[n];
        }
        dsp::fft_f(folded, spec);
        std::size_t pk = dsp::peak_index_f(spec);
        series.peak[w] = std::abs(spec[pk]);
        double bin = static_cast<double>(pk);
        if (bin >= fft_len / 2.0) bin -= fft_len;
        series.freq_hz[w] = static_cast<float>(bin * fs / fft_len);
    }
    return series;
}

Heatmap build_heatmap(const PeakSeries& series, double tau_s) {
    if (tau_s <= 0) throw std::invalid_argument("build_heatmap: tau must be positive");
    Heatmap map;
    map.tau_s = tau_s;
    if (series.peak.empty() || series.stride <= 0 || series.sample_rate_hz <= 0) return map;
    map.slot_s = series.slot_s();
    map.n_cols = static_cast<int>(std::ceil(tau_s / map.slot_s - 1e-9));
    double total_s = series.time_of(series.peak.size() - 1) + map.slot_s;
    map.n_rows = std::max(1, static_cast<int>(std::ceil(total_s / tau_s - 1e-9)));
    map.cells.assign(static_cast<std::size_t>(map.n_rows) * map.n_cols, 0.f);

    for (std::size_t i = 0; i < series.peak.size(); ++i) {
        double t = series.time_of(i);
        int row = std::min(static_cast<int>(t / tau_s), map.n_rows - 1);
        int col = std::min(static_cast<int>(std::fmod(t, tau_s) / map.slot_s), map.n_cols - 1);
        map.at(row, col) = std::max(map.at(row, col), series.peak[i]);
    }
    return map;
}

void denoise(Heatmap& map, double k) {
    for (int row = 0; row < map.n_rows; ++row) {
        double mean = 0;
        for (int col = 0; col < map.n_cols; ++col) mean += map.at(row, col);
        mean /= std::max(1, map.n_cols);
        float cut = static_cast<float>(k * mean);
        for (int col = 0; col < map.n_cols; ++col)
            if (map.at(row, col) < cut) map.at(row, col) = 0.f;
    }
}

namespace {

// Along-line energy: per row, the best surviving cell within one slot of
// the line, squared and summed.
double line_energy(const Heatmap& map, double a, double b, std::vector<char>* evidence) {
    double sum = 0;
    for (int m = 0; m < map.n_rows; ++m) {
        double c = a + b * m;
        int lo = static_cast<int>(std::floor(c - 1));
        int hi = static_cast<int>(std::ceil(c + 1));
        float best = 0;
        for (int n = lo; n <= hi; ++n) {
            if (n < 0 || n >= map.n_cols) continue;
            if (std::abs(n - c) > 1.0) continue;
            best = std::max(best, map.at(m, n));
        }
        sum += static_cast<double>(best) * best;
        if (evidence) (*evidence)[m] = best > 0 ? 1 : 0;
    }
    return sum;
}

}  // namespace

LineFit fit_packet_line(const Heatmap& map, double max_drift_s_per_period, double accept_factor,
                        std::uint64_t seed) {
    LineFit fit;
    fit.row_evidence.assign(std::max(0, map.n_rows), 0);
    if (map.n_rows <= 0 || map.n_cols <= 0 || map.slot_s <= 0) return fit;

    struct Cell {
        int m;
        double n;
        double w;
    };
    std::vector<Cell> cells;
    std::vector<char> row_seen(map.n_rows, 0);
    for (int m = 0; m < map.n_rows; ++m)
        for (int n = 0; n < map.n_cols; ++n) {
            float v = map.at(m, n);
            if (v <= 0) continue;
            cells.push_back({m, static_cast<double>(n), static_cast<double>(v) * v});
            row_seen[m] = 1;
        }
    int rows_present = 0;
    for (char s : row_seen) rows_present += s;
    if (rows_present < 2) return fit;

    const double b_max = max_drift_s_per_period / map.slot_s;

    // The packet elevates a whole band of slots (every window overlapping
    // it), so a center-of-mass style fit drifts off the narrow alignment
    // ridge. Instead maximize the along-line energy itself: for each
    // candidate slope, sweep all integer intercepts, scoring the sum over
    // rows of the best cell^2 within one slot of the line.
    std::vector<double> score_at(map.n_cols);
    std::vector<double> row_best(map.n_cols);
    auto eval_b = [&](double b, double* a_out) {
        std::fill(score_at.begin(), score_at.end(), 0.0);
        for (int m = 0; m < map.n_rows; ++m) {
            std::fill(row_best.begin(), row_best.end(), 0.0);
            for (const Cell& cell : cells) {
                if (cell.m != m) continue;
                int lo = static_cast<int>(std::ceil(cell.n - b * m - 1));
                int hi = static_cast<int>(std::floor(cell.n - b * m + 1));
                for (int a = std::max(lo, 0); a <= std::min(hi, map.n_cols - 1); ++a)
                    row_best[a] = std::max(row_best[a], cell.w);
            }
            for (int a = 0; a < map.n_cols; ++a) score_at[a] += row_best[a];
        }
        auto it = std::max_element(score_at.begin(), score_at.end());
        *a_out = static_cast<double>(it - score_at.begin());
        return *it;
    };

    double best_b = 0, best_a = 0;
    double best_score = -1;
    auto scan = [&](double lo, double hi, int steps) {
        for (int i = 0; i <= steps; ++i) {
            double b = steps == 0 ? lo : lo + (hi - lo) * i / steps;
            double a = 0;
            double score = eval_b(b, &a);
            if (score > best_score) {
                best_score = score;
                best_b = b;
                best_a = a;
            }
        }
    };
    if (b_max > 0) {
        scan(-b_max, b_max, 200);
        double step = 2 * b_max / 200;
        scan(best_b - step, best_b + step, 20);
    } else {
        scan(0, 0, 0);
    }

    // Sub-slot intercept: weighted median of (col - b*row) over each row's
    // best cell on the ridge.
    std::vector<std::pair<double, double>> ridge;
    double total_w = 0;
    for (int m = 0; m < map.n_rows; ++m) {
        double c = best_a + best_b * m;
        double w = 0, col = 0;
        for (const Cell& cell : cells)
            if (cell.m == m && std::abs(cell.n - c) <= 1.0 && cell.w > w) {
                w = cell.w;
                col = cell.n;
            }
        if (w > 0) {
            ridge.push_back({col - best_b * m, w});
            total_w += w;
        }
    }
    if (!ridge.empty()) {
        std::sort(ridge.begin(), ridge.end());
        double acc = 0;
        for (const auto& [r, w] : ridge) {
            acc += w;
            if (acc >= total_w / 2) {
                best_a = r;
                break;
            }
        }
    }

    fit.a_slots = best_a;
    fit.b_slots_per_period = best_b;
    fit.score = line_energy(map, best_a, best_b, &fit.row_evidence);

    constexpr int kRandomLines = 200;
    std::vector<double> random_scores(kRandomLines);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> rand_a(0.0, map.n_cols);
    std::uniform_real_distribution<double> rand_b(-b_max, b_max);
    for (int r = 0; r < kRandomLines; ++r)
        random_scores[r] = line_energy(map, rand_a(rng), b_max > 0 ? rand_b(rng) : 0.0, nullptr);
    std::sort(random_scores.begin(), random_scores.end());
    fit.noise_score_p95 = random_scores[static_cast<std::size_t>(0.95 * (kRandomLines - 1))];

    int evidenced = 0;
    for (char e : fit.row_evidence) evidenced += e;
    fit.accepted = evidenced >= 2 && fit.score > 0 && fit.score > accept_factor * fit.noise_score_p95;
    return fit;
}

std::vector<DetectionEvent> line_arrivals(const Heatmap& map, const LineFit& fit) {
    std::vector<DetectionEvent> events;
    for (int m = 0; m < map.n_rows; ++m) {
        double col = fit.a_slots + fit.b_slots_per_period * m;
        DetectionEvent e;
        e.period_index = m;
        e.coarse_time_s = m * map.tau_s + (col + 0.5) * map.slot_s;
        int lo = static_cast<int>(std::floor(col - 1));
        int hi = static_cast<int>(std::ceil(col + 1));
        for (int n = std::max(0, lo); n <= std::min(map.n_cols - 1, hi); ++n)
            e.cell_value = std::max(e.cell_value, map.at(m, n));
        e.evidenced = m < static_cast<int>(fit.row_evidence.size()) && fit.row_evidence[m];
        events.push_back(e);
    }
    return events;
}

std::vector<DetectionEvent> single_chirp_detect(const IqSignal& capture, const LoraConfig& cfg,
                                                double tau_s, int min_consecutive) {
    cfg.validate();
    if (tau_s <= 0) throw std::invalid_argument("single_chirp_detect: tau must be positive");
    if (min_consecutive < 2)
        throw std::invalid_argument("single_chirp_detect: min_consecutive < 2");
    const int spc = cfg.samples_per_chirp();
    const int chips = cfg.chips();
    const auto& x = capture.samples;
    const std::size_t n_win = x.size() / spc;
    std::vector<DetectionEvent> events;
    if (n_win < 2) return events;

    std::vector<int> bin(n_win);
    std::vector<double> peak(n_win);
    for (std::size_t w = 0; w < n_win; ++w) {
        auto folded = dechirp_window(cfg, {x.data() + w * spc, static_cast<std::size_t>(spc)});
        std::size_t i = dsp::peak_index(folded);
        bin[w] = static_cast<int>(i);
        peak[w] = std::abs(folded[i]);
    }
    // Noise argmax bins are uniform over 2^sf, so a run of adjacent bins is
    // the discriminator (six consecutive hits have false-alarm probability
    // (3/2^sf)^5 per window); the magnitude gate only thins the noise
    // windows and must sit below the weakest detectable peak.
    const double gate = dsp::median(peak);

    struct Run {
        std::size_t start = 0;
        std::size_t len = 0;
        double strength = 0;
        float max_peak = 0;
    };
    std::map<int, Run> best_per_period;

    std::size_t w = 0;
    while (w < n_win) {
        if (peak[w] <= gate) {
            ++w;
            continue;
        }
        std::size_t end = w + 1;
        while (end < n_win && peak[end] > gate && cyclic_distance(bin[end], bin[end - 1], chips) <= 1)
            ++end;
        std::size_t len = end - w;
        if (static_cast<int>(len) >= min_consecutive) {
            Run run{w, len, 0, 0};
            for (std::size_t i = w; i < end; ++i) {
                run.strength += peak[i];
                run.max_peak = std::max(run.max_peak, static_cast<float>(peak[i]));
            }
            int period = static_cast<int>(w * spc / capture.sample_rate_hz / tau_s);
            auto it = best_per_period.find(period);
            if (it == best_per_period.end() || run.strength > it->second.strength)
                best_per_period[period] = run;
        }
        w = end;
    }

    for (const auto& [period, run] : best_per_period) {
        DetectionEvent e;
        e.period_index = period;
        e.coarse_time_s = run.start * spc / capture.sample_rate_hz;
        e.cell_value = run.max_peak;
        e.evidenced = true;
        events.push_back(e);
    }
    return events;
}

namespace {

// Peak-to-offpeak-mean quality of |folded|^2 accumulated over the known
// up-chirps (preamble + sync), each rotated by its symbol. Returns -1 when
// the windows do not fit in the capture.
double up_quality(const IqSignal& capture, const LoraConfig& cfg, long long start) {
    const int spc = cfg.samples_per_chirp();
    const int chips = cfg.chips();
    const int n_up = cfg.preamble_len + cfg.sync_len;
    if (start < 0 ||
        start + static_cast<long long>(n_up) * spc > static_cast<long long>(capture.samples.size()))
        return -1;

    SymbolSeq sync = sync_symbols(cfg);
    std::vector<double> acc(chips, 0.0);
    for (int k = 0; k < n_up; ++k) {
        int symbol = k < cfg.preamble_len ? 0 : sync[k - cfg.preamble_len];
        auto folded = dechirp_window(
            cfg, {capture.samples.data() + start + static_cast<long long>(k) * spc,
                  static_cast<std::size_t>(spc)});
        for (int b = 0; b < chips; ++b)
            acc[(b - symbol + chips) % chips] += std::norm(folded[b]);
    }
    int pk = static_cast<int>(std::max_element(acc.begin(), acc.end()) - acc.begin());
    constexpr int kGuard = 4;
    double off_sum = 0;
    int off_count = 0;
    for (int b = 0; b < chips; ++b) {
        if (cyclic_distance(b, pk, chips) <= kGuard) continue;
        off_sum += acc[b];
        ++off_count;
    }
    if (off_count == 0 || off_sum <= 0) return -1;
    return acc[pk] / (off_sum / off_count);
}

}  // namespace

std::optional<FrameSync> frame_sync(const IqSignal& capture, const LoraConfig& cfg,
                                    double coarse_sample, int search_samples) {
    cfg.validate();
    const int spc = cfg.samples_per_chirp();
    const int block = cfg.block_samples();
    const long long n = static_cast<long long>(capture.samples.size());
    if (n < block) return std::nullopt;

    const int step = std::max(1, spc / 4);
    const int k_max = (std::max(0, search_samples) + step - 1) / step;

    long long best_c = -1;
    double best_q = -1;
    int n_candidates = 0;
    for (int k = -k_max; k <= k_max; ++k) {
        long long c = static_cast<long long>(std::llround(coarse_sample)) + static_cast<long long>(k) * step;
        double q = up_quality(capture, cfg, c);
        if (q < 0) continue;
        ++n_candidates;
        if (q > best_q) {
            best_q = q;
            best_c = c;
        }
    }
    if (best_c < 0) return std::nullopt;

    // Any window inside the repeated preamble dechirps to a full-coherence
    // tone, so up quality alone cannot reject a candidate sitting a half
    // chirp off the frame start. estimate_frame_offset resolves that branch
    // by frequency plausibility, so the iteration converges on the true
    // start from any candidate the quality scan picks.
    double start = static_cast<double>(best_c);
    double freq = 0;
    for (int iter = 0; iter < 3; ++iter) {
        long long c = std::llround(start);
        c = std::clamp(c, 0ll, n - block);
        FrameOffset off = estimate_frame_offset(
            cfg, {capture.samples.data() + c, static_cast<std::size_t>(block)});
        start = c + off.time_samples;
        freq = off.freq_hz;
        if (std::abs(off.time_samples) < 0.5) break;
    }

    FrameSync sync;
    sync.start_sample = start;
    sync.freq_hz = freq;
    double q_final = up_quality(capture, cfg, std::llround(start));
    sync.quality = q_final >= 0 ? q_final : best_q;
    sync.n_candidates = n_candidates;
    return sync;
}

double refine_accept_quality(int n_windows, double n_eff) {
    n_windows = std::max(1, n_windows);
    n_eff = std::max(1.0, n_eff);
    // Offpeak-normalized noise cells are chi-square with 2*n_windows
    // degrees of freedom scaled to unit mean; the threshold is the
    // (1 - fa/n_eff) quantile via the Wilson-Hilferty cube.
    double dof = 2.0 * n_windows;
    double z = dsp::normal_quantile(1.0 - kRefineFalseAlarm / n_eff);
    double t = 1.0 - 2.0 / (9.0 * dof) + z * std::sqrt(2.0 / (9.0 * dof));
    return t * t * t;
}

std::optional<RefineResult> refine_arrival(const IqSignal& capture, const LoraConfig& cfg,
                                           double anchor_start_sample,
                                           double target_coarse_sample, int search_samples) {
    (void)anchor_start_sample;
    auto sync = frame_sync(capture, cfg, target_coarse_sample, search_samples);
    if (!sync) return std::nullopt;

    const int n_up = cfg.preamble_len + cfg.sync_len;
    const double n_eff =
        static_cast<double>(cfg.chips()) * std::max(1, sync->n_candidates);
    const double threshold = refine_accept_quality(n_up, n_eff);
    if (sync->quality < threshold) return std::nullopt;

    RefineResult result;
    result.target_start_sample = sync->start_sample;
    result.quality = sync->quality;
    result.accept_quality = threshold;
    result.freq_offset_hz = sync->freq_hz;
    return result;
}

}  // namespace b2lora::detect
