#include "b2lora/bench.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>
#include <stdexcept>
#include <utility>

#include "json.hpp"

namespace b2lora::bench {

using ordered_json = nlohmann::ordered_json;

namespace {

constexpr double kPi = 3.141592653589793238462643383279502884;

double deg_to_rad(double d) { return d * kPi / 180.0; }
double rad_to_deg(double r) { return r * 180.0 / kPi; }

std::string fmt(double v, const char* spec) {
    if (std::isnan(v)) return "nan";
    char buf[64];
    std::snprintf(buf, sizeof(buf), spec, v);
    return buf;
}

// Canonical JSON of everything that defines an experiment; the sweep's
// per-cell rgr and seed are grid inputs, not part of the hash.
ordered_json spec_json(const ExperimentSpec& s) {
    ordered_json j;
    j["lora"] = {{"sf", s.config.sf},
                 {"bw_hz", s.config.bw_hz},
                 {"sample_rate_hz", s.config.sample_rate_hz},
                 {"preamble_len", s.config.preamble_len},
                 {"sync_len", s.config.sync_len},
                 {"sfd_len", s.config.sfd_len},
                 {"payload_len", s.config.payload_len},
                 {"carrier_hz", s.config.carrier_hz}};
    j["pass"] = {{"altitude_m", s.pass.altitude_m},
                 {"max_elevation_deg", rad_to_deg(s.pass.max_elevation_rad)},
                 {"tau_s", s.pass.tau_s},
                 {"n_transmissions", s.pass.n_transmissions},
                 {"pass_duration_s", s.pass.pass_duration_s}};
    j["impairments"] = {{"hop_phase_jitter_rsd", s.impairments.hop_phase_jitter_rsd},
                        {"cfo_base_hz", s.impairments.cfo_base_hz},
                        {"cfo_jitter_hz", s.impairments.cfo_jitter_hz},
                        {"arrival_jitter_max_s", s.impairments.arrival_jitter_max_s},
                        {"cfo_hz", s.impairments.cfo_hz},
                        {"sto_fraction", s.impairments.sto_fraction},
                        {"initial_phase_rad", s.impairments.initial_phase_rad},
                        {"arrival_jitter_s", s.impairments.arrival_jitter_s},
                        {"amplitude", s.impairments.amplitude}};
    j["rgr_grid_db"] = s.rgr_grid_db;
    j["seeds"] = s.seeds;
    j["methods"] = s.methods;
    j["max_packets"] = s.max_packets;
    j["stride"] = s.stride;
    j["cr"] = s.cr;
    j["payload"] = s.payload;
    return j;
}

ordered_json lora_json(const LoraConfig& c) {
    return {{"sf", c.sf},
            {"bw_hz", c.bw_hz},
            {"sample_rate_hz", c.sample_rate_hz},
            {"preamble_len", c.preamble_len},
            {"sync_len", c.sync_len},
            {"sfd_len", c.sfd_len},
            {"payload_len", c.payload_len},
            {"carrier_hz", c.carrier_hz}};
}

LoraConfig lora_from_json(const ordered_json& j) {
    LoraConfig c;
    c.sf = j.value("sf", c.sf);
    c.bw_hz = j.value("bw_hz", c.bw_hz);
    c.sample_rate_hz = j.value("sample_rate_hz", c.sample_rate_hz);
    c.preamble_len = j.value("preamble_len", c.preamble_len);
    c.sync_len = j.value("sync_len", c.sync_len);
    c.sfd_len = j.value("sfd_len", c.sfd_len);
    c.payload_len = j.value("payload_len", c.payload_len);
    c.carrier_hz = j.value("carrier_hz", c.carrier_hz);
    return c;
}

ordered_json pass_json(const orbit::PassProfile& p) {
    return {{"altitude_m", p.altitude_m},
            {"max_elevation_deg", rad_to_deg(p.max_elevation_rad)},
            {"carrier_hz", p.carrier_hz},
            {"tau_s", p.tau_s},
            {"n_transmissions", p.n_transmissions},
            {"pass_duration_s", p.pass_duration_s}};
}

orbit::PassProfile pass_from_json(const ordered_json& j) {
    orbit::PassProfile p;
    p.altitude_m = j.value("altitude_m", p.altitude_m);
    if (j.contains("max_elevation_deg"))
        p.max_elevation_rad = deg_to_rad(j["max_elevation_deg"].get<double>());
    p.carrier_hz = j.value("carrier_hz", p.carrier_hz);
    p.tau_s = j.value("tau_s", p.tau_s);
    p.n_transmissions = j.value("n_transmissions", p.n_transmissions);
    p.pass_duration_s = j.value("pass_duration_s", p.pass_duration_s);
    return p;
}

// Largest frequency-track curvature a pair of packets can differ by,
// with headroom for drawn CFO spread.
double slope_search_limit(const orbit::PassProfile& pass) {
    double max_rate = 0;
    const double dur = pass.duration_s();
    for (int i = 0; i <= 512; ++i) {
        double t = dur * i / 512;
        max_rate = std::max(max_rate, std::abs(orbit::doppler_rate_hz_s(pass, t)));
    }
    return 2 * max_rate + 20.0;
}

}  // namespace

void ExperimentSpec::validate() const {
    config.validate();
    pass.validate();
    impairments.validate(pass.n_transmissions);
    if (pass.carrier_hz != config.carrier_hz)
        throw std::invalid_argument("spec: pass.carrier_hz != lora.carrier_hz");
    if (rgr_grid_db.empty()) throw std::invalid_argument("spec: rgr_grid_db empty");
    if (seeds.empty()) throw std::invalid_argument("spec: seeds empty");
    if (methods.empty()) throw std::invalid_argument("spec: methods empty");
    for (const auto& m : methods)
        if (!combine::method_from_name(m))
            throw std::invalid_argument("spec: unknown method '" + m + "'");
    if (max_packets < 1) throw std::invalid_argument("spec: max_packets < 1");
    if (stride < 0) throw std::invalid_argument("spec: stride negative");
    if (cr < 1 || cr > 4) throw std::invalid_argument("spec: cr out of [1,4]");
    if (!payload.empty()) {
        if (static_cast<int>(payload.size()) != config.payload_len)
            throw std::invalid_argument("spec: payload length != lora.payload_len");
        for (int s : payload)
            if (s < 0 || s >= config.chips())
                throw std::invalid_argument("spec: payload symbol out of range");
    }
}

ExperimentSpec load_spec(const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in) throw std::runtime_error("cannot open spec file: " + file.string());
    ordered_json j;
    try {
        in >> j;
    } catch (const std::exception& e) {
        throw std::invalid_argument("spec parse error in " + file.string() + ": " + e.what());
    }

    ExperimentSpec s;
    try {
        if (j.contains("lora")) s.config = lora_from_json(j["lora"]);
        if (j.contains("pass")) s.pass = pass_from_json(j["pass"]);
        s.pass.carrier_hz = s.config.carrier_hz;
        if (j.contains("impairments")) {
            const auto& ji = j["impairments"];
            auto& imp = s.impairments;
            imp.hop_phase_jitter_rsd = ji.value("hop_phase_jitter_rsd", imp.hop_phase_jitter_rsd);
            imp.cfo_base_hz = ji.value("cfo_base_hz", imp.cfo_base_hz);
            imp.cfo_jitter_hz = ji.value("cfo_jitter_hz", imp.cfo_jitter_hz);
            imp.arrival_jitter_max_s = ji.value("arrival_jitter_max_s", imp.arrival_jitter_max_s);
            imp.cfo_hz = ji.value("cfo_hz", imp.cfo_hz);
            imp.sto_fraction = ji.value("sto_fraction", imp.sto_fraction);
            imp.initial_phase_rad = ji.value("initial_phase_rad", imp.initial_phase_rad);
            imp.arrival_jitter_s = ji.value("arrival_jitter_s", imp.arrival_jitter_s);
            imp.amplitude = ji.value("amplitude", imp.amplitude);
        }
        s.rgr_grid_db = j.value("rgr_grid_db", s.rgr_grid_db);
        s.seeds = j.value("seeds", s.seeds);
        s.methods = j.value("methods", s.methods);
        s.max_packets = j.value("max_packets", s.max_packets);
        s.stride = j.value("stride", s.stride);
        s.cr = j.value("cr", s.cr);
        s.payload = j.value("payload", s.payload);
    } catch (const std::invalid_argument&) {
        throw;
    } catch (const std::exception& e) {
        throw std::invalid_argument("spec field error in " + file.string() + ": " + e.what());
    }
    s.validate();
    return s;
}

std::string spec_to_json(const ExperimentSpec& spec) { return spec_json(spec).dump(2) + "\n"; }

std::string config_hash(const ExperimentSpec& spec) {
    const std::string bytes = spec_json(spec).dump();
    std::uint64_t h = 14695981039346656037ull;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

const char* kCsvHeader =
    "method,rgr_db,max_elevation_deg,n_combined,ser,prr,detected,snr_gain_db,seed,config_hash";

std::string MetricsRow::to_csv() const {
    std::ostringstream out;
    out << method << ',' << fmt(rgr_db, "%.2f") << ',' << fmt(max_elevation_deg, "%.2f") << ','
        << n_combined << ',' << fmt(ser, "%.6f") << ',' << fmt(prr, "%.4f") << ',' << detected
        << ',' << fmt(snr_gain_db, "%.3f") << ',' << seed << ',' << config_hash;
    return out.str();
}

CaptureSet generate_capture(const ExperimentSpec& spec, double rgr_db, std::uint64_t seed) {
    spec.validate();
    CaptureSet set;
    set.config = spec.config;
    set.pass = spec.pass;
    set.rgr_db = rgr_db;
    set.seed = seed;
    set.hash = config_hash(spec);

    set.payload = spec.payload;
    if (set.payload.empty()) {
        std::mt19937_64 rng(seed ^ 0x5eedf00dull);
        std::uniform_int_distribution<int> sym(0, spec.config.chips() - 1);
        set.payload.resize(spec.config.payload_len);
        for (int& s : set.payload) s = sym(rng);
    }

    orbit::ImpairmentSpec imp = spec.impairments;
    imp.rgr_db = rgr_db;
    imp.seed = seed;
    auto result = orbit::synthesize_pass(spec.config, spec.pass, imp, set.payload);
    set.capture = std::move(result.capture);
    set.packets = std::move(result.packets);
    set.noise_power = result.noise_power;
    set.signal_power = result.signal_power;
    return set;
}

void write_capture(const CaptureSet& set, const std::filesystem::path& base_path) {
    std::filesystem::path base = base_path;
    if (base.extension() == ".cf32" || base.extension() == ".manifest") base.replace_extension();
    if (base.has_parent_path()) std::filesystem::create_directories(base.parent_path());

    {
        std::ofstream out(base.string() + ".cf32", std::ios::binary);
        if (!out) throw std::runtime_error("cannot write " + base.string() + ".cf32");
        std::vector<float> buf(set.capture.samples.size() * 2);
        for (std::size_t i = 0; i < set.capture.samples.size(); ++i) {
            buf[2 * i] = static_cast<float>(set.capture.samples[i].real());
            buf[2 * i + 1] = static_cast<float>(set.capture.samples[i].imag());
        }
        out.write(reinterpret_cast<const char*>(buf.data()),
                  static_cast<std::streamsize>(buf.size() * sizeof(float)));
        if (!out) throw std::runtime_error("short write to " + base.string() + ".cf32");
    }

    ordered_json j;
    j["format"] = "cf32";
    j["sample_rate_hz"] = set.capture.sample_rate_hz;
    j["n_samples"] = set.capture.samples.size();
    j["rgr_db"] = set.rgr_db;
    j["noise_power"] = set.noise_power;
    j["signal_power"] = set.signal_power;
    j["seed"] = set.seed;
    j["config_hash"] = set.hash;
    j["lora"] = lora_json(set.config);
    j["pass"] = pass_json(set.pass);
    j["payload"] = set.payload;
    ordered_json packets = ordered_json::array();
    for (const auto& p : set.packets)
        packets.push_back({{"emission_s", p.emission_s},
                           {"arrival_s", p.arrival_s},
                           {"cfo_hz", p.cfo_hz},
                           {"sto_fraction", p.sto_fraction},
                           {"initial_phase_rad", p.initial_phase_rad},
                           {"amplitude", p.amplitude},
                           {"doppler_at_emission_hz", p.doppler_at_emission_hz}});
    j["packets"] = packets;

    std::ofstream out(base.string() + ".manifest");
    if (!out) throw std::runtime_error("cannot write " + base.string() + ".manifest");
    out << j.dump(2) << '\n';
}

CaptureSet read_capture(const std::filesystem::path& base_path) {
    std::filesystem::path base = base_path;
    if (base.extension() == ".cf32" || base.extension() == ".manifest") base.replace_extension();

    std::ifstream manifest(base.string() + ".manifest");
    if (!manifest) throw std::runtime_error("cannot open " + base.string() + ".manifest");
    ordered_json j;
    try {
        manifest >> j;
    } catch (const std::exception& e) {
        throw std::runtime_error("manifest parse error: " + std::string(e.what()));
    }

    CaptureSet set;
    set.config = lora_from_json(j.at("lora"));
    set.pass = pass_from_json(j.at("pass"));
    set.payload = j.value("payload", SymbolSeq{});
    set.rgr_db = j.value("rgr_db", 0.0);
    set.noise_power = j.value("noise_power", 0.0);
    set.signal_power = j.value("signal_power", 0.0);
    set.seed = j.value("seed", std::uint64_t{0});
    set.hash = j.value("config_hash", std::string{});
    if (j.contains("packets"))
        for (const auto& p : j["packets"]) {
            orbit::PacketRecord rec;
            rec.emission_s = p.value("emission_s", 0.0);
            rec.arrival_s = p.value("arrival_s", 0.0);
            rec.cfo_hz = p.value("cfo_hz", 0.0);
            rec.sto_fraction = p.value("sto_fraction", 0.0);
            rec.initial_phase_rad = p.value("initial_phase_rad", 0.0);
            rec.amplitude = p.value("amplitude", 1.0);
            rec.doppler_at_emission_hz = p.value("doppler_at_emission_hz", 0.0);
            set.packets.push_back(rec);
        }

    std::ifstream data(base.string() + ".cf32", std::ios::binary);
    if (!data) throw std::runtime_error("cannot open " + base.string() + ".cf32");
    data.seekg(0, std::ios::end);
    const auto bytes = static_cast<std::size_t>(data.tellg());
    data.seekg(0);
    if (bytes % (2 * sizeof(float)) != 0)
        throw std::runtime_error("capture size is not a whole number of cf32 samples");
    std::vector<float> buf(bytes / sizeof(float));
    data.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(bytes));
    if (!data) throw std::runtime_error("short read from " + base.string() + ".cf32");

    const std::size_t expect = j.value("n_samples", buf.size() / 2);
    if (expect != buf.size() / 2)
        throw std::runtime_error("capture length disagrees with the manifest");
    set.capture.sample_rate_hz = set.config.sample_rate_hz;
    set.capture.samples.resize(buf.size() / 2);
    for (std::size_t i = 0; i < set.capture.samples.size(); ++i)
        set.capture.samples[i] = {buf[2 * i], buf[2 * i + 1]};
    return set;
}

namespace {

MetricsRow run_method_impl(const CaptureSet& set, const std::string& method,
                           const combine::PipelineOptions& opt, combine::ScanCache* cache) {
    if (!combine::method_from_name(method))
        throw std::invalid_argument("unknown method: " + method);
    const double slope_max = slope_search_limit(set.pass);
    combine::CombineReport rep =
        combine::run_pipeline(set.capture, set.config, set.pass.n_transmissions,
                              set.pass.tau_s, slope_max, opt, set.payload, cache);

    MetricsRow row;
    row.method = method;
    row.rgr_db = set.rgr_db;
    row.max_elevation_deg = rad_to_deg(set.pass.max_elevation_rad);
    row.n_combined = rep.n_combined;
    row.ser = rep.ser;
    row.prr = rep.prr;
    row.detected = rep.detected;
    row.snr_gain_db =
        rep.n_combined > 1 ? rep.snr_gain_db : std::numeric_limits<double>::quiet_NaN();
    row.seed = set.seed;
    row.config_hash = set.hash;
    return row;
}

}  // namespace

MetricsRow run_method(const CaptureSet& set, const std::string& method,
                      const combine::PipelineOptions& opt) {
    return run_method_impl(set, method, opt, nullptr);
}

std::string SweepResult::csv() const {
    std::ostringstream out;
    out << kCsvHeader << '\n';
    for (const auto& row : rows) out << row.to_csv() << '\n';
    return out.str();
}

std::string SweepResult::summary_csv() const {
    std::ostringstream out;
    out << "method,detect_threshold_rgr_db,decode_threshold_rgr_db\n";
    for (const auto& s : summaries)
        out << s.method << ',' << fmt(s.detect_threshold_rgr_db, "%.2f") << ','
            << fmt(s.decode_threshold_rgr_db, "%.2f") << '\n';
    return out.str();
}

SweepResult run_sweep(const ExperimentSpec& spec) {
    spec.validate();
    SweepResult result;

    for (double rgr : spec.rgr_grid_db) {
        for (std::uint64_t seed : spec.seeds) {
            CaptureSet set = generate_capture(spec, rgr, seed);
            combine::ScanCache cache;
            for (const std::string& method : spec.methods) {
                auto opt = combine::PipelineOptions::for_method(*combine::method_from_name(method));
                opt.max_packets = spec.max_packets;
                if (spec.stride > 0) opt.stride = spec.stride;
                result.rows.push_back(run_method_impl(set, method, opt, &cache));
            }
        }
    }

    // Thresholds: the lowest RGR of the contiguous passing tail (scanning
    // from the top of the grid down), averaged across seeds per cell.
    std::vector<double> grid = spec.rgr_grid_db;
    std::sort(grid.begin(), grid.end());
    grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
    for (const std::string& method : spec.methods) {
        auto cell_stats = [&](double rgr) {
            double prr_sum = 0, ser_sum = 0;
            int count = 0;
            for (const auto& row : result.rows) {
                if (row.method != method || row.rgr_db != rgr) continue;
                prr_sum += row.prr;
                ser_sum += std::isnan(row.ser) ? 1.0 : row.ser;
                ++count;
            }
            return std::pair<double, double>{count ? prr_sum / count : 0,
                                             count ? ser_sum / count : 1.0};
        };
        SweepSummary summary;
        summary.method = method;
        summary.detect_threshold_rgr_db = std::numeric_limits<double>::quiet_NaN();
        summary.decode_threshold_rgr_db = std::numeric_limits<double>::quiet_NaN();
        for (auto it = grid.rbegin(); it != grid.rend(); ++it) {
            if (cell_stats(*it).first > 0)
                summary.detect_threshold_rgr_db = *it;
            else
                break;
        }
        for (auto it = grid.rbegin(); it != grid.rend(); ++it) {
            if (cell_stats(*it).second < 0.01)
                summary.decode_threshold_rgr_db = *it;
            else
                break;
        }
        result.summaries.push_back(summary);
    }
    return result;
}

}  // namespace b2lora::bench
