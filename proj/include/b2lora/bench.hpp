#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "b2lora/combiner.hpp"
#include "b2lora/orbit.hpp"
#include "b2lora/phy.hpp"

namespace b2lora::bench {

// Experiment description loaded from a JSON spec file; drives gen and sweep.
struct ExperimentSpec {
    LoraConfig config;
    orbit::PassProfile pass;
    orbit::ImpairmentSpec impairments;
    std::vector<double> rgr_grid_db = {0.0};
    std::vector<std::uint64_t> seeds = {1};
    std::vector<std::string> methods = {"b2lora", "lora-baseline"};
    int max_packets = 8;
    int stride = 0;          // 0 = default
    int cr = 1;              // bookkeeping only; the pipeline is symbol-level
    SymbolSeq payload;       // empty = drawn from the seed

    void validate() const;   // throws std::invalid_argument with field names
};

ExperimentSpec load_spec(const std::filesystem::path& file);
std::string spec_to_json(const ExperimentSpec& spec);

// FNV-1a over the canonicalized spec fields; stable across runs.
std::string config_hash(const ExperimentSpec& spec);

// Fixed CSV schema (kept byte-stable for determinism checks).
extern const char* kCsvHeader;

struct MetricsRow {
    std::string method;
    double rgr_db = 0;
    double max_elevation_deg = 0;
    int n_combined = 0;
    double ser = 1.0;        // NaN = cell failed before decode
    double prr = 0;
    int detected = 0;
    double snr_gain_db = 0;  // NaN when no combination happened
    std::uint64_t seed = 0;
    std::string config_hash;

    std::string to_csv() const;
};

// Capture + manifest sidecar I/O. The capture is interleaved little-endian
// float32 I/Q; the manifest is JSON with units in the field names.
struct CaptureSet {
    IqSignal capture;
    LoraConfig config;
    orbit::PassProfile pass;
    SymbolSeq payload;
    std::vector<orbit::PacketRecord> packets;
    double rgr_db = 0;
    double noise_power = 0;
    double signal_power = 0;
    std::uint64_t seed = 0;
    std::string hash;
};

CaptureSet generate_capture(const ExperimentSpec& spec, double rgr_db, std::uint64_t seed);
void write_capture(const CaptureSet& set, const std::filesystem::path& base_path);
CaptureSet read_capture(const std::filesystem::path& base_path);  // base or base.cf32

// Run one method on a capture; payload from the manifest is the SER reference.
MetricsRow run_method(const CaptureSet& set, const std::string& method,
                      const combine::PipelineOptions& opt);

struct SweepSummary {
    std::string method;
    double detect_threshold_rgr_db;  // lowest swept RGR with PRR > 0
    double decode_threshold_rgr_db;  // lowest swept RGR with SER < 1%
};

struct SweepResult {
    std::vector<MetricsRow> rows;    // deterministic spec order
    std::vector<SweepSummary> summaries;
    std::string csv() const;
    std::string summary_csv() const;
};

SweepResult run_sweep(const ExperimentSpec& spec);

// CLI process exit codes.
enum ExitCode {
    kOk = 0,
    kNoDetection = 2,
    kDecodeFailure = 3,
    kIoError = 4,
    kInvalidSpec = 5,
};

}  // namespace b2lora::bench
