#pragma once

#include <atomic>
#include <string>
#include <vector>

#include "cpqe/config.hpp"
#include "cpqe/trainer.hpp"

namespace cpqe {

// Production scalar type; tests instantiate the templates at double where
// finite-difference accuracy matters.
using real = float;

struct LatencyStats {
  double p50_ms = 0.0, p90_ms = 0.0, p99_ms = 0.0, mean_ms = 0.0;
  int calls = 0;
  long long forward_calls_per_decision = 0;
};

// Times sampler(state, rng) on one thread; warmup calls excluded. The
// forward-call counter must be the backbone's own counter so the per-decision
// count is exact. Rejects calls < 100.
LatencyStats latency_bench(const ChunkSamplerFn& sampler,
                           const std::vector<double>& state,
                           const std::atomic<long long>& forward_counter,
                           int calls, int warmup, std::uint64_t seed);

struct SeedEval {
  std::uint64_t seed = 0;
  double mean_return = 0.0;
  double success_rate = 0.0;
  double mean_length = 0.0;
  int episodes = 0;
  double left_frac = 0.0, right_frac = 0.0, none_frac = 0.0;
};

struct EvalReport {
  std::string method;    // cpbc / cpql / cpqe / diff_t (+ "-mlp")
  std::string task;      // "A" | "B"
  std::string backbone;  // "unet" | "mlp"
  std::uint64_t train_seed = 0;
  std::vector<SeedEval> per_seed;
  double reward_mean = 0.0;  // mean over eval seeds of per-seed means
  double reward_std = 0.0;   // population std over eval seeds
  double success_mean = 0.0;
  LatencyStats latency;  // filled by bench
  std::vector<std::pair<std::string, std::string>> config_echo;
  std::vector<std::string> deviations;

  std::string to_json() const;
  static EvalReport from_json_file(const std::string& path);
  void finalize();  // computes the aggregate fields from per_seed
};

// Scale deviations from the reference experiment, echoed in every report.
std::vector<std::string> standard_deviations_note(Task task);

// ---------------------------------------------------------------------------
// run directories

struct RunArtifacts {
  std::string dir;
  TrainResult<real> result;
};

// Writes config copy, curve.csv, policy.ckpt (+ critic.ckpt) into dir.
void write_run_dir(const std::string& dir, const std::string& config_text,
                   const TrainResult<real>& tr);

void write_curve_csv(const std::string& path, const std::vector<CurveRow>& curve);

// Rebuilds a sampler-ready policy from a checkpoint written by write_run_dir.
TrainResult<real> policy_from_checkpoint(const std::string& path);

// Loads a key=value config file into a TrainConfig (defaults resolved from
// task and method).
TrainConfig train_config_from_kv(const KvConfig& kv);

// ---------------------------------------------------------------------------
// report + matrix

// Merges run directories into the comparison CSV:
// method,task,reward_mean,reward_std,latency_p50_ms,forward_calls
std::string merge_report_csv(const std::vector<std::string>& run_dirs);

// Per-epoch eval-return envelope across seeds, grouped by (method, task,
// backbone): method,task,epoch,return_mean,return_std,return_min,return_max
std::string stability_csv(const std::vector<std::string>& run_dirs);

struct MatrixOptions {
  int jobs = 1;
  int eval_episodes = 50;
  int bench_calls = 1000;
  int bench_warmup = 100;
};

// Trains, evaluates and benches one config into out_dir/<config-stem>.
// Returns the run directory path.
std::string run_cell(const std::string& config_path, const std::string& out_dir,
                     const MatrixOptions& opt);

// Runs every *.cfg in config_dir (parallel worker threads), then writes
// report.csv and stability.csv into out_dir. Per-cell failures are recorded
// in failures.txt and do not stop the rest of the matrix.
void run_matrix(const std::string& config_dir, const std::string& out_dir,
                const MatrixOptions& opt);

}  // namespace cpqe
