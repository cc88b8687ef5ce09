#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "cpqe/rng.hpp"

namespace cpqe {

enum class Task { kA, kB };

inline Task parse_task(const std::string& s) {
  if (s == "A" || s == "a") return Task::kA;
  if (s == "B" || s == "b") return Task::kB;
  throw std::invalid_argument("unknown task: " + s);
}
inline const char* task_name(Task t) { return t == Task::kA ? "A" : "B"; }

inline constexpr int kObsDim = 31;  // goal vec 2 + pos 2 + door 1 + hold 1 + 5x5 patch
inline constexpr int kPatch = 5;
inline constexpr double kCellSize = 0.05;
inline constexpr double kMoveScale = 0.05;
inline constexpr double kGoalRadius = 0.05;
inline constexpr double kSwitchRadius = 0.15;
inline constexpr int kHoldSteps = 3;

int act_dim(Task t);          // A: 2, B: 3 (movement + interact)
int max_steps(Task t);        // A: 100, B: 200
int default_n_p(Task t);      // A: 4, B: 8
int default_n_a(Task t);      // A: 4, B: 4

struct WorldState {
  Task task = Task::kA;
  double ax = 0.5, ay = 0.1;  // agent, unit square
  double gx = 0.5, gy = 0.9;  // goal
  bool door_open = false;
  int hold_counter = 0;       // consecutive interact steps at the switch, 0..3
  int step_index = 0;
};

struct StepOut {
  double reward = 0.0;
  bool done = false;
  bool reached = false;
};

WorldState reset_world(Task task, Rng& rng);

// Clamps all action components to [-1, 1]; never rejects input.
StepOut env_step(WorldState& w, const double* action, int n);
inline StepOut env_step(WorldState& w, const std::vector<double>& a) {
  return env_step(w, a.data(), static_cast<int>(a.size()));
}

// Normalized observation, all components in [-1, 1].
std::vector<double> observe(const WorldState& w);

// True when (x, y) lies inside a blocking rectangle (wall, or closed door).
bool in_obstacle(const WorldState& w, double x, double y);

// Multimodal scripted behavior policy. Commits to a LEFT or RIGHT route
// around the wall with probability 1/2 at construction.
class Expert {
 public:
  Expert(const WorldState& w, Rng& rng);
  std::vector<double> act(const WorldState& w, Rng& rng);
  int side() const { return side_; }  // -1 left, +1 right, 0 task A

 private:
  int side_ = 0;
  size_t wp_ = 0;
  std::vector<std::pair<double, double>> wps_;
};

// ---------------------------------------------------------------------------
// offline dataset

struct StepDataset {
  Task task = Task::kA;
  int obs_dim = kObsDim;
  int act_dim = 2;
  long n = 0;
  // column j = one transition
  Eigen::MatrixXf obs, act, next_obs;
  Eigen::VectorXf reward, done;
};

struct ChunkDataset {
  Task task = Task::kA;
  int obs_dim = kObsDim;
  int act_dim = 2;
  int n_p = 4, n_a = 4;
  double gamma = 0.99;
  long n = 0;
  // column j = one chunked transition; chunk flattened time-major (t*act + c)
  Eigen::MatrixXf states, chunks, next_states;
  Eigen::VectorXf reward_agg, done, bootstrap;
};

// Runs the scripted expert to produce exactly n per-step rows at `path`
// plus the chunked view at `path + ".chunks"`. Deterministic given seed.
void generate_dataset(Task task, long n, std::uint64_t seed,
                      const std::string& path, double gamma, int n_p, int n_a);

StepDataset load_dataset(const std::string& path);
ChunkDataset load_chunks(const std::string& path);

// ---------------------------------------------------------------------------
// closed-loop chunked execution

struct RolloutStats {
  std::vector<double> returns;
  std::vector<int> lengths;
  std::vector<std::uint8_t> success;
  long left_count = 0, right_count = 0, none_count = 0;
  long replans = 0;

  double mean_return() const;
  double success_rate() const;
  double mean_length() const;
};

// sampler(state, rng) -> (act_dim, n_p) action chunk
using ChunkSamplerFn =
    std::function<Eigen::MatrixXd(const std::vector<double>&, Rng&)>;

// Maintains a 2-observation stack (first step duplicates the initial
// observation), samples a chunk, executes the first n_a actions, repeats.
// Episode e uses seed + e.
RolloutStats closed_loop_execute(const ChunkSamplerFn& sampler, Task task,
                                 int episodes, std::uint64_t seed, int n_p,
                                 int n_a);

}  // namespace cpqe
