#include "cpqe/envkit.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace cpqe {

namespace {

struct Rect {
  double x0, x1, y0, y1;
  bool contains(double x, double y) const {
    return x >= x0 && x <= x1 && y >= y0 && y <= y1;
  }
};

constexpr Rect kWall{0.2, 0.8, 0.49, 0.51};
constexpr Rect kDoor{0.0, 1.0, 0.74, 0.76};
constexpr double kSwitchX = 0.5, kSwitchY = 0.62;
constexpr double kStepPenalty = 0.01;
constexpr double kShaping = 10.0;
constexpr double kGoalBonus = 10.0;

double clamp1(double v) { return std::max(-1.0, std::min(1.0, v)); }

bool blocked(const WorldState& w, const Rect& r) {
  if (w.task != Task::kB) return false;
  if (&r == &kDoor) return !w.door_open;
  return true;
}

std::vector<const Rect*> obstacles(const WorldState& w) {
  std::vector<const Rect*> out;
  if (w.task == Task::kB) {
    out.push_back(&kWall);
    if (!w.door_open) out.push_back(&kDoor);
  }
  return out;
}

// Axis-aligned sub-move: rejected entirely when the swept segment overlaps
// a blocking rectangle, so the agent can never end up inside one.
void axis_move(WorldState& w, bool horizontal, double delta) {
  if (delta == 0.0) return;
  double nx = w.ax, ny = w.ay;
  if (horizontal)
    nx = std::max(0.0, std::min(1.0, w.ax + delta));
  else
    ny = std::max(0.0, std::min(1.0, w.ay + delta));
  const double lox = std::min(w.ax, nx), hix = std::max(w.ax, nx);
  const double loy = std::min(w.ay, ny), hiy = std::max(w.ay, ny);
  for (const Rect* r : obstacles(w)) {
    if (hix >= r->x0 && lox <= r->x1 && hiy >= r->y0 && loy <= r->y1) return;
  }
  w.ax = nx;
  w.ay = ny;
}

int patch_category(const WorldState& w, double cx, double cy) {
  if (cx < 0.0 || cx > 1.0 || cy < 0.0 || cy > 1.0) return 1;  // out of bounds
  if (w.task == Task::kB) {
    if (kWall.contains(cx, cy)) return 1;
    if (kDoor.contains(cx, cy)) return 2;
    const double ds = std::hypot(cx - kSwitchX, cy - kSwitchY);
    if (ds <= kCellSize) return 3;
  }
  if (std::hypot(cx - w.gx, cy - w.gy) <= kGoalRadius) return 4;
  return 0;
}

}  // namespace

int act_dim(Task t) { return t == Task::kA ? 2 : 3; }
int max_steps(Task t) { return t == Task::kA ? 100 : 200; }
int default_n_p(Task t) { return t == Task::kA ? 4 : 8; }
int default_n_a(Task t) { return 4; }

WorldState reset_world(Task task, Rng& rng) {
  WorldState w;
  w.task = task;
  w.ax = 0.5;
  w.ay = 0.1;
  if (task == Task::kA) {
    w.gx = rng.uniform(0.2, 0.8);
    w.gy = rng.uniform(0.85, 0.95);
  } else {
    w.gx = 0.5;
    w.gy = 0.9;
  }
  w.door_open = false;
  w.hold_counter = 0;
  w.step_index = 0;
  return w;
}

bool in_obstacle(const WorldState& w, double x, double y) {
  for (const Rect* r : obstacles(w))
    if (r->contains(x, y)) return true;
  return false;
}

StepOut env_step(WorldState& w, const double* action, int n) {
  const int ad = act_dim(w.task);
  double a[3] = {0.0, 0.0, 0.0};
  for (int i = 0; i < ad && i < n; ++i) a[i] = clamp1(action[i]);

  const double d_prev = std::hypot(w.gx - w.ax, w.gy - w.ay);
  axis_move(w, true, kMoveScale * a[0]);
  axis_move(w, false, kMoveScale * a[1]);

  if (w.task == Task::kB && !w.door_open) {
    const bool interact = a[2] >= 0.5;
    const bool at_switch =
        std::hypot(w.ax - kSwitchX, w.ay - kSwitchY) <= kSwitchRadius;
    if (interact && at_switch) {
      w.hold_counter = std::min(kHoldSteps, w.hold_counter + 1);
      if (w.hold_counter >= kHoldSteps) w.door_open = true;
    } else {
      w.hold_counter = 0;
    }
  }

  const double d_new = std::hypot(w.gx - w.ax, w.gy - w.ay);
  StepOut out;
  out.reached = d_new <= kGoalRadius;
  out.reward = (d_prev - d_new) * kShaping - kStepPenalty +
               (out.reached ? kGoalBonus : 0.0);
  ++w.step_index;
  out.done = out.reached || w.step_index >= max_steps(w.task);
  return out;
}

std::vector<double> observe(const WorldState& w) {
  std::vector<double> o;
  o.reserve(kObsDim);
  o.push_back(w.gx - w.ax);
  o.push_back(w.gy - w.ay);
  o.push_back(2.0 * w.ax - 1.0);
  o.push_back(2.0 * w.ay - 1.0);
  o.push_back(w.door_open ? 1.0 : 0.0);
  o.push_back(static_cast<double>(w.hold_counter) / kHoldSteps);
  for (int iy = 0; iy < kPatch; ++iy)
    for (int ix = 0; ix < kPatch; ++ix) {
      const double cx = w.ax + (ix - kPatch / 2) * kCellSize;
      const double cy = w.ay + (iy - kPatch / 2) * kCellSize;
      o.push_back(patch_category(w, cx, cy) / 4.0);
    }
  return o;
}

Expert::Expert(const WorldState& w, Rng& rng) {
  if (w.task == Task::kA) {
    side_ = 0;
    wps_ = {{w.gx, w.gy}};
  } else {
    side_ = rng.uniform() < 0.5 ? -1 : +1;
    const double sx = side_ < 0 ? 0.10 : 0.90;
    wps_ = {{0.5, 0.42}, {sx, 0.42}, {sx, 0.64},
            {kSwitchX, kSwitchY}, {w.gx, w.gy}};
  }
}

std::vector<double> Expert::act(const WorldState& w, Rng& rng) {
  const bool task_b = w.task == Task::kB;
  // advance through waypoints; the switch waypoint is left only once the
  // door is open
  while (wp_ + 1 < wps_.size()) {
    const auto [wx, wy] = wps_[wp_];
    const double d = std::hypot(wx - w.ax, wy - w.ay);
    const bool at_switch_wp = task_b && wp_ == 3;
    if (at_switch_wp) {
      if (w.door_open) {
        ++wp_;
        continue;
      }
      break;
    }
    if (d < 0.05) {
      ++wp_;
      continue;
    }
    break;
  }
  const auto [wx, wy] = wps_[wp_];
  const double dx = wx - w.ax, dy = wy - w.ay;
  const double d = std::hypot(dx, dy);
  double mx = 0.0, my = 0.0;
  if (d > 1e-9 && !(task_b && wp_ == 3 && d < 0.05)) {
    mx = dx / d;
    my = dy / d;
  }
  std::vector<double> a;
  a.push_back(clamp1(mx + rng.uniform(-0.1, 0.1)));
  a.push_back(clamp1(my + rng.uniform(-0.1, 0.1)));
  if (task_b) {
    const bool hold = wp_ == 3 && !w.door_open &&
                      std::hypot(w.ax - kSwitchX, w.ay - kSwitchY) < 0.12;
    a.push_back(clamp1((hold ? 1.0 : -1.0) + rng.uniform(-0.1, 0.1)));
  }
  return a;
}

// ---------------------------------------------------------------------------
// dataset files

namespace {

void write_floats(std::ofstream& f, const float* p, size_t n) {
  f.write(reinterpret_cast<const char*>(p),
          static_cast<std::streamsize>(n * sizeof(float)));
}

struct Episode {
  std::vector<std::vector<double>> obs;   // length T
  std::vector<std::vector<double>> act;   // T
  std::vector<double> rew;                // T
  std::vector<std::uint8_t> done;         // T
  std::vector<double> final_obs;          // observation after the last step
};

Episode run_expert_episode(Task task, Rng& rng) {
  Episode ep;
  WorldState w = reset_world(task, rng);
  Expert expert(w, rng);
  while (true) {
    ep.obs.push_back(observe(w));
    const auto a = expert.act(w, rng);
    const auto out = env_step(w, a);
    ep.act.push_back(a);
    ep.rew.push_back(out.reward);
    ep.done.push_back(out.done ? 1 : 0);
    if (out.done) break;
  }
  ep.final_obs = observe(w);
  return ep;
}

std::string dataset_header(const char* kind, Task task, int obs_dim,
                           int act_dim, long n, const std::string& extra) {
  std::ostringstream ss;
  ss << kind << " v1 task=" << task_name(task) << " obs_dim=" << obs_dim
     << " act_dim=" << act_dim << " n=" << n << extra << "\n";
  return ss.str();
}

}  // namespace

void generate_dataset(Task task, long n, std::uint64_t seed,
                      const std::string& path, double gamma, int n_p, int n_a) {
  if (n < n_p) throw std::invalid_argument("generate_dataset: n must be >= n_p");
  const int ad = act_dim(task);
  std::vector<Episode> eps;
  long rows = 0;
  std::uint64_t e = 0;
  while (rows < n) {
    Rng rng(derive_seed(seed, streams::kEnv, e++));
    eps.push_back(run_expert_episode(task, rng));
    rows += static_cast<long>(eps.back().obs.size());
  }

  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for writing: " + path);
  f << dataset_header("cpqe-dataset", task, kObsDim, ad, n, "");
  long written = 0;
  std::vector<float> row;
  for (const auto& ep : eps) {
    for (size_t t = 0; t < ep.obs.size() && written < n; ++t, ++written) {
      row.clear();
      for (double v : ep.obs[t]) row.push_back(static_cast<float>(v));
      for (double v : ep.act[t]) row.push_back(static_cast<float>(v));
      row.push_back(static_cast<float>(ep.rew[t]));
      const auto& next =
          (t + 1 < ep.obs.size()) ? ep.obs[t + 1] : ep.final_obs;
      for (double v : next) row.push_back(static_cast<float>(v));
      row.push_back(static_cast<float>(ep.done[t]));
      write_floats(f, row.data(), row.size());
    }
  }
  if (!f) throw std::runtime_error("dataset write failed: " + path);
  f.close();

  // chunked view: only episodes fully contained in the first n rows; chunks
  // never span episodes, short tails repeat the last action
  std::vector<std::vector<float>> chunk_rows;
  long consumed = 0;
  for (const auto& ep : eps) {
    const long T = static_cast<long>(ep.obs.size());
    if (consumed + T > n) break;
    consumed += T;
    auto stacked = [&](long t) {
      // concat(obs_{t-1}, obs_t); t == T refers to the final observation
      std::vector<float> s;
      const auto& prev = ep.obs[static_cast<size_t>(std::max(0L, t - 1))];
      const auto& cur = (t >= T) ? ep.final_obs : ep.obs[static_cast<size_t>(t)];
      for (double v : prev) s.push_back(static_cast<float>(v));
      for (double v : cur) s.push_back(static_cast<float>(v));
      return s;
    };
    for (long c = 0; c < T; c += n_a) {
      const long j = std::min<long>(n_a, T - c);
      std::vector<float> r;
      const auto st = stacked(c);
      r.insert(r.end(), st.begin(), st.end());
      for (int i = 0; i < n_p; ++i) {
        const long t = std::min<long>(c + i, T - 1);
        for (double v : ep.act[static_cast<size_t>(t)])
          r.push_back(static_cast<float>(v));
      }
      double agg = 0.0, g = 1.0;
      for (long i = 0; i < j; ++i, g *= gamma)
        agg += g * ep.rew[static_cast<size_t>(c + i)];
      r.push_back(static_cast<float>(agg));
      const auto ns = stacked(c + j);
      r.insert(r.end(), ns.begin(), ns.end());
      const bool done = ep.done[static_cast<size_t>(c + j - 1)] != 0;
      r.push_back(done ? 1.0f : 0.0f);
      r.push_back(done ? 0.0f
                       : static_cast<float>(std::pow(gamma, static_cast<double>(n_a))));
      chunk_rows.push_back(std::move(r));
    }
  }

  std::ostringstream extra;
  extra << " n_p=" << n_p << " n_a=" << n_a << " gamma=" << gamma;
  std::ofstream cf(path + ".chunks", std::ios::binary);
  if (!cf) throw std::runtime_error("cannot open for writing: " + path + ".chunks");
  cf << dataset_header("cpqe-chunks", task, kObsDim, ad,
                       static_cast<long>(chunk_rows.size()), extra.str());
  for (const auto& r : chunk_rows) write_floats(cf, r.data(), r.size());
  if (!cf) throw std::runtime_error("chunk write failed: " + path);
}

namespace {

struct Header {
  std::string kind;
  Task task;
  int obs_dim, act_dim;
  long n;
  int n_p = 0, n_a = 0;
  double gamma = 0.0;
};

Header parse_header(std::istream& f, const std::string& path) {
  std::string line;
  if (!std::getline(f, line)) throw std::runtime_error("empty file: " + path);
  std::istringstream ss(line);
  Header h;
  std::string version;
  ss >> h.kind >> version;
  if (version != "v1") throw std::runtime_error("bad version in " + path);
  std::string kv;
  h.task = Task::kA;
  while (ss >> kv) {
    const auto pos = kv.find('=');
    if (pos == std::string::npos) continue;
    const std::string k = kv.substr(0, pos), v = kv.substr(pos + 1);
    if (k == "task") h.task = parse_task(v);
    else if (k == "obs_dim") h.obs_dim = std::stoi(v);
    else if (k == "act_dim") h.act_dim = std::stoi(v);
    else if (k == "n") h.n = std::stol(v);
    else if (k == "n_p") h.n_p = std::stoi(v);
    else if (k == "n_a") h.n_a = std::stoi(v);
    else if (k == "gamma") h.gamma = std::stod(v);
  }
  return h;
}

}  // namespace

StepDataset load_dataset(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open dataset: " + path);
  const Header h = parse_header(f, path);
  if (h.kind != "cpqe-dataset") throw std::runtime_error("not a dataset file: " + path);
  StepDataset d;
  d.task = h.task;
  d.obs_dim = h.obs_dim;
  d.act_dim = h.act_dim;
  d.n = h.n;
  const long w = 2L * h.obs_dim + h.act_dim + 2;
  std::vector<float> buf(static_cast<size_t>(w));
  d.obs.resize(h.obs_dim, h.n);
  d.act.resize(h.act_dim, h.n);
  d.next_obs.resize(h.obs_dim, h.n);
  d.reward.resize(h.n);
  d.done.resize(h.n);
  for (long j = 0; j < h.n; ++j) {
    f.read(reinterpret_cast<char*>(buf.data()),
           static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (!f) throw std::runtime_error("truncated dataset: " + path);
    long p = 0;
    for (int i = 0; i < h.obs_dim; ++i) d.obs(i, j) = buf[static_cast<size_t>(p++)];
    for (int i = 0; i < h.act_dim; ++i) d.act(i, j) = buf[static_cast<size_t>(p++)];
    d.reward(j) = buf[static_cast<size_t>(p++)];
    for (int i = 0; i < h.obs_dim; ++i) d.next_obs(i, j) = buf[static_cast<size_t>(p++)];
    d.done(j) = buf[static_cast<size_t>(p++)];
  }
  return d;
}

ChunkDataset load_chunks(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open chunk dataset: " + path);
  const Header h = parse_header(f, path);
  if (h.kind != "cpqe-chunks") throw std::runtime_error("not a chunk file: " + path);
  ChunkDataset d;
  d.task = h.task;
  d.obs_dim = h.obs_dim;
  d.act_dim = h.act_dim;
  d.n = h.n;
  d.n_p = h.n_p;
  d.n_a = h.n_a;
  d.gamma = h.gamma;
  const int sd = 2 * h.obs_dim;
  const int cd = h.n_p * h.act_dim;
  const long w = 2L * sd + cd + 3;
  std::vector<float> buf(static_cast<size_t>(w));
  d.states.resize(sd, h.n);
  d.chunks.resize(cd, h.n);
  d.next_states.resize(sd, h.n);
  d.reward_agg.resize(h.n);
  d.done.resize(h.n);
  d.bootstrap.resize(h.n);
  for (long j = 0; j < h.n; ++j) {
    f.read(reinterpret_cast<char*>(buf.data()),
           static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (!f) throw std::runtime_error("truncated chunk dataset: " + path);
    long p = 0;
    for (int i = 0; i < sd; ++i) d.states(i, j) = buf[static_cast<size_t>(p++)];
    for (int i = 0; i < cd; ++i) d.chunks(i, j) = buf[static_cast<size_t>(p++)];
    d.reward_agg(j) = buf[static_cast<size_t>(p++)];
    for (int i = 0; i < sd; ++i) d.next_states(i, j) = buf[static_cast<size_t>(p++)];
    d.done(j) = buf[static_cast<size_t>(p++)];
    d.bootstrap(j) = buf[static_cast<size_t>(p++)];
  }
  return d;
}

// ---------------------------------------------------------------------------

double RolloutStats::mean_return() const {
  double s = 0.0;
  for (double r : returns) s += r;
  return returns.empty() ? 0.0 : s / static_cast<double>(returns.size());
}

double RolloutStats::success_rate() const {
  double s = 0.0;
  for (auto v : success) s += v;
  return success.empty() ? 0.0 : s / static_cast<double>(success.size());
}

double RolloutStats::mean_length() const {
  double s = 0.0;
  for (int v : lengths) s += v;
  return lengths.empty() ? 0.0 : s / static_cast<double>(lengths.size());
}

RolloutStats closed_loop_execute(const ChunkSamplerFn& sampler, Task task,
                                 int episodes, std::uint64_t seed, int n_p,
                                 int n_a) {
  RolloutStats stats;
  const int ad = act_dim(task);
  for (int e = 0; e < episodes; ++e) {
    Rng rng(seed + static_cast<std::uint64_t>(e));
    WorldState w = reset_world(task, rng);
    std::vector<double> prev = observe(w), cur = prev;
    Eigen::MatrixXd chunk;
    double ret = 0.0;
    int steps = 0;
    bool reached = false;
    int crossed = 0;  // 0 none, -1 left, +1 right
    while (true) {
      if (steps % n_a == 0) {
        std::vector<double> state;
        state.reserve(prev.size() + cur.size());
        state.insert(state.end(), prev.begin(), prev.end());
        state.insert(state.end(), cur.begin(), cur.end());
        chunk = sampler(state, rng);
        if (chunk.rows() != ad || chunk.cols() < n_a)
          throw std::invalid_argument("closed_loop_execute: bad chunk shape");
        ++stats.replans;
      }
      const double oy = w.ay;
      std::vector<double> a(static_cast<size_t>(ad));
      for (int i = 0; i < ad; ++i) a[static_cast<size_t>(i)] = chunk(i, steps % n_a);
      const auto out = env_step(w, a);
      if (crossed == 0 && oy < 0.5 && w.ay >= 0.5)
        crossed = (w.ax < 0.5) ? -1 : +1;
      ret += out.reward;
      ++steps;
      prev = cur;
      cur = observe(w);
      if (out.done) {
        reached = out.reached;
        break;
      }
    }
    stats.returns.push_back(ret);
    stats.lengths.push_back(steps);
    stats.success.push_back(reached ? 1 : 0);
    if (crossed < 0) ++stats.left_count;
    else if (crossed > 0) ++stats.right_count;
    else ++stats.none_count;
  }
  return stats;
}

}  // namespace cpqe
