#include "cpqe/bench.hpp"

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <sstream>
#include <thread>

#include "cpqe/config.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace cpqe {

namespace {

std::string int_list_csv(const std::vector<int>& v) {
  std::ostringstream ss;
  for (size_t i = 0; i < v.size(); ++i) {
    if (i) ss << ",";
    ss << v[i];
  }
  return ss.str();
}

double quantile_ms(const std::vector<double>& sorted_ms, double q) {
  const size_t n = sorted_ms.size();
  const size_t r = static_cast<size_t>(
      std::min<double>(static_cast<double>(n) - 1,
                       std::max(0.0, std::ceil(q * static_cast<double>(n)) - 1)));
  return sorted_ms[r];
}

bool get_bool(const KvConfig& kv, const std::string& key, bool def) {
  const std::string v = kv.get(key, def ? "true" : "false");
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw std::invalid_argument("config: bad boolean for " + key + ": " + v);
}

}  // namespace

LatencyStats latency_bench(const ChunkSamplerFn& sampler,
                           const std::vector<double>& state,
                           const std::atomic<long long>& forward_counter,
                           int calls, int warmup, std::uint64_t seed) {
  if (calls < 100)
    throw std::invalid_argument("latency_bench: need at least 100 calls");
  if (warmup < 0) throw std::invalid_argument("latency_bench: bad warmup");
  Rng rng(derive_seed(seed, streams::kBench));
  for (int i = 0; i < warmup; ++i) (void)sampler(state, rng);

  std::vector<double> ms(static_cast<size_t>(calls));
  const long long before = forward_counter.load();
  for (int i = 0; i < calls; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    (void)sampler(state, rng);
    const auto t1 = std::chrono::steady_clock::now();
    ms[static_cast<size_t>(i)] =
        std::chrono::duration<double, std::milli>(t1 - t0).count();
  }
  const long long delta = forward_counter.load() - before;
  if (delta <= 0 || delta % calls != 0)
    throw std::runtime_error("latency_bench: forward-call count not constant per decision");

  std::vector<double> sorted = ms;
  std::sort(sorted.begin(), sorted.end());
  LatencyStats st;
  st.calls = calls;
  st.p50_ms = quantile_ms(sorted, 0.50);
  st.p90_ms = quantile_ms(sorted, 0.90);
  st.p99_ms = quantile_ms(sorted, 0.99);
  double sum = 0.0;
  for (double v : ms) sum += v;
  st.mean_ms = sum / static_cast<double>(calls);
  st.forward_calls_per_decision = delta / calls;
  return st;
}

// ---------------------------------------------------------------------------
// EvalReport

void EvalReport::finalize() {
  if (per_seed.empty()) return;
  double m = 0.0, s = 0.0, su = 0.0;
  for (const auto& e : per_seed) {
    m += e.mean_return;
    su += e.success_rate;
  }
  m /= static_cast<double>(per_seed.size());
  su /= static_cast<double>(per_seed.size());
  for (const auto& e : per_seed) {
    const double d = e.mean_return - m;
    s += d * d;
  }
  s = std::sqrt(s / static_cast<double>(per_seed.size()));
  reward_mean = m;
  reward_std = s;
  success_mean = su;
}

std::string EvalReport::to_json() const {
  json j;
  j["method"] = method;
  j["task"] = task;
  j["backbone"] = backbone;
  j["train_seed"] = train_seed;
  j["reward_mean"] = reward_mean;
  j["reward_std"] = reward_std;
  j["success_mean"] = success_mean;
  j["per_seed"] = json::array();
  for (const auto& e : per_seed) {
    json pe;
    pe["seed"] = e.seed;
    pe["mean_return"] = e.mean_return;
    pe["success_rate"] = e.success_rate;
    pe["mean_length"] = e.mean_length;
    pe["episodes"] = e.episodes;
    pe["route_mode_fractions"] = {
        {"left", e.left_frac}, {"right", e.right_frac}, {"none", e.none_frac}};
    j["per_seed"].push_back(pe);
  }
  j["latency_ms"] = {{"p50", latency.p50_ms},
                     {"p90", latency.p90_ms},
                     {"p99", latency.p99_ms},
                     {"mean", latency.mean_ms},
                     {"calls", latency.calls}};
  j["forward_calls_per_decision"] = latency.forward_calls_per_decision;
  json echo = json::object();
  for (const auto& [k, v] : config_echo) echo[k] = v;
  j["config"] = echo;
  j["deviations"] = deviations;
  return j.dump(2) + "\n";
}

EvalReport EvalReport::from_json_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open report: " + path);
  json j = json::parse(f);
  EvalReport r;
  r.method = j.at("method").get<std::string>();
  r.task = j.at("task").get<std::string>();
  r.backbone = j.value("backbone", "unet");
  r.train_seed = j.value("train_seed", 0ULL);
  r.reward_mean = j.at("reward_mean").get<double>();
  r.reward_std = j.at("reward_std").get<double>();
  r.success_mean = j.value("success_mean", 0.0);
  for (const auto& pe : j.value("per_seed", json::array())) {
    SeedEval e;
    e.seed = pe.value("seed", 0ULL);
    e.mean_return = pe.value("mean_return", 0.0);
    e.success_rate = pe.value("success_rate", 0.0);
    e.mean_length = pe.value("mean_length", 0.0);
    e.episodes = pe.value("episodes", 0);
    if (pe.contains("route_mode_fractions")) {
      e.left_frac = pe["route_mode_fractions"].value("left", 0.0);
      e.right_frac = pe["route_mode_fractions"].value("right", 0.0);
      e.none_frac = pe["route_mode_fractions"].value("none", 0.0);
    }
    r.per_seed.push_back(e);
  }
  if (j.contains("latency_ms")) {
    r.latency.p50_ms = j["latency_ms"].value("p50", 0.0);
    r.latency.p90_ms = j["latency_ms"].value("p90", 0.0);
    r.latency.p99_ms = j["latency_ms"].value("p99", 0.0);
    r.latency.mean_ms = j["latency_ms"].value("mean", 0.0);
    r.latency.calls = j["latency_ms"].value("calls", 0);
  }
  r.latency.forward_calls_per_decision =
      j.value("forward_calls_per_decision", 0LL);
  return r;
}

std::vector<std::string> standard_deviations_note(Task task) {
  std::vector<std::string> d;
  d.push_back("dataset size 50000 (full-scale runs use 200000)");
  if (task == Task::kB)
    d.push_back("task B chunk lengths n_p=8, n_a=4 (full-scale runs use 16/8)");
  d.push_back("2D desk-scale world stands in for the full 3D environment; "
              "rewards are not comparable in absolute terms");
  return d;
}

// ---------------------------------------------------------------------------
// config resolution

TrainConfig train_config_from_kv(const KvConfig& kv) {
  TrainConfig c;
  c.task = parse_task(kv.get("task", "B"));
  const auto [m, steps] = parse_method(kv.get("method", "cpqe"));
  c.method = m;
  c.sample_steps = (m == Method::kDiff) ? steps : 1;
  const std::string bb = kv.get("backbone", "unet");
  if (bb == "unet")
    c.backbone = BackboneKind::kUnet1d;
  else if (bb == "mlp")
    c.backbone = BackboneKind::kMlp;
  else
    throw std::invalid_argument("config: unknown backbone: " + bb);
  c.eta = kv.get_double("eta", m == Method::kCpql ? 1.0 : 0.5);
  c.beta = kv.get_double("beta", 1.0);
  c.gamma = kv.get_double("gamma", 0.99);
  c.tau = kv.get_double("tau", 0.995);
  c.ensemble_size = static_cast<int>(kv.get_long("ensemble_size", 16));
  c.batch_size = static_cast<int>(kv.get_long("batch_size", 256));
  c.epochs = static_cast<int>(kv.get_long("epochs", 24));
  c.seed = kv.get_u64("seed", 1);
  c.learning_rate = kv.get_double("learning_rate", 1e-4);
  c.n_p = static_cast<int>(kv.get_long("n_p", default_n_p(c.task)));
  c.n_a = static_cast<int>(kv.get_long("n_a", default_n_a(c.task)));
  c.eval_every = static_cast<int>(kv.get_long("eval_every", 2));
  c.eval_episodes = static_cast<int>(kv.get_long("eval_episodes", 30));
  c.critic_updates = get_bool(kv, "critic_updates", true);
  c.sched_eps = kv.get_double("sched_eps", 0.002);
  c.sched_k_max = kv.get_double("sched_k_max", 80.0);
  c.sched_rho = kv.get_double("sched_rho", 7.0);
  c.sched_n = static_cast<int>(kv.get_long("sched_n", 40));
  c.sigma_data = kv.get_double("sigma_data", 0.5);
  c.mlp_hidden = kv.get_int_list("mlp_hidden", {512, 512, 512});
  c.unet_channels = kv.get_int_list("unet_channels", {32, 64});
  c.time_dim = static_cast<int>(kv.get_long("time_dim", 16));
  c.critic_hidden = kv.get_int_list("critic_hidden", {256, 256, 256});
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// run directories

void write_curve_csv(const std::string& path, const std::vector<CurveRow>& curve) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write curve: " + path);
  f << "epoch,policy_loss,critic_loss,eval_return,eval_success\n";
  f << std::setprecision(10);
  for (const auto& r : curve) {
    f << r.epoch << "," << r.policy_loss << "," << r.critic_loss << ",";
    if (r.has_eval)
      f << r.eval_return << "," << r.eval_success;
    else
      f << ",";
    f << "\n";
  }
}

namespace {

std::map<std::string, std::string> checkpoint_meta(const TrainConfig& cfg,
                                                   const BackboneSpec& spec) {
  std::map<std::string, std::string> meta;
  meta["method"] = method_name(cfg.method, cfg.sample_steps);
  meta["sample_steps"] = std::to_string(cfg.sample_steps);
  meta["backbone"] = cfg.backbone == BackboneKind::kMlp ? "mlp" : "unet";
  meta["task"] = task_name(cfg.task);
  meta["n_p"] = std::to_string(cfg.n_p);
  meta["n_a"] = std::to_string(cfg.n_a);
  meta["act_dim"] = std::to_string(spec.act_dim);
  meta["obs_dim"] = std::to_string(spec.obs_dim / 2);
  meta["gamma"] = std::to_string(cfg.gamma);
  meta["eta"] = std::to_string(cfg.eta);
  meta["beta"] = std::to_string(cfg.beta);
  meta["ensemble_size"] = std::to_string(cfg.ensemble_size);
  meta["seed"] = std::to_string(cfg.seed);
  meta["sched_eps"] = std::to_string(cfg.sched_eps);
  meta["sched_k_max"] = std::to_string(cfg.sched_k_max);
  meta["sched_rho"] = std::to_string(cfg.sched_rho);
  meta["sched_n"] = std::to_string(cfg.sched_n);
  meta["sigma_data"] = std::to_string(cfg.sigma_data);
  meta["time_dim"] = std::to_string(cfg.time_dim);
  meta["mlp_hidden"] = int_list_csv(cfg.mlp_hidden);
  meta["unet_channels"] = int_list_csv(cfg.unet_channels);
  meta["critic_hidden"] = int_list_csv(cfg.critic_hidden);
  return meta;
}

std::vector<int> parse_int_csv(const std::string& s) {
  std::vector<int> out;
  std::istringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ','))
    if (!tok.empty()) out.push_back(std::stoi(tok));
  return out;
}

}  // namespace

void write_run_dir(const std::string& dir, const std::string& config_text,
                   const TrainResult<real>& tr) {
  fs::create_directories(dir);
  {
    std::ofstream f(dir + "/config.txt", std::ios::binary);
    f << config_text;
  }
  write_curve_csv(dir + "/curve.csv", tr.curve);
  const PolicyNet<real>& net = tr.net();
  const auto meta = checkpoint_meta(tr.config, net.spec);
  save_checkpoint<real>(dir + "/policy.ckpt", meta, {&net.params, &net.ema},
                        {"", "ema/"});
  if (tr.ensemble) {
    std::vector<const ParamStore<real>*> stores;
    std::vector<std::string> prefixes;
    for (int m = 0; m < tr.ensemble->size(); ++m) {
      stores.push_back(&tr.ensemble->members[static_cast<size_t>(m)].params);
      prefixes.push_back("q" + std::to_string(m) + "/");
      stores.push_back(&tr.ensemble->targets[static_cast<size_t>(m)].params);
      prefixes.push_back("qt" + std::to_string(m) + "/");
    }
    save_checkpoint<real>(dir + "/critic.ckpt", meta, stores, prefixes);
  } else if (tr.dq) {
    save_checkpoint<real>(dir + "/critic.ckpt", meta,
                          {&tr.dq->q1.params, &tr.dq->q2.params,
                           &tr.dq->t1.params, &tr.dq->t2.params},
                          {"q0/", "q1/", "qt0/", "qt1/"});
  }
}

TrainResult<real> policy_from_checkpoint(const std::string& path) {
  const CheckpointData ck = load_checkpoint(path);
  TrainConfig cfg;
  const auto need = [&](const std::string& k) {
    const auto it = ck.meta.find(k);
    if (it == ck.meta.end())
      throw std::runtime_error("checkpoint missing meta key: " + k);
    return it->second;
  };
  const auto [m, steps] = parse_method(need("method"));
  cfg.method = m;
  cfg.sample_steps = (m == Method::kDiff) ? steps : 1;
  cfg.backbone = need("backbone") == "mlp" ? BackboneKind::kMlp
                                           : BackboneKind::kUnet1d;
  cfg.task = parse_task(need("task"));
  cfg.n_p = std::stoi(need("n_p"));
  cfg.n_a = std::stoi(need("n_a"));
  cfg.gamma = std::stod(need("gamma"));
  cfg.eta = std::stod(need("eta"));
  cfg.beta = std::stod(need("beta"));
  cfg.ensemble_size = std::stoi(need("ensemble_size"));
  cfg.seed = std::stoull(need("seed"));
  cfg.sched_eps = std::stod(need("sched_eps"));
  cfg.sched_k_max = std::stod(need("sched_k_max"));
  cfg.sched_rho = std::stod(need("sched_rho"));
  cfg.sched_n = std::stoi(need("sched_n"));
  cfg.sigma_data = std::stod(need("sigma_data"));
  cfg.time_dim = std::stoi(need("time_dim"));
  cfg.mlp_hidden = parse_int_csv(need("mlp_hidden"));
  cfg.unet_channels = parse_int_csv(need("unet_channels"));
  cfg.critic_hidden = parse_int_csv(need("critic_hidden"));

  BackboneSpec spec;
  spec.kind = cfg.backbone;
  spec.hidden = cfg.mlp_hidden;
  spec.channels = cfg.unet_channels;
  spec.horizon = cfg.n_p;
  spec.act_dim = std::stoi(need("act_dim"));
  spec.obs_dim = 2 * std::stoi(need("obs_dim"));
  spec.temb.dim = cfg.time_dim;

  Rng dummy(0);
  PolicyNet<real> net = PolicyNet<real>::build(spec, dummy);
  restore_store(net.params, ck, "");
  restore_store(net.ema, ck, "ema/");

  TrainResult<real> tr;
  tr.config = cfg;
  NoiseSchedule sched = cfg.schedule();
  if (cfg.method == Method::kDiff)
    tr.policy = DiffusionPolicy<real>{std::move(net), sched, cfg.sample_steps};
  else
    tr.policy = ConsistencyPolicy<real>{std::move(net), sched};
  return tr;
}

// ---------------------------------------------------------------------------
// report merging

namespace {

struct GroupStats {
  std::vector<double> run_means;
  std::vector<double> p50s;
  long long forward_calls = 0;
  double single_run_std = 0.0;
};

}  // namespace

std::string merge_report_csv(const std::vector<std::string>& run_dirs) {
  std::map<std::pair<std::string, std::string>, GroupStats> groups;
  for (const auto& dir : run_dirs) {
    const std::string path = dir + "/eval.json";
    if (!fs::exists(path)) continue;
    const EvalReport r = EvalReport::from_json_file(path);
    auto& g = groups[{r.task, r.method}];
    g.run_means.push_back(r.reward_mean);
    g.p50s.push_back(r.latency.p50_ms);
    if (g.forward_calls == 0)
      g.forward_calls = r.latency.forward_calls_per_decision;
    else if (g.forward_calls != r.latency.forward_calls_per_decision)
      throw std::runtime_error("report: forward-call count differs within " +
                               r.method);
    g.single_run_std = r.reward_std;
  }
  std::ostringstream out;
  out << "method,task,reward_mean,reward_std,latency_p50_ms,forward_calls\n";
  out << std::setprecision(10);
  for (const auto& [key, g] : groups) {
    double mean = 0.0;
    for (double v : g.run_means) mean += v;
    mean /= static_cast<double>(g.run_means.size());
    double sd = 0.0;
    if (g.run_means.size() > 1) {
      for (double v : g.run_means) sd += (v - mean) * (v - mean);
      sd = std::sqrt(sd / static_cast<double>(g.run_means.size()));
    } else {
      sd = g.single_run_std;
    }
    double p50 = 0.0;
    for (double v : g.p50s) p50 += v;
    p50 /= static_cast<double>(g.p50s.size());
    out << key.second << "," << key.first << "," << mean << "," << sd << ","
        << p50 << "," << g.forward_calls << "\n";
  }
  return out.str();
}

std::string stability_csv(const std::vector<std::string>& run_dirs) {
  // (task, method) -> epoch -> returns across seeds
  std::map<std::pair<std::string, std::string>, std::map<int, std::vector<double>>> groups;
  for (const auto& dir : run_dirs) {
    const std::string epath = dir + "/eval.json";
    const std::string cpath = dir + "/curve.csv";
    if (!fs::exists(epath) || !fs::exists(cpath)) continue;
    const EvalReport r = EvalReport::from_json_file(epath);
    std::ifstream f(cpath);
    std::string line;
    std::getline(f, line);  // header
    while (std::getline(f, line)) {
      std::istringstream ss(line);
      std::string tok;
      std::vector<std::string> cols;
      while (std::getline(ss, tok, ',')) cols.push_back(tok);
      while (cols.size() < 5) cols.push_back("");
      if (cols.size() < 4 || cols[3].empty()) continue;
      const int epoch = std::stoi(cols[0]);
      groups[{r.task, r.method}][epoch].push_back(std::stod(cols[3]));
    }
  }
  std::ostringstream out;
  out << "method,task,epoch,return_mean,return_std,return_min,return_max\n";
  out << std::setprecision(10);
  for (const auto& [key, epochs] : groups)
    for (const auto& [epoch, vals] : epochs) {
      double mean = 0.0, mn = vals[0], mx = vals[0];
      for (double v : vals) {
        mean += v;
        mn = std::min(mn, v);
        mx = std::max(mx, v);
      }
      mean /= static_cast<double>(vals.size());
      double sd = 0.0;
      for (double v : vals) sd += (v - mean) * (v - mean);
      sd = std::sqrt(sd / static_cast<double>(vals.size()));
      out << key.second << "," << key.first << "," << epoch << "," << mean
          << "," << sd << "," << mn << "," << mx << "\n";
    }
  return out.str();
}

// ---------------------------------------------------------------------------
// matrix

std::string run_cell(const std::string& config_path, const std::string& out_dir,
                     const MatrixOptions& opt) {
  const KvConfig kv = KvConfig::parse_file(config_path);
  const TrainConfig cfg = train_config_from_kv(kv);
  const std::string dataset = kv.get("dataset", "");
  if (dataset.empty())
    throw std::invalid_argument("config: missing dataset path: " + config_path);
  const ChunkDataset ds = load_chunks(dataset + ".chunks");

  TrainResult<real> tr = train<real>(cfg, ds);
  const std::string stem = fs::path(config_path).stem().string();
  const std::string dir = out_dir + "/" + stem;
  write_run_dir(dir, kv.text(), tr);

  EvalReport rep;
  rep.method = method_name(cfg.method, cfg.sample_steps) +
               (cfg.backbone == BackboneKind::kMlp ? "-mlp" : "");
  rep.task = task_name(cfg.task);
  rep.backbone = cfg.backbone == BackboneKind::kMlp ? "mlp" : "unet";
  rep.train_seed = cfg.seed;
  const auto sampler = make_chunk_sampler(tr);
  SeedEval se;
  se.seed = derive_seed(cfg.seed, streams::kEval, 999983);
  const auto stats = closed_loop_execute(sampler, cfg.task, opt.eval_episodes,
                                         se.seed, cfg.n_p, cfg.n_a);
  se.mean_return = stats.mean_return();
  se.success_rate = stats.success_rate();
  se.mean_length = stats.mean_length();
  se.episodes = opt.eval_episodes;
  const double n = static_cast<double>(stats.returns.size());
  se.left_frac = stats.left_count / n;
  se.right_frac = stats.right_count / n;
  se.none_frac = stats.none_count / n;
  rep.per_seed.push_back(se);
  rep.finalize();

  const std::vector<double> bench_state(
      static_cast<size_t>(2 * kObsDim), 0.0);
  rep.latency = latency_bench(sampler, bench_state, tr.net().forward_calls,
                              opt.bench_calls, opt.bench_warmup, cfg.seed);
  for (const auto& [k, v] : kv.entries()) rep.config_echo.emplace_back(k, v);
  rep.deviations = standard_deviations_note(cfg.task);
  {
    std::ofstream f(dir + "/eval.json", std::ios::binary);
    f << rep.to_json();
  }
  return dir;
}

void run_matrix(const std::string& config_dir, const std::string& out_dir,
                const MatrixOptions& opt) {
  std::vector<std::string> configs;
  for (const auto& e : fs::directory_iterator(config_dir))
    if (e.path().extension() == ".cfg") configs.push_back(e.path().string());
  std::sort(configs.begin(), configs.end());
  if (configs.empty())
    throw std::invalid_argument("run_matrix: no .cfg files in " + config_dir);
  fs::create_directories(out_dir);

  std::vector<std::string> run_dirs;
  std::vector<std::string> failures;
  std::mutex mu;
  std::atomic<size_t> next{0};
  const int jobs = std::max(1, opt.jobs);
  auto worker = [&]() {
    while (true) {
      const size_t i = next.fetch_add(1);
      if (i >= configs.size()) return;
      try {
        const std::string dir = run_cell(configs[i], out_dir, opt);
        std::lock_guard<std::mutex> lk(mu);
        run_dirs.push_back(dir);
      } catch (const std::exception& e) {
        std::lock_guard<std::mutex> lk(mu);
        failures.push_back(configs[i] + ": " + e.what());
      }
    }
  };
  std::vector<std::thread> pool;
  for (int i = 0; i < jobs; ++i) pool.emplace_back(worker);
  for (auto& t : pool) t.join();

  std::sort(run_dirs.begin(), run_dirs.end());
  {
    std::ofstream f(out_dir + "/report.csv", std::ios::binary);
    f << merge_report_csv(run_dirs);
  }
  {
    std::ofstream f(out_dir + "/stability.csv", std::ios::binary);
    f << stability_csv(run_dirs);
  }
  if (!failures.empty()) {
    std::ofstream f(out_dir + "/failures.txt");
    for (const auto& s : failures) f << s << "\n";
  }
}

}  // namespace cpqe
