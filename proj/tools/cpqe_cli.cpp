#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "cpqe/bench.hpp"
#include "cpqe/config.hpp"

namespace fs = std::filesystem;
using namespace cpqe;

namespace {

std::vector<std::uint64_t> parse_seed_list(const std::string& s) {
  std::vector<std::uint64_t> out;
  std::istringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ','))
    if (!tok.empty()) out.push_back(std::stoull(tok));
  if (out.empty()) throw std::invalid_argument("empty seed list");
  return out;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write: " + path);
  f << text;
}

int cmd_gen_data(const std::string& task_s, long n, std::uint64_t seed,
                 const std::string& out, double gamma, int n_p, int n_a) {
  const Task task = parse_task(task_s);
  const int np = n_p > 0 ? n_p : default_n_p(task);
  const int na = n_a > 0 ? n_a : default_n_a(task);
  generate_dataset(task, n, seed, out, gamma, np, na);
  std::cout << "wrote " << n << " transitions to " << out << " (chunks: " << out
            << ".chunks, n_p=" << np << ", n_a=" << na << ")\n";
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& out_dir) {
  const KvConfig kv = KvConfig::parse_file(config_path);
  const TrainConfig cfg = train_config_from_kv(kv);
  const std::string dataset = kv.get("dataset", "");
  if (dataset.empty())
    throw std::invalid_argument("config missing 'dataset' key");
  const ChunkDataset ds = load_chunks(dataset + ".chunks");
  TrainResult<real> tr = train<real>(cfg, ds);
  write_run_dir(out_dir, kv.text(), tr);
  std::cout << "trained " << method_name(cfg.method, cfg.sample_steps)
            << " for " << cfg.epochs << " epochs; artifacts in " << out_dir
            << "\n";
  if (!tr.curve.empty()) {
    const auto& last = tr.curve.back();
    std::cout << "final policy loss " << last.policy_loss;
    if (last.has_eval)
      std::cout << ", eval return " << last.eval_return << ", success "
                << last.eval_success;
    std::cout << "\n";
  }
  return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& task_s, int episodes,
             const std::string& seeds_s, const std::string& out) {
  TrainResult<real> tr = policy_from_checkpoint(ckpt);
  const Task task = task_s.empty() ? tr.config.task : parse_task(task_s);
  if (task != tr.config.task)
    throw std::invalid_argument("--task differs from the checkpoint's task");
  const auto seeds = parse_seed_list(seeds_s);
  const auto sampler = make_chunk_sampler(tr);

  EvalReport rep;
  rep.method = method_name(tr.config.method, tr.config.sample_steps) +
               (tr.config.backbone == BackboneKind::kMlp ? "-mlp" : "");
  rep.task = task_name(task);
  rep.backbone = tr.config.backbone == BackboneKind::kMlp ? "mlp" : "unet";
  rep.train_seed = tr.config.seed;
  for (const auto s : seeds) {
    const auto stats = closed_loop_execute(sampler, task, episodes, s,
                                           tr.config.n_p, tr.config.n_a);
    SeedEval se;
    se.seed = s;
    se.mean_return = stats.mean_return();
    se.success_rate = stats.success_rate();
    se.mean_length = stats.mean_length();
    se.episodes = episodes;
    const double n = static_cast<double>(stats.returns.size());
    se.left_frac = stats.left_count / n;
    se.right_frac = stats.right_count / n;
    se.none_frac = stats.none_count / n;
    rep.per_seed.push_back(se);
  }
  rep.finalize();
  rep.deviations = standard_deviations_note(task);
  const std::string text = rep.to_json();
  if (!out.empty())
    write_text(out, text);
  else
    std::cout << text;
  std::cout << "eval " << rep.method << " task " << rep.task << ": reward "
            << rep.reward_mean << " +- " << rep.reward_std << ", success "
            << rep.success_mean << "\n";
  return 0;
}

int cmd_bench(const std::string& ckpt, int calls, int warmup,
              const std::string& out) {
  TrainResult<real> tr = policy_from_checkpoint(ckpt);
  const auto sampler = make_chunk_sampler(tr);
  const std::vector<double> state(
      static_cast<size_t>(tr.net().spec.obs_dim), 0.0);
  const LatencyStats st = latency_bench(sampler, state, tr.net().forward_calls,
                                        calls, warmup, tr.config.seed);
  std::ostringstream j;
  j << "{\n  \"method\": \""
    << method_name(tr.config.method, tr.config.sample_steps)
    << "\",\n  \"backbone\": \""
    << (tr.config.backbone == BackboneKind::kMlp ? "mlp" : "unet")
    << "\",\n  \"p50_ms\": " << st.p50_ms << ",\n  \"p90_ms\": " << st.p90_ms
    << ",\n  \"p99_ms\": " << st.p99_ms << ",\n  \"mean_ms\": " << st.mean_ms
    << ",\n  \"calls\": " << st.calls << ",\n  \"forward_calls_per_decision\": "
    << st.forward_calls_per_decision << "\n}\n";
  if (!out.empty())
    write_text(out, j.str());
  else
    std::cout << j.str();
  std::cout << "p50 " << st.p50_ms << " ms, p90 " << st.p90_ms << " ms, p99 "
            << st.p99_ms << " ms over " << st.calls << " calls, "
            << st.forward_calls_per_decision << " forward call(s) per decision\n";
  return 0;
}

int cmd_report(const std::vector<std::string>& runs, const std::string& out) {
  std::vector<std::string> dirs;
  for (const auto& r : runs) {
    if (fs::exists(r + "/eval.json")) {
      dirs.push_back(r);
      continue;
    }
    if (fs::is_directory(r))
      for (const auto& e : fs::directory_iterator(r))
        if (e.is_directory() && fs::exists(e.path() / "eval.json"))
          dirs.push_back(e.path().string());
  }
  std::sort(dirs.begin(), dirs.end());
  if (dirs.empty()) throw std::runtime_error("report: no run directories found");
  const std::string csv = merge_report_csv(dirs);
  if (!out.empty())
    write_text(out, csv);
  else
    std::cout << csv;
  return 0;
}

int cmd_matrix(const std::string& configs, const std::string& out, int jobs,
               int eval_episodes, int bench_calls, int bench_warmup) {
  MatrixOptions opt;
  opt.jobs = jobs;
  opt.eval_episodes = eval_episodes;
  opt.bench_calls = bench_calls;
  opt.bench_warmup = bench_warmup;
  run_matrix(configs, out, opt);
  std::cout << "matrix complete; report.csv and stability.csv in " << out << "\n";
  if (fs::exists(out + "/failures.txt"))
    std::cout << "some cells failed; see " << out << "/failures.txt\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cpqe: one-step consistency policies with Q-ensembles, with "
               "multi-step diffusion and double-Q baselines"};
  app.require_subcommand(1);

  std::string task = "B", out, config, ckpt, seeds = "1";
  long n = 50000;
  std::uint64_t seed = 1;
  double gamma = 0.99;
  int n_p = 0, n_a = 0, episodes = 50, calls = 1000, warmup = 100, jobs = 1;
  int eval_episodes = 50;
  std::vector<std::string> runs;

  auto* gen = app.add_subcommand("gen-data", "generate an offline dataset");
  gen->add_option("--task", task, "A or B")->required();
  gen->add_option("--n", n, "number of per-step transitions")->required();
  gen->add_option("--seed", seed, "rng seed")->required();
  gen->add_option("--out", out, "output path")->required();
  gen->add_option("--gamma", gamma, "chunk reward discount");
  gen->add_option("--n-p", n_p, "prediction horizon (default per task)");
  gen->add_option("--n-a", n_a, "execution length (default per task)");

  auto* tr = app.add_subcommand("train", "train a policy from a config file");
  tr->add_option("--config", config, "key=value config file")->required();
  tr->add_option("--out", out, "run directory")->required();

  auto* ev = app.add_subcommand("eval", "closed-loop evaluation of a checkpoint");
  ev->add_option("--checkpoint", ckpt, "policy checkpoint")->required();
  std::string ev_task;
  ev->add_option("--task", ev_task, "A or B (defaults to the checkpoint's)");
  ev->add_option("--episodes", episodes, "episodes per seed");
  ev->add_option("--seeds", seeds, "comma-separated eval seeds");
  ev->add_option("--out", out, "write the report JSON here");

  auto* be = app.add_subcommand("bench", "latency benchmark of a checkpoint");
  be->add_option("--checkpoint", ckpt, "policy checkpoint")->required();
  be->add_option("--calls", calls, "timed calls (>= 100)");
  be->add_option("--warmup", warmup, "untimed warmup calls");
  be->add_option("--out", out, "write the latency JSON here");

  auto* rp = app.add_subcommand("report", "merge run dirs into the comparison CSV");
  rp->add_option("--runs", runs, "run directories (or a parent directory)")
      ->required()
      ->expected(-1);
  rp->add_option("--out", out, "output CSV path (default stdout)");

  auto* mx = app.add_subcommand("matrix", "train/eval/bench every config in a directory");
  mx->add_option("--configs", config, "directory of .cfg files")->required();
  mx->add_option("--out", out, "output directory")->required();
  mx->add_option("--jobs", jobs, "parallel worker threads");
  mx->add_option("--eval-episodes", eval_episodes, "episodes per cell");
  mx->add_option("--bench-calls", calls, "latency bench calls");
  mx->add_option("--bench-warmup", warmup, "latency bench warmup");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (gen->parsed())
      return cmd_gen_data(task, n, seed, out, gamma, n_p, n_a);
    if (tr->parsed()) return cmd_train(config, out);
    if (ev->parsed()) return cmd_eval(ckpt, ev_task, episodes, seeds, out);
    if (be->parsed()) return cmd_bench(ckpt, calls, warmup, out);
    if (rp->parsed()) return cmd_report(runs, out);
    if (mx->parsed())
      return cmd_matrix(config, out, jobs, eval_episodes, calls, warmup);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
