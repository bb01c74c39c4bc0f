// cfkd: command-line front end for runs, sweeps, qualitative dumps and the
// annotation service.

#include <chrono>
#include <csignal>
#include <iostream>
#include <thread>

#include "CLI11.hpp"
#include "cfkd/annotation_server.hpp"
#include "cfkd/errors.hpp"
#include "cfkd/harness.hpp"
#include "cfkd/io_util.hpp"
#include "json.hpp"

namespace {

using nlohmann::json;
namespace fs = std::filesystem;
namespace h = cfkd::harness;

json read_json(const fs::path& p) {
  try {
    return json::parse(cfkd::io::read_text(p));
  } catch (const json::parse_error& e) {
    throw cfkd::ConfigError(p.string() + ": not valid JSON (" + e.what() + ")");
  }
}

// --seed replaces the config's seed before parsing so every derived stream follows it.
h::RunConfig load_config(const fs::path& p, std::optional<std::uint64_t> seed) {
  json j = read_json(p);
  if (seed) j["seed"] = *seed;
  return h::parse_run_config(j);
}

void print_rows(const std::vector<h::MetricsRow>& rows) {
  std::cout << h::metrics_header() << '\n';
  for (const auto& r : rows) std::cout << h::to_csv(r) << '\n';
}

std::atomic<bool> g_stop{false};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Counterfactual knowledge distillation lab"};
  app.require_subcommand(1);
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "Suppress progress on stderr");

  fs::path config_path, out_dir = "out";
  std::optional<std::uint64_t> seed;
  std::size_t workers = 1;

  auto* run = app.add_subcommand("run", "Run one method on one configuration");
  run->add_option("--config", config_path, "Run config (JSON)")->required()->check(CLI::ExistingFile);
  run->add_option("--out", out_dir, "Output directory");
  run->add_option("--seed", seed, "Override the config seed");

  auto* sweep = app.add_subcommand("sweep", "Run a sweep over one axis");
  sweep->add_option("--config", config_path, "Sweep spec (JSON)")->required()->check(CLI::ExistingFile);
  sweep->add_option("--out", out_dir, "Output directory");
  sweep->add_option("--seed", seed, "Override the base seed");
  sweep->add_option("--workers", workers, "Parallel cells")->check(CLI::PositiveNumber);

  fs::path run_dir;
  std::size_t k = 50;
  std::uint64_t dump_seed = 0;
  auto* dump = app.add_subcommand("dump", "Qualitative pre/post counterfactual grid for a finished CFKD run");
  dump->add_option("--run", run_dir, "Run directory")->required()->check(CLI::ExistingDirectory);
  dump->add_option("--out", out_dir, "Output directory");
  dump->add_option("--k", k, "Number of test examples")->check(CLI::PositiveNumber);
  dump->add_option("--seed", dump_seed, "Sampling seed");

  std::string host = "127.0.0.1";
  int port = 8080;
  std::optional<fs::path> static_dir;
  auto* serve = app.add_subcommand("serve", "Run CFKD with a human teacher behind the annotation service");
  serve->add_option("--config", config_path, "Run config with teacher.kind = human")
      ->required()
      ->check(CLI::ExistingFile);
  serve->add_option("--out", out_dir, "Output directory");
  serve->add_option("--seed", seed, "Override the config seed");
  serve->add_option("--host", host, "Bind address");
  serve->add_option("--port", port, "Port (0 picks a free one)");
  serve->add_option("--static", static_dir, "Directory of UI assets served at /")->check(CLI::ExistingDirectory);

  CLI11_PARSE(app, argc, argv);
  h::set_verbose(!quiet);

  try {
    if (*run) {
      const auto cfg = load_config(config_path, seed);
      print_rows(h::run(cfg, out_dir).rows);
    } else if (*sweep) {
      json j = read_json(config_path);
      if (seed && j.contains("base") && j["base"].is_object()) j["base"]["seed"] = *seed;
      const auto spec = h::parse_sweep_spec(j);
      const auto outcome = h::sweep(spec, out_dir, workers);
      print_rows(outcome.aggregates);
      if (outcome.failed_cells > 0) {
        std::cerr << outcome.failed_cells << " cell(s) failed; see " << (out_dir / "errors.log").string() << '\n';
        return 1;
      }
    } else if (*dump) {
      const auto d = h::dump_qualitative(run_dir, k, dump_seed, out_dir);
      std::cout << "pre_positive_fraction " << d.pre_positive_fraction << "\npost_positive_fraction "
                << d.post_positive_fraction << '\n';
    } else if (*serve) {
      const auto cfg = load_config(config_path, seed);
      if (cfg.method != h::Method::cfkd || !cfg.teacher || cfg.teacher->kind != cfkd::teach::TeacherKind::human) {
        throw cfkd::ConfigError("serve needs method cfkd with teacher.kind \"human\"");
      }
      cfkd::annotate::AnnotationQueue queue;
      cfkd::annotate::AnnotationServer server(queue, static_dir);
      const int bound = server.start(host, port);
      std::cerr << "annotation service on http://" << host << ':' << bound << "/\n";
      cfkd::teach::HumanTeacher teacher(queue, std::chrono::milliseconds(cfg.teacher->timeout_ms));
      cfkd::engine::Observer obs;
      obs.on_iteration_start = [&queue](std::size_t it) { queue.set_iteration(it); };
      obs.on_feedback = [&queue](const cfkd::engine::FeedbackResult& f) { queue.set_feedback(f.n_correct, f.n_total); };
      obs.on_iteration_end = [&queue](const cfkd::engine::IterationResult& it) {
        if (it.test_report) queue.push_aga(it.test_report->aga);
      };
      print_rows(h::run(cfg, out_dir, &teacher, &obs).rows);
      std::signal(SIGINT, [](int) { g_stop = true; });
      std::cerr << "run finished; status stays available until Ctrl-C\n";
      while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(200));
      server.stop();
    }
  } catch (const cfkd::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
