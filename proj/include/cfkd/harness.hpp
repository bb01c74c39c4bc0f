#pragma once

// Experiment harness behind the command-line tool: run configs, single runs,
// sweeps and qualitative dumps.

#include <filesystem>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "cfkd/baselines.hpp"
#include "cfkd/classifier.hpp"
#include "cfkd/engine.hpp"
#include "cfkd/explainer.hpp"
#include "cfkd/squareworld.hpp"
#include "cfkd/teachers.hpp"
#include "json.hpp"

namespace cfkd::harness {

enum class Method { original, diffaug, groupdro, dfr, pclarc, rrclarc, cfkd };
const char* to_string(Method m) noexcept;
/// Progress lines on stderr.
void set_verbose(bool on) noexcept;
std::optional<Method> parse_method(std::string_view s) noexcept;

enum class CavKind { confounder, group };

struct TeacherConfig {
  teach::TeacherKind kind = teach::TeacherKind::oracle;
  /// Size of the decorrelated dataset D* the oracle is trained on.
  std::size_t oracle_samples = 4000;
  /// Human teacher: how long to wait for each verdict.
  std::size_t timeout_ms = 600000;
};

struct RunConfig {
  std::string run_id;
  Method method = Method::original;
  std::uint64_t seed = 0;
  square::DatasetSpec dataset;
  /// Held-out evaluation set; always drawn at correlation 0 unless overridden.
  std::size_t test_samples = 2000;
  double test_correlation = 0.0;
  model::TrainConfig train;
  std::optional<TeacherConfig> teacher;
  engine::CfkdConfig cfkd;
  baselines::DiffAugConfig diffaug;
  baselines::GroupDroConfig groupdro;
  baselines::DfrConfig dfr;
  /// DFR reweighting set: "val" or "train+val".
  std::string dfr_heldout = "train+val";
  CavKind pclarc_cav = CavKind::confounder;
  CavKind rrclarc_cav = CavKind::group;
  std::vector<double> rrclarc_lambdas{1.0, 10.0, 100.0};

  /// Fills derived seeds and checks method/parameter consistency.
  void validate() const;
};

/// Strict parser: unknown keys and wrong types are ConfigErrors naming the key.
RunConfig parse_run_config(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);
/// Canonical form with every default spelled out.
nlohmann::json to_json(const RunConfig& c);
/// Stable hash of the canonical config (run id excluded).
std::string config_fingerprint(const RunConfig& c);
std::string default_run_id(const RunConfig& c);

/// Column names of metrics.csv; the first twelve are fixed.
const std::vector<std::string>& metrics_columns();

struct MetricsRow {
  std::string run_id;
  std::string method;
  double correlation = 0.0;
  std::size_t n_samples = 0;
  std::string teacher;
  std::optional<std::size_t> iteration;
  std::optional<double> feedback_accuracy;
  std::optional<model::EvalReport> report;
  std::uint64_t seed = 0;
  std::string dataset_hash;
  std::string config_fingerprint;
  /// ok | not_applicable | error
  std::string status = "ok";
  /// iteration | final | aggregate
  std::string row_kind = "final";
  std::optional<double> aga_std;
};

std::string to_csv(const MetricsRow& r);
std::string metrics_header();
MetricsRow parse_metrics_row(const std::string& line);

/// Everything a method needs, rebuilt deterministically from a config.
struct Experiment {
  RunConfig config;
  square::Dataset dataset;
  std::vector<square::GroupedExample> test;
  std::string dataset_hash;
};
Experiment prepare(const RunConfig& config);

/// Trains the ERM student of an experiment (shared by every method).
model::ModelParams train_student(const Experiment& ex);
/// Oracle f_O trained on D* drawn with the experiment's spec.
model::ModelParams train_oracle(const Experiment& ex, std::size_t samples);

struct RunOutcome {
  std::vector<MetricsRow> rows;
  nlohmann::json summary;
};

/// Executes one run and writes config.json, metrics.csv, run.json and
/// checkpoints under `out`. Methods that cannot apply produce a
/// not_applicable row instead of throwing.
RunOutcome run(const RunConfig& config, const std::filesystem::path& out,
               teach::Teacher* teacher_override = nullptr, const engine::Observer* observer = nullptr);

enum class SweepAxis { correlation, n_samples, teacher, method };

struct SweepSpec {
  SweepAxis axis = SweepAxis::correlation;
  std::vector<nlohmann::json> values;
  std::size_t repeats = 1;
  RunConfig base;
};

SweepSpec parse_sweep_spec(const nlohmann::json& j);
SweepSpec load_sweep_spec(const std::filesystem::path& path);

struct SweepOutcome {
  std::vector<MetricsRow> rows;
  std::vector<MetricsRow> aggregates;
  std::size_t failed_cells = 0;
  std::size_t resumed_cells = 0;
};

/// Runs every (value, repeat) cell in a worker pool. Finished cells found in
/// `out` are reused. Writes sweep.csv with per-repeat and aggregate rows.
SweepOutcome sweep(const SweepSpec& spec, const std::filesystem::path& out, std::size_t workers);

/// Mean and population-free sample std of the final rows of one cell.
MetricsRow aggregate(std::span<const MetricsRow> rows);

struct QualitativeExample {
  std::size_t example_id = 0;
  bool pre_converged = false;
  bool post_converged = false;
  double pre_mask_dot = 0.0;
  double post_mask_dot = 0.0;
};

struct QualitativeDump {
  std::vector<QualitativeExample> examples;
  std::size_t pre_iteration = 0;
  std::size_t post_iteration = 0;
  /// Fractions of converged counterfactuals with a positive mask dot product.
  double pre_positive_fraction = 0.0;
  double post_positive_fraction = 0.0;
};

/// Original / pre-CFKD counterfactual / post-CFKD counterfactual for k test
/// examples drawn with `seed`; writes grid.png and qualitative.csv into `out`.
QualitativeDump dump_qualitative(const std::filesystem::path& run_dir, std::size_t k, std::uint64_t seed,
                                 const std::filesystem::path& out);

}  // namespace cfkd::harness
