#include "cfkd/harness.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <mutex>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

#include "cfkd/errors.hpp"
#include "cfkd/io_util.hpp"
#include "cfkd/png.hpp"
#include "cfkd/random.hpp"

namespace cfkd::harness {

namespace {

using nlohmann::json;

// Object reader that rejects unknown keys and mistyped values.
class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j.is_object()) throw ConfigError(where() + ": expected an object");
  }

  bool has(const char* key) const { return j_.contains(key); }

  void u64(const char* key, std::uint64_t& out) {
    if (const json* v = take(key)) {
      if (!v->is_number_integer() || (!v->is_number_unsigned() && v->get<std::int64_t>() < 0)) {
        throw ConfigError(where(key) + ": expected a nonnegative integer");
      }
      out = v->get<std::uint64_t>();
    }
  }
  void size(const char* key, std::size_t& out) {
    std::uint64_t v = out;
    u64(key, v);
    out = static_cast<std::size_t>(v);
  }
  void real(const char* key, double& out) {
    if (const json* v = take(key)) {
      if (!v->is_number()) throw ConfigError(where(key) + ": expected a number");
      out = v->get<double>();
    }
  }
  void boolean(const char* key, bool& out) {
    if (const json* v = take(key)) {
      if (!v->is_boolean()) throw ConfigError(where(key) + ": expected true or false");
      out = v->get<bool>();
    }
  }
  void text(const char* key, std::string& out) {
    if (const json* v = take(key)) {
      if (!v->is_string()) throw ConfigError(where(key) + ": expected a string");
      out = v->get<std::string>();
    }
  }
  void reals(const char* key, std::vector<double>& out) {
    if (const json* v = take(key)) {
      if (!v->is_array()) throw ConfigError(where(key) + ": expected a list of numbers");
      out.clear();
      for (const auto& e : *v) {
        if (!e.is_number()) throw ConfigError(where(key) + ": expected a list of numbers");
        out.push_back(e.get<double>());
      }
    }
  }
  /// Nested object, or nullptr when absent.
  const json* object(const char* key) { return take(key); }
  const json* raw(const char* key) { return take(key); }

  [[nodiscard]] std::string where(const char* key = nullptr) const {
    std::string p = path_.empty() ? "config" : path_;
    if (key != nullptr) p += std::string(".") + key;
    return p;
  }

  void finish() const {
    for (const auto& item : j_.items()) {
      if (seen_.count(item.key()) == 0) throw ConfigError("unknown key '" + where(item.key().c_str()) + "'");
    }
  }

 private:
  const json* take(const char* key) {
    if (!j_.contains(key)) return nullptr;
    seen_.insert(key);
    return &j_.at(key);
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

std::string fmt_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string cav_name(CavKind k) { return k == CavKind::group ? "group" : "confounder"; }

CavKind parse_cav(const std::string& s, const std::string& where) {
  if (s == "group") return CavKind::group;
  if (s == "confounder") return CavKind::confounder;
  throw ConfigError(where + ": expected \"group\" or \"confounder\", got \"" + s + "\"");
}

std::mutex& log_mutex() {
  static std::mutex mu;
  return mu;
}

std::atomic<bool> g_verbose{false};

void note(const std::string& msg) {
  if (!g_verbose.load()) return;
  std::lock_guard lock(log_mutex());
  std::clog << msg << '\n';
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

json report_json(const model::EvalReport& r) { return json::parse(model::to_json(r)); }

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

std::optional<double> opt_double(const std::string& s) {
  if (s.empty()) return std::nullopt;
  return std::stod(s);
}

}  // namespace

const char* to_string(Method m) noexcept {
  switch (m) {
    case Method::original: return "original";
    case Method::diffaug: return "diffaug";
    case Method::groupdro: return "groupdro";
    case Method::dfr: return "dfr";
    case Method::pclarc: return "pclarc";
    case Method::rrclarc: return "rrclarc";
    case Method::cfkd: return "cfkd";
  }
  return "?";
}

std::optional<Method> parse_method(std::string_view s) noexcept {
  for (auto m : {Method::original, Method::diffaug, Method::groupdro, Method::dfr, Method::pclarc, Method::rrclarc,
                 Method::cfkd}) {
    if (s == to_string(m)) return m;
  }
  return std::nullopt;
}

void set_verbose(bool on) noexcept { g_verbose.store(on); }

// ---- config ---------------------------------------------------------------

void RunConfig::validate() const {
  dataset.validate();
  train.validate();
  if (test_samples < 4) throw ConfigError("test.n_samples must be at least 4");
  if (!(test_correlation >= 0.0 && test_correlation <= 1.0)) throw ConfigError("test.correlation must lie in [0, 1]");
  if (method == Method::cfkd) {
    if (!teacher) throw ConfigError("method cfkd requires a teacher section");
    cfkd.validate();
    if (teacher->kind == teach::TeacherKind::oracle && teacher->oracle_samples < 4) {
      throw ConfigError("teacher.oracle_samples must be at least 4");
    }
  } else if (teacher) {
    throw ConfigError(std::string("a teacher is only meaningful for method cfkd, not ") + to_string(method));
  }
  if (method == Method::rrclarc) {
    if (rrclarc_lambdas.empty()) throw ConfigError("rrclarc.lambdas must not be empty");
    for (double l : rrclarc_lambdas) {
      if (l < 0) throw ConfigError("rrclarc.lambdas must be nonnegative");
    }
  }
  if (dfr_heldout != "val" && dfr_heldout != "train+val") {
    throw ConfigError("dfr.heldout must be \"val\" or \"train+val\"");
  }
  if (groupdro.eta < 0) throw ConfigError("groupdro.eta must be nonnegative");
  if (diffaug.sigma_fraction < 0) throw ConfigError("diffaug.sigma_fraction must be nonnegative");
}

RunConfig parse_run_config(const json& j) {
  RunConfig c;
  Reader top(j, "");
  top.text("run_id", c.run_id);
  std::string method = to_string(c.method);
  top.text("method", method);
  const auto m = parse_method(method);
  if (!m) throw ConfigError("unknown method \"" + method + "\"; expected original, diffaug, groupdro, dfr, pclarc, rrclarc or cfkd");
  c.method = *m;
  top.u64("seed", c.seed);
  if (const json* d = top.object("dataset")) {
    Reader r(*d, "dataset");
    r.size("n_samples", c.dataset.n_samples);
    r.real("correlation", c.dataset.correlation);
    r.size("image_size", c.dataset.image_size);
    r.size("square_size", c.dataset.square_size);
    r.boolean("two_confounders", c.dataset.two_confounders);
    if (const json* s = r.object("split")) {
      Reader rs(*s, "dataset.split");
      rs.real("train", c.dataset.split.train);
      rs.real("val", c.dataset.split.val);
      rs.real("test", c.dataset.split.test);
      rs.finish();
    }
    r.finish();
  }
  if (const json* t = top.object("test")) {
    Reader r(*t, "test");
    r.size("n_samples", c.test_samples);
    r.real("correlation", c.test_correlation);
    r.finish();
  }
  if (const json* t = top.object("train")) {
    Reader r(*t, "train");
    r.size("epochs", c.train.epochs);
    r.size("batch_size", c.train.batch_size);
    r.real("learning_rate", c.train.learning_rate);
    r.real("momentum", c.train.momentum);
    std::string opt = c.train.optimizer == model::Optimizer::sgd ? "sgd" : "momentum";
    r.text("optimizer", opt);
    if (opt == "sgd") {
      c.train.optimizer = model::Optimizer::sgd;
    } else if (opt == "momentum") {
      c.train.optimizer = model::Optimizer::momentum;
    } else {
      throw ConfigError("train.optimizer: expected \"sgd\" or \"momentum\", got \"" + opt + "\"");
    }
    r.finish();
  }
  if (const json* t = top.object("teacher")) {
    Reader r(*t, "teacher");
    TeacherConfig tc;
    std::string kind = "oracle";
    r.text("kind", kind);
    const auto k = teach::parse_teacher_kind(kind);
    if (!k) throw ConfigError("teacher.kind: expected oracle, mask, random or human, got \"" + kind + "\"");
    tc.kind = *k;
    r.size("oracle_samples", tc.oracle_samples);
    r.size("timeout_ms", tc.timeout_ms);
    r.finish();
    c.teacher = tc;
  }
  if (const json* t = top.object("cfkd")) {
    Reader r(*t, "cfkd");
    r.size("n_iterations", c.cfkd.n_iterations);
    r.boolean("add_true_counterfactuals", c.cfkd.add_true_counterfactuals);
    r.size("feedback_subset_size", c.cfkd.feedback_subset_size);
    r.boolean("warm_start", c.cfkd.warm_start);
    r.boolean("measure_initial_feedback", c.cfkd.measure_initial_feedback);
    r.size("triptychs_per_iteration", c.cfkd.triptychs_per_iteration);
    r.finish();
  }
  if (const json* t = top.object("explainer")) {
    Reader r(*t, "explainer");
    auto& e = c.cfkd.explainer;
    r.real("lambda_l1", e.lambda_l1);
    r.real("lambda_l2", e.lambda_l2);
    r.real("target_confidence", e.target_confidence);
    r.size("max_steps", e.max_steps);
    r.real("step_size", e.step_size);
    r.size("restarts", e.restarts);
    r.real("init_jitter_scale", e.init_jitter_scale);
    std::string mode = e.gradient_mode == cf::GradientMode::analytic ? "analytic" : "finite_difference";
    r.text("gradient_mode", mode);
    if (mode == "analytic") {
      e.gradient_mode = cf::GradientMode::analytic;
    } else if (mode == "finite_difference") {
      e.gradient_mode = cf::GradientMode::finite_difference;
    } else {
      throw ConfigError("explainer.gradient_mode: expected \"analytic\" or \"finite_difference\"");
    }
    r.real("temperature", e.temperature);
    r.real("fd_epsilon", e.fd_epsilon);
    r.boolean("prune", e.prune);
    r.finish();
  }
  if (const json* t = top.object("diffaug")) {
    Reader r(*t, "diffaug");
    r.size("n_aug_per_example", c.diffaug.n_aug_per_example);
    r.real("sigma_fraction", c.diffaug.sigma_fraction);
    r.finish();
  }
  if (const json* t = top.object("groupdro")) {
    Reader r(*t, "groupdro");
    r.real("eta", c.groupdro.eta);
    r.finish();
  }
  if (const json* t = top.object("dfr")) {
    Reader r(*t, "dfr");
    r.size("n_subsamples", c.dfr.n_subsamples);
    r.size("steps", c.dfr.steps);
    r.real("learning_rate", c.dfr.learning_rate);
    r.real("l2", c.dfr.l2);
    r.text("heldout", c.dfr_heldout);
    r.finish();
  }
  if (const json* t = top.object("pclarc")) {
    Reader r(*t, "pclarc");
    std::string cav = cav_name(c.pclarc_cav);
    r.text("cav", cav);
    c.pclarc_cav = parse_cav(cav, "pclarc.cav");
    r.finish();
  }
  if (const json* t = top.object("rrclarc")) {
    Reader r(*t, "rrclarc");
    r.reals("lambdas", c.rrclarc_lambdas);
    std::string cav = cav_name(c.rrclarc_cav);
    r.text("cav", cav);
    c.rrclarc_cav = parse_cav(cav, "rrclarc.cav");
    r.finish();
  }
  top.finish();

  // Every random stream hangs off the global seed.
  c.dataset.seed = c.seed;
  c.train.seed = c.seed;
  c.cfkd.seed = c.seed;
  c.cfkd.train = c.train;
  c.diffaug.seed = c.seed;
  c.dfr.seed = c.seed;
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(io::read_text(path));
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": not valid JSON (" + e.what() + ")");
  }
  return parse_run_config(j);
}

json to_json(const RunConfig& c) {
  json j;
  j["run_id"] = c.run_id;
  j["method"] = to_string(c.method);
  j["seed"] = c.seed;
  j["dataset"] = {{"n_samples", c.dataset.n_samples},
                  {"correlation", c.dataset.correlation},
                  {"image_size", c.dataset.image_size},
                  {"square_size", c.dataset.square_size},
                  {"two_confounders", c.dataset.two_confounders},
                  {"split", {{"train", c.dataset.split.train}, {"val", c.dataset.split.val}, {"test", c.dataset.split.test}}}};
  j["test"] = {{"n_samples", c.test_samples}, {"correlation", c.test_correlation}};
  j["train"] = {{"epochs", c.train.epochs},
                {"batch_size", c.train.batch_size},
                {"learning_rate", c.train.learning_rate},
                {"momentum", c.train.momentum},
                {"optimizer", c.train.optimizer == model::Optimizer::sgd ? "sgd" : "momentum"}};
  if (c.teacher) {
    j["teacher"] = {{"kind", teach::to_string(c.teacher->kind)},
                    {"oracle_samples", c.teacher->oracle_samples},
                    {"timeout_ms", c.teacher->timeout_ms}};
  }
  j["cfkd"] = {{"n_iterations", c.cfkd.n_iterations},
               {"add_true_counterfactuals", c.cfkd.add_true_counterfactuals},
               {"feedback_subset_size", c.cfkd.feedback_subset_size},
               {"warm_start", c.cfkd.warm_start},
               {"measure_initial_feedback", c.cfkd.measure_initial_feedback},
               {"triptychs_per_iteration", c.cfkd.triptychs_per_iteration}};
  const auto& e = c.cfkd.explainer;
  j["explainer"] = {{"lambda_l1", e.lambda_l1},
                    {"lambda_l2", e.lambda_l2},
                    {"target_confidence", e.target_confidence},
                    {"max_steps", e.max_steps},
                    {"step_size", e.step_size},
                    {"restarts", e.restarts},
                    {"init_jitter_scale", e.init_jitter_scale},
                    {"gradient_mode", e.gradient_mode == cf::GradientMode::analytic ? "analytic" : "finite_difference"},
                    {"temperature", e.temperature},
                    {"fd_epsilon", e.fd_epsilon},
                    {"prune", e.prune}};
  j["diffaug"] = {{"n_aug_per_example", c.diffaug.n_aug_per_example}, {"sigma_fraction", c.diffaug.sigma_fraction}};
  j["groupdro"] = {{"eta", c.groupdro.eta}};
  j["dfr"] = {{"n_subsamples", c.dfr.n_subsamples},
              {"steps", c.dfr.steps},
              {"learning_rate", c.dfr.learning_rate},
              {"l2", c.dfr.l2},
              {"heldout", c.dfr_heldout}};
  j["pclarc"] = {{"cav", cav_name(c.pclarc_cav)}};
  j["rrclarc"] = {{"lambdas", c.rrclarc_lambdas}, {"cav", cav_name(c.rrclarc_cav)}};
  return j;
}

std::string config_fingerprint(const RunConfig& c) {
  json j = to_json(c);
  j.erase("run_id");
  return io::hex64(fnv1a(j.dump()));
}

std::string default_run_id(const RunConfig& c) {
  std::string id = std::string(to_string(c.method)) + "-c" + fmt_double(c.dataset.correlation) + "-n" +
                   std::to_string(c.dataset.n_samples) + "-s" + std::to_string(c.seed);
  if (c.teacher) id += std::string("-") + teach::to_string(c.teacher->kind);
  return id;
}

// ---- metrics --------------------------------------------------------------

const std::vector<std::string>& metrics_columns() {
  static const std::vector<std::string> cols = {
      "run_id",  "method",  "correlation", "n_samples", "teacher",      "iteration",          "feedback_accuracy",
      "acc_w1p", "acc_w1n", "acc_w2p",     "acc_w2n",   "aga",          "seed",               "dataset_hash",
      "config_fingerprint", "status",      "row_kind",  "aga_std"};
  return cols;
}

std::string metrics_header() {
  std::string s;
  for (const auto& c : metrics_columns()) {
    if (!s.empty()) s += ',';
    s += c;
  }
  return s;
}

std::string to_csv(const MetricsRow& r) {
  std::ostringstream os;
  os << r.run_id << ',' << r.method << ',' << fmt_double(r.correlation) << ',' << r.n_samples << ',' << r.teacher << ',';
  if (r.iteration) os << *r.iteration;
  os << ',';
  if (r.feedback_accuracy) os << fmt_double(*r.feedback_accuracy);
  for (std::size_t g = 0; g < square::kNumGroups; ++g) {
    os << ',';
    if (r.report && r.report->group_counts[g] > 0) os << fmt_double(r.report->group_accuracy[g]);
  }
  os << ',';
  if (r.report) os << fmt_double(r.report->aga);
  os << ',' << r.seed << ',' << r.dataset_hash << ',' << r.config_fingerprint << ',' << r.status << ',' << r.row_kind
     << ',';
  if (r.aga_std) os << fmt_double(*r.aga_std);
  return os.str();
}

MetricsRow parse_metrics_row(const std::string& line) {
  const auto f = split_csv(line);
  if (f.size() != metrics_columns().size()) throw Error("metrics row has the wrong number of columns: " + line);
  MetricsRow r;
  r.run_id = f[0];
  r.method = f[1];
  r.correlation = std::stod(f[2]);
  r.n_samples = std::stoul(f[3]);
  r.teacher = f[4];
  if (!f[5].empty()) r.iteration = std::stoul(f[5]);
  r.feedback_accuracy = opt_double(f[6]);
  if (!f[11].empty()) {
    model::EvalReport rep;
    for (std::size_t g = 0; g < square::kNumGroups; ++g) {
      if (f[7 + g].empty()) {
        rep.has_empty_groups = true;
      } else {
        rep.group_accuracy[g] = std::stod(f[7 + g]);
        rep.group_counts[g] = 1;
      }
    }
    rep.aga = std::stod(f[11]);
    r.report = rep;
  }
  r.seed = std::stoull(f[12]);
  r.dataset_hash = f[13];
  r.config_fingerprint = f[14];
  r.status = f[15];
  r.row_kind = f[16];
  r.aga_std = opt_double(f[17]);
  return r;
}

// ---- experiment -----------------------------------------------------------

Experiment prepare(const RunConfig& config) {
  config.validate();
  Experiment ex;
  ex.config = config;
  ex.dataset = square::sample_dataset(config.dataset);
  square::DatasetSpec ts = config.dataset;
  ts.correlation = config.test_correlation;
  ts.seed = derive_seed(config.seed, "test");
  ex.test = square::sample_examples(ts, config.test_samples);
  ex.dataset_hash = io::hex64(square::dataset_hash(ex.dataset));
  return ex;
}

model::ModelParams train_student(const Experiment& ex) {
  return model::train(model::to_labeled(ex.dataset.train), ex.config.train).params;
}

model::ModelParams train_oracle(const Experiment& ex, std::size_t samples) {
  square::DatasetSpec os = ex.config.dataset;
  os.n_samples = samples;
  os.seed = derive_seed(ex.config.seed, "oracle-data");
  const square::Dataset d = square::oracle_dataset(os);
  model::LabeledImages all = model::to_labeled(d.train);
  all.append(model::to_labeled(d.val));
  all.append(model::to_labeled(d.test));
  model::TrainConfig tc = ex.config.train;
  tc.seed = derive_seed(ex.config.seed, "oracle-train");
  return model::train(all, tc).params;
}

namespace {

MetricsRow base_row(const Experiment& ex, const std::string& run_id, const std::string& fingerprint) {
  MetricsRow r;
  r.run_id = run_id;
  r.method = to_string(ex.config.method);
  r.correlation = ex.config.dataset.correlation;
  r.n_samples = ex.config.dataset.n_samples;
  r.teacher = ex.config.teacher ? teach::to_string(ex.config.teacher->kind) : "";
  r.seed = ex.config.seed;
  r.dataset_hash = ex.dataset_hash;
  r.config_fingerprint = fingerprint;
  return r;
}

std::vector<square::GroupedExample> concat(std::span<const square::GroupedExample> a,
                                           std::span<const square::GroupedExample> b) {
  std::vector<square::GroupedExample> out(a.begin(), a.end());
  out.insert(out.end(), b.begin(), b.end());
  return out;
}

baselines::Cav fit_cav_of_kind(CavKind kind, const model::ModelParams& student,
                               std::span<const square::GroupedExample> examples) {
  const model::LabeledImages data = model::to_labeled(examples);
  const Tensor feats = model::penultimate_features(student, data.pixels, data.size());
  return kind == CavKind::group ? baselines::fit_group_cav(feats, examples)
                                : baselines::fit_confounder_cav(feats, examples);
}

void write_metrics(const std::filesystem::path& file, std::span<const MetricsRow> rows) {
  std::string text = metrics_header() + "\n";
  for (const auto& r : rows) text += to_csv(r) + "\n";
  io::write_atomic(file, text);
}

std::vector<MetricsRow> read_metrics(const std::filesystem::path& file) {
  const std::string text = io::read_text(file);
  std::istringstream is(text);
  std::string line;
  std::getline(is, line);
  if (line != metrics_header()) throw Error(file.string() + ": unexpected metrics header");
  std::vector<MetricsRow> rows;
  while (std::getline(is, line)) {
    if (!line.empty()) rows.push_back(parse_metrics_row(line));
  }
  return rows;
}

}  // namespace

RunOutcome run(const RunConfig& config, const std::filesystem::path& out, teach::Teacher* teacher_override,
               const engine::Observer* observer) {
  const auto t0 = std::chrono::steady_clock::now();
  config.validate();
  const std::string fingerprint = config_fingerprint(config);
  RunConfig snapshot = config;
  if (snapshot.run_id.empty()) snapshot.run_id = default_run_id(config);
  const std::string run_id = snapshot.run_id;
  std::filesystem::create_directories(out);
  io::write_atomic(out / "config.json", to_json(snapshot).dump(2));

  const Experiment ex = prepare(config);
  const square::Geometry geo = config.dataset.geometry();
  note("[" + run_id + "] training student");
  const model::ModelParams student = train_student(ex);
  model::save_checkpoint(out / "student", student);
  const model::EvalReport erm = model::evaluate_groups(student, ex.test);

  RunOutcome outcome;
  json& s = outcome.summary;
  s["run_id"] = run_id;
  s["method"] = to_string(config.method);
  s["config_fingerprint"] = fingerprint;
  s["dataset_hash"] = ex.dataset_hash;
  const auto counts = square::group_counts(ex.dataset.train);
  s["train_group_counts"] = counts;
  s["student"] = report_json(erm);
  s["student_confounder_decoding"] = model::confounder_decoding_accuracy(student, ex.test);

  MetricsRow final_row = base_row(ex, run_id, fingerprint);
  std::optional<model::ModelParams> final_params;
  try {
    switch (config.method) {
      case Method::original:
        final_params = student;
        final_row.report = erm;
        break;
      case Method::diffaug:
        final_params = baselines::diffaug_train(ex.dataset.train, config.diffaug, config.train, geo);
        final_row.report = model::evaluate_groups(*final_params, ex.test);
        break;
      case Method::groupdro: {
        std::array<double, square::kNumGroups> last_q{};
        baselines::GroupDroConfig dro = config.groupdro;
        dro.on_update = [&last_q](const auto& q) { last_q = q; };
        final_params = baselines::groupdro_train(ex.dataset.train, config.train, dro);
        final_row.report = model::evaluate_groups(*final_params, ex.test);
        s["groupdro_final_q"] = last_q;
        break;
      }
      case Method::dfr: {
        const auto heldout =
            config.dfr_heldout == "val" ? ex.dataset.val : concat(ex.dataset.train, ex.dataset.val);
        final_params = baselines::dfr_retrain(student, heldout, config.dfr);
        final_row.report = model::evaluate_groups(*final_params, ex.test);
        break;
      }
      case Method::pclarc: {
        const auto cav = fit_cav_of_kind(config.pclarc_cav, student, ex.dataset.train);
        final_params = student;
        final_row.report = baselines::pclarc_evaluate(student, cav, ex.test);
        s["cav"] = {{"method", cav.method}, {"bias", cav.bias}, {"direction", cav.direction}};
        break;
      }
      case Method::rrclarc: {
        const auto cav = fit_cav_of_kind(config.rrclarc_cav, student, ex.dataset.train);
        const auto sweep = baselines::rrclarc_sweep(ex.dataset.train, ex.dataset.val, cav, config.rrclarc_lambdas,
                                                    config.train);
        final_params = sweep.params;
        final_row.report = model::evaluate_groups(*final_params, ex.test);
        s["rrclarc_lambda"] = sweep.lambda;
        s["rrclarc_validation_aga"] = sweep.validation_aga;
        s["cav_method"] = cav.method;
        break;
      }
      case Method::cfkd: {
        std::unique_ptr<teach::Teacher> owned;
        teach::Teacher* teacher = teacher_override;
        if (teacher == nullptr) {
          switch (config.teacher->kind) {
            case teach::TeacherKind::oracle: {
              note("[" + run_id + "] training oracle");
              auto oracle = train_oracle(ex, config.teacher->oracle_samples);
              model::save_checkpoint(out / "oracle", oracle);
              s["oracle"] = report_json(model::evaluate_groups(oracle, ex.test));
              owned = std::make_unique<teach::OracleTeacher>(std::move(oracle));
              break;
            }
            case teach::TeacherKind::mask: owned = std::make_unique<teach::MaskTeacher>(); break;
            case teach::TeacherKind::random: owned = std::make_unique<teach::RandomTeacher>(config.seed); break;
            case teach::TeacherKind::human:
              throw ConfigError("the human teacher needs the annotation service; use the serve subcommand");
          }
          teacher = owned.get();
        }
        engine::Observer obs;
        if (observer != nullptr) obs = *observer;
        auto user_end = obs.on_iteration_end;
        obs.on_iteration_end = [&, user_end](const engine::IterationResult& it) {
          std::ostringstream msg;
          msg << "[" << run_id << "] iteration " << it.iteration << " feedback "
              << (it.feedback.accuracy ? fmt_double(*it.feedback.accuracy) : "undefined") << " aga "
              << (it.test_report ? fmt_double(it.test_report->aga) : "-") << " (" << it.seconds << " s)";
          note(msg.str());
          if (user_end) user_end(it);
        };
        const auto result = engine::run_cfkd({student, ex.dataset, *teacher, ex.test, out, &obs}, config.cfkd);
        json iters = json::array();
        for (const auto& it : result.state.iterations) {
          MetricsRow row = base_row(ex, run_id, fingerprint);
          row.iteration = it.iteration;
          row.feedback_accuracy = it.feedback.accuracy;
          row.report = it.test_report;
          row.row_kind = "iteration";
          outcome.rows.push_back(row);
          iters.push_back({{"iteration", it.iteration},
                           {"feedback_accuracy", it.feedback.accuracy ? json(*it.feedback.accuracy) : json(nullptr)},
                           {"feedback_correct", it.feedback.n_correct},
                           {"feedback_total", it.feedback.n_total},
                           {"feedback_attempted", it.feedback.n_attempted},
                           {"generated", it.generated},
                           {"converged", it.converged},
                           {"judged_true", it.judged_true},
                           {"judged_false", it.judged_false},
                           {"skipped", it.skipped},
                           {"added", it.added},
                           {"augmented_size", it.augmented_size},
                           {"seconds", it.seconds},
                           {"test", it.test_report ? report_json(*it.test_report) : json(nullptr)}});
        }
        s["iterations"] = iters;
        s["selected_iteration"] = result.state.selected ? json(*result.state.selected) : json(nullptr);
        if (result.state.aborted || !result.state.selected) {
          s["cfkd_error"] = result.state.error;
        }
        if (!result.state.selected) throw Error("cfkd selected no iteration: " + result.state.error);
        const auto& sel = result.state.iterations[*result.state.selected];
        final_params = result.refined;
        final_row.iteration = sel.iteration;
        final_row.feedback_accuracy = sel.feedback.accuracy;
        final_row.report = sel.test_report;
        break;
      }
    }
  } catch (const NotApplicable& e) {
    final_row.status = "not_applicable";
    final_row.report.reset();
    s["message"] = e.what();
    note("[" + run_id + "] not applicable: " + e.what());
  }
  final_row.row_kind = "final";
  outcome.rows.push_back(final_row);
  s["status"] = final_row.status;
  if (final_row.report) s["final"] = report_json(*final_row.report);
  s["seconds"] = seconds_since(t0);
  if (final_params) model::save_checkpoint(out / "model", *final_params);
  write_metrics(out / "metrics.csv", outcome.rows);
  io::write_atomic(out / "run.json", s.dump(2));
  return outcome;
}

// ---- sweep ----------------------------------------------------------------

namespace {

const char* axis_name(SweepAxis a) {
  switch (a) {
    case SweepAxis::correlation: return "correlation";
    case SweepAxis::n_samples: return "n_samples";
    case SweepAxis::teacher: return "teacher";
    case SweepAxis::method: return "method";
  }
  return "?";
}

std::string value_label(const json& v) { return v.is_string() ? v.get<std::string>() : v.dump(); }

RunConfig apply_axis(const RunConfig& base, SweepAxis axis, const json& v) {
  RunConfig c = base;
  switch (axis) {
    case SweepAxis::correlation:
      if (!v.is_number()) throw ConfigError("correlation sweep values must be numbers");
      c.dataset.correlation = v.get<double>();
      break;
    case SweepAxis::n_samples:
      if (!v.is_number_integer() || v.get<std::int64_t>() < 0) {
        throw ConfigError("n_samples sweep values must be nonnegative integers");
      }
      c.dataset.n_samples = v.get<std::size_t>();
      break;
    case SweepAxis::teacher: {
      const auto k = v.is_string() ? teach::parse_teacher_kind(v.get<std::string>()) : std::nullopt;
      if (!k) throw ConfigError("teacher sweep values must be oracle, mask, random or human");
      if (c.method != Method::cfkd) throw ConfigError("a teacher sweep needs method cfkd");
      TeacherConfig tc = c.teacher.value_or(TeacherConfig{});
      tc.kind = *k;
      c.teacher = tc;
      break;
    }
    case SweepAxis::method: {
      const auto m = v.is_string() ? parse_method(v.get<std::string>()) : std::nullopt;
      if (!m) throw ConfigError("method sweep values must be method names");
      c.method = *m;
      if (c.method == Method::cfkd && !c.teacher) c.teacher = TeacherConfig{};
      if (c.method != Method::cfkd) c.teacher.reset();
      break;
    }
  }
  return c;
}

std::string safe_name(std::string s) {
  for (char& ch : s) {
    if (!std::isalnum(static_cast<unsigned char>(ch)) && ch != '.' && ch != '-') ch = '_';
  }
  return s;
}

double mean_of(const std::vector<double>& v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

SweepSpec parse_sweep_spec(const json& j) {
  SweepSpec s;
  Reader r(j, "sweep");
  std::string axis;
  r.text("axis", axis);
  if (axis == "correlation") {
    s.axis = SweepAxis::correlation;
  } else if (axis == "n_samples") {
    s.axis = SweepAxis::n_samples;
  } else if (axis == "teacher") {
    s.axis = SweepAxis::teacher;
  } else if (axis == "method") {
    s.axis = SweepAxis::method;
  } else {
    throw ConfigError("sweep.axis: expected correlation, n_samples, teacher or method, got \"" + axis + "\"");
  }
  const json* values = r.raw("values");
  if (values == nullptr || !values->is_array() || values->empty()) {
    throw ConfigError("sweep.values must be a nonempty list");
  }
  for (const auto& v : *values) s.values.push_back(v);
  r.size("repeats", s.repeats);
  if (s.repeats < 1) throw ConfigError("sweep.repeats must be at least 1");
  const json* base = r.object("base");
  if (base == nullptr) throw ConfigError("sweep.base run config is required");
  r.finish();
  s.base = parse_run_config(*base);
  // Check every cell up front so a typo fails before hours of compute.
  for (const auto& v : s.values) apply_axis(s.base, s.axis, v).validate();
  return s;
}

SweepSpec load_sweep_spec(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(io::read_text(path));
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": not valid JSON (" + e.what() + ")");
  }
  return parse_sweep_spec(j);
}

MetricsRow aggregate(std::span<const MetricsRow> rows) {
  if (rows.empty()) throw Error("nothing to aggregate");
  MetricsRow a = rows.front();
  a.row_kind = "aggregate";
  a.iteration.reset();
  a.seed = 0;
  a.dataset_hash.clear();
  std::vector<const MetricsRow*> ok;
  for (const auto& r : rows) {
    if (r.status == "ok" && r.report) ok.push_back(&r);
  }
  a.run_id = rows.front().run_id + "-aggregate";
  if (ok.empty()) {
    a.status = rows.front().status;
    a.report.reset();
    a.feedback_accuracy.reset();
    a.aga_std.reset();
    return a;
  }
  a.status = ok.size() == rows.size() ? "ok" : "partial";
  model::EvalReport rep;
  std::vector<double> agas;
  for (std::size_t g = 0; g < square::kNumGroups; ++g) {
    std::vector<double> vals;
    for (const auto* r : ok) {
      if (r->report->group_counts[g] > 0) vals.push_back(r->report->group_accuracy[g]);
    }
    if (!vals.empty()) {
      rep.group_accuracy[g] = mean_of(vals);
      rep.group_counts[g] = vals.size();
    } else {
      rep.has_empty_groups = true;
    }
  }
  for (const auto* r : ok) agas.push_back(r->report->aga);
  rep.aga = mean_of(agas);
  a.report = rep;
  double var = 0.0;
  for (double v : agas) var += (v - rep.aga) * (v - rep.aga);
  a.aga_std = agas.size() > 1 ? std::sqrt(var / static_cast<double>(agas.size() - 1)) : 0.0;
  std::vector<double> fas;
  for (const auto* r : ok) {
    if (r->feedback_accuracy) fas.push_back(*r->feedback_accuracy);
  }
  if (fas.empty()) {
    a.feedback_accuracy.reset();
  } else {
    a.feedback_accuracy = mean_of(fas);
  }
  return a;
}

SweepOutcome sweep(const SweepSpec& spec, const std::filesystem::path& out, std::size_t workers) {
  struct Cell {
    std::size_t value_index;
    std::size_t repeat;
    RunConfig config;
    std::filesystem::path dir;
    std::vector<MetricsRow> rows;
    bool resumed = false;
    bool failed = false;
  };
  std::vector<Cell> cells;
  for (std::size_t v = 0; v < spec.values.size(); ++v) {
    for (std::size_t r = 0; r < spec.repeats; ++r) {
      Cell c{v, r, apply_axis(spec.base, spec.axis, spec.values[v]), {}, {}, false, false};
      c.config.seed = spec.base.seed + r;
      c.config.dataset.seed = c.config.seed;
      c.config.train.seed = c.config.seed;
      c.config.cfkd.seed = c.config.seed;
      c.config.cfkd.train = c.config.train;
      c.config.diffaug.seed = c.config.seed;
      c.config.dfr.seed = c.config.seed;
      const std::string label = std::string(axis_name(spec.axis)) + "-" + safe_name(value_label(spec.values[v]));
      c.config.run_id = label + "-r" + std::to_string(r);
      c.dir = out / "cells" / (label + "_r" + std::to_string(r));
      cells.push_back(std::move(c));
    }
  }
  std::filesystem::create_directories(out);

  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < cells.size(); i = next++) {
      Cell& c = cells[i];
      const std::string fp = config_fingerprint(c.config);
      const auto done = c.dir / "DONE";
      if (std::filesystem::exists(done) && io::read_text(done) == fp) {
        try {
          c.rows = read_metrics(c.dir / "metrics.csv");
          c.resumed = true;
          note("[sweep] reusing " + c.config.run_id);
          continue;
        } catch (const std::exception&) {
          c.rows.clear();
        }
      }
      try {
        note("[sweep] running " + c.config.run_id);
        c.rows = run(c.config, c.dir).rows;
        io::write_atomic(done, fp);
      } catch (const std::exception& e) {
        c.failed = true;
        MetricsRow r;
        r.run_id = c.config.run_id;
        r.method = to_string(c.config.method);
        r.correlation = c.config.dataset.correlation;
        r.n_samples = c.config.dataset.n_samples;
        r.teacher = c.config.teacher ? teach::to_string(c.config.teacher->kind) : "";
        r.seed = c.config.seed;
        r.config_fingerprint = fp;
        r.status = "error";
        c.rows = {r};
        note("[sweep] " + c.config.run_id + " failed: " + e.what());
        io::append_line(out / "errors.log", c.config.run_id + ": " + e.what());
      }
    }
  };
  const std::size_t n_threads = std::max<std::size_t>(1, std::min(workers, cells.size()));
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < n_threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  SweepOutcome outcome;
  std::string text = metrics_header() + "\n";
  for (std::size_t v = 0; v < spec.values.size(); ++v) {
    std::vector<MetricsRow> finals;
    for (const auto& c : cells) {
      if (c.value_index != v) continue;
      if (c.failed) ++outcome.failed_cells;
      if (c.resumed) ++outcome.resumed_cells;
      for (const auto& r : c.rows) {
        outcome.rows.push_back(r);
        text += to_csv(r) + "\n";
        if (r.row_kind == "final") finals.push_back(r);
      }
    }
    MetricsRow agg = aggregate(finals);
    agg.run_id = std::string(axis_name(spec.axis)) + "-" + safe_name(value_label(spec.values[v])) + "-aggregate";
    outcome.aggregates.push_back(agg);
  }
  for (const auto& a : outcome.aggregates) text += to_csv(a) + "\n";
  io::write_atomic(out / "sweep.csv", text);
  return outcome;
}

// ---- qualitative dump -----------------------------------------------------

QualitativeDump dump_qualitative(const std::filesystem::path& run_dir, std::size_t k, std::uint64_t seed,
                                 const std::filesystem::path& out) {
  if (k == 0) throw Error("refusing to write an empty grid: k must be positive");
  const RunConfig config = load_run_config(run_dir / "config.json");
  const json summary = json::parse(io::read_text(run_dir / "run.json"));
  if (!summary.contains("selected_iteration") || summary["selected_iteration"].is_null()) {
    throw Error(run_dir.string() + " has no selected cfkd iteration");
  }
  QualitativeDump dump;
  dump.pre_iteration = 0;
  dump.post_iteration = summary["selected_iteration"].get<std::size_t>();
  char pre_dir[32], post_dir[32];
  std::snprintf(pre_dir, sizeof pre_dir, "iter_%02zu", dump.pre_iteration);
  std::snprintf(post_dir, sizeof post_dir, "iter_%02zu", dump.post_iteration);
  for (const char* d : {pre_dir, post_dir}) {
    if (!std::filesystem::exists(run_dir / d / "manifest.json")) {
      throw Error("missing checkpoint " + (run_dir / d).string());
    }
  }
  const model::ModelParams pre = model::load_checkpoint(run_dir / pre_dir);
  const model::ModelParams post = model::load_checkpoint(run_dir / post_dir);
  const Experiment ex = prepare(config);
  const square::Geometry geo = config.dataset.geometry();

  std::vector<std::size_t> idx(ex.test.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng(derive_seed(seed, "dump"));
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(std::min(k, idx.size()));
  std::sort(idx.begin(), idx.end());
  std::vector<square::GroupedExample> chosen;
  std::vector<int> targets;
  for (std::size_t i : idx) {
    chosen.push_back(ex.test[i]);
    targets.push_back(cf::other_class(ex.test[i].label));
  }
  cf::ExplainerConfig ecfg = config.cfkd.explainer;
  ecfg.seed = derive_seed(seed, "dump-explainer");
  const auto pre_cf = cf::batch_generate(pre, chosen, targets, ecfg, geo);
  const auto post_cf = cf::batch_generate(post, chosen, targets, ecfg, geo);

  std::size_t pre_conv = 0, post_conv = 0, pre_pos = 0, post_pos = 0;
  std::string csv = "example_id,label,pre_converged,pre_mask_dot,post_converged,post_mask_dot\n";
  for (std::size_t i = 0; i < chosen.size(); ++i) {
    QualitativeExample q;
    q.example_id = chosen[i].id;
    q.pre_converged = pre_cf[i].converged;
    q.post_converged = post_cf[i].converged;
    q.pre_mask_dot = cf::mask_dot(chosen[i].image.values(), pre_cf[i].x_tilde.values(), chosen[i].mask);
    q.post_mask_dot = cf::mask_dot(chosen[i].image.values(), post_cf[i].x_tilde.values(), chosen[i].mask);
    if (q.pre_converged) {
      ++pre_conv;
      if (q.pre_mask_dot > 0) ++pre_pos;
    }
    if (q.post_converged) {
      ++post_conv;
      if (q.post_mask_dot > 0) ++post_pos;
    }
    csv += std::to_string(q.example_id) + "," + std::to_string(chosen[i].label) + "," +
           (q.pre_converged ? "1" : "0") + "," + fmt_double(q.pre_mask_dot) + "," + (q.post_converged ? "1" : "0") +
           "," + fmt_double(q.post_mask_dot) + "\n";
    dump.examples.push_back(q);
  }
  dump.pre_positive_fraction = pre_conv ? static_cast<double>(pre_pos) / static_cast<double>(pre_conv) : 0.0;
  dump.post_positive_fraction = post_conv ? static_cast<double>(post_pos) / static_cast<double>(post_conv) : 0.0;

  // Rows: original, pre-CFKD counterfactual, post-CFKD counterfactual.
  const std::size_t scale = 3, gap = 2, side = geo.image_size * scale;
  png::Image grid{chosen.size() * (side + gap) - gap, 3 * (side + gap) - gap, 1, {}};
  grid.pixels.assign(grid.width * grid.height, 255);
  for (std::size_t i = 0; i < chosen.size(); ++i) {
    const Tensor* tiles[3] = {&chosen[i].image, &pre_cf[i].x_tilde, &post_cf[i].x_tilde};
    for (std::size_t row = 0; row < 3; ++row) {
      const auto tile = png::upscale(png::from_unit_gray(tiles[row]->values(), geo.image_size, geo.image_size), scale);
      for (std::size_t r = 0; r < side; ++r) {
        for (std::size_t c = 0; c < side; ++c) {
          grid.pixels[(row * (side + gap) + r) * grid.width + i * (side + gap) + c] = tile.pixels[r * side + c];
        }
      }
    }
  }
  std::filesystem::create_directories(out);
  png::write_file(out / "grid.png", grid);
  io::write_atomic(out / "qualitative.csv", csv);
  json js = {{"run_dir", run_dir.string()},
             {"k", chosen.size()},
             {"seed", seed},
             {"pre_iteration", dump.pre_iteration},
             {"post_iteration", dump.post_iteration},
             {"pre_converged", pre_conv},
             {"post_converged", post_conv},
             {"pre_positive_fraction", dump.pre_positive_fraction},
             {"post_positive_fraction", dump.post_positive_fraction}};
  io::write_atomic(out / "qualitative.json", js.dump(2));
  return dump;
}

}  // namespace cfkd::harness
