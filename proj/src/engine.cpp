#include "cfkd/engine.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <numeric>

#include "cfkd/errors.hpp"
#include "cfkd/io_util.hpp"
#include "cfkd/random.hpp"
#include "json.hpp"

namespace cfkd::engine {

namespace {

using nlohmann::json;

json latent_json(const square::LatentPoint& z) {
  json j = {{"fg", z.fg}, {"bg", z.bg}, {"x", z.x}, {"y", z.y}};
  if (z.bg2) j["bg2"] = *z.bg2;
  return j;
}

square::LatentPoint latent_from_json(const json& j) {
  square::LatentPoint z;
  z.fg = j.at("fg").get<double>();
  z.bg = j.at("bg").get<double>();
  z.x = j.at("x").get<double>();
  z.y = j.at("y").get<double>();
  if (j.contains("bg2")) z.bg2 = j.at("bg2").get<double>();
  return z;
}

std::string iteration_dir(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "iter_%02zu", i);
  return buf;
}

double elapsed(std::chrono::steady_clock::time_point since) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - since).count();
}

}  // namespace

void CfkdConfig::validate() const {
  if (n_iterations < 1) throw ConfigError("cfkd needs at least one iteration");
  if (feedback_subset_size < 1) throw ConfigError("feedback subset must hold at least one example");
  explainer.validate();
  train.validate();
}

std::string to_json_line(const CounterfactualRecord& r) {
  json j;
  j["example_id"] = r.example_id;
  j["iteration"] = r.iteration;
  j["split"] = r.split;
  j["label"] = r.label;
  j["target"] = r.target;
  j["z_tilde"] = latent_json(r.z_tilde);
  json v = {{"kind", teach::to_string(r.verdict.kind)},
            {"assigned_label", r.verdict.assigned_label},
            {"teacher", r.verdict.teacher_id}};
  v["rationale"] = r.verdict.rationale ? json(*r.verdict.rationale) : json(nullptr);
  j["verdict"] = v;
  return j.dump();
}

CounterfactualRecord record_from_json_line(std::string_view line) {
  const json j = json::parse(line);
  CounterfactualRecord r;
  r.example_id = j.at("example_id").get<std::size_t>();
  r.iteration = j.at("iteration").get<std::size_t>();
  r.split = j.at("split").get<std::string>();
  r.label = j.at("label").get<int>();
  r.target = j.at("target").get<int>();
  r.z_tilde = latent_from_json(j.at("z_tilde"));
  const json& v = j.at("verdict");
  const auto kind = v.at("kind").get<std::string>();
  if (kind != "true" && kind != "false") throw Error("record has an unknown verdict kind: " + kind);
  r.verdict.kind = kind == "true" ? teach::VerdictKind::true_counterfactual : teach::VerdictKind::false_counterfactual;
  r.verdict.assigned_label = v.at("assigned_label").get<int>();
  r.verdict.teacher_id = v.at("teacher").get<std::string>();
  if (!v.at("rationale").is_null()) r.verdict.rationale = v.at("rationale").get<double>();
  return r;
}

void RecordStore::append(const CounterfactualRecord& r) {
  if (!teach::satisfies_label_rule(r.verdict, r.label, r.target)) {
    throw Error("refusing to store a record that violates the label rule");
  }
  if (file_) io::append_line(*file_, to_json_line(r));
  records_.push_back(r);
}

std::vector<CounterfactualRecord> RecordStore::load(const std::filesystem::path& file) {
  std::vector<CounterfactualRecord> out;
  const std::string text = io::read_text(file);
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    if (end > pos) out.push_back(record_from_json_line(std::string_view(text).substr(pos, end - pos)));
    pos = end + 1;
  }
  return out;
}

std::vector<std::size_t> feedback_subset(std::span<const square::GroupedExample> val, std::size_t subset_size,
                                         std::uint64_t seed) {
  std::vector<std::size_t> idx(val.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (subset_size < idx.size()) {
    Rng rng(derive_seed(seed, "feedback-subset"));
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(subset_size);
  }
  std::vector<std::size_t> ids;
  ids.reserve(idx.size());
  for (std::size_t i : idx) ids.push_back(val[i].id);
  std::sort(ids.begin(), ids.end());
  return ids;
}

FeedbackResult feedback_accuracy(const model::ModelParams& student, std::span<const square::GroupedExample> val,
                                 std::span<const std::size_t> subset, const cf::ExplainerConfig& explainer,
                                 teach::Teacher& teacher, const square::Geometry& geometry, std::size_t iteration,
                                 RecordStore* store) {
  if (val.empty()) throw Error("feedback accuracy needs a nonempty validation split");
  std::vector<square::GroupedExample> chosen;
  for (const auto& e : val) {
    if (std::binary_search(subset.begin(), subset.end(), e.id)) chosen.push_back(e);
  }
  std::vector<int> targets;
  for (const auto& e : chosen) targets.push_back(cf::other_class(e.label));
  const auto results = cf::batch_generate(student, chosen, targets, explainer, geometry);
  FeedbackResult fr;
  fr.n_attempted = chosen.size();
  for (std::size_t i = 0; i < chosen.size(); ++i) {
    if (!results[i].converged) continue;
    const auto v = teacher.judge(teach::Query{chosen[i], results[i], student, iteration});
    if (!v) {
      ++fr.n_skipped;
      continue;
    }
    ++fr.n_total;
    if (v->kind == teach::VerdictKind::true_counterfactual) ++fr.n_correct;
    if (store != nullptr) {
      store->append({chosen[i].id, iteration, "val", chosen[i].label, targets[i], results[i].z_tilde, *v});
    }
  }
  if (fr.n_total > 0) fr.accuracy = static_cast<double>(fr.n_correct) / static_cast<double>(fr.n_total);
  return fr;
}

std::size_t select_model(std::span<const std::optional<double>> feedback) {
  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < feedback.size(); ++i) {
    if (!feedback[i]) continue;
    if (!best || *feedback[i] > *feedback[*best]) best = i;
  }
  if (!best) throw Error("no iteration has a defined feedback accuracy");
  return *best;
}

CfkdResult run_cfkd(const RunInputs& in, const CfkdConfig& config) {
  config.validate();
  const auto& data = in.dataset;
  if (data.train.empty()) throw Error("cfkd needs a nonempty training split");
  if (data.val.empty()) throw Error("cfkd needs a nonempty validation split");
  const square::Geometry geo = data.spec.geometry();

  CfkdResult out;
  CfkdState& state = out.state;
  state.augmented = model::to_labeled(data.train);
  state.feedback_ids = feedback_subset(data.val, config.feedback_subset_size, config.seed);

  std::optional<std::filesystem::path> records_file;
  if (in.run_dir) {
    std::filesystem::create_directories(*in.run_dir);
    records_file = *in.run_dir / "records.jsonl";
    std::filesystem::remove(*records_file);
    std::filesystem::remove(*in.run_dir / "skips.jsonl");
  }
  RecordStore store = records_file ? RecordStore(*records_file) : RecordStore();

  cf::ExplainerConfig fb_explainer = config.explainer;
  fb_explainer.seed = derive_seed(config.seed, "feedback-explainer");

  auto finish_iteration = [&](IterationResult& it) {
    if (!in.test.empty()) it.test_report = model::evaluate_groups(it.params, in.test);
    it.augmented_size = state.augmented.size();
    if (in.run_dir) model::save_checkpoint(*in.run_dir / iteration_dir(it.iteration), it.params);
    if (in.observer && in.observer->on_iteration_end) in.observer->on_iteration_end(it);
  };
  auto measure = [&](IterationResult& it) {
    it.feedback = feedback_accuracy(it.params, data.val, state.feedback_ids, fb_explainer, in.teacher, geo,
                                    it.iteration, &store);
    if (in.observer && in.observer->on_feedback) in.observer->on_feedback(it.feedback);
  };

  {
    const auto t0 = std::chrono::steady_clock::now();
    IterationResult it;
    it.iteration = 0;
    it.params = in.student;
    if (in.observer && in.observer->on_iteration_start) in.observer->on_iteration_start(0);
    if (config.measure_initial_feedback) measure(it);
    it.seconds = elapsed(t0);
    finish_iteration(it);
    state.iterations.push_back(std::move(it));
  }

  std::vector<int> targets;
  for (const auto& e : data.train) targets.push_back(cf::other_class(e.label));

  for (std::size_t i = 1; i <= config.n_iterations; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    const model::ModelParams& current = state.iterations.back().params;
    try {
      if (in.observer && in.observer->on_iteration_start) in.observer->on_iteration_start(i);
      IterationResult it;
      it.iteration = i;
      cf::ExplainerConfig ex = config.explainer;
      ex.seed = derive_seed(config.seed, i);
      const auto results = cf::batch_generate(current, data.train, targets, ex, geo);
      // Stage additions so that a failing teacher leaves the dataset untouched.
      model::LabeledImages staged;
      std::vector<CounterfactualRecord> staged_records;
      std::size_t written = 0;
      for (std::size_t k = 0; k < data.train.size(); ++k) {
        const auto& e = data.train[k];
        const auto& r = results[k];
        ++it.generated;
        if (!r.converged) continue;
        ++it.converged;
        const auto v = in.teacher.judge(teach::Query{e, r, current, i});
        if (!v) {
          ++it.skipped;
          if (in.run_dir) {
            io::append_line(*in.run_dir / "skips.jsonl",
                            nlohmann::json{{"example_id", e.id}, {"iteration", i}, {"reason", "timeout"}}.dump());
          }
          continue;
        }
        staged_records.push_back({e.id, i, "train", e.label, r.target, r.z_tilde, *v});
        if (v->kind == teach::VerdictKind::false_counterfactual) {
          ++it.judged_false;
          staged.append(r.x_tilde.values(), v->assigned_label);
          ++it.added;
        } else {
          ++it.judged_true;
          if (config.add_true_counterfactuals) {
            staged.append(r.x_tilde.values(), v->assigned_label);
            ++it.added;
          }
        }
        if (in.run_dir && written < config.triptychs_per_iteration) {
          char name[64];
          std::snprintf(name, sizeof name, "iter_%02zu_ex%05zu.png", i, e.id);
          cf::write_triptych(*in.run_dir / "triptychs" / name, e.image, r.x_tilde);
          ++written;
        }
      }
      for (const auto& rec : staged_records) store.append(rec);
      state.augmented.append(staged);

      std::optional<model::ModelParams> init;
      if (config.warm_start) init = current;
      it.params = model::train(state.augmented, config.train, init).params;
      measure(it);
      it.seconds = elapsed(t0);
      finish_iteration(it);
      state.iterations.push_back(std::move(it));
    } catch (const std::exception& err) {
      state.aborted = true;
      state.error = "iteration " + std::to_string(i) + ": " + err.what();
      break;
    }
  }

  std::vector<std::optional<double>> fa;
  for (std::size_t k = 1; k < state.iterations.size(); ++k) fa.push_back(state.iterations[k].feedback.accuracy);
  try {
    state.selected = 1 + select_model(fa);
    out.refined = state.iterations[*state.selected].params;
  } catch (const Error& err) {
    if (state.error.empty()) state.error = err.what();
    out.refined = state.iterations.back().params;
  }
  out.records = store.records();
  return out;
}

}  // namespace cfkd::engine
