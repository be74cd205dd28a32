// Copyright 2026 The vfuse Authors
// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Experiment orchestration behind the command-line tool: resolved configs,
// run manifests, and one function per subcommand.
//
// A config is a nested JSON object. Resolution order, later wins:
//   built-in defaults < config file < --dotted.key=value flags.
// The output directory comes from io.out, falling back to $VFUSE_OUT.

#pragma once

#include <fcntl.h>
#include <unistd.h>

#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "vfuse/contrastive.hpp"
#include "vfuse/errors.hpp"
#include "vfuse/model.hpp"
#include "vfuse/probe.hpp"
#include "vfuse/tasks.hpp"
#include "vfuse/trainer.hpp"

namespace vfuse {

using nlohmann::json;

inline constexpr const char* kCodeVersion = "vfuse 0.1.0";
inline constexpr const char* kOutputEnvVar = "VFUSE_OUT";

inline json default_config() {
  return json{
      {"model", ModelConfig{}},
      {"task", TaskSpec{}},
      {"train", TrainConfig{}},
      {"probe",
       {{"lambda", 0.0},
        {"delta", 0.5},
        {"delta_review", 0.5},
        {"recovery_window", 0},
        {"latency_repeats", 3}}},
      {"contrast",
       {{"strategy", "fusion"},
        {"boundary", nullptr},
        {"rho", 0.2},
        {"lambda", 0.1},
        {"diagnostics", false}}},
      {"sweep", {{"rhos", {0.0, 0.1, 0.2, 0.3, 0.5, 0.7, 1.0}}, {"lambda", 0.1}}},
      {"io",
       {{"out", ""}, {"checkpoint", ""}, {"fusion_report", ""}, {"dataset", ""}}},
  };
}

namespace detail {

inline const char* type_name(const json& j) {
  if (j.is_number()) return "number";
  return j.type_name();
}

inline bool compatible(const json& def, const json& v) {
  if (def.is_null() || v.is_null()) return true;
  if (def.is_number()) return v.is_number();
  return def.type() == v.type();
}

// Overlays `src` on `dst`, rejecting keys and types the defaults lack.
inline void merge_checked(json& dst, const json& src, const std::string& prefix) {
  if (!src.is_object()) throw UsageError("config: '" + prefix + "' must be an object");
  for (auto it = src.begin(); it != src.end(); ++it) {
    const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!dst.contains(it.key())) throw UsageError("config: unknown key '" + key + "'");
    json& slot = dst[it.key()];
    if (slot.is_object()) {
      merge_checked(slot, it.value(), key);
    } else {
      if (!compatible(slot, it.value())) {
        throw UsageError("config: key '" + key + "' expects " + type_name(slot) +
                         ", got " + type_name(it.value()));
      }
      slot = it.value();
    }
  }
}

inline json parse_flag_value(const std::string& raw) {
  try {
    return json::parse(raw);
  } catch (const json::parse_error&) {
    return json(raw);  // bare strings such as paths or strategy names
  }
}

inline std::string checksum_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw UsageError("cannot read input file: " + path);
  std::uint64_t h = 0xcbf29ce484222325ull;
  char buf[1 << 14];
  while (is) {
    is.read(buf, sizeof(buf));
    for (std::streamsize i = 0; i < is.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ull;
    }
  }
  std::ostringstream os;
  os << "fnv1a64:" << std::hex << h;
  return os.str();
}

inline std::string fmt(double v) { return format_double(v); }

}  // namespace detail

// Applies "a.b.c" -> value overrides on top of `config`.
inline void apply_override(json& config, const std::string& dotted, const json& value) {
  json patch = value;
  std::vector<std::string> parts;
  std::stringstream ss(dotted);
  std::string part;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  if (parts.empty()) throw UsageError("config: empty override key");
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) patch = json{{*it, patch}};
  detail::merge_checked(config, patch, "");
}

inline json resolve_config(const std::string& config_path,
                           const std::vector<std::pair<std::string, std::string>>& flags) {
  json config = default_config();
  if (!config_path.empty()) {
    std::ifstream is(config_path);
    if (!is) throw UsageError("cannot open config file: " + config_path);
    json file;
    try {
      file = json::parse(is);
    } catch (const json::parse_error& e) {
      throw UsageError("config file " + config_path + ": " + e.what());
    }
    detail::merge_checked(config, file, "");
  }
  for (const auto& [key, raw] : flags) {
    apply_override(config, key, detail::parse_flag_value(raw));
  }
  if (config["io"]["out"].get<std::string>().empty()) {
    if (const char* env = std::getenv(kOutputEnvVar); env && *env) {
      config["io"]["out"] = env;
    }
  }
  return config;
}

inline const json& require_key(const json& config, const std::string& dotted) {
  const json* node = &config;
  std::stringstream ss(dotted);
  std::string part;
  while (std::getline(ss, part, '.')) {
    if (!node->is_object() || !node->contains(part)) {
      throw UsageError("missing config key: " + dotted);
    }
    node = &(*node)[part];
  }
  if (node->is_null() || (node->is_string() && node->get<std::string>().empty())) {
    throw UsageError("missing config key: " + dotted);
  }
  return *node;
}

template <typename T>
T config_get(const json& config, const std::string& dotted) {
  const json& node = require_key(config, dotted);
  try {
    return node.get<T>();
  } catch (const json::exception& e) {
    throw UsageError("config key " + dotted + ": " + e.what());
  }
}

// Exclusive lock on an output directory; released on destruction.
class OutputLock {
 public:
  explicit OutputLock(const std::filesystem::path& dir) : path_(dir / ".vfuse.lock") {
    fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd_ < 0) {
      throw UsageError("output directory is locked by another run: " + dir.string() +
                       " (remove " + path_.string() + " if stale)");
    }
  }
  OutputLock(const OutputLock&) = delete;
  OutputLock& operator=(const OutputLock&) = delete;
  ~OutputLock() {
    ::close(fd_);
    std::error_code ec;
    std::filesystem::remove(path_, ec);
  }

 private:
  std::filesystem::path path_;
  int fd_ = -1;
};

struct RunManifest {
  std::string command;
  json config;
  std::map<std::string, std::string> inputs;  // path -> checksum
  std::vector<std::string> outputs;
  std::vector<std::string> warnings;
  double duration_s = 0.0;

  json to_json() const {
    return json{{"command", command},
                {"code_version", kCodeVersion},
                {"config", config},
                {"seeds",
                 {{"model", config["model"]["seed"]},
                  {"task", config["task"]["seed"]},
                  {"train", config["train"]["seed"]}}},
                {"inputs", inputs},
                {"outputs", outputs},
                {"warnings", warnings},
                {"duration_s", duration_s}};
  }
};

inline json read_manifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw UsageError("cannot open manifest: " + path);
  try {
    return json::parse(is);
  } catch (const json::parse_error& e) {
    throw UsageError("manifest " + path + ": " + e.what());
  }
}

// Per-run state shared by the subcommands.
class Run {
 public:
  Run(std::string command, json config, std::ostream& log)
      : log_(log), start_(std::chrono::steady_clock::now()) {
    manifest_.command = std::move(command);
    manifest_.config = std::move(config);
    out_ = config_get<std::string>(manifest_.config, "io.out");
    std::error_code ec;
    std::filesystem::create_directories(out_, ec);
    if (ec || !std::filesystem::is_directory(out_)) {
      throw UsageError("cannot create output directory: " + out_.string());
    }
    lock_ = std::make_unique<OutputLock>(out_);
  }

  const json& config() const { return manifest_.config; }
  std::ostream& log() { return log_; }

  std::string output(const std::string& name) {
    manifest_.outputs.push_back(name);
    return (out_ / name).string();
  }
  void input(const std::string& path) { manifest_.inputs[path] = detail::checksum_file(path); }
  void warn(const std::string& msg) {
    log_ << "warning: " << msg << '\n';
    manifest_.warnings.push_back(msg);
  }

  void write_text(const std::string& name, const std::string& text) {
    const std::string path = output(name);
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw UsageError("cannot write " + path);
    os << text;
  }

  // Written last, so a manifest only exists for runs that completed.
  void finish() {
    manifest_.duration_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    manifest_.outputs.push_back("manifest.json");
    std::ofstream os(out_ / "manifest.json", std::ios::trunc);
    if (!os) throw UsageError("cannot write manifest in " + out_.string());
    os << manifest_.to_json().dump(2) << '\n';
  }

  const RunManifest& manifest() const { return manifest_; }
  const std::filesystem::path& out_dir() const { return out_; }

 private:
  std::ostream& log_;
  std::chrono::steady_clock::time_point start_;
  RunManifest manifest_;
  std::filesystem::path out_;
  std::unique_ptr<OutputLock> lock_;
};

namespace detail {

inline Model load_model(Run& run) {
  const auto path = config_get<std::string>(run.config(), "io.checkpoint");
  Model model = load_checkpoint(path);
  run.input(path);
  return model;
}

inline FusionReport load_report(Run& run) {
  const auto path = config_get<std::string>(run.config(), "io.fusion_report");
  FusionReport rep = read_fusion_report(path);
  run.input(path);
  return rep;
}

inline TaskSpec task_spec(const json& config) {
  try {
    return config.at("task").get<TaskSpec>();
  } catch (const json::exception& e) {
    throw UsageError(std::string("config key task: ") + e.what());
  }
}

// Eval samples from io.dataset when set, otherwise regenerated from the task.
inline std::vector<SyntheticSample> eval_samples(Run& run, const Model& model,
                                                 const TaskSpec& spec) {
  const auto path = run.config()["io"]["dataset"].get<std::string>();
  spec.validate(model.config.vocab_size);
  if (!path.empty()) {
    auto samples = read_samples(path);
    run.input(path);
    if (samples.empty()) throw UsageError("dataset " + path + " is empty");
    for (const auto& s : samples) {
      if (s.image_tokens.size() != spec.cells()) {
        throw UsageError("dataset " + path + " does not match task.grid_side");
      }
    }
    return samples;
  }
  return generate_dataset(spec, model.config.vocab_size).eval;
}

inline CandidateStrategy strategy_from(const json& config, const FusionReport& report) {
  CandidateStrategy s;
  s.kind = parse_strategy(config_get<std::string>(config, "contrast.strategy"));
  const json& b = config["contrast"]["boundary"];
  if (!b.is_null()) s.boundary = b.get<std::size_t>();
  if (s.kind == StrategyKind::kFusion) s.fusion_set = report.fusion_layers;
  return s;
}

inline void warn_if_near_chance(Run& run, double accuracy, const TaskSpec& spec) {
  const double chance = 1.0 / static_cast<double>(spec.n_colors);
  if (accuracy <= chance + kChanceBand) {
    run.warn("plain accuracy " + fmt(accuracy) +
             " is at chance level; the checkpoint looks untrained");
  }
}

}  // namespace detail

inline void cmd_train(Run& run) {
  const json& cfg = run.config();
  const auto mc = config_get<ModelConfig>(cfg, "model");
  const auto spec = detail::task_spec(cfg);
  const auto tc = config_get<TrainConfig>(cfg, "train");
  mc.validate();
  tc.validate();
  spec.validate(mc.vocab_size);
  if (mc.max_seq_len < spec.sequence_length()) {
    throw UsageError("model.max_seq_len " + std::to_string(mc.max_seq_len) +
                     " is shorter than the task sequence (" +
                     std::to_string(spec.sequence_length()) + ")");
  }
  Model model = init_model(mc);
  const Dataset data = generate_dataset(spec, mc.vocab_size);
  const TrainResult result = train(model, data, tc, [&](const CurvePoint& p) {
    run.log() << "step " << p.step << " loss " << p.loss << " eval_acc "
              << p.eval_accuracy << '\n';
  });
  save_checkpoint(model, run.output("checkpoint.bin"));
  std::ostringstream csv;
  csv << "step,loss,eval_accuracy\n";
  for (const auto& p : result.curve) {
    csv << p.step << ',' << detail::fmt(p.loss) << ',' << detail::fmt(p.eval_accuracy)
        << '\n';
  }
  run.write_text("curve.csv", csv.str());
  run.log() << "final eval accuracy " << result.final_eval_accuracy << '\n';
  run.finish();
}

inline void cmd_gen_data(Run& run) {
  const json& cfg = run.config();
  const auto spec = detail::task_spec(cfg);
  const auto vocab = config_get<std::size_t>(cfg, "model.vocab_size");
  const Dataset ds = generate_dataset(spec, vocab);
  write_samples(ds.train, run.output("train.jsonl"));
  write_samples(ds.eval, run.output("eval.jsonl"));
  run.finish();
}

inline std::string sweep_csv(const Sweep& sweep) {
  std::ostringstream os;
  os << "layer,accuracy,mean_latency_s,inv_latency\n";
  auto row = [&](const std::string& layer, const SweepRecord& r) {
    os << layer << ',' << detail::fmt(r.accuracy) << ',' << detail::fmt(r.mean_latency)
       << ',' << detail::fmt(r.inv_latency()) << '\n';
  };
  row("baseline", sweep.baseline);
  for (const auto& r : sweep.layers) row(std::to_string(*r.layer), r);
  return os.str();
}

inline void cmd_probe(Run& run) {
  const json& cfg = run.config();
  const Model model = detail::load_model(run);
  const TaskSpec spec = detail::task_spec(cfg);
  const auto eval = detail::eval_samples(run, model, spec);
  SweepOptions so;
  so.latency_repeats = config_get<std::size_t>(cfg, "probe.latency_repeats");
  const Sweep sweep =
      layer_mask_sweep(model, spec, eval, config_get<double>(cfg, "probe.lambda"), so);
  run.write_text("sweep.csv", sweep_csv(sweep));
  if (sweep.near_chance_baseline) {
    run.warn("baseline accuracy " + detail::fmt(sweep.baseline.accuracy) +
             " is at chance level; fusion rules are not applicable");
  }

  FusionRule rule;
  rule.delta = config_get<double>(cfg, "probe.delta");
  rule.delta_review = config_get<double>(cfg, "probe.delta_review");
  rule.recovery_window = cfg["probe"]["recovery_window"].get<std::size_t>();
  FusionReport report;
  bool have_report = false;
  try {
    report = build_fusion_report(sweep, rule);
    have_report = true;
  } catch (const MethodInapplicableError& e) {
    run.warn(e.what());
  }
  if (have_report) {
    run.write_text("fusion_report.txt", format_fusion_report(report));
    if (!report.review_layer) {
      run.warn("no review layer detected; contrastive masking is inapplicable");
    }
  }

  const DistanceCurve curve = distance_to_final_curve(model, spec, eval);
  std::ostringstream dc;
  dc << "layer,mean_hellinger_to_final\n";
  for (std::size_t l = 0; l < curve.mean_distance.size(); ++l) {
    dc << l << ',' << detail::fmt(curve.mean_distance[l]) << '\n';
  }
  run.write_text("distance_to_final.csv", dc.str());
  if (have_report && report.review_layer) {
    const std::size_t k = *report.post_integrated_layer;
    run.log() << "post-integrated layer " << k << " ranks "
              << distance_rank(curve, k, *report.review_layer)
              << " by distance to the final layer among layers below "
              << *report.review_layer << '\n';
  }
  run.finish();
}

inline std::string histogram_csv(const std::map<std::size_t, std::size_t>& hist) {
  std::ostringstream os;
  os << "layer,count\n";
  for (const auto& [layer, count] : hist) os << layer << ',' << count << '\n';
  return os.str();
}

// Per-sample pre-integrated layer selection without any masking.
inline void cmd_select(Run& run) {
  const json& cfg = run.config();
  const Model model = detail::load_model(run);
  const FusionReport report = detail::load_report(run);
  const TaskSpec spec = detail::task_spec(cfg);
  const auto eval = detail::eval_samples(run, model, spec);
  const ReviewPlan plan = make_review_plan(report, model.config.n_layers,
                                           detail::strategy_from(cfg, report));
  std::map<std::size_t, std::size_t> hist;
  std::map<std::size_t, double> mean_dist;
  for (std::size_t c : plan.candidates) hist[c] = 0;
  const std::int32_t sep = spec.separator_token();
  for (const auto& s : eval) {
    const TokenSequence seq = s.to_sequence(sep);
    const ForwardTrace trace = forward(model, seq, {}, true);
    const auto d = detail::decide_mask(trace, seq, plan, 0.0, 1.0);
    ++hist[d.selection.layer];
    for (const auto& [layer, dist] : d.selection.distances) mean_dist[layer] += dist;
  }
  run.write_text("selection_histogram.csv", histogram_csv(hist));
  std::ostringstream os;
  os << "layer,mean_hellinger_to_post\n";
  for (const auto& [layer, total] : mean_dist) {
    os << layer << ',' << detail::fmt(total / static_cast<double>(eval.size())) << '\n';
  }
  run.write_text("candidate_distances.csv", os.str());
  run.finish();
}

inline void cmd_contrast(Run& run) {
  const json& cfg = run.config();
  const Model model = detail::load_model(run);
  const FusionReport report = detail::load_report(run);
  const TaskSpec spec = detail::task_spec(cfg);
  const auto eval = detail::eval_samples(run, model, spec);
  const ReviewPlan plan = make_review_plan(report, model.config.n_layers,
                                           detail::strategy_from(cfg, report));
  const double rho = config_get<double>(cfg, "contrast.rho");
  const double lambda = config_get<double>(cfg, "contrast.lambda");
  const bool diagnostics = cfg["contrast"]["diagnostics"].get<bool>();
  const ContrastiveEval ev =
      evaluate_contrastive(model, spec, eval, plan, rho, lambda, diagnostics);
  detail::warn_if_near_chance(run, ev.plain_accuracy, spec);

  std::ostringstream rep;
  rep << "# vfuse contrastive evaluation\n"
      << "samples = " << eval.size() << '\n'
      << "strategy = " << to_string(plan.strategy) << '\n'
      << "review_layer = " << plan.review << '\n'
      << "post_integrated_layer = " << plan.post << '\n'
      << "rho = " << detail::fmt(rho) << '\n'
      << "lambda = " << detail::fmt(lambda) << '\n'
      << "accuracy = " << detail::fmt(ev.accuracy) << '\n'
      << "plain_accuracy = " << detail::fmt(ev.plain_accuracy) << '\n'
      << "localization_ia = " << detail::fmt(ev.localization_ia) << '\n'
      << "localization_post = " << detail::fmt(ev.localization_post) << '\n'
      << "localization_pre = " << detail::fmt(ev.localization_pre) << '\n'
      << "degenerate_ia = " << ev.degenerate_ia << '\n'
      << "mean_latency_s = " << detail::fmt(ev.mean_latency) << '\n';
  run.write_text("contrast_report.txt", rep.str());
  run.write_text("selection_histogram.csv", histogram_csv(ev.selection_histogram));

  if (diagnostics) {
    std::ostringstream os;
    for (std::size_t i = 0; i < ev.per_sample.size(); ++i) {
      const auto& r = ev.per_sample[i];
      json j = {{"sample", i},
                {"prediction", r.prediction},
                {"answer", eval[i].answer_token},
                {"pre_integrated", r.selection.layer},
                {"ia", r.ia},
                {"masked", r.masked_indices},
                {"post_attention", Vec(r.post_attention.begin(), r.post_attention.end())},
                {"pre_attention", Vec(r.pre_attention.begin(), r.pre_attention.end())}};
      json dist = json::object();
      for (const auto& [layer, d] : r.selection.distances) dist[std::to_string(layer)] = d;
      j["distances"] = dist;
      os << j.dump() << '\n';
    }
    run.write_text("diagnostics.jsonl", os.str());
  }
  run.log() << "accuracy " << ev.accuracy << " (plain " << ev.plain_accuracy << ")\n";
  run.finish();
}

inline void cmd_sweep_ratio(Run& run) {
  const json& cfg = run.config();
  const auto rhos = config_get<std::vector<double>>(cfg, "sweep.rhos");
  if (rhos.empty()) throw UsageError("sweep.rhos must not be empty");
  for (double r : rhos) {
    if (!(r >= 0.0 && r <= 1.0)) throw UsageError("sweep.rhos entries must lie in [0, 1]");
  }
  const Model model = detail::load_model(run);
  const FusionReport report = detail::load_report(run);
  const TaskSpec spec = detail::task_spec(cfg);
  const auto eval = detail::eval_samples(run, model, spec);
  const ReviewPlan plan = make_review_plan(report, model.config.n_layers,
                                           detail::strategy_from(cfg, report));
  const double lambda = config_get<double>(cfg, "sweep.lambda");
  std::ostringstream os;
  os << "rho,accuracy,mean_latency_s\n";
  for (double rho : rhos) {
    const ContrastiveEval ev = evaluate_contrastive(model, spec, eval, plan, rho, lambda);
    os << detail::fmt(rho) << ',' << detail::fmt(ev.accuracy) << ','
       << detail::fmt(ev.mean_latency) << '\n';
    run.log() << "rho " << rho << " accuracy " << ev.accuracy << '\n';
  }
  run.write_text("ratio_sweep.csv", os.str());
  run.finish();
}

inline const std::map<std::string, void (*)(Run&)>& commands() {
  static const std::map<std::string, void (*)(Run&)> table = {
      {"train", cmd_train},       {"gen-data", cmd_gen_data},
      {"probe", cmd_probe},       {"select", cmd_select},
      {"contrast", cmd_contrast}, {"sweep-ratio", cmd_sweep_ratio},
  };
  return table;
}

// Runs a subcommand against a resolved config; returns the manifest.
inline RunManifest run_command(const std::string& command, const json& config,
                               std::ostream& log = std::cerr) {
  const auto it = commands().find(command);
  if (it == commands().end()) throw UsageError("unknown command '" + command + "'");
  Run run(command, config, log);
  it->second(run);
  return run.manifest();
}

// Re-executes the command recorded in a manifest, optionally redirecting the
// output directory.
inline RunManifest rerun_manifest(const std::string& manifest_path,
                                  const std::vector<std::pair<std::string, std::string>>& flags,
                                  std::ostream& log = std::cerr) {
  const json m = read_manifest(manifest_path);
  if (!m.contains("command") || !m.contains("config")) {
    throw UsageError("manifest " + manifest_path + " lacks command/config");
  }
  json config = default_config();
  detail::merge_checked(config, m["config"], "");
  for (const auto& [key, raw] : flags) {
    apply_override(config, key, detail::parse_flag_value(raw));
  }
  return run_command(m["command"].get<std::string>(), config, log);
}

}  // namespace vfuse
