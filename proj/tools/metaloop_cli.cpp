// Copyright 2026 The Metaloop Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// metaloop: train, evaluate and analyze gradient-based meta-learners.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "metaloop/metaloop.hpp"

namespace fs = std::filesystem;
using namespace metaloop;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool deterministic = false;
  std::optional<std::size_t> adapt_steps;
  std::optional<std::size_t> episodes;
  bool quiet = false;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "Overrides seeds.init and seeds.train");
  cmd->add_option("--out", c.out, "Output directory")->required();
  cmd->add_flag("--deterministic", c.deterministic, "Single-threaded execution for byte-exact replays");
  cmd->add_option("--adapt-steps", c.adapt_steps, "Inner steps at meta-test")->check(CLI::PositiveNumber);
  cmd->add_option("--episodes", c.episodes, "Episodes per evaluation batch")->check(CLI::PositiveNumber);
  cmd->add_flag("--quiet", c.quiet, "No progress output");
}

ExperimentConfig resolve(const Common& c) {
  auto cfg = load_config(c.config);
  if (c.seed) {
    cfg.seeds.init = *c.seed;
    cfg.seeds.train = *c.seed;
  }
  if (c.adapt_steps) cfg.eval.adapt_steps = *c.adapt_steps;
  if (c.episodes) cfg.eval.test_episodes = *c.episodes;
  return cfg;
}

std::size_t threads_for(const Common& c) { return c.deterministic ? 1 : threads_from_env(); }

TrainOptions train_options(const Common& c) {
  TrainOptions o;
  o.threads = threads_for(c);
  if (!c.quiet) o.log = &std::cerr;
  return o;
}

json report_header(const char* command, const ExperimentConfig& cfg) {
  return {{"command", command}, {"config_hash", config_hash(cfg)}, {"created_at", utc_timestamp()}};
}

void print_summary(const std::string& label, const EvalSummary& s) {
  std::cout << std::fixed << std::setprecision(2) << label << "  steps " << s.adapt_steps
            << "  before " << 100 * s.mean_before << " +- " << 100 * s.std_before << "  after "
            << 100 * s.mean_after << " +- " << 100 * s.std_after << '\n'
            << std::defaultfloat << std::setprecision(6);
}

int cmd_train(const Common& c) {
  const auto cfg = resolve(c);
  const auto r = run_train(cfg, c.out, train_options(c));
  std::cout << "best step " << r.best_step << "  val before " << r.best_val_acc_before
            << "  after " << r.best_val_acc_after << '\n';
  return 0;
}

struct EvalArgs {
  std::string checkpoint;
  std::string split = "test";
  std::optional<std::size_t> batches;
  bool sweep = false;
};

int cmd_eval(const Common& c, const EvalArgs& a) {
  const auto cfg = resolve(c);
  write_resolved_config(c.out, cfg);
  validate(cfg);
  const auto params = checkpoint::load<float>(a.checkpoint, cfg.backbone);
  const auto source = make_source(cfg);
  const Split split = parse_split(a.split);
  const std::size_t batches = a.batches.value_or(cfg.eval.test_batches);
  const std::size_t per = split == Split::val && !c.episodes ? cfg.eval.val_episodes : cfg.eval.test_episodes;
  const std::uint64_t seed = split_seed(cfg.seeds, split);

  std::vector<std::optional<std::size_t>> steps;
  if (a.sweep) {
    for (std::size_t s = 1; s <= 10; ++s) steps.push_back(s);
  } else {
    steps.push_back(cfg.eval.adapt_steps);
  }
  json report = report_header("eval", cfg);
  report["checkpoint"] = a.checkpoint;
  report["split"] = to_string(split);
  report["batches"] = batches;
  report["episodes_per_batch"] = per;
  report["results"] = json::array();
  std::ofstream csv(fs::path(c.out) / "eval.csv");
  csv << "adapt_steps,mean_before,std_before,mean_after,std_after\n" << std::setprecision(17);
  for (auto st : steps) {
    const auto s = evaluate(params, cfg, *source, split, seed, batches, per, st, threads_for(c));
    report["results"].push_back(to_json(s));
    csv << s.adapt_steps << ',' << s.mean_before << ',' << s.std_before << ',' << s.mean_after
        << ',' << s.std_after << '\n';
    print_summary(to_string(split), s);
  }
  write_json(fs::path(c.out) / "report.json", report);
  return 0;
}

struct CrossArgs {
  std::vector<std::string> checkpoints;
  std::vector<double> severities;
};

int cmd_crossdomain(const Common& c, const CrossArgs& a) {
  const auto cfg = resolve(c);
  write_resolved_config(c.out, cfg);
  validate(cfg);
  const auto severities = default_severities(cfg, a.severities);
  for (double s : severities) {
    if (!(s >= 0.0 && s <= 1.0)) throw ConfigError("severities must lie in [0, 1]");
  }
  struct Model {
    std::string label;
    ExperimentConfig config;
    ParameterSet<float> params;
  };
  std::vector<Model> models;
  for (const auto& spec : a.checkpoints) {
    // LABEL=PATH or PATH
    const auto eq = spec.find('=');
    const std::string label = eq == std::string::npos ? fs::path(spec).parent_path().filename().string() : spec.substr(0, eq);
    const fs::path path = eq == std::string::npos ? spec : spec.substr(eq + 1);
    // A checkpoint written by train sits next to the config it was trained with.
    const fs::path trained = path.parent_path() / "config.resolved.json";
    auto mc = fs::exists(trained) ? with_inner_settings_of(cfg, load_config(trained)) : cfg;
    auto params = checkpoint::load<float>(path, mc.backbone);
    models.push_back({label.empty() ? path.string() : label, std::move(mc), std::move(params)});
  }
  json report = report_header("crossdomain", cfg);
  report["rows"] = json::array();
  std::ofstream csv(fs::path(c.out) / "crossdomain.csv");
  csv << "model,algorithm,severity,mean_before,std_before,mean_after,std_after\n" << std::setprecision(17);
  for (const auto& m : models) {
    for (const auto& row : crossdomain(m.params, m.config, severities, m.label, std::nullopt, threads_for(c))) {
      const auto& s = row.summary;
      csv << row.label << ',' << to_string(m.config.algorithm) << ',' << row.severity << ','
          << s.mean_before << ',' << s.std_before << ',' << s.mean_after << ',' << s.std_after << '\n';
      auto j = to_json(s);
      j["model"] = row.label;
      j["algorithm"] = to_string(m.config.algorithm);
      j["severity"] = row.severity;
      report["rows"].push_back(j);
      print_summary(row.label + " severity " + std::to_string(row.severity), s);
    }
  }
  write_json(fs::path(c.out) / "report.json", report);
  return 0;
}

struct AblateArgs {
  std::string axis;
  std::vector<std::string> values;
};

int cmd_ablate(const Common& c, const AblateArgs& a) {
  const auto cfg = resolve(c);
  write_resolved_config(c.out, cfg);
  const auto variants = ablation_variants(cfg, parse_axis(a.axis), a.values);
  std::vector<AblationRow> rows;
  for (const auto& v : variants) {
    if (!c.quiet) std::cerr << "variant " << v.label << '\n';
    rows.push_back(run_variant(v, train_options(c)));
    print_summary(v.label, rows.back().test);
  }
  json report = report_header("ablate", cfg);
  report["axis"] = a.axis;
  report["rows"] = json::array();
  std::ofstream csv(fs::path(c.out) / "ablation.csv");
  csv << "variant,best_step,best_val_acc_after,mean_before,std_before,mean_after,std_after\n"
      << std::setprecision(17);
  for (const auto& r : rows) {
    csv << r.label << ',' << r.best_step << ',' << r.best_val_acc_after << ',' << r.test.mean_before
        << ',' << r.test.std_before << ',' << r.test.mean_after << ',' << r.test.std_after << '\n';
    auto j = to_json(r.test);
    j["variant"] = r.label;
    j["best_step"] = r.best_step;
    j["best_val_acc_after"] = r.best_val_acc_after;
    report["rows"].push_back(j);
  }
  write_curves_csv(fs::path(c.out) / "curves.csv", rows);
  write_json(fs::path(c.out) / "report.json", report);
  return 0;
}

struct AnalyzeArgs {
  std::string checkpoint;
  std::vector<std::string> layers;
  std::vector<std::string> nil_layers;
  std::string split = "test";
  bool dump = false;
};

int cmd_analyze(const Common& c, const AnalyzeArgs& a) {
  const auto cfg = resolve(c);
  write_resolved_config(c.out, cfg);
  validate(cfg);
  const auto params = checkpoint::load<float>(a.checkpoint, cfg.backbone);
  const auto source = make_source(cfg);
  const Split split = parse_split(a.split);
  const std::size_t count = c.episodes.value_or(100);
  const auto r = analyze(params, cfg, *source, split, count, split_seed(cfg.seeds, split), a.layers,
                         a.nil_layers, threads_for(c));
  const fs::path out(c.out);
  auto write = [&](const char* name, const std::vector<MetricRow>& rows) {
    std::ofstream os(out / name);
    if (!os) throw std::runtime_error("cannot write " + (out / name).string());
    write_metric_csv(os, rows);
  };
  write("similarity.csv", r.similarity);
  write("cka.csv", r.cka);
  write("grad_norms.csv", r.grad_norms);
  write("nil_table.csv", r.table);
  if (a.dump) {
    const auto ep = sample_episodes<float>(*source, split, cfg.episodes.n, cfg.episodes.k,
                                           cfg.episodes.q, 1, split_seed(cfg.seeds, split));
    const auto frozen = params.detached();
    const auto adapted = adapt_for_analysis(frozen, ep[0], make_inner(cfg, params), cfg.eval.adapt_steps);
    const auto layers = a.layers.empty() ? capture_names(cfg.backbone) : a.layers;
    dump_representations(frozen, adapted, ep[0], layers, out / "dumps");
  }
  json report = report_header("analyze", cfg);
  report["checkpoint"] = a.checkpoint;
  report["episodes"] = count;
  report["head_gap_cosine"] = r.head_gap_cosine;
  json table = json::object();
  for (const auto& row : r.table) table[row.layer][row.state] = row.value;
  report["table"] = table;
  write_json(out / "report.json", report);
  for (const auto& row : r.table) {
    std::cout << row.layer << ' ' << row.state << ' ' << row.metric << ' ' << row.value << '\n';
  }
  return 0;
}

int cmd_export(const Common& c, std::size_t per_class) {
  const auto cfg = resolve(c);
  write_resolved_config(c.out, cfg);
  validate(cfg);
  const auto source = make_source(cfg);
  export_dataset(*source, c.out, per_class);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"metaloop: gradient-based meta-learning (MAML, ANIL, BOIL) with representation analysis"};
  app.require_subcommand(1);

  Common common;
  auto* train = app.add_subcommand("train", "Meta-train; keeps the best-validation checkpoint");
  add_common(train, common);

  EvalArgs eval_args;
  auto* eval = app.add_subcommand("eval", "Mean and std of accuracy over seeded episode batches");
  add_common(eval, common);
  eval->add_option("--checkpoint", eval_args.checkpoint)->required()->check(CLI::ExistingFile);
  eval->add_option("--split", eval_args.split, "train, val or test");
  eval->add_option("--batches", eval_args.batches)->check(CLI::PositiveNumber);
  eval->add_flag("--sweep", eval_args.sweep, "One row per adaptation step count 1..10");

  CrossArgs cross_args;
  auto* cross = app.add_subcommand("crossdomain", "Accuracy on shifted target domains");
  add_common(cross, common);
  cross->add_option("--checkpoint", cross_args.checkpoints, "PATH or LABEL=PATH, repeatable")->required();
  cross->add_option("--severities", cross_args.severities, "Default: target.severity, else 0,0.5,1")->delimiter(',');

  AblateArgs ablate_args;
  auto* ablate = app.add_subcommand("ablate", "Train and evaluate one model per axis value");
  add_common(ablate, common);
  ablate->add_option("--axis", ablate_args.axis, "head_lr, layers or head_variant")->required();
  ablate->add_option("--values", ablate_args.values, "Comma-separated axis values")
      ->required()
      ->delimiter(',');

  AnalyzeArgs analyze_args;
  auto* analyze_cmd = app.add_subcommand("analyze", "Representation analysis of a checkpoint");
  add_common(analyze_cmd, common);
  analyze_cmd->add_option("--checkpoint", analyze_args.checkpoint)->required()->check(CLI::ExistingFile);
  analyze_cmd->add_option("--layers", analyze_args.layers, "Layers for similarity and CKA")->delimiter(',');
  analyze_cmd->add_option("--nil-layers", analyze_args.nil_layers, "Layers for NIL testing")->delimiter(',');
  analyze_cmd->add_option("--split", analyze_args.split, "train, val or test");
  analyze_cmd->add_flag("--dump", analyze_args.dump, "Write representation dumps of one episode");

  std::size_t per_class = 600;
  auto* exp = app.add_subcommand("export-dataset", "Write the configured domain in the on-disk format");
  add_common(exp, common);
  exp->add_option("--per-class", per_class)->check(CLI::PositiveNumber);

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) return cmd_train(common);
    if (eval->parsed()) return cmd_eval(common, eval_args);
    if (cross->parsed()) return cmd_crossdomain(common, cross_args);
    if (ablate->parsed()) return cmd_ablate(common, ablate_args);
    if (analyze_cmd->parsed()) return cmd_analyze(common, analyze_args);
    if (exp->parsed()) return cmd_export(common, per_class);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
