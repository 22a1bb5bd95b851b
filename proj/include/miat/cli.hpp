#pragma once

// Command-line front end. `run` returns the process exit code:
// 0 success, 1 validation or I/O failure, 2 usage error.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "miat/ablation.hpp"
#include "miat/checkpoint.hpp"
#include "miat/evaluation.hpp"
#include "miat/ngsim.hpp"
#include "miat/run_config.hpp"
#include "miat/synthetic.hpp"
#include "miat/training.hpp"

namespace miat::cli {

namespace fs = std::filesystem;
using nlohmann::json;

struct Streams {
  std::ostream& out = std::cout;
  std::ostream& err = std::cerr;
};

namespace detail {

inline void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

inline fs::path out_dir(const json& c) {
  const fs::path dir = c.at("out_dir").get<std::string>();
  if (dir.empty()) throw ValidationError("missing required field: out_dir");
  fs::create_directories(dir);
  return dir;
}

inline void echo_config(const json& c, const std::string& command) {
  json e = c;
  e["command"] = command;
  write_json(out_dir(c) / "config.json", e);
}

inline ngsim::DatasetSplit load_data(const json& c) {
  return ngsim::load_dataset(cfg::require_path(c, "dataset"));
}

inline const TrajectorySample& first_sample(const ngsim::DatasetSplit& d) {
  for (const auto* part : d.parts()) {
    if (!part->empty()) return part->front();
  }
  throw ValidationError("dataset contains no samples");
}

inline Checkpoint<float> load_model(const json& c) {
  return load_checkpoint<float>(cfg::require_path(c, "checkpoint"));
}

inline void check_dims(const ModelConfig& mc, const std::vector<TrajectorySample>& samples) {
  if (samples.empty()) throw ValidationError("selected split is empty");
  const auto& s = samples.front();
  if (s.history_len != mc.history_len || s.future_len != mc.future_len || s.input_dim != mc.input_dim) {
    throw ValidationError("dataset dimensions (T, F, D_in) do not match the checkpoint");
  }
}

// ---------------------------------------------------------------------------
// Subcommands

inline int preprocess(const json& c, Streams io) {
  const auto input = cfg::require_path(c, "input");
  std::ifstream in(input);
  if (!in) throw std::runtime_error("cannot open " + input);
  const auto parsed = ngsim::parse_records(in);
  const auto sc = cfg::sample_config(c);
  auto samples = ngsim::build_samples(parsed.records, sc, {}, c.at("threads"));
  auto split = ngsim::split_by_vehicle(std::move(samples), cfg::fractions(c), c.at("seed"));
  const auto dir = out_dir(c);
  ngsim::save_dataset(split, (dir / "dataset.bin").string());
  auto stats = ngsim::dataset_stats(split);
  stats["rows_read"] = parsed.rows_read;
  stats["rows_skipped"] = parsed.rows_skipped;
  write_json(dir / "stats.json", stats);
  io.out << "preprocess: " << parsed.rows_read << " rows (" << parsed.rows_skipped << " skipped) -> "
         << split.train.size() << "/" << split.validation.size() << "/" << split.test.size()
         << " train/validation/test samples in " << (dir / "dataset.bin").string() << "\n";
  return 0;
}

inline int synth(const json& c, Streams io) {
  const int per_class = c.at("synth").at("n_per_class");
  const auto split = synth::generate_dataset(c.at("seed"), per_class, cfg::synth_options(c));
  const auto dir = out_dir(c);
  ngsim::save_dataset(split, (dir / "dataset.bin").string());
  write_json(dir / "stats.json", ngsim::dataset_stats(split));
  io.out << "synth: " << split.train.size() << "/" << split.validation.size() << "/" << split.test.size()
         << " train/validation/test samples in " << (dir / "dataset.bin").string() << "\n";
  return 0;
}

inline int train(const json& c, Streams io) {
  const auto data = load_data(c);
  const auto mc = cfg::model_config(c, first_sample(data));
  const auto tc = cfg::train_config(c);
  const auto lc = cfg::loss_config(c);
  const auto dir = out_dir(c);

  TrainOptions<float> opt;
  opt.checkpoint_path = dir / "checkpoint.bin";
  opt.state_path = dir / "state.bin";
  opt.metrics_path = dir / "metrics.csv";
  opt.metadata = {{"seed", c.at("seed")}, {"loss", lc.to_json()}, {"train", tc.to_json()}};
  opt.on_epoch = [&](const MetricRow& r) {
    io.out << "epoch " << r.epoch << " [" << r.phase << "] train_loss " << format_double(r.train_loss)
           << " val_rmse@5s " << format_double(r.val_rmse[kHorizons - 1]) << "\n";
  };
  std::optional<Checkpoint<float>> resume;
  const std::string resume_path = c.at("resume");
  if (!resume_path.empty()) {
    resume = load_checkpoint<float>(resume_path, &mc);
    opt.resume = &*resume;
    const auto best = fs::path(resume_path).parent_path() / "checkpoint.bin";
    if (fs::exists(best)) opt.resume_best = load_checkpoint<float>(best, &mc).params;
  }
  const auto res = miat::train<float>(data, mc, tc, lc, opt);

  json report = {{"model", mc.to_json()},
                 {"parameters", count_parameters(res.params)},
                 {"best_epoch", res.best_epoch},
                 {"best_val_rmse_5s", json_number(res.best_metric)},
                 {"epochs_run", res.log.size()},
                 {"diverged", res.diverged}};
  if (res.diverged) report["diagnostic"] = res.diagnostic;
  if (!data.test.empty()) {
    EvalOptions eo;
    eo.threads = tc.threads;
    eo.cumulative = c.at("eval").at("cumulative");
    report["test"] = to_json(evaluate(res.best_params, data.test, mc, eo));
  }
  write_json(dir / "report.json", report);
  if (res.diverged) {
    io.err << "error: " << res.diagnostic << "\n";
    return 1;
  }
  io.out << "train: " << count_parameters(res.params) << " parameters, best epoch " << res.best_epoch
         << ", checkpoint " << opt.checkpoint_path.string() << "\n";
  return 0;
}

inline int eval(const json& c, Streams io) {
  const auto ck = load_model(c);
  const auto data = load_data(c);
  const auto& part = cfg::split_part(data, c.at("eval").at("split"));
  check_dims(ck.model, part);
  EvalOptions eo;
  eo.threads = c.at("threads");
  eo.cumulative = c.at("eval").at("cumulative");
  const auto r = evaluate(ck.params, part, ck.model, eo);
  const auto dir = out_dir(c);
  json report = {{"split", c.at("eval").at("split")},
                 {"variant", to_string(ck.model.variant)},
                 {"result", to_json(r)},
                 {"reference", reference_rows()}};
  write_json(dir / "report.json", report);
  const auto text = text_report(r, to_string(ck.model.variant));
  write_text(dir / "report.txt", text);
  io.out << text;
  return 0;
}

inline int ablate(const json& c, Streams io) {
  const auto data = load_data(c);
  const auto mc = cfg::model_config(c, first_sample(data));
  const auto dir = out_dir(c);
  AblationOptions ao;
  ao.include_vanilla = c.at("ablate").at("include_vanilla");
  ao.run_dir = dir / "runs";
  ao.on_run = [&](const AblationRun& r) {
    io.out << "ablate: " << r.name << " test rmse@5s " << format_double(r.test.rmse[kHorizons - 1]) << "\n";
  };
  const auto tc = cfg::train_config(c);
  const auto lc = cfg::loss_config(c);
  if (tc.epochs <= 0) throw ValidationError("train.epochs must be >= 1 for an ablation");
  const auto rep = ablation_sweep<float>(data, mc, tc, lc, cfg::ablation_lambdas(c), ao);
  write_json(dir / "report.json", to_json(rep));
  const auto text = text_report(rep);
  write_text(dir / "report.txt", text);
  emit_plot_data(rep, dir / "plots");
  io.out << text;
  return 0;
}

inline int gradcheck(const json& c, Streams io) {
  const auto mc = cfg::model_config(c);
  const auto lc = cfg::loss_config(c);
  const auto opt = cfg::gradcheck_options(c);
  const double tol = c.at("gradcheck").at("tolerance");
  const auto params = init_parameters<double>(mc, c.at("seed"));
  const auto sample = gradient_check_sample(mc, c.at("gradcheck").at("sample_seed"));
  const auto r = gradient_check(params, mc, sample, lc, opt);
  const bool ok = r.max_error < tol;
  json report = {{"max_relative_error", r.max_error},
                 {"tolerance", tol},
                 {"passed", ok},
                 {"checked", r.checked},
                 {"kink_redraws", r.kink_redraws},
                 {"groups", r.groups},
                 {"covered_groups", r.covered_groups},
                 {"worst_parameter", r.worst_parameter},
                 {"worst_analytic", r.worst_analytic},
                 {"worst_numeric", r.worst_numeric},
                 {"seconds", r.seconds}};
  write_json(out_dir(c) / "report.json", report);
  io.out << "gradcheck: max relative error " << format_double(r.max_error) << " over " << r.checked
         << " parameters (" << r.covered_groups.size() << "/" << r.groups.size() << " groups), worst "
         << r.worst_parameter << (ok ? " PASS" : " FAIL") << "\n";
  return ok ? 0 : 1;
}

inline int dump(const json& c, Streams io) {
  const auto ck = load_model(c);
  const auto data = load_data(c);
  const auto& part = cfg::split_part(data, c.at("dump").at("split"));
  check_dims(ck.model, part);
  const long long max_samples = c.at("dump").at("max_samples");
  if (max_samples < 1) throw ValidationError("dump.max_samples must be >= 1");
  const auto j = trajectory_dumps(part, ck.params, ck.model, static_cast<std::size_t>(max_samples), c.at("threads"));
  const auto path = out_dir(c) / "trajectories.json";
  write_json(path, j);
  io.out << "dump-trajectories: " << j.at("samples").size() << " samples -> " << path.string() << "\n";
  return 0;
}

inline std::string kebab(std::string s) {
  for (auto& ch : s) {
    if (ch == '_') ch = '-';
  }
  return s;
}

}  // namespace detail

inline int run(int argc, const char* const* argv, Streams io = {}) {
  const json defaults = cfg::default_config();
  const auto keys = cfg::leaf_keys(defaults);

  CLI::App app{"Maneuver-conditioned trajectory prediction: data preparation, training and evaluation", "miat"};
  app.require_subcommand(1);
  std::string config_path;
  std::vector<std::string> sets;
  std::vector<std::pair<std::string, std::string>> flags;

  // Leaf names that occur once across all sections get a short alias.
  std::map<std::string, int> last_counts;
  for (const auto& k : keys) ++last_counts[k.substr(k.rfind('.') + 1)];

  const std::vector<std::pair<std::string, std::string>> commands = {
      {"preprocess", "NGSIM CSV (input) -> dataset.bin and stats.json"},
      {"synth", "generate a synthetic dataset -> dataset.bin and stats.json"},
      {"train", "dataset -> checkpoint.bin, state.bin, metrics.csv and report.json"},
      {"eval", "checkpoint + dataset -> report.json and report.txt"},
      {"ablate", "lambda sweep -> report.json, report.txt and plots/*.csv"},
      {"gradcheck", "finite-difference check of the analytic gradient (exit 1 if above tolerance)"},
      {"dump-trajectories", "checkpoint + dataset -> trajectories.json"}};
  for (const auto& [name, help] : commands) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--config", config_path, "JSON config file");
    sub->add_option("--set", sets, "override as key=value (dotted key)")->take_all();
    for (const auto& key : keys) {
      std::vector<std::string> names{"--" + key};
      const auto last = key.substr(key.rfind('.') + 1);
      const auto alias = detail::kebab(last);
      if (last_counts[last] == 1 && alias != key) names.push_back("--" + alias);
      std::string spec;
      for (const auto& n : names) spec += (spec.empty() ? "" : ",") + n;
      const auto def = defaults.at(cfg::pointer(key));
      sub->add_option_function<std::string>(
          spec, [&flags, key](const std::string& v) { flags.emplace_back(key, v); },
          "default: " + (def.is_string() ? def.get<std::string>() : def.dump()));
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, io.out, io.err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, io.out, io.err);
  } catch (const CLI::ParseError& e) {
    io.err << "error: " << e.what() << "\n"
           << "usage: miat <command> [--config FILE] [--section.key VALUE ...] [--set key=value ...]\n"
           << "run 'miat --help' or 'miat <command> --help' for the full list\n";
    return 2;
  }
  const std::string command = app.get_subcommands().front()->get_name();

  json c = defaults;
  try {
    if (!config_path.empty()) {
      std::ifstream in(config_path);
      if (!in) throw std::runtime_error("cannot open config " + config_path);
      json file;
      try {
        file = json::parse(in);
      } catch (const json::parse_error& e) {
        throw ValidationError("config " + config_path + " is not valid JSON: " + e.what());
      }
      cfg::merge(c, file);
    }
    for (const auto& [key, value] : flags) cfg::set_value(c, key, value);
    for (const auto& kv : sets) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw cfg::UsageError("--set expects key=value, got '" + kv + "'");
      cfg::set_value(c, kv.substr(0, eq), kv.substr(eq + 1));
    }
  } catch (const cfg::UsageError& e) {
    io.err << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    io.err << "error: " << e.what() << "\n";
    return 1;
  }

  try {
    if (c.at("threads").get<long long>() < 0) throw ValidationError("threads must be >= 0");
    detail::echo_config(c, command);
    if (command == "preprocess") return detail::preprocess(c, io);
    if (command == "synth") return detail::synth(c, io);
    if (command == "train") return detail::train(c, io);
    if (command == "eval") return detail::eval(c, io);
    if (command == "ablate") return detail::ablate(c, io);
    if (command == "gradcheck") return detail::gradcheck(c, io);
    return detail::dump(c, io);
  } catch (const std::exception& e) {
    io.err << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace miat::cli
