#include "mixssm/cli.hpp"

#include <atomic>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <optional>
#include <ostream>
#include <thread>

#include "CLI11.hpp"
#include "mixssm/checkpoint.hpp"
#include "mixssm/config.hpp"
#include "mixssm/data.hpp"
#include "mixssm/errors.hpp"
#include "mixssm/gradsuite.hpp"
#include "mixssm/train.hpp"

namespace mixssm {
namespace {

namespace fs = std::filesystem;

struct Overrides {
  std::optional<std::size_t> epochs;
  std::optional<std::size_t> batch_size;
  std::optional<double> lr;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> max_steps;

  void attach(CLI::App* cmd) {
    cmd->add_option("--epochs", epochs, "Override train.epochs");
    cmd->add_option("--batch-size", batch_size, "Override train.batch_size");
    cmd->add_option("--lr", lr, "Override train.lr");
    cmd->add_option("--seed", seed, "Override both model.seed and train.seed");
    cmd->add_option("--max-steps", max_steps, "Override train.max_steps (0 = no limit)");
  }

  void apply(RunConfig& c) const {
    if (epochs) c.train.epochs = *epochs;
    if (batch_size) c.train.batch_size = *batch_size;
    if (lr) c.train.lr = *lr;
    if (seed) c.train.seed = c.model.seed = *seed;
    if (max_steps) c.train.max_steps = *max_steps;
    if (c.train.batch_size == 0) throw ConfigError("--batch-size must be positive");
    if (!(c.train.lr >= 0.0)) throw ConfigError("--lr must be a non-negative number");
  }
};

std::string fixed(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write '" + path + "'");
  out << text;
  if (!out) throw DataError("write to '" + path + "' failed");
}

std::string data_dir(const std::string& flag, const TrainConfig& t) {
  if (!flag.empty()) return flag;
  if (t.train_data.empty()) throw ConfigError("no training data: pass --data or set train.train_data");
  return t.train_data;
}

Dataset load_for(const ModelConfig& model, const std::string& dir) {
  auto ds = load_image_folder(dir, model.image_height, model.image_width);
  if (ds.num_classes() != model.num_classes) {
    throw ConfigError("model is configured for " + std::to_string(model.num_classes) + " classes but '" + dir +
                      "' has " + std::to_string(ds.num_classes()));
  }
  return ds;
}

TrainOptions train_options(const TrainConfig& t) {
  TrainOptions o;
  o.epochs = t.epochs;
  o.batch_size = t.batch_size;
  o.lr = t.lr;
  o.seed = t.seed;
  o.max_steps = t.max_steps;
  return o;
}

struct SweepRow {
  std::string name;
  ModelConfig model;
  std::size_t params = 0;
  Metrics metrics;
};

// Trains and evaluates every row, `jobs` at a time; rows are independent and
// each is deterministic, so the result does not depend on `jobs`.
void run_sweep(std::vector<SweepRow>& rows, const RunConfig& base, const Dataset& train_set, const Dataset& eval_set,
               std::size_t jobs, std::ostream& out) {
  std::mutex log_mutex;
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  auto worker = [&] {
    for (std::size_t i = next++; i < rows.size(); i = next++) {
      try {
        auto model = init_model<float>(rows[i].model);
        rows[i].params = parameter_count(model);
        train(model, train_set, train_options(base.train));
        rows[i].metrics = evaluate(model, eval_set);
        std::lock_guard<std::mutex> lock(log_mutex);
        out << rows[i].name << ": params=" << rows[i].params << " acc=" << fixed(rows[i].metrics.accuracy)
            << " f1=" << fixed(rows[i].metrics.f1) << "\n";
      } catch (...) {
        std::lock_guard<std::mutex> lock(log_mutex);
        if (!failure) failure = std::current_exception();
        next = rows.size();
      }
    }
  };
  const std::size_t n = std::max<std::size_t>(1, std::min(jobs, rows.size()));
  if (n == 1) {
    worker();
  } else {
    std::vector<std::thread> threads;
    for (std::size_t t = 0; t < n; ++t) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
  }
  if (failure) std::rethrow_exception(failure);
}

std::string sweep_csv(const char* first_column, const std::vector<SweepRow>& rows) {
  std::string csv = std::string(first_column) + ",acc,f1\n";
  for (const auto& r : rows) csv += r.name + "," + fixed(r.metrics.accuracy) + "," + fixed(r.metrics.f1) + "\n";
  return csv;
}

struct SweepArgs {
  std::string config;
  std::string data;
  std::string out;
  std::size_t jobs = 1;
  Overrides overrides;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config, "Run configuration (JSON)")->required();
    cmd->add_option("--data", data, "Training image folder (default: train.train_data)");
    cmd->add_option("--out", out, "Output CSV")->required();
    cmd->add_option("--jobs", jobs, "Settings trained concurrently")->check(CLI::PositiveNumber);
    overrides.attach(cmd);
  }

  RunConfig run_config() const {
    auto c = load_run_config(config);
    overrides.apply(c);
    return c;
  }
};

void run_sweep_command(const SweepArgs& args, const char* column,
                       const std::function<std::vector<SweepRow>(const ModelConfig&)>& rows_for, std::ostream& out) {
  const auto run = args.run_config();
  const auto train_set = load_for(run.model, data_dir(args.data, run.train));
  const auto eval_set = run.train.eval_data.empty() ? train_set : load_for(run.model, run.train.eval_data);
  auto rows = rows_for(run.model);
  for (const auto& r : rows) r.model.validate();
  run_sweep(rows, run, train_set, eval_set, args.jobs, out);
  write_text(args.out, sweep_csv(column, rows));
  out << "wrote " << args.out << "\n";
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Mixed state-space / convolution / attention image classifier"};
  app.require_subcommand(1);

  std::string config, data, ckpt_out;
  Overrides overrides;
  auto* train_cmd = app.add_subcommand("train", "Train a model and write a checkpoint plus epoch log");
  train_cmd->add_option("--config", config, "Run configuration (JSON)")->required();
  train_cmd->add_option("--data", data, "Training image folder (default: train.train_data)");
  train_cmd->add_option("--out", ckpt_out, "Checkpoint path; the epoch log goes to <out>.log.csv")->required();
  overrides.attach(train_cmd);

  std::string eval_ckpt, eval_data, metrics_out;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on an image folder");
  eval_cmd->add_option("--ckpt", eval_ckpt, "Checkpoint")->required();
  eval_cmd->add_option("--data", eval_data, "Image folder")->required();
  eval_cmd->add_option("--metrics-out", metrics_out, "Metrics file")->required();

  std::uint64_t gc_seed = 0;
  double gc_tol = 1e-3;
  bool gc_fault = false;
  auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference check of every component");
  grad_cmd->add_option("--seed", gc_seed, "First seed");
  grad_cmd->add_option("--tolerance", gc_tol, "Maximum relative error");
  grad_cmd->add_flag("--inject-fault", gc_fault, "Include an op with a wrong backward rule")->group("");

  SweepArgs ablate_args;
  auto* ablate_cmd = app.add_subcommand("ablate", "Train and evaluate the eight branch subsets");
  ablate_args.attach(ablate_cmd);

  SweepArgs analyze_args;
  std::string sweep;
  auto* analyze_cmd = app.add_subcommand("analyze", "Sweep one selective-module setting");
  analyze_args.attach(analyze_cmd);
  analyze_cmd->add_option("--sweep", sweep, "aggregation, kernel, or pooling")
      ->required()
      ->check(CLI::IsMember({"aggregation", "kernel", "pooling"}));

  std::string synth_out;
  std::size_t classes = 4, per_class = 16, size = 32;
  std::uint64_t synth_seed = 0;
  auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic image-folder dataset");
  synth_cmd->add_option("--out", synth_out, "Output directory")->required();
  synth_cmd->add_option("--classes", classes, "Number of classes");
  synth_cmd->add_option("--per-class", per_class, "Images per class");
  synth_cmd->add_option("--size", size, "Image side in pixels");
  synth_cmd->add_option("--seed", synth_seed, "Random seed");

  std::string inspect_ckpt;
  auto* inspect_cmd = app.add_subcommand("inspect", "Print a checkpoint's config and parameter counts");
  inspect_cmd->add_option("--ckpt", inspect_ckpt, "Checkpoint")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*train_cmd) {
      auto run = load_run_config(config);
      overrides.apply(run);
      const auto ds = load_for(run.model, data_dir(data, run.train));
      auto model = init_model<float>(run.model);
      out << "training " << parameter_count(model) << " parameters on " << ds.size() << " images\n";
      auto opts = train_options(run.train);
      opts.on_epoch = [&](const EpochLog& e) {
        out << "epoch " << e.epoch << " loss " << fixed(e.mean_loss) << " acc " << fixed(e.train_acc) << "\n";
      };
      const auto result = train(model, ds, opts);
      save_checkpoint(model, ckpt_out);
      write_text(ckpt_out + ".log.csv", format_epoch_csv(result.epochs));
      out << "wrote " << ckpt_out << " after " << result.steps << " steps\n";
    } else if (*eval_cmd) {
      const auto model = load_checkpoint<float>(eval_ckpt);
      const auto ds = load_for(model.config, eval_data);
      const auto m = evaluate(model, ds);
      write_text(metrics_out, format_metrics(m));
      out << "acc " << fixed(m.accuracy) << "\nprec " << fixed(m.precision) << "\nrec " << fixed(m.recall) << "\nf1 "
          << fixed(m.f1) << "\n";
    } else if (*grad_cmd) {
      GradSuiteOptions opts;
      opts.seed = gc_seed;
      opts.tolerance = gc_tol;
      opts.inject_fault = gc_fault;
      std::string failed;
      for (const auto& r : run_gradient_suite(opts)) {
        char line[160];
        std::snprintf(line, sizeof line, "%-20s max_rel_error=%.3e checked=%zu %s\n", r.component.c_str(),
                      r.max_rel_error, r.components_checked, r.pass ? "PASS" : "FAIL");
        out << line;
        if (!r.pass) failed += (failed.empty() ? "" : ", ") + r.component;
      }
      if (!failed.empty()) {
        err << "gradient check failed: " << failed << "\n";
        return kExitGradcheck;
      }
    } else if (*ablate_cmd) {
      run_sweep_command(
          ablate_args, "config",
          [](const ModelConfig& base) {
            std::vector<SweepRow> rows;
            for (const auto& [name, branches] : ablation_rows()) {
              auto m = base;
              m.branches = branches;
              rows.push_back({name, m, 0, {}});
            }
            return rows;
          },
          out);
    } else if (*analyze_cmd) {
      run_sweep_command(
          analyze_args, "setting",
          [&](const ModelConfig& base) {
            std::vector<SweepRow> rows;
            auto add = [&](const std::string& name, auto&& edit) {
              auto m = base;
              edit(m.selective);
              rows.push_back({name, m, 0, {}});
            };
            if (sweep == "aggregation") {
              for (auto mode : {Aggregation::selective, Aggregation::max, Aggregation::average})
                add(to_string(mode), [mode](SelectiveConfig& s) { s.mode = mode; });
            } else if (sweep == "kernel") {
              for (std::size_t k : {1, 3, 5, 7})
                add("k" + std::to_string(k), [k](SelectiveConfig& s) { s.kernel = k; });
            } else {
              for (auto p : {Pooling::average, Pooling::max, Pooling::l2, Pooling::stochastic})
                add(to_string(p), [p](SelectiveConfig& s) { s.pooling = p; });
            }
            return rows;
          },
          out);
    } else if (*synth_cmd) {
      generate_synthetic(synth_out, classes, per_class, size, synth_seed);
      out << "wrote " << classes * per_class << " images to " << synth_out << "\n";
    } else if (*inspect_cmd) {
      const auto model = load_checkpoint<float>(inspect_ckpt);
      out << "config " << model_config_to_json(model.config) << "\n";
      for (const auto& [group, n] : module_parameter_counts(model)) out << "params." << group << " " << n << "\n";
      out << "params.total " << parameter_count(model) << "\n";
    }
  } catch (const TrainingAborted& e) {
    err << "error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const NumericError& e) {
    err << "error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitOk;
}

}  // namespace mixssm
