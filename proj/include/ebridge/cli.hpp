#pragma once

// Subcommands of the `ebridge` executable. Exit codes: 0 success, 2 usage or
// configuration error, 3 numerical failure.

#include "ebridge/bridge.hpp"
#include "ebridge/check.hpp"
#include "ebridge/config.hpp"
#include "ebridge/control.hpp"
#include "ebridge/io.hpp"
#include "ebridge/liouville.hpp"
#include "ebridge/transport.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace ebridge::cli {

namespace fs = std::filesystem;

enum Exit : int { kOk = 0, kUsage = 2, kNumerical = 3 };

struct Options {
  std::string config;
  std::string checkpoint;
  std::string out;
  std::optional<std::uint64_t> seed;
  bool deterministic = false;
  std::vector<double> times;
  double epsilon = 0.1;
  std::vector<std::string> measures;
};

namespace detail {

inline fs::path out_dir(const Options& o, const RunConfig& rc) {
  return o.out.empty() ? fs::path(rc.output.directory) : fs::path(o.out);
}

inline std::string time_tag(std::size_t k) { return std::to_string(k); }

}  // namespace detail

inline int cmd_train(const Options& o, std::ostream& out, std::ostream& err) {
  RunConfig rc = load_run_config(o.config);
  if (o.seed) rc.train.seed = *o.seed;
  if (o.deterministic) rc.train.deterministic = true;
  const fs::path dir = detail::out_dir(o, rc);
  const std::string hash = config_hash(rc);
  for (const auto& w : rc.problem.warnings()) err << "warning: " << w << '\n';

  std::optional<TrainedBridge> resume;
  if (!o.checkpoint.empty()) {
    resume = checkpoint_from_json(nlohmann::json::parse(io::read_file(o.checkpoint)), rc.problem);
    out << "resuming from epoch " << resume->epoch << '\n';
  }

  auto save = [&](const TrainedBridge& tb) {
    auto j = checkpoint_json(tb);
    j["config_hash"] = hash;
    io::atomic_write(dir / "checkpoint.json", j.dump());
    io::atomic_write(dir / "history.csv", history_csv(tb.history));
  };
  TrainHooks hooks;
  hooks.checkpoint = save;
  hooks.resume = resume ? &*resume : nullptr;
  const long every = std::max(1L, rc.train.epochs / 20);
  hooks.progress = [&](const HistoryRow& r) {
    if (r.epoch % every == 0 || r.epoch == rc.train.epochs) {
      out << "epoch " << r.epoch << "  L_phi " << r.loss.phi << "  L_rho " << r.loss.rho << "  L_rho0 "
          << r.loss.rho0 << "  L_rhoT " << r.loss.rhoT << "  total " << r.loss.total << '\n';
    }
  };
  try {
    const auto tb = train(rc.problem, rc.train, hooks);
    out << "wrote " << (dir / "checkpoint.json").string() << " after " << tb.epoch << " epochs\n";
  } catch (const NumericalError& e) {
    const auto x = e.point();
    err << "numerical failure: " << e.what() << " at (" << x[0] << ", " << x[1] << ", " << x[2] << ", t=" << x[3]
        << "); last finite state saved to " << (dir / "checkpoint.json").string() << '\n';
    return kNumerical;
  }
  return kOk;
}

inline int cmd_simulate(const Options& o, std::ostream& out, std::ostream&) {
  RunConfig rc = load_run_config(o.config);
  if (o.checkpoint.empty()) throw ConfigError("simulate needs --checkpoint");
  if (!fs::exists(o.checkpoint)) throw ConfigError("checkpoint not found: " + o.checkpoint);
  nlohmann::json cj;
  try {
    cj = nlohmann::json::parse(io::read_file(o.checkpoint));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(o.checkpoint + ": " + e.what());
  }
  const TrainedBridge tb = checkpoint_from_json(cj, rc.problem);
  if (tb.params.widths() != rc.train.widths) {
    throw ConfigError("checkpoint network widths do not match train.widths in " + o.config);
  }
  SdeConfig sc = rc.sim;
  if (o.seed) sc.seed = *o.seed;
  const fs::path dir = detail::out_dir(o, rc);

  const auto bundle = simulate_closed_loop(tb, sc);
  const auto st = terminal_stats(bundle, rc.problem.rhoT, rc.stats_epsilon, sc.seed + 7);
  const auto init = cloud_summary(bundle.at_record(0), rc.problem.rhoT, rc.stats_epsilon, sc.seed + 7);
  auto j = stats_json(st);
  j["initial_mean"] = {init.mean[0], init.mean[1], init.mean[2]};
  j["initial_sinkhorn_divergence"] = init.divergence;
  j["divergence_ratio"] = init.divergence != 0.0 ? st.divergence / init.divergence : 0.0;
  j["epsilon"] = rc.stats_epsilon;
  j["paths"] = bundle.paths();
  j["seed"] = sc.seed;
  io::atomic_write(dir / "trajectories.csv", trajectory_csv(bundle));
  io::atomic_write(dir / "stats.json", j.dump(2));
  out << "terminal mean (" << st.mean[0] << ", " << st.mean[1] << ", " << st.mean[2] << "), divergence "
      << st.divergence << " (initial " << init.divergence << "), " << st.diverged << " diverged paths\n";
  out << "wrote " << (dir / "trajectories.csv").string() << " and " << (dir / "stats.json").string() << '\n';
  return kOk;
}

inline int cmd_uncontrolled(const Options& o, std::ostream& out, std::ostream&) {
  const RunConfig rc = load_run_config(o.config);
  const double T = rc.problem.horizon;
  std::vector<double> times = o.times.empty() ? rc.uncontrolled.times : o.times;
  if (times.empty()) times = {0.0, T / 3.0, 2.0 * T / 3.0, T};
  for (double t : times)
    if (!(t >= 0.0 && t <= T)) throw ConfigError("time " + io::fmt(t) + " is outside [0, " + io::fmt(T) + "]");
  const fs::path dir = detail::out_dir(o, rc) / "uncontrolled";
  const int n = rc.uncontrolled.grid_points;
  const GridSpec grid{rc.problem.lower, rc.problem.upper, {n, n, n}};

  nlohmann::json index = nlohmann::json::array();
  for (std::size_t k = 0; k < times.size(); ++k) {
    const auto field = density_grid(rc.problem.rho0, times[k], grid, rc.problem.body);
    const std::string tag = detail::time_tag(k);
    io::atomic_write(dir / ("density_" + tag + ".csv"), density_csv(field));
    io::atomic_write(dir / ("density_" + tag + ".json"), density_header(field).dump(2));
    nlohmann::json files = {{"density", "density_" + tag + ".csv"}};
    for (int a = 1; a <= 3; ++a) {
      const std::string name = "marginal_" + tag + "_x" + std::to_string(a) + ".csv";
      io::atomic_write(dir / name, marginal_csv(marginal_1d(field, a), a));
      files["x" + std::to_string(a)] = name;
    }
    index.push_back({{"time", times[k]}, {"mass", field.mass()}, {"files", files}});
    out << "t=" << times[k] << "  grid mass " << field.mass() << '\n';
  }
  io::atomic_write(dir / "index.json", index.dump(2));
  out << "wrote " << times.size() << " snapshots to " << dir.string() << '\n';
  return kOk;
}

inline int cmd_sinkhorn(const Options& o, std::ostream& out, std::ostream&) {
  if (o.measures.size() != 2) throw ConfigError("sinkhorn needs exactly two measure CSV files");
  std::vector<DiscreteMeasure> mu;
  std::vector<std::string> text;
  for (const auto& f : o.measures) {
    if (!fs::exists(f)) throw ConfigError("measure file not found: " + f);
    text.push_back(io::read_file(f));
    try {
      mu.push_back(read_measure_csv(text.back()));
    } catch (const InvalidInput& e) {
      throw ConfigError(f + ": " + e.what());
    }
  }
  if (mu[0].dim() != mu[1].dim()) throw ConfigError("measures have different dimensions");
  SinkhornConfig cfg;
  cfg.epsilon = o.epsilon;
  cfg.validate();
  const auto r = sinkhorn_divergence_report(mu[0], mu[1], cfg);
  out << "divergence " << io::fmt(r.value) << '\n';
  out << "iterations " << r.iterations << "  marginal_error " << r.marginal_error
      << (r.converged ? "  converged" : "  not converged") << '\n';
  out << "debiased " << io::fmt(debiased_sinkhorn_divergence(mu[0], mu[1], cfg)) << '\n';
  if (text[0] == text[1]) out << "self: both files describe the same measure\n";
  return kOk;
}

inline int cmd_check(const Options& o, std::ostream& out, std::ostream&) {
  CheckOptions opt;
  if (!o.config.empty()) {
    const auto rc = load_run_config(o.config);
    if (!rc.problem.inertia) throw ConfigError("check needs inertia.J");
    opt.body = *rc.problem.inertia;
  }
  if (o.seed) opt.seed = *o.seed;
  const auto results = run_check_suite(opt);
  out << check_table(results);
  const bool ok = all_passed(results);
  out << (ok ? "all checks passed\n" : "some checks FAILED\n");
  return ok ? kOk : kNumerical;
}

/// Parses argv and runs one subcommand.
inline int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Density steering of rigid-body angular velocity via Schrödinger bridges", "ebridge"};
  app.require_subcommand(1);
  Options o;
  std::string seed_text;

  auto common = [&](CLI::App* c, bool needs_config) {
    auto* opt = c->add_option("--config", o.config, "Run configuration (JSON)");
    if (needs_config) opt->required();
    c->add_option("--out", o.out, "Output directory (overrides output.directory)");
    c->add_option("--seed", seed_text, "Override the seed");
    c->add_flag("--deterministic", o.deterministic, "Fixed-order reductions (always on)");
  };
  auto* train = app.add_subcommand("train", "Train the bridge network");
  common(train, true);
  train->add_option("--checkpoint", o.checkpoint, "Resume from a checkpoint");
  auto* simulate = app.add_subcommand("simulate", "Closed-loop SDE simulation from a checkpoint");
  common(simulate, true);
  simulate->add_option("--checkpoint", o.checkpoint, "Trained checkpoint")->required();
  auto* unc = app.add_subcommand("uncontrolled", "Uncontrolled density snapshots");
  common(unc, true);
  unc->add_option("--times", o.times, "Snapshot times")->delimiter(',');
  auto* sk = app.add_subcommand("sinkhorn", "Sinkhorn divergence between two measure CSVs");
  sk->add_option("measures", o.measures, "Two measure CSV files")->expected(2)->required();
  sk->add_option("--epsilon", o.epsilon, "Entropic regularization");
  auto* chk = app.add_subcommand("check", "Run the fast invariant suite");
  common(chk, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  }

  try {
    if (!seed_text.empty()) {
      std::size_t used = 0;
      const unsigned long long v = std::stoull(seed_text, &used);
      if (used != seed_text.size()) throw ConfigError("--seed must be a non-negative integer");
      o.seed = v;
    }
    if (train->parsed()) return cmd_train(o, out, err);
    if (simulate->parsed()) return cmd_simulate(o, out, err);
    if (unc->parsed()) return cmd_uncontrolled(o, out, err);
    if (sk->parsed()) return cmd_sinkhorn(o, out, err);
    return cmd_check(o, out, err);
  } catch (const NumericalError& e) {
    err << "numerical failure: " << e.what() << '\n';
    return kNumerical;
  } catch (const Divergence& e) {
    err << "numerical failure: " << e.what() << '\n';
    return kNumerical;
  } catch (const InvalidInput& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  }
}

}  // namespace ebridge::cli
