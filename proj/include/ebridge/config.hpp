#pragma once

// Run configuration: one JSON document with the sections inertia, problem,
// train, sim, uncontrolled and output. Unknown keys are rejected; the
// accepted layout is published in configs/run_config.schema.json.

#include "ebridge/bridge.hpp"
#include "ebridge/control.hpp"
#include "ebridge/core.hpp"
#include "ebridge/gaussian.hpp"
#include "ebridge/io.hpp"
#include "ebridge/rigid_body.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <functional>
#include <set>
#include <string>
#include <vector>

namespace ebridge {

struct UncontrolledConfig {
  int grid_points = 32;  // per axis
  std::vector<double> times;
};

struct OutputConfig {
  std::string directory = "out";
};

struct RunConfig {
  ProblemSpec problem;
  TrainConfig train;
  SdeConfig sim;
  double stats_epsilon = 0.1;  // ε for terminal statistics
  UncontrolledConfig uncontrolled;
  OutputConfig output;
  std::string source;  // canonical dump of the parsed document
};

/// Raised for malformed or inconsistent configuration documents.
class ConfigError : public InvalidInput {
 public:
  using InvalidInput::InvalidInput;
};

namespace detail {

// Object reader that remembers which keys were consumed.
class Section {
 public:
  Section(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + " must be an object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  const nlohmann::json& raw(const std::string& key) {
    used_.insert(key);
    return j_.at(key);
  }

  Section sub(const std::string& key) { return Section(raw(key), name(key)); }

  double number(const std::string& key, double fallback) {
    if (!has(key)) return fallback;
    const auto& v = raw(key);
    if (!v.is_number()) throw ConfigError(name(key) + " must be a number");
    return v.get<double>();
  }

  long integer(const std::string& key, long fallback) {
    if (!has(key)) return fallback;
    const auto& v = raw(key);
    if (!v.is_number_integer()) throw ConfigError(name(key) + " must be an integer");
    return v.get<long>();
  }

  std::size_t count(const std::string& key, std::size_t fallback) {
    const long v = integer(key, static_cast<long>(fallback));
    if (v < 0) throw ConfigError(name(key) + " must be non-negative");
    return static_cast<std::size_t>(v);
  }

  bool boolean(const std::string& key, bool fallback) {
    if (!has(key)) return fallback;
    const auto& v = raw(key);
    if (!v.is_boolean()) throw ConfigError(name(key) + " must be true or false");
    return v.get<bool>();
  }

  std::string text(const std::string& key, const std::string& fallback) {
    if (!has(key)) return fallback;
    const auto& v = raw(key);
    if (!v.is_string()) throw ConfigError(name(key) + " must be a string");
    return v.get<std::string>();
  }

  std::vector<double> numbers(const std::string& key) {
    const auto& v = raw(key);
    if (!v.is_array()) throw ConfigError(name(key) + " must be an array of numbers");
    std::vector<double> out;
    for (const auto& e : v) {
      if (!e.is_number()) throw ConfigError(name(key) + " must be an array of numbers");
      out.push_back(e.get<double>());
    }
    return out;
  }

  Vec3 vec3(const std::string& key) {
    const auto v = numbers(key);
    if (v.size() != 3) throw ConfigError(name(key) + " must have 3 entries");
    return {v[0], v[1], v[2]};
  }

  Mat3 mat3(const std::string& key) {
    const auto& v = raw(key);
    Mat3 m;
    if (!v.is_array() || v.size() != 3) throw ConfigError(name(key) + " must be a 3x3 array");
    for (int r = 0; r < 3; ++r) {
      if (!v[r].is_array() || v[r].size() != 3) throw ConfigError(name(key) + " must be a 3x3 array");
      for (int c = 0; c < 3; ++c) {
        if (!v[r][c].is_number()) throw ConfigError(name(key) + " entries must be numbers");
        m(r, c) = v[r][c].get<double>();
      }
    }
    return m;
  }

  void require(const std::string& key) const {
    if (!has(key)) throw ConfigError("missing required key " + name(key));
  }

  /// Throws on the first key that was never read.
  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!used_.count(k)) throw ConfigError("unknown key " + name(k));
  }

  std::string name(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

 private:
  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> used_;
};

inline GaussianPdf read_gaussian(Section sec) {
  sec.require("mean");
  sec.require("cov");
  const Vec3 m = sec.vec3("mean");
  const Mat3 c = sec.mat3("cov");
  sec.finish();
  try {
    return GaussianPdf(m, c);
  } catch (const InvalidInput& e) {
    throw ConfigError(sec.name("cov") + ": " + e.what());
  }
}

inline FpkScaling parse_scaling(const std::string& s) {
  if (s == "none") return FpkScaling::None;
  if (s == "mean_rho2") return FpkScaling::MeanRho2;
  if (s == "relative") return FpkScaling::Relative;
  throw ConfigError("train.fpk_scaling must be \"none\", \"mean_rho2\" or \"relative\"");
}

inline BoundaryDivergence parse_divergence(const std::string& s) {
  if (s == "annealed") return BoundaryDivergence::Annealed;
  if (s == "unrolled") return BoundaryDivergence::Unrolled;
  throw ConfigError("train.boundary_divergence must be \"annealed\" or \"unrolled\"");
}

}  // namespace detail

inline RunConfig parse_run_config(const nlohmann::json& doc) {
  RunConfig rc;
  try {
    detail::Section top(doc, "");
    for (const char* k : {"inertia", "problem"}) top.require(k);

    {
      auto sec = top.sub("inertia");
      sec.require("J");
      InertiaSpec in{sec.vec3("J")};
      sec.finish();
      rc.problem.body = derive_params(in);
      rc.problem.inertia = in;
    }
    {
      auto sec = top.sub("problem");
      for (const char* k : {"delta", "T", "rho0", "rhoT"}) sec.require(k);
      rc.problem.delta = sec.number("delta", 0.1);
      rc.problem.horizon = sec.number("T", 4.0);
      rc.problem.rho0 = detail::read_gaussian(sec.sub("rho0"));
      rc.problem.rhoT = detail::read_gaussian(sec.sub("rhoT"));
      if (sec.has("domain")) {
        auto d = sec.sub("domain");
        d.require("lower");
        d.require("upper");
        rc.problem.lower = d.vec3("lower");
        rc.problem.upper = d.vec3("upper");
        d.finish();
      }
      sec.finish();
      rc.problem.validate();
    }
    if (top.has("train")) {
      auto sec = top.sub("train");
      auto& t = rc.train;
      t.n_total = sec.count("n", t.n_total);
      t.epochs = sec.integer("epochs", t.epochs);
      if (sec.has("resample")) {
        auto r = sec.sub("resample");
        t.resample_count = r.count("count", t.resample_count);
        t.resample_period = r.integer("period", t.resample_period);
        r.finish();
      }
      t.epsilon = sec.number("epsilon", t.epsilon);
      t.lr = sec.number("lr", t.lr);
      if (sec.has("weights")) {
        auto w = sec.sub("weights");
        t.weights.phi = w.number("phi", t.weights.phi);
        t.weights.rho = w.number("rho", t.weights.rho);
        t.weights.rho0 = w.number("rho0", t.weights.rho0);
        t.weights.rhoT = w.number("rhoT", t.weights.rhoT);
        w.finish();
      }
      t.seed = static_cast<std::uint64_t>(sec.count("seed", t.seed));
      t.deterministic = sec.boolean("deterministic", t.deterministic);
      t.batch_size = sec.count("batch_size", t.batch_size);
      t.boundary_cap = sec.count("boundary_cap", t.boundary_cap);
      t.sinkhorn_iters = static_cast<int>(sec.integer("sinkhorn_iters", t.sinkhorn_iters));
      if (sec.has("widths")) {
        t.widths.clear();
        for (double v : sec.numbers("widths")) {
          if (v != static_cast<int>(v) || v < 1) throw ConfigError("train.widths must be positive integers");
          t.widths.push_back(static_cast<int>(v));
        }
        if (t.widths.size() < 2 || t.widths.front() != 4 || t.widths.back() != 2)
          throw ConfigError("train.widths must start with 4 inputs and end with 2 outputs");
      }
      t.use_scales = sec.boolean("layer_scales", t.use_scales);
      t.fpk_scaling = detail::parse_scaling(sec.text("fpk_scaling", "relative"));
      t.boundary_divergence = detail::parse_divergence(sec.text("boundary_divergence", "annealed"));
      t.checkpoint_period = sec.integer("checkpoint_period", t.checkpoint_period);
      sec.finish();
      t.validate();
    }
    if (top.has("sim")) {
      auto sec = top.sub("sim");
      rc.sim.dt = sec.number("dt", rc.sim.dt);
      rc.sim.n_paths = static_cast<int>(sec.integer("n_paths", rc.sim.n_paths));
      rc.sim.seed = static_cast<std::uint64_t>(sec.count("seed", rc.sim.seed));
      rc.sim.record_stride = static_cast<int>(sec.integer("record_stride", rc.sim.record_stride));
      rc.stats_epsilon = sec.number("stats_epsilon", rc.stats_epsilon);
      sec.finish();
      rc.sim.validate();
      if (!(rc.stats_epsilon > 0.0)) throw ConfigError("sim.stats_epsilon must be positive");
    }
    if (top.has("uncontrolled")) {
      auto sec = top.sub("uncontrolled");
      rc.uncontrolled.grid_points = static_cast<int>(sec.integer("grid_points", rc.uncontrolled.grid_points));
      if (sec.has("times")) rc.uncontrolled.times = sec.numbers("times");
      sec.finish();
      if (rc.uncontrolled.grid_points < 2) throw ConfigError("uncontrolled.grid_points must be at least 2");
    }
    if (top.has("output")) {
      auto sec = top.sub("output");
      rc.output.directory = sec.text("directory", rc.output.directory);
      sec.finish();
    }
    top.finish();
  } catch (const ConfigError&) {
    throw;
  } catch (const InvalidInput& e) {
    throw ConfigError(e.what());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
  rc.source = doc.dump();
  return rc;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("config file not found: " + path.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(io::read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  } catch (const std::runtime_error& e) {
    throw ConfigError(e.what());
  }
  return parse_run_config(doc);
}

/// FNV-1a over the canonical document, as 16 hex digits.
inline std::string config_hash(const RunConfig& rc) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : rc.source) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace ebridge
