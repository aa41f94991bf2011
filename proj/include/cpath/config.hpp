#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "cpath/encoder.hpp"
#include "cpath/errors.hpp"
#include "cpath/sampling.hpp"

namespace cpath {

// Training configuration plus the line-oriented `key = value` file format.
// Unknown keys are rejected with their line number; an empty file yields the
// desk-scale defaults.

struct TrainConfig {
  int epochs = 20;
  int warmup_epochs = 5;
  double base_lr = 1.5e-4;
  int batch_size = 64;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 0.1;
  SamplingPlan plan;
  double tau = 0.2;
  double momentum = 0.99;
  bool momentum_schedule = false;  // cosine ramp of m toward 1
  bool symmetrize = true;
  bool originals_from_view_a = false;  // ablation: reuse view A as the ranking stream
  std::uint64_t seed = 1;
  double data_fraction = 1.0;

  // encoder family selection
  int input_size = 64;
  double width_mult = 0.125;
  int window = 4;
  std::vector<int> blocks = {1, 1, 2, 1};
  int proj_dim = 256;
  int proj_hidden = 256;

  void validate() const {
    if (batch_size < 2) throw Error("batch_size must be >= 2");
    if (epochs < 1) throw Error("epochs must be >= 1");
    if (warmup_epochs < 0 || warmup_epochs >= epochs)
      throw Error("warmup_epochs must be in [0, epochs)");
    if (!(base_lr > 0)) throw Error("base_lr must be positive");
    if (!(tau > 0)) throw Error("tau must be positive");
    if (!(momentum >= 0 && momentum < 1)) throw Error("momentum must be in [0,1)");
    if (!(data_fraction > 0 && data_fraction <= 1)) throw Error("data_fraction must be in (0,1]");
    if (proj_dim < 1 || proj_hidden < 1) throw Error("projection dims must be positive");
    plan.validate();
    encoder_config().validate();
  }

  StageEncoderConfig encoder_config() const {
    return StageEncoderConfig::make(input_size, width_mult, window, blocks);
  }
};

namespace detail {

inline bool parse_bool(const std::string& v, int line) {
  if (v == "on" || v == "true" || v == "1") return true;
  if (v == "off" || v == "false" || v == "0") return false;
  throw ParseError("expected on/off, got '" + v + "'", line);
}

inline std::vector<int> parse_int_list(const std::string& v, int line) {
  std::vector<int> out;
  std::istringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(std::stoi(item));
    } catch (...) {
      throw ParseError("bad integer list '" + v + "'", line);
    }
  }
  if (out.empty()) throw ParseError("empty list", line);
  return out;
}

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

}  // namespace detail

/// Parse config text. Lines: `key = value`, `#` comments, blank lines
/// ignored. Throws ParseError (with 1-based line numbers) for unknown keys
/// or malformed values; field invariants are checked afterwards.
inline TrainConfig parse_config_text(const std::string& text) {
  TrainConfig cfg;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError("expected 'key = value'", line_no);
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string val = detail::trim(line.substr(eq + 1));
    if (key.empty() || val.empty()) throw ParseError("expected 'key = value'", line_no);
    try {
      if (key == "epochs") cfg.epochs = std::stoi(val);
      else if (key == "warmup_epochs") cfg.warmup_epochs = std::stoi(val);
      else if (key == "base_lr") cfg.base_lr = std::stod(val);
      else if (key == "batch_size") cfg.batch_size = std::stoi(val);
      else if (key == "beta1") cfg.beta1 = std::stod(val);
      else if (key == "beta2") cfg.beta2 = std::stod(val);
      else if (key == "weight_decay") cfg.weight_decay = std::stod(val);
      else if (key == "strategy") cfg.plan.strategy = strategy_from_name(val);
      else if (key == "s_fixed") cfg.plan.s_fixed = std::stoi(val);
      else if (key == "t_fixed") cfg.plan.t_fixed = std::stoi(val);
      else if (key == "activation_epoch") cfg.plan.activation_epoch = std::stoi(val);
      else if (key == "s_start") cfg.plan.s_start = std::stoi(val);
      else if (key == "s_step") cfg.plan.s_step = std::stoi(val);
      else if (key == "s_min") cfg.plan.s_min = std::stoi(val);
      else if (key == "t_step") cfg.plan.t_step = std::stoi(val);
      else if (key == "tau") cfg.tau = std::stod(val);
      else if (key == "momentum") cfg.momentum = std::stod(val);
      else if (key == "momentum_schedule") cfg.momentum_schedule = detail::parse_bool(val, line_no);
      else if (key == "symmetrize") cfg.symmetrize = detail::parse_bool(val, line_no);
      else if (key == "originals_from_view_a")
        cfg.originals_from_view_a = detail::parse_bool(val, line_no);
      else if (key == "seed") cfg.seed = std::stoull(val);
      else if (key == "data_fraction") cfg.data_fraction = std::stod(val);
      else if (key == "input_size") cfg.input_size = std::stoi(val);
      else if (key == "width_mult") cfg.width_mult = std::stod(val);
      else if (key == "window") cfg.window = std::stoi(val);
      else if (key == "blocks") cfg.blocks = detail::parse_int_list(val, line_no);
      else if (key == "proj_dim") cfg.proj_dim = std::stoi(val);
      else if (key == "proj_hidden") cfg.proj_hidden = std::stoi(val);
      else throw ParseError("unknown key '" + key + "'", line_no);
    } catch (const ParseError&) {
      throw;
    } catch (...) {
      throw ParseError("bad value '" + val + "' for key '" + key + "'", line_no);
    }
  }
  try {
    cfg.validate();
  } catch (const Error& e) {
    throw ParseError(std::string("invalid config: ") + e.what());
  }
  return cfg;
}

inline TrainConfig parse_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

/// Canonical echo: parsing it back reproduces the config; also the cache-key
/// payload.
inline std::string config_echo(const TrainConfig& c) {
  std::ostringstream os;
  os << "epochs = " << c.epochs << "\nwarmup_epochs = " << c.warmup_epochs
     << "\nbase_lr = " << c.base_lr << "\nbatch_size = " << c.batch_size
     << "\nbeta1 = " << c.beta1 << "\nbeta2 = " << c.beta2
     << "\nweight_decay = " << c.weight_decay
     << "\nstrategy = " << strategy_name(c.plan.strategy) << "\ns_fixed = " << c.plan.s_fixed
     << "\nt_fixed = " << c.plan.t_fixed << "\nactivation_epoch = " << c.plan.activation_epoch
     << "\ns_start = " << c.plan.s_start << "\ns_step = " << c.plan.s_step
     << "\ns_min = " << c.plan.s_min << "\nt_step = " << c.plan.t_step << "\ntau = " << c.tau
     << "\nmomentum = " << c.momentum
     << "\nmomentum_schedule = " << (c.momentum_schedule ? "on" : "off")
     << "\nsymmetrize = " << (c.symmetrize ? "on" : "off")
     << "\noriginals_from_view_a = " << (c.originals_from_view_a ? "on" : "off")
     << "\nseed = " << c.seed
     << "\ndata_fraction = " << c.data_fraction << "\ninput_size = " << c.input_size
     << "\nwidth_mult = " << c.width_mult << "\nwindow = " << c.window << "\nblocks = ";
  for (std::size_t i = 0; i < c.blocks.size(); ++i) os << (i ? "," : "") << c.blocks[i];
  os << "\nproj_dim = " << c.proj_dim << "\nproj_hidden = " << c.proj_hidden << "\n";
  return os.str();
}

}  // namespace cpath
