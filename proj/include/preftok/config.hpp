#pragma once

// Flat key=value configuration. Blank lines and lines starting with '#' are
// ignored; unknown keys are rejected.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>

#include "preftok/matrix.hpp"

namespace preftok {

struct StageOneConfig {
  std::size_t layers = 2;          // J
  std::size_t levels = 4;          // L
  std::size_t codebook_size = 24;  // K
  std::size_t dim_v = 16;
  std::size_t dim_t = 32;
  std::size_t hidden = 0;  // 0 selects dim_v + dim_t
  double alpha = 0.25;
  double beta = 0.1;
  std::size_t batch_size = 1024;
  double lr = 1e-3;
  std::size_t epochs = 10;
  std::uint64_t seed = 7;
  bool freeze_items = false;
  bool rq_users = true;
  bool continuous_z = false;
  double ema_decay = 0.99;
  double ema_epsilon = 1e-5;
  std::size_t dead_code_window = 200;
  std::size_t threads = 1;

  std::size_t scorer_hidden() const { return hidden ? hidden : dim_v + dim_t; }
};

struct StageTwoConfig {
  double gamma = 0.5;
  double lr = 1e-5;
  std::size_t batch_size = 8;
  std::size_t epochs = 20;
  std::uint64_t seed = 7;
  std::size_t image_dim = 16;
  std::size_t vocab = 64;      // V
  std::size_t seq_len = 8;     // S
  std::size_t shared_dim = 16;  // d_s
  double noise_sigma = 0.1;      // corruption scale of the noisy target
  double sample_sigma = 0.1;     // sampling spread of generated images
  std::size_t history_cap = 16;
  double heldout_fraction = 0.2;
  bool pin_rewards = false;
};

struct Config {
  StageOneConfig stage1;
  StageTwoConfig stage2;
  // Entity counts, used by parameter accounting when no data is attached.
  std::size_t users = 0;
  std::size_t items = 0;
};

// Full-scale constants: L=4, K=96, J=2, d_v=768 (CLIP), d_t=4096 (LLM
// hidden), batch 1024 / lr 1e-3 for token learning, batch 8 / lr 1e-5 for
// reward fine-tuning, beta=0.1, gamma=0.5.
inline Config full_profile() {
  Config c;
  c.stage1.levels = 4;
  c.stage1.codebook_size = 96;
  c.stage1.layers = 2;
  c.stage1.dim_v = 768;
  c.stage1.dim_t = 4096;
  c.stage1.batch_size = 1024;
  c.stage1.lr = 1e-3;
  c.stage1.beta = 0.1;
  c.stage2.gamma = 0.5;
  c.stage2.batch_size = 8;
  c.stage2.lr = 1e-5;
  return c;
}

inline Config desk_profile() { return Config{}; }

namespace detail {

template <typename T>
T parse_config_value(const std::string& key, const std::string& raw) {
  std::istringstream in(raw);
  T value{};
  in >> value;
  std::string rest;
  if (!in || (in >> rest)) {
    throw Error("config key '" + key + "': cannot parse '" + raw + "'");
  }
  return value;
}

template <>
inline bool parse_config_value<bool>(const std::string& key, const std::string& raw) {
  if (raw == "1" || raw == "true" || raw == "on") return true;
  if (raw == "0" || raw == "false" || raw == "off") return false;
  throw Error("config key '" + key + "': expected on/off, got '" + raw + "'");
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

using Setter = std::function<void(Config&, const std::string&)>;

template <typename T>
Setter bind(T StageOneConfig::*field, const char* key) {
  return [field, key](Config& c, const std::string& v) {
    c.stage1.*field = parse_config_value<T>(key, v);
  };
}

template <typename T>
Setter bind(T StageTwoConfig::*field, const char* key) {
  return [field, key](Config& c, const std::string& v) {
    c.stage2.*field = parse_config_value<T>(key, v);
  };
}

inline const std::map<std::string, Setter>& config_setters() {
  static const std::map<std::string, Setter> setters = {
      {"layers", bind(&StageOneConfig::layers, "layers")},
      {"levels", bind(&StageOneConfig::levels, "levels")},
      {"codebook_size", bind(&StageOneConfig::codebook_size, "codebook_size")},
      {"dim_v", bind(&StageOneConfig::dim_v, "dim_v")},
      {"dim_t", bind(&StageOneConfig::dim_t, "dim_t")},
      {"hidden", bind(&StageOneConfig::hidden, "hidden")},
      {"alpha", bind(&StageOneConfig::alpha, "alpha")},
      {"beta", bind(&StageOneConfig::beta, "beta")},
      {"batch_size", bind(&StageOneConfig::batch_size, "batch_size")},
      {"lr", bind(&StageOneConfig::lr, "lr")},
      {"epochs", bind(&StageOneConfig::epochs, "epochs")},
      {"seed", bind(&StageOneConfig::seed, "seed")},
      {"freeze_items", bind(&StageOneConfig::freeze_items, "freeze_items")},
      {"rq_users", bind(&StageOneConfig::rq_users, "rq_users")},
      {"continuous_z", bind(&StageOneConfig::continuous_z, "continuous_z")},
      {"ema_decay", bind(&StageOneConfig::ema_decay, "ema_decay")},
      {"ema_epsilon", bind(&StageOneConfig::ema_epsilon, "ema_epsilon")},
      {"dead_code_window", bind(&StageOneConfig::dead_code_window, "dead_code_window")},
      {"threads", bind(&StageOneConfig::threads, "threads")},
      {"gamma", bind(&StageTwoConfig::gamma, "gamma")},
      {"stage2_lr", bind(&StageTwoConfig::lr, "stage2_lr")},
      {"stage2_batch_size", bind(&StageTwoConfig::batch_size, "stage2_batch_size")},
      {"stage2_epochs", bind(&StageTwoConfig::epochs, "stage2_epochs")},
      {"stage2_seed", bind(&StageTwoConfig::seed, "stage2_seed")},
      {"image_dim", bind(&StageTwoConfig::image_dim, "image_dim")},
      {"vocab", bind(&StageTwoConfig::vocab, "vocab")},
      {"seq_len", bind(&StageTwoConfig::seq_len, "seq_len")},
      {"shared_dim", bind(&StageTwoConfig::shared_dim, "shared_dim")},
      {"noise_sigma", bind(&StageTwoConfig::noise_sigma, "noise_sigma")},
      {"sample_sigma", bind(&StageTwoConfig::sample_sigma, "sample_sigma")},
      {"history_cap", bind(&StageTwoConfig::history_cap, "history_cap")},
      {"heldout_fraction", bind(&StageTwoConfig::heldout_fraction, "heldout_fraction")},
      {"pin_rewards", bind(&StageTwoConfig::pin_rewards, "pin_rewards")},
      {"users", [](Config& c, const std::string& v) {
         c.users = parse_config_value<std::size_t>("users", v);
       }},
      {"items", [](Config& c, const std::string& v) {
         c.items = parse_config_value<std::size_t>("items", v);
       }},
  };
  return setters;
}

}  // namespace detail

inline void validate(const Config& c) {
  const auto& s = c.stage1;
  if (s.levels == 0 || s.codebook_size == 0 || s.dim_v == 0 || s.dim_t == 0) {
    throw Error("config: levels, codebook_size, dim_v and dim_t must be positive");
  }
  if (s.batch_size == 0 || c.stage2.batch_size == 0) {
    throw Error("config: batch sizes must be positive");
  }
  if (s.alpha < 0.0 || s.beta < 0.0 || s.lr < 0.0 || c.stage2.lr < 0.0) {
    throw Error("config: alpha, beta and learning rates must be non-negative");
  }
  if (!(s.ema_decay > 0.0 && s.ema_decay <= 1.0)) {
    throw Error("config: ema_decay must lie in (0, 1]");
  }
  if (c.stage2.vocab == 0 || c.stage2.seq_len == 0 || c.stage2.image_dim == 0 ||
      c.stage2.shared_dim == 0) {
    throw Error("config: vocab, seq_len, image_dim and shared_dim must be positive");
  }
  if (!(c.stage2.heldout_fraction >= 0.0 && c.stage2.heldout_fraction < 1.0)) {
    throw Error("config: heldout_fraction must lie in [0, 1)");
  }
}

// Applies key=value lines on top of `base`.
inline Config parse_config(std::istream& in, Config base = desk_profile()) {
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto text = detail::trim(line);
    if (text.empty() || text.front() == '#') continue;
    const auto eq = text.find('=');
    if (eq == std::string::npos) {
      throw Error("config line " + std::to_string(line_no) + ": expected key=value");
    }
    const auto key = detail::trim(text.substr(0, eq));
    const auto value = detail::trim(text.substr(eq + 1));
    if (key == "profile") {
      if (value == "full") {
        base = full_profile();
      } else if (value == "desk") {
        base = desk_profile();
      } else {
        throw Error("config: unknown profile '" + value + "'");
      }
      continue;
    }
    const auto& setters = detail::config_setters();
    const auto it = setters.find(key);
    if (it == setters.end()) {
      throw Error("config line " + std::to_string(line_no) + ": unknown key '" + key + "'");
    }
    it->second(base, value);
  }
  validate(base);
  return base;
}

// "full" and "desk" name built-in profiles; anything else is a file path.
inline Config load_config(const std::string& name_or_path) {
  if (name_or_path == "full") return full_profile();
  if (name_or_path == "desk") return desk_profile();
  std::ifstream in(name_or_path);
  if (!in) throw Error("cannot open config " + name_or_path);
  return parse_config(in);
}

inline std::string format_config(const Config& c) {
  std::ostringstream out;
  out.precision(17);
  const auto& s = c.stage1;
  const auto& t = c.stage2;
  out << "layers=" << s.layers << "\nlevels=" << s.levels
      << "\ncodebook_size=" << s.codebook_size << "\ndim_v=" << s.dim_v
      << "\ndim_t=" << s.dim_t << "\nhidden=" << s.hidden << "\nalpha=" << s.alpha
      << "\nbeta=" << s.beta << "\nbatch_size=" << s.batch_size << "\nlr=" << s.lr
      << "\nepochs=" << s.epochs << "\nseed=" << s.seed
      << "\nfreeze_items=" << (s.freeze_items ? "on" : "off")
      << "\nrq_users=" << (s.rq_users ? "on" : "off")
      << "\ncontinuous_z=" << (s.continuous_z ? "on" : "off")
      << "\nema_decay=" << s.ema_decay << "\nema_epsilon=" << s.ema_epsilon
      << "\ndead_code_window=" << s.dead_code_window << "\nthreads=" << s.threads
      << "\ngamma=" << t.gamma << "\nstage2_lr=" << t.lr
      << "\nstage2_batch_size=" << t.batch_size << "\nstage2_epochs=" << t.epochs
      << "\nstage2_seed=" << t.seed << "\nimage_dim=" << t.image_dim
      << "\nvocab=" << t.vocab << "\nseq_len=" << t.seq_len
      << "\nshared_dim=" << t.shared_dim << "\nnoise_sigma=" << t.noise_sigma
      << "\nsample_sigma=" << t.sample_sigma << "\nhistory_cap=" << t.history_cap
      << "\nheldout_fraction=" << t.heldout_fraction
      << "\npin_rewards=" << (t.pin_rewards ? "on" : "off") << "\nusers=" << c.users
      << "\nitems=" << c.items << "\n";
  return out.str();
}

}  // namespace preftok
