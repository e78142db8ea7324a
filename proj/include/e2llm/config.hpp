#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "e2llm/augment.hpp"
#include "e2llm/error.hpp"
#include "e2llm/model.hpp"
#include "e2llm/train.hpp"

namespace e2llm {

struct EvalConfig {
  std::vector<std::int64_t> windows{128, 256, 512, 1024};
  std::int64_t stride = 32;
  std::int64_t kv_cases = 50;
  std::int64_t kv_pairs = 3;
  std::int64_t kv_window = 512;
  std::int64_t kv_max_new_tokens = 96;
  std::vector<double> scales{1, 2, 4, 8, 10};
  // Negative counts from the last layer.
  std::int64_t attention_layer = -1;
  std::uint64_t seed = 7;
};

struct PathsConfig {
  std::string corpus = "corpus.txt";
  std::string eval_corpus = "heldout.txt";
  std::string checkpoint = "model.ckpt";
  std::string init_checkpoint;
  std::string output = ".";
};

// Step counts and learning rates are kept per phase; TrainConfig is the
// resolved view for one phase.
struct TrainSettings {
  std::int64_t pretrain_steps = 3000;
  std::int64_t extend_steps = 2000;
  double pretrain_learning_rate = 3e-4;
  double extend_learning_rate = 1e-4;
  std::int64_t batch_size = 8;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double weight_decay = 0.1;
  double epsilon = 1e-8;
  double clip_norm = 1.0;
  std::uint64_t seed = 1;
  std::int64_t trained_window = 128;
  std::int64_t checkpoint_every = 500;
  std::int64_t log_every = 10;
  bool record_wall_time = true;
};

struct RunConfig {
  ModelConfig model;
  std::uint64_t init_seed = 1;
  TrainSettings train;
  AugmentPolicy policy;
  EvalConfig eval;
  PathsConfig paths;

  // Policy with base and trained windows taken from the model and train
  // sections.
  AugmentPolicy resolved_policy() const {
    AugmentPolicy p = policy;
    p.base_window = static_cast<std::int64_t>(model.base_window);
    p.trained_window = train.trained_window;
    return p;
  }

  TrainConfig train_config(Phase phase) const {
    TrainConfig t;
    t.phase = phase;
    t.steps = phase == Phase::pretrain ? train.pretrain_steps : train.extend_steps;
    t.learning_rate = phase == Phase::pretrain ? train.pretrain_learning_rate : train.extend_learning_rate;
    t.batch_size = train.batch_size;
    t.beta1 = train.beta1;
    t.beta2 = train.beta2;
    t.weight_decay = train.weight_decay;
    t.epsilon = train.epsilon;
    t.clip_norm = train.clip_norm;
    t.seed = train.seed;
    t.trained_window = phase == Phase::pretrain
                           ? std::min<std::int64_t>(train.trained_window, static_cast<std::int64_t>(model.base_window))
                           : train.trained_window;
    t.policy = resolved_policy();
    t.checkpoint_every = train.checkpoint_every;
    t.log_every = train.log_every;
    t.record_wall_time = train.record_wall_time;
    return t;
  }

  void validate() const {
    model.validate();
    resolved_policy().validate();
    if (train.batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
    if (train.pretrain_steps < 1 || train.extend_steps < 1) throw ConfigError("train steps must be >= 1");
    if (eval.windows.empty()) throw ConfigError("eval.windows must list at least one window");
    for (std::int64_t w : eval.windows) {
      if (w < static_cast<std::int64_t>(model.base_window)) {
        throw ConfigError("eval.windows entry " + std::to_string(w) + " is below model.base_window " +
                          std::to_string(model.base_window));
      }
      if (w > static_cast<std::int64_t>(model.max_sequence)) {
        throw ConfigError("eval.windows entry " + std::to_string(w) + " exceeds model.max_sequence " +
                          std::to_string(model.max_sequence));
      }
      if (eval.stride > w) {
        throw ConfigError("eval.stride (" + std::to_string(eval.stride) + ") exceeds eval.windows entry " +
                          std::to_string(w));
      }
    }
    if (eval.stride < 1) throw ConfigError("eval.stride must be >= 1");
    for (double g : eval.scales) {
      if (!(g >= 1.0)) throw ConfigError("eval.scales entries must be >= 1");
    }
    if (eval.kv_pairs < 1 || eval.kv_cases < 0 || eval.kv_max_new_tokens < 1) {
      throw ConfigError("eval.kv_pairs and eval.kv_max_new_tokens must be >= 1");
    }
    if (eval.attention_layer >= static_cast<std::int64_t>(model.n_layers) ||
        eval.attention_layer < -static_cast<std::int64_t>(model.n_layers)) {
      throw ConfigError("eval.attention_layer outside the model's layers");
    }
  }
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::string format_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

template <typename I>
I parse_int(std::string_view s, std::string_view key) {
  I v{};
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) {
    throw ConfigError(std::string(key) + ": expected an integer, got '" + std::string(s) + "'");
  }
  return v;
}

inline double parse_double(std::string_view s, std::string_view key) {
  double v{};
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) {
    throw ConfigError(std::string(key) + ": expected a number, got '" + std::string(s) + "'");
  }
  return v;
}

inline bool parse_bool(std::string_view s, std::string_view key) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ConfigError(std::string(key) + ": expected true|false, got '" + std::string(s) + "'");
}

inline std::vector<std::string> split_list(std::string_view s) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    const auto comma = s.find(',', start);
    const auto item = trim(s.substr(start, comma == std::string_view::npos ? s.size() - start : comma - start));
    if (!item.empty()) out.push_back(item);
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

// Key table shared by the parser and the printer so both stay in sync.
struct ConfigField {
  std::function<void(RunConfig&, std::string_view)> set;
  std::function<std::string(const RunConfig&)> get;
};

inline const std::vector<std::pair<std::string, ConfigField>>& config_fields() {
  using C = RunConfig;
  using SV = std::string_view;
  auto size_field = [](std::size_t ModelConfig::*m, const char* key) {
    return ConfigField{[m, key](C& c, SV v) { c.model.*m = parse_int<std::size_t>(v, key); },
                       [m](const C& c) { return std::to_string(c.model.*m); }};
  };
  auto train_int = [](std::int64_t TrainSettings::*m, const char* key) {
    return ConfigField{[m, key](C& c, SV v) { c.train.*m = parse_int<std::int64_t>(v, key); },
                       [m](const C& c) { return std::to_string(c.train.*m); }};
  };
  auto train_real = [](double TrainSettings::*m, const char* key) {
    return ConfigField{[m, key](C& c, SV v) { c.train.*m = parse_double(v, key); },
                       [m](const C& c) { return format_double(c.train.*m); }};
  };
  auto eval_int = [](std::int64_t EvalConfig::*m, const char* key) {
    return ConfigField{[m, key](C& c, SV v) { c.eval.*m = parse_int<std::int64_t>(v, key); },
                       [m](const C& c) { return std::to_string(c.eval.*m); }};
  };
  auto path = [](std::string PathsConfig::*m) {
    return ConfigField{[m](C& c, SV v) { c.paths.*m = std::string(v); }, [m](const C& c) { return c.paths.*m; }};
  };

  static const std::vector<std::pair<std::string, ConfigField>> fields = {
      {"model.vocab_size", size_field(&ModelConfig::vocab_size, "model.vocab_size")},
      {"model.d_model", size_field(&ModelConfig::d_model, "model.d_model")},
      {"model.n_layers", size_field(&ModelConfig::n_layers, "model.n_layers")},
      {"model.n_heads", size_field(&ModelConfig::n_heads, "model.n_heads")},
      {"model.head_dim", size_field(&ModelConfig::head_dim, "model.head_dim")},
      {"model.ffn_mult", size_field(&ModelConfig::ffn_mult, "model.ffn_mult")},
      {"model.base_window", size_field(&ModelConfig::base_window, "model.base_window")},
      {"model.max_sequence", size_field(&ModelConfig::max_sequence, "model.max_sequence")},
      {"model.rope_base", {[](C& c, SV v) { c.model.rope_base = parse_double(v, "model.rope_base"); },
                           [](const C& c) { return format_double(c.model.rope_base); }}},
      {"model.init_seed", {[](C& c, SV v) { c.init_seed = parse_int<std::uint64_t>(v, "model.init_seed"); },
                           [](const C& c) { return std::to_string(c.init_seed); }}},

      {"train.pretrain_steps", train_int(&TrainSettings::pretrain_steps, "train.pretrain_steps")},
      {"train.extend_steps", train_int(&TrainSettings::extend_steps, "train.extend_steps")},
      {"train.pretrain_learning_rate",
       train_real(&TrainSettings::pretrain_learning_rate, "train.pretrain_learning_rate")},
      {"train.extend_learning_rate", train_real(&TrainSettings::extend_learning_rate, "train.extend_learning_rate")},
      {"train.batch_size", train_int(&TrainSettings::batch_size, "train.batch_size")},
      {"train.beta1", train_real(&TrainSettings::beta1, "train.beta1")},
      {"train.beta2", train_real(&TrainSettings::beta2, "train.beta2")},
      {"train.weight_decay", train_real(&TrainSettings::weight_decay, "train.weight_decay")},
      {"train.epsilon", train_real(&TrainSettings::epsilon, "train.epsilon")},
      {"train.clip_norm", train_real(&TrainSettings::clip_norm, "train.clip_norm")},
      {"train.seed", {[](C& c, SV v) { c.train.seed = parse_int<std::uint64_t>(v, "train.seed"); },
                      [](const C& c) { return std::to_string(c.train.seed); }}},
      {"train.trained_window", train_int(&TrainSettings::trained_window, "train.trained_window")},
      {"train.checkpoint_every", train_int(&TrainSettings::checkpoint_every, "train.checkpoint_every")},
      {"train.log_every", train_int(&TrainSettings::log_every, "train.log_every")},
      {"train.record_wall_time",
       {[](C& c, SV v) { c.train.record_wall_time = parse_bool(v, "train.record_wall_time"); },
        [](const C& c) { return std::string(c.train.record_wall_time ? "true" : "false"); }}},

      {"policy.g_max", {[](C& c, SV v) { c.policy.g_max = parse_int<std::int64_t>(v, "policy.g_max"); },
                        [](const C& c) { return std::to_string(c.policy.g_max); }}},
      {"policy.scale_distribution",
       {[](C& c, SV v) { c.policy.scale_distribution = parse_scale_distribution(v); },
        [](const C& c) { return std::string(to_string(c.policy.scale_distribution)); }}},
      {"policy.offset_distribution",
       {[](C& c, SV v) { c.policy.offset_distribution = parse_offset_distribution(v); },
        [](const C& c) { return std::string(to_string(c.policy.offset_distribution)); }}},
      {"policy.sink_count",
       {[](C& c, SV v) { c.policy.sink_count = parse_int<std::int64_t>(v, "policy.sink_count"); },
        [](const C& c) { return std::to_string(c.policy.sink_count); }}},
      {"policy.granularity", {[](C& c, SV v) { c.policy.granularity = parse_granularity(v); },
                              [](const C& c) { return std::string(to_string(c.policy.granularity)); }}},

      {"eval.windows",
       {[](C& c, SV v) {
          c.eval.windows.clear();
          for (const auto& item : split_list(v)) c.eval.windows.push_back(parse_int<std::int64_t>(item, "eval.windows"));
        },
        [](const C& c) {
          std::string s;
          for (std::size_t i = 0; i < c.eval.windows.size(); ++i) s += (i ? ", " : "") + std::to_string(c.eval.windows[i]);
          return s;
        }}},
      {"eval.stride", eval_int(&EvalConfig::stride, "eval.stride")},
      {"eval.kv_cases", eval_int(&EvalConfig::kv_cases, "eval.kv_cases")},
      {"eval.kv_pairs", eval_int(&EvalConfig::kv_pairs, "eval.kv_pairs")},
      {"eval.kv_window", eval_int(&EvalConfig::kv_window, "eval.kv_window")},
      {"eval.kv_max_new_tokens", eval_int(&EvalConfig::kv_max_new_tokens, "eval.kv_max_new_tokens")},
      {"eval.scales",
       {[](C& c, SV v) {
          c.eval.scales.clear();
          for (const auto& item : split_list(v)) c.eval.scales.push_back(parse_double(item, "eval.scales"));
        },
        [](const C& c) {
          std::string s;
          for (std::size_t i = 0; i < c.eval.scales.size(); ++i) s += (i ? ", " : "") + format_double(c.eval.scales[i]);
          return s;
        }}},
      {"eval.attention_layer", eval_int(&EvalConfig::attention_layer, "eval.attention_layer")},
      {"eval.seed", {[](C& c, SV v) { c.eval.seed = parse_int<std::uint64_t>(v, "eval.seed"); },
                     [](const C& c) { return std::to_string(c.eval.seed); }}},

      {"paths.corpus", path(&PathsConfig::corpus)},
      {"paths.eval_corpus", path(&PathsConfig::eval_corpus)},
      {"paths.checkpoint", path(&PathsConfig::checkpoint)},
      {"paths.init_checkpoint", path(&PathsConfig::init_checkpoint)},
      {"paths.output", path(&PathsConfig::output)},
  };
  return fields;
}

}  // namespace detail

inline void set_config_value(RunConfig& cfg, std::string_view key, std::string_view value) {
  for (const auto& [name, field] : detail::config_fields()) {
    if (name == key) {
      field.set(cfg, value);
      return;
    }
  }
  throw ConfigError("unknown config key '" + std::string(key) + "'");
}

// Parses `key = value` lines; `#` starts a comment. Keys not listed in the
// field table are errors. Cross-field constraints are checked at the end.
inline RunConfig parse_config(std::string_view source, std::string_view origin = "<config>") {
  RunConfig cfg;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= source.size()) {
    const auto nl = source.find('\n', pos);
    std::string_view raw = source.substr(pos, nl == std::string_view::npos ? source.size() - pos : nl - pos);
    pos = nl == std::string_view::npos ? source.size() + 1 : nl + 1;
    ++line_no;
    if (const auto hash = raw.find('#'); hash != std::string_view::npos) raw = raw.substr(0, hash);
    const std::string line = detail::trim(raw);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(std::string(origin) + ":" + std::to_string(line_no) + ": expected 'key = value'");
    }
    const std::string key = detail::trim(std::string_view(line).substr(0, eq));
    const std::string value = detail::trim(std::string_view(line).substr(eq + 1));
    try {
      set_config_value(cfg, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(std::string(origin) + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  cfg.validate();
  return cfg;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path);
}

// Every key with its resolved value, in table order.
inline std::string show_config(const RunConfig& cfg) {
  std::string out;
  std::string section;
  for (const auto& [name, field] : detail::config_fields()) {
    const std::string sec = name.substr(0, name.find('.'));
    if (sec != section) {
      if (!section.empty()) out += '\n';
      section = sec;
    }
    out += name + " = " + field.get(cfg) + "\n";
  }
  return out;
}

}  // namespace e2llm
