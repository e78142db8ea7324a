#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "e2llm/e2llm.hpp"

namespace fs = std::filesystem;
using namespace e2llm;

namespace {

struct Options {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::int64_t> window;
  std::optional<double> scale;
  std::optional<std::uint64_t> seed;
  std::optional<std::int64_t> steps;
  std::string out;
  std::string checkpoint;
  std::string init;
  std::string corpus;
  std::string cases;
  std::int64_t bytes = 4 << 20;
  double drill_fraction = 0.3;
  std::optional<std::int64_t> layer;
  std::int64_t case_index = 0;
};

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

RunConfig resolve_config(const Options& o) {
  RunConfig cfg;
  std::string source;
  std::string origin = "<defaults>";
  if (!o.config.empty()) {
    source = read_file(o.config);
    origin = o.config;
  }
  for (const std::string& kv : o.sets) {
    if (kv.find('=') == std::string::npos) throw UsageError("--set expects key=value, got '" + kv + "'");
    source += "\n" + kv;
  }
  return parse_config(source, origin);
}

std::string output_path(const Options& o, const RunConfig& cfg, const std::string& fallback) {
  if (!o.out.empty()) return o.out;
  return (fs::path(cfg.paths.output) / fallback).string();
}

std::string checkpoint_path(const Options& o, const RunConfig& cfg) {
  return o.checkpoint.empty() ? cfg.paths.checkpoint : o.checkpoint;
}

void note(const std::string& msg) { std::cerr << msg << "\n"; }

Checkpoint load_for_eval(const Options& o, const RunConfig& cfg) {
  Checkpoint ckpt = load_checkpoint(checkpoint_path(o, cfg));
  note("loaded " + checkpoint_path(o, cfg) + " (" + std::string(to_string(ckpt.phase)) + ", step " +
       std::to_string(ckpt.step) + ", trained g_max " + std::to_string(ckpt.policy.g_max) + ")");
  return ckpt;
}

std::vector<std::int32_t> eval_tokens(const Options& o, const RunConfig& cfg) {
  const std::string path = o.corpus.empty() ? cfg.paths.eval_corpus : o.corpus;
  auto toks = ingest_corpus(path);
  note("evaluation text " + path + ": " + std::to_string(toks.size()) + " tokens");
  return toks;
}

double scale_or_auto(const Options& o, std::int64_t window, std::int64_t base) {
  return o.scale ? *o.scale : scale_for_window(window, base);
}

int run_train(Phase phase, const Options& o) {
  RunConfig cfg = resolve_config(o);
  if (o.seed) cfg.train.seed = *o.seed;
  if (o.steps) (phase == Phase::pretrain ? cfg.train.pretrain_steps : cfg.train.extend_steps) = *o.steps;
  if (o.window) cfg.train.trained_window = *o.window;
  cfg.validate();
  const TrainConfig tc = cfg.train_config(phase);

  const std::string corpus_path = o.corpus.empty() ? cfg.paths.corpus : o.corpus;
  const auto corpus = ingest_corpus(corpus_path);
  note("corpus " + corpus_path + ": " + std::to_string(corpus.size()) + " tokens");

  Model<float> model;
  if (phase == Phase::pretrain) {
    model = Model<float>::initialized(cfg.model, cfg.init_seed);
  } else {
    const std::string init = o.init.empty() ? cfg.paths.init_checkpoint : o.init;
    if (init.empty()) throw UsageError("extend needs --init or paths.init_checkpoint");
    Checkpoint start = load_checkpoint(init);
    if (!(start.model_config == cfg.model)) {
      throw ConfigError("model section of the config does not match checkpoint '" + init + "'");
    }
    model = std::move(start.model);
    note("extending " + init + " (" + std::string(to_string(start.phase)) + ", step " + std::to_string(start.step) +
         ")");
  }

  const std::string ckpt_path = checkpoint_path(o, cfg);
  const std::string telemetry_path = output_path(o, cfg, std::string("telemetry_") + std::string(to_string(phase)) + ".csv");
  std::vector<TrainRecord> records;
  TrainHooks hooks;
  hooks.on_record = [&](const TrainRecord& r) {
    records.push_back(r);
    char line[160];
    std::snprintf(line, sizeof line, "step %6lld  loss %.4f  g %lld  t %lld", static_cast<long long>(r.step), r.loss,
                  static_cast<long long>(r.g), static_cast<long long>(r.t));
    note(line);
  };
  hooks.on_checkpoint = [&](std::int64_t step) {
    Checkpoint ck{cfg.model, phase, static_cast<std::uint64_t>(step), tc.effective_policy(), model};
    save_checkpoint(ckpt_path, ck);
    write_file_atomic(telemetry_path, telemetry_csv(records));
  };
  run_training(model, tc, corpus, hooks);
  note("wrote " + ckpt_path + " and " + telemetry_path);
  return 0;
}

std::vector<std::int64_t> requested_windows(const Options& o, const RunConfig& cfg) {
  return o.window ? std::vector<std::int64_t>{*o.window} : cfg.eval.windows;
}

int run_eval_ppl(const Options& o) {
  const RunConfig cfg = resolve_config(o);
  Checkpoint ckpt = load_for_eval(o, cfg);
  const auto toks = eval_tokens(o, cfg);
  const auto L = static_cast<std::int64_t>(ckpt.model_config.base_window);
  std::vector<EvalReport> reports;
  for (std::int64_t w : requested_windows(o, cfg)) {
    const double g = scale_or_auto(o, w, L);
    const auto rope = RopeParams::interpolated(ckpt.model_config.head_dim, g, ckpt.model_config.rope_base);
    reports.push_back(sliding_window_perplexity(ckpt.model, toks, static_cast<std::size_t>(w),
                                                static_cast<std::size_t>(std::min(cfg.eval.stride, w)), rope));
    note("window " + std::to_string(w) + "  g " + csv_number(g) + "  ppl " + csv_number(reports.back().perplexity));
  }
  const std::string path = output_path(o, cfg, "ppl.csv");
  write_file_atomic(path, ppl_csv(reports));
  note("wrote " + path);
  return 0;
}

int run_eval_extrapolate(const Options& o) {
  const RunConfig cfg = resolve_config(o);
  Checkpoint ckpt = load_for_eval(o, cfg);
  const auto toks = eval_tokens(o, cfg);
  const auto L = static_cast<std::int64_t>(ckpt.model_config.base_window);
  std::vector<EvalReport> reports;
  for (std::int64_t w : requested_windows(o, cfg)) {
    const auto stride = static_cast<std::size_t>(std::min(cfg.eval.stride, w));
    reports.push_back(direct_extrapolation_probe(ckpt.model, toks, static_cast<std::size_t>(w), stride));
    note("window " + std::to_string(w) + "  g 1  ppl " + csv_number(reports.back().perplexity));
    if (w > L) {
      reports.push_back(interpolated_perplexity(ckpt.model, toks, static_cast<std::size_t>(w), stride));
      note("window " + std::to_string(w) + "  g " + csv_number(reports.back().scale) + "  ppl " +
           csv_number(reports.back().perplexity));
    }
  }
  const std::string path = output_path(o, cfg, "extrapolate.csv");
  write_file_atomic(path, ppl_csv(reports));
  note("wrote " + path);
  return 0;
}

int run_eval_scales(const Options& o) {
  const RunConfig cfg = resolve_config(o);
  Checkpoint ckpt = load_for_eval(o, cfg);
  const auto toks = eval_tokens(o, cfg);
  const std::vector<double> scales = o.scale ? std::vector<double>{*o.scale} : cfg.eval.scales;
  const auto reports =
      unseen_scale_sweep(ckpt.model, toks, scales, static_cast<std::size_t>(cfg.eval.stride));
  for (const auto& r : reports) {
    note("g " + csv_number(r.scale) + "  window " + std::to_string(r.context_window) + "  ppl " +
         csv_number(r.perplexity));
  }
  const std::string path = output_path(o, cfg, "scales.csv");
  write_file_atomic(path, ppl_csv(reports));
  note("wrote " + path);
  return 0;
}

std::vector<KvCase> generate_cases(const RunConfig& cfg, std::int64_t window, std::uint64_t seed) {
  Rng rng = derived_rng(seed, 0, 0x6b76);
  std::vector<KvCase> cases;
  for (std::int64_t i = 0; i < cfg.eval.kv_cases; ++i) {
    cases.push_back(kv_generate(static_cast<std::size_t>(cfg.eval.kv_pairs), static_cast<std::size_t>(window), rng));
  }
  return cases;
}

std::string cases_jsonl(const std::vector<KvCase>& cases) {
  std::string out;
  for (std::size_t i = 0; i < cases.size(); ++i) {
    nlohmann::json j;
    j["case_id"] = i;
    j["question_key"] = cases[i].question_key;
    j["answer"] = cases[i].answer;
    j["value_begin"] = cases[i].value_begin;
    j["value_end"] = cases[i].value_end;
    j["pairs"] = cases[i].pairs;
    j["prompt"] = cases[i].prompt;
    out += j.dump() + "\n";
  }
  return out;
}

std::vector<KvCase> read_cases(const std::string& path) {
  std::istringstream in(read_file(path));
  std::vector<KvCase> cases;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      KvCase c;
      c.question_key = j.at("question_key").get<std::string>();
      c.answer = j.at("answer").get<std::string>();
      c.value_begin = j.at("value_begin").get<std::size_t>();
      c.value_end = j.at("value_end").get<std::size_t>();
      c.pairs = j.at("pairs").get<std::vector<std::pair<std::string, std::string>>>();
      c.prompt = j.at("prompt").get<std::string>();
      cases.push_back(std::move(c));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return cases;
}

std::int64_t kv_window(const Options& o, const RunConfig& cfg) { return o.window ? *o.window : cfg.eval.kv_window; }

int run_gen_kv(const Options& o) {
  const RunConfig cfg = resolve_config(o);
  const auto cases = generate_cases(cfg, kv_window(o, cfg), o.seed ? *o.seed : cfg.eval.seed);
  const std::string path = output_path(o, cfg, "kv_cases.jsonl");
  write_file_atomic(path, cases_jsonl(cases));
  note("wrote " + std::to_string(cases.size()) + " cases to " + path);
  return 0;
}

int run_eval_kv(const Options& o) {
  const RunConfig cfg = resolve_config(o);
  Checkpoint ckpt = load_for_eval(o, cfg);
  const std::int64_t window = kv_window(o, cfg);
  const auto cases = o.cases.empty() ? generate_cases(cfg, window, o.seed ? *o.seed : cfg.eval.seed) : read_cases(o.cases);
  const double g = scale_or_auto(o, window, static_cast<std::int64_t>(ckpt.model_config.base_window));
  const auto rope = RopeParams::interpolated(ckpt.model_config.head_dim, g, ckpt.model_config.rope_base);
  const KvResult res = kv_eval(ckpt.model, cases, rope, static_cast<std::size_t>(window),
                               static_cast<std::size_t>(cfg.eval.kv_max_new_tokens));
  for (const auto& oc : res.outcomes) {
    if (!oc.error.empty()) note("case " + std::to_string(oc.case_id) + ": " + oc.error);
  }
  const std::string path = output_path(o, cfg, "kv.csv");
  write_file_atomic(path, kv_csv(res.outcomes, window, g));
  note("accuracy " + csv_number(res.accuracy) + " on " + std::to_string(cases.size()) + " cases (window " +
       std::to_string(window) + ", g " + csv_number(g) + "); wrote " + path);
  return 0;
}

int run_dump_attn(const Options& o) {
  const RunConfig cfg = resolve_config(o);
  Checkpoint ckpt = load_for_eval(o, cfg);
  const std::int64_t window = kv_window(o, cfg);
  const auto cases = o.cases.empty() ? generate_cases(cfg, window, o.seed ? *o.seed : cfg.eval.seed) : read_cases(o.cases);
  if (o.case_index < 0 || static_cast<std::size_t>(o.case_index) >= cases.size()) {
    throw UsageError("--case " + std::to_string(o.case_index) + " outside the " + std::to_string(cases.size()) +
                     " available cases");
  }
  const auto n_layers = static_cast<std::int64_t>(ckpt.model_config.n_layers);
  std::int64_t layer = o.layer ? *o.layer : cfg.eval.attention_layer;
  if (layer < 0) layer += n_layers;
  if (layer < 0 || layer >= n_layers) throw UsageError("--layer outside the model's " + std::to_string(n_layers) + " layers");
  const double g = scale_or_auto(o, window, static_cast<std::int64_t>(ckpt.model_config.base_window));
  const auto rope = RopeParams::interpolated(ckpt.model_config.head_dim, g, ckpt.model_config.rope_base);
  const KvCase& c = cases[static_cast<std::size_t>(o.case_index)];
  const std::vector<std::size_t> layers = {static_cast<std::size_t>(layer)};
  std::string continuation;
  const auto dumps = dump_attention(ckpt.model, c, rope, layers, static_cast<std::size_t>(cfg.eval.kv_max_new_tokens),
                                    &continuation);
  const std::string prefix = output_path(o, cfg, "attention");
  const AttentionDump& d = dumps.front();
  write_file_atomic(prefix + ".pgm", heatmap_pgm(d));
  write_file_atomic(prefix + ".csv", heatmap_csv(d));
  write_file_atomic(prefix + "_summary.csv", heatmap_summary_csv(d));
  note("layer " + std::to_string(layer) + ": " + std::to_string(d.rows) + " x " + std::to_string(d.cols) +
       ", value span [" + std::to_string(d.value_begin) + ", " + std::to_string(d.value_end) + "), span mass " +
       csv_number(d.span_mass()) + " vs uniform " + csv_number(d.mean_span_mass()));
  note("continuation: " + continuation);
  note("wrote " + prefix + ".pgm, .csv, _summary.csv");
  return 0;
}

int run_show_config(const Options& o) {
  RunConfig cfg = resolve_config(o);
  std::cout << show_config(cfg);
  return 0;
}

int run_gen_corpus(const Options& o) {
  const RunConfig cfg = resolve_config(o);
  if (o.bytes < 1) throw UsageError("--bytes must be positive");
  Rng rng = derived_rng(o.seed ? *o.seed : cfg.train.seed, 0, 0xc0);
  const std::string path = output_path(o, cfg, "corpus.txt");
  write_file_atomic(path, text::corpus(rng, static_cast<std::size_t>(o.bytes), o.drill_fraction));
  note("wrote " + std::to_string(o.bytes) + " bytes to " + path);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Context-window extension with scale and offset augmented RoPE"};
  app.require_subcommand(1);
  Options o;

  auto common = [&o](CLI::App* sub) {
    sub->add_option("--config", o.config, "Run configuration file (key = value)");
    sub->add_option("--set", o.sets, "Override one config key, e.g. --set policy.g_max=8");
    sub->add_option("--out", o.out, "Output file (or prefix for dump-attn)");
    sub->add_option("--seed", o.seed, "Seed for this command's randomness");
  };
  auto with_checkpoint = [&o](CLI::App* sub) {
    sub->add_option("--checkpoint", o.checkpoint, "Checkpoint path (default paths.checkpoint)");
  };
  auto with_corpus = [&o](CLI::App* sub, const char* help) { sub->add_option("--corpus", o.corpus, help); };

  auto* pretrain = app.add_subcommand("pretrain", "Train from scratch at the base window");
  auto* extend = app.add_subcommand("extend", "Fine-tune a checkpoint with scale/offset augmentation");
  for (auto* sub : {pretrain, extend}) {
    common(sub);
    with_checkpoint(sub);
    with_corpus(sub, "Training corpus (default paths.corpus)");
    sub->add_option("--steps", o.steps, "Optimizer steps");
    sub->add_option("--window", o.window, "Trained window R");
  }
  extend->add_option("--init", o.init, "Starting checkpoint (default paths.init_checkpoint)");

  auto* eval_ppl = app.add_subcommand("eval-ppl", "Sliding-window perplexity with g = W / L");
  auto* eval_extra = app.add_subcommand("eval-extrapolate", "Perplexity at g = 1 beside g = W / L");
  auto* eval_scales = app.add_subcommand("eval-scales", "Perplexity sweep over eval.scales");
  for (auto* sub : {eval_ppl, eval_extra, eval_scales}) {
    common(sub);
    with_checkpoint(sub);
    with_corpus(sub, "Evaluation text (default paths.eval_corpus)");
  }
  eval_ppl->add_option("--window", o.window, "Evaluate one window instead of eval.windows");
  eval_ppl->add_option("--scale", o.scale, "Fixed scale instead of W / L");
  eval_extra->add_option("--window", o.window, "Evaluate one window instead of eval.windows");
  eval_scales->add_option("--scale", o.scale, "Evaluate one scale instead of eval.scales");

  auto* gen_kv = app.add_subcommand("gen-kv", "Write seeded key/value retrieval cases as JSON lines");
  common(gen_kv);
  gen_kv->add_option("--window", o.window, "Prompt length in tokens (default eval.kv_window)");

  auto* eval_kv = app.add_subcommand("eval-kv", "Greedy key/value retrieval accuracy");
  auto* dump = app.add_subcommand("dump-attn", "Attention heatmap of generated tokens over a retrieval prompt");
  for (auto* sub : {eval_kv, dump}) {
    common(sub);
    with_checkpoint(sub);
    sub->add_option("--window", o.window, "Prompt length (default eval.kv_window)");
    sub->add_option("--scale", o.scale, "Fixed scale instead of W / L");
    sub->add_option("--cases", o.cases, "Cases from gen-kv instead of regenerating");
  }
  dump->add_option("--layer", o.layer, "Layer index, negative counts from the end");
  dump->add_option("--case", o.case_index, "Case index");

  auto* show = app.add_subcommand("show-config", "Print the resolved configuration");
  common(show);

  auto* gen_corpus = app.add_subcommand("gen-corpus", "Write a synthetic byte-level corpus");
  common(gen_corpus);
  gen_corpus->add_option("--bytes", o.bytes, "Corpus size in bytes");
  gen_corpus->add_option("--drill-fraction", o.drill_fraction, "Share of lookup/copy drills")->check(CLI::Range(0.0, 1.0));

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (*pretrain) return run_train(Phase::pretrain, o);
    if (*extend) return run_train(Phase::extend, o);
    if (*eval_ppl) return run_eval_ppl(o);
    if (*eval_extra) return run_eval_extrapolate(o);
    if (*eval_scales) return run_eval_scales(o);
    if (*gen_kv) return run_gen_kv(o);
    if (*eval_kv) return run_eval_kv(o);
    if (*dump) return run_dump_attn(o);
    if (*show) return run_show_config(o);
    if (*gen_corpus) return run_gen_corpus(o);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
