#pragma once

// Command layer behind the `attnlab` tool: gen, train, evaluate, analyze,
// experiment and replay. Each command resolves a flat key/value config
// (defaults < --config file < flags), derives every seed from one root seed,
// writes its artifacts under --out and finishes with manifest.json. A
// manifest replayed with `attnlab replay` must reproduce every artifact
// byte for byte.

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "attnlab/analysis.hpp"
#include "attnlab/common.hpp"
#include "attnlab/dataset.hpp"
#include "attnlab/encoder.hpp"
#include "attnlab/listops.hpp"
#include "attnlab/serialize.hpp"
#include "attnlab/tictactoe.hpp"
#include "attnlab/trainer.hpp"

namespace attnlab::cli {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

inline constexpr const char* kOutEnv = "ATTNLAB_OUT";
inline constexpr const char* kManifestName = "manifest.json";

/// Exit status for a failed command: 10 + the error code.
inline int exit_code(ErrorCode c) { return 10 + static_cast<int>(c); }

// ---------------------------------------------------------------------------
// Resolved configuration

struct Key {
  std::string name;
  std::string fallback;
  std::string help;
};

/// String-valued settings with typed accessors; ordering is by key so the
/// manifest echo is stable.
class Config {
 public:
  std::map<std::string, std::string> values;

  bool has(const std::string& k) const { return values.count(k) && !values.at(k).empty(); }

  const std::string& str(const std::string& k) const {
    const auto it = values.find(k);
    if (it == values.end()) throw Error(ErrorCode::InvalidArgument, "missing setting '" + k + "'");
    return it->second;
  }

  long long integer(const std::string& k) const {
    const std::string& v = str(k);
    std::size_t used = 0;
    long long out = 0;
    try {
      out = std::stoll(v, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != v.size() || v.empty()) throw Error(ErrorCode::InvalidArgument, k + ": '" + v + "' is not an integer");
    return out;
  }

  int i(const std::string& k) const { return static_cast<int>(integer(k)); }

  std::uint64_t u64(const std::string& k) const {
    const long long v = integer(k);
    if (v < 0) throw Error(ErrorCode::InvalidArgument, k + " must be non-negative");
    return static_cast<std::uint64_t>(v);
  }

  double d(const std::string& k) const {
    const std::string& v = str(k);
    std::size_t used = 0;
    double out = 0;
    try {
      out = std::stod(v, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != v.size() || v.empty()) throw Error(ErrorCode::InvalidArgument, k + ": '" + v + "' is not a number");
    return out;
  }

  bool b(const std::string& k) const {
    const std::string& v = str(k);
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw Error(ErrorCode::InvalidArgument, k + ": '" + v + "' is not a boolean");
  }

  json to_json() const {
    json j = json::object();
    for (const auto& [k, v] : values) j[k] = v;
    return j;
  }
};

/// "key = value" lines; '#' starts a comment. Keys may carry leading dashes.
inline std::map<std::string, std::string> parse_config_text(std::string_view text) {
  std::map<std::string, std::string> out;
  std::istringstream in{std::string(text)};
  std::size_t line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw Error(ErrorCode::InvalidArgument, "config line lacks '='", line_no);
    auto trim = [](std::string s) {
      const auto a = s.find_first_not_of(" \t\r");
      const auto b = s.find_last_not_of(" \t\r");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    std::string key = trim(line.substr(0, eq));
    while (!key.empty() && key.front() == '-') key.erase(0, 1);
    std::replace(key.begin(), key.end(), '_', '-');
    out[key] = trim(line.substr(eq + 1));
  }
  return out;
}

inline const std::vector<Key>& model_keys() {
  static const std::vector<Key> k = {
      {"layers", "6", "encoder layers"},
      {"heads", "8", "attention heads"},
      {"d-model", "128", "model width"},
      {"d-ff", "512", "feed-forward width"},
      {"max-len", "512", "maximum input length including [CLS] and [SEP]"},
      {"dropout", "0.1", "dropout rate while training"},
  };
  return k;
}

inline const std::vector<Key>& train_keys() {
  static const std::vector<Key> k = {
      {"lr", "3e-4", "peak learning rate"},
      {"batch-size", "32", "sequences per step"},
      {"steps", "2000", "maximum optimiser steps"},
      {"warmup", "100", "linear warm-up steps"},
      {"eval-every", "200", "steps between validation passes"},
      {"patience", "5", "validation passes without improvement before stopping (0 = never)"},
      {"grad-clip", "1.0", "global gradient norm clip (0 = off)"},
      {"weight-decay", "0", "decoupled weight decay"},
      {"val-fraction", "0.02", "held-out fraction when no validation file is given"},
      {"freeze-layer", "", "freeze this 0-based encoder layer, train everything else"},
      {"freeze-all-but", "", "train only this 0-based encoder layer (plus norms and head)"},
      {"train-norms", "true", "keep every LayerNorm trainable under a freeze flag"},
      {"train-head", "true", "keep the classifier trainable under a freeze flag"},
  };
  return k;
}

inline std::vector<Key> command_keys(const std::string& command) {
  std::vector<Key> k = {{"seed", "1", "root seed"}, {"out", "", "output directory"}};
  auto append = [&](const std::vector<Key>& more) { k.insert(k.end(), more.begin(), more.end()); };
  if (command == "gen") {
    append({{"dataset", "listops-mod", "listops | listops-mod | ttt"},
            {"len-min", "200", "minimum ListOps length in tokens"},
            {"len-max", "400", "maximum ListOps length in tokens"},
            {"max-depth", "10", "maximum nesting depth"},
            {"arity-min", "2", "minimum operands per operator"},
            {"arity-max", "5", "maximum operands per operator"},
            {"leaf-prob", "0.6", "probability an operand is a digit"},
            {"count", "100000", "train + validation samples"},
            {"n-test", "2000", "test samples"},
            {"val-fraction", "0.02", "fraction of --count held out for validation"}});
  } else if (command == "train") {
    append({{"dataset", "listops-mod", "listops | listops-mod | ttt (fixes the label set)"},
            {"train", "", "training samples (JSONL)"},
            {"val", "", "validation samples (JSONL); split from --train when absent"},
            {"init", "", "checkpoint to start from"}});
    append(model_keys());
    append(train_keys());
  } else if (command == "evaluate") {
    append({{"checkpoint", "", "checkpoint file"}, {"data", "", "samples (JSONL)"}});
  } else if (command == "analyze") {
    append({{"checkpoint", "", "checkpoint file"},
            {"sample", "", "one input sequence, e.g. \"[MAX 2 [MIN 4 7 ] 0 ]\""},
            {"data", "", "samples (JSONL), used when --sample is absent"},
            {"index", "0", "first record of --data"},
            {"count", "1", "records of --data to analyse"},
            {"probe", "heatmap,entropy,similarity,t2t,metrics", "comma-separated probes"},
            {"layer", "all", "0-based encoder layer, 'last' or 'all'"},
            {"format", "csv", "csv | image (image also writes the csv matrix)"},
            {"head", "mean", "'mean' over heads or a 0-based head index"},
            {"hide-special", "true", "drop [CLS]/[SEP] and renormalise before heatmaps and rankings"},
            {"top-k", "5", "entries per token in token-to-token rankings"}});
  } else if (command == "experiment") {
    append({{"preset", "length-generalization", "length-generalization | freeze-comparison"},
            {"dataset", "listops-mod", "dataset (length-generalization) or comma list (freeze-comparison)"},
            {"len-min", "10", "training length range lower bound"},
            {"len-max", "30", "training length range upper bound"},
            {"test-ranges", "30-60,60-120", "comma list of lo-hi test ranges (length-generalization)"},
            {"reference-range", "60-120", "range for the trained-and-tested-in-range row; empty to skip"},
            {"freeze-layers", "all", "0-based layers for single-layer rows, 'all' or comma list"},
            {"init", "", "checkpoint every freeze-comparison row starts from"},
            {"n-train", "20000", "training samples per model"},
            {"n-test", "2000", "test samples per row"}});
    append(model_keys());
    append(train_keys());
  } else {
    throw Error(ErrorCode::InvalidArgument, "unknown command '" + command + "'");
  }
  return k;
}

inline Config resolve_config(const std::string& command, const std::map<std::string, std::string>& file,
                             const std::map<std::string, std::string>& flags) {
  Config c;
  const auto keys = command_keys(command);
  for (const Key& k : keys) c.values[k.name] = k.fallback;
  if (command == "experiment" && !flags.count("lr") && !file.count("lr")) {
    const auto preset = flags.count("preset") ? flags.at("preset") : file.count("preset") ? file.at("preset") : "";
    if (preset == "freeze-comparison") c.values["lr"] = "2e-5";
  }
  for (const auto* layer : {&file, &flags}) {
    for (const auto& [k, v] : *layer) {
      if (!c.values.count(k)) throw Error(ErrorCode::InvalidArgument, "'" + k + "' is not a setting of " + command);
      c.values[k] = v;
    }
  }
  if (!c.has("out")) {
    const char* root = std::getenv(kOutEnv);
    c.values["out"] = (fs::path(root && *root ? root : "attnlab-out") / command).string();
  }
  return c;
}

// ---------------------------------------------------------------------------
// Output bookkeeping

/// Exclusive advisory lock held for the lifetime of the object.
class FileLock {
 public:
  explicit FileLock(const fs::path& path) {
    fd_ = ::open(path.c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0644);
    if (fd_ < 0 || ::flock(fd_, LOCK_EX) != 0) {
      if (fd_ >= 0) ::close(fd_);
      throw Error(ErrorCode::IoFailure, "cannot lock '" + path.string() + "'");
    }
  }
  ~FileLock() {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
  }
  FileLock(const FileLock&) = delete;
  FileLock& operator=(const FileLock&) = delete;

 private:
  int fd_ = -1;
};

struct Artifact {
  std::string path;  // relative to the output directory
  std::size_t bytes = 0;
  std::string crc32;
};

/// Collects a command's artifacts; on failure removes what it wrote.
class Run {
 public:
  Run(std::string command, Config config, std::vector<std::string> argv)
      : command_(std::move(command)), config_(std::move(config)), argv_(std::move(argv)) {
    out_ = config_.str("out");
    created_dir_ = !fs::exists(out_);
  }

  const Config& config() const { return config_; }
  const fs::path& out() const { return out_; }
  std::ostream* log = nullptr;

  void seed(const std::string& label, std::uint64_t value) { seeds_[label] = value; }

  void input(const fs::path& path) {
    const std::string bytes = read_file(path);
    inputs_.push_back({fs::absolute(path).lexically_normal().string(), bytes.size(), hex32(crc32_string(bytes))});
  }

  void write(const std::string& rel, std::string_view bytes) {
    const fs::path path = out_ / rel;
    written_.push_back(path);
    write_file(path, bytes);
    outputs_.push_back({rel, bytes.size(), hex32(crc32_string(bytes))});
  }

  /// Checkpoint writes serialise on a sibling lock file.
  void write_locked(const std::string& rel, std::string_view bytes) {
    const fs::path path = out_ / rel;
    fs::create_directories(path.parent_path());
    const fs::path lock_path = path.string() + ".lock";
    FileLock lock(lock_path);
    write(rel, bytes);
    std::error_code ec;
    fs::remove(lock_path, ec);
  }

  json manifest() const {
    json j;
    j["tool"] = "attnlab";
    j["version"] = std::string(kVersion);
    j["command"] = command_;
    j["argv"] = argv_;
    j["config"] = config_.to_json();
    j["seeds"] = json::object();
    for (const auto& [k, v] : seeds_) j["seeds"][k] = v;
    auto list = [](const std::vector<Artifact>& a) {
      json arr = json::array();
      for (const auto& x : a) arr.push_back({{"path", x.path}, {"bytes", x.bytes}, {"crc32", x.crc32}});
      return arr;
    };
    j["inputs"] = list(inputs_);
    j["outputs"] = list(outputs_);
    return j;
  }

  void finish() {
    const fs::path path = out_ / kManifestName;
    written_.push_back(path);
    write_file(path, manifest().dump(2) + "\n");
  }

  void discard() noexcept {
    std::error_code ec;
    for (const auto& p : written_) {
      fs::remove(p, ec);
      fs::remove(p.string() + ".tmp", ec);
    }
    if (created_dir_) {
      // Only removes directories this run left empty.
      std::vector<fs::path> dirs;
      for (auto it = fs::recursive_directory_iterator(out_, ec); !ec && it != fs::recursive_directory_iterator();
           it.increment(ec)) {
        if (it->is_directory(ec)) dirs.push_back(it->path());
      }
      for (auto d = dirs.rbegin(); d != dirs.rend(); ++d) fs::remove(*d, ec);
      fs::remove(out_, ec);
    }
  }

  const std::vector<Artifact>& outputs() const { return outputs_; }

 private:
  std::string command_;
  Config config_;
  std::vector<std::string> argv_;
  fs::path out_;
  bool created_dir_ = false;
  std::map<std::string, std::uint64_t> seeds_;
  std::vector<Artifact> inputs_;
  std::vector<Artifact> outputs_;
  std::vector<fs::path> written_;
};

inline void say(const Run& run, const std::string& msg) {
  if (run.log) *run.log << msg << '\n';
}

// ---------------------------------------------------------------------------
// Shared helpers

inline std::pair<int, int> parse_range(const std::string& s) {
  const auto dash = s.find('-');
  if (dash == std::string::npos) throw Error(ErrorCode::InvalidArgument, "range '" + s + "' is not lo-hi");
  Config c;
  c.values = {{"lo", s.substr(0, dash)}, {"hi", s.substr(dash + 1)}};
  return {c.i("lo"), c.i("hi")};
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  for (std::string item; std::getline(in, item, ',');) {
    const auto a = item.find_first_not_of(' ');
    if (a == std::string::npos) continue;
    out.push_back(item.substr(a, item.find_last_not_of(' ') - a + 1));
  }
  return out;
}

inline ModelConfig model_config(const Config& c, DatasetKind kind) {
  ModelConfig m;
  m.n_layers = c.i("layers");
  m.n_heads = c.i("heads");
  m.d_model = c.i("d-model");
  m.d_ff = c.i("d-ff");
  m.max_len = c.i("max-len");
  m.dropout = c.d("dropout");
  m.n_classes = static_cast<int>(class_labels(kind).size());
  m.validate();
  return m;
}

inline TrainConfig train_config(const Config& c, const ModelConfig& model) {
  TrainConfig t;
  t.model = model;
  t.lr = c.d("lr");
  t.batch_size = c.i("batch-size");
  t.max_steps = c.i("steps");
  t.warmup_steps = c.i("warmup");
  t.eval_every = c.i("eval-every");
  t.patience = c.i("patience");
  t.grad_clip = c.d("grad-clip");
  t.weight_decay = c.d("weight-decay");
  t.val_fraction = c.d("val-fraction");
  if (c.has("freeze-layer") && c.has("freeze-all-but")) {
    throw Error(ErrorCode::InvalidArgument, "--freeze-layer and --freeze-all-but are exclusive");
  }
  if (c.has("freeze-layer")) {
    const int frozen = c.i("freeze-layer");
    if (frozen < 0 || frozen >= model.n_layers) {
      throw Error(ErrorCode::InvalidLayerIndex, "layer " + std::to_string(frozen) + " out of range",
                  static_cast<std::size_t>(std::max(frozen, 0)));
    }
    t.freeze = FreezePolicy::all(model.n_layers);
    t.freeze.layers.erase(t.freeze.layers.begin() + frozen);
    t.freeze.norms = c.b("train-norms");
    t.freeze.head = c.b("train-head");
    t.freeze_set = true;
  } else if (c.has("freeze-all-but")) {
    t.freeze = FreezePolicy::only_layer(c.i("freeze-all-but"));
    t.freeze.norms = c.b("train-norms");
    t.freeze.head = c.b("train-head");
    t.freeze_set = true;
  }
  t.validate();
  return t;
}

inline std::vector<Record> load_dataset(Run& run, const std::string& key) {
  const Config& c = run.config();
  if (!c.has(key) || !fs::exists(c.str(key))) {
    throw Error(ErrorCode::DatasetEmpty, "--" + key + " names no sample file");
  }
  run.input(c.str(key));
  auto records = load_records(c.str(key));
  if (records.empty()) throw Error(ErrorCode::DatasetEmpty, "'" + c.str(key) + "' holds no samples");
  return records;
}

inline Params<float> load_params(Run& run, const std::string& key) {
  const Config& c = run.config();
  if (!c.has(key)) throw Error(ErrorCode::InvalidArgument, "--" + key + " is required");
  run.input(c.str(key));
  return load_checkpoint(c.str(key));
}

// ---------------------------------------------------------------------------
// gen

inline void cmd_gen(Run& run) {
  const Config& c = run.config();
  const DatasetKind kind = dataset_kind_from(c.str("dataset"));
  const Rng root(c.u64("seed"));
  const std::uint64_t sample_seed = root.derive("samples").seed();
  const std::uint64_t test_seed = root.derive("test").seed();
  const std::uint64_t split_seed = root.derive("split").seed();
  run.seed("root", root.seed());
  run.seed("samples", sample_seed);
  run.seed("test", test_seed);
  run.seed("split", split_seed);

  auto make = [&](std::size_t count, std::uint64_t seed) {
    std::vector<Record> out;
    if (kind == DatasetKind::TicTacToe) {
      for (const auto& s : tictactoe::generate_many(seed, count)) out.push_back(to_record(s));
      return out;
    }
    listops::GenSpec spec;
    spec.len_min = c.i("len-min");
    spec.len_max = c.i("len-max");
    spec.max_depth = c.i("max-depth");
    spec.arity_min = c.i("arity-min");
    spec.arity_max = c.i("arity-max");
    spec.leaf_prob = c.d("leaf-prob");
    spec.seed = seed;
    if (kind == DatasetKind::ListOpsModified) spec.ops.assign(listops::kModifiedOps.begin(), listops::kModifiedOps.end());
    for (const auto& s : listops::generate_many(spec, count)) out.push_back(to_record(s));
    return out;
  };

  const double fraction = c.d("val-fraction");
  if (!(fraction >= 0 && fraction < 1)) throw Error(ErrorCode::InvalidArgument, "val-fraction must lie in [0, 1)");
  const auto samples = make(static_cast<std::size_t>(c.u64("count")), sample_seed);
  const auto test = make(static_cast<std::size_t>(c.u64("n-test")), test_seed);
  const auto [train, val] = split_by_hash(samples, fraction, split_seed);
  run.write("train.jsonl", to_jsonl(train));
  run.write("val.jsonl", to_jsonl(val));
  run.write("test.jsonl", to_jsonl(test));
  say(run, "wrote " + std::to_string(train.size()) + " train, " + std::to_string(val.size()) + " val, " +
               std::to_string(test.size()) + " test samples to " + run.out().string());
}

// ---------------------------------------------------------------------------
// train / evaluate

inline void cmd_train(Run& run) {
  const Config& c = run.config();
  const DatasetKind kind = dataset_kind_from(c.str("dataset"));
  const auto classes = class_labels(kind);
  const Rng root(c.u64("seed"));
  ModelConfig model = model_config(c, kind);
  model.seed = root.derive("init").seed();
  TrainConfig tc = train_config(c, model);
  tc.seed = root.derive("train").seed();
  run.seed("root", root.seed());
  run.seed("init", model.seed);
  run.seed("train", tc.seed);

  auto records = load_dataset(run, "train");
  std::vector<Record> val;
  if (c.has("val")) {
    val = load_dataset(run, "val");
  } else {
    const std::uint64_t split_seed = root.derive("split").seed();
    run.seed("split", split_seed);
    std::tie(records, val) = split_by_hash(records, tc.val_fraction, split_seed);
  }
  std::optional<Params<float>> init;
  if (c.has("init")) init = load_params(run, "init");

  const auto train_set = encode_records(records, tc.model, classes);
  const auto val_set = encode_records(val, tc.model, classes);
  const TrainResult res = train(tc, train_set, val_set, init ? &*init : nullptr, [&](const MetricsRow& r) {
    std::ostringstream line;
    line << "step " << r.step << " loss " << r.loss << " val " << r.val_accuracy;
    say(run, line.str());
  });

  run.write_locked("checkpoint.bin", checkpoint_bytes(res.params));
  run.write("metrics.jsonl", metrics_jsonl(res.history));
  json summary;
  summary["train_config"] = tc;
  summary["steps"] = res.steps;
  summary["best_step"] = res.best_step;
  summary["best_val_accuracy"] = res.best_val_accuracy;
  summary["trainable_params"] = res.trainable_params;
  summary["total_params"] = res.total_params;
  summary["checkpoint_crc32"] = params_checksum(res.params);
  run.write("summary.json", summary.dump(2) + "\n");
  say(run, "checkpoint " + (run.out() / "checkpoint.bin").string() + " (" + std::to_string(res.trainable_params) +
               "/" + std::to_string(res.total_params) + " parameters trained)");
}

inline void cmd_evaluate(Run& run) {
  const Params<float> p = load_params(run, "checkpoint");
  const auto records = load_dataset(run, "data");
  const auto classes = classes_for(p.config.n_classes);
  const EvalResult ev = evaluate(p, encode_records(records, p.config, classes));
  json j;
  j["accuracy"] = ev.accuracy;
  j["correct"] = ev.correct;
  j["total"] = ev.total;
  const auto [lo, hi] = wilson_interval(ev.correct, ev.total);
  j["ci95"] = {lo, hi};
  j["labels"] = classes;
  j["confusion"] = ev.confusion;
  run.write("eval.json", j.dump(2) + "\n");
  say(run, "accuracy " + detail::percent(ev.accuracy) + " (" + std::to_string(ev.correct) + "/" +
               std::to_string(ev.total) + ")");
}

// ---------------------------------------------------------------------------
// analyze

inline std::vector<int> selected_layers(const std::string& spec, int n_layers) {
  if (spec == "all") {
    std::vector<int> out(static_cast<std::size_t>(n_layers));
    std::iota(out.begin(), out.end(), 0);
    return out;
  }
  if (spec == "last") return {n_layers - 1};
  Config c;
  c.values["layer"] = spec;
  const int l = c.i("layer");
  if (l < 0 || l >= n_layers) {
    throw Error(ErrorCode::InvalidLayerIndex, "layer " + spec + " outside 0.." + std::to_string(n_layers - 1),
                static_cast<std::size_t>(std::max(l, 0)));
  }
  return {l};
}

inline json ranked_json(const std::vector<analysis::Ranked>& r, const std::vector<std::string>& tokens) {
  json arr = json::array();
  for (const auto& x : r) {
    arr.push_back({{"position", x.position}, {"token", tokens[static_cast<std::size_t>(x.position)]}, {"weight", x.weight}});
  }
  return arr;
}

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// Per-layer structure metrics for one trace; ListOps inputs get block,
/// operator, answer-rank and overlap scores, boards get winning-line mass.
inline json structure_metrics(const ForwardTrace<float>& trace, int head) {
  const auto ra = analysis::renormalize_trace(trace);
  json layers = json::array();
  const bool board = ra.tokens.size() == tictactoe::kTokenCount &&
                     std::all_of(ra.tokens.begin(), ra.tokens.end(), [](const std::string& t) {
                       return t == "x" || t == "o" || t == "-" || t == "|";
                     });
  if (board) {
    const auto b = tictactoe::unflatten(ra.tokens);
    const auto line = tictactoe::winning_line(b);
    for (int l = 0; l < ra.n_layers(); ++l) {
      const auto a = analysis::aggregate_heads(ra.attention[static_cast<std::size_t>(l)], head);
      layers.push_back({{"layer", l}, {"winning_line_attention", analysis::winning_line_attention(a, line)}});
    }
    return {{"task", "tictactoe"}, {"winning_cells", line}, {"layers", layers}};
  }
  const auto spans = listops::sub_spans(ra.tokens);
  const int answer = listops::eval(listops::parse(ra.tokens));
  for (int l = 0; l < ra.n_layers(); ++l) {
    const auto a = analysis::aggregate_heads(ra.attention[static_cast<std::size_t>(l)], head);
    json row{{"layer", l},
             {"block_score", analysis::block_score(a, spans)},
             {"operator_attention_score", analysis::operator_attention_score(a, spans, ra.tokens)}};
    try {
      row["answer_attention_rank"] = analysis::answer_attention_rank(a, ra.tokens, answer);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::AnswerTokenAbsent) throw;
      row["answer_attention_rank"] = nullptr;
    }
    row["simplified_overlap"] = analysis::simplified_overlap(a, ra.tokens);
    layers.push_back(std::move(row));
  }
  return {{"task", "listops"}, {"answer", answer}, {"layers", layers}};
}

inline void analyze_one(Run& run, const Params<float>& p, const Tokens& tokens, const std::string& dir) {
  const Config& c = run.config();
  const auto probes = split_list(c.str("probe"));
  for (const auto& probe : probes) {
    if (probe != "heatmap" && probe != "entropy" && probe != "similarity" && probe != "t2t" && probe != "metrics") {
      throw Error(ErrorCode::InvalidArgument, "unknown probe '" + probe + "'");
    }
  }
  const std::string format = c.str("format");
  if (format != "csv" && format != "image") throw Error(ErrorCode::InvalidArgument, "format must be csv or image");
  const int head = c.str("head") == "mean" ? -1 : c.i("head");
  if (head >= p.config.n_heads) throw Error(ErrorCode::InvalidArgument, "head index out of range");
  const std::string agg = head < 0 ? "mean" : "head" + std::to_string(head);
  const bool hide = c.b("hide-special");

  const auto fr = forward(p, tokens, true);
  const ForwardTrace<float>& trace = *fr.trace;
  const auto layers = selected_layers(c.str("layer"), trace.n_layers());
  run.write(dir + "/trace.bin", trace_bytes(trace));

  // Attention matrices the heatmap and t2t probes read, one per layer.
  analysis::RenormalizedAttention view;
  if (hide) {
    view = analysis::renormalize_trace(trace);
  } else {
    view.tokens = trace.tokens;
    for (const auto& layer : trace.attention) {
      std::vector<analysis::Matrix> heads;
      for (const auto& h : layer) heads.push_back(analysis::to_double(h));
      view.attention.push_back(std::move(heads));
    }
  }

  auto emit_matrix = [&](const std::string& stem, const analysis::Heatmap& h) {
    run.write(dir + "/" + stem + ".csv", analysis::heatmap_csv(h));
    if (format == "image") run.write(dir + "/" + stem + ".png", analysis::heatmap_png(h));
  };

  for (const auto& probe : probes) {
    if (probe == "heatmap") {
      for (int l : layers) {
        const auto a = analysis::aggregate_heads(view.attention[static_cast<std::size_t>(l)], head);
        emit_matrix("heatmap-layer" + std::to_string(l) + "-" + agg, analysis::make_heatmap(a, view.tokens));
      }
    } else if (probe == "entropy") {
      const auto raw = analysis::layer_entropy_summary(trace, false);
      const auto hidden = analysis::layer_entropy_summary(trace, true);
      run.write(dir + "/entropy-raw.csv", analysis::entropy_csv(raw));
      run.write(dir + "/entropy-hidden.csv", analysis::entropy_csv(hidden));
      run.write(dir + "/entropy-series.txt",
                "# raw\n" + analysis::entropy_series(raw) + "# hidden\n" + analysis::entropy_series(hidden));
    } else if (probe == "similarity") {
      for (int l : layers) {
        const auto s = analysis::similarity(analysis::to_double(trace.hidden[static_cast<std::size_t>(l) + 1]), l);
        emit_matrix("similarity-layer" + std::to_string(l), analysis::make_heatmap(s.values, trace.tokens));
      }
    } else if (probe == "t2t") {
      const int k = c.i("top-k");
      for (int l : layers) {
        const auto a = analysis::aggregate_heads(view.attention[static_cast<std::size_t>(l)], head);
        json rows = json::array();
        for (Index t = 0; t < a.rows(); ++t) {
          rows.push_back({{"position", t},
                          {"token", view.tokens[static_cast<std::size_t>(t)]},
                          {"attends_to", ranked_json(analysis::token_to_token(a, t, analysis::Direction::AttendsTo, k), view.tokens)},
                          {"attended_by", ranked_json(analysis::token_to_token(a, t, analysis::Direction::AttendedBy, k), view.tokens)}});
        }
        const json doc{{"layer", l}, {"aggregation", agg}, {"tokens", view.tokens}, {"rankings", rows}};
        run.write(dir + "/t2t-layer" + std::to_string(l) + "-" + agg + ".json", doc.dump(1) + "\n");
      }
    } else if (probe == "metrics") {
      json m = structure_metrics(trace, head);
      m["aggregation"] = agg;
      std::vector<double> logits;
      for (Index i = 0; i < trace.logits.size(); ++i) logits.push_back(static_cast<double>(trace.logits(i)));
      const auto pred = static_cast<std::size_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
      m["prediction"] = classes_for(p.config.n_classes)[pred];
      run.write(dir + "/metrics.json", m.dump(2) + "\n");
    }
  }
}

inline void cmd_analyze(Run& run) {
  const Config& c = run.config();
  const Params<float> p = load_params(run, "checkpoint");
  run.seed("root", c.u64("seed"));
  if (c.has("sample")) {
    analyze_one(run, p, listops::tokenize(c.str("sample")), "sample-0");
    say(run, "analysed 1 sequence into " + run.out().string());
    return;
  }
  const auto records = load_dataset(run, "data");
  const auto first = static_cast<std::size_t>(c.u64("index"));
  const auto count = static_cast<std::size_t>(c.u64("count"));
  if (first >= records.size()) throw Error(ErrorCode::InvalidArgument, "--index beyond the end of --data");
  const std::size_t last = std::min(records.size(), first + count);
  for (std::size_t i = first; i < last; ++i) analyze_one(run, p, records[i].tokens, "sample-" + std::to_string(i));
  say(run, "analysed " + std::to_string(last - first) + " sequences into " + run.out().string());
}

// ---------------------------------------------------------------------------
// experiment

inline void write_table(Run& run, const ExperimentTable& table, const json& shared) {
  run.write("table.json", json(table).dump(2) + "\n");
  run.write("table.txt", render_table(table));
  for (std::size_t i = 0; i < table.rows.size(); ++i) {
    json row_manifest = shared;
    row_manifest["row"] = table.rows[i];
    run.write("rows/row-" + std::to_string(i) + ".json", row_manifest.dump(2) + "\n");
  }
}

inline void cmd_experiment(Run& run) {
  const Config& c = run.config();
  const std::string preset = c.str("preset");
  const std::uint64_t seed = c.u64("seed");
  run.seed("root", seed);
  const std::pair<int, int> range{c.i("len-min"), c.i("len-max")};
  auto progress = [&](const std::string& m) { say(run, m); };

  if (preset == "length-generalization") {
    const DatasetKind kind = dataset_kind_from(c.str("dataset"));
    LengthGeneralizationConfig cfg;
    cfg.dataset = kind;
    cfg.train = train_config(c, model_config(c, kind));
    cfg.train_range = range;
    cfg.test_ranges.clear();
    for (const auto& r : split_list(c.str("test-ranges"))) cfg.test_ranges.push_back(parse_range(r));
    cfg.reference_range = c.has("reference-range") ? std::optional(parse_range(c.str("reference-range"))) : std::nullopt;
    cfg.n_train = static_cast<std::size_t>(c.u64("n-train"));
    cfg.n_test = static_cast<std::size_t>(c.u64("n-test"));
    cfg.seed = seed;
    const auto table = run_length_generalization(cfg, progress);
    write_table(run, table, json{{"preset", preset}, {"train_config", cfg.train}, {"seed", seed}});
  } else if (preset == "freeze-comparison") {
    FreezeComparisonConfig cfg;
    cfg.datasets.clear();
    for (const auto& d : split_list(c.str("dataset"))) cfg.datasets.push_back(dataset_kind_from(d));
    cfg.train = train_config(c, model_config(c, cfg.datasets.empty() ? DatasetKind::ListOps : cfg.datasets.front()));
    if (c.str("freeze-layers") == "all") {
      for (int l = 0; l < cfg.train.model.n_layers; ++l) cfg.layers.push_back(l);
    } else {
      Config tmp;
      for (const auto& l : split_list(c.str("freeze-layers"))) {
        tmp.values["layer"] = l;
        cfg.layers.push_back(tmp.i("layer"));
      }
    }
    cfg.range = range;
    cfg.n_train = static_cast<std::size_t>(c.u64("n-train"));
    cfg.n_test = static_cast<std::size_t>(c.u64("n-test"));
    cfg.seed = seed;
    if (c.has("init")) cfg.init = load_params(run, "init");
    const auto table = run_freeze_comparison(cfg, progress);
    write_table(run, table, json{{"preset", preset}, {"train_config", cfg.train}, {"seed", seed}});
  } else {
    throw Error(ErrorCode::InvalidArgument, "unknown preset '" + preset + "'");
  }
  say(run, "table written to " + (run.out() / "table.txt").string());
}

// ---------------------------------------------------------------------------
// Dispatch and replay

inline void dispatch(Run& run, const std::string& command) {
  if (command == "gen") return cmd_gen(run);
  if (command == "train") return cmd_train(run);
  if (command == "evaluate") return cmd_evaluate(run);
  if (command == "analyze") return cmd_analyze(run);
  if (command == "experiment") return cmd_experiment(run);
  throw Error(ErrorCode::InvalidArgument, "unknown command '" + command + "'");
}

/// Runs a resolved command, writing the manifest on success and removing
/// partial outputs on failure. Returns the manifest.
inline json execute(const std::string& command, const Config& config, const std::vector<std::string>& argv,
                    std::ostream* log) {
  Run run(command, config, argv);
  run.log = log;
  try {
    dispatch(run, command);
    run.finish();
  } catch (...) {
    run.discard();
    throw;
  }
  return run.manifest();
}

/// Re-executes a manifest's resolved config (into `out` when given), then
/// checks inputs and outputs against the recorded checksums.
inline json replay(const fs::path& manifest_path, const std::optional<fs::path>& out, std::ostream* log) {
  json m;
  try {
    m = json::parse(read_file(manifest_path));
  } catch (const json::exception& e) {
    throw Error(ErrorCode::IoFailure, std::string("bad manifest: ") + e.what());
  }
  for (const auto& in : m.at("inputs")) {
    const std::string path = in.at("path").get<std::string>();
    if (hex32(crc32_string(read_file(path))) != in.at("crc32").get<std::string>()) {
      throw Error(ErrorCode::ChecksumMismatch, "input '" + path + "' changed since the recorded run");
    }
  }
  Config config;
  for (const auto& [k, v] : m.at("config").items()) config.values[k] = v.get<std::string>();
  if (out) config.values["out"] = out->string();
  const std::string command = m.at("command").get<std::string>();
  json fresh = execute(command, config, m.at("argv").get<std::vector<std::string>>(), log);

  std::map<std::string, std::string> now;
  for (const auto& o : fresh.at("outputs")) now[o.at("path").get<std::string>()] = o.at("crc32").get<std::string>();
  std::size_t i = 0;
  for (const auto& o : m.at("outputs")) {
    const std::string path = o.at("path").get<std::string>();
    const auto it = now.find(path);
    if (it == now.end() || it->second != o.at("crc32").get<std::string>()) {
      throw Error(ErrorCode::ChecksumMismatch, "replayed artifact '" + path + "' differs", i);
    }
    ++i;
  }
  if (now.size() != m.at("outputs").size()) {
    throw Error(ErrorCode::ChecksumMismatch, "replay produced a different artifact set");
  }
  if (log) *log << "replay reproduced " << now.size() << " artifacts\n";
  return fresh;
}

// ---------------------------------------------------------------------------
// Argument parsing

/// Full command line entry point; returns the process exit status.
inline int main(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"attnlab: attention probes for transformer encoders on ListOps and Tic-Tac-Toe", "attnlab"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kVersion));

  const std::vector<std::string> commands = {"gen", "train", "evaluate", "analyze", "experiment"};
  std::map<std::string, std::map<std::string, std::string>> flags;
  std::map<std::string, std::string> config_files;
  std::map<std::string, CLI::App*> subs;
  const std::map<std::string, std::string> blurbs = {
      {"gen", "generate train/val/test sample files"},
      {"train", "train an encoder and write a checkpoint"},
      {"evaluate", "score a checkpoint on a sample file"},
      {"analyze", "run attention and hidden-state probes"},
      {"experiment", "run a preset experiment and write its table"},
  };
  for (const auto& cmd : commands) {
    CLI::App* sub = app.add_subcommand(cmd, blurbs.at(cmd));
    subs[cmd] = sub;
    sub->add_option("--config", config_files[cmd], "key=value settings file (flags override it)");
    for (const Key& k : command_keys(cmd)) {
      std::string help = k.help;
      if (!k.fallback.empty()) help += " [" + k.fallback + "]";
      sub->add_option_function<std::string>(
          "--" + k.name, [&flags, cmd, name = k.name](const std::string& v) { flags[cmd][name] = v; }, help);
    }
  }
  std::string manifest_path, replay_out;
  CLI::App* rep = app.add_subcommand("replay", "re-run a manifest and verify its artifacts");
  rep->add_option("manifest", manifest_path, "manifest.json of an earlier run")->required();
  rep->add_option("--out", replay_out, "directory for the replayed artifacts");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  if (!reversed.empty()) reversed.pop_back();  // program name
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  try {
    if (rep->parsed()) {
      replay(manifest_path, replay_out.empty() ? std::nullopt : std::optional<fs::path>(replay_out), &out);
      return 0;
    }
    for (const auto& cmd : commands) {
      if (!subs[cmd]->parsed()) continue;
      std::map<std::string, std::string> file;
      if (!config_files[cmd].empty()) file = parse_config_text(read_file(config_files[cmd]));
      const Config config = resolve_config(cmd, file, flags[cmd]);
      execute(cmd, config, args, &out);
      return 0;
    }
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return exit_code(e.code());
  }
  return 1;
}

}  // namespace attnlab::cli
