#pragma once

// Training loop, evaluation and the two experiment harnesses (layer-freeze
// comparison and length generalisation).

#include <chrono>
#include <cmath>
#include <functional>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "attnlab/common.hpp"
#include "attnlab/dataset.hpp"
#include "attnlab/encoder.hpp"
#include "attnlab/listops.hpp"
#include "attnlab/serialize.hpp"
#include "attnlab/tictactoe.hpp"

namespace attnlab {

/// Adam with a trainability mask. Frozen blocks are skipped entirely, so
/// their values (and moments) never change.
template <class S>
class Adam {
 public:
  Adam(const ParamLayout& layout, TrainMask mask, double beta1 = 0.9, double beta2 = 0.999,
       double eps = 1e-8, double weight_decay = 0.0)
      : layout_(layout), mask_(std::move(mask)), m_(layout.size(), S(0)), v_(layout.size(), S(0)),
        b1_(beta1), b2_(beta2), eps_(eps), wd_(weight_decay) {}

  void step(Buffer<S>& values, const Buffer<S>& grad, double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    const S b1 = static_cast<S>(b1_), b2 = static_cast<S>(b2_);
    const S step_size = static_cast<S>(lr / c1);
    const S inv_c2 = static_cast<S>(1.0 / c2);
    const S eps = static_cast<S>(eps_);
    const S decay = static_cast<S>(lr * wd_);
    for (std::size_t bi = 0; bi < layout_.blocks().size(); ++bi) {
      if (!mask_.trainable(static_cast<int>(bi))) continue;
      const BlockInfo& b = layout_.blocks()[bi];
      for (std::size_t i = b.offset; i < b.offset + b.size(); ++i) {
        const S g = grad[i];
        m_[i] = b1 * m_[i] + (S(1) - b1) * g;
        v_[i] = b2 * v_[i] + (S(1) - b2) * g * g;
        values[i] -= step_size * m_[i] / (std::sqrt(v_[i] * inv_c2) + eps) + decay * values[i];
      }
    }
  }

  const TrainMask& mask() const { return mask_; }
  std::size_t steps() const { return t_; }

 private:
  const ParamLayout& layout_;
  TrainMask mask_;
  std::vector<S> m_, v_;
  double b1_, b2_, eps_, wd_;
  std::size_t t_ = 0;
};

struct TrainConfig {
  ModelConfig model;
  double lr = 3e-4;
  int batch_size = 32;
  int max_steps = 2000;
  int warmup_steps = 100;
  int eval_every = 200;
  int patience = 5;  // evaluations without improvement before stopping; 0 disables
  double grad_clip = 1.0;
  double weight_decay = 0.0;
  double val_fraction = 0.02;
  std::uint64_t seed = 1;
  FreezePolicy freeze = FreezePolicy::all(6);
  bool freeze_set = false;  // false: train everything regardless of `freeze`

  void validate() const {
    model.validate();
    if (!(lr > 0) || batch_size < 1 || max_steps < 1 || eval_every < 1 || warmup_steps < 0 ||
        patience < 0 || !(grad_clip >= 0) || !(weight_decay >= 0) ||
        !(val_fraction >= 0 && val_fraction < 1)) {
      throw Error(ErrorCode::InvalidArgument, "training numerics must be positive");
    }
  }

  FreezePolicy effective_freeze() const {
    return freeze_set ? freeze : FreezePolicy::all(model.n_layers);
  }
};

inline void to_json(nlohmann::ordered_json& j, const TrainConfig& c) {
  j = nlohmann::ordered_json{{"model", c.model},
                             {"lr", c.lr},
                             {"batch_size", c.batch_size},
                             {"max_steps", c.max_steps},
                             {"warmup_steps", c.warmup_steps},
                             {"eval_every", c.eval_every},
                             {"patience", c.patience},
                             {"grad_clip", c.grad_clip},
                             {"weight_decay", c.weight_decay},
                             {"val_fraction", c.val_fraction},
                             {"seed", c.seed},
                             {"freeze", c.effective_freeze()}};
}

inline void from_json(const nlohmann::ordered_json& j, TrainConfig& c) {
  c.model = j.at("model").get<ModelConfig>();
  c.lr = j.at("lr").get<double>();
  c.batch_size = j.at("batch_size").get<int>();
  c.max_steps = j.at("max_steps").get<int>();
  c.warmup_steps = j.at("warmup_steps").get<int>();
  c.eval_every = j.at("eval_every").get<int>();
  c.patience = j.at("patience").get<int>();
  c.grad_clip = j.at("grad_clip").get<double>();
  c.weight_decay = j.at("weight_decay").get<double>();
  c.val_fraction = j.at("val_fraction").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.freeze = j.at("freeze").get<FreezePolicy>();
  c.freeze_set = true;
}

struct MetricsRow {
  int step = 0;
  double loss = 0;          // mean training loss since the previous row
  double val_accuracy = 0;  // NaN when there is no validation set
};

inline void to_json(nlohmann::ordered_json& j, const MetricsRow& r) {
  j = nlohmann::ordered_json{{"step", r.step}, {"loss", r.loss}};
  if (std::isnan(r.val_accuracy)) {
    j["val_accuracy"] = nullptr;
  } else {
    j["val_accuracy"] = r.val_accuracy;
  }
}

inline std::string metrics_jsonl(const std::vector<MetricsRow>& rows) {
  std::string out;
  for (const auto& r : rows) {
    out += nlohmann::ordered_json(r).dump();
    out += '\n';
  }
  return out;
}

/// Sequences encoded for one model, with class indices.
struct EncodedSet {
  std::vector<std::vector<int>> ids;
  std::vector<int> labels;

  std::size_t size() const { return ids.size(); }
};

inline EncodedSet encode_records(const std::vector<Record>& records, const ModelConfig& model,
                                 const std::vector<std::string>& classes) {
  EncodedSet out;
  out.ids.reserve(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    try {
      out.ids.push_back(encode(records[i].tokens, model));
    } catch (const Error& e) {
      throw Error(e.code(), "record " + std::to_string(i) + ": " + e.what(), i);
    }
    out.labels.push_back(label_index(classes, records[i].label));
  }
  return out;
}

inline std::vector<std::string> classes_for(int n_classes) {
  return n_classes == 2 ? class_labels(DatasetKind::TicTacToe) : class_labels(DatasetKind::ListOps);
}

struct EvalResult {
  double accuracy = 0;
  std::size_t correct = 0;
  std::size_t total = 0;
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
  std::vector<int> predictions;
};

template <class S>
EvalResult evaluate(const Params<S>& p, const EncodedSet& data, int batch_size = 64) {
  const int C = p.config.n_classes;
  EvalResult r;
  r.confusion.assign(static_cast<std::size_t>(C), std::vector<std::size_t>(static_cast<std::size_t>(C), 0));
  BatchCache<S> cache;
  for (std::size_t start = 0; start < data.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(data.size(), start + static_cast<std::size_t>(batch_size));
    Batch b;
    for (std::size_t i = start; i < end; ++i) b.add(data.ids[i]);
    const Mat<S>& logits = forward_batch(p, b, cache);
    for (std::size_t i = start; i < end; ++i) {
      Index pred = 0;
      logits.row(static_cast<Index>(i - start)).maxCoeff(&pred);
      const int truth = data.labels[i];
      r.predictions.push_back(static_cast<int>(pred));
      r.correct += (pred == truth);
      ++r.confusion[static_cast<std::size_t>(truth)][static_cast<std::size_t>(pred)];
    }
  }
  r.total = data.size();
  r.accuracy = r.total ? static_cast<double>(r.correct) / static_cast<double>(r.total) : 0.0;
  return r;
}

struct TrainResult {
  Params<float> params;
  std::vector<MetricsRow> history;
  double best_val_accuracy = std::nan("");
  int steps = 0;
  int best_step = 0;
  std::size_t trainable_params = 0;
  std::size_t total_params = 0;
};

using EvalCallback = std::function<void(const MetricsRow&)>;

/// Trains from `init` (or a fresh seeded model when null). When `val` is
/// empty, early stopping is off and the final parameters are returned;
/// otherwise the best-validation parameters are returned.
inline TrainResult train(const TrainConfig& cfg, const EncodedSet& train_set, const EncodedSet& val,
                         const Params<float>* init = nullptr, const EvalCallback& on_eval = {}) {
  cfg.validate();
  if (train_set.size() == 0) throw Error(ErrorCode::DatasetEmpty, "training set is empty");
  TrainResult out;
  out.params = init ? *init : Params<float>::init(cfg.model);
  if (!(out.params.config.n_layers == cfg.model.n_layers && out.params.config.d_model == cfg.model.d_model &&
        out.params.config.n_heads == cfg.model.n_heads && out.params.config.d_ff == cfg.model.d_ff &&
        out.params.config.max_len == cfg.model.max_len && out.params.config.n_classes == cfg.model.n_classes)) {
    throw Error(ErrorCode::InvalidArgument, "initial checkpoint shape differs from the model config");
  }
  out.params.config.dropout = cfg.model.dropout;
  Params<float>& p = out.params;

  TrainMask mask = apply_freeze(p.layout, cfg.model.n_layers, cfg.effective_freeze());
  out.trainable_params = mask.trainable_count;
  out.total_params = mask.total_count;
  Adam<float> opt(p.layout, std::move(mask), 0.9, 0.999, 1e-8, cfg.weight_decay);

  Rng root(cfg.seed);
  Rng order_rng = root.derive("shuffle");
  Rng drop_rng = root.derive("dropout");

  std::vector<std::size_t> order(train_set.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  order_rng.shuffle(order);
  std::size_t cursor = 0;

  Buffer<float> grad;
  BatchCache<float> cache;
  double loss_sum = 0;
  int loss_count = 0;
  int since_best = 0;
  Params<float> best = p;
  const bool has_val = val.size() > 0;

  for (int step = 1; step <= cfg.max_steps; ++step) {
    Batch b;
    std::vector<int> labels;
    for (int k = 0; k < cfg.batch_size; ++k) {
      if (cursor == order.size()) {
        order_rng.shuffle(order);
        cursor = 0;
      }
      const std::size_t i = order[cursor++];
      b.add(train_set.ids[i]);
      labels.push_back(train_set.labels[i]);
    }
    forward_batch(p, b, cache, &drop_rng);
    float loss;
    try {
      loss = backward_batch(p, b, cache, labels, grad);
    } catch (const Error& e) {
      if (e.code() == ErrorCode::NonFiniteLoss) {
        throw Error(ErrorCode::NonFiniteLoss, "loss diverged at step " + std::to_string(step),
                    static_cast<std::size_t>(step));
      }
      throw;
    }
    loss_sum += loss;
    ++loss_count;

    if (cfg.grad_clip > 0) {
      double sq = 0;
      for (float g : grad) sq += static_cast<double>(g) * g;
      const double norm = std::sqrt(sq);
      if (norm > cfg.grad_clip) {
        const auto f = static_cast<float>(cfg.grad_clip / norm);
        for (float& g : grad) g *= f;
      }
    }

    double lr = cfg.lr;
    if (step <= cfg.warmup_steps) {
      lr *= static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
    } else {
      const double span = std::max(1, cfg.max_steps - cfg.warmup_steps);
      lr *= std::max(0.0, 1.0 - static_cast<double>(step - cfg.warmup_steps) / span);
    }
    opt.step(p.values, grad, lr);
    out.steps = step;

    if (step % cfg.eval_every == 0 || step == cfg.max_steps) {
      MetricsRow row{step, loss_sum / loss_count, std::nan("")};
      loss_sum = 0;
      loss_count = 0;
      if (has_val) {
        row.val_accuracy = evaluate(p, val).accuracy;
        if (!(row.val_accuracy <= out.best_val_accuracy)) {
          out.best_val_accuracy = row.val_accuracy;
          out.best_step = step;
          best = p;
          since_best = 0;
        } else {
          ++since_best;
        }
      }
      out.history.push_back(row);
      if (on_eval) on_eval(row);
      if (has_val && cfg.patience > 0 && since_best >= cfg.patience) break;
    }
  }
  if (has_val) p = std::move(best);
  if (!has_val) out.best_step = out.steps;
  return out;
}

// ---------------------------------------------------------------------------
// Experiment tables

struct ExperimentRow {
  std::string setting;
  std::string dataset;
  std::string train_range;
  std::string test_range;
  double accuracy = 0;
  std::size_t correct = 0;
  std::size_t total = 0;
  double ci_low = 0;
  double ci_high = 0;
  std::size_t trainable_params = 0;
  std::size_t total_params = 0;
  std::uint64_t seed = 0;
  std::string checkpoint_crc32;

  friend bool operator==(const ExperimentRow&, const ExperimentRow&) = default;
};

struct ExperimentTable {
  std::string kind;  // "length-generalization" | "freeze-comparison"
  std::vector<ExperimentRow> rows;

  friend bool operator==(const ExperimentTable&, const ExperimentTable&) = default;
};

/// 95% Wilson score interval for k successes out of n.
inline std::pair<double, double> wilson_interval(std::size_t k, std::size_t n, double z = 1.959963984540054) {
  if (n == 0) return {0.0, 1.0};
  const double nn = static_cast<double>(n);
  const double ph = static_cast<double>(k) / nn;
  const double denom = 1 + z * z / nn;
  const double centre = (ph + z * z / (2 * nn)) / denom;
  const double half = z * std::sqrt(ph * (1 - ph) / nn + z * z / (4 * nn * nn)) / denom;
  return {std::max(0.0, centre - half), std::min(1.0, centre + half)};
}

inline void to_json(nlohmann::ordered_json& j, const ExperimentRow& r) {
  j = nlohmann::ordered_json{{"setting", r.setting},
                             {"dataset", r.dataset},
                             {"train_range", r.train_range},
                             {"test_range", r.test_range},
                             {"accuracy", r.accuracy},
                             {"correct", r.correct},
                             {"total", r.total},
                             {"ci_low", r.ci_low},
                             {"ci_high", r.ci_high},
                             {"trainable_params", r.trainable_params},
                             {"total_params", r.total_params},
                             {"seed", r.seed},
                             {"checkpoint_crc32", r.checkpoint_crc32}};
}

inline void from_json(const nlohmann::ordered_json& j, ExperimentRow& r) {
  r.setting = j.at("setting").get<std::string>();
  r.dataset = j.at("dataset").get<std::string>();
  r.train_range = j.at("train_range").get<std::string>();
  r.test_range = j.at("test_range").get<std::string>();
  r.accuracy = j.at("accuracy").get<double>();
  r.correct = j.at("correct").get<std::size_t>();
  r.total = j.at("total").get<std::size_t>();
  r.ci_low = j.at("ci_low").get<double>();
  r.ci_high = j.at("ci_high").get<double>();
  r.trainable_params = j.at("trainable_params").get<std::size_t>();
  r.total_params = j.at("total_params").get<std::size_t>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.checkpoint_crc32 = j.at("checkpoint_crc32").get<std::string>();
}

inline void to_json(nlohmann::ordered_json& j, const ExperimentTable& t) {
  j = nlohmann::ordered_json{{"kind", t.kind}, {"rows", t.rows}};
}

inline void from_json(const nlohmann::ordered_json& j, ExperimentTable& t) {
  t.kind = j.at("kind").get<std::string>();
  t.rows = j.at("rows").get<std::vector<ExperimentRow>>();
}

namespace detail {

inline std::string percent(double a) {
  std::ostringstream ss;
  ss << std::fixed << std::setprecision(1) << 100.0 * a << "%";
  return ss.str();
}

inline std::string render_grid(const std::vector<std::vector<std::string>>& grid) {
  std::vector<std::size_t> width;
  for (const auto& row : grid) {
    width.resize(std::max(width.size(), row.size()), 0);
    for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());
  }
  std::string rule = "+";
  for (std::size_t w : width) rule += std::string(w + 2, '-') + "+";
  std::string out = rule + "\n";
  for (const auto& row : grid) {
    out += "|";
    for (std::size_t c = 0; c < width.size(); ++c) {
      const std::string cell = c < row.size() ? row[c] : "";
      out += " " + cell + std::string(width[c] - cell.size(), ' ') + " |";
    }
    out += "\n" + rule + "\n";
  }
  return out;
}

}  // namespace detail

/// Aligned plain-text table. Length generalisation prints one line per row
/// (trained on / tested on / accuracy); freeze comparison pivots to settings
/// x datasets with trainable parameter counts.
inline std::string render_table(const ExperimentTable& t) {
  std::vector<std::vector<std::string>> grid;
  if (t.kind == "freeze-comparison") {
    std::vector<std::string> datasets;
    std::vector<std::string> settings;
    for (const auto& r : t.rows) {
      if (std::find(datasets.begin(), datasets.end(), r.dataset) == datasets.end()) datasets.push_back(r.dataset);
      if (std::find(settings.begin(), settings.end(), r.setting) == settings.end()) settings.push_back(r.setting);
    }
    std::vector<std::string> head{"Fine-tune Settings"};
    head.insert(head.end(), datasets.begin(), datasets.end());
    head.emplace_back("Trainable params");
    grid.push_back(head);
    for (const auto& s : settings) {
      std::vector<std::string> line{s};
      std::size_t trainable = 0, total = 0;
      for (const auto& d : datasets) {
        std::string cell = "-";
        for (const auto& r : t.rows) {
          if (r.setting == s && r.dataset == d) {
            cell = detail::percent(r.accuracy);
            trainable = r.trainable_params;
            total = r.total_params;
          }
        }
        line.push_back(cell);
      }
      line.push_back(std::to_string(trainable) + " / " + std::to_string(total));
      grid.push_back(line);
    }
  } else {
    grid.push_back({"Trained on sequence length of", "Tested on sequence length of", "Accuracy", "95% CI"});
    for (const auto& r : t.rows) {
      grid.push_back({r.train_range, r.test_range, detail::percent(r.accuracy),
                      detail::percent(r.ci_low) + " - " + detail::percent(r.ci_high)});
    }
  }
  return detail::render_grid(grid);
}

inline std::string range_label(int lo, int hi) { return std::to_string(lo) + "-" + std::to_string(hi); }

/// Dataset generation shared by the harnesses.
inline std::vector<Record> generate_records(DatasetKind kind, int len_min, int len_max, std::size_t count,
                                            std::uint64_t seed) {
  std::vector<Record> out;
  out.reserve(count);
  if (kind == DatasetKind::TicTacToe) {
    for (const auto& s : tictactoe::generate_many(seed, count)) out.push_back(to_record(s));
    return out;
  }
  listops::GenSpec spec;
  spec.len_min = len_min;
  spec.len_max = len_max;
  spec.seed = seed;
  if (kind == DatasetKind::ListOpsModified) spec.ops.assign(listops::kModifiedOps.begin(), listops::kModifiedOps.end());
  for (const auto& s : listops::generate_many(spec, count)) out.push_back(to_record(s));
  return out;
}

struct LengthGeneralizationConfig {
  TrainConfig train;
  DatasetKind dataset = DatasetKind::ListOpsModified;
  std::pair<int, int> train_range{10, 30};
  std::vector<std::pair<int, int>> test_ranges{{30, 60}, {60, 120}};
  // The "same" row: a separate model trained and tested on this range.
  std::optional<std::pair<int, int>> reference_range = std::pair<int, int>{60, 120};
  std::size_t n_train = 20000;
  std::size_t n_test = 2000;
  std::uint64_t seed = 1;
};

using ProgressFn = std::function<void(const std::string&)>;

/// One model per training range, one row per test range.
inline ExperimentTable run_length_generalization(const LengthGeneralizationConfig& cfg,
                                                 const ProgressFn& progress = {}) {
  ExperimentTable table{"length-generalization", {}};
  const Rng root(cfg.seed);
  const auto classes = class_labels(cfg.dataset);

  auto train_on = [&](std::pair<int, int> range, std::string_view tag) {
    const std::string label = std::string(tag) + range_label(range.first, range.second);
    auto records = generate_records(cfg.dataset, range.first, range.second, cfg.n_train,
                                    root.derive("train:" + label).seed());
    auto [kept, held] = split_by_hash(records, cfg.train.val_fraction, root.derive("split").seed());
    TrainConfig tc = cfg.train;
    tc.seed = root.derive("run:" + label).seed();
    tc.model.seed = root.derive("init:" + label).seed();
    if (progress) progress("training on " + range_label(range.first, range.second));
    return train(tc, encode_records(kept, tc.model, classes), encode_records(held, tc.model, classes));
  };

  auto add_row = [&](const TrainResult& model, std::pair<int, int> trained, std::pair<int, int> tested) {
    const std::string lbl = range_label(tested.first, tested.second);
    auto records = generate_records(cfg.dataset, tested.first, tested.second, cfg.n_test,
                                    root.derive("test:" + lbl).seed());
    const EvalResult ev = evaluate(model.params, encode_records(records, model.params.config, classes));
    ExperimentRow row;
    row.setting = "fully-trained";
    row.dataset = std::string(to_string(cfg.dataset));
    row.train_range = range_label(trained.first, trained.second);
    row.test_range = lbl;
    row.accuracy = ev.accuracy;
    row.correct = ev.correct;
    row.total = ev.total;
    std::tie(row.ci_low, row.ci_high) = wilson_interval(ev.correct, ev.total);
    row.trainable_params = model.trainable_params;
    row.total_params = model.total_params;
    row.seed = cfg.seed;
    row.checkpoint_crc32 = params_checksum(model.params);
    table.rows.push_back(row);
    if (progress) progress(row.train_range + " -> " + row.test_range + ": " + detail::percent(row.accuracy));
  };

  if (cfg.reference_range) {
    const TrainResult ref = train_on(*cfg.reference_range, "reference:");
    add_row(ref, *cfg.reference_range, *cfg.reference_range);
  }
  const TrainResult model = train_on(cfg.train_range, "main:");
  add_row(model, cfg.train_range, cfg.train_range);
  for (const auto& r : cfg.test_ranges) add_row(model, cfg.train_range, r);
  return table;
}

struct FreezeComparisonConfig {
  TrainConfig train;
  std::vector<DatasetKind> datasets{DatasetKind::ListOpsModified, DatasetKind::ListOps};
  std::vector<int> layers;  // 0-based encoder layers, each trained alone
  std::pair<int, int> range{10, 30};
  std::size_t n_train = 20000;
  std::size_t n_test = 2000;
  std::uint64_t seed = 1;
  // Starting point shared by every row; a fresh seeded model when empty.
  std::optional<Params<float>> init;
};

inline std::string layer_setting(int layer) { return "Fine-tuned-layer-" + std::to_string(layer); }

/// One row per (setting, dataset): each single-layer policy plus the fully
/// trainable baseline, all from the same start, data and seeds.
inline ExperimentTable run_freeze_comparison(const FreezeComparisonConfig& cfg, const ProgressFn& progress = {}) {
  ExperimentTable table{"freeze-comparison", {}};
  const Rng root(cfg.seed);
  for (int l : cfg.layers) {
    if (l < 0 || l >= cfg.train.model.n_layers) {
      throw Error(ErrorCode::InvalidLayerIndex, "layer " + std::to_string(l) + " out of range",
                  static_cast<std::size_t>(std::max(l, 0)));
    }
  }
  for (DatasetKind kind : cfg.datasets) {
    const auto classes = class_labels(kind);
    const std::string name(to_string(kind));
    auto records = generate_records(kind, cfg.range.first, cfg.range.second, cfg.n_train,
                                    root.derive("train:" + name).seed());
    auto test = generate_records(kind, cfg.range.first, cfg.range.second, cfg.n_test,
                                 root.derive("test:" + name).seed());
    auto [kept, held] = split_by_hash(records, cfg.train.val_fraction, root.derive("split").seed());

    TrainConfig base = cfg.train;
    base.model.n_classes = static_cast<int>(classes.size());
    base.model.seed = root.derive("init:" + name).seed();
    base.seed = root.derive("run:" + name).seed();
    const auto train_set = encode_records(kept, base.model, classes);
    const auto val_set = encode_records(held, base.model, classes);
    const auto test_set = encode_records(test, base.model, classes);
    const Params<float> start =
        cfg.init && cfg.init->config.n_classes == base.model.n_classes ? *cfg.init : Params<float>::init(base.model);

    std::vector<std::pair<std::string, FreezePolicy>> settings;
    for (int l : cfg.layers) settings.emplace_back(layer_setting(l), FreezePolicy::only_layer(l));
    settings.emplace_back("Fully-trained", FreezePolicy::all(base.model.n_layers));

    for (const auto& [setting, policy] : settings) {
      TrainConfig tc = base;
      tc.freeze = policy;
      tc.freeze_set = true;
      if (progress) progress(name + ": " + setting);
      const TrainResult model = train(tc, train_set, val_set, &start);
      const EvalResult ev = evaluate(model.params, test_set);
      ExperimentRow row;
      row.setting = setting;
      row.dataset = name;
      row.train_range = row.test_range = range_label(cfg.range.first, cfg.range.second);
      row.accuracy = ev.accuracy;
      row.correct = ev.correct;
      row.total = ev.total;
      std::tie(row.ci_low, row.ci_high) = wilson_interval(ev.correct, ev.total);
      row.trainable_params = model.trainable_params;
      row.total_params = model.total_params;
      row.seed = cfg.seed;
      row.checkpoint_crc32 = params_checksum(model.params);
      table.rows.push_back(row);
      if (progress) progress(name + ": " + setting + " " + detail::percent(row.accuracy));
    }
  }
  return table;
}

}  // namespace attnlab
