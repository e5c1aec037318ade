// Acceptance run: one PASS/FAIL line per criterion, with the measured value
// and the pinned tolerance. Exit status is nonzero when any criterion fails.
//
//   acceptance [--work DIR] [--reuse DIR]
//
// --work keeps trained checkpoints in DIR (default: a temp directory).
// --reuse loads checkpoints from an earlier --work DIR instead of training;
// the wall-clock limits are then unmeasured and those criteria report FAIL.

#include <Eigen/Eigenvalues>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <sstream>

#include "attnlab/analysis.hpp"
#include "attnlab/cli.hpp"
#include "attnlab/serialize.hpp"
#include "attnlab/trainer.hpp"
#include "oracles.hpp"

using namespace attnlab;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

// Pinned tolerances and budgets.
constexpr std::size_t kOracleSamples = 10000;
constexpr double kOracleSeconds = 10.0;
constexpr double kBoardSeconds = 5.0;
constexpr double kEntropyTol = 1e-9;
constexpr double kRenormTol = 1e-9;
constexpr double kSymmetryTol = 1e-6;
constexpr double kPsdRelTol = 1e-6;
constexpr std::size_t kSimilarityTraces = 100;
constexpr double kGradTol = 1e-4;
constexpr double kGradSeconds = 60.0;
constexpr int kFreezeSteps = 200;
constexpr double kListOpsTarget = 0.75;
constexpr double kListOpsSeconds = 3600.0;
constexpr double kBoardTarget = 0.99;
constexpr double kBoardTrainSeconds = 600.0;
constexpr std::size_t kTrainCount = 20000;
constexpr std::size_t kTestCount = 2000;
constexpr std::size_t kValCount = 500;
constexpr double kChance = 0.1;
constexpr double kSigmas = 3.0;
constexpr std::size_t kOperatorSequences = 100;
constexpr double kOperatorFraction = 0.60;
constexpr std::size_t kRankSequences = 200;
constexpr double kRankLimit = 3.0;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::map<int, Verdict> verdicts;

void record(int id, bool pass, const std::string& detail) {
  verdicts[id] = {pass, detail};
  std::cout << "  [" << id << "] " << (pass ? "pass" : "fail") << ": " << detail << std::endl;
}

// ---------------------------------------------------------------------------
// 1-4: oracles and fixtures

listops::GenSpec wide_spec(std::uint64_t seed) {
  listops::GenSpec s;
  s.len_min = 5;
  s.len_max = 200;
  s.seed = seed;
  return s;
}

void oracle_soundness() {
  const auto t0 = Clock::now();
  std::size_t agree = 0;
  for (const auto& s : listops::generate_many(wide_spec(101), kOracleSamples)) {
    agree += listops::eval(listops::parse(s.tokens)) == oracle::stack_eval(s.tokens);
  }
  const double t = seconds_since(t0);
  record(1, agree == kOracleSamples && t < kOracleSeconds,
         std::to_string(agree) + "/" + std::to_string(kOracleSamples) + " agree in " + fmt("%.2f", t) + " s (limit " +
             fmt("%.0f", kOracleSeconds) + " s)");
}

void board_oracle() {
  const auto t0 = Clock::now();
  std::size_t agree = 0, boards = 0;
  for (int code = 0; code < 19683; ++code, ++boards) {
    std::string cells;
    tictactoe::Board b;
    for (int i = 0, v = code; i < 9; ++i, v /= 3) {
      cells += "-xo"[v % 3];
      b.cells[static_cast<std::size_t>(i)] = v % 3 == 0 ? tictactoe::Cell::Empty : v % 3 == 1 ? tictactoe::Cell::X : tictactoe::Cell::O;
    }
    const char want = oracle::brute_winner(cells);
    char got;
    try {
      const auto w = tictactoe::winner(b);
      got = w == tictactoe::Player::X ? 'x' : w == tictactoe::Player::O ? 'o' : '.';
    } catch (const Error& e) {
      got = e.code() == ErrorCode::BothPlayersWin ? '!' : '?';
    }
    agree += got == want;
  }
  const double t = seconds_since(t0);
  record(2, agree == boards && t < kBoardSeconds,
         std::to_string(agree) + "/" + std::to_string(boards) + " boards agree in " + fmt("%.3f", t) + " s (limit " +
             fmt("%.0f", kBoardSeconds) + " s)");
}

void simplification() {
  std::size_t invariant = 0;
  for (const auto& s : listops::generate_many(wide_spec(202), kOracleSamples)) {
    const auto e = listops::parse(s.tokens);
    invariant += e.is_leaf() || listops::eval(listops::simplify_once(e)) == listops::eval(e);
  }
  auto simplified = [](const std::string& text) {
    return listops::to_text(listops::render(listops::simplify_once(listops::parse(listops::tokenize(text)))));
  };
  const bool first = simplified("[FIRST 2 3 [MAX 1 5 6 1 2] 0 [MIN 1 0 2]]") == "[FIRST 2 3 6 0 0 ]";
  const bool last = simplified("[LAST 2 3 [MIN 1 5 6 1 2] 0 [MAX 1 8 2]]") == "[LAST 2 3 1 0 8 ]";
  record(3, invariant == kOracleSamples && first && last,
         std::to_string(invariant) + "/" + std::to_string(kOracleSamples) + " invariant; FIRST example " +
             (first ? "exact" : "differs") + "; LAST example " + (last ? "exact" : "differs"));
}

void fixtures() {
  double worst_uniform = 0;
  for (Index n : {2, 5, 13, 64, 130}) {
    const analysis::Matrix u = analysis::Matrix::Constant(n, n, 1.0 / static_cast<double>(n));
    worst_uniform = std::max(worst_uniform, std::abs(analysis::entropy(u) - std::log(static_cast<double>(n))));
  }
  const double one_hot = analysis::entropy(analysis::Matrix::Identity(7, 7));
  analysis::Matrix a(3, 3);
  for (Index r = 0; r < 3; ++r) a.row(r) << 0.5, 0.3, 0.2;
  const analysis::Matrix h = analysis::hide_and_renormalize(a, {0});
  const double renorm = std::max(std::abs(h(0, 0) - 0.6), std::abs(h(0, 1) - 0.4));
  record(4, worst_uniform <= kEntropyTol && one_hot == 0.0 && renorm <= kRenormTol,
         "uniform |H - ln n| " + fmt("%.1e", worst_uniform) + " (tol 1e-9); one-hot H " + fmt("%g", one_hot) +
             " (exact 0); hide error " + fmt("%.1e", renorm) + " (tol 1e-9)");
}

// ---------------------------------------------------------------------------
// 5-7: similarity, gradients, freezing

void similarity_check(const Params<float>& model, const std::vector<Record>& seqs) {
  double worst_asym = 0, worst_psd = 0;  // psd: most negative eigenvalue over ||S||
  std::size_t traces = 0;
  for (std::size_t i = 0; i < seqs.size() && traces < kSimilarityTraces; ++i, ++traces) {
    const auto trace = *forward(model, seqs[i].tokens, true).trace;
    for (std::size_t l = 0; l < trace.hidden.size(); ++l) {
      const auto s = analysis::similarity(analysis::to_double(trace.hidden[l]), static_cast<int>(l)).values;
      worst_asym = std::max(worst_asym, (s - s.transpose()).cwiseAbs().maxCoeff());
      const Eigen::SelfAdjointEigenSolver<analysis::Matrix> eig(s, Eigen::EigenvaluesOnly);
      const double norm = eig.eigenvalues().cwiseAbs().maxCoeff();
      worst_psd = std::min(worst_psd, eig.eigenvalues().minCoeff() / norm);
    }
  }
  const analysis::Matrix basis = analysis::Matrix::Identity(6, 6);
  const bool identity = analysis::similarity(basis).values == basis;
  record(5, traces == kSimilarityTraces && worst_asym <= kSymmetryTol && worst_psd >= -kPsdRelTol && identity,
         std::to_string(traces) + " traces, every layer: max |S - S^T| " + fmt("%.1e", worst_asym) +
             " (tol 1e-6); min eigenvalue / ||S|| " + fmt("%.1e", worst_psd) + " (tol -1e-6); orthonormal fixture " +
             (identity ? "exact identity" : "not identity"));
}

void gradient_check() {
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 8;
  c.n_heads = 2;
  c.d_ff = 16;
  c.max_len = 40;
  c.dropout = 0;
  c.seed = 3;
  const auto t0 = Clock::now();
  const auto r = grad_check(c, 1e-3, 400);
  const double t = seconds_since(t0);
  record(6, r.max_rel_error < kGradTol && t < kGradSeconds,
         "max relative error " + fmt("%.2e", r.max_rel_error) + " over " + std::to_string(r.checked) +
             " parameters (tol 1e-4) in " + fmt("%.2f", t) + " s (limit 60 s)");
}

void freeze_contract() {
  TrainConfig tc;
  tc.model.n_layers = 4;
  tc.model.n_heads = 4;
  tc.model.d_model = 32;
  tc.model.d_ff = 64;
  tc.model.max_len = 40;
  tc.model.seed = 8;
  tc.max_steps = kFreezeSteps;
  tc.eval_every = kFreezeSteps;
  tc.patience = 0;
  tc.lr = 1e-3;
  tc.freeze = FreezePolicy::only_layer(2);
  tc.freeze_set = true;
  const auto classes = class_labels(DatasetKind::ListOpsModified);
  const auto data = encode_records(generate_records(DatasetKind::ListOpsModified, 10, 30, 1000, 31), tc.model, classes);
  const Params<float> start = Params<float>::init(tc.model);
  const TrainResult res = train(tc, data, EncodedSet{}, &start);
  const TrainMask mask = apply_freeze(start.layout, tc.model.n_layers, tc.freeze);

  std::size_t frozen_changed = 0, trainable_sum = 0, trainable_moved = 0;
  for (std::size_t bi = 0; bi < start.layout.blocks().size(); ++bi) {
    const BlockInfo& b = start.layout.blocks()[bi];
    bool same = true;
    for (std::size_t i = b.offset; i < b.offset + b.size(); ++i) {
      same &= std::bit_cast<std::uint32_t>(res.params.values[i]) == std::bit_cast<std::uint32_t>(start.values[i]);
    }
    const bool trainable = b.role == BlockRole::Norm || b.role == BlockRole::Head || b.layer == 2;
    if (trainable != mask.trainable(static_cast<int>(bi))) ++frozen_changed;
    if (trainable) {
      trainable_sum += b.size();
      trainable_moved += !same;
    } else if (!same) {
      ++frozen_changed;
    }
  }
  record(7, frozen_changed == 0 && trainable_sum == res.trainable_params && trainable_moved > 0,
         "after " + std::to_string(res.steps) + " steps: " + std::to_string(frozen_changed) +
             " frozen blocks changed (need 0); trainable count " + std::to_string(trainable_sum) + " vs reported " +
             std::to_string(res.trainable_params) + " of " + std::to_string(res.total_params));
}

// ---------------------------------------------------------------------------
// 8-10: learning, length generalisation, layer-role probes

struct Trained {
  Params<float> params;
  double seconds = std::nan("");
};

Trained train_or_load(const fs::path& work, const std::optional<fs::path>& reuse, const std::string& name,
                      const TrainConfig& tc, const std::vector<Record>& train_records, const std::vector<Record>& val,
                      const std::vector<std::string>& classes, Clock::time_point t0) {
  if (reuse) return {load_checkpoint(*reuse / (name + ".bin")), std::nan("")};
  std::cout << "  training " << name << " (" << tc.model.n_layers << " layers, width " << tc.model.d_model << ", "
            << tc.max_steps << " steps)" << std::endl;
  const auto res = train(tc, encode_records(train_records, tc.model, classes), encode_records(val, tc.model, classes),
                         nullptr, [&](const MetricsRow& r) {
                           std::cout << "    step " << r.step << " loss " << fmt("%.4f", r.loss) << " val "
                                     << fmt("%.4f", r.val_accuracy) << " at " << fmt("%.0f", seconds_since(t0)) << " s"
                                     << std::endl;
                         });
  const double t = seconds_since(t0);
  save_checkpoint(work / (name + ".bin"), res.params);
  return {res.params, t};
}

TrainConfig listops_config() {
  TrainConfig tc;
  tc.model.n_layers = 6;
  tc.model.n_heads = 8;
  tc.model.d_model = 128;
  tc.model.d_ff = 512;
  tc.model.max_len = 130;
  tc.model.dropout = 0.1;
  tc.model.seed = 21;
  tc.lr = 5e-4;
  tc.batch_size = 32;
  tc.max_steps = 8000;
  tc.warmup_steps = 300;
  tc.eval_every = 500;
  tc.patience = 0;
  tc.seed = 22;
  return tc;
}

TrainConfig board_config() {
  TrainConfig tc;
  tc.model.n_layers = 2;
  tc.model.n_heads = 4;
  tc.model.d_model = 64;
  tc.model.d_ff = 256;
  tc.model.max_len = 16;
  tc.model.n_classes = 2;
  tc.model.dropout = 0.1;
  tc.model.seed = 41;
  tc.lr = 1e-3;
  tc.batch_size = 32;
  tc.max_steps = 3000;
  tc.warmup_steps = 100;
  tc.eval_every = 250;
  tc.patience = 0;
  tc.seed = 42;
  return tc;
}

int argmax_first(const std::vector<double>& v) {
  return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

void layer_probes(const Params<float>& model, const std::vector<Record>& val) {
  const int n = model.config.n_layers;
  const auto middle = analysis::depth_third(n, 1);
  const auto late = analysis::depth_third(n, 2);

  // (a) where operator attention peaks
  std::size_t in_middle = 0;
  std::vector<int> peak_hist(static_cast<std::size_t>(n), 0);
  // (b) answer rank per late layer
  std::vector<std::vector<double>> ranks(static_cast<std::size_t>(n));
  const std::size_t needed = std::max(kOperatorSequences, kRankSequences);
  for (std::size_t i = 0; i < needed && i < val.size(); ++i) {
    const auto ra = analysis::renormalize_trace(*forward(model, val[i].tokens, true).trace);
    const auto m = analysis::listops_layer_metrics(ra);
    if (i < kOperatorSequences) {
      std::vector<double> op;
      for (const auto& x : m) op.push_back(x.operator_attention);
      const int peak = argmax_first(op);
      ++peak_hist[static_cast<std::size_t>(peak)];
      in_middle += std::find(middle.begin(), middle.end(), peak) != middle.end();
    }
    if (i < kRankSequences) {
      for (int l = 0; l < n; ++l) ranks[static_cast<std::size_t>(l)].push_back(m[static_cast<std::size_t>(l)].answer_rank);
    }
  }
  const double frac = static_cast<double>(in_middle) / static_cast<double>(kOperatorSequences);
  std::string hist;
  for (int l = 0; l < n; ++l) hist += (l ? "," : "") + std::to_string(peak_hist[static_cast<std::size_t>(l)]);
  const bool a_pass = frac >= kOperatorFraction;

  int best = late.front();
  std::string medians;
  for (int l = 0; l < n; ++l) {
    const double med = median(ranks[static_cast<std::size_t>(l)]);
    medians += (l ? "," : "") + fmt("%g", med);
    if (std::find(late.begin(), late.end(), l) != late.end() && med < median(ranks[static_cast<std::size_t>(best)])) best = l;
  }
  const double best_med = median(ranks[static_cast<std::size_t>(best)]);
  const bool b_pass = ranks[0].size() == kRankSequences && best_med <= kRankLimit;

  // (c) entropy minimum strictly inside the stack on each analogue sequence
  const std::vector<std::string> analogues = {
      "[MAX 2 3 [MIN 1 5 6 1 2] 1 [FIRST 1 4 2] 8]",
      "[LAST 2 3 4 5 [MAX 3 9 1 1 7] [MIN 9 5 0 8 2] [MAX 1 5 8 3 5] [MIN 1 0 2 3 5]]",
      "[FIRST 2 3 [MAX 1 5 6 1 2] 0 [MIN 1 0 2]]",
      "[LAST 2 3 [MIN 1 5 6 1 2] 0 [MAX 1 8 2]]",
  };
  std::size_t interior = 0;
  std::string argmins;
  for (const auto& text : analogues) {
    const auto trace = *forward(model, listops::tokenize(text), true).trace;
    const int arg = analysis::layer_entropy_summary(trace).argmin_layer();
    argmins += (argmins.empty() ? "" : ",") + std::to_string(arg);
    interior += arg > 0 && arg < n - 1;
  }
  const bool c_pass = interior == analogues.size();

  record(10, a_pass && b_pass && c_pass,
         std::string("(a) ") + (a_pass ? "PASS" : "FAIL") + " operator-attention peak in middle third {" +
             std::to_string(middle.front()) + ".." + std::to_string(middle.back()) + "} on " + fmt("%.2f", frac) +
             " of " + std::to_string(kOperatorSequences) + " (need >= 0.60; peaks per layer " + hist + "); (b) " +
             (b_pass ? "PASS" : "FAIL") + " best late layer " + std::to_string(best) + " median answer rank " +
             fmt("%g", best_med) + " over " + std::to_string(ranks[0].size()) + " (need <= 3; medians per layer " +
             medians + "); (c) " + (c_pass ? "PASS" : "FAIL") + " entropy argmin interior on " +
             std::to_string(interior) + "/" + std::to_string(analogues.size()) + " analogue sequences (argmin layers " +
             argmins + " of 0.." + std::to_string(n - 1) + ")");
}

// ---------------------------------------------------------------------------
// 11: replay determinism

void replay_determinism(const fs::path& work) {
  const fs::path root = work / "replay";
  fs::remove_all(root);
  auto run = [&](std::vector<std::string> args) {
    args.insert(args.begin(), "attnlab");
    std::ostringstream out, err;
    const int status = cli::main(args, out, err);
    if (status != 0) std::cout << "    " << err.str();
    return status;
  };
  auto p = [&](const std::string& rel) { return (root / rel).string(); };
  bool ok = run({"gen", "--out", p("gen"), "--dataset", "listops-mod", "--len-min", "10", "--len-max", "30", "--count",
                 "1000", "--n-test", "100"}) == 0;
  ok = ok && run({"train", "--out", p("train"), "--train", p("gen/train.jsonl"), "--val", p("gen/val.jsonl"), "--layers",
                  "2", "--heads", "4", "--d-model", "32", "--d-ff", "64", "--max-len", "64", "--steps", "150",
                  "--eval-every", "50"}) == 0;
  ok = ok && run({"analyze", "--out", p("analyze"), "--checkpoint", p("train/checkpoint.bin"), "--data",
                  p("gen/test.jsonl"), "--count", "2", "--format", "image"}) == 0;
  std::size_t files = 0, identical = 0;
  std::string which;
  for (const std::string cmd : {"gen", "train", "analyze"}) {
    if (!ok) break;
    const bool replayed = run({"replay", p(cmd + "/manifest.json"), "--out", p(cmd + "-replay")}) == 0;
    const auto m = nlohmann::ordered_json::parse(read_file(p(cmd + "/manifest.json")));
    std::size_t same = 0;
    for (const auto& o : m.at("outputs")) {
      const std::string rel = o.at("path").get<std::string>();
      ++files;
      if (replayed && read_file(root / cmd / rel) == read_file(root / (cmd + "-replay") / rel)) ++same;
    }
    identical += same;
    which += (which.empty() ? "" : "; ") + cmd + " " + std::to_string(same) + "/" + std::to_string(m.at("outputs").size());
  }
  record(11, ok && files > 0 && identical == files,
         "byte-identical artifacts after replay: " + (ok ? which : std::string("commands failed")));
}

}  // namespace

int main(int argc, char** argv) {
  std::optional<fs::path> reuse;
  fs::path work = fs::temp_directory_path() / "attnlab-acceptance";
  for (int i = 1; i + 1 < argc; i += 2) {
    const std::string flag = argv[i];
    if (flag == "--reuse") {
      reuse = argv[i + 1];
    } else if (flag == "--work") {
      work = argv[i + 1];
    } else {
      std::cerr << "usage: acceptance [--work DIR] [--reuse DIR]\n";
      return 2;
    }
  }
  fs::create_directories(work);
  std::cout << "acceptance run, work directory " << work << std::endl;

  try {
    oracle_soundness();
    board_oracle();
    simplification();
    fixtures();
    gradient_check();
    freeze_contract();

    // Modified ListOps, lengths 10-30.
    const auto classes = class_labels(DatasetKind::ListOpsModified);
    const TrainConfig tc = listops_config();
    const auto t0 = Clock::now();
    const auto train_records = generate_records(DatasetKind::ListOpsModified, 10, 30, kTrainCount, 1001);
    const auto val = generate_records(DatasetKind::ListOpsModified, 10, 30, kValCount, 1002);
    const auto test = generate_records(DatasetKind::ListOpsModified, 10, 30, kTestCount, 1003);
    const auto longer = generate_records(DatasetKind::ListOpsModified, 30, 60, kTestCount, 1004);
    const Trained lo = train_or_load(work, reuse, "listops", tc, train_records, val, classes, t0);
    const EvalResult in_range = evaluate(lo.params, encode_records(test, lo.params.config, classes));

    // Tic-Tac-Toe.
    const auto board_classes = class_labels(DatasetKind::TicTacToe);
    const TrainConfig bc = board_config();
    const auto t1 = Clock::now();
    const auto board_train = generate_records(DatasetKind::TicTacToe, 0, 0, kTrainCount, 2001);
    const auto board_val = generate_records(DatasetKind::TicTacToe, 0, 0, kValCount, 2002);
    const auto board_test = generate_records(DatasetKind::TicTacToe, 0, 0, kTestCount, 2003);
    const Trained ttt = train_or_load(work, reuse, "tictactoe", bc, board_train, board_val, board_classes, t1);
    const EvalResult board = evaluate(ttt.params, encode_records(board_test, ttt.params.config, board_classes));

    const bool lo_timed = std::isfinite(lo.seconds) && lo.seconds < kListOpsSeconds;
    const bool ttt_timed = std::isfinite(ttt.seconds) && ttt.seconds < kBoardTrainSeconds;
    record(8, in_range.accuracy >= kListOpsTarget && lo_timed && board.accuracy >= kBoardTarget && ttt_timed,
           "modified ListOps 10-30 test accuracy " + fmt("%.4f", in_range.accuracy) + " (need >= 0.75) in " +
               (std::isfinite(lo.seconds) ? fmt("%.0f", lo.seconds) + " s" : std::string("unmeasured time")) +
               " (limit 3600 s); Tic-Tac-Toe test accuracy " + fmt("%.4f", board.accuracy) + " (need >= 0.99) in " +
               (std::isfinite(ttt.seconds) ? fmt("%.0f", ttt.seconds) + " s" : std::string("unmeasured time")) +
               " (limit 600 s)");

    const EvalResult far = evaluate(lo.params, encode_records(longer, lo.params.config, classes));
    const double floor = kChance + kSigmas * std::sqrt(kChance * (1 - kChance) / static_cast<double>(kTestCount));
    record(9, far.accuracy > floor && far.accuracy < in_range.accuracy,
           "lengths 30-60 accuracy " + fmt("%.4f", far.accuracy) + " vs chance + 3 sigma " + fmt("%.4f", floor) +
               " and in-range " + fmt("%.4f", in_range.accuracy));

    similarity_check(lo.params, test);
    layer_probes(lo.params, val);
    replay_determinism(work);
  } catch (const std::exception& e) {
    std::cout << "aborted: " << e.what() << std::endl;
  }

  std::cout << "\n";
  bool all = true;
  for (int id = 1; id <= 11; ++id) {
    const auto it = verdicts.find(id);
    const bool pass = it != verdicts.end() && it->second.pass;
    all &= pass;
    std::cout << (pass ? "PASS" : "FAIL") << " criterion " << id << ": "
              << (it != verdicts.end() ? it->second.detail : std::string("not reached")) << "\n";
  }
  std::cout << (all ? "all criteria passed" : "some criteria failed") << std::endl;
  return all ? 0 : 1;
}
