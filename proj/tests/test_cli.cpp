#include <gtest/gtest.h>

#include <sstream>

#include "attnlab/cli.hpp"

using namespace attnlab;
namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

struct Outcome {
  int status;
  std::string out;
  std::string err;
};

Outcome run(std::vector<std::string> args) {
  args.insert(args.begin(), "attnlab");
  std::ostringstream out, err;
  const int status = cli::main(args, out, err);
  return {status, out.str(), err.str()};
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    root_ = fs::temp_directory_path() / ("attnlab-cli-" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(root_);
    fs::create_directories(root_);
  }
  void TearDown() override { fs::remove_all(root_); }
  std::string at(const std::string& rel) const { return (root_ / rel).string(); }

  // Small dataset plus a briefly trained tiny checkpoint.
  void make_checkpoint() {
    ASSERT_EQ(run({"gen", "--out", at("data"), "--len-min", "10", "--len-max", "30", "--count", "300", "--n-test", "50"})
                  .status,
              0);
    const auto r = run({"train", "--out", at("model"), "--train", at("data/train.jsonl"), "--val", at("data/val.jsonl"),
                        "--layers", "3", "--heads", "2", "--d-model", "16", "--d-ff", "32", "--max-len", "64",
                        "--steps", "20", "--eval-every", "10", "--batch-size", "16"});
    ASSERT_EQ(r.status, 0) << r.err;
  }

  fs::path root_;
};

std::size_t line_count(const std::string& path) {
  const std::string text = read_file(path);
  return static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n'));
}

}  // namespace

TEST(Config, LayeringAndParsing) {
  const auto file = cli::parse_config_text("# tiny model\nlayers = 2\n--d_model=32   # width\n\nlr = 1e-3\n");
  EXPECT_EQ(file.at("layers"), "2");
  EXPECT_EQ(file.at("d-model"), "32");
  const cli::Config c = cli::resolve_config("train", file, {{"layers", "4"}, {"out", "x"}});
  EXPECT_EQ(c.i("layers"), 4);    // flag beats file
  EXPECT_EQ(c.i("d-model"), 32);  // file beats default
  EXPECT_EQ(c.i("heads"), 8);     // default
  EXPECT_DOUBLE_EQ(c.d("lr"), 1e-3);
  EXPECT_THROW(cli::resolve_config("train", {{"colour", "red"}}, {}), Error);
  EXPECT_THROW(cli::parse_config_text("layers 2\n"), Error);
  EXPECT_EQ(cli::resolve_config("experiment", {}, {{"preset", "freeze-comparison"}, {"out", "x"}}).str("lr"), "2e-5");
  EXPECT_EQ(cli::resolve_config("experiment", {}, {{"out", "x"}}).str("lr"), "3e-4");
  cli::Config bad;
  bad.values["n"] = "12abc";
  EXPECT_THROW(bad.i("n"), Error);
}

TEST(Config, OutputRootFromEnvironment) {
  ::setenv(cli::kOutEnv, "/tmp/somewhere", 1);
  EXPECT_EQ(cli::resolve_config("gen", {}, {}).str("out"), "/tmp/somewhere/gen");
  ::unsetenv(cli::kOutEnv);
  EXPECT_EQ(cli::resolve_config("gen", {}, {}).str("out"), "attnlab-out/gen");
}

TEST_F(CliTest, GenSplitAndDeterminism) {
  const auto a = run({"gen", "--out", at("a"), "--len-min", "10", "--len-max", "30", "--count", "1000", "--n-test", "40"});
  ASSERT_EQ(a.status, 0) << a.err;
  const std::size_t train = line_count(at("a/train.jsonl")), val = line_count(at("a/val.jsonl"));
  EXPECT_EQ(train + val, 1000u);
  EXPECT_EQ(val, 20u);
  EXPECT_EQ(line_count(at("a/test.jsonl")), 40u);
  for (const auto& r : load_records(at("a/train.jsonl"))) {
    ASSERT_GE(r.tokens.size(), 10u);
    ASSERT_LE(r.tokens.size(), 30u);
    ASSERT_EQ(std::to_string(listops::eval(listops::parse(r.tokens))), r.label);
  }
  ASSERT_EQ(run({"gen", "--out", at("b"), "--len-min", "10", "--len-max", "30", "--count", "1000", "--n-test", "40"}).status, 0);
  for (const char* f : {"train.jsonl", "val.jsonl", "test.jsonl"}) {
    EXPECT_EQ(read_file(at(std::string("a/") + f)), read_file(at(std::string("b/") + f))) << f;
  }
  const json m = json::parse(read_file(at("a/manifest.json")));
  EXPECT_EQ(m.at("command"), "gen");
  EXPECT_EQ(m.at("outputs").size(), 3u);
}

TEST_F(CliTest, InfeasibleRangeFailsCleanly) {
  const auto r = run({"gen", "--out", at("bad"), "--len-min", "2", "--len-max", "3"});
  EXPECT_EQ(r.status, cli::exit_code(ErrorCode::SpecInfeasible));
  EXPECT_NE(r.err.find("error:"), std::string::npos);
  EXPECT_FALSE(fs::exists(at("bad/train.jsonl")));
  EXPECT_FALSE(fs::exists(at("bad/manifest.json")));
}

TEST_F(CliTest, TrainErrorsAndFreezeWiring) {
  const auto missing = run({"train", "--out", at("m"), "--train", at("nothing.jsonl")});
  EXPECT_EQ(missing.status, cli::exit_code(ErrorCode::DatasetEmpty));
  write_file(at("empty.jsonl"), "");
  EXPECT_EQ(run({"train", "--out", at("m"), "--train", at("empty.jsonl")}).status, cli::exit_code(ErrorCode::DatasetEmpty));
  EXPECT_EQ(run({"train", "--bogus", "1"}).status != 0, true);

  ASSERT_EQ(run({"gen", "--out", at("d"), "--len-min", "10", "--len-max", "20", "--count", "100", "--n-test", "10"}).status, 0);
  const std::vector<std::string> common = {"--train", at("d/train.jsonl"), "--layers", "3", "--heads", "2",
                                           "--d-model", "16", "--d-ff", "32", "--max-len", "32", "--steps", "5"};
  auto with = [&](std::vector<std::string> extra) {
    extra.insert(extra.begin(), common.begin(), common.end());
    extra.insert(extra.begin(), "train");
    return run(extra);
  };
  ASSERT_EQ(with({"--out", at("full")}).status, 0);
  ASSERT_EQ(with({"--out", at("fl"), "--freeze-layer", "1"}).status, 0);
  ASSERT_EQ(with({"--out", at("fab"), "--freeze-all-but", "1"}).status, 0);
  const json full = json::parse(read_file(at("full/summary.json")));
  const json fl = json::parse(read_file(at("fl/summary.json")));
  const json fab = json::parse(read_file(at("fab/summary.json")));
  const auto total = full.at("total_params").get<std::size_t>();
  EXPECT_EQ(full.at("trainable_params").get<std::size_t>(), total);
  const auto per_layer = total - fl.at("trainable_params").get<std::size_t>();
  EXPECT_GT(per_layer, 0u);
  // Three equal layers: training one freezes the other two plus the token and
  // position embeddings (vocabulary 25 and 32 positions, width 16).
  EXPECT_EQ(total - fab.at("trainable_params").get<std::size_t>(), 2 * per_layer + (25 + 32) * 16);
  EXPECT_EQ(with({"--out", at("x"), "--freeze-layer", "3"}).status, cli::exit_code(ErrorCode::InvalidLayerIndex));
  EXPECT_TRUE(fs::exists(at("full/checkpoint.bin")));
  EXPECT_TRUE(fs::exists(at("full/metrics.jsonl")));
}

TEST_F(CliTest, EvaluateWritesConfusion) {
  make_checkpoint();
  const auto r = run({"evaluate", "--out", at("ev"), "--checkpoint", at("model/checkpoint.bin"), "--data", at("data/test.jsonl")});
  ASSERT_EQ(r.status, 0) << r.err;
  const json j = json::parse(read_file(at("ev/eval.json")));
  EXPECT_EQ(j.at("total"), 50);
  EXPECT_EQ(j.at("confusion").size(), 10u);
}

TEST_F(CliTest, AnalyzeEntropyTableShape) {
  make_checkpoint();
  const auto r = run({"analyze", "--out", at("an"), "--checkpoint", at("model/checkpoint.bin"), "--sample",
                      "[MAX 2 [MIN 4 7 ] 0 ]", "--probe", "entropy"});
  ASSERT_EQ(r.status, 0) << r.err;
  const std::string csv = read_file(at("an/sample-0/entropy-raw.csv"));
  std::istringstream in(csv);
  std::vector<std::string> lines;
  for (std::string l; std::getline(in, l);) lines.push_back(l);
  ASSERT_EQ(lines.size(), 1u + 3u);  // header plus one row per layer
  for (std::size_t i = 1; i < lines.size(); ++i) {
    EXPECT_EQ(std::count(lines[i].begin(), lines[i].end(), ','), 1 + 2) << lines[i];  // layer, heads..., mean
  }
  EXPECT_TRUE(fs::exists(at("an/sample-0/entropy-hidden.csv")));
  EXPECT_FALSE(fs::exists(at("an/sample-0/metrics.json")));
}

TEST_F(CliTest, AnalyzeLastLayerHeatmapImage) {
  make_checkpoint();
  const auto r = run({"analyze", "--out", at("hm"), "--checkpoint", at("model/checkpoint.bin"), "--sample",
                      "[MAX 2 [MIN 4 7 ] 0 ]", "--probe", "heatmap", "--layer", "last", "--format", "image"});
  ASSERT_EQ(r.status, 0) << r.err;
  std::vector<std::string> files;
  for (const auto& e : fs::directory_iterator(at("hm/sample-0"))) files.push_back(e.path().filename().string());
  std::sort(files.begin(), files.end());
  EXPECT_EQ(files, (std::vector<std::string>{"heatmap-layer2-mean.csv", "heatmap-layer2-mean.png", "trace.bin"}));
  const std::string png = read_file(at("hm/sample-0/heatmap-layer2-mean.png"));
  EXPECT_EQ(png.substr(1, 3), "PNG");
  const auto h = analysis::parse_heatmap_csv(read_file(at("hm/sample-0/heatmap-layer2-mean.csv")));
  EXPECT_EQ(h.values.rows(), 10);  // specials hidden
}

TEST_F(CliTest, AnalyzeFullSuiteOnNestedSequence) {
  make_checkpoint();
  const std::string five = "[LAST 2 3 4 5 [MAX 3 9 1 1 7] [MIN 9 5 0 8 2] [MAX 1 5 8 3 5] [MIN 1 0 2 3 5]]";
  const auto r = run({"analyze", "--out", at("all"), "--checkpoint", at("model/checkpoint.bin"), "--sample", five,
                      "--head", "1"});
  ASSERT_EQ(r.status, 0) << r.err;
  const std::string dir = at("all/sample-0/");
  for (int l = 0; l < 3; ++l) {
    const std::string L = std::to_string(l);
    EXPECT_TRUE(fs::exists(dir + "heatmap-layer" + L + "-head1.csv"));
    EXPECT_TRUE(fs::exists(dir + "similarity-layer" + L + ".csv"));
    EXPECT_TRUE(fs::exists(dir + "t2t-layer" + L + "-head1.json"));
  }
  const json m = json::parse(read_file(dir + "metrics.json"));
  EXPECT_EQ(m.at("answer"), 0);
  EXPECT_EQ(m.at("aggregation"), "head1");
  ASSERT_EQ(m.at("layers").size(), 3u);
  for (const auto& row : m.at("layers")) {
    EXPECT_GE(row.at("block_score").get<double>(), 0.0);
    EXPECT_LE(row.at("block_score").get<double>(), 1.0);
    EXPECT_TRUE(row.at("answer_attention_rank").is_number());
  }
  const json t2t = json::parse(read_file(dir + "t2t-layer0-head1.json"));
  EXPECT_EQ(t2t.at("rankings").size(), t2t.at("tokens").size());
  EXPECT_EQ(t2t.at("rankings")[0].at("attends_to").size(), 5u);
  EXPECT_EQ(run({"analyze", "--out", at("bad"), "--checkpoint", at("model/checkpoint.bin"), "--sample", five, "--layer",
                 "7"}).status,
            cli::exit_code(ErrorCode::InvalidLayerIndex));
}

TEST_F(CliTest, ReplayReproducesArtifacts) {
  make_checkpoint();
  ASSERT_EQ(run({"analyze", "--out", at("an"), "--checkpoint", at("model/checkpoint.bin"), "--data", at("data/test.jsonl"),
                 "--count", "2"})
                .status,
            0);
  for (const char* dir : {"data", "model", "an"}) {
    const auto r = run({"replay", at(std::string(dir) + "/manifest.json"), "--out", at(std::string("re-") + dir)});
    ASSERT_EQ(r.status, 0) << dir << ": " << r.err;
    const json m = json::parse(read_file(at(std::string(dir) + "/manifest.json")));
    for (const auto& o : m.at("outputs")) {
      const std::string rel = o.at("path").get<std::string>();
      EXPECT_EQ(read_file(at(std::string(dir) + "/" + rel)), read_file(at(std::string("re-") + dir + "/" + rel))) << rel;
    }
  }
  // A changed input is caught before anything runs.
  write_file(at("data/train.jsonl"), read_file(at("data/train.jsonl")) + "\n");
  EXPECT_EQ(run({"replay", at("model/manifest.json"), "--out", at("re2")}).status,
            cli::exit_code(ErrorCode::ChecksumMismatch));
}

TEST_F(CliTest, ExperimentPresets) {
  const std::vector<std::string> tiny = {"--layers", "2", "--heads", "2", "--d-model", "16", "--d-ff", "32",
                                         "--max-len", "130", "--steps", "10", "--eval-every", "5",
                                         "--n-train", "100", "--n-test", "30"};
  auto experiment = [&](const std::string& out, std::vector<std::string> extra) {
    std::vector<std::string> args = {"experiment", "--out", at(out)};
    args.insert(args.end(), tiny.begin(), tiny.end());
    args.insert(args.end(), extra.begin(), extra.end());
    return run(args);
  };
  ASSERT_EQ(experiment("lg", {}).status, 0);
  const json lg = json::parse(read_file(at("lg/table.json")));
  ASSERT_EQ(lg.at("rows").size(), 4u);
  EXPECT_TRUE(fs::exists(at("lg/rows/row-3.json")));
  EXPECT_NE(read_file(at("lg/table.txt")).find("Trained on sequence length of"), std::string::npos);
  ASSERT_EQ(experiment("lg2", {}).status, 0);
  EXPECT_EQ(read_file(at("lg/table.json")), read_file(at("lg2/table.json")));
  EXPECT_EQ(read_file(at("lg/table.txt")), read_file(at("lg2/table.txt")));

  ASSERT_EQ(experiment("fc", {"--preset", "freeze-comparison", "--dataset", "listops-mod,listops"}).status, 0);
  const json fc = json::parse(read_file(at("fc/table.json")));
  ASSERT_EQ(fc.at("rows").size(), 6u);  // (2 single layers + fully trained) x 2 datasets
  for (const auto& row : fc.at("rows")) EXPECT_GT(row.at("trainable_params").get<std::size_t>(), 0u);
  const std::string text = read_file(at("fc/table.txt"));
  EXPECT_NE(text.find("Fine-tuned-layer-1"), std::string::npos);
  EXPECT_NE(text.find("Trainable params"), std::string::npos);
  const json manifest = json::parse(read_file(at("fc/rows/row-0.json")));
  EXPECT_EQ(manifest.at("train_config").at("lr"), 2e-5);
}
