#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdio>
#include <fstream>
#include <regex>
#include <sstream>

#include "advseg/io.hpp"

using namespace advseg;

namespace {

struct Result {
  int code = -1;
  std::string out;
};

fs::path work_root() {
  static const fs::path root = [] {
    fs::path p = fs::temp_directory_path() / ("advseg_cli_" + std::to_string(::getpid()));
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return root;
}

std::string w(const std::string& name) { return (work_root() / name).string(); }

Result run(const std::string& args) {
  const std::string cmd = std::string(ADVSEG_CLI_PATH) + " " + args + " 2>>" + w("stderr.log");
  Result r;
  FILE* p = ::popen(cmd.c_str(), "r");
  if (!p) return r;
  char buf[4096];
  std::size_t n;
  while ((n = std::fread(buf, 1, sizeof buf, p)) > 0) r.out.append(buf, n);
  const int status = ::pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

double number_after(const std::string& text, const std::string& key) {
  std::smatch m;
  if (!std::regex_search(text, m, std::regex(key + " ([-0-9.eE+]+)"))) return std::nan("");
  return std::stod(m[1]);
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::ifstream f(p);
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(f, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    rows.push_back(cells);
  }
  return rows;
}

// One smoke dataset and one trained fcn shared by the suite.
class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    if (trained_) return;
    ASSERT_EQ(run("generate --count 8 --seed 5 --out " + w("smoke")).code, 0);
    const Result r = run("train --variant fcn --seed 5 --epochs 100 --data " + w("smoke") + " --out " + w("fcn"));
    ASSERT_EQ(r.code, 0) << r.out;
    trained_ = true;
  }
  static void TearDownTestSuite() { fs::remove_all(work_root()); }
  static inline bool trained_ = false;
};

}  // namespace

TEST_F(Cli, GenerateIsDeterministic) {
  ASSERT_EQ(run("generate --count 8 --seed 5 --out " + w("smoke2")).code, 0);
  EXPECT_EQ(read_file(w("smoke") + "/dataset.json"), read_file(w("smoke2") + "/dataset.json"));
  const Dataset d = read_dataset(w("smoke"));
  EXPECT_EQ(d.train.size() + d.test.size(), 8u);
}

TEST_F(Cli, UsageErrors) {
  EXPECT_EQ(run("generate --count 0 --out " + w("zero")).code, 1);
  EXPECT_FALSE(fs::exists(w("zero")));
  EXPECT_EQ(run("generate --count 8 --out " + w("smoke")).code, 1);
  EXPECT_EQ(run("generate --count 8 --seed 5 --force --out " + w("smoke")).code, 0);
  EXPECT_EQ(run("").code, 1);
  EXPECT_EQ(run("bogus").code, 1);
  EXPECT_EQ(run("train --variant cnn --data " + w("smoke") + " --out " + w("x")).code, 1);
  EXPECT_EQ(run("train --epsilon -1 --data " + w("smoke") + " --out " + w("x")).code, 1);
  EXPECT_EQ(run("train --lr 0 --data " + w("smoke") + " --out " + w("x")).code, 1);
  EXPECT_EQ(run("train --variant fcn --data " + w("smoke") + " --out " + w("fcn")).code, 1);
  EXPECT_EQ(run("eval --checkpoint " + w("fcn/checkpoint.afcr") + " --data " + w("smoke") + " --split val --out " + w("x")).code, 1);
}

TEST_F(Cli, ConfigFile) {
  write_file(w("bad.json"), "{\"train\": {\"lr\": 1}}");
  EXPECT_EQ(run("train --config " + w("bad.json") + " --data " + w("smoke") + " --out " + w("cfg")).code, 1);
  write_file(w("good.json"), "{\"seed\": 5, \"model\": {\"width_divisor\": 32}, \"train\": {\"epochs\": 1, \"augment\": false}}");
  ASSERT_EQ(run("train --config " + w("good.json") + " --lambda 0.25 --data " + w("smoke") + " --out " + w("cfg")).code, 0);
  const RunConfig c = parse_config(read_file(w("cfg/config.json")));
  EXPECT_EQ(c.model.width_divisor, 32);
  EXPECT_EQ(c.train.lambda, 0.25);
  EXPECT_FALSE(c.augment);
}

TEST_F(Cli, DataErrors) {
  EXPECT_EQ(run("train --data " + w("nowhere") + " --out " + w("d1")).code, 2);
  write_file(w("not_pgm.pgm"), "hello");
  EXPECT_EQ(run("infer --checkpoint " + w("fcn/checkpoint.afcr") + " --image " + w("not_pgm.pgm") + " --out " + w("d2")).code, 2);
  write_file(w("small.pgm"), encode_pgm(GrayImage{2, 2, {0, 1, 2, 3}}));
  EXPECT_EQ(run("infer --checkpoint " + w("fcn/checkpoint.afcr") + " --image " + w("small.pgm") + " --out " + w("d3")).code, 2);
  EXPECT_EQ(run("infer --checkpoint " + w("not_pgm.pgm") + " --image " + w("smoke/sample_0_img.pgm") + " --out " + w("d4")).code, 2);
}

TEST_F(Cli, SmokeTrainingFitsTheTrainingSet) {
  const auto rows = read_csv(w("fcn/metrics.csv"));
  ASSERT_GT(rows.size(), 1u);
  EXPECT_EQ(rows[0], (std::vector<std::string>{"variant", "split", "epoch", "dice", "trimap_acc_w1", "trimap_acc_w2",
                                               "trimap_acc_w3", "trimap_acc_w4", "trimap_acc_w5"}));
  double last_train = 0.0;
  for (const auto& r : rows)
    if (r[1] == "train" && r[2] == "100") last_train = std::stod(r[3]);
  EXPECT_GT(last_train, 0.95);
  EXPECT_TRUE(fs::exists(w("fcn/config.json")));
}

TEST_F(Cli, InferReproducesTrainingMask) {
  const std::string args = "infer --checkpoint " + w("fcn/checkpoint.afcr") + " --image " + w("smoke/sample_0_img.pgm") +
                           " --mask " + w("smoke/sample_0_mask.pgm") + " --out ";
  const Result a = run(args + w("inf1"));
  ASSERT_EQ(a.code, 0);
  EXPECT_GT(number_after(a.out, "dice"), 0.95);
  ASSERT_EQ(run(args + w("inf2")).code, 0);
  EXPECT_EQ(read_file(w("inf1/mask.pgm")), read_file(w("inf2/mask.pgm")));
  EXPECT_EQ(read_file(w("inf1/overlay.pgm")), read_file(w("inf2/overlay.pgm")));
  for (std::uint8_t p : decode_pgm(read_file(w("inf1/mask.pgm"))).pixels) ASSERT_TRUE(p == 0 || p == 255);
  EXPECT_EQ(run(args + w("inf1")).code, 1);
  EXPECT_EQ(run(args + w("inf1") + " --force").code, 0);
}

TEST_F(Cli, EvalAgainstItself) {
  const std::string ck = w("fcn/checkpoint.afcr");
  const Result r = run("eval --checkpoint " + ck + " --against " + ck + " --data " + w("smoke") + " --split train --out " + w("ev"));
  ASSERT_EQ(r.code, 0);
  const auto rows = read_csv(w("ev/metrics.csv"));
  ASSERT_EQ(rows.size(), 1u + 12u);
  EXPECT_EQ(rows[1][2], "dice_pooled");
  EXPECT_EQ(rows[6][2], "trimap_acc_pooled_w5");

  const Json mc = Json::parse(read_file(w("ev/mcnemar.json")));
  EXPECT_EQ(mc.at("p_value").get<double>(), 1.0);
  EXPECT_EQ(mc.at("a_correct_b_wrong").get<int>(), 0);

  // Pooled Dice recounted from the saved per-sample counts.
  const auto per = read_csv(w("ev/per_sample.csv"));
  long tp = 0, fp = 0, fn = 0;
  std::size_t samples = 0;
  for (std::size_t i = 1; i < per.size(); ++i) {
    if (per[i][0] != "fcn") continue;
    if (per[i][1] == "0" && samples > 0) break;  // second copy of the same model
    tp += std::stol(per[i][2]);
    fp += std::stol(per[i][3]);
    fn += std::stol(per[i][4]);
    ++samples;
  }
  EXPECT_EQ(samples, read_dataset(w("smoke")).train.size());
  EXPECT_DOUBLE_EQ(std::stod(rows[1][3]), 2.0 * tp / (2.0 * tp + fp + fn));

  const Result t = run("eval --checkpoint " + ck + " --data " + w("smoke") + " --split test --out " + w("ev_test"));
  ASSERT_EQ(t.code, 0);
  EXPECT_EQ(read_csv(w("ev_test/metrics.csv")).size(), 7u);
  EXPECT_FALSE(fs::exists(w("ev_test/mcnemar.json")));
}

TEST_F(Cli, ResumeIsBitExact) {
  const std::string common = " --variant fcn_crf --seed 5 --width-divisor 32 --batch-size 4 --data " + w("smoke");
  ASSERT_EQ(run("train --epochs 2" + common + " --out " + w("straight")).code, 0);
  ASSERT_EQ(run("train --epochs 1" + common + " --out " + w("split")).code, 0);
  ASSERT_EQ(run("train --epochs 2 --resume " + w("split/checkpoint.afcr") + " --data " + w("smoke") + " --out " + w("split")).code, 0);
  EXPECT_EQ(read_file(w("straight/checkpoint.afcr")), read_file(w("split/checkpoint.afcr")));
  EXPECT_EQ(read_file(w("straight/metrics.csv")), read_file(w("split/metrics.csv")));
}

TEST_F(Cli, AdversarialAtZeroEpsilonMatchesClean) {
  const std::string common = " --seed 5 --width-divisor 32 --epochs 2 --data " + w("smoke");
  ASSERT_EQ(run("train --variant fcn" + common + " --out " + w("clean0")).code, 0);
  ASSERT_EQ(run("train --variant adv_fcn --epsilon 0" + common + " --out " + w("adv0")).code, 0);
  const Checkpoint a = load_checkpoint(w("clean0/checkpoint.afcr"));
  const Checkpoint b = load_checkpoint(w("adv0/checkpoint.afcr"));
  EXPECT_EQ(a.state.model.nets, b.state.model.nets);
  EXPECT_EQ(a.state.m, b.state.m);
  EXPECT_EQ(a.state.v, b.state.v);
}

TEST_F(Cli, Selftest) {
  const Result ok = run("selftest");
  EXPECT_EQ(ok.code, 0) << ok.out;
  EXPECT_EQ(ok.out.find("FAIL"), std::string::npos);
  const Result bad = run("selftest --mutate");
  EXPECT_EQ(bad.code, 3);
  EXPECT_NE(bad.out.find("FAIL"), std::string::npos);
}
