#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "slt/cli.hpp"
#include "slt/config.hpp"

namespace fs = std::filesystem;

namespace slt {
namespace {

struct Result {
  int code;
  std::string out, err;
};

Result slt(std::vector<std::string> args) {
  args.insert(args.begin(), "slt");
  std::ostringstream out, err;
  const int code = run(args, out, err);
  return {code, out.str(), err.str()};
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("slt_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  void write(const std::string& name, const std::string& text) const {
    std::ofstream(dir_ / name, std::ios::binary) << text;
  }

  std::vector<std::string> lines(const std::string& name) const {
    std::ifstream in(dir_ / name);
    std::vector<std::string> out;
    for (std::string l; std::getline(in, l);) out.push_back(l);
    return out;
  }

  fs::path dir_;
};

TEST_F(CliTest, NoSubcommandIsUsageError) { EXPECT_EQ(slt({}).code, 1); }

TEST_F(CliTest, UnknownFlagIsUsageError) {
  const auto r = slt({"stats", "--manifest", path("m.tsv"), "--bogus"});
  EXPECT_EQ(r.code, 1);
}

TEST_F(CliTest, HelpExitsZero) { EXPECT_EQ(slt({"--help"}).code, 0); }

TEST_F(CliTest, StatsOnTwoSentenceManifest) {
  write("m.tsv", "a.sltc\tDer Hund läuft.\tv.mp4\t0\t2000\nb.sltc\tEs regnet.\tv.mp4\t2000\t3000\n");
  const auto r = slt({"stats", "--manifest", path("m.tsv")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("sentences\t2\n"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("words_per_sentence\t3.00/3.50/4.00/0.50"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("seconds_per_clip\t1.00/1.50/2.00/0.50"), std::string::npos) << r.out;
}

TEST_F(CliTest, MalformedManifestIsDataError) {
  write("m.tsv", "only\ttwo\n");
  EXPECT_EQ(slt({"stats", "--manifest", path("m.tsv")}).code, 2);
}

TEST_F(CliTest, EvaluateIdentityIsHundred) {
  write("h.txt", "Der Hund läuft schnell nach Hause .\nEs regnet heute den ganzen Tag .\n");
  for (const std::string metric : {"bleu", "chrf"}) {
    const auto r = slt({"evaluate", "--hyp", path("h.txt"), "--ref", path("h.txt"), "--metric", metric});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto j = nlohmann::json::parse(r.out);
    EXPECT_NEAR(j["value"].get<double>(), 100.0, 1e-9);
    EXPECT_EQ(j["n"], 1000);
    EXPECT_EQ(j["seed"], 12345);
  }
}

TEST_F(CliTest, EvaluateLengthMismatchIsDataError) {
  write("h.txt", "a\nb\n");
  write("r.txt", "a\n");
  EXPECT_EQ(slt({"evaluate", "--hyp", path("h.txt"), "--ref", path("r.txt")}).code, 2);
}

TEST_F(CliTest, EvaluateRejectsUnknownMetric) {
  write("h.txt", "a\nb\n");
  EXPECT_EQ(slt({"evaluate", "--hyp", path("h.txt"), "--ref", path("h.txt"), "--metric", "ter"}).code, 1);
}

TEST_F(CliTest, PrintConfigEchoesDefaults) {
  const auto r = slt({"train", "--print-config"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(nlohmann::json::parse(r.out), nlohmann::json::parse(to_json(RunConfig{})));
}

TEST_F(CliTest, FlagsOverrideConfigFile) {
  write("c.json", R"({"optim": {"warmup": 50}, "seed": 3})");
  const auto r = slt({"train", "--config", path("c.json"), "--seed", "9", "--print-config"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(r.out);
  EXPECT_EQ(j["seed"], 9);
  EXPECT_EQ(j["optim"]["warmup"], 50);
  EXPECT_EQ(j["optim"]["accum_steps"], 32);
}

TEST_F(CliTest, BadConfigIsUsageError) {
  write("c.json", R"({"optim": {"warmpu": 50}})");
  EXPECT_EQ(slt({"train", "--config", path("c.json"), "--print-config"}).code, 1);
}

TEST_F(CliTest, PreprocessWritesManifestAndCommands) {
  write("s.srt", "1\n00:00:01,000 --> 00:00:02,500\nGuten Abend.\n\n2\n00:00:03,000 --> 00:00:04,000\nDas Wetter.\n");
  const auto r = slt({"preprocess", "--srt", path("s.srt"), "--video", "news.mp4", "--duration-ms", "5000",
                      "--out-dir", path("clips")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("ffmpeg -i news.mp4 -ss 1.000 -to 2.500 -y"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("clips\t2\n"), std::string::npos);
  EXPECT_TRUE(fs::exists(dir_ / "clips" / "manifest.tsv"));
}

TEST_F(CliTest, SynthTrainTranslateEvaluate) {
  ASSERT_EQ(slt({"synth", "--out", path("syn"), "-n", "4"}).code, 0);
  const auto stats = slt({"stats", "--manifest", path("syn/manifest.tsv")});
  EXPECT_NE(stats.out.find("sentences\t4\n"), std::string::npos);

  const auto train = slt({"train", "--config", SLT_CONFIGS "/desk.json", "--train-manifest",
                          path("syn/manifest.tsv"), "--out", path("run"), "--max-steps", "6"});
  ASSERT_EQ(train.code, 0) << train.err;
  const auto summary = nlohmann::json::parse(train.out);
  EXPECT_EQ(summary["steps"], 6);
  EXPECT_TRUE(fs::exists(dir_ / "run" / "best.ckpt"));
  EXPECT_EQ(lines("run/steps.tsv").size(), 6u);
  EXPECT_EQ(lines("run/epochs.tsv").size(), 6u);

  const auto tr = slt({"translate", "--checkpoint", path("run/best.ckpt"), "--manifest",
                       path("syn/manifest.tsv"), "--out", path("hyp.txt"), "--refs-out", path("ref.txt")});
  ASSERT_EQ(tr.code, 0) << tr.err;
  EXPECT_EQ(lines("hyp.txt").size(), 4u);
  EXPECT_EQ(lines("ref.txt").size(), 4u);
  EXPECT_EQ(slt({"evaluate", "--hyp", path("hyp.txt"), "--ref", path("ref.txt"), "--metric", "all"}).code, 0);
}

TEST_F(CliTest, BaselineIsSeeded) {
  ASSERT_EQ(slt({"synth", "--out", path("syn"), "-n", "6"}).code, 0);
  const auto a = slt({"baseline", "--manifest", path("syn/manifest.tsv"), "--seed", "4", "-n", "20"});
  const auto b = slt({"baseline", "--manifest", path("syn/manifest.tsv"), "--seed", "4", "-n", "20"});
  ASSERT_EQ(a.code, 0) << a.err;
  EXPECT_EQ(a.out, b.out);
  EXPECT_EQ(std::count(a.out.begin(), a.out.end(), '\n'), 20);
}

TEST_F(CliTest, GradcheckPasses) {
  const auto r = slt({"gradcheck", "--checks", "2"});
  ASSERT_EQ(r.code, 0) << r.out << r.err;
  EXPECT_TRUE(nlohmann::json::parse(r.out)["pass"].get<bool>());
}

TEST_F(CliTest, MissingCheckpointIsUsageError) {
  write("m.tsv", "a\tb\tc\t0\t1\n");
  EXPECT_EQ(slt({"translate", "--checkpoint", path("none.ckpt"), "--manifest", path("m.tsv")}).code, 1);
}

TEST_F(CliTest, CorruptCheckpointIsDataError) {
  write("m.tsv", "a\tb\tc\t0\t1\n");
  write("bad.ckpt", "SLTKgarbage");
  EXPECT_EQ(slt({"translate", "--checkpoint", path("bad.ckpt"), "--manifest", path("m.tsv")}).code, 2);
}

}  // namespace
}  // namespace slt
