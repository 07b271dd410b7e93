#include <gtest/gtest.h>

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <string>

namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out;
};

Run run(const std::string& args) {
  const std::string cmd = std::string(KNNLM_CLI_PATH) + " " + args + " 2>/dev/null";
  Run r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return r;
  std::array<char, 4096> buf{};
  while (std::fgets(buf.data(), buf.size(), pipe)) r.out += buf.data();
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / "knnlm_cli_test";
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    std::ofstream(dir_ / "lm.txt") << "a b c a b d\nb c a b c\n";
    std::ofstream(dir_ / "ds.txt") << "a b c d a b c d\nc d a b\n";
    std::ofstream(dir_ / "valid.txt") << "a b c d\n";
    std::ofstream(dir_ / "test.txt") << "b c d a\n";
    std::ofstream(dir_ / "run.cfg") << "lm_corpus=lm.txt\ndatastore_corpus=ds.txt\nvalid_corpus=valid.txt\n"
                                       "test_corpus=test.txt\nvocab=vocab.txt\nlm=model.knnl\n"
                                       "datastore=v.knnd\nk=4\nencoder_dim=4\nlambda=0.25\n";
    cfg_ = "--config " + (dir_ / "run.cfg").string();
  }
  void TearDown() override { fs::remove_all(dir_); }

  fs::path dir_;
  std::string cfg_;
};

}  // namespace

TEST_F(CliTest, StagesEmitJsonLinesAndSucceed) {
  auto r = run(cfg_ + " build-lm");
  ASSERT_EQ(r.code, 0);
  EXPECT_EQ(nlohmann::json::parse(r.out)["stage"], "build-lm");
  r = run(cfg_ + " build-datastore");
  ASSERT_EQ(r.code, 0);
  EXPECT_EQ(nlohmann::json::parse(r.out)["count"], 12);
  r = run(cfg_ + " eval --mode nlm,knnlm");
  ASSERT_EQ(r.code, 0);
  std::size_t lines = 0;
  for (std::size_t p = 0; (p = r.out.find('\n', p)) != std::string::npos; ++p) ++lines;
  EXPECT_EQ(lines, 2u);
  const auto first = nlohmann::json::parse(r.out.substr(0, r.out.find('\n')));
  EXPECT_EQ(first["model"], "nlm");
  EXPECT_TRUE(first.contains("perplexity"));
  EXPECT_TRUE(first.contains("config_hash"));
}

TEST_F(CliTest, ConfigErrorsExitWithTwo) {
  EXPECT_EQ(run("build-lm").code, 2);
  EXPECT_EQ(run("--config /nonexistent.cfg build-lm").code, 2);
  EXPECT_EQ(run(cfg_ + " --set bogus=1 build-lm").code, 2);
  EXPECT_EQ(run(cfg_ + " no-such-command").code, 2);
  // Evaluating before the model exists names a missing stage.
  EXPECT_EQ(run(cfg_ + " eval --mode knnlm").code, 2);
  EXPECT_EQ(run(cfg_ + " prune --method nope").code, 2);
}

TEST_F(CliTest, CorruptArtifactExitsWithThree) {
  ASSERT_EQ(run(cfg_ + " build-lm").code, 0);
  std::ofstream(dir_ / "v.knnd", std::ios::binary) << "KNND garbage";
  EXPECT_EQ(run(cfg_ + " eval --mode knnlm").code, 3);
}

TEST(Cli, HelpSucceeds) { EXPECT_EQ(run("--help").code, 0); }
