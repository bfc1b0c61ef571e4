// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "convstyle/convstyle.hpp"

using namespace convstyle;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code = -1;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spit(const fs::path& p, const std::string& s) { std::ofstream(p, std::ios::binary) << s; }

class Cli : public ::testing::Test {
 protected:
  fs::path dir;

  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir = fs::temp_directory_path() / (std::string("convstyle_cli_") + info->name());
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  void TearDown() override { fs::remove_all(dir); }

  fs::path at(const std::string& name) const { return dir / name; }

  Outcome run(const std::string& args, const char* exe = CONVSTYLE_CLI) const {
    const auto out = at(".stdout"), err = at(".stderr");
    const std::string cmd = std::string(exe) + " " + args + " >" + out.string() + " 2>" + err.string();
    const int status = std::system(cmd.c_str());
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(out), slurp(err)};
  }

  // A small, fast configuration shared by training-related commands.
  std::string small_config(const std::string& extra = "") const {
    const auto p = at("small.json");
    spit(p, R"({"features.d_raw": 16, "features.d_text": 16, "model.hidden": 8, "model.attention_dim": 8,
                "model.gru_hidden": 8, "training.iterations": 20, "training.eval_every": 10,
                "training.batch_size": 8, "training.learning_rate": 0.001)" +
                extra + "}");
    return p.string();
  }

  std::string small_corpus(std::uint64_t seed = 3, std::size_t n = 20) const {
    SynthConfig sc;
    sc.conversations = n;
    sc.max_len = 14;
    const auto p = at("corpus" + std::to_string(seed) + "_" + std::to_string(n) + ".jsonl");
    save_corpus(p.string(), generate_synthetic(sc, seed));
    return p.string();
  }
};

}  // namespace

TEST_F(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(run("").code, 2);
  EXPECT_EQ(run("frobnicate").code, 2);
  EXPECT_EQ(run("generate").code, 2);
  EXPECT_EQ(run("--help").code, 0);
}

TEST_F(Cli, GenerateIsDeterministicAndCountsMatch) {
  const auto a = run("generate --seed 7 --out " + at("a.jsonl").string());
  const auto b = run("generate --seed 7 --out " + at("b.jsonl").string());
  ASSERT_EQ(a.code, 0) << a.err;
  ASSERT_EQ(b.code, 0);
  EXPECT_EQ(slurp(at("a.jsonl")), slurp(at("b.jsonl")));
  EXPECT_EQ(a.out, b.out);
  const auto corpus = load_corpus(at("a.jsonl").string());
  std::size_t lines = 0;
  for (char ch : slurp(at("a.jsonl"))) lines += ch == '\n';
  std::ostringstream want;
  want << "conversations " << corpus.size() << "\nutterances " << lines << "\n";
  EXPECT_EQ(a.out, want.str());
  EXPECT_EQ(corpus.size(), 1000u);
  EXPECT_EQ(run("generate --seed 8 --out " + at("c.jsonl").string()).code, 0);
  EXPECT_NE(slurp(at("a.jsonl")), slurp(at("c.jsonl")));
}

TEST_F(Cli, GenerateZeroConversationsAndErrors) {
  spit(at("zero.json"), R"({"synth": {"conversations": 0}})");
  const auto r = run("generate --config " + at("zero.json").string() + " --out " + at("z.jsonl").string());
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.out, "conversations 0\nutterances 0\n");
  EXPECT_TRUE(fs::exists(at("z.jsonl")));
  EXPECT_EQ(fs::file_size(at("z.jsonl")), 0u);

  spit(at("typo.json"), R"({"synth.conversatons": 3})");
  const auto bad = run("generate --config " + at("typo.json").string() + " --out " + at("t.jsonl").string());
  EXPECT_EQ(bad.code, 3);
  EXPECT_NE(bad.err.find("synth.conversatons"), std::string::npos);
  EXPECT_EQ(run("generate --out " + (dir / "no" / "such" / "dir.jsonl").string()).code, 2);
}

TEST_F(Cli, StatsHandFixture) {
  // c1: speakers a,b,a with 3,1,2 words; c2: x with 4; c3: p,q,r,p with 0,1,1,2.
  spit(at("fx.jsonl"),
       R"({"conversation_id":"c1","index":0,"speaker_id":"a","text":"one two three"}
{"conversation_id":"c1","index":1,"speaker_id":"b","text":"one"}
{"conversation_id":"c1","index":2,"speaker_id":"a","text":"one two"}
{"conversation_id":"c2","index":0,"speaker_id":"x","text":"w w w w"}
{"conversation_id":"c3","index":0,"speaker_id":"p","text":""}
{"conversation_id":"c3","index":1,"speaker_id":"q","text":"w"}
{"conversation_id":"c3","index":2,"speaker_id":"r","text":"w"}
{"conversation_id":"c3","index":3,"speaker_id":"p","text":"w w"}
)");
  const auto r = run("stats --corpus " + at("fx.jsonl").string());
  ASSERT_EQ(r.code, 0) << r.err;
  char want[1024];
  std::snprintf(want, sizeof want,
                "%-28s %10s %10s %10s\n%-28s %10.0f %10.4f %10.0f\n%-28s %10.0f %10.4f %10.0f\n"
                "%-28s %10.0f %10.4f %10.0f\n%-28s %10.0f %10.4f %10.0f\n3 conversations, 8 utterances\n",
                "", "min", "average", "max",                                   //
                "sentences per conversation", 1.0, 8.0 / 3.0, 4.0,             //
                "speakers per conversation", 1.0, 2.0, 3.0,                    //
                "sentences per speaker", 1.0, 8.0 / 6.0, 2.0,                  //
                "words per sentence", 0.0, 14.0 / 8.0, 4.0);
  EXPECT_EQ(r.out, want);

  const auto j = run("stats --json --corpus " + at("fx.jsonl").string());
  ASSERT_EQ(j.code, 0);
  const auto doc = nlohmann::json::parse(j.out);
  EXPECT_EQ(doc["conversations"], 3);
  EXPECT_EQ(doc["utterances"], 8);
  const double avgs[] = {8.0 / 3.0, 2.0, 8.0 / 6.0, 14.0 / 8.0};
  const double mins[] = {1, 1, 1, 0}, maxs[] = {4, 3, 2, 4};
  ASSERT_EQ(doc["rows"].size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(doc["rows"][i]["min"].get<double>(), mins[i]);
    EXPECT_EQ(doc["rows"][i]["average"].get<double>(), avgs[i]);
    EXPECT_EQ(doc["rows"][i]["max"].get<double>(), maxs[i]);
    // The table shows the same numbers at its printed precision.
    char cell[32];
    std::snprintf(cell, sizeof cell, "%10.4f", doc["rows"][i]["average"].get<double>());
    EXPECT_NE(r.out.find(cell), std::string::npos);
  }
}

TEST_F(Cli, StatsErrors) {
  spit(at("empty.jsonl"), "");
  EXPECT_EQ(run("stats --corpus " + at("empty.jsonl").string()).code, 2);
  spit(at("broken.jsonl"), R"({"conversation_id":"c","index":0,"speaker_id":"a","text":"x"}
{"conversation_id":"c","index":1,"speaker_id":"a","text":)");
  const auto r = run("stats --corpus " + at("broken.jsonl").string());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("line 2"), std::string::npos) << r.err;
  EXPECT_EQ(run("stats --corpus " + at("missing.jsonl").string()).code, 2);
}

TEST_F(Cli, TrainIsByteDeterministic) {
  const auto corpus = small_corpus();
  const auto cfg = small_config();
  for (const char* v : {"Proposed", "BaselineGRU"}) {
    const std::string common = "train --corpus " + corpus + " --config " + cfg + " --variant " + v + " --seed 4";
    ASSERT_EQ(run(common + " --out-metrics " + at("m1.json").string() + " --out-checkpoint " + at("c1.bin").string()).code, 0);
    ASSERT_EQ(run(common + " --out-metrics " + at("m2.json").string() + " --out-checkpoint " + at("c2.bin").string()).code, 0);
    EXPECT_EQ(slurp(at("m1.json")), slurp(at("m2.json")));
    EXPECT_EQ(slurp(at("c1.bin")), slurp(at("c2.bin")));
    const auto m = nlohmann::json::parse(slurp(at("m1.json")));
    EXPECT_EQ(m["variant"], v);
    EXPECT_EQ(m["seed"], 4);
    EXPECT_EQ(m["curve"].size(), 3u);
    EXPECT_TRUE(m["wall_clock_s"].is_null());
  }
  ASSERT_EQ(run("train --timing --corpus " + corpus + " --config " + cfg + " --out-metrics " + at("t.json").string()).code, 0);
  EXPECT_TRUE(nlohmann::json::parse(slurp(at("t.json")))["wall_clock_s"].is_number());
}

TEST_F(Cli, TrainWithZeroRateSavesFreshInit) {
  const auto corpus = small_corpus();
  const auto cfg = small_config(R"(, "training.learning_rate": 0, "training.iterations": 1)");
  ASSERT_EQ(run("train --corpus " + corpus + " --config " + cfg + " --seed 9 --variant GraphTextRaw --out-checkpoint " +
                at("ck.bin").string()).code, 0);
  RunConfig rc = load_config(cfg);
  rc.train.seed = 9;
  rc.train.spec.variant = Variant::GraphTextRaw;
  const std::string fresh = serialize_checkpoint({kCheckpointVersion, train_config_json(rc.train), init_params(rc.train.spec, 9)});
  EXPECT_EQ(slurp(at("ck.bin")), fresh);
}

TEST_F(Cli, TrainThenEvalAgree) {
  const auto train_corpus = small_corpus(5, 20);
  const auto test_corpus = small_corpus(6, 4);
  const auto cfg = small_config();
  for (const char* v : {"Proposed", "GraphTextEncoded", "BaselineGRU"}) {
    ASSERT_EQ(run(std::string("train --corpus ") + train_corpus + " --test-corpus " + test_corpus + " --config " + cfg +
                  " --variant " + v + " --out-metrics " + at("m.json").string() + " --out-checkpoint " +
                  at("ck.bin").string()).code, 0);
    const auto m = nlohmann::json::parse(slurp(at("m.json")));
    const auto e = run("eval --json --corpus " + test_corpus + " --checkpoint " + at("ck.bin").string());
    ASSERT_EQ(e.code, 0) << e.err;
    const auto ej = nlohmann::json::parse(e.out);
    EXPECT_EQ(ej["variant"], v);
    EXPECT_NEAR(ej["mse"].get<double>(), m["curve"].back()["test_mse"].get<double>(), 1e-12);
    EXPECT_NEAR(ej["mse"].get<double>(), m["final_test_mse"].get<double>(), 1e-12);

    // The library's evaluate on the same inputs gives the same number.
    auto ck = load_checkpoint(at("ck.bin").string());
    const auto spec = apply_config({}, ck.config).train.spec;
    EXPECT_EQ(ej["mse"].get<double>(), evaluate(make_chunks(load_corpus(test_corpus), 5), ck.params, spec));

    const auto plain = run("eval --corpus " + test_corpus + " --checkpoint " + at("ck.bin").string());
    char want[64];
    std::snprintf(want, sizeof want, "%.6f\n", ej["mse"].get<double>());
    EXPECT_EQ(plain.out, want);
  }
}

TEST_F(Cli, EvalUniformCheckpointOnUniformCorpus) {
  const auto cfg = small_config(R"(, "training.learning_rate": 0, "training.iterations": 1)");
  const auto corpus = small_corpus();
  ASSERT_EQ(run("train --corpus " + corpus + " --config " + cfg + " --out-checkpoint " + at("ck.bin").string()).code, 0);
  auto ck = load_checkpoint(at("ck.bin").string());
  ck.params.value("output.w").fill(0.0);
  ck.params.value("output.b").fill(0.0);
  save_checkpoint(at("uni.bin").string(), ck);
  auto convs = load_corpus(corpus);
  for (auto& c : convs)
    for (auto& u : c.utterances) u.style = std::vector<double>(10, 0.1);
  save_corpus(at("uniform.jsonl").string(), convs);
  const auto r = run("eval --corpus " + at("uniform.jsonl").string() + " --checkpoint " + at("uni.bin").string());
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.out, "0.000000\n");
}

TEST_F(Cli, EvalAndTrainMismatchesExitThree) {
  const auto cfg = small_config(R"(, "training.iterations": 1)");
  const auto corpus = small_corpus();
  ASSERT_EQ(run("train --corpus " + corpus + " --config " + cfg + " --out-checkpoint " + at("ck.bin").string()).code, 0);

  SynthConfig four;
  four.conversations = 3;
  four.style_dim = 4;
  save_corpus(at("ds4.jsonl").string(), generate_synthetic(four, 1));
  EXPECT_EQ(run("eval --corpus " + at("ds4.jsonl").string() + " --checkpoint " + at("ck.bin").string()).code, 3);
  EXPECT_EQ(run("train --corpus " + at("ds4.jsonl").string() + " --config " + cfg).code, 3);

  auto convs = load_corpus(corpus);
  for (auto& c : convs)
    for (auto& u : c.utterances) u.style.reset();
  save_corpus(at("text_only.jsonl").string(), convs);
  const auto r = run("train --corpus " + at("text_only.jsonl").string() + " --config " + cfg + " --variant Proposed");
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("style"), std::string::npos) << r.err;
  EXPECT_EQ(run("eval --corpus " + at("text_only.jsonl").string() + " --checkpoint " + at("ck.bin").string()).code, 3);

  auto ck = load_checkpoint(at("ck.bin").string());
  ck.params.add("stray", Tensor({2}));
  save_checkpoint(at("stray.bin").string(), ck);
  EXPECT_EQ(run("eval --corpus " + corpus + " --checkpoint " + at("stray.bin").string()).code, 3);
  spit(at("junk.bin"), "not a checkpoint");
  EXPECT_EQ(run("eval --corpus " + corpus + " --checkpoint " + at("junk.bin").string()).code, 2);
  EXPECT_EQ(run("train --corpus " + corpus + " --config " + cfg + " --variant Nope").code, 3);
}

TEST_F(Cli, TrainNonFiniteLossExitsFour) {
  auto convs = load_corpus(small_corpus());
  const auto cfg = small_config(R"(, "training.learning_rate": 1e300)");
  save_corpus(at("c.jsonl").string(), convs);
  const auto r = run("train --corpus " + at("c.jsonl").string() + " --config " + cfg);
  EXPECT_EQ(r.code, 4) << r.out << r.err;
}

TEST_F(Cli, CompareRowsOrderAndDeterminism) {
  const auto corpus = small_corpus(8, 24);
  const auto cfg = small_config(R"(, "training.learning_rate": 0, "training.iterations": 1)");
  const auto r = run("compare --corpus " + corpus + " --config " + cfg + " --seeds 1 --out " + at("a.json").string());
  ASSERT_EQ(r.code, 0) << r.err;
  std::istringstream lines(r.out);
  std::string line;
  std::vector<std::string> names;
  while (std::getline(lines, line)) names.push_back(line.substr(0, line.find(' ')));
  ASSERT_GE(names.size(), 5u);
  EXPECT_EQ(names[1], "BaselineGRU");
  EXPECT_EQ(names[2], "GraphTextRaw");
  EXPECT_EQ(names[3], "GraphTextEncoded");
  EXPECT_EQ(names[4], "Proposed");
  const auto doc = nlohmann::json::parse(slurp(at("a.json")));
  EXPECT_EQ(doc["runs"].size(), 4u);
  for (std::size_t v = 0; v < 4; ++v)
    EXPECT_EQ(doc["summary"][v]["mean_test_mse"], doc["runs"][v]["curve"][0]["test_mse"]);

  const auto trained = small_config();
  const std::string base = "compare --corpus " + corpus + " --config " + trained + " --seeds 1,2";
  ASSERT_EQ(run(base + " --out " + at("b.json").string()).code, 0);
  ASSERT_EQ(run(base + " --threads 3 --out " + at("c.json").string()).code, 0);
  EXPECT_EQ(slurp(at("b.json")), slurp(at("c.json")));
  EXPECT_EQ(nlohmann::json::parse(slurp(at("b.json")))["runs"].size(), 8u);
  EXPECT_EQ(run("compare --corpus " + corpus + " --config " + trained + " --seeds 3..1").code, 3);
}

TEST_F(Cli, GradcheckPassesAcrossSeeds) {
  for (int seed : {1, 2, 3, 4, 5}) {
    const auto r = run("gradcheck --dims SMALL --seed " + std::to_string(seed));
    EXPECT_EQ(r.code, 0) << "seed " << seed << "\n" << r.out << r.err;
    EXPECT_EQ(r.out.find("FAIL"), std::string::npos);
    for (const char* name : {"op:relu", "op:softmax", "op:gru_cell", "model:BaselineGRU", "model:GraphTextRaw",
                             "model:GraphTextEncoded", "model:Proposed"})
      EXPECT_NE(r.out.find(name), std::string::npos) << name;
  }
  EXPECT_EQ(run("gradcheck --dims HUGE").code, 3);
}

TEST_F(Cli, MutantGradcheckFailsNamingRelu) {
  for (int seed : {1, 2, 3}) {
    const auto r = run("gradcheck --dims SMALL --seed " + std::to_string(seed), CONVSTYLE_MUTANT_CLI);
    EXPECT_EQ(r.code, 5);
    EXPECT_NE(r.err.find("op:relu"), std::string::npos) << r.err;
  }
}
