#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>
#include <unistd.h>

#include "smi/io.hpp"
#include "smi/run.hpp"

using namespace smi;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error thrown";
  return ErrorCode::InvalidArgument;
}

class RunTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = fs::temp_directory_path() / ("smi_run_test_" + std::to_string(::getpid()));
    fs::create_directories(dir_);
    RunConfig c = base("train");
    c.paths.teacher.clear();
    c.paths.out = (dir_ / "teacher").string();
    run(c);
  }
  static void TearDownTestSuite() { fs::remove_all(dir_); }

  static RunConfig base(const std::string& command) {
    json doc = {{"command", command},
                {"seed", 5},
                {"vit", {{"num_layers", 1}, {"embed_dim", 16}, {"ffn_hidden", 32}, {"num_heads", 2}}},
                {"data", {{"count", 60}, {"val_count", 30}}},
                {"train", {{"epochs", 1}, {"batch_size", 16}}},
                {"inversion", {{"total_iters", 12}, {"labels", {1, 2}}}},
                {"schedule", {{{"iteration", 4}, {"fraction", 0.3}}, {{"iteration", 8}, {"fraction", 0.3}}}},
                {"transfer", {{"iterations", 3}, {"batch_size", 2}}},
                {"quant", {{"images", 2}}},
                {"probe", {{"labels", {0, 1}}}}};
    RunConfig c = RunConfig::from_json(doc);
    c.paths.teacher = (dir_ / "teacher" / "teacher.smiv").string();
    return c;
  }
  static std::string out(const std::string& name) { return (dir_ / name).string(); }

  static fs::path dir_;
};

fs::path RunTest::dir_;

}  // namespace

TEST(RunConfig, DefaultsRoundTrip) {
  const RunConfig c;
  const RunConfig back = RunConfig::from_json(c.to_json());
  EXPECT_EQ(back.to_json(), c.to_json());
  EXPECT_EQ(back.hash(), c.hash());
  EXPECT_EQ(c.hash().size(), 16u);
}

TEST(RunConfig, PartialDocumentKeepsDefaults) {
  const RunConfig c = RunConfig::from_json(json{{"command", "probe"}, {"inversion", {{"lr", 0.1}}}});
  EXPECT_EQ(c.command, Command::Probe);
  EXPECT_EQ(c.inversion.lr, 0.1);
  EXPECT_EQ(c.inversion.total_iters, RunConfig{}.inversion.total_iters);
  EXPECT_NE(c.hash(), RunConfig{}.hash());
}

TEST(RunConfig, ScheduleForms) {
  EXPECT_EQ(RunConfig::from_json(json{{"schedule", "none"}}).schedule.stages.size(), 0u);
  EXPECT_EQ(RunConfig::from_json(json{{"schedule", json::array()}}).schedule.stages.size(), 0u);
  const auto s = RunConfig::from_json(json{{"schedule", "standard"}}).schedule;
  ASSERT_EQ(s.stages.size(), 4u);
  EXPECT_EQ(s.stages[3].iteration, 300);
}

TEST(RunConfig, RejectsUnknownKeysAtAnyDepth) {
  for (const char* text : {R"({"colour": 1})", R"({"vit": {"depth": 3}})", R"({"schedule": [{"iteration": 5, "fraction": 0.3, "x": 1}]})",
                           R"({"paths": {"teacher": "a", "typo": "b"}})"}) {
    EXPECT_EQ(code_of([&] { RunConfig::from_json(json::parse(text)); }), ErrorCode::ConfigError) << text;
  }
}

TEST(RunConfig, RejectsTypeErrors) {
  for (const char* text : {R"({"seed": -1})", R"({"seed": 1.5})", R"({"vit": {"embed_dim": 32.5}})", R"({"inversion": {"lr": "fast"}})",
                           R"({"train": {"hflip": 1}})", R"({"inversion": {"labels": [0, "a"]}})", R"({"vit": 3})",
                           R"({"command": "dance"})", R"({"train": {"optimizer": "rmsprop"}})"}) {
    EXPECT_EQ(code_of([&] { RunConfig::from_json(json::parse(text)); }), ErrorCode::ConfigError) << text;
  }
}

TEST(RunConfig, ValidatesValues) {
  EXPECT_EQ(code_of([] { RunConfig::from_json(json{{"inversion", {{"total_iters", 100}}}}); }),
            ErrorCode::ScheduleOutOfRange);
  EXPECT_EQ(code_of([] { RunConfig::from_json(json{{"vit", {{"patch_size", 5}}}}); }), ErrorCode::InvalidArgument);
  EXPECT_THROW(RunConfig::from_json(json{{"probe", {{"k", 0}}}}), Error);
}

TEST(ApplyOverride, ParsesJsonAndCreatesPath) {
  json doc = json::object();
  apply_override(doc, "inversion.lr=0.5");
  apply_override(doc, "paths.out=runs/a");
  apply_override(doc, "inversion.labels=[1,2]");
  EXPECT_EQ(doc["inversion"]["lr"], 0.5);
  EXPECT_EQ(doc["paths"]["out"], "runs/a");
  EXPECT_EQ(doc["inversion"]["labels"], json::array({1, 2}));
  EXPECT_EQ(code_of([&] { apply_override(doc, "noequals"); }), ErrorCode::ConfigError);
  EXPECT_EQ(code_of([&] { apply_override(doc, "a..b=1"); }), ErrorCode::ConfigError);
  EXPECT_EQ(code_of([&] { apply_override(doc, "inversion.lr.x=1"); }), ErrorCode::ConfigError);
}

TEST_F(RunTest, SameConfigTwiceGivesSameManifest) {
  RunConfig c = base("invert");
  c.paths.out = out("det_a");
  const json a = run(c);
  c.paths.out = out("det_b");
  json b = run(c);
  b["config"]["paths"]["out"] = a["config"]["paths"]["out"];
  EXPECT_EQ(deterministic_part(a)["metrics"], deterministic_part(b)["metrics"]);
  EXPECT_EQ(a["outputs"], b["outputs"]);
  EXPECT_TRUE(a.contains("timestamp"));
  EXPECT_TRUE(a["timing"].contains("total_seconds"));
  EXPECT_EQ(io::read_file(out("det_a/invert_0_y1.pgm")), io::read_file(out("det_b/invert_0_y1.pgm")));
  EXPECT_EQ(io::read_file(out("det_a/invert_trace.csv")), io::read_file(out("det_b/invert_trace.csv")));

  const json onfile = read_json(out("det_a/manifest.json"));
  EXPECT_EQ(deterministic_part(onfile), deterministic_part(a));
}

TEST_F(RunTest, ManifestRecordsConfigHashAndSeed) {
  RunConfig c = base("invert");
  c.paths.out = out("hash");
  const json m = run(c);
  EXPECT_EQ(m["config_hash"], c.hash());
  EXPECT_EQ(m["seed"], 5);
  EXPECT_EQ(RunConfig::from_json(m["config"]).hash(), c.hash());
  for (const auto& name : m["outputs"]) EXPECT_TRUE(fs::exists(fs::path(c.paths.out) / name.get<std::string>()));
}

TEST_F(RunTest, NoScheduleAndEmptyScheduleWriteIdenticalImages) {
  RunConfig c = base("invert");
  c.schedule = RunConfig::from_json(json{{"schedule", "none"}}).schedule;
  c.paths.out = out("none");
  run(c);
  c.schedule = StopSchedule{};
  c.paths.out = out("empty");
  run(c);
  for (const char* f : {"invert_0_y1.pgm", "invert_1_y2.pgm"}) {
    EXPECT_EQ(io::read_file(out(std::string("none/") + f)), io::read_file(out(std::string("empty/") + f)));
  }
  const VitModel teacher = io::load_checkpoint(c.paths.teacher);
  InversionConfig ic = c.inversion;
  ic.label = 1;
  ic.seed = SeedSplitter(c.seed).seed("inversion", 0);
  io::write_image(invert_dense(teacher, ic).image, synthetic_normalization(), out("dense.pgm"));
  EXPECT_EQ(io::read_file(out("dense.pgm")), io::read_file(out("none/invert_0_y1.pgm")));
}

TEST_F(RunTest, SweepWritesOneRowPerLevel) {
  RunConfig c = base("sweep");
  c.sweep_levels = {0.0, 0.5, 0.77};
  c.paths.out = out("sweep");
  const json m = run(c);
  const auto bytes = io::read_file(out("sweep/sweep.csv"));
  std::istringstream csv(std::string(bytes.begin(), bytes.end()));
  std::vector<std::string> lines;
  for (std::string l; std::getline(csv, l);) lines.push_back(l);
  ASSERT_EQ(lines.size(), 4u);
  EXPECT_EQ(lines[0].rfind("target_sparsity,", 0), 0u);
  EXPECT_EQ(m["metrics"]["levels"].size(), 3u);
  EXPECT_EQ(m["metrics"]["levels"][0]["sparsity"], 0.0);
  EXPECT_GT(m["metrics"]["levels"][2]["sparsity"].get<double>(), m["metrics"]["levels"][1]["sparsity"].get<double>());
}

TEST_F(RunTest, OtherCommandsProduceArtifacts) {
  for (const char* cmd : {"quantize", "transfer", "probe"}) {
    RunConfig c = base(cmd);
    c.paths.out = out(cmd);
    const json m = run(c);
    EXPECT_FALSE(m["outputs"].empty()) << cmd;
    for (const auto& name : m["outputs"]) EXPECT_TRUE(fs::exists(fs::path(c.paths.out) / name.get<std::string>())) << cmd;
  }
  RunConfig r = base("report");
  r.paths.reports = {out("quantize/manifest.json"), out("transfer/manifest.json")};
  r.paths.out = out("report");
  const json m = run(r);
  EXPECT_EQ(m["metrics"]["manifests"], 2);
  EXPECT_GT(m["metrics"]["rows"].get<int>(), 2);
}

TEST_F(RunTest, MissingTeacherFailsBeforeWritingManifest) {
  RunConfig c = base("invert");
  c.paths.teacher.clear();
  c.paths.out = out("missing");
  EXPECT_EQ(code_of([&] { run(c); }), ErrorCode::ConfigError);
  EXPECT_FALSE(fs::exists(out("missing/manifest.json")));
}
