#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include "fixtures.hpp"
#include "iir/app.hpp"
#include "iir/error.hpp"

namespace iir {
namespace {

using testing::bit_equal;
using testing::micro_config;

TEST(Config, DefaultsAreDocumentedAndValid) {
  RunConfig c;
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.get("training.lq_dropout"), "0.15");
  EXPECT_EQ(c.get("training.class_dropout"), "0.15");
  EXPECT_EQ(c.get("sampler.steps"), "30");
  EXPECT_EQ(c.get("sampler.cfg_scale"), "7");
  std::istringstream lines(c.canonical());
  std::string line;
  std::size_t keys = 0;
  while (std::getline(lines, line)) {
    ++keys;
    const std::string key = line.substr(0, line.find(" = "));
    bool documented = false;
    for (const auto& d : RunConfig::documented_keys()) documented = documented || (d.key == key && !d.description.empty());
    EXPECT_TRUE(documented) << key;
  }
  EXPECT_EQ(keys, RunConfig::documented_keys().size());
}

TEST(Config, EveryKeyRoundTrips) {
  RunConfig c;
  const std::string before = c.canonical();
  for (const auto& d : RunConfig::documented_keys()) c.set(d.key, c.get(d.key));
  EXPECT_EQ(c.canonical(), before);
}

TEST(Config, ParsesSectionsCommentsAndOverrides) {
  std::istringstream in(
      "# comment\n[nets]\nchannels = 8  # trailing\n\n[sampler]\nmode = fixed\neta = 3\n[paths]\nout_dir = somewhere\n");
  RunConfig c = parse_config(in, {{"sampler.eta", "5"}});
  EXPECT_EQ(c.net.channels, 8);
  EXPECT_EQ(c.sampler.mode, SamplerMode::fixed);
  EXPECT_EQ(c.sampler.eta, 5);
  EXPECT_EQ(c.out_dir, "somewhere");
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
  std::istringstream unknown("[nets]\nchanels = 8\n");
  EXPECT_THROW(parse_config(unknown), ConfigError);
  std::istringstream bad("[training]\nbatch = lots\n");
  EXPECT_THROW(parse_config(bad), ConfigError);
  std::istringstream orphan("channels = 8\n");
  EXPECT_THROW(parse_config(orphan), ConfigError);
  RunConfig c;
  EXPECT_THROW(c.set("sampler.mode", "sometimes"), ConfigError);
  EXPECT_THROW(c.set("training.lr_schedule", "linear"), ConfigError);
  c.set("training.lq_dropout", "1.5");
  EXPECT_THROW(c.validate(), ConfigError);
  std::istringstream range("[training]\nlq_dropout = 1.5\n");
  EXPECT_THROW(parse_config(range), ConfigError);
  EXPECT_THROW(load_config("/nonexistent/config.ini"), ConfigError);
}

TEST(Config, HashFollowsContent) {
  RunConfig a, b;
  EXPECT_EQ(a.hash(), b.hash());
  EXPECT_EQ(a.hash().size(), 16u);
  b.set("sampler.seed", "9");
  EXPECT_NE(a.hash(), b.hash());
}

TEST(Checkpoint, RoundTripIsBitExact) {
  Pipeline p = testing::micro_pipeline(41);
  const auto dir = testing::scratch_dir("ckpt");
  save_checkpoint(dir / "a.iirk", p, Phase::aggregator, "0123456789abcdef");
  Checkpoint ck = load_checkpoint(dir / "a.iirk");
  EXPECT_EQ(ck.phase, Phase::aggregator);
  EXPECT_EQ(ck.config_hash, "0123456789abcdef");
  EXPECT_FALSE(ck.resume);
  EXPECT_EQ(params_hash(base_params(ck.pipeline)), params_hash(base_params(p)));
  EXPECT_EQ(params_hash(adapter_params(ck.pipeline)), params_hash(adapter_params(p)));
  EXPECT_EQ(params_hash(aggregator_params(ck.pipeline)), params_hash(aggregator_params(p)));
  EXPECT_EQ(ck.pipeline.cfg.channels, p.cfg.channels);
  EXPECT_FALSE(ck.pipeline.denoiser.adapter_enabled());
}

TEST(Checkpoint, PhaseOrderIsEnforced) {
  Pipeline p = testing::micro_pipeline(42);
  Checkpoint ck{Phase::base_dcp, "h", p, std::nullopt};
  EXPECT_NO_THROW(require_phase(ck, Phase::base_dcp, "distill-previewer"));
  EXPECT_THROW(require_phase(ck, Phase::previewer, "train-stage2"), PhaseError);
  ck.phase = Phase::previewer;
  ck.resume = ResumeState{Phase::aggregator, 3, {}, {}};
  EXPECT_THROW(require_phase(ck, Phase::previewer, "train-stage2"), PhaseError);
}

TEST(Checkpoint, RejectsForeignArchives) {
  const auto dir = testing::scratch_dir("ckpt_bad");
  save_archive(dir / "x.iirk", {{"something", Tensor::zeros({2})}});
  EXPECT_THROW(load_checkpoint(dir / "x.iirk"), Error);
  EXPECT_THROW(load_checkpoint(dir / "missing.iirk"), IoError);
}

TEST(Manifest, DeterministicWithUniformClasses) {
  DataConfig d;
  const auto a = build_manifest(d), b = build_manifest(d);
  std::ostringstream sa, sb;
  write_manifest(sa, a);
  write_manifest(sb, b);
  EXPECT_EQ(sa.str(), sb.str());
  const auto train = select_split(a, "train");
  ASSERT_EQ(train.size(), 10000u);
  int counts[kNumShapeClasses] = {};
  for (const auto& e : train) ++counts[e.class_id];
  for (int c : counts) EXPECT_NEAR(c, 2500, 0.02 * 2500);
  EXPECT_EQ(select_split(a, "val").size(), 64u);
  EXPECT_EQ(select_split(a, "test").size(), 5u * 64u);
  EXPECT_EQ(select_split(a, "test", DegradeLevel::mild).size(), 64u);
  // Test images are disjoint from training images.
  EXPECT_NE(select_split(a, "test_hq")[0].seed, train[0].seed);
}

TEST(Manifest, RegenerationMatchesTheRow) {
  DataConfig d;
  d.train_size = 8;
  const auto rows = build_manifest(d);
  const ImagePair p = regenerate(rows[5], d.p2);
  EXPECT_EQ(p.class_id, rows[5].class_id);
  EXPECT_EQ(p.level, rows[5].level);
}

class TrainingTest : public ::testing::Test {
 protected:
  void SetUp() override {
    config = micro_config(testing::scratch_dir("train"));
    train = select_split(build_manifest(config.data), "train");
  }
  RunConfig config;
  std::vector<ManifestEntry> train;
};

TEST_F(TrainingTest, FullLqDropoutStarvesTheEncoder) {
  config.train.lq_dropout = 1.0;
  Pipeline p = init_pipeline(config);
  nn::ParamList dcp;
  p.dcp.collect(dcp, "dcp");
  const std::string before = params_hash(dcp);
  int steps = 0;
  TrainHooks hooks;
  hooks.on_step = [&](std::int64_t, double) {
    ++steps;
    for (const auto& [name, t] : dcp) {
      if (!t.has_grad()) continue;
      for (Real g : t.grad()) ASSERT_EQ(g, 0) << name;
    }
  };
  train_stage1(p, config, train, nullptr, hooks);
  EXPECT_EQ(steps, config.train.stage1_steps);
  EXPECT_EQ(params_hash(dcp), before);
}

TEST_F(TrainingTest, DistillationAndStageTwoKeepFrozenWeights) {
  Pipeline p = init_pipeline(config);
  train_stage1(p, config, train);
  const std::string base = params_hash(base_params(p));
  distill_previewer(p, config, train);
  EXPECT_TRUE(p.has_previewer());
  EXPECT_EQ(params_hash(base_params(p)), base);
  const std::string adapter = params_hash(adapter_params(p));
  train_stage2(p, config, train);
  ASSERT_TRUE(p.aggregator);
  EXPECT_EQ(params_hash(base_params(p)), base);
  EXPECT_EQ(params_hash(adapter_params(p)), adapter);
  EXPECT_FALSE(p.denoiser.adapter_enabled());
  for (const auto& [name, t] : base_params(p)) EXPECT_TRUE(t.requires_grad()) << name;
}

TEST_F(TrainingTest, NoisyPreviewVariantTrains) {
  Pipeline p = init_pipeline(config);
  train_stage1(p, config, train);
  distill_previewer(p, config, train);
  Pipeline q = p;
  RunConfig noisy = config;
  noisy.train.noisy_preview = true;
  auto r = train_stage2(q, noisy, train);
  EXPECT_EQ(r.losses.size(), static_cast<std::size_t>(config.train.stage2_steps));
  train_stage2(p, config, train);
  EXPECT_NE(params_hash(aggregator_params(p)), params_hash(aggregator_params(q)));
}

// Interrupt each phase, persist, reload and finish: parameters and loss
// curves must equal the uninterrupted run exactly.
TEST_F(TrainingTest, ResumeIsBitExact) {
  config.train.lr_schedule = LrSchedule::cosine;  // the rate depends on the step
  config.train.stage1_steps = 5;
  config.train.distill_steps = 4;
  config.train.stage2_steps = 4;
  Pipeline ref = init_pipeline(config);
  auto r1 = train_stage1(ref, config, train);
  auto r2 = distill_previewer(ref, config, train);
  auto r3 = train_stage2(ref, config, train);

  const auto path = config.out_dir / "mid.iirk";
  auto interrupted = [&](Pipeline& p, Phase phase, Phase done, auto&& fn) {
    ResumeState st{phase, 0, {}, {}};
    TrainHooks stop;
    stop.stop_after = 2;
    fn(p, &st, stop);
    EXPECT_EQ(st.step, 2);
    save_checkpoint(path, p, done, config.hash(), &st);
    Checkpoint ck = load_checkpoint(path);
    EXPECT_TRUE(ck.resume);
    p = std::move(ck.pipeline);
    return fn(p, &*ck.resume, TrainHooks{});
  };
  Pipeline p = init_pipeline(config);
  auto s1 = interrupted(p, Phase::base_dcp, Phase::base_dcp,
                        [&](Pipeline& q, ResumeState* st, const TrainHooks& h) { return train_stage1(q, config, train, st, h); });
  auto s2 = interrupted(p, Phase::previewer, Phase::base_dcp,
                        [&](Pipeline& q, ResumeState* st, const TrainHooks& h) { return distill_previewer(q, config, train, st, h); });
  auto s3 = interrupted(p, Phase::aggregator, Phase::previewer,
                        [&](Pipeline& q, ResumeState* st, const TrainHooks& h) { return train_stage2(q, config, train, st, h); });
  EXPECT_EQ(params_hash(base_params(p)), params_hash(base_params(ref)));
  EXPECT_EQ(params_hash(adapter_params(p)), params_hash(adapter_params(ref)));
  EXPECT_EQ(params_hash(aggregator_params(p)), params_hash(aggregator_params(ref)));
  // Losses before the interruption pass through a 32-bit archive.
  for (auto [a, b] : {std::pair{&s1, &r1}, std::pair{&s2, &r2}, std::pair{&s3, &r3}}) {
    ASSERT_EQ(a->losses.size(), b->losses.size());
    for (std::size_t i = 0; i < a->losses.size(); ++i) EXPECT_FLOAT_EQ(a->losses[i], b->losses[i]);
  }
}

TEST_F(TrainingTest, ResumeRejectsAnotherPhase) {
  Pipeline p = init_pipeline(config);
  ResumeState st{Phase::base_dcp, 2, {}, {}};
  EXPECT_THROW(train_stage2(p, config, train, &st), PhaseError);
}

TEST_F(TrainingTest, EmptyTrainingSplitFails) {
  Pipeline p = init_pipeline(config);
  EXPECT_THROW(train_stage1(p, config, {}), Error);
}

TEST(SmoothedEnds, Windows) {
  const auto [a, b] = smoothed_ends({4, 2, 9, 1, 3}, 2);
  EXPECT_DOUBLE_EQ(a, 3);
  EXPECT_DOUBLE_EQ(b, 2);
}

TEST(RunLog, AppendsOneLinePerCall) {
  const auto dir = testing::scratch_dir("runlog");
  RunConfig c;
  append_run_log(dir / "run.log", c, "gen-data");
  append_run_log(dir / "run.log", c, "bench");
  std::ifstream in(dir / "run.log");
  std::string l1, l2, l3;
  std::getline(in, l1);
  std::getline(in, l2);
  EXPECT_FALSE(std::getline(in, l3));
  EXPECT_NE(l1.find("config=" + c.hash()), std::string::npos);
  EXPECT_NE(l2.find("command=bench"), std::string::npos);
  EXPECT_NE(l1.find("build="), std::string::npos);
}

}  // namespace
}  // namespace iir
