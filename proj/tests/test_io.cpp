#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "funkflow/io.hpp"

using namespace funkflow;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("funkflow_io_" + name);
  fs::remove_all(p);
  return p;
}

bool same(const pk::Study& a, const pk::Study& b) {
  if (a.study_id != b.study_id || a.seed != b.seed || a.individuals.size() != b.individuals.size()) return false;
  for (std::size_t i = 0; i < a.individuals.size(); ++i) {
    const auto &x = a.individuals[i], &y = b.individuals[i];
    if (x.id != y.id || x.dose.amount != y.dose.amount || x.dose.route != y.dose.route || x.times != y.times ||
        x.concentrations != y.concentrations)
      return false;
  }
  return true;
}

std::string message_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const ValidationError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(StudyIo, FuzzedRoundTripIsExact) {
  const auto dir = scratch("roundtrip");
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto st = pk::simulate_study({}, derive_seed(123, {s}), "fuzz-" + std::to_string(s));
    const auto path = dir / (st.study_id + ".json");
    io::save_study(path, st);
    EXPECT_TRUE(same(io::load_study(path), st));
  }
  EXPECT_EQ(io::load_studies(dir).size(), 20u);
}

TEST(StudyIo, DecreasingTimesNameTheSubject) {
  auto j = io::study_to_json(pk::simulate_study({}, 1));
  j["individuals"][1]["times"][1] = j["individuals"][1]["times"][0];
  const auto msg = message_of([&] { io::study_from_json(j); });
  EXPECT_NE(msg.find(j["individuals"][1]["id"].get<std::string>()), std::string::npos) << msg;
}

TEST(StudyIo, RouteOutsideEnumRejected) {
  auto j = io::study_to_json(pk::simulate_study({}, 2));
  j["individuals"][0]["route"] = "subcutaneous";
  const auto msg = message_of([&] { io::study_from_json(j); });
  EXPECT_NE(msg.find("study.individuals[0].route"), std::string::npos) << msg;
}

TEST(StudyIo, SchemaViolationsCarryFieldPath) {
  auto j = io::study_to_json(pk::simulate_study({}, 3));
  j["individuals"][2].erase("dose_amount");
  EXPECT_NE(message_of([&] { io::study_from_json(j); }).find("study.individuals[2].dose_amount"), std::string::npos);
  j = io::study_to_json(pk::simulate_study({}, 3));
  j["seed"] = "abc";
  EXPECT_NE(message_of([&] { io::study_from_json(j); }).find("study.seed"), std::string::npos);
  EXPECT_THROW(io::parse_json("{not json", "inline"), ValidationError);
  EXPECT_THROW(io::load_study(scratch("missing") / "none.json"), ValidationError);
}

TEST(PriorIo, RoundTripAndPartialOverride) {
  pk::MetaStudyPrior p;
  p.dose_range = {2.0, 20.0};
  p.oral_probability = 0.25;
  const auto back = io::prior_from_json(io::prior_to_json(p));
  EXPECT_EQ(io::prior_to_json(back), io::prior_to_json(p));
  const auto partial = io::prior_from_json(nlohmann::json{{"time_num_steps", 200}});
  EXPECT_EQ(partial.time_num_steps, 200);
  EXPECT_EQ(partial.dose_range.hi, pk::MetaStudyPrior{}.dose_range.hi);
}

TEST(ConfigIo, ModelAndTrainRoundTrip) {
  auto mc = flow::ModelConfig::miniature();
  mc.dropout = 0.05;
  EXPECT_EQ(io::model_config_to_json(io::model_config_from_json(io::model_config_to_json(mc))),
            io::model_config_to_json(mc));
  flow::TrainConfig tc;
  tc.epochs = 7;
  tc.base_lr = 3e-4;
  EXPECT_EQ(io::train_config_to_json(io::train_config_from_json(io::train_config_to_json(tc))),
            io::train_config_to_json(tc));
  EXPECT_THROW(io::train_config_from_json(nlohmann::json{{"batch_size", 0}}), ValidationError);
  EXPECT_THROW(io::model_config_from_json(nlohmann::json{{"hidden", 30}, {"heads", 4}}), ValidationError);
}

class CheckpointIo : public ::testing::Test {
 protected:
  void SetUp() override {
    dir = scratch("ckpt");
    Rng rng(42);
    ck.config = flow::ModelConfig::gradcheck();
    ck.params = flow::FlowModel(ck.config, rng).params();
    ck.master_seed = 99;
    ck.training = {{"epochs_completed", 3}};
    io::save_checkpoint(dir, ck);
  }
  fs::path dir;
  io::Checkpoint ck;
};

TEST_F(CheckpointIo, RoundTripIsBitwise) {
  const auto back = io::load_checkpoint(dir);
  EXPECT_EQ(back.params, ck.params);
  EXPECT_EQ(back.master_seed, 99u);
  EXPECT_EQ(back.training, ck.training);
  EXPECT_EQ(fs::file_size(dir / "params.bin"), 8 * ck.params.total_size());
}

TEST_F(CheckpointIo, TruncatedBlobRejected) {
  fs::resize_file(dir / "params.bin", fs::file_size(dir / "params.bin") - 8);
  const auto msg = message_of([&] { io::load_checkpoint(dir); });
  EXPECT_NE(msg.find("bytes"), std::string::npos) << msg;
}

TEST_F(CheckpointIo, WrongShapeRejected) {
  auto m = io::read_json(dir / "manifest.json");
  m["params"][0]["shape"][0] = m["params"][0]["shape"][0].get<std::size_t>() + 1;
  io::write_text(dir / "manifest.json", m.dump());
  const auto msg = message_of([&] { io::load_checkpoint(dir); });
  EXPECT_NE(msg.find("does not match"), std::string::npos) << msg;
}

TEST_F(CheckpointIo, VersionMismatchRejected) {
  auto m = io::read_json(dir / "manifest.json");
  m["format_version"] = io::kCheckpointVersion + 1;
  io::write_text(dir / "manifest.json", m.dump());
  const auto msg = message_of([&] { io::load_checkpoint(dir); });
  EXPECT_NE(msg.find("version"), std::string::npos) << msg;
}

TEST(LossHistory, CsvLayout) {
  const auto csv = io::loss_history_csv({{1, 0.5, 1e-3}, {2, 0.25, 1e-3}});
  EXPECT_EQ(csv, "epoch,mean_loss,lr\n1,0.5,0.001\n2,0.25,0.001\n");
}
