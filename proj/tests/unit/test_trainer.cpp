#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "nlran/errors.hpp"
#include "nlran/phantom.hpp"
#include "nlran/trainer.hpp"

using namespace nlran;
namespace fs = std::filesystem;

namespace {

NetworkConfig micro_config() {
  NetworkConfig cfg = NetworkConfig::resnet_baseline();
  cfg.base_channels = 2;
  cfg.input_shape = {4, 8, 8};
  return cfg;
}

/// Class k samples have a bright block in octant k plus noise.
std::vector<Sample> toy_samples(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Sample> out;
  for (std::size_t i = 0; i < n; ++i) {
    Sample s;
    s.id = "toy" + std::to_string(i);
    s.label = int(i % 3);
    s.input = Tensor<float>({1, 4, 8, 8});
    for (std::size_t z = 0; z < 4; ++z)
      for (std::size_t y = 0; y < 8; ++y)
        for (std::size_t x = 0; x < 8; ++x) {
          const bool lit = (y / 4 + 2 * (x / 4)) == std::size_t(s.label);
          s.input.at({0, z, y, x}) = float((lit ? 0.8 : 0.1) + 0.05 * rng.uniform());
        }
    out.push_back(std::move(s));
  }
  return out;
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path temp_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "nlran_trainer_test" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST(TrainConfig, ValidationAndJson) {
  TrainConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  EXPECT_EQ(cfg.learning_rate, 0.001);
  EXPECT_EQ(cfg.batch_size, 6u);
  auto bad = cfg;
  bad.learning_rate = 0.0;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = cfg;
  bad.batch_size = 0;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = cfg;
  bad.patience = 0;
  EXPECT_THROW(bad.validate(), ConfigError);
  const auto j = nlohmann::json{{"learning_rate", 0.01}, {"seed", 5}};
  const auto parsed = TrainConfig::from_json(j);
  EXPECT_EQ(parsed.learning_rate, 0.01);
  EXPECT_EQ(parsed.seed, 5u);
  EXPECT_EQ(parsed.batch_size, 6u);
  EXPECT_EQ(TrainConfig::from_json(cfg.to_json()).to_json(), cfg.to_json());
  EXPECT_THROW(TrainConfig::from_json(nlohmann::json{{"weight_decay", 0.1}}), ConfigError);
}

TEST(Sgd, HandArithmetic) {
  Tensor<double> w({1}, 1.0);
  sgd_step(w, Tensor<double>({1}, 2.0), 0.1);
  EXPECT_DOUBLE_EQ(w[0], 0.8);
  Tensor<double> z({3}, {1.0, -2.0, 3.0});
  sgd_step(z, Tensor<double>({3}, 0.0), 0.5);
  EXPECT_EQ(z.storage(), (std::vector<double>{1.0, -2.0, 3.0}));
  Tensor<double> a({1}, 1.0), b({1}, 1.0);
  sgd_step(a, Tensor<double>({1}, 3.0), 0.1);
  sgd_step(a, Tensor<double>({1}, 3.0), 0.1);
  sgd_step(b, Tensor<double>({1}, 3.0), 0.2);
  EXPECT_NEAR(a[0], b[0], 1e-15);
  EXPECT_THROW(sgd_step(a, Tensor<double>({2}), 0.1), ShapeError);
}

TEST(Sgd, DescendsQuadratic) {
  ParameterStore<double> store;
  auto& p = store.create("w", Tensor<double>({1}, 3.0));
  SgdOptimizer<double> opt(store, 0.1);
  double prev = 9.0;
  for (int i = 0; i < 5; ++i) {
    store.zero_grad();
    Tape<double> t;
    auto w = t.parameter(p);
    t.backward(ops::mul(w, w));
    opt.step();
    const double now = p.value[0] * p.value[0];
    EXPECT_LT(now, prev);
    prev = now;
  }
}

TEST(EarlyStopping, PatienceOneStopsAtEpochTwo) {
  EarlyStopping s(1);
  EXPECT_TRUE(s.update(1, 0.5));
  EXPECT_FALSE(s.should_stop());
  EXPECT_FALSE(s.update(2, 0.4));
  EXPECT_TRUE(s.should_stop());
  EXPECT_EQ(s.best_epoch(), 1u);
  EXPECT_EQ(s.best_metric(), 0.5);
}

TEST(EarlyStopping, TiesBrokenByLoss) {
  EarlyStopping s(3);
  s.update(1, 0.9, 0.5);
  EXPECT_TRUE(s.update(2, 0.9, 0.4));
  EXPECT_FALSE(s.update(3, 0.9, 0.4));
  EXPECT_FALSE(s.update(4, 0.8, 0.1));
  EXPECT_EQ(s.best_epoch(), 2u);
  EXPECT_THROW(EarlyStopping(0), ConfigError);
}

TEST(MakeBatch, StacksInOrder) {
  const auto samples = toy_samples(4, 1);
  const auto b = make_batch<float>(samples, {3, 1, 0, 2}, 1, 2);
  ASSERT_EQ(b.shape(), (Shape{2, 1, 4, 8, 8}));
  for (std::size_t i = 0; i < 256; ++i) {
    EXPECT_EQ(b[i], samples[1].input[i]);
    EXPECT_EQ(b[256 + i], samples[0].input[i]);
  }
}

TEST(Train, MemorizesTinySetAndKeepsBestEpoch) {
  const auto samples = toy_samples(9, 2);
  Model<float> model(micro_config(), 3);
  TrainConfig cfg;
  cfg.learning_rate = 0.01;
  cfg.momentum = 0.9;
  cfg.batch_size = 4;
  cfg.max_epochs = 150;
  cfg.patience = 150;
  std::size_t seen = 0;
  const auto dir = temp_dir("memorize");
  TrainOptions opts{(dir / "best.nlck").string(), (dir / "log.jsonl").string(), [&](const EpochRecord&) { ++seen; }};
  const auto log = train(model, samples, samples, cfg, opts);
  EXPECT_EQ(seen, log.epochs.size());
  double best = 0;
  for (const auto& e : log.epochs) best = std::max(best, e.val_f1);
  EXPECT_EQ(log.best_metric, best);
  const auto ev = evaluate(model, samples, 4);
  EXPECT_EQ(ev.report.f1, best);
  EXPECT_EQ(ev.report.accuracy, 1.0);
  for (const auto& row : ev.scores) EXPECT_NEAR(row[0] + row[1] + row[2], 1.0, 1e-6);
  const auto j = ev.report.to_json();
  for (const char* key : {"ACC", "P", "R", "F1", "AUC"}) EXPECT_TRUE(j.contains(key));
  EXPECT_EQ(read_checkpoint_info(opts.checkpoint_path).epoch, std::int64_t(log.best_epoch));

  std::ifstream in(opts.log_path);
  std::size_t lines = 0;
  for (std::string line; std::getline(in, line);) {
    EXPECT_TRUE(nlohmann::json::parse(line).contains("val_f1"));
    ++lines;
  }
  EXPECT_EQ(lines, log.epochs.size());
}

TEST(Train, DeterministicCheckpointsAndLogs) {
  const auto samples = toy_samples(8, 4);
  TrainConfig cfg;
  cfg.learning_rate = 0.02;
  cfg.batch_size = 3;
  cfg.max_epochs = 6;
  cfg.seed = 11;
  std::vector<std::string> bytes;
  std::vector<std::vector<double>> losses;
  for (int run = 0; run < 2; ++run) {
    const auto dir = temp_dir("det" + std::to_string(run));
    Model<float> model(micro_config(), 5);
    const auto log = train(model, samples, samples, cfg, {(dir / "best.nlck").string(), "", {}});
    bytes.push_back(read_bytes(dir / "best.nlck"));
    losses.emplace_back();
    for (const auto& e : log.epochs) losses.back().push_back(e.train_loss);
  }
  EXPECT_EQ(bytes[0], bytes[1]);
  EXPECT_EQ(losses[0], losses[1]);
}

TEST(Train, ResultsIndependentOfHeapLayout) {
  // Desk network on phantoms so the GEMMs hit Eigen's vectorized kernels.
  const NetworkConfig net;
  PhantomSpec spec;
  spec.count = 12;
  const auto samples = make_phantom_dataset(spec, {16, 32, 32, true}, {8, 1, 1}, 7).train;
  TrainConfig cfg;
  cfg.batch_size = 3;
  cfg.max_epochs = 2;
  std::vector<std::vector<double>> losses;
  std::vector<std::vector<char>> ballast;
  for (int run = 0; run < 3; ++run) {
    // Odd-sized live allocations move where later buffers land.
    ballast.emplace_back(std::size_t(run) * 40 + 8);
    Model<float> model(net, 1);
    const auto log = train(model, samples, samples, cfg);
    losses.emplace_back();
    for (const auto& e : log.epochs) losses.back().push_back(e.train_loss);
  }
  EXPECT_EQ(losses[0], losses[1]);
  EXPECT_EQ(losses[0], losses[2]);
}

TEST(Train, StopsOnPatienceAndMaxEpochs) {
  const auto samples = toy_samples(6, 6);
  TrainConfig cfg;
  cfg.max_epochs = 3;
  cfg.patience = 50;
  Model<float> a(micro_config(), 7);
  EXPECT_EQ(train(a, samples, samples, cfg).stop_reason, "max_epochs");
  cfg.max_epochs = 100;
  cfg.patience = 1;
  Model<float> b(micro_config(), 7);
  const auto log = train(b, samples, samples, cfg);
  EXPECT_EQ(log.stop_reason, "patience");
  EXPECT_LT(log.epochs.size(), 100u);
}

TEST(Train, ErrorsAreReported) {
  auto samples = toy_samples(6, 8);
  Model<float> model(micro_config(), 9);
  EXPECT_THROW(train(model, {}, samples, TrainConfig{}), DataError);
  EXPECT_THROW(train(model, samples, {}, TrainConfig{}), DataError);
  EXPECT_THROW(evaluate(model, {}, 6), DataError);
  for (auto& s : samples) s.input[5] = std::numeric_limits<float>::quiet_NaN();
  try {
    train(model, samples, samples, TrainConfig{});
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("epoch 1"), std::string::npos) << e.what();
  }
}
