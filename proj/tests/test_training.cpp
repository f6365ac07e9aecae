#include <gtest/gtest.h>

#include "oracles.hpp"
#include "reprog/training.hpp"
#include "test_util.hpp"

using namespace reprog;

namespace {

constexpr auto P = LabelState::kPositive;
constexpr auto N = LabelState::kNegative;
constexpr auto M = LabelState::kMissing;

template <typename E>
void expect_code(ErrorCode code, E&& expr) {
  try {
    expr();
    FAIL() << "expected " << error_code_name(code);
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), code) << e.what();
  }
}

template <typename T>
Model<T> tiny_model(ReprogrammerKind kind, std::uint64_t seed = 1, std::uint64_t backbone_seed = 3) {
  ToyBackboneOptions o;
  o.dims = {16, 16};
  o.k_src = 5;
  o.seed = backbone_seed;
  auto bb = std::make_shared<const ToyBackbone<T>>(o);
  ReprogrammerOptions ro;
  ro.cnn_hidden = 2;
  auto rp = make_reprogrammer<T>(kind, {16, 16}, ro, seed);
  Rng rng(seed + 100);
  return Model<T>(std::move(rp), bb, std::make_unique<FclLabelMapper<T>>(FclMapper<T>::initialized(5, 3, rng)));
}

template <typename T>
std::vector<Matrix<T>> random_batch(std::size_t n, Rng& rng) {
  std::vector<Matrix<T>> out;
  for (std::size_t i = 0; i < n; ++i) {
    Matrix<T> m(16, 16);
    for (auto& v : m.span()) v = static_cast<T>(rng.normal());
    out.push_back(std::move(m));
  }
  return out;
}

template <typename T>
std::vector<const Matrix<T>*> pointers(const std::vector<Matrix<T>>& v) {
  std::vector<const Matrix<T>*> out;
  for (const auto& m : v) out.push_back(&m);
  return out;
}

std::vector<const TriStateLabelVector*> pointers(const std::vector<TriStateLabelVector>& v) {
  std::vector<const TriStateLabelVector*> out;
  for (const auto& l : v) out.push_back(&l);
  return out;
}

ExperimentConfig tiny_config() {
  ExperimentConfig cfg;
  cfg.data.source = "synthetic";
  auto& s = cfg.data.synthetic;
  s.n_clips = 64;
  s.n_classes = 2;
  s.frames = 32;
  s.bands = 32;
  s.blob_frames = 8;
  s.floor_level = -0.5;
  s.seed = 4;
  cfg.reprogrammer = ReprogrammerKind::kCnn;
  cfg.reprogrammer_options.cnn_hidden = 2;
  cfg.backbone.toy.k_src = 8;
  cfg.plan.batch_size = 8;
  cfg.plan.total_epochs = 4;
  cfg.plan.warm_epochs = 2;
  cfg.plan.halve_every = 1;
  cfg.plan.lr0 = 1e-2;
  cfg.plan.repeats = 1;
  return cfg;
}

std::vector<ClipRecord> tiny_records(const ExperimentConfig& cfg, std::uint64_t seed) {
  return make_validation_split(generate_synthetic(cfg.data.synthetic), cfg.data.val_fraction,
                               derive_seed(seed, kSeedValSplit));
}

}  // namespace

TEST(Loss, Examples) {
  const std::vector<double> half = {0.5};
  EXPECT_NEAR(partial_bce(half, {P}), std::log(2.0), 1e-15);
  const std::vector<double> three = {0.2, 0.9, 0.4};
  EXPECT_EQ(partial_bce(three, {M, M, M}), 0.0);
  EXPECT_NEAR(partial_bce(three, {P, M, N}), -(std::log(0.2) + std::log(0.6)) / 2, 1e-15);
  // clamped at the boundary instead of producing infinities
  const std::vector<double> edge = {0.0, 1.0};
  EXPECT_NEAR(partial_bce(edge, {P, N}), -std::log(1e-7), 1e-9);
  expect_code(ErrorCode::kLengthMismatch, [&] { partial_bce(three, {P, N}); });
}

TEST(Loss, MatchesElementLoopOracle) {
  Rng rng(31);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + rng.below(6), C = 1 + rng.below(7);
    const double missing = trial % 5 == 0 ? 1.0 : trial % 5 == 1 ? 0.0 : rng.uniform();
    std::vector<std::vector<double>> preds;
    std::vector<TriStateLabelVector> labels;
    for (std::size_t i = 0; i < n; ++i) {
      preds.push_back(oracle::random_probs(C, rng));
      labels.push_back(oracle::random_labels(C, missing, rng));
    }
    const auto batch = partial_bce_batch(preds, pointers(labels));
    ASSERT_NEAR(batch.loss, oracle::partial_bce(preds, labels), 1e-12) << trial;
    ASSERT_NEAR(partial_bce(preds[0], labels[0]), oracle::partial_bce({preds[0]}, {labels[0]}), 1e-12);
    if (missing == 1.0) {
      ASSERT_EQ(batch.loss, 0.0);
      ASSERT_EQ(batch.observed, 0u);
    }
    if (missing == 0.0) {
      std::vector<std::vector<int>> y;
      for (const auto& l : labels) {
        std::vector<int> row;
        for (auto s : l) row.push_back(s == P);
        y.push_back(row);
      }
      ASSERT_NEAR(batch.loss, oracle::mean_bce(preds, y), 1e-12);
    }
  }
}

TEST(Loss, MissingEntriesDoNotChangeTheLoss) {
  std::vector<std::vector<double>> preds = {{0.3, 0.8}, {0.6, 0.1}};
  std::vector<TriStateLabelVector> labels = {{P, N}, {N, P}};
  const double base = partial_bce_batch(preds, pointers(labels)).loss;
  preds.push_back({0.99, 0.01});
  labels.push_back({M, M});
  for (auto& p : preds) p.push_back(0.42);
  for (auto& l : labels) l.push_back(M);
  EXPECT_DOUBLE_EQ(partial_bce_batch(preds, pointers(labels)).loss, base);
}

TEST(Loss, GradientMatchesFiniteDifferences) {
  Rng rng(7);
  std::vector<std::vector<double>> preds;
  std::vector<TriStateLabelVector> labels;
  for (int i = 0; i < 4; ++i) {
    std::vector<double> p(5);
    for (auto& v : p) v = rng.uniform(0.05, 0.95);
    preds.push_back(p);
    labels.push_back(oracle::random_labels(5, 0.4, rng));
  }
  const auto g = partial_bce_batch(preds, pointers(labels));
  for (std::size_t n = 0; n < 4; ++n) {
    for (std::size_t c = 0; c < 5; ++c) {
      const double fd = testutil::central_diff5(&preds[n][c], 1e-6, [&] { return partial_bce_batch(preds, pointers(labels)).loss; });
      if (labels[n][c] == M) {
        EXPECT_EQ(g.grad[n][c], 0.0);
        EXPECT_LE(std::abs(fd), 1e-9);
      } else {
        EXPECT_LE(testutil::rel_err(g.grad[n][c], fd), 1e-8) << n << "," << c;
      }
    }
  }
  // clamped predictions carry no gradient
  const std::vector<std::vector<double>> edge = {{0.0, 1.0}};
  const std::vector<TriStateLabelVector> el = {{P, N}};
  const auto ge = partial_bce_batch(edge, pointers(el));
  EXPECT_EQ(ge.grad[0][0], 0.0);
  EXPECT_EQ(ge.grad[0][1], 0.0);
}

TEST(Schedule, ExactTable) {
  const TrainingPlan plan;
  for (std::size_t e = 1; e <= 50; ++e) {
    double expected = 5e-5;
    if (e > 10) expected = 5e-5 / std::pow(2.0, std::ceil(static_cast<double>(e - 10) / 5.0));
    EXPECT_EQ(lr_at_epoch(e, plan), expected) << e;
  }
  EXPECT_EQ(lr_at_epoch(1, plan), 5e-5);
  EXPECT_EQ(lr_at_epoch(10, plan), 5e-5);
  EXPECT_EQ(lr_at_epoch(11, plan), 2.5e-5);
  EXPECT_EQ(lr_at_epoch(12, plan), 2.5e-5);
  EXPECT_EQ(lr_at_epoch(16, plan), 1.25e-5);
  EXPECT_EQ(lr_at_epoch(46, plan), 1.953125e-7);
  EXPECT_EQ(lr_at_epoch(50, plan), 1.953125e-7);
  for (std::size_t e = 2; e <= 50; ++e) EXPECT_LE(lr_at_epoch(e, plan), lr_at_epoch(e - 1, plan));
  expect_code(ErrorCode::kEpochOutOfRange, [&] { lr_at_epoch(0, plan); });
  expect_code(ErrorCode::kEpochOutOfRange, [&] { lr_at_epoch(51, plan); });
}

TEST(Adam, TwoStepsClosedForm) {
  Parameter<double> p("p", {2});
  p.value = {1.0, -2.0};
  p.grad = {0.3, -1e-3};
  Adam<double> adam({&p}, 0.9, 0.999, 1e-8);
  adam.step(0.01);
  // first step: bias-corrected moments are g and g^2
  EXPECT_NEAR(p.value[0], 1.0 - 0.01 * 0.3 / (0.3 + 1e-8), 1e-15);
  EXPECT_NEAR(p.value[1], -2.0 + 0.01 * 1e-3 / (1e-3 + 1e-8), 1e-15);
  const double v0 = p.value[0];
  p.grad = {-0.2, 0.5};
  adam.step(0.005);
  const double m = 0.9 * (0.1 * 0.3) + 0.1 * -0.2;
  const double v = 0.999 * (0.001 * 0.09) + 0.001 * 0.04;
  const double mhat = m / (1 - 0.81), vhat = v / (1 - 0.998001);
  EXPECT_NEAR(p.value[0], v0 - 0.005 * mhat / (std::sqrt(vhat) + 1e-8), 1e-15);
  EXPECT_EQ(adam.steps(), 2u);
}

TEST(TrainStep, ChainGradientMatchesFiniteDifferences) {
  Rng rng(3);
  for (auto kind : {ReprogrammerKind::kNoise, ReprogrammerKind::kCnn}) {
    auto model = tiny_model<double>(kind);
    for (auto* p : model.reprogrammer().parameters()) {
      for (auto& v : p->value) v += 0.1 * rng.normal();
    }
    const auto xs = random_batch<double>(3, rng);
    const auto batch = pointers(xs);
    const std::vector<TriStateLabelVector> labels = {{P, N, M}, {M, P, P}, {N, M, N}};
    Adam<double> adam(model.trainable(), 0.9, 0.999, 1e-8);
    // a zero learning rate leaves the accumulated gradients in place without moving anything
    train_step(model, adam, std::span<const Matrix<double>* const>(batch), pointers(labels), 0.0);
    auto loss = [&] {
      const auto probs = model.predict(batch, Mode::kTrain);
      return partial_bce_batch(probs, pointers(labels)).loss;
    };
    EXPECT_LE(testutil::max_grad_error(model.trainable(), loss), 1e-6) << kind_name(kind);
  }
}

TEST(TrainStep, AllMissingBatchChangesNothing) {
  auto model = tiny_model<float>(ReprogrammerKind::kCnn);
  Rng rng(4);
  const auto xs = random_batch<float>(2, rng);
  const auto batch = pointers(xs);
  const std::vector<TriStateLabelVector> labels = {{M, M, M}, {M, M, M}};
  std::vector<std::vector<float>> before;
  for (auto* p : model.trainable()) before.push_back(p->value);
  Adam<float> adam(model.trainable(), 0.9, 0.999, 1e-8);
  const auto r = train_step(model, adam, std::span<const Matrix<float>* const>(batch), pointers(labels), 1e-2);
  EXPECT_EQ(r.loss, 0.0);
  EXPECT_EQ(r.observed, 0u);
  EXPECT_FALSE(r.updated);
  EXPECT_EQ(adam.steps(), 0u);
  const auto params = model.trainable();
  for (std::size_t i = 0; i < params.size(); ++i) EXPECT_EQ(params[i]->value, before[i]);
  for (const auto& m : adam.first_moments()) {
    for (float v : m) EXPECT_EQ(v, 0.0f);
  }
}

TEST(TrainStep, UpdatesOnlyTrainableStateAndKeepsBackboneFrozen) {
  auto model = tiny_model<float>(ReprogrammerKind::kNoise);
  const auto fp = model.backbone().fingerprint();
  Rng rng(5);
  const auto xs = random_batch<float>(4, rng);
  const auto batch = pointers(xs);
  const std::vector<TriStateLabelVector> labels = {{P, N, N}, {N, P, M}, {M, M, P}, {N, N, N}};
  Adam<float> adam(model.trainable(), 0.9, 0.999, 1e-8);
  const auto noise_before = model.trainable()[0]->value;
  double first = 0, last = 0;
  for (int i = 0; i < 30; ++i) {
    const auto r = train_step(model, adam, std::span<const Matrix<float>* const>(batch), pointers(labels), 1e-2);
    if (i == 0) first = r.loss;
    last = r.loss;
    EXPECT_EQ(r.observed, 9u);
  }
  EXPECT_LT(last, first);
  EXPECT_NE(model.trainable()[0]->value, noise_before);
  EXPECT_EQ(model.backbone().fingerprint(), fp);
}

TEST(TrainStep, NonFiniteLossNamesTheClips) {
  auto model = tiny_model<double>(ReprogrammerKind::kIdentity);
  static_cast<FclLabelMapper<double>&>(model.mapper()).fcl().weight.value[2] = std::nan("");
  Rng rng(6);
  const auto xs = random_batch<double>(2, rng);
  const auto batch = pointers(xs);
  const std::vector<TriStateLabelVector> labels = {{P, N, N}, {N, P, M}};
  const std::vector<std::string> ids = {"clip_a", "clip_b"};
  Adam<double> adam(model.trainable(), 0.9, 0.999, 1e-8);
  try {
    train_step(model, adam, std::span<const Matrix<double>* const>(batch), pointers(labels), 1e-3, &ids);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kNonFiniteLoss);
    EXPECT_NE(std::string(e.what()).find("clip_a"), std::string::npos);
  }
}

TEST(Model, NoiseAtInitEqualsIdentityExactly) {
  auto cfg = tiny_config();
  auto backbone = make_backbone<float>(cfg);
  const auto vocab = Vocabulary::numbered(2);
  cfg.reprogrammer = ReprogrammerKind::kNoise;
  auto noise = build_model<float>(cfg, backbone, vocab, 11);
  cfg.reprogrammer = ReprogrammerKind::kIdentity;
  auto identity = build_model<float>(cfg, backbone, vocab, 11);
  Rng rng(12);
  std::vector<Matrix<float>> xs;
  for (int i = 0; i < 5; ++i) {
    Matrix<float> m(32, 32);
    for (auto& v : m.span()) v = static_cast<float>(3 * rng.normal());
    xs.push_back(std::move(m));
  }
  const auto batch = pointers(xs);
  EXPECT_EQ(noise.predict(batch), identity.predict(batch));
  EXPECT_EQ(noise.param_count(), 32u * 32 + 8 * 2 + 2);
  expect_code(ErrorCode::kShapeMismatch, [&] {
    Model<float>(make_reprogrammer<float>(ReprogrammerKind::kNoise, {16, 32}, {}, 1), backbone,
                 std::make_unique<FclLabelMapper<float>>(FclMapper<float>(8, 2)));
  });
}

TEST(Checkpoint, RoundTripRestoresPredictions) {
  auto model = tiny_model<float>(ReprogrammerKind::kCnn, 1);
  Rng rng(8);
  const auto xs = random_batch<float>(3, rng);
  const auto batch = pointers(xs);
  const std::vector<TriStateLabelVector> labels = {{P, N, M}, {M, P, P}, {N, M, N}};
  Adam<float> adam(model.trainable(), 0.9, 0.999, 1e-8);
  for (int i = 0; i < 3; ++i) train_step(model, adam, std::span<const Matrix<float>* const>(batch), pointers(labels), 1e-2);

  Container c;
  c.config_text = "a = 1\n";
  c.meta["epoch"] = "3";
  store_model_state(c, model, &adam);
  const auto bytes = encode(c);
  const auto back = decode(bytes);
  EXPECT_EQ(back.config_text, c.config_text);
  EXPECT_EQ(back.meta, c.meta);
  ASSERT_EQ(back.blocks.size(), c.blocks.size());
  EXPECT_EQ(encode(back), bytes);

  auto fresh = tiny_model<float>(ReprogrammerKind::kCnn, 2);
  Adam<float> fresh_adam(fresh.trainable(), 0.9, 0.999, 1e-8);
  EXPECT_NE(fresh.predict(batch), model.predict(batch));
  load_model_state(back, fresh, &fresh_adam);
  EXPECT_EQ(fresh.predict(batch), model.predict(batch));
  EXPECT_EQ(fresh_adam.steps(), 3u);
  EXPECT_EQ(fresh_adam.second_moments(), adam.second_moments());
  // continuing both runs stays in lockstep
  train_step(model, adam, std::span<const Matrix<float>* const>(batch), pointers(labels), 1e-2);
  train_step(fresh, fresh_adam, std::span<const Matrix<float>* const>(batch), pointers(labels), 1e-2);
  EXPECT_EQ(fresh.predict(batch), model.predict(batch));
}

TEST(Checkpoint, CorruptionIsDetected) {
  Container c;
  c.config_text = "x = 1\n";
  c.meta["k"] = "v";
  c.blocks.push_back({"param/w", {2, 3}, {1, 2, 3, 4, 5, 6}});
  auto bytes = encode(c);

  auto flipped = bytes;
  flipped[flipped.size() / 2] ^= 0x10;
  expect_code(ErrorCode::kCheckpointCorrupt, [&] { decode(flipped); });

  auto truncated = bytes;
  truncated.resize(bytes.size() - 12);
  expect_code(ErrorCode::kCheckpointCorrupt, [&] { decode(truncated); });

  // damage the block data and re-seal the file checksum: the per-block checksum still fires
  const std::string name = "param/w";
  const auto at = std::search(bytes.begin(), bytes.end(), name.begin(), name.end()) - bytes.begin();
  const std::size_t data_at = static_cast<std::size_t>(at) + name.size() + 4 + 2 * 8;
  auto resealed = bytes;
  resealed[data_at + 5] ^= 0x01;
  Crc64 crc;
  crc.process_bytes(resealed.data(), resealed.size() - 8);
  auto sum = crc.checksum();
  for (int i = 0; i < 8; ++i) resealed[resealed.size() - 8 + i] = static_cast<unsigned char>(sum >> (8 * i));
  try {
    decode(resealed);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kCheckpointCorrupt);
    EXPECT_NE(std::string(e.what()).find("param/w"), std::string::npos) << e.what();
  }

  auto model = tiny_model<float>(ReprogrammerKind::kNoise);
  Container empty;
  expect_code(ErrorCode::kCheckpointCorrupt, [&] { load_model_state(empty, model, static_cast<Adam<float>*>(nullptr)); });
}

TEST(Fit, DeterministicAndCheckpointMatchesTestScore) {
  const auto cfg = tiny_config();
  const auto records = tiny_records(cfg, 7);
  const auto vocab = Vocabulary::numbered(2);
  const SpectrogramStore store(cfg.frontend, {});
  auto backbone = make_backbone<float>(cfg);
  const auto a = fit<float>(cfg, records, vocab, store, backbone, 7);
  const auto b = fit<float>(cfg, records, vocab, store, backbone, 7);
  ASSERT_EQ(a.log.size(), 4u);
  for (std::size_t e = 0; e < a.log.size(); ++e) {
    EXPECT_EQ(a.log[e].epoch, e + 1);
    EXPECT_EQ(a.log[e].lr, lr_at_epoch(e + 1, cfg.plan));
    EXPECT_EQ(a.log[e].train_loss, b.log[e].train_loss);
    EXPECT_EQ(a.log[e].val_macro_f1, b.log[e].val_macro_f1);
  }
  EXPECT_EQ(encode(a.checkpoint), encode(b.checkpoint));
  EXPECT_EQ(a.checkpoint.meta_at("backbone_fingerprint"), hex64(backbone->fingerprint()));
  EXPECT_EQ(a.best_epoch, std::stoul(a.checkpoint.meta_at("epoch")));
  double best = -1;
  for (const auto& m : a.log) best = std::max(best, m.val_macro_f1);
  EXPECT_EQ(a.best_val_macro_f1, best);

  auto restored = restore_model<float>(a.checkpoint, backbone, vocab);
  const auto test = score_predictions(
      predict_split(restored, records, split_indices(records, SplitTag::kTest), store, 8), cfg.threshold);
  EXPECT_EQ(test.macro_f1, a.test.macro_f1);
  EXPECT_EQ(a.checkpoint.meta_at("test_macro_f1"), detail::format_double(a.test.macro_f1));

  const auto c = fit<float>(cfg, records, vocab, store, backbone, 8);
  EXPECT_NE(encode(c.checkpoint), encode(a.checkpoint));

  auto other_cfg = cfg;
  other_cfg.backbone.toy.seed = 99;
  expect_code(ErrorCode::kFingerprintMismatch,
              [&] { restore_model<float>(a.checkpoint, make_backbone<float>(other_cfg), vocab); });
}

TEST(Fit, RequiresTrainAndValidation) {
  const auto cfg = tiny_config();
  auto records = generate_synthetic(cfg.data.synthetic);
  const SpectrogramStore store(cfg.frontend, {});
  const auto vocab = Vocabulary::numbered(2);
  expect_code(ErrorCode::kEmptySplit, [&] { fit<float>(cfg, records, vocab, store, make_backbone<float>(cfg), 1); });
  for (auto& r : records) r.split = SplitTag::kTest;
  expect_code(ErrorCode::kEmptySplit, [&] { fit<float>(cfg, records, vocab, store, make_backbone<float>(cfg), 1); });
}

TEST(Fit, SummaryUsesSampleStandardDeviation) {
  std::vector<FitResult> runs(3);
  runs[0].test.macro_f1 = 0.5;
  runs[1].test.macro_f1 = 0.7;
  runs[2].test.macro_f1 = 0.9;
  const auto s = summarize(runs);
  EXPECT_NEAR(s.mean_test_macro_f1, 0.7, 1e-15);
  EXPECT_NEAR(s.std_test_macro_f1, 0.2, 1e-15);
  std::vector<FitResult> one(1);
  one[0].test.macro_f1 = 0.4;
  EXPECT_EQ(summarize(one).std_test_macro_f1, 0.0);
}

TEST(Seeds, StreamsAreIndependent) {
  EXPECT_EQ(derive_seed(5, kSeedMapper), derive_seed(5, kSeedMapper));
  EXPECT_NE(derive_seed(5, kSeedMapper), derive_seed(5, kSeedReprogrammer));
  EXPECT_NE(derive_seed(5, kSeedMapper), derive_seed(6, kSeedMapper));
}
