#include <gtest/gtest.h>

#include "reprog/config.hpp"
#include "reprog/run.hpp"
#include "test_util.hpp"

using namespace reprog;

namespace {

template <typename E>
void expect_code(ErrorCode code, E&& expr) {
  try {
    expr();
    FAIL() << "expected " << error_code_name(code);
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), code) << e.what();
  }
}

const std::filesystem::path kConfigs = std::filesystem::path(REPROG_SOURCE_DIR) / "configs";

}  // namespace

TEST(Config, ParsesAssignmentsAndComments) {
  const auto cfg = parse_config(
      "# comment\n"
      "reprogrammer.kind = cnn   # trailing\n"
      "\n"
      "reprogrammer.cnn_hidden=72\n"
      "train.lr0 = 1e-3\n"
      "reprogrammer.unet_widths = 2, 4, 8\n"
      "train.lr0 = 2e-3\n");
  EXPECT_EQ(cfg.reprogrammer, ReprogrammerKind::kCnn);
  EXPECT_EQ(cfg.reprogrammer_options.cnn_hidden, 72u);
  EXPECT_EQ(cfg.plan.lr0, 2e-3);
  EXPECT_EQ(cfg.reprogrammer_options.unet_widths, (std::array<std::size_t, 3>{2, 4, 8}));
  EXPECT_EQ(cfg.plan.total_epochs, 50u);
}

TEST(Config, RejectsBadInput) {
  expect_code(ErrorCode::kConfigInvalid, [] { parse_config("train.lr = 1\n"); });
  expect_code(ErrorCode::kConfigInvalid, [] { parse_config("train.lr0 1\n"); });
  expect_code(ErrorCode::kConfigInvalid, [] { parse_config("train.epochs = -3\n"); });
  expect_code(ErrorCode::kConfigInvalid, [] { parse_config("train.lr0 = fast\n"); });
  expect_code(ErrorCode::kConfigInvalid, [] { parse_config("reprogrammer.cnn_relu = maybe\n"); });
  expect_code(ErrorCode::kConfigInvalid, [] { parse_config("reprogrammer.unet_widths = 1,2\n"); });
  expect_code(ErrorCode::kConfigInvalid, [] { parse_config("reprogrammer.kind = transformer\n"); });
  try {
    parse_config("data.sauce = x\n");
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("data.sauce"), std::string::npos);
  }
  ExperimentConfig c;
  expect_code(ErrorCode::kConfigInvalid, [&] { apply_override(c, "train.lr0"); });
  apply_override(c, "train.seed = 9");
  EXPECT_EQ(c.plan.seed, 9u);
}

TEST(Config, CanonicalTextRoundTrips) {
  auto cfg = parse_config("reprogrammer.kind = noise\ntrain.lr0 = 0.1\nsynthetic.level_jitter = 0.30000000000000004\n");
  const auto text = cfg.canonical_text();
  const auto back = parse_config(text);
  EXPECT_EQ(back.canonical_text(), text);
  EXPECT_EQ(back.hash(), cfg.hash());
  EXPECT_EQ(back.data.synthetic.level_jitter, 0.30000000000000004);
  // every key appears exactly once
  for (const auto& key : config_keys()) EXPECT_NE(text.find(key + " = "), std::string::npos) << key;
  cfg.plan.seed = 2;
  EXPECT_NE(cfg.hash(), back.hash());
}

TEST(Config, Validation) {
  ExperimentConfig ok;
  EXPECT_NO_THROW(ok.validate());
  auto bad = [&](const std::string& assignment) {
    auto c = ok;
    apply_override(c, assignment);
    expect_code(ErrorCode::kConfigInvalid, [&] { c.validate(); });
  };
  bad("train.batch_size = 0");
  bad("train.lr0 = 0");
  bad("eval.threshold = 1");
  bad("backbone.kind = vgg");
  bad("data.source = youtube");
  bad("data.val_fraction = 1.5");
  bad("frontend.hop_ms = 40");
  bad("synthetic.frames = 100");
  bad("mapper.kind = many_to_one");
  auto unet = ok;
  apply_override(unet, "synthetic.frames = 36");
  apply_override(unet, "synthetic.blob_frames = 8");
  expect_code(ErrorCode::kConfigInvalid, [&] { unet.validate(); });
}

TEST(Config, PresetsLoadAndValidate) {
  std::size_t n = 0;
  for (const auto& entry : std::filesystem::directory_iterator(kConfigs)) {
    if (entry.path().extension() != ".cfg") continue;
    ++n;
    const auto cfg = load_config_file(entry.path());
    EXPECT_NO_THROW(cfg.validate()) << entry.path();
    EXPECT_EQ(parse_config(cfg.canonical_text()).hash(), cfg.hash());
  }
  EXPECT_GE(n, 8u);
  const auto ast = load_config_file(resolve_config_path("ast_cnn", {kConfigs}));
  EXPECT_EQ(ast.backbone.kind, "ast");
  EXPECT_EQ(ast.input_dims(), (Dims{1024, 128}));
  EXPECT_EQ(ast.reprogrammer_options.cnn_hidden, 72u);
  EXPECT_EQ(ast.plan.lr0, 5e-5);
  EXPECT_EQ(load_config_file(resolve_config_path("synth_unet", {kConfigs})).reprogrammer, ReprogrammerKind::kUnet);
  expect_code(ErrorCode::kConfigInvalid, [] { resolve_config_path("no_such_preset", {kConfigs}); });
  expect_code(ErrorCode::kConfigInvalid, [] { load_config_file("/nonexistent/x.cfg"); });
}
