#pragma once

// Masked-BCE optimization of reprogrammer + label mapper through a frozen backbone.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "reprog/backbone.hpp"
#include "reprog/config.hpp"
#include "reprog/container.hpp"
#include "reprog/dataio.hpp"
#include "reprog/error.hpp"
#include "reprog/labels.hpp"
#include "reprog/mapping.hpp"
#include "reprog/metrics.hpp"
#include "reprog/reprogrammer.hpp"
#include "reprog/rng.hpp"

namespace reprog {

inline constexpr double kProbClamp = 1e-7;

/// Mean binary cross-entropy over the observed entries of one clip; 0 when none are observed.
inline double partial_bce(std::span<const double> pred, const TriStateLabelVector& labels) {
  if (pred.size() != labels.size()) throw Error(ErrorCode::kLengthMismatch, "prediction/label length mismatch");
  double sum = 0;
  std::size_t n = 0;
  for (std::size_t c = 0; c < pred.size(); ++c) {
    if (labels[c] == LabelState::kMissing) continue;
    const double p = std::clamp(pred[c], kProbClamp, 1.0 - kProbClamp);
    sum -= labels[c] == LabelState::kPositive ? std::log(p) : std::log(1.0 - p);
    ++n;
  }
  return n > 0 ? sum / static_cast<double>(n) : 0.0;
}

struct BatchLoss {
  double loss = 0;
  std::size_t observed = 0;
  std::vector<std::vector<double>> grad;  // d loss / d pred, per clip
};

/// Loss averaged over every observed entry of the batch, with its gradient.
inline BatchLoss partial_bce_batch(const std::vector<std::vector<double>>& preds,
                                   const std::vector<const TriStateLabelVector*>& labels) {
  if (preds.size() != labels.size()) throw Error(ErrorCode::kLengthMismatch, "prediction/label count mismatch");
  BatchLoss out;
  out.grad.resize(preds.size());
  for (std::size_t n = 0; n < preds.size(); ++n) {
    if (preds[n].size() != labels[n]->size()) throw Error(ErrorCode::kLengthMismatch, "prediction/label length mismatch");
    out.grad[n].assign(preds[n].size(), 0.0);
    for (auto s : *labels[n]) out.observed += s != LabelState::kMissing;
  }
  if (out.observed == 0) return out;
  const double inv = 1.0 / static_cast<double>(out.observed);
  double sum = 0;
  for (std::size_t n = 0; n < preds.size(); ++n) {
    for (std::size_t c = 0; c < preds[n].size(); ++c) {
      const auto s = (*labels[n])[c];
      if (s == LabelState::kMissing) continue;
      const double raw = preds[n][c];
      const double p = std::clamp(raw, kProbClamp, 1.0 - kProbClamp);
      const bool inside = raw > kProbClamp && raw < 1.0 - kProbClamp;
      if (s == LabelState::kPositive) {
        sum -= std::log(p);
        if (inside) out.grad[n][c] = -inv / p;
      } else {
        sum -= std::log(1.0 - p);
        if (inside) out.grad[n][c] = inv / (1.0 - p);
      }
    }
  }
  out.loss = sum * inv;
  return out;
}

/// lr0 through warm_epochs, then halved every halve_every epochs (first halving
/// effective at epoch warm_epochs + 1).
inline double lr_at_epoch(std::size_t epoch, const TrainingPlan& plan) {
  if (epoch < 1 || epoch > plan.total_epochs) {
    throw Error(ErrorCode::kEpochOutOfRange, "epoch " + std::to_string(epoch) + " outside [1, " +
                                                 std::to_string(plan.total_epochs) + "]");
  }
  if (epoch <= plan.warm_epochs) return plan.lr0;
  const std::size_t halvings = (epoch - plan.warm_epochs + plan.halve_every - 1) / plan.halve_every;
  return std::ldexp(plan.lr0, -static_cast<int>(halvings));
}

/// Adam with bias correction. Moments are kept per parameter in the model's scalar type.
template <typename T>
class Adam {
 public:
  Adam(std::vector<Parameter<T>*> params, double beta1, double beta2, double eps)
      : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (auto* p : params_) {
      m_.emplace_back(p->size(), T(0));
      v_.emplace_back(p->size(), T(0));
    }
  }

  void step(double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = *params_[i];
      for (std::size_t k = 0; k < p.size(); ++k) {
        const double g = p.grad[k];
        const double m = beta1_ * m_[i][k] + (1.0 - beta1_) * g;
        const double v = beta2_ * v_[i][k] + (1.0 - beta2_) * g * g;
        m_[i][k] = static_cast<T>(m);
        v_[i][k] = static_cast<T>(v);
        p.value[k] = static_cast<T>(p.value[k] - lr * (m / c1) / (std::sqrt(v / c2) + eps_));
      }
    }
  }

  std::uint64_t steps() const noexcept { return t_; }
  void set_steps(std::uint64_t t) noexcept { t_ = t; }
  std::vector<std::vector<T>>& first_moments() noexcept { return m_; }
  std::vector<std::vector<T>>& second_moments() noexcept { return v_; }
  const std::vector<Parameter<T>*>& params() const noexcept { return params_; }

 private:
  std::vector<Parameter<T>*> params_;
  double beta1_, beta2_, eps_;
  std::vector<std::vector<T>> m_, v_;
  std::uint64_t t_ = 0;
};

/// reprogrammer -> frozen backbone -> label mapper.
template <typename T>
class Model {
 public:
  Model(std::unique_ptr<Reprogrammer<T>> reprogrammer, std::shared_ptr<const FrozenBackbone<T>> backbone,
        std::unique_ptr<Mapper<T>> mapper)
      : reprogrammer_(std::move(reprogrammer)), backbone_(std::move(backbone)), mapper_(std::move(mapper)) {
    if (!(reprogrammer_->dims() == backbone_->input_dims())) {
      throw Error(ErrorCode::kShapeMismatch, "reprogrammer dims differ from backbone input dims");
    }
  }

  Reprogrammer<T>& reprogrammer() noexcept { return *reprogrammer_; }
  const FrozenBackbone<T>& backbone() const noexcept { return *backbone_; }
  Mapper<T>& mapper() noexcept { return *mapper_; }

  std::vector<Parameter<T>*> trainable() {
    auto out = reprogrammer_->parameters();
    for (auto* p : mapper_->parameters()) out.push_back(p);
    return out;
  }

  std::vector<Parameter<T>*> buffers() { return reprogrammer_->buffers(); }

  std::size_t param_count() { return reprogrammer_->param_count() + mapper_->param_count(); }

  /// Target probabilities for each clip of the batch.
  std::vector<std::vector<T>> predict(std::span<const Matrix<T>* const> batch, Mode mode = Mode::kEval) {
    const auto xhat = reprogrammer_->forward(stack<T>(batch), mode);
    std::vector<std::vector<T>> out;
    out.reserve(batch.size());
    for (std::size_t n = 0; n < batch.size(); ++n) out.push_back(mapper_->forward(backbone_->score(unstack(xhat, n))));
    return out;
  }

 private:
  std::unique_ptr<Reprogrammer<T>> reprogrammer_;
  std::shared_ptr<const FrozenBackbone<T>> backbone_;
  std::unique_ptr<Mapper<T>> mapper_;
};

struct StepResult {
  double loss = 0;
  std::size_t observed = 0;
  bool updated = false;
};

/// One optimization step. Gradients reach the reprogrammer through
/// backbone.backprop_input; the backbone itself is never written. A batch without
/// observed labels leaves every parameter and optimizer moment untouched.
template <typename T>
StepResult train_step(Model<T>& model, Adam<T>& adam, std::span<const Matrix<T>* const> batch,
                      const std::vector<const TriStateLabelVector*>& labels, double lr,
                      const std::vector<std::string>* clip_ids = nullptr) {
  if (batch.size() != labels.size() || batch.empty()) throw Error(ErrorCode::kShapeMismatch, "bad batch");
  for (auto* p : model.trainable()) p->zero_grad();
  auto& rp = model.reprogrammer();
  const auto& bb = model.backbone();
  auto& mp = model.mapper();
  const auto xhat = rp.forward(stack<T>(batch), Mode::kTrain);
  std::vector<Matrix<T>> inputs;
  std::vector<std::vector<T>> scores;
  std::vector<std::vector<double>> preds;
  for (std::size_t n = 0; n < batch.size(); ++n) {
    inputs.push_back(unstack(xhat, n));
    scores.push_back(bb.score(inputs.back()));
    const auto p = mp.forward(scores.back());
    preds.emplace_back(p.begin(), p.end());
  }
  auto loss = partial_bce_batch(preds, labels);
  if (!std::isfinite(loss.loss)) {
    std::string ids;
    for (std::size_t n = 0; n < batch.size(); ++n) {
      if (clip_ids) ids += (ids.empty() ? "" : ", ") + (*clip_ids)[n];
    }
    throw Error(ErrorCode::kNonFiniteLoss, "non-finite loss" + (ids.empty() ? std::string() : " in clips " + ids));
  }
  StepResult res{loss.loss, loss.observed, false};
  if (loss.observed == 0) return res;
  Tensor<T> upstream(xhat.n(), 1, xhat.h(), xhat.w());
  for (std::size_t n = 0; n < batch.size(); ++n) {
    std::vector<T> dp(loss.grad[n].begin(), loss.grad[n].end());
    const auto ds = mp.backward(scores[n], dp);
    const auto dx = bb.backprop_input(inputs[n], ds);
    std::copy(dx.data(), dx.data() + dx.size(), upstream.plane(n, 0));
  }
  rp.backward(upstream, false);
  adam.step(lr);
  res.updated = true;
  return res;
}

// ---------------------------------------------------------------------------
// Construction from configuration

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  Rng r(seed * 0x100000001B3ULL + stream);
  return r.next_u64();
}

enum SeedStream : std::uint64_t { kSeedReprogrammer = 1, kSeedMapper = 2, kSeedShuffle = 3, kSeedValSplit = 4 };

template <typename T>
std::shared_ptr<const FrozenBackbone<T>> make_backbone(const ExperimentConfig& cfg) {
  if (cfg.backbone.kind == "ast") return std::make_shared<const AstAdapter<T>>(cfg.backbone.weights);
  ToyBackboneOptions opts = cfg.backbone.toy;
  opts.dims = cfg.input_dims();
  return std::make_shared<const ToyBackbone<T>>(opts);
}

inline std::size_t class_count(const ExperimentConfig& cfg) {
  return cfg.data.source == "synthetic" ? cfg.data.synthetic.n_classes : openmic_vocabulary().size();
}

inline std::size_t mapper_param_count(const ExperimentConfig& cfg, std::size_t k_src, std::size_t classes) {
  return cfg.mapper == MapperKind::kFcl ? k_src * classes + classes : 0;
}

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw Error(ErrorCode::kConfigInvalid, "cannot read '" + path.string() + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

template <typename T>
Model<T> build_model(const ExperimentConfig& cfg, std::shared_ptr<const FrozenBackbone<T>> backbone,
                     const Vocabulary& targets, std::uint64_t seed) {
  auto rp = make_reprogrammer<T>(cfg.reprogrammer, backbone->input_dims(), cfg.reprogrammer_options,
                                 derive_seed(seed, kSeedReprogrammer));
  std::unique_ptr<Mapper<T>> mapper;
  if (cfg.mapper == MapperKind::kFcl) {
    Rng rng(derive_seed(seed, kSeedMapper));
    mapper = std::make_unique<FclLabelMapper<T>>(FclMapper<T>::initialized(backbone->k_src(), targets.size(), rng));
  } else {
    auto a = parse_mapping(read_text_file(cfg.mapping_file), targets, backbone->k_src());
    mapper = std::make_unique<ManyToOneMapper<T>>(std::move(a), backbone->k_src());
  }
  return Model<T>(std::move(rp), std::move(backbone), std::move(mapper));
}

// ---------------------------------------------------------------------------
// Model state <-> container blocks

template <typename T>
void store_model_state(Container& c, Model<T>& model, Adam<T>* adam) {
  auto put = [&c](const std::string& prefix, const Parameter<T>& p, const std::vector<T>& data) {
    Block b{prefix + p.name, {}, {}};
    for (auto d : p.shape) b.shape.push_back(d);
    b.data.assign(data.begin(), data.end());
    c.blocks.push_back(std::move(b));
  };
  for (auto* p : model.trainable()) put("param/", *p, p->value);
  for (auto* p : model.buffers()) put("buffer/", *p, p->value);
  if (adam) {
    for (std::size_t i = 0; i < adam->params().size(); ++i) {
      put("adam.m/", *adam->params()[i], adam->first_moments()[i]);
      put("adam.v/", *adam->params()[i], adam->second_moments()[i]);
    }
    c.meta["adam_step"] = std::to_string(adam->steps());
  }
}

template <typename T>
void load_model_state(const Container& c, Model<T>& model, Adam<T>* adam) {
  auto fetch = [&c](const std::string& name, std::vector<T>& dst) {
    const Block* b = c.find(name);
    if (b == nullptr) throw Error(ErrorCode::kCheckpointCorrupt, "missing block '" + name + "'");
    if (b->data.size() != dst.size()) throw Error(ErrorCode::kCheckpointCorrupt, "block '" + name + "' has wrong size");
    std::copy(b->data.begin(), b->data.end(), dst.begin());
  };
  for (auto* p : model.trainable()) fetch("param/" + p->name, p->value);
  for (auto* p : model.buffers()) fetch("buffer/" + p->name, p->value);
  if (adam) {
    for (std::size_t i = 0; i < adam->params().size(); ++i) {
      fetch("adam.m/" + adam->params()[i]->name, adam->first_moments()[i]);
      fetch("adam.v/" + adam->params()[i]->name, adam->second_moments()[i]);
    }
    adam->set_steps(std::stoull(c.meta_at("adam_step")));
  }
}

// ---------------------------------------------------------------------------
// Evaluation and the full training run

struct Predictions {
  std::vector<std::vector<double>> probs;
  std::vector<const TriStateLabelVector*> labels;
};

template <typename T>
Predictions predict_split(Model<T>& model, const std::vector<ClipRecord>& records, const std::vector<std::size_t>& idx,
                          const SpectrogramStore& store, std::size_t batch_size) {
  Predictions out;
  for (std::size_t start = 0; start < idx.size(); start += batch_size) {
    const std::size_t end = std::min(idx.size(), start + batch_size);
    std::vector<std::shared_ptr<const Spectrogram<float>>> held;
    std::vector<Matrix<T>> converted;
    std::vector<const Matrix<T>*> batch;
    for (std::size_t i = start; i < end; ++i) {
      held.push_back(store.get(records[idx[i]]));
      if constexpr (std::is_same_v<T, float>) {
        batch.push_back(&held.back()->values);
      } else {
        converted.push_back(held.back()->values.template cast<T>());
      }
      out.labels.push_back(&records[idx[i]].labels);
    }
    if constexpr (!std::is_same_v<T, float>) {
      for (const auto& m : converted) batch.push_back(&m);
    }
    for (auto& p : model.predict(batch, Mode::kEval)) out.probs.emplace_back(p.begin(), p.end());
  }
  return out;
}

inline F1Breakdown score_predictions(const Predictions& p, double threshold) {
  std::vector<std::vector<std::uint8_t>> bin;
  std::vector<TriStateLabelVector> labels;
  for (std::size_t n = 0; n < p.probs.size(); ++n) {
    bin.push_back(binarize<double>(p.probs[n], threshold));
    labels.push_back(*p.labels[n]);
  }
  return macro_f1(bin, labels);
}

struct EpochMetrics {
  std::size_t epoch = 0;
  double lr = 0;
  double train_loss = 0;
  double val_macro_f1 = 0;
};

struct FitResult {
  std::uint64_t seed = 0;
  std::vector<EpochMetrics> log;
  std::size_t best_epoch = 0;
  double best_val_macro_f1 = -1;
  Container checkpoint;
  F1Breakdown test;
  std::size_t trainable_params = 0;
};

/// Resolves record spectrograms to the model's scalar type for one batch.
template <typename T>
struct BatchView {
  std::vector<std::shared_ptr<const Spectrogram<float>>> held;
  std::vector<Matrix<T>> converted;
  std::vector<const Matrix<T>*> inputs;
  std::vector<const TriStateLabelVector*> labels;
  std::vector<std::string> ids;
};

template <typename T>
BatchView<T> gather(const std::vector<ClipRecord>& records, std::span<const std::size_t> idx, const SpectrogramStore& store) {
  BatchView<T> v;
  for (auto i : idx) {
    v.held.push_back(store.get(records[i]));
    v.labels.push_back(&records[i].labels);
    v.ids.push_back(records[i].clip_id);
    if constexpr (!std::is_same_v<T, float>) v.converted.push_back(v.held.back()->values.template cast<T>());
  }
  for (std::size_t k = 0; k < idx.size(); ++k) {
    if constexpr (std::is_same_v<T, float>) v.inputs.push_back(&v.held[k]->values);
    else v.inputs.push_back(&v.converted[k]);
  }
  return v;
}

using EpochCallback = std::function<void(const EpochMetrics&)>;

/// Trains for plan.total_epochs, scoring VAL after every epoch and keeping the
/// best-scoring state. The returned checkpoint holds that state; `test` is scored
/// from exactly the checkpointed parameters.
template <typename T = float>
FitResult fit(const ExperimentConfig& cfg, const std::vector<ClipRecord>& records, const Vocabulary& targets,
              const SpectrogramStore& store, std::shared_ptr<const FrozenBackbone<T>> backbone, std::uint64_t seed,
              const EpochCallback& on_epoch = {}) {
  cfg.validate();
  const auto train_idx = split_indices(records, SplitTag::kTrain);
  const auto val_idx = split_indices(records, SplitTag::kVal);
  const auto test_idx = split_indices(records, SplitTag::kTest);
  if (train_idx.empty()) throw Error(ErrorCode::kEmptySplit, "no TRAIN records");
  if (val_idx.empty()) throw Error(ErrorCode::kEmptySplit, "no VAL records");

  auto model = build_model<T>(cfg, backbone, targets, seed);
  Adam<T> adam(model.trainable(), cfg.plan.beta1, cfg.plan.beta2, cfg.plan.adam_eps);
  Rng shuffle(derive_seed(seed, kSeedShuffle));
  const std::uint64_t fingerprint = backbone->fingerprint();

  FitResult res;
  res.seed = seed;
  res.trainable_params = model.param_count();
  std::vector<std::size_t> order = train_idx;
  for (std::size_t epoch = 1; epoch <= cfg.plan.total_epochs; ++epoch) {
    const double lr = lr_at_epoch(epoch, cfg.plan);
    shuffle.shuffle(order.begin(), order.end());
    double loss_sum = 0;
    std::size_t observed = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.plan.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.plan.batch_size);
      auto view = gather<T>(records, std::span<const std::size_t>(order).subspan(start, end - start), store);
      const auto step = train_step(model, adam, std::span<const Matrix<T>* const>(view.inputs), view.labels, lr, &view.ids);
      loss_sum += step.loss * static_cast<double>(step.observed);
      observed += step.observed;
    }
    const auto val = score_predictions(predict_split(model, records, val_idx, store, cfg.plan.batch_size), cfg.threshold);
    EpochMetrics m{epoch, lr, observed > 0 ? loss_sum / static_cast<double>(observed) : 0.0, val.macro_f1};
    res.log.push_back(m);
    if (on_epoch) on_epoch(m);
    if (m.val_macro_f1 > res.best_val_macro_f1) {
      res.best_val_macro_f1 = m.val_macro_f1;
      res.best_epoch = epoch;
      Container c;
      c.config_text = cfg.canonical_text();
      c.meta["epoch"] = std::to_string(epoch);
      c.meta["seed"] = std::to_string(seed);
      c.meta["best_val_macro_f1"] = detail::format_double(m.val_macro_f1);
      c.meta["backbone_fingerprint"] = hex64(fingerprint);
      c.meta["rng_state"] = shuffle.state();
      c.meta["config_hash"] = hex64(cfg.hash());
      store_model_state(c, model, &adam);
      res.checkpoint = std::move(c);
    }
  }
  if (backbone->fingerprint() != fingerprint) {
    throw Error(ErrorCode::kFingerprintMismatch, "backbone parameters changed during training");
  }
  load_model_state(res.checkpoint, model, static_cast<Adam<T>*>(nullptr));
  if (!test_idx.empty()) {
    res.test = score_predictions(predict_split(model, records, test_idx, store, cfg.plan.batch_size), cfg.threshold);
    res.checkpoint.meta["test_macro_f1"] = detail::format_double(res.test.macro_f1);
  }
  return res;
}

/// Rebuilds a model from a checkpoint, refusing a backbone with a different fingerprint.
template <typename T = float>
Model<T> restore_model(const Container& ckpt, std::shared_ptr<const FrozenBackbone<T>> backbone, const Vocabulary& targets) {
  const auto cfg = parse_config(ckpt.config_text);
  if (ckpt.meta_at("backbone_fingerprint") != hex64(backbone->fingerprint())) {
    throw Error(ErrorCode::kFingerprintMismatch, "checkpoint was trained against backbone " +
                                                     ckpt.meta_at("backbone_fingerprint") + ", live backbone is " +
                                                     hex64(backbone->fingerprint()));
  }
  auto model = build_model<T>(cfg, std::move(backbone), targets, std::stoull(ckpt.meta_at("seed")));
  load_model_state(ckpt, model, static_cast<Adam<T>*>(nullptr));
  return model;
}

struct RepeatSummary {
  std::vector<FitResult> runs;
  double mean_test_macro_f1 = 0;
  double std_test_macro_f1 = 0;
};

inline RepeatSummary summarize(std::vector<FitResult> runs) {
  RepeatSummary s;
  s.runs = std::move(runs);
  const double n = static_cast<double>(s.runs.size());
  for (const auto& r : s.runs) s.mean_test_macro_f1 += r.test.macro_f1 / n;
  if (s.runs.size() > 1) {
    double ss = 0;
    for (const auto& r : s.runs) ss += (r.test.macro_f1 - s.mean_test_macro_f1) * (r.test.macro_f1 - s.mean_test_macro_f1);
    s.std_test_macro_f1 = std::sqrt(ss / (n - 1));
  }
  return s;
}

}  // namespace reprog
