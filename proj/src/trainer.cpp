#include "mmt/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

#include <spdlog/spdlog.h>

#include "json.hpp"
#include "mmt/checkpoint.hpp"
#include "mmt/eval.hpp"

namespace mmt {

void TrainConfig::validate() const {
  auto fail = [](const std::string& what) { throw Error("invalid training config: " + what); };
  if (!(beta1 >= 0 && beta1 < 1)) fail("beta1 must be in [0, 1)");
  if (!(beta2 >= 0 && beta2 < 1)) fail("beta2 must be in [0, 1)");
  if (!(adam_eps > 0)) fail("adam_eps must be positive");
  if (warmup_steps < 1) fail("warmup_steps must be at least 1");
  if (!(lr_init >= 0) || !(lr_peak > 0)) fail("learning rates must be positive");
  if (max_tokens_per_batch == 0) fail("max_tokens_per_batch must be positive");
  if (!(dropout >= 0 && dropout < 1)) fail("dropout must be in [0, 1)");
  if (!(label_smoothing >= 0 && label_smoothing < 1)) fail("label_smoothing must be in [0, 1)");
  if (patience < 1) fail("patience must be at least 1");
  if (avg_last_k < 1) fail("avg_last_k must be at least 1");
  if (max_epochs < 1) fail("max_epochs must be at least 1");
}

double lr_schedule(long step, const TrainConfig& config) {
  if (step < 0) throw Error("lr_schedule: negative step");
  const double warmup = config.warmup_steps;
  if (static_cast<double>(step) <= warmup) {
    return config.lr_init + (config.lr_peak - config.lr_init) * static_cast<double>(step) / warmup;
  }
  return config.lr_peak * std::sqrt(warmup / static_cast<double>(step));
}

std::size_t example_cost(const ParallelExample& ex) {
  return std::max(ex.source.size(), ex.target.size()) + 1;
}

std::vector<std::vector<std::size_t>> make_batches(std::span<const ParallelExample> data,
                                                   std::span<const std::size_t> order, std::size_t max_tokens,
                                                   std::vector<std::size_t>* skipped) {
  std::vector<std::vector<std::size_t>> batches;
  std::vector<std::size_t> current;
  std::size_t longest = 0;
  for (auto idx : order) {
    if (idx >= data.size()) throw Error("make_batches: index out of range");
    const auto cost = example_cost(data[idx]);
    if (cost > max_tokens) {
      if (skipped) skipped->push_back(idx);
      continue;
    }
    const auto new_longest = std::max(longest, cost);
    if (!current.empty() && (current.size() + 1) * new_longest > max_tokens) {
      batches.push_back(std::move(current));
      current.clear();
      longest = cost;
    } else {
      longest = new_longest;
    }
    current.push_back(idx);
  }
  if (!current.empty()) batches.push_back(std::move(current));
  return batches;
}

bool EarlyStopper::update(double value) {
  if (!seen_ || value < best_) {
    best_ = value;
    seen_ = true;
    bad_epochs_ = 0;
  } else {
    ++bad_epochs_;
  }
  return bad_epochs_ >= patience_;
}

std::string EpochRecord::to_json() const {
  nlohmann::ordered_json j;
  j["epoch"] = epoch;
  j["steps"] = steps;
  j["lr"] = lr;
  j["train_loss"] = train_loss;
  j["val_loss"] = val_loss;
  j["val_bleu"] = val_bleu ? nlohmann::ordered_json(*val_bleu) : nlohmann::ordered_json(nullptr);
  j["word_dropout"] = word_dropout;
  j["skipped_examples"] = skipped_examples;
  return j.dump();
}

template <typename Scalar>
AdamOptimizer<Scalar>::AdamOptimizer(const ParamStore<Scalar>& params, double beta1, double beta2, double eps)
    : beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& p : params) {
    m_.push_back(Matrix<Scalar>::Zero(p.value.rows(), p.value.cols()));
    v_.push_back(Matrix<Scalar>::Zero(p.value.rows(), p.value.cols()));
  }
}

template <typename Scalar>
void AdamOptimizer<Scalar>::step(ParamStore<Scalar>& params, double lr) {
  if (params.size() != m_.size()) throw Error("AdamOptimizer: parameter set changed");
  ++t_;
  const auto b1 = static_cast<Scalar>(beta1_), b2 = static_cast<Scalar>(beta2_);
  const auto c1 = static_cast<Scalar>(1.0 - std::pow(beta1_, static_cast<double>(t_)));
  const auto c2 = static_cast<Scalar>(1.0 - std::pow(beta2_, static_cast<double>(t_)));
  const auto alpha = static_cast<Scalar>(lr), eps = static_cast<Scalar>(eps_);
  std::size_t i = 0;
  for (auto& p : params) {
    auto& m = m_[i];
    auto& v = v_[i];
    m = b1 * m + (Scalar(1) - b1) * p.grad;
    v = (b2 * v.array() + (Scalar(1) - b2) * p.grad.array().square()).matrix();
    p.value.array() -= alpha * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
    ++i;
  }
}

std::vector<std::shared_ptr<const VisualFeatures>> resolve_features(std::span<const ParallelExample> data,
                                                                    const FeatureSource* features) {
  if (!features) throw Error("resolve_features: no feature source");
  std::vector<std::shared_ptr<const VisualFeatures>> out;
  out.reserve(data.size());
  for (const auto& ex : data) {
    if (!ex.image_id) throw NotFoundError("example '" + ex.id + "' has no image_id");
    try {
      out.push_back(features->get(*ex.image_id));
    } catch (const Error& e) {
      throw NotFoundError("example '" + ex.id + "': cannot resolve image_id '" + *ex.image_id + "': " + e.what());
    }
  }
  return out;
}

namespace {

std::string checkpoint_name(int epoch) {
  std::ostringstream out;
  out << "checkpoint" << std::setw(3) << std::setfill('0') << epoch << ".bin";
  return out.str();
}

template <typename Scalar>
double validation_loss(const TranslationModel<Scalar>& model, const std::vector<ParallelExample>& val,
                       const std::vector<std::shared_ptr<const VisualFeatures>>& feats, double eps) {
  double sum = 0.0;
  std::size_t tokens = 0;
  for (std::size_t i = 0; i < val.size(); ++i) {
    const auto r = model.loss(model.source_ids(val[i].source), model.target_ids(val[i].target),
                              feats.empty() ? nullptr : feats[i].get(), eps);
    sum += r.loss_sum;
    tokens += r.tokens;
  }
  return tokens == 0 ? 0.0 : sum / static_cast<double>(tokens);
}

template <typename Scalar>
double validation_bleu(const TranslationModel<Scalar>& model, const std::vector<ParallelExample>& val,
                       const std::vector<std::shared_ptr<const VisualFeatures>>& feats) {
  std::vector<TokenSeq> hyps, refs;
  for (std::size_t i = 0; i < val.size(); ++i) {
    const auto src = model.source_ids(val[i].source);
    const int max_len = std::min(model.config().max_positions - 1, static_cast<int>(2 * src.size() + 10));
    const auto ids = greedy_decode(model, src, feats.empty() ? nullptr : feats[i].get(), max_len);
    hyps.push_back(model.tgt_vocab().decode(ids));
    refs.push_back(val[i].target);
  }
  return bleu(hyps, refs);
}

}  // namespace

template <typename Scalar>
TrainResult train(TranslationModel<Scalar>& model, const std::vector<ParallelExample>& train_set,
                  const std::vector<ParallelExample>& val_set, const FeatureSource* features,
                  const TrainConfig& config, const std::optional<CorruptionConfig>& corruption,
                  const std::filesystem::path& checkpoint_dir) {
  config.validate();
  if (corruption) corruption->validate();
  if (train_set.empty()) throw Error("train: empty training set");
  if (val_set.empty()) throw Error("train: empty validation set");

  std::vector<std::shared_ptr<const VisualFeatures>> train_feats, val_feats;
  if (model.multimodal()) {
    train_feats = resolve_features(train_set, features);
    val_feats = resolve_features(val_set, features);
  }

  std::filesystem::create_directories(checkpoint_dir);
  const auto log_path = checkpoint_dir / "train_log.jsonl";
  std::ofstream log_file(log_path, std::ios::trunc);
  if (!log_file) throw Error("cannot write training log " + log_path.string());

  // Examples longer than the position table cannot be encoded.
  const auto max_len = static_cast<std::size_t>(model.config().max_positions);
  const bool want_bleu = config.compute_val_bleu || config.early_stop_metric == EarlyStopMetric::val_bleu;
  const std::uint64_t wd_base = corruption && corruption->seed != 0 ? corruption->seed : config.seed;

  AdamOptimizer<Scalar> adam(model.params(), config.beta1, config.beta2, config.adam_eps);
  EarlyStopper stopper(config.patience);
  TrainResult result;

  for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
    const auto tag = std::to_string(epoch);
    auto shuffle_rng = make_rng(config.seed, "shuffle/" + tag);
    auto dropout_rng = make_rng(config.seed, "dropout/" + tag);
    auto wd_rng = make_rng(wd_base, "word_dropout/" + tag);

    std::vector<std::size_t> order;
    std::vector<std::size_t> skipped;
    for (std::size_t i = 0; i < train_set.size(); ++i) {
      if (example_cost(train_set[i]) > max_len) {
        skipped.push_back(i);
      } else {
        order.push_back(i);
      }
    }
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    const auto batches = make_batches(train_set, order, config.max_tokens_per_batch, &skipped);

    RunOptions opts{true, config.dropout, &dropout_rng, std::nullopt};
    double loss_sum = 0.0;
    std::size_t loss_tokens = 0;
    double last_lr = lr_schedule(adam.steps(), config);
    for (const auto& batch : batches) {
      std::size_t batch_tokens = 0;
      for (auto idx : batch) batch_tokens += train_set[idx].target.size() + 1;
      model.params().zero_grad();
      const double scale = 1.0 / static_cast<double>(batch_tokens);
      for (auto idx : batch) {
        const auto& ex = train_set[idx];
        const auto source = corruption ? word_dropout(ex.source, *corruption, wd_rng) : ex.source;
        const auto r = model.accumulate_gradients(model.source_ids(source), model.target_ids(ex.target),
                                                  train_feats.empty() ? nullptr : train_feats[idx].get(),
                                                  config.label_smoothing, scale, opts);
        loss_sum += r.loss_sum;
        loss_tokens += r.tokens;
      }
      last_lr = lr_schedule(adam.steps(), config);
      adam.step(model.params(), last_lr);
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.steps = adam.steps();
    rec.lr = last_lr;
    rec.train_loss = loss_tokens == 0 ? 0.0 : loss_sum / static_cast<double>(loss_tokens);
    rec.val_loss = validation_loss(model, val_set, val_feats, config.label_smoothing);
    if (want_bleu) rec.val_bleu = validation_bleu(model, val_set, val_feats);
    rec.word_dropout = corruption ? corruption->p : 0.0;
    rec.skipped_examples = skipped.size();
    if (epoch == 1 && !skipped.empty()) {
      spdlog::warn("{} training examples exceed the batch or position limit and are skipped", skipped.size());
    }

    const auto ckpt = checkpoint_dir / checkpoint_name(epoch);
    nlohmann::json meta = {{"epoch", epoch}, {"steps", rec.steps}, {"val_loss", rec.val_loss}};
    save_model(ckpt, model, meta);
    result.checkpoints.push_back(ckpt);
    log_file << rec.to_json() << "\n" << std::flush;
    spdlog::info("epoch {} steps {} lr {:.3g} train_loss {:.4f} val_loss {:.4f}{}", epoch, rec.steps, rec.lr,
                 rec.train_loss, rec.val_loss, rec.val_bleu ? fmt::format(" val_bleu {:.2f}", *rec.val_bleu) : "");
    result.log.push_back(rec);

    const double criterion =
        config.early_stop_metric == EarlyStopMetric::val_bleu ? -rec.val_bleu.value_or(0.0) : rec.val_loss;
    if (stopper.update(criterion)) {
      result.stopped_early = epoch < config.max_epochs;
      break;
    }
  }

  const auto k = std::min<std::size_t>(static_cast<std::size_t>(config.avg_last_k), result.checkpoints.size());
  std::span<const std::filesystem::path> last(result.checkpoints.end() - static_cast<std::ptrdiff_t>(k),
                                              result.checkpoints.end());
  auto avg = average_checkpoints(last);
  avg.meta = {{"averaged", k}};
  result.averaged_checkpoint = checkpoint_dir / "checkpoint_avg.bin";
  write_checkpoint(result.averaged_checkpoint, avg, std::is_same_v<Scalar, double>);
  return result;
}

template class AdamOptimizer<float>;
template class AdamOptimizer<double>;
template TrainResult train(TranslationModel<float>&, const std::vector<ParallelExample>&,
                           const std::vector<ParallelExample>&, const FeatureSource*, const TrainConfig&,
                           const std::optional<CorruptionConfig>&, const std::filesystem::path&);
template TrainResult train(TranslationModel<double>&, const std::vector<ParallelExample>&,
                           const std::vector<ParallelExample>&, const FeatureSource*, const TrainConfig&,
                           const std::optional<CorruptionConfig>&, const std::filesystem::path&);

}  // namespace mmt
