#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mmt/corpus.hpp"
#include "mmt/corruption.hpp"
#include "mmt/feature_store.hpp"
#include "mmt/model.hpp"

namespace mmt {

enum class EarlyStopMetric { val_loss, val_bleu };

struct TrainConfig {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double adam_eps = 1e-8;
  int warmup_steps = 2000;
  double lr_init = 1e-7;
  double lr_peak = 0.005;
  std::size_t max_tokens_per_batch = 4096;
  double dropout = 0.3;
  double label_smoothing = 0.1;
  int patience = 10;
  int avg_last_k = 10;
  int max_epochs = 100;
  EarlyStopMetric early_stop_metric = EarlyStopMetric::val_loss;
  /// Decode the validation set greedily each epoch to log val_bleu. Forced
  /// on when early stopping uses BLEU.
  bool compute_val_bleu = false;
  std::uint64_t seed = 1;

  void validate() const;
};

/// Linear warmup from lr_init to lr_peak over [0, warmup_steps], then
/// lr_peak * sqrt(warmup_steps / step).
double lr_schedule(long step, const TrainConfig& config);

/// Mean over non-pad rows of (1 - eps) * NLL(target) + eps * mean NLL over
/// the vocabulary.
template <typename Derived>
double label_smoothed_loss(const Eigen::MatrixBase<Derived>& log_probs, std::span<const int> targets, double eps,
                           int pad_id = Vocab::kPad) {
  if (static_cast<Eigen::Index>(targets.size()) != log_probs.rows()) {
    throw ShapeError("label_smoothed_loss: one target per row required");
  }
  double total = 0.0;
  std::size_t count = 0;
  const auto V = static_cast<double>(log_probs.cols());
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] == pad_id) continue;
    const auto r = static_cast<Eigen::Index>(i);
    const double nll = -static_cast<double>(log_probs(r, targets[i]));
    const double uniform = -static_cast<double>(log_probs.row(r).template cast<double>().sum()) / V;
    total += (1.0 - eps) * nll + eps * uniform;
    ++count;
  }
  return count == 0 ? 0.0 : total / static_cast<double>(count);
}

/// Batch cost of one example: max(source + <eos>, target + <eos>).
std::size_t example_cost(const ParallelExample& ex);

/// Greedy token-count batching over `order`. A batch's cost is
/// n_examples * max example cost in the batch (the pad-inclusive size of the
/// padded batch), and never exceeds max_tokens. Examples that alone exceed
/// max_tokens are skipped and reported through `skipped`.
std::vector<std::vector<std::size_t>> make_batches(std::span<const ParallelExample> data,
                                                   std::span<const std::size_t> order, std::size_t max_tokens,
                                                   std::vector<std::size_t>* skipped = nullptr);

/// Patience counter over a "lower is better" validation series.
class EarlyStopper {
 public:
  explicit EarlyStopper(int patience) : patience_(patience) {}
  /// Records an epoch's value; true when training should stop.
  bool update(double value);
  int bad_epochs() const { return bad_epochs_; }
  std::optional<double> best() const { return seen_ ? std::optional<double>(best_) : std::nullopt; }

 private:
  int patience_;
  int bad_epochs_ = 0;
  double best_ = 0.0;
  bool seen_ = false;
};

struct EpochRecord {
  int epoch = 0;
  long steps = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  std::optional<double> val_bleu;
  double word_dropout = 0.0;
  std::size_t skipped_examples = 0;

  std::string to_json() const;
};

struct TrainResult {
  std::vector<EpochRecord> log;
  std::vector<std::filesystem::path> checkpoints;
  std::filesystem::path averaged_checkpoint;
  bool stopped_early = false;
};

/// Adam state for one model.
template <typename Scalar>
class AdamOptimizer {
 public:
  AdamOptimizer(const ParamStore<Scalar>& params, double beta1, double beta2, double eps);
  void step(ParamStore<Scalar>& params, double lr);
  long steps() const { return t_; }

 private:
  std::vector<Matrix<Scalar>> m_, v_;
  double beta1_, beta2_, eps_;
  long t_ = 0;
};

/// Resolves every image id the examples need; throws naming the first
/// example whose image cannot be found.
std::vector<std::shared_ptr<const VisualFeatures>> resolve_features(std::span<const ParallelExample> data,
                                                                    const FeatureSource* features);

/// Full recipe: token-count batching, Adam with warmup + inverse-sqrt decay,
/// label smoothing, per-epoch checkpoints under `checkpoint_dir`, early
/// stopping, and averaging of the last avg_last_k checkpoints into
/// checkpoint_dir/checkpoint_avg.bin. The per-epoch log is appended to
/// checkpoint_dir/train_log.jsonl. Word dropout, when given, is resampled
/// for every training batch and never touches validation sources.
template <typename Scalar>
TrainResult train(TranslationModel<Scalar>& model, const std::vector<ParallelExample>& train_set,
                  const std::vector<ParallelExample>& val_set, const FeatureSource* features,
                  const TrainConfig& config, const std::optional<CorruptionConfig>& corruption,
                  const std::filesystem::path& checkpoint_dir);

extern template class AdamOptimizer<float>;
extern template class AdamOptimizer<double>;

}  // namespace mmt
