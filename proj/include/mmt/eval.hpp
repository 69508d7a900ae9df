#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mmt/corpus.hpp"
#include "mmt/feature_store.hpp"
#include "mmt/model.hpp"

namespace mmt {

enum class GenderClass { male, female, undetermined };

std::string to_string(GenderClass g);

/// male: at least one male pronoun and no female one; female symmetric;
/// undetermined when both or neither set occurs. Whole-token matching.
GenderClass classify_gender(const TokenSeq& tokens, const GenderLexicon& lexicon = {});

/// Corpus-level cumulative 4-gram BLEU in [0, 100]: clipped n-gram
/// precisions for n = 1..4, geometric mean, brevity penalty. No smoothing.
double bleu(std::span<const TokenSeq> hypotheses, std::span<const TokenSeq> references);

/// Accuracy over examples whose reference is male or female; an undetermined
/// hypothesis counts as wrong. Throws UndefinedMetricError when no reference
/// is determinate.
double gender_accuracy(std::span<const TokenSeq> hypotheses, std::span<const TokenSeq> references,
                       const GenderLexicon& lexicon = {});

/// Reassigns image ids among the examples that have one with a seeded
/// uniformly random derangement: no example keeps its own position's image.
std::vector<ParallelExample> shuffle_images(const std::vector<ParallelExample>& test_set, std::uint64_t seed);

/// Positive when the model does better with the congruent images.
inline double image_awareness(double metric_congruent, double metric_incongruent) {
  return metric_congruent - metric_incongruent;
}

struct SeedResult {
  std::uint64_t seed = 0;
  double bleu = 0.0;
  std::optional<double> gender_accuracy;
  std::size_t changed_hypotheses = 0;  // hypotheses differing from the congruent decode
};

struct EvalReport {
  std::string model;
  std::size_t n_examples = 0;
  double bleu_congruent = 0.0;
  double bleu_incongruent = 0.0;  // mean over seeds
  std::optional<double> gender_acc_congruent;
  std::optional<double> gender_acc_incongruent;  // mean over seeds
  double awareness_bleu = 0.0;
  std::optional<double> awareness_gender;
  std::size_t n_seeds = 0;
  std::vector<SeedResult> per_seed;
};

struct EvalOptions {
  BeamOptions beam;
  bool bleu = true;
  bool gender = true;
};

struct EvalOutputs {
  EvalReport report;
  std::vector<TokenSeq> congruent;
  std::vector<std::vector<TokenSeq>> shuffled;  // one list per seed
};

/// Decodes the test set once with its own images and once per seed with
/// shuffle_images(test_set, seed), then aggregates the metrics.
template <typename Scalar>
EvalOutputs adversarial_eval(const TranslationModel<Scalar>& model, const std::vector<ParallelExample>& test_set,
                             const FeatureSource* features, std::span<const std::uint64_t> seeds,
                             const EvalOptions& options = {});

/// Decodes every example with its assigned image (none for text-only models).
template <typename Scalar>
std::vector<TokenSeq> decode_all(const TranslationModel<Scalar>& model, const std::vector<ParallelExample>& data,
                                 const FeatureSource* features, const BeamOptions& beam);

std::string report_to_json(const EvalReport& report);

/// Table with one row per report: "value (drop)" cells with an arrow for the
/// direction of the change under shuffled images.
std::string report_table(std::span<const EvalReport> reports);

}  // namespace mmt
