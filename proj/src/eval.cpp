#include "mmt/eval.hpp"

#include <cmath>
#include <iomanip>
#include <map>
#include <numeric>
#include <sstream>

#include "json.hpp"

namespace mmt {

std::string to_string(GenderClass g) {
  switch (g) {
    case GenderClass::male: return "male";
    case GenderClass::female: return "female";
    case GenderClass::undetermined: return "undetermined";
  }
  return "undetermined";
}

GenderClass classify_gender(const TokenSeq& tokens, const GenderLexicon& lexicon) {
  bool male = false, female = false;
  for (const auto& t : tokens) {
    male = male || lexicon.male_pronouns.count(t) > 0;
    female = female || lexicon.female_pronouns.count(t) > 0;
  }
  if (male && !female) return GenderClass::male;
  if (female && !male) return GenderClass::female;
  return GenderClass::undetermined;
}

namespace {

using NgramCounts = std::map<std::vector<std::string>, int>;

NgramCounts count_ngrams(const TokenSeq& tokens, std::size_t n) {
  NgramCounts counts;
  if (tokens.size() < n) return counts;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
    ++counts[std::vector<std::string>(tokens.begin() + static_cast<std::ptrdiff_t>(i),
                                      tokens.begin() + static_cast<std::ptrdiff_t>(i + n))];
  }
  return counts;
}

}  // namespace

double bleu(std::span<const TokenSeq> hypotheses, std::span<const TokenSeq> references) {
  if (hypotheses.size() != references.size()) {
    throw Error("bleu: " + std::to_string(hypotheses.size()) + " hypotheses but " +
                std::to_string(references.size()) + " references");
  }
  if (references.empty()) throw Error("bleu: no references");
  constexpr std::size_t kMaxN = 4;
  std::array<double, kMaxN> matched{}, total{};
  double hyp_len = 0, ref_len = 0;
  for (std::size_t s = 0; s < hypotheses.size(); ++s) {
    hyp_len += static_cast<double>(hypotheses[s].size());
    ref_len += static_cast<double>(references[s].size());
    for (std::size_t n = 1; n <= kMaxN; ++n) {
      const auto hyp = count_ngrams(hypotheses[s], n);
      const auto ref = count_ngrams(references[s], n);
      for (const auto& [gram, c] : hyp) {
        total[n - 1] += c;
        if (auto it = ref.find(gram); it != ref.end()) matched[n - 1] += std::min(c, it->second);
      }
    }
  }
  if (hyp_len == 0) return 0.0;
  double log_sum = 0.0;
  for (std::size_t n = 0; n < kMaxN; ++n) {
    if (matched[n] == 0) return 0.0;
    log_sum += std::log(matched[n] / total[n]);
  }
  const double bp = hyp_len < ref_len ? std::exp(1.0 - ref_len / hyp_len) : 1.0;
  return 100.0 * bp * std::exp(log_sum / kMaxN);
}

double gender_accuracy(std::span<const TokenSeq> hypotheses, std::span<const TokenSeq> references,
                       const GenderLexicon& lexicon) {
  if (hypotheses.size() != references.size()) throw Error("gender_accuracy: lists are not aligned");
  std::size_t considered = 0, correct = 0;
  for (std::size_t i = 0; i < references.size(); ++i) {
    const auto ref = classify_gender(references[i], lexicon);
    if (ref == GenderClass::undetermined) continue;
    ++considered;
    if (classify_gender(hypotheses[i], lexicon) == ref) ++correct;
  }
  if (considered == 0) {
    throw UndefinedMetricError("gender accuracy is undefined: no reference is classified male or female");
  }
  return static_cast<double>(correct) / static_cast<double>(considered);
}

std::vector<ParallelExample> shuffle_images(const std::vector<ParallelExample>& test_set, std::uint64_t seed) {
  std::vector<std::size_t> with_image;
  for (std::size_t i = 0; i < test_set.size(); ++i) {
    if (test_set[i].image_id) with_image.push_back(i);
  }
  if (with_image.size() < 2) {
    throw Error("shuffle_images needs at least 2 examples with images; got " + std::to_string(with_image.size()));
  }
  const std::size_t k = with_image.size();
  Rng rng(derive_seed(seed, "shuffle_images"));
  std::vector<std::size_t> perm(k);
  // Rejection sampling of uniform permutations; ~e attempts on average.
  for (bool deranged = false; !deranged;) {
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    for (std::size_t i = k; i > 1; --i) {
      std::uniform_int_distribution<std::size_t> pick(0, i - 1);
      std::swap(perm[i - 1], perm[pick(rng)]);
    }
    deranged = true;
    for (std::size_t i = 0; i < k; ++i) deranged = deranged && perm[i] != i;
  }
  auto out = test_set;
  for (std::size_t j = 0; j < k; ++j) out[with_image[j]].image_id = test_set[with_image[perm[j]]].image_id;
  return out;
}

template <typename Scalar>
std::vector<TokenSeq> decode_all(const TranslationModel<Scalar>& model, const std::vector<ParallelExample>& data,
                                 const FeatureSource* features, const BeamOptions& beam) {
  std::vector<TokenSeq> out;
  out.reserve(data.size());
  for (const auto& ex : data) {
    std::shared_ptr<const VisualFeatures> f;
    if (model.multimodal()) {
      if (!features) throw Error("multimodal model evaluated without a feature source");
      if (!ex.image_id) throw Error("example '" + ex.id + "' has no image_id");
      try {
        f = features->get(*ex.image_id);
      } catch (const Error& e) {
        throw Error("example '" + ex.id + "': " + e.what());
      }
    }
    out.push_back(translate(model, ex.source, f.get(), beam));
  }
  return out;
}

namespace {

template <typename F>
std::optional<double> defined_or_empty(F&& f) {
  try {
    return f();
  } catch (const UndefinedMetricError&) {
    return std::nullopt;
  }
}

}  // namespace

template <typename Scalar>
EvalOutputs adversarial_eval(const TranslationModel<Scalar>& model, const std::vector<ParallelExample>& test_set,
                             const FeatureSource* features, std::span<const std::uint64_t> seeds,
                             const EvalOptions& options) {
  if (test_set.empty()) throw Error("adversarial_eval: empty test set");
  std::vector<TokenSeq> refs;
  refs.reserve(test_set.size());
  for (const auto& ex : test_set) refs.push_back(ex.target);

  EvalOutputs out;
  auto& r = out.report;
  r.model = to_string(model.config().fusion_mode);
  r.n_examples = test_set.size();
  out.congruent = decode_all(model, test_set, features, options.beam);
  if (options.bleu) r.bleu_congruent = bleu(out.congruent, refs);
  if (options.gender) r.gender_acc_congruent = defined_or_empty([&] { return gender_accuracy(out.congruent, refs); });

  const bool has_images =
      std::count_if(test_set.begin(), test_set.end(), [](const auto& e) { return e.image_id.has_value(); }) >= 2;
  // Seed values are accumulated as offsets from the congruent value, so
  // identical decodes give an awareness of exactly zero.
  double bleu_delta = 0.0, gender_delta = 0.0;
  bool gender_defined = r.gender_acc_congruent.has_value();
  for (auto seed : seeds) {
    std::vector<TokenSeq> hyps;
    if (model.multimodal() || has_images) {
      hyps = decode_all(model, shuffle_images(test_set, seed), features, options.beam);
    } else {
      // Text-only model on a text-only test set: nothing to shuffle.
      hyps = out.congruent;
    }
    SeedResult s;
    s.seed = seed;
    if (options.bleu) s.bleu = bleu(hyps, refs);
    if (options.gender) s.gender_accuracy = defined_or_empty([&] { return gender_accuracy(hyps, refs); });
    for (std::size_t i = 0; i < hyps.size(); ++i) s.changed_hypotheses += hyps[i] != out.congruent[i];
    bleu_delta += r.bleu_congruent - s.bleu;
    if (s.gender_accuracy && r.gender_acc_congruent) {
      gender_delta += *r.gender_acc_congruent - *s.gender_accuracy;
    } else {
      gender_defined = false;
    }
    r.per_seed.push_back(s);
    out.shuffled.push_back(std::move(hyps));
  }
  r.n_seeds = seeds.size();
  if (!seeds.empty()) {
    const double n = static_cast<double>(seeds.size());
    r.awareness_bleu = bleu_delta / n;
    r.bleu_incongruent = r.bleu_congruent - r.awareness_bleu;
    if (options.gender && gender_defined) {
      r.awareness_gender = gender_delta / n;
      r.gender_acc_incongruent = *r.gender_acc_congruent - *r.awareness_gender;
    }
  }
  return out;
}

std::string report_to_json(const EvalReport& r) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  nlohmann::ordered_json j;
  j["model"] = r.model;
  j["n_examples"] = r.n_examples;
  j["bleu_congruent"] = r.bleu_congruent;
  j["bleu_incongruent"] = r.bleu_incongruent;
  j["gender_acc_congruent"] = opt(r.gender_acc_congruent);
  j["gender_acc_incongruent"] = opt(r.gender_acc_incongruent);
  j["awareness_bleu"] = r.awareness_bleu;
  j["awareness_gender"] = opt(r.awareness_gender);
  j["n_seeds"] = r.n_seeds;
  j["per_seed"] = nlohmann::ordered_json::array();
  for (const auto& s : r.per_seed) {
    nlohmann::ordered_json e;
    e["seed"] = s.seed;
    e["bleu"] = s.bleu;
    e["gender_accuracy"] = opt(s.gender_accuracy);
    e["changed_hypotheses"] = s.changed_hypotheses;
    j["per_seed"].push_back(e);
  }
  return j.dump(2);
}

namespace {

std::string cell(double value, std::optional<double> drop, double scale, const char* suffix) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(scale == 1.0 ? 2 : 1) << value * scale << suffix;
  if (drop) {
    // A positive drop means the metric fell under shuffled images.
    const char* arrow = *drop >= 0 ? "↓" : "↑";
    out << " (" << arrow << " " << std::fabs(*drop) * scale << suffix << ")";
  }
  return out.str();
}

// Pads to a display width, counting UTF-8 code points rather than bytes.
std::string pad(const std::string& s, std::size_t width) {
  const auto shown = static_cast<std::size_t>(
      std::count_if(s.begin(), s.end(), [](char c) { return (static_cast<unsigned char>(c) & 0xC0) != 0x80; }));
  return shown >= width ? s + " " : s + std::string(width - shown, ' ');
}

}  // namespace

std::string report_table(std::span<const EvalReport> reports) {
  std::ostringstream out;
  out << pad("Model", 10) << pad("BLEU", 20) << "Gender Accuracy\n";
  for (const auto& r : reports) {
    std::optional<double> bleu_drop;
    if (r.n_seeds > 0) bleu_drop = r.awareness_bleu;
    const auto b = cell(r.bleu_congruent, bleu_drop, 1.0, "");
    const auto g = r.gender_acc_congruent ? cell(*r.gender_acc_congruent, r.awareness_gender, 100.0, "%")
                                          : std::string("n/a");
    out << pad(r.model, 10) << pad(b, 20) << g << "\n";
  }
  return out.str();
}

template std::vector<TokenSeq> decode_all(const TranslationModel<float>&, const std::vector<ParallelExample>&,
                                          const FeatureSource*, const BeamOptions&);
template std::vector<TokenSeq> decode_all(const TranslationModel<double>&, const std::vector<ParallelExample>&,
                                          const FeatureSource*, const BeamOptions&);
template EvalOutputs adversarial_eval(const TranslationModel<float>&, const std::vector<ParallelExample>&,
                                      const FeatureSource*, std::span<const std::uint64_t>, const EvalOptions&);
template EvalOutputs adversarial_eval(const TranslationModel<double>&, const std::vector<ParallelExample>&,
                                      const FeatureSource*, std::span<const std::uint64_t>, const EvalOptions&);

}  // namespace mmt
