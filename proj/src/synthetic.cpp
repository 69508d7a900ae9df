#include "mmt/synthetic.hpp"

#include <array>
#include <cstdio>

namespace mmt {

namespace {

struct Pronouns {
  const char* subj;
  const char* poss;
  const char* obj;
  const char* refl;
};

constexpr Pronouns kMale{"he", "his", "him", "himself"};
constexpr Pronouns kFemale{"she", "her", "her", "herself"};

constexpr std::array kNouns{"person", "doctor", "nurse",  "teacher", "student", "child",
                            "artist", "worker", "chef",   "runner",  "dancer",  "singer"};
constexpr std::array kThings{"book", "bag", "phone", "guitar", "bike", "hat", "cup", "ball", "dog", "camera"};
constexpr std::array kPlaces{"park", "street", "kitchen", "beach", "garden", "office", "road", "station"};

// {S} subject, {P} possessive, {O} object, {R} reflexive, {N} noun, {T} thing, {L} place.
constexpr std::array kTemplates{
    "{S} is holding {P} {T} in the {L}.",
    "A {N} looks at {P} {T} while {S} waits.",
    "{S} gives the {T} to {P} friend.",
    "A friend hands {O} a {T} near the {L}.",
    "The {N} takes a photo of {R} in the {L}.",
    "{S} walks with {P} {T} along the {L}.",
    "The {N} says {S} loves the {L}.",
    "Portrait of a {N} with {P} {T}.",
    "{S} enjoys {R} at the {L}.",
    "The crowd cheers for {O} at the {L}.",
};

std::string fill(std::string text, const Pronouns& p, const std::string& noun, const std::string& thing,
                 const std::string& place) {
  auto replace = [&text](const std::string& slot, const std::string& value) {
    for (auto pos = text.find(slot); pos != std::string::npos; pos = text.find(slot, pos + value.size())) {
      text.replace(pos, slot.size(), value);
    }
  };
  replace("{S}", p.subj);
  replace("{P}", p.poss);
  replace("{O}", p.obj);
  replace("{R}", p.refl);
  replace("{N}", noun);
  replace("{T}", thing);
  replace("{L}", place);
  if (!text.empty() && text[0] >= 'a' && text[0] <= 'z') text[0] = static_cast<char>(text[0] - 'a' + 'A');
  return text;
}

template <typename Container>
const auto& pick(const Container& c, Rng& rng) {
  std::uniform_int_distribution<std::size_t> d(0, c.size() - 1);
  return c[d(rng)];
}

std::string numbered(const char* prefix, std::size_t i, int width) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s%0*zu", prefix, width, i);
  return buf;
}

}  // namespace

SyntheticCorpus make_synthetic_corpus(const SyntheticOptions& options) {
  if (options.n_images < 2) throw Error("synthetic corpus needs at least 2 images");
  SyntheticCorpus out;
  std::vector<std::string> male_ids, female_ids;
  for (std::size_t i = 0; i < options.n_images; ++i) {
    const bool male = i % 2 == 0;
    auto id = numbered(male ? "img-m-" : "img-f-", i / 2, 4);
    (male ? male_ids : female_ids).push_back(id);
    out.images.push_back({std::move(id), male ? GenderLabel::male : GenderLabel::female});
  }
  auto rng = make_rng(options.seed, "synthetic/captions");
  std::bernoulli_distribution coin(0.5);
  for (std::size_t i = 0; i < options.n_captions; ++i) {
    const bool male = coin(rng);
    const std::string tmpl = pick(kTemplates, rng);
    const std::string noun = pick(kNouns, rng);
    const std::string thing = pick(kThings, rng);
    const std::string place = pick(kPlaces, rng);
    const auto& image = pick(male ? male_ids : female_ids, rng);
    out.captions.push_back({numbered("syn-", i, 5), fill(tmpl, male ? kMale : kFemale, noun, thing, place), image});
  }
  return out;
}

InMemoryFeatures synth_feature_bank(const std::vector<SyntheticImage>& images, double noise_sigma,
                                    std::uint64_t seed) {
  InMemoryFeatures bank;
  auto rng = make_rng(seed, "synthetic/features");
  for (const auto& img : images) bank.put(img.id, synth_features(img.label, noise_sigma, rng));
  return bank;
}

void write_feature_bank(FeatureStore& store, const std::vector<SyntheticImage>& images, double noise_sigma,
                        std::uint64_t seed) {
  auto rng = make_rng(seed, "synthetic/features");
  for (const auto& img : images) store.store(img.id, synth_features(img.label, noise_sigma, rng));
}

}  // namespace mmt
