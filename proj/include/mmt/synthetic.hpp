#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mmt/corpus.hpp"
#include "mmt/feature_store.hpp"

namespace mmt {

/// Templated English captions whose only gender cue is a pronoun. Every
/// caption is paired with an image of the same gender drawn from a shared pool
/// named img-m-NNNN / img-f-NNNN.
struct SyntheticOptions {
  std::size_t n_captions = 2000;
  std::size_t n_images = 64;  // split evenly between the two genders
  double noise_sigma = 0.1;
  std::uint64_t seed = 1;
};

struct SyntheticImage {
  std::string id;
  GenderLabel label;
};

struct SyntheticCorpus {
  std::vector<Caption> captions;
  std::vector<SyntheticImage> images;
};

SyntheticCorpus make_synthetic_corpus(const SyntheticOptions& options);

/// synth_features for every image, drawn in pool order from one seeded stream.
InMemoryFeatures synth_feature_bank(const std::vector<SyntheticImage>& images, double noise_sigma,
                                    std::uint64_t seed);
void write_feature_bank(FeatureStore& store, const std::vector<SyntheticImage>& images, double noise_sigma,
                        std::uint64_t seed);

}  // namespace mmt
