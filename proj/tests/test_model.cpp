#include <functional>
#include <random>

#include "doctest.h"
#include "grad_check.hpp"
#include "mmt/model.hpp"

using namespace mmt;

namespace {

Vocab small_vocab() { return Vocab({"<pad>", "<unk>", "<bos>", "<eos>", "o", "he", "she", "runs", "sits", "."}); }

ModelConfig tiny(FusionMode mode) {
  ModelConfig c;
  c.n_enc_layers = 2;
  c.n_dec_layers = 2;
  c.n_heads = 2;
  c.d_model = 8;
  c.d_ffn = 16;
  c.max_positions = 16;
  c.fusion_mode = mode;
  return c;
}

VisualFeatures random_features(std::uint64_t seed, float sigma = 0.5f) {
  Rng rng(seed);
  std::normal_distribution<float> n(0.0f, sigma);
  VisualFeatures f;
  f.grid.resize(kGridChannels, kGridPositions);
  for (Eigen::Index i = 0; i < f.grid.size(); ++i) f.grid.data()[i] = n(rng);
  f.pooled.resize(kPooledDim);
  for (Eigen::Index i = 0; i < f.pooled.size(); ++i) f.pooled(i) = n(rng);
  return f;
}

template <typename Scalar>
TranslationModel<Scalar> make(FusionMode mode, std::uint64_t seed = 17) {
  return TranslationModel<Scalar>(tiny(mode), small_vocab(), small_vocab(), seed);
}

const TokenSeq kSource{"o", "runs", "."};
const TokenSeq kLonger{"o", "sits", "o", "runs", "."};

}  // namespace

TEST_CASE("fuse_gated and fuse_concat") {
  Matrix<double> h(2, 3);
  h << 1, 2, 3, 4, 5, 6;
  Matrix<double> avg(1, 3);
  avg << 10, 20, 30;
  CHECK(fuse_gated(h, Matrix<double>::Zero(2, 3), avg) == h);
  Matrix<double> expected(2, 3);
  expected << 11, 22, 33, 14, 25, 36;
  CHECK(fuse_gated(h, Matrix<double>::Ones(2, 3), avg) == expected);
  Matrix<double> half = Matrix<double>::Constant(2, 3, 0.5);
  CHECK(fuse_gated(h, half, avg)(1, 2) == doctest::Approx(21.0));
  CHECK_THROWS_AS(fuse_gated(h, Matrix<double>::Zero(3, 3), avg), ShapeError);

  const auto c = fuse_concat(h, avg);
  CHECK(c.rows() == 3);
  CHECK(c.topRows(2) == h);
  CHECK(c.row(2) == avg);
  CHECK_THROWS_AS(fuse_concat(h, Matrix<double>::Zero(1, 2)), ShapeError);
}

TEST_CASE("sinusoidal positions") {
  const auto pe = sinusoidal_positions<double>(4, 6);
  CHECK(pe(0, 0) == 0.0);
  CHECK(pe(0, 1) == 1.0);
  CHECK(pe(3, 0) == doctest::Approx(std::sin(3.0)));
  CHECK(pe(2, 3) == doctest::Approx(std::cos(2.0 * std::pow(10000.0, -2.0 / 6))));
}

TEST_CASE("config validation and fusion names") {
  CHECK(parse_fusion_mode("gated") == FusionMode::gated);
  CHECK(to_string(FusionMode::concat) == "concat");
  CHECK_THROWS_AS(parse_fusion_mode("sum"), Error);
  auto c = tiny(FusionMode::none);
  c.n_heads = 3;
  CHECK_THROWS_AS((TranslationModel<float>(c, small_vocab(), small_vocab(), 1)), Error);
}

TEST_CASE("encoder and decoder shapes") {
  auto model = make<float>(FusionMode::none);
  const auto state = model.encode_text(kSource);
  CHECK(state.h_text.rows() == 4);  // three tokens plus <eos>
  CHECK(state.h_text.cols() == 8);
  CHECK(std::none_of(state.pad_mask.begin(), state.pad_mask.end(), [](bool b) { return b; }));

  const auto lp = model.forward(kSource, nullptr, {"he", "runs"});
  CHECK(lp.rows() == 3);
  CHECK(lp.cols() == 10);
  for (Eigen::Index r = 0; r < lp.rows(); ++r) CHECK(lp.row(r).array().exp().sum() == doctest::Approx(1.0).epsilon(1e-5));

  CHECK(model.encode_text({"o", "unseen"}).h_text.rows() == 3);
  CHECK_THROWS_AS(model.encode_text({"o", "unseen"}, true), Error);
}

TEST_CASE("gated fusion with the gate pinned at zero returns the text encoder output") {
  const auto f = random_features(1);
  auto text = make<float>(FusionMode::none);
  auto gated = make<float>(FusionMode::gated);
  const auto text_state = text.encode_text(kSource);
  const auto gated_state = gated.encode_text(kSource);
  CHECK(gated_state.h_text == text_state.h_text);

  const auto fused = gated.gated_fusion(gated_state, f.pooled, 0.0);
  CHECK(fused.h == text_state.h_text);

  const auto open = gated.gated_fusion(gated_state, f.pooled);
  CHECK(open.h.rows() == text_state.h_text.rows());
  CHECK(open.h != text_state.h_text);
  const auto lambda = gated.gate_values(gated_state, f.pooled);
  CHECK(lambda.rows() == 4);
  CHECK(lambda.cols() == 8);
  CHECK(lambda.minCoeff() > 0.0f);
  CHECK(lambda.maxCoeff() < 1.0f);

  CHECK_THROWS_AS(gated.gated_fusion(gated_state, PooledFeatures::Zero(10)), ShapeError);
  CHECK_THROWS_AS(text.gated_fusion(text_state, f.pooled), Error);
}

TEST_CASE("concatenation appends 196 visual rows after an unchanged text block") {
  const auto f = random_features(2);
  auto concat = make<float>(FusionMode::concat);
  for (const auto& src : {kSource, kLonger}) {
    const auto state = concat.encode_text(src);
    const auto fused = concat.concat_fusion(state, f.grid);
    const auto n = state.h_text.rows();
    CHECK(fused.h.rows() == n + 196);
    CHECK(fused.h.cols() == 8);
    CHECK(fused.h.topRows(n) == state.h_text);
    CHECK(fused.attendable.size() == static_cast<std::size_t>(n + 196));
    CHECK(std::all_of(fused.attendable.begin(), fused.attendable.end(), [](bool b) { return b; }));
  }
  CHECK_THROWS_AS(concat.concat_fusion(concat.encode_text(kSource), GridFeatures::Zero(1024, 195)), ShapeError);
}

TEST_CASE("padding does not change the encoding of real positions") {
  auto model = make<float>(FusionMode::none);
  const auto alone = model.encode_text(kSource);
  const auto batch = model.encode_batch({kSource, kLonger});
  REQUIRE(batch.size() == 2);
  CHECK(batch[0].h_text.rows() == 6);
  const std::vector<bool> mask{false, false, false, false, true, true};
  CHECK(batch[0].pad_mask == mask);
  const double diff = (batch[0].h_text.topRows(4) - alone.h_text).cwiseAbs().maxCoeff();
  CHECK(diff < 1e-5);
  CHECK((batch[1].h_text - model.encode_text(kLonger).h_text).cwiseAbs().maxCoeff() < 1e-5);
}

TEST_CASE("parameters shared by fusion modes start identical") {
  auto text = make<float>(FusionMode::none);
  auto gated = make<float>(FusionMode::gated);
  auto concat = make<float>(FusionMode::concat);
  for (const auto& p : text.params()) {
    REQUIRE(gated.params().contains(p.name));
    REQUIRE(concat.params().contains(p.name));
    CHECK(gated.params().at(p.name).value == p.value);
    CHECK(concat.params().at(p.name).value == p.value);
  }
  CHECK(gated.params().size() > text.params().size());
  CHECK(concat.params().size() > text.params().size());
  auto other = make<float>(FusionMode::none, 18);
  CHECK(other.params().at(text.params()[0].name).value != text.params()[0].value);
}

TEST_CASE("whole-model gradients match finite differences") {
  const std::vector<std::pair<TokenSeq, TokenSeq>> data{{{"o", "runs", "."}, {"he", "runs", "."}},
                                                        {{"o", "sits"}, {"she", "sits", "."}}};
  const std::vector<VisualFeatures> feats{random_features(3), random_features(4)};
  for (auto mode : {FusionMode::none, FusionMode::gated, FusionMode::concat}) {
    CAPTURE(to_string(mode));
    auto model = make<double>(mode, 23);
    std::vector<std::vector<int>> src, tgt;
    for (const auto& [s, t] : data) {
      src.push_back(model.source_ids(s));
      tgt.push_back(model.target_ids(t));
    }
    auto backward = [&] {
      for (std::size_t i = 0; i < data.size(); ++i) {
        model.accumulate_gradients(src[i], tgt[i], model.multimodal() ? &feats[i] : nullptr, 0.1, 1.0, {});
      }
    };
    auto value = [&] {
      double total = 0;
      for (std::size_t i = 0; i < data.size(); ++i) {
        total += model.loss(src[i], tgt[i], model.multimodal() ? &feats[i] : nullptr, 0.1).loss_sum;
      }
      return total;
    };
    // The loss is about 10, so rounding noise in the quotient is near 1e-9.
    const auto r = testing::check_gradients(model.params(), backward, value, 6, 1e-5);
    INFO("worst at " << r.where);
    CHECK(r.checked > 100);
    CHECK(r.worst < 1e-3);
    // Softmax ignores a shift shared by all keys, so key biases get no gradient.
    for (const auto& p : model.params()) {
      if (p.name.find("attn.k.bias") != std::string::npos) CHECK(p.grad.cwiseAbs().maxCoeff() < 1e-12);
    }
  }
}

TEST_CASE("beam search with a wide beam finds the exhaustive optimum") {
  // Generable tokens: <unk>, <eos>, a. max_len 3 gives 1 + 2 + 4 finished
  // sequences plus 8 closed at the length limit.
  const Vocab v({"<pad>", "<unk>", "<bos>", "<eos>", "a"});
  ModelConfig cfg = tiny(FusionMode::none);
  for (std::uint64_t seed : {1, 2, 3, 4, 5, 6}) {
    TranslationModel<double> model(cfg, v, v, seed);
    const std::vector<int> src{4, 4, 3};
    std::vector<std::vector<int>> all;
    std::function<void(std::vector<int>)> grow = [&](std::vector<int> prefix) {
      for (int t : {1, 3, 4}) {
        auto next = prefix;
        next.push_back(t);
        if (t == 3 || next.size() == 3) {
          all.push_back(next);
        } else {
          grow(next);
        }
      }
    };
    grow({});
    REQUIRE(all.size() == 15);

    std::vector<int> best;
    double best_score = -1e300, best_lp = 0;
    for (const auto& seq : all) {
      const std::vector<int> prefix(seq.begin(), seq.end() - 1);
      const auto lp = model.forward_ids(src, nullptr, prefix);
      double total = 0;
      for (std::size_t i = 0; i < seq.size(); ++i) total += lp(static_cast<Eigen::Index>(i), seq[i]);
      const double score = total / static_cast<double>(seq.size());
      if (score > best_score) {
        best_score = score;
        best_lp = total;
        best = seq;
      }
    }
    const auto hyp = beam_search(model, src, nullptr, {27, 3});
    CAPTURE(seed);
    CHECK(hyp.ids == best);
    CHECK(hyp.log_prob == doctest::Approx(best_lp).epsilon(1e-12));
    CHECK(hyp.score == doctest::Approx(best_score).epsilon(1e-12));
  }
}

TEST_CASE("beam of one equals greedy decoding") {
  const auto f = random_features(5);
  for (auto mode : {FusionMode::none, FusionMode::gated, FusionMode::concat}) {
    for (std::uint64_t seed : {1, 2, 3}) {
      auto model = make<float>(mode, seed);
      const auto src = model.source_ids(kLonger);
      const auto hyp = beam_search(model, src, &f, {1, 10});
      CHECK(hyp.ids == greedy_decode(model, src, &f, 10));
      CHECK(hyp.ids.size() <= 10);
      for (int id : hyp.ids) {
        CHECK(id != Vocab::kPad);
        CHECK(id != Vocab::kBos);
      }
    }
  }
}

TEST_CASE("beam search arguments and translate") {
  auto model = make<float>(FusionMode::none);
  const auto src = model.source_ids(kSource);
  CHECK_THROWS_AS(beam_search(model, src, nullptr, {0, 5}), Error);
  CHECK_THROWS_AS(beam_search(model, src, nullptr, {5, 0}), Error);
  const auto hyp = beam_search(model, src, nullptr, {4, 6});
  const auto tokens = translate(model, kSource, nullptr, {4, 6});
  CHECK(tokens == model.tgt_vocab().decode(hyp.ids));
  auto gated = make<float>(FusionMode::gated);
  CHECK_THROWS(beam_search(gated, src, nullptr, {2, 4}));
}
