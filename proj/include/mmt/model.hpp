#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

#include "mmt/feature_store.hpp"
#include "mmt/tape.hpp"
#include "mmt/vocab.hpp"

namespace mmt {

enum class FusionMode { none, gated, concat };

std::string to_string(FusionMode mode);
FusionMode parse_fusion_mode(std::string_view name);

struct ModelConfig {
  int n_enc_layers = 4;
  int n_dec_layers = 4;
  int n_heads = 4;
  int d_model = 128;
  int d_ffn = 256;
  int src_vocab = 0;
  int tgt_vocab = 0;
  FusionMode fusion_mode = FusionMode::none;
  int max_positions = 256;

  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

template <typename Scalar>
struct EncoderState {
  Matrix<Scalar> h_text;       // sequence length x d_model
  std::vector<bool> pad_mask;  // true at padding positions
};

template <typename Scalar>
struct FusedState {
  Matrix<Scalar> h;              // rows: text (+ 196 visual positions in concat mode)
  std::vector<bool> attendable;  // decoder cross-attention mask over the rows of h
};

/// Per-call switches. Training passes train = true with a dropout rate and
/// an rng; gate_override pins every gate entry to a constant.
struct RunOptions {
  bool train = false;
  double dropout = 0.0;
  Rng* rng = nullptr;
  std::optional<double> gate_override;
};

/// H = H_text + lambda (.) H_avg, with h_avg either a single row (broadcast
/// over positions) or one row per position.
template <typename TextDerived, typename GateDerived, typename AvgDerived>
Matrix<typename TextDerived::Scalar> fuse_gated(const Eigen::MatrixBase<TextDerived>& h_text,
                                                const Eigen::MatrixBase<GateDerived>& lambda,
                                                const Eigen::MatrixBase<AvgDerived>& h_avg) {
  using Scalar = typename TextDerived::Scalar;
  if (lambda.rows() != h_text.rows() || lambda.cols() != h_text.cols() || h_avg.cols() != h_text.cols() ||
      (h_avg.rows() != 1 && h_avg.rows() != h_text.rows())) {
    throw ShapeError("fuse_gated: inconsistent shapes");
  }
  Matrix<Scalar> avg = h_avg.rows() == 1 ? Matrix<Scalar>(h_avg.replicate(h_text.rows(), 1)) : Matrix<Scalar>(h_avg);
  return (h_text.array() + lambda.array() * avg.array()).matrix();
}

/// H = [H_text ; H_visual] stacked by rows.
template <typename TextDerived, typename VisualDerived>
Matrix<typename TextDerived::Scalar> fuse_concat(const Eigen::MatrixBase<TextDerived>& h_text,
                                                 const Eigen::MatrixBase<VisualDerived>& h_visual) {
  if (h_text.cols() != h_visual.cols()) throw ShapeError("fuse_concat: column counts differ");
  Matrix<typename TextDerived::Scalar> out(h_text.rows() + h_visual.rows(), h_text.cols());
  out << h_text, h_visual;
  return out;
}

/// Sinusoidal position table (positions x d_model), sin on even and cos on
/// odd dimensions.
template <typename Scalar>
Matrix<Scalar> sinusoidal_positions(int positions, int d_model) {
  Matrix<Scalar> pe(positions, d_model);
  for (int pos = 0; pos < positions; ++pos) {
    for (int i = 0; i < d_model; i += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(i) / d_model);
      pe(pos, i) = static_cast<Scalar>(std::sin(pos * freq));
      if (i + 1 < d_model) pe(pos, i + 1) = static_cast<Scalar>(std::cos(pos * freq));
    }
  }
  return pe;
}

/// Transformer encoder-decoder with optional visual fusion between the
/// encoder and the decoder. Pre-norm layers; untied embeddings.
template <typename Scalar>
class TranslationModel {
 public:
  using Mat = Matrix<Scalar>;
  using TapeT = Tape<Scalar>;
  using Var = typename TapeT::Var;

  /// Memory handed to the decoder.
  struct Memory {
    Var h;
    std::vector<bool> attendable;
  };

  struct LossResult {
    double loss_sum = 0.0;
    std::size_t tokens = 0;
  };

  /// Fresh parameters. Each parameter is seeded from (seed, name), so
  /// parameters shared by two fusion modes start identical.
  TranslationModel(ModelConfig config, Vocab src_vocab, Vocab tgt_vocab, std::uint64_t seed);
  TranslationModel(ModelConfig config, Vocab src_vocab, Vocab tgt_vocab, ParamStore<Scalar> params);

  const ModelConfig& config() const { return config_; }
  const Vocab& src_vocab() const { return src_vocab_; }
  const Vocab& tgt_vocab() const { return tgt_vocab_; }
  ParamStore<Scalar>& params() { return params_; }
  const ParamStore<Scalar>& params() const { return params_; }
  bool multimodal() const { return config_.fusion_mode != FusionMode::none; }

  /// Source ids with the trailing <eos>.
  std::vector<int> source_ids(const TokenSeq& tokens, bool strict = false) const;
  std::vector<int> target_ids(const TokenSeq& tokens) const;

  // Graph builders. `pad` marks padded source positions.
  Var encode(TapeT& tape, std::span<const int> src_ids, const std::vector<bool>& pad,
             const RunOptions& opts);
  Memory fuse(TapeT& tape, Var h_text, const std::vector<bool>& pad, const VisualFeatures* features,
              const RunOptions& opts);
  /// Log-probabilities, one row per prefix position.
  Var decode(TapeT& tape, const Memory& memory, std::span<const int> prefix_ids, const RunOptions& opts);

  /// Inference-mode encoder. Unknown tokens map to <unk>; with strict = true
  /// they are an error.
  EncoderState<Scalar> encode_text(const TokenSeq& tokens, bool strict = false) const;
  /// Pads every sequence to the longest one and encodes it with pad keys masked.
  std::vector<EncoderState<Scalar>> encode_batch(const std::vector<TokenSeq>& batch) const;
  FusedState<Scalar> gated_fusion(const EncoderState<Scalar>& state, const PooledFeatures& pooled,
                                  std::optional<double> gate_override = std::nullopt) const;
  FusedState<Scalar> concat_fusion(const EncoderState<Scalar>& state, const GridFeatures& grid) const;
  /// Inference-mode gate values lambda for a given encoder state.
  Mat gate_values(const EncoderState<Scalar>& state, const PooledFeatures& pooled) const;

  /// Next-token log-probabilities for <bos> + prefix: (|prefix| + 1) x V.
  Mat forward(const TokenSeq& source, const VisualFeatures* features, const TokenSeq& prefix) const;
  Mat forward_ids(std::span<const int> src_ids, const VisualFeatures* features,
                  std::span<const int> prefix_ids) const;

  /// Label-smoothed loss of one example; with a recording tape the gradient
  /// scaled by grad_scale is added to params().grad.
  LossResult accumulate_gradients(std::span<const int> src_ids, std::span<const int> tgt_ids,
                                  const VisualFeatures* features, double label_smoothing,
                                  double grad_scale, const RunOptions& opts);
  LossResult loss(std::span<const int> src_ids, std::span<const int> tgt_ids,
                  const VisualFeatures* features, double label_smoothing) const;

  /// Decoder memory computed once per source, for search.
  struct InferenceContext;
  std::unique_ptr<InferenceContext> prepare(std::span<const int> src_ids, const VisualFeatures* features) const;
  /// Log-probabilities of the token following <bos> + prefix.
  RowVector<Scalar> next_log_probs(InferenceContext& ctx, std::span<const int> prefix_ids) const;

 private:
  struct Linear {
    std::size_t weight, bias;
  };
  struct Norm {
    std::size_t gain, bias;
  };
  struct Attention {
    Linear q, k, v, o;
  };
  struct EncoderLayer {
    Norm norm1, norm2;
    Attention self_attn;
    Linear ffn1, ffn2;
  };
  struct DecoderLayer {
    Norm norm1, norm2, norm3;
    Attention self_attn, cross_attn;
    Linear ffn1, ffn2;
  };

  void declare_parameters();
  Linear linear(const std::string& name, int in, int out);
  Norm norm(const std::string& name, int dim);
  Attention attention(const std::string& name);
  void initialize(std::uint64_t seed);

  Var apply(TapeT& tape, const Linear& l, Var x);
  Var apply(TapeT& tape, const Norm& n, Var x);
  Var attend(TapeT& tape, const Attention& a, Var query, Var keys, const AttentionMask& allowed);
  Var feed_forward(TapeT& tape, const Linear& l1, const Linear& l2, Var x);
  Var embed(TapeT& tape, std::size_t table, std::span<const int> ids, int vocab_size, const RunOptions& opts);
  Var maybe_dropout(TapeT& tape, Var x, const RunOptions& opts);

  // Read-only graph building goes through a non-recording tape, which never
  // writes to parameters.
  TranslationModel& mutable_self() const { return const_cast<TranslationModel&>(*this); }

  ModelConfig config_;
  Vocab src_vocab_;
  Vocab tgt_vocab_;
  ParamStore<Scalar> params_;
  Mat positions_;

  std::size_t src_embed_ = 0, tgt_embed_ = 0;
  std::vector<EncoderLayer> enc_layers_;
  std::vector<DecoderLayer> dec_layers_;
  Norm enc_final_{}, dec_final_{};
  Linear out_proj_{};
  Linear pooled_proj_{}, gate_{}, grid_proj_{};
};

template <typename Scalar>
struct TranslationModel<Scalar>::InferenceContext {
  TapeT tape{false};
  Memory memory;
};

struct BeamOptions {
  int beam_size = 5;
  int max_len = 64;
};

struct Hypothesis {
  std::vector<int> ids;  // generated ids, including a final <eos> when present
  double log_prob = 0.0;
  double score = 0.0;  // log_prob / ids.size()
};

/// Beam search with length-normalized final selection. Hypotheses are pruned
/// on cumulative log-probability; a hypothesis ending in <eos> leaves the
/// beam, and hypotheses alive at max_len are closed by force. <pad> and <bos>
/// are never generated.
template <typename Scalar>
Hypothesis beam_search(const TranslationModel<Scalar>& model, std::span<const int> src_ids,
                       const VisualFeatures* features, const BeamOptions& options = {});

/// Token-level convenience wrapper: returns the hypothesis without <eos>.
template <typename Scalar>
TokenSeq translate(const TranslationModel<Scalar>& model, const TokenSeq& source,
                   const VisualFeatures* features, const BeamOptions& options = {});

template <typename Scalar>
std::vector<int> greedy_decode(const TranslationModel<Scalar>& model, std::span<const int> src_ids,
                               const VisualFeatures* features, int max_len);

extern template class TranslationModel<float>;
extern template class TranslationModel<double>;

}  // namespace mmt
