#include "mmt/model.hpp"

#include <algorithm>
#include <memory>
#include <numeric>

namespace mmt {

std::string to_string(FusionMode mode) {
  switch (mode) {
    case FusionMode::none: return "none";
    case FusionMode::gated: return "gated";
    case FusionMode::concat: return "concat";
  }
  return "none";
}

FusionMode parse_fusion_mode(std::string_view name) {
  if (name == "none" || name == "text") return FusionMode::none;
  if (name == "gated") return FusionMode::gated;
  if (name == "concat") return FusionMode::concat;
  throw Error("unknown fusion mode '" + std::string(name) + "' (expected none, gated or concat)");
}

void ModelConfig::validate() const {
  if (n_enc_layers < 1 || n_dec_layers < 1) throw Error("model needs at least one encoder and decoder layer");
  if (n_heads < 1 || d_model < 1 || d_ffn < 1) throw Error("model dimensions must be positive");
  if (d_model % n_heads != 0) {
    throw Error("d_model (" + std::to_string(d_model) + ") must be divisible by n_heads (" +
                std::to_string(n_heads) + ")");
  }
  if (src_vocab <= Vocab::kNumSpecials || tgt_vocab <= Vocab::kNumSpecials) {
    throw Error("vocabulary sizes must exceed the special symbols");
  }
  if (max_positions < 2) throw Error("max_positions must be at least 2");
}

template <typename Scalar>
TranslationModel<Scalar>::TranslationModel(ModelConfig config, Vocab src_vocab, Vocab tgt_vocab,
                                           std::uint64_t seed)
    : config_(config), src_vocab_(std::move(src_vocab)), tgt_vocab_(std::move(tgt_vocab)) {
  if (config_.src_vocab == 0) config_.src_vocab = src_vocab_.size();
  if (config_.tgt_vocab == 0) config_.tgt_vocab = tgt_vocab_.size();
  if (config_.src_vocab != src_vocab_.size() || config_.tgt_vocab != tgt_vocab_.size()) {
    throw Error("model config vocabulary sizes disagree with the vocabularies");
  }
  config_.validate();
  declare_parameters();
  initialize(seed);
}

template <typename Scalar>
TranslationModel<Scalar>::TranslationModel(ModelConfig config, Vocab src_vocab, Vocab tgt_vocab,
                                           ParamStore<Scalar> params)
    : config_(config), src_vocab_(std::move(src_vocab)), tgt_vocab_(std::move(tgt_vocab)) {
  if (config_.src_vocab != src_vocab_.size() || config_.tgt_vocab != tgt_vocab_.size()) {
    throw Error("model config vocabulary sizes disagree with the vocabularies");
  }
  config_.validate();
  declare_parameters();
  if (params.size() != params_.size()) {
    throw Error("parameter set has " + std::to_string(params.size()) + " tensors; model expects " +
                std::to_string(params_.size()));
  }
  for (auto& p : params_) {
    const auto& src = params.at(p.name);
    if (src.value.rows() != p.value.rows() || src.value.cols() != p.value.cols()) {
      throw ShapeError("parameter '" + p.name + "' has shape " + std::to_string(src.value.rows()) + "x" +
                       std::to_string(src.value.cols()) + "; expected " + std::to_string(p.value.rows()) +
                       "x" + std::to_string(p.value.cols()));
    }
    p.value = src.value;
  }
}

template <typename Scalar>
typename TranslationModel<Scalar>::Linear TranslationModel<Scalar>::linear(const std::string& name, int in,
                                                                           int out) {
  return {params_.add(name + ".weight", in, out), params_.add(name + ".bias", 1, out)};
}

template <typename Scalar>
typename TranslationModel<Scalar>::Norm TranslationModel<Scalar>::norm(const std::string& name, int dim) {
  return {params_.add(name + ".gain", 1, dim), params_.add(name + ".bias", 1, dim)};
}

template <typename Scalar>
typename TranslationModel<Scalar>::Attention TranslationModel<Scalar>::attention(const std::string& name) {
  const int d = config_.d_model;
  return {linear(name + ".q", d, d), linear(name + ".k", d, d), linear(name + ".v", d, d),
          linear(name + ".o", d, d)};
}

template <typename Scalar>
void TranslationModel<Scalar>::declare_parameters() {
  const int d = config_.d_model;
  positions_ = sinusoidal_positions<Scalar>(config_.max_positions, d);

  src_embed_ = params_.add("encoder.embed", config_.src_vocab, d);
  for (int l = 0; l < config_.n_enc_layers; ++l) {
    const auto p = "encoder.layers." + std::to_string(l);
    EncoderLayer layer;
    layer.norm1 = norm(p + ".norm1", d);
    layer.self_attn = attention(p + ".self_attn");
    layer.norm2 = norm(p + ".norm2", d);
    layer.ffn1 = linear(p + ".ffn1", d, config_.d_ffn);
    layer.ffn2 = linear(p + ".ffn2", config_.d_ffn, d);
    enc_layers_.push_back(layer);
  }
  enc_final_ = norm("encoder.final_norm", d);

  tgt_embed_ = params_.add("decoder.embed", config_.tgt_vocab, d);
  for (int l = 0; l < config_.n_dec_layers; ++l) {
    const auto p = "decoder.layers." + std::to_string(l);
    DecoderLayer layer;
    layer.norm1 = norm(p + ".norm1", d);
    layer.self_attn = attention(p + ".self_attn");
    layer.norm2 = norm(p + ".norm2", d);
    layer.cross_attn = attention(p + ".cross_attn");
    layer.norm3 = norm(p + ".norm3", d);
    layer.ffn1 = linear(p + ".ffn1", d, config_.d_ffn);
    layer.ffn2 = linear(p + ".ffn2", config_.d_ffn, d);
    dec_layers_.push_back(layer);
  }
  dec_final_ = norm("decoder.final_norm", d);
  out_proj_ = linear("decoder.output", d, config_.tgt_vocab);

  if (config_.fusion_mode == FusionMode::gated) {
    pooled_proj_ = linear("fusion.pooled_proj", static_cast<int>(kPooledDim), d);
    gate_ = linear("fusion.gate", 2 * d, d);
  } else if (config_.fusion_mode == FusionMode::concat) {
    grid_proj_ = linear("fusion.grid_proj", static_cast<int>(kGridChannels), d);
  }
}

template <typename Scalar>
void TranslationModel<Scalar>::initialize(std::uint64_t seed) {
  for (auto& p : params_) {
    Rng rng(derive_seed(seed, "init/" + p.name));
    const bool is_bias = p.name.ends_with(".bias");
    const bool is_gain = p.name.ends_with(".gain");
    const bool is_embed = p.name.ends_with(".embed");
    if (is_gain) {
      p.value.setOnes();
    } else if (is_bias) {
      p.value.setZero();
    } else {
      // Uniform with variance 1/fan_in; embeddings use d_model as fan-in.
      const double fan_in = is_embed ? config_.d_model : static_cast<double>(p.value.rows());
      const double bound = std::sqrt(3.0 / fan_in);
      std::uniform_real_distribution<double> u(-bound, bound);
      for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = static_cast<Scalar>(u(rng));
      if (is_embed) p.value.row(Vocab::kPad).setZero();
    }
    p.grad.setZero();
  }
}

template <typename Scalar>
std::vector<int> TranslationModel<Scalar>::source_ids(const TokenSeq& tokens, bool strict) const {
  auto ids = src_vocab_.encode(tokens, strict);
  ids.push_back(Vocab::kEos);
  return ids;
}

template <typename Scalar>
std::vector<int> TranslationModel<Scalar>::target_ids(const TokenSeq& tokens) const {
  return tgt_vocab_.encode(tokens);
}

template <typename Scalar>
typename TranslationModel<Scalar>::Var TranslationModel<Scalar>::apply(TapeT& tape, const Linear& l, Var x) {
  return tape.affine(x, tape.param(params_[l.weight]), tape.param(params_[l.bias]));
}

template <typename Scalar>
typename TranslationModel<Scalar>::Var TranslationModel<Scalar>::apply(TapeT& tape, const Norm& n, Var x) {
  return tape.layer_norm(x, tape.param(params_[n.gain]), tape.param(params_[n.bias]));
}

template <typename Scalar>
typename TranslationModel<Scalar>::Var TranslationModel<Scalar>::attend(TapeT& tape, const Attention& a,
                                                                        Var query, Var keys,
                                                                        const AttentionMask& allowed) {
  const int heads = config_.n_heads;
  const int dh = config_.d_model / heads;
  const Scalar inv_sqrt = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));
  Var q = apply(tape, a.q, query);
  Var k = apply(tape, a.k, keys);
  Var v = apply(tape, a.v, keys);
  std::vector<Var> outs;
  outs.reserve(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    Var qh = tape.slice_cols(q, h * dh, dh);
    Var kh = tape.slice_cols(k, h * dh, dh);
    Var vh = tape.slice_cols(v, h * dh, dh);
    Var probs = tape.masked_softmax(tape.scale(tape.matmul_nt(qh, kh), inv_sqrt), allowed);
    outs.push_back(tape.matmul(probs, vh));
  }
  Var merged = heads == 1 ? outs.front() : tape.concat_cols(outs);
  return apply(tape, a.o, merged);
}

template <typename Scalar>
typename TranslationModel<Scalar>::Var TranslationModel<Scalar>::feed_forward(TapeT& tape, const Linear& l1,
                                                                              const Linear& l2, Var x) {
  return apply(tape, l2, tape.relu(apply(tape, l1, x)));
}

template <typename Scalar>
typename TranslationModel<Scalar>::Var TranslationModel<Scalar>::maybe_dropout(TapeT& tape, Var x,
                                                                               const RunOptions& opts) {
  if (!opts.train || opts.dropout <= 0.0) return x;
  if (!opts.rng) throw Error("training-mode dropout needs an rng");
  return tape.dropout(x, static_cast<Scalar>(opts.dropout), *opts.rng);
}

template <typename Scalar>
typename TranslationModel<Scalar>::Var TranslationModel<Scalar>::embed(TapeT& tape, std::size_t table,
                                                                       std::span<const int> ids, int vocab_size,
                                                                       const RunOptions& opts) {
  const auto n = static_cast<Eigen::Index>(ids.size());
  if (n == 0) throw Error("cannot embed an empty sequence");
  if (n > config_.max_positions) {
    throw Error("sequence of length " + std::to_string(n) + " exceeds max_positions " +
                std::to_string(config_.max_positions));
  }
  for (int id : ids) {
    if (id < 0 || id >= vocab_size) throw Error("token id " + std::to_string(id) + " outside the vocabulary");
  }
  Var x = tape.scale(tape.gather_rows(tape.param(params_[table]), ids),
                     std::sqrt(static_cast<Scalar>(config_.d_model)));
  x = tape.add(x, tape.constant(positions_.topRows(n)));
  return maybe_dropout(tape, x, opts);
}

template <typename Scalar>
typename TranslationModel<Scalar>::Var TranslationModel<Scalar>::encode(TapeT& tape, std::span<const int> src_ids,
                                                                        const std::vector<bool>& pad,
                                                                        const RunOptions& opts) {
  const auto n = static_cast<Eigen::Index>(src_ids.size());
  if (pad.size() != src_ids.size()) throw ShapeError("encode: pad mask length differs from the sequence");
  AttentionMask allowed(n, n);
  for (Eigen::Index c = 0; c < n; ++c) allowed.col(c).setConstant(!pad[static_cast<std::size_t>(c)]);

  Var x = embed(tape, src_embed_, src_ids, config_.src_vocab, opts);
  for (const auto& layer : enc_layers_) {
    Var h = apply(tape, layer.norm1, x);
    x = tape.add(x, maybe_dropout(tape, attend(tape, layer.self_attn, h, h, allowed), opts));
    h = apply(tape, layer.norm2, x);
    x = tape.add(x, maybe_dropout(tape, feed_forward(tape, layer.ffn1, layer.ffn2, h), opts));
  }
  return apply(tape, enc_final_, x);
}

template <typename Scalar>
typename TranslationModel<Scalar>::Memory TranslationModel<Scalar>::fuse(TapeT& tape, Var h_text,
                                                                         const std::vector<bool>& pad,
                                                                         const VisualFeatures* features,
                                                                         const RunOptions& opts) {
  Memory memory;
  memory.attendable.resize(pad.size());
  for (std::size_t i = 0; i < pad.size(); ++i) memory.attendable[i] = !pad[i];

  switch (config_.fusion_mode) {
    case FusionMode::none:
      memory.h = h_text;
      return memory;

    case FusionMode::gated: {
      if (!features) throw Error("gated fusion model requires visual features");
      if (features->pooled.size() != kPooledDim) {
        throw ShapeError("pooled features must have length 2048; got " + std::to_string(features->pooled.size()));
      }
      const auto n = tape.value(h_text).rows();
      Var pooled = tape.constant(features->pooled.transpose().template cast<Scalar>());
      Var h_avg = tape.broadcast_row(apply(tape, pooled_proj_, pooled), n);
      Var lambda;
      if (opts.gate_override) {
        lambda = tape.constant(Mat::Constant(n, config_.d_model, static_cast<Scalar>(*opts.gate_override)));
      } else {
        lambda = tape.sigmoid(apply(tape, gate_, tape.concat_cols({h_text, h_avg})));
      }
      memory.h = tape.add(h_text, tape.hadamard(lambda, h_avg));
      return memory;
    }

    case FusionMode::concat: {
      if (!features) throw Error("concatenation model requires visual features");
      if (features->grid.rows() != kGridChannels || features->grid.cols() != kGridPositions) {
        throw ShapeError("grid features must have shape (1024,14,14)");
      }
      // One row per grid position, 1024 channels each; no positional encoding.
      Var grid = tape.constant(features->grid.transpose().template cast<Scalar>());
      Var visual = apply(tape, grid_proj_, grid);
      memory.h = tape.concat_rows(h_text, visual);
      memory.attendable.resize(pad.size() + static_cast<std::size_t>(kGridPositions), true);
      return memory;
    }
  }
  throw Error("unreachable fusion mode");
}

template <typename Scalar>
typename TranslationModel<Scalar>::Var TranslationModel<Scalar>::decode(TapeT& tape, const Memory& memory,
                                                                        std::span<const int> prefix_ids,
                                                                        const RunOptions& opts) {
  const auto n = static_cast<Eigen::Index>(prefix_ids.size());
  const auto m = static_cast<Eigen::Index>(memory.attendable.size());
  AttentionMask causal(n, n);
  for (Eigen::Index r = 0; r < n; ++r) {
    for (Eigen::Index c = 0; c < n; ++c) causal(r, c) = c <= r;
  }
  AttentionMask cross(n, m);
  for (Eigen::Index c = 0; c < m; ++c) cross.col(c).setConstant(memory.attendable[static_cast<std::size_t>(c)]);

  Var y = embed(tape, tgt_embed_, prefix_ids, config_.tgt_vocab, opts);
  for (const auto& layer : dec_layers_) {
    Var h = apply(tape, layer.norm1, y);
    y = tape.add(y, maybe_dropout(tape, attend(tape, layer.self_attn, h, h, causal), opts));
    h = apply(tape, layer.norm2, y);
    y = tape.add(y, maybe_dropout(tape, attend(tape, layer.cross_attn, h, memory.h, cross), opts));
    h = apply(tape, layer.norm3, y);
    y = tape.add(y, maybe_dropout(tape, feed_forward(tape, layer.ffn1, layer.ffn2, h), opts));
  }
  y = apply(tape, dec_final_, y);
  return tape.log_softmax(apply(tape, out_proj_, y));
}

template <typename Scalar>
EncoderState<Scalar> TranslationModel<Scalar>::encode_text(const TokenSeq& tokens, bool strict) const {
  const auto ids = source_ids(tokens, strict);
  TapeT tape(false);
  std::vector<bool> pad(ids.size(), false);
  Var h = mutable_self().encode(tape, ids, pad, {});
  return {tape.value(h), pad};
}

template <typename Scalar>
std::vector<EncoderState<Scalar>> TranslationModel<Scalar>::encode_batch(const std::vector<TokenSeq>& batch) const {
  std::vector<std::vector<int>> all;
  std::size_t longest = 0;
  for (const auto& tokens : batch) {
    all.push_back(source_ids(tokens));
    longest = std::max(longest, all.back().size());
  }
  std::vector<EncoderState<Scalar>> out;
  for (auto& ids : all) {
    std::vector<bool> pad(longest, false);
    for (std::size_t i = ids.size(); i < longest; ++i) pad[i] = true;
    ids.resize(longest, Vocab::kPad);
    TapeT tape(false);
    Var h = mutable_self().encode(tape, ids, pad, {});
    out.push_back({tape.value(h), pad});
  }
  return out;
}

template <typename Scalar>
FusedState<Scalar> TranslationModel<Scalar>::gated_fusion(const EncoderState<Scalar>& state,
                                                          const PooledFeatures& pooled,
                                                          std::optional<double> gate_override) const {
  if (config_.fusion_mode != FusionMode::gated) throw Error("gated_fusion on a model without gated fusion");
  if (pooled.size() != kPooledDim) {
    throw ShapeError("pooled features must have length 2048; got " + std::to_string(pooled.size()));
  }
  VisualFeatures f;
  f.pooled = pooled;
  TapeT tape(false);
  RunOptions opts;
  opts.gate_override = gate_override;
  auto memory = mutable_self().fuse(tape, tape.constant(state.h_text), state.pad_mask, &f, opts);
  return {tape.value(memory.h), memory.attendable};
}

template <typename Scalar>
typename TranslationModel<Scalar>::Mat TranslationModel<Scalar>::gate_values(const EncoderState<Scalar>& state,
                                                                             const PooledFeatures& pooled) const {
  if (config_.fusion_mode != FusionMode::gated) throw Error("gate_values on a model without gated fusion");
  auto& self = mutable_self();
  TapeT tape(false);
  Var h_text = tape.constant(state.h_text);
  Var h_avg = tape.broadcast_row(
      self.apply(tape, pooled_proj_, tape.constant(pooled.transpose().template cast<Scalar>())), state.h_text.rows());
  return tape.value(tape.sigmoid(self.apply(tape, gate_, tape.concat_cols({h_text, h_avg}))));
}

template <typename Scalar>
FusedState<Scalar> TranslationModel<Scalar>::concat_fusion(const EncoderState<Scalar>& state,
                                                           const GridFeatures& grid) const {
  if (config_.fusion_mode != FusionMode::concat) throw Error("concat_fusion on a model without concatenation");
  if (grid.rows() != kGridChannels || grid.cols() != kGridPositions) {
    throw ShapeError("grid features must have shape (1024,14,14); got " + std::to_string(grid.rows()) + "x" +
                     std::to_string(grid.cols()));
  }
  VisualFeatures f;
  f.grid = grid;
  TapeT tape(false);
  auto memory = mutable_self().fuse(tape, tape.constant(state.h_text), state.pad_mask, &f, {});
  return {tape.value(memory.h), memory.attendable};
}

template <typename Scalar>
typename TranslationModel<Scalar>::Mat TranslationModel<Scalar>::forward(const TokenSeq& source,
                                                                         const VisualFeatures* features,
                                                                         const TokenSeq& prefix) const {
  return forward_ids(source_ids(source), features, target_ids(prefix));
}

template <typename Scalar>
typename TranslationModel<Scalar>::Mat TranslationModel<Scalar>::forward_ids(std::span<const int> src_ids,
                                                                             const VisualFeatures* features,
                                                                             std::span<const int> prefix_ids) const {
  auto ctx = prepare(src_ids, features);
  std::vector<int> dec_in{Vocab::kBos};
  dec_in.insert(dec_in.end(), prefix_ids.begin(), prefix_ids.end());
  auto& self = mutable_self();
  return ctx->tape.value(self.decode(ctx->tape, ctx->memory, dec_in, {}));
}

template <typename Scalar>
std::unique_ptr<typename TranslationModel<Scalar>::InferenceContext> TranslationModel<Scalar>::prepare(
    std::span<const int> src_ids, const VisualFeatures* features) const {
  if (multimodal() && !features) {
    throw Error(to_string(config_.fusion_mode) + " model requires visual features");
  }
  auto ctx = std::make_unique<InferenceContext>();
  auto& self = mutable_self();
  std::vector<bool> pad(src_ids.size(), false);
  Var h = self.encode(ctx->tape, src_ids, pad, {});
  ctx->memory = self.fuse(ctx->tape, h, pad, features, {});
  return ctx;
}

template <typename Scalar>
RowVector<Scalar> TranslationModel<Scalar>::next_log_probs(InferenceContext& ctx,
                                                           std::span<const int> prefix_ids) const {
  // Decoding appends nodes to the context's tape; the memory nodes stay valid.
  auto& tape = ctx.tape;
  std::vector<int> dec_in{Vocab::kBos};
  dec_in.insert(dec_in.end(), prefix_ids.begin(), prefix_ids.end());
  Var lp = mutable_self().decode(tape, ctx.memory, dec_in, {});
  return tape.value(lp).bottomRows(1);
}

template <typename Scalar>
typename TranslationModel<Scalar>::LossResult TranslationModel<Scalar>::accumulate_gradients(
    std::span<const int> src_ids, std::span<const int> tgt_ids, const VisualFeatures* features,
    double label_smoothing, double grad_scale, const RunOptions& opts) {
  if (multimodal() && !features) {
    throw Error(to_string(config_.fusion_mode) + " model requires visual features");
  }
  TapeT tape(true);
  std::vector<bool> pad(src_ids.size(), false);
  for (std::size_t i = 0; i < src_ids.size(); ++i) pad[i] = src_ids[i] == Vocab::kPad;
  Var h = encode(tape, src_ids, pad, opts);
  auto memory = fuse(tape, h, pad, features, opts);

  std::vector<int> dec_in{Vocab::kBos};
  dec_in.insert(dec_in.end(), tgt_ids.begin(), tgt_ids.end());
  std::vector<int> gold(tgt_ids.begin(), tgt_ids.end());
  gold.push_back(Vocab::kEos);

  Var log_probs = decode(tape, memory, dec_in, opts);
  Var total = tape.label_smoothed_nll(log_probs, gold, static_cast<Scalar>(label_smoothing), Vocab::kPad);
  LossResult result;
  result.loss_sum = static_cast<double>(tape.value(total)(0, 0));
  result.tokens = static_cast<std::size_t>(std::count_if(gold.begin(), gold.end(), [](int t) { return t != Vocab::kPad; }));
  if (grad_scale != 0.0) tape.backward(tape.scale(total, static_cast<Scalar>(grad_scale)));
  return result;
}

template <typename Scalar>
typename TranslationModel<Scalar>::LossResult TranslationModel<Scalar>::loss(std::span<const int> src_ids,
                                                                             std::span<const int> tgt_ids,
                                                                             const VisualFeatures* features,
                                                                             double label_smoothing) const {
  auto ctx = prepare(src_ids, features);
  std::vector<int> dec_in{Vocab::kBos};
  dec_in.insert(dec_in.end(), tgt_ids.begin(), tgt_ids.end());
  std::vector<int> gold(tgt_ids.begin(), tgt_ids.end());
  gold.push_back(Vocab::kEos);
  auto& tape = ctx->tape;
  Var lp = mutable_self().decode(tape, ctx->memory, dec_in, {});
  Var total = tape.label_smoothed_nll(lp, gold, static_cast<Scalar>(label_smoothing), Vocab::kPad);
  return {static_cast<double>(tape.value(total)(0, 0)), gold.size()};
}

template <typename Scalar>
Hypothesis beam_search(const TranslationModel<Scalar>& model, std::span<const int> src_ids,
                       const VisualFeatures* features, const BeamOptions& options) {
  if (options.beam_size < 1) throw Error("beam_size must be at least 1");
  if (options.max_len < 1) throw Error("max_len must be at least 1");
  const int max_len = std::min(options.max_len, model.config().max_positions - 1);
  auto ctx = model.prepare(src_ids, features);
  const int V = model.config().tgt_vocab;

  struct Candidate {
    std::vector<int> ids;
    double log_prob;
  };
  auto better = [](const Candidate& a, const Candidate& b) {
    if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
    return a.ids < b.ids;
  };

  std::vector<Candidate> live{{{}, 0.0}};
  std::vector<Candidate> finished;
  for (int step = 1; step <= max_len && !live.empty(); ++step) {
    std::vector<Candidate> candidates;
    for (const auto& hyp : live) {
      const auto lp = model.next_log_probs(*ctx, hyp.ids);
      for (int v = 0; v < V; ++v) {
        if (v == Vocab::kPad || v == Vocab::kBos) continue;
        Candidate c{hyp.ids, hyp.log_prob + static_cast<double>(lp(v))};
        c.ids.push_back(v);
        candidates.push_back(std::move(c));
      }
    }
    const auto keep = std::min<std::size_t>(static_cast<std::size_t>(options.beam_size) - finished.size(),
                                            candidates.size());
    std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(keep), candidates.end(),
                      better);
    live.clear();
    for (std::size_t i = 0; i < keep; ++i) {
      auto& c = candidates[i];
      if (c.ids.back() == Vocab::kEos || step == max_len) {
        finished.push_back(std::move(c));
      } else {
        live.push_back(std::move(c));
      }
    }
  }

  Hypothesis best;
  bool have = false;
  for (const auto& c : finished) {
    const double score = c.log_prob / static_cast<double>(c.ids.size());
    if (!have || score > best.score || (score == best.score && c.ids < best.ids)) {
      best = {c.ids, c.log_prob, score};
      have = true;
    }
  }
  return best;
}

template <typename Scalar>
TokenSeq translate(const TranslationModel<Scalar>& model, const TokenSeq& source, const VisualFeatures* features,
                   const BeamOptions& options) {
  const auto hyp = beam_search(model, model.source_ids(source), features, options);
  return model.tgt_vocab().decode(hyp.ids);
}

template <typename Scalar>
std::vector<int> greedy_decode(const TranslationModel<Scalar>& model, std::span<const int> src_ids,
                               const VisualFeatures* features, int max_len) {
  max_len = std::min(max_len, model.config().max_positions - 1);
  auto ctx = model.prepare(src_ids, features);
  std::vector<int> out;
  while (static_cast<int>(out.size()) < max_len) {
    const auto lp = model.next_log_probs(*ctx, out);
    int best = -1;
    for (int v = 0; v < lp.size(); ++v) {
      if (v == Vocab::kPad || v == Vocab::kBos) continue;
      if (best < 0 || lp(v) > lp(best)) best = v;
    }
    out.push_back(best);
    if (best == Vocab::kEos) break;
  }
  return out;
}

template class TranslationModel<float>;
template class TranslationModel<double>;

template Hypothesis beam_search(const TranslationModel<float>&, std::span<const int>, const VisualFeatures*,
                                const BeamOptions&);
template Hypothesis beam_search(const TranslationModel<double>&, std::span<const int>, const VisualFeatures*,
                                const BeamOptions&);
template TokenSeq translate(const TranslationModel<float>&, const TokenSeq&, const VisualFeatures*,
                            const BeamOptions&);
template TokenSeq translate(const TranslationModel<double>&, const TokenSeq&, const VisualFeatures*,
                            const BeamOptions&);
template std::vector<int> greedy_decode(const TranslationModel<float>&, std::span<const int>,
                                        const VisualFeatures*, int);
template std::vector<int> greedy_decode(const TranslationModel<double>&, std::span<const int>,
                                        const VisualFeatures*, int);

}  // namespace mmt
