#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "mmt/model.hpp"

namespace mmt {

/// Checkpoint container, little-endian:
///
///   8 bytes   magic "MMTCKPT\0"
///   u32       format version (currently 1)
///   u64       header length in bytes
///   header    UTF-8 JSON: {"dtype": "f32"|"f64", "config": {...},
///             "src_vocab": [...], "tgt_vocab": [...],
///             "params": [{"name", "shape": [rows, cols]}, ...], "meta": {...}}
///   payload   each parameter's values in header order, row-major
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  Matrix<double> value;
};

/// Checkpoint contents independent of the model's scalar type.
struct CheckpointData {
  ModelConfig config;
  Vocab src_vocab;
  Vocab tgt_vocab;
  std::vector<NamedTensor> params;
  nlohmann::json meta = nlohmann::json::object();
};

nlohmann::json config_to_json(const ModelConfig& config);
ModelConfig config_from_json(const nlohmann::json& j);

void write_checkpoint(const std::filesystem::path& path, const CheckpointData& data,
                      bool double_precision = false);
CheckpointData read_checkpoint(const std::filesystem::path& path);

template <typename Scalar>
CheckpointData to_checkpoint(const TranslationModel<Scalar>& model) {
  CheckpointData data{model.config(), model.src_vocab(), model.tgt_vocab(), {}, nlohmann::json::object()};
  for (const auto& p : model.params()) data.params.push_back({p.name, p.value.template cast<double>()});
  return data;
}

template <typename Scalar>
TranslationModel<Scalar> from_checkpoint(const CheckpointData& data) {
  ParamStore<Scalar> params;
  for (const auto& t : data.params) {
    params.add(t.name, t.value.rows(), t.value.cols());
    params.at(t.name).value = t.value.template cast<Scalar>();
  }
  return TranslationModel<Scalar>(data.config, data.src_vocab, data.tgt_vocab, std::move(params));
}

template <typename Scalar>
void save_model(const std::filesystem::path& path, const TranslationModel<Scalar>& model,
                const nlohmann::json& meta = nlohmann::json::object()) {
  auto data = to_checkpoint(model);
  data.meta = meta;
  write_checkpoint(path, data, std::is_same_v<Scalar, double>);
}

template <typename Scalar>
TranslationModel<Scalar> load_model(const std::filesystem::path& path) {
  return from_checkpoint<Scalar>(read_checkpoint(path));
}

/// Elementwise arithmetic mean of parameter sets with identical names and
/// shapes (the config and vocabularies must agree as well). Accumulates in
/// double.
CheckpointData average_checkpoints(std::span<const CheckpointData> checkpoints);
CheckpointData average_checkpoints(std::span<const std::filesystem::path> paths);

}  // namespace mmt
