#include "mmt/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace mmt {

namespace {

constexpr char kMagic[8] = {'M', 'M', 'T', 'C', 'K', 'P', 'T', '\0'};

template <typename T>
void put_le(std::ostream& out, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  char bytes[sizeof(T)];
  std::memcpy(bytes, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  out.write(bytes, sizeof(T));
}

template <typename T>
T get_le(std::istream& in, const std::filesystem::path& path) {
  char bytes[sizeof(T)];
  if (!in.read(bytes, sizeof(T))) throw IntegrityError("truncated checkpoint " + path.string());
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  T v;
  std::memcpy(&v, bytes, sizeof(T));
  return v;
}

}  // namespace

nlohmann::json config_to_json(const ModelConfig& c) {
  nlohmann::ordered_json j;
  j["n_enc_layers"] = c.n_enc_layers;
  j["n_dec_layers"] = c.n_dec_layers;
  j["n_heads"] = c.n_heads;
  j["d_model"] = c.d_model;
  j["d_ffn"] = c.d_ffn;
  j["src_vocab"] = c.src_vocab;
  j["tgt_vocab"] = c.tgt_vocab;
  j["fusion_mode"] = to_string(c.fusion_mode);
  j["max_positions"] = c.max_positions;
  return j;
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.n_enc_layers = j.at("n_enc_layers").get<int>();
  c.n_dec_layers = j.at("n_dec_layers").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.d_ffn = j.at("d_ffn").get<int>();
  c.src_vocab = j.at("src_vocab").get<int>();
  c.tgt_vocab = j.at("tgt_vocab").get<int>();
  c.fusion_mode = parse_fusion_mode(j.at("fusion_mode").get<std::string>());
  c.max_positions = j.at("max_positions").get<int>();
  return c;
}

void write_checkpoint(const std::filesystem::path& path, const CheckpointData& data, bool double_precision) {
  nlohmann::ordered_json header;
  header["dtype"] = double_precision ? "f64" : "f32";
  header["config"] = config_to_json(data.config);
  header["src_vocab"] = data.src_vocab.tokens();
  header["tgt_vocab"] = data.tgt_vocab.tokens();
  header["params"] = nlohmann::ordered_json::array();
  for (const auto& t : data.params) {
    header["params"].push_back({{"name", t.name}, {"shape", {t.value.rows(), t.value.cols()}}});
  }
  header["meta"] = data.meta;
  const auto header_text = header.dump();

  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write checkpoint " + tmp.string());
    out.write(kMagic, sizeof(kMagic));
    put_le<std::uint32_t>(out, kCheckpointVersion);
    put_le<std::uint64_t>(out, header_text.size());
    out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
    for (const auto& t : data.params) {
      for (Eigen::Index i = 0; i < t.value.size(); ++i) {
        if (double_precision) {
          put_le<double>(out, t.value.data()[i]);
        } else {
          put_le<float>(out, static_cast<float>(t.value.data()[i]));
        }
      }
    }
    if (!out) throw Error("short write to checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

CheckpointData read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw NotFoundError("cannot open checkpoint " + path.string());
  char magic[8];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw IntegrityError(path.string() + " is not a checkpoint file");
  }
  const auto version = get_le<std::uint32_t>(in, path);
  if (version != kCheckpointVersion) {
    throw IntegrityError("checkpoint " + path.string() + " has unsupported version " + std::to_string(version));
  }
  const auto header_len = get_le<std::uint64_t>(in, path);
  if (header_len > std::filesystem::file_size(path)) {
    throw IntegrityError("truncated checkpoint header in " + path.string());
  }
  std::string header_text(header_len, '\0');
  if (!in.read(header_text.data(), static_cast<std::streamsize>(header_len))) {
    throw IntegrityError("truncated checkpoint header in " + path.string());
  }

  CheckpointData data;
  bool f64 = false;
  std::vector<std::pair<std::string, std::pair<Eigen::Index, Eigen::Index>>> shapes;
  try {
    auto header = nlohmann::json::parse(header_text);
    const auto dtype = header.at("dtype").get<std::string>();
    if (dtype != "f32" && dtype != "f64") throw IntegrityError("unknown checkpoint dtype " + dtype);
    f64 = dtype == "f64";
    data.config = config_from_json(header.at("config"));
    data.src_vocab = Vocab(header.at("src_vocab").get<std::vector<std::string>>());
    data.tgt_vocab = Vocab(header.at("tgt_vocab").get<std::vector<std::string>>());
    data.meta = header.value("meta", nlohmann::json::object());
    for (const auto& p : header.at("params")) {
      shapes.push_back({p.at("name").get<std::string>(),
                        {p.at("shape").at(0).get<Eigen::Index>(), p.at("shape").at(1).get<Eigen::Index>()}});
    }
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError("malformed checkpoint header in " + path.string() + ": " + e.what());
  }
  for (const auto& [name, shape] : shapes) {
    if (shape.first < 0 || shape.second < 0) {
      throw IntegrityError("negative shape for parameter '" + name + "' in " + path.string());
    }
    NamedTensor t{name, Matrix<double>(shape.first, shape.second)};
    for (Eigen::Index i = 0; i < t.value.size(); ++i) {
      t.value.data()[i] = f64 ? get_le<double>(in, path) : static_cast<double>(get_le<float>(in, path));
    }
    data.params.push_back(std::move(t));
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw IntegrityError("trailing bytes after the payload of " + path.string());
  }
  return data;
}

CheckpointData average_checkpoints(std::span<const CheckpointData> checkpoints) {
  if (checkpoints.empty()) throw Error("average_checkpoints: no checkpoints given");
  const auto& first = checkpoints.front();
  CheckpointData avg = first;
  for (std::size_t k = 1; k < checkpoints.size(); ++k) {
    const auto& c = checkpoints[k];
    if (!(c.config == first.config) || !(c.src_vocab == first.src_vocab) || !(c.tgt_vocab == first.tgt_vocab)) {
      throw Error("average_checkpoints: checkpoint " + std::to_string(k) + " has a different model configuration");
    }
    if (c.params.size() != first.params.size()) {
      throw ShapeError("average_checkpoints: checkpoint " + std::to_string(k) + " has a different parameter count");
    }
    for (std::size_t i = 0; i < c.params.size(); ++i) {
      const auto& a = first.params[i];
      const auto& b = c.params[i];
      if (a.name != b.name || a.value.rows() != b.value.rows() || a.value.cols() != b.value.cols()) {
        throw ShapeError("average_checkpoints: parameter '" + b.name + "' in checkpoint " + std::to_string(k) +
                         " does not match '" + a.name + "' in shape or name");
      }
      avg.params[i].value += b.value;
    }
  }
  const double n = static_cast<double>(checkpoints.size());
  for (auto& t : avg.params) t.value /= n;
  return avg;
}

CheckpointData average_checkpoints(std::span<const std::filesystem::path> paths) {
  std::vector<CheckpointData> all;
  all.reserve(paths.size());
  for (const auto& p : paths) all.push_back(read_checkpoint(p));
  return average_checkpoints(all);
}

}  // namespace mmt
