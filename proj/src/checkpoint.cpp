#include <cstring>
#include <fstream>

#include "eccdet/error.hpp"
#include "eccdet/model.hpp"

// Layout (little-endian):
//   "ECCDETCK" | u32 version | u32 header_len | header JSON |
//   u32 n_params | { u32 name_len | name | u32 ndim | i32 dims[ndim] |
//                    u64 count | f64 values[count] }*

namespace eccdet {
namespace {

constexpr char kMagic[8] = {'E', 'C', 'C', 'D', 'E', 'T', 'C', 'K'};

template <typename T>
void put(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in, const std::filesystem::path& path) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw Error(ErrorCode::kCheckpoint, "truncated checkpoint " + path.string());
  return v;
}

std::string get_string(std::istream& in, std::uint32_t len, const std::filesystem::path& path) {
  std::string s(len, '\0');
  in.read(s.data(), len);
  if (!in) throw Error(ErrorCode::kCheckpoint, "truncated checkpoint " + path.string());
  return s;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Detector& model,
                     const CheckpointMeta& meta) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::kIo, "cannot write checkpoint " + path.string());
  const nlohmann::json header = {
      {"model", model.config().to_json()},
      {"input_size", meta.input_size},
      {"norm_mean", {meta.norm_mean[0], meta.norm_mean[1], meta.norm_mean[2]}},
      {"norm_std", {meta.norm_std[0], meta.norm_std[1], meta.norm_std[2]}}};
  const std::string text = header.dump();
  out.write(kMagic, sizeof(kMagic));
  put(out, kCheckpointVersion);
  put(out, static_cast<std::uint32_t>(text.size()));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  const auto& params = model.parameters().all();
  put(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    put(out, static_cast<std::uint32_t>(p.name.size()));
    out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    put(out, static_cast<std::uint32_t>(p.shape.size()));
    for (int d : p.shape) put(out, static_cast<std::int32_t>(d));
    put(out, static_cast<std::uint64_t>(p.value.size()));
    out.write(reinterpret_cast<const char*>(p.value.data()),
              static_cast<std::streamsize>(p.value.size() * sizeof(double)));
  }
  if (!out) throw Error(ErrorCode::kIo, "failed writing checkpoint " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open checkpoint " + path.string());
  char magic[sizeof(kMagic)];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw Error(ErrorCode::kCheckpoint, path.string() + " is not a checkpoint file");
  }
  const auto version = get<std::uint32_t>(in, path);
  if (version != kCheckpointVersion) {
    throw Error(ErrorCode::kCheckpoint, "unsupported checkpoint version " + std::to_string(version));
  }
  const auto header_len = get<std::uint32_t>(in, path);
  Checkpoint ckpt;
  try {
    const auto header = nlohmann::json::parse(get_string(in, header_len, path));
    ckpt.config = ModelConfig::from_json(header.at("model"));
    ckpt.meta.input_size = header.at("input_size").get<int>();
    for (int c = 0; c < 3; ++c) {
      ckpt.meta.norm_mean[c] = header.at("norm_mean").at(c).get<double>();
      ckpt.meta.norm_std[c] = header.at("norm_std").at(c).get<double>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kCheckpoint, "bad checkpoint header in " + path.string() + ": " + e.what());
  }
  const auto n = get<std::uint32_t>(in, path);
  for (std::uint32_t i = 0; i < n; ++i) {
    const auto name_len = get<std::uint32_t>(in, path);
    std::string name = get_string(in, name_len, path);
    const auto ndim = get<std::uint32_t>(in, path);
    std::vector<int> shape;
    for (std::uint32_t d = 0; d < ndim; ++d) shape.push_back(get<std::int32_t>(in, path));
    const auto count = get<std::uint64_t>(in, path);
    const std::size_t idx = ckpt.params.add(std::move(name), shape);
    auto& values = ckpt.params[idx].value;
    if (values.size() != count) {
      throw Error(ErrorCode::kCheckpoint, "array size does not match its shape in " + path.string());
    }
    in.read(reinterpret_cast<char*>(values.data()),
            static_cast<std::streamsize>(count * sizeof(double)));
    if (!in) throw Error(ErrorCode::kCheckpoint, "truncated checkpoint " + path.string());
  }
  return ckpt;
}

Detector load_detector(const std::filesystem::path& path, CheckpointMeta* meta) {
  Checkpoint ckpt = read_checkpoint(path);
  Detector model(ckpt.config);
  auto& target = model.parameters().all();
  const auto& stored = ckpt.params.all();
  if (target.size() != stored.size()) {
    throw Error(ErrorCode::kCheckpoint, "checkpoint holds " + std::to_string(stored.size()) +
                                            " arrays, model expects " +
                                            std::to_string(target.size()));
  }
  for (std::size_t i = 0; i < target.size(); ++i) {
    if (target[i].name != stored[i].name || target[i].shape != stored[i].shape) {
      throw Error(ErrorCode::kCheckpoint, "checkpoint array " + stored[i].name +
                                              " does not match model array " + target[i].name);
    }
    target[i].value = stored[i].value;
  }
  if (meta) *meta = ckpt.meta;
  return model;
}

Detector load_detector(const std::filesystem::path& path, const ModelConfig& expected,
                       CheckpointMeta* meta) {
  Detector model = load_detector(path, meta);
  if (!(model.config() == expected)) {
    throw Error(ErrorCode::kCheckpoint, "checkpoint model config " +
                                            model.config().to_json().dump() +
                                            " differs from expected " + expected.to_json().dump());
  }
  return model;
}

}  // namespace eccdet
