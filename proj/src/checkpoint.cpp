#include "neolab/checkpoint.hpp"

#include <array>
#include <cstring>
#include <fstream>
#include "json.hpp"

#include "neolab/checksum.hpp"

namespace neolab {

namespace {

constexpr std::array<char, 8> kMagic{'N', 'E', 'O', 'L', 'A', 'B', 'v', '1'};

void write_u64(std::ostream& out, std::uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

std::uint64_t read_u64(std::istream& in) {
  std::uint64_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) throw CheckpointError("checkpoint truncated in header");
  return v;
}

}  // namespace

std::filesystem::path sidecar_path(const std::filesystem::path& path) {
  auto p = path;
  p += ".json";
  return p;
}

void save_checkpoint(const LanguageModel& model, const std::filesystem::path& path) {
  const auto params = model.parameters();
  const auto& dims = model.dims();
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot open " + path.string() + " for writing");
    out.write(kMagic.data(), kMagic.size());
    for (std::uint64_t v : {dims.d_model, dims.n_layers, dims.n_heads, dims.n_kv_heads, dims.d_ff,
                            dims.context_length, model.vocab().size(), model.vocab().base_size(),
                            params.size()}) {
      write_u64(out, v);
    }
    out.write(reinterpret_cast<const char*>(&dims.embed_scale), sizeof(double));
    for (const auto& p : params) {
      auto data = p.tensor.data();
      out.write(reinterpret_cast<const char*>(data.data()),
                static_cast<std::streamsize>(data.size() * sizeof(double)));
    }
    if (!out) throw CheckpointError("write failed for " + path.string());
  }

  nlohmann::json meta;
  meta["format"] = "NEOLABv1";
  meta["dims"] = {{"d_model", dims.d_model},
                  {"n_layers", dims.n_layers},
                  {"n_heads", dims.n_heads},
                  {"n_kv_heads", dims.n_kv_heads},
                  {"d_ff", dims.d_ff},
                  {"context_length", dims.context_length},
                  {"embed_scale", dims.embed_scale}};
  meta["vocab"] = model.vocab().tokens();
  meta["base_vocab_size"] = model.vocab().base_size();
  nlohmann::json shapes = nlohmann::json::array();
  for (const auto& p : params) shapes.push_back({{"name", p.name}, {"shape", p.tensor.shape()}});
  meta["parameters"] = shapes;
  meta["sha256"] = sha256_file(path);
  std::ofstream side(sidecar_path(path), std::ios::trunc);
  if (!side) throw CheckpointError("cannot write " + sidecar_path(path).string());
  side << meta.dump(2) << '\n';
}

LanguageModel load_checkpoint(const std::string& path) {
  std::ifstream side(sidecar_path(path));
  if (!side) throw CheckpointError("missing checkpoint sidecar " + sidecar_path(path).string());
  nlohmann::json meta;
  try {
    side >> meta;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("malformed checkpoint sidecar: " + std::string(e.what()));
  }
  if (meta.value("sha256", "") != sha256_file(path)) {
    throw CheckpointError("checksum mismatch for " + path);
  }

  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path);
  std::array<char, 8> magic{};
  in.read(magic.data(), magic.size());
  if (!in || magic != kMagic) throw CheckpointError(path + " is not a NEOLABv1 checkpoint");

  ModelDims dims;
  dims.d_model = read_u64(in);
  dims.n_layers = read_u64(in);
  dims.n_heads = read_u64(in);
  dims.n_kv_heads = read_u64(in);
  dims.d_ff = read_u64(in);
  dims.context_length = read_u64(in);
  const auto vocab_size = read_u64(in);
  const auto base_size = read_u64(in);
  const auto n_params = read_u64(in);
  in.read(reinterpret_cast<char*>(&dims.embed_scale), sizeof(double));
  dims.validate();

  auto tokens = meta.at("vocab").get<std::vector<std::string>>();
  if (tokens.size() != vocab_size) throw CheckpointError("vocabulary size disagrees with sidecar");
  Vocabulary vocab = Vocabulary::restore(std::move(tokens), base_size);

  // Build a skeleton with the right shapes, then overwrite every value.
  LanguageModel model(vocab, dims, 0);
  auto params = model.parameters();
  if (params.size() != n_params) throw CheckpointError("parameter count disagrees with dims");
  for (auto& p : params) {
    auto data = p.tensor.mutable_data();
    in.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(double)));
    if (!in) throw CheckpointError("checkpoint truncated in parameter " + p.name);
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw CheckpointError("trailing bytes after parameters in " + path);
  }
  return model;
}

}  // namespace neolab
