#include <cstring>
#include <fstream>

#include "kest/error.hpp"
#include "kest/model.hpp"

namespace kest {
namespace {

constexpr char kMagic[8] = {'K', 'E', 'S', 'T', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

template <typename V>
void put(std::ostream& out, V v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

void put_string(std::ostream& out, const std::string& s) {
  put<std::uint64_t>(out, s.size());
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

template <typename V>
V get(std::istream& in, const std::filesystem::path& path) {
  V v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(V));
  if (!in) throw IntegrityError("truncated checkpoint " + path.string());
  return v;
}

std::string get_string(std::istream& in, const std::filesystem::path& path) {
  const auto n = get<std::uint64_t>(in, path);
  if (n > (1ULL << 30)) throw IntegrityError("corrupt string length in checkpoint " + path.string());
  std::string s(n, '\0');
  in.read(s.data(), static_cast<std::streamsize>(n));
  if (!in) throw IntegrityError("truncated checkpoint " + path.string());
  return s;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ModelF& model, const nlohmann::json& metadata) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IntegrityError("cannot write checkpoint " + path.string());
  out.write(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, kVersion);
  put_string(out, nlohmann::json(model.config()).dump());
  put_string(out, metadata.is_null() ? std::string("{}") : metadata.dump());
  put<std::uint8_t>(out, model.embedding_frozen() ? 1 : 0);
  const auto params = model.parameters();
  put<std::uint64_t>(out, params.size());
  for (const auto* p : params) {
    put_string(out, p->name);
    put<std::uint64_t>(out, static_cast<std::uint64_t>(p->value.rows()));
    put<std::uint64_t>(out, static_cast<std::uint64_t>(p->value.cols()));
    for (Index i = 0; i < p->value.size(); ++i) put<double>(out, static_cast<double>(p->value.data()[i]));
  }
  if (!out) throw IntegrityError("failed writing checkpoint " + path.string());
}

ModelF load_checkpoint(const std::filesystem::path& path, const std::optional<ModelConfig>& expected,
                       nlohmann::json* metadata) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IntegrityError("cannot open checkpoint " + path.string());
  char magic[sizeof(kMagic)];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw IntegrityError(path.string() + " is not a checkpoint");
  }
  const auto version = get<std::uint32_t>(in, path);
  if (version != kVersion) throw IntegrityError("unsupported checkpoint version " + std::to_string(version));
  const auto config = nlohmann::json::parse(get_string(in, path)).get<ModelConfig>();
  if (expected && !(*expected == config)) {
    throw IntegrityError("checkpoint config mismatch: stored " + nlohmann::json(config).dump() + ", expected " +
                         nlohmann::json(*expected).dump());
  }
  auto meta = nlohmann::json::parse(get_string(in, path));
  if (metadata) *metadata = std::move(meta);
  ModelF model(config);
  model.set_embedding_frozen(get<std::uint8_t>(in, path) != 0);
  const auto params = model.parameters();
  const auto count = get<std::uint64_t>(in, path);
  if (count != params.size()) throw IntegrityError("checkpoint parameter count mismatch in " + path.string());
  for (auto* p : params) {
    const auto name = get_string(in, path);
    const auto rows = get<std::uint64_t>(in, path);
    const auto cols = get<std::uint64_t>(in, path);
    if (name != p->name || rows != static_cast<std::uint64_t>(p->value.rows()) ||
        cols != static_cast<std::uint64_t>(p->value.cols())) {
      throw IntegrityError("checkpoint parameter '" + name + "' does not match model layout");
    }
    for (Index i = 0; i < p->value.size(); ++i) p->value.data()[i] = static_cast<float>(get<double>(in, path));
  }
  return model;
}

}  // namespace kest
