#include "limeguard/checkpoint.hpp"

#include <bit>
#include <cstring>

#include "limeguard/config.hpp"
#include "limeguard/io.hpp"

namespace limeguard {

static_assert(std::endian::native == std::endian::little, "checkpoints are written little-endian");

namespace {

void put_u64(std::string& out, std::uint64_t v) {
  char b[8];
  std::memcpy(b, &v, 8);
  out.append(b, 8);
}

std::uint64_t get_u64(const std::string& in, std::size_t at) {
  std::uint64_t v;
  std::memcpy(&v, in.data() + at, 8);
  return v;
}

}  // namespace

std::string parameter_hash(const Classifier& model) {
  const auto& p = model.parameters();
  return hex64(fnv1a64({reinterpret_cast<const char*>(p.data()), p.size() * sizeof(double)}));
}

void save_checkpoint(const std::filesystem::path& path, const Classifier& model, const CheckpointMeta& meta) {
  nlohmann::json j = {{"model", to_json(model.spec())},
                      {"num_parameters", model.num_parameters()},
                      {"tag", meta.tag},
                      {"iteration", meta.iteration},
                      {"parameter_hash", parameter_hash(model)},
                      {"extra", meta.extra}};
  j["parent_hash"] = meta.parent_hash ? nlohmann::json(*meta.parent_hash) : nlohmann::json(nullptr);
  const std::string header = j.dump();
  std::string out = kCheckpointMagic;
  put_u64(out, header.size());
  out += header;
  const auto& p = model.parameters();
  out.append(reinterpret_cast<const char*>(p.data()), p.size() * sizeof(double));
  put_u64(out, fnv1a64(out));
  atomic_write(path, out);
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  const std::string file = path.string();
  if (!std::filesystem::exists(path)) throw IngestionError(file, "checkpoint not found");
  const std::string raw = read_file(path);
  const std::size_t magic = std::strlen(kCheckpointMagic);
  if (raw.size() < magic + 16 || raw.compare(0, magic, kCheckpointMagic) != 0) {
    throw IngestionError(file, "not a limeguard-ckpt-v1 file");
  }
  if (get_u64(raw, raw.size() - 8) != fnv1a64(std::string_view(raw).substr(0, raw.size() - 8))) {
    throw IngestionError(file, "checksum mismatch");
  }
  const std::uint64_t hlen = get_u64(raw, magic);
  if (magic + 8 + hlen + 8 > raw.size()) throw IngestionError(file, "truncated metadata");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(raw.substr(magic + 8, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw IngestionError(file, std::string("bad metadata: ") + e.what());
  }
  LoadedCheckpoint out{Classifier(model_spec_from_json(j.at("model")), 0), {}, {}};
  const std::size_t n = j.at("num_parameters").get<std::size_t>();
  const std::size_t body = raw.size() - (magic + 8 + hlen + 8);
  if (n != out.model.num_parameters() || body != n * sizeof(double)) {
    throw IngestionError(file, "parameter count does not match the model spec");
  }
  std::memcpy(out.model.parameters().data(), raw.data() + magic + 8 + hlen, body);
  out.meta.tag = j.at("tag").get<std::string>();
  out.meta.iteration = j.at("iteration").get<int>();
  if (!j.at("parent_hash").is_null()) out.meta.parent_hash = j.at("parent_hash").get<std::string>();
  out.meta.extra = j.at("extra");
  out.hash = parameter_hash(out.model);
  if (out.hash != j.at("parameter_hash").get<std::string>()) throw IngestionError(file, "parameter hash mismatch");
  return out;
}

}  // namespace limeguard
