#include <cstring>
#include <fstream>
#include <sstream>

#include "nlran/errors.hpp"
#include "nlran/model.hpp"

namespace nlran {

using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'N', 'L', 'C', 'K'};

template <typename U>
void put(std::ostream& out, U v) {
  unsigned char bytes[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<unsigned char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(bytes), sizeof(U));
}

template <typename U>
U get(std::istream& in) {
  unsigned char bytes[sizeof(U)];
  in.read(reinterpret_cast<char*>(bytes), sizeof(U));
  if (!in) throw FormatError("checkpoint truncated");
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  return static_cast<U>(v);
}

struct Header {
  CheckpointInfo info;
  std::string stored_hash;
};

Header read_header(std::istream& in) {
  char magic[4];
  in.read(magic, 4);
  if (!in) throw FormatError("checkpoint truncated");
  if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError("bad checkpoint magic (expected NLCK)");
  const auto version = get<std::uint16_t>(in);
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto length = get<std::uint64_t>(in);
  if (length > (std::uint64_t{1} << 30)) throw FormatError("checkpoint header length implausible");
  std::string text(length, '\0');
  in.read(text.data(), static_cast<std::streamsize>(length));
  if (!in) throw FormatError("checkpoint truncated");
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  Header h;
  try {
    h.info.config = NetworkConfig::from_json(j.at("config"));
    h.stored_hash = j.at("config_hash").get<std::string>();
    h.info.epoch = j.at("epoch").get<std::int64_t>();
    h.info.best_metric = j.at("best_metric").get<double>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint header incomplete: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint config invalid: ") + e.what());
  }
  if (h.stored_hash != h.info.config.hash()) {
    throw FormatError("checkpoint config hash does not match its stored config");
  }
  return h;
}

}  // namespace

template <typename T>
void save_checkpoint(const Model<T>& model, const std::string& path, std::int64_t epoch, double best_metric) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path + " for writing");
  const json header{{"config", model.config().to_json()},
                    {"config_hash", model.config().hash()},
                    {"epoch", epoch},
                    {"best_metric", best_metric}};
  const std::string text = header.dump();
  out.write(kMagic, 4);
  put<std::uint16_t>(out, kCheckpointVersion);
  put<std::uint64_t>(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  const auto& params = model.parameters();
  put<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(p->name.size()));
    out.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
    write_tensor(out, p->value);
  }
  if (!out) throw FormatError("failed writing checkpoint " + path);
}

CheckpointInfo read_checkpoint_info(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path);
  return read_header(in).info;
}

template <typename T>
Model<T> load_checkpoint(const std::string& path, CheckpointInfo* info, const NetworkConfig* expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path);
  auto header = read_header(in);
  if (expected && expected->hash() != header.stored_hash) {
    throw ConfigError("checkpoint " + path + " is incompatible: config hash " + header.stored_hash +
                      " != expected " + expected->hash());
  }
  Model<T> model(header.info.config);
  auto& params = model.parameters();
  const auto count = get<std::uint32_t>(in);
  if (count != params.size()) {
    throw FormatError("checkpoint holds " + std::to_string(count) + " tensors, model has " +
                      std::to_string(params.size()));
  }
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = get<std::uint32_t>(in);
    if (len > 4096) throw FormatError("checkpoint tensor name too long");
    std::string name(len, '\0');
    in.read(name.data(), len);
    if (!in) throw FormatError("checkpoint truncated");
    auto* p = params.find(name);
    if (!p) throw FormatError("checkpoint tensor '" + name + "' has no matching parameter");
    auto value = read_tensor<T>(in);
    if (value.shape() != p->value.shape()) {
      throw FormatError("checkpoint tensor '" + name + "' has shape " + to_string(value.shape()) + ", expected " +
                        to_string(p->value.shape()));
    }
    p->value = std::move(value);
  }
  if (info) *info = header.info;
  return model;
}

template void save_checkpoint(const Model<float>&, const std::string&, std::int64_t, double);
template void save_checkpoint(const Model<double>&, const std::string&, std::int64_t, double);
template Model<float> load_checkpoint<float>(const std::string&, CheckpointInfo*, const NetworkConfig*);
template Model<double> load_checkpoint<double>(const std::string&, CheckpointInfo*, const NetworkConfig*);

}  // namespace nlran
