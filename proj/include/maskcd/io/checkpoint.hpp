#pragma once

// Binary layout (little-endian):
//   "MKCD" | u8 version | u32 meta length | meta JSON
//   repeated: u32 name length | name | u8 rank | u64 extents[rank] | f64 payload

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "maskcd/parameter.hpp"

namespace maskcd::io {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr std::uint8_t kCheckpointVersion = 1;

struct TensorRecord {
  Shape shape;
  std::vector<double> values;
};

struct CheckpointData {
  std::uint8_t version = kCheckpointVersion;
  nlohmann::json meta;
  std::map<std::string, TensorRecord> records;
  std::vector<std::string> order;  // record names in file order
};

namespace detail {

template <class T>
void put(std::string& buf, T v) {
  char bytes[sizeof(T)];
  std::memcpy(bytes, &v, sizeof(T));
  buf.append(bytes, sizeof(T));
}

class Reader {
 public:
  Reader(const std::string& data, std::string path) : data_(data), path_(std::move(path)) {}
  template <class T>
  T get(const char* what) {
    need(sizeof(T), what);
    T v;
    std::memcpy(&v, data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == data_.size(); }

 private:
  void need(std::size_t n, const char* what) const {
    if (data_.size() - pos_ < n) {
      throw ParseError("checkpoint '" + path_ + "' is truncated while reading " + what + " at byte " + std::to_string(pos_));
    }
  }
  const std::string& data_;
  std::string path_;
  std::size_t pos_ = 0;
};

inline void add_record(std::string& buf, const std::string& name, const Shape& shape, std::span<const double> values) {
  put<std::uint32_t>(buf, static_cast<std::uint32_t>(name.size()));
  buf += name;
  put<std::uint8_t>(buf, static_cast<std::uint8_t>(shape.size()));
  for (std::size_t e : shape) put<std::uint64_t>(buf, e);
  buf.append(reinterpret_cast<const char*>(values.data()), values.size() * sizeof(double));
}

}  // namespace detail

/// Writes parameters, Adam moments and `meta` atomically (temp file + rename).
/// Per-parameter Adam step counts are stored in meta["adam_steps"].
inline void save_checkpoint(const std::filesystem::path& path, const ParameterStore& store, nlohmann::json meta) {
  nlohmann::json steps = nlohmann::json::object();
  for (std::size_t i = 0; i < store.size(); ++i) steps[store[i].name] = store[i].adam.step;
  meta["adam_steps"] = steps;
  meta["records"] = 3 * store.size();
  const std::string meta_text = meta.dump();

  std::string buf = "MKCD";
  detail::put<std::uint8_t>(buf, kCheckpointVersion);
  detail::put<std::uint32_t>(buf, static_cast<std::uint32_t>(meta_text.size()));
  buf += meta_text;
  for (std::size_t i = 0; i < store.size(); ++i) {
    const Parameter& p = store[i];
    detail::add_record(buf, p.name, p.tensor.shape(), p.tensor.data());
  }
  for (std::size_t i = 0; i < store.size(); ++i) {
    const Parameter& p = store[i];
    detail::add_record(buf, "adam.m/" + p.name, p.tensor.shape(), p.adam.m);
    detail::add_record(buf, "adam.v/" + p.name, p.tensor.shape(), p.adam.v);
  }

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open '" + tmp.string() + "' for writing");
    f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!f) throw IoError("failed writing '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

inline CheckpointData load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint '" + path.string() + "'");
  const std::string data((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  detail::Reader r(data, path.string());
  if (r.bytes(4, "magic") != "MKCD") throw ParseError("'" + path.string() + "' is not a checkpoint (bad magic)");
  CheckpointData out;
  out.version = r.get<std::uint8_t>("version");
  if (out.version != kCheckpointVersion) {
    throw ConfigError("checkpoint '" + path.string() + "' has format version " + std::to_string(out.version) + ", this build reads version " +
                      std::to_string(kCheckpointVersion));
  }
  const auto meta_len = r.get<std::uint32_t>("meta length");
  try {
    out.meta = nlohmann::json::parse(r.bytes(meta_len, "meta block"));
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError("checkpoint '" + path.string() + "' meta block is malformed: " + e.what());
  }
  const std::size_t expected = out.meta.value("records", std::size_t{0});
  for (std::size_t k = 0; k < expected; ++k) {
    const auto name_len = r.get<std::uint32_t>("record name length");
    std::string name = r.bytes(name_len, "record name");
    TensorRecord rec;
    const auto rank = r.get<std::uint8_t>("record rank");
    for (std::uint8_t d = 0; d < rank; ++d) rec.shape.push_back(static_cast<std::size_t>(r.get<std::uint64_t>("record extent")));
    const std::size_t n = shape_numel(rec.shape);
    if (n > data.size() / sizeof(double)) throw ParseError("checkpoint '" + path.string() + "' record '" + name + "' is truncated");
    const std::string payload = r.bytes(n * sizeof(double), "record payload");
    rec.values.resize(n);
    std::memcpy(rec.values.data(), payload.data(), payload.size());
    out.order.push_back(name);
    out.records.emplace(std::move(name), std::move(rec));
  }
  if (!r.done()) throw ParseError("checkpoint '" + path.string() + "' has trailing bytes after " + std::to_string(expected) + " records");
  return out;
}

/// Copies parameter values and Adam state into `store`; names and shapes must match exactly.
inline void restore_parameters(ParameterStore& store, const CheckpointData& ck) {
  const auto& steps = ck.meta.at("adam_steps");
  for (std::size_t i = 0; i < store.size(); ++i) {
    Parameter& p = store[i];
    auto fetch = [&](const std::string& key) -> const TensorRecord& {
      auto it = ck.records.find(key);
      if (it == ck.records.end()) throw ConfigError("checkpoint lacks tensor '" + key + "'");
      if (it->second.shape != p.tensor.shape()) {
        throw ConfigError("checkpoint tensor '" + key + "' has shape " + shape_str(it->second.shape) + ", model expects " +
                          shape_str(p.tensor.shape()));
      }
      return it->second;
    };
    const auto& w = fetch(p.name);
    std::copy(w.values.begin(), w.values.end(), p.tensor.mutable_data().begin());
    p.adam.m = fetch("adam.m/" + p.name).values;
    p.adam.v = fetch("adam.v/" + p.name).values;
    p.adam.step = steps.at(p.name).get<std::uint64_t>();
  }
  if (ck.records.size() != 3 * store.size()) {
    throw ConfigError("checkpoint holds " + std::to_string(ck.records.size() / 3) + " parameters, model has " + std::to_string(store.size()));
  }
}

}  // namespace maskcd::io
