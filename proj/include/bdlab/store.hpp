#pragma once

// Tensor archive format, digests, and JSON persistence for signatures,
// datasets and run manifests.
//
// Archive layout:
//   u64 little-endian header length N
//   N bytes of UTF-8 JSON: {"name": {"dtype": "F32"|"F64", "shape": [...],
//                                   "data_offsets": [begin, end]}, ...}
//   payload: tensors in header key order, little-endian, contiguous
// An optional "__metadata__" entry maps strings to strings.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <tuple>
#include <type_traits>
#include <variant>
#include <vector>

#include <openssl/evp.h>

#include "json.hpp"

#include "bdlab/datagen.hpp"
#include "bdlab/deltas.hpp"
#include "bdlab/errors.hpp"
#include "bdlab/lora.hpp"
#include "bdlab/signature.hpp"
#include "bdlab/tensor.hpp"
#include "bdlab/tinylm.hpp"

namespace bdlab {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Digests

inline std::string sha256_hex(std::string_view bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1) {
    throw Error("SHA-256 computation failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(kHex[md[i] >> 4]);
    out.push_back(kHex[md[i] & 0xf]);
  }
  return out;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Writes through a temporary file and a rename, so readers never observe a
// partially written artifact. Returns the SHA-256 of the bytes.
inline std::string write_file(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw InputError("cannot write '" + path.string() + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw InputError("short write to '" + path.string() + "'");
  }
  std::filesystem::rename(tmp, path);
  return sha256_hex(bytes);
}

inline std::string file_sha256(const std::filesystem::path& path) {
  return sha256_hex(read_file(path));
}

inline bool verify_digest(const std::filesystem::path& path, const std::string& expected) {
  return file_sha256(path) == expected;
}

// ---------------------------------------------------------------------------
// Little-endian encoding

namespace detail {

template <typename T>
void put_le(std::string& out, T value) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
  auto bits = std::bit_cast<U>(value);
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    out.push_back(static_cast<char>(bits & 0xff));
    bits >>= 8;
  }
}

template <typename T>
T get_le(const char* p) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
  U bits = 0;
  for (std::size_t i = sizeof(U); i-- > 0;) {
    bits = (bits << 8) | static_cast<unsigned char>(p[i]);
  }
  return std::bit_cast<T>(bits);
}

template <typename T>
constexpr const char* dtype_name() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? "F32" : "F64";
}

}  // namespace detail

using ArchiveTensor = std::variant<Tensor<float>, Tensor<double>>;

struct TensorArchive {
  std::map<std::string, std::string> metadata;
  std::map<std::string, ArchiveTensor> tensors;
};

inline std::string serialize_archive(const TensorArchive& a) {
  json header = json::object();
  if (!a.metadata.empty()) header["__metadata__"] = a.metadata;
  std::string payload;
  for (const auto& [name, var] : a.tensors) {
    if (name == "__metadata__") throw InputError("reserved tensor name '__metadata__'");
    std::visit(
        [&](const auto& t) {
          using T = typename std::decay_t<decltype(t.data)>::value_type;
          const auto begin = payload.size();
          for (auto x : t.data) detail::put_le<T>(payload, x);
          header[name] = {{"dtype", detail::dtype_name<T>()},
                          {"shape", t.shape},
                          {"data_offsets", {begin, payload.size()}}};
        },
        var);
  }
  const std::string h = header.dump();
  std::string out;
  out.reserve(8 + h.size() + payload.size());
  detail::put_le<std::uint64_t>(out, h.size());
  out += h;
  out += payload;
  return out;
}

inline TensorArchive parse_archive(std::string_view bytes) {
  if (bytes.size() < 8) throw FormatError("truncated header length", bytes.size());
  const auto hlen = detail::get_le<std::uint64_t>(bytes.data());
  if (hlen > bytes.size() - 8) throw FormatError("header length exceeds file size", 0);
  const std::uint64_t payload_start = 8 + hlen;
  const auto payload_size = bytes.size() - payload_start;

  json header;
  try {
    header = json::parse(bytes.substr(8, hlen));
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("malformed header JSON: ") + e.what(),
                      8 + (e.byte > 0 ? e.byte - 1 : 0));
  }
  if (!header.is_object()) throw FormatError("header is not a JSON object", 8);

  TensorArchive a;
  struct Span {
    std::uint64_t begin, end;
    std::string name;
  };
  std::vector<Span> spans;
  for (const auto& [name, entry] : header.items()) {
    if (name == "__metadata__") {
      if (!entry.is_object()) throw FormatError("__metadata__ must be an object", 8);
      for (const auto& [k, v] : entry.items()) {
        if (!v.is_string()) throw FormatError("metadata value for '" + k + "' is not a string", 8);
        a.metadata[k] = v.get<std::string>();
      }
      continue;
    }
    if (!entry.is_object() || !entry.contains("dtype") || !entry.contains("shape") ||
        !entry.contains("data_offsets")) {
      throw FormatError("entry '" + name + "' lacks dtype/shape/data_offsets", 8);
    }
    const auto& dt = entry["dtype"];
    const auto& sh = entry["shape"];
    const auto& off = entry["data_offsets"];
    if (!dt.is_string() || !sh.is_array() || !off.is_array() || off.size() != 2 ||
        !off[0].is_number_unsigned() || !off[1].is_number_unsigned()) {
      throw FormatError("entry '" + name + "' is malformed", 8);
    }
    Shape shape;
    for (const auto& d : sh) {
      if (!d.is_number_integer() || d.get<std::int64_t>() < 0) {
        throw FormatError("entry '" + name + "' has an invalid shape", 8);
      }
      shape.push_back(d.get<std::int64_t>());
    }
    const auto begin = off[0].get<std::uint64_t>();
    const auto end = off[1].get<std::uint64_t>();
    if (begin > end) throw FormatError("entry '" + name + "' has begin > end", payload_start + begin);
    if (end > payload_size) {
      throw FormatError("entry '" + name + "' runs past the payload (truncated file)", bytes.size());
    }
    const std::string dtype = dt.get<std::string>();
    std::size_t width = 0;
    if (dtype == "F32") {
      width = 4;
    } else if (dtype == "F64") {
      width = 8;
    } else {
      throw FormatError("entry '" + name + "' has unsupported dtype '" + dtype + "'", 8);
    }
    if (static_cast<std::uint64_t>(numel(shape)) * width != end - begin) {
      throw FormatError("entry '" + name + "' byte length does not match its shape",
                        payload_start + begin);
    }
    const char* p = bytes.data() + payload_start + begin;
    auto decode = [&](auto tag) {
      using T = decltype(tag);
      Tensor<T> t(shape);
      for (std::size_t i = 0; i < t.data.size(); ++i) t.data[i] = detail::get_le<T>(p + i * sizeof(T));
      return t;
    };
    if (width == 4) {
      a.tensors.emplace(name, decode(float{}));
    } else {
      a.tensors.emplace(name, decode(double{}));
    }
    spans.push_back({begin, end, name});
  }
  std::sort(spans.begin(), spans.end(),
            [](const Span& x, const Span& y) { return std::tie(x.begin, x.end) < std::tie(y.begin, y.end); });
  std::uint64_t cursor = 0;
  for (const auto& s : spans) {
    if (s.begin < cursor) throw FormatError("entry '" + s.name + "' overlaps the previous entry", payload_start + s.begin);
    if (s.begin > cursor) throw FormatError("gap before entry '" + s.name + "'", payload_start + cursor);
    cursor = s.end;
  }
  if (cursor != payload_size) throw FormatError("trailing bytes after the last entry", payload_start + cursor);
  return a;
}

namespace detail {

template <typename T>
const Tensor<T>& archive_get(const TensorArchive& a, const std::string& name) {
  auto it = a.tensors.find(name);
  if (it == a.tensors.end()) throw StructuralError("archive lacks tensor '" + name + "'");
  if (!std::holds_alternative<Tensor<T>>(it->second)) {
    throw StructuralError("tensor '" + name + "' is not " + dtype_name<T>());
  }
  return std::get<Tensor<T>>(it->second);
}

inline void require_format(const TensorArchive& a, const std::string& format) {
  auto it = a.metadata.find("format");
  if (it == a.metadata.end() || it->second != format) {
    throw StructuralError("archive is not a '" + format + "' file");
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Config JSON

inline const char* precision_name(Precision p) { return p == Precision::kSingle ? "single" : "double"; }

inline json to_json(const TinyLMConfig& c) {
  return {{"n_blocks", c.n_blocks}, {"d_model", c.d_model},     {"n_heads", c.n_heads},
          {"d_head", c.d_head},     {"d_ff", c.d_ff},           {"vocab_size", c.vocab_size},
          {"max_seq", c.max_seq},   {"precision", precision_name(c.precision)}};
}

// Rejects unknown keys; missing keys keep their defaults.
inline TinyLMConfig model_config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("model config must be an object");
  TinyLMConfig c;
  for (const auto& [k, v] : j.items()) {
    if (k == "precision") {
      const auto s = v.get<std::string>();
      if (s != "single" && s != "double") throw ConfigError("unknown precision '" + s + "'");
      c.precision = s == "single" ? Precision::kSingle : Precision::kDouble;
      continue;
    }
    int* field = k == "n_blocks" ? &c.n_blocks
               : k == "d_model" ? &c.d_model
               : k == "n_heads" ? &c.n_heads
               : k == "d_head" ? &c.d_head
               : k == "d_ff" ? &c.d_ff
               : k == "vocab_size" ? &c.vocab_size
               : k == "max_seq" ? &c.max_seq
               : nullptr;
    if (!field) throw ConfigError("unknown key 'model." + k + "'");
    if (!v.is_number_integer()) throw ConfigError("'model." + k + "' must be an integer");
    *field = v.get<int>();
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Parameter stores, adapters, deltas

template <typename T>
TensorArchive params_archive(const ParamStore<T>& p) {
  TensorArchive a;
  a.metadata["format"] = "bdlab.params";
  a.metadata["config"] = to_json(p.config).dump();
  for (const auto& [name, t] : p.tensors) a.tensors.emplace(name, t);
  return a;
}

template <typename T>
std::string save_params(const ParamStore<T>& p, const std::filesystem::path& path) {
  return write_file(path, serialize_archive(params_archive(p)));
}

template <typename T>
ParamStore<T> params_from_archive(const TensorArchive& a) {
  detail::require_format(a, "bdlab.params");
  ParamStore<T> p;
  try {
    p.config = model_config_from_json(json::parse(a.metadata.at("config")));
  } catch (const json::exception& e) {
    throw StructuralError(std::string("bad config metadata: ") + e.what());
  } catch (const std::out_of_range&) {
    throw StructuralError("params archive lacks config metadata");
  }
  for (const auto& [name, var] : a.tensors) p.tensors.emplace(name, detail::archive_get<T>(a, name));
  p.validate();
  return p;
}

template <typename T>
ParamStore<T> load_params(const std::filesystem::path& path) {
  return params_from_archive<T>(parse_archive(read_file(path)));
}

template <typename T>
TensorArchive adapter_archive(const LoraAdapter<T>& ad) {
  TensorArchive a;
  a.metadata["format"] = "bdlab.adapter";
  a.metadata["rank"] = std::to_string(ad.rank);
  a.metadata["alpha"] = json(ad.alpha).dump();
  for (const auto& [name, pair] : ad.targets) {
    a.tensors.emplace(name + ".lora_A", pair.A);
    a.tensors.emplace(name + ".lora_B", pair.B);
  }
  return a;
}

template <typename T>
std::string save_adapter(const LoraAdapter<T>& ad, const std::filesystem::path& path) {
  return write_file(path, serialize_archive(adapter_archive(ad)));
}

template <typename T>
LoraAdapter<T> adapter_from_archive(const TensorArchive& a) {
  detail::require_format(a, "bdlab.adapter");
  LoraAdapter<T> ad;
  try {
    ad.rank = std::stoi(a.metadata.at("rank"));
    ad.alpha = json::parse(a.metadata.at("alpha")).get<double>();
  } catch (const std::exception&) {
    throw StructuralError("adapter archive has missing or invalid rank/alpha");
  }
  for (const auto& [name, var] : a.tensors) {
    const auto cut = name.rfind(".lora_");
    if (cut == std::string::npos) throw StructuralError("unexpected adapter tensor '" + name + "'");
    const auto target = name.substr(0, cut);
    const auto which = name.substr(cut + 6);
    auto& pair = ad.targets[target];
    if (which == "A") {
      pair.A = detail::archive_get<T>(a, name);
    } else if (which == "B") {
      pair.B = detail::archive_get<T>(a, name);
    } else {
      throw StructuralError("unexpected adapter tensor '" + name + "'");
    }
  }
  for (const auto& [target, pair] : ad.targets) {
    if (pair.A.shape.size() != 2 || pair.B.shape.size() != 2 || pair.A.shape[1] != ad.rank ||
        pair.B.shape[1] != ad.rank) {
      throw StructuralError("adapter factors for '" + target + "' are incomplete or mis-shaped");
    }
  }
  return ad;
}

template <typename T>
LoraAdapter<T> load_adapter(const std::filesystem::path& path) {
  return adapter_from_archive<T>(parse_archive(read_file(path)));
}

inline std::string save_delta(const DeltaMap& d, const std::filesystem::path& path) {
  TensorArchive a;
  a.metadata["format"] = "bdlab.delta";
  for (const auto& [name, t] : d.tensors) a.tensors.emplace(name, t);
  return write_file(path, serialize_archive(a));
}

inline DeltaMap load_delta(const std::filesystem::path& path) {
  const auto a = parse_archive(read_file(path));
  detail::require_format(a, "bdlab.delta");
  DeltaMap d;
  for (const auto& [name, var] : a.tensors) d.tensors.emplace(name, detail::archive_get<double>(a, name));
  return d;
}

// ---------------------------------------------------------------------------
// JSON documents. nlohmann's default object type keeps keys sorted, so the
// dumps below are canonical.

inline std::string dump_json(const json& j) { return j.dump(2) + "\n"; }

inline json to_json(const SuppressionUnit& u) {
  return {{"kind", unit_kind_name(u.kind)}, {"block", u.block}, {"index", u.index}};
}

inline SuppressionUnit unit_from_json(const json& j) {
  return {parse_unit_kind(j.at("kind").get<std::string>()), j.at("block").get<int>(),
          j.at("index").get<int>()};
}

inline json to_json(const Signature& s) {
  json units = json::array();
  for (const auto& u : s.units) {
    auto j = to_json(u.unit);
    j["score"] = u.score;
    units.push_back(std::move(j));
  }
  return {{"attack_family", s.attack_family},
          {"head_count", s.head_count},
          {"lambda", s.lambda},
          {"mode", s.mode},
          {"n", s.n},
          {"ratio", s.ratio},
          {"tau", s.tau},
          {"unit_count", s.units.size()},
          {"units", units},
          {"variant_ids", s.variant_ids}};
}

inline Signature signature_from_json(const json& j) {
  try {
    Signature s;
    s.attack_family = j.at("attack_family").get<std::string>();
    s.head_count = j.at("head_count").get<int>();
    s.lambda = j.at("lambda").get<double>();
    s.mode = j.at("mode").get<std::string>();
    s.n = j.at("n").get<int>();
    s.ratio = j.at("ratio").get<double>();
    s.tau = j.at("tau").get<double>();
    s.variant_ids = j.at("variant_ids").get<std::vector<int>>();
    for (const auto& u : j.at("units")) s.units.push_back({unit_from_json(u), u.at("score").get<double>()});
    if (j.contains("unit_count") && j["unit_count"].get<std::size_t>() != s.units.size()) {
      throw StructuralError("signature unit_count does not match its unit list");
    }
    return s;
  } catch (const json::exception& e) {
    throw StructuralError(std::string("malformed signature: ") + e.what());
  }
}

inline std::string save_signature(const Signature& s, const std::filesystem::path& path) {
  return write_file(path, dump_json(to_json(s)));
}

inline Signature load_signature(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("malformed signature JSON: ") + e.what(), e.byte);
  }
  return signature_from_json(j);
}

inline json to_json(const ScoreTable& t) {
  json rows = json::array();
  for (const auto& r : t.rows) {
    auto j = to_json(r.unit);
    j["strength"] = r.strength;
    j["alignment"] = r.alignment;
    j["combined"] = r.combined;
    j["rank_key"] = r.rank_key;
    rows.push_back(std::move(j));
  }
  return {{"lambda", t.lambda}, {"mode", score_mode_name(t.mode)}, {"n", t.n},
          {"rows", rows},       {"variant_ids", t.variant_ids}};
}

// One JSON object per line: {"poisoned", "prompt", "response", "variant_id"}.
inline std::string dataset_jsonl(const Dataset& d) {
  std::string out;
  for (const auto& s : d) {
    json j = {{"prompt", s.prompt},
              {"response", s.response},
              {"poisoned", s.poisoned},
              {"variant_id", s.variant_id}};
    out += j.dump() + "\n";
  }
  return out;
}

inline std::string save_dataset(const Dataset& d, const std::filesystem::path& path) {
  return write_file(path, dataset_jsonl(d));
}

inline Dataset load_dataset(const std::filesystem::path& path) {
  Dataset d;
  std::istringstream in(read_file(path));
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = json::parse(line);
      Sample s;
      s.prompt = j.at("prompt").get<TokenSeq>();
      s.response = j.at("response").get<TokenSeq>();
      s.poisoned = j.at("poisoned").get<bool>();
      s.variant_id = j.at("variant_id").get<int>();
      d.push_back(std::move(s));
    } catch (const json::exception& e) {
      throw InputError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return d;
}

// ---------------------------------------------------------------------------
// Run manifests

struct RunManifest {
  std::string command;
  json config = json::object();
  std::map<std::string, std::uint64_t> seeds;
  std::map<std::string, std::string> inputs;   // artifact path -> sha256
  std::map<std::string, std::string> outputs;  // artifact path -> sha256
  std::string started;
  std::string finished;
};

inline json to_json(const RunManifest& m) {
  return {{"command", m.command}, {"config", m.config},     {"seeds", m.seeds},
          {"inputs", m.inputs},   {"outputs", m.outputs},   {"started", m.started},
          {"finished", m.finished}};
}

inline RunManifest manifest_from_json(const json& j) {
  RunManifest m;
  try {
    m.command = j.at("command").get<std::string>();
    m.config = j.at("config");
    m.seeds = j.at("seeds").get<std::map<std::string, std::uint64_t>>();
    m.inputs = j.at("inputs").get<std::map<std::string, std::string>>();
    m.outputs = j.at("outputs").get<std::map<std::string, std::string>>();
    m.started = j.value("started", "");
    m.finished = j.value("finished", "");
  } catch (const json::exception& e) {
    throw StructuralError(std::string("malformed manifest: ") + e.what());
  }
  return m;
}

inline std::string save_manifest(const RunManifest& m, const std::filesystem::path& path) {
  return write_file(path, dump_json(to_json(m)));
}

inline RunManifest load_manifest(const std::filesystem::path& path) {
  return manifest_from_json(json::parse(read_file(path)));
}

}  // namespace bdlab
