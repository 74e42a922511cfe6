#pragma once

// Deterministic content of the golden interchange fixtures. The committed
// files under tests/fixtures are these bytes; external readers validate
// against them and the embedded reference vectors.

#include <map>
#include <string>

#include "bdlab/deltas.hpp"
#include "bdlab/lora.hpp"
#include "bdlab/signature.hpp"
#include "bdlab/store.hpp"
#include "bdlab/tinylm.hpp"

namespace bdlab::golden {

inline TinyLMConfig micro_config() {
  TinyLMConfig c;
  c.n_blocks = 1;
  c.d_model = 4;
  c.n_heads = 2;
  c.d_head = 2;
  c.d_ff = 4;
  c.vocab_size = 32;
  c.max_seq = 8;
  return c;
}

// Two small tensors with exactly representable values, one per dtype.
inline TensorArchive mixed_archive() {
  TensorArchive a;
  a.metadata["format"] = "bdlab.test";
  a.metadata["note"] = "mixed dtype reference";
  Tensor<float> f(Shape{2, 3});
  for (std::size_t i = 0; i < f.data.size(); ++i) f.data[i] = 0.5f * static_cast<float>(i) - 1.0f;
  Tensor<double> d(Shape{2});
  d.data = {0.125, -2.5};
  a.tensors.emplace("alpha", f);
  a.tensors.emplace("beta", d);
  return a;
}

inline Signature reference_signature() {
  Signature s;
  s.units = {{{UnitKind::kMlpChannel, 0, 2}, 1.75},
             {{UnitKind::kAttnHead, 0, 1}, 1.5},
             {{UnitKind::kMlpChannel, 0, 0}, 0.25}};
  s.ratio = 0.5;
  s.head_count = 1;
  s.tau = 0.25;
  s.lambda = 0.01;
  s.n = 6;
  s.variant_ids = {0, 1, 2, 3, 4, 5};
  s.attack_family = "badnets";
  s.mode = "combined";
  return s;
}

// file name -> bytes
inline std::map<std::string, std::string> files() {
  const auto c = micro_config();
  const auto p0 = init_params<float>(c, 0);
  const auto p1 = init_params<float>(c, 1);
  const auto ad = init_adapter(p0, projection_paths(c), 2, 4.0, 2);
  TensorArchive delta;
  delta.metadata["format"] = "bdlab.delta";
  for (const auto& [name, t] : diff(p1, p0).tensors) delta.tensors.emplace(name, t);

  std::map<std::string, std::string> out;
  out["mixed.bdt"] = serialize_archive(mixed_archive());
  out["params.bdt"] = serialize_archive(params_archive(p0));
  out["adapter.bdt"] = serialize_archive(adapter_archive(ad));
  out["delta.bdt"] = serialize_archive(delta);
  out["empty.bdt"] = serialize_archive(TensorArchive{});
  out["signature.json"] = dump_json(to_json(reference_signature()));

  const std::string mixed = out["mixed.bdt"];
  std::uint64_t hlen = 0;
  for (int i = 7; i >= 0; --i) hlen = (hlen << 8) | static_cast<unsigned char>(mixed[i]);
  const std::uint64_t flip_at = 8 + hlen + 5;
  std::string flipped = mixed;
  flipped[flip_at] = static_cast<char>(flipped[flip_at] ^ 0x01);
  std::string long_header = mixed;
  long_header[0] = static_cast<char>(0xff);
  long_header[1] = static_cast<char>(0xff);
  out["corrupt_flipped.bdt"] = flipped;
  out["corrupt_truncated.bdt"] = mixed.substr(0, mixed.size() - 3);
  out["corrupt_header_length.bdt"] = long_header;

  json ref;
  for (const auto& [name, bytes] : out) ref["sha256"][name] = sha256_hex(bytes);
  ref["corrupt"] = {{"corrupt_flipped.bdt", {{"source", "mixed.bdt"}, {"byte", flip_at}}},
                    {"corrupt_truncated.bdt", {{"source", "mixed.bdt"}, {"byte", mixed.size() - 3}}},
                    {"corrupt_header_length.bdt", {{"source", "mixed.bdt"}, {"byte", 0}}}};
  ref["mixed"] = {{"header_length", hlen},
                  {"alpha", {{"dtype", "F32"}, {"shape", {2, 3}}, {"values", {-1.0, -0.5, 0.0, 0.5, 1.0, 1.5}}}},
                  {"beta", {{"dtype", "F64"}, {"shape", {2}}, {"values", {0.125, -2.5}}}}};
  json units = json::array();
  for (const auto& u : reference_signature().units) units.push_back(unit_str(u.unit));
  ref["signature"] = {{"unit_count", units.size()}, {"units", units}};
  out["reference.json"] = dump_json(ref);
  return out;
}

}  // namespace bdlab::golden
