#pragma once

// Binary checkpoint and trace dump formats.
//
// Checkpoint:
//   line 1  "attnlab-checkpoint 1"
//   line 2  JSON header {"config", "blocks": [{name, rows, cols}], "floats", "crc32"}
//   payload little-endian float32 parameter values in declared block order;
//           crc32 covers the payload bytes.
//
// Trace dump:
//   line 1  "attnlab-trace 1"
//   line 2  JSON header {"n_layers", "n_heads", "seq_len", "d_model", "tokens", "logits"}
//   payload attention [layer][head][query][key] then hidden [layer 0..L][position][dim],
//           row-major little-endian float32.

#include <bit>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

#include "attnlab/common.hpp"
#include "attnlab/dataset.hpp"
#include "attnlab/encoder.hpp"

namespace attnlab {

namespace detail {

inline void put_f32(std::string& out, float v) {
  const auto bits = std::bit_cast<std::uint32_t>(v);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFFu));
}

inline float get_f32(std::string_view in, std::size_t at) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) {
    bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[at + static_cast<std::size_t>(i)])) << (8 * i);
  }
  return std::bit_cast<float>(bits);
}

/// Splits "<magic>\n<json>\n<payload>".
inline std::pair<nlohmann::ordered_json, std::string_view> split_header(std::string_view bytes,
                                                                       std::string_view magic) {
  const std::size_t nl1 = bytes.find('\n');
  if (nl1 == std::string_view::npos || bytes.substr(0, nl1) != magic) {
    throw Error(ErrorCode::IoFailure, "missing '" + std::string(magic) + "' header");
  }
  const std::size_t nl2 = bytes.find('\n', nl1 + 1);
  if (nl2 == std::string_view::npos) throw Error(ErrorCode::IoFailure, "truncated header");
  nlohmann::ordered_json header;
  try {
    header = nlohmann::ordered_json::parse(bytes.substr(nl1 + 1, nl2 - nl1 - 1));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::IoFailure, std::string("bad header: ") + e.what());
  }
  return {std::move(header), bytes.substr(nl2 + 1)};
}

}  // namespace detail

inline constexpr std::string_view kCheckpointMagic = "attnlab-checkpoint 1";
inline constexpr std::string_view kTraceMagic = "attnlab-trace 1";

template <class S>
std::string checkpoint_bytes(const Params<S>& p) {
  std::string payload;
  payload.reserve(p.values.size() * 4);
  for (S v : p.values) detail::put_f32(payload, static_cast<float>(v));

  nlohmann::ordered_json header;
  header["config"] = p.config;
  auto blocks = nlohmann::ordered_json::array();
  for (const BlockInfo& b : p.layout.blocks()) {
    blocks.push_back({{"name", b.name}, {"rows", b.rows}, {"cols", b.cols}});
  }
  header["blocks"] = std::move(blocks);
  header["floats"] = p.values.size();
  header["crc32"] = hex32(crc32_string(payload));

  std::string out(kCheckpointMagic);
  out += '\n';
  out += header.dump();
  out += '\n';
  out += payload;
  return out;
}

inline Params<float> parse_checkpoint(std::string_view bytes) {
  auto [header, payload] = detail::split_header(bytes, kCheckpointMagic);
  ModelConfig config;
  try {
    config = header.at("config").get<ModelConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::IoFailure, std::string("bad checkpoint config: ") + e.what());
  }
  Params<float> p(config);
  const auto& blocks = header.at("blocks");
  if (blocks.size() != p.layout.blocks().size()) {
    throw Error(ErrorCode::IoFailure, "checkpoint block list does not match its config");
  }
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const BlockInfo& b = p.layout.blocks()[i];
    if (blocks[i].at("name").get<std::string>() != b.name || blocks[i].at("rows").get<Index>() != b.rows ||
        blocks[i].at("cols").get<Index>() != b.cols) {
      throw Error(ErrorCode::IoFailure, "checkpoint block '" + b.name + "' mismatch", i);
    }
  }
  if (payload.size() != p.values.size() * 4) {
    throw Error(ErrorCode::IoFailure, "checkpoint payload has wrong size");
  }
  if (header.at("crc32").get<std::string>() != hex32(crc32_string(payload))) {
    throw Error(ErrorCode::ChecksumMismatch, "checkpoint payload checksum mismatch");
  }
  for (std::size_t i = 0; i < p.values.size(); ++i) p.values[i] = detail::get_f32(payload, 4 * i);
  return p;
}

template <class S>
void save_checkpoint(const std::filesystem::path& path, const Params<S>& p) {
  write_file(path, checkpoint_bytes(p));
}

inline Params<float> load_checkpoint(const std::filesystem::path& path) {
  return parse_checkpoint(read_file(path));
}

/// Checksum of the parameter payload alone, as written in the header.
template <class S>
std::string params_checksum(const Params<S>& p) {
  std::string payload;
  payload.reserve(p.values.size() * 4);
  for (S v : p.values) detail::put_f32(payload, static_cast<float>(v));
  return hex32(crc32_string(payload));
}

template <class S>
std::string trace_bytes(const ForwardTrace<S>& t) {
  const Index n = t.seq_len();
  const Index d = t.hidden.empty() ? 0 : t.hidden[0].cols();
  nlohmann::ordered_json header;
  header["n_layers"] = t.n_layers();
  header["n_heads"] = t.n_heads();
  header["seq_len"] = n;
  header["d_model"] = d;
  header["tokens"] = t.tokens;
  std::vector<double> logits(static_cast<std::size_t>(t.logits.size()));
  for (Index i = 0; i < t.logits.size(); ++i) logits[static_cast<std::size_t>(i)] = static_cast<double>(static_cast<float>(t.logits(i)));
  header["logits"] = logits;

  std::string out(kTraceMagic);
  out += '\n';
  out += header.dump();
  out += '\n';
  for (const auto& layer : t.attention) {
    for (const auto& head : layer) {
      for (Index i = 0; i < head.size(); ++i) detail::put_f32(out, static_cast<float>(head.data()[i]));
    }
  }
  for (const auto& h : t.hidden) {
    for (Index i = 0; i < h.size(); ++i) detail::put_f32(out, static_cast<float>(h.data()[i]));
  }
  return out;
}

inline ForwardTrace<float> parse_trace(std::string_view bytes) {
  auto [header, payload] = detail::split_header(bytes, kTraceMagic);
  ForwardTrace<float> t;
  const int L = header.at("n_layers").get<int>();
  const int H = header.at("n_heads").get<int>();
  const Index n = header.at("seq_len").get<Index>();
  const Index d = header.at("d_model").get<Index>();
  t.tokens = header.at("tokens").get<std::vector<std::string>>();
  const auto logits = header.at("logits").get<std::vector<double>>();
  t.logits.resize(static_cast<Index>(logits.size()));
  for (std::size_t i = 0; i < logits.size(); ++i) t.logits(static_cast<Index>(i)) = static_cast<float>(logits[i]);

  const auto need = static_cast<std::size_t>(L * H * n * n + (L + 1) * n * d) * 4;
  if (payload.size() != need || static_cast<Index>(t.tokens.size()) != n) {
    throw Error(ErrorCode::IoFailure, "trace payload does not match its header");
  }
  std::size_t at = 0;
  t.attention.assign(static_cast<std::size_t>(L), std::vector<Mat<float>>(static_cast<std::size_t>(H)));
  for (auto& layer : t.attention) {
    for (auto& head : layer) {
      head.resize(n, n);
      for (Index i = 0; i < head.size(); ++i, at += 4) head.data()[i] = detail::get_f32(payload, at);
    }
  }
  t.hidden.assign(static_cast<std::size_t>(L + 1), Mat<float>(n, d));
  for (auto& h : t.hidden) {
    for (Index i = 0; i < h.size(); ++i, at += 4) h.data()[i] = detail::get_f32(payload, at);
  }
  return t;
}

}  // namespace attnlab
