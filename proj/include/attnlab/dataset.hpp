#pragma once

// Closed vocabulary shared by all tasks, the record type every dataset
// reduces to, and the sample file formats.

#include <algorithm>
#include <array>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "attnlab/common.hpp"
#include "attnlab/listops.hpp"
#include "attnlab/tictactoe.hpp"

namespace attnlab {

using Tokens = std::vector<std::string>;

inline constexpr std::array<std::string_view, 25> kVocabulary = {
    "[PAD]", "[CLS]", "[SEP]", "[", "]", "MAX", "MIN", "MED", "SM", "FIRST", "LAST", "0", "1",
    "2",     "3",     "4",     "5", "6", "7", "8",   "9",  "x",  "o",     "-",    "|",
};
inline constexpr int kPadId = 0;
inline constexpr int kClsId = 1;
inline constexpr int kSepId = 2;
inline constexpr int kVocabSize = static_cast<int>(kVocabulary.size());

inline int token_id(std::string_view tok) {
  for (std::size_t i = 0; i < kVocabulary.size(); ++i) {
    if (kVocabulary[i] == tok) return static_cast<int>(i);
  }
  throw Error(ErrorCode::UnknownToken, "token '" + std::string(tok) + "' not in vocabulary");
}

inline std::string_view token_name(int id) { return kVocabulary.at(static_cast<std::size_t>(id)); }

inline bool is_special(std::string_view tok) { return tok == "[CLS]" || tok == "[SEP]" || tok == "[PAD]"; }

enum class DatasetKind { ListOps, ListOpsModified, TicTacToe };

inline std::string_view to_string(DatasetKind k) {
  switch (k) {
    case DatasetKind::ListOps: return "listops";
    case DatasetKind::ListOpsModified: return "listops-mod";
    case DatasetKind::TicTacToe: return "ttt";
  }
  return "?";
}

inline DatasetKind dataset_kind_from(std::string_view s) {
  if (s == "listops") return DatasetKind::ListOps;
  if (s == "listops-mod") return DatasetKind::ListOpsModified;
  if (s == "ttt") return DatasetKind::TicTacToe;
  throw Error(ErrorCode::InvalidArgument, "unknown dataset kind '" + std::string(s) + "'");
}

inline std::vector<std::string> class_labels(DatasetKind k) {
  if (k == DatasetKind::TicTacToe) return {"x", "o"};
  return {"0", "1", "2", "3", "4", "5", "6", "7", "8", "9"};
}

/// One classification example: input symbols and the class label symbol.
struct Record {
  Tokens tokens;
  std::string label;

  friend bool operator==(const Record&, const Record&) = default;
};

inline Record to_record(const listops::Sample& s) {
  return Record{s.tokens, std::string(1, static_cast<char>('0' + s.label))};
}

inline Record to_record(const tictactoe::Sample& s) {
  return Record{s.tokens, tictactoe::player_label(s.winner)};
}

inline int label_index(const std::vector<std::string>& labels, std::string_view label) {
  const auto it = std::find(labels.begin(), labels.end(), label);
  if (it == labels.end()) {
    throw Error(ErrorCode::InvalidArgument, "label '" + std::string(label) + "' not a class");
  }
  return static_cast<int>(it - labels.begin());
}

inline Tokens split_tokens(std::string_view joined) {
  Tokens out;
  std::istringstream in{std::string(joined)};
  for (std::string t; in >> t;) out.push_back(std::move(t));
  return out;
}

// Sample files hold one JSON object per line: {"tokens": "<space-joined>", "label": "<class>"}.

inline std::string to_jsonl(const std::vector<Record>& records) {
  std::string out;
  for (const Record& r : records) {
    nlohmann::ordered_json j;
    j["tokens"] = listops::join(r.tokens);
    j["label"] = r.label;
    out += j.dump();
    out += '\n';
  }
  return out;
}

/// "Source<TAB>Target" export as used by common ListOps tooling.
inline std::string to_tsv(const std::vector<Record>& records) {
  std::string out = "Source\tTarget\n";
  for (const Record& r : records) {
    out += listops::to_text(r.tokens);
    out += '\t';
    out += r.label;
    out += '\n';
  }
  return out;
}

inline std::vector<Record> parse_jsonl(std::string_view text) {
  std::vector<Record> out;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    const std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      out.push_back(Record{split_tokens(j.at("tokens").get<std::string>()),
                           j.at("label").get<std::string>()});
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::IoFailure, "malformed sample record: " + std::string(e.what()), line_no);
    }
  }
  return out;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoFailure, "cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Writes through a temporary file and renames, so readers never see a
/// half-written artifact.
inline void write_file(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::IoFailure, "cannot write '" + path.string() + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ErrorCode::IoFailure, "short write to '" + path.string() + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw Error(ErrorCode::IoFailure, "cannot rename into '" + path.string() + "'");
}

inline std::vector<Record> load_records(const std::filesystem::path& path) {
  return parse_jsonl(read_file(path));
}

/// Deterministic held-out split: records are ordered by a seeded hash of
/// their content and the first `fraction` (rounded up) are held out.
/// Returns {kept, held_out}, each in original file order.
inline std::pair<std::vector<Record>, std::vector<Record>> split_by_hash(
    const std::vector<Record>& records, double fraction, std::uint64_t seed) {
  std::vector<std::pair<std::uint64_t, std::size_t>> keyed;
  keyed.reserve(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    const std::uint64_t h =
        splitmix64(fnv1a64(listops::join(records[i].tokens) + "\t" + records[i].label,
                           splitmix64(seed)));
    keyed.emplace_back(h, i);
  }
  std::sort(keyed.begin(), keyed.end());
  const auto held = static_cast<std::size_t>(
      std::ceil(fraction * static_cast<double>(records.size()) - 1e-9));
  std::vector<char> is_held(records.size(), 0);
  for (std::size_t i = 0; i < held && i < keyed.size(); ++i) is_held[keyed[i].second] = 1;
  std::pair<std::vector<Record>, std::vector<Record>> out;
  for (std::size_t i = 0; i < records.size(); ++i) {
    (is_held[i] ? out.second : out.first).push_back(records[i]);
  }
  return out;
}

}  // namespace attnlab
