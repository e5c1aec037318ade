#pragma once

// Probes over captured attention and hidden states: special-token hiding,
// entropy, Gram similarity, token-to-token rankings, heatmap export, and
// scores that measure how attention lines up with ListOps structure and
// Tic-Tac-Toe winning lines.
//
// Everything here is a pure function of its inputs. Ties in rankings always
// resolve to the earlier position.

#include <algorithm>
#include <array>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <filesystem>
#include <numeric>
#include <string>
#include <vector>

#include <png.h>

#include "attnlab/common.hpp"
#include "attnlab/dataset.hpp"
#include "attnlab/encoder.hpp"
#include "attnlab/listops.hpp"
#include "attnlab/tictactoe.hpp"

namespace attnlab::analysis {

using Matrix = Mat<double>;

inline constexpr double kMassEpsilon = 1e-9;
inline constexpr double kStochasticTolerance = 1e-4;

template <class S>
Matrix to_double(const Mat<S>& m) {
  return m.template cast<double>();
}

/// Positions of [CLS]/[SEP]/[PAD] in a token list.
inline std::vector<Index> special_positions(const std::vector<std::string>& tokens) {
  std::vector<Index> out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (is_special(tokens[i])) out.push_back(static_cast<Index>(i));
  }
  return out;
}

/// Drops the hidden rows and columns and rescales each remaining row to
/// unit mass.
inline Matrix hide_and_renormalize(const Matrix& attn, const std::vector<Index>& hidden) {
  std::vector<char> drop(static_cast<std::size_t>(attn.cols()), 0);
  for (Index h : hidden) {
    if (h < 0 || h >= attn.cols()) throw Error(ErrorCode::InvalidArgument, "hidden index out of range");
    drop[static_cast<std::size_t>(h)] = 1;
  }
  std::vector<Index> keep;
  for (Index j = 0; j < attn.cols(); ++j) {
    if (!drop[static_cast<std::size_t>(j)]) keep.push_back(j);
  }
  const auto m = static_cast<Index>(keep.size());
  Matrix out(m, m);
  for (Index r = 0; r < m; ++r) {
    double mass = 0;
    for (Index c = 0; c < m; ++c) {
      out(r, c) = attn(keep[static_cast<std::size_t>(r)], keep[static_cast<std::size_t>(c)]);
      mass += out(r, c);
    }
    if (mass <= kMassEpsilon) {
      throw Error(ErrorCode::RowMassZero, "no attention mass left after hiding", static_cast<std::size_t>(r));
    }
    out.row(r) /= mass;
  }
  return out;
}

/// A trace's attention with special tokens removed, per layer and head.
struct RenormalizedAttention {
  std::vector<std::string> tokens;  // remaining tokens
  std::vector<std::vector<Matrix>> attention;

  int n_layers() const { return static_cast<int>(attention.size()); }
  int n_heads() const { return attention.empty() ? 0 : static_cast<int>(attention[0].size()); }
};

template <class S>
RenormalizedAttention renormalize_trace(const ForwardTrace<S>& trace) {
  const auto hidden = special_positions(trace.tokens);
  RenormalizedAttention out;
  for (std::size_t i = 0; i < trace.tokens.size(); ++i) {
    if (!is_special(trace.tokens[i])) out.tokens.push_back(trace.tokens[i]);
  }
  for (const auto& layer : trace.attention) {
    std::vector<Matrix> heads;
    for (const auto& h : layer) heads.push_back(hide_and_renormalize(to_double(h), hidden));
    out.attention.push_back(std::move(heads));
  }
  return out;
}

/// Mean over heads, or a single head when `head >= 0`.
inline Matrix aggregate_heads(const std::vector<Matrix>& heads, int head = -1) {
  if (head >= 0) return heads.at(static_cast<std::size_t>(head));
  Matrix sum = Matrix::Zero(heads[0].rows(), heads[0].cols());
  for (const auto& h : heads) sum += h;
  return sum / static_cast<double>(heads.size());
}

// ---------------------------------------------------------------------------
// Entropy

/// Mean over query rows of -sum_j a_ij ln a_ij (natural log, 0 ln 0 = 0).
inline double entropy(const Matrix& attn) {
  if (attn.rows() == 0) return 0.0;
  double total = 0;
  for (Index i = 0; i < attn.rows(); ++i) {
    double mass = 0, h = 0;
    for (Index j = 0; j < attn.cols(); ++j) {
      const double a = attn(i, j);
      if (a < 0) throw Error(ErrorCode::NotRowStochastic, "negative attention weight", static_cast<std::size_t>(i));
      mass += a;
      if (a > 0) h -= a * std::log(a);
    }
    if (std::abs(mass - 1.0) > kStochasticTolerance) {
      throw Error(ErrorCode::NotRowStochastic, "row does not sum to 1", static_cast<std::size_t>(i));
    }
    total += h;
  }
  return total / static_cast<double>(attn.rows());
}

struct EntropyReport {
  std::vector<std::vector<double>> per_head;  // [layer][head]
  std::vector<double> layer_mean;

  std::size_t argmin_layer() const {
    return static_cast<std::size_t>(std::min_element(layer_mean.begin(), layer_mean.end()) - layer_mean.begin());
  }
};

inline EntropyReport layer_entropy_summary(const std::vector<std::vector<Matrix>>& attention) {
  EntropyReport r;
  for (const auto& layer : attention) {
    std::vector<double> heads;
    for (const auto& h : layer) heads.push_back(entropy(h));
    r.layer_mean.push_back(std::accumulate(heads.begin(), heads.end(), 0.0) / static_cast<double>(heads.size()));
    r.per_head.push_back(std::move(heads));
  }
  return r;
}

/// Entropy of the raw attention (special tokens included) or, with
/// `hide_special`, of the renormalised attention.
template <class S>
EntropyReport layer_entropy_summary(const ForwardTrace<S>& trace, bool hide_special = false) {
  if (hide_special) return layer_entropy_summary(renormalize_trace(trace).attention);
  std::vector<std::vector<Matrix>> raw;
  for (const auto& layer : trace.attention) {
    std::vector<Matrix> heads;
    for (const auto& h : layer) heads.push_back(to_double(h));
    raw.push_back(std::move(heads));
  }
  return layer_entropy_summary(raw);
}

/// Plot-ready series: one "layer head entropy" line per head, then one
/// "layer mean entropy" line per layer (layers 1-based).
inline std::string entropy_series(const EntropyReport& r) {
  std::string out = "# series heads: layer head entropy\n";
  char buf[96];
  for (std::size_t l = 0; l < r.per_head.size(); ++l) {
    for (std::size_t h = 0; h < r.per_head[l].size(); ++h) {
      std::snprintf(buf, sizeof buf, "%zu %zu %.17g\n", l + 1, h, r.per_head[l][h]);
      out += buf;
    }
  }
  out += "# series layer_mean: layer mean_entropy\n";
  for (std::size_t l = 0; l < r.layer_mean.size(); ++l) {
    std::snprintf(buf, sizeof buf, "%zu %.17g\n", l + 1, r.layer_mean[l]);
    out += buf;
  }
  return out;
}

/// n_layers x n_heads table with a trailing mean column.
inline std::string entropy_csv(const EntropyReport& r) {
  std::string out = "layer";
  const std::size_t H = r.per_head.empty() ? 0 : r.per_head[0].size();
  for (std::size_t h = 0; h < H; ++h) out += ",head" + std::to_string(h);
  out += ",mean\n";
  char buf[40];
  for (std::size_t l = 0; l < r.per_head.size(); ++l) {
    out += std::to_string(l + 1);
    for (double v : r.per_head[l]) {
      std::snprintf(buf, sizeof buf, ",%.17g", v);
      out += buf;
    }
    std::snprintf(buf, sizeof buf, ",%.17g\n", r.layer_mean[l]);
    out += buf;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Similarity

struct SimilarityMatrix {
  Matrix values;
  int layer = 0;
};

/// S = H H^T over the rows (token states) of one hidden-state layer.
inline SimilarityMatrix similarity(const Matrix& hidden, int layer = 0) {
  SimilarityMatrix s;
  s.values.noalias() = hidden * hidden.transpose();
  s.layer = layer;
  return s;
}

// ---------------------------------------------------------------------------
// Token-to-token

enum class Direction { AttendsTo, AttendedBy };

struct Ranked {
  Index position;
  double weight;
};

/// Descending by weight, ties to the earlier position.
inline std::vector<Ranked> rank_descending(const Eigen::VectorXd& weights) {
  std::vector<Ranked> out;
  for (Index i = 0; i < weights.size(); ++i) out.push_back({i, weights(i)});
  std::stable_sort(out.begin(), out.end(), [](const Ranked& a, const Ranked& b) { return a.weight > b.weight; });
  return out;
}

/// Attends-to reads the token's row; attended-by reads its column. `k <= 0`
/// returns the full ranking.
inline std::vector<Ranked> token_to_token(const Matrix& attn, Index token, Direction dir, int k = 0) {
  if (token < 0 || token >= attn.rows()) throw Error(ErrorCode::InvalidArgument, "token index out of range");
  const Eigen::VectorXd w = dir == Direction::AttendsTo ? Eigen::VectorXd(attn.row(token).transpose())
                                                        : Eigen::VectorXd(attn.col(token));
  auto ranked = rank_descending(w);
  if (k > 0 && static_cast<std::size_t>(k) < ranked.size()) ranked.resize(static_cast<std::size_t>(k));
  return ranked;
}

/// Column sums: total mass each token receives from all queries.
inline Eigen::VectorXd attended_by_mass(const Matrix& attn) {
  // Scalar row-order sums: equal columns give bitwise-equal mass, so ties stay ties.
  Eigen::VectorXd mass = Eigen::VectorXd::Zero(attn.cols());
  for (Index i = 0; i < attn.rows(); ++i) {
    for (Index j = 0; j < attn.cols(); ++j) mass(j) += attn(i, j);
  }
  return mass;
}

// ---------------------------------------------------------------------------
// Heatmaps

/// Queries on the vertical axis (rows), keys on the horizontal (columns).
struct Heatmap {
  Matrix values;
  std::vector<std::string> row_labels;
  std::vector<std::string> col_labels;
  double lo = 0;
  double hi = 1;
};

inline Heatmap make_heatmap(Matrix values, std::vector<std::string> labels) {
  Heatmap h;
  h.lo = values.size() ? values.minCoeff() : 0.0;
  h.hi = values.size() ? values.maxCoeff() : 1.0;
  h.values = std::move(values);
  h.row_labels = labels;
  h.col_labels = std::move(labels);
  return h;
}

inline std::string heatmap_csv(const Heatmap& h) {
  if (!h.values.allFinite()) throw Error(ErrorCode::InvalidArgument, "heatmap values must be finite");
  std::string out = "query\\key";
  for (const auto& l : h.col_labels) out += "," + l;
  out += '\n';
  char buf[40];
  for (Index r = 0; r < h.values.rows(); ++r) {
    out += r < static_cast<Index>(h.row_labels.size()) ? h.row_labels[static_cast<std::size_t>(r)] : "";
    for (Index c = 0; c < h.values.cols(); ++c) {
      std::snprintf(buf, sizeof buf, ",%.17g", h.values(r, c));
      out += buf;
    }
    out += '\n';
  }
  return out;
}

/// Inverse of heatmap_csv for the numeric part.
inline Heatmap parse_heatmap_csv(const std::string& text) {
  Heatmap h;
  std::vector<std::vector<double>> rows;
  std::size_t pos = 0;
  bool header = true;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    const std::string line = text.substr(pos, end - pos);
    pos = end + 1;
    std::vector<std::string> cells;
    std::size_t a = 0;
    while (true) {
      const std::size_t b = line.find(',', a);
      cells.push_back(line.substr(a, b == std::string::npos ? std::string::npos : b - a));
      if (b == std::string::npos) break;
      a = b + 1;
    }
    if (header) {
      h.col_labels.assign(cells.begin() + 1, cells.end());
      header = false;
      continue;
    }
    h.row_labels.push_back(cells[0]);
    std::vector<double> vals;
    for (std::size_t i = 1; i < cells.size(); ++i) vals.push_back(std::strtod(cells[i].c_str(), nullptr));
    rows.push_back(std::move(vals));
  }
  h.values.resize(static_cast<Index>(rows.size()), rows.empty() ? 0 : static_cast<Index>(rows[0].size()));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t c = 0; c < rows[r].size(); ++c) h.values(static_cast<Index>(r), static_cast<Index>(c)) = rows[r][c];
  }
  return h;
}

namespace detail {

struct Rgb {
  unsigned char r, g, b;
};

/// Viridis, dark (low) to light (high).
inline Rgb colormap(double t) {
  static constexpr std::array<std::array<double, 3>, 9> anchors = {{
      {68, 1, 84}, {71, 44, 122}, {59, 81, 139}, {44, 113, 142}, {33, 144, 141},
      {39, 173, 129}, {92, 200, 99}, {170, 220, 50}, {253, 231, 37},
  }};
  t = std::clamp(t, 0.0, 1.0) * 8.0;
  const auto i = std::min<std::size_t>(7, static_cast<std::size_t>(t));
  const double f = t - static_cast<double>(i);
  auto mix = [&](std::size_t k) {
    return static_cast<unsigned char>(std::lround(anchors[i][k] + f * (anchors[i + 1][k] - anchors[i][k])));
  };
  return {mix(0), mix(1), mix(2)};
}

extern "C" inline void png_append(png_structp png, png_bytep data, png_size_t len) {
  static_cast<std::string*>(png_get_io_ptr(png))->append(reinterpret_cast<const char*>(data), len);
}

extern "C" inline void png_no_flush(png_structp) {}

// Only C calls between setjmp and return; libpng longjmps here on error.
inline bool png_write_all(png_structp png, png_infop info, std::string* out, int width, int height,
                          const unsigned char* rgb) {
  if (setjmp(png_jmpbuf(png))) return false;
  png_set_write_fn(png, out, png_append, png_no_flush);
  png_set_compression_level(png, 9);
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < height; ++y) {
    png_write_row(png, rgb + static_cast<std::size_t>(y) * static_cast<std::size_t>(width) * 3);
  }
  png_write_end(png, nullptr);
  return true;
}

/// 8-bit RGB, no interlace, zlib level 9; identical input gives identical bytes.
inline std::string encode_png_rgb(int width, int height, const std::vector<unsigned char>& rgb) {
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw Error(ErrorCode::IoFailure, "png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  std::string out;
  const bool ok = info && png_write_all(png, info, &out, width, height, rgb.data());
  png_destroy_write_struct(&png, info ? &info : nullptr);
  if (!ok) throw Error(ErrorCode::IoFailure, "png encoding failed");
  return out;
}

}  // namespace detail

/// PNG rendering, one square cell per matrix entry, lighter = higher.
inline std::string heatmap_png(const Heatmap& h) {
  if (!h.values.allFinite()) throw Error(ErrorCode::InvalidArgument, "heatmap values must be finite");
  const Index n = std::max<Index>(1, std::max(h.values.rows(), h.values.cols()));
  const int cell = static_cast<int>(std::clamp<Index>(512 / n, 1, 16));
  const int w = static_cast<int>(h.values.cols()) * cell, ht = static_cast<int>(h.values.rows()) * cell;
  std::vector<unsigned char> rgb(static_cast<std::size_t>(std::max(w, 1)) * static_cast<std::size_t>(std::max(ht, 1)) * 3, 0);
  const double span = h.hi - h.lo;
  for (int y = 0; y < ht; ++y) {
    for (int x = 0; x < w; ++x) {
      const double v = h.values(y / cell, x / cell);
      const double t = span > 0 ? (v - h.lo) / span : 0.5;
      const auto c = detail::colormap(t);
      const std::size_t at = (static_cast<std::size_t>(y) * static_cast<std::size_t>(w) + static_cast<std::size_t>(x)) * 3;
      rgb[at] = c.r;
      rgb[at + 1] = c.g;
      rgb[at + 2] = c.b;
    }
  }
  return detail::encode_png_rgb(std::max(w, 1), std::max(ht, 1), rgb);
}

enum class HeatmapFormat { Csv, Image };

inline std::filesystem::path heatmap_export(const Heatmap& h, const std::filesystem::path& stem, HeatmapFormat format) {
  std::filesystem::path path = stem;
  if (format == HeatmapFormat::Csv) {
    path += ".csv";
    write_file(path, heatmap_csv(h));
  } else {
    path += ".png";
    write_file(path, heatmap_png(h));
  }
  return path;
}

// ---------------------------------------------------------------------------
// Structural scores (attention over real tokens only, aligned to `tokens`)

/// Mean over tokens inside spans of the mass they put inside their own
/// innermost span.
inline double block_score(const Matrix& attn, const std::vector<listops::Span>& spans) {
  const auto owner = listops::innermost_span(spans, static_cast<std::size_t>(attn.rows()));
  double total = 0;
  std::size_t counted = 0;
  for (Index i = 0; i < attn.rows(); ++i) {
    const int s = owner[static_cast<std::size_t>(i)];
    if (s < 0) continue;
    const auto& sp = spans[static_cast<std::size_t>(s)];
    total += attn.row(i).segment(static_cast<Index>(sp.start), static_cast<Index>(sp.length())).sum();
    ++counted;
  }
  return counted ? total / static_cast<double>(counted) : 0.0;
}

/// Mean mass each span's direct digit operands put on that span's operator.
inline double operator_attention_score(const Matrix& attn, const std::vector<listops::Span>& spans,
                                       const std::vector<std::string>& tokens) {
  const auto owner = listops::innermost_span(spans, tokens.size());
  double total = 0;
  std::size_t counted = 0;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (!listops::is_digit_token(tokens[i]) || owner[i] < 0) continue;
    total += attn(static_cast<Index>(i), static_cast<Index>(spans[static_cast<std::size_t>(owner[i])].op_pos));
    ++counted;
  }
  return counted ? total / static_cast<double>(counted) : 0.0;
}

/// 1-based rank of the best-ranked position holding `answer`, by attended-by
/// mass.
inline int answer_attention_rank(const Matrix& attn, const std::vector<std::string>& tokens, int answer) {
  const std::string digit(1, static_cast<char>('0' + answer));
  const auto ranked = rank_descending(attended_by_mass(attn));
  for (std::size_t r = 0; r < ranked.size(); ++r) {
    if (tokens[static_cast<std::size_t>(ranked[r].position)] == digit) return static_cast<int>(r) + 1;
  }
  throw Error(ErrorCode::AnswerTokenAbsent, "answer digit " + digit + " does not occur in the sequence");
}

/// One operand of the simplified sequence: its value and the token range it
/// came from (a single digit, or a whole sub-expression).
struct SimplifiedOperand {
  int value;
  std::size_t start;
  std::size_t end;
};

inline std::vector<SimplifiedOperand> simplified_operands(const std::vector<std::string>& tokens) {
  const listops::Expr e = listops::parse(tokens);
  const auto simple = listops::simplify_once(e);
  std::vector<SimplifiedOperand> out;
  std::size_t pos = 2;  // after "[" and the root operator
  for (std::size_t c = 0; c < e.children.size(); ++c) {
    const std::size_t len = listops::render(e.children[c]).size();
    out.push_back({simple.children[c].value, pos, pos + len - 1});
    pos += len;
  }
  return out;
}

/// Fraction of simplified-sequence operands matched by the top-k attended
/// tokens. A digit operand matches when its own position is in the top k; a
/// resolved sub-expression matches when a top-k position inside it holds its
/// value. `k <= 0` uses the number of operands.
inline double simplified_overlap(const Matrix& attn, const std::vector<std::string>& tokens, int k = 0) {
  const auto operands = simplified_operands(tokens);
  if (k <= 0) k = static_cast<int>(operands.size());
  if (k > attn.rows()) throw Error(ErrorCode::InvalidArgument, "k exceeds sequence length");
  auto ranked = rank_descending(attended_by_mass(attn));
  ranked.resize(static_cast<std::size_t>(k));
  std::vector<char> used(ranked.size(), 0);
  std::size_t matched = 0;
  for (const auto& op : operands) {
    const std::string digit(1, static_cast<char>('0' + op.value));
    for (std::size_t r = 0; r < ranked.size(); ++r) {
      const auto p = static_cast<std::size_t>(ranked[r].position);
      if (!used[r] && p >= op.start && p <= op.end && tokens[p] == digit) {
        used[r] = 1;
        ++matched;
        break;
      }
    }
  }
  return operands.empty() ? 0.0 : static_cast<double>(matched) / static_cast<double>(operands.size());
}

/// Attended-by mass on the winning cells over the mass on all nine cells;
/// `attn` covers the 12 board tokens (delimiters are ignored).
inline double winning_line_attention(const Matrix& attn, const std::vector<int>& winning_cells) {
  if (attn.cols() != static_cast<Index>(tictactoe::kTokenCount)) {
    throw Error(ErrorCode::InvalidArgument, "expected attention over the 12 board tokens");
  }
  const Eigen::VectorXd mass = attended_by_mass(attn);
  double cells = 0, win = 0;
  for (int c = 0; c < 9; ++c) cells += mass(static_cast<Index>(tictactoe::token_position(c)));
  for (int c : winning_cells) win += mass(static_cast<Index>(tictactoe::token_position(c)));
  return cells > 0 ? win / cells : 0.0;
}

// ---------------------------------------------------------------------------
// Per-layer structural metrics for one ListOps trace

struct LayerMetrics {
  double block = 0;
  double operator_attention = 0;
  int answer_rank = 0;
  double simplified_overlap = 0;
};

/// Head-averaged, renormalised attention scored layer by layer.
inline std::vector<LayerMetrics> listops_layer_metrics(const RenormalizedAttention& ra, int head = -1) {
  const auto spans = listops::sub_spans(ra.tokens);
  const int answer = listops::eval(listops::parse(ra.tokens));
  std::vector<LayerMetrics> out;
  for (const auto& layer : ra.attention) {
    const Matrix a = aggregate_heads(layer, head);
    out.push_back(LayerMetrics{block_score(a, spans), operator_attention_score(a, spans, ra.tokens),
                               answer_attention_rank(a, ra.tokens, answer), simplified_overlap(a, ra.tokens)});
  }
  return out;
}

/// Layer index sets by relative depth: [0, n/3), [n/3, 2n/3), [2n/3, n).
inline std::vector<int> depth_third(int n_layers, int third) {
  std::vector<int> out;
  for (int l = 0; l < n_layers; ++l) {
    const int t = (3 * l) / n_layers;
    if (t == third) out.push_back(l);
  }
  return out;
}

/// Layer closest to relative depth `num/den` (0-based index of the
/// round(num/den * n)-th layer).
inline int layer_at_relative_depth(int n_layers, int num, int den) {
  const int one_based = static_cast<int>(std::lround(static_cast<double>(num) * n_layers / den));
  return std::clamp(one_based, 1, n_layers) - 1;
}

}  // namespace attnlab::analysis
