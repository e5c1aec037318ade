#pragma once

// Finished Tic-Tac-Toe games flattened to 12 symbols, e.g.
// "- x x | x x o | o o o |".

#include <array>
#include <string>
#include <vector>

#include "attnlab/common.hpp"

namespace attnlab::tictactoe {

enum class Cell { Empty, X, O };
enum class Player { None, X, O };

using Tokens = std::vector<std::string>;

/// Rows, then columns, then the two diagonals. Tie-breaks between several
/// completed lines follow this order.
inline constexpr std::array<std::array<int, 3>, 8> kLines = {{
    {0, 1, 2}, {3, 4, 5}, {6, 7, 8},
    {0, 3, 6}, {1, 4, 7}, {2, 5, 8},
    {0, 4, 8}, {2, 4, 6},
}};

inline constexpr std::size_t kTokenCount = 12;

/// Position of board cell `cell` (0..8, row-major) in the flattened tokens.
constexpr std::size_t token_position(int cell) {
  return static_cast<std::size_t>(cell + cell / 3);
}

enum class LineKind { Row, Column, Diagonal };

constexpr LineKind line_kind(std::size_t line) {
  return line < 3 ? LineKind::Row : (line < 6 ? LineKind::Column : LineKind::Diagonal);
}

struct Board {
  std::array<Cell, 9> cells{};

  int count(Cell c) const {
    int n = 0;
    for (Cell x : cells) n += (x == c);
    return n;
  }
  /// |#X - #O| <= 1.
  bool balanced() const {
    const int d = count(Cell::X) - count(Cell::O);
    return d >= -1 && d <= 1;
  }
  friend bool operator==(const Board&, const Board&) = default;
};

inline Cell to_cell(Player p) { return p == Player::X ? Cell::X : Cell::O; }

inline std::string player_label(Player p) {
  switch (p) {
    case Player::X: return "x";
    case Player::O: return "o";
    case Player::None: break;
  }
  return "-";
}

namespace detail {

inline bool line_held(const Board& b, std::size_t line, Cell c) {
  for (int i : kLines[line]) {
    if (b.cells[static_cast<std::size_t>(i)] != c) return false;
  }
  return true;
}

inline bool has_line(const Board& b, Cell c) {
  for (std::size_t l = 0; l < kLines.size(); ++l) {
    if (line_held(b, l, c)) return true;
  }
  return false;
}

}  // namespace detail

inline Player winner(const Board& b) {
  const bool x = detail::has_line(b, Cell::X);
  const bool o = detail::has_line(b, Cell::O);
  if (x && o) throw Error(ErrorCode::BothPlayersWin, "both players hold a completed line");
  if (x) return Player::X;
  if (o) return Player::O;
  return Player::None;
}

/// Index into kLines of the first completed line.
inline std::size_t winning_line_index(const Board& b) {
  const Player w = winner(b);
  if (w == Player::None) throw Error(ErrorCode::NoWinner, "board has no completed line");
  for (std::size_t l = 0; l < kLines.size(); ++l) {
    if (detail::line_held(b, l, to_cell(w))) return l;
  }
  throw Error(ErrorCode::NoWinner, "board has no completed line");
}

inline std::vector<int> winning_line(const Board& b) {
  const auto& line = kLines[winning_line_index(b)];
  return {line.begin(), line.end()};
}

inline Tokens flatten(const Board& b) {
  Tokens out;
  out.reserve(kTokenCount);
  for (std::size_t i = 0; i < 9; ++i) {
    switch (b.cells[i]) {
      case Cell::X: out.emplace_back("x"); break;
      case Cell::O: out.emplace_back("o"); break;
      case Cell::Empty: out.emplace_back("-"); break;
    }
    if (i % 3 == 2) out.emplace_back("|");
  }
  return out;
}

/// Inverse of flatten; rejects anything not in the 12-symbol layout.
inline Board unflatten(const Tokens& tokens) {
  if (tokens.size() != kTokenCount) {
    throw Error(ErrorCode::InvalidArgument, "expected 12 board tokens");
  }
  Board b;
  for (int cell = 0; cell < 9; ++cell) {
    const std::string& t = tokens[token_position(cell)];
    if (t == "x") {
      b.cells[static_cast<std::size_t>(cell)] = Cell::X;
    } else if (t == "o") {
      b.cells[static_cast<std::size_t>(cell)] = Cell::O;
    } else if (t == "-") {
      b.cells[static_cast<std::size_t>(cell)] = Cell::Empty;
    } else {
      throw Error(ErrorCode::UnknownToken, "bad cell symbol '" + t + "'", token_position(cell));
    }
  }
  for (std::size_t i = 3; i < kTokenCount; i += 4) {
    if (tokens[i] != "|") throw Error(ErrorCode::StrayToken, "expected '|'", i);
  }
  return b;
}

struct Sample {
  Tokens tokens;
  Player winner = Player::None;
  Board board;
};

/// Plays uniformly random legal games (X moves first) until one ends with a
/// win by a winner chosen by a fair coin. Draws and games won by the other
/// player are discarded, so both classes are equally likely.
inline Sample generate_finished(Rng& rng) {
  const Player target = rng.bernoulli(0.5) ? Player::X : Player::O;
  while (true) {
    Board b;
    std::vector<int> free_cells = {0, 1, 2, 3, 4, 5, 6, 7, 8};
    Cell turn = Cell::X;
    Player w = Player::None;
    while (!free_cells.empty() && w == Player::None) {
      const std::size_t pick = rng.below(free_cells.size());
      b.cells[static_cast<std::size_t>(free_cells[pick])] = turn;
      free_cells.erase(free_cells.begin() + static_cast<std::ptrdiff_t>(pick));
      w = winner(b);
      turn = turn == Cell::X ? Cell::O : Cell::X;
    }
    if (w == target) return Sample{flatten(b), w, b};
  }
}

inline std::vector<Sample> generate_many(std::uint64_t seed, std::size_t count) {
  Rng rng(seed);
  std::vector<Sample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(generate_finished(rng));
  return out;
}

}  // namespace attnlab::tictactoe
