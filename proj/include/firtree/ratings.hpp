#pragma once

#include <charconv>
#include <cstddef>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "firtree/error.hpp"

namespace firtree {

// I x J crisp ratings with categories 1..M, row-major (rater-major).
class RatingMatrix {
 public:
  RatingMatrix() = default;

  RatingMatrix(std::size_t raters, std::size_t items, std::size_t categories, std::vector<int> values)
      : raters_(raters), items_(items), categories_(categories), values_(std::move(values)) {
    if (raters_ == 0 || items_ == 0) throw DimensionError("rating matrix needs I >= 1 and J >= 1");
    if (categories_ < 2) throw DimensionError("rating matrix needs M >= 2");
    if (values_.size() != raters_ * items_) throw DimensionError("rating matrix has the wrong number of cells");
    for (std::size_t k = 0; k < values_.size(); ++k) {
      if (values_[k] < 1 || static_cast<std::size_t>(values_[k]) > categories_)
        throw DomainError("category " + std::to_string(values_[k]) + " out of range 1.." +
                          std::to_string(categories_) + " at row " + std::to_string(k / items_ + 1) +
                          ", column " + std::to_string(k % items_ + 1));
    }
  }

  std::size_t raters() const noexcept { return raters_; }
  std::size_t items() const noexcept { return items_; }
  std::size_t categories() const noexcept { return categories_; }

  // Zero-based indices; returns a category in 1..M.
  int operator()(std::size_t rater, std::size_t item) const { return values_[rater * items_ + item]; }
  const std::vector<int>& values() const noexcept { return values_; }

  friend bool operator==(const RatingMatrix&, const RatingMatrix&) = default;

 private:
  std::size_t raters_ = 0;
  std::size_t items_ = 0;
  std::size_t categories_ = 0;
  std::vector<int> values_;
};

namespace detail {

inline std::vector<std::string> split_csv_line(std::string_view line) {
  std::vector<std::string> cells;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    auto cell = line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start);
    while (!cell.empty() && (cell.front() == ' ' || cell.front() == '\t')) cell.remove_prefix(1);
    while (!cell.empty() && (cell.back() == ' ' || cell.back() == '\t' || cell.back() == '\r')) cell.remove_suffix(1);
    cells.emplace_back(cell);
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return cells;
}

inline bool parse_int(std::string_view s, int& out) {
  const auto* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc() && ptr == end;
}

inline bool looks_numeric(std::string_view s) {
  if (s.empty()) return false;
  double d;
  const auto* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, d);
  return ec == std::errc() && ptr == end;
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  if (in.bad()) throw IoError("cannot read '" + path + "'");
  return buf.str();
}

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << text;
  if (!out) throw IoError("cannot write '" + path + "'");
}

}  // namespace detail

// Comma-delimited ratings, one rater per line. An optional single header
// row is detected by a non-numeric first row. Empty cells are an error.
inline RatingMatrix parse_ratings_csv(std::string_view text, std::size_t categories) {
  std::vector<int> values;
  std::size_t items = 0;
  std::size_t raters = 0;
  std::size_t line_no = 0;
  bool first = true;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    auto line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.find_first_not_of(" \t") == std::string_view::npos) continue;

    const auto cells = detail::split_csv_line(line);
    if (first) {
      first = false;
      bool numeric = true;
      for (const auto& c : cells) numeric = numeric && detail::looks_numeric(c);
      if (!numeric) {
        items = cells.size();
        continue;
      }
    }
    if (items == 0) items = cells.size();
    if (cells.size() != items)
      throw ParseError("line " + std::to_string(line_no) + " has " + std::to_string(cells.size()) +
                       " cells, expected " + std::to_string(items));
    for (std::size_t c = 0; c < cells.size(); ++c) {
      int v = 0;
      if (cells[c].empty())
        throw ParseError("missing response at row " + std::to_string(raters + 1) + ", column " +
                         std::to_string(c + 1));
      if (!detail::parse_int(cells[c], v))
        throw ParseError("non-integer response '" + cells[c] + "' at row " + std::to_string(raters + 1) +
                         ", column " + std::to_string(c + 1));
      values.push_back(v);
    }
    ++raters;
  }
  if (raters == 0) throw ParseError("ratings file contains no data rows");
  return RatingMatrix(raters, items, categories, std::move(values));
}

inline std::string format_ratings_csv(const RatingMatrix& data) {
  std::string out;
  for (std::size_t i = 0; i < data.raters(); ++i) {
    for (std::size_t j = 0; j < data.items(); ++j) {
      if (j) out += ',';
      out += std::to_string(data(i, j));
    }
    out += '\n';
  }
  return out;
}

}  // namespace firtree
