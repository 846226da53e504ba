// Apache License, Version 2.0, refer to LICENSE.txt

#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace dialectmix {

std::vector<std::string> split_tabs(std::string_view line);

/// A tab separated table with a required header row.
///
/// Blank lines and lines starting with "# " are skipped. A line consisting of
/// "#" followed by a tab is data, since "#" is the word boundary token.
struct TsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  std::vector<std::size_t> line_numbers;

  /// Index of a named column, or npos.
  std::size_t column(std::string_view name) const;
  /// Index of a named column; throws FormatError if missing.
  std::size_t require_column(std::string_view name, std::string_view file) const;
};

TsvTable read_tsv(const std::filesystem::path& path);
TsvTable parse_tsv(std::string_view text, std::string_view origin);

std::string read_text_file(const std::filesystem::path& path);

/// Resolves a shipped data file (tokens.tsv, classes.tsv, ...). Looks in
/// $DIALECTMIX_DATA_DIR, then the source tree, then the install prefix.
std::filesystem::path data_file(std::string_view name);

std::string_view library_version();

}  // namespace dialectmix
