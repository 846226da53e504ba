// Apache License, Version 2.0, refer to LICENSE.txt

#include "dialectmix/tsv.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "dialectmix/errors.hpp"

namespace dialectmix {

std::vector<std::string> split_tabs(std::string_view line) {
  std::vector<std::string> fields;
  std::size_t start = 0;
  while (true) {
    const auto tab = line.find('\t', start);
    if (tab == std::string_view::npos) {
      fields.emplace_back(line.substr(start));
      break;
    }
    fields.emplace_back(line.substr(start, tab - start));
    start = tab + 1;
  }
  return fields;
}

std::size_t TsvTable::column(std::string_view name) const {
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i] == name) return i;
  }
  return std::string::npos;
}

std::size_t TsvTable::require_column(std::string_view name, std::string_view file) const {
  const auto idx = column(name);
  if (idx == std::string::npos) {
    throw FormatError(std::string(file) + ": missing required column '" + std::string(name) + "'");
  }
  return idx;
}

TsvTable parse_tsv(std::string_view text, std::string_view origin) {
  TsvTable table;
  std::size_t pos = 0;
  std::size_t line_no = 0;
  bool have_header = false;
  while (pos <= text.size()) {
    auto end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty()) {
      if (end == text.size()) break;
      continue;
    }
    if (line.size() >= 2 && line[0] == '#' && line[1] == ' ') continue;
    if (!have_header) {
      table.header = split_tabs(line);
      have_header = true;
      continue;
    }
    table.rows.push_back(split_tabs(line));
    table.line_numbers.push_back(line_no);
    if (end == text.size()) break;
  }
  if (!have_header) {
    throw FormatError(std::string(origin) + ": missing header row");
  }
  return table;
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

TsvTable read_tsv(const std::filesystem::path& path) {
  return parse_tsv(read_text_file(path), path.string());
}

std::filesystem::path data_file(std::string_view name) {
  namespace fs = std::filesystem;
  if (const char* env = std::getenv("DIALECTMIX_DATA_DIR")) {
    fs::path p = fs::path(env) / name;
    if (fs::exists(p)) return p;
  }
  for (const char* dir : {DIALECTMIX_SOURCE_DATA_DIR, DIALECTMIX_INSTALL_DATA_DIR}) {
    fs::path p = fs::path(dir) / name;
    if (fs::exists(p)) return p;
  }
  throw FormatError("shipped data file not found: " + std::string(name));
}

std::string_view library_version() { return DIALECTMIX_VERSION; }

}  // namespace dialectmix
