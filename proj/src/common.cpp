#include "medseq/common.hpp"

#include <fstream>
#include <sstream>

namespace medseq {

std::int64_t parse_duration(const std::string& text) {
  if (text.empty()) throw MedseqError("empty duration");
  std::size_t pos = 0;
  while (pos < text.size() &&
         (std::isdigit(static_cast<unsigned char>(text[pos])) ||
          text[pos] == '.')) {
    ++pos;
  }
  if (pos == 0) throw MedseqError("duration must start with a number: " + text);
  const double value = std::stod(text.substr(0, pos));
  const std::string unit = text.substr(pos);
  double scale = 1.0;
  if (unit.empty() || unit == "s") {
    scale = 1.0;
  } else if (unit == "m") {
    scale = static_cast<double>(duration::minute);
  } else if (unit == "h") {
    scale = static_cast<double>(duration::hour);
  } else if (unit == "d") {
    scale = static_cast<double>(duration::day);
  } else if (unit == "mo") {
    scale = static_cast<double>(duration::month);
  } else if (unit == "y") {
    scale = static_cast<double>(duration::year);
  } else {
    throw MedseqError("unknown duration unit '" + unit + "' in: " + text);
  }
  return static_cast<std::int64_t>(std::llround(value * scale));
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FileError("cannot open file: " + path);
  std::ostringstream out;
  out << in.rdbuf();
  return out.str();
}

void write_file(const std::string& path, const std::string& contents) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FileError("cannot write file: " + path);
  out << contents;
  if (!out) throw MedseqError("error writing file: " + path);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> parts;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      parts.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  parts.push_back(cur);
  return parts;
}

}  // namespace medseq
