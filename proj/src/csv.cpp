#include "recon/csv.hpp"

#include <fstream>

#include <boost/tokenizer.hpp>

#include "recon/error.hpp"
#include "recon/net.hpp"

namespace recon::csv {

Row split_line(const std::string& line, char sep) {
  std::string l = line;
  if (!l.empty() && l.back() == '\r') l.pop_back();
  if (sep == '\t') {
    // TSV: no quoting.
    Row out;
    for (auto& f : split(l, '\t')) out.push_back(f);
    return out;
  }
  boost::escaped_list_separator<char> els('\\', sep, '"');
  boost::tokenizer<boost::escaped_list_separator<char>> tok(l, els);
  Row out;
  try {
    for (const auto& f : tok) out.push_back(f);
  } catch (const boost::escaped_list_error& e) {
    throw InvalidArgument(std::string("csv: ") + e.what() + " in line: " + line);
  }
  return out;
}

std::vector<Row> read(std::istream& in, char sep, Row* header) {
  std::vector<Row> rows;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    const auto t = trim(line);
    if (t.empty() || t.front() == '#') continue;
    auto row = split_line(line, sep);
    if (first && header) {
      *header = std::move(row);
      first = false;
      continue;
    }
    first = false;
    rows.push_back(std::move(row));
  }
  return rows;
}

std::vector<Row> read_file(const std::string& path, char sep, Row* header) {
  std::ifstream in(path);
  if (!in) throw NotFound("cannot open " + path);
  return read(in, sep, header);
}

std::string escape(const std::string& field, char sep) {
  if (field.find_first_of(std::string("\"\\\n\r") + sep) == std::string::npos) return field;
  std::string out = "\"";
  for (char c : field) {
    if (c == '"' || c == '\\') out += '\\';
    out += c;
  }
  return out + "\"";
}

}  // namespace recon::csv
