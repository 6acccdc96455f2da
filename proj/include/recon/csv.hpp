#pragma once

// Minimal CSV reading on top of boost::tokenizer: double-quoted fields,
// backslash escapes inside them. Blank lines and '#' lines are skipped.

#include <istream>
#include <string>
#include <vector>

namespace recon::csv {

using Row = std::vector<std::string>;

// Splits one line. Throws InvalidArgument on an unterminated quote.
Row split_line(const std::string& line, char sep = ',');

// Reads all rows. With `header`, the first row is returned separately.
std::vector<Row> read(std::istream& in, char sep = ',', Row* header = nullptr);
std::vector<Row> read_file(const std::string& path, char sep = ',', Row* header = nullptr);

// Quotes a field when needed.
std::string escape(const std::string& field, char sep = ',');

}  // namespace recon::csv
