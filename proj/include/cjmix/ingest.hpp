#pragma once

#include "cjmix/config.hpp"
#include "cjmix/design.hpp"

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace cjmix {

// RFC 4180 style: comma separated, double quotes escape commas, quotes and newlines.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  std::vector<int> line;  // 1-based source line of each row
};

CsvTable read_csv(std::istream& in, const std::string& source);
CsvTable read_csv_file(const std::filesystem::path& path);
std::string csv_field(const std::string& value);  // quoted when needed
std::string format_double(double v);               // shortest text that parses back exactly

struct IngestReport {
  int tasks = 0;
  int respondents = 0;
  int dropped_missing_moderators = 0;  // respondents with an empty or NA moderator value
  int dropped_absent_moderators = 0;   // respondents with no row in the moderators file
  int dropped_tasks = 0;
  int unused_moderator_rows = 0;       // moderator rows whose respondent has no tasks
  std::vector<std::string> warnings;
};

struct Ingested {
  Dataset data;
  IngestReport report;
};

// Profiles: respondent_id, task_id, side (L|R|single), choice, then one column
// per factor. Moderators: respondent_id then one column per moderator. Without
// a moderators table the model has the intercept only. All problems found are
// reported together in one InputError, one line per item.
Ingested ingest(const CsvTable& profiles, const std::optional<CsvTable>& moderators, const RunConfig& cfg);
Ingested ingest_files(const std::filesystem::path& profiles, const std::optional<std::filesystem::path>& moderators,
                      const RunConfig& cfg);

// Exact inverse of ingest for numeric moderators.
void write_profiles_csv(std::ostream& out, const Dataset& data);
void write_moderators_csv(std::ostream& out, const Dataset& data);

}  // namespace cjmix
