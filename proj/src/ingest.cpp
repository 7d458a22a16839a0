#include "cjmix/ingest.hpp"

#include "cjmix/errors.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <set>
#include <sstream>
#include <unordered_map>

namespace cjmix {

namespace {

constexpr std::size_t kMaxReported = 50;

class Problems {
 public:
  void add(std::string msg) { items_.push_back(std::move(msg)); }
  bool empty() const { return items_.empty(); }
  void throw_if_any(const std::string& what) const {
    if (items_.empty()) return;
    std::string msg = what + ": " + std::to_string(items_.size()) + " problem(s)";
    for (std::size_t i = 0; i < items_.size() && i < kMaxReported; ++i) msg += "\n  " + items_[i];
    if (items_.size() > kMaxReported) msg += "\n  ...";
    throw InputError(msg);
  }

 private:
  std::vector<std::string> items_;
};

std::string show(const std::string& s) { return "\"" + s + "\""; }

bool is_missing(const std::string& s) { return s.empty() || s == "NA" || s == "."; }

std::optional<double> parse_number(const std::string& s) {
  double v = 0.0;
  const char* end = s.data() + s.size();
  const auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || ptr != end || !std::isfinite(v)) return std::nullopt;
  return v;
}

std::string where(int row, const std::string& column) { return "row " + std::to_string(row) + ", column " + column; }

struct ModeratorColumn {
  std::string source;  // column in the moderators file
  int index = -1;
  bool categorical = false;
  std::vector<std::string> levels;  // categorical: every level, baseline first
};

}  // namespace

CsvTable read_csv(std::istream& in, const std::string& source) {
  CsvTable t;
  std::vector<std::string> record;
  std::string field;
  bool quoted_field = false, in_quotes = false, any = false;
  int line = 1, record_line = 1;
  auto end_field = [&] {
    record.push_back(std::move(field));
    field.clear();
    quoted_field = false;
  };
  auto end_record = [&] {
    end_field();
    const bool blank = record.size() == 1 && record[0].empty();
    if (!blank) {
      if (t.header.empty() && t.rows.empty()) {
        t.header = std::move(record);
      } else {
        t.rows.push_back(std::move(record));
        t.line.push_back(record_line);
      }
    }
    record.clear();
    any = false;
  };
  char c;
  while (in.get(c)) {
    if (in_quotes) {
      if (c == '"') {
        if (in.peek() == '"') {
          in.get(c);
          field += '"';
        } else {
          in_quotes = false;
        }
      } else {
        if (c == '\n') ++line;
        field += c;
      }
      continue;
    }
    if (!any) record_line = line;
    any = true;
    if (c == '"') {
      if (!field.empty() || quoted_field)
        throw InputError(source + ": line " + std::to_string(line) + ": stray quote inside a field");
      in_quotes = quoted_field = true;
    } else if (c == ',') {
      end_field();
    } else if (c == '\r') {
      if (in.peek() != '\n') field += c;
    } else if (c == '\n') {
      end_record();
      ++line;
    } else {
      if (quoted_field) throw InputError(source + ": line " + std::to_string(line) + ": text after a closing quote");
      field += c;
    }
  }
  if (in_quotes) throw InputError(source + ": unterminated quoted field");
  if (any) end_record();
  if (t.header.empty()) throw InputError(source + ": empty file");
  return t;
}

CsvTable read_csv_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read " + path.string());
  return read_csv(in, path.filename().string());
}

std::string csv_field(const std::string& value) {
  if (value.find_first_of(",\"\r\n") == std::string::npos) return value;
  std::string out = "\"";
  for (char c : value) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string format_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  if (ec != std::errc()) throw NumericalError("cannot format a number");
  return std::string(buf, ptr);
}

Ingested ingest(const CsvTable& profiles, const std::optional<CsvTable>& moderators, const RunConfig& cfg) {
  if (cfg.factors.empty()) throw InputError("config: no factors declared");
  const bool forced = cfg.kind == DesignKind::forced_choice;
  const int J = static_cast<int>(cfg.factors.size());
  Problems bad;

  // ---- profiles header
  const std::vector<std::string> fixed{"respondent_id", "task_id", "side", "choice"};
  const auto& head = profiles.header;
  for (std::size_t c = 0; c < fixed.size(); ++c)
    if (c >= head.size() || head[c] != fixed[c])
      bad.add("profiles header: column " + std::to_string(c + 1) + " must be " + fixed[c]);
  std::vector<int> factor_column(J, -1);
  for (std::size_t c = fixed.size(); c < head.size(); ++c) {
    int j = -1;
    for (int f = 0; f < J; ++f)
      if (cfg.factors[f].name == head[c]) j = f;
    if (j < 0) {
      bad.add("profiles header: column " + show(head[c]) + " is not a declared factor");
    } else if (factor_column[j] >= 0) {
      bad.add("profiles header: factor " + show(head[c]) + " appears twice");
    } else {
      factor_column[j] = static_cast<int>(c);
    }
  }
  for (int j = 0; j < J; ++j)
    if (factor_column[j] < 0) bad.add("profiles header: missing factor column " + show(cfg.factors[j].name));
  bad.throw_if_any("profiles");

  // ---- profile rows
  struct Half {
    Profile profile;
    int choice = -1;  // -1 when blank
    int row = 0;
  };
  struct Task {
    std::string id;
    std::optional<Half> left, right;
  };
  struct Respondent {
    std::string id;
    std::vector<Task> tasks;
    std::unordered_map<std::string, int> task_index;
  };
  std::vector<Respondent> people;
  std::unordered_map<std::string, int> person_index;

  for (std::size_t r = 0; r < profiles.rows.size(); ++r) {
    const auto& rec = profiles.rows[r];
    const int row = static_cast<int>(r) + 1;
    if (rec.size() != head.size()) {
      bad.add("row " + std::to_string(row) + ": expected " + std::to_string(head.size()) + " fields, found " +
              std::to_string(rec.size()));
      continue;
    }
    const std::string& rid = rec[0];
    const std::string& tid = rec[1];
    const std::string& side = rec[2];
    bool ok = true;
    if (rid.empty()) bad.add(where(row, "respondent_id") + ": empty"), ok = false;
    if (tid.empty()) bad.add(where(row, "task_id") + ": empty"), ok = false;
    const bool is_left = side == "L", is_right = side == "R", is_single = side == "single";
    if (forced ? !(is_left || is_right) : !is_single) {
      bad.add(where(row, "side") + ": " + show(side) + " is not valid for a " +
              (forced ? "forced-choice design (L or R)" : "factorial design (single)"));
      ok = false;
    }
    Half half;
    half.row = row;
    if (rec[3] == "0" || rec[3] == "1") {
      half.choice = rec[3][0] - '0';
    } else if (!(is_right && rec[3].empty())) {
      bad.add(where(row, "choice") + ": " + show(rec[3]) + " is not 0 or 1");
      ok = false;
    }
    half.profile.assign(J, -1);
    for (int j = 0; j < J; ++j) {
      const std::string& label = rec[factor_column[j]];
      half.profile[j] = cfg.factors[j].level_index(label);
      if (half.profile[j] < 0) {
        bad.add(where(row, cfg.factors[j].name) + ": unknown level " + show(label));
        ok = false;
      }
    }
    if (!ok) continue;
    auto [pit, new_person] = person_index.try_emplace(rid, static_cast<int>(people.size()));
    if (new_person) people.push_back(Respondent{rid, {}, {}});
    Respondent& p = people[pit->second];
    auto [tit, new_task] = p.task_index.try_emplace(tid, static_cast<int>(p.tasks.size()));
    if (new_task) p.tasks.push_back(Task{tid, {}, {}});
    Task& task = p.tasks[tit->second];
    auto& slot = is_right ? task.right : task.left;
    if (slot) {
      bad.add("row " + std::to_string(row) + ": duplicate key (respondent " + show(rid) + ", task " + show(tid) +
              ", side " + side + "), first seen on row " + std::to_string(slot->row));
      continue;
    }
    slot = std::move(half);
  }
  for (const auto& p : people)
    for (const auto& t : p.tasks) {
      if (!forced) continue;
      const std::string key = "respondent " + show(p.id) + ", task " + show(t.id);
      if (!t.left) bad.add(key + ": orphan task, no L row");
      if (!t.right) bad.add(key + ": orphan task, no R row");
      if (t.left && t.right && t.right->choice >= 0 && t.right->choice != 1 - t.left->choice)
        bad.add(where(t.right->row, "choice") + ": R choice must be blank or the complement of the L choice");
    }
  if (profiles.rows.empty()) bad.add("profiles: no data rows");
  bad.throw_if_any("profiles");

  // ---- moderators
  Ingested out;
  IngestReport& rep = out.report;
  std::vector<ModeratorColumn> columns;
  std::map<std::string, std::vector<std::string>> moderator_rows;  // respondent -> fields
  if (!moderators) {
    if (cfg.moderators && !cfg.moderators->empty())
      throw InputError("config lists moderators but no moderators file was given");
  } else {
    const auto& mh = moderators->header;
    if (mh.empty() || mh[0] != "respondent_id") bad.add("moderators header: column 1 must be respondent_id");
    auto column_of = [&](const std::string& name) {
      for (std::size_t c = 1; c < mh.size(); ++c)
        if (mh[c] == name) return static_cast<int>(c);
      return -1;
    };
    if (cfg.moderators) {
      for (const auto& m : *cfg.moderators) {
        ModeratorColumn col{m.name, column_of(m.name), m.baseline.has_value(), {}};
        if (col.index < 0) bad.add("moderators header: missing column " + show(m.name));
        if (col.categorical) {
          col.levels = m.levels;
          if (!col.levels.empty()) {
            std::stable_partition(col.levels.begin(), col.levels.end(), [&](const auto& l) { return l == *m.baseline; });
          } else {
            col.levels.push_back(*m.baseline);
          }
        }
        columns.push_back(std::move(col));
      }
    } else {
      for (std::size_t c = 1; c < mh.size(); ++c) columns.push_back(ModeratorColumn{mh[c], static_cast<int>(c), false, {}});
    }
    std::set<std::string> header_names;
    for (std::size_t c = 1; c < mh.size(); ++c)
      if (!header_names.insert(mh[c]).second) bad.add("moderators header: column " + show(mh[c]) + " appears twice");
    bad.throw_if_any("moderators");

    std::map<std::string, int> first_row;
    for (std::size_t r = 0; r < moderators->rows.size(); ++r) {
      const auto& rec = moderators->rows[r];
      const int row = static_cast<int>(r) + 1;
      if (rec.size() != mh.size()) {
        bad.add("moderators row " + std::to_string(row) + ": expected " + std::to_string(mh.size()) + " fields, found " +
                std::to_string(rec.size()));
        continue;
      }
      auto [it, fresh] = first_row.try_emplace(rec[0], row);
      if (!fresh) {
        bad.add("moderators row " + std::to_string(row) + ": duplicate respondent " + show(rec[0]) +
                ", first seen on row " + std::to_string(it->second));
        continue;
      }
      moderator_rows[rec[0]] = rec;
    }
    // Column kinds: declared categorical columns check their labels; the rest
    // must be numeric unless no moderator list was given, in which case
    // non-numeric columns become categorical with the first sorted label as baseline.
    for (auto& col : columns) {
      if (col.index < 0) continue;
      std::set<std::string> labels;
      bool numeric = true;
      for (const auto& [rid, rec] : moderator_rows) {
        const std::string& v = rec[col.index];
        if (is_missing(v)) continue;
        labels.insert(v);
        numeric = numeric && parse_number(v).has_value();
      }
      if (col.categorical) {
        if (col.levels.size() == 1) {
          for (const auto& l : labels)
            if (l != col.levels[0]) col.levels.push_back(l);
        } else {
          for (const auto& l : labels)
            if (std::find(col.levels.begin(), col.levels.end(), l) == col.levels.end())
              bad.add("moderators column " + col.source + ": unknown level " + show(l));
        }
      } else if (!numeric) {
        if (cfg.moderators) {
          for (std::size_t r = 0; r < moderators->rows.size(); ++r) {
            const std::string& v = moderators->rows[r].size() == mh.size() ? moderators->rows[r][col.index] : "";
            if (!is_missing(v) && !parse_number(v))
              bad.add("moderators " + where(static_cast<int>(r) + 1, col.source) + ": non-numeric value " + show(v));
          }
        } else {
          col.categorical = true;
          col.levels.assign(labels.begin(), labels.end());
          rep.warnings.push_back("moderator " + col.source + " is non-numeric; treated as categorical with baseline " +
                                 show(col.levels.front()));
        }
      }
    }
    bad.throw_if_any("moderators");
  }

  // ---- join
  Dataset& d = out.data;
  d.factors = cfg.factors;
  d.kind = cfg.kind;
  d.moderator_names.push_back("(intercept)");
  for (const auto& col : columns) {
    if (!col.categorical) {
      d.moderator_names.push_back(col.source);
    } else {
      for (std::size_t l = 1; l < col.levels.size(); ++l) d.moderator_names.push_back(col.source + "=" + col.levels[l]);
    }
  }
  const int px = static_cast<int>(d.moderator_names.size());
  std::vector<Eigen::RowVectorXd> kept_rows;
  std::vector<double> outcome;
  std::set<std::string> used;
  for (const auto& p : people) {
    Eigen::RowVectorXd x = Eigen::RowVectorXd::Zero(px);
    x(0) = 1.0;
    if (moderators) {
      const auto it = moderator_rows.find(p.id);
      if (it == moderator_rows.end()) {
        ++rep.dropped_absent_moderators;
        rep.dropped_tasks += static_cast<int>(p.tasks.size());
        continue;
      }
      used.insert(p.id);
      bool missing = false;
      int a = 1;
      for (const auto& col : columns) {
        const std::string& v = it->second[col.index];
        missing = missing || is_missing(v);
        if (!col.categorical) {
          if (!is_missing(v)) x(a) = *parse_number(v);
          ++a;
        } else {
          for (std::size_t l = 1; l < col.levels.size(); ++l, ++a) x(a) = v == col.levels[l] ? 1.0 : 0.0;
        }
      }
      if (missing) {
        ++rep.dropped_missing_moderators;
        rep.dropped_tasks += static_cast<int>(p.tasks.size());
        continue;
      }
    }
    const int i = static_cast<int>(kept_rows.size());
    kept_rows.push_back(x);
    d.respondent_ids.push_back(p.id);
    for (const auto& t : p.tasks) {
      d.left.push_back(t.left->profile);
      if (forced) d.right.push_back(t.right->profile);
      d.respondent.push_back(i);
      d.task_ids.push_back(t.id);
      outcome.push_back(t.left->choice);
    }
  }
  rep.unused_moderator_rows = static_cast<int>(moderator_rows.size() - used.size());
  if (kept_rows.empty()) throw InputError("no respondent has complete moderator data");
  d.moderators.resize(static_cast<Eigen::Index>(kept_rows.size()), px);
  for (std::size_t i = 0; i < kept_rows.size(); ++i) d.moderators.row(static_cast<Eigen::Index>(i)) = kept_rows[i];
  d.y = Eigen::Map<const Eigen::VectorXd>(outcome.data(), static_cast<Eigen::Index>(outcome.size()));
  if (rep.dropped_absent_moderators > 0)
    rep.warnings.push_back(std::to_string(rep.dropped_absent_moderators) +
                           " respondent(s) dropped: no row in the moderators file");
  if (rep.dropped_missing_moderators > 0)
    rep.warnings.push_back(std::to_string(rep.dropped_missing_moderators) +
                           " respondent(s) dropped: missing moderator values");
  rep.tasks = d.rows();
  rep.respondents = d.respondents();
  d.validate();
  return out;
}

Ingested ingest_files(const std::filesystem::path& profiles, const std::optional<std::filesystem::path>& moderators,
                      const RunConfig& cfg) {
  const CsvTable p = read_csv_file(profiles);
  std::optional<CsvTable> m;
  if (moderators) m = read_csv_file(*moderators);
  return ingest(p, m, cfg);
}

void write_profiles_csv(std::ostream& out, const Dataset& data) {
  out << "respondent_id,task_id,side,choice";
  for (const auto& f : data.factors) out << ',' << csv_field(f.name);
  out << '\n';
  auto row = [&](int r, const char* side, int choice, const Profile& p) {
    out << csv_field(data.respondent_ids[data.respondent[r]]) << ',' << csv_field(data.task_ids[r]) << ',' << side << ','
        << choice;
    for (std::size_t j = 0; j < p.size(); ++j) out << ',' << csv_field(data.factors[j].levels[p[j]]);
    out << '\n';
  };
  for (int r = 0; r < data.rows(); ++r) {
    const int y = static_cast<int>(data.y(r));
    if (data.kind == DesignKind::forced_choice) {
      row(r, "L", y, data.left[r]);
      row(r, "R", 1 - y, data.right[r]);
    } else {
      row(r, "single", y, data.left[r]);
    }
  }
}

void write_moderators_csv(std::ostream& out, const Dataset& data) {
  out << "respondent_id";
  for (std::size_t a = 1; a < data.moderator_names.size(); ++a) out << ',' << csv_field(data.moderator_names[a]);
  out << '\n';
  for (int i = 0; i < data.respondents(); ++i) {
    out << csv_field(data.respondent_ids[i]);
    for (Eigen::Index a = 1; a < data.moderators.cols(); ++a) out << ',' << format_double(data.moderators(i, a));
    out << '\n';
  }
}

}  // namespace cjmix
