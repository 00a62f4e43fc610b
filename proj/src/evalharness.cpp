#include "defgrade/evalharness.hpp"

#include <algorithm>
#include <cstdio>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "defgrade/util.hpp"

namespace defgrade::evalharness {

Fraction Fraction::make(std::int64_t num, std::int64_t den) {
  if (den == 0) throw InvalidArgument("fraction with zero denominator");
  if (den < 0) {
    num = -num;
    den = -den;
  }
  auto g = std::gcd(num < 0 ? -num : num, den);
  if (g == 0) g = 1;
  return {num / g, den / g};
}

Fraction Fraction::operator+(const Fraction& o) const {
  auto g = std::gcd(den, o.den);
  return make(num * (o.den / g) + o.num * (den / g), den / g * o.den);
}

Fraction Fraction::operator/(std::int64_t k) const { return make(num, den * k); }

std::int64_t ConfusionMatrix::total() const {
  std::int64_t t = 0;
  for (const auto& row : counts) t = std::accumulate(row.begin(), row.end(), t);
  return t;
}

std::int64_t ConfusionMatrix::tp(std::size_t i) const { return counts[i][i]; }

std::int64_t ConfusionMatrix::fp(std::size_t i) const {
  std::int64_t s = 0;
  for (std::size_t r = 0; r < counts.size(); ++r)
    if (r != i) s += counts[r][i];
  return s;
}

std::int64_t ConfusionMatrix::fn(std::size_t i) const {
  return std::accumulate(counts[i].begin(), counts[i].end(), std::int64_t{0}) - counts[i][i];
}

ConfusionMatrix confusion(const std::vector<LabeledPair>& pairs, const std::vector<Grade>& classes) {
  ConfusionMatrix m;
  m.classes = classes;
  const auto k = classes.size();
  m.counts.assign(k, std::vector<std::int64_t>(k + 1, 0));
  auto index_of = [&](const Grade& g) {
    return static_cast<std::size_t>(std::find(classes.begin(), classes.end(), g) - classes.begin());
  };
  for (const auto& p : pairs) {
    if (p.truth == kParseFailureGrade) throw InvalidArgument("the parse-failure sentinel cannot be a ground truth");
    auto t = index_of(p.truth);
    if (t == k) throw InvalidArgument("ground truth '" + p.truth + "' is not in the grade set");
    ++m.counts[t][std::min(index_of(p.predicted), k)];
  }
  return m;
}

std::vector<Grade> infer_classes(const std::vector<LabeledPair>& pairs) {
  std::set<Grade> s;
  for (const auto& p : pairs) {
    s.insert(p.truth);
    if (p.predicted != kParseFailureGrade) s.insert(p.predicted);
  }
  return {s.begin(), s.end()};
}

Fraction accuracy_exact(const std::vector<LabeledPair>& pairs) {
  if (pairs.empty()) throw InvalidArgument("accuracy of an empty set is undefined");
  std::int64_t correct = 0;
  for (const auto& p : pairs)
    if (p.predicted != kParseFailureGrade && p.predicted == p.truth) ++correct;
  return Fraction::make(correct, static_cast<std::int64_t>(pairs.size()));
}

Fraction macro_f1_exact(const std::vector<LabeledPair>& pairs, const std::vector<Grade>& classes) {
  if (pairs.empty()) throw InvalidArgument("macro-F1 of an empty set is undefined");
  if (classes.empty()) throw InvalidArgument("macro-F1 needs at least one class");
  auto m = confusion(pairs, classes);
  Fraction sum;
  for (std::size_t i = 0; i < classes.size(); ++i) {
    const auto denom = 2 * m.tp(i) + m.fp(i) + m.fn(i);
    if (denom > 0) sum = sum + Fraction::make(2 * m.tp(i), denom);
  }
  return sum / static_cast<std::int64_t>(classes.size());
}

double accuracy(const std::vector<LabeledPair>& pairs) { return accuracy_exact(pairs).value(); }

double macro_f1(const std::vector<LabeledPair>& pairs) { return macro_f1_exact(pairs, infer_classes(pairs)).value(); }

double macro_f1(const std::vector<LabeledPair>& pairs, const std::vector<Grade>& classes) {
  return macro_f1_exact(pairs, classes).value();
}

Summary summarize(const std::vector<LabeledPair>& pairs, const std::vector<Grade>& classes) {
  return {accuracy(pairs), macro_f1(pairs, classes), pairs.size()};
}

Layout layout_from(std::string_view s) {
  if (s == "models" || s == "models-cases" || s == "models_by_cases") return Layout::models_by_cases;
  if (s == "placements") return Layout::placements;
  if (s == "modules") return Layout::modules;
  throw InvalidArgument("unknown report layout '" + std::string(s) + "' (models | placements | modules)");
}

namespace {

std::string fmt6(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::string pct(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f%%", v * 100.0);
  return buf;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::vector<std::string> parse_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(std::move(cur));
  return out;
}

}  // namespace

std::string to_csv(const std::vector<ReportRow>& rows) {
  std::ostringstream out;
  out << "task,model,case,placement,modules,acc,mf1,n\n";
  for (const auto& r : rows) {
    out << csv_field(r.task) << ',' << csv_field(r.model) << ',' << r.case_id << ',' << csv_field(r.placement) << ','
        << csv_field(r.modules) << ',' << fmt6(r.acc) << ',' << fmt6(r.mf1) << ',' << r.n << '\n';
  }
  return out.str();
}

std::vector<ReportRow> from_csv(std::string_view csv) {
  std::istringstream in{std::string(csv)};
  std::string line;
  std::vector<ReportRow> rows;
  if (!std::getline(in, line) || util::trim(line) != "task,model,case,placement,modules,acc,mf1,n")
    throw InvalidArgument("report CSV has an unexpected header");
  while (std::getline(in, line)) {
    if (util::trim(line).empty()) continue;
    auto f = parse_csv_line(line);
    if (f.size() != 8) throw InvalidArgument("report CSV row has " + std::to_string(f.size()) + " fields");
    ReportRow r;
    r.task = f[0];
    r.model = f[1];
    r.case_id = std::stoi(f[2]);
    r.placement = f[3];
    r.modules = f[4];
    r.acc = std::stod(f[5]);
    r.mf1 = std::stod(f[6]);
    r.n = static_cast<std::size_t>(std::stoull(f[7]));
    rows.push_back(std::move(r));
  }
  return rows;
}

namespace {

struct Grid {
  std::string corner;
  std::vector<std::string> row_keys;
  std::vector<std::string> col_keys;
  std::map<std::pair<std::string, std::string>, double> cells;
};

void add_unique(std::vector<std::string>& keys, const std::string& k) {
  if (std::find(keys.begin(), keys.end(), k) == keys.end()) keys.push_back(k);
}

template <typename F>
void require_same(const std::vector<ReportRow>& rows, const char* axis, F get) {
  for (const auto& r : rows)
    if (get(r) != get(rows.front()))
      throw InvalidArgument(std::string("inconsistent axes: rows differ in ") + axis + " for this layout");
}

}  // namespace

std::string render_markdown(const std::vector<ReportRow>& rows, Layout layout) {
  if (rows.empty()) throw InvalidArgument("nothing to report");
  Grid g;
  auto put = [&](const std::string& row, const std::string& col, double v) {
    add_unique(g.row_keys, row);
    add_unique(g.col_keys, col);
    if (!g.cells.emplace(std::make_pair(row, col), v).second)
      throw InvalidArgument("inconsistent axes: two runs map to cell (" + row + ", " + col + ")");
  };

  std::vector<ReportRow> sorted = rows;
  std::stable_sort(sorted.begin(), sorted.end(), [](const ReportRow& a, const ReportRow& b) {
    return std::tie(a.task, a.case_id) < std::tie(b.task, b.case_id);
  });

  switch (layout) {
    case Layout::models_by_cases:
      require_same(rows, "placement", [](const ReportRow& r) { return r.placement; });
      require_same(rows, "modules", [](const ReportRow& r) { return r.modules; });
      g.corner = "Model";
      for (const auto& r : rows) add_unique(g.row_keys, r.model);
      for (const auto& r : sorted) put(r.model, r.task + " / Case " + std::to_string(r.case_id), r.acc);
      break;
    case Layout::placements:
      require_same(rows, "model", [](const ReportRow& r) { return r.model; });
      require_same(rows, "case", [](const ReportRow& r) { return std::to_string(r.case_id); });
      require_same(rows, "modules", [](const ReportRow& r) { return r.modules; });
      g.corner = "Image Location";
      for (const auto& r : sorted) {
        put(r.placement, r.task + " ACC", r.acc);
        put(r.placement, r.task + " MF1", r.mf1);
      }
      break;
    case Layout::modules:
      require_same(rows, "model", [](const ReportRow& r) { return r.model; });
      require_same(rows, "case", [](const ReportRow& r) { return std::to_string(r.case_id); });
      require_same(rows, "placement", [](const ReportRow& r) { return r.placement; });
      g.corner = "Fine-tuned Modules";
      for (const auto& r : sorted) {
        put(r.modules, r.task + " ACC", r.acc);
        put(r.modules, r.task + " MF1", r.mf1);
      }
      break;
  }

  std::map<std::string, double> col_max;
  for (const auto& [key, v] : g.cells) {
    auto it = col_max.find(key.second);
    if (it == col_max.end() || v > it->second) col_max[key.second] = v;
  }

  std::ostringstream out;
  out << "| " << g.corner << " |";
  for (const auto& c : g.col_keys) out << ' ' << c << " |";
  out << "\n|---|";
  for (std::size_t i = 0; i < g.col_keys.size(); ++i) out << "---|";
  out << '\n';
  for (const auto& r : g.row_keys) {
    out << "| " << r << " |";
    for (const auto& c : g.col_keys) {
      auto it = g.cells.find({r, c});
      if (it == g.cells.end()) {
        out << " - |";
        continue;
      }
      // Compare at display precision so visually tied maxima are all bold.
      const bool best = pct(it->second) == pct(col_max[c]);
      out << ' ' << (best ? "**" + pct(it->second) + "**" : pct(it->second)) << " |";
    }
    out << '\n';
  }
  return out.str();
}

}  // namespace defgrade::evalharness
