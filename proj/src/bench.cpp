#include "poolnet/bench.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "poolnet/error.hpp"

namespace poolnet::bench {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, ',')) out.push_back(trim(field));
  if (!line.empty() && line.back() == ',') out.push_back("");
  return out;
}

// Shortest round-trip form, locale independent.
std::string exact(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

}  // namespace

std::vector<BaselineTiming> parse_baselines(const std::string& text, const std::string& origin) {
  std::vector<BaselineTiming> out;
  std::set<std::pair<std::string, std::string>> seen;
  std::istringstream in(text);
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const auto line = trim(raw);
    if (line.empty() || line[0] == '#') continue;
    const auto f = split_fields(line);
    if (f.size() != 3) {
      throw ParseError(origin, line_no, line,
                       "expected 3 fields (dataset,method,seconds), got " + std::to_string(f.size()));
    }
    if (out.empty() && seen.empty() && f[0] == "dataset" && f[1] == "method" && f[2] == "seconds") {
      continue;
    }
    if (f[0].empty() || f[1].empty()) throw ParseError(origin, line_no, line, "empty field");
    double seconds = 0;
    const auto* end = f[2].data() + f[2].size();
    const auto res = std::from_chars(f[2].data(), end, seconds);
    if (res.ec != std::errc() || res.ptr != end || !std::isfinite(seconds)) {
      throw ParseError(origin, line_no, line, "seconds is not a number");
    }
    if (seconds < 0) throw ParseError(origin, line_no, line, "negative seconds");
    if (!seen.emplace(f[0], f[1]).second) {
      throw ParseError(origin, line_no, line, "duplicate dataset/method pair");
    }
    out.push_back({f[0], f[1], seconds});
  }
  return out;
}

std::vector<BaselineTiming> read_baselines(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ContractError("cannot open baseline file '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_baselines(buf.str(), path);
}

SceneTiming time_scene(const data::SceneRecord& scene, const model::Encoder& encoder,
                       const model::SequenceModel& sequence, const model::PredictOptions& options) {
  SceneTiming t;
  t.dataset = scene.scene_id;
  t.frames = scene.frame_paths.size();
  const auto start = std::chrono::steady_clock::now();
  try {
    const auto p = model::predict_scene_full(scene, encoder, sequence, options);
    t.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    t.unreadable = p.unreadable;
  } catch (const ScenePredictError& e) {
    t.error = e.what();
    t.unreadable = t.frames;
  }
  return t;
}

Table build_table(const std::vector<SceneTiming>& ours, const std::vector<BaselineTiming>& baselines) {
  Table table;
  std::map<std::string, std::size_t> column;
  for (const auto& b : baselines) {
    if (b.method == kOursColumn) continue;
    if (column.emplace(b.method, table.methods.size()).second) table.methods.push_back(b.method);
  }
  const auto ours_col = table.methods.size();
  table.methods.push_back(kOursColumn);

  std::map<std::string, std::size_t> row_of;
  auto row_for = [&](const std::string& dataset) -> Row& {
    auto [it, fresh] = row_of.emplace(dataset, table.rows.size());
    if (fresh) {
      table.rows.push_back({dataset, std::nullopt, std::nullopt,
                            std::vector<std::optional<double>>(table.methods.size())});
    }
    return table.rows[it->second];
  };
  for (const auto& t : ours) {
    auto& r = row_for(t.dataset);
    r.frames = t.frames;
    r.unreadable = t.unreadable;
    r.seconds[ours_col] = t.seconds;
    if (!t.error.empty()) table.errors.push_back(t.error);
  }
  for (const auto& b : baselines) {
    // A baseline file may carry reference numbers for our own column too.
    const auto col = b.method == kOursColumn ? ours_col : column.at(b.method);
    auto& r = row_for(b.dataset);
    if (!r.seconds[col]) r.seconds[col] = b.seconds;
  }

  table.average.resize(table.methods.size());
  table.ratio.resize(table.methods.size());
  for (std::size_t c = 0; c < table.methods.size(); ++c) {
    double sum = 0;
    std::size_t n = 0;
    for (const auto& r : table.rows) {
      if (r.seconds[c]) {
        sum += *r.seconds[c];
        ++n;
      }
    }
    if (n > 0) table.average[c] = sum / double(n);
  }
  for (std::size_t c = 0; c < ours_col; ++c) {
    if (!table.average[c]) continue;
    if (!table.fastest_baseline || *table.average[c] < *table.average[*table.fastest_baseline]) {
      table.fastest_baseline = c;
    }
    if (table.average[ours_col] && *table.average[c] > 0) {
      table.ratio[c] = *table.average[ours_col] / *table.average[c];
    }
  }
  return table;
}

std::string render_text(const Table& table) {
  std::vector<std::vector<std::string>> cells;
  std::vector<std::string> header{"Dataset", "Frames", "Unreadable"};
  header.insert(header.end(), table.methods.begin(), table.methods.end());
  cells.push_back(header);
  auto opt = [](const std::optional<double>& v, int digits) { return v ? fixed(*v, digits) : "-"; };
  for (const auto& r : table.rows) {
    std::vector<std::string> line{r.dataset, r.frames ? std::to_string(*r.frames) : "-",
                                  r.unreadable ? std::to_string(*r.unreadable) : "-"};
    for (const auto& s : r.seconds) line.push_back(opt(s, 3));
    cells.push_back(line);
  }
  std::vector<std::string> avg{"Average", "", ""};
  for (const auto& a : table.average) avg.push_back(opt(a, 3));
  cells.push_back(avg);
  const bool any_ratio = std::any_of(table.ratio.begin(), table.ratio.end(),
                                     [](const auto& r) { return r.has_value(); });
  if (any_ratio) {
    std::vector<std::string> ratio{"Ours/method", "", ""};
    for (std::size_t c = 0; c < table.ratio.size(); ++c) {
      ratio.push_back(table.methods[c] == kOursColumn ? "" : opt(table.ratio[c], 3));
    }
    cells.push_back(ratio);
  }

  std::vector<std::size_t> width(header.size(), 0);
  for (const auto& line : cells)
    for (std::size_t c = 0; c < line.size(); ++c) width[c] = std::max(width[c], line[c].size());
  std::string out;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (i + 1 == cells.size() - (any_ratio ? 1 : 0)) {
      // rule above the summary rows
      std::size_t total = 0;
      for (auto w : width) total += w + 2;
      out += std::string(total - 2, '-') + "\n";
    }
    std::string line;
    for (std::size_t c = 0; c < cells[i].size(); ++c) {
      const auto& s = cells[i][c];
      const auto pad = std::string(width[c] - s.size(), ' ');
      line += c == 0 ? s + pad : pad + s;
      if (c + 1 < cells[i].size()) line += "  ";
    }
    out += line.substr(0, line.find_last_not_of(' ') + 1) + "\n";
  }
  if (table.fastest_baseline && table.ratio[*table.fastest_baseline]) {
    out += "\nOurs takes " + fixed(*table.ratio[*table.fastest_baseline], 3) +
           " of the time of the fastest baseline (" + table.methods[*table.fastest_baseline] + ")\n";
  } else if (table.methods.size() == 1) {
    out += "\nno baselines given; absolute times only\n";
  }
  for (const auto& e : table.errors) out += "error: " + e + "\n";
  return out;
}

std::string render_csv(const Table& table) {
  std::string out = "dataset,frames,unreadable";
  for (const auto& m : table.methods) out += "," + m;
  out += "\n";
  auto opt = [](const std::optional<double>& v) { return v ? exact(*v) : std::string(); };
  for (const auto& r : table.rows) {
    out += r.dataset + "," + (r.frames ? std::to_string(*r.frames) : "") + "," +
           (r.unreadable ? std::to_string(*r.unreadable) : "");
    for (const auto& s : r.seconds) out += "," + opt(s);
    out += "\n";
  }
  out += "Average,,";
  for (const auto& a : table.average) out += "," + opt(a);
  out += "\nRatio,,";
  for (const auto& r : table.ratio) out += "," + opt(r);
  out += "\n";
  return out;
}

}  // namespace poolnet::bench
