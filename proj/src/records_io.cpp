#include "posfuse/records_io.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "posfuse/errors.hpp"

namespace posfuse {

namespace {

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::stringstream ss(line);
  while (std::getline(ss, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  for (auto& f : out) {
    while (!f.empty() && (f.back() == '\r' || f.back() == ' ')) f.pop_back();
    while (!f.empty() && f.front() == ' ') f.erase(f.begin());
  }
  return out;
}

template <typename T>
T parse_number(const std::string& s, const std::string& path, int line, const char* what) {
  T v{};
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) throw ParseError(path, line, std::string("bad ") + what + " '" + s + "'");
  return v;
}

std::string fmt17(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

}  // namespace

std::vector<ClusterRecord> read_clusters_csv(const std::string& path, const Raster* regions) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  std::string line;
  int line_no = 0;
  std::vector<ClusterRecord> out;
  bool header = true;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    if (header) {
      header = false;
      if (line.rfind("survey", 0) == 0) continue;
    }
    const auto f = split_fields(line);
    if (f.size() != 7 && f.size() != 8) throw ParseError(path, line_no, "expected 7 or 8 fields");
    ClusterRecord r;
    if (f[0] == "jittered") r.survey = SurveyTag::jittered;
    else if (f[0] == "geomasked") r.survey = SurveyTag::geomasked;
    else throw ParseError(path, line_no, "unknown survey '" + f[0] + "'");
    r.y = parse_number<int>(f[1], path, line_no, "y");
    r.n = parse_number<int>(f[2], path, line_no, "n");
    if (f[3] == "U") r.urbanicity = Urbanicity::urban;
    else if (f[3] == "R") r.urbanicity = Urbanicity::rural;
    else throw ParseError(path, line_no, "urbanicity must be U or R");
    if (r.survey == SurveyTag::jittered) {
      if (f[4].empty() || f[5].empty()) throw ParseError(path, line_no, "jittered row needs coordinates");
      r.observed = Point{parse_number<double>(f[4], path, line_no, "x"), parse_number<double>(f[5], path, line_no, "y")};
      if (!f[6].empty()) r.region = parse_number<int>(f[6], path, line_no, "region");
      if (regions) {
        const auto v = regions->value_at(*r.observed);
        if (!v) throw ParseError(path, line_no, "jittered location outside the region raster");
        r.region = static_cast<int>(*v);
      }
    } else {
      if (!f[4].empty() || !f[5].empty()) throw ParseError(path, line_no, "geomasked row must not carry coordinates");
      if (f[6].empty()) throw ParseError(path, line_no, "geomasked row needs a region");
      r.region = parse_number<int>(f[6], path, line_no, "region");
    }
    if (f.size() == 8 && !f[7].empty()) r.weight = parse_number<double>(f[7], path, line_no, "weight");
    try {
      r.validate();
    } catch (const DataError& e) {
      throw ParseError(path, line_no, e.what());
    }
    out.push_back(std::move(r));
  }
  return out;
}

void write_clusters_csv(const std::vector<ClusterRecord>& records, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  out << "survey,y,n,urbanicity,x,y,region,weight\n";
  for (const auto& r : records) {
    out << (r.survey == SurveyTag::jittered ? "jittered" : "geomasked") << ',' << r.y << ',' << r.n << ','
        << (r.urbanicity == Urbanicity::urban ? "U" : "R") << ',';
    if (r.survey == SurveyTag::jittered) {
      out << fmt17(r.observed->x) << ',' << fmt17(r.observed->y) << ",,";
    } else {
      out << ",," << *r.region << ',';
    }
    out << fmt17(r.weight) << '\n';
  }
  if (!out) throw DataError("failed writing " + path);
}

}  // namespace posfuse
