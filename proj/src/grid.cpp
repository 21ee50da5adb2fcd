#include "posfuse/grid.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include "posfuse/errors.hpp"

namespace posfuse {

std::optional<std::size_t> GridGeometry::locate(Point p) const {
  if (!std::isfinite(p.x) || !std::isfinite(p.y)) return std::nullopt;
  const double fc = std::floor((p.x - x_origin) / cell_size);
  const double fr = std::floor((p.y - y_origin) / cell_size);
  if (fc < 0 || fr < 0 || fc >= n_cols || fr >= n_rows) return std::nullopt;
  return index(static_cast<int>(fr), static_cast<int>(fc));
}

Point GridGeometry::center(std::size_t idx) const {
  return {x_origin + (col_of(idx) + 0.5) * cell_size, y_origin + (row_of(idx) + 0.5) * cell_size};
}

bool GridGeometry::same_as(const GridGeometry& o) const {
  return n_rows == o.n_rows && n_cols == o.n_cols && x_origin == o.x_origin &&
         y_origin == o.y_origin && cell_size == o.cell_size;
}

Raster::Raster(GridGeometry g, double fill, double nodata_value)
    : geometry(g), nodata(nodata_value), values(g.size(), fill) {}

std::optional<double> Raster::value_at(Point p) const {
  const auto idx = geometry.locate(p);
  if (!idx || is_nodata(*idx)) return std::nullopt;
  return values[*idx];
}

void Raster::validate() const {
  if (geometry.n_rows <= 0 || geometry.n_cols <= 0)
    throw DataError("raster dimensions must be positive");
  if (!(geometry.cell_size > 0)) throw DataError("raster cell_size must be positive");
  if (values.size() != geometry.size())
    throw DataError("raster value count does not match nrows*ncols");
}

namespace {

std::vector<std::string> split_ws(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream is(line);
  std::string tok;
  while (is >> tok) out.push_back(tok);
  return out;
}

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  return s;
}

double parse_double(const std::string& tok, const std::string& path, int line) {
  double v = 0.0;
  const char* first = tok.data();
  const char* last = tok.data() + tok.size();
  if (!tok.empty() && *first == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last) throw ParseError(path, line, "non-numeric token '" + tok + "'");
  return v;
}

int parse_int(const std::string& tok, const std::string& path, int line) {
  int v = 0;
  auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (ec != std::errc() || ptr != tok.data() + tok.size())
    throw ParseError(path, line, "expected integer, got '" + tok + "'");
  return v;
}

}  // namespace

Raster load_ascii_grid(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open raster '" + path + "'");

  Raster r;
  std::optional<int> ncols, nrows;
  std::optional<double> xll, yll, cellsize;
  std::string line;
  int line_no = 0;
  // Header: key/value pairs until the first line starting with a number.
  std::streampos data_start = in.tellg();
  int data_line = 0;
  while (true) {
    data_start = in.tellg();
    if (!std::getline(in, line)) break;
    ++line_no;
    const auto toks = split_ws(line);
    if (toks.empty()) continue;
    const char c0 = toks[0][0];
    if (std::isdigit(static_cast<unsigned char>(c0)) || c0 == '-' || c0 == '+' || c0 == '.') {
      data_line = line_no - 1;
      break;
    }
    if (toks.size() != 2) throw ParseError(path, line_no, "malformed header line");
    const std::string key = lower(toks[0]);
    if (key == "ncols") ncols = parse_int(toks[1], path, line_no);
    else if (key == "nrows") nrows = parse_int(toks[1], path, line_no);
    else if (key == "xllcorner") xll = parse_double(toks[1], path, line_no);
    else if (key == "yllcorner") yll = parse_double(toks[1], path, line_no);
    else if (key == "cellsize") cellsize = parse_double(toks[1], path, line_no);
    else if (key == "nodata_value") r.nodata = parse_double(toks[1], path, line_no);
    else throw ParseError(path, line_no, "unknown header key '" + toks[0] + "'");
  }
  if (!ncols || !nrows || !xll || !yll || !cellsize)
    throw ParseError(path, line_no, "incomplete header (need ncols, nrows, xllcorner, yllcorner, cellsize)");
  if (*ncols <= 0 || *nrows <= 0) throw ParseError(path, line_no, "non-positive raster dimensions");
  if (!(*cellsize > 0)) throw ParseError(path, line_no, "cellsize must be positive");

  r.geometry = GridGeometry{*nrows, *ncols, *xll, *yll, *cellsize};
  r.values.assign(r.geometry.size(), r.nodata);

  in.clear();
  in.seekg(data_start);
  line_no = data_line;
  int file_row = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto toks = split_ws(line);
    if (toks.empty()) continue;
    if (file_row >= *nrows) throw ParseError(path, line_no, "more data rows than nrows");
    if (static_cast<int>(toks.size()) != *ncols)
      throw ParseError(path, line_no,
                       "row has " + std::to_string(toks.size()) + " values, expected " + std::to_string(*ncols));
    const int row = *nrows - 1 - file_row;  // first data row is the northern edge
    for (int c = 0; c < *ncols; ++c) r.at(row, c) = parse_double(toks[c], path, line_no);
    ++file_row;
  }
  if (file_row != *nrows)
    throw ParseError(path, line_no, "expected " + std::to_string(*nrows) + " data rows, found " + std::to_string(file_row));
  return r;
}

void write_ascii_grid(const Raster& raster, const std::string& path) {
  raster.validate();
  std::FILE* f = std::fopen(path.c_str(), "w");
  if (!f) throw DataError("cannot write raster '" + path + "'");
  const auto& g = raster.geometry;
  std::fprintf(f, "ncols %d\nnrows %d\nxllcorner %.17g\nyllcorner %.17g\ncellsize %.17g\nNODATA_value %.17g\n",
               g.n_cols, g.n_rows, g.x_origin, g.y_origin, g.cell_size, raster.nodata);
  for (int row = g.n_rows - 1; row >= 0; --row) {
    for (int c = 0; c < g.n_cols; ++c) std::fprintf(f, c == 0 ? "%.17g" : " %.17g", raster.at(row, c));
    std::fputc('\n', f);
  }
  if (std::fclose(f) != 0) throw DataError("failed writing raster '" + path + "'");
}

CovariateTransform parse_transform(const std::string& name) {
  if (name == "identity") return CovariateTransform::identity;
  if (name == "log1p") return CovariateTransform::log1p;
  if (name == "sqrt") return CovariateTransform::sqrt;
  throw ConfigError("unknown covariate transform '" + name + "'");
}

std::string transform_name(CovariateTransform t) {
  switch (t) {
    case CovariateTransform::identity: return "identity";
    case CovariateTransform::log1p: return "log1p";
    case CovariateTransform::sqrt: return "sqrt";
  }
  return "identity";
}

std::optional<std::size_t> FineGrid::cell_at(Point p) const {
  const auto idx = geometry_.locate(p);
  if (!idx) return std::nullopt;
  const long fi = fine_index_[*idx];
  if (fi < 0) return std::nullopt;
  return static_cast<std::size_t>(fi);
}

std::size_t FineGrid::nearest_cell(Point p) const {
  if (cells_.empty()) throw DataError("fine grid is empty");
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < cells_.size(); ++i) {
    const double d = distance(cells_[i].center, p);
    if (d < best_d) {
      best_d = d;
      best = i;
    }
  }
  return best;
}

namespace {

int label_value(const Raster& r, std::size_t idx, const char* what) {
  const double v = r.values[idx];
  if (r.is_nodata(idx) || v < 0 || v != std::floor(v)) {
    throw DataError(std::string(what) + " label at row " + std::to_string(r.geometry.row_of(idx)) +
                    ", col " + std::to_string(r.geometry.col_of(idx)) + " is not a non-negative integer");
  }
  return static_cast<int>(v);
}

int max_label(const Raster& r) {
  int m = -1;
  for (std::size_t i = 0; i < r.values.size(); ++i)
    if (!r.is_nodata(i) && r.values[i] >= 0) m = std::max(m, static_cast<int>(r.values[i]));
  return m;
}

double apply_transform(CovariateTransform t, double x) {
  switch (t) {
    case CovariateTransform::identity: return x;
    case CovariateTransform::log1p: return std::log1p(x);
    case CovariateTransform::sqrt: return std::sqrt(x);
  }
  return x;
}

}  // namespace

FineGrid build_fine_grid(const std::vector<Raster>& covariates, const Raster& population,
                         const Raster& urbanicity, const Raster& regions, const Raster& admin2,
                         TransformSpec& transforms) {
  population.validate();
  const GridGeometry& g = population.geometry;
  auto check_geom = [&](const Raster& r, const std::string& what) {
    r.validate();
    if (!r.geometry.same_as(g)) throw ConfigError("geotransform mismatch: " + what + " vs population");
  };
  check_geom(urbanicity, "urbanicity");
  check_geom(regions, "regions");
  check_geom(admin2, "admin2");
  for (std::size_t j = 0; j < covariates.size(); ++j) check_geom(covariates[j], "covariate " + std::to_string(j));
  if (transforms.covariates.size() != covariates.size())
    throw ConfigError("transform spec has " + std::to_string(transforms.covariates.size()) +
                      " entries for " + std::to_string(covariates.size()) + " covariates");
  if (transforms.lambda_mix < 0) throw ConfigError("lambda_mix must be non-negative");

  FineGrid fg;
  fg.geometry_ = g;
  fg.fine_index_.assign(g.size(), -1);
  fg.n_regions_ = max_label(regions) + 1;
  fg.n_admin2_ = max_label(admin2) + 1;

  for (std::size_t idx = 0; idx < g.size(); ++idx) {
    if (population.is_nodata(idx)) continue;
    const double q = population.values[idx];
    if (!(q > 0)) continue;
    FineCell cell;
    cell.center = g.center(idx);
    cell.raster_index = idx;
    cell.population = q;
    const double u = urbanicity.values[idx];
    if (urbanicity.is_nodata(idx) || (u != 0.0 && u != 1.0))
      throw DataError("urbanicity at row " + std::to_string(g.row_of(idx)) + ", col " +
                      std::to_string(g.col_of(idx)) + " must be 0 or 1 on populated cells");
    cell.urbanicity = u == 1.0 ? Urbanicity::urban : Urbanicity::rural;
    cell.region = label_value(regions, idx, "region");
    cell.admin2 = label_value(admin2, idx, "admin2");
    fg.fine_index_[idx] = static_cast<long>(fg.cells_.size());
    fg.cells_.push_back(cell);
  }

  const std::size_t n = fg.cells_.size();
  const std::size_t p = covariates.size();
  fg.covariates_.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(p));
  for (std::size_t j = 0; j < p; ++j) {
    CovariateSpec& spec = transforms.covariates[j];
    fg.covariate_names_.push_back(spec.name.empty() ? "cov" + std::to_string(j) : spec.name);
    const Raster& r = covariates[j];
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t idx = fg.cells_[i].raster_index;
      if (r.is_nodata(idx) || !std::isfinite(r.values[idx]))
        throw DataError("covariate '" + fg.covariate_names_[j] + "' is nodata on populated cell (row " +
                        std::to_string(g.row_of(idx)) + ", col " + std::to_string(g.col_of(idx)) + ")");
      const double raw = r.values[idx];
      if (spec.binary) {
        if (raw != 0.0 && raw != 1.0)
          throw DataError("binary covariate '" + fg.covariate_names_[j] + "' has non-binary value");
        fg.covariates_(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = raw;
      } else {
        const double t = apply_transform(spec.transform, raw);
        if (!std::isfinite(t))
          throw DataError("covariate '" + fg.covariate_names_[j] + "' transform undefined at row " +
                          std::to_string(g.row_of(idx)) + ", col " + std::to_string(g.col_of(idx)));
        fg.covariates_(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = t;
      }
    }
    if (spec.binary) {
      spec.transform = CovariateTransform::identity;
      spec.mean = 0.0;
      spec.sd = 1.0;
      continue;
    }
    auto col = fg.covariates_.col(static_cast<Eigen::Index>(j));
    const double mean = n > 0 ? col.mean() : 0.0;
    double ss = 0.0;
    for (Eigen::Index i = 0; i < col.size(); ++i) ss += (col(i) - mean) * (col(i) - mean);
    const double sd = n > 1 ? std::sqrt(ss / static_cast<double>(n - 1)) : 0.0;
    if (!(sd > 0))
      throw DataError("covariate '" + fg.covariate_names_[j] + "' has zero standard deviation over populated cells");
    col = (col.array() - mean) / sd;
    spec.mean = mean;
    spec.sd = sd;
  }
  return fg;
}

std::vector<std::vector<int>> adjacency_from_labels(const Raster& labels, int n_labels) {
  std::vector<std::set<int>> nb(static_cast<std::size_t>(n_labels));
  const auto& g = labels.geometry;
  auto label = [&](int row, int col) -> int {
    const std::size_t idx = g.index(row, col);
    if (labels.is_nodata(idx) || labels.values[idx] < 0) return -1;
    return static_cast<int>(labels.values[idx]);
  };
  for (int row = 0; row < g.n_rows; ++row) {
    for (int col = 0; col < g.n_cols; ++col) {
      const int a = label(row, col);
      if (a < 0 || a >= n_labels) continue;
      const int rights[2][2] = {{row, col + 1}, {row + 1, col}};
      for (const auto& rc : rights) {
        if (rc[0] >= g.n_rows || rc[1] >= g.n_cols) continue;
        const int b = label(rc[0], rc[1]);
        if (b < 0 || b >= n_labels || b == a) continue;
        nb[static_cast<std::size_t>(a)].insert(b);
        nb[static_cast<std::size_t>(b)].insert(a);
      }
    }
  }
  std::vector<std::vector<int>> out(nb.size());
  for (std::size_t i = 0; i < nb.size(); ++i) out[i].assign(nb[i].begin(), nb[i].end());
  return out;
}

}  // namespace posfuse
