#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace posfuse {

/// Planar easting/northing in kilometers.
struct Point {
  double x = 0.0;
  double y = 0.0;
};

inline double distance(Point a, Point b) {
  const double dx = a.x - b.x;
  const double dy = a.y - b.y;
  return std::sqrt(dx * dx + dy * dy);
}

enum class Urbanicity { urban, rural };

/// Raster geotransform. Cells are half-open squares
/// [x, x + cell_size) x [y, y + cell_size); row 0 is the southernmost row,
/// so a point on a shared edge resolves to the larger row/column index.
struct GridGeometry {
  int n_rows = 0;
  int n_cols = 0;
  double x_origin = 0.0;
  double y_origin = 0.0;
  double cell_size = 1.0;

  std::size_t size() const { return static_cast<std::size_t>(n_rows) * n_cols; }
  std::size_t index(int row, int col) const {
    return static_cast<std::size_t>(row) * n_cols + col;
  }
  int row_of(std::size_t idx) const { return static_cast<int>(idx / n_cols); }
  int col_of(std::size_t idx) const { return static_cast<int>(idx % n_cols); }

  /// Raster index of the cell containing p, or nullopt outside the raster.
  std::optional<std::size_t> locate(Point p) const;
  Point center(std::size_t idx) const;
  bool same_as(const GridGeometry& other) const;
};

/// Rectangular grid of values. `values` is row-major with row 0 at the
/// south edge (the ASCII format stores the northern row first; the loader
/// flips it).
struct Raster {
  GridGeometry geometry;
  double nodata = -9999.0;
  std::vector<double> values;

  Raster() = default;
  Raster(GridGeometry g, double fill, double nodata_value = -9999.0);

  double& at(int row, int col) { return values[geometry.index(row, col)]; }
  double at(int row, int col) const { return values[geometry.index(row, col)]; }
  bool is_nodata(std::size_t idx) const { return values[idx] == nodata; }
  /// Value at a point, nullopt outside the raster or on nodata.
  std::optional<double> value_at(Point p) const;
  void validate() const;
};

Raster load_ascii_grid(const std::string& path);
void write_ascii_grid(const Raster& raster, const std::string& path);

enum class CovariateTransform { identity, log1p, sqrt };

struct CovariateSpec {
  std::string name;
  CovariateTransform transform = CovariateTransform::identity;
  /// Binary covariates are neither transformed nor normalized.
  bool binary = false;
  // Filled in by build_fine_grid.
  double mean = 0.0;
  double sd = 1.0;
};

struct TransformSpec {
  std::vector<CovariateSpec> covariates;
  /// Multiplier on rescaled coordinates when building integration features.
  double lambda_mix = 0.0;
};

CovariateTransform parse_transform(const std::string& name);
std::string transform_name(CovariateTransform t);

struct FineCell {
  Point center;
  std::size_t raster_index = 0;
  double population = 0.0;
  Urbanicity urbanicity = Urbanicity::rural;
  int region = 0;
  int admin2 = 0;
};

/// The populated cells of the study raster with their transformed and
/// normalized covariates. Immutable after construction.
class FineGrid {
 public:
  FineGrid() = default;

  const GridGeometry& geometry() const { return geometry_; }
  std::size_t size() const { return cells_.size(); }
  const FineCell& cell(std::size_t i) const { return cells_[i]; }
  const std::vector<FineCell>& cells() const { return cells_; }
  /// Row i is d(g_i): the transformed, normalized covariates of cell i.
  const Eigen::MatrixXd& covariates() const { return covariates_; }
  std::size_t n_covariates() const { return static_cast<std::size_t>(covariates_.cols()); }
  const std::vector<std::string>& covariate_names() const { return covariate_names_; }
  int n_regions() const { return n_regions_; }
  int n_admin2() const { return n_admin2_; }

  /// Fine-grid index for a raster index, or -1 when that cell is unpopulated.
  long fine_index(std::size_t raster_index) const { return fine_index_[raster_index]; }

  /// Populated cell containing the point, nullopt if unpopulated or outside.
  std::optional<std::size_t> cell_at(Point p) const;

  /// Populated cell whose center is closest to p (ties: lower index).
  std::size_t nearest_cell(Point p) const;

 private:
  friend FineGrid build_fine_grid(const std::vector<Raster>&, const Raster&, const Raster&,
                                  const Raster&, const Raster&, TransformSpec&);

  GridGeometry geometry_;
  std::vector<FineCell> cells_;
  Eigen::MatrixXd covariates_;
  std::vector<std::string> covariate_names_;
  std::vector<long> fine_index_;
  int n_regions_ = 0;
  int n_admin2_ = 0;
};

/// Builds G from equally-shaped rasters. Cells with population <= 0 (or
/// nodata) are dropped. Normalization constants are computed over exactly the
/// retained cells and written back into `transforms`.
FineGrid build_fine_grid(const std::vector<Raster>& covariates, const Raster& population,
                         const Raster& urbanicity, const Raster& regions, const Raster& admin2,
                         TransformSpec& transforms);

inline std::optional<std::size_t> cell_at(const FineGrid& grid, Point p) { return grid.cell_at(p); }

/// Symmetric neighbor lists: two labels are adjacent when any pair of
/// 4-connected raster cells carry them.
std::vector<std::vector<int>> adjacency_from_labels(const Raster& labels, int n_labels);

}  // namespace posfuse
