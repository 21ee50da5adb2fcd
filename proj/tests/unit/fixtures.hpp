#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "posfuse/grid.hpp"
#include "posfuse/rng.hpp"

namespace posfuse::testing {

using CellFn = std::function<double(int row, int col)>;

/// Small synthetic study area assembled from per-cell functions.
struct TestArea {
  Raster population, urbanicity, regions, admin2;
  std::vector<Raster> covariates;
  TransformSpec transforms;
  FineGrid grid;
};

inline Raster raster_from(const GridGeometry& g, const CellFn& f) {
  Raster r(g, 0.0);
  for (int i = 0; i < g.n_rows; ++i)
    for (int j = 0; j < g.n_cols; ++j) r.at(i, j) = f(i, j);
  return r;
}

struct AreaSpec {
  int rows = 10;
  int cols = 10;
  double cell_size = 1.0;
  CellFn population = [](int, int) { return 1.0; };
  CellFn urban = [](int, int) { return 0.0; };
  CellFn region = [](int, int) { return 0.0; };
  CellFn admin2 = [](int, int) { return 0.0; };
  std::vector<CellFn> covariates = {[](int i, int j) { return std::sin(0.7 * i) + std::cos(0.4 * j); }};
};

inline TestArea make_area(const AreaSpec& spec) {
  GridGeometry g{spec.rows, spec.cols, 0.0, 0.0, spec.cell_size};
  TestArea a;
  a.population = raster_from(g, spec.population);
  a.urbanicity = raster_from(g, spec.urban);
  a.regions = raster_from(g, spec.region);
  a.admin2 = raster_from(g, spec.admin2);
  for (std::size_t k = 0; k < spec.covariates.size(); ++k) {
    a.covariates.push_back(raster_from(g, spec.covariates[k]));
    a.transforms.covariates.push_back({"c" + std::to_string(k), CovariateTransform::identity, false});
  }
  a.grid = build_fine_grid(a.covariates, a.population, a.urbanicity, a.regions, a.admin2, a.transforms);
  return a;
}

/// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("posfuse_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace posfuse::testing
