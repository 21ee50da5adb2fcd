#pragma once

#include <string>
#include <vector>

#include "posfuse/grid.hpp"
#include "posfuse/model.hpp"

namespace posfuse {

/// Cluster table with columns, by position:
///   survey, y, n, urbanicity, x, y, region[, weight]
/// survey is "jittered" or "geomasked", urbanicity "U" or "R". Coordinates
/// are empty for geomasked rows and region is empty for jittered rows; the
/// region of a jittered row is looked up in `regions` when given.
std::vector<ClusterRecord> read_clusters_csv(const std::string& path, const Raster* regions = nullptr);
void write_clusters_csv(const std::vector<ClusterRecord>& records, const std::string& path);

}  // namespace posfuse
