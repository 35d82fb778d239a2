#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "tileq/matrix.hpp"

namespace tileq {

// Seeded Lloyd k-means with k-means++ initialization. Used for expert
// biclustering and for vector-quantization codebooks, so determinism and
// empty-cluster behavior are part of the contract, not implementation detail.

struct KMeansResult {
    DenseMatrix centroids;               // k x dim
    std::vector<std::size_t> labels;     // one per input row, in [0, k)
    std::vector<double> inertia_history; // post-assignment inertia per iteration
};

/// Cluster the rows of `points` into k groups.
///
/// Initialization is k-means++: the first centroid is a uniformly drawn row,
/// each later one is drawn with probability proportional to squared distance
/// from the nearest chosen centroid (inverse-CDF over one uniform draw; an
/// all-zero distance mass falls back to a uniform pick). Lloyd iterations
/// assign to the nearest centroid with ties to the lowest centroid index,
/// then repair any empty cluster by moving the point currently farthest from
/// its own centroid (donor cluster must keep >= 1 point; distance ties go to
/// the lowest point index), then recompute means. Iteration stops when labels
/// stop changing or after max_iters rounds. inertia_history records the
/// summed squared distance to the assigning centroids each round; it is
/// nonincreasing up to a 1e-9 relative slack introduced by the repair step.
///
/// Preconditions: points nonempty, 1 <= k <= points.rows, max_iters >= 1;
/// violations throw ParamError.
KMeansResult kmeans(const DenseMatrix& points, std::size_t k, std::uint64_t seed,
                    std::size_t max_iters);

} // namespace tileq
