#include "tileq/kmeans.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "tileq/errors.hpp"
#include "tileq/rng.hpp"

namespace tileq {

namespace {

double sq_dist(const float* a, const float* b, std::size_t dim) {
    double acc = 0.0;
    for (std::size_t c = 0; c < dim; ++c) {
        const double d = static_cast<double>(a[c]) - static_cast<double>(b[c]);
        acc += d * d;
    }
    return acc;
}

/// k-means++ seeding: returns the k chosen row indices.
std::vector<std::size_t> plusplus_init(const DenseMatrix& points, std::size_t k,
                                       CounterRng& rng) {
    const std::size_t n = points.rows;
    std::vector<std::size_t> chosen;
    chosen.reserve(k);
    chosen.push_back(static_cast<std::size_t>(rng.next_below(n)));

    std::vector<double> d2(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        d2[i] = sq_dist(points.row(i), points.row(chosen[0]), points.cols);
    }
    while (chosen.size() < k) {
        double total = 0.0;
        for (double v : d2) total += v;
        std::size_t pick;
        if (total <= 0.0) {
            pick = static_cast<std::size_t>(rng.next_below(n)); // all mass collapsed
        } else {
            const double threshold = rng.next_unit() * total;
            double cum = 0.0;
            pick = n - 1; // fp slack: the walk may fall just short of total
            for (std::size_t i = 0; i < n; ++i) {
                cum += d2[i];
                if (cum > threshold) {
                    pick = i;
                    break;
                }
            }
        }
        chosen.push_back(pick);
        for (std::size_t i = 0; i < n; ++i) {
            d2[i] = std::min(d2[i], sq_dist(points.row(i), points.row(pick), points.cols));
        }
    }
    return chosen;
}

} // namespace

KMeansResult kmeans(const DenseMatrix& points, std::size_t k, std::uint64_t seed,
                    std::size_t max_iters) {
    if (points.empty()) throw ParamError("kmeans: empty input");
    if (k < 1 || k > points.rows) {
        throw ParamError("kmeans: k " + std::to_string(k) + " outside [1, " +
                         std::to_string(points.rows) + "]");
    }
    if (max_iters < 1) throw ParamError("kmeans: max_iters must be >= 1");

    const std::size_t n = points.rows;
    const std::size_t dim = points.cols;
    CounterRng rng(seed);

    KMeansResult res;
    res.centroids = DenseMatrix(k, dim);
    const std::vector<std::size_t> seeds = plusplus_init(points, k, rng);
    for (std::size_t j = 0; j < k; ++j) {
        for (std::size_t c = 0; c < dim; ++c) res.centroids.at(j, c) = points.at(seeds[j], c);
    }

    res.labels.assign(n, 0);
    std::vector<std::size_t> prev_labels;
    std::vector<std::size_t> sizes(k, 0);

    for (std::size_t iter = 0; iter < max_iters; ++iter) {
        // Assignment: nearest centroid, ties to the lowest index.
        std::fill(sizes.begin(), sizes.end(), 0);
        for (std::size_t i = 0; i < n; ++i) {
            double best = std::numeric_limits<double>::infinity();
            std::size_t arg = 0;
            for (std::size_t j = 0; j < k; ++j) {
                const double d = sq_dist(points.row(i), res.centroids.row(j), dim);
                if (d < best) {
                    best = d;
                    arg = j;
                }
            }
            res.labels[i] = arg;
            ++sizes[arg];
        }

        // Empty-cluster repair: donate the globally worst-fit point from any
        // cluster that can spare one.
        for (std::size_t j = 0; j < k; ++j) {
            if (sizes[j] != 0) continue;
            double worst = -1.0;
            std::size_t victim = n; // n = no donor found
            for (std::size_t i = 0; i < n; ++i) {
                if (sizes[res.labels[i]] < 2) continue;
                const double d = sq_dist(points.row(i), res.centroids.row(res.labels[i]), dim);
                if (d > worst) {
                    worst = d;
                    victim = i;
                }
            }
            if (victim == n) continue; // all donors are singletons; leave empty
            --sizes[res.labels[victim]];
            res.labels[victim] = j;
            ++sizes[j];
        }

        double inertia = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            inertia += sq_dist(points.row(i), res.centroids.row(res.labels[i]), dim);
        }
        res.inertia_history.push_back(inertia);

        if (res.labels == prev_labels) break;
        prev_labels = res.labels;

        // Update step: means in f64, rounded once. Clusters left empty by a
        // failed repair keep their previous centroid.
        std::vector<double> acc(k * dim, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t j = res.labels[i];
            const float* p = points.row(i);
            for (std::size_t c = 0; c < dim; ++c) acc[j * dim + c] += p[c];
        }
        for (std::size_t j = 0; j < k; ++j) {
            if (sizes[j] == 0) continue;
            for (std::size_t c = 0; c < dim; ++c) {
                res.centroids.at(j, c) = static_cast<float>(acc[j * dim + c] / sizes[j]);
            }
        }
    }
    return res;
}

} // namespace tileq
