#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "chameleon/errors.hpp"
#include "chameleon/rng.hpp"
#include "chameleon/tensor.hpp"

namespace chameleon {

using Point = std::vector<Real>;

struct ScheduledBatch {
    std::size_t cluster = 0;
    std::vector<std::size_t> indices;
};

struct ClusterPlan {
    std::size_t k = 0;
    std::vector<Point> centroids;
    std::vector<std::size_t> assignment;
    Real objective = 0.0;
    // Objective after every assignment step of the winning restart.
    std::vector<Real> objective_history;
    std::vector<ScheduledBatch> schedule;

    std::vector<std::size_t> cluster_sizes() const {
        std::vector<std::size_t> sizes(k, 0);
        for (std::size_t a : assignment) ++sizes[a];
        return sizes;
    }

    std::vector<std::vector<std::size_t>> members() const {
        std::vector<std::vector<std::size_t>> out(k);
        for (std::size_t i = 0; i < assignment.size(); ++i) out[assignment[i]].push_back(i);
        return out;
    }
};

struct KMeansOptions {
    std::size_t restarts = 5;
    std::size_t max_iters = 100;
    Real tol = 1e-6;  // relative objective improvement
};

enum class DropPolicy { keep, merge };

// One cluster per full batch of data: max(1, floor(n / batch)), never above n.
inline std::size_t choose_k(std::size_t n_examples, std::size_t batch_size) {
    if (n_examples == 0 || batch_size == 0) throw InfeasibleError("choose_k needs n_examples >= 1 and batch_size >= 1");
    return std::min(n_examples, std::max<std::size_t>(1, n_examples / batch_size));
}

inline Real squared_distance(const Point& a, const Point& b) {
    Real s = 0.0;
    for (std::size_t j = 0; j < a.size(); ++j) {
        const Real diff = a[j] - b[j];
        s += diff * diff;
    }
    return s;
}

// Nearest centroid; ties go to the lowest cluster id.
inline std::size_t nearest_centroid(const Point& p, const std::vector<Point>& centroids, Real* dist = nullptr) {
    std::size_t best = 0;
    Real best_d = std::numeric_limits<Real>::infinity();
    for (std::size_t c = 0; c < centroids.size(); ++c) {
        const Real d = squared_distance(p, centroids[c]);
        if (d < best_d) {
            best_d = d;
            best = c;
        }
    }
    if (dist) *dist = best_d;
    return best;
}

inline Real clustering_objective(std::span<const Point> points, const std::vector<Point>& centroids,
                                 const std::vector<std::size_t>& assignment) {
    Real total = 0.0;
    for (std::size_t i = 0; i < points.size(); ++i) total += squared_distance(points[i], centroids[assignment[i]]);
    return total;
}

namespace detail {

inline std::vector<Point> kmeanspp_seed(std::span<const Point> points, std::size_t k, Rng& rng) {
    const std::size_t n = points.size();
    std::vector<Point> centroids;
    centroids.reserve(k);
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    centroids.push_back(points[pick(rng)]);
    std::vector<Real> d2(n);
    for (std::size_t i = 0; i < n; ++i) d2[i] = squared_distance(points[i], centroids[0]);
    while (centroids.size() < k) {
        const Real total = std::accumulate(d2.begin(), d2.end(), 0.0);
        std::size_t chosen = 0;
        if (total > 0.0) {
            std::uniform_real_distribution<Real> u(0.0, total);
            Real r = u(rng);
            chosen = n - 1;
            for (std::size_t i = 0; i < n; ++i) {
                if (d2[i] <= 0.0) continue;
                if (r < d2[i]) {
                    chosen = i;
                    break;
                }
                r -= d2[i];
            }
            while (d2[chosen] <= 0.0 && chosen > 0) --chosen;
        } else {
            chosen = pick(rng);
        }
        centroids.push_back(points[chosen]);
        for (std::size_t i = 0; i < n; ++i) d2[i] = std::min(d2[i], squared_distance(points[i], centroids.back()));
    }
    return centroids;
}

struct LloydResult {
    std::vector<Point> centroids;
    std::vector<std::size_t> assignment;
    Real objective = 0.0;
    std::vector<Real> history;
};

inline Real assign_all(std::span<const Point> points, const std::vector<Point>& centroids,
                       std::vector<std::size_t>& assignment) {
    Real total = 0.0;
    for (std::size_t i = 0; i < points.size(); ++i) {
        Real d = 0.0;
        assignment[i] = nearest_centroid(points[i], centroids, &d);
        total += d;
    }
    return total;
}

// Centroid update. A centroid that lost all its members is moved onto the
// point farthest from its current centroid.
inline void update_centroids(std::span<const Point> points, const std::vector<std::size_t>& assignment,
                             std::vector<Point>& centroids) {
    const std::size_t k = centroids.size(), d = points.front().size();
    std::vector<Point> sums(k, Point(d, 0.0));
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < points.size(); ++i) {
        ++counts[assignment[i]];
        for (std::size_t j = 0; j < d; ++j) sums[assignment[i]][j] += points[i][j];
    }
    const std::vector<Point> previous = centroids;
    std::vector<bool> taken(points.size(), false);
    for (std::size_t c = 0; c < k; ++c) {
        if (counts[c] > 0) {
            for (std::size_t j = 0; j < d; ++j) centroids[c][j] = sums[c][j] / static_cast<Real>(counts[c]);
            continue;
        }
        std::size_t far = 0;
        Real far_d = -1.0;
        for (std::size_t i = 0; i < points.size(); ++i) {
            if (taken[i]) continue;
            const Real dist = squared_distance(points[i], previous[assignment[i]]);
            if (dist > far_d) {
                far_d = dist;
                far = i;
            }
        }
        taken[far] = true;
        centroids[c] = points[far];
    }
}

inline LloydResult lloyd(std::span<const Point> points, std::vector<Point> centroids, const KMeansOptions& opt) {
    LloydResult res;
    res.assignment.assign(points.size(), 0);
    Real obj = assign_all(points, centroids, res.assignment);
    res.history.push_back(obj);
    std::vector<std::size_t> next(points.size());
    for (std::size_t it = 0; it < opt.max_iters; ++it) {
        std::vector<Point> updated = centroids;
        update_centroids(points, res.assignment, updated);
        const Real next_obj = assign_all(points, updated, next);
        // Guards against a non-improving step (floating-point noise at a fixed point).
        if (next_obj > obj) break;
        const bool changed = next != res.assignment;
        const Real improvement = obj - next_obj;
        centroids = std::move(updated);
        res.assignment = next;
        res.history.push_back(next_obj);
        const Real prev = obj;
        obj = next_obj;
        if (!changed) break;
        if (improvement <= opt.tol * prev) break;
    }
    res.centroids = std::move(centroids);
    res.objective = obj;
    return res;
}

// Single-point moves: x leaves cluster a for b when
// n_b/(n_b+1)|x-mu_b|^2 < n_a/(n_a-1)|x-mu_a|^2. Escapes Lloyd fixed points
// that are not locally optimal under such moves. Returns whether anything moved.
inline bool point_moves(std::span<const Point> points, LloydResult& res, std::size_t max_passes) {
    const std::size_t k = res.centroids.size(), d = points.front().size();
    std::vector<Point> mu(k, Point(d, 0.0));
    std::vector<std::size_t> count(k, 0);
    for (std::size_t i = 0; i < points.size(); ++i) {
        ++count[res.assignment[i]];
        for (std::size_t j = 0; j < d; ++j) mu[res.assignment[i]][j] += points[i][j];
    }
    for (std::size_t c = 0; c < k; ++c)
        for (Real& v : mu[c]) v /= static_cast<Real>(std::max<std::size_t>(1, count[c]));
    bool any = false;
    for (std::size_t pass = 0; pass < max_passes; ++pass) {
        bool moved = false;
        for (std::size_t i = 0; i < points.size(); ++i) {
            const std::size_t a = res.assignment[i];
            if (count[a] < 2) continue;
            const Real na = static_cast<Real>(count[a]);
            const Real leave = na / (na - 1) * squared_distance(points[i], mu[a]);
            std::size_t to = a;
            Real join = leave;
            for (std::size_t b = 0; b < k; ++b) {
                if (b == a) continue;
                const Real nb = static_cast<Real>(count[b]);
                const Real cost = nb / (nb + 1) * squared_distance(points[i], mu[b]);
                if (cost < join) {
                    join = cost;
                    to = b;
                }
            }
            // relative margin keeps ties from cycling
            if (to == a || join >= leave * (1 - 1e-12)) continue;
            for (std::size_t j = 0; j < d; ++j) {
                mu[a][j] = (na * mu[a][j] - points[i][j]) / (na - 1);
                const Real nb = static_cast<Real>(count[to]);
                mu[to][j] = (nb * mu[to][j] + points[i][j]) / (nb + 1);
            }
            --count[a];
            ++count[to];
            res.assignment[i] = to;
            moved = any = true;
        }
        if (!moved) break;
    }
    if (!any) return false;
    // exact means, then the objective of this partition
    res.centroids.assign(k, Point(d, 0.0));
    for (std::size_t i = 0; i < points.size(); ++i)
        for (std::size_t j = 0; j < d; ++j) res.centroids[res.assignment[i]][j] += points[i][j];
    for (std::size_t c = 0; c < k; ++c)
        for (Real& v : res.centroids[c]) v /= static_cast<Real>(count[c]);
    res.objective = clustering_objective(points, res.centroids, res.assignment);
    res.history.push_back(res.objective);
    return true;
}

// Lloyd, then alternate point moves and Lloyd until neither changes anything.
inline LloydResult refine(std::span<const Point> points, std::vector<Point> seeds, const KMeansOptions& opt) {
    LloydResult res = lloyd(points, std::move(seeds), opt);
    for (std::size_t round = 0; round < opt.max_iters; ++round) {
        if (!point_moves(points, res, opt.max_iters)) break;
        LloydResult next = lloyd(points, res.centroids, opt);
        if (next.objective > res.objective) break;
        res.history.insert(res.history.end(), next.history.begin(), next.history.end());
        res.centroids = std::move(next.centroids);
        res.assignment = std::move(next.assignment);
        res.objective = next.objective;
    }
    return res;
}

}  // namespace detail

// Lloyd's algorithm with k-means++ seeding and single-point-move refinement;
// the best of `restarts` runs wins
// (earliest restart on ties). Deterministic under `seed`.
inline ClusterPlan kmeans(std::span<const Point> points, std::size_t k, std::uint64_t seed,
                          const KMeansOptions& opt = {}) {
    const std::size_t n = points.size();
    if (k == 0 || n < k) {
        throw InfeasibleError("kmeans: cannot form " + std::to_string(k) + " clusters from " + std::to_string(n) +
                              " points");
    }
    const std::size_t d = points.front().size();
    for (const Point& p : points) {
        if (p.size() != d) throw DimensionError("kmeans: points of differing dimension");
        for (Real v : p)
            if (!std::isfinite(v)) throw InfeasibleError("kmeans: non-finite coordinate");
    }
    const std::uint64_t base = mix_seed(seed, stream::kKmeans);
    detail::LloydResult best;
    bool have = false;
    for (std::size_t r = 0; r < std::max<std::size_t>(1, opt.restarts); ++r) {
        Rng rng = make_rng(base, r);
        detail::LloydResult res = detail::refine(points, detail::kmeanspp_seed(points, k, rng), opt);
        if (!have || res.objective < best.objective) {
            best = std::move(res);
            have = true;
        }
    }
    ClusterPlan plan;
    plan.k = k;
    plan.centroids = std::move(best.centroids);
    plan.assignment = std::move(best.assignment);
    plan.objective = best.objective;
    plan.objective_history = std::move(best.history);
    return plan;
}

// Cluster-pure batch schedule. Members of each cluster are shuffled and cut
// into batches of at most batch_size; the batch order is shuffled too.
// Under DropPolicy::merge, clusters smaller than batch_size are folded into
// the cluster with the nearest centroid first (needs the points to refit
// centroids and the objective).
inline ClusterPlan build_schedule(ClusterPlan plan, std::size_t batch_size, std::uint64_t seed,
                                  DropPolicy policy = DropPolicy::keep, std::span<const Point> points = {}) {
    if (batch_size == 0) throw InfeasibleError("build_schedule: batch_size must be positive");
    if (policy == DropPolicy::merge) {
        if (points.size() != plan.assignment.size()) {
            throw InfeasibleError("build_schedule: merge policy needs the clustered points");
        }
        for (;;) {
            const auto sizes = plan.cluster_sizes();
            std::size_t live = 0;
            for (std::size_t s : sizes) live += s > 0 ? 1 : 0;
            if (live <= 1) break;
            std::size_t small = plan.k;
            for (std::size_t c = 0; c < plan.k; ++c) {
                if (sizes[c] > 0 && sizes[c] < batch_size && (small == plan.k || sizes[c] < sizes[small])) small = c;
            }
            if (small == plan.k) break;
            std::size_t target = plan.k;
            Real best = std::numeric_limits<Real>::infinity();
            for (std::size_t c = 0; c < plan.k; ++c) {
                if (c == small || sizes[c] == 0) continue;
                const Real dist = squared_distance(plan.centroids[small], plan.centroids[c]);
                if (dist < best) {
                    best = dist;
                    target = c;
                }
            }
            for (auto& a : plan.assignment)
                if (a == small) a = target;
            Point mean(points.front().size(), 0.0);
            std::size_t count = 0;
            for (std::size_t i = 0; i < points.size(); ++i) {
                if (plan.assignment[i] != target) continue;
                ++count;
                for (std::size_t j = 0; j < mean.size(); ++j) mean[j] += points[i][j];
            }
            for (Real& v : mean) v /= static_cast<Real>(count);
            plan.centroids[target] = std::move(mean);
        }
        plan.objective = clustering_objective(points, plan.centroids, plan.assignment);
    }

    Rng rng = make_rng(seed, stream::kSchedule);
    plan.schedule.clear();
    auto groups = plan.members();
    for (std::size_t c = 0; c < groups.size(); ++c) {
        auto& idx = groups[c];
        std::shuffle(idx.begin(), idx.end(), rng);
        for (std::size_t start = 0; start < idx.size(); start += batch_size) {
            const std::size_t end = std::min(idx.size(), start + batch_size);
            plan.schedule.push_back({c, std::vector<std::size_t>(idx.begin() + static_cast<std::ptrdiff_t>(start),
                                                                 idx.begin() + static_cast<std::ptrdiff_t>(end))});
        }
    }
    std::shuffle(plan.schedule.begin(), plan.schedule.end(), rng);
    return plan;
}

}  // namespace chameleon
