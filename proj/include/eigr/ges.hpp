#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <ostream>
#include <span>
#include <vector>

#include "eigr/common.hpp"
#include "eigr/ggcn.hpp"
#include "eigr/ingest.hpp"

namespace eigr {

enum class ProbabilityMode { exact, approximate };

struct SamplerConfig {
    std::size_t num_clusters = 10;
    double overlap_degree = 0.5;     // delta_o
    double sample_fraction = 0.5;    // num_t = ceil(sample_fraction * N_e) when num_samples is 0
    std::size_t num_samples = 0;
    ProbabilityMode mode = ProbabilityMode::approximate;
    std::uint64_t seed = 42;

    void validate() const {
        if (num_clusters == 0) throw InvalidConfig("num_clusters must be positive");
        if (!(overlap_degree >= 0 && overlap_degree <= 1)) throw InvalidConfig("overlap_degree must lie in [0,1]");
        if (num_samples == 0 && !(sample_fraction > 0 && sample_fraction <= 1)) {
            throw InvalidConfig("sample_fraction must lie in (0,1]");
        }
    }

    std::size_t samples_for(std::size_t num_edges) const {
        if (num_samples > 0) {
            if (num_samples > num_edges) throw InvalidConfig("num_samples exceeds edge count");
            return num_samples;
        }
        return static_cast<std::size_t>(std::ceil(sample_fraction * static_cast<double>(num_edges) - 1e-9));
    }
};

inline double laplacian_norm(const Greg& greg, std::size_t u, std::size_t v) {
    const std::size_t du = greg.degree(u), dv = greg.degree(v);
    if (du == 0 || dv == 0) throw IsolatedEndpoint("edge endpoint has degree 0");
    return 1.0 / std::sqrt(static_cast<double>(du) * static_cast<double>(dv));
}

inline double laplacian_norm(const Greg& greg, const GregEdge& e) { return laplacian_norm(greg, e.u, e.v); }

// ---------------------------------------------------------------------------
// Clustering and edge sets
// ---------------------------------------------------------------------------

struct EdgeSetPartition {
    std::vector<std::size_t> cluster;  // per node
    std::size_t num_clusters = 0;
    /// Edge indices per unordered cluster pair (i <= j).
    std::map<std::pair<std::size_t, std::size_t>, std::vector<std::size_t>> edge_sets;
};

/// K-Means++ seeding followed by Lloyd iterations until the assignment stops
/// changing or 100 iterations have run.
inline std::vector<std::size_t> kmeans(const Matrix& points, std::size_t k, std::uint64_t seed,
                                       std::size_t max_iterations = 100) {
    const std::size_t n = points.rows;
    if (k == 0 || k > n) throw InvalidConfig("cluster count must lie in [1, node count]");
    Rng rng(derive_seed(seed, 0xC1));
    Matrix centers(k, points.cols);
    std::vector<double> nearest(n, std::numeric_limits<double>::infinity());
    std::uniform_int_distribution<std::size_t> first(0, n - 1);
    std::size_t pick = first(rng);
    for (std::size_t c = 0; c < k; ++c) {
        std::copy(points.row(pick).begin(), points.row(pick).end(), centers.row(c).begin());
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            nearest[i] = std::min(nearest[i], squared_distance(points.row(i), centers.row(c)));
            total += nearest[i];
        }
        if (c + 1 == k) break;
        if (total > 0) {
            std::discrete_distribution<std::size_t> by_distance(nearest.begin(), nearest.end());
            pick = by_distance(rng);
        } else {
            // every point coincides with a centre; take the next unused index
            pick = (pick + 1) % n;
        }
    }

    std::vector<std::size_t> assign(n, k);
    for (std::size_t iter = 0; iter < max_iterations; ++iter) {
        bool changed = false;
        for (std::size_t i = 0; i < n; ++i) {
            std::size_t best = 0;
            double best_d = squared_distance(points.row(i), centers.row(0));
            for (std::size_t c = 1; c < k; ++c) {
                const double d = squared_distance(points.row(i), centers.row(c));
                if (d < best_d) {
                    best_d = d;
                    best = c;
                }
            }
            if (assign[i] != best) {
                assign[i] = best;
                changed = true;
            }
        }
        if (!changed) break;
        Matrix sums(k, points.cols);
        std::vector<std::size_t> counts(k, 0);
        for (std::size_t i = 0; i < n; ++i) {
            axpy(1.0, points.row(i), sums.row(assign[i]));
            ++counts[assign[i]];
        }
        for (std::size_t c = 0; c < k; ++c) {
            if (counts[c] == 0) continue;  // empty cluster keeps its centre
            for (std::size_t j = 0; j < points.cols; ++j) centers(c, j) = sums(c, j) / static_cast<double>(counts[c]);
        }
    }
    return assign;
}

inline EdgeSetPartition partition_edges(const Greg& greg, std::vector<std::size_t> cluster, std::size_t k) {
    EdgeSetPartition p;
    p.cluster = std::move(cluster);
    p.num_clusters = k;
    for (std::size_t e = 0; e < greg.edges.size(); ++e) {
        std::size_t a = p.cluster[greg.edges[e].u], b = p.cluster[greg.edges[e].v];
        if (a > b) std::swap(a, b);
        p.edge_sets[{a, b}].push_back(e);
    }
    return p;
}

inline EdgeSetPartition cluster_nodes(const Greg& greg, const Matrix& features, std::size_t k, std::uint64_t seed) {
    if (features.rows != greg.num_nodes) throw DimensionMismatch("one feature row per node required");
    return partition_edges(greg, kmeans(features, k, seed), k);
}

// ---------------------------------------------------------------------------
// Edge scores and probabilities
// ---------------------------------------------------------------------------

struct EdgeScore {
    std::vector<Vec> per_layer;  // b^l_e
    Vec total;                   // sum_l b^l_e
    double norm = 0.0;           // ||sum_l b^l_e||
};

/// b^l_e = L_uv (x^{l-1}_u + x^{l-1}_v) for every layer input in `layers`.
inline EdgeScore edge_score(const Greg& greg, std::size_t edge, std::span<const Matrix> layers) {
    const auto& e = greg.edges.at(edge);
    const double lhat = laplacian_norm(greg, e);
    EdgeScore s;
    if (layers.empty()) return s;
    s.total.assign(layers[0].cols, 0.0);
    for (const auto& x : layers) {
        Vec b(x.cols);
        for (std::size_t i = 0; i < x.cols; ++i) b[i] = lhat * (x(e.u, i) + x(e.v, i));
        axpy(1.0, b, s.total);
        s.per_layer.push_back(std::move(b));
    }
    s.norm = norm(s.total);
    return s;
}

/// Proportional allocation of `mass` by `weights`, capped at 1 per entry with
/// the excess handed to the uncapped entries until the total equals `mass`.
/// All-zero weights fall back to a uniform split.
inline Vec capped_proportional(std::span<const double> weights, double mass) {
    const std::size_t n = weights.size();
    Vec p(n, 0.0);
    if (n == 0) return p;
    if (mass > static_cast<double>(n) + 1e-9) throw InvalidConfig("sample mass exceeds edge count");
    if (mass >= static_cast<double>(n) - 1e-12) {
        std::fill(p.begin(), p.end(), 1.0);
        return p;
    }
    for (double w : weights) {
        if (!(w >= 0) || !std::isfinite(w)) throw InvalidConfig("scores must be finite and nonnegative");
    }
    const double total = std::accumulate(weights.begin(), weights.end(), 0.0);
    if (total == 0.0) {
        std::fill(p.begin(), p.end(), mass / static_cast<double>(n));
        return p;
    }
    std::vector<char> capped(n, 0);
    double remaining = mass;
    while (true) {
        double free_weight = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            if (!capped[i]) free_weight += weights[i];
        }
        bool newly_capped = false;
        for (std::size_t i = 0; i < n; ++i) {
            if (capped[i]) continue;
            const double q = free_weight > 0 ? remaining * weights[i] / free_weight : 0.0;
            if (q >= 1.0) {
                capped[i] = 1;
                p[i] = 1.0;
                remaining -= 1.0;
                newly_capped = true;
            }
        }
        if (!newly_capped) {
            for (std::size_t i = 0; i < n; ++i) {
                if (!capped[i]) p[i] = free_weight > 0 ? remaining * weights[i] / free_weight : 0.0;
            }
            return p;
        }
    }
}

/// Variance-optimal p_e proportional to ||sum_l b^l_e|| with total n_s.
inline Vec optimal_probabilities(std::span<const double> score_norms, double n_s) {
    return capped_proportional(score_norms, n_s);
}

inline Vec optimal_probabilities(const Greg& greg, std::span<const std::size_t> edges,
                                 std::span<const Matrix> layers, double n_s) {
    Vec norms;
    norms.reserve(edges.size());
    for (std::size_t e : edges) norms.push_back(edge_score(greg, e, layers).norm);
    return capped_proportional(norms, n_s);
}

/// Topology-only p_e = n_s L_uv / sum L.
inline Vec approximate_probabilities(const Greg& greg, std::span<const std::size_t> edges, double n_s) {
    Vec lhat;
    lhat.reserve(edges.size());
    for (std::size_t e : edges) lhat.push_back(laplacian_norm(greg, greg.edges[e]));
    return capped_proportional(lhat, n_s);
}

inline Vec approximate_probabilities(const Greg& greg, double n_s) {
    std::vector<std::size_t> all(greg.edges.size());
    std::iota(all.begin(), all.end(), 0);
    return approximate_probabilities(greg, all, n_s);
}

/// Closed-form envelope for p_e and the two error bounds on |p_e - p_hat_e|,
/// all scaled by n_s; x_uv = ||sum_l (x^l_u + x^l_v)|| / 2L and d is the width.
struct ProbabilityBounds {
    Vec x_uv;
    Vec lower;
    Vec upper;
    Vec error_bound_1;
    Vec error_bound_2;
};

inline ProbabilityBounds probability_bounds(const Greg& greg, std::span<const Matrix> layers, double n_s) {
    if (layers.empty()) throw InvalidConfig("need at least one layer input");
    const std::size_t m = greg.edges.size();
    const double d = static_cast<double>(layers[0].cols);
    const double two_l = 2.0 * static_cast<double>(layers.size());
    ProbabilityBounds b;
    Vec lhat(m);
    double sum_l = 0.0, sum_lx = 0.0;
    for (std::size_t e = 0; e < m; ++e) {
        const auto s = edge_score(greg, e, layers);
        lhat[e] = laplacian_norm(greg, greg.edges[e]);
        b.x_uv.push_back(s.norm / lhat[e] / two_l);
        sum_l += lhat[e];
        sum_lx += lhat[e] * b.x_uv.back();
    }
    for (std::size_t e = 0; e < m; ++e) {
        b.lower.push_back(n_s * lhat[e] * b.x_uv[e] / (sum_l * d));
        b.upper.push_back(n_s * lhat[e] * d / sum_lx);
        b.error_bound_1.push_back(std::abs(n_s * lhat[e] / sum_l * (1.0 - b.x_uv[e] / d)));
        b.error_bound_2.push_back(std::abs(n_s * lhat[e] * (1.0 / (sum_lx / d) - 1.0 / sum_l)));
    }
    return b;
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

/// Independent Bernoulli draw per entry; returns the selected positions.
inline std::vector<std::size_t> sample_edges(std::span<const double> probabilities, std::uint64_t seed) {
    Rng rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::vector<std::size_t> picked;
    for (std::size_t i = 0; i < probabilities.size(); ++i) {
        const double u = unit(rng);
        if (u < probabilities[i]) picked.push_back(i);
    }
    return picked;
}

struct SampledSubgraph {
    std::size_t time_index = 0;
    std::vector<std::size_t> edges;  // sampled edge indices, sorted
    Vec edge_probability;            // p_e for every GREG edge under this sampler (0 if not eligible)
    std::vector<std::size_t> overlap;  // edges carried over deterministically

    std::vector<std::size_t> nodes(const Greg& greg) const {
        std::vector<std::size_t> out;
        for (std::size_t e : edges) {
            out.push_back(greg.edges[e].u);
            out.push_back(greg.edges[e].v);
        }
        std::sort(out.begin(), out.end());
        out.erase(std::unique(out.begin(), out.end()), out.end());
        return out;
    }

    double total_probability() const { return std::accumulate(edge_probability.begin(), edge_probability.end(), 0.0); }
};

/// Groups whose item sets differ between two interaction sets.
inline std::vector<char> changed_groups(std::size_t num_groups, std::span<const Event> previous,
                                        std::span<const Event> current) {
    std::vector<std::vector<std::size_t>> a(num_groups), b(num_groups);
    for (const auto& e : previous) a.at(e.group).push_back(e.item);
    for (const auto& e : current) b.at(e.group).push_back(e.item);
    std::vector<char> changed(num_groups, 0);
    for (std::size_t g = 0; g < num_groups; ++g) {
        std::sort(a[g].begin(), a[g].end());
        a[g].erase(std::unique(a[g].begin(), a[g].end()), a[g].end());
        std::sort(b[g].begin(), b[g].end());
        b[g].erase(std::unique(b[g].begin(), b[g].end()), b[g].end());
        changed[g] = a[g] != b[g];
    }
    return changed;
}

/// Among `candidates` with both endpoints in the previous subgraph and at
/// least one endpoint whose interactions changed, the `count` edges with the
/// largest endpoint degree sum (ties by (u, v)).
inline std::vector<std::size_t> sample_overlap(const Greg& greg, std::span<const std::size_t> candidates,
                                               const std::vector<char>& previous_nodes,
                                               const std::vector<char>& changed, std::size_t count) {
    std::vector<std::size_t> pool;
    for (std::size_t e : candidates) {
        const auto& edge = greg.edges[e];
        if (previous_nodes[edge.u] && previous_nodes[edge.v] && (changed[edge.u] || changed[edge.v])) {
            pool.push_back(e);
        }
    }
    std::sort(pool.begin(), pool.end(), [&](std::size_t a, std::size_t b) {
        const auto& ea = greg.edges[a];
        const auto& eb = greg.edges[b];
        const std::size_t da = greg.degree(ea.u) + greg.degree(ea.v);
        const std::size_t db = greg.degree(eb.u) + greg.degree(eb.v);
        if (da != db) return da > db;
        return std::tie(ea.u, ea.v) < std::tie(eb.u, eb.v);
    });
    if (pool.size() > count) pool.resize(count);
    std::sort(pool.begin(), pool.end());
    return pool;
}

inline std::vector<std::size_t> sample_overlap(const Greg& greg, std::span<const std::size_t> candidates,
                                               const SampledSubgraph& previous, std::span<const Event> r_prev,
                                               std::span<const Event> r_cur, double overlap_degree,
                                               std::size_t num_t) {
    std::vector<char> prev_nodes(greg.num_nodes, 0);
    for (std::size_t g : previous.nodes(greg)) prev_nodes[g] = 1;
    const auto changed = changed_groups(greg.num_nodes, r_prev, r_cur);
    const auto count = static_cast<std::size_t>(std::ceil(overlap_degree * static_cast<double>(num_t) - 1e-9));
    return sample_overlap(greg, candidates, prev_nodes, changed, count);
}

/// Fresh stratified sample of expected size `mass` from `pool`: each cluster
/// pair receives mass proportional to its share of the pool, spread by score.
inline SampledSubgraph stratified_sample(const Greg& greg, const EdgeSetPartition& partition,
                                         const std::vector<char>& in_pool, double mass,
                                         std::span<const Matrix> layers, ProbabilityMode mode,
                                         std::uint64_t seed) {
    SampledSubgraph s;
    s.edge_probability.assign(greg.edges.size(), 0.0);
    const auto pool_size = static_cast<double>(std::count(in_pool.begin(), in_pool.end(), 1));
    if (pool_size == 0 || mass <= 0) return s;
    mass = std::min(mass, pool_size);
    std::size_t stratum = 0;
    for (const auto& [pair, set] : partition.edge_sets) {
        std::vector<std::size_t> members;
        for (std::size_t e : set) {
            if (in_pool[e]) members.push_back(e);
        }
        const std::uint64_t stream = derive_seed(seed, stratum++);
        if (members.empty()) continue;
        const double share = mass * static_cast<double>(members.size()) / pool_size;
        const Vec p = mode == ProbabilityMode::exact ? optimal_probabilities(greg, members, layers, share)
                                                     : approximate_probabilities(greg, members, share);
        for (std::size_t i = 0; i < members.size(); ++i) s.edge_probability[members[i]] = p[i];
        for (std::size_t i : sample_edges(p, stream)) s.edges.push_back(members[i]);
    }
    std::sort(s.edges.begin(), s.edges.end());
    return s;
}

/// One subgraph per snapshot. The first is a fresh stratified sample; later
/// ones carry over ceil(delta_o num_t) overlap edges and draw the rest from
/// edges never sampled before, refilled with every non-overlap edge once it
/// can no longer carry the remaining mass.
inline std::vector<SampledSubgraph> run_ges(const TemporalSplit& split, const Greg& greg,
                                            const EdgeSetPartition& partition, const SamplerConfig& cfg,
                                            std::span<const Matrix> layers = {}) {
    cfg.validate();
    if (cfg.mode == ProbabilityMode::exact && layers.empty()) {
        throw InvalidConfig("exact probabilities need layer embeddings");
    }
    const std::size_t m = greg.edges.size();
    std::vector<SampledSubgraph> out;
    if (m == 0) {
        for (std::size_t t = 0; t < split.num_snapshots(); ++t) {
            out.emplace_back();
            out.back().time_index = t;
        }
        return out;
    }
    const std::size_t num_t = cfg.samples_for(m);
    std::vector<char> fresh(m, 1);
    std::vector<std::size_t> all(m);
    std::iota(all.begin(), all.end(), 0);
    for (std::size_t t = 0; t < split.num_snapshots(); ++t) {
        std::vector<std::size_t> overlap;
        if (t > 0) {
            overlap = sample_overlap(greg, all, out.back(), split.snapshots[t - 1], split.snapshots[t],
                                     cfg.overlap_degree, num_t);
        }
        std::vector<char> pool = fresh;
        for (std::size_t e : overlap) pool[e] = 0;
        const double mass = static_cast<double>(num_t) - static_cast<double>(overlap.size());
        if (static_cast<double>(std::count(pool.begin(), pool.end(), 1)) < mass) {
            pool.assign(m, 1);
            for (std::size_t e : overlap) pool[e] = 0;
        }
        SampledSubgraph s =
            stratified_sample(greg, partition, pool, mass, layers, cfg.mode, derive_seed(cfg.seed, 0x6E5 + t));
        s.time_index = t;
        for (std::size_t e : overlap) s.edge_probability[e] = 1.0;
        s.overlap = overlap;
        s.edges.insert(s.edges.end(), overlap.begin(), overlap.end());
        std::sort(s.edges.begin(), s.edges.end());
        for (std::size_t e : s.edges) fresh[e] = 0;
        out.push_back(std::move(s));
    }
    return out;
}

inline std::vector<SampledSubgraph> run_ges(const TemporalSplit& split, const Greg& greg, const Matrix& features,
                                            const SamplerConfig& cfg, std::span<const Matrix> layers = {}) {
    cfg.validate();
    const std::size_t k = std::min(cfg.num_clusters, std::max<std::size_t>(greg.num_nodes, 1));
    EdgeSetPartition partition;
    if (greg.num_nodes > 0) partition = cluster_nodes(greg, features, k, cfg.seed);
    return run_ges(split, greg, partition, cfg, layers);
}

// ---------------------------------------------------------------------------
// Estimators
// ---------------------------------------------------------------------------

/// p_v = 1 - prod over incident edges of (1 - p_e).
inline Vec node_probabilities(const Greg& greg, std::span<const double> edge_probability) {
    Vec keep(greg.num_nodes, 1.0);
    for (std::size_t e = 0; e < greg.edges.size(); ++e) {
        keep[greg.edges[e].u] *= 1.0 - edge_probability[e];
        keep[greg.edges[e].v] *= 1.0 - edge_probability[e];
    }
    for (double& x : keep) x = 1.0 - x;
    return keep;
}

struct Estimate {
    Vec theta;                       // sum_l sum_e b^l_e / p_e over sampled edges
    std::vector<Matrix> node_theta;  // per layer, theta^l_v for every node
};

/// Graph and node estimators for one sampling outcome. `sampled` holds the
/// selected edge indices; `edge_probability` the p_e of every edge.
inline Estimate estimator_value(const Greg& greg, std::span<const std::size_t> sampled,
                                std::span<const double> edge_probability, std::span<const Matrix> layers) {
    const Vec pv = node_probabilities(greg, edge_probability);
    Estimate est;
    const std::size_t d = layers.empty() ? 0 : layers[0].cols;
    est.theta.assign(d, 0.0);
    est.node_theta.assign(layers.size(), Matrix(greg.num_nodes, d));
    for (std::size_t e : sampled) {
        const double p = edge_probability[e];
        if (!(p > 0)) throw ZeroProbability("sampled edge with zero probability");
        const auto& edge = greg.edges[e];
        const double lhat = laplacian_norm(greg, edge);
        for (std::size_t l = 0; l < layers.size(); ++l) {
            const auto& x = layers[l];
            for (std::size_t i = 0; i < d; ++i) est.theta[i] += lhat * (x(edge.u, i) + x(edge.v, i)) / p;
            // theta_v gets L_uv / alpha_uv x_u with alpha_uv = p_uv / p_v
            axpy(lhat * pv[edge.v] / p, x.row(edge.u), est.node_theta[l].row(edge.v));
            axpy(lhat * pv[edge.u] / p, x.row(edge.v), est.node_theta[l].row(edge.u));
        }
    }
    return est;
}

inline Estimate estimator_value(const Greg& greg, const SampledSubgraph& s, std::span<const Matrix> layers) {
    return estimator_value(greg, s.edges, s.edge_probability, layers);
}

/// Trace of Var(theta) under independent sampling: sum_e ||B_e||^2 (1/p_e - 1).
inline double estimator_variance(std::span<const double> score_norm2, std::span<const double> probabilities) {
    double v = 0.0;
    for (std::size_t e = 0; e < score_norm2.size(); ++e) {
        if (score_norm2[e] == 0.0) continue;
        if (!(probabilities[e] > 0)) return std::numeric_limits<double>::infinity();
        v += score_norm2[e] * (1.0 / probabilities[e] - 1.0);
    }
    return v;
}

/// Propagation graph for training on a sample: nodes touched by sampled
/// edges, each neighbour weighted by L_uv / alpha_uv.
inline PropagationGraph estimator_graph(const Greg& greg, const SampledSubgraph& s) {
    const Vec pv = node_probabilities(greg, s.edge_probability);
    PropagationGraph pg;
    pg.num_nodes = greg.num_nodes;
    pg.neighbors.resize(greg.num_nodes);
    pg.active.assign(greg.num_nodes, 0);
    for (std::size_t e : s.edges) {
        const double p = s.edge_probability[e];
        if (!(p > 0)) throw ZeroProbability("sampled edge with zero probability");
        const auto& edge = greg.edges[e];
        const double lhat = laplacian_norm(greg, edge);
        pg.neighbors[edge.v].emplace_back(edge.u, lhat * pv[edge.v] / p);
        pg.neighbors[edge.u].emplace_back(edge.v, lhat * pv[edge.u] / p);
        pg.active[edge.u] = 1;
        pg.active[edge.v] = 1;
    }
    for (auto& nb : pg.neighbors) std::sort(nb.begin(), nb.end());
    return pg;
}

/// `t,src_group,dst_group,p_e` for the sampled edges, t counted from 1.
inline void write_subgraphs_csv(const std::vector<SampledSubgraph>& subgraphs, const Greg& greg,
                                const Catalog& catalog, std::ostream& out) {
    out << "t,src_group,dst_group,p_e\n";
    for (const auto& s : subgraphs) {
        for (std::size_t e : s.edges) {
            const auto& edge = greg.edges[e];
            out << s.time_index + 1 << ',' << catalog.group_id(edge.u) << ',' << catalog.group_id(edge.v) << ','
                << detail::format_double(s.edge_probability[e]) << '\n';
        }
    }
}

}  // namespace eigr
