#pragma once

#include <cstdint>
#include <ostream>
#include <span>
#include <vector>

#include "eigr/common.hpp"
#include "eigr/ingest.hpp"

namespace eigr {

enum class ThresholdMode { stochastic, fixed };

struct PropagationParams {
    double gamma_1 = 0.1;
    double gamma_2 = 0.7;
    std::size_t recent_window = 1;  // snapshots counted as recent
    std::size_t replications = 200;
    ThresholdMode threshold_mode = ThresholdMode::stochastic;
    double tau = 0.5;  // used in fixed mode
    std::uint64_t seed = 42;
    bool use_similarity = true;   // ablation switches; the gamma weights are kept
    bool use_willingness = true;

    void validate() const {
        if (!(gamma_1 >= 0 && gamma_2 >= 0 && gamma_1 + gamma_2 <= 1 + 1e-12)) {
            throw InvalidConfig("gamma weights must be nonnegative with sum at most 1");
        }
        if (replications == 0) throw InvalidConfig("replications must be positive");
        if (threshold_mode == ThresholdMode::fixed && !(tau >= 0 && tau <= 1)) {
            throw InvalidConfig("tau must lie in [0,1]");
        }
    }
};

// ---------------------------------------------------------------------------
// Factors
// ---------------------------------------------------------------------------

inline double activeness_ratio(std::size_t recent, std::size_t total) {
    return total == 0 ? 0.0 : static_cast<double>(recent) / static_cast<double>(total);
}

struct ActivityCounts {
    std::vector<std::size_t> recent;
    std::vector<std::size_t> total;
};

/// Per-group interaction counts over the training snapshots and over the last
/// `recent_window` of them.
inline ActivityCounts activity_counts(const TemporalSplit& split, std::size_t num_groups, std::size_t recent_window) {
    ActivityCounts c{std::vector<std::size_t>(num_groups, 0), std::vector<std::size_t>(num_groups, 0)};
    const std::size_t t_count = split.num_snapshots();
    const std::size_t first_recent = t_count > recent_window ? t_count - recent_window : 0;
    for (std::size_t t = 0; t < t_count; ++t) {
        for (const auto& e : split.snapshots[t]) {
            ++c.total.at(e.group);
            if (t >= first_recent) ++c.recent[e.group];
        }
    }
    return c;
}

inline double activeness(std::size_t group, const TemporalSplit& split, std::size_t recent_window) {
    std::size_t recent = 0, total = 0;
    const std::size_t t_count = split.num_snapshots();
    const std::size_t first_recent = t_count > recent_window ? t_count - recent_window : 0;
    for (std::size_t t = 0; t < t_count; ++t) {
        for (const auto& e : split.snapshots[t]) {
            if (e.group != group) continue;
            ++total;
            if (t >= first_recent) ++recent;
        }
    }
    return activeness_ratio(recent, total);
}

inline double cosine_similarity(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw DimensionMismatch("similarity inputs differ in width");
    const double na = norm(a), nb = norm(b);
    if (na == 0.0 || nb == 0.0) throw ZeroVector("cosine similarity of a zero vector");
    return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

/// Cosine mapped into [0,1] by (1 + cos) / 2.
inline double similarity(std::span<const double> a, std::span<const double> b) {
    return 0.5 * (1.0 + cosine_similarity(a, b));
}

inline double raw_willingness(std::span<const double> item, std::span<const double> group) {
    if (item.size() != group.size()) throw DimensionMismatch("willingness inputs differ in width");
    return dot(item, group);
}

inline double willingness(std::span<const double> item, std::span<const double> group) {
    return sigmoid(raw_willingness(item, group));
}

// ---------------------------------------------------------------------------
// Propagation graph
// ---------------------------------------------------------------------------

struct DiiprogEdge {
    std::size_t dst = 0;
    double similarity = 0.0;  // mapped to [0,1]
    double probability = 0.0;
};

/// Directed item-conditioned propagation graph. Each GREG edge appears in both
/// directions.
struct Diiprog {
    std::size_t item = 0;
    std::vector<std::vector<DiiprogEdge>> out;
    Vec activeness;
    Vec willingness;
    std::vector<std::size_t> recent;
    std::vector<std::size_t> total;
    double gamma_1 = 0.1;
    double gamma_2 = 0.7;
    bool use_similarity = true;
    bool use_willingness = true;

    std::size_t num_nodes() const { return out.size(); }

    std::size_t num_edges() const {
        std::size_t n = 0;
        for (const auto& o : out) n += o.size();
        return n;
    }

    double edge_probability(std::size_t i, const DiiprogEdge& e) const {
        const double wi = use_willingness ? willingness[i] : 0.0;
        const double wj = use_willingness ? willingness[e.dst] : 0.0;
        const double sim = use_similarity ? e.similarity : 0.0;
        return std::clamp(gamma_1 * activeness[i] * wi + gamma_2 * sim + (1.0 - gamma_1 - gamma_2) * wj, 0.0, 1.0);
    }

    void refresh_node(std::size_t g) {
        for (auto& e : out[g]) e.probability = edge_probability(g, e);
        for (const auto& e : out[g]) {
            for (auto& back : out[e.dst]) {
                if (back.dst == g) back.probability = edge_probability(e.dst, back);
            }
        }
    }

    bool operator==(const Diiprog& o) const {
        if (item != o.item || activeness != o.activeness || willingness != o.willingness || out.size() != o.out.size()) {
            return false;
        }
        for (std::size_t i = 0; i < out.size(); ++i) {
            if (out[i].size() != o.out[i].size()) return false;
            for (std::size_t k = 0; k < out[i].size(); ++k) {
                const auto& a = out[i][k];
                const auto& b = o.out[i][k];
                if (a.dst != b.dst || a.similarity != b.similarity || a.probability != b.probability) return false;
            }
        }
        return true;
    }
};

/// Builds the graph for one item embedding over all group embeddings.
inline Diiprog build_diiprog(const Greg& greg, const Matrix& group_embedding, std::span<const double> item_embedding,
                             std::size_t item, const PropagationParams& params, const ActivityCounts& counts) {
    params.validate();
    if (group_embedding.rows != greg.num_nodes) throw DimensionMismatch("one embedding row per group required");
    Diiprog g;
    g.item = item;
    g.gamma_1 = params.gamma_1;
    g.gamma_2 = params.gamma_2;
    g.use_similarity = params.use_similarity;
    g.use_willingness = params.use_willingness;
    g.recent = counts.recent;
    g.total = counts.total;
    g.out.resize(greg.num_nodes);
    g.activeness.resize(greg.num_nodes);
    g.willingness.resize(greg.num_nodes);
    for (std::size_t i = 0; i < greg.num_nodes; ++i) {
        g.activeness[i] = activeness_ratio(g.recent[i], g.total[i]);
        g.willingness[i] = willingness(item_embedding, group_embedding.row(i));
    }
    for (const auto& e : greg.edges) {
        const double sim = similarity(group_embedding.row(e.u), group_embedding.row(e.v));
        g.out[e.u].push_back({e.v, sim, 0.0});
        g.out[e.v].push_back({e.u, sim, 0.0});
    }
    for (std::size_t i = 0; i < greg.num_nodes; ++i) {
        std::sort(g.out[i].begin(), g.out[i].end(), [](const auto& a, const auto& b) { return a.dst < b.dst; });
        for (auto& e : g.out[i]) e.probability = g.edge_probability(i, e);
    }
    return g;
}

inline Diiprog build_diiprog(const Greg& greg, const Matrix& group_embedding, std::span<const double> item_embedding,
                             std::size_t item, const PropagationParams& params, const TemporalSplit& split) {
    return build_diiprog(greg, group_embedding, item_embedding, item, params,
                         activity_counts(split, greg.num_nodes, params.recent_window));
}

/// Each listed group gains one recent interaction with the item: its
/// activeness is recomputed, its willingness set to 1 and its incident edges
/// refreshed in both directions.
inline void update_diiprog(Diiprog& graph, std::span<const std::size_t> new_groups) {
    for (std::size_t g : new_groups) {
        if (g >= graph.num_nodes()) throw UnknownGroup("group index " + std::to_string(g));
        ++graph.recent[g];
        ++graph.total[g];
        graph.activeness[g] = activeness_ratio(graph.recent[g], graph.total[g]);
        graph.willingness[g] = 1.0;
        graph.refresh_node(g);
    }
}

// ---------------------------------------------------------------------------
// Cascades
// ---------------------------------------------------------------------------

/// One DYIC cascade from `seeds`. Round r first applies `stream[r]` (if any)
/// to the graph and merges those groups into the active set, then every group
/// activated in the previous round tries each inactive out-neighbour once.
/// Returns the number of active groups, seeds included.
inline std::size_t dyic_simulate(Diiprog graph, std::span<const std::size_t> seeds,
                                 std::span<const std::vector<std::size_t>> stream, const PropagationParams& params,
                                 Rng& rng) {
    const std::size_t n = graph.num_nodes();
    std::vector<char> active(n, 0);
    std::vector<std::size_t> frontier;
    for (std::size_t s : seeds) {
        if (s >= n) throw UnknownGroup("seed index " + std::to_string(s));
        if (!active[s]) {
            active[s] = 1;
            frontier.push_back(s);
        }
    }
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::size_t count = frontier.size();
    for (std::size_t round = 0; !frontier.empty(); ++round) {
        if (round < stream.size()) {
            update_diiprog(graph, stream[round]);
            for (std::size_t g : stream[round]) {
                if (!active[g]) {
                    active[g] = 1;
                    ++count;
                    frontier.push_back(g);
                }
            }
        }
        std::vector<std::size_t> next;
        for (std::size_t j : frontier) {
            for (const auto& e : graph.out[j]) {
                if (active[e.dst]) continue;
                const double tau = params.threshold_mode == ThresholdMode::stochastic ? unit(rng) : params.tau;
                if (e.probability > tau) {
                    active[e.dst] = 1;
                    ++count;
                    next.push_back(e.dst);
                }
            }
        }
        frontier = std::move(next);
    }
    return count;
}

inline std::size_t dyic_simulate(const Diiprog& graph, std::size_t seed, const PropagationParams& params, Rng& rng) {
    const std::size_t seeds[] = {seed};
    return dyic_simulate(graph, seeds, {}, params, rng);
}

/// Spread of every replication on a static graph; replication r uses its own
/// stream derived from (params.seed, stream_id, r).
inline std::vector<std::size_t> simulate_replications(const Diiprog& graph, std::span<const std::size_t> seeds,
                                                      const PropagationParams& params, std::uint64_t stream_id) {
    params.validate();
    std::vector<std::size_t> spreads;
    spreads.reserve(params.replications);
    const std::uint64_t base = derive_seed(params.seed, stream_id);
    for (std::size_t r = 0; r < params.replications; ++r) {
        Rng rng(derive_seed(base, r));
        spreads.push_back(dyic_simulate(graph, seeds, {}, params, rng));
    }
    return spreads;
}

/// Mean normalised spread with `group` as the only seed.
inline double influence_score(const Diiprog& graph, std::size_t group, const PropagationParams& params) {
    const std::size_t seeds[] = {group};
    const auto spreads = simulate_replications(graph, seeds, params, 0x1F5000 + group);
    double total = 0.0;
    for (std::size_t s : spreads) total += static_cast<double>(s);
    return total / (static_cast<double>(spreads.size()) * static_cast<double>(graph.num_nodes()));
}

inline Vec influence_scores(const Diiprog& graph, const PropagationParams& params) {
    Vec out(graph.num_nodes());
    for (std::size_t g = 0; g < out.size(); ++g) out[g] = influence_score(graph, g, params);
    return out;
}

/// Mean over items of the normalised spread of each item's recommended seed set.
inline double sigma_inf(std::span<const std::vector<std::size_t>> recommendations, std::span<const Diiprog> graphs,
                        const PropagationParams& params) {
    if (recommendations.size() != graphs.size()) throw DimensionMismatch("one graph per recommendation list");
    if (recommendations.empty()) return 0.0;
    double total = 0.0;
    for (std::size_t i = 0; i < graphs.size(); ++i) {
        const auto spreads = simulate_replications(graphs[i], recommendations[i], params, 0x516A00 + i);
        double mean = 0.0;
        for (std::size_t s : spreads) mean += static_cast<double>(s);
        total += mean / (static_cast<double>(spreads.size()) * static_cast<double>(graphs[i].num_nodes()));
    }
    return total / static_cast<double>(graphs.size());
}

/// `src,dst,probability` for every directed edge.
inline void write_diiprog_csv(const Diiprog& graph, const Catalog& catalog, std::ostream& out) {
    out << "src,dst,probability\n";
    for (std::size_t i = 0; i < graph.num_nodes(); ++i) {
        for (const auto& e : graph.out[i]) {
            out << catalog.group_id(i) << ',' << catalog.group_id(e.dst) << ','
                << detail::format_double(e.probability) << '\n';
        }
    }
}

/// `seed_group,replication,spread` with replications counted from 1.
inline void write_simulation_csv(const std::string& seed_group, std::span<const std::size_t> spreads,
                                 std::ostream& out, bool header = true) {
    if (header) out << "seed_group,replication,spread\n";
    for (std::size_t r = 0; r < spreads.size(); ++r) out << seed_group << ',' << r + 1 << ',' << spreads[r] << '\n';
}

}  // namespace eigr
