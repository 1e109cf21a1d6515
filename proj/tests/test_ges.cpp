#include <gtest/gtest.h>

#include <cmath>
#include <set>
#include <sstream>

#include "eigr/ges.hpp"
#include "eigr/synthetic.hpp"

using namespace eigr;

namespace {

Greg random_graph(Rng& rng, std::size_t max_edges) {
    std::uniform_int_distribution<std::size_t> nodes(3, 7);
    const std::size_t n = nodes(rng);
    std::vector<GregEdge> all;
    for (std::size_t u = 0; u < n; ++u) {
        for (std::size_t v = u + 1; v < n; ++v) all.push_back({u, v, 1.0});
    }
    std::shuffle(all.begin(), all.end(), rng);
    std::uniform_int_distribution<std::size_t> count(1, std::min(max_edges, all.size()));
    all.resize(count(rng));
    return Greg::from_edges(n, all);
}

std::vector<Matrix> random_layers(Rng& rng, std::size_t n, std::size_t d, std::size_t layers) {
    std::vector<Matrix> out;
    for (std::size_t l = 0; l < layers; ++l) {
        Matrix x(n, d);
        for (double& v : x.data) v = sigmoid(std::normal_distribution<double>(0.0, 2.0)(rng));
        out.push_back(std::move(x));
    }
    return out;
}

Vec random_probabilities(Rng& rng, std::size_t m) {
    Vec p(m);
    for (double& x : p) x = std::uniform_real_distribution<double>(0.05, 1.0)(rng);
    return p;
}

// Sum over neighbours of x_u / sqrt(deg u deg v), walked from the edge list.
Matrix exact_aggregation(const Greg& g, const Matrix& x) {
    std::vector<std::size_t> deg(g.num_nodes, 0);
    for (const auto& e : g.edges) {
        ++deg[e.u];
        ++deg[e.v];
    }
    Matrix out(g.num_nodes, x.cols);
    for (const auto& e : g.edges) {
        const double c = 1.0 / std::sqrt(double(deg[e.u]) * double(deg[e.v]));
        for (std::size_t i = 0; i < x.cols; ++i) {
            out(e.v, i) += c * x(e.u, i);
            out(e.u, i) += c * x(e.v, i);
        }
    }
    return out;
}

struct Outcome {
    std::vector<std::size_t> edges;
    double probability = 1.0;
};

std::vector<Outcome> enumerate_outcomes(const Vec& p) {
    std::vector<Outcome> out;
    const std::size_t m = p.size();
    for (std::size_t mask = 0; mask < (std::size_t{1} << m); ++mask) {
        Outcome o;
        for (std::size_t e = 0; e < m; ++e) {
            if (mask >> e & 1) {
                o.edges.push_back(e);
                o.probability *= p[e];
            } else {
                o.probability *= 1.0 - p[e];
            }
        }
        out.push_back(std::move(o));
    }
    return out;
}

Vec score_norm2(const Greg& g, const std::vector<Matrix>& layers) {
    Vec out;
    for (std::size_t e = 0; e < g.edges.size(); ++e) {
        Vec total(layers[0].cols, 0.0);
        const double c = 1.0 / std::sqrt(double(g.degree(g.edges[e].u)) * double(g.degree(g.edges[e].v)));
        for (const auto& x : layers) {
            for (std::size_t i = 0; i < x.cols; ++i) total[i] += c * (x(g.edges[e].u, i) + x(g.edges[e].v, i));
        }
        double s = 0.0;
        for (double t : total) s += t * t;
        out.push_back(s);
    }
    return out;
}

// Total variance of theta over all outcomes, computed from the definition.
double enumerated_variance(const Greg& g, const Vec& p, const std::vector<Matrix>& layers) {
    const auto outcomes = enumerate_outcomes(p);
    const std::size_t d = layers[0].cols;
    Vec mean(d, 0.0), second(d, 0.0);
    for (const auto& o : outcomes) {
        const auto est = estimator_value(g, o.edges, p, layers);
        for (std::size_t i = 0; i < d; ++i) {
            mean[i] += o.probability * est.theta[i];
            second[i] += o.probability * est.theta[i] * est.theta[i];
        }
    }
    double v = 0.0;
    for (std::size_t i = 0; i < d; ++i) v += second[i] - mean[i] * mean[i];
    return v;
}

}  // namespace

TEST(EdgeScore, ZeroEmbeddingsGiveZero) {
    const Greg g = Greg::from_edges(3, {{0, 1, 1.0}, {1, 2, 1.0}});
    const std::vector<Matrix> layers{Matrix(3, 4), Matrix(3, 4)};
    const auto s = edge_score(g, 0, layers);
    EXPECT_EQ(s.per_layer.size(), 2u);
    EXPECT_EQ(s.norm, 0.0);
}

TEST(EdgeScore, SingleEdgeHasUnitNormalisation) {
    const Greg g = Greg::from_edges(2, {{0, 1, 1.0}});
    Matrix x(2, 2);
    x.data = {0.1, 0.2, 0.3, 0.4};
    const std::vector<Matrix> layers{x};
    const auto s = edge_score(g, 0, layers);
    EXPECT_DOUBLE_EQ(s.per_layer[0][0], 0.4);
    EXPECT_DOUBLE_EQ(s.per_layer[0][1], 0.6);
    EXPECT_NEAR(s.norm, std::sqrt(0.16 + 0.36), 1e-15);
}

TEST(EdgeScore, MatchesScalarOracle) {
    Rng rng(7);
    // 0-1, 0-2, 0-3, 2-3: degrees 3, 1, 2, 2
    const Greg g = Greg::from_edges(4, {{0, 1, 1.0}, {0, 2, 1.0}, {0, 3, 1.0}, {2, 3, 1.0}});
    const auto layers = random_layers(rng, 4, 3, 2);
    const std::size_t deg[4] = {3, 1, 2, 2};
    for (std::size_t e = 0; e < g.edges.size(); ++e) {
        const auto u = g.edges[e].u, v = g.edges[e].v;
        const double c = 1.0 / std::sqrt(double(deg[u] * deg[v]));
        const auto s = edge_score(g, e, layers);
        double n2 = 0.0;
        for (std::size_t i = 0; i < 3; ++i) {
            double total = 0.0;
            for (std::size_t l = 0; l < 2; ++l) {
                const double b = c * (layers[l](u, i) + layers[l](v, i));
                EXPECT_NEAR(s.per_layer[l][i], b, 1e-15);
                total += b;
            }
            EXPECT_NEAR(s.total[i], total, 1e-15);
            n2 += total * total;
        }
        EXPECT_NEAR(s.norm, std::sqrt(n2), 1e-14);
    }
}

TEST(EdgeScore, IsolatedEndpointThrows) {
    const Greg g = Greg::from_edges(3, {{0, 1, 1.0}});
    EXPECT_THROW(laplacian_norm(g, 0, 2), IsolatedEndpoint);
}

TEST(OptimalProbabilities, EqualScoresAreUniform) {
    const Vec scores(6, 2.5);
    for (double p : optimal_probabilities(scores, 2.0)) EXPECT_NEAR(p, 1.0 / 3.0, 1e-15);
}

TEST(OptimalProbabilities, ZeroScoreGetsZero) {
    const Vec scores{0.0, 1.0, 1.0, 1.0};
    const auto p = optimal_probabilities(scores, 1.0);
    EXPECT_EQ(p[0], 0.0);
    for (std::size_t i = 1; i < 4; ++i) EXPECT_NEAR(p[i], 1.0 / 3.0, 1e-15);
}

TEST(OptimalProbabilities, AllZeroFallsBackToUniform) {
    const Vec scores(4, 0.0);
    for (double p : optimal_probabilities(scores, 2.0)) EXPECT_DOUBLE_EQ(p, 0.5);
}

TEST(OptimalProbabilities, ClampsAndRedistributes) {
    const Vec scores{100.0, 1.0, 2.0, 1.0};
    const auto p = optimal_probabilities(scores, 2.0);
    EXPECT_DOUBLE_EQ(p[0], 1.0);
    EXPECT_NEAR(p[1], 0.25, 1e-15);
    EXPECT_NEAR(p[2], 0.5, 1e-15);
    EXPECT_NEAR(p[3], 0.25, 1e-15);
}

TEST(OptimalProbabilities, MassEqualsSampleCountAndCapsHold) {
    Rng rng(3);
    for (int trial = 0; trial < 50; ++trial) {
        Vec scores(12);
        for (double& s : scores) s = std::exp(std::normal_distribution<double>(0.0, 2.0)(rng));
        const double n_s = std::uniform_real_distribution<double>(0.5, 11.5)(rng);
        const auto p = optimal_probabilities(scores, n_s);
        double total = 0.0;
        for (double x : p) {
            EXPECT_GT(x, 0.0);
            EXPECT_LE(x, 1.0);
            total += x;
        }
        EXPECT_NEAR(total, n_s, 1e-9);
    }
}

TEST(OptimalProbabilities, RejectsTooLargeMass) {
    const Vec scores{1.0, 1.0};
    EXPECT_THROW(optimal_probabilities(scores, 3.0), InvalidConfig);
}

TEST(OptimalProbabilities, BeatsRandomSameMassVectors) {
    Rng rng(11);
    for (int graph = 0; graph < 20; ++graph) {
        const Greg g = random_graph(rng, 8);
        const auto layers = random_layers(rng, g.num_nodes, 3, 2);
        const Vec n2 = score_norm2(g, layers);
        Vec norms;
        for (double x : n2) norms.push_back(std::sqrt(x));
        const double n_s = std::max(1.0, std::floor(0.5 * double(n2.size())));
        const auto best = optimal_probabilities(norms, n_s);
        const double v_best = estimator_variance(n2, best);
        int compared = 0;
        while (compared < 100) {
            Vec q = random_probabilities(rng, n2.size());
            const double s = std::accumulate(q.begin(), q.end(), 0.0);
            bool ok = true;
            for (double& x : q) {
                x *= n_s / s;
                ok = ok && x <= 1.0;
            }
            if (!ok) continue;
            // the variance formula written out: sum B^2/p - sum B^2
            double v = 0.0;
            for (std::size_t e = 0; e < q.size(); ++e) v += n2[e] / q[e] - n2[e];
            EXPECT_LE(v_best, v + 1e-12);
            ++compared;
        }
    }
}

TEST(ApproximateProbabilities, TriangleIsUniform) {
    const Greg g = Greg::from_edges(3, {{0, 1, 1.0}, {1, 2, 1.0}, {0, 2, 1.0}});
    EXPECT_DOUBLE_EQ(laplacian_norm(g, g.edges[0]), 0.5);
    for (double p : approximate_probabilities(g, 2.0)) EXPECT_NEAR(p, 2.0 / 3.0, 1e-15);
}

TEST(ApproximateProbabilities, StarIsUniform) {
    const Greg g = Greg::from_edges(4, {{0, 1, 1.0}, {0, 2, 1.0}, {0, 3, 1.0}});
    for (const auto& e : g.edges) EXPECT_NEAR(laplacian_norm(g, e), 1.0 / std::sqrt(3.0), 1e-15);
    for (double p : approximate_probabilities(g, 1.0)) EXPECT_NEAR(p, 1.0 / 3.0, 1e-15);
}

TEST(ApproximateProbabilities, FollowsDegreeNormalisation) {
    // path 0-1-2-3: L = 1/sqrt2, 1/2, 1/sqrt2
    const Greg g = Greg::from_edges(4, {{0, 1, 1.0}, {1, 2, 1.0}, {2, 3, 1.0}});
    const double a = 1.0 / std::sqrt(2.0), b = 0.5, total = 2 * a + b;
    const auto p = approximate_probabilities(g, 1.5);
    EXPECT_NEAR(p[0], 1.5 * a / total, 1e-15);
    EXPECT_NEAR(p[1], 1.5 * b / total, 1e-15);
    EXPECT_NEAR(p[2], 1.5 * a / total, 1e-15);
}

TEST(ProbabilityBounds, SixEdgeGraphEnvelope) {
    Rng rng(5);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<GregEdge> edges{{0, 1, 1.0}, {1, 2, 1.0}, {2, 3, 1.0}, {3, 4, 1.0}, {0, 4, 1.0}, {1, 3, 1.0}};
        const Greg g = Greg::from_edges(5, edges);
        const std::size_t d = 4;
        const auto layers = random_layers(rng, 5, d, 2);
        const double n_s = 2.0;
        const auto bounds = probability_bounds(g, layers, n_s);
        // explicit p and p_hat without the sampler, both proportional and unclamped
        Vec lhat, x;
        double sum_l = 0, sum_lx = 0;
        for (std::size_t e = 0; e < g.edges.size(); ++e) {
            const auto u = g.edges[e].u, v = g.edges[e].v;
            lhat.push_back(1.0 / std::sqrt(double(g.degree(u) * g.degree(v))));
            double n2 = 0;
            for (std::size_t i = 0; i < d; ++i) {
                double s = 0;
                for (const auto& m : layers) s += m(u, i) + m(v, i);
                n2 += s * s;
            }
            x.push_back(std::sqrt(n2) / 4.0);
            sum_l += lhat.back();
            sum_lx += lhat.back() * x.back();
        }
        const double mean_x = sum_lx / sum_l;
        for (std::size_t e = 0; e < g.edges.size(); ++e) {
            EXPECT_NEAR(bounds.x_uv[e], x[e], 1e-12);
            const double p = n_s * lhat[e] * x[e] / sum_lx;
            const double ph = n_s * lhat[e] / sum_l;
            EXPECT_LE(bounds.lower[e], p + 1e-15);
            EXPECT_LE(p, bounds.upper[e] + 1e-15);
            EXPECT_LE(bounds.lower[e], ph + 1e-15);
            EXPECT_LE(ph, bounds.upper[e] + 1e-15);
            EXPECT_LE(std::abs(p - ph), bounds.error_bound_2[e] + 1e-15);
            if (x[e] <= mean_x) {
                EXPECT_LE(std::abs(p - ph), bounds.error_bound_1[e] + 1e-15);
            }
        }
    }
}

TEST(ProbabilityBounds, FirstErrorBoundFailsAboveTheMean) {
    // one heavy edge drives x_uv above the weighted mean, where bound 1 is not an upper bound
    const Greg g = Greg::from_edges(4, {{0, 1, 1.0}, {2, 3, 1.0}});
    Matrix x(4, 4);
    for (std::size_t i = 0; i < 4; ++i) {
        x(0, i) = x(1, i) = 0.9;
        x(2, i) = x(3, i) = 0.1;
    }
    const std::vector<Matrix> layers{x};
    const auto b = probability_bounds(g, layers, 1.0);
    const double p0 = b.x_uv[0] / (b.x_uv[0] + b.x_uv[1]);
    EXPECT_GT(std::abs(p0 - 0.5), b.error_bound_1[0]);
    EXPECT_LE(std::abs(p0 - 0.5), b.error_bound_2[0]);
}

TEST(SampleEdges, DegenerateProbabilities) {
    const Vec ones(20, 1.0), zeros(20, 0.0);
    EXPECT_EQ(sample_edges(ones, 1).size(), 20u);
    EXPECT_TRUE(sample_edges(zeros, 1).empty());
}

TEST(SampleEdges, BinomialCountAndDeterminism) {
    const Vec half(1000, 0.5);
    const auto a = sample_edges(half, 99);
    EXPECT_NEAR(double(a.size()), 500.0, 3.0 * std::sqrt(250.0));
    EXPECT_EQ(a, sample_edges(half, 99));
    EXPECT_NE(a, sample_edges(half, 100));
}

TEST(ClusterNodes, SingleClusterHoldsEveryEdge) {
    Rng rng(1);
    const Greg g = random_graph(rng, 10);
    Matrix f(g.num_nodes, 2);
    fill_uniform(f.data, -1, 1, rng);
    const auto p = cluster_nodes(g, f, 1, 1);
    ASSERT_EQ(p.edge_sets.size(), 1u);
    EXPECT_EQ(p.edge_sets.begin()->second.size(), g.edges.size());
}

TEST(ClusterNodes, NodeCountGivesSingletons) {
    Rng rng(2);
    const Greg g = random_graph(rng, 10);
    Matrix f(g.num_nodes, 3);
    fill_uniform(f.data, -1, 1, rng);
    const auto p = cluster_nodes(g, f, g.num_nodes, 4);
    std::set<std::size_t> distinct(p.cluster.begin(), p.cluster.end());
    EXPECT_EQ(distinct.size(), g.num_nodes);
    std::size_t total = 0;
    for (const auto& [pair, set] : p.edge_sets) {
        EXPECT_LT(pair.first, pair.second);
        EXPECT_EQ(set.size(), 1u);
        total += set.size();
    }
    EXPECT_EQ(total, g.edges.size());
}

TEST(ClusterNodes, SeparatesTwoBlobs) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(seed);
        const std::size_t n = 40;
        Matrix f(n, 2);
        std::vector<int> label(n);
        std::normal_distribution<double> noise(0.0, 0.3);
        for (std::size_t i = 0; i < n; ++i) {
            label[i] = int(i % 2);
            f(i, 0) = (label[i] ? 5.0 : -5.0) + noise(rng);
            f(i, 1) = noise(rng);
        }
        const Greg g = Greg::from_edges(n, {{0, 1, 1.0}});
        const auto p = cluster_nodes(g, f, 2, seed);
        for (std::size_t i = 0; i < n; ++i) {
            EXPECT_EQ(p.cluster[i] == p.cluster[0], label[i] == label[0]);
        }
    }
}

TEST(ClusterNodes, Deterministic) {
    Rng rng(8);
    const Greg g = random_graph(rng, 10);
    Matrix f(g.num_nodes, 3);
    fill_uniform(f.data, -1, 1, rng);
    EXPECT_EQ(cluster_nodes(g, f, 3, 5).cluster, cluster_nodes(g, f, 3, 5).cluster);
    EXPECT_THROW(cluster_nodes(g, f, g.num_nodes + 1, 5), InvalidConfig);
}

namespace {

// Hub 0 joined to 1..4, plus 1-2 and 3-5. Degrees: 0:4 1:2 2:2 3:2 4:1 5:1.
Greg overlap_graph() {
    return Greg::from_edges(
        6, {{0, 1, 1.0}, {0, 2, 1.0}, {0, 3, 1.0}, {0, 4, 1.0}, {1, 2, 1.0}, {3, 5, 1.0}});
}

SampledSubgraph all_of(const Greg& g) {
    SampledSubgraph s;
    for (std::size_t e = 0; e < g.edges.size(); ++e) s.edges.push_back(e);
    s.edge_probability.assign(g.edges.size(), 1.0);
    return s;
}

std::vector<std::size_t> every_edge(const Greg& g) {
    std::vector<std::size_t> v(g.edges.size());
    std::iota(v.begin(), v.end(), 0);
    return v;
}

}  // namespace

TEST(SampleOverlap, ZeroDegreeIsEmpty) {
    const Greg g = overlap_graph();
    const std::vector<Event> prev{{0, 0, 1, 1.0}}, cur{{0, 1, 2, 1.0}};
    EXPECT_TRUE(sample_overlap(g, every_edge(g), all_of(g), prev, cur, 0.0, 4).empty());
}

TEST(SampleOverlap, NoChangesIsEmpty) {
    const Greg g = overlap_graph();
    const std::vector<Event> prev{{0, 0, 1, 1.0}, {3, 2, 1, 1.0}};
    const std::vector<Event> cur{{0, 0, 5, 1.0}, {3, 2, 6, 1.0}};
    EXPECT_TRUE(sample_overlap(g, every_edge(g), all_of(g), prev, cur, 1.0, 4).empty());
}

TEST(SampleOverlap, HandRankedTopTwo) {
    const Greg g = overlap_graph();
    // groups 1 and 3 change; edges touching them: 0-1 (6), 0-3 (6), 1-2 (4), 3-5 (3)
    const std::vector<Event> prev{{1, 0, 1, 1.0}, {3, 0, 1, 1.0}};
    const std::vector<Event> cur{{1, 1, 2, 1.0}, {3, 1, 2, 1.0}};
    // ceil(0.5 * 3) = 2
    const auto picked = sample_overlap(g, every_edge(g), all_of(g), prev, cur, 0.5, 3);
    ASSERT_EQ(picked.size(), 2u);
    EXPECT_EQ(g.edges[picked[0]].u, 0u);
    EXPECT_EQ(g.edges[picked[0]].v, 1u);
    EXPECT_EQ(g.edges[picked[1]].u, 0u);
    EXPECT_EQ(g.edges[picked[1]].v, 3u);
}

TEST(SampleOverlap, RequiresBothEndpointsInPreviousSample) {
    const Greg g = overlap_graph();
    SampledSubgraph prev_sample;
    prev_sample.edges = {4};  // 1-2 only
    prev_sample.edge_probability.assign(g.edges.size(), 0.5);
    const std::vector<Event> prev{{1, 0, 1, 1.0}};
    const std::vector<Event> cur{{1, 1, 2, 1.0}};
    const auto picked = sample_overlap(g, every_edge(g), prev_sample, prev, cur, 1.0, 6);
    ASSERT_EQ(picked.size(), 1u);
    EXPECT_EQ(picked[0], 4u);
}

TEST(ChangedGroups, SymmetricDifference) {
    const std::vector<Event> prev{{0, 1, 1, 1.0}, {0, 2, 1, 1.0}, {1, 3, 1, 1.0}};
    const std::vector<Event> cur{{0, 2, 2, 1.0}, {0, 1, 3, 1.0}, {1, 4, 2, 1.0}, {2, 0, 2, 1.0}};
    const auto c = changed_groups(3, prev, cur);
    EXPECT_FALSE(c[0]);
    EXPECT_TRUE(c[1]);
    EXPECT_TRUE(c[2]);
}

namespace {

struct Corpus {
    Dataset ds;
    Catalog catalog;
    Greg greg;
    TemporalSplit split;
    Matrix features;
};

Corpus corpus(std::uint64_t seed, std::size_t groups, std::size_t snapshots) {
    SyntheticConfig sc;
    sc.num_groups = groups;
    sc.num_items = 30;
    sc.num_users = groups * 2;
    sc.num_topics = 2;
    sc.interactions_per_group = 9;
    sc.seed = seed;
    Corpus c;
    c.ds = generate_synthetic(sc);
    c.catalog = Catalog(c.ds);
    c.greg = build_greg(c.ds, c.catalog);
    c.split = split_temporal(c.ds, c.catalog, 0.8, snapshots);
    Rng rng(seed);
    c.features = Matrix(c.catalog.num_groups(), 3);
    fill_uniform(c.features.data, -1, 1, rng);
    return c;
}

}  // namespace

TEST(RunGes, SubgraphInvariants) {
    const auto c = corpus(3, 40, 3);
    ASSERT_GT(c.greg.edges.size(), 10u);
    SamplerConfig cfg;
    cfg.num_clusters = 4;
    const auto subs = run_ges(c.split, c.greg, c.features, cfg);
    ASSERT_EQ(subs.size(), 3u);
    const double num_t = std::ceil(0.5 * double(c.greg.edges.size()));
    for (std::size_t t = 0; t < subs.size(); ++t) {
        EXPECT_EQ(subs[t].time_index, t);
        EXPECT_NEAR(subs[t].total_probability(), num_t, 1e-9);
        for (std::size_t e : subs[t].edges) {
            EXPECT_GT(subs[t].edge_probability[e], 0.0);
            EXPECT_LE(subs[t].edge_probability[e], 1.0);
        }
        for (std::size_t e : subs[t].overlap) EXPECT_EQ(subs[t].edge_probability[e], 1.0);
        EXPECT_TRUE(std::is_sorted(subs[t].edges.begin(), subs[t].edges.end()));
    }
    EXPECT_TRUE(subs[0].overlap.empty());
    const auto again = run_ges(c.split, c.greg, c.features, cfg);
    for (std::size_t t = 0; t < subs.size(); ++t) EXPECT_EQ(again[t].edges, subs[t].edges);
}

TEST(RunGes, SingleSnapshotIsPlainDegreeSampling) {
    const auto c = corpus(4, 30, 1);
    SamplerConfig cfg;
    cfg.num_clusters = 1;
    const auto subs = run_ges(c.split, c.greg, c.features, cfg);
    ASSERT_EQ(subs.size(), 1u);
    const double n_s = std::ceil(0.5 * double(c.greg.edges.size()));
    const auto p = approximate_probabilities(c.greg, n_s);
    for (std::size_t e = 0; e < p.size(); ++e) EXPECT_NEAR(subs[0].edge_probability[e], p[e], 1e-12);
}

TEST(RunGes, UnchangedInteractionsFallBackToFreshSampling) {
    const Greg g = overlap_graph();
    TemporalSplit split;
    // identical item sets in both snapshots
    split.snapshots = {{{0, 0, 1, 1.0}, {1, 0, 2, 1.0}}, {{0, 0, 3, 1.0}, {1, 0, 4, 1.0}}};
    SamplerConfig cfg;
    cfg.num_clusters = 2;
    cfg.overlap_degree = 1.0;
    Matrix f(6, 2);
    Rng rng(2);
    fill_uniform(f.data, -1, 1, rng);
    const auto subs = run_ges(split, g, f, cfg);
    ASSERT_EQ(subs.size(), 2u);
    EXPECT_TRUE(subs[1].overlap.empty());
    EXPECT_NEAR(subs[1].total_probability(), 3.0, 1e-9);
}

TEST(RunGes, ExactModeNeedsLayers) {
    const auto c = corpus(5, 20, 2);
    SamplerConfig cfg;
    cfg.num_clusters = 2;
    cfg.mode = ProbabilityMode::exact;
    EXPECT_THROW(run_ges(c.split, c.greg, c.features, cfg), InvalidConfig);
    Rng rng(1);
    const auto layers = random_layers(rng, c.catalog.num_groups(), 3, 2);
    const auto subs = run_ges(c.split, c.greg, c.features, cfg, layers);
    EXPECT_NEAR(subs[0].total_probability(), std::ceil(0.5 * double(c.greg.edges.size())), 1e-9);
}

TEST(RunGes, ClusterPairFractionsTrackEdgeShares) {
    // dense 20-node graph
    std::vector<GregEdge> edges;
    Rng rng(21);
    std::bernoulli_distribution keep(0.7);
    for (std::size_t u = 0; u < 20; ++u) {
        for (std::size_t v = u + 1; v < 20; ++v) {
            if (keep(rng)) edges.push_back({u, v, 1.0});
        }
    }
    const Greg g = Greg::from_edges(20, edges);
    Matrix f(20, 2);
    for (std::size_t i = 0; i < 20; ++i) {
        f(i, 0) = i < 10 ? -3.0 : 3.0;
        f(i, 1) = std::uniform_real_distribution<double>(-0.1, 0.1)(rng);
    }
    TemporalSplit split;
    for (std::size_t t = 0; t < 3; ++t) {
        split.snapshots.push_back({});
        for (std::size_t grp = 0; grp < 20; ++grp) split.snapshots.back().push_back({grp, t, std::int64_t(t), 1.0});
    }
    SamplerConfig cfg;
    cfg.num_clusters = 2;
    const auto partition = cluster_nodes(g, f, 2, 9);
    const auto subs = run_ges(split, g, partition, cfg);
    const double n_e = double(g.edges.size());
    std::map<std::pair<std::size_t, std::size_t>, double> sampled;
    double total = 0;
    for (const auto& s : subs) {
        for (std::size_t e : s.edges) {
            std::size_t a = partition.cluster[g.edges[e].u], b = partition.cluster[g.edges[e].v];
            if (a > b) std::swap(a, b);
            sampled[{a, b}] += 1;
            total += 1;
        }
    }
    for (const auto& [pair, set] : partition.edge_sets) {
        if (set.size() < 10) continue;
        const double share = double(set.size()) / n_e;
        EXPECT_NEAR(sampled[pair] / total, share, 0.2 * share);
    }
    // expected fresh mass per pair is exactly proportional at t = 0
    for (const auto& [pair, set] : partition.edge_sets) {
        double mass = 0;
        for (std::size_t e : set) mass += subs[0].edge_probability[e];
        EXPECT_NEAR(mass, std::ceil(0.5 * n_e) * double(set.size()) / n_e, 1e-9);
    }
}

TEST(Estimator, FullSamplingIsExact) {
    Rng rng(4);
    const Greg g = random_graph(rng, 10);
    const auto layers = random_layers(rng, g.num_nodes, 3, 2);
    const Vec p(g.edges.size(), 1.0);
    const auto est = estimator_value(g, every_edge(g), p, layers);
    for (std::size_t l = 0; l < 2; ++l) {
        const Matrix exact = exact_aggregation(g, layers[l]);
        for (std::size_t i = 0; i < exact.data.size(); ++i) EXPECT_NEAR(est.node_theta[l].data[i], exact.data[i], 1e-12);
    }
}

TEST(Estimator, NothingSampledIsZero) {
    Rng rng(4);
    const Greg g = random_graph(rng, 10);
    const auto layers = random_layers(rng, g.num_nodes, 3, 2);
    const Vec p(g.edges.size(), 0.3);
    const auto est = estimator_value(g, std::vector<std::size_t>{}, p, layers);
    for (double x : est.theta) EXPECT_EQ(x, 0.0);
}

TEST(Estimator, ZeroProbabilityThrows) {
    const Greg g = Greg::from_edges(2, {{0, 1, 1.0}});
    const std::vector<Matrix> layers{Matrix(2, 2)};
    const Vec p{0.0};
    EXPECT_THROW(estimator_value(g, std::vector<std::size_t>{0}, p, layers), ZeroProbability);
}

namespace {

// Max deviation of E[theta_v | v sampled] and E[theta] from the exact values.
double unbiasedness_error(const Greg& g, const Vec& p, const std::vector<Matrix>& layers) {
    const auto outcomes = enumerate_outcomes(p);
    const std::size_t n = g.num_nodes, d = layers[0].cols;
    std::vector<Matrix> cond(layers.size(), Matrix(n, d));
    Vec pv(n, 0.0), theta(d, 0.0);
    for (const auto& o : outcomes) {
        std::vector<char> touched(n, 0);
        for (std::size_t e : o.edges) touched[g.edges[e].u] = touched[g.edges[e].v] = 1;
        for (std::size_t v = 0; v < n; ++v) {
            if (touched[v]) pv[v] += o.probability;
        }
        const auto est = estimator_value(g, o.edges, p, layers);
        for (std::size_t i = 0; i < d; ++i) theta[i] += o.probability * est.theta[i];
        for (std::size_t l = 0; l < layers.size(); ++l) {
            for (std::size_t k = 0; k < n * d; ++k) cond[l].data[k] += o.probability * est.node_theta[l].data[k];
        }
    }
    double worst = 0.0;
    const Vec pv_lib = node_probabilities(g, p);
    Vec theta_exact(d, 0.0);
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const Matrix exact = exact_aggregation(g, layers[l]);
        for (std::size_t v = 0; v < n; ++v) {
            if (pv[v] == 0) continue;
            worst = std::max(worst, std::abs(pv[v] - pv_lib[v]));
            for (std::size_t i = 0; i < d; ++i) {
                worst = std::max(worst, std::abs(cond[l](v, i) / pv[v] - exact(v, i)));
            }
        }
        for (const auto& e : g.edges) {
            const double c = 1.0 / std::sqrt(double(g.degree(e.u) * g.degree(e.v)));
            for (std::size_t i = 0; i < d; ++i) theta_exact[i] += c * (layers[l](e.u, i) + layers[l](e.v, i));
        }
    }
    for (std::size_t i = 0; i < d; ++i) worst = std::max(worst, std::abs(theta[i] - theta_exact[i]));
    return worst;
}

}  // namespace

TEST(Estimator, FourEdgeEnumerationIsUnbiased) {
    Rng rng(12);
    const Greg g = Greg::from_edges(4, {{0, 1, 1.0}, {1, 2, 1.0}, {2, 3, 1.0}, {0, 2, 1.0}});
    const auto layers = random_layers(rng, 4, 3, 2);
    EXPECT_LT(unbiasedness_error(g, random_probabilities(rng, 4), layers), 1e-9);
}

TEST(Estimator, UnbiasedOnRandomGraphs) {
    Rng rng(13);
    for (int graph = 0; graph < 20; ++graph) {
        const Greg g = random_graph(rng, 10);
        const auto layers = random_layers(rng, g.num_nodes, 3, 2);
        EXPECT_LT(unbiasedness_error(g, random_probabilities(rng, g.edges.size()), layers), 1e-9);
    }
}

TEST(Estimator, ClosedFormVarianceMatchesEnumeration) {
    Rng rng(14);
    for (int graph = 0; graph < 10; ++graph) {
        const Greg g = random_graph(rng, 8);
        const auto layers = random_layers(rng, g.num_nodes, 3, 2);
        const Vec p = random_probabilities(rng, g.edges.size());
        const double closed = estimator_variance(score_norm2(g, layers), p);
        EXPECT_NEAR(closed, enumerated_variance(g, p, layers), 1e-9 * std::max(1.0, closed));
    }
}

TEST(Estimator, VarianceIsAdditiveOverDisjointPools) {
    Rng rng(15);
    for (int graph = 0; graph < 10; ++graph) {
        const Greg g = random_graph(rng, 8);
        const auto layers = random_layers(rng, g.num_nodes, 3, 2);
        const Vec p = random_probabilities(rng, g.edges.size());
        // first half of the edges form the overlap pool, the rest the fresh pool
        const std::size_t split = g.edges.size() / 2;
        Vec p_overlap = p, p_fresh = p;
        for (std::size_t e = 0; e < g.edges.size(); ++e) (e < split ? p_fresh : p_overlap)[e] = 1.0;
        // an edge certain to be drawn has no variance; it only shifts theta
        const double joint = enumerated_variance(g, p, layers);
        const double parts = enumerated_variance(g, p_overlap, layers) + enumerated_variance(g, p_fresh, layers);
        EXPECT_NEAR(joint, parts, 1e-9 * std::max(1.0, joint));
    }
}

TEST(EstimatorGraph, FullSamplingMatchesNormalisedGraph) {
    Rng rng(16);
    const Greg g = random_graph(rng, 10);
    const auto full = PropagationGraph::full(g);
    SampledSubgraph s = all_of(g);
    const auto pg = estimator_graph(g, s);
    for (std::size_t v = 0; v < g.num_nodes; ++v) {
        ASSERT_EQ(pg.neighbors[v].size(), full.neighbors[v].size());
        for (std::size_t k = 0; k < pg.neighbors[v].size(); ++k) {
            EXPECT_EQ(pg.neighbors[v][k].first, full.neighbors[v][k].first);
            EXPECT_NEAR(pg.neighbors[v][k].second, full.neighbors[v][k].second, 1e-15);
        }
        EXPECT_EQ(pg.active[v], g.degree(v) > 0 ? 1 : 0);
    }
}

TEST(EstimatorGraph, ReweightsByNodeProbability) {
    const Greg g = Greg::from_edges(3, {{0, 1, 1.0}, {1, 2, 1.0}});
    SampledSubgraph s;
    s.edges = {0};
    s.edge_probability = {0.5, 0.25};
    const auto pg = estimator_graph(g, s);
    // p_1 = 1 - 0.5 * 0.75, p_0 = 0.5, L = 1/sqrt2
    const double l = 1.0 / std::sqrt(2.0);
    ASSERT_EQ(pg.neighbors[1].size(), 1u);
    EXPECT_NEAR(pg.neighbors[1][0].second, l * 0.625 / 0.5, 1e-15);
    EXPECT_NEAR(pg.neighbors[0][0].second, l * 0.5 / 0.5, 1e-15);
    EXPECT_EQ(pg.active[2], 0);
    EXPECT_EQ(pg.active_count(), 2u);
}

TEST(Export, SubgraphCsv) {
    const Catalog cat({"a", "b", "c"}, {"x"});
    const Greg g = Greg::from_edges(3, {{0, 1, 1.0}, {1, 2, 1.0}});
    SampledSubgraph s;
    s.time_index = 1;
    s.edges = {1};
    s.edge_probability = {0.5, 0.25};
    std::ostringstream out;
    write_subgraphs_csv({s}, g, cat, out);
    EXPECT_EQ(out.str(), "t,src_group,dst_group,p_e\n2," + cat.group_id(1) + "," + cat.group_id(2) + ",0.25\n");
}
