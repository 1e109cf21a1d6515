#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "eigr/ggcn.hpp"

using namespace eigr;

namespace {

GgcnConfig small_config(std::uint64_t seed = 1) {
    GgcnConfig cfg;
    cfg.embed_dim = 8;
    cfg.latent_dim = 3;
    cfg.attr_dim = 2;
    cfg.num_layers = 2;
    cfg.seed = seed;
    cfg.lambda = 0.0;
    return cfg;
}

Matrix random_matrix(std::size_t r, std::size_t c, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
    Rng rng(seed);
    Matrix m(r, c);
    fill_uniform(m.data, lo, hi, rng);
    return m;
}

Greg path_graph(std::size_t n) {
    std::vector<GregEdge> e;
    for (std::size_t i = 0; i + 1 < n; ++i) e.push_back({i, i + 1, 1.0});
    return Greg::from_edges(n, e);
}

Greg ring_with_chord(std::size_t n) {
    std::vector<GregEdge> e;
    for (std::size_t i = 0; i < n; ++i) e.push_back({i, (i + 1) % n, 1.0});
    e.push_back({0, n / 2, 1.0});
    return Greg::from_edges(n, e);
}

// Model with d=8 over `ng` groups and `ni` items, latents scaled up so
// gradients are not vanishingly small.
ModelState random_model(std::size_t ng, std::size_t ni, std::uint64_t seed, std::size_t layers = 2) {
    auto cfg = small_config(seed);
    cfg.num_layers = layers;
    auto s = make_model(cfg, random_matrix(ng, 2, seed + 100), random_matrix(ni, 2, seed + 200));
    Rng rng(seed + 300);
    fill_uniform(s.params.group_latent.data, -1.0, 1.0, rng);
    fill_uniform(s.params.item_latent.data, -1.0, 1.0, rng);
    fill_uniform(s.params.group_init_bias, -0.5, 0.5, rng);
    fill_uniform(s.params.item_init_bias, -0.5, 0.5, rng);
    std::vector<Event> hist, recent;
    for (std::size_t g = 0; g < ng; ++g) {
        hist.push_back({g, g % ni, 0, 1.0});
        hist.push_back({g, (g + 2) % ni, 0, 1.0});
        recent.push_back({g, (g + 1) % ni, 0, 1.0});
    }
    set_history(s, hist);
    set_recent_groups(s, recent);
    return s;
}

// --- straight-line oracle --------------------------------------------------

using V = std::vector<double>;

double sig(double x) { return 1.0 / (1.0 + std::exp(-x)); }

V affine_sigmoid(const Matrix& w, const V& in, const V* bias) {
    V out(w.rows);
    for (std::size_t r = 0; r < w.rows; ++r) {
        double z = bias ? (*bias)[r] : 0.0;
        for (std::size_t c = 0; c < w.cols; ++c) z += w.data[r * w.cols + c] * in[c];
        out[r] = sig(z);
    }
    return out;
}

struct Oracle {
    std::vector<V> eg;
    std::vector<V> e0v;
    std::vector<V> ev;
};

Oracle oracle_forward(const ModelState& s, const Greg& greg) {
    Oracle o;
    const std::size_t ng = s.num_groups(), ni = s.num_items(), d = s.embed_dim;
    std::vector<V> cur(ng);
    for (std::size_t g = 0; g < ng; ++g) {
        V in;
        for (std::size_t k = 0; k < s.latent_dim; ++k) in.push_back(s.params.group_latent(g, k));
        for (std::size_t k = 0; k < s.attr_dim; ++k) in.push_back(s.group_attr(g, k));
        cur[g] = affine_sigmoid(s.params.group_init_weight, in, &s.params.group_init_bias);
    }
    for (std::size_t l = 0; l < s.num_layers; ++l) {
        std::vector<V> next(ng);
        for (std::size_t g = 0; g < ng; ++g) {
            V agg(d, 0.0);
            for (std::size_t n : greg.adjacency[g]) {
                const double c = 1.0 / std::sqrt(double(greg.adjacency[g].size()) * double(greg.adjacency[n].size()));
                for (std::size_t i = 0; i < d; ++i) agg[i] += c * cur[n][i];
            }
            V in = cur[g];
            in.insert(in.end(), agg.begin(), agg.end());
            next[g] = affine_sigmoid(s.params.layer_weights[l], in, nullptr);
        }
        cur = next;
    }
    o.eg = cur;
    for (std::size_t v = 0; v < ni; ++v) {
        V in;
        for (std::size_t k = 0; k < s.latent_dim; ++k) in.push_back(s.params.item_latent(v, k));
        for (std::size_t k = 0; k < s.attr_dim; ++k) in.push_back(s.item_attr(v, k));
        V e0 = affine_sigmoid(s.params.item_init_weight, in, &s.params.item_init_bias);
        V ev = e0;
        const auto& rg = s.recent_groups[v];
        if (!rg.empty()) {
            for (std::size_t i = 0; i < d; ++i) {
                double m = 0.0;
                for (std::size_t g : rg) m += cur[g][i];
                ev[i] = s.alpha_v * e0[i] + (1.0 - s.alpha_v) * m / double(rg.size());
            }
        }
        o.e0v.push_back(e0);
        o.ev.push_back(ev);
    }
    return o;
}

double oracle_score(const ModelState& s, const Oracle& o, std::size_t g, std::size_t v, double alpha_r, double infl) {
    V h = o.eg[g];
    const auto& hist = s.history[g];
    for (std::size_t u : hist) {
        for (std::size_t i = 0; i < h.size(); ++i) h[i] += o.ev[u][i] / std::sqrt(double(hist.size()));
    }
    double x = 0.0;
    for (std::size_t i = 0; i < h.size(); ++i) x += o.ev[v][i] * h[i];
    return (1.0 - alpha_r) * x + alpha_r * infl;
}

void expect_rows_near(const Matrix& m, const std::vector<V>& rows, double tol) {
    ASSERT_EQ(m.rows, rows.size());
    for (std::size_t r = 0; r < m.rows; ++r) {
        for (std::size_t c = 0; c < m.cols; ++c) EXPECT_NEAR(m(r, c), rows[r][c], tol) << r << "," << c;
    }
}

}  // namespace

// ---------------------------------------------------------------------------

TEST(InitEmbeddings, ZeroWeightsGiveOneHalf) {
    auto s = random_model(4, 3, 5);
    s.params.group_init_weight.fill(0.0);
    std::fill(s.params.group_init_bias.begin(), s.params.group_init_bias.end(), 0.0);
    init_embeddings(s, path_graph(4));
    for (double x : s.group_embedding.data) EXPECT_DOUBLE_EQ(x, 0.5);
}

TEST(InitEmbeddings, IdenticalInputsIdenticalOutputs) {
    auto s = random_model(3, 3, 6);
    for (std::size_t k = 0; k < s.latent_dim; ++k) s.params.group_latent(2, k) = s.params.group_latent(0, k);
    for (std::size_t k = 0; k < s.attr_dim; ++k) s.group_attr(2, k) = s.group_attr(0, k);
    init_embeddings(s, path_graph(3));
    for (std::size_t i = 0; i < s.embed_dim; ++i) EXPECT_EQ(s.group_embedding(0, i), s.group_embedding(2, i));
}

TEST(InitEmbeddings, MatchesOracleOnThreeGroups) {
    auto s = random_model(3, 4, 7);
    s.num_layers = 0;
    const auto o = oracle_forward(s, path_graph(3));
    init_embeddings(s, path_graph(3));
    expect_rows_near(s.group_embedding, o.eg, 1e-12);
    expect_rows_near(s.item_initial, o.e0v, 1e-12);
}

TEST(InitEmbeddings, DimensionMismatch) {
    auto s = random_model(3, 3, 8);
    s.params.group_init_weight = Matrix(s.embed_dim, 4);
    EXPECT_THROW(init_embeddings(s, path_graph(3)), DimensionMismatch);
}

TEST(Propagate, ZeroLayersIsIdentity) {
    auto s = random_model(4, 3, 9, 0);
    const auto greg = path_graph(4);
    const auto layers = layer_embeddings(s, greg);
    ASSERT_EQ(layers.size(), 1u);
    propagate(s, greg);
    EXPECT_EQ(s.group_embedding, layers[0]);
}

TEST(Propagate, IsolatedNodeUsesZeroAggregate) {
    auto s = random_model(1, 2, 10, 1);
    const Greg greg = Greg::from_edges(1, {});
    const auto layers = layer_embeddings(s, greg);
    V in(layers[0].row(0).begin(), layers[0].row(0).end());
    in.resize(2 * s.embed_dim, 0.0);
    const V expected = affine_sigmoid(s.params.layer_weights[0], in, nullptr);
    for (std::size_t i = 0; i < s.embed_dim; ++i) EXPECT_NEAR(layers[1](0, i), expected[i], 1e-14);
}

TEST(Propagate, PathGraphMatchesOracle) {
    for (std::uint64_t seed : {11u, 12u, 13u}) {
        auto s = random_model(3, 4, seed, 2);
        const auto greg = path_graph(3);
        const auto o = oracle_forward(s, greg);
        propagate(s, greg);
        expect_rows_near(s.group_embedding, o.eg, 1e-12);
        expect_rows_near(s.item_embedding, o.ev, 1e-12);
    }
}

TEST(Propagate, OutputsInUnitInterval) {
    auto s = random_model(6, 5, 14, 3);
    propagate(s, ring_with_chord(6));
    for (double x : s.group_embedding.data) {
        EXPECT_GT(x, 0.0);
        EXPECT_LT(x, 1.0);
    }
    for (double x : s.item_initial.data) {
        EXPECT_GT(x, 0.0);
        EXPECT_LT(x, 1.0);
    }
}

// ---------------------------------------------------------------------------

TEST(UpdateItemEmbedding, AlphaOneKeepsInitial) {
    auto s = random_model(3, 3, 15);
    s.alpha_v = 1.0;
    propagate(s, path_graph(3));
    const auto ev = update_item_embedding(s, 1);
    for (std::size_t i = 0; i < s.embed_dim; ++i) EXPECT_DOUBLE_EQ(ev[i], s.item_initial(1, i));
}

TEST(UpdateItemEmbedding, AlphaZeroSingleGroupCopiesGroup) {
    auto s = random_model(3, 3, 16);
    s.alpha_v = 0.0;
    s.recent_groups[0] = {2};
    propagate(s, path_graph(3));
    const auto ev = update_item_embedding(s, 0);
    for (std::size_t i = 0; i < s.embed_dim; ++i) EXPECT_DOUBLE_EQ(ev[i], s.group_embedding(2, i));
}

TEST(UpdateItemEmbedding, DefaultAlphaTwoGroups) {
    auto s = random_model(3, 3, 17);
    ASSERT_DOUBLE_EQ(s.alpha_v, 0.8);
    s.recent_groups[0] = {0, 2};
    propagate(s, path_graph(3));
    const auto ev = update_item_embedding(s, 0);
    for (std::size_t i = 0; i < s.embed_dim; ++i) {
        const double expected =
            0.8 * s.item_initial(0, i) + 0.1 * (s.group_embedding(0, i) + s.group_embedding(2, i));
        EXPECT_NEAR(ev[i], expected, 1e-15);
        EXPECT_NEAR(s.item_embedding(0, i), expected, 1e-15);
    }
    EXPECT_THROW(update_item_embedding(s, 3), UnknownItem);
}

TEST(UpdateItemEmbedding, ConvexCombination) {
    for (std::uint64_t seed = 20; seed < 30; ++seed) {
        auto s = random_model(5, 4, seed);
        s.alpha_v = double(seed - 20) / 9.0;
        s.recent_groups[1] = {0, 1, 3};
        propagate(s, ring_with_chord(5));
        const auto ev = update_item_embedding(s, 1);
        for (std::size_t i = 0; i < s.embed_dim; ++i) {
            double lo = s.item_initial(1, i), hi = lo;
            for (std::size_t g : s.recent_groups[1]) {
                lo = std::min(lo, s.group_embedding(g, i));
                hi = std::max(hi, s.group_embedding(g, i));
            }
            EXPECT_GE(ev[i], lo - 1e-15);
            EXPECT_LE(ev[i], hi + 1e-15);
        }
    }
}

// ---------------------------------------------------------------------------

TEST(PredictRelevance, NoHistoryNoInfluenceIsDot) {
    auto s = random_model(3, 3, 31);
    s.history[1].clear();
    propagate(s, path_graph(3));
    EXPECT_NEAR(predict_relevance(s, 1, 2, 0.0, 123.0), dot(s.item_embedding.row(2), s.group_embedding.row(1)),
                1e-14);
}

TEST(PredictRelevance, AlphaOneIsInfluence) {
    auto s = random_model(3, 3, 32);
    propagate(s, path_graph(3));
    EXPECT_DOUBLE_EQ(predict_relevance(s, 0, 1, 1.0, 0.37), 0.37);
}

TEST(PredictRelevance, DefaultAlphaWithTwoItemHistory) {
    auto s = random_model(3, 4, 33);
    s.history[0] = {1, 3};
    const auto greg = path_graph(3);
    propagate(s, greg);
    const auto o = oracle_forward(s, greg);
    const double alpha_r = 1e-6;
    // hand form: (1 - a) e_v . (e_g + (e_1 + e_3)/sqrt 2) + a s
    double by_hand = 0.0;
    for (std::size_t i = 0; i < s.embed_dim; ++i) {
        by_hand += o.ev[2][i] * (o.eg[0][i] + (o.ev[1][i] + o.ev[3][i]) / std::sqrt(2.0));
    }
    by_hand = (1 - alpha_r) * by_hand + alpha_r * 0.25;
    EXPECT_NEAR(predict_relevance(s, 0, 2, alpha_r, 0.25), by_hand, 1e-12);
    EXPECT_NEAR(predict_relevance(s, 0, 2, alpha_r, 0.25), oracle_score(s, o, 0, 2, alpha_r, 0.25), 1e-12);
}

TEST(PredictRelevance, LinearInInfluence) {
    auto s = random_model(3, 3, 34);
    propagate(s, path_graph(3));
    for (double a : {0.0, 1e-6, 0.3, 1.0}) {
        const double r0 = predict_relevance(s, 2, 1, a, 0.1);
        const double r1 = predict_relevance(s, 2, 1, a, 0.6);
        EXPECT_NEAR((r1 - r0) / 0.5, a, 1e-9);
    }
    EXPECT_THROW(predict_relevance(s, 3, 0, 0.0, 0.0), UnknownGroup);
}

// ---------------------------------------------------------------------------

TEST(BprLoss, EqualScoresGiveLnTwo) {
    auto s = random_model(3, 3, 40);
    const auto pg = PropagationGraph::full(path_graph(3));
    // same item as positive and negative gives equal scores
    const std::vector<Triple> t{{0, 1, 1}};
    EXPECT_NEAR(bpr_loss(s, pg, t, 0.0, 0.0), std::log(2.0), 1e-12);
    EXPECT_NEAR(bpr_loss(s, pg, t, 0.0, 0.0), 0.6931, 1e-4);
}

TEST(BprLoss, LargeMarginApproachesZero) {
    auto s = random_model(3, 3, 41);
    const auto pg = PropagationGraph::full(path_graph(3));
    const std::vector<Triple> t{{0, 1, 2}};
    const InfluenceFn infl = [](std::size_t, std::size_t v) { return v == 1 ? 1e3 : 0.0; };
    const double loss = bpr_loss(s, pg, t, 0.5, 0.0, infl);
    EXPECT_GT(loss, 0.0);
    EXPECT_LT(loss, 1e-100);
}

TEST(BprLoss, MatchesOracleOnFourTriples) {
    auto s = random_model(4, 5, 42);
    const auto greg = ring_with_chord(4);
    const auto pg = PropagationGraph::full(greg);
    const std::vector<Triple> t{{0, 1, 4}, {1, 0, 3}, {2, 4, 2}, {3, 1, 0}};
    const double alpha_r = 0.2, lambda = 1e-3;
    const InfluenceFn infl = [](std::size_t g, std::size_t v) { return 0.1 * double(g) - 0.05 * double(v); };
    const auto o = oracle_forward(s, greg);
    double expected = 0.0;
    for (const auto& tr : t) {
        const double x = oracle_score(s, o, tr.group, tr.positive, alpha_r, infl(tr.group, tr.positive)) -
                         oracle_score(s, o, tr.group, tr.negative, alpha_r, infl(tr.group, tr.negative));
        expected += -std::log(sig(x));
    }
    double sq = 0.0;
    for (auto b : s.params.blocks()) {
        for (double x : b) sq += x * x;
    }
    expected += lambda * sq;
    EXPECT_NEAR(bpr_loss(s, pg, t, alpha_r, lambda, infl), expected, 1e-10);
}

// ---------------------------------------------------------------------------

TEST(CheckGradients, RandomSmallModels) {
    for (std::uint64_t seed = 50; seed < 55; ++seed) {
        auto s = random_model(5, 5, seed);
        const auto pg = PropagationGraph::full(ring_with_chord(5));
        const std::vector<Triple> t{{0, 1, 3}, {1, 2, 4}, {2, 3, 0}, {4, 0, 2}, {3, 4, 1}};
        const auto check = check_gradients(s, pg, t, 1e-6, 1e-3);
        EXPECT_LT(check.max_relative_error, 1e-4) << "seed " << seed;
        EXPECT_EQ(check.per_block.size(), 4u + 2u + 2u);
    }
}

TEST(CheckGradients, ZeroWeightsOnlyBiasesMatter) {
    auto s = random_model(5, 5, 56);
    s.params.group_init_weight.fill(0.0);
    s.params.item_init_weight.fill(0.0);
    for (auto& w : s.params.layer_weights) w.fill(0.0);
    const auto pg = PropagationGraph::full(ring_with_chord(5));
    const std::vector<Triple> t{{0, 1, 3}, {2, 3, 0}};
    EXPECT_LT(check_gradients(s, pg, t, 1e-6, 1e-4).max_relative_error, 1e-4);
}

TEST(CheckGradients, NearLinearSingleTriple) {
    // no propagation layers, lambda 0, one triple
    auto s = random_model(2, 3, 57, 0);
    const auto pg = PropagationGraph::full(path_graph(2));
    const std::vector<Triple> t{{0, 1, 2}};
    EXPECT_LT(check_gradients(s, pg, t, 0.0, 0.0, 1e-4).max_relative_error, 1e-6);
}

TEST(CheckGradients, SampledSubgraphCoefficients) {
    auto s = random_model(5, 5, 58);
    auto pg = PropagationGraph::full(ring_with_chord(5));
    pg.active[3] = 0;
    for (auto& nb : pg.neighbors) {
        std::erase_if(nb, [](const auto& p) { return p.first == 3; });
        for (auto& p : nb) p.second *= 1.7;
    }
    pg.neighbors[3].clear();
    const std::vector<Triple> t{{0, 1, 3}, {1, 2, 4}, {4, 0, 2}};
    EXPECT_LT(check_gradients(s, pg, t, 1e-6, 1e-4).max_relative_error, 1e-4);
}

TEST(CheckGradients, EpsilonRange) {
    auto s = random_model(2, 3, 59);
    const auto pg = PropagationGraph::full(path_graph(2));
    const std::vector<Triple> t{{0, 1, 2}};
    EXPECT_THROW(check_gradients(s, pg, t, 0.0, 0.0, 1e-2), InvalidConfig);
    EXPECT_THROW(check_gradients(s, pg, t, 0.0, 0.0, 1e-8), InvalidConfig);
}

// ---------------------------------------------------------------------------

namespace {

struct Tiny {
    ModelState state;
    Greg greg;
    std::vector<Event> events;
};

Tiny tiny_instance(std::uint64_t seed) {
    Tiny t;
    auto cfg = small_config(seed);
    t.state = make_model(cfg, random_matrix(5, 2, seed + 1), random_matrix(5, 2, seed + 2));
    t.greg = ring_with_chord(5);
    for (std::size_t g = 0; g < 5; ++g) {
        t.events.push_back({g, g, std::int64_t(g), 1.0});
        t.events.push_back({g, (g + 1) % 5, std::int64_t(g + 5), 1.0});
    }
    set_history(t.state, t.events);
    set_recent_groups(t.state, std::span<const Event>(t.events).subspan(5));
    return t;
}

}  // namespace

TEST(Train, ZeroEpochsLeavesStateUnchanged) {
    auto t = tiny_instance(60);
    const ModelState before = t.state;
    const auto report = train(t.state, PropagationGraph::full(t.greg), t.events, small_config(60), 0);
    EXPECT_TRUE(report.epoch_loss.empty());
    EXPECT_EQ(t.state, before);
}

TEST(Train, DefaultLearningRate) { EXPECT_DOUBLE_EQ(GgcnConfig{}.lr, 0.1); }

TEST(Train, DeterministicGivenSeed) {
    auto a = tiny_instance(61);
    auto b = tiny_instance(61);
    const auto pg = PropagationGraph::full(a.greg);
    train(a.state, pg, a.events, small_config(61), 15);
    train(b.state, pg, b.events, small_config(61), 15);
    EXPECT_EQ(a.state, b.state);
    auto c = tiny_instance(61);
    train(c.state, pg, c.events, small_config(62), 15);
    EXPECT_NE(a.state, c.state);
}

TEST(Train, LossDecreasesOverFirstTenEpochs) {
    // training loss over every (group, positive, non-history negative) triple
    int decreasing = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        auto t = tiny_instance(seed);
        auto cfg = small_config(seed);
        const auto pg = PropagationGraph::full(t.greg);
        std::vector<Triple> all;
        for (const auto& [g, v] : positive_pairs(t.events, pg)) {
            for (std::size_t n = 0; n < 5; ++n) {
                const auto& h = t.state.history[g];
                if (!std::binary_search(h.begin(), h.end(), n)) all.push_back({g, v, n});
            }
        }
        const double initial = bpr_loss(t.state, pg, all, cfg.alpha_r, cfg.lambda);
        double after_ten = initial;
        const auto report = train(t.state, pg, t.events, cfg, 200, 0, [&](std::size_t epoch, const ModelState& st) {
            if (epoch == 9) after_ten = bpr_loss(st, pg, all, cfg.alpha_r, cfg.lambda);
        });
        ASSERT_EQ(report.epoch_loss.size(), 200u);
        decreasing += after_ten < initial;
        EXPECT_LT(bpr_loss(t.state, pg, all, cfg.alpha_r, cfg.lambda), initial);
    }
    EXPECT_GE(decreasing, 9);
}

TEST(Train, NonFiniteLossIsReported) {
    auto t = tiny_instance(63);
    t.state.params.group_latent(0, 0) = std::numeric_limits<double>::quiet_NaN();
    EXPECT_THROW(train(t.state, PropagationGraph::full(t.greg), t.events, small_config(63), 1), NonFiniteLoss);
}

TEST(Train, NegativesAvoidHistory) {
    auto t = tiny_instance(64);
    Rng rng(1);
    const auto pos = positive_pairs(t.events, PropagationGraph::full(t.greg));
    const auto triples = sample_triples(t.state, pos, 3, rng);
    EXPECT_EQ(triples.size(), pos.size() * 3);
    for (const auto& tr : triples) {
        const auto& h = t.state.history[tr.group];
        EXPECT_FALSE(std::binary_search(h.begin(), h.end(), tr.negative));
    }
}

// ---------------------------------------------------------------------------

TEST(Persistence, RoundTrip) {
    auto t = tiny_instance(70);
    train(t.state, PropagationGraph::full(t.greg), t.events, small_config(70), 3);
    std::stringstream buf;
    save_model(t.state, buf);
    const auto loaded = load_model(buf);
    EXPECT_EQ(loaded, t.state);
}

TEST(Persistence, RejectsOtherVersionsAndCorruption) {
    auto t = tiny_instance(71);
    std::stringstream buf;
    save_model(t.state, buf);
    std::string bytes = buf.str();
    {
        std::string v = bytes;
        v[8] = 2;
        std::istringstream in(v);
        EXPECT_THROW(load_model(in), VersionMismatch);
    }
    {
        std::string v = bytes;
        v[v.size() / 2] ^= 0x40;
        std::istringstream in(v);
        EXPECT_THROW(load_model(in), CorruptFile);
    }
    {
        std::istringstream in(bytes.substr(0, bytes.size() - 3));
        EXPECT_THROW(load_model(in), CorruptFile);
    }
    {
        std::string v = bytes;
        v[0] = 'X';
        std::istringstream in(v);
        EXPECT_THROW(load_model(in), CorruptFile);
    }
}
