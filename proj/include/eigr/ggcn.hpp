#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <istream>
#include <numeric>
#include <ostream>
#include <span>
#include <utility>
#include <vector>

#include "eigr/binary_io.hpp"
#include "eigr/common.hpp"
#include "eigr/ingest.hpp"

namespace eigr {

struct GgcnConfig {
    std::size_t embed_dim = 32;
    std::size_t latent_dim = 16;
    std::size_t attr_dim = 16;
    std::size_t num_layers = 2;
    double alpha_v = 0.8;
    double alpha_r = 1e-6;
    double lr = 1e-1;
    double lambda = 1e-6;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    std::size_t negatives_per_positive = 1;
    std::size_t batch_size = 1024;
    std::uint64_t seed = 42;

    void validate() const {
        if (embed_dim == 0 || latent_dim == 0 || attr_dim == 0) throw InvalidConfig("dimensions must be positive");
        if (!(alpha_v >= 0 && alpha_v <= 1)) throw InvalidConfig("alpha_v must lie in [0,1]");
        if (!(alpha_r >= 0 && alpha_r <= 1)) throw InvalidConfig("alpha_r must lie in [0,1]");
        if (!(lr > 0)) throw InvalidConfig("learning rate must be positive");
        if (!(lambda >= 0)) throw InvalidConfig("lambda must be nonnegative");
        if (negatives_per_positive == 0 || batch_size == 0) throw InvalidConfig("batch settings must be positive");
    }
};

/// Trainable parameters.
struct GgcnParams {
    Matrix group_init_weight;  // d x (latent + attr)
    Vec group_init_bias;       // d
    Matrix item_init_weight;   // d x (latent + attr)
    Vec item_init_bias;        // d
    std::vector<Matrix> layer_weights;  // per layer, d x 2d
    Matrix group_latent;       // groups x latent
    Matrix item_latent;        // items x latent

    /// Every parameter block in a fixed order.
    std::vector<std::span<double>> blocks() {
        std::vector<std::span<double>> out{group_init_weight.data, group_init_bias, item_init_weight.data,
                                           item_init_bias};
        for (auto& w : layer_weights) out.emplace_back(w.data);
        out.emplace_back(group_latent.data);
        out.emplace_back(item_latent.data);
        return out;
    }
    std::vector<std::span<const double>> blocks() const {
        auto spans = const_cast<GgcnParams*>(this)->blocks();
        return {spans.begin(), spans.end()};
    }

    static std::vector<std::string> block_names(std::size_t layers) {
        std::vector<std::string> names{"group_init_weight", "group_init_bias", "item_init_weight", "item_init_bias"};
        for (std::size_t l = 1; l <= layers; ++l) names.push_back("layer_weight_" + std::to_string(l));
        names.emplace_back("group_latent");
        names.emplace_back("item_latent");
        return names;
    }

    GgcnParams zeros_like() const {
        GgcnParams z = *this;
        for (auto b : z.blocks()) std::fill(b.begin(), b.end(), 0.0);
        return z;
    }

    double squared_norm() const {
        double s = 0.0;
        for (auto b : blocks()) s += norm2(b);
        return s;
    }

    bool operator==(const GgcnParams&) const = default;
};

/// Parameters, fixed attributes and the embeddings derived from them.
struct ModelState {
    std::size_t embed_dim = 0;
    std::size_t latent_dim = 0;
    std::size_t attr_dim = 0;
    std::size_t num_layers = 0;
    double alpha_v = 0.8;

    GgcnParams params;
    Matrix group_attr;       // x_g
    Matrix item_attr;        // y_v
    Matrix group_embedding;  // e_g = e^L_g
    Matrix item_initial;     // e^0_v
    Matrix item_embedding;   // e_v
    std::vector<std::vector<std::size_t>> history;        // V_g, sorted item indices
    std::vector<std::vector<std::size_t>> recent_groups;  // G_new per item, sorted group indices

    std::size_t num_groups() const { return group_attr.rows; }
    std::size_t num_items() const { return item_attr.rows; }

    bool operator==(const ModelState&) const = default;
};

/// Graph seen by the propagation layers: for each node, weighted incoming
/// neighbours (agg_g = sum coef * e_{g'}) and whether the node takes part.
struct PropagationGraph {
    std::size_t num_nodes = 0;
    std::vector<std::vector<std::pair<std::size_t, double>>> neighbors;
    std::vector<char> active;

    /// Symmetric normalisation 1/sqrt(|N_g||N_g'|) over the whole graph.
    static PropagationGraph full(const Greg& greg) {
        PropagationGraph pg;
        pg.num_nodes = greg.num_nodes;
        pg.neighbors.resize(greg.num_nodes);
        pg.active.assign(greg.num_nodes, 1);
        for (std::size_t g = 0; g < greg.num_nodes; ++g) {
            for (std::size_t n : greg.adjacency[g]) {
                const double coef = 1.0 / std::sqrt(static_cast<double>(greg.degree(g) * greg.degree(n)));
                pg.neighbors[g].emplace_back(n, coef);
            }
        }
        return pg;
    }

    std::size_t active_count() const {
        return static_cast<std::size_t>(std::count(active.begin(), active.end(), 1));
    }
};

struct Triple {
    std::size_t group = 0;
    std::size_t positive = 0;
    std::size_t negative = 0;
};

/// Item-specific influence term of the relevance score; empty means zero.
using InfluenceFn = std::function<double(std::size_t group, std::size_t item)>;

// ---------------------------------------------------------------------------
// Construction
// ---------------------------------------------------------------------------

inline ModelState make_model(const GgcnConfig& cfg, const Matrix& group_attr, const Matrix& item_attr) {
    cfg.validate();
    if (group_attr.cols != cfg.attr_dim || item_attr.cols != cfg.attr_dim) {
        throw DimensionMismatch("attribute width differs from attr_dim");
    }
    ModelState s;
    s.embed_dim = cfg.embed_dim;
    s.latent_dim = cfg.latent_dim;
    s.attr_dim = cfg.attr_dim;
    s.num_layers = cfg.num_layers;
    s.alpha_v = cfg.alpha_v;
    s.group_attr = group_attr;
    s.item_attr = item_attr;

    const std::size_t d = cfg.embed_dim;
    const std::size_t in = cfg.latent_dim + cfg.attr_dim;
    Rng rng(derive_seed(cfg.seed, 0x1417));
    auto xavier = [&](std::size_t rows, std::size_t cols) {
        Matrix m(rows, cols);
        const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
        fill_uniform(m.data, -limit, limit, rng);
        return m;
    };
    s.params.group_init_weight = xavier(d, in);
    s.params.group_init_bias.assign(d, 0.0);
    s.params.item_init_weight = xavier(d, in);
    s.params.item_init_bias.assign(d, 0.0);
    for (std::size_t l = 0; l < cfg.num_layers; ++l) s.params.layer_weights.push_back(xavier(d, 2 * d));
    s.params.group_latent = Matrix(group_attr.rows, cfg.latent_dim);
    s.params.item_latent = Matrix(item_attr.rows, cfg.latent_dim);
    fill_uniform(s.params.group_latent.data, -0.1, 0.1, rng);
    fill_uniform(s.params.item_latent.data, -0.1, 0.1, rng);

    s.group_embedding = Matrix(group_attr.rows, d);
    s.item_initial = Matrix(item_attr.rows, d);
    s.item_embedding = Matrix(item_attr.rows, d);
    s.history.assign(group_attr.rows, {});
    s.recent_groups.assign(item_attr.rows, {});
    return s;
}

/// V_g from a set of events.
inline void set_history(ModelState& s, std::span<const Event> events) {
    s.history.assign(s.num_groups(), {});
    for (const auto& e : events) s.history.at(e.group).push_back(e.item);
    for (auto& h : s.history) {
        std::sort(h.begin(), h.end());
        h.erase(std::unique(h.begin(), h.end()), h.end());
    }
}

/// G_new from the most recent events.
inline void set_recent_groups(ModelState& s, std::span<const Event> events) {
    s.recent_groups.assign(s.num_items(), {});
    for (const auto& e : events) s.recent_groups.at(e.item).push_back(e.group);
    for (auto& r : s.recent_groups) {
        std::sort(r.begin(), r.end());
        r.erase(std::unique(r.begin(), r.end()), r.end());
    }
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

/// Intermediate activations of one forward evaluation.
struct ForwardPass {
    std::vector<Matrix> layers;      // e^0 .. e^L for groups
    std::vector<Matrix> aggregates;  // agg^0 .. agg^{L-1}
    Matrix item_initial;
    Matrix item_embedding;
    std::vector<char> item_computed;

    const Matrix& group_embedding() const { return layers.back(); }
};

namespace detail {

inline void init_layer(const Matrix& weight, const Vec& bias, std::span<const double> latent,
                       std::span<const double> attr, std::span<double> out, Vec& scratch) {
    scratch.resize(latent.size() + attr.size());
    std::copy(latent.begin(), latent.end(), scratch.begin());
    std::copy(attr.begin(), attr.end(), scratch.begin() + static_cast<std::ptrdiff_t>(latent.size()));
    if (weight.cols != scratch.size()) throw DimensionMismatch("initial weight columns differ from input width");
    matvec(weight, scratch, out);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = sigmoid(out[i] + bias[i]);
}

/// Recent groups of `item` that take part in the propagation graph.
inline void active_recent(const ModelState& s, const PropagationGraph& pg, std::size_t item,
                          std::vector<std::size_t>& out) {
    out.clear();
    for (std::size_t g : s.recent_groups[item]) {
        if (pg.active[g]) out.push_back(g);
    }
}

}  // namespace detail

/// Evaluates initial embeddings, propagation and item updates. Only active
/// groups are computed; items are computed where `item_mask` is set (all
/// items when null).
inline ForwardPass forward(const ModelState& s, const PropagationGraph& pg,
                           const std::vector<char>* item_mask = nullptr) {
    const std::size_t d = s.embed_dim;
    const std::size_t ng = s.num_groups();
    const std::size_t ni = s.num_items();
    if (pg.num_nodes != ng) throw DimensionMismatch("propagation graph size differs from group count");
    ForwardPass fp;
    Vec scratch;

    fp.layers.emplace_back(ng, d);
    for (std::size_t g = 0; g < ng; ++g) {
        if (!pg.active[g]) continue;
        detail::init_layer(s.params.group_init_weight, s.params.group_init_bias, s.params.group_latent.row(g),
                           s.group_attr.row(g), fp.layers[0].row(g), scratch);
    }

    Vec concat(2 * d);
    for (std::size_t l = 1; l <= s.num_layers; ++l) {
        const Matrix& prev = fp.layers[l - 1];
        const Matrix& w = s.params.layer_weights[l - 1];
        Matrix agg(ng, d);
        Matrix next(ng, d);
        for (std::size_t g = 0; g < ng; ++g) {
            if (!pg.active[g]) continue;
            auto a = agg.row(g);
            for (const auto& [n, coef] : pg.neighbors[g]) axpy(coef, prev.row(n), a);
            std::copy(prev.row(g).begin(), prev.row(g).end(), concat.begin());
            std::copy(a.begin(), a.end(), concat.begin() + static_cast<std::ptrdiff_t>(d));
            auto out = next.row(g);
            matvec(w, concat, out);
            for (double& x : out) x = sigmoid(x);
        }
        fp.aggregates.push_back(std::move(agg));
        fp.layers.push_back(std::move(next));
    }

    fp.item_initial = Matrix(ni, d);
    fp.item_embedding = Matrix(ni, d);
    fp.item_computed.assign(ni, 0);
    const Matrix& eg = fp.layers.back();
    std::vector<std::size_t> recent;
    for (std::size_t v = 0; v < ni; ++v) {
        if (item_mask && !(*item_mask)[v]) continue;
        fp.item_computed[v] = 1;
        auto e0 = fp.item_initial.row(v);
        detail::init_layer(s.params.item_init_weight, s.params.item_init_bias, s.params.item_latent.row(v),
                           s.item_attr.row(v), e0, scratch);
        auto ev = fp.item_embedding.row(v);
        detail::active_recent(s, pg, v, recent);
        if (recent.empty()) {
            std::copy(e0.begin(), e0.end(), ev.begin());
            continue;
        }
        for (std::size_t i = 0; i < d; ++i) ev[i] = s.alpha_v * e0[i];
        const double share = (1.0 - s.alpha_v) / static_cast<double>(recent.size());
        for (std::size_t g : recent) axpy(share, eg.row(g), ev);
    }
    return fp;
}

/// Initial embeddings e^0_g and e^0_v.
inline void init_embeddings(ModelState& s, const Greg& greg) {
    ModelState tmp = s;
    tmp.num_layers = 0;
    auto fp = forward(tmp, PropagationGraph::full(greg));
    s.group_embedding = fp.layers[0];
    s.item_initial = fp.item_initial;
}

/// Group embeddings at every layer e^0 .. e^L over the given graph.
inline std::vector<Matrix> layer_embeddings(const ModelState& s, const Greg& greg) {
    std::vector<char> none(s.num_items(), 0);
    return forward(s, PropagationGraph::full(greg), &none).layers;
}

/// Recomputes e_g, e^0_v and e_v from the parameters. Inactive groups keep
/// their previous embedding.
inline void refresh(ModelState& s, const PropagationGraph& pg) {
    auto fp = forward(s, pg);
    for (std::size_t g = 0; g < s.num_groups(); ++g) {
        if (pg.active[g]) std::copy(fp.layers.back().row(g).begin(), fp.layers.back().row(g).end(),
                                    s.group_embedding.row(g).begin());
    }
    s.item_initial = std::move(fp.item_initial);
    s.item_embedding = std::move(fp.item_embedding);
}

inline void propagate(ModelState& s, const Greg& greg) { refresh(s, PropagationGraph::full(greg)); }

/// e_v = alpha_v e^0_v + (1 - alpha_v) mean of the recent groups' embeddings,
/// using the state's stored e_g and e^0_v.
inline Vec update_item_embedding(const ModelState& s, std::size_t item) {
    if (item >= s.num_items()) throw UnknownItem(std::to_string(item));
    const auto e0 = s.item_initial.row(item);
    Vec ev(e0.begin(), e0.end());
    const auto& recent = s.recent_groups[item];
    if (recent.empty()) return ev;
    for (double& x : ev) x *= s.alpha_v;
    const double share = (1.0 - s.alpha_v) / static_cast<double>(recent.size());
    for (std::size_t g : recent) axpy(share, s.group_embedding.row(g), ev);
    return ev;
}

/// e_g + |V_g|^{-1/2} sum of history item embeddings.
inline Vec history_embedding(std::span<const double> group_embedding, const std::vector<std::size_t>& history,
                             const Matrix& item_embedding) {
    Vec h(group_embedding.begin(), group_embedding.end());
    if (history.empty()) return h;
    const double c = 1.0 / std::sqrt(static_cast<double>(history.size()));
    for (std::size_t v : history) axpy(c, item_embedding.row(v), h);
    return h;
}

inline double predict_relevance(const ModelState& s, std::size_t group, std::size_t item, double alpha_r,
                                double influence_score) {
    if (group >= s.num_groups()) throw UnknownGroup(std::to_string(group));
    if (item >= s.num_items()) throw UnknownItem(std::to_string(item));
    const Vec h = history_embedding(s.group_embedding.row(group), s.history[group], s.item_embedding);
    return (1.0 - alpha_r) * dot(s.item_embedding.row(item), h) + alpha_r * influence_score;
}

// ---------------------------------------------------------------------------
// BPR loss and gradients
// ---------------------------------------------------------------------------

struct LossAndGradient {
    double loss = 0.0;
    GgcnParams gradient;
};

namespace detail {

inline std::vector<char> items_for_triples(const ModelState& s, std::span<const Triple> triples) {
    std::vector<char> mask(s.num_items(), 0);
    for (const auto& t : triples) {
        mask[t.positive] = 1;
        mask[t.negative] = 1;
        for (std::size_t v : s.history[t.group]) mask[v] = 1;
    }
    return mask;
}

struct HistoryCache {
    Matrix sums;
    std::vector<char> ready;

    std::span<const double> get(const ModelState& s, const ForwardPass& fp, std::size_t g) {
        if (!ready[g]) {
            const Vec h = history_embedding(fp.group_embedding().row(g), s.history[g], fp.item_embedding);
            std::copy(h.begin(), h.end(), sums.row(g).begin());
            ready[g] = 1;
        }
        return sums.row(g);
    }
};

}  // namespace detail

/// Loss (and optionally its gradient) of a batch of triples given a forward pass.
inline LossAndGradient bpr_objective(const ModelState& s, const PropagationGraph& pg, const ForwardPass& fp,
                                     std::span<const Triple> triples, double alpha_r, double lambda,
                                     const InfluenceFn& influence, bool with_gradient) {
    const std::size_t d = s.embed_dim;
    const std::size_t ng = s.num_groups();
    const std::size_t ni = s.num_items();
    LossAndGradient out;
    detail::HistoryCache hist{Matrix(ng, d), std::vector<char>(ng, 0)};

    Matrix grad_h, grad_ev;
    if (with_gradient) {
        grad_h = Matrix(ng, d);
        grad_ev = Matrix(ni, d);
    }
    const double pref = 1.0 - alpha_r;
    for (const auto& t : triples) {
        const auto h = hist.get(s, fp, t.group);
        const auto eu = fp.item_embedding.row(t.positive);
        const auto en = fp.item_embedding.row(t.negative);
        double x = pref * (dot(eu, h) - dot(en, h));
        if (influence) x += alpha_r * (influence(t.group, t.positive) - influence(t.group, t.negative));
        out.loss += softplus(-x);
        if (!with_gradient) continue;
        const double dx = -sigmoid(-x);
        axpy(dx * pref, h, grad_ev.row(t.positive));
        axpy(-dx * pref, h, grad_ev.row(t.negative));
        auto gh = grad_h.row(t.group);
        for (std::size_t i = 0; i < d; ++i) gh[i] += dx * pref * (eu[i] - en[i]);
    }
    out.loss += lambda * s.params.squared_norm();
    if (!with_gradient) return out;

    GgcnParams& grad = out.gradient;
    grad = s.params.zeros_like();
    const std::size_t L = s.num_layers;
    std::vector<Matrix> grad_layer(L + 1, Matrix(ng, d));

    // h_g = e_g + c_g sum_{v in V_g} e_v
    for (std::size_t g = 0; g < ng; ++g) {
        const auto gh = grad_h.row(g);
        if (std::all_of(gh.begin(), gh.end(), [](double v) { return v == 0.0; })) continue;
        axpy(1.0, gh, grad_layer[L].row(g));
        if (s.history[g].empty()) continue;
        const double c = 1.0 / std::sqrt(static_cast<double>(s.history[g].size()));
        for (std::size_t v : s.history[g]) axpy(c, gh, grad_ev.row(v));
    }

    // e_v = alpha_v e^0_v + (1 - alpha_v)/|G'| sum e_g
    Matrix grad_e0v(ni, d);
    std::vector<std::size_t> recent;
    for (std::size_t v = 0; v < ni; ++v) {
        const auto gv = grad_ev.row(v);
        if (std::all_of(gv.begin(), gv.end(), [](double x) { return x == 0.0; })) continue;
        detail::active_recent(s, pg, v, recent);
        if (recent.empty()) {
            axpy(1.0, gv, grad_e0v.row(v));
            continue;
        }
        axpy(s.alpha_v, gv, grad_e0v.row(v));
        const double share = (1.0 - s.alpha_v) / static_cast<double>(recent.size());
        for (std::size_t g : recent) axpy(share, gv, grad_layer[L].row(g));
    }

    // propagation layers, last to first
    Vec concat(2 * d), grad_z(d), grad_concat(2 * d);
    for (std::size_t l = L; l >= 1; --l) {
        const Matrix& e = fp.layers[l];
        const Matrix& prev = fp.layers[l - 1];
        const Matrix& agg = fp.aggregates[l - 1];
        const Matrix& w = s.params.layer_weights[l - 1];
        Matrix& gw = grad.layer_weights[l - 1];
        for (std::size_t g = 0; g < ng; ++g) {
            if (!pg.active[g]) continue;
            const auto ge = grad_layer[l].row(g);
            bool any = false;
            for (std::size_t i = 0; i < d; ++i) {
                const double y = e(g, i);
                grad_z[i] = ge[i] * y * (1.0 - y);
                any = any || grad_z[i] != 0.0;
            }
            if (!any) continue;
            std::copy(prev.row(g).begin(), prev.row(g).end(), concat.begin());
            std::copy(agg.row(g).begin(), agg.row(g).end(), concat.begin() + static_cast<std::ptrdiff_t>(d));
            outer_add(grad_z, concat, gw);
            std::fill(grad_concat.begin(), grad_concat.end(), 0.0);
            matvec_transposed_add(w, grad_z, grad_concat);
            axpy(1.0, std::span<const double>(grad_concat.data(), d), grad_layer[l - 1].row(g));
            const std::span<const double> grad_agg(grad_concat.data() + d, d);
            for (const auto& [n, coef] : pg.neighbors[g]) axpy(coef, grad_agg, grad_layer[l - 1].row(n));
        }
    }

    // initial layers
    const std::size_t latent = s.latent_dim;
    Vec input(latent + s.attr_dim), grad_input(latent + s.attr_dim);
    auto init_backward = [&](const Matrix& act, std::size_t r, std::span<const double> grad_act, const Matrix& w,
                             std::span<const double> lat, std::span<const double> attr, Matrix& gw, Vec& gb,
                             std::span<double> glat) {
        bool any = false;
        for (std::size_t i = 0; i < d; ++i) {
            const double y = act(r, i);
            grad_z[i] = grad_act[i] * y * (1.0 - y);
            any = any || grad_z[i] != 0.0;
        }
        if (!any) return;
        std::copy(lat.begin(), lat.end(), input.begin());
        std::copy(attr.begin(), attr.end(), input.begin() + static_cast<std::ptrdiff_t>(latent));
        outer_add(grad_z, input, gw);
        axpy(1.0, grad_z, gb);
        std::fill(grad_input.begin(), grad_input.end(), 0.0);
        matvec_transposed_add(w, grad_z, grad_input);
        axpy(1.0, std::span<const double>(grad_input.data(), latent), glat);
    };
    for (std::size_t g = 0; g < ng; ++g) {
        if (!pg.active[g]) continue;
        init_backward(fp.layers[0], g, grad_layer[0].row(g), s.params.group_init_weight, s.params.group_latent.row(g),
                      s.group_attr.row(g), grad.group_init_weight, grad.group_init_bias, grad.group_latent.row(g));
    }
    for (std::size_t v = 0; v < ni; ++v) {
        if (!fp.item_computed[v]) continue;
        init_backward(fp.item_initial, v, grad_e0v.row(v), s.params.item_init_weight, s.params.item_latent.row(v),
                      s.item_attr.row(v), grad.item_init_weight, grad.item_init_bias, grad.item_latent.row(v));
    }

    if (lambda != 0.0) {
        auto gb = grad.blocks();
        auto pb = s.params.blocks();
        for (std::size_t b = 0; b < gb.size(); ++b) axpy(2.0 * lambda, pb[b], gb[b]);
    }
    return out;
}

/// -sum ln sigmoid(r_pos - r_neg) + lambda ||params||^2, recomputed from the parameters.
inline double bpr_loss(const ModelState& s, const PropagationGraph& pg, std::span<const Triple> triples,
                       double alpha_r, double lambda, const InfluenceFn& influence = {}) {
    const auto mask = detail::items_for_triples(s, triples);
    const auto fp = forward(s, pg, &mask);
    return bpr_objective(s, pg, fp, triples, alpha_r, lambda, influence, false).loss;
}

inline LossAndGradient bpr_gradient(const ModelState& s, const PropagationGraph& pg, std::span<const Triple> triples,
                                    double alpha_r, double lambda, const InfluenceFn& influence = {}) {
    const auto mask = detail::items_for_triples(s, triples);
    const auto fp = forward(s, pg, &mask);
    return bpr_objective(s, pg, fp, triples, alpha_r, lambda, influence, true);
}

// ---------------------------------------------------------------------------
// Gradient check
// ---------------------------------------------------------------------------

struct GradientCheck {
    double max_relative_error = 0.0;
    std::vector<std::pair<std::string, double>> per_block;
};

/// Compares analytic gradients with central differences, block by block.
/// The error of a block is ||analytic - numeric|| / max(||analytic||, ||numeric||);
/// blocks whose gradients are both below 1e-10 count as agreeing.
inline GradientCheck check_gradients(const ModelState& state, const PropagationGraph& pg,
                                     std::span<const Triple> triples, double alpha_r, double lambda,
                                     double epsilon = 1e-5) {
    if (!(epsilon >= 1e-7 && epsilon <= 1e-3)) throw InvalidConfig("epsilon must lie in [1e-7, 1e-3]");
    const auto analytic = bpr_gradient(state, pg, triples, alpha_r, lambda).gradient;
    ModelState probe = state;
    auto param_blocks = probe.params.blocks();
    const auto grad_blocks = analytic.blocks();
    const auto names = GgcnParams::block_names(state.num_layers);
    GradientCheck result;
    for (std::size_t b = 0; b < param_blocks.size(); ++b) {
        double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
        for (std::size_t i = 0; i < param_blocks[b].size(); ++i) {
            const double saved = param_blocks[b][i];
            param_blocks[b][i] = saved + epsilon;
            const double plus = bpr_loss(probe, pg, triples, alpha_r, lambda);
            param_blocks[b][i] = saved - epsilon;
            const double minus = bpr_loss(probe, pg, triples, alpha_r, lambda);
            param_blocks[b][i] = saved;
            const double numeric = (plus - minus) / (2.0 * epsilon);
            const double a = grad_blocks[b][i];
            diff2 += (a - numeric) * (a - numeric);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        const double scale = std::max(std::sqrt(a2), std::sqrt(n2));
        const double err = scale < 1e-10 ? 0.0 : std::sqrt(diff2) / scale;
        result.per_block.emplace_back(names[b], err);
        result.max_relative_error = std::max(result.max_relative_error, err);
    }
    return result;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct AdamState {
    GgcnParams m;
    GgcnParams v;
    std::size_t step = 0;

    explicit AdamState(const GgcnParams& like) : m(like.zeros_like()), v(like.zeros_like()) {}

    void apply(GgcnParams& params, const GgcnParams& grad, const GgcnConfig& cfg) {
        ++step;
        const double c1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(step));
        const double c2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(step));
        auto pb = params.blocks();
        const auto gb = grad.blocks();
        auto mb = m.blocks();
        auto vb = v.blocks();
        for (std::size_t b = 0; b < pb.size(); ++b) {
            for (std::size_t i = 0; i < pb[b].size(); ++i) {
                const double g = gb[b][i];
                mb[b][i] = cfg.adam_beta1 * mb[b][i] + (1.0 - cfg.adam_beta1) * g;
                vb[b][i] = cfg.adam_beta2 * vb[b][i] + (1.0 - cfg.adam_beta2) * g * g;
                pb[b][i] -= cfg.lr * (mb[b][i] / c1) / (std::sqrt(vb[b][i] / c2) + cfg.adam_eps);
            }
        }
    }
};

struct TrainReport {
    std::vector<double> epoch_loss;
    std::size_t triples_per_epoch = 0;
};

/// Distinct (group, item) positives among `events` whose group is active.
inline std::vector<std::pair<std::size_t, std::size_t>> positive_pairs(std::span<const Event> events,
                                                                       const PropagationGraph& pg) {
    std::vector<std::pair<std::size_t, std::size_t>> pos;
    for (const auto& e : events) {
        if (pg.active[e.group]) pos.emplace_back(e.group, e.item);
    }
    std::sort(pos.begin(), pos.end());
    pos.erase(std::unique(pos.begin(), pos.end()), pos.end());
    return pos;
}

/// Uniform negatives outside V_g; groups that interacted with every item get none.
inline std::vector<Triple> sample_triples(const ModelState& s,
                                          const std::vector<std::pair<std::size_t, std::size_t>>& positives,
                                          std::size_t negatives_per_positive, Rng& rng) {
    std::vector<Triple> triples;
    triples.reserve(positives.size() * negatives_per_positive);
    std::uniform_int_distribution<std::size_t> pick(0, s.num_items() - 1);
    for (const auto& [g, v] : positives) {
        const auto& hist = s.history[g];
        if (hist.size() >= s.num_items()) continue;
        for (std::size_t k = 0; k < negatives_per_positive; ++k) {
            std::size_t n;
            do {
                n = pick(rng);
            } while (std::binary_search(hist.begin(), hist.end(), n) || n == v);
            triples.push_back({g, v, n});
        }
    }
    return triples;
}

/// Called after every epoch with the epoch index; parameters are current,
/// stored embeddings are not yet refreshed.
using EpochHook = std::function<void(std::size_t epoch, const ModelState& state)>;

/// Adam on BPR mini-batches. Deterministic given config.seed and `stream`.
inline TrainReport train(ModelState& s, const PropagationGraph& pg, std::span<const Event> events,
                         const GgcnConfig& cfg, std::size_t epochs, std::uint64_t stream = 0,
                         const EpochHook& on_epoch = {}) {
    cfg.validate();
    TrainReport report;
    if (epochs == 0) return report;
    auto positives = positive_pairs(events, pg);
    AdamState adam(s.params);
    for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
        Rng rng(derive_seed(derive_seed(cfg.seed, stream), epoch));
        std::shuffle(positives.begin(), positives.end(), rng);
        const auto triples = sample_triples(s, positives, cfg.negatives_per_positive, rng);
        report.triples_per_epoch = triples.size();
        double epoch_loss = 0.0;
        for (std::size_t start = 0; start < triples.size(); start += cfg.batch_size) {
            const std::span<const Triple> batch(triples.data() + start,
                                                std::min(cfg.batch_size, triples.size() - start));
            auto lg = bpr_gradient(s, pg, batch, cfg.alpha_r, cfg.lambda);
            if (!std::isfinite(lg.loss)) {
                throw NonFiniteLoss("loss diverged at epoch " + std::to_string(epoch) + "; lower the learning rate");
            }
            epoch_loss += lg.loss;
            adam.apply(s.params, lg.gradient, cfg);
        }
        report.epoch_loss.push_back(epoch_loss);
        if (on_epoch) on_epoch(epoch, s);
    }
    refresh(s, pg);
    return report;
}

/// Mean BPR loss per triple over `events` with a fixed negative draw, for
/// comparing models on the same data.
inline double evaluation_loss(const ModelState& s, const PropagationGraph& pg, std::span<const Event> events,
                              std::uint64_t seed) {
    const auto positives = positive_pairs(events, pg);
    Rng rng(derive_seed(seed, 0xE7A1));
    const auto triples = sample_triples(s, positives, 1, rng);
    if (triples.empty()) return 0.0;
    return bpr_loss(s, pg, triples, 0.0, 0.0) / static_cast<double>(triples.size());
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

inline constexpr char kModelMagic[8] = {'E', 'I', 'G', 'R', 'M', 'D', 'L', '1'};
inline constexpr std::uint32_t kModelVersion = 1;

inline void save_model(const ModelState& s, std::ostream& out) {
    binary::Writer w(out);
    w.bytes(kModelMagic, sizeof(kModelMagic));
    w.pod(kModelVersion);
    for (std::size_t dim : {s.embed_dim, s.latent_dim, s.attr_dim, s.num_layers, s.num_groups(), s.num_items()}) {
        w.pod(static_cast<std::uint64_t>(dim));
    }
    w.pod(s.alpha_v);
    w.matrix(s.params.group_init_weight);
    w.doubles(s.params.group_init_bias);
    w.matrix(s.params.item_init_weight);
    w.doubles(s.params.item_init_bias);
    for (const auto& m : s.params.layer_weights) w.matrix(m);
    w.matrix(s.params.group_latent);
    w.matrix(s.params.item_latent);
    w.matrix(s.group_attr);
    w.matrix(s.item_attr);
    w.matrix(s.group_embedding);
    w.matrix(s.item_initial);
    w.matrix(s.item_embedding);
    w.index_lists(s.history);
    w.index_lists(s.recent_groups);
    w.finish();
}

inline ModelState load_model(std::istream& in) {
    binary::Reader r(in);
    char magic[8];
    r.bytes(magic, sizeof(magic));
    if (!std::equal(std::begin(magic), std::end(magic), std::begin(kModelMagic))) {
        throw CorruptFile("not a model file");
    }
    const auto version = r.pod<std::uint32_t>();
    if (version != kModelVersion) throw VersionMismatch("model format version " + std::to_string(version));
    ModelState s;
    s.embed_dim = r.length(1 << 20);
    s.latent_dim = r.length(1 << 20);
    s.attr_dim = r.length(1 << 20);
    s.num_layers = r.length(1 << 10);
    const auto ng = r.length();
    const auto ni = r.length();
    s.alpha_v = r.pod<double>();
    const std::size_t d = s.embed_dim;
    const std::size_t in_w = s.latent_dim + s.attr_dim;
    auto expect = [](const Matrix& m, std::size_t rows, std::size_t cols) {
        if (m.rows != rows || m.cols != cols) throw CorruptFile("matrix shape mismatch");
    };
    s.params.group_init_weight = r.matrix();
    expect(s.params.group_init_weight, d, in_w);
    s.params.group_init_bias.resize(d);
    r.doubles(s.params.group_init_bias);
    s.params.item_init_weight = r.matrix();
    expect(s.params.item_init_weight, d, in_w);
    s.params.item_init_bias.resize(d);
    r.doubles(s.params.item_init_bias);
    for (std::size_t l = 0; l < s.num_layers; ++l) {
        s.params.layer_weights.push_back(r.matrix());
        expect(s.params.layer_weights.back(), d, 2 * d);
    }
    s.params.group_latent = r.matrix();
    expect(s.params.group_latent, ng, s.latent_dim);
    s.params.item_latent = r.matrix();
    expect(s.params.item_latent, ni, s.latent_dim);
    s.group_attr = r.matrix();
    expect(s.group_attr, ng, s.attr_dim);
    s.item_attr = r.matrix();
    expect(s.item_attr, ni, s.attr_dim);
    s.group_embedding = r.matrix();
    expect(s.group_embedding, ng, d);
    s.item_initial = r.matrix();
    expect(s.item_initial, ni, d);
    s.item_embedding = r.matrix();
    expect(s.item_embedding, ni, d);
    s.history = r.index_lists();
    s.recent_groups = r.index_lists();
    if (s.history.size() != ng || s.recent_groups.size() != ni) throw CorruptFile("list count mismatch");
    r.verify();
    return s;
}

}  // namespace eigr
