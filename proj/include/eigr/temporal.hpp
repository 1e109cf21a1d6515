#pragma once

#include <cmath>
#include <cstdint>
#include <ostream>
#include <span>
#include <vector>

#include "eigr/common.hpp"
#include "eigr/ggcn.hpp"
#include "eigr/ingest.hpp"

namespace eigr {

// ---------------------------------------------------------------------------
// Snapshot sequence
// ---------------------------------------------------------------------------

/// Trains one GroupGCN per snapshot on the growing prefix R_1..R_t, each
/// warm-started from the previous one. When `subgraphs` is nonempty, state t
/// trains on subgraphs[t] instead of the full graph; embeddings are always
/// refreshed on the full graph afterwards so every group has one.
inline std::vector<ModelState> train_snapshot_sequence(const ModelState& initial, const TemporalSplit& split,
                                                       const Greg& greg, const GgcnConfig& cfg, std::size_t epochs,
                                                       std::span<const PropagationGraph> subgraphs = {}) {
    if (split.num_snapshots() == 0) throw InsufficientData("no snapshots");
    if (!subgraphs.empty() && subgraphs.size() != split.num_snapshots()) {
        throw InvalidConfig("need one subgraph per snapshot");
    }
    const auto full = PropagationGraph::full(greg);
    std::vector<ModelState> states;
    ModelState s = initial;
    for (std::size_t t = 0; t < split.num_snapshots(); ++t) {
        const auto events = split.prefix(t);
        set_history(s, events);
        set_recent_groups(s, split.snapshots[t]);
        const PropagationGraph& pg = subgraphs.empty() ? full : subgraphs[t];
        train(s, pg, events, cfg, epochs, t);
        if (!subgraphs.empty()) refresh(s, full);
        states.push_back(s);
    }
    return states;
}

/// Copy of `state` trained further on `recent` only. The history sets and
/// parameters of the original are left untouched.
inline ModelState fine_tune_state(const ModelState& state, const Greg& greg, std::span<const Event> recent,
                                  const GgcnConfig& cfg, std::size_t epochs) {
    ModelState s = state;
    if (epochs == 0 || recent.empty()) return s;
    train(s, PropagationGraph::full(greg), recent, cfg, epochs, 0x5407);
    return s;
}

/// Short-term group embeddings; equal to the long-term ones when there is
/// nothing to fine-tune on.
inline Matrix fine_tune_short_term(const ModelState& state, const Greg& greg, std::span<const Event> recent,
                                   const GgcnConfig& cfg, std::size_t epochs) {
    return fine_tune_state(state, greg, recent, cfg, epochs).group_embedding;
}

// ---------------------------------------------------------------------------
// Profiles
// ---------------------------------------------------------------------------

struct GroupProfile {
    std::size_t group = 0;
    std::size_t time_index = 0;
    Vec long_term;
    Vec short_term;
    Vec combined;  // long_term followed by short_term

    static GroupProfile make(std::size_t group, std::size_t t, std::span<const double> long_term,
                             std::span<const double> short_term) {
        GroupProfile p;
        p.group = group;
        p.time_index = t;
        p.long_term.assign(long_term.begin(), long_term.end());
        p.short_term.assign(short_term.begin(), short_term.end());
        p.combined = p.long_term;
        p.combined.insert(p.combined.end(), p.short_term.begin(), p.short_term.end());
        return p;
    }
};

/// Per-group sequences, one T x 2d matrix per group (row t = combined profile).
using ProfileSequences = std::vector<Matrix>;

inline ProfileSequences build_profiles(const std::vector<Matrix>& long_term, const std::vector<Matrix>& short_term) {
    if (long_term.size() != short_term.size() || long_term.empty()) {
        throw DimensionMismatch("need matching nonempty long/short sequences");
    }
    const std::size_t ng = long_term[0].rows;
    const std::size_t d = long_term[0].cols;
    ProfileSequences seq(ng, Matrix(long_term.size(), 2 * d));
    for (std::size_t t = 0; t < long_term.size(); ++t) {
        if (long_term[t].rows != ng || short_term[t].rows != ng || long_term[t].cols != d || short_term[t].cols != d) {
            throw DimensionMismatch("profile shapes differ across time");
        }
        for (std::size_t g = 0; g < ng; ++g) {
            const auto p = GroupProfile::make(g, t, long_term[t].row(g), short_term[t].row(g));
            std::copy(p.combined.begin(), p.combined.end(), seq[g].row(t).begin());
        }
    }
    return seq;
}

/// `group_id,t,coord_index,value`, t counted from 1.
inline void write_profiles_csv(const ProfileSequences& seq, const Catalog& catalog, std::ostream& out) {
    out << "group_id,t,coord_index,value\n";
    for (std::size_t g = 0; g < seq.size(); ++g) {
        for (std::size_t t = 0; t < seq[g].rows; ++t) {
            for (std::size_t c = 0; c < seq[g].cols; ++c) {
                out << catalog.group_id(g) << ',' << t + 1 << ',' << c << ',' << detail::format_double(seq[g](t, c))
                    << '\n';
            }
        }
    }
}

// ---------------------------------------------------------------------------
// RNN autoencoder
// ---------------------------------------------------------------------------

struct RnnConfig {
    std::size_t hidden_dim = 0;  // 0 means the input width
    double lr = 1e-2;
    double lambda = 1e-5;
    std::size_t epochs = 150;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    std::uint64_t seed = 42;
};

/// Elman tanh encoder over the sequence; affine decoder from the last hidden state.
struct RnnAutoencoder {
    std::size_t input_dim = 0;
    std::size_t hidden_dim = 0;
    Matrix w_xh;  // hidden x input
    Matrix w_hh;  // hidden x hidden
    Vec b_h;
    Matrix w_hy;  // input x hidden
    Vec b_y;

    std::vector<std::span<double>> blocks() { return {w_xh.data, w_hh.data, b_h, w_hy.data, b_y}; }
    std::vector<std::span<const double>> blocks() const {
        auto spans = const_cast<RnnAutoencoder*>(this)->blocks();
        return {spans.begin(), spans.end()};
    }
    RnnAutoencoder zeros_like() const {
        RnnAutoencoder z = *this;
        for (auto b : z.blocks()) std::fill(b.begin(), b.end(), 0.0);
        return z;
    }
    double squared_norm() const {
        double s = 0.0;
        for (auto b : blocks()) s += norm2(b);
        return s;
    }
    bool operator==(const RnnAutoencoder&) const = default;
};

inline RnnAutoencoder zero_rnn(std::size_t input_dim, std::size_t hidden_dim) {
    RnnAutoencoder r;
    r.input_dim = input_dim;
    r.hidden_dim = hidden_dim;
    r.w_xh = Matrix(hidden_dim, input_dim);
    r.w_hh = Matrix(hidden_dim, hidden_dim);
    r.b_h.assign(hidden_dim, 0.0);
    r.w_hy = Matrix(input_dim, hidden_dim);
    r.b_y.assign(input_dim, 0.0);
    return r;
}

/// Starts close to "repeat the last profile": the encoder is a scaled-down
/// identity that stays in tanh's linear range and the decoder scales back up.
inline RnnAutoencoder make_rnn(std::size_t input_dim, const RnnConfig& cfg) {
    const std::size_t hidden = cfg.hidden_dim ? cfg.hidden_dim : input_dim;
    RnnAutoencoder r = zero_rnn(input_dim, hidden);
    Rng rng(derive_seed(cfg.seed, 0x2AA));
    fill_uniform(r.w_xh.data, -0.01, 0.01, rng);
    fill_uniform(r.w_hh.data, -0.01, 0.01, rng);
    fill_uniform(r.w_hy.data, -0.01, 0.01, rng);
    for (std::size_t i = 0; i < std::min(input_dim, hidden); ++i) {
        r.w_xh(i, i) += 0.1;
        r.w_hy(i, i) += 10.0;
    }
    return r;
}

namespace detail {

/// Hidden states h_1..h_n for the first n rows of `seq`.
inline Matrix rnn_hidden(const RnnAutoencoder& r, const Matrix& seq, std::size_t n) {
    Matrix h(n, r.hidden_dim);
    Vec z(r.hidden_dim);
    for (std::size_t t = 0; t < n; ++t) {
        matvec(r.w_xh, seq.row(t), z);
        if (t > 0) {
            Vec zh(r.hidden_dim);
            matvec(r.w_hh, h.row(t - 1), zh);
            axpy(1.0, zh, z);
        }
        for (std::size_t i = 0; i < r.hidden_dim; ++i) h(t, i) = std::tanh(z[i] + r.b_h[i]);
    }
    return h;
}

}  // namespace detail

/// Decoder output after consuming the whole sequence.
inline Vec rnn_predict(const RnnAutoencoder& r, const Matrix& seq) {
    if (seq.cols != r.input_dim) throw DimensionMismatch("profile width differs from RNN input");
    Vec y = r.b_y;
    if (seq.rows == 0) return y;
    const Matrix h = detail::rnn_hidden(r, seq, seq.rows);
    Vec out(r.input_dim);
    matvec(r.w_hy, h.row(seq.rows - 1), out);
    axpy(1.0, out, y);
    return y;
}

struct RnnLoss {
    double loss = 0.0;  // mean squared error + lambda ||params||^2
    double mse = 0.0;
    RnnAutoencoder gradient;
};

/// Next-step prediction loss: after each prefix x_1..x_k the decoder predicts
/// x_{k+1}. The squared error is averaged over all (prefix, coordinate) pairs.
inline RnnLoss rnn_loss(const RnnAutoencoder& r, const ProfileSequences& seqs, double lambda, bool with_gradient) {
    RnnLoss out;
    std::size_t pairs = 0;
    for (const auto& s : seqs) pairs += s.rows > 0 ? s.rows - 1 : 0;
    if (pairs == 0) throw SequenceTooShort("need sequences of length >= 2");
    const double scale = 1.0 / (static_cast<double>(pairs) * static_cast<double>(r.input_dim));
    if (with_gradient) out.gradient = r.zeros_like();
    auto& gr = out.gradient;
    const std::size_t H = r.hidden_dim, D = r.input_dim;
    Vec y(D), dy(D), dh(H), dh_next(H), dz(H);
    for (const auto& seq : seqs) {
        if (seq.cols != D) throw DimensionMismatch("profile width differs from RNN input");
        if (seq.rows < 2) continue;
        const std::size_t n = seq.rows - 1;
        const Matrix h = detail::rnn_hidden(r, seq, n);
        Matrix dys(n, D);
        for (std::size_t k = 0; k < n; ++k) {
            matvec(r.w_hy, h.row(k), y);
            for (std::size_t i = 0; i < D; ++i) {
                const double e = y[i] + r.b_y[i] - seq(k + 1, i);
                out.mse += e * e;
                dys(k, i) = 2.0 * e * scale;
            }
        }
        if (!with_gradient) continue;
        std::fill(dh_next.begin(), dh_next.end(), 0.0);
        for (std::size_t k = n; k-- > 0;) {
            const auto dyk = dys.row(k);
            outer_add(dyk, h.row(k), gr.w_hy);
            axpy(1.0, dyk, gr.b_y);
            dh = dh_next;
            matvec_transposed_add(r.w_hy, dyk, dh);
            for (std::size_t i = 0; i < H; ++i) dz[i] = dh[i] * (1.0 - h(k, i) * h(k, i));
            outer_add(dz, seq.row(k), gr.w_xh);
            axpy(1.0, dz, gr.b_h);
            std::fill(dh_next.begin(), dh_next.end(), 0.0);
            if (k > 0) {
                outer_add(dz, h.row(k - 1), gr.w_hh);
                matvec_transposed_add(r.w_hh, dz, dh_next);
            }
        }
    }
    out.mse *= scale;
    out.loss = out.mse + lambda * r.squared_norm();
    if (with_gradient && lambda != 0.0) {
        auto gb = gr.blocks();
        auto pb = r.blocks();
        for (std::size_t b = 0; b < gb.size(); ++b) axpy(2.0 * lambda, pb[b], gb[b]);
    }
    return out;
}

struct RnnReport {
    std::vector<double> epoch_loss;
    double final_mse = 0.0;
};

/// Full-batch Adam on the next-step loss.
inline RnnReport train_rnn(RnnAutoencoder& r, const ProfileSequences& seqs, const RnnConfig& cfg) {
    RnnReport report;
    auto m = r.zeros_like();
    auto v = r.zeros_like();
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto lg = rnn_loss(r, seqs, cfg.lambda, true);
        if (!std::isfinite(lg.loss)) throw NonFiniteLoss("RNN loss diverged; lower lr_2");
        report.epoch_loss.push_back(lg.loss);
        const double c1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(epoch + 1));
        const double c2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(epoch + 1));
        auto pb = r.blocks();
        const auto gb = lg.gradient.blocks();
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
    report.final_mse = rnn_loss(r, seqs, 0.0, false).mse;
    return report;
}

/// Predicted combined profile at T+1, one row per group.
inline Matrix predict_next(const ProfileSequences& seqs, const RnnAutoencoder& r) {
    Matrix out(seqs.size(), r.input_dim);
    for (std::size_t g = 0; g < seqs.size(); ++g) {
        const Vec y = rnn_predict(r, seqs[g]);
        std::copy(y.begin(), y.end(), out.row(g).begin());
    }
    return out;
}

/// Scoring embedding from a predicted profile: mean of its long and short halves.
inline Matrix profile_embedding(const Matrix& predicted) {
    const std::size_t d = predicted.cols / 2;
    Matrix out(predicted.rows, d);
    for (std::size_t g = 0; g < predicted.rows; ++g) {
        for (std::size_t i = 0; i < d; ++i) out(g, i) = 0.5 * (predicted(g, i) + predicted(g, d + i));
    }
    return out;
}

}  // namespace eigr
