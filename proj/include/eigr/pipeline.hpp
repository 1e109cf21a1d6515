#pragma once

#include <algorithm>
#include <charconv>
#include <chrono>
#include <concepts>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <istream>
#include <map>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "eigr/common.hpp"
#include "eigr/ges.hpp"
#include "eigr/ggcn.hpp"
#include "eigr/influence.hpp"
#include "eigr/ingest.hpp"
#include "eigr/synthetic.hpp"
#include "eigr/temporal.hpp"
#include "eigr/ugindex.hpp"

namespace eigr {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct EngineConfig {
    std::string interactions_path;  // empty: generate the synthetic corpus
    std::string members_path;
    std::string group_tags_path;
    std::string item_tags_path;
    std::string out_dir = "eigr_out";
    SyntheticConfig synthetic;
    double train_fraction = 0.8;
    std::size_t num_snapshots = 3;
    std::size_t min_shared_users = 1;
    GgcnConfig ggcn;
    std::size_t epochs = 20;
    std::size_t fine_tune_epochs = 5;
    RnnConfig rnn;
    bool use_ges = true;
    SamplerConfig ges;
    bool use_dyic = true;
    PropagationParams dyic;
    double eval_tau = 0.85;
    bool use_index = true;
    IndexConfig index;
    std::size_t k = 20;
    std::vector<std::size_t> eval_ks{5, 10, 20};
    std::uint64_t seed = 42;

    void validate() const {
        if (k == 0) throw InvalidConfig("k must be positive");
        if (eval_ks.empty()) throw InvalidConfig("eval_ks must list at least one cutoff");
        for (std::size_t c : eval_ks) {
            if (c == 0) throw InvalidConfig("eval_ks entries must be positive");
        }
        if (!(eval_tau >= 0 && eval_tau <= 1)) throw InvalidConfig("eval_tau must lie in [0,1]");
        if (num_snapshots == 0) throw InvalidConfig("snapshots must be positive");
        if (!interactions_path.empty() && members_path.empty()) {
            throw InvalidConfig("members file required alongside interactions");
        }
        for (const auto* path : {&interactions_path, &members_path, &group_tags_path, &item_tags_path}) {
            if (!path->empty() && !std::filesystem::exists(*path)) throw InvalidConfig("missing file: " + *path);
        }
        ggcn.validate();
        ges.validate();
        dyic.validate();
        index.validate();
    }

    /// Copy with every module seed derived from the global seed.
    EngineConfig resolved() const {
        EngineConfig c = *this;
        c.synthetic.seed = derive_seed(seed, 1);
        c.ggcn.seed = derive_seed(seed, 2);
        c.rnn.seed = derive_seed(seed, 3);
        c.ges.seed = derive_seed(seed, 4);
        c.dyic.seed = derive_seed(seed, 5);
        c.index.seed = derive_seed(seed, 6);
        return c;
    }

    std::size_t max_cutoff() const { return std::max(k, *std::max_element(eval_ks.begin(), eval_ks.end())); }
};

/// One `key = value` setting, readable and writable as text.
struct ConfigKey {
    std::string name;
    std::string help;
    std::function<void(EngineConfig&, const std::string&)> set;
    std::function<std::string(const EngineConfig&)> get;
};

namespace detail {

inline std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

inline void parse_setting(const std::string&, const std::string& text, std::string& out) { out = text; }

inline void parse_setting(const std::string& key, const std::string& text, double& out) {
    if (!parse_double(text, out)) throw InvalidConfig(key + ": not a number: '" + text + "'");
}

template <std::unsigned_integral T>
void parse_setting(const std::string& key, const std::string& text, T& out) {
    auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), out);
    if (text.empty() || ec != std::errc() || ptr != text.data() + text.size()) {
        throw InvalidConfig(key + ": not a nonnegative integer: '" + text + "'");
    }
}

inline void parse_setting(const std::string& key, const std::string& text, bool& out) {
    if (text == "true" || text == "1" || text == "yes" || text == "on") {
        out = true;
    } else if (text == "false" || text == "0" || text == "no" || text == "off") {
        out = false;
    } else {
        throw InvalidConfig(key + ": not a boolean: '" + text + "'");
    }
}

inline void parse_setting(const std::string& key, const std::string& text, ThresholdMode& out) {
    if (text == "stochastic") {
        out = ThresholdMode::stochastic;
    } else if (text == "fixed") {
        out = ThresholdMode::fixed;
    } else {
        throw InvalidConfig(key + ": expected stochastic or fixed");
    }
}

inline void parse_setting(const std::string& key, const std::string& text, ProbabilityMode& out) {
    if (text == "exact") {
        out = ProbabilityMode::exact;
    } else if (text == "approximate") {
        out = ProbabilityMode::approximate;
    } else {
        throw InvalidConfig(key + ": expected exact or approximate");
    }
}

inline void parse_setting(const std::string& key, const std::string& text, std::vector<std::size_t>& out) {
    out.clear();
    std::stringstream ss(text);
    std::string part;
    while (std::getline(ss, part, ',')) {
        std::size_t v = 0;
        parse_setting(key, trim(part), v);
        out.push_back(v);
    }
}

inline std::string show_setting(const std::string& v) { return v; }
inline std::string show_setting(double v) { return format_double(v); }
inline std::string show_setting(bool v) { return v ? "true" : "false"; }
template <std::unsigned_integral T>
std::string show_setting(T v) {
    return std::to_string(v);
}
inline std::string show_setting(ThresholdMode v) { return v == ThresholdMode::fixed ? "fixed" : "stochastic"; }
inline std::string show_setting(ProbabilityMode v) { return v == ProbabilityMode::exact ? "exact" : "approximate"; }
inline std::string show_setting(const std::vector<std::size_t>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
    return out;
}

template <class Access>
ConfigKey config_key(std::string name, std::string help, Access access) {
    ConfigKey k;
    k.name = name;
    k.help = std::move(help);
    k.set = [name, access](EngineConfig& c, const std::string& text) { parse_setting(name, text, access(c)); };
    k.get = [access](const EngineConfig& c) { return show_setting(access(const_cast<EngineConfig&>(c))); };
    return k;
}

}  // namespace detail

/// Every configurable key, in a fixed order.
inline const std::vector<ConfigKey>& config_keys() {
    using detail::config_key;
    static const std::vector<ConfigKey> keys = {
        config_key("interactions", "interaction CSV (empty: synthetic corpus)",
                   [](EngineConfig& c) -> auto& { return c.interactions_path; }),
        config_key("members", "group membership CSV", [](EngineConfig& c) -> auto& { return c.members_path; }),
        config_key("group_tags", "group tag CSV", [](EngineConfig& c) -> auto& { return c.group_tags_path; }),
        config_key("item_tags", "item tag CSV", [](EngineConfig& c) -> auto& { return c.item_tags_path; }),
        config_key("out", "output directory", [](EngineConfig& c) -> auto& { return c.out_dir; }),
        config_key("synthetic_groups", "synthetic corpus groups",
                   [](EngineConfig& c) -> auto& { return c.synthetic.num_groups; }),
        config_key("synthetic_items", "synthetic corpus items",
                   [](EngineConfig& c) -> auto& { return c.synthetic.num_items; }),
        config_key("synthetic_users", "synthetic corpus users",
                   [](EngineConfig& c) -> auto& { return c.synthetic.num_users; }),
        config_key("synthetic_topics", "synthetic corpus topics",
                   [](EngineConfig& c) -> auto& { return c.synthetic.num_topics; }),
        config_key("synthetic_members_per_group", "members per synthetic group",
                   [](EngineConfig& c) -> auto& { return c.synthetic.members_per_group; }),
        config_key("synthetic_interactions_per_group", "interactions per synthetic group",
                   [](EngineConfig& c) -> auto& { return c.synthetic.interactions_per_group; }),
        config_key("synthetic_drift_fraction", "share of synthetic groups changing topic",
                   [](EngineConfig& c) -> auto& { return c.synthetic.drift_fraction; }),
        config_key("train_fraction", "chronological training share",
                   [](EngineConfig& c) -> auto& { return c.train_fraction; }),
        config_key("snapshots", "training snapshots", [](EngineConfig& c) -> auto& { return c.num_snapshots; }),
        config_key("min_shared_users", "shared members needed for a group edge",
                   [](EngineConfig& c) -> auto& { return c.min_shared_users; }),
        config_key("embed_dim", "embedding width", [](EngineConfig& c) -> auto& { return c.ggcn.embed_dim; }),
        config_key("latent_dim", "latent width", [](EngineConfig& c) -> auto& { return c.ggcn.latent_dim; }),
        config_key("attr_dim", "tag feature width", [](EngineConfig& c) -> auto& { return c.ggcn.attr_dim; }),
        config_key("layers", "propagation layers", [](EngineConfig& c) -> auto& { return c.ggcn.num_layers; }),
        config_key("alpha_v", "item self weight", [](EngineConfig& c) -> auto& { return c.ggcn.alpha_v; }),
        config_key("alpha_r", "influence weight in relevance", [](EngineConfig& c) -> auto& { return c.ggcn.alpha_r; }),
        config_key("lr_1", "model learning rate", [](EngineConfig& c) -> auto& { return c.ggcn.lr; }),
        config_key("lambda_1", "model L2 weight", [](EngineConfig& c) -> auto& { return c.ggcn.lambda; }),
        config_key("negatives", "negatives per positive",
                   [](EngineConfig& c) -> auto& { return c.ggcn.negatives_per_positive; }),
        config_key("batch_size", "triples per batch", [](EngineConfig& c) -> auto& { return c.ggcn.batch_size; }),
        config_key("epochs", "epochs per snapshot", [](EngineConfig& c) -> auto& { return c.epochs; }),
        config_key("fine_tune_epochs", "short-term epochs", [](EngineConfig& c) -> auto& { return c.fine_tune_epochs; }),
        config_key("rnn_hidden_dim", "RNN width (0: input width)",
                   [](EngineConfig& c) -> auto& { return c.rnn.hidden_dim; }),
        config_key("lr_2", "RNN learning rate", [](EngineConfig& c) -> auto& { return c.rnn.lr; }),
        config_key("lambda_2", "RNN L2 weight", [](EngineConfig& c) -> auto& { return c.rnn.lambda; }),
        config_key("rnn_epochs", "RNN epochs", [](EngineConfig& c) -> auto& { return c.rnn.epochs; }),
        config_key("use_ges", "train on sampled subgraphs", [](EngineConfig& c) -> auto& { return c.use_ges; }),
        config_key("ges_clusters", "node clusters", [](EngineConfig& c) -> auto& { return c.ges.num_clusters; }),
        config_key("ges_overlap", "overlap degree", [](EngineConfig& c) -> auto& { return c.ges.overlap_degree; }),
        config_key("ges_fraction", "expected sampled edge share",
                   [](EngineConfig& c) -> auto& { return c.ges.sample_fraction; }),
        config_key("ges_samples", "expected sampled edges (0: use fraction)",
                   [](EngineConfig& c) -> auto& { return c.ges.num_samples; }),
        config_key("ges_mode", "exact or approximate probabilities", [](EngineConfig& c) -> auto& { return c.ges.mode; }),
        config_key("use_dyic", "add influence to relevance", [](EngineConfig& c) -> auto& { return c.use_dyic; }),
        config_key("gamma_1", "activeness-willingness weight", [](EngineConfig& c) -> auto& { return c.dyic.gamma_1; }),
        config_key("gamma_2", "similarity weight", [](EngineConfig& c) -> auto& { return c.dyic.gamma_2; }),
        config_key("recent_window", "snapshots counted as recent",
                   [](EngineConfig& c) -> auto& { return c.dyic.recent_window; }),
        config_key("replications", "cascade replications", [](EngineConfig& c) -> auto& { return c.dyic.replications; }),
        config_key("threshold", "stochastic or fixed", [](EngineConfig& c) -> auto& { return c.dyic.threshold_mode; }),
        config_key("tau", "fixed threshold", [](EngineConfig& c) -> auto& { return c.dyic.tau; }),
        config_key("use_similarity", "similarity factor", [](EngineConfig& c) -> auto& { return c.dyic.use_similarity; }),
        config_key("use_willingness", "willingness factor",
                   [](EngineConfig& c) -> auto& { return c.dyic.use_willingness; }),
        config_key("eval_tau", "fixed threshold for sigma_inf", [](EngineConfig& c) -> auto& { return c.eval_tau; }),
        config_key("use_index", "answer queries through the index", [](EngineConfig& c) -> auto& { return c.use_index; }),
        config_key("index_dim", "projected dimensions", [](EngineConfig& c) -> auto& { return c.index.projection_dim; }),
        config_key("index_bits", "bits per dimension", [](EngineConfig& c) -> auto& { return c.index.bits_per_dim; }),
        config_key("index_block_size", "entries per block", [](EngineConfig& c) -> auto& { return c.index.block_size; }),
        config_key("index_buckets", "hash buckets (0: automatic)",
                   [](EngineConfig& c) -> auto& { return c.index.bucket_count; }),
        config_key("k", "groups recommended per item", [](EngineConfig& c) -> auto& { return c.k; }),
        config_key("eval_ks", "cutoffs for HR and NDCG", [](EngineConfig& c) -> auto& { return c.eval_ks; }),
        config_key("seed", "global seed", [](EngineConfig& c) -> auto& { return c.seed; }),
    };
    return keys;
}

inline const ConfigKey& find_config_key(const std::string& name) {
    for (const auto& k : config_keys()) {
        if (k.name == name) return k;
    }
    throw InvalidConfig("unknown key '" + name + "'");
}

inline void set_config_value(EngineConfig& c, const std::string& name, const std::string& value) {
    find_config_key(name).set(c, value);
}

/// Applies `key = value` lines; blank lines and lines starting with '#' are skipped.
inline void parse_config(std::istream& in, EngineConfig& c) {
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::string row = detail::trim(line);
        if (row.empty() || row.front() == '#') continue;
        const auto eq = row.find('=');
        if (eq == std::string::npos) throw InvalidConfig("line " + std::to_string(line_no) + ": expected key = value");
        const std::string key = detail::trim(std::string_view(row).substr(0, eq));
        const std::string value = detail::trim(std::string_view(row).substr(eq + 1));
        try {
            set_config_value(c, key, value);
        } catch (const InvalidConfig& e) {
            throw InvalidConfig("line " + std::to_string(line_no) + ": " + e.what());
        }
    }
}

inline EngineConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InvalidConfig("cannot open config " + path);
    EngineConfig c;
    parse_config(in, c);
    return c;
}

/// Every key in `key = value` form, one per line.
inline void write_config(const EngineConfig& c, std::ostream& out) {
    for (const auto& k : config_keys()) out << k.name << " = " << k.get(c) << '\n';
}

inline std::uint64_t config_hash(const EngineConfig& c) {
    std::ostringstream ss;
    write_config(c, ss);
    return fnv1a64(ss.str());
}

// ---------------------------------------------------------------------------
// Engine state
// ---------------------------------------------------------------------------

/// Wall-clock seconds per named stage, in execution order.
struct Timings {
    std::vector<std::pair<std::string, double>> stages;

    void add(const std::string& name, double seconds) {
        for (auto& [n, s] : stages) {
            if (n == name) {
                s += seconds;
                return;
            }
        }
        stages.emplace_back(name, seconds);
    }

    double get(const std::string& name) const {
        for (const auto& [n, s] : stages) {
            if (n == name) return s;
        }
        return 0.0;
    }

    template <class F>
    auto time(const std::string& name, F&& f) {
        const auto start = std::chrono::steady_clock::now();
        if constexpr (std::is_void_v<decltype(f())>) {
            f();
            add(name, seconds_since(start));
        } else {
            auto r = f();
            add(name, seconds_since(start));
            return r;
        }
    }

    static double seconds_since(std::chrono::steady_clock::time_point start) {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    }
};

struct Engine {
    EngineConfig config;  // resolved
    Dataset dataset;
    Catalog catalog;
    Greg greg;
    TemporalSplit split;
    Matrix group_attr;
    Matrix item_attr;
    std::vector<SampledSubgraph> subgraphs;
    ModelState model;     // last snapshot, group embeddings replaced by the predicted profiles
    Vec influence;        // item-agnostic influence score per group
    Matrix index_features;
    UgIndex index;
    Timings timings;
};

inline Dataset load_dataset(const EngineConfig& c) {
    if (c.interactions_path.empty()) return generate_synthetic(c.synthetic);
    Dataset ds = load_interactions(c.interactions_path);
    load_memberships(c.members_path, ds);
    if (!c.group_tags_path.empty()) ds.group_tags = load_tags(c.group_tags_path);
    if (!c.item_tags_path.empty()) ds.item_tags = load_tags(c.item_tags_path);
    validate(ds);
    return ds;
}

/// One row per id: the hashed bag of that id's tags.
inline Matrix tag_features(const std::vector<std::string>& ids, const std::map<std::string, std::vector<std::string>>& tags,
                           std::size_t dim, std::uint64_t seed) {
    Matrix out(ids.size(), dim);
    static const std::vector<std::string> none;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        auto it = tags.find(ids[i]);
        const Vec f = featurize_tags(it == tags.end() ? none : it->second, dim, seed);
        std::copy(f.begin(), f.end(), out.row(i).begin());
    }
    return out;
}

/// Loads data and derives the catalog, group graph, split and tag features.
inline Engine prepare_engine(const EngineConfig& config) {
    Engine e;
    e.config = config.resolved();
    e.config.validate();
    e.timings.time("load", [&] {
        e.dataset = load_dataset(e.config);
        e.catalog = Catalog(e.dataset);
        e.greg = build_greg(e.dataset, e.catalog, e.config.min_shared_users);
        e.split = split_temporal(e.dataset, e.catalog, e.config.train_fraction, e.config.num_snapshots);
        const std::uint64_t tag_seed = derive_seed(e.config.seed, 7);
        e.group_attr = tag_features(e.catalog.groups(), e.dataset.group_tags, e.config.ggcn.attr_dim, tag_seed);
        e.item_attr = tag_features(e.catalog.items(), e.dataset.item_tags, e.config.ggcn.attr_dim, tag_seed);
    });
    return e;
}

/// Per-snapshot training (on sampled subgraphs when enabled), short-term
/// fine-tuning and next-step profile prediction.
inline void train_engine(Engine& e) {
    const auto& c = e.config;
    ModelState initial = make_model(c.ggcn, e.group_attr, e.item_attr);
    std::vector<PropagationGraph> graphs;
    if (c.use_ges) {
        e.timings.time("ges", [&] {
            std::vector<Matrix> layers;
            if (c.ges.mode == ProbabilityMode::exact) {
                ModelState probe = initial;
                set_history(probe, e.split.training());
                layers = layer_embeddings(probe, e.greg);
                layers.pop_back();  // inputs of layers 1..L
            }
            e.subgraphs = run_ges(e.split, e.greg, e.group_attr, c.ges, layers);
            for (const auto& s : e.subgraphs) graphs.push_back(estimator_graph(e.greg, s));
        });
    }
    const auto states = e.timings.time(
        "train", [&] { return train_snapshot_sequence(initial, e.split, e.greg, c.ggcn, c.epochs, graphs); });
    e.timings.time("profiles", [&] {
        std::vector<Matrix> long_term, short_term;
        for (std::size_t t = 0; t < states.size(); ++t) {
            long_term.push_back(states[t].group_embedding);
            short_term.push_back(
                fine_tune_short_term(states[t], e.greg, e.split.snapshots[t], c.ggcn, c.fine_tune_epochs));
        }
        e.model = states.back();
        if (states.size() >= 2) {
            const auto profiles = build_profiles(long_term, short_term);
            RnnAutoencoder rnn = make_rnn(profiles[0].cols, c.rnn);
            train_rnn(rnn, profiles, c.rnn);
            e.model.group_embedding = profile_embedding(predict_next(profiles, rnn));
        } else {
            Matrix both(long_term[0].rows, 2 * long_term[0].cols);
            for (std::size_t g = 0; g < both.rows; ++g) {
                std::copy(long_term[0].row(g).begin(), long_term[0].row(g).end(), both.row(g).begin());
                std::copy(short_term[0].row(g).begin(), short_term[0].row(g).end(),
                          both.row(g).begin() + static_cast<std::ptrdiff_t>(long_term[0].cols));
            }
            e.model.group_embedding = profile_embedding(both);
        }
    });
}

/// Mean of the item embeddings; the probe item for item-agnostic influence.
inline Vec mean_item_embedding(const ModelState& s) {
    Vec mean(s.item_embedding.cols, 0.0);
    if (s.item_embedding.rows == 0) return mean;
    for (std::size_t v = 0; v < s.item_embedding.rows; ++v) axpy(1.0, s.item_embedding.row(v), mean);
    for (double& x : mean) x /= static_cast<double>(s.item_embedding.rows);
    return mean;
}

inline void compute_influence(Engine& e) {
    e.timings.time("influence", [&] {
        e.influence.assign(e.catalog.num_groups(), 0.0);
        if (!e.config.use_dyic || e.catalog.num_groups() == 0) return;
        const Vec probe = mean_item_embedding(e.model);
        const auto graph = build_diiprog(e.greg, e.model.group_embedding, probe, e.catalog.num_items(), e.config.dyic,
                                         e.split);
        e.influence = influence_scores(graph, e.config.dyic);
    });
}

/// Stored row [(1 - alpha_r) h_g ; alpha_r s_g]; with the query [e_v ; 1]
/// the inner product is the relevance score.
inline Matrix relevance_features(const ModelState& s, std::span<const double> influence, double alpha_r) {
    const std::size_t d = s.embed_dim;
    Matrix out(s.num_groups(), d + 1);
    for (std::size_t g = 0; g < s.num_groups(); ++g) {
        const Vec h = history_embedding(s.group_embedding.row(g), s.history[g], s.item_embedding);
        for (std::size_t i = 0; i < d; ++i) out(g, i) = (1.0 - alpha_r) * h[i];
        out(g, d) = alpha_r * influence[g];
    }
    return out;
}

inline Vec item_query(const ModelState& s, std::size_t item) {
    if (item >= s.num_items()) throw UnknownItem(std::to_string(item));
    Vec q(s.item_embedding.row(item).begin(), s.item_embedding.row(item).end());
    q.push_back(1.0);
    return q;
}

inline void build_engine_index(Engine& e) {
    e.index_features = relevance_features(e.model, e.influence, e.config.ggcn.alpha_r);
    if (!e.config.use_index) return;
    e.timings.time("index", [&] { e.index = build_index(e.catalog.groups(), e.index_features, e.config.index); });
}

inline Engine build_engine(const EngineConfig& config) {
    Engine e = prepare_engine(config);
    train_engine(e);
    compute_influence(e);
    build_engine_index(e);
    return e;
}

// ---------------------------------------------------------------------------
// Artifacts
// ---------------------------------------------------------------------------

inline void save_engine(const Engine& e, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    {
        std::ofstream out(dir / "model.bin", std::ios::binary);
        save_model(e.model, out);
    }
    {
        std::ofstream out(dir / "influence.csv");
        out << "group_id,score\n";
        for (std::size_t g = 0; g < e.influence.size(); ++g) {
            out << e.catalog.group_id(g) << ',' << detail::format_double(e.influence[g]) << '\n';
        }
    }
    if (e.config.use_index) {
        std::ofstream out(dir / "index.bin", std::ios::binary);
        save_index(e.index, out);
    }
}

/// Rebuilds the data-derived state from the config and reads the trained
/// model, influence scores and (if present) the index from `dir`.
inline Engine load_engine(const EngineConfig& config, const std::filesystem::path& dir) {
    Engine e = prepare_engine(config);
    {
        std::ifstream in(dir / "model.bin", std::ios::binary);
        if (!in) throw InvalidConfig("no trained model in " + dir.string());
        e.model = load_model(in);
    }
    if (e.model.num_groups() != e.catalog.num_groups() || e.model.num_items() != e.catalog.num_items()) {
        throw DimensionMismatch("model does not match the configured data");
    }
    e.influence.assign(e.catalog.num_groups(), 0.0);
    {
        std::ifstream in(dir / "influence.csv");
        if (!in) throw InvalidConfig("no influence scores in " + dir.string());
        for (auto& [group, score] : parse_pairs(in, "group_id,score")) {
            if (!detail::parse_double(score, e.influence[e.catalog.group_index(group)])) {
                throw CorruptFile("bad influence score for " + group);
            }
        }
    }
    e.index_features = relevance_features(e.model, e.influence, e.config.ggcn.alpha_r);
    if (e.config.use_index) {
        std::ifstream in(dir / "index.bin", std::ios::binary);
        if (in) {
            e.index = load_index(in);
        } else {
            build_engine_index(e);
        }
    }
    return e;
}

// ---------------------------------------------------------------------------
// Recommendation
// ---------------------------------------------------------------------------

struct Recommendation {
    std::size_t item = 0;
    std::vector<std::pair<std::string, double>> groups;  // score-descending, ties by id
};

struct RecommendationBatch {
    std::vector<Recommendation> lists;
    std::size_t distinct_keys = 0;  // hash lookups shared by items with equal keys
    Timings timings;
};

/// Top-k groups for each item, through the index or by exact scoring.
inline RecommendationBatch recommend_stream(const Engine& e, std::span<const std::size_t> items, std::size_t k) {
    if (k == 0) throw InvalidConfig("k must be positive");
    RecommendationBatch batch;
    Matrix queries(items.size(), e.index_features.cols);
    batch.timings.time("embed", [&] {
        for (std::size_t i = 0; i < items.size(); ++i) {
            const Vec q = item_query(e.model, items[i]);
            std::copy(q.begin(), q.end(), queries.row(i).begin());
        }
    });
    std::vector<KnnResult> results;
    batch.timings.time("query", [&] {
        if (e.config.use_index) {
            if (e.index.empty()) throw EmptyIndex("index not built");
            std::set<std::uint64_t> keys;
            for (std::size_t i = 0; i < queries.rows; ++i) keys.insert(e.index.query_key(queries.row(i)));
            batch.distinct_keys = keys.size();
            results = query_batch(e.index, queries, k);
        } else {
            batch.distinct_keys = queries.rows;
            for (std::size_t i = 0; i < queries.rows; ++i) {
                results.push_back(exact_top_k(e.index_features, e.catalog.groups(), queries.row(i), k));
            }
        }
    });
    for (std::size_t i = 0; i < items.size(); ++i) batch.lists.push_back({items[i], std::move(results[i].hits)});
    return batch;
}

/// `item_id,rank,group_id,score`, ranks counted from 1.
inline void write_recommendations_csv(const RecommendationBatch& batch, const Catalog& catalog, std::ostream& out) {
    out << "item_id,rank,group_id,score\n";
    for (const auto& rec : batch.lists) {
        for (std::size_t r = 0; r < rec.groups.size(); ++r) {
            out << catalog.item_id(rec.item) << ',' << r + 1 << ',' << rec.groups[r].first << ','
                << detail::format_double(rec.groups[r].second) << '\n';
        }
    }
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Rank (from 1) of `truth` among the first k entries, or 0.
inline std::size_t rank_within(const std::vector<std::string>& list, const std::string& truth, std::size_t k) {
    const std::size_t n = std::min(k, list.size());
    for (std::size_t r = 0; r < n; ++r) {
        if (list[r] == truth) return r + 1;
    }
    return 0;
}

/// Share of cases whose true group is in the first k entries of its list.
inline double hr_at_k(std::span<const std::vector<std::string>> lists, std::span<const std::string> truth,
                      std::size_t k) {
    if (lists.size() != truth.size()) throw DimensionMismatch("one list per test case");
    if (lists.empty()) return 0.0;
    std::size_t hits = 0;
    for (std::size_t i = 0; i < lists.size(); ++i) hits += rank_within(lists[i], truth[i], k) > 0;
    return static_cast<double>(hits) / static_cast<double>(lists.size());
}

/// Mean of 1/log2(rank + 1) over cases, misses counting 0.
inline double ndcg_at_k(std::span<const std::vector<std::string>> lists, std::span<const std::string> truth,
                        std::size_t k) {
    if (lists.size() != truth.size()) throw DimensionMismatch("one list per test case");
    if (lists.empty()) return 0.0;
    double total = 0.0;
    for (std::size_t i = 0; i < lists.size(); ++i) {
        const std::size_t r = rank_within(lists[i], truth[i], k);
        if (r > 0) total += 1.0 / std::log2(static_cast<double>(r) + 1.0);
    }
    return total / static_cast<double>(lists.size());
}

struct TestCase {
    std::size_t group = 0;
    std::size_t item = 0;

    auto operator<=>(const TestCase&) const = default;
};

/// Distinct (group, item) pairs of the held-out events, sorted.
inline std::vector<TestCase> test_cases(const TemporalSplit& split) {
    std::vector<TestCase> cases;
    for (const auto& ev : split.test_set) cases.push_back({ev.group, ev.item});
    std::sort(cases.begin(), cases.end());
    cases.erase(std::unique(cases.begin(), cases.end()), cases.end());
    return cases;
}

struct MetricsReport {
    std::vector<std::size_t> ks;
    Vec hr;
    Vec ndcg;
    double sigma_inf = 0.0;
    std::size_t num_cases = 0;
    std::size_t num_items = 0;
    Timings timings;  // kept out of the report files

    double hr_at(std::size_t k) const {
        for (std::size_t i = 0; i < ks.size(); ++i) {
            if (ks[i] == k) return hr[i];
        }
        throw InvalidConfig("no HR at " + std::to_string(k));
    }
};

/// Cascade settings for sigma_inf: a fixed threshold makes each cascade
/// deterministic, so one replication suffices.
inline PropagationParams evaluation_params(const EngineConfig& c) {
    PropagationParams p = c.dyic;
    p.threshold_mode = ThresholdMode::fixed;
    p.tau = c.eval_tau;
    p.replications = 1;
    return p;
}

/// Ranks every group for each held-out item and scores the held-out groups;
/// sigma_inf is measured on the top-k lists.
inline MetricsReport evaluate(const Engine& e) {
    MetricsReport report;
    report.ks = e.config.eval_ks;
    const auto cases = test_cases(e.split);
    report.num_cases = cases.size();
    std::vector<std::size_t> items;
    for (const auto& tc : cases) items.push_back(tc.item);
    std::sort(items.begin(), items.end());
    items.erase(std::unique(items.begin(), items.end()), items.end());
    report.num_items = items.size();

    const auto batch = recommend_stream(e, items, e.config.max_cutoff());
    for (const auto& [name, secs] : batch.timings.stages) report.timings.add("recommend_" + name, secs);
    std::map<std::size_t, std::vector<std::string>> ranked;
    for (const auto& rec : batch.lists) {
        auto& ids = ranked[rec.item];
        for (const auto& [g, score] : rec.groups) ids.push_back(g);
    }
    std::vector<std::vector<std::string>> lists;
    std::vector<std::string> truth;
    for (const auto& tc : cases) {
        lists.push_back(ranked[tc.item]);
        truth.push_back(e.catalog.group_id(tc.group));
    }
    for (std::size_t k : report.ks) {
        report.hr.push_back(hr_at_k(lists, truth, k));
        report.ndcg.push_back(ndcg_at_k(lists, truth, k));
    }

    report.timings.time("sigma_inf", [&] {
        const auto params = evaluation_params(e.config);
        const auto counts = activity_counts(e.split, e.greg.num_nodes, params.recent_window);
        std::vector<std::vector<std::size_t>> seeds;
        std::vector<Diiprog> graphs;
        for (const auto& rec : batch.lists) {
            std::vector<std::size_t> s;
            for (std::size_t r = 0; r < std::min(e.config.k, rec.groups.size()); ++r) {
                s.push_back(e.catalog.group_index(rec.groups[r].first));
            }
            seeds.push_back(std::move(s));
            graphs.push_back(build_diiprog(e.greg, e.model.group_embedding, e.model.item_embedding.row(rec.item),
                                           rec.item, params, counts));
        }
        report.sigma_inf = sigma_inf(seeds, graphs, params);
    });
    return report;
}

/// `metric,k,value` rows; identical runs give identical bytes.
inline void write_report_csv(const MetricsReport& r, std::ostream& out) {
    out << "metric,k,value\n";
    for (std::size_t i = 0; i < r.ks.size(); ++i) out << "hr," << r.ks[i] << ',' << detail::format_double(r.hr[i]) << '\n';
    for (std::size_t i = 0; i < r.ks.size(); ++i) {
        out << "ndcg," << r.ks[i] << ',' << detail::format_double(r.ndcg[i]) << '\n';
    }
    out << "sigma_inf,," << detail::format_double(r.sigma_inf) << '\n';
    out << "test_cases,," << r.num_cases << '\n';
    out << "test_items,," << r.num_items << '\n';
}

/// Plot-ready `k,hr,ndcg` table.
inline void write_metrics_table(const MetricsReport& r, std::ostream& out) {
    out << "k,hr,ndcg\n";
    for (std::size_t i = 0; i < r.ks.size(); ++i) {
        out << r.ks[i] << ',' << detail::format_double(r.hr[i]) << ',' << detail::format_double(r.ndcg[i]) << '\n';
    }
}

inline void write_timings_csv(const Timings& t, std::ostream& out) {
    out << "stage,seconds\n";
    for (const auto& [name, secs] : t.stages) out << name << ',' << detail::format_double(secs) << '\n';
}

}  // namespace eigr
