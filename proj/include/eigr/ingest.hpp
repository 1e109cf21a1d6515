#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <tuple>
#include <istream>
#include <map>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "eigr/common.hpp"

namespace eigr {

/// One timestamped group-item event.
struct Interaction {
    std::string group_id;
    std::string item_id;
    std::int64_t timestamp = 0;
    double weight = 1.0;

    bool operator==(const Interaction&) const = default;
};

struct Dataset {
    std::vector<Interaction> interactions;  // nondecreasing timestamp
    std::map<std::string, std::set<std::string>> group_members;
    std::map<std::string, std::vector<std::string>> item_tags;
    std::map<std::string, std::vector<std::string>> group_tags;
    bool has_weight_column = false;
};

namespace detail {

inline std::vector<std::string_view> split_csv_line(std::string_view line) {
    std::vector<std::string_view> fields;
    std::size_t start = 0;
    while (true) {
        const std::size_t comma = line.find(',', start);
        if (comma == std::string_view::npos) {
            fields.push_back(line.substr(start));
            break;
        }
        fields.push_back(line.substr(start, comma - start));
        start = comma + 1;
    }
    return fields;
}

inline std::string_view chomp(std::string_view s) {
    if (!s.empty() && s.back() == '\r') s.remove_suffix(1);
    return s;
}

inline bool parse_int64(std::string_view s, std::int64_t& out) {
    if (s.empty()) return false;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    return ec == std::errc() && ptr == s.data() + s.size();
}

inline bool parse_double(std::string_view s, double& out) {
    if (s.empty()) return false;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    return ec == std::errc() && ptr == s.data() + s.size();
}

inline std::string format_double(double v) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, ptr);
}

inline std::ifstream open_input(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path);
    return in;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Loading
// ---------------------------------------------------------------------------

/// Parses `group_id,item_id,timestamp[,weight]` rows. Rows are stably sorted
/// by timestamp; every group seen gets a (possibly empty) membership entry.
inline Dataset parse_interactions(std::istream& in) {
    Dataset ds;
    std::string line;
    std::size_t line_no = 0;
    if (!std::getline(in, line)) throw EmptyFile("no header");
    ++line_no;
    const std::string_view header = detail::chomp(line);
    if (header == "group_id,item_id,timestamp,weight") {
        ds.has_weight_column = true;
    } else if (header != "group_id,item_id,timestamp") {
        throw MalformedRow(1, "unexpected header '" + std::string(header) + "'");
    }
    const std::size_t expected = ds.has_weight_column ? 4 : 3;

    while (std::getline(in, line)) {
        ++line_no;
        const std::string_view row = detail::chomp(line);
        if (row.empty()) continue;
        const auto fields = detail::split_csv_line(row);
        if (fields.size() != expected) {
            throw MalformedRow(line_no, "expected " + std::to_string(expected) + " fields");
        }
        Interaction it;
        it.group_id = std::string(fields[0]);
        it.item_id = std::string(fields[1]);
        if (it.group_id.empty() || it.item_id.empty()) throw MalformedRow(line_no, "empty identifier");
        if (!detail::parse_int64(fields[2], it.timestamp) || it.timestamp < 0) {
            throw MalformedRow(line_no, "timestamp must be a nonnegative integer");
        }
        if (ds.has_weight_column) {
            if (!detail::parse_double(fields[3], it.weight) || !(it.weight >= 0) || !std::isfinite(it.weight)) {
                throw MalformedRow(line_no, "weight must be a nonnegative real");
            }
        }
        ds.interactions.push_back(std::move(it));
    }
    if (ds.interactions.empty()) throw EmptyFile("zero data rows");

    std::stable_sort(ds.interactions.begin(), ds.interactions.end(),
                     [](const Interaction& a, const Interaction& b) { return a.timestamp < b.timestamp; });
    for (const auto& it : ds.interactions) ds.group_members[it.group_id];
    return ds;
}

inline Dataset load_interactions(const std::string& path) {
    auto in = detail::open_input(path);
    return parse_interactions(in);
}

/// Writes interactions in the same CSV dialect they are read in. Weights use
/// the shortest round-trip representation.
inline void write_interactions(const Dataset& ds, std::ostream& out) {
    out << (ds.has_weight_column ? "group_id,item_id,timestamp,weight\n" : "group_id,item_id,timestamp\n");
    for (const auto& it : ds.interactions) {
        out << it.group_id << ',' << it.item_id << ',' << it.timestamp;
        if (ds.has_weight_column) out << ',' << detail::format_double(it.weight);
        out << '\n';
    }
}

/// Reads a two-column CSV with the given header into (key, value) rows.
inline std::vector<std::pair<std::string, std::string>> parse_pairs(std::istream& in,
                                                                    std::string_view expected_header) {
    std::vector<std::pair<std::string, std::string>> rows;
    std::string line;
    std::size_t line_no = 0;
    if (!std::getline(in, line)) throw EmptyFile("no header");
    ++line_no;
    if (detail::chomp(line) != expected_header) {
        throw MalformedRow(1, "expected header '" + std::string(expected_header) + "'");
    }
    while (std::getline(in, line)) {
        ++line_no;
        const std::string_view row = detail::chomp(line);
        if (row.empty()) continue;
        const auto fields = detail::split_csv_line(row);
        if (fields.size() != 2 || fields[0].empty() || fields[1].empty()) {
            throw MalformedRow(line_no, "expected two nonempty fields");
        }
        rows.emplace_back(std::string(fields[0]), std::string(fields[1]));
    }
    return rows;
}

/// Merges `group_id,user_id` rows into the dataset's membership map.
inline void parse_memberships(std::istream& in, Dataset& ds) {
    for (auto& [group, user] : parse_pairs(in, "group_id,user_id")) {
        ds.group_members[group].insert(std::move(user));
    }
}

inline void load_memberships(const std::string& path, Dataset& ds) {
    auto in = detail::open_input(path);
    parse_memberships(in, ds);
}

inline std::map<std::string, std::vector<std::string>> parse_tags(std::istream& in) {
    std::map<std::string, std::vector<std::string>> tags;
    for (auto& [entity, tag] : parse_pairs(in, "entity_id,tag")) tags[entity].push_back(std::move(tag));
    return tags;
}

inline std::map<std::string, std::vector<std::string>> load_tags(const std::string& path) {
    auto in = detail::open_input(path);
    return parse_tags(in);
}

/// Checks the dataset-level invariants; throws InvalidDataset.
inline void validate(const Dataset& ds) {
    std::int64_t last = std::numeric_limits<std::int64_t>::min();
    for (const auto& it : ds.interactions) {
        if (it.timestamp < last) throw InvalidDataset("interactions not sorted by timestamp");
        last = it.timestamp;
        if (!ds.group_members.contains(it.group_id)) {
            throw InvalidDataset("group '" + it.group_id + "' has no membership entry");
        }
    }
}

// ---------------------------------------------------------------------------
// Dense id catalog
// ---------------------------------------------------------------------------

/// Interaction with ids resolved to dense indices.
struct Event {
    std::size_t group = 0;
    std::size_t item = 0;
    std::int64_t timestamp = 0;
    double weight = 1.0;

    bool operator==(const Event&) const = default;
};

/// Sorted id <-> dense index maps for groups and items.
class Catalog {
public:
    Catalog() = default;

    explicit Catalog(const Dataset& ds) {
        std::set<std::string> items;
        for (const auto& [g, members] : ds.group_members) groups_.push_back(g);
        for (const auto& it : ds.interactions) items.insert(it.item_id);
        for (const auto& [item, tags] : ds.item_tags) items.insert(item);
        items_.assign(items.begin(), items.end());
        reindex();
    }

    Catalog(std::vector<std::string> groups, std::vector<std::string> items)
        : groups_(std::move(groups)), items_(std::move(items)) {
        reindex();
    }

    std::size_t num_groups() const { return groups_.size(); }
    std::size_t num_items() const { return items_.size(); }
    const std::vector<std::string>& groups() const { return groups_; }
    const std::vector<std::string>& items() const { return items_; }
    const std::string& group_id(std::size_t g) const { return groups_.at(g); }
    const std::string& item_id(std::size_t v) const { return items_.at(v); }

    std::size_t group_index(const std::string& id) const {
        auto it = group_index_.find(id);
        if (it == group_index_.end()) throw UnknownGroup(id);
        return it->second;
    }
    std::size_t item_index(const std::string& id) const {
        auto it = item_index_.find(id);
        if (it == item_index_.end()) throw UnknownItem(id);
        return it->second;
    }
    bool has_item(const std::string& id) const { return item_index_.contains(id); }
    bool has_group(const std::string& id) const { return group_index_.contains(id); }

    std::vector<Event> events(const Dataset& ds) const {
        std::vector<Event> out;
        out.reserve(ds.interactions.size());
        for (const auto& it : ds.interactions) {
            out.push_back({group_index(it.group_id), item_index(it.item_id), it.timestamp, it.weight});
        }
        return out;
    }

private:
    void reindex() {
        group_index_.clear();
        item_index_.clear();
        for (std::size_t i = 0; i < groups_.size(); ++i) group_index_.emplace(groups_[i], i);
        for (std::size_t i = 0; i < items_.size(); ++i) item_index_.emplace(items_[i], i);
    }

    std::vector<std::string> groups_;
    std::vector<std::string> items_;
    std::unordered_map<std::string, std::size_t> group_index_;
    std::unordered_map<std::string, std::size_t> item_index_;
};

// ---------------------------------------------------------------------------
// Group relationship graph
// ---------------------------------------------------------------------------

struct GregEdge {
    std::size_t u = 0;  // u < v
    std::size_t v = 0;
    double weight = 0.0;

    bool operator==(const GregEdge&) const = default;
};

/// Undirected weighted graph over dense group indices. Edges are sorted by
/// (u, v); adjacency lists are sorted.
struct Greg {
    std::size_t num_nodes = 0;
    std::vector<GregEdge> edges;
    std::vector<std::vector<std::size_t>> adjacency;

    std::size_t degree(std::size_t g) const { return adjacency[g].size(); }

    static Greg from_edges(std::size_t n, std::vector<GregEdge> edge_list) {
        Greg g;
        g.num_nodes = n;
        for (auto& e : edge_list) {
            if (e.u == e.v) throw InvalidDataset("self-loop in group graph");
            if (e.u > e.v) std::swap(e.u, e.v);
            if (!(e.weight > 0)) throw InvalidDataset("edge weight must be positive");
        }
        std::sort(edge_list.begin(), edge_list.end(),
                  [](const GregEdge& a, const GregEdge& b) { return std::tie(a.u, a.v) < std::tie(b.u, b.v); });
        edge_list.erase(std::unique(edge_list.begin(), edge_list.end(),
                                    [](const GregEdge& a, const GregEdge& b) { return a.u == b.u && a.v == b.v; }),
                        edge_list.end());
        g.edges = std::move(edge_list);
        g.adjacency.assign(n, {});
        for (const auto& e : g.edges) {
            g.adjacency[e.u].push_back(e.v);
            g.adjacency[e.v].push_back(e.u);
        }
        for (auto& adj : g.adjacency) std::sort(adj.begin(), adj.end());
        return g;
    }

    /// Index of edge (a, b) in `edges`, or npos.
    std::size_t find_edge(std::size_t a, std::size_t b) const {
        if (a > b) std::swap(a, b);
        auto it = std::lower_bound(edges.begin(), edges.end(), std::make_pair(a, b),
                                   [](const GregEdge& e, const std::pair<std::size_t, std::size_t>& key) {
                                       return std::tie(e.u, e.v) < std::tie(key.first, key.second);
                                   });
        if (it != edges.end() && it->u == a && it->v == b) return static_cast<std::size_t>(it - edges.begin());
        return static_cast<std::size_t>(-1);
    }
};

/// Links every pair of groups sharing at least `min_shared_users` members;
/// the edge weight is the shared-member count.
inline Greg build_greg(const Dataset& ds, const Catalog& catalog, std::size_t min_shared_users = 1) {
    if (min_shared_users == 0) throw InvalidConfig("min_shared_users must be positive");
    std::map<std::string, std::vector<std::size_t>> user_groups;
    for (const auto& [gid, members] : ds.group_members) {
        const std::size_t g = catalog.group_index(gid);
        for (const auto& user : members) user_groups[user].push_back(g);
    }
    std::map<std::pair<std::size_t, std::size_t>, std::size_t> shared;
    for (auto& [user, groups] : user_groups) {
        std::sort(groups.begin(), groups.end());
        for (std::size_t i = 0; i < groups.size(); ++i) {
            for (std::size_t j = i + 1; j < groups.size(); ++j) ++shared[{groups[i], groups[j]}];
        }
    }
    std::vector<GregEdge> edges;
    for (const auto& [pair, count] : shared) {
        if (count >= min_shared_users) edges.push_back({pair.first, pair.second, static_cast<double>(count)});
    }
    return Greg::from_edges(catalog.num_groups(), std::move(edges));
}

// ---------------------------------------------------------------------------
// Temporal split
// ---------------------------------------------------------------------------

struct TemporalSplit {
    std::vector<std::vector<Event>> snapshots;
    double train_fraction = 0.8;
    std::vector<Event> test_set;

    std::size_t num_snapshots() const { return snapshots.size(); }

    std::vector<Event> training() const {
        std::vector<Event> all;
        for (const auto& s : snapshots) all.insert(all.end(), s.begin(), s.end());
        return all;
    }

    /// Union of snapshots [0, t] (inclusive, zero-based).
    std::vector<Event> prefix(std::size_t t) const {
        std::vector<Event> all;
        for (std::size_t i = 0; i <= t && i < snapshots.size(); ++i) {
            all.insert(all.end(), snapshots[i].begin(), snapshots[i].end());
        }
        return all;
    }
};

/// Number of training events for a chronological split: the floor of
/// fraction * n, guarded against representation error.
inline std::size_t training_count(std::size_t n, double train_fraction) {
    const double raw = train_fraction * static_cast<double>(n);
    auto count = static_cast<std::size_t>(std::floor(raw + 1e-9));
    return std::min(count, n);
}

/// Chronological split: the earliest events form the training prefix, which
/// is cut into equal-count snapshots with the remainder in the last one.
inline TemporalSplit split_temporal(const std::vector<Event>& events, double train_fraction,
                                    std::size_t num_snapshots) {
    if (!(train_fraction > 0.0 && train_fraction <= 1.0)) throw InvalidConfig("train_fraction must be in (0,1]");
    if (num_snapshots == 0) throw InvalidConfig("num_snapshots must be positive");
    std::size_t train = training_count(events.size(), train_fraction);
    // events sharing the boundary timestamp stay on the training side
    while (train > 0 && train < events.size() && events[train].timestamp == events[train - 1].timestamp) ++train;
    if (train < num_snapshots) {
        throw InsufficientData(std::to_string(train) + " training events for " + std::to_string(num_snapshots) +
                               " snapshots");
    }
    TemporalSplit split;
    split.train_fraction = train_fraction;
    const std::size_t per = train / num_snapshots;
    std::size_t pos = 0;
    for (std::size_t t = 0; t < num_snapshots; ++t) {
        const std::size_t len = (t + 1 == num_snapshots) ? train - pos : per;
        split.snapshots.emplace_back(events.begin() + static_cast<std::ptrdiff_t>(pos),
                                     events.begin() + static_cast<std::ptrdiff_t>(pos + len));
        pos += len;
    }
    split.test_set.assign(events.begin() + static_cast<std::ptrdiff_t>(train), events.end());
    return split;
}

inline TemporalSplit split_temporal(const Dataset& ds, const Catalog& catalog, double train_fraction,
                                    std::size_t num_snapshots) {
    return split_temporal(catalog.events(ds), train_fraction, num_snapshots);
}

// ---------------------------------------------------------------------------
// Tag featurizer
// ---------------------------------------------------------------------------

/// Unit vector for one tag; a seeded hash of the tag drives a Gaussian draw.
inline Vec hashed_tag_vector(const std::string& tag, std::size_t dim, std::uint64_t seed) {
    Rng rng(derive_seed(seed, fnv1a64(tag)));
    std::normal_distribution<double> normal(0.0, 1.0);
    Vec v(dim);
    double n2 = 0.0;
    while (n2 == 0.0) {
        for (double& x : v) x = normal(rng);
        n2 = norm2(v);
    }
    const double inv = 1.0 / std::sqrt(n2);
    for (double& x : v) x *= inv;
    return v;
}

/// Mean of the hashed unit vectors of `tags`; zero vector for no tags.
inline Vec featurize_tags(const std::vector<std::string>& tags, std::size_t dim, std::uint64_t seed) {
    if (dim == 0) throw InvalidConfig("featurize_tags: dim must be positive");
    Vec out(dim, 0.0);
    if (tags.empty()) return out;
    for (const auto& tag : tags) axpy(1.0, hashed_tag_vector(tag, dim, seed), out);
    for (double& x : out) x /= static_cast<double>(tags.size());
    return out;
}

// ---------------------------------------------------------------------------
// Statistics
// ---------------------------------------------------------------------------

struct DatasetStats {
    std::size_t users = 0;
    std::size_t items = 0;
    std::size_t groups = 0;
    std::size_t interactions = 0;
    double avg_items_per_group = 0.0;
    double avg_groups_per_user = 0.0;
};

inline DatasetStats compute_stats(const Dataset& ds) {
    DatasetStats s;
    std::set<std::string> users;
    std::size_t memberships = 0;
    for (const auto& [g, members] : ds.group_members) {
        users.insert(members.begin(), members.end());
        memberships += members.size();
    }
    std::set<std::string> items;
    std::map<std::string, std::set<std::string>> group_items;
    for (const auto& it : ds.interactions) {
        items.insert(it.item_id);
        group_items[it.group_id].insert(it.item_id);
    }
    s.users = users.size();
    s.items = items.size();
    s.groups = ds.group_members.size();
    s.interactions = ds.interactions.size();
    std::size_t distinct = 0;
    for (const auto& [g, its] : group_items) distinct += its.size();
    s.avg_items_per_group = s.groups ? static_cast<double>(distinct) / static_cast<double>(s.groups) : 0.0;
    s.avg_groups_per_user = s.users ? static_cast<double>(memberships) / static_cast<double>(s.users) : 0.0;
    return s;
}

}  // namespace eigr
