#pragma once

#include <cstdint>
#include <cstdio>
#include <map>
#include <ostream>
#include <tuple>
#include <string>
#include <vector>

#include "eigr/common.hpp"
#include "eigr/ingest.hpp"

namespace eigr {

/// Topic-structured corpus generator. Groups, users and items each belong to
/// one topic; members are drawn mostly from same-topic users, so the group
/// graph is dense within topics and sparse across them.
struct SyntheticConfig {
    std::size_t num_groups = 300;
    std::size_t num_items = 500;
    std::size_t num_users = 1200;
    std::size_t num_topics = 10;
    std::size_t members_per_group = 4;
    double member_topic_affinity = 0.95;
    std::size_t interactions_per_group = 20;
    double item_topic_affinity = 0.8;
    double drift_fraction = 0.1;  // groups switching topic halfway through the timeline
    double item_topic_tag_rate = 0.9;
    std::size_t noise_tag_vocabulary = 40;
    std::int64_t time_span = 1'000'000;
    std::uint64_t seed = 7;
};

namespace detail {

inline std::string padded_id(char prefix, std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%c%05zu", prefix, i);
    return buf;
}

}  // namespace detail

inline Dataset generate_synthetic(const SyntheticConfig& cfg) {
    if (cfg.num_groups == 0 || cfg.num_items == 0 || cfg.num_topics == 0 || cfg.num_users == 0) {
        throw InvalidConfig("synthetic corpus needs groups, items, users and topics");
    }
    Rng rng(derive_seed(cfg.seed, 0x5e7));
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const std::size_t topics = cfg.num_topics;

    std::vector<std::vector<std::size_t>> topic_users(topics), topic_items(topics);
    for (std::size_t u = 0; u < cfg.num_users; ++u) topic_users[u % topics].push_back(u);
    for (std::size_t v = 0; v < cfg.num_items; ++v) topic_items[v % topics].push_back(v);

    Dataset ds;
    ds.has_weight_column = false;

    auto noise_tag = [&] {
        std::uniform_int_distribution<std::size_t> pick(0, cfg.noise_tag_vocabulary - 1);
        return "tag" + std::to_string(pick(rng));
    };

    // items: topic tag (mostly) plus one noise tag
    for (std::size_t v = 0; v < cfg.num_items; ++v) {
        auto& tags = ds.item_tags[detail::padded_id('i', v)];
        if (unit(rng) < cfg.item_topic_tag_rate) tags.push_back("topic" + std::to_string(v % topics));
        if (cfg.noise_tag_vocabulary > 0) tags.push_back(noise_tag());
    }

    // Zipf-like popularity within each topic
    std::vector<double> popularity(cfg.num_items);
    for (std::size_t c = 0; c < topics; ++c) {
        for (std::size_t r = 0; r < topic_items[c].size(); ++r) {
            popularity[topic_items[c][r]] = 1.0 / std::sqrt(static_cast<double>(r + 1));
        }
    }

    for (std::size_t g = 0; g < cfg.num_groups; ++g) {
        const std::string gid = detail::padded_id('g', g);
        const std::size_t topic = g % topics;
        auto& members = ds.group_members[gid];
        while (members.size() < std::min(cfg.members_per_group, cfg.num_users)) {
            std::size_t user;
            if (unit(rng) < cfg.member_topic_affinity && !topic_users[topic].empty()) {
                std::uniform_int_distribution<std::size_t> pick(0, topic_users[topic].size() - 1);
                user = topic_users[topic][pick(rng)];
            } else {
                std::uniform_int_distribution<std::size_t> pick(0, cfg.num_users - 1);
                user = pick(rng);
            }
            members.insert(detail::padded_id('u', user));
        }
        auto& gtags = ds.group_tags[gid];
        gtags.push_back("topic" + std::to_string(topic));
        if (cfg.noise_tag_vocabulary > 0) gtags.push_back(noise_tag());

        const bool drifts = unit(rng) < cfg.drift_fraction;
        const std::size_t later_topic = drifts ? (topic + 1 + g / topics) % topics : topic;
        std::uniform_int_distribution<std::int64_t> when(0, cfg.time_span - 1);
        for (std::size_t k = 0; k < cfg.interactions_per_group; ++k) {
            const std::int64_t ts = when(rng);
            const std::size_t active_topic = (ts >= cfg.time_span / 2) ? later_topic : topic;
            std::size_t item;
            const auto& pool = topic_items[active_topic];
            if (unit(rng) < cfg.item_topic_affinity && !pool.empty()) {
                std::vector<double> w;
                w.reserve(pool.size());
                for (std::size_t v : pool) w.push_back(popularity[v]);
                std::discrete_distribution<std::size_t> pick(w.begin(), w.end());
                item = pool[pick(rng)];
            } else {
                std::uniform_int_distribution<std::size_t> pick(0, cfg.num_items - 1);
                item = pick(rng);
            }
            ds.interactions.push_back({gid, detail::padded_id('i', item), ts, 1.0});
        }
    }
    std::stable_sort(ds.interactions.begin(), ds.interactions.end(),
                     [](const Interaction& a, const Interaction& b) {
                         return std::tie(a.timestamp, a.group_id, a.item_id) <
                                std::tie(b.timestamp, b.group_id, b.item_id);
                     });
    return ds;
}

/// Writes the corpus as the three CSV inputs the loaders accept.
inline void write_memberships(const Dataset& ds, std::ostream& out) {
    out << "group_id,user_id\n";
    for (const auto& [g, members] : ds.group_members) {
        for (const auto& u : members) out << g << ',' << u << '\n';
    }
}

inline void write_tags(const std::map<std::string, std::vector<std::string>>& tags, std::ostream& out) {
    out << "entity_id,tag\n";
    for (const auto& [id, list] : tags) {
        for (const auto& t : list) out << id << ',' << t << '\n';
    }
}

}  // namespace eigr
