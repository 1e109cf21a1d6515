#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <istream>
#include <limits>
#include <map>
#include <ostream>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "eigr/binary_io.hpp"
#include "eigr/common.hpp"

namespace eigr {

inline constexpr std::uint64_t kMersenne61 = (std::uint64_t{1} << 61) - 1;

struct IndexConfig {
    std::size_t projection_dim = 8;  // k
    std::size_t bits_per_dim = 8;    // m
    std::size_t block_size = 512;    // B
    std::size_t bucket_count = 0;    // T; 0 means next power of two >= 2N
    std::uint64_t hash_a = 0;        // 0 means drawn from the seed
    std::uint64_t hash_b = 0;
    std::uint64_t seed = 42;

    void validate() const {
        if (projection_dim == 0 || bits_per_dim == 0) throw InvalidConfig("projection and bit widths must be positive");
        if (projection_dim * bits_per_dim > 64) throw InvalidConfig("projection_dim * bits_per_dim exceeds 64");
        if (block_size == 0) throw InvalidConfig("block_size must be positive");
        if (bucket_count != 0 && !std::has_single_bit(bucket_count)) throw InvalidConfig("bucket_count must be a power of two");
        if (hash_a >= kMersenne61 || hash_b >= kMersenne61) throw InvalidConfig("hash coefficients must be below p");
    }
};

// ---------------------------------------------------------------------------
// Building blocks
// ---------------------------------------------------------------------------

/// Appends sqrt(M^2 - ||z||^2) so that L2 distance to [q; 0] orders points as
/// the inner product with q does.
inline Vec mips_to_l2(std::span<const double> z, double norm_cap) {
    const double n2 = norm2(z);
    const double cap2 = norm_cap * norm_cap;
    if (n2 > cap2 * (1.0 + 1e-12)) throw NormExceedsCap("vector norm exceeds the cap");
    Vec out(z.begin(), z.end());
    out.push_back(std::sqrt(std::max(0.0, cap2 - n2)));
    return out;
}

inline Vec mips_query(std::span<const double> q) {
    Vec out(q.begin(), q.end());
    out.push_back(0.0);
    return out;
}

/// ((a k + b) mod p) mod T with a 128-bit intermediate.
inline std::size_t hash_key(std::uint64_t key, std::uint64_t a, std::uint64_t b, std::size_t buckets) {
    const unsigned __int128 x = static_cast<unsigned __int128>(a) * (key % kMersenne61) + b;
    return static_cast<std::size_t>(static_cast<std::uint64_t>(x % kMersenne61) % buckets);
}

/// Interleaves the m-bit cells, most significant bit first, dimension 0 first
/// within each bit plane.
inline std::uint64_t interleave_bits(std::span<const std::uint64_t> cells, std::size_t bits) {
    std::uint64_t key = 0;
    for (std::size_t b = bits; b-- > 0;) {
        for (std::uint64_t c : cells) key = key << 1 | ((c >> b) & 1);
    }
    return key;
}

struct ZorderCalibration {
    Vec lo;
    Vec hi;
};

inline std::uint64_t compute_zorder(std::span<const double> projected, const ZorderCalibration& cal, std::size_t bits) {
    const std::uint64_t max_cell = (std::uint64_t{1} << bits) - 1;
    std::vector<std::uint64_t> cells(projected.size());
    for (std::size_t i = 0; i < projected.size(); ++i) {
        const double span = cal.hi[i] - cal.lo[i];
        double t = span > 0 ? (projected[i] - cal.lo[i]) / span : 0.0;
        t = std::clamp(t, 0.0, 1.0);
        cells[i] = std::min(max_cell, static_cast<std::uint64_t>(t * static_cast<double>(max_cell + 1)));
    }
    return interleave_bits(cells, bits);
}

// ---------------------------------------------------------------------------
// FastMap
// ---------------------------------------------------------------------------

/// Pivot pairs and their projections, one pair per output dimension.
struct FastMap {
    Matrix pivots;           // 2k rows: row 2i is x_i, row 2i+1 is x'_i
    Matrix pivot_projection;  // 2k x k projected coordinates of the pivots
    Vec pivot_distance;      // residual D(x_i, x'_i)

    std::size_t dims() const { return pivot_distance.size(); }

    /// Residual squared distance at dimension i between a point with original
    /// coordinates `a` (projected `pa`) and pivot row r.
    double residual2(std::span<const double> a, std::span<const double> pa, std::size_t r, std::size_t i) const {
        double d2 = squared_distance(a, pivots.row(r));
        for (std::size_t j = 0; j < i; ++j) {
            const double diff = pa[j] - pivot_projection(r, j);
            d2 -= diff * diff;
        }
        return std::max(0.0, d2);
    }

    Vec project(std::span<const double> a) const {
        const std::size_t k = dims();
        Vec out(k, 0.0);
        for (std::size_t i = 0; i < k; ++i) {
            const double dxy = pivot_distance[i];
            if (dxy <= 0) continue;
            const double dxa2 = residual2(a, out, 2 * i, i);
            const double dya2 = residual2(a, out, 2 * i + 1, i);
            out[i] = (dxa2 + dxy * dxy - dya2) / (2.0 * dxy);
        }
        return out;
    }
};

namespace detail {

inline double residual_between(const Matrix& points, const Matrix& proj, std::size_t a, std::size_t b,
                               std::size_t dim) {
    double d2 = squared_distance(points.row(a), points.row(b));
    for (std::size_t j = 0; j < dim; ++j) {
        const double diff = proj(a, j) - proj(b, j);
        d2 -= diff * diff;
    }
    return std::max(0.0, d2);
}

}  // namespace detail

/// Farthest-pair heuristic in the residual distance after `dim` coordinates:
/// from a seeded start, five hops each jumping to the farthest point.
inline std::pair<std::size_t, std::size_t> select_reference_points(const Matrix& points, const Matrix& projected,
                                                                   std::size_t dim, std::uint64_t seed) {
    const std::size_t n = points.rows;
    if (n < 2) throw TooFewPoints("need at least two points");
    Rng rng(seed);
    std::size_t a = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
    auto farthest = [&](std::size_t from) {
        std::size_t best = from;
        double best_d = -1.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double d = detail::residual_between(points, projected, from, i, dim);
            if (d > best_d) {
                best_d = d;
                best = i;
            }
        }
        return best;
    };
    std::size_t b = farthest(a);
    for (int hop = 1; hop < 5; ++hop) {
        const std::size_t c = farthest(b);
        a = b;
        b = c;
    }
    if (a > b) std::swap(a, b);
    return {a, b};
}

inline std::pair<std::size_t, std::size_t> select_reference_points(const Matrix& points, std::uint64_t seed) {
    return select_reference_points(points, Matrix(points.rows, 0), 0, seed);
}

/// Fits k FastMap dimensions to `points` and returns the map together with
/// the projection of every point.
inline std::pair<FastMap, Matrix> fit_fastmap(const Matrix& points, std::size_t k, std::uint64_t seed) {
    FastMap fm;
    Matrix proj(points.rows, k);
    fm.pivots = Matrix(2 * k, points.cols);
    fm.pivot_projection = Matrix(2 * k, k);
    fm.pivot_distance.assign(k, 0.0);
    if (points.rows < 2) return {fm, proj};
    for (std::size_t i = 0; i < k; ++i) {
        const auto [x, y] = select_reference_points(points, proj, i, derive_seed(seed, i));
        const double dxy = std::sqrt(detail::residual_between(points, proj, x, y, i));
        std::copy(points.row(x).begin(), points.row(x).end(), fm.pivots.row(2 * i).begin());
        std::copy(points.row(y).begin(), points.row(y).end(), fm.pivots.row(2 * i + 1).begin());
        for (std::size_t j = 0; j < i; ++j) {
            fm.pivot_projection(2 * i, j) = proj(x, j);
            fm.pivot_projection(2 * i + 1, j) = proj(y, j);
        }
        fm.pivot_distance[i] = dxy;
        if (dxy > 0) {
            for (std::size_t p = 0; p < points.rows; ++p) {
                const double dxa2 = detail::residual_between(points, proj, x, p, i);
                const double dya2 = detail::residual_between(points, proj, y, p, i);
                proj(p, i) = (dxa2 + dxy * dxy - dya2) / (2.0 * dxy);
            }
        }
        fm.pivot_projection(2 * i, i) = proj(x, i);
        fm.pivot_projection(2 * i + 1, i) = proj(y, i);
    }
    return {fm, proj};
}

// ---------------------------------------------------------------------------
// Index
// ---------------------------------------------------------------------------

struct GroupEntry {
    std::uint64_t zorder = 0;
    std::uint32_t id_ref = 0;  // index into UgIndex::ids
};

struct Block {
    std::size_t begin = 0;  // entry range [begin, end)
    std::size_t end = 0;
    std::int64_t prev = -1;
    std::int64_t next = -1;
};

struct HashSlot {
    std::uint64_t key = 0;
    std::uint64_t pos = 0;   // first entry holding the key
    std::int64_t next = -1;  // next slot in the bucket chain
};

struct KnnResult {
    std::vector<std::pair<std::string, double>> hits;
    std::size_t examined = 0;
};

namespace detail {

/// Top-k of (score, row) pairs, score-descending with ties by id.
inline void rank_top(std::vector<std::pair<double, std::uint32_t>>& scored, std::size_t k,
                     std::span<const std::string> ids, KnnResult& r) {
    auto better = [&](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return ids[a.second] < ids[b.second];
    };
    k = std::min(k, scored.size());
    std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(k), scored.end(), better);
    for (std::size_t i = 0; i < k; ++i) r.hits.emplace_back(ids[scored[i].second], scored[i].first);
}

}  // namespace detail

/// Exact top-k by inner product over the rows of `features`.
inline KnnResult exact_top_k(const Matrix& features, std::span<const std::string> ids, std::span<const double> query,
                             std::size_t k) {
    if (features.rows != ids.size()) throw DimensionMismatch("one feature row per id required");
    if (features.rows > 0 && query.size() != features.cols) throw DimensionMismatch("query width differs");
    KnnResult r;
    r.examined = features.rows;
    std::vector<std::pair<double, std::uint32_t>> scored;
    scored.reserve(features.rows);
    for (std::size_t i = 0; i < features.rows; ++i) {
        scored.emplace_back(dot(features.row(i), query), static_cast<std::uint32_t>(i));
    }
    detail::rank_top(scored, k, ids, r);
    return r;
}

class UgIndex {
public:
    IndexConfig config;
    double norm_cap = 0.0;
    double median_norm = 0.0;  // first-stage query radius
    FastMap fastmap;
    ZorderCalibration calibration;
    std::vector<std::string> ids;
    Matrix features;                 // one row per id
    std::vector<GroupEntry> entries;  // sorted by zorder, then id
    std::vector<Block> blocks;
    std::vector<std::int64_t> buckets;  // head slot per bucket
    std::vector<HashSlot> slots;

    std::size_t size() const { return entries.size(); }
    bool empty() const { return entries.empty(); }
    std::size_t feature_dim() const { return features.cols; }

    /// Entries examined per query: ceil(4B/d).
    std::size_t scan_budget() const {
        const std::size_t d = std::max<std::size_t>(feature_dim(), 1);
        return (4 * config.block_size + d - 1) / d;
    }

    /// Key of the query direction placed at `radius` on the augmented sphere.
    /// Any positive rescaling of the query keeps its inner-product order, so the
    /// radius only decides where in the key space the scan starts.
    std::uint64_t query_key(std::span<const double> query, double radius) const {
        const std::size_t d = query.size();
        Vec x(d + 1, 0.0);
        const double n = norm(query);
        radius = std::clamp(radius, 0.0, norm_cap);
        if (n > 0) {
            for (std::size_t j = 0; j < d; ++j) x[j] = query[j] * radius / n;
        }
        x[d] = std::sqrt(std::max(0.0, norm_cap * norm_cap - radius * radius));
        return compute_zorder(fastmap.project(x), calibration, config.bits_per_dim);
    }

    std::uint64_t query_key(std::span<const double> query) const { return query_key(query, median_norm); }

    /// Entries examined in the first stage of a query.
    std::size_t probe_budget() const { return std::max<std::size_t>(1, scan_budget() / 8); }

    /// Two-stage scan: a short probe at the median radius finds the best stored
    /// group, then the rest of the budget is spent around the query placed at
    /// that group's norm.
    std::vector<std::size_t> refine(std::span<const double> query, std::span<const std::size_t> probe) const {
        std::vector<std::size_t> out(probe.begin(), probe.end());
        const std::size_t budget = std::min(scan_budget(), entries.size());
        if (probe.empty() || out.size() >= budget) return out;
        std::size_t best = probe.front();
        double best_score = -std::numeric_limits<double>::infinity();
        for (std::size_t p : probe) {
            const double s = dot(features.row(entries[p].id_ref), query);
            if (s > best_score) {
                best_score = s;
                best = p;
            }
        }
        const double radius = norm(features.row(entries[best].id_ref));
        std::vector<char> seen(entries.size(), 0);
        for (std::size_t p : out) seen[p] = 1;
        for (std::size_t p : candidates(query_key(query, radius), budget)) {
            if (out.size() >= budget) break;
            if (!seen[p]) {
                seen[p] = 1;
                out.push_back(p);
            }
        }
        return out;
    }

    /// Position of the first entry with this key, or -1.
    std::int64_t lookup(std::uint64_t key) const {
        if (buckets.empty()) return -1;
        for (std::int64_t s = buckets[hash_key(key, config.hash_a, config.hash_b, buckets.size())]; s >= 0;
             s = slots[s].next) {
            if (slots[s].key == key) return static_cast<std::int64_t>(slots[s].pos);
        }
        return -1;
    }

    /// First position whose key is >= `key`: hash hit, else binary search over
    /// block boundaries and then within the block.
    std::size_t locate(std::uint64_t key) const {
        const std::int64_t hit = lookup(key);
        if (hit >= 0) return static_cast<std::size_t>(hit);
        auto block = std::upper_bound(blocks.begin(), blocks.end(), key,
                                      [&](std::uint64_t k, const Block& b) { return k < entries[b.begin].zorder; });
        if (block == blocks.begin()) return 0;
        --block;
        auto it = std::lower_bound(entries.begin() + static_cast<std::ptrdiff_t>(block->begin),
                                   entries.begin() + static_cast<std::ptrdiff_t>(block->end), key,
                                   [](const GroupEntry& e, std::uint64_t k) { return e.zorder < k; });
        return static_cast<std::size_t>(it - entries.begin());
    }

    /// Candidate positions gathered outward from `key`, closer key first.
    std::vector<std::size_t> candidates(std::uint64_t key, std::size_t budget) const {
        std::vector<std::size_t> out;
        if (empty()) return out;
        const std::size_t start = locate(key);
        std::int64_t left = static_cast<std::int64_t>(start) - 1;
        std::size_t right = start;
        budget = std::min(budget, entries.size());
        while (out.size() < budget) {
            const bool has_left = left >= 0, has_right = right < entries.size();
            bool take_right = has_right;
            if (has_left && has_right) {
                const std::uint64_t dl = key - std::min(key, entries[left].zorder);
                const std::uint64_t dr = entries[right].zorder - std::min(entries[right].zorder, key);
                take_right = dr <= dl;
            }
            if (take_right) {
                out.push_back(right++);
            } else {
                out.push_back(static_cast<std::size_t>(left--));
            }
        }
        return out;
    }

    KnnResult score(std::span<const std::size_t> positions, std::span<const double> query, std::size_t k) const {
        KnnResult r;
        r.examined = positions.size();
        std::vector<std::pair<double, std::uint32_t>> scored;
        scored.reserve(positions.size());
        for (std::size_t p : positions) {
            const auto id = entries[p].id_ref;
            scored.emplace_back(dot(features.row(id), query), id);
        }
        rank_top(scored, k, r);
        return r;
    }

    void rank_top(std::vector<std::pair<double, std::uint32_t>>& scored, std::size_t k, KnnResult& r) const {
        detail::rank_top(scored, k, ids, r);
    }
};

/// Builds the index over one feature row per group id.
inline UgIndex build_index(std::span<const std::string> group_ids, const Matrix& features, const IndexConfig& config) {
    config.validate();
    if (group_ids.size() != features.rows) throw DimensionMismatch("one feature row per group id required");
    if (group_ids.size() > std::numeric_limits<std::uint32_t>::max()) throw InvalidConfig("too many groups");
    {
        std::vector<std::string> sorted(group_ids.begin(), group_ids.end());
        std::sort(sorted.begin(), sorted.end());
        const auto dup = std::adjacent_find(sorted.begin(), sorted.end());
        if (dup != sorted.end()) throw DuplicateGroupId(*dup);
    }
    UgIndex ix;
    ix.config = config;
    Rng rng(derive_seed(config.seed, 0x4A54));
    std::uniform_int_distribution<std::uint64_t> coeff(1, kMersenne61 - 1);
    const std::uint64_t a = coeff(rng), b = coeff(rng);
    if (ix.config.hash_a == 0) ix.config.hash_a = a;
    if (ix.config.hash_b == 0) ix.config.hash_b = b;
    ix.ids.assign(group_ids.begin(), group_ids.end());
    ix.features = features;
    const std::size_t n = features.rows;
    if (ix.config.bucket_count == 0) ix.config.bucket_count = std::bit_ceil(std::max<std::size_t>(2 * n, 1));
    const std::size_t k = config.projection_dim;
    ix.calibration = {Vec(k, 0.0), Vec(k, 0.0)};
    ix.fastmap.pivots = Matrix(2 * k, features.cols + 1);
    ix.fastmap.pivot_projection = Matrix(2 * k, k);
    ix.fastmap.pivot_distance.assign(k, 0.0);
    if (n == 0) return ix;

    {
        Vec norms(n);
        for (std::size_t i = 0; i < n; ++i) norms[i] = norm(features.row(i));
        ix.norm_cap = *std::max_element(norms.begin(), norms.end());
        std::nth_element(norms.begin(), norms.begin() + static_cast<std::ptrdiff_t>(n / 2), norms.end());
        ix.median_norm = norms[n / 2];
    }
    Matrix augmented(n, features.cols + 1);
    for (std::size_t i = 0; i < n; ++i) {
        const Vec z = mips_to_l2(features.row(i), ix.norm_cap);
        std::copy(z.begin(), z.end(), augmented.row(i).begin());
    }
    auto [fm, proj] = fit_fastmap(augmented, k, derive_seed(config.seed, 0xFA57));
    ix.fastmap = std::move(fm);
    for (std::size_t j = 0; j < k; ++j) {
        ix.calibration.lo[j] = std::numeric_limits<double>::infinity();
        ix.calibration.hi[j] = -std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < n; ++i) {
            ix.calibration.lo[j] = std::min(ix.calibration.lo[j], proj(i, j));
            ix.calibration.hi[j] = std::max(ix.calibration.hi[j], proj(i, j));
        }
    }
    ix.entries.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        ix.entries[i] = {compute_zorder(proj.row(i), ix.calibration, config.bits_per_dim), static_cast<std::uint32_t>(i)};
    }
    std::sort(ix.entries.begin(), ix.entries.end(), [&](const GroupEntry& x, const GroupEntry& y) {
        if (x.zorder != y.zorder) return x.zorder < y.zorder;
        return ix.ids[x.id_ref] < ix.ids[y.id_ref];
    });
    for (std::size_t s = 0; s < n; s += config.block_size) {
        Block blk{s, std::min(n, s + config.block_size), static_cast<std::int64_t>(ix.blocks.size()) - 1, -1};
        if (!ix.blocks.empty()) ix.blocks.back().next = static_cast<std::int64_t>(ix.blocks.size());
        ix.blocks.push_back(blk);
    }
    ix.buckets.assign(ix.config.bucket_count, -1);
    for (std::size_t p = 0; p < n; ++p) {
        if (p > 0 && ix.entries[p].zorder == ix.entries[p - 1].zorder) continue;
        const std::size_t bucket = hash_key(ix.entries[p].zorder, ix.config.hash_a, ix.config.hash_b, ix.buckets.size());
        ix.slots.push_back({ix.entries[p].zorder, p, ix.buckets[bucket]});
        ix.buckets[bucket] = static_cast<std::int64_t>(ix.slots.size()) - 1;
    }
    return ix;
}

/// Approximate top-k by inner product with `query`, examining at most ceil(4B/d)
/// entries near the query's keys.
inline KnnResult query_knn(const UgIndex& index, std::span<const double> query, std::size_t k) {
    if (index.empty()) throw EmptyIndex("query on an empty index");
    if (k == 0) throw InvalidConfig("k must be positive");
    if (query.size() != index.feature_dim()) throw DimensionMismatch("query width differs from stored features");
    const auto probe = index.candidates(index.query_key(query), index.probe_budget());
    return index.score(index.refine(query, probe), query, k);
}

/// Queries that map to the same first-stage key share one hash lookup and probe.
inline std::vector<KnnResult> query_batch(const UgIndex& index, const Matrix& queries, std::size_t k) {
    if (index.empty()) throw EmptyIndex("query on an empty index");
    if (queries.cols != index.feature_dim()) throw DimensionMismatch("query width differs from stored features");
    std::map<std::uint64_t, std::vector<std::size_t>> by_key;
    for (std::size_t q = 0; q < queries.rows; ++q) by_key[index.query_key(queries.row(q))].push_back(q);
    std::vector<KnnResult> out(queries.rows);
    for (const auto& [key, members] : by_key) {
        const auto probe = index.candidates(key, index.probe_budget());
        for (std::size_t q : members) out[q] = index.score(index.refine(queries.row(q), probe), queries.row(q), k);
    }
    return out;
}

/// Exact top-k by inner product over all stored features.
inline KnnResult brute_force_knn(const UgIndex& index, std::span<const double> query, std::size_t k) {
    return exact_top_k(index.features, index.ids, query, k);
}

/// Throws CorruptFile if the block list or hash table is inconsistent.
inline void check_structure(const UgIndex& index) {
    for (std::size_t p = 1; p < index.entries.size(); ++p) {
        if (index.entries[p - 1].zorder > index.entries[p].zorder) throw CorruptFile("entries out of order");
    }
    for (std::size_t b = 0; b < index.blocks.size(); ++b) {
        const auto& blk = index.blocks[b];
        if (blk.end <= blk.begin || blk.end - blk.begin > index.config.block_size) throw CorruptFile("bad block size");
        if (blk.next >= 0 && index.blocks[blk.next].prev != static_cast<std::int64_t>(b)) throw CorruptFile("bad link");
        if (blk.prev >= 0 && index.blocks[blk.prev].next != static_cast<std::int64_t>(b)) throw CorruptFile("bad link");
    }
    for (const auto& e : index.entries) {
        const auto pos = index.lookup(e.zorder);
        if (pos < 0 || index.entries.at(static_cast<std::size_t>(pos)).zorder != e.zorder) {
            throw CorruptFile("key missing from hash table");
        }
    }
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

inline constexpr char kIndexMagic[4] = {'U', 'G', 'I', 'X'};
inline constexpr std::uint32_t kIndexVersion = 1;

inline void save_index(const UgIndex& ix, std::ostream& out) {
    binary::Writer w(out);
    w.bytes(kIndexMagic, sizeof(kIndexMagic));
    w.pod(kIndexVersion);
    for (std::uint64_t v : {std::uint64_t(ix.config.projection_dim), std::uint64_t(ix.config.bits_per_dim),
                            std::uint64_t(ix.config.block_size), std::uint64_t(ix.config.bucket_count),
                            ix.config.hash_a, ix.config.hash_b, ix.config.seed}) {
        w.pod(v);
    }
    w.pod(ix.norm_cap);
    w.pod(ix.median_norm);
    w.matrix(ix.fastmap.pivots);
    w.matrix(ix.fastmap.pivot_projection);
    w.doubles(ix.fastmap.pivot_distance);
    w.doubles(ix.calibration.lo);
    w.doubles(ix.calibration.hi);
    w.pod(static_cast<std::uint64_t>(ix.ids.size()));
    for (const auto& id : ix.ids) w.string(id);
    w.matrix(ix.features);
    w.pod(static_cast<std::uint64_t>(ix.entries.size()));
    for (const auto& e : ix.entries) {
        w.pod(e.zorder);
        w.pod(e.id_ref);
    }
    w.pod(static_cast<std::uint64_t>(ix.blocks.size()));
    for (const auto& b : ix.blocks) {
        w.pod(static_cast<std::uint64_t>(b.begin));
        w.pod(static_cast<std::uint64_t>(b.end));
        w.pod(b.prev);
        w.pod(b.next);
    }
    w.pod(static_cast<std::uint64_t>(ix.buckets.size()));
    for (auto h : ix.buckets) w.pod(h);
    w.pod(static_cast<std::uint64_t>(ix.slots.size()));
    for (const auto& s : ix.slots) {
        w.pod(s.key);
        w.pod(s.pos);
        w.pod(s.next);
    }
    w.finish();
}

inline UgIndex load_index(std::istream& in) {
    binary::Reader r(in);
    char magic[4];
    r.bytes(magic, sizeof(magic));
    if (!std::equal(std::begin(magic), std::end(magic), std::begin(kIndexMagic))) throw CorruptFile("not an index file");
    const auto version = r.pod<std::uint32_t>();
    if (version != kIndexVersion) throw VersionMismatch("index format version " + std::to_string(version));
    UgIndex ix;
    ix.config.projection_dim = r.length(64);
    ix.config.bits_per_dim = r.length(64);
    ix.config.block_size = r.length();
    ix.config.bucket_count = r.length();
    ix.config.hash_a = r.pod<std::uint64_t>();
    ix.config.hash_b = r.pod<std::uint64_t>();
    ix.config.seed = r.pod<std::uint64_t>();
    const std::size_t k = ix.config.projection_dim;
    ix.norm_cap = r.pod<double>();
    ix.median_norm = r.pod<double>();
    ix.fastmap.pivots = r.matrix();
    ix.fastmap.pivot_projection = r.matrix();
    if (ix.fastmap.pivots.rows != 2 * k || ix.fastmap.pivot_projection.rows != 2 * k ||
        ix.fastmap.pivot_projection.cols != k) {
        throw CorruptFile("pivot shape mismatch");
    }
    ix.fastmap.pivot_distance.resize(k);
    r.doubles(ix.fastmap.pivot_distance);
    ix.calibration.lo.resize(k);
    ix.calibration.hi.resize(k);
    r.doubles(ix.calibration.lo);
    r.doubles(ix.calibration.hi);
    ix.ids.resize(r.length(1ULL << 32));
    for (auto& id : ix.ids) id = r.string();
    ix.features = r.matrix();
    if (ix.features.rows != ix.ids.size()) throw CorruptFile("feature rows do not match ids");
    if (ix.fastmap.pivots.cols != ix.features.cols + 1) throw CorruptFile("pivot width mismatch");
    ix.entries.resize(r.length(ix.ids.size()));
    for (auto& e : ix.entries) {
        e.zorder = r.pod<std::uint64_t>();
        e.id_ref = r.pod<std::uint32_t>();
        if (e.id_ref >= ix.ids.size()) throw CorruptFile("entry id out of range");
    }
    ix.blocks.resize(r.length(ix.entries.size()));
    for (auto& b : ix.blocks) {
        b.begin = r.length(ix.entries.size());
        b.end = r.length(ix.entries.size());
        b.prev = r.pod<std::int64_t>();
        b.next = r.pod<std::int64_t>();
        if (b.prev >= std::int64_t(ix.blocks.size()) || b.next >= std::int64_t(ix.blocks.size())) {
            throw CorruptFile("block link out of range");
        }
    }
    ix.buckets.resize(r.length(1ULL << 40));
    for (auto& h : ix.buckets) h = r.pod<std::int64_t>();
    ix.slots.resize(r.length(ix.entries.size()));
    for (auto& s : ix.slots) {
        s.key = r.pod<std::uint64_t>();
        s.pos = r.pod<std::uint64_t>();
        s.next = r.pod<std::int64_t>();
        if (s.pos >= ix.entries.size() || s.next >= std::int64_t(ix.slots.size())) throw CorruptFile("slot out of range");
    }
    for (auto h : ix.buckets) {
        if (h >= std::int64_t(ix.slots.size())) throw CorruptFile("bucket out of range");
    }
    r.verify();
    return ix;
}

}  // namespace eigr
