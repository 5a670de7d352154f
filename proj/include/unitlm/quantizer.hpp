#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

#include "unitlm/error.hpp"
#include "unitlm/rng.hpp"
#include "unitlm/thread_pool.hpp"

namespace unitlm {

// k centroids over dim-dimensional feature frames. Centroid index i is the
// speech token id i within the speech sub-vocabulary.
struct Codebook {
    int k = 0;
    int dim = 0;
    uint64_t seed = 0;
    std::vector<float> centroids; // k * dim, row-major

    const float* row(int i) const {
        require(i >= 0 && i < k, ErrorCode::invalid_argument, "centroid index out of range");
        return centroids.data() + static_cast<size_t>(i) * dim;
    }
};

struct FitStats {
    int iterations = 0;
    double final_inertia = 0.0;
    std::vector<double> inertia_history; // inertia at each assignment step
    int reseeded_clusters = 0;
};

namespace detail {

// Distances accumulate in double no matter the stored precision, so
// tie-break outcomes do not depend on summation luck.
inline double sqdist(const float* a, const float* b, int dim) {
    double acc = 0.0;
    for (int d = 0; d < dim; ++d) {
        double diff = static_cast<double>(a[d]) - static_cast<double>(b[d]);
        acc += diff * diff;
    }
    return acc;
}

inline int nearest_centroid(const Codebook& cb, const float* frame, double* dist_out = nullptr) {
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (int c = 0; c < cb.k; ++c) {
        double d = sqdist(frame, cb.centroids.data() + static_cast<size_t>(c) * cb.dim, cb.dim);
        if (d < best_d) {
            best_d = d;
            best = c;
        }
    }
    if (dist_out) {
        *dist_out = best_d;
    }
    return best;
}

} // namespace detail

// Lloyd iterations from k-means++ seeding. Stops when the largest centroid
// shift falls under tol or after max_iters sweeps. Empty clusters steal the
// point currently farthest from its assigned centroid. Assignment may run on
// a pool; per-worker partial sums merge in worker order, so results are
// bit-identical at any thread count.
inline Codebook fit_codebook(const std::vector<float>& frames, int n, int dim, int k, uint64_t seed,
                             int max_iters = 300, double tol = 1e-6, FitStats* stats = nullptr,
                             ThreadPool* pool = nullptr) {
    require(dim >= 1 && k >= 1, ErrorCode::invalid_argument, "dim and k must be positive");
    require(frames.size() == static_cast<size_t>(n) * dim, ErrorCode::invalid_argument,
            "frame buffer size does not match n*dim");
    require(n >= k, ErrorCode::insufficient_data,
            "need at least k frames, got " + std::to_string(n) + " for k=" + std::to_string(k));
    for (float f : frames) {
        require(std::isfinite(f), ErrorCode::invalid_argument, "non-finite frame value");
    }

    Codebook cb;
    cb.k = k;
    cb.dim = dim;
    cb.seed = seed;
    cb.centroids.assign(static_cast<size_t>(k) * dim, 0.0f);
    Rng rng(seed);
    auto frame_ptr = [&](int i) { return frames.data() + static_cast<size_t>(i) * dim; };

    // k-means++: each next center is drawn proportionally to the squared
    // distance from the centers chosen so far.
    std::vector<double> d2(n, std::numeric_limits<double>::infinity());
    int first = static_cast<int>(rng.below(n));
    std::memcpy(cb.centroids.data(), frame_ptr(first), sizeof(float) * dim);
    for (int c = 1; c < k; ++c) {
        const float* last = cb.centroids.data() + static_cast<size_t>(c - 1) * dim;
        double total = 0.0;
        for (int i = 0; i < n; ++i) {
            double d = detail::sqdist(frame_ptr(i), last, dim);
            if (d < d2[i]) {
                d2[i] = d;
            }
            total += d2[i];
        }
        int chosen;
        if (total > 0.0) {
            double target = rng.uniform01() * total;
            double run = 0.0;
            chosen = n - 1;
            for (int i = 0; i < n; ++i) {
                run += d2[i];
                if (run > target) {
                    chosen = i;
                    break;
                }
            }
        } else {
            chosen = static_cast<int>(rng.below(n));
        }
        std::memcpy(cb.centroids.data() + static_cast<size_t>(c) * dim, frame_ptr(chosen), sizeof(float) * dim);
    }

    FitStats local;
    FitStats& st = stats ? *stats : local;
    st = FitStats{};

    std::vector<int> assign(n, 0);
    std::vector<double> frame_dist(n, 0.0);
    int workers = pool ? pool->workers() : 1;
    std::vector<std::vector<double>> part_sums(workers);
    std::vector<std::vector<int64_t>> part_counts(workers);
    std::vector<double> part_inertia(workers);

    for (int iter = 0; iter < max_iters; ++iter) {
        auto assign_chunk = [&](int w, int64_t begin, int64_t end) {
            auto& sums = part_sums[w];
            auto& counts = part_counts[w];
            sums.assign(static_cast<size_t>(k) * dim, 0.0);
            counts.assign(k, 0);
            double inertia = 0.0;
            for (int64_t i = begin; i < end; ++i) {
                double d = 0.0;
                int c = detail::nearest_centroid(cb, frame_ptr(static_cast<int>(i)), &d);
                assign[i] = c;
                frame_dist[i] = d;
                inertia += d;
                ++counts[c];
                const float* f = frame_ptr(static_cast<int>(i));
                double* srow = sums.data() + static_cast<size_t>(c) * dim;
                for (int dd = 0; dd < dim; ++dd) {
                    srow[dd] += f[dd];
                }
            }
            part_inertia[w] = inertia;
        };
        if (pool) {
            pool->parallel_for(n, assign_chunk);
        } else {
            assign_chunk(0, 0, n);
        }

        double inertia = 0.0;
        for (int w = 0; w < workers; ++w) {
            inertia += part_inertia[w];
        }
        for (int w = 1; w < workers; ++w) {
            for (size_t i = 0; i < part_sums[0].size(); ++i) {
                part_sums[0][i] += part_sums[w][i];
            }
            for (int c = 0; c < k; ++c) {
                part_counts[0][c] += part_counts[w][c];
            }
        }
        st.inertia_history.push_back(inertia);
        st.final_inertia = inertia;
        st.iterations = iter + 1;

        std::vector<uint8_t> stolen(n, 0);
        double max_shift2 = 0.0;
        for (int c = 0; c < k; ++c) {
            float* crow = cb.centroids.data() + static_cast<size_t>(c) * dim;
            double shift2 = 0.0;
            if (part_counts[0][c] > 0) {
                const double* srow = part_sums[0].data() + static_cast<size_t>(c) * dim;
                double inv = 1.0 / static_cast<double>(part_counts[0][c]);
                for (int dd = 0; dd < dim; ++dd) {
                    double nv = srow[dd] * inv;
                    double diff = nv - crow[dd];
                    shift2 += diff * diff;
                    crow[dd] = static_cast<float>(nv);
                }
            } else {
                int far = -1;
                double far_d = -1.0;
                for (int i = 0; i < n; ++i) {
                    if (!stolen[i] && frame_dist[i] > far_d) {
                        far_d = frame_dist[i];
                        far = i;
                    }
                }
                const float* f = frame_ptr(far);
                for (int dd = 0; dd < dim; ++dd) {
                    double diff = static_cast<double>(f[dd]) - crow[dd];
                    shift2 += diff * diff;
                    crow[dd] = f[dd];
                }
                stolen[far] = 1;
                ++st.reseeded_clusters;
            }
            if (shift2 > max_shift2) {
                max_shift2 = shift2;
            }
        }
        if (std::sqrt(max_shift2) < tol) {
            break;
        }
    }
    return cb;
}

inline int encode_frame(const Codebook& cb, const float* frame, int dim) {
    require(dim == cb.dim, ErrorCode::invalid_argument, "frame dim does not match codebook dim");
    return detail::nearest_centroid(cb, frame);
}

inline std::vector<int> encode(const Codebook& cb, const std::vector<float>& frames, int dim) {
    require(dim == cb.dim, ErrorCode::invalid_argument, "frame dim does not match codebook dim");
    require(dim > 0 && frames.size() % dim == 0, ErrorCode::invalid_argument, "frame buffer not a multiple of dim");
    int n = static_cast<int>(frames.size()) / dim;
    std::vector<int> out(n);
    for (int i = 0; i < n; ++i) {
        out[i] = detail::nearest_centroid(cb, frames.data() + static_cast<size_t>(i) * dim);
    }
    return out;
}

inline std::vector<float> decode_centroid(const Codebook& cb, int token) {
    require(token >= 0 && token < cb.k, ErrorCode::invalid_argument,
            "token " + std::to_string(token) + " outside [0, k)");
    const float* r = cb.row(token);
    return std::vector<float>(r, r + cb.dim);
}

// --------------------------------------------------------------------------
// Codebook file: "SPCB1\n", then "k=<int> dim=<int> seed=<int>\n\n", then
// k*dim little-endian f32, row-major.
// --------------------------------------------------------------------------

inline void save_codebook(std::ostream& out, const Codebook& cb) {
    out << "SPCB1\n";
    out << "k=" << cb.k << " dim=" << cb.dim << " seed=" << cb.seed << "\n\n";
    for (float v : cb.centroids) {
        uint32_t bits;
        std::memcpy(&bits, &v, 4);
        char b[4] = {static_cast<char>(bits & 0xff), static_cast<char>((bits >> 8) & 0xff),
                     static_cast<char>((bits >> 16) & 0xff), static_cast<char>((bits >> 24) & 0xff)};
        out.write(b, 4);
    }
    require(out.good(), ErrorCode::io_failure, "codebook write failed");
}

inline Codebook load_codebook(std::istream& in) {
    std::string magic, header, blank;
    require(static_cast<bool>(std::getline(in, magic)), ErrorCode::io_failure, "codebook: missing magic");
    require(magic == "SPCB1", ErrorCode::unparseable, "codebook: bad magic");
    require(static_cast<bool>(std::getline(in, header)), ErrorCode::io_failure, "codebook: missing header");
    Codebook cb;
    unsigned long long seed = 0;
    int consumed = -1;
    if (std::sscanf(header.c_str(), "k=%d dim=%d seed=%llu%n", &cb.k, &cb.dim, &seed, &consumed) != 3 ||
        consumed != static_cast<int>(header.size())) {
        raise(ErrorCode::unparseable, "codebook: bad header '" + header + "'");
    }
    cb.seed = seed;
    require(static_cast<bool>(std::getline(in, blank)) && blank.empty(), ErrorCode::unparseable,
            "codebook: missing blank line after header");
    require(cb.k >= 1 && cb.dim >= 1, ErrorCode::unparseable, "codebook: non-positive k or dim");

    size_t count = static_cast<size_t>(cb.k) * cb.dim;
    cb.centroids.resize(count);
    std::vector<char> raw(count * 4);
    in.read(raw.data(), static_cast<std::streamsize>(raw.size()));
    require(in.gcount() == static_cast<std::streamsize>(raw.size()), ErrorCode::io_failure,
            "codebook: truncated centroid payload");
    for (size_t i = 0; i < count; ++i) {
        uint32_t bits = static_cast<uint8_t>(raw[i * 4]) | (static_cast<uint32_t>(static_cast<uint8_t>(raw[i * 4 + 1])) << 8) |
                        (static_cast<uint32_t>(static_cast<uint8_t>(raw[i * 4 + 2])) << 16) |
                        (static_cast<uint32_t>(static_cast<uint8_t>(raw[i * 4 + 3])) << 24);
        std::memcpy(&cb.centroids[i], &bits, 4);
    }
    return cb;
}

inline void save_codebook_file(const std::string& path, const Codebook& cb) {
    std::ofstream out(path, std::ios::binary);
    require(out.is_open(), ErrorCode::io_failure, "cannot open '" + path + "' for writing");
    save_codebook(out, cb);
}

inline Codebook load_codebook_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.is_open(), ErrorCode::io_failure, "cannot open '" + path + "'");
    return load_codebook(in);
}

} // namespace unitlm
