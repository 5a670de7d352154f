#pragma once

#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "unitlm/error.hpp"
#include "unitlm/format.hpp"
#include "unitlm/model.hpp"
#include "unitlm/thread_pool.hpp"
#include "unitlm/rng.hpp"
#include "unitlm/synthworld.hpp"

namespace unitlm {

// Per-example categorical over loss targets: q[j-1] selects target segment
// j, q_global selects the whole sequence.
struct SamplingWeights {
    std::vector<double> q;
    double q_global = 1.0;

    void validate() const {
        double sum = q_global;
        require(q_global >= 0.0, ErrorCode::invalid_argument, "q_global negative");
        for (double w : q) {
            require(w >= 0.0, ErrorCode::invalid_argument, "segment weight negative");
            sum += w;
        }
        require(std::abs(sum - 1.0) <= 1e-9, ErrorCode::invalid_argument,
                "sampling weights sum to " + std::to_string(sum) + ", expected 1");
    }

    static SamplingWeights all_global() { return SamplingWeights{{}, 1.0}; }
    static SamplingWeights composite_default() { return SamplingWeights{{0.3, 0.3}, 0.4}; }
};

inline LossSelector sample_loss_target(const SamplingWeights& w, Rng& rng) {
    w.validate();
    double u = rng.uniform01();
    double cum = 0.0;
    for (size_t j = 0; j < w.q.size(); ++j) {
        cum += w.q[j];
        if (u < cum) {
            return LossSelector::segment(static_cast<int>(j) + 1);
        }
    }
    return LossSelector::global();
}

// --------------------------------------------------------------------------
// Batch packing
// --------------------------------------------------------------------------

struct PackedBatch {
    int rows = 0;
    int cols = 0;
    TokenId pad_id = -1;
    std::vector<TokenId> ids; // rows * cols, right-padded
    std::vector<int> lengths;
    std::vector<TaskKind> kinds;
    std::vector<std::vector<Segment>> segments; // per row, from the source example

    std::vector<TokenId> row_tokens(int r) const {
        const TokenId* base = ids.data() + static_cast<size_t>(r) * cols;
        return std::vector<TokenId>(base, base + lengths[r]);
    }

    // Mask over the padded width; pad positions are never scored.
    std::vector<uint8_t> mask_for(int r, LossSelector selector) const {
        FormattedExample ex;
        ex.task_kind = kinds[r];
        ex.tokens = row_tokens(r);
        ex.segments = segments[r];
        std::vector<uint8_t> mask = segment_loss_mask(ex, selector);
        mask.resize(cols, 0);
        return mask;
    }
};

inline PackedBatch pack_batch(const std::vector<const FormattedExample*>& examples, TokenId pad_id, int maxlen) {
    require(!examples.empty(), ErrorCode::invalid_argument, "empty batch");
    PackedBatch b;
    b.rows = static_cast<int>(examples.size());
    b.pad_id = pad_id;
    for (const FormattedExample* ex : examples) {
        require(ex->length() <= maxlen, ErrorCode::truncation_refused,
                "example of length " + std::to_string(ex->length()) + " exceeds maxlen " + std::to_string(maxlen));
        b.cols = std::max(b.cols, ex->length());
    }
    b.ids.assign(static_cast<size_t>(b.rows) * b.cols, pad_id);
    for (int r = 0; r < b.rows; ++r) {
        const FormattedExample& ex = *examples[r];
        std::copy(ex.tokens.begin(), ex.tokens.end(), b.ids.begin() + static_cast<size_t>(r) * b.cols);
        b.lengths.push_back(ex.length());
        b.kinds.push_back(ex.task_kind);
        b.segments.push_back(ex.segments);
    }
    return b;
}

// --------------------------------------------------------------------------
// Learning-rate schedule and Adam
// --------------------------------------------------------------------------

struct TrainConfig {
    int batch_size = 16;
    double peak_lr = 3e-4;
    int warmup_steps = 1000;
    int total_steps = 6000;
    double beta1 = 0.9;
    double beta2 = 0.98;
    double eps = 1e-9;
    double clip_norm = 1.0; // <= 0 disables clipping
    uint64_t seed = 0;
    SamplingWeights weights = SamplingWeights::composite_default();
    bool use_selector_sampling = true; // false: plain LM training, selector rng untouched
    std::vector<double> mix;           // per-task proportions; empty = proportional to sizes
    int log_every = 50;
    int valid_every = 0; // 0 = only at the end

    void validate() const {
        require(batch_size >= 1, ErrorCode::invalid_argument, "batch_size must be positive");
        require(warmup_steps >= 1, ErrorCode::invalid_argument, "warmup_steps must be positive");
        require(total_steps >= warmup_steps, ErrorCode::invalid_argument, "warmup exceeds total steps");
        require(peak_lr > 0, ErrorCode::invalid_argument, "peak_lr must be positive");
        weights.validate();
        if (!mix.empty()) {
            require(mix.size() == kNumTasks, ErrorCode::invalid_argument, "mix needs one entry per task");
            double sum = 0;
            for (double m : mix) {
                require(m >= 0, ErrorCode::invalid_argument, "negative mix entry");
                sum += m;
            }
            require(std::abs(sum - 1.0) <= 1e-9, ErrorCode::invalid_argument, "mix must sum to 1");
        }
    }
};

// Linear ramp to peak over the warmup, then inverse-square-root decay.
inline double lr_at(int64_t step, const TrainConfig& cfg) {
    require(step >= 1, ErrorCode::invalid_argument, "step must be >= 1");
    if (step <= cfg.warmup_steps) {
        return cfg.peak_lr * static_cast<double>(step) / cfg.warmup_steps;
    }
    return cfg.peak_lr * std::sqrt(static_cast<double>(cfg.warmup_steps) / static_cast<double>(step));
}

template <typename T>
struct OptState {
    int64_t step = 0;
    ModelParams<T> m, v;

    static OptState shaped(const ModelConfig& cfg) {
        OptState s;
        s.m = ModelParams<T>::shaped(cfg);
        s.v = ModelParams<T>::shaped(cfg);
        return s;
    }
};

namespace detail {

template <typename T>
std::vector<Tensor<T>*> tensor_list(ModelParams<T>& p) {
    std::vector<Tensor<T>*> out;
    p.visit([&](const std::string&, Tensor<T>& t, ParamKind) { out.push_back(&t); });
    return out;
}

template <typename T>
std::vector<const Tensor<T>*> tensor_list(const ModelParams<T>& p) {
    std::vector<const Tensor<T>*> out;
    p.visit([&](const std::string&, const Tensor<T>& t, ParamKind) { out.push_back(&t); });
    return out;
}

} // namespace detail

// Global-norm clip; returns the pre-clip norm.
template <typename T>
double clip_gradients(ModelParams<T>& grads, double max_norm) {
    double sum2 = 0;
    auto gs = detail::tensor_list(grads);
    for (auto* g : gs) {
        for (T v : g->v) {
            sum2 += static_cast<double>(v) * static_cast<double>(v);
        }
    }
    double norm = std::sqrt(sum2);
    if (max_norm > 0 && norm > max_norm) {
        T scale = static_cast<T>(max_norm / norm);
        for (auto* g : gs) {
            for (T& v : g->v) {
                v *= scale;
            }
        }
    }
    return norm;
}

template <typename T>
void adam_update(ModelParams<T>& params, const ModelParams<T>& grads, OptState<T>& opt, double lr,
                 const TrainConfig& cfg) {
    auto ps = detail::tensor_list(params);
    auto gs = detail::tensor_list(grads);
    auto ms = detail::tensor_list(opt.m);
    auto vs = detail::tensor_list(opt.v);
    require(ps.size() == gs.size() && ps.size() == ms.size(), ErrorCode::invalid_argument,
            "optimizer shape mismatch");
    for (size_t i = 0; i < ps.size(); ++i) {
        require(ps[i]->dims == gs[i]->dims && ps[i]->dims == ms[i]->dims && ps[i]->dims == vs[i]->dims,
                ErrorCode::invalid_argument, "optimizer shape mismatch");
    }
    ++opt.step;
    double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(opt.step));
    double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(opt.step));
    for (size_t i = 0; i < ps.size(); ++i) {
        T* p = ps[i]->data();
        const T* g = gs[i]->data();
        T* m = ms[i]->data();
        T* v = vs[i]->data();
        size_t n = ps[i]->size();
        for (size_t j = 0; j < n; ++j) {
            double gj = static_cast<double>(g[j]);
            double mj = cfg.beta1 * static_cast<double>(m[j]) + (1.0 - cfg.beta1) * gj;
            double vj = cfg.beta2 * static_cast<double>(v[j]) + (1.0 - cfg.beta2) * gj * gj;
            m[j] = static_cast<T>(mj);
            v[j] = static_cast<T>(vj);
            double mhat = mj / bc1;
            double vhat = vj / bc2;
            p[j] = static_cast<T>(static_cast<double>(p[j]) - lr * mhat / (std::sqrt(vhat) + cfg.eps));
        }
    }
}

// --------------------------------------------------------------------------
// Training loop
// --------------------------------------------------------------------------

struct TaskDatasets {
    std::array<std::vector<FormattedExample>, kNumTasks> train;
    std::array<std::vector<FormattedExample>, kNumTasks> valid;

    static TaskDatasets from_generated(const GeneratedData& g) {
        TaskDatasets d;
        for (int t = 0; t < kNumTasks; ++t) {
            d.train[t] = g.data[t][static_cast<int>(Split::train)];
            d.valid[t] = g.data[t][static_cast<int>(Split::valid)];
        }
        return d;
    }
};

// Drops examples longer than maxlen; returns how many were dropped.
inline int filter_overlong(TaskDatasets& d, int maxlen) {
    int dropped = 0;
    for (auto* sets : {&d.train, &d.valid}) {
        for (auto& set : *sets) {
            auto keep = std::vector<FormattedExample>();
            keep.reserve(set.size());
            for (auto& ex : set) {
                if (ex.length() <= maxlen) {
                    keep.push_back(std::move(ex));
                } else {
                    ++dropped;
                }
            }
            set = std::move(keep);
        }
    }
    return dropped;
}

struct StepStats {
    int64_t step;
    TaskKind task;
    LossSelector selector; // first example's draw
    double loss;
    double lr;
    double grad_norm;
};

struct ValidStats {
    int64_t step;
    TaskKind task;
    double ppl;
    int n;
};

struct TrainResult {
    std::vector<StepStats> history;
    std::vector<ValidStats> valid_history;
};

namespace detail {

inline constexpr uint64_t kBatchStream = 0x6261746368ull;    // batch composition draws
inline constexpr uint64_t kSelectorStream = 0x73656c6563ull; // loss-target draws

inline bool is_composite(TaskKind k) { return k == TaskKind::vc || k == TaskKind::se; }

} // namespace detail

// One optimizer step per iteration: draw a task by the mixing proportions,
// draw batch_size examples with replacement, pick each example's loss target
// (composite tasks only), average the masked losses, clip, Adam.
//
// Batch draws and selector draws come from two independent RNG streams, so a
// run whose selector always lands on "global" is step-for-step identical to
// plain LM training on the same seed.
//
// With a pool, batch rows are split across workers into per-worker gradient
// buffers that are summed in worker order, so results are deterministic for
// a fixed worker count (they differ across worker counts by float reorder).
template <typename T>
TrainResult train(const ModelConfig& mcfg, ModelParams<T>& params, const TaskDatasets& data,
                  const TrainConfig& tcfg, std::ostream* log = nullptr, ThreadPool* pool = nullptr) {
    mcfg.validate();
    tcfg.validate();

    std::vector<double> mix(kNumTasks, 0.0);
    int64_t total_examples = 0;
    for (int t = 0; t < kNumTasks; ++t) {
        total_examples += static_cast<int64_t>(data.train[t].size());
    }
    require(total_examples > 0, ErrorCode::insufficient_data, "all training sets are empty");
    if (tcfg.mix.empty()) {
        for (int t = 0; t < kNumTasks; ++t) {
            mix[t] = static_cast<double>(data.train[t].size()) / static_cast<double>(total_examples);
        }
    } else {
        mix = tcfg.mix;
        for (int t = 0; t < kNumTasks; ++t) {
            require(mix[t] == 0.0 || !data.train[t].empty(), ErrorCode::insufficient_data,
                    std::string("mix requests task ") + to_string(kAllTasks[t]) + " but its dataset is empty");
        }
    }

    Rng batch_rng(hash_combine(tcfg.seed, detail::kBatchStream));
    Rng selector_rng(hash_combine(tcfg.seed, detail::kSelectorStream));

    auto opt = OptState<T>::shaped(mcfg);
    auto grads = ModelParams<T>::shaped(mcfg);
    TrainResult result;

    const int workers = pool != nullptr ? pool->workers() : 1;
    std::vector<ModelParams<T>> worker_grads;
    std::vector<std::vector<Tensor<T>*>> worker_tensors;
    std::vector<double> worker_loss(static_cast<size_t>(workers), 0.0);
    auto grad_tensors = detail::tensor_list(grads);
    if (workers > 1) {
        for (int wk = 0; wk < workers; ++wk) {
            worker_grads.push_back(ModelParams<T>::shaped(mcfg));
        }
        for (auto& wg : worker_grads) {
            worker_tensors.push_back(detail::tensor_list(wg));
        }
    }

    int64_t last_valid_step = -1;
    auto log_valid = [&](int64_t step) {
        if (step == last_valid_step) {
            return;
        }
        last_valid_step = step;
        for (int t = 0; t < kNumTasks; ++t) {
            if (data.valid[t].empty()) {
                continue;
            }
            double total = 0;
            for (const auto& ex : data.valid[t]) {
                total += static_cast<double>(loss_value(mcfg, params, ex.tokens,
                                                        segment_loss_mask(ex, LossSelector::global())));
            }
            double ppl = std::exp(total / static_cast<double>(data.valid[t].size()));
            result.valid_history.push_back({step, kAllTasks[t], ppl, static_cast<int>(data.valid[t].size())});
            if (log) {
                (*log) << "step=" << step << " metric=valid_ppl_" << to_string(kAllTasks[t])
                       << " value=" << detail::fmt_double(ppl) << " n=" << data.valid[t].size() << '\n';
            }
        }
    };

    for (int64_t step = 1; step <= tcfg.total_steps; ++step) {
        double u = batch_rng.uniform01();
        int task = kNumTasks - 1;
        double cum = 0;
        for (int t = 0; t < kNumTasks; ++t) {
            cum += mix[t];
            if (u < cum) {
                task = t;
                break;
            }
        }
        const auto& examples = data.train[task];
        std::vector<const FormattedExample*> batch(tcfg.batch_size);
        for (auto& slot : batch) {
            slot = &examples[batch_rng.below(examples.size())];
        }
        PackedBatch packed = pack_batch(batch, mcfg.vocab - 1, mcfg.maxlen);

        std::vector<LossSelector> selectors(packed.rows, LossSelector::global());
        if (tcfg.use_selector_sampling && detail::is_composite(kAllTasks[task])) {
            for (auto& s : selectors) {
                s = sample_loss_target(tcfg.weights, selector_rng);
            }
        }

        grads.zero();
        double batch_loss = 0;
        auto row_backward = [&](int r, ModelParams<T>& into) {
            auto tokens = packed.row_tokens(r);
            auto mask = packed.mask_for(r, selectors[r]);
            mask.resize(tokens.size());
            return static_cast<double>(
                loss_and_backward(mcfg, params, tokens, mask, into, T(1) / T(packed.rows)));
        };
        if (workers > 1) {
            for (auto& wg : worker_grads) {
                wg.zero();
            }
            pool->parallel_for(packed.rows, [&](int wk, int64_t lo, int64_t hi) {
                double local = 0;
                for (int64_t r = lo; r < hi; ++r) {
                    local += row_backward(static_cast<int>(r), worker_grads[static_cast<size_t>(wk)]);
                }
                worker_loss[static_cast<size_t>(wk)] = local;
            });
            for (int wk = 0; wk < workers; ++wk) {
                batch_loss += worker_loss[static_cast<size_t>(wk)];
                worker_loss[static_cast<size_t>(wk)] = 0.0;
                for (size_t ti = 0; ti < grad_tensors.size(); ++ti) {
                    const auto& src = worker_tensors[static_cast<size_t>(wk)][ti]->v;
                    auto& dst = grad_tensors[ti]->v;
                    for (size_t i = 0; i < dst.size(); ++i) {
                        dst[i] += src[i];
                    }
                }
            }
        } else {
            for (int r = 0; r < packed.rows; ++r) {
                batch_loss += row_backward(r, grads);
            }
        }
        batch_loss /= packed.rows;
        require(std::isfinite(batch_loss), ErrorCode::divergence,
                "non-finite loss at step " + std::to_string(step));

        double norm = clip_gradients(grads, tcfg.clip_norm);
        double lr = lr_at(step, tcfg);
        adam_update(params, grads, opt, lr, tcfg);

        result.history.push_back({step, kAllTasks[task], selectors[0], batch_loss, lr, norm});
        if (log && (step == 1 || step % tcfg.log_every == 0 || step == tcfg.total_steps)) {
            std::string sel = selectors[0].is_global() ? "global" : std::to_string(selectors[0].value);
            (*log) << "step=" << step << " task=" << to_string(kAllTasks[task]) << " selector=" << sel
                   << " loss=" << detail::fmt_double(batch_loss) << " lr=" << detail::fmt_double(lr) << '\n';
        }
        if (tcfg.valid_every > 0 && step % tcfg.valid_every == 0) {
            log_valid(step);
        }
    }
    log_valid(tcfg.total_steps);
    return result;
}

} // namespace unitlm
