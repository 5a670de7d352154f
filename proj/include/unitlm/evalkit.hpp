#pragma once

// Evaluation: perplexity, edit-distance error rates, histogram speaker
// similarity, and task-level reports that decode a test set and score it
// against the synthetic world's oracles.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <exception>
#include <functional>
#include <mutex>
#include <string>
#include <utility>
#include <vector>

#include "unitlm/decoder.hpp"
#include "unitlm/error.hpp"
#include "unitlm/format.hpp"
#include "unitlm/model.hpp"
#include "unitlm/rng.hpp"
#include "unitlm/synthworld.hpp"
#include "unitlm/thread_pool.hpp"

namespace unitlm {

// ---------------------------------------------------------------------------
// Perplexity
// ---------------------------------------------------------------------------

enum class PplScope { global, target };

inline std::vector<uint8_t> scope_mask(const FormattedExample& ex, PplScope scope) {
    if (scope == PplScope::global) {
        return segment_loss_mask(ex, LossSelector::global());
    }
    std::vector<uint8_t> mask(ex.length(), 0);
    for (int j = 1; j <= ex.num_target_segments(); ++j) {
        std::vector<uint8_t> m = segment_loss_mask(ex, LossSelector::segment(j));
        for (size_t i = 0; i < mask.size(); ++i) {
            mask[i] = mask[i] | m[i];
        }
    }
    return mask;
}

template <typename T>
double perplexity(const ModelConfig& cfg, const ModelParams<T>& params,
                  const std::vector<FormattedExample>& dataset, PplScope scope) {
    if (dataset.empty()) {
        throw Error(ErrorCode::invalid_argument, "empty dataset");
    }
    double total_nll = 0;
    int64_t total_tokens = 0;
    for (const FormattedExample& ex : dataset) {
        std::vector<uint8_t> mask = scope_mask(ex, scope);
        int64_t n = 0;
        for (uint8_t m : mask) {
            n += m;
        }
        if (n == 0) {
            continue;
        }
        total_nll += static_cast<double>(loss_value(cfg, params, ex.tokens, mask)) *
                     static_cast<double>(n);
        total_tokens += n;
    }
    if (total_tokens == 0) {
        throw Error(ErrorCode::invalid_argument, "no scored tokens in dataset");
    }
    return std::exp(total_nll / static_cast<double>(total_tokens));
}

// ---------------------------------------------------------------------------
// Edit distance
// ---------------------------------------------------------------------------

struct EditOps {
    int64_t substitutions = 0;
    int64_t insertions = 0;
    int64_t deletions = 0;

    int64_t total() const { return substitutions + insertions + deletions; }
};

// Unit-cost Levenshtein. The backtrace prefers match/substitution, then
// deletion, then insertion, so the S/I/D split is deterministic; the total
// is the unique edit distance either way.
template <typename U>
EditOps edit_distance(const std::vector<U>& ref, const std::vector<U>& hyp) {
    size_t n = ref.size();
    size_t m = hyp.size();
    std::vector<int64_t> d((n + 1) * (m + 1), 0);
    auto at = [m](size_t i, size_t j) { return i * (m + 1) + j; };
    for (size_t i = 0; i <= n; ++i) {
        d[at(i, 0)] = static_cast<int64_t>(i);
    }
    for (size_t j = 0; j <= m; ++j) {
        d[at(0, j)] = static_cast<int64_t>(j);
    }
    for (size_t i = 1; i <= n; ++i) {
        for (size_t j = 1; j <= m; ++j) {
            int64_t sub = d[at(i - 1, j - 1)] + (ref[i - 1] == hyp[j - 1] ? 0 : 1);
            int64_t del = d[at(i - 1, j)] + 1;
            int64_t ins = d[at(i, j - 1)] + 1;
            d[at(i, j)] = std::min(sub, std::min(del, ins));
        }
    }
    EditOps ops;
    size_t i = n, j = m;
    while (i > 0 || j > 0) {
        if (i > 0 && j > 0 && d[at(i, j)] == d[at(i - 1, j - 1)] + (ref[i - 1] == hyp[j - 1] ? 0 : 1)) {
            if (ref[i - 1] != hyp[j - 1]) {
                ++ops.substitutions;
            }
            --i;
            --j;
        } else if (i > 0 && d[at(i, j)] == d[at(i - 1, j)] + 1) {
            ++ops.deletions;
            --i;
        } else {
            ++ops.insertions;
            --j;
        }
    }
    return ops;
}

template <typename U>
double error_rate(const std::vector<U>& ref, const std::vector<U>& hyp) {
    if (ref.empty()) {
        throw Error(ErrorCode::invalid_argument, "empty reference");
    }
    return static_cast<double>(edit_distance(ref, hyp).total()) / static_cast<double>(ref.size());
}

// Word units coincide with text tokens in this world, so wer and cer agree;
// the three names mark what the call sites score.
template <typename U>
double wer(const std::vector<U>& ref_words, const std::vector<U>& hyp_words) {
    return error_rate(ref_words, hyp_words);
}

template <typename U>
double cer(const std::vector<U>& ref_chars, const std::vector<U>& hyp_chars) {
    return error_rate(ref_chars, hyp_chars);
}

template <typename U>
double ter(const std::vector<U>& ref_tokens, const std::vector<U>& hyp_tokens) {
    return error_rate(ref_tokens, hyp_tokens);
}

// ---------------------------------------------------------------------------
// Speaker similarity
// ---------------------------------------------------------------------------

using Embedder = std::function<std::vector<double>(const std::vector<TokenId>&)>;

inline std::vector<double> histogram_embedding(const std::vector<TokenId>& speech, int bins) {
    std::vector<double> h(static_cast<size_t>(bins), 0.0);
    for (TokenId t : speech) {
        if (t < 0 || t >= bins) {
            throw Error(ErrorCode::invalid_argument, "token out of histogram range");
        }
        h[static_cast<size_t>(t)] += 1.0;
    }
    return h;
}

inline Embedder make_histogram_embedder(int bins) {
    return [bins](const std::vector<TokenId>& speech) { return histogram_embedding(speech, bins); };
}

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) {
        throw Error(ErrorCode::invalid_argument, "embedding sizes differ");
    }
    double dot = 0, na = 0, nb = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0 || nb == 0) {
        throw Error(ErrorCode::invalid_argument, "zero-norm embedding");
    }
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

inline double speaker_similarity(const std::vector<TokenId>& a, const std::vector<TokenId>& b,
                                 const Embedder& embed) {
    return cosine(embed(a), embed(b));
}

// ---------------------------------------------------------------------------
// Task evaluation
// ---------------------------------------------------------------------------

struct EvalOptions {
    int beam = kDefaultBeam;
    double alpha = kDefaultAlpha;
    bool inject_text = false; // vc/se: feed the ground-truth transcript instead of recognizing
    ThreadPool* pool = nullptr;
};

struct EvalReport {
    TaskKind task = TaskKind::textlm;
    std::vector<std::pair<std::string, double>> metrics;
    int64_t items = 0;
    int64_t failures = 0;
    std::string fingerprint;

    std::string to_string() const {
        std::string out;
        for (const auto& [name, value] : metrics) {
            out += "metric=" + name + " value=" + detail::fmt_double(value) +
                   " n=" + std::to_string(items) + '\n';
        }
        out += "fingerprint=" + fingerprint + '\n';
        return out;
    }
};

namespace detail {

// Transcribes a hypothesis whose length need not divide units_per_char; a
// ragged tail becomes one unmatched (-1) chunk so it scores as an error
// instead of throwing.
inline std::vector<int> transcribe_lenient(const World& w, const std::vector<int>& units) {
    int upc = w.config.units_per_char;
    size_t whole = (units.size() / static_cast<size_t>(upc)) * static_cast<size_t>(upc);
    std::vector<int> text;
    if (whole > 0) {
        std::vector<int> head(units.begin(), units.begin() + static_cast<ptrdiff_t>(whole));
        text = oracle_transcribe(w, head).text;
    }
    if (whole != units.size()) {
        text.push_back(-1);
    }
    return text;
}

inline uint64_t fp_mix(uint64_t h, uint64_t v) { return hash_combine(h, v); }

inline std::string fp_hex(uint64_t h) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<size_t>(i)] = digits[h & 0xf];
        h >>= 4;
    }
    return out;
}

}  // namespace detail

template <typename T>
std::string eval_fingerprint(const ModelConfig& cfg, const ModelParams<T>&, const World& w,
                             TaskKind task, size_t items, const EvalOptions& opt) {
    uint64_t h = 0x6576616cull;
    h = detail::fp_mix(h, static_cast<uint64_t>(cfg.layers));
    h = detail::fp_mix(h, static_cast<uint64_t>(cfg.hidden));
    h = detail::fp_mix(h, static_cast<uint64_t>(cfg.heads));
    h = detail::fp_mix(h, static_cast<uint64_t>(cfg.vocab));
    h = detail::fp_mix(h, static_cast<uint64_t>(cfg.maxlen));
    h = detail::fp_mix(h, static_cast<uint64_t>(cfg.mlp_mult));
    h = detail::fp_mix(h, cfg.tie_output ? 1 : 0);
    h = detail::fp_mix(h, w.seed);
    h = detail::fp_mix(h, static_cast<uint64_t>(w.config.num_speakers));
    h = detail::fp_mix(h, static_cast<uint64_t>(w.config.speech_vocab));
    h = detail::fp_mix(h, static_cast<uint64_t>(task_index(task)));
    h = detail::fp_mix(h, static_cast<uint64_t>(items));
    h = detail::fp_mix(h, static_cast<uint64_t>(opt.beam));
    h = detail::fp_mix(h, opt.inject_text ? 0x74657874ull : 0ull);
    uint64_t abits;
    static_assert(sizeof(double) == sizeof(uint64_t));
    std::memcpy(&abits, &opt.alpha, sizeof(abits));
    h = detail::fp_mix(h, abits);
    return detail::fp_hex(h);
}

template <typename T>
EvalReport evaluate_task(const ModelConfig& cfg, const ModelParams<T>& params,
                         const std::vector<FormattedExample>& test, TaskKind task, const World& w,
                         const EvalOptions& opt = {}) {
    if (test.empty()) {
        throw Error(ErrorCode::invalid_argument, "empty test set");
    }
    for (const FormattedExample& ex : test) {
        if (ex.task_kind != task) {
            throw Error(ErrorCode::invalid_argument, "test set does not match the task kind");
        }
    }
    Vocabulary v = world_vocab(w);
    EvalReport report;
    report.task = task;
    report.fingerprint = eval_fingerprint(cfg, params, w, task, test.size(), opt);

    if (task == TaskKind::textlm || task == TaskKind::speechlm) {
        report.items = static_cast<int64_t>(test.size());
        report.metrics.emplace_back("ppl_global", perplexity(cfg, params, test, PplScope::global));
        report.metrics.emplace_back("ppl_target", perplexity(cfg, params, test, PplScope::target));
        return report;
    }

    struct ItemOutcome {
        bool failed = false;
        std::vector<TokenId> final_tokens;
    };
    std::vector<ItemOutcome> outcomes(test.size());
    auto decode_item = [&](size_t i) {
        const FormattedExample& ex = test[i];
        TaskRequest req;
        req.kind = task;
        switch (task) {
            case TaskKind::asr:
                req.condition = ex.part(Role::condition_speech);
                break;
            case TaskKind::tts:
                req.condition = ex.part(Role::condition_text);
                req.enrollment = ex.part(Role::enroll_speech);
                break;
            case TaskKind::vc:
            case TaskKind::se:
                req.condition = ex.part(Role::condition_speech);
                req.enrollment = ex.part(Role::enroll_speech);
                if (opt.inject_text) {
                    req.text = ex.part(Role::target_text);
                }
                break;
            default:
                break;
        }
        try {
            outcomes[i].final_tokens =
                run_task(cfg, params, plan_task(req, v), opt.beam, opt.alpha).final_tokens;
        } catch (const Error& e) {
            if (e.code() != ErrorCode::decode_failure) {
                throw;
            }
            outcomes[i].failed = true;
        }
    };
    if (opt.pool != nullptr) {
        std::exception_ptr first_error;
        std::mutex error_mu;
        opt.pool->parallel_for(static_cast<int64_t>(test.size()),
                               [&](int, int64_t lo, int64_t hi) {
                                   for (int64_t i = lo; i < hi; ++i) {
                                       try {
                                           decode_item(static_cast<size_t>(i));
                                       } catch (...) {
                                           std::lock_guard<std::mutex> lk(error_mu);
                                           if (!first_error) {
                                               first_error = std::current_exception();
                                           }
                                           return;
                                       }
                                   }
                               });
        if (first_error) {
            std::rethrow_exception(first_error);
        }
    } else {
        for (size_t i = 0; i < test.size(); ++i) {
            decode_item(i);
        }
    }

    Embedder embed = make_histogram_embedder(v.total_size());
    int64_t edits_text = 0, ref_text_len = 0;
    int64_t edits_units = 0, ref_units_len = 0;
    int64_t speaker_hits = 0;
    int64_t corrupted = 0, repaired = 0;
    double sim_sum = 0;
    int64_t evaluated = 0;

    for (size_t i = 0; i < test.size(); ++i) {
        if (outcomes[i].failed) {
            ++report.failures;
            continue;
        }
        const FormattedExample& ex = test[i];
        const std::vector<TokenId>& out = outcomes[i].final_tokens;
        ++evaluated;
        switch (task) {
            case TaskKind::asr: {
                std::vector<TokenId> ref = ex.part(Role::target_text);
                edits_text += edit_distance(ref, out).total();
                ref_text_len += static_cast<int64_t>(ref.size());
                break;
            }
            case TaskKind::tts: {
                std::vector<TokenId> ref_speech = ex.part(Role::target_speech);
                edits_units += edit_distance(ref_speech, out).total();
                ref_units_len += static_cast<int64_t>(ref_speech.size());
                std::vector<int> ref_chars = ids_to_chars(v, ex.part(Role::condition_text));
                std::vector<int> hyp_chars = detail::transcribe_lenient(w, ids_to_units(v, out));
                edits_text += edit_distance(ref_chars, hyp_chars).total();
                ref_text_len += static_cast<int64_t>(ref_chars.size());
                if (!out.empty()) {
                    sim_sum += speaker_similarity(out, ref_speech, embed);
                }
                break;
            }
            case TaskKind::vc: {
                std::vector<TokenId> ref_speech = ex.part(Role::target_speech);
                edits_units += edit_distance(ref_speech, out).total();
                ref_units_len += static_cast<int64_t>(ref_speech.size());
                std::vector<int> ref_chars = ids_to_chars(v, ex.part(Role::target_text));
                std::vector<int> hyp_chars = detail::transcribe_lenient(w, ids_to_units(v, out));
                edits_text += edit_distance(ref_chars, hyp_chars).total();
                ref_text_len += static_cast<int64_t>(ref_chars.size());
                int want = oracle_speaker(w, ids_to_units(v, ex.part(Role::enroll_speech)));
                if (!out.empty()) {
                    sim_sum += speaker_similarity(out, ref_speech, embed);
                    if (oracle_speaker(w, ids_to_units(v, out)) == want) {
                        ++speaker_hits;
                    }
                }
                break;
            }
            case TaskKind::se: {
                std::vector<int> ref_words = ids_to_chars(v, ex.part(Role::target_text));
                std::vector<int> hyp_words = detail::transcribe_lenient(w, ids_to_units(v, out));
                edits_text += edit_distance(ref_words, hyp_words).total();
                ref_text_len += static_cast<int64_t>(ref_words.size());
                std::vector<TokenId> src = ex.part(Role::condition_speech);
                std::vector<TokenId> clean = ex.part(Role::target_speech);
                for (size_t p = 0; p < src.size() && p < clean.size(); ++p) {
                    if (src[p] != clean[p]) {
                        ++corrupted;
                        if (p < out.size() && out[p] == clean[p]) {
                            ++repaired;
                        }
                    }
                }
                break;
            }
            default:
                break;
        }
    }
    report.items = evaluated;
    if (evaluated == 0) {
        throw Error(ErrorCode::decode_failure, "every item failed to decode");
    }

    auto pooled = [](int64_t edits, int64_t ref_len) {
        return static_cast<double>(edits) / static_cast<double>(ref_len);
    };
    switch (task) {
        case TaskKind::asr:
            report.metrics.emplace_back("wer", pooled(edits_text, ref_text_len));
            report.metrics.emplace_back("cer", pooled(edits_text, ref_text_len));
            break;
        case TaskKind::tts:
            report.metrics.emplace_back("ter", pooled(edits_units, ref_units_len));
            report.metrics.emplace_back("cer", pooled(edits_text, ref_text_len));
            report.metrics.emplace_back("similarity", sim_sum / static_cast<double>(evaluated));
            break;
        case TaskKind::vc:
            report.metrics.emplace_back("cer", pooled(edits_text, ref_text_len));
            report.metrics.emplace_back("ter", pooled(edits_units, ref_units_len));
            report.metrics.emplace_back("speaker_accuracy",
                                        static_cast<double>(speaker_hits) /
                                            static_cast<double>(evaluated));
            report.metrics.emplace_back("similarity", sim_sum / static_cast<double>(evaluated));
            break;
        case TaskKind::se:
            report.metrics.emplace_back("wer", pooled(edits_text, ref_text_len));
            report.metrics.emplace_back("repaired_fraction",
                                        corrupted == 0
                                            ? 1.0
                                            : static_cast<double>(repaired) /
                                                  static_cast<double>(corrupted));
            break;
        default:
            break;
    }
    return report;
}

}  // namespace unitlm
