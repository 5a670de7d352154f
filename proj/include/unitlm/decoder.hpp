#pragma once

// Beam-search generation and staged task inference.
//
// beam_generate runs width-limited breadth-first search over the token ids
// in `allowed` plus the ids in `stop`. A hypothesis finishes when it emits a
// stop token or reaches the max-new cap. Scores are true model
// log-probabilities (log-softmax over the full vocabulary); the allowed set
// restricts which tokens may be chosen, not the normalizer. Ranking divides
// the accumulated log-probability by max(1, emitted)^alpha where `emitted`
// counts the terminating stop token when one was chosen.
//
// run_task executes a StagePlan: each stage appends its forced tokens to the
// running context, generates with beam search, strips the terminating stop
// token, and splices the rest back into the context for the next stage. A
// stage can come back empty when the model stops immediately; that is a
// model output for the caller to score, not an error.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "unitlm/error.hpp"
#include "unitlm/format.hpp"
#include "unitlm/model.hpp"
#include "unitlm/vocab.hpp"

namespace unitlm {

inline constexpr int kDefaultBeam = 5;
inline constexpr double kDefaultAlpha = 0.6;

struct BeamHypothesis {
    std::vector<TokenId> tokens;
    double logprob = 0.0;
    bool finished = false;
};

inline double hypothesis_score(const BeamHypothesis& h, double alpha) {
    double len = static_cast<double>(std::max<size_t>(1, h.tokens.size()));
    return h.logprob / std::pow(len, alpha);
}

namespace detail {

template <typename T>
struct LiveHyp {
    BeamHypothesis hyp;
    DecodeState<T> state;
    std::vector<T> logits;
};

struct Candidate {
    size_t parent;
    TokenId token;
    double logprob;
    bool is_stop;
};

inline double row_lse(const std::vector<double>& row) {
    double mx = row[0];
    for (double x : row) {
        mx = std::max(mx, x);
    }
    double s = 0;
    for (double x : row) {
        s += std::exp(x - mx);
    }
    return mx + std::log(s);
}

}  // namespace detail

template <typename T>
std::vector<BeamHypothesis> beam_generate(const ModelConfig& cfg, const ModelParams<T>& params,
                                          const std::vector<TokenId>& prefix,
                                          const std::vector<TokenId>& allowed,
                                          const std::vector<TokenId>& stop, int beam, int max_new,
                                          double alpha = kDefaultAlpha) {
    if (beam < 1) {
        throw Error(ErrorCode::invalid_argument, "beam size must be >= 1");
    }
    if (max_new < 1) {
        throw Error(ErrorCode::invalid_argument, "max_new must be >= 1");
    }
    if (prefix.empty()) {
        throw Error(ErrorCode::invalid_argument, "prefix must not be empty");
    }
    if (static_cast<int>(prefix.size()) + 1 > cfg.maxlen) {
        throw Error(ErrorCode::truncation_refused,
                    "prefix of length " + std::to_string(prefix.size()) +
                        " leaves no room to generate within maxlen " + std::to_string(cfg.maxlen));
    }

    std::vector<uint8_t> is_stop(static_cast<size_t>(cfg.vocab), 0);
    for (TokenId t : stop) {
        if (t < 0 || t >= cfg.vocab) {
            throw Error(ErrorCode::invalid_argument, "stop token out of range: " + std::to_string(t));
        }
        is_stop[static_cast<size_t>(t)] = 1;
    }
    std::vector<TokenId> choices;
    {
        std::vector<uint8_t> seen(static_cast<size_t>(cfg.vocab), 0);
        bool any_allowed = false;
        for (TokenId t : allowed) {
            if (t < 0 || t >= cfg.vocab) {
                throw Error(ErrorCode::invalid_argument,
                            "allowed token out of range: " + std::to_string(t));
            }
            if (!is_stop[static_cast<size_t>(t)]) {
                any_allowed = true;
            }
            seen[static_cast<size_t>(t)] = 1;
        }
        if (!any_allowed) {
            throw Error(ErrorCode::invalid_argument, "allowed set is empty");
        }
        for (TokenId t : stop) {
            seen[static_cast<size_t>(t)] = 1;
        }
        for (TokenId t = 0; t < cfg.vocab; ++t) {
            if (seen[static_cast<size_t>(t)]) {
                choices.push_back(t);
            }
        }
    }

    int room = cfg.maxlen - static_cast<int>(prefix.size());
    int cap = std::min(max_new, room);

    std::vector<detail::LiveHyp<T>> live;
    {
        detail::LiveHyp<T> root;
        root.state = make_decode_state<T>(cfg);
        for (TokenId t : prefix) {
            root.logits = decode_step(cfg, params, root.state, t);
        }
        live.push_back(std::move(root));
    }

    std::vector<BeamHypothesis> pool;
    std::vector<double> row(static_cast<size_t>(cfg.vocab));
    for (int round = 0; round < cap && !live.empty(); ++round) {
        std::vector<detail::Candidate> cands;
        for (size_t i = 0; i < live.size(); ++i) {
            for (int64_t j = 0; j < cfg.vocab; ++j) {
                row[static_cast<size_t>(j)] = static_cast<double>(live[i].logits[static_cast<size_t>(j)]);
            }
            double lse = detail::row_lse(row);
            for (TokenId t : choices) {
                double lp = live[i].hyp.logprob + row[static_cast<size_t>(t)] - lse;
                cands.push_back({i, t, lp, is_stop[static_cast<size_t>(t)] != 0});
            }
        }
        size_t keep = std::min<size_t>(static_cast<size_t>(beam), cands.size());
        std::partial_sort(cands.begin(), cands.begin() + static_cast<ptrdiff_t>(keep), cands.end(),
                          [](const detail::Candidate& a, const detail::Candidate& b) {
                              if (a.logprob != b.logprob) {
                                  return a.logprob > b.logprob;
                              }
                              if (a.token != b.token) {
                                  return a.token < b.token;
                              }
                              return a.parent < b.parent;
                          });
        cands.resize(keep);

        std::vector<detail::LiveHyp<T>> next;
        for (const detail::Candidate& c : cands) {
            if (c.is_stop) {
                BeamHypothesis h = live[c.parent].hyp;
                h.tokens.push_back(c.token);
                h.logprob = c.logprob;
                h.finished = true;
                pool.push_back(std::move(h));
            } else {
                detail::LiveHyp<T> child;
                child.hyp = live[c.parent].hyp;
                child.hyp.tokens.push_back(c.token);
                child.hyp.logprob = c.logprob;
                child.state = live[c.parent].state;
                child.logits = decode_step(cfg, params, child.state, c.token);
                next.push_back(std::move(child));
            }
        }
        live = std::move(next);
    }
    for (detail::LiveHyp<T>& l : live) {
        l.hyp.finished = true;
        pool.push_back(std::move(l.hyp));
    }

    std::sort(pool.begin(), pool.end(), [alpha](const BeamHypothesis& a, const BeamHypothesis& b) {
        double sa = hypothesis_score(a, alpha);
        double sb = hypothesis_score(b, alpha);
        if (sa != sb) {
            return sa > sb;
        }
        return a.tokens < b.tokens;
    });
    return pool;
}

struct Stage {
    std::vector<TokenId> forced;
    Role target;
    std::vector<TokenId> allowed;
    std::vector<TokenId> stop;
    int max_new = 0;
};

struct StagePlan {
    TaskKind kind = TaskKind::textlm;
    std::vector<Stage> stages;
};

struct TaskRequest {
    TaskKind kind = TaskKind::textlm;
    std::vector<TokenId> condition;
    std::vector<TokenId> enrollment;
    std::vector<TokenId> text;
};

namespace detail {

inline std::vector<TokenId> id_range(TokenId lo, TokenId hi) {
    std::vector<TokenId> out;
    out.reserve(static_cast<size_t>(hi - lo));
    for (TokenId t = lo; t < hi; ++t) {
        out.push_back(t);
    }
    return out;
}

inline void require_kind(const std::vector<TokenId>& ids, TokenKind want, const Vocabulary& v,
                         const std::string& field) {
    for (TokenId t : ids) {
        if (t < 0 || t >= v.total_size() || v.kind(t) != want) {
            throw Error(ErrorCode::invalid_argument,
                        field + " contains a token of the wrong kind: " + std::to_string(t));
        }
    }
}

inline int stage_budget(size_t reference) {
    return 4 * static_cast<int>(std::max<size_t>(1, reference));
}

}  // namespace detail

inline std::vector<TokenId> text_token_ids(const Vocabulary& v) {
    return detail::id_range(0, v.text_size());
}

inline std::vector<TokenId> speech_token_ids(const Vocabulary& v) {
    return detail::id_range(v.text_size(), v.text_size() + v.speech_size());
}

inline std::vector<TokenId> stop_token_ids(const Vocabulary& v) {
    std::vector<TokenId> out;
    for (int i = 0; i < kNumPrompts; ++i) {
        out.push_back(v.prompt_id(static_cast<Prompt>(i)));
    }
    out.push_back(v.pad_id());
    return out;
}

inline StagePlan plan_task(const TaskRequest& req, const Vocabulary& v, int max_new_override = 0) {
    StagePlan plan;
    plan.kind = req.kind;
    std::vector<TokenId> stop = stop_token_ids(v);

    const TokenId st = v.prompt_id(Prompt::start_text);
    const TokenId ss = v.prompt_id(Prompt::start_speech);
    const TokenId gt = v.prompt_id(Prompt::generate_text);
    const TokenId gs = v.prompt_id(Prompt::generate_speech);
    const TokenId es = v.prompt_id(Prompt::enroll_speech);

    auto text_stage = [&](std::vector<TokenId> forced, size_t reference) {
        Stage s;
        s.forced = std::move(forced);
        s.target = Role::target_text;
        s.allowed = text_token_ids(v);
        s.stop = stop;
        s.max_new = max_new_override > 0 ? max_new_override : detail::stage_budget(reference);
        plan.stages.push_back(std::move(s));
    };
    auto speech_stage = [&](std::vector<TokenId> forced, size_t reference) {
        Stage s;
        s.forced = std::move(forced);
        s.target = Role::target_speech;
        s.allowed = speech_token_ids(v);
        s.stop = stop;
        s.max_new = max_new_override > 0 ? max_new_override : detail::stage_budget(reference);
        plan.stages.push_back(std::move(s));
    };
    auto cat = [](std::vector<TokenId> a, const std::vector<TokenId>& b) {
        a.insert(a.end(), b.begin(), b.end());
        return a;
    };

    if (req.kind != TaskKind::vc && req.kind != TaskKind::se) {
        if (!req.text.empty()) {
            throw Error(ErrorCode::invalid_argument,
                        "ground-truth text is only meaningful for vc and se requests");
        }
    }
    switch (req.kind) {
        case TaskKind::textlm: {
            detail::require_kind(req.condition, TokenKind::text, v, "condition");
            if (!req.enrollment.empty()) {
                throw Error(ErrorCode::invalid_argument, "textlm takes no enrollment");
            }
            text_stage(cat({gt}, req.condition), std::max<size_t>(req.condition.size(), 4));
            break;
        }
        case TaskKind::speechlm: {
            detail::require_kind(req.condition, TokenKind::speech, v, "condition");
            if (!req.enrollment.empty()) {
                throw Error(ErrorCode::invalid_argument, "speechlm takes no enrollment");
            }
            speech_stage(cat({gs}, req.condition), std::max<size_t>(req.condition.size(), 4));
            break;
        }
        case TaskKind::asr: {
            if (req.condition.empty()) {
                throw Error(ErrorCode::invalid_argument, "asr requires condition speech tokens");
            }
            detail::require_kind(req.condition, TokenKind::speech, v, "condition");
            if (!req.enrollment.empty()) {
                throw Error(ErrorCode::invalid_argument, "asr takes no enrollment");
            }
            text_stage(cat(cat({ss}, req.condition), {gt}), req.condition.size());
            break;
        }
        case TaskKind::tts: {
            if (req.condition.empty()) {
                throw Error(ErrorCode::invalid_argument, "tts requires condition text tokens");
            }
            detail::require_kind(req.condition, TokenKind::text, v, "condition");
            if (req.enrollment.empty()) {
                throw Error(ErrorCode::invalid_argument, "tts requires enrollment speech tokens");
            }
            detail::require_kind(req.enrollment, TokenKind::speech, v, "enrollment");
            speech_stage(cat(cat(cat(cat({st}, req.condition), {es}), req.enrollment), {gs}),
                         req.condition.size());
            break;
        }
        case TaskKind::vc:
        case TaskKind::se: {
            if (req.condition.empty()) {
                throw Error(ErrorCode::invalid_argument, "request requires condition speech tokens");
            }
            detail::require_kind(req.condition, TokenKind::speech, v, "condition");
            if (req.enrollment.empty()) {
                throw Error(ErrorCode::invalid_argument, "request requires enrollment speech tokens");
            }
            detail::require_kind(req.enrollment, TokenKind::speech, v, "enrollment");
            if (!req.text.empty()) {
                detail::require_kind(req.text, TokenKind::text, v, "text");
                speech_stage(cat(cat(cat(cat(cat(cat({ss}, req.condition), {gt}), req.text), {es}),
                                     req.enrollment),
                                 {gs}),
                             req.condition.size());
            } else {
                text_stage(cat(cat({ss}, req.condition), {gt}), req.condition.size());
                speech_stage(cat(cat({es}, req.enrollment), {gs}), req.condition.size());
            }
            break;
        }
    }
    return plan;
}

struct StageResult {
    std::vector<TokenId> generated;
    double logprob = 0.0;
    double score = 0.0;
};

struct TaskResult {
    std::vector<TokenId> context;
    std::vector<StageResult> stages;
    std::vector<TokenId> final_tokens;
};

template <typename T>
TaskResult run_task(const ModelConfig& cfg, const ModelParams<T>& params, const StagePlan& plan,
                    int beam = kDefaultBeam, double alpha = kDefaultAlpha) {
    if (plan.stages.empty()) {
        throw Error(ErrorCode::invalid_argument, "plan has no stages");
    }
    TaskResult result;
    for (size_t si = 0; si < plan.stages.size(); ++si) {
        const Stage& stage = plan.stages[si];
        result.context.insert(result.context.end(), stage.forced.begin(), stage.forced.end());
        if (static_cast<int>(result.context.size()) + 1 > cfg.maxlen) {
            throw Error(ErrorCode::truncation_refused,
                        "stage " + std::to_string(si) + ": context of length " +
                            std::to_string(result.context.size()) +
                            " leaves no room to generate within maxlen " +
                            std::to_string(cfg.maxlen));
        }
        std::vector<BeamHypothesis> ranked = beam_generate(cfg, params, result.context,
                                                           stage.allowed, stage.stop, beam,
                                                           stage.max_new, alpha);
        if (ranked.empty()) {
            throw Error(ErrorCode::decode_failure,
                        "stage " + std::to_string(si) + " produced no finished hypotheses");
        }
        const BeamHypothesis& best = ranked.front();
        StageResult sr;
        sr.generated = best.tokens;
        if (!sr.generated.empty()) {
            TokenId last = sr.generated.back();
            for (TokenId t : stage.stop) {
                if (t == last) {
                    sr.generated.pop_back();
                    break;
                }
            }
        }
        sr.logprob = best.logprob;
        sr.score = hypothesis_score(best, alpha);
        result.context.insert(result.context.end(), sr.generated.begin(), sr.generated.end());
        result.stages.push_back(std::move(sr));
    }
    result.final_tokens = result.stages.back().generated;
    return result;
}

}  // namespace unitlm
