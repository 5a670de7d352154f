#pragma once

#include <charconv>
#include <cstdint>
#include <istream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "unitlm/error.hpp"
#include "unitlm/vocab.hpp"

namespace unitlm {

enum class TaskKind { textlm, speechlm, asr, tts, vc, se };

inline const char* to_string(TaskKind k) {
    switch (k) {
        case TaskKind::textlm: return "textlm";
        case TaskKind::speechlm: return "speechlm";
        case TaskKind::asr: return "asr";
        case TaskKind::tts: return "tts";
        case TaskKind::vc: return "vc";
        case TaskKind::se: return "se";
    }
    return "?";
}

inline TaskKind task_kind_from_string(const std::string& s) {
    if (s == "textlm") return TaskKind::textlm;
    if (s == "speechlm") return TaskKind::speechlm;
    if (s == "asr") return TaskKind::asr;
    if (s == "tts") return TaskKind::tts;
    if (s == "vc") return TaskKind::vc;
    if (s == "se") return TaskKind::se;
    raise(ErrorCode::unparseable, "unknown task kind '" + s + "'");
}

// Result kind of parsing a bare token sequence. VC and SE share one prompt
// skeleton and are content-indistinguishable, so parsing merges them.
enum class ParsedTask { textlm, speechlm, asr, tts, vc_or_se };

inline ParsedTask parsed_kind(TaskKind k) {
    switch (k) {
        case TaskKind::textlm: return ParsedTask::textlm;
        case TaskKind::speechlm: return ParsedTask::speechlm;
        case TaskKind::asr: return ParsedTask::asr;
        case TaskKind::tts: return ParsedTask::tts;
        case TaskKind::vc:
        case TaskKind::se: return ParsedTask::vc_or_se;
    }
    return ParsedTask::textlm;
}

enum class Role { condition_text, condition_speech, enroll_speech, target_text, target_speech, prompt };

inline bool is_target_role(Role r) { return r == Role::target_text || r == Role::target_speech; }

// Half-open span of one role within the flat token sequence.
struct Segment {
    Role role;
    int begin;
    int end;

    bool operator==(const Segment&) const = default;
};

// Named sub-sequences feeding build_sequence. Which fields must be present
// depends on the task template.
struct Parts {
    std::optional<std::vector<TokenId>> text;
    std::optional<std::vector<TokenId>> speech;
    std::optional<std::vector<TokenId>> src;
    std::optional<std::vector<TokenId>> enroll;
    std::optional<std::vector<TokenId>> tgt;
};

struct FormattedExample {
    TaskKind task_kind;
    std::vector<TokenId> tokens;
    std::vector<Segment> segments;

    int length() const { return static_cast<int>(tokens.size()); }

    std::vector<int> target_segment_indices() const {
        std::vector<int> out;
        for (size_t i = 0; i < segments.size(); ++i) {
            if (is_target_role(segments[i].role)) {
                out.push_back(static_cast<int>(i));
            }
        }
        return out;
    }

    int num_target_segments() const { return static_cast<int>(target_segment_indices().size()); }

    // Tokens of the n-th segment carrying the given role (0-based n).
    std::vector<TokenId> part(Role role, int occurrence = 0) const {
        int seen = 0;
        for (const Segment& s : segments) {
            if (s.role != role) {
                continue;
            }
            if (seen == occurrence) {
                return std::vector<TokenId>(tokens.begin() + s.begin, tokens.begin() + s.end);
            }
            ++seen;
        }
        raise(ErrorCode::invalid_argument, "example has no such segment");
    }
};

namespace detail {

inline std::string fmt_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

inline void check_part_range(const std::vector<TokenId>& part, TokenKind want, const Vocabulary& vocab,
                             const char* name) {
    require(!part.empty(), ErrorCode::invalid_argument, std::string("part '") + name + "' is empty");
    for (TokenId id : part) {
        TokenKind k = vocab.kind(id);
        require(k != TokenKind::prompt && k != TokenKind::pad, ErrorCode::range_violation,
                std::string("structural token inside part '") + name + "'");
        require(k == want, ErrorCode::range_violation,
                std::string("token ") + std::to_string(id) + " has the wrong kind for part '" + name + "'");
    }
}

struct TemplatePiece {
    Prompt prompt;
    Role role;          // role of the run following the prompt
    TokenKind run_kind; // text or speech
};

// The Table-1 templates, as prompt/run alternations. The end-of-example
// sentinel is appended separately.
inline const std::vector<TemplatePiece>& template_pieces(TaskKind kind) {
    static const std::vector<TemplatePiece> textlm = {
        {Prompt::generate_text, Role::target_text, TokenKind::text},
    };
    static const std::vector<TemplatePiece> speechlm = {
        {Prompt::generate_speech, Role::target_speech, TokenKind::speech},
    };
    static const std::vector<TemplatePiece> asr = {
        {Prompt::start_speech, Role::condition_speech, TokenKind::speech},
        {Prompt::generate_text, Role::target_text, TokenKind::text},
    };
    static const std::vector<TemplatePiece> tts = {
        {Prompt::start_text, Role::condition_text, TokenKind::text},
        {Prompt::enroll_speech, Role::enroll_speech, TokenKind::speech},
        {Prompt::generate_speech, Role::target_speech, TokenKind::speech},
    };
    static const std::vector<TemplatePiece> vcse = {
        {Prompt::start_speech, Role::condition_speech, TokenKind::speech},
        {Prompt::generate_text, Role::target_text, TokenKind::text},
        {Prompt::enroll_speech, Role::enroll_speech, TokenKind::speech},
        {Prompt::generate_speech, Role::target_speech, TokenKind::speech},
    };
    switch (kind) {
        case TaskKind::textlm: return textlm;
        case TaskKind::speechlm: return speechlm;
        case TaskKind::asr: return asr;
        case TaskKind::tts: return tts;
        case TaskKind::vc:
        case TaskKind::se: return vcse;
    }
    return textlm;
}

// Field names of the dataset file format, in template order.
inline std::vector<const char*> field_names(TaskKind kind) {
    switch (kind) {
        case TaskKind::textlm: return {"text"};
        case TaskKind::speechlm: return {"speech"};
        case TaskKind::asr: return {"speech", "text"};
        case TaskKind::tts: return {"text", "enroll", "tgt"};
        case TaskKind::vc:
        case TaskKind::se: return {"src", "text", "enroll", "tgt"};
    }
    return {};
}

inline const std::optional<std::vector<TokenId>>& field_ref(const Parts& parts, const std::string& name) {
    if (name == "text") return parts.text;
    if (name == "speech") return parts.speech;
    if (name == "src") return parts.src;
    if (name == "enroll") return parts.enroll;
    if (name == "tgt") return parts.tgt;
    raise(ErrorCode::template_violation, "unknown part name '" + name + "'");
}

inline std::optional<std::vector<TokenId>>& field_ref(Parts& parts, const std::string& name) {
    return const_cast<std::optional<std::vector<TokenId>>&>(field_ref(static_cast<const Parts&>(parts), name));
}

} // namespace detail

// Assembles the exact prompt-token template for the task and labels every
// span. A sentinel (the pad id, acting as end-of-example) terminates the
// sequence; it is carried as a trailing structural segment.
inline FormattedExample build_sequence(TaskKind kind, const Parts& parts, const Vocabulary& vocab) {
    const auto& pieces = detail::template_pieces(kind);
    const auto names = detail::field_names(kind);

    static const char* all_names[] = {"text", "speech", "src", "enroll", "tgt"};
    for (const char* n : all_names) {
        bool wanted = false;
        for (const char* w : names) {
            wanted = wanted || std::string(w) == n;
        }
        const auto& field = detail::field_ref(parts, n);
        if (wanted) {
            require(field.has_value(), ErrorCode::template_violation,
                    std::string(to_string(kind)) + " requires part '" + n + "'");
        } else {
            require(!field.has_value(), ErrorCode::template_violation,
                    std::string(to_string(kind)) + " does not take part '" + n + "'");
        }
    }

    FormattedExample ex;
    ex.task_kind = kind;
    for (size_t i = 0; i < pieces.size(); ++i) {
        const auto& piece = pieces[i];
        const auto& run = *detail::field_ref(parts, names[i]);
        detail::check_part_range(run, piece.run_kind, vocab, names[i]);

        int at = ex.length();
        ex.tokens.push_back(vocab.prompt_id(piece.prompt));
        ex.segments.push_back({Role::prompt, at, at + 1});
        ex.tokens.insert(ex.tokens.end(), run.begin(), run.end());
        ex.segments.push_back({piece.role, at + 1, at + 1 + static_cast<int>(run.size())});
    }

    int at = ex.length();
    ex.tokens.push_back(vocab.pad_id());
    ex.segments.push_back({Role::prompt, at, at + 1});
    return ex;
}

struct ParseResult {
    ParsedTask kind;
    std::vector<Segment> segments;
};

// Inverse of build_sequence: recovers the unique template matching the
// prompt-token skeleton. The trailing sentinel is optional so that
// model-generated sequences (which stop *on* the sentinel and drop it)
// parse too.
inline ParseResult parse_sequence(const std::vector<TokenId>& tokens, const Vocabulary& vocab) {
    require(!tokens.empty(), ErrorCode::invalid_argument, "empty token sequence");
    for (TokenId id : tokens) {
        vocab.kind(id); // throws range-violation on out-of-range ids
    }

    struct Piece {
        Prompt prompt;
        int begin; // run start
        int end;   // run end
        TokenKind run_kind;
    };
    std::vector<Piece> pieces;
    bool saw_sentinel = false;

    int n = static_cast<int>(tokens.size());
    int i = 0;
    while (i < n) {
        TokenKind k = vocab.kind(tokens[i]);
        if (k == TokenKind::pad) {
            require(i == n - 1, ErrorCode::unparseable, "sentinel before end of sequence");
            saw_sentinel = true;
            ++i;
            continue;
        }
        require(k == TokenKind::prompt, ErrorCode::unparseable, "expected a prompt token at position " +
                                                                    std::to_string(i));
        Prompt p = vocab.prompt_at(tokens[i]);
        int run_begin = i + 1;
        int j = run_begin;
        while (j < n && (vocab.kind(tokens[j]) == TokenKind::text || vocab.kind(tokens[j]) == TokenKind::speech)) {
            ++j;
        }
        require(j > run_begin, ErrorCode::unparseable, "prompt token with empty run");
        TokenKind run_kind = vocab.kind(tokens[run_begin]);
        for (int t = run_begin; t < j; ++t) {
            require(vocab.kind(tokens[t]) == run_kind, ErrorCode::unparseable, "mixed-kind token run");
        }
        pieces.push_back({p, run_begin, j, run_kind});
        i = j;
    }
    require(!pieces.empty(), ErrorCode::unparseable, "no prompt skeleton found");

    static const TaskKind candidates[] = {TaskKind::textlm, TaskKind::speechlm, TaskKind::asr, TaskKind::tts,
                                          TaskKind::vc};
    for (TaskKind kind : candidates) {
        const auto& tpl = detail::template_pieces(kind);
        if (tpl.size() != pieces.size()) {
            continue;
        }
        bool ok = true;
        for (size_t t = 0; t < tpl.size(); ++t) {
            ok = ok && tpl[t].prompt == pieces[t].prompt && tpl[t].run_kind == pieces[t].run_kind;
        }
        if (!ok) {
            continue;
        }
        ParseResult res;
        res.kind = parsed_kind(kind);
        for (size_t t = 0; t < tpl.size(); ++t) {
            res.segments.push_back({Role::prompt, pieces[t].begin - 1, pieces[t].begin});
            res.segments.push_back({tpl[t].role, pieces[t].begin, pieces[t].end});
        }
        if (saw_sentinel) {
            res.segments.push_back({Role::prompt, n - 1, n});
        }
        return res;
    }
    raise(ErrorCode::unparseable, "prompt skeleton matches no task template");
}

// Loss-target choice: the whole sequence, or one target segment (1-based).
struct LossSelector {
    int value = 0; // 0 = global

    static LossSelector global() { return {0}; }
    static LossSelector segment(int j) { return {j}; }
    bool is_global() const { return value == 0; }
};

// Boolean mask over *predicted* token indices: mask[i] set means the
// prediction of tokens[i] from tokens[0..i) is scored. Global scoring covers
// every position except 0 (the sentinel included, which is how the model
// learns to stop); a segment selector covers exactly that target segment.
inline std::vector<uint8_t> segment_loss_mask(const FormattedExample& ex, LossSelector selector) {
    std::vector<uint8_t> mask(ex.tokens.size(), 0);
    if (selector.is_global()) {
        for (size_t i = 1; i < mask.size(); ++i) {
            mask[i] = 1;
        }
        return mask;
    }
    const auto targets = ex.target_segment_indices();
    require(selector.value >= 1 && selector.value <= static_cast<int>(targets.size()), ErrorCode::invalid_argument,
            "segment selector " + std::to_string(selector.value) + " out of range");
    const Segment& seg = ex.segments[targets[selector.value - 1]];
    for (int i = seg.begin; i < seg.end; ++i) {
        mask[i] = 1;
    }
    return mask;
}

// ---------------------------------------------------------------------------
// Dataset file format: one example per line,
//   <task_kind> TAB <name>=<id> <id> ... TAB ...
// with fields in template order; '#' starts a comment line.
// ---------------------------------------------------------------------------

inline std::string serialize_example(const FormattedExample& ex) {
    const auto names = detail::field_names(ex.task_kind);
    const auto& pieces = detail::template_pieces(ex.task_kind);
    std::string line = to_string(ex.task_kind);
    for (size_t i = 0; i < names.size(); ++i) {
        int occurrence = 0;
        for (size_t t = 0; t < i; ++t) {
            if (pieces[t].role == pieces[i].role) {
                ++occurrence;
            }
        }
        const auto run = ex.part(pieces[i].role, occurrence);
        line += '\t';
        line += names[i];
        line += '=';
        for (size_t t = 0; t < run.size(); ++t) {
            if (t > 0) {
                line += ' ';
            }
            line += std::to_string(run[t]);
        }
    }
    return line;
}

namespace detail {

inline std::vector<TokenId> parse_id_list(const std::string& s) {
    std::vector<TokenId> ids;
    require(!s.empty(), ErrorCode::unparseable, "empty id list");
    size_t pos = 0;
    while (pos < s.size()) {
        size_t end = s.find(' ', pos);
        if (end == std::string::npos) {
            end = s.size();
        }
        require(end > pos, ErrorCode::unparseable, "malformed id list (double space?)");
        const std::string tok = s.substr(pos, end - pos);
        size_t used = 0;
        long v = 0;
        try {
            v = std::stol(tok, &used);
        } catch (const std::exception&) {
            raise(ErrorCode::unparseable, "bad token id '" + tok + "'");
        }
        require(used == tok.size() && v >= 0, ErrorCode::unparseable, "bad token id '" + tok + "'");
        ids.push_back(static_cast<TokenId>(v));
        pos = end + (end < s.size() ? 1 : 0);
    }
    return ids;
}

} // namespace detail

inline FormattedExample parse_dataset_line(const std::string& line, const Vocabulary& vocab) {
    std::vector<std::string> fields;
    size_t pos = 0;
    while (true) {
        size_t tab = line.find('\t', pos);
        if (tab == std::string::npos) {
            fields.push_back(line.substr(pos));
            break;
        }
        fields.push_back(line.substr(pos, tab - pos));
        pos = tab + 1;
    }
    require(fields.size() >= 2, ErrorCode::unparseable, "dataset line needs a task kind and at least one field");

    TaskKind kind = task_kind_from_string(fields[0]);
    Parts parts;
    for (size_t i = 1; i < fields.size(); ++i) {
        size_t eq = fields[i].find('=');
        require(eq != std::string::npos, ErrorCode::unparseable, "field without '='");
        const std::string name = fields[i].substr(0, eq);
        auto& slot = detail::field_ref(parts, name);
        require(!slot.has_value(), ErrorCode::unparseable, "duplicate field '" + name + "'");
        slot = detail::parse_id_list(fields[i].substr(eq + 1));
    }
    return build_sequence(kind, parts, vocab);
}

inline void save_dataset(std::ostream& out, const std::vector<FormattedExample>& examples) {
    for (const auto& ex : examples) {
        out << serialize_example(ex) << '\n';
    }
}

inline std::vector<FormattedExample> load_dataset(std::istream& in, const Vocabulary& vocab) {
    std::vector<FormattedExample> out;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (line.empty() || line[0] == '#') {
            continue;
        }
        out.push_back(parse_dataset_line(line, vocab));
    }
    return out;
}

} // namespace unitlm
