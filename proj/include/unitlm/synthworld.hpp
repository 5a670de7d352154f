#pragma once

#include <array>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "unitlm/error.hpp"
#include "unitlm/format.hpp"
#include "unitlm/rng.hpp"
#include "unitlm/vocab.hpp"

namespace unitlm {

inline constexpr int kNumTasks = 6;
inline constexpr TaskKind kAllTasks[kNumTasks] = {TaskKind::textlm, TaskKind::speechlm, TaskKind::asr,
                                                  TaskKind::tts,    TaskKind::vc,       TaskKind::se};

inline int task_index(TaskKind k) { return static_cast<int>(k); }

enum class Split { train = 0, valid = 1, test = 2 };
inline constexpr int kNumSplits = 3;
inline constexpr const char* kSplitNames[kNumSplits] = {"train", "valid", "test"};

struct WorldConfig {
    int num_speakers = 4;
    int alphabet = 26;
    int units_per_char = 2;
    int speech_vocab = 256;
    double noise_prob = 0.3;
};

// Per-speaker deterministic text-to-unit transducer. Each speaker owns a
// disjoint contiguous slice of the unit range, so any clean utterance
// identifies its speaker, and each character maps to a fixed unit run, so
// transcription inverts exactly.
struct World {
    WorldConfig config;
    uint64_t seed = 0;
    // table[speaker][character] = units_per_char unit ids
    std::vector<std::vector<std::vector<int>>> table;

    int slice_size() const { return config.speech_vocab / config.num_speakers; }

    int speaker_of_unit(int u) const {
        if (u < 0 || u >= config.speech_vocab) {
            raise(ErrorCode::invalid_argument, "unit out of range");
        }
        int s = u / slice_size();
        return s < config.num_speakers ? s : -1;
    }
};

inline Vocabulary world_vocab(const World& w) { return merge_vocab(w.config.alphabet, w.config.speech_vocab); }

inline World make_world(const WorldConfig& config, uint64_t seed) {
    require(config.num_speakers >= 1 && config.alphabet >= 1 && config.units_per_char >= 1 &&
                config.speech_vocab >= 1,
            ErrorCode::invalid_argument, "world dimensions must be positive");
    require(config.noise_prob >= 0.0 && config.noise_prob <= 1.0, ErrorCode::invalid_argument,
            "noise_prob outside [0,1]");
    int needed_per_speaker = config.alphabet * config.units_per_char;
    require(static_cast<int64_t>(config.speech_vocab) >=
                static_cast<int64_t>(config.num_speakers) * needed_per_speaker,
            ErrorCode::invalid_argument,
            "speech vocab " + std::to_string(config.speech_vocab) + " too small, need " +
                std::to_string(static_cast<int64_t>(config.num_speakers) * needed_per_speaker));
    int slice = config.speech_vocab / config.num_speakers;
    require(slice >= needed_per_speaker, ErrorCode::invalid_argument, "speaker slice too small");

    World w;
    w.config = config;
    w.seed = seed;
    Rng rng(seed);
    w.table.resize(config.num_speakers);
    for (int s = 0; s < config.num_speakers; ++s) {
        std::vector<int> pool(slice);
        for (int i = 0; i < slice; ++i) {
            pool[i] = s * slice + i;
        }
        for (int i = slice - 1; i > 0; --i) {
            int j = static_cast<int>(rng.below(static_cast<uint64_t>(i) + 1));
            std::swap(pool[i], pool[j]);
        }
        w.table[s].resize(config.alphabet);
        for (int c = 0; c < config.alphabet; ++c) {
            w.table[s][c].assign(pool.begin() + static_cast<size_t>(c) * config.units_per_char,
                                 pool.begin() + static_cast<size_t>(c + 1) * config.units_per_char);
        }
    }
    return w;
}

inline std::vector<int> render_speech(const World& w, const std::vector<int>& text, int speaker) {
    require(speaker >= 0 && speaker < w.config.num_speakers, ErrorCode::invalid_argument, "unknown speaker");
    std::vector<int> out;
    out.reserve(text.size() * w.config.units_per_char);
    for (int c : text) {
        require(c >= 0 && c < w.config.alphabet, ErrorCode::invalid_argument, "text token outside alphabet");
        const auto& units = w.table[speaker][c];
        out.insert(out.end(), units.begin(), units.end());
    }
    return out;
}

// Each token is independently replaced by a uniform draw over the whole unit
// range with probability noise_prob (the draw may reproduce the original).
inline std::vector<int> corrupt(const World& w, const std::vector<int>& speech, double noise_prob, uint64_t seed) {
    require(noise_prob >= 0.0 && noise_prob <= 1.0, ErrorCode::invalid_argument, "noise_prob outside [0,1]");
    Rng rng(seed);
    std::vector<int> out = speech;
    for (auto& u : out) {
        if (rng.uniform01() < noise_prob) {
            u = static_cast<int>(rng.below(w.config.speech_vocab));
        }
    }
    return out;
}

// Majority vote over slice membership; units in the unassigned tail of the
// range vote for nobody. Ties go to the lowest speaker id.
inline int oracle_speaker(const World& w, const std::vector<int>& speech) {
    require(!speech.empty(), ErrorCode::invalid_argument, "empty speech");
    std::vector<int> votes(w.config.num_speakers, 0);
    for (int u : speech) {
        int s = w.speaker_of_unit(u);
        if (s >= 0) {
            ++votes[s];
        }
    }
    int best = 0;
    for (int s = 1; s < w.config.num_speakers; ++s) {
        if (votes[s] > votes[best]) {
            best = s;
        }
    }
    return best;
}

struct TranscribeResult {
    std::vector<int> text;            // -1 marks an unmatched chunk
    std::vector<int> error_positions; // chunk indices that failed to invert
    int speaker = -1;

    bool clean() const { return error_positions.empty(); }
};

// Inverts the identified speaker's table chunk by chunk. Chunks with no
// table entry come back as -1; they can never match a reference token, so
// they surface as substitutions in error metrics.
inline TranscribeResult oracle_transcribe(const World& w, const std::vector<int>& speech) {
    require(!speech.empty(), ErrorCode::invalid_argument, "empty speech");
    int upc = w.config.units_per_char;
    require(static_cast<int>(speech.size()) % upc == 0, ErrorCode::invalid_argument,
            "speech length not divisible by units_per_char");
    TranscribeResult res;
    res.speaker = oracle_speaker(w, speech);

    std::map<std::vector<int>, int> inverse;
    for (int c = 0; c < w.config.alphabet; ++c) {
        inverse[w.table[res.speaker][c]] = c;
    }
    int chunks = static_cast<int>(speech.size()) / upc;
    for (int i = 0; i < chunks; ++i) {
        std::vector<int> chunk(speech.begin() + static_cast<size_t>(i) * upc,
                               speech.begin() + static_cast<size_t>(i + 1) * upc);
        auto it = inverse.find(chunk);
        if (it != inverse.end()) {
            res.text.push_back(it->second);
        } else {
            res.text.push_back(-1);
            res.error_positions.push_back(i);
        }
    }
    return res;
}

// Continuous stand-in features: every unit has a fixed anchor point in R^dim
// derived from the world seed; a frame is its unit's anchor plus Gaussian
// jitter. Quantizing these frames recovers the unit stream.
inline std::vector<float> unit_anchor(const World& w, int unit, int dim) {
    require(unit >= 0 && unit < w.config.speech_vocab, ErrorCode::invalid_argument, "unit out of range");
    require(dim >= 1, ErrorCode::invalid_argument, "dim must be positive");
    Rng rng(hash_combine(hash_combine(w.seed, 0x616e63686f72ull), static_cast<uint64_t>(unit)));
    std::vector<float> anchor(dim);
    for (auto& v : anchor) {
        v = static_cast<float>(10.0 * rng.gauss());
    }
    return anchor;
}

inline std::vector<float> render_frames(const World& w, const std::vector<int>& units, int dim, double jitter,
                                        uint64_t seed) {
    Rng rng(seed);
    std::vector<float> frames;
    frames.reserve(units.size() * dim);
    for (int u : units) {
        auto anchor = unit_anchor(w, u, dim);
        for (float v : anchor) {
            frames.push_back(v + static_cast<float>(jitter * rng.gauss()));
        }
    }
    return frames;
}

// --------------------------------------------------------------------------
// Dataset generation
// --------------------------------------------------------------------------

struct GenConfig {
    std::array<int, kNumTasks> counts{}; // total examples per task, split 80/10/10 by default
    int text_len_min = 3;
    int text_len_max = 8;
    double valid_frac = 0.1;
    double test_frac = 0.1;
};

struct GeneratedData {
    std::array<std::array<std::vector<FormattedExample>, kNumSplits>, kNumTasks> data;

    const std::vector<FormattedExample>& of(TaskKind k, Split s) const {
        return data[task_index(k)][static_cast<int>(s)];
    }
    std::vector<FormattedExample>& of(TaskKind k, Split s) { return data[task_index(k)][static_cast<int>(s)]; }
};

namespace detail {

// Every text string has one fixed split, decided by a content hash, so no
// string can leak across splits no matter which task drew it.
inline Split split_of_text(const World& w, const std::vector<int>& text, double valid_frac, double test_frac) {
    uint64_t h = hash_combine(w.seed, 0x73706c6974ull);
    for (int c : text) {
        h = hash_combine(h, static_cast<uint64_t>(c) + 1);
    }
    double frac = static_cast<double>(h >> 11) * 0x1.0p-53;
    if (frac < test_frac) {
        return Split::test;
    }
    if (frac < test_frac + valid_frac) {
        return Split::valid;
    }
    return Split::train;
}

inline std::vector<int> draw_text_for_split(const World& w, const GenConfig& cfg, Split want, Rng& rng) {
    for (int attempt = 0; attempt < 10000; ++attempt) {
        int len = cfg.text_len_min + static_cast<int>(rng.below(cfg.text_len_max - cfg.text_len_min + 1));
        std::vector<int> text(len);
        for (auto& c : text) {
            c = static_cast<int>(rng.below(w.config.alphabet));
        }
        if (split_of_text(w, text, cfg.valid_frac, cfg.test_frac) == want) {
            return text;
        }
    }
    raise(ErrorCode::insufficient_data, "could not draw a text for the requested split");
}

inline std::vector<TokenId> chars_to_ids(const Vocabulary& v, const std::vector<int>& chars) {
    std::vector<TokenId> out(chars.size());
    for (size_t i = 0; i < chars.size(); ++i) {
        out[i] = v.text_id(chars[i]);
    }
    return out;
}

inline std::vector<TokenId> units_to_ids(const Vocabulary& v, const std::vector<int>& units) {
    std::vector<TokenId> out(units.size());
    for (size_t i = 0; i < units.size(); ++i) {
        out[i] = v.speech_id(units[i]);
    }
    return out;
}

} // namespace detail

inline std::vector<int> ids_to_units(const Vocabulary& v, const std::vector<TokenId>& ids) {
    std::vector<int> out(ids.size());
    for (size_t i = 0; i < ids.size(); ++i) {
        out[i] = v.speech_unit(ids[i]);
    }
    return out;
}

inline std::vector<int> ids_to_chars(const Vocabulary& v, const std::vector<TokenId>& ids) {
    std::vector<int> out(ids.size());
    for (size_t i = 0; i < ids.size(); ++i) {
        require(v.kind(ids[i]) == TokenKind::text, ErrorCode::invalid_argument, "not a text id");
        out[i] = ids[i];
    }
    return out;
}

inline GeneratedData gen_dataset(const World& w, const GenConfig& cfg, uint64_t seed) {
    require(cfg.text_len_min >= 1 && cfg.text_len_max >= cfg.text_len_min, ErrorCode::invalid_argument,
            "bad text length range");
    require(cfg.valid_frac >= 0 && cfg.test_frac >= 0 && cfg.valid_frac + cfg.test_frac < 1.0,
            ErrorCode::invalid_argument, "bad split fractions");
    for (int c : cfg.counts) {
        require(c >= 0, ErrorCode::invalid_argument, "negative example count");
    }
    bool needs_two_speakers = cfg.counts[task_index(TaskKind::vc)] > 0;
    require(!needs_two_speakers || w.config.num_speakers >= 2, ErrorCode::invalid_argument,
            "vc requires at least 2 speakers");

    Vocabulary vocab = world_vocab(w);
    GeneratedData out;
    for (int t = 0; t < kNumTasks; ++t) {
        TaskKind kind = kAllTasks[t];
        int total = cfg.counts[t];
        int n_valid = static_cast<int>(total * cfg.valid_frac);
        int n_test = static_cast<int>(total * cfg.test_frac);
        std::array<int, kNumSplits> per_split = {total - n_valid - n_test, n_valid, n_test};
        for (int sp = 0; sp < kNumSplits; ++sp) {
            Split split = static_cast<Split>(sp);
            for (int i = 0; i < per_split[sp]; ++i) {
                Rng rng(hash_combine(hash_combine(hash_combine(seed, static_cast<uint64_t>(t)),
                                                  static_cast<uint64_t>(sp)),
                                     static_cast<uint64_t>(i)));
                auto text = detail::draw_text_for_split(w, cfg, split, rng);
                Parts p;
                switch (kind) {
                    case TaskKind::textlm: {
                        p.text = detail::chars_to_ids(vocab, text);
                        break;
                    }
                    case TaskKind::speechlm: {
                        int s = static_cast<int>(rng.below(w.config.num_speakers));
                        p.speech = detail::units_to_ids(vocab, render_speech(w, text, s));
                        break;
                    }
                    case TaskKind::asr: {
                        int s = static_cast<int>(rng.below(w.config.num_speakers));
                        p.speech = detail::units_to_ids(vocab, render_speech(w, text, s));
                        p.text = detail::chars_to_ids(vocab, text);
                        break;
                    }
                    case TaskKind::tts: {
                        int s = static_cast<int>(rng.below(w.config.num_speakers));
                        auto enroll_text = detail::draw_text_for_split(w, cfg, split, rng);
                        p.text = detail::chars_to_ids(vocab, text);
                        p.enroll = detail::units_to_ids(vocab, render_speech(w, enroll_text, s));
                        p.tgt = detail::units_to_ids(vocab, render_speech(w, text, s));
                        break;
                    }
                    case TaskKind::vc: {
                        int a = static_cast<int>(rng.below(w.config.num_speakers));
                        int b = static_cast<int>(rng.below(w.config.num_speakers - 1));
                        if (b >= a) {
                            ++b;
                        }
                        auto enroll_text = detail::draw_text_for_split(w, cfg, split, rng);
                        p.src = detail::units_to_ids(vocab, render_speech(w, text, a));
                        p.text = detail::chars_to_ids(vocab, text);
                        p.enroll = detail::units_to_ids(vocab, render_speech(w, enroll_text, b));
                        p.tgt = detail::units_to_ids(vocab, render_speech(w, text, b));
                        break;
                    }
                    case TaskKind::se: {
                        int s = static_cast<int>(rng.below(w.config.num_speakers));
                        auto enroll_text = detail::draw_text_for_split(w, cfg, split, rng);
                        auto clean = render_speech(w, text, s);
                        auto noisy = corrupt(w, clean, w.config.noise_prob, rng.u64());
                        p.src = detail::units_to_ids(vocab, noisy);
                        p.text = detail::chars_to_ids(vocab, text);
                        p.enroll = detail::units_to_ids(vocab, render_speech(w, enroll_text, s));
                        p.tgt = detail::units_to_ids(vocab, clean);
                        break;
                    }
                }
                out.of(kind, split).push_back(build_sequence(kind, p, vocab));
            }
        }
    }
    return out;
}

// --------------------------------------------------------------------------
// World file: key=value header, blank line, one table line per
// (speaker, character): "spk=<i> char=<j> units=<u1> <u2> ...".
// --------------------------------------------------------------------------

inline void save_world(std::ostream& out, const World& w) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), w.config.noise_prob);
    out << "num_speakers=" << w.config.num_speakers << '\n';
    out << "alphabet=" << w.config.alphabet << '\n';
    out << "units_per_char=" << w.config.units_per_char << '\n';
    out << "speech_vocab=" << w.config.speech_vocab << '\n';
    out << "noise_prob=" << std::string(buf, res.ptr) << '\n';
    out << "seed=" << w.seed << '\n';
    out << '\n';
    for (int s = 0; s < w.config.num_speakers; ++s) {
        for (int c = 0; c < w.config.alphabet; ++c) {
            out << "spk=" << s << " char=" << c << " units=";
            for (size_t i = 0; i < w.table[s][c].size(); ++i) {
                out << (i ? " " : "") << w.table[s][c][i];
            }
            out << '\n';
        }
    }
    require(out.good(), ErrorCode::io_failure, "world write failed");
}

inline World load_world(std::istream& in) {
    std::map<std::string, std::string> header;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (line.empty()) {
            break;
        }
        size_t eq = line.find('=');
        require(eq != std::string::npos, ErrorCode::unparseable, "world header line without '='");
        header[line.substr(0, eq)] = line.substr(eq + 1);
    }
    auto get = [&](const char* key) {
        auto it = header.find(key);
        require(it != header.end(), ErrorCode::unparseable, std::string("world header missing '") + key + "'");
        return it->second;
    };
    World w;
    try {
        w.config.num_speakers = std::stoi(get("num_speakers"));
        w.config.alphabet = std::stoi(get("alphabet"));
        w.config.units_per_char = std::stoi(get("units_per_char"));
        w.config.speech_vocab = std::stoi(get("speech_vocab"));
        w.config.noise_prob = std::stod(get("noise_prob"));
        w.seed = std::stoull(get("seed"));
    } catch (const Error&) {
        throw;
    } catch (const std::exception&) {
        raise(ErrorCode::unparseable, "world header has a malformed value");
    }
    require(w.config.num_speakers >= 1 && w.config.alphabet >= 1 && w.config.units_per_char >= 1 &&
                w.config.speech_vocab >= 1,
            ErrorCode::unparseable, "world header has non-positive dimensions");

    w.table.assign(w.config.num_speakers, std::vector<std::vector<int>>(w.config.alphabet));
    int lines_seen = 0;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (line.empty()) {
            continue;
        }
        int s = -1, c = -1, consumed = -1;
        if (std::sscanf(line.c_str(), "spk=%d char=%d units=%n", &s, &c, &consumed) != 2 || consumed < 0) {
            raise(ErrorCode::unparseable, "bad world table line '" + line + "'");
        }
        require(s >= 0 && s < w.config.num_speakers && c >= 0 && c < w.config.alphabet, ErrorCode::unparseable,
                "world table line out of range");
        require(w.table[s][c].empty(), ErrorCode::unparseable, "duplicate world table line");
        std::string rest = line.substr(consumed);
        size_t pos = 0;
        while (pos < rest.size()) {
            size_t sp = rest.find(' ', pos);
            if (sp == std::string::npos) {
                sp = rest.size();
            }
            require(sp > pos, ErrorCode::unparseable, "bad unit list");
            int u = -1;
            auto conv = std::from_chars(rest.data() + pos, rest.data() + sp, u);
            require(conv.ec == std::errc() && conv.ptr == rest.data() + sp, ErrorCode::unparseable, "bad unit");
            w.table[s][c].push_back(u);
            pos = sp + (sp < rest.size() ? 1 : 0);
        }
        require(static_cast<int>(w.table[s][c].size()) == w.config.units_per_char, ErrorCode::unparseable,
                "unit run length does not match units_per_char");
        ++lines_seen;
    }
    require(lines_seen == w.config.num_speakers * w.config.alphabet, ErrorCode::unparseable,
            "world table is incomplete");

    // re-validate the structural invariants rather than trusting the file
    int slice = w.slice_size();
    std::map<std::vector<int>, int> seen_entries;
    for (int s = 0; s < w.config.num_speakers; ++s) {
        for (int c = 0; c < w.config.alphabet; ++c) {
            for (int u : w.table[s][c]) {
                require(u >= 0 && u < w.config.speech_vocab, ErrorCode::unparseable, "unit outside speech vocab");
                require(u / slice == s, ErrorCode::unparseable, "unit outside its speaker slice");
            }
            auto [it, inserted] = seen_entries.insert({w.table[s][c], s * w.config.alphabet + c});
            require(inserted, ErrorCode::unparseable, "pronunciation table not injective");
        }
    }
    return w;
}

inline void save_world_file(const std::string& path, const World& w) {
    std::ofstream out(path, std::ios::binary);
    require(out.is_open(), ErrorCode::io_failure, "cannot open '" + path + "' for writing");
    save_world(out, w);
}

inline World load_world_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.is_open(), ErrorCode::io_failure, "cannot open '" + path + "'");
    return load_world(in);
}

} // namespace unitlm
