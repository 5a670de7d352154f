#pragma once

// Run configuration: one flat UTF-8 file of `section.key=value` lines
// covering every knob in the pipeline. Unknown keys are errors. The same
// writer emits the effective config next to experiment outputs, so a saved
// file always round-trips.

#include <charconv>
#include <cstdint>
#include <istream>
#include <ostream>
#include <string>

#include "unitlm/decoder.hpp"
#include "unitlm/error.hpp"
#include "unitlm/model.hpp"
#include "unitlm/rng.hpp"
#include "unitlm/synthworld.hpp"
#include "unitlm/trainer.hpp"

namespace unitlm {

struct QuantizerConfig {
    int frames = 10000;
    int dim = 8;
    int k = 0; // 0 means world.speech_vocab
    int max_iters = 300;
    double tol = 1e-6;
    double jitter = 0.01;
};

struct RunConfig {
    WorldConfig world;
    GenConfig gen;
    ModelConfig model; // vocab stays 0 here; it is derived from the world
    TrainConfig train;
    QuantizerConfig quantizer;
    int beam = kDefaultBeam;
    double alpha = kDefaultAlpha;
    std::string experiment;
    std::string out_dir = "out";
    uint64_t seed = 1;
    int threads = 1;

    // Defaults are sized so the whole gen/train/eval pipeline finishes in
    // about a minute on one core while still learning the easy tasks.
    RunConfig() {
        world = {2, 8, 2, 64, 0.2};
        gen.counts = {300, 300, 300, 300, 150, 150};
        model = {2, 64, 2, 0, 128, 4, true};
        train.peak_lr = 1e-3;
        train.warmup_steps = 100;
        train.total_steps = 800;
        train.log_every = 50;
    }
};

// Every stream of randomness hangs off run.seed through a fixed tag.
inline constexpr uint64_t kSeedWorld = 0x776f726c64ull;
inline constexpr uint64_t kSeedGen = 0x67656eull;
inline constexpr uint64_t kSeedInit = 0x696e6974ull;
inline constexpr uint64_t kSeedTrain = 0x747261696eull;
inline constexpr uint64_t kSeedFrames = 0x6672616d6573ull;

inline uint64_t derive_seed(uint64_t base, uint64_t tag) { return hash_combine(base, tag); }

namespace detail {

inline int64_t parse_int(const std::string& key, const std::string& value) {
    int64_t out = 0;
    const char* begin = value.data();
    const char* end = begin + value.size();
    auto res = std::from_chars(begin, end, out);
    if (res.ec != std::errc() || res.ptr != end) {
        throw Error(ErrorCode::unparseable, "bad integer for " + key + ": " + value);
    }
    return out;
}

inline double parse_double(const std::string& key, const std::string& value) {
    double out = 0;
    const char* begin = value.data();
    const char* end = begin + value.size();
    auto res = std::from_chars(begin, end, out);
    if (res.ec != std::errc() || res.ptr != end) {
        throw Error(ErrorCode::unparseable, "bad number for " + key + ": " + value);
    }
    return out;
}

inline bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1") {
        return true;
    }
    if (value == "false" || value == "0") {
        return false;
    }
    throw Error(ErrorCode::unparseable, "bad boolean for " + key + ": " + value);
}

} // namespace detail

inline void apply_config_kv(RunConfig& rc, const std::string& key, const std::string& value) {
    auto as_int = [&] { return static_cast<int>(detail::parse_int(key, value)); };
    auto as_i64 = [&] { return detail::parse_int(key, value); };
    auto as_double = [&] { return detail::parse_double(key, value); };
    auto as_bool = [&] { return detail::parse_bool(key, value); };

    if (key == "world.num_speakers") { rc.world.num_speakers = as_int(); return; }
    if (key == "world.alphabet") { rc.world.alphabet = as_int(); return; }
    if (key == "world.units_per_char") { rc.world.units_per_char = as_int(); return; }
    if (key == "world.speech_vocab") { rc.world.speech_vocab = as_int(); return; }
    if (key == "world.noise_prob") { rc.world.noise_prob = as_double(); return; }

    for (int t = 0; t < kNumTasks; ++t) {
        if (key == std::string("gen.") + to_string(kAllTasks[t])) {
            rc.gen.counts[static_cast<size_t>(t)] = as_int();
            return;
        }
    }
    if (key == "gen.text_len_min") { rc.gen.text_len_min = as_int(); return; }
    if (key == "gen.text_len_max") { rc.gen.text_len_max = as_int(); return; }
    if (key == "gen.valid_frac") { rc.gen.valid_frac = as_double(); return; }
    if (key == "gen.test_frac") { rc.gen.test_frac = as_double(); return; }

    if (key == "model.layers") { rc.model.layers = as_int(); return; }
    if (key == "model.hidden") { rc.model.hidden = as_int(); return; }
    if (key == "model.heads") { rc.model.heads = as_int(); return; }
    if (key == "model.maxlen") { rc.model.maxlen = as_int(); return; }
    if (key == "model.mlp_mult") { rc.model.mlp_mult = as_int(); return; }
    if (key == "model.tie_output") { rc.model.tie_output = as_bool(); return; }

    if (key == "train.batch_size") { rc.train.batch_size = as_int(); return; }
    if (key == "train.peak_lr") { rc.train.peak_lr = as_double(); return; }
    if (key == "train.warmup_steps") { rc.train.warmup_steps = as_int(); return; }
    if (key == "train.total_steps") { rc.train.total_steps = as_int(); return; }
    if (key == "train.beta1") { rc.train.beta1 = as_double(); return; }
    if (key == "train.beta2") { rc.train.beta2 = as_double(); return; }
    if (key == "train.eps") { rc.train.eps = as_double(); return; }
    if (key == "train.clip_norm") { rc.train.clip_norm = as_double(); return; }
    if (key == "train.log_every") { rc.train.log_every = as_int(); return; }
    if (key == "train.valid_every") { rc.train.valid_every = as_int(); return; }
    if (key == "train.q1") { rc.train.weights.q[0] = as_double(); return; }
    if (key == "train.q2") { rc.train.weights.q[1] = as_double(); return; }
    if (key == "train.q_global") { rc.train.weights.q_global = as_double(); return; }
    if (key == "train.use_selector_sampling") { rc.train.use_selector_sampling = as_bool(); return; }

    if (key == "quantizer.frames") { rc.quantizer.frames = as_int(); return; }
    if (key == "quantizer.dim") { rc.quantizer.dim = as_int(); return; }
    if (key == "quantizer.k") { rc.quantizer.k = as_int(); return; }
    if (key == "quantizer.max_iters") { rc.quantizer.max_iters = as_int(); return; }
    if (key == "quantizer.tol") { rc.quantizer.tol = as_double(); return; }
    if (key == "quantizer.jitter") { rc.quantizer.jitter = as_double(); return; }

    if (key == "decode.beam") { rc.beam = as_int(); return; }
    if (key == "decode.alpha") { rc.alpha = as_double(); return; }

    if (key == "run.experiment") { rc.experiment = value; return; }
    if (key == "run.out") { rc.out_dir = value; return; }
    if (key == "run.seed") { rc.seed = static_cast<uint64_t>(as_i64()); return; }
    if (key == "run.threads") { rc.threads = as_int(); return; }

    throw Error(ErrorCode::invalid_argument, "unknown config key: " + key);
}

inline RunConfig load_run_config(std::istream& in) {
    RunConfig rc;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        size_t begin = line.find_first_not_of(" \t\r");
        if (begin == std::string::npos || line[begin] == '#') {
            continue;
        }
        line = line.substr(begin, line.find_last_not_of(" \t\r") - begin + 1);
        size_t eq = line.find('=');
        if (eq == std::string::npos || eq == 0) {
            throw Error(ErrorCode::unparseable,
                        "config line " + std::to_string(lineno) + " is not key=value: " + line);
        }
        apply_config_kv(rc, line.substr(0, eq), line.substr(eq + 1));
    }
    return rc;
}

inline void save_run_config(std::ostream& out, const RunConfig& rc) {
    out << "world.num_speakers=" << rc.world.num_speakers << '\n';
    out << "world.alphabet=" << rc.world.alphabet << '\n';
    out << "world.units_per_char=" << rc.world.units_per_char << '\n';
    out << "world.speech_vocab=" << rc.world.speech_vocab << '\n';
    out << "world.noise_prob=" << detail::fmt_double(rc.world.noise_prob) << '\n';
    for (int t = 0; t < kNumTasks; ++t) {
        out << "gen." << to_string(kAllTasks[t]) << '=' << rc.gen.counts[static_cast<size_t>(t)]
            << '\n';
    }
    out << "gen.text_len_min=" << rc.gen.text_len_min << '\n';
    out << "gen.text_len_max=" << rc.gen.text_len_max << '\n';
    out << "gen.valid_frac=" << detail::fmt_double(rc.gen.valid_frac) << '\n';
    out << "gen.test_frac=" << detail::fmt_double(rc.gen.test_frac) << '\n';
    out << "model.layers=" << rc.model.layers << '\n';
    out << "model.hidden=" << rc.model.hidden << '\n';
    out << "model.heads=" << rc.model.heads << '\n';
    out << "model.maxlen=" << rc.model.maxlen << '\n';
    out << "model.mlp_mult=" << rc.model.mlp_mult << '\n';
    out << "model.tie_output=" << (rc.model.tie_output ? "true" : "false") << '\n';
    out << "train.batch_size=" << rc.train.batch_size << '\n';
    out << "train.peak_lr=" << detail::fmt_double(rc.train.peak_lr) << '\n';
    out << "train.warmup_steps=" << rc.train.warmup_steps << '\n';
    out << "train.total_steps=" << rc.train.total_steps << '\n';
    out << "train.beta1=" << detail::fmt_double(rc.train.beta1) << '\n';
    out << "train.beta2=" << detail::fmt_double(rc.train.beta2) << '\n';
    out << "train.eps=" << detail::fmt_double(rc.train.eps) << '\n';
    out << "train.clip_norm=" << detail::fmt_double(rc.train.clip_norm) << '\n';
    out << "train.log_every=" << rc.train.log_every << '\n';
    out << "train.valid_every=" << rc.train.valid_every << '\n';
    out << "train.q1=" << detail::fmt_double(rc.train.weights.q[0]) << '\n';
    out << "train.q2=" << detail::fmt_double(rc.train.weights.q[1]) << '\n';
    out << "train.q_global=" << detail::fmt_double(rc.train.weights.q_global) << '\n';
    out << "train.use_selector_sampling=" << (rc.train.use_selector_sampling ? "true" : "false")
        << '\n';
    out << "quantizer.frames=" << rc.quantizer.frames << '\n';
    out << "quantizer.dim=" << rc.quantizer.dim << '\n';
    out << "quantizer.k=" << rc.quantizer.k << '\n';
    out << "quantizer.max_iters=" << rc.quantizer.max_iters << '\n';
    out << "quantizer.tol=" << detail::fmt_double(rc.quantizer.tol) << '\n';
    out << "quantizer.jitter=" << detail::fmt_double(rc.quantizer.jitter) << '\n';
    out << "decode.beam=" << rc.beam << '\n';
    out << "decode.alpha=" << detail::fmt_double(rc.alpha) << '\n';
    out << "run.experiment=" << rc.experiment << '\n';
    out << "run.out=" << rc.out_dir << '\n';
    out << "run.seed=" << rc.seed << '\n';
    out << "run.threads=" << rc.threads << '\n';
}

} // namespace unitlm
