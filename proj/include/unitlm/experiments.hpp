#pragma once

// Named experiment presets over the full pipeline: a task-mix grid, a
// ground-truth-text injection ablation, a randomized segment-sampling
// ablation, and the two zero-shot composition runs that hold one composite
// task out of training. Each preset trains from a base RunConfig, writes its
// effective config plus a key=value result table under <out>/<name>/, and
// returns the numbers for callers that want them in memory.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "unitlm/config.hpp"
#include "unitlm/evalkit.hpp"
#include "unitlm/synthworld.hpp"
#include "unitlm/trainer.hpp"

namespace unitlm {

inline std::vector<TaskKind> primary_tasks() {
    return {TaskKind::textlm, TaskKind::speechlm, TaskKind::asr, TaskKind::tts};
}

inline std::vector<TaskKind> all_tasks() {
    return {kAllTasks, kAllTasks + kNumTasks};
}

inline std::vector<TaskKind> tasks_without(TaskKind skip) {
    std::vector<TaskKind> out;
    for (TaskKind k : all_tasks()) {
        if (k != skip) {
            out.push_back(k);
        }
    }
    return out;
}

inline ModelConfig model_config_for(const RunConfig& rc) {
    ModelConfig m = rc.model;
    m.vocab = merge_vocab(rc.world.alphabet, rc.world.speech_vocab).total_size();
    return m;
}

// Keeps only the listed tasks' train/valid splits; everything else trains on
// nothing but still evaluates (that is the whole point of the zero-shot runs).
inline TaskDatasets select_tasks(const GeneratedData& g, const std::vector<TaskKind>& keep) {
    TaskDatasets d;
    for (TaskKind k : keep) {
        int t = task_index(k);
        d.train[t] = g.of(k, Split::train);
        d.valid[t] = g.of(k, Split::valid);
    }
    return d;
}

struct PipelineArtifacts {
    World world;
    GeneratedData data;
    ModelConfig mcfg;
    ModelParams<float> params;
    TrainResult log;
};

inline PipelineArtifacts train_pipeline(const RunConfig& rc, const std::vector<TaskKind>& train_on,
                                        std::ostream* log = nullptr, ThreadPool* pool = nullptr) {
    PipelineArtifacts a;
    a.world = make_world(rc.world, derive_seed(rc.seed, kSeedWorld));
    a.data = gen_dataset(a.world, rc.gen, derive_seed(rc.seed, kSeedGen));
    a.mcfg = model_config_for(rc);
    a.params = init_params<float>(a.mcfg, derive_seed(rc.seed, kSeedInit));
    TaskDatasets sets = select_tasks(a.data, train_on);
    filter_overlong(sets, a.mcfg.maxlen);
    TrainConfig t = rc.train;
    t.seed = derive_seed(rc.seed, kSeedTrain);
    a.log = train(a.mcfg, a.params, sets, t, log, pool);
    return a;
}

inline EvalReport eval_pipeline_task(const PipelineArtifacts& a, TaskKind task, const RunConfig& rc,
                                     bool inject_text = false, ThreadPool* pool = nullptr) {
    EvalOptions opt;
    opt.beam = rc.beam;
    opt.alpha = rc.alpha;
    opt.inject_text = inject_text;
    opt.pool = pool;
    return evaluate_task(a.mcfg, a.params, a.data.of(task, Split::test), task, a.world, opt);
}

namespace detail {

inline void write_text_file(const std::filesystem::path& p, const std::string& text) {
    std::error_code ec;
    std::filesystem::create_directories(p.parent_path(), ec);
    std::ofstream out(p, std::ios::binary);
    if (!out) {
        throw Error(ErrorCode::io_failure, "cannot open " + p.string() + " for writing");
    }
    out << text;
    out.flush();
    if (!out) {
        throw Error(ErrorCode::io_failure, "short write to " + p.string());
    }
}

inline void write_effective_config(const std::filesystem::path& dir, RunConfig rc,
                                   const std::string& name) {
    rc.experiment = name;
    std::ostringstream s;
    save_run_config(s, rc);
    write_text_file(dir / "config.txt", s.str());
}

inline std::string report_lines(const std::string& prefix, const EvalReport& r) {
    std::string out;
    for (const auto& [metric, value] : r.metrics) {
        out += prefix + " task=" + to_string(r.task) + " metric=" + metric +
               " value=" + fmt_double(value) + " n=" + std::to_string(r.items) + '\n';
    }
    return out;
}

inline double median3(double a, double b, double c) {
    return std::max(std::min(a, b), std::min(std::max(a, b), c));
}

inline double metric_value(const EvalReport& r, const std::string& name) {
    for (const auto& [metric, value] : r.metrics) {
        if (metric == name) {
            return value;
        }
    }
    throw Error(ErrorCode::invalid_argument,
                std::string("report for ") + to_string(r.task) + " has no metric " + name);
}

} // namespace detail

// Trains one model per row of a growing task mix and evaluates every task on
// the same held-out sets, so later rows show what extra training tasks buy
// and earlier rows show composite behavior assembled from pieces.
struct MixRow {
    std::string label;
    std::vector<TaskKind> train_on;
    std::vector<EvalReport> reports; // one per task, kAllTasks order
};

struct TaskMixGridResult {
    std::vector<MixRow> rows;
    std::string table;
};

inline TaskMixGridResult experiment_task_mix_grid(const RunConfig& rc, std::ostream* log = nullptr,
                                                  ThreadPool* pool = nullptr) {
    std::filesystem::path dir = std::filesystem::path(rc.out_dir) / "task-mix-grid";
    detail::write_effective_config(dir, rc, "task-mix-grid");
    TaskMixGridResult result;
    std::vector<MixRow> plan = {
        {"asr", {TaskKind::asr}, {}},
        {"asr+tts", {TaskKind::asr, TaskKind::tts}, {}},
        {"primary", primary_tasks(), {}},
        {"all", all_tasks(), {}},
    };
    for (MixRow& row : plan) {
        std::ostringstream train_log;
        PipelineArtifacts a = train_pipeline(rc, row.train_on, &train_log, pool);
        detail::write_text_file(dir / (row.label + "-train.log"), train_log.str());
        for (TaskKind k : all_tasks()) {
            row.reports.push_back(eval_pipeline_task(a, k, rc, false, pool));
            result.table += detail::report_lines("row=" + row.label, row.reports.back());
        }
        result.rows.push_back(std::move(row));
        if (log != nullptr) {
            (*log) << "task-mix-grid row " << result.rows.back().label << " done\n";
        }
    }
    detail::write_text_file(dir / "table.txt", result.table);
    return result;
}

// One model trained on everything, composite tasks evaluated twice: once
// recognizing the transcript itself and once with the ground-truth transcript
// spliced in, which isolates how much recognition errors cost downstream.
struct TextAblationResult {
    EvalReport vc_recognized, vc_injected;
    EvalReport se_recognized, se_injected;
    std::string table;
};

inline TextAblationResult experiment_text_ablation(const RunConfig& rc, std::ostream* log = nullptr,
                                                   ThreadPool* pool = nullptr) {
    std::filesystem::path dir = std::filesystem::path(rc.out_dir) / "text-ablation";
    detail::write_effective_config(dir, rc, "text-ablation");
    std::ostringstream train_log;
    PipelineArtifacts a = train_pipeline(rc, all_tasks(), &train_log, pool);
    detail::write_text_file(dir / "train.log", train_log.str());
    TextAblationResult r;
    r.vc_recognized = eval_pipeline_task(a, TaskKind::vc, rc, false, pool);
    r.vc_injected = eval_pipeline_task(a, TaskKind::vc, rc, true, pool);
    r.se_recognized = eval_pipeline_task(a, TaskKind::se, rc, false, pool);
    r.se_injected = eval_pipeline_task(a, TaskKind::se, rc, true, pool);
    r.table += detail::report_lines("text=recognized", r.vc_recognized);
    r.table += detail::report_lines("text=injected", r.vc_injected);
    r.table += detail::report_lines("text=recognized", r.se_recognized);
    r.table += detail::report_lines("text=injected", r.se_injected);
    detail::write_text_file(dir / "table.txt", r.table);
    if (log != nullptr) {
        (*log) << "text-ablation done\n";
    }
    return r;
}

// Shrinks the primary-task data to a quarter and drops SE so VC dominates a
// small corpus, then trains the same seeds with segment-loss sampling on and
// off. The two arms share world, data, init, and batch order, so the only
// difference is which positions the loss covers.
inline RunConfig rs_ablation_config(RunConfig rc, uint64_t seed, bool sampling) {
    for (TaskKind k : primary_tasks()) {
        int t = task_index(k);
        rc.gen.counts[t] = std::max(20, rc.gen.counts[t] / 4);
    }
    rc.gen.counts[task_index(TaskKind::se)] = 0;
    rc.seed = seed;
    rc.train.use_selector_sampling = sampling;
    return rc;
}

struct RsAblationResult {
    std::vector<uint64_t> seeds;
    std::vector<double> cer_with, cer_without;
    double median_with = 0, median_without = 0;
    bool directional_ok = false;
    std::string table;
};

inline RsAblationResult experiment_rs_ablation(const RunConfig& rc, std::ostream* log = nullptr,
                                               ThreadPool* pool = nullptr) {
    std::filesystem::path dir = std::filesystem::path(rc.out_dir) / "rs-ablation";
    detail::write_effective_config(dir, rc, "rs-ablation");
    RsAblationResult r;
    for (uint64_t seed : {rc.seed, rc.seed + 1, rc.seed + 2}) {
        r.seeds.push_back(seed);
        for (bool sampling : {true, false}) {
            RunConfig arm = rs_ablation_config(rc, seed, sampling);
            std::ostringstream train_log;
            PipelineArtifacts a = train_pipeline(arm, tasks_without(TaskKind::se), &train_log, pool);
            std::string label = "seed" + std::to_string(seed) +
                                (sampling ? "-sampled" : "-global");
            detail::write_text_file(dir / (label + "-train.log"), train_log.str());
            EvalReport vc = eval_pipeline_task(a, TaskKind::vc, arm, false, pool);
            double cer = detail::metric_value(vc, "cer");
            (sampling ? r.cer_with : r.cer_without).push_back(cer);
            r.table += "seed=" + std::to_string(seed) +
                       " sampling=" + (sampling ? "on" : "off") +
                       " metric=cer value=" + detail::fmt_double(cer) +
                       " n=" + std::to_string(vc.items) + '\n';
            if (log != nullptr) {
                (*log) << "rs-ablation " << label << " cer=" << detail::fmt_double(cer) << "\n";
            }
        }
    }
    r.median_with = detail::median3(r.cer_with[0], r.cer_with[1], r.cer_with[2]);
    r.median_without = detail::median3(r.cer_without[0], r.cer_without[1], r.cer_without[2]);
    r.directional_ok = r.median_with <= r.median_without;
    r.table += "median sampling=on metric=cer value=" + detail::fmt_double(r.median_with) + '\n';
    r.table += "median sampling=off metric=cer value=" + detail::fmt_double(r.median_without) + '\n';
    r.table += std::string("check=") + (r.directional_ok ? "pass" : "warn") + '\n';
    if (!r.directional_ok) {
        r.table += "warning: sampled median cer exceeds global median cer on this run\n";
    }
    detail::write_text_file(dir / "table.txt", r.table);
    return r;
}

// Train on everything except one composite task, then evaluate exactly that
// task, so any skill shown there was assembled from the others.
struct ZeroShotResult {
    TaskKind held_out = TaskKind::vc;
    EvalReport report;
    std::string table;
};

inline ZeroShotResult experiment_zero_shot(const RunConfig& rc, TaskKind held_out,
                                           std::ostream* log = nullptr,
                                           ThreadPool* pool = nullptr) {
    std::string name = std::string("zero-shot-") + to_string(held_out);
    std::filesystem::path dir = std::filesystem::path(rc.out_dir) / name;
    detail::write_effective_config(dir, rc, name);
    std::ostringstream train_log;
    PipelineArtifacts a = train_pipeline(rc, tasks_without(held_out), &train_log, pool);
    detail::write_text_file(dir / "train.log", train_log.str());
    ZeroShotResult r;
    r.held_out = held_out;
    r.report = eval_pipeline_task(a, held_out, rc, false, pool);
    r.table = detail::report_lines("held_out=" + std::string(to_string(held_out)), r.report);
    detail::write_text_file(dir / "table.txt", r.table);
    if (log != nullptr) {
        (*log) << name << " done\n";
    }
    return r;
}

inline const std::vector<std::string>& experiment_names() {
    static const std::vector<std::string> names = {
        "task-mix-grid", "text-ablation", "rs-ablation", "zero-shot-vc", "zero-shot-se"};
    return names;
}

inline void run_experiment(const std::string& name, const RunConfig& rc,
                           std::ostream* log = nullptr, ThreadPool* pool = nullptr) {
    if (name == "task-mix-grid") {
        experiment_task_mix_grid(rc, log, pool);
    } else if (name == "text-ablation") {
        experiment_text_ablation(rc, log, pool);
    } else if (name == "rs-ablation") {
        experiment_rs_ablation(rc, log, pool);
    } else if (name == "zero-shot-vc") {
        experiment_zero_shot(rc, TaskKind::vc, log, pool);
    } else if (name == "zero-shot-se") {
        experiment_zero_shot(rc, TaskKind::se, log, pool);
    } else {
        throw Error(ErrorCode::invalid_argument, "unknown experiment: " + name);
    }
}

} // namespace unitlm
