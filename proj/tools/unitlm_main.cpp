// Command-line front end for the whole pipeline: synthetic world and dataset
// generation, codebook fitting, training, staged generation, evaluation, and
// the named experiment presets. Every run is a pure function of the config
// file plus --seed; flags override file values. Errors come out as a single
// `error: <code>: <message>` line on stderr, exit 2 for usage problems and
// exit 1 for everything else.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "unitlm/experiments.hpp"
#include "unitlm/quantizer.hpp"

namespace fs = std::filesystem;
using namespace unitlm;

namespace {

struct CommonFlags {
    std::string config_path;
    int64_t seed = -1;
    int threads = 0;
    std::string out;
};

void add_common(CLI::App* sub, CommonFlags& c) {
    sub->add_option("--config", c.config_path, "config file of section.key=value lines");
    sub->add_option("--seed", c.seed, "master seed for every random stream");
    sub->add_option("--threads", c.threads, "worker thread cap");
    sub->add_option("--out", c.out, "output directory");
}

RunConfig resolve(const CommonFlags& c) {
    RunConfig rc;
    if (!c.config_path.empty()) {
        std::ifstream in(c.config_path);
        if (!in) {
            throw Error(ErrorCode::io_failure, "cannot open config '" + c.config_path + "'");
        }
        rc = load_run_config(in);
    }
    if (c.seed >= 0) {
        rc.seed = static_cast<uint64_t>(c.seed);
    }
    if (c.threads > 0) {
        rc.threads = c.threads;
    }
    if (!c.out.empty()) {
        rc.out_dir = c.out;
    }
    return rc;
}

std::unique_ptr<ThreadPool> make_pool(const RunConfig& rc) {
    if (rc.threads > 1) {
        return std::make_unique<ThreadPool>(rc.threads);
    }
    return nullptr;
}

void write_file(const fs::path& p, const std::string& text) {
    detail::write_text_file(p, text);
}

TaskKind task_from_name(const std::string& name) {
    for (TaskKind k : all_tasks()) {
        if (name == to_string(k)) {
            return k;
        }
    }
    throw Error(ErrorCode::invalid_argument, "unknown task: " + name);
}

std::vector<int> parse_id_list(const std::string& csv, const char* what) {
    std::vector<int> out;
    if (csv.empty()) {
        return out;
    }
    std::stringstream ss(csv);
    std::string piece;
    while (std::getline(ss, piece, ',')) {
        try {
            size_t used = 0;
            int v = std::stoi(piece, &used);
            if (used != piece.size()) {
                throw std::invalid_argument(piece);
            }
            out.push_back(v);
        } catch (const std::exception&) {
            throw Error(ErrorCode::unparseable,
                        std::string(what) + ": '" + piece + "' is not an integer");
        }
    }
    return out;
}

std::string join_ids(const std::vector<int>& ids) {
    std::string out;
    for (size_t i = 0; i < ids.size(); ++i) {
        out += (i ? "," : "") + std::to_string(ids[i]);
    }
    return out;
}

World world_for(const RunConfig& rc) {
    return make_world(rc.world, derive_seed(rc.seed, kSeedWorld));
}

void cmd_world(const CommonFlags& c) {
    RunConfig rc = resolve(c);
    World w = world_for(rc);
    fs::create_directories(rc.out_dir);
    save_world_file((fs::path(rc.out_dir) / "world.txt").string(), w);
    std::cout << "world speakers=" << w.config.num_speakers << " alphabet=" << w.config.alphabet
              << " units_per_char=" << w.config.units_per_char
              << " speech_vocab=" << w.config.speech_vocab
              << " noise_prob=" << detail::fmt_double(w.config.noise_prob)
              << " path=" << (fs::path(rc.out_dir) / "world.txt").string() << "\n";
}

void cmd_gen(const CommonFlags& c) {
    RunConfig rc = resolve(c);
    World w = world_for(rc);
    GeneratedData g = gen_dataset(w, rc.gen, derive_seed(rc.seed, kSeedGen));
    fs::path dir = fs::path(rc.out_dir) / "data";
    fs::create_directories(dir);
    save_world_file((fs::path(rc.out_dir) / "world.txt").string(), w);
    for (TaskKind k : all_tasks()) {
        for (int sp = 0; sp < kNumSplits; ++sp) {
            const auto& examples = g.data[task_index(k)][sp];
            fs::path p = dir / (std::string(to_string(k)) + "." + kSplitNames[sp] + ".txt");
            std::ofstream out(p, std::ios::binary);
            if (!out) {
                throw Error(ErrorCode::io_failure, "cannot open " + p.string() + " for writing");
            }
            save_dataset(out, examples);
            std::cout << "gen task=" << to_string(k) << " split=" << kSplitNames[sp]
                      << " n=" << examples.size() << " path=" << p.string() << "\n";
        }
    }
}

void cmd_fit_codebook(const CommonFlags& c) {
    RunConfig rc = resolve(c);
    World w = world_for(rc);
    auto pool = make_pool(rc);
    int k = rc.quantizer.k > 0 ? rc.quantizer.k : rc.world.speech_vocab;
    uint64_t fseed = derive_seed(rc.seed, kSeedFrames);
    Rng rng(fseed);
    std::vector<int> units(static_cast<size_t>(rc.quantizer.frames));
    for (int& u : units) {
        u = static_cast<int>(rng.below(static_cast<uint64_t>(w.config.speech_vocab)));
    }
    std::vector<float> frames =
        render_frames(w, units, rc.quantizer.dim, rc.quantizer.jitter, hash_combine(fseed, 1));
    FitStats stats;
    Codebook cb = fit_codebook(frames, rc.quantizer.frames, rc.quantizer.dim, k,
                               hash_combine(fseed, 2), rc.quantizer.max_iters, rc.quantizer.tol,
                               &stats, pool.get());
    fs::create_directories(rc.out_dir);
    fs::path p = fs::path(rc.out_dir) / "codebook.txt";
    save_codebook_file(p.string(), cb);
    std::cout << "fit-codebook k=" << cb.k << " dim=" << cb.dim << " frames=" << rc.quantizer.frames
              << " iterations=" << stats.iterations
              << " inertia=" << detail::fmt_double(stats.final_inertia) << " path=" << p.string()
              << "\n";
}

void cmd_train(const CommonFlags& c, const std::string& tasks_csv) {
    RunConfig rc = resolve(c);
    std::vector<TaskKind> train_on = all_tasks();
    if (!tasks_csv.empty()) {
        train_on.clear();
        std::stringstream ss(tasks_csv);
        std::string name;
        while (std::getline(ss, name, ',')) {
            train_on.push_back(task_from_name(name));
        }
    }
    auto pool = make_pool(rc);
    fs::path dir(rc.out_dir);
    fs::create_directories(dir);
    std::ofstream log_file(dir / "train.log", std::ios::binary);
    if (!log_file) {
        throw Error(ErrorCode::io_failure, "cannot open " + (dir / "train.log").string());
    }
    PipelineArtifacts a = train_pipeline(rc, train_on, &log_file, pool.get());
    log_file.flush();
    save_world_file((dir / "world.txt").string(), a.world);
    save_checkpoint_file((dir / "model.ckpt").string(), a.mcfg, a.params);
    std::ostringstream cfg;
    save_run_config(cfg, rc);
    write_file(dir / "config.txt", cfg.str());
    std::cout << "train steps=" << a.log.history.size()
              << " final_loss=" << detail::fmt_double(a.log.history.back().loss)
              << " params=" << count_params(a.mcfg) << " path=" << (dir / "model.ckpt").string()
              << "\n";
    for (const auto& v : a.log.valid_history) {
        if (v.step == a.log.history.back().step) {
            std::cout << "valid task=" << to_string(v.task)
                      << " ppl=" << detail::fmt_double(v.ppl) << " n=" << v.n << "\n";
        }
    }
}

void cmd_generate(const CommonFlags& c, const std::string& ckpt, const std::string& task_name,
                  const std::string& condition_csv, const std::string& enrollment_csv,
                  const std::string& text_csv, bool transcribe) {
    RunConfig rc = resolve(c);
    std::string ckpt_path = ckpt.empty() ? (fs::path(rc.out_dir) / "model.ckpt").string() : ckpt;
    Checkpoint loaded = load_checkpoint_file(ckpt_path);
    World w = world_for(rc);
    Vocabulary v = world_vocab(w);
    if (v.total_size() != loaded.config.vocab) {
        throw Error(ErrorCode::invalid_argument,
                    "checkpoint vocab " + std::to_string(loaded.config.vocab) +
                        " does not match the configured world (" +
                        std::to_string(v.total_size()) + ")");
    }
    TaskRequest req;
    req.kind = task_from_name(task_name);
    bool condition_is_text = req.kind == TaskKind::tts || req.kind == TaskKind::textlm;
    for (int raw : parse_id_list(condition_csv, "--condition")) {
        req.condition.push_back(condition_is_text ? v.text_id(raw) : v.speech_id(raw));
    }
    for (int raw : parse_id_list(enrollment_csv, "--enrollment")) {
        req.enrollment.push_back(v.speech_id(raw));
    }
    for (int raw : parse_id_list(text_csv, "--text")) {
        req.text.push_back(v.text_id(raw));
    }
    TaskResult result = run_task(loaded.config, loaded.params, plan_task(req, v), rc.beam, rc.alpha);
    for (size_t i = 0; i < result.stages.size(); ++i) {
        std::vector<int> ids;
        for (TokenId t : result.stages[i].generated) {
            ids.push_back(v.kind(t) == TokenKind::speech ? v.speech_unit(t) : t);
        }
        std::cout << "stage=" << i << " tokens=" << join_ids(ids)
                  << " score=" << detail::fmt_double(result.stages[i].score) << "\n";
    }
    std::vector<int> final_ids;
    bool final_is_speech = !result.final_tokens.empty() &&
                           v.kind(result.final_tokens.front()) == TokenKind::speech;
    for (TokenId t : result.final_tokens) {
        final_ids.push_back(v.kind(t) == TokenKind::speech ? v.speech_unit(t) : t);
    }
    std::cout << "output " << (final_is_speech ? "units=" : "tokens=") << join_ids(final_ids)
              << "\n";
    if (transcribe && final_is_speech) {
        std::vector<int> chars = detail::transcribe_lenient(w, final_ids);
        std::cout << "transcript chars=" << join_ids(chars)
                  << " speaker=" << oracle_speaker(w, final_ids) << "\n";
    }
}

void cmd_eval(const CommonFlags& c, const std::string& ckpt, const std::string& task_name) {
    RunConfig rc = resolve(c);
    std::string ckpt_path = ckpt.empty() ? (fs::path(rc.out_dir) / "model.ckpt").string() : ckpt;
    Checkpoint loaded = load_checkpoint_file(ckpt_path);
    World w = world_for(rc);
    GeneratedData g = gen_dataset(w, rc.gen, derive_seed(rc.seed, kSeedGen));
    auto pool = make_pool(rc);
    std::vector<TaskKind> tasks;
    if (task_name.empty() || task_name == "all") {
        for (TaskKind k : all_tasks()) {
            if (!g.of(k, Split::test).empty()) {
                tasks.push_back(k);
            }
        }
    } else {
        tasks.push_back(task_from_name(task_name));
    }
    EvalOptions opt;
    opt.beam = rc.beam;
    opt.alpha = rc.alpha;
    opt.pool = pool.get();
    fs::create_directories(rc.out_dir);
    for (TaskKind k : tasks) {
        EvalReport report =
            evaluate_task(loaded.config, loaded.params, g.of(k, Split::test), k, w, opt);
        std::string text = report.to_string();
        write_file(fs::path(rc.out_dir) / ("report-" + std::string(to_string(k)) + ".txt"), text);
        std::cout << "task=" << to_string(k) << "\n" << text;
    }
}

void cmd_experiment(const CommonFlags& c, const std::string& name) {
    RunConfig rc = resolve(c);
    auto pool = make_pool(rc);
    run_experiment(name, rc, &std::cout, pool.get());
    std::cout << "experiment " << name << " done out=" << (fs::path(rc.out_dir) / name).string()
              << "\n";
}

std::string single_line(std::string s) {
    for (char& ch : s) {
        if (ch == '\n' || ch == '\r') {
            ch = ' ';
        }
    }
    return s;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"speech+text unit language model pipeline"};
    app.require_subcommand(1);

    CommonFlags common;

    CLI::App* world_cmd = app.add_subcommand("world", "build the synthetic world and dump it");
    add_common(world_cmd, common);
    world_cmd->callback([&] { cmd_world(common); });

    CLI::App* gen_cmd = app.add_subcommand("gen", "generate task datasets");
    add_common(gen_cmd, common);
    gen_cmd->callback([&] { cmd_gen(common); });

    CLI::App* fit_cmd = app.add_subcommand("fit-codebook", "fit a unit codebook to rendered frames");
    add_common(fit_cmd, common);
    fit_cmd->callback([&] { cmd_fit_codebook(common); });

    CLI::App* train_cmd = app.add_subcommand("train", "train a model on generated data");
    add_common(train_cmd, common);
    std::string train_tasks;
    train_cmd->add_option("--tasks", train_tasks, "comma list of tasks to train on (default all)");
    train_cmd->callback([&] { cmd_train(common, train_tasks); });

    CLI::App* generate_cmd = app.add_subcommand("generate", "run staged inference for one request");
    add_common(generate_cmd, common);
    std::string gen_ckpt, gen_task, gen_condition, gen_enrollment, gen_text;
    bool gen_transcribe = false;
    generate_cmd->add_option("--ckpt", gen_ckpt, "checkpoint path (default <out>/model.ckpt)");
    generate_cmd->add_option("--task", gen_task, "task name")->required();
    generate_cmd->add_option("--condition", gen_condition, "comma list of input ids");
    generate_cmd->add_option("--enrollment", gen_enrollment, "comma list of enrollment units");
    generate_cmd->add_option("--text", gen_text, "comma list of ground-truth text ids (vc/se)");
    generate_cmd->add_flag("--transcribe", gen_transcribe, "also print the oracle transcript");
    generate_cmd->callback([&] {
        cmd_generate(common, gen_ckpt, gen_task, gen_condition, gen_enrollment, gen_text,
                     gen_transcribe);
    });

    CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on held-out data");
    add_common(eval_cmd, common);
    std::string eval_ckpt, eval_task;
    eval_cmd->add_option("--ckpt", eval_ckpt, "checkpoint path (default <out>/model.ckpt)");
    eval_cmd->add_option("--task", eval_task, "task name or 'all'");
    eval_cmd->callback([&] { cmd_eval(common, eval_ckpt, eval_task); });

    CLI::App* exp_cmd = app.add_subcommand("experiment", "run a named experiment preset");
    add_common(exp_cmd, common);
    std::string exp_name;
    exp_cmd->add_option("name", exp_name, "preset name")->required();
    exp_cmd->callback([&] { cmd_experiment(common, exp_name); });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) {
            return app.exit(e);
        }
        std::cerr << "error: usage: " << single_line(e.what()) << "\n";
        return 2;
    } catch (const Error& e) {
        std::cerr << "error: " << single_line(e.what()) << "\n";
        return e.code() == ErrorCode::invalid_argument ? 2 : 1;
    } catch (const std::exception& e) {
        std::cerr << "error: internal: " << single_line(e.what()) << "\n";
        return 1;
    }
    return 0;
}
