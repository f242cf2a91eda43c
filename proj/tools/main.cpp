// diffplace: diffusion-based ordering engine for shuffled sets.
//
// Subcommands: gen (datasets), train, eval, solve. Every command is
// deterministic given its resolved configuration; exit codes are 0 on
// success, 1 on runtime failure, 2 on usage/config errors.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "diffplace/config.hpp"
#include "diffplace/trainer.hpp"

namespace fs = std::filesystem;
using namespace diffplace;

namespace {

struct Flags {
    std::string config;
    std::string out;
    std::string ckpt;
    std::string data;
    std::string image;
    std::string sequence;
    std::string task;
    std::string init;
    std::string split;
    std::string resume;
    long seed = -1;
    int grid_n = 4;
    int shuffle = -1;  // optional presentation shuffle seed for solve
    bool force = false;
    bool frames = false;
    bool oracle = false;
};

RunConfig resolve_config(Flags& f, nlohmann::json* echo = nullptr) {
    auto [cfg, merged] = load_config(f.config);
    if (!f.task.empty()) {
        cfg.task = task_from_name(f.task);
        merged["task"] = f.task;
        // Keep the dataset kind consistent when only --task is given.
        if (f.config.empty()) {
            cfg.dataset.kind = cfg.task == Task::sequence ? DatasetKind::synthetic_sequence
                                                          : DatasetKind::procedural_image;
            merged["dataset"]["kind"] = dataset_kind_name(cfg.dataset.kind);
        }
    }
    if (f.seed >= 0) {
        cfg.train_seed = std::uint64_t(f.seed);
        cfg.dataset.seed = std::uint64_t(f.seed);
        merged["train"]["seed"] = cfg.train_seed;
        merged["dataset"]["seed"] = cfg.dataset.seed;
    }
    if (!f.out.empty()) {
        cfg.out_dir = f.out;
        merged["train"]["out"] = f.out;
    }
    if (!f.init.empty()) {
        if (f.init != "zero" && f.init != "gaussian")
            throw ConfigError("--init must be 'zero' or 'gaussian'");
        cfg.eval_init = f.init == "zero" ? InitMode::zero_centered : InitMode::standard_gaussian;
        merged["eval"]["init"] = f.init;
    }
    if (!f.split.empty()) {
        cfg.eval_split = split_from_name(f.split);
        merged["eval"]["split"] = f.split;
    }
    if (!f.resume.empty()) {
        cfg.resume = f.resume;
        merged["train"]["resume"] = f.resume;
    }
    validate_run_config(cfg);
    if (echo) *echo = merged;
    return cfg;
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path + " for writing");
    f << text;
}

// ---- gen -------------------------------------------------------------------

int cmd_gen(Flags& f) {
    nlohmann::json echo;
    RunConfig cfg = resolve_config(f, &echo);
    const std::string out = f.out.empty() ? cfg.dataset_path : f.out;
    if (out.empty()) throw ConfigError("gen: no output path (set dataset.path or --out)");
    if (fs::exists(out) && !fs::is_empty(out) && !f.force)
        throw ConfigError("gen: output directory " + out + " is not empty (use --force)");
    if (cfg.dataset.kind == DatasetKind::image_dir)
        throw ConfigError("gen: image-dir datasets are read in place, nothing to generate");
    write_dataset(out, cfg.dataset);
    write_text((fs::path(out) / "config.json").string(), echo.dump(2) + "\n");
    std::cout << "wrote " << cfg.dataset.count << " items to " << out << "\n";
    return 0;
}

// ---- train -----------------------------------------------------------------

struct LoadedData {
    PuzzleDataset puzzle;
    SequenceDataset sequence;
    bool is_sequence = false;
};

LoadedData load_data_for(const RunConfig& cfg, const std::string& path) {
    LoadedData data;
    if (cfg.dataset.kind == DatasetKind::image_dir) {
        data.puzzle = load_image_dir(cfg.dataset.image_dir, cfg.dataset);
        return data;
    }
    if (!fs::exists(fs::path(path) / "manifest.json")) {
        // A bare directory of PNGs is accepted as an image-dir dataset.
        if (fs::is_directory(path)) {
            DatasetSpec spec = cfg.dataset;
            spec.kind = DatasetKind::image_dir;
            data.puzzle = load_image_dir(path, spec);
            return data;
        }
        throw std::runtime_error("no dataset at " + path + " (missing manifest.json)");
    }
    const nlohmann::json manifest = read_manifest(path);
    const DatasetKind kind =
        dataset_kind_from_name(manifest.at("spec").at("kind").get<std::string>());
    if (kind == DatasetKind::synthetic_sequence) {
        data.sequence = load_sequence_dataset(path);
        data.is_sequence = true;
    } else {
        data.puzzle = load_puzzle_dataset(path);
    }
    return data;
}

template <typename Driver, typename StepFn>
int run_training_loop(TrainState<float>& st, const Driver& driver, const RunConfig& cfg,
                      const StepFn& make_batch) {
    const long spe = driver.steps_per_epoch();
    const long total_steps = spe * cfg.epochs;
    std::ofstream log(fs::path(cfg.out_dir) / "train_log.jsonl", std::ios::app);
    const auto t0 = std::chrono::steady_clock::now();
    double last_loss = 0.0;

    auto save = [&](const std::string& name) {
        save_checkpoint((fs::path(cfg.out_dir) / name).string(), st.model, cfg.diffusion, st.step,
                        adam_to_arrays(st.model, st.adam));
    };

    if (st.step >= total_steps) save("final.ckpt");
    while (st.step < total_steps) {
        const long epoch = st.step / spe;
        const auto s0 = std::chrono::steady_clock::now();
        last_loss = make_batch();
        const auto s1 = std::chrono::steady_clock::now();
        nlohmann::json line;
        line["step"] = st.step;
        line["epoch"] = epoch;
        line["loss"] = last_loss;
        line["lr"] = cfg.opt.lr;
        line["wall_ms"] =
            std::chrono::duration_cast<std::chrono::milliseconds>(s1 - s0).count();
        log << line.dump() << "\n";
        if (cfg.checkpoint_every > 0 && st.step % cfg.checkpoint_every == 0)
            save("ckpt_step_" + std::to_string(st.step) + ".ckpt");
        if (st.step % spe == 0 || st.step == total_steps) {
            const double secs =
                std::chrono::duration_cast<std::chrono::duration<double>>(s1 - t0).count();
            std::cerr << "epoch " << (st.step - 1) / std::max<long>(spe, 1) << " step " << st.step
                      << "/" << total_steps << " loss " << last_loss << " (" << secs << "s)\n";
        }
    }
    save("final.ckpt");
    return 0;
}

int cmd_train(Flags& f) {
    nlohmann::json echo;
    RunConfig cfg = resolve_config(f, &echo);
    fs::create_directories(cfg.out_dir);
    write_text((fs::path(cfg.out_dir) / "config.json").string(), echo.dump(2) + "\n");

    Model<float> model = Model<float>::init(model_config_from_run(cfg), cfg.model_seed);
    TrainSettings settings = train_settings_from_run(cfg);
    TrainState<float> st = TrainState<float>::init(std::move(model), settings);

    if (!cfg.resume.empty()) {
        const ParsedCheckpoint ck = read_checkpoint(cfg.resume);
        if (ck.meta.schedule.T != cfg.diffusion.T)
            throw ConfigError("train: checkpoint schedule T=" +
                              std::to_string(ck.meta.schedule.T) + " does not match config T=" +
                              std::to_string(cfg.diffusion.T));
        Model<float> resumed = model_from_checkpoint<float>(ck);
        if (resumed.cfg.task != cfg.task) throw ConfigError("train: checkpoint task mismatch");
        st = TrainState<float>::init(std::move(resumed), settings);
        st.step = ck.meta.train_step;
        adam_from_checkpoint(st.model, ck, st.adam);
        st.adam.step = ck.meta.optimizer_step;
    }

    const LoadedData data = load_data_for(cfg, cfg.dataset_path);
    if (data.is_sequence != (cfg.task == Task::sequence))
        throw ConfigError("train: dataset at " + cfg.dataset_path + " does not match task " +
                          task_name(cfg.task));

    if (cfg.task == Task::puzzle) {
        const PuzzleTrainDriver driver = PuzzleTrainDriver::make(data.puzzle, settings);
        run_training_loop(st, driver, cfg, [&]() {
            return train_step(st, instance_pointers(driver.batch_for_step(st.step)));
        });
        if (cfg.epochs > 0 && !data.puzzle.indices_of(Split::val).empty()) {
            const std::vector<PuzzleInstance> val =
                puzzle_eval_instances(data.puzzle, Split::val, cfg.dataset.puzzle_sizes);
            EvalSettings es;
            es.init = cfg.eval_init;
            es.gaussian_seed = cfg.gaussian_seed;
            const std::string report =
                format_report(evaluate(st.model, cfg.diffusion, instance_pointers(val), es));
            write_text((fs::path(cfg.out_dir) / "val_report.txt").string(), report);
            std::cout << report;
        }
    } else {
        const SequenceTrainDriver driver = SequenceTrainDriver::make(data.sequence, settings);
        run_training_loop(st, driver, cfg,
                          [&]() { return train_step(st, driver.batch_for_step(st.step)); });
        if (cfg.epochs > 0 && !data.sequence.indices_of(Split::val).empty()) {
            EvalSettings es;
            es.init = cfg.eval_init;
            es.gaussian_seed = cfg.gaussian_seed;
            const std::string report = format_report(evaluate(
                st.model, cfg.diffusion, sequence_eval_instances(data.sequence, Split::val), es));
            write_text((fs::path(cfg.out_dir) / "val_report.txt").string(), report);
            std::cout << report;
        }
    }
    return 0;
}

// ---- eval ------------------------------------------------------------------

int cmd_eval(Flags& f) {
    RunConfig cfg = resolve_config(f);
    if (f.ckpt.empty()) throw ConfigError("eval: --ckpt is required");
    const ParsedCheckpoint ck = read_checkpoint(f.ckpt);
    const Model<float> model = model_from_checkpoint<float>(ck);
    const SchedulePlan plan = ck.meta.schedule;

    const std::string data_path = f.data.empty() ? cfg.dataset_path : f.data;
    cfg.task = ck.meta.model.task;
    cfg.dataset.kind = cfg.task == Task::sequence ? DatasetKind::synthetic_sequence
                                                  : cfg.dataset.kind;
    const LoadedData data = load_data_for(cfg, data_path);
    if (data.is_sequence != (ck.meta.model.task == Task::sequence))
        throw ConfigError(std::string("eval: dataset task (") +
                          (data.is_sequence ? "sequence" : "puzzle") +
                          ") does not match checkpoint task (" + task_name(ck.meta.model.task) +
                          ")");

    EvalSettings es;
    es.init = cfg.eval_init;
    es.gaussian_seed = cfg.gaussian_seed;
    es.oracle = f.oracle;

    MetricsReport rep;
    if (data.is_sequence) {
        rep = evaluate(model, plan, sequence_eval_instances(data.sequence, cfg.eval_split), es);
    } else {
        const std::vector<int> sizes = data.puzzle.spec.puzzle_sizes;
        const std::vector<PuzzleInstance> insts =
            puzzle_eval_instances(data.puzzle, cfg.eval_split, sizes);
        rep = evaluate(model, plan, instance_pointers(insts), es);
    }
    const std::string report = format_report(rep);
    std::cout << report;
    if (!f.out.empty()) write_text(f.out, report);
    return 0;
}

// ---- solve -----------------------------------------------------------------

ImageU8 render_positions(const std::vector<Patch>& patches, const Mat<float>& pos) {
    const int canvas = 384;
    ImageU8 img(canvas, canvas);
    for (auto& p : img.px) p = 24;
    for (int e = 0; e < int(patches.size()); ++e) {
        const int cx = int((double(pos(e, 0)) + 1.0) * 0.5 * canvas);
        const int cy = int((double(pos(e, 1)) + 1.0) * 0.5 * canvas);
        for (int y = 0; y < kPatchSize; ++y)
            for (int x = 0; x < kPatchSize; ++x) {
                const int px = cx - kPatchSize / 2 + x;
                const int py = cy - kPatchSize / 2 + y;
                if (px < 0 || px >= canvas || py < 0 || py >= canvas) continue;
                std::uint8_t* dst = img.at(px, py);
                for (int c = 0; c < 3; ++c)
                    dst[c] = std::uint8_t(
                        std::clamp(patches[std::size_t(e)].at(x, y, c), 0.0f, 1.0f) * 255.0f);
            }
    }
    return img;
}

void write_frame_json(const std::string& path, int t, const Mat<float>& pos) {
    nlohmann::json j;
    j["t"] = t;
    nlohmann::json arr = nlohmann::json::array();
    for (int i = 0; i < pos.rows; ++i) {
        nlohmann::json row = nlohmann::json::array();
        for (int c = 0; c < pos.cols; ++c) row.push_back(pos(i, c));
        arr.push_back(row);
    }
    j["positions"] = arr;
    write_text(path, j.dump() + "\n");
}

int cmd_solve(Flags& f) {
    RunConfig cfg = resolve_config(f);
    if (f.ckpt.empty()) throw ConfigError("solve: --ckpt is required");
    if (f.image.empty() == f.sequence.empty())
        throw ConfigError("solve: pass exactly one of --image or --sequence");
    const ParsedCheckpoint ck = read_checkpoint(f.ckpt);
    const Model<float> model = model_from_checkpoint<float>(ck);
    const SchedulePlan plan = ck.meta.schedule;
    const NoiseSchedule sched = build_linear_schedule(plan.T, plan.beta_start, plan.beta_end);

    DiffusionConfig dcfg;
    dcfg.T = plan.T;
    dcfg.inference_ratio = plan.inference_ratio;
    dcfg.init_mode = cfg.eval_init;
    dcfg.position_dim = model.cfg.denoiser.position_dim;

    const bool want_sequence = !f.sequence.empty();
    if (want_sequence != (model.cfg.task == Task::sequence))
        throw ConfigError(std::string("solve: ") + (want_sequence ? "sequence" : "image") +
                          " input does not match checkpoint task '" +
                          task_name(model.cfg.task) + "'");

    PuzzleInstance pinst;
    SequenceInstance sinst;
    Mat<float> features;
    if (!want_sequence) {
        const ImageU8 img = center_crop_square(read_png(f.image));
        pinst = make_puzzle_instance(img, f.grid_n, 0,
                                     f.shuffle >= 0 ? std::uint64_t(f.shuffle) : 0);
        if (f.shuffle < 0) {
            // Keep the presentation order as-is (identity) unless asked.
            PuzzleInstance id;
            id.n = f.grid_n;
            id.patches = patchify(img, f.grid_n);
            id.gt_cell.resize(id.patches.size());
            id.shuffle_perm.resize(id.patches.size());
            for (std::size_t i = 0; i < id.patches.size(); ++i) {
                id.gt_cell[i] = int(i);
                id.shuffle_perm[i] = int(i);
            }
            pinst = id;
        }
        features = encode_features(model, pinst);
    } else {
        std::ifstream sf(f.sequence);
        if (!sf) throw std::runtime_error("solve: cannot open " + f.sequence);
        nlohmann::json j;
        sf >> j;
        sinst.elements = j.is_array() ? j.get<std::vector<std::vector<int>>>()
                                      : j.at("elements").get<std::vector<std::vector<int>>>();
        const int k = sinst.element_count();
        if (k < 1) throw ConfigError("solve: empty sequence input");
        sinst.gt_rank.resize(std::size_t(k));
        sinst.shuffle_perm.resize(std::size_t(k));
        for (int i = 0; i < k; ++i) {
            sinst.gt_rank[std::size_t(i)] = i;
            sinst.shuffle_perm[std::size_t(i)] = i;
        }
        features = encode_features(model, sinst);
    }

    DenoiserCache<float> cache;
    auto denoise_fn = [&](const Mat<float>& x, int t, const Mat<float>& h) {
        GraphBatch<float> gb;
        gb.features = h;
        gb.positions = x;
        gb.offsets = {0, x.rows};
        gb.timesteps = {t};
        return model.denoiser.forward(gb, cache);
    };
    Rng rng(Rng::mix(cfg.gaussian_seed, std::uint64_t(std::max(0L, f.seed))));
    Rng* rng_ptr = dcfg.init_mode == InitMode::standard_gaussian ? &rng : nullptr;

    const auto states = reverse_process_trajectory(denoise_fn, features, dcfg, sched, rng_ptr);
    const Mat<float>& final_pos = states.back().second;

    if (f.frames) {
        const std::string out = f.out.empty() ? "solve_out" : f.out;
        fs::create_directories(fs::path(out) / "frames");
        for (std::size_t i = 0; i < states.size(); ++i) {
            char name[64];
            std::snprintf(name, sizeof(name), "frames/frame_%03zu_t%04d", i, states[i].first);
            write_frame_json((fs::path(out) / (std::string(name) + ".json")).string(),
                             states[i].first, states[i].second);
            if (!want_sequence)
                write_png((fs::path(out) / (std::string(name) + ".png")).string(),
                          render_positions(pinst.patches, states[i].second));
        }
        std::cout << "wrote " << states.size() << " frames to " << out << "/frames\n";
    }

    if (!want_sequence) {
        const Assignment a = greedy_assign(final_pos, make_grid(pinst.n));
        for (int e = 0; e < int(a.slot.size()); ++e)
            std::cout << "patch " << e << " -> cell (" << a.slot[std::size_t(e)] / pinst.n << ", "
                      << a.slot[std::size_t(e)] % pinst.n << ")\n";
    } else {
        const Assignment a = order_from_positions(final_pos);
        for (int e = 0; e < int(a.slot.size()); ++e)
            std::cout << "element " << e << " -> rank " << a.slot[std::size_t(e)] << "\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"diffplace: diffusion-based ordering of shuffled sets (puzzles, sequences)"};
    app.require_subcommand(1);
    Flags f;

    CLI::App* gen = app.add_subcommand("gen", "Generate a dataset");
    gen->add_option("--config", f.config, "Config file (JSON)");
    gen->add_option("--out", f.out, "Output directory (overrides dataset.path)");
    gen->add_option("--seed", f.seed, "Seed override");
    gen->add_option("--task", f.task, "Task: puzzle or sequence");
    gen->add_flag("--force", f.force, "Overwrite a non-empty output directory");

    CLI::App* train = app.add_subcommand("train", "Train a model");
    train->add_option("--config", f.config, "Config file (JSON)");
    train->add_option("--out", f.out, "Run directory (overrides train.out)");
    train->add_option("--seed", f.seed, "Seed override");
    train->add_option("--task", f.task, "Task: puzzle or sequence");
    train->add_option("--resume", f.resume, "Checkpoint to resume from");
    train->add_option("--init", f.init, "Eval init: zero or gaussian");

    CLI::App* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
    eval->add_option("--config", f.config, "Config file (JSON)");
    eval->add_option("--ckpt", f.ckpt, "Checkpoint path");
    eval->add_option("--data", f.data, "Dataset directory");
    eval->add_option("--split", f.split, "Split: train, val or test");
    eval->add_option("--init", f.init, "Init: zero or gaussian");
    eval->add_option("--seed", f.seed, "Seed override");
    eval->add_option("--out", f.out, "Write the report to this file");
    eval->add_flag("--oracle", f.oracle, "Replace the model with a consistent-noise oracle");

    CLI::App* solve = app.add_subcommand("solve", "Solve one instance");
    solve->add_option("--config", f.config, "Config file (JSON)");
    solve->add_option("--ckpt", f.ckpt, "Checkpoint path");
    solve->add_option("--image", f.image, "Input image (PNG) for puzzle checkpoints");
    solve->add_option("--sequence", f.sequence, "Input token arrays (JSON) for sequence checkpoints");
    solve->add_option("-n,--n", f.grid_n, "Puzzle grid side length");
    solve->add_option("--shuffle-seed", f.shuffle, "Shuffle the presentation order first");
    solve->add_option("--seed", f.seed, "Entropy seed for gaussian init");
    solve->add_option("--init", f.init, "Init: zero or gaussian");
    solve->add_option("--out", f.out, "Output directory for --frames");
    solve->add_flag("--frames", f.frames, "Write per-timestep snapshots and renders");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (gen->parsed()) return cmd_gen(f);
        if (train->parsed()) return cmd_train(f);
        if (eval->parsed()) return cmd_eval(f);
        if (solve->parsed()) return cmd_solve(f);
        return 2;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
