// Experiment runner: two-stage training, evaluation against entropy floors,
// full-model gradient checking, and dense adapter merging.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "plora/plora.hpp"

namespace fs = std::filesystem;
using namespace plora;

namespace {

struct CliOptions {
    std::string config_path;
    std::string ckpt_path;
    std::uint64_t seed = 0;
    bool seed_set = false;
    int steps = 0;  // per-stage override
    std::string out_dir;
    int rank = -1;
    bool text_only = false;
    int dump_samples_n = 0;
};

RunConfig load_run_config(const CliOptions& cli) {
    RunConfig cfg = cli.config_path.empty() ? RunConfig{} : parse_config_file(cli.config_path);
    if (cli.seed_set) cfg.seed = cli.seed;
    if (!cli.out_dir.empty()) cfg.out_dir = cli.out_dir;
    if (cli.rank >= 0) cfg.model.plora_rank = cli.rank;
    cfg.validate();
    fs::create_directories(cfg.out_dir);
    return cfg;
}

std::string pick_checkpoint(const RunConfig& cfg, const CliOptions& cli) {
    if (!cli.ckpt_path.empty()) return cli.ckpt_path;
    for (const char* name : {"sft.ckpt", "model.ckpt", "base.ckpt"}) {
        const std::string p = cfg.out_dir + "/" + name;
        if (fs::exists(p)) return p;
    }
    return "";
}

void print_eval(const Experiment& exp, bool text_only) {
    const TaskSpec visual = exp.cfg.make_task(TaskKind::kCaption);
    const double text_loss = exp.eval_text_only();
    std::cout << "text_only_loss=" << format_double(text_loss) << "\n";
    if (text_only) return;
    const double vis_loss = exp.eval_visual();
    std::cout << "visual_task_loss=" << format_double(vis_loss) << "\n";
    std::cout << "floor_no_visual=" << format_double(entropy_floor(visual, false)) << "\n";
    std::cout << "floor_with_visual=" << format_double(entropy_floor(visual, true)) << "\n";
}

int cmd_pretrain(const CliOptions& cli) {
    RunConfig cfg = load_run_config(cli);
    Experiment exp = Experiment::create(cfg);

    log_info("text calibration (" + std::to_string(cfg.calibration_steps) + " steps)");
    StageResult calib = exp.calibrate(0, cfg.out_dir + "/pretrain_metrics.csv");
    if (calib.aborted) {
        std::cerr << "calibration aborted: " << calib.abort_reason << "\n";
        save_checkpoint(cfg.out_dir + "/last_good.ckpt", exp.model, exp.encoder,
                        {1, 0, cfg.seed});
        return 1;
    }
    save_checkpoint(cfg.out_dir + "/base.ckpt", exp.model, exp.encoder, {1, 0, cfg.seed});

    const double text_before = exp.eval_text_only();
    const double visual_before = exp.eval_visual();
    log_info("stage 1 pretraining");
    StageResult s1 = exp.pretrain(cli.steps, cfg.out_dir + "/pretrain_metrics.csv");
    if (s1.aborted) {
        std::cerr << "stage 1 aborted: " << s1.abort_reason << "\n";
        save_checkpoint(cfg.out_dir + "/last_good.ckpt", exp.model, exp.encoder,
                        {2, static_cast<std::int64_t>(s1.log.size()), cfg.seed});
        return 1;
    }
    save_checkpoint(cfg.out_dir + "/model.ckpt", exp.model, exp.encoder,
                    {2, static_cast<std::int64_t>(s1.log.size()), cfg.seed});

    std::cout << "calibration_final_loss=" << format_double(calib.final_loss()) << "\n";
    std::cout << "stage1_initial_loss=" << format_double(s1.initial_loss()) << "\n";
    std::cout << "stage1_final_loss=" << format_double(s1.final_loss()) << "\n";
    std::cout << "text_only_before=" << format_double(text_before) << "\n";
    std::cout << "text_only_after=" << format_double(exp.eval_text_only()) << "\n";
    std::cout << "visual_before=" << format_double(visual_before) << "\n";
    std::cout << "visual_after=" << format_double(exp.eval_visual()) << "\n";
    std::cout << "checkpoint=" << cfg.out_dir << "/model.ckpt\n";
    return 0;
}

int cmd_sft(const CliOptions& cli) {
    RunConfig cfg = load_run_config(cli);
    const std::string ckpt = pick_checkpoint(cfg, cli);
    if (ckpt.empty()) {
        std::cerr << "sft requires a checkpoint; run pretrain first or pass --ckpt\n";
        return 1;
    }
    LoadedCheckpoint lc = load_checkpoint(ckpt);
    Experiment exp{cfg, std::move(lc.model), std::move(lc.encoder)};
    exp.cfg.model = exp.model.cfg;  // architecture comes from the checkpoint

    log_info("stage 2 SFT from " + ckpt);
    StageResult s2 = exp.sft(cli.steps, cfg.out_dir + "/sft_metrics.csv");
    if (s2.aborted) {
        std::cerr << "stage 2 aborted: " << s2.abort_reason << "\n";
        save_checkpoint(cfg.out_dir + "/last_good.ckpt", exp.model, exp.encoder,
                        {3, static_cast<std::int64_t>(s2.log.size()), cfg.seed});
        return 1;
    }
    save_checkpoint(cfg.out_dir + "/sft.ckpt", exp.model, exp.encoder,
                    {3, static_cast<std::int64_t>(s2.log.size()), cfg.seed});
    std::cout << "sft_initial_loss=" << format_double(s2.initial_loss()) << "\n";
    std::cout << "sft_final_loss=" << format_double(s2.final_loss()) << "\n";
    std::cout << "checkpoint=" << cfg.out_dir << "/sft.ckpt\n";
    return 0;
}

int cmd_eval(const CliOptions& cli) {
    RunConfig cfg = load_run_config(cli);
    if (cli.dump_samples_n > 0) {
        std::ofstream f(cfg.out_dir + "/samples.txt");
        dump_samples(f, cfg.make_task(TaskKind::kCaption), cli.dump_samples_n,
                     derive_seed(cfg.seed, "dump"));
        std::cout << "samples=" << cfg.out_dir << "/samples.txt\n";
    }
    const std::string ckpt = pick_checkpoint(cfg, cli);
    if (!ckpt.empty()) {
        LoadedCheckpoint lc = load_checkpoint(ckpt);
        Experiment exp{cfg, std::move(lc.model), std::move(lc.encoder)};
        exp.cfg.model = exp.model.cfg;
        std::cout << "checkpoint=" << ckpt << "\n";
        print_eval(exp, cli.text_only);
        return 0;
    }
    // no checkpoint: evaluate the untrained (text-calibrated, no-op adapter) model
    Experiment exp = Experiment::create(cfg);
    log_info("no checkpoint found; calibrating the untrained baseline");
    StageResult calib = exp.calibrate(cli.steps);
    if (calib.aborted) {
        std::cerr << "calibration aborted: " << calib.abort_reason << "\n";
        return 1;
    }
    std::cout << "checkpoint=none (text-calibrated baseline)\n";
    print_eval(exp, cli.text_only);
    return 0;
}

int cmd_gradcheck(const CliOptions& cli) {
    RunConfig cfg = load_run_config(cli);
    // fixed desk-check architecture: 2 layers, d=8, rank 4
    ModelConfig mc;
    mc.vocab_size = 64;
    mc.d_model = 8;
    mc.n_heads = 2;
    mc.n_layers = 2;
    mc.d_mlp = 16;
    mc.max_seq_len = 32;
    mc.plora_rank = 4;
    VisionConfig vc;
    vc.depth = 2;
    vc.image_side = 8;
    vc.patch = 4;
    Model model = build_model(mc, derive_seed(cfg.seed, "gradcheck-model"));
    VisionEncoder encoder = build_encoder(vc, mc.d_model, derive_seed(cfg.seed, "gradcheck-enc"));

    TaskSpec task;
    task.num_keys = cfg.num_keys;
    task.image_side = vc.image_side;
    task.patch = vc.patch;
    task.vocab_size = mc.vocab_size;
    task.pattern_seed = cfg.pattern_seed();
    InterleavedSample s = gen_sample(task, derive_seed(cfg.seed, "gradcheck-sample"));

    auto loss_value = [&](const Model& mm, const VisionEncoder& ee) {
        return loss(mm, to_batch(s, ee)).value;
    };

    Tape t;
    BoundParams bm = bind_params(t, model.store);
    BoundParams be = bind_params(t, encoder.store);
    const auto d = static_cast<std::size_t>(mc.d_model);
    const std::size_t np = static_cast<std::size_t>(vc.n_patches());
    Var vis = t.constant(Tensor({s.images.size() * np, d}));
    for (std::size_t bi = 0; bi < s.images.size(); ++bi) {
        Var block = encode_image_on_tape(t, be, encoder, s.images[bi]);
        std::vector<std::size_t> rows(np);
        for (std::size_t r = 0; r < np; ++r) rows[r] = bi * np + r;
        vis = add_rows_at(t, vis, block, rows);
    }
    Var logits = model_forward_on_tape(t, bm, model, s.token_ids, s.mask, vis);
    t.backward(cross_entropy(t, logits, s.targets, s.loss_mask));

    std::vector<double> theta;
    for (const auto& e : model.store.items)
        theta.insert(theta.end(), e.value.data.begin(), e.value.data.end());
    for (const auto& e : encoder.store.items)
        theta.insert(theta.end(), e.value.data.begin(), e.value.data.end());

    Model probe_m = model;
    VisionEncoder probe_e = encoder;
    auto f = [&](const std::vector<double>& flat) {
        std::size_t off = 0;
        for (auto& e : probe_m.store.items)
            for (double& v : e.value.data) v = flat[off++];
        for (auto& e : probe_e.store.items)
            for (double& v : e.value.data) v = flat[off++];
        return loss_value(probe_m, probe_e);
    };
    std::vector<double> fd = finite_diff_grad(f, theta, 1e-5);

    double max_err = 0.0;
    std::size_t off = 0;
    for (std::size_t i = 0; i < model.store.items.size(); ++i)
        for (double g : t.grad(bm.vars[i]).data)
            max_err = std::max(max_err, rel_err(g, fd[off++]));
    for (std::size_t i = 0; i < encoder.store.items.size(); ++i)
        for (double g : t.grad(be.vars[i]).data)
            max_err = std::max(max_err, rel_err(g, fd[off++]));

    std::cout << "parameters_checked=" << theta.size() << "\n";
    std::cout << "max_relative_error=" << format_double(max_err) << "\n";
    std::cout << "threshold=0.0001\n";
    const bool ok = max_err < 1e-4;
    std::cout << (ok ? "gradcheck PASS\n" : "gradcheck FAIL\n");
    return ok ? 0 : 1;
}

int cmd_merge(const CliOptions& cli) {
    RunConfig cfg = load_run_config(cli);
    const std::string ckpt = pick_checkpoint(cfg, cli);
    if (ckpt.empty()) {
        std::cerr << "merge requires a checkpoint; run pretrain first or pass --ckpt\n";
        return 1;
    }
    LoadedCheckpoint lc = load_checkpoint(ckpt);
    const std::string out = cfg.out_dir + "/merged.ckpt";
    write_merged_checkpoint(out, lc.model, lc.encoder, lc.meta);
    std::cout << "merged=" << out << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Partial-LoRA desk-scale multimodal training experiments"};
    app.require_subcommand(1);
    app.fallthrough();  // global flags may follow the subcommand

    CliOptions cli;
    app.add_option("--config", cli.config_path, "run config file (key=value)");
    app.add_option("--seed", cli.seed, "master seed override")
        ->each([&](const std::string&) { cli.seed_set = true; });
    app.add_option("--steps", cli.steps, "step-count override for the invoked stage");
    app.add_option("--out", cli.out_dir, "output directory");
    app.add_option("--rank", cli.rank, "P-LoRA rank override");
    app.add_option("--ckpt", cli.ckpt_path, "explicit checkpoint path");

    CLI::App* pretrain = app.add_subcommand("pretrain", "calibrate the base, then stage-1 train");
    CLI::App* sft = app.add_subcommand("sft", "stage-2 supervised fine-tuning");
    CLI::App* eval = app.add_subcommand("eval", "report losses against entropy floors");
    eval->add_flag("--text-only", cli.text_only, "report only the text-only loss");
    eval->add_option("--dump-samples", cli.dump_samples_n,
                     "write N generated sequences to <out>/samples.txt");
    CLI::App* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient audit");
    CLI::App* merge = app.add_subcommand("merge", "materialize dense merged weights");

    CLI11_PARSE(app, argc, argv);

    try {
        if (pretrain->parsed()) return cmd_pretrain(cli);
        if (sft->parsed()) return cmd_sft(cli);
        if (eval->parsed()) return cmd_eval(cli);
        if (gradcheck->parsed()) return cmd_gradcheck(cli);
        if (merge->parsed()) return cmd_merge(cli);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
