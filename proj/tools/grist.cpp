// heal — corpus-to-report pipeline driver.
//
// Subcommands: ingest, dedup, pack, train, eval, report, all. Every stage is
// driven by one JSON config file; --set key=value overrides individual fields
// and the effective merged config is written next to the outputs.
//
// Exit codes: 0 success, 1 stage failure, 2 usage error, 3 invalid config.

#include <exception>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "grist/pipeline.hpp"

namespace {

int run_command(const std::string& command, const std::string& config_path,
                const std::vector<std::string>& overrides, bool dry_run, bool force,
                const std::string& output_override) {
    grist::pipeline::StageContext ctx;
    try {
        ctx.cfg = grist::pipeline::load_config(config_path, overrides);
        if (!output_override.empty()) {
            ctx.cfg.output_dir = output_override;
            ctx.cfg.effective["output_dir"] = output_override;
        }
        grist::pipeline::validate(ctx.cfg);
    } catch (const grist::pipeline::ConfigError& e) {
        std::cerr << R"({"error":"config","message":")" << e.what() << "\"}\n";
        return 3;
    } catch (const grist::Error& e) {
        std::cerr << R"({"error":"config","message":")" << e.what() << "\"}\n";
        return 3;
    }
    ctx.force = force;

    if (dry_run) {
        std::cout << "dry run: command=" << command << "\n"
                  << "  manifest:   " << ctx.cfg.manifest_path << "\n"
                  << "  output_dir: " << ctx.cfg.output_dir << "\n"
                  << "  dedup:      k=" << ctx.cfg.dedup.k << " num_perms=" << ctx.cfg.dedup.num_perms
                  << " threshold=" << ctx.cfg.dedup.threshold << " seed=" << ctx.cfg.dedup.seed
                  << "\n"
                  << "  packing:    max_len=" << ctx.cfg.packing.max_len
                  << " val_fraction=" << ctx.cfg.packing.val_fraction << "\n"
                  << "  schedule:   eta_max=" << ctx.cfg.sched.lr.eta_max
                  << " eta_min=" << ctx.cfg.sched.lr.eta_min
                  << " warmup=" << ctx.cfg.sched.lr.warmup_steps
                  << " total_steps=" << ctx.cfg.sched.lr.total_steps
                  << " batch=" << ctx.cfg.sched.batch
                  << " weight_decay=" << ctx.cfg.sched.weight_decay
                  << " master_seed=" << ctx.cfg.sched.master_seed << "\n"
                  << "  model:      d_model=" << ctx.cfg.model.d_model
                  << " max_len=" << ctx.cfg.model.max_len << "\n"
                  << "  rope:       trained_len=" << ctx.cfg.rope.trained_len
                  << " target_len=" << ctx.cfg.rope.target_len << " theta=" << ctx.cfg.rope.theta
                  << "\n"
                  << "  eval:       " << ctx.cfg.eval.task_files.size() << " task file(s), endpoint "
                  << (ctx.cfg.eval.endpoint.base_url.empty() ? "(none)"
                                                             : ctx.cfg.eval.endpoint.base_url)
                  << "\n";
        return 0;
    }

    try {
        grist::pipeline::write_effective_config(ctx);
        if (command == "ingest") {
            grist::pipeline::run_ingest(ctx);
        } else if (command == "dedup") {
            grist::pipeline::run_dedup(ctx);
        } else if (command == "pack") {
            grist::pipeline::run_pack(ctx);
        } else if (command == "train") {
            grist::pipeline::run_train(ctx);
        } else if (command == "eval") {
            grist::pipeline::run_eval(ctx);
        } else if (command == "report") {
            grist::pipeline::run_report(ctx, std::cout);
        } else if (command == "all") {
            grist::pipeline::run_all(ctx, std::cout);
        }
        return 0;
    } catch (const grist::Error& e) {
        std::cerr << R"({"error":"stage","stage":")" << command << R"(","message":")" << e.what()
                  << "\"}\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << R"({"error":"stage","stage":")" << command << R"(","message":")" << e.what()
                  << "\"}\n";
        return 1;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"ingest -> dedup -> pack -> train -> eval -> report pipeline"};
    app.require_subcommand(1);

    std::string config_path;
    std::vector<std::string> overrides;
    bool dry_run = false;
    bool force = false;
    std::string output_override;

    const std::vector<std::string> commands = {"ingest", "dedup", "pack", "train",
                                               "eval",   "report", "all"};
    for (const auto& name : commands) {
        auto* sub = app.add_subcommand(name, "run the " + name + " stage");
        sub->add_option("config", config_path, "pipeline config file (JSON)")->required();
        sub->add_option("--set", overrides, "override a config field (key.path=value)");
        sub->add_flag("--dry-run", dry_run, "validate config and print the plan without writing");
        sub->add_flag("--force", force, "re-run stages even when outputs are up to date");
        sub->add_option("-o,--output-dir", output_override, "override the output directory");
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n\n" << app.help() << "\n";
        return 2;
    }

    const std::string command = app.get_subcommands().front()->get_name();
    return run_command(command, config_path, overrides, dry_run, force, output_override);
}
