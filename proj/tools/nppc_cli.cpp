// Command-line runner for the NPPC toy experiments.
//
// Exit codes: 0 success, 2 invalid configuration, 3 I/O failure,
// 4 numeric failure.

#include <cstdio>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "nppc/errors.hpp"
#include "nppc/experiment.hpp"

namespace {

using nppc::exp::ExperimentConfig;

constexpr int kExitConfig = 2;
constexpr int kExitIo = 3;
constexpr int kExitNumeric = 4;

struct CommonFlags {
    std::string config;
    std::string task;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::optional<std::size_t> threads;
    std::string k_list;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
    cmd->add_option("--config", f.config, "Experiment config (JSON)");
    cmd->add_option("--task", f.task, "Preset when no config is given: toy2d, toy100d");
    cmd->add_option("--seed", f.seed, "Master seed");
    cmd->add_option("--out", f.out, "Output directory");
    cmd->add_option("--threads", f.threads, "Evaluation worker threads (default: all cores)");
    cmd->add_option("--k-list", f.k_list, "Comma-separated K columns, e.g. 0,3,6,9,12");
}

std::vector<std::size_t> parse_k_list(const std::string& text) {
    std::vector<std::size_t> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            std::size_t used = 0;
            const long long v = std::stoll(item, &used);
            if (used != item.size() || v < 0) throw std::invalid_argument(item);
            out.push_back(static_cast<std::size_t>(v));
        } catch (const std::exception&) {
            throw nppc::InvalidConfig("bad --k-list entry '" + item + "'");
        }
    }
    if (out.empty()) throw nppc::InvalidConfig("--k-list is empty");
    return out;
}

std::vector<double> parse_vector(const std::string& text) {
    std::vector<double> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            std::size_t used = 0;
            out.push_back(std::stod(item, &used));
            if (used != item.size()) throw std::invalid_argument(item);
        } catch (const std::exception&) {
            throw nppc::InvalidConfig("bad number '" + item + "' in --y");
        }
    }
    return out;
}

ExperimentConfig resolve(const CommonFlags& f, const std::string& default_task) {
    ExperimentConfig c;
    if (!f.config.empty()) {
        c = nppc::exp::load_config(f.config);
        if (!f.task.empty() && f.task != c.task) throw nppc::InvalidConfig("--task disagrees with the config file");
    } else {
        c = nppc::exp::preset(f.task.empty() ? default_task : f.task);
    }
    if (f.seed) c.seed = *f.seed;
    if (!f.out.empty()) c.out_dir = f.out;
    if (f.threads) c.threads = *f.threads;
    if (!f.k_list.empty()) c.k_list = parse_k_list(f.k_list);
    c.validate();
    return c;
}

int exit_code_for(const nppc::Error& e) {
    switch (e.kind()) {
        case nppc::Error::Kind::Config:
        case nppc::Error::Kind::Shape:
            return kExitConfig;
        case nppc::Error::Kind::Io:
            return kExitIo;
        case nppc::Error::Kind::Numeric:
            return kExitNumeric;
    }
    return kExitNumeric;
}

void print_table(const nppc::exp::EvalResult& r) {
    std::printf("%-16s", "method");
    for (std::size_t k : r.table.ks) std::printf(" %10s", ("K=" + std::to_string(k)).c_str());
    std::printf("\n");
    for (std::size_t m = 0; m < r.table.methods.size(); ++m) {
        std::printf("%-16s", r.table.methods[m].c_str());
        for (const auto& cell : r.table.cells[m]) std::printf(" %10.4f", cell.mean);
        std::printf("\n");
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Neural posterior principal components: toy experiments"};
    app.require_subcommand(1);

    CommonFlags gen_f, mean_f, nppc_f, eval_f, trav_f, r2_f, r100_f;

    auto* gen = app.add_subcommand("gen-data", "Sample train/test (x, y) pairs");
    add_common(gen, gen_f);

    auto* mean = app.add_subcommand("train-mean", "Train the conditional-mean MLP");
    add_common(mean, mean_f);

    std::string mean_ckpt, mode;
    auto* nppc_cmd = app.add_subcommand("train-nppc", "Train the NPPC head (posthoc, joint or iterative)");
    add_common(nppc_cmd, nppc_f);
    nppc_cmd->add_option("--mean", mean_ckpt, "Mean checkpoint (posthoc and iterative modes)");
    nppc_cmd->add_option("--mode", mode, "posthoc | joint | iterative (overrides the config)");

    std::vector<std::string> eval_ckpts;
    auto* eval = app.add_subcommand("eval", "W2 table and diagnostics for NPPC checkpoints");
    add_common(eval, eval_f);
    eval->add_option("--checkpoint", eval_ckpts, "NPPC checkpoint(s)")->required();

    std::string trav_ckpt, trav_y, trav_file;
    std::optional<std::size_t> trav_index;
    std::size_t trav_k = 1;
    std::optional<std::size_t> trav_steps;
    std::optional<double> trav_span;
    auto* trav = app.add_subcommand("traverse", "Traverse x̂ + t·σ̂_k·w_k for one measurement");
    add_common(trav, trav_f);
    trav->add_option("--checkpoint", trav_ckpt, "NPPC checkpoint")->required();
    auto* y_opt = trav->add_option("--y", trav_y, "Measurement as comma-separated values");
    trav->add_option("--index", trav_index, "Use this test-set measurement instead of --y")->excludes(y_opt);
    trav->add_option("--k", trav_k, "Direction index, 1-based");
    trav->add_option("--steps", trav_steps, "Number of grid points");
    trav->add_option("--span", trav_span, "Half-width of the grid in standard deviations");
    trav->add_option("--file", trav_file, "Output CSV (default <out>/traverse_k<k>.csv)");

    auto* r2 = app.add_subcommand("reproduce-toy2d", "Full 2-D pipeline: data, mean, NPPC, evaluation");
    add_common(r2, r2_f);
    auto* r100 = app.add_subcommand("reproduce-toy100d", "Full 100-D pipeline and the W2 table");
    add_common(r100, r100_f);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitConfig;
    }

    try {
        if (gen->parsed()) {
            const auto c = resolve(gen_f, "toy2d");
            const auto r = nppc::exp::cmd_gen_data(c);
            std::printf("wrote %s and %s\n", r.train.string().c_str(), r.test.string().c_str());
        } else if (mean->parsed()) {
            const auto c = resolve(mean_f, "toy2d");
            const auto r = nppc::exp::cmd_train_mean(c);
            std::printf("wrote %s.json\n", r.checkpoint.string().c_str());
        } else if (nppc_cmd->parsed()) {
            auto c = resolve(nppc_f, "toy2d");
            if (!mode.empty()) c.mode = mode;
            c.validate();
            std::optional<std::filesystem::path> m;
            if (!mean_ckpt.empty()) m = mean_ckpt;
            const auto r = nppc::exp::cmd_train_nppc(c, m);
            for (const auto& p : r.checkpoints) std::printf("wrote %s.json\n", p.string().c_str());
        } else if (eval->parsed()) {
            const auto c = resolve(eval_f, "toy2d");
            std::vector<std::filesystem::path> paths(eval_ckpts.begin(), eval_ckpts.end());
            const auto r = nppc::exp::cmd_eval(c, paths);
            print_table(r);
            std::printf("wrote %s\n", r.table_csv.string().c_str());
        } else if (trav->parsed()) {
            const auto c = resolve(trav_f, "toy2d");
            std::vector<double> y;
            if (trav_index) {
                const nppc::Dataset test = nppc::exp::obtain_split(c, "test");
                if (*trav_index >= test.size()) throw nppc::BadIndex("--index beyond the test set");
                const auto row = test.y.row(*trav_index);
                y.assign(row.begin(), row.end());
            } else if (!trav_y.empty()) {
                y = parse_vector(trav_y);
            } else {
                throw nppc::InvalidConfig("traverse needs --y or --index");
            }
            const std::filesystem::path out =
                trav_file.empty() ? std::filesystem::path(c.out_dir) / ("traverse_k" + std::to_string(trav_k) + ".csv")
                                  : std::filesystem::path(trav_file);
            nppc::exp::cmd_traverse(c, trav_ckpt, y, trav_k, trav_steps.value_or(c.analysis.traverse_steps),
                                    trav_span.value_or(c.analysis.traverse_span), out);
            std::printf("wrote %s\n", out.string().c_str());
        } else if (r2->parsed()) {
            const auto c = resolve(r2_f, "toy2d");
            const auto r = nppc::exp::reproduce_toy2d(c);
            print_table(r.eval);
            std::printf("reports in %s\n", c.out_dir.c_str());
        } else if (r100->parsed()) {
            const auto c = resolve(r100_f, "toy100d");
            const auto r = nppc::exp::reproduce_toy100d(c);
            print_table(r.eval);
            std::printf("reports in %s\n", c.out_dir.c_str());
        }
    } catch (const nppc::Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return exit_code_for(e);
    } catch (const std::filesystem::filesystem_error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitIo;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitNumeric;
    }
    return 0;
}
