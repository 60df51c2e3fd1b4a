#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "nppc/eval.hpp"
#include "nppc/gmm.hpp"
#include "nppc/io.hpp"
#include "nppc/nppc.hpp"

namespace nppc::exp {

namespace fs = std::filesystem;
using io::Json;

struct AnalysisConfig {
    /// Test points used for variance calibration, angles and sample PCA.
    std::size_t angle_points = 200;
    /// Exact posterior samples per point for the sample-PCA baseline.
    std::size_t pca_samples = 10000;
    /// |cos| threshold for direction agreement between methods.
    double agreement_cosine = 0.95;
    std::size_t traverse_points = 4;
    std::size_t traverse_steps = 7;
    double traverse_span = 3.0;

    friend bool operator==(const AnalysisConfig&, const AnalysisConfig&) = default;
};

struct ExperimentConfig {
    std::string task = "toy2d";           // toy2d | toy100d | custom
    std::string mixture_file;             // custom only
    std::string mode = "posthoc";         // posthoc | joint | iterative
    std::uint64_t seed = 0;
    std::size_t n_train = 50000;
    std::size_t n_test = 1000;
    std::size_t k = 2;
    std::vector<std::size_t> k_list{0, 1, 2};
    std::string reference = "truncated";  // truncated | full
    bool include_mean_input = true;
    MlpConfig network;                    // width, depth and slope of every MLP
    TrainConfig mean_training;
    TrainConfig nppc_training;            // posthoc and iterative heads
    TrainConfig joint_training;           // mean and head trained together
    AnalysisConfig analysis;
    std::size_t threads = 0;              // 0 = all available cores
    std::string out_dir = "runs/toy2d";

    void validate() const;
    std::size_t worker_count() const;
    ReferenceMode reference_mode() const;
};

/// Defaults for a task name.
ExperimentConfig preset(std::string_view task);

Json config_to_json(const ExperimentConfig& c);
/// Values in `j` override the preset named by j["task"] (toy2d if absent).
/// Unknown keys are rejected with InvalidConfig.
ExperimentConfig config_from_json(const Json& j);
ExperimentConfig load_config(const fs::path& path);
/// Hash of everything except out_dir and threads.
std::string config_hash(const ExperimentConfig& c);
/// Independent stream seed for a named stage.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag);

struct World {
    GaussianMixture mixture;
    NoiseModel noise;
};
World make_world(const ExperimentConfig& c);

// ---------------------------------------------------------------------------
// Commands. Each writes its files under config.out_dir and returns what it
// produced so callers can chain them without re-reading.

struct GenDataResult {
    fs::path train;
    fs::path test;
};
GenDataResult cmd_gen_data(const ExperimentConfig& c);

/// Loads `<out>/data/<split>` when present and consistent with the config,
/// otherwise generates and writes it.
Dataset obtain_split(const ExperimentConfig& c, std::string_view split);

struct TrainMeanResult {
    fs::path checkpoint;
    MeanModel model;
    TrainReport report;
};
TrainMeanResult cmd_train_mean(const ExperimentConfig& c);

struct TrainNppcResult {
    std::vector<fs::path> checkpoints;    // K paths in iterative mode
    io::ModelBundle bundle;
};
/// Posthoc and iterative modes need a mean checkpoint (MissingMeanModel
/// otherwise); joint mode rejects one.
TrainNppcResult cmd_train_nppc(const ExperimentConfig& c, const std::optional<fs::path>& mean_checkpoint);

struct MethodAnalysis {
    std::string name;
    std::string mode;
    std::size_t k = 0;
    Matrix xhat;
    std::vector<NppcOutput> outputs;
};

struct EvalResult {
    W2Report table;
    Json summary;
    std::vector<MethodAnalysis> methods;
    fs::path table_csv;
    fs::path points_csv;
    fs::path summary_json;
};
EvalResult cmd_eval(const ExperimentConfig& c, const std::vector<fs::path>& checkpoints);

/// Rows x̂ + t·σ̂_k·w_k for t evenly spaced in [−span, span]; k is 1-based.
/// Throws BadIndex when k is 0 or exceeds the checkpoint's K.
Matrix traverse(const io::ModelBundle& bundle, std::span<const double> y, std::size_t k,
                std::size_t steps, double span);
/// Writes the traversal of one measurement to `out` as CSV.
fs::path cmd_traverse(const ExperimentConfig& c, const fs::path& checkpoint, std::span<const double> y,
                      std::size_t k, std::size_t steps, double span, const fs::path& out);

struct ReproduceResult {
    EvalResult eval;
    std::vector<fs::path> files;          // every report written
};
/// Data, mean, post-hoc NPPC, iterative NPPC, evaluation and traversals.
ReproduceResult reproduce_toy2d(const ExperimentConfig& c);
/// Data, mean, post-hoc NPPC and the W2 table evaluation.
ReproduceResult reproduce_toy100d(const ExperimentConfig& c);

/// Trailing provenance line of every CSV report.
std::string csv_footer(const ExperimentConfig& c);

}  // namespace nppc::exp
