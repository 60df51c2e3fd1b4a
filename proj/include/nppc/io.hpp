#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "nppc/autodiff.hpp"
#include "nppc/gmm.hpp"
#include "nppc/models.hpp"
#include "nppc/nppc.hpp"

namespace nppc::io {

using Json = nlohmann::json;
namespace fs = std::filesystem;

inline constexpr int kFormatVersion = 1;

/// Shortest round-trip decimal form of a double ("nan", "inf", "-inf" for
/// non-finite values).
std::string format_double(double v);

/// 64-bit FNV-1a.
std::uint64_t fnv1a(std::string_view bytes);
std::string hex64(std::uint64_t v);

/// Writes text, creating parent directories. Throws IoError.
void write_text(const fs::path& path, std::string_view text);
std::string read_text(const fs::path& path);
/// Pretty JSON with sorted keys and a trailing newline.
void write_json(const fs::path& path, const Json& value);
Json read_json(const fs::path& path);

// ---------------------------------------------------------------------------
// Datasets: little-endian float64 rows of x followed by rows of y in
// `<stem>.bin`, shape and provenance in `<stem>.json`.

struct DatasetFile {
    Dataset data;
    std::uint64_t seed = 0;
    std::string config_hash;
};

void save_dataset(const fs::path& stem, const DatasetFile& file);
DatasetFile load_dataset(const fs::path& stem);

// ---------------------------------------------------------------------------
// Mixture (de)serialization.

Json mixture_to_json(const GaussianMixture& mix, const NoiseModel& noise);
std::pair<GaussianMixture, NoiseModel> mixture_from_json(const Json& j);

Json mlp_config_to_json(const MlpConfig& c);
MlpConfig mlp_config_from_json(const Json& j);
Json head_config_to_json(const NppcHeadConfig& c);
NppcHeadConfig head_config_from_json(const Json& j);
Json train_config_to_json(const TrainConfig& c);
/// Reads the fields present in `j` on top of `base`. Unknown keys are rejected.
TrainConfig train_config_from_json(const Json& j, TrainConfig base);

// ---------------------------------------------------------------------------
// Checkpoints: `<stem>.json` manifest plus `<stem>.bin` parameter blob.

struct HeadEntry {
    NppcHeadConfig head;
    MlpConfig trunk;
    std::string prefix;   // parameter prefix of this head's trunk
};

struct Checkpoint {
    std::string kind;                 // "mean" or "nppc"
    std::string mode;                 // "", "posthoc", "joint" or "iterative"
    MlpConfig mean;
    std::vector<HeadEntry> heads;     // empty for kind "mean"
    ad::ParamStore params;
    GaussianMixture mixture;
    NoiseModel noise;
    Json training = Json::object();
    std::uint64_t seed = 0;
    std::string config_hash;
};

void save_checkpoint(const fs::path& stem, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const fs::path& stem);

/// Accepts a path with or without the .json/.bin extension.
fs::path checkpoint_stem(const fs::path& path);

/// Entries of `src` whose names start with `from/`, renamed to start with `to/`.
ad::ParamStore copy_prefixed(const ad::ParamStore& src, std::string_view from, std::string_view to,
                             ad::ParamStore dst = {});

/// Models rebuilt from a checkpoint.
struct ModelBundle {
    std::string mode;
    MeanModel mean;
    std::vector<NppcModel> heads;     // one for posthoc/joint, K chained heads for iterative

    Matrix predict_mean(const Matrix& ys) const;
    std::vector<NppcOutput> predict(const Matrix& ys, const Matrix& xhats) const;
    std::size_t k() const;
};
ModelBundle bundle_from_checkpoint(const Checkpoint& ckpt);

}  // namespace nppc::io
