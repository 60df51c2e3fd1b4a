#include "nppc/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

#include "nppc/errors.hpp"

namespace nppc::exp {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

Json num(double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); }

double median(std::vector<double> v) {
    if (v.empty()) return kNaN;
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double mean_sorted(std::vector<double> v) { return mean_and_sem(std::move(v)).first; }

void reject_unknown(const Json& j, const std::set<std::string>& known, const std::string& where) {
    if (!j.is_object()) throw InvalidConfig(where + " must be a JSON object");
    for (const auto& [key, _] : j.items()) {
        if (!known.contains(key)) throw InvalidConfig("unknown key '" + key + "' in " + where);
    }
}

Json analysis_to_json(const AnalysisConfig& a) {
    return Json{{"angle_points", a.angle_points},     {"pca_samples", a.pca_samples},
                {"agreement_cosine", a.agreement_cosine}, {"traverse_points", a.traverse_points},
                {"traverse_steps", a.traverse_steps}, {"traverse_span", a.traverse_span}};
}

Json training_json(const TrainConfig& t) {
    Json j = io::train_config_to_json(t);
    j.erase("k");  // K lives at the top level
    return j;
}

Json report_to_json(const TrainReport& r) {
    Json epochs = Json::array();
    for (const EpochMetrics& m : r.epochs) {
        epochs.push_back(Json{{"epoch", m.epoch},
                              {"loss_mu", num(m.loss_mu)},
                              {"loss_w", num(m.loss_w)},
                              {"loss_sigma", num(m.loss_sigma)},
                              {"validation_loss", num(m.validation_loss)},
                              {"learning_rate", m.learning_rate}});
    }
    Json out{{"initial_validation_loss", num(r.initial_validation_loss)}, {"epochs", r.epochs.size()}};
    if (!r.epochs.empty()) out["final"] = epochs.back();
    return out;
}

/// Collects one JSON record per epoch and writes them as a JSONL stream.
class MetricsLog {
public:
    MetricsLog(const ExperimentConfig& c, std::string hash) : seed_(c.seed), hash_(std::move(hash)) {}

    MetricsSink sink(std::string phase) {
        return [this, phase = std::move(phase)](const EpochMetrics& m) {
            const Json rec{{"phase", phase},
                           {"epoch", m.epoch},
                           {"loss_mu", num(m.loss_mu)},
                           {"loss_w", num(m.loss_w)},
                           {"loss_sigma", num(m.loss_sigma)},
                           {"lambda1", m.lambda1_eff},
                           {"lambda2", m.lambda2_eff},
                           {"skipped_zero_error", m.skipped_zero_error},
                           {"degenerate_events", m.degenerate_events},
                           {"validation_loss", num(m.validation_loss)},
                           {"learning_rate", m.learning_rate},
                           {"seed", seed_},
                           {"config_hash", hash_},
                           {"format_version", io::kFormatVersion}};
            text_ += rec.dump() + "\n";
        };
    }
    void write(const fs::path& path) const { io::write_text(path, text_); }

private:
    std::uint64_t seed_;
    std::string hash_;
    std::string text_;
};

fs::path out_path(const ExperimentConfig& c, const std::string& name) { return fs::path(c.out_dir) / name; }

io::Checkpoint base_checkpoint(const ExperimentConfig& c, const World& world) {
    io::Checkpoint ck;
    ck.mixture = world.mixture;
    ck.noise = world.noise;
    ck.seed = c.seed;
    ck.config_hash = config_hash(c);
    return ck;
}

void require_same_world(const io::Checkpoint& ck, const World& world, const fs::path& path) {
    if (!(ck.mixture == world.mixture) || !(ck.noise == world.noise)) {
        throw InvalidConfig("checkpoint " + path.string() + " was trained on a different mixture than the config describes");
    }
}

NppcHeadConfig head_for(const ExperimentConfig& c, const World& w) {
    NppcHeadConfig h;
    h.k = c.k;
    h.dx = w.mixture.dim();
    h.dy = w.mixture.dim();
    h.include_mean_input = c.include_mean_input;
    return h;
}

std::string join_doubles(std::span<const double> v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) s += ',';
        s += io::format_double(v[i]);
    }
    return s;
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

void ExperimentConfig::validate() const {
    if (task != "toy2d" && task != "toy100d" && task != "custom") {
        throw InvalidConfig("task must be toy2d, toy100d or custom, got '" + task + "'");
    }
    if (task == "custom") {
        if (mixture_file.empty()) throw InvalidConfig("custom task needs mixture_file");
        if (!fs::exists(mixture_file)) throw InvalidConfig("mixture_file '" + mixture_file + "' does not exist");
    }
    if (mode != "posthoc" && mode != "joint" && mode != "iterative") {
        throw InvalidConfig("mode must be posthoc, joint or iterative, got '" + mode + "'");
    }
    if (n_train == 0) throw InvalidConfig("n_train must be at least 1");
    if (n_test == 0) throw InvalidConfig("n_test must be at least 1");
    if (k == 0) throw InvalidConfig("k must be at least 1");
    if (k_list.empty()) throw InvalidConfig("k_list must not be empty");
    for (std::size_t kk : k_list) {
        if (kk > k) throw InvalidConfig("k_list entry " + std::to_string(kk) + " exceeds k=" + std::to_string(k));
    }
    if (reference != "truncated" && reference != "full") throw InvalidConfig("reference must be truncated or full");
    if (network.hidden_width == 0 || network.depth == 0) throw InvalidConfig("network width and depth must be positive");
    if (!(network.slope >= 0.0)) throw InvalidConfig("network slope must be non-negative");
    mean_training.validate();
    nppc_training.validate();
    joint_training.validate();
    if (analysis.pca_samples <= k) throw InvalidConfig("analysis.pca_samples must exceed k");
    if (analysis.traverse_steps == 0) throw InvalidConfig("analysis.traverse_steps must be positive");
    if (!(analysis.traverse_span >= 0.0)) throw InvalidConfig("analysis.traverse_span must be non-negative");
    if (out_dir.empty()) throw InvalidConfig("out_dir must not be empty");
}

std::size_t ExperimentConfig::worker_count() const {
    if (threads > 0) return threads;
    return std::max(1u, std::thread::hardware_concurrency());
}

ReferenceMode ExperimentConfig::reference_mode() const {
    return reference == "full" ? ReferenceMode::Full : ReferenceMode::Truncated;
}

ExperimentConfig preset(std::string_view task) {
    ExperimentConfig c;
    c.task = std::string(task);

    TrainConfig& m = c.mean_training;
    m.epochs = 20;
    m.lambda1 = 0.0;
    m.lambda2 = 0.0;
    m.ramp_w_epoch = 0;
    m.ramp_sigma_epoch = 0;
    m.lr_patience = 1;

    // Around a frozen mean both terms start at once: with λ2 off, the
    // scale-free direction loss lets the raw direction norms grow without
    // bound and the variance phase never recovers.
    TrainConfig& p = c.nppc_training;
    p = TrainConfig::posthoc_defaults();
    p.epochs = 30;
    p.ramp_w_epoch = 0;
    p.ramp_sigma_epoch = 0;
    p.lambda1 = 1.0;
    p.lambda2 = 0.1;
    p.normalize_losses = false;
    p.lr_patience = 1;

    TrainConfig& j = c.joint_training;
    j.epochs = 60;
    j.ramp_w_epoch = 20;
    j.ramp_sigma_epoch = 40;
    j.lambda1 = 1.0;
    j.lambda2 = 0.1;
    j.normalize_losses = false;
    j.lr_patience = 1;

    if (task == "toy2d" || task == "custom") {
        c.out_dir = "runs/" + c.task;
    } else if (task == "toy100d") {
        c.n_train = 100000;
        c.n_test = 5000;
        c.k = 12;
        c.k_list = {0, 3, 6, 9, 12};
        m.epochs = 12;
        p.epochs = 15;
        p.lambda2 = 0.003;
        j.lambda2 = 0.003;
        c.analysis.angle_points = 50;
        c.out_dir = "runs/toy100d";
    } else {
        throw InvalidConfig("unknown task '" + std::string(task) + "'");
    }
    for (TrainConfig* t : {&m, &p, &j}) t->k = c.k;
    return c;
}

Json config_to_json(const ExperimentConfig& c) {
    return Json{{"task", c.task},
                {"mixture_file", c.mixture_file},
                {"mode", c.mode},
                {"seed", c.seed},
                {"n_train", c.n_train},
                {"n_test", c.n_test},
                {"k", c.k},
                {"k_list", c.k_list},
                {"reference", c.reference},
                {"include_mean_input", c.include_mean_input},
                {"network", Json{{"hidden_width", c.network.hidden_width},
                                 {"depth", c.network.depth},
                                 {"slope", c.network.slope}}},
                {"mean_training", training_json(c.mean_training)},
                {"nppc_training", training_json(c.nppc_training)},
                {"joint_training", training_json(c.joint_training)},
                {"analysis", analysis_to_json(c.analysis)},
                {"threads", c.threads},
                {"out_dir", c.out_dir}};
}

ExperimentConfig config_from_json(const Json& j) {
    reject_unknown(j,
                   {"task", "mixture_file", "mode", "seed", "n_train", "n_test", "k", "k_list", "reference",
                    "include_mean_input", "network", "mean_training", "nppc_training", "joint_training",
                    "analysis", "threads", "out_dir"},
                   "config");
    try {
        ExperimentConfig c = preset(j.value("task", std::string("toy2d")));
        if (j.contains("mixture_file")) c.mixture_file = j["mixture_file"].get<std::string>();
        if (j.contains("mode")) c.mode = j["mode"].get<std::string>();
        if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
        if (j.contains("n_train")) c.n_train = j["n_train"].get<std::size_t>();
        if (j.contains("n_test")) c.n_test = j["n_test"].get<std::size_t>();
        if (j.contains("k")) c.k = j["k"].get<std::size_t>();
        if (j.contains("k_list")) c.k_list = j["k_list"].get<std::vector<std::size_t>>();
        if (j.contains("reference")) c.reference = j["reference"].get<std::string>();
        if (j.contains("include_mean_input")) c.include_mean_input = j["include_mean_input"].get<bool>();
        if (j.contains("network")) {
            const Json& n = j["network"];
            reject_unknown(n, {"hidden_width", "depth", "slope"}, "network");
            if (n.contains("hidden_width")) c.network.hidden_width = n["hidden_width"].get<std::size_t>();
            if (n.contains("depth")) c.network.depth = n["depth"].get<std::size_t>();
            if (n.contains("slope")) c.network.slope = n["slope"].get<double>();
        }
        const auto training = [&](const char* key, TrainConfig& t) {
            if (!j.contains(key)) return;
            if (j[key].contains("k")) throw InvalidConfig(std::string(key) + ": set k at the top level");
            t = io::train_config_from_json(j[key], t);
        };
        training("mean_training", c.mean_training);
        training("nppc_training", c.nppc_training);
        training("joint_training", c.joint_training);
        for (TrainConfig* t : {&c.mean_training, &c.nppc_training, &c.joint_training}) t->k = c.k;
        if (j.contains("analysis")) {
            const Json& a = j["analysis"];
            reject_unknown(a, {"angle_points", "pca_samples", "agreement_cosine", "traverse_points",
                               "traverse_steps", "traverse_span"},
                           "analysis");
            if (a.contains("angle_points")) c.analysis.angle_points = a["angle_points"].get<std::size_t>();
            if (a.contains("pca_samples")) c.analysis.pca_samples = a["pca_samples"].get<std::size_t>();
            if (a.contains("agreement_cosine")) c.analysis.agreement_cosine = a["agreement_cosine"].get<double>();
            if (a.contains("traverse_points")) c.analysis.traverse_points = a["traverse_points"].get<std::size_t>();
            if (a.contains("traverse_steps")) c.analysis.traverse_steps = a["traverse_steps"].get<std::size_t>();
            if (a.contains("traverse_span")) c.analysis.traverse_span = a["traverse_span"].get<double>();
        }
        if (j.contains("threads")) c.threads = j["threads"].get<std::size_t>();
        if (j.contains("out_dir")) c.out_dir = j["out_dir"].get<std::string>();
        return c;
    } catch (const Json::exception& e) {
        throw InvalidConfig(std::string("bad config value: ") + e.what());
    }
}

ExperimentConfig load_config(const fs::path& path) {
    Json j;
    try {
        j = io::read_json(path);
    } catch (const IoError&) {
        if (!fs::exists(path)) throw;
        throw InvalidConfig("config " + path.string() + " is not valid JSON");
    }
    return config_from_json(j);
}

std::string config_hash(const ExperimentConfig& c) {
    Json j = config_to_json(c);
    j.erase("out_dir");
    j.erase("threads");
    return io::hex64(io::fnv1a(j.dump()));
}

std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag) {
    // splitmix64 finalizer over the seed mixed with the tag hash.
    std::uint64_t z = seed ^ io::fnv1a(tag);
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

World make_world(const ExperimentConfig& c) {
    if (c.task == "toy2d") {
        auto [mix, noise] = make_toy_2d(derive_seed(c.seed, "mixture"));
        return {std::move(mix), noise};
    }
    if (c.task == "toy100d") {
        auto [mix, noise] = make_toy_100d(derive_seed(c.seed, "mixture"));
        return {std::move(mix), noise};
    }
    if (c.task == "custom") {
        auto [mix, noise] = io::mixture_from_json(io::read_json(c.mixture_file));
        return {std::move(mix), noise};
    }
    throw InvalidConfig("unknown task '" + c.task + "'");
}

std::string csv_footer(const ExperimentConfig& c) {
    return "# nppc format=" + std::to_string(io::kFormatVersion) + " seed=" + std::to_string(c.seed) +
           " config=" + config_hash(c) + "\n";
}

// ---------------------------------------------------------------------------
// Data

namespace {

fs::path split_stem(const ExperimentConfig& c, std::string_view split) {
    return fs::path(c.out_dir) / "data" / std::string(split);
}

std::size_t split_size(const ExperimentConfig& c, std::string_view split) {
    return split == "train" ? c.n_train : c.n_test;
}

Dataset generate_split(const ExperimentConfig& c, const World& w, std::string_view split) {
    std::mt19937_64 rng(derive_seed(c.seed, split));
    return sample_dataset(w.mixture, w.noise, split_size(c, split), rng);
}

}  // namespace

GenDataResult cmd_gen_data(const ExperimentConfig& c) {
    c.validate();
    const World w = make_world(c);
    GenDataResult out;
    for (const char* split : {"train", "test"}) {
        const fs::path stem = split_stem(c, split);
        io::save_dataset(stem, io::DatasetFile{generate_split(c, w, split), derive_seed(c.seed, split), config_hash(c)});
        (std::string_view(split) == "train" ? out.train : out.test) = stem;
    }
    return out;
}

Dataset obtain_split(const ExperimentConfig& c, std::string_view split) {
    const World w = make_world(c);
    const fs::path stem = split_stem(c, split);
    fs::path meta = stem;
    meta += ".json";
    if (fs::exists(meta)) {
        io::DatasetFile f = io::load_dataset(stem);
        if (f.seed == derive_seed(c.seed, split) && f.data.size() == split_size(c, split) &&
            f.data.x.cols() == w.mixture.dim()) {
            return std::move(f.data);
        }
    }
    Dataset d = generate_split(c, w, split);
    io::save_dataset(stem, io::DatasetFile{d, derive_seed(c.seed, split), config_hash(c)});
    return d;
}

// ---------------------------------------------------------------------------
// Training

TrainMeanResult cmd_train_mean(const ExperimentConfig& c) {
    c.validate();
    const World w = make_world(c);
    const Dataset train = obtain_split(c, "train");
    const std::string hash = config_hash(c);
    MetricsLog log(c, hash);
    TrainConfig tc = c.mean_training;
    tc.seed = derive_seed(c.seed, "mean");
    MeanTrainResult res = train_mean(train, c.network, tc, log.sink("mean"));

    io::Checkpoint ck = base_checkpoint(c, w);
    ck.kind = "mean";
    ck.mean = res.model.mlp.config;
    ck.params = res.model.params;
    ck.training = report_to_json(res.report);
    const fs::path stem = out_path(c, "mean");
    io::save_checkpoint(stem, ck);
    log.write(out_path(c, "mean_metrics.jsonl"));
    return {stem, std::move(res.model), std::move(res.report)};
}

namespace {

TrainNppcResult train_nppc_mode(const ExperimentConfig& c, const std::string& mode,
                                const std::optional<fs::path>& mean_checkpoint) {
    c.validate();
    const World w = make_world(c);
    if (c.k > w.mixture.dim()) throw InvalidConfig("k exceeds the signal dimension");
    const Dataset train = obtain_split(c, "train");
    const std::string hash = config_hash(c);
    MetricsLog log(c, hash);
    const NppcHeadConfig head = head_for(c, w);
    TrainNppcResult result;

    if (mode == "joint") {
        if (mean_checkpoint) throw InvalidConfig("joint mode trains its own mean; do not pass a mean checkpoint");
        TrainConfig tc = c.joint_training;
        tc.seed = derive_seed(c.seed, "joint");
        JointTrainResult res = train_joint(train, c.network, head, c.network, tc, log.sink("joint"));
        io::Checkpoint ck = base_checkpoint(c, w);
        ck.kind = "nppc";
        ck.mode = "joint";
        ck.mean = res.model.mean.config;
        ck.heads = {io::HeadEntry{res.model.head, res.model.trunk.config, "head"}};
        ck.params = res.model.params;
        ck.training = report_to_json(res.report);
        const fs::path stem = out_path(c, "nppc_joint");
        io::save_checkpoint(stem, ck);
        log.write(out_path(c, "nppc_joint_metrics.jsonl"));
        result.checkpoints.push_back(stem);
        result.bundle = io::bundle_from_checkpoint(ck);
        return result;
    }

    if (!mean_checkpoint) {
        throw MissingMeanModel(mode + " mode wraps a trained mean model; pass a mean checkpoint");
    }
    const io::Checkpoint mean_ck = io::load_checkpoint(*mean_checkpoint);
    require_same_world(mean_ck, w, *mean_checkpoint);
    const io::ModelBundle mean_bundle = io::bundle_from_checkpoint(mean_ck);
    const TripletSet triplets{train.x, train.y, mean_bundle.predict_mean(train.y)};
    const ad::ParamStore mean_params = io::copy_prefixed(mean_ck.params, "mean", "mean");

    TrainConfig tc = c.nppc_training;
    tc.k = c.k;
    tc.seed = derive_seed(c.seed, "nppc");
    io::Checkpoint ck = base_checkpoint(c, w);
    ck.kind = "nppc";
    ck.mode = mode;
    ck.mean = mean_ck.mean;

    if (mode == "posthoc") {
        PosthocTrainResult res = train_posthoc(triplets, head, c.network, tc, log.sink("posthoc"));
        ck.heads = {io::HeadEntry{res.model.head, res.model.trunk.config, "head"}};
        ck.params = io::copy_prefixed(res.model.params, "head", "head", mean_params);
        ck.training = report_to_json(res.report);
        const fs::path stem = out_path(c, "nppc_posthoc");
        io::save_checkpoint(stem, ck);
        log.write(out_path(c, "nppc_posthoc_metrics.jsonl"));
        result.checkpoints.push_back(stem);
        result.bundle = io::bundle_from_checkpoint(ck);
        return result;
    }

    // Iterative: one checkpoint per learned direction, each holding every head so far.
    std::vector<NppcModel> heads;
    ck.params = mean_params;
    ck.training = Json::array();
    for (std::size_t k = 1; k <= c.k; ++k) {
        TrainReport report;
        heads.push_back(train_next_iterative(triplets, heads, head, c.network, tc, &report,
                                             log.sink("iterative_" + std::to_string(k))));
        const std::string prefix = "head" + std::to_string(k);
        ck.heads.push_back(io::HeadEntry{heads.back().head, heads.back().trunk.config, prefix});
        ck.params = io::copy_prefixed(heads.back().params, "head", prefix, ck.params);
        ck.training.push_back(report_to_json(report));
        const fs::path stem = out_path(c, "nppc_iter_" + std::to_string(k));
        io::save_checkpoint(stem, ck);
        result.checkpoints.push_back(stem);
    }
    log.write(out_path(c, "nppc_iterative_metrics.jsonl"));
    result.bundle = io::bundle_from_checkpoint(ck);
    return result;
}

}  // namespace

TrainNppcResult cmd_train_nppc(const ExperimentConfig& c, const std::optional<fs::path>& mean_checkpoint) {
    return train_nppc_mode(c, c.mode, mean_checkpoint);
}

// ---------------------------------------------------------------------------
// Evaluation

namespace {

std::string method_name(const std::string& mode, const std::vector<MethodAnalysis>& existing) {
    std::string base = mode == "posthoc" ? "nppc" : "nppc_" + mode;
    std::string name = base;
    for (int i = 2; std::any_of(existing.begin(), existing.end(), [&](const auto& m) { return m.name == name; }); ++i) {
        name = base + "_" + std::to_string(i);
    }
    return name;
}

Matrix first_rows(const Matrix& m, std::size_t k) { return take_rows(m, 0, k); }

Vector column_vector(const Matrix& m, std::size_t c) {
    Vector v(m.rows());
    for (std::size_t r = 0; r < m.rows(); ++r) v[r] = m(r, c);
    return v;
}

Json analyse_method(const ExperimentConfig& c, const MethodAnalysis& m, const Dataset& test,
                    const std::vector<GaussianMoments>& gt, const std::vector<Spectrum>& gt_spec,
                    const std::vector<SamplePca>& pca, std::size_t workers) {
    const std::size_t n = test.size();
    const std::size_t k_max = m.k;
    const Matrix errors = test.x - m.xhat;

    // Residual norms and the Pythagorean identity on every test point and K.
    std::vector<std::vector<double>> residual(k_max + 1, std::vector<double>(n));
    std::vector<double> pyth(n, 0.0);
    parallel_for(n, workers, [&](std::size_t i) {
        const auto e = errors.row(i);
        const double e2 = dot(e, e);
        const Matrix& w = m.outputs[i].w;
        residual[0][i] = std::sqrt(e2);
        double captured = 0.0;
        for (std::size_t kk = 1; kk <= k_max; ++kk) {
            const double p = dot(w.row(kk - 1), e);
            captured += p * p;
            const double r = residual_norm(e, first_rows(w, kk));
            residual[kk][i] = r;
            pyth[i] = std::max(pyth[i], std::abs(r * r + captured - e2));
        }
    });
    Json residual_json = Json::array();
    for (auto& r : residual) residual_json.push_back(num(mean_sorted(r)));

    std::vector<Matrix> per_sample;
    per_sample.reserve(n);
    for (const NppcOutput& o : m.outputs) per_sample.push_back(o.w);
    const Vector curve = unexplained_curve(errors, per_sample);
    const SamplePca global = pca_from_samples(errors, std::min(k_max, errors.rows() - 1));
    const Vector global_curve = unexplained_curve(errors, global.directions);

    // Per-direction diagnostics on the analysis subset.
    const std::size_t na = gt.size();
    Json per_direction = Json::array();
    for (std::size_t k = 0; k < k_max; ++k) {
        std::vector<double> rel(na), ratio(na), gt_angle(na), pca_angle(na);
        for (std::size_t i = 0; i < na; ++i) {
            const auto w = m.outputs[i].w.row(k);
            const double directed = dot(w, gt[i].covariance * w);
            ratio[i] = m.outputs[i].sigma2[k] / directed;
            rel[i] = std::abs(ratio[i] - 1.0);
            gt_angle[i] = line_angle_degrees(w, column_vector(gt_spec[i].vectors, k));
            pca_angle[i] = k < pca[i].directions.rows() ? line_angle_degrees(w, pca[i].directions.row(k)) : kNaN;
        }
        per_direction.push_back(Json{{"k", k + 1},
                                     {"variance_median_abs_rel_error", num(median(rel))},
                                     {"variance_median_ratio", num(median(ratio))},
                                     {"angle_to_gt_pc_median_deg", num(median(gt_angle))},
                                     {"angle_to_sample_pca_median_deg", num(median(pca_angle))}});
    }
    Json subspace = Json::array();
    for (std::size_t kk : c.k_list) {
        if (kk == 0 || kk > k_max) continue;
        std::vector<double> worst(na);
        for (std::size_t i = 0; i < na; ++i) {
            const Vector angles = principal_angles(first_rows(m.outputs[i].w, kk), first_rows(pca[i].directions, kk));
            worst[i] = angles.back();
        }
        subspace.push_back(Json{{"K", kk}, {"max_principal_angle_median_deg", num(median(worst))}});
    }

    double pyth_max = 0.0;
    for (double v : pyth) pyth_max = std::max(pyth_max, v);
    return Json{{"name", m.name},
                {"mode", m.mode},
                {"k", k_max},
                {"rmse", num(rmse(m.xhat, test.x))},
                {"residual_norm_mean", residual_json},
                {"pythagorean_max_abs_error", num(pyth_max)},
                {"unexplained_curve", std::vector<double>(curve.begin(), curve.end())},
                {"unexplained_curve_global_pca", std::vector<double>(global_curve.begin(), global_curve.end())},
                {"directions", per_direction},
                {"subspace_vs_sample_pca", subspace}};
}

}  // namespace

EvalResult cmd_eval(const ExperimentConfig& c, const std::vector<fs::path>& checkpoints) {
    c.validate();
    if (checkpoints.empty()) throw InvalidConfig("eval needs at least one NPPC checkpoint");
    const World world = make_world(c);
    const Dataset test = obtain_split(c, "test");
    const PosteriorOracle oracle(world.mixture, world.noise);
    const std::size_t workers = c.worker_count();
    const std::size_t n = test.size();
    const std::size_t d = world.mixture.dim();
    for (std::size_t kk : c.k_list) {
        if (kk > d) throw InvalidConfig("k_list entry exceeds the signal dimension");
    }

    EvalResult result;
    for (const fs::path& path : checkpoints) {
        const io::Checkpoint ck = io::load_checkpoint(path);
        if (ck.kind != "nppc") throw InvalidConfig(path.string() + " is not an NPPC checkpoint");
        require_same_world(ck, world, path);
        const io::ModelBundle bundle = io::bundle_from_checkpoint(ck);
        MethodAnalysis m;
        m.mode = ck.mode;
        m.name = method_name(ck.mode, result.methods);
        m.k = bundle.k();
        m.xhat = bundle.predict_mean(test.y);
        m.outputs = bundle.predict(test.y, m.xhat);
        result.methods.push_back(std::move(m));
    }

    // W2 table: point mass at the estimated mean against each NPPC Gaussian.
    std::vector<NamedMethod> named;
    const Matrix& baseline_mean = result.methods.front().xhat;
    named.push_back({"baseline", point_mass_method([&](std::size_t i) { return baseline_mean.row_vector(i); })});
    for (const MethodAnalysis& m : result.methods) named.push_back({m.name, nppc_method(m.xhat, m.outputs)});
    const MomentsFn moments = [&](std::span<const double> y) { return oracle.moments(y); };
    result.table = w2_table(moments, named, test.y, c.k_list, c.reference_mode(), workers, c.seed);

    // Ground truth and sample PCA on the analysis subset.
    const std::size_t na = std::min(c.analysis.angle_points, n);
    std::size_t k_max = 0;
    for (const auto& m : result.methods) k_max = std::max(k_max, m.k);
    std::vector<GaussianMoments> gt(na);
    std::vector<Spectrum> gt_spec(na);
    std::vector<SamplePca> pca(na);
    const std::uint64_t pca_seed = derive_seed(c.seed, "sample_pca");
    const PosteriorSampler sampler = [&](std::span<const double> y, std::size_t m, std::mt19937_64& rng) {
        return oracle.sample(y, m, rng);
    };
    parallel_for(na, workers, [&](std::size_t i) {
        gt[i] = oracle.moments(test.y.row(i));
        gt_spec[i] = eigh_sym(gt[i].covariance);
        std::mt19937_64 rng(pca_seed + i);
        pca[i] = sample_pca_baseline(sampler, test.y.row(i), c.analysis.pca_samples, k_max, rng);
    });

    Matrix gt_means(n, d);
    parallel_for(n, workers, [&](std::size_t i) {
        const Vector mu = oracle.moments(test.y.row(i)).mean;
        std::copy(mu.begin(), mu.end(), gt_means.row(i).begin());
    });

    Json methods_json = Json::array();
    for (const MethodAnalysis& m : result.methods) {
        methods_json.push_back(analyse_method(c, m, test, gt, gt_spec, pca, workers));
    }

    // Direction agreement of every further method with the first one.
    Json agreement = Json::array();
    for (std::size_t j = 1; j < result.methods.size(); ++j) {
        const MethodAnalysis& a = result.methods.front();
        const MethodAnalysis& b = result.methods[j];
        Json per_k = Json::array();
        for (std::size_t k = 0; k < std::min(a.k, b.k); ++k) {
            std::size_t agree = 0;
            for (std::size_t i = 0; i < na; ++i) {
                if (std::abs(dot(a.outputs[i].w.row(k), b.outputs[i].w.row(k))) > c.analysis.agreement_cosine) ++agree;
            }
            per_k.push_back(Json{{"k", k + 1}, {"fraction", num(na ? double(agree) / double(na) : kNaN)}});
        }
        agreement.push_back(Json{{"reference", a.name}, {"method", b.name}, {"directions", per_k}});
    }

    Json table = Json::array();
    for (std::size_t mi = 0; mi < result.table.methods.size(); ++mi) {
        for (std::size_t ki = 0; ki < result.table.ks.size(); ++ki) {
            const W2Cell& cell = result.table.cells[mi][ki];
            table.push_back(Json{{"method", result.table.methods[mi]},
                                 {"K", result.table.ks[ki]},
                                 {"w2_mean", num(cell.mean)},
                                 {"w2_sem", num(cell.sem)},
                                 {"n", cell.n},
                                 {"poisoned", cell.poisoned}});
        }
    }

    const std::string hash = config_hash(c);
    result.summary = Json{{"format_version", io::kFormatVersion},
                          {"seed", c.seed},
                          {"config_hash", hash},
                          {"task", c.task},
                          {"reference", c.reference},
                          {"n_test", n},
                          {"analysis_points", na},
                          {"gt_rmse", num(rmse(gt_means, test.x))},
                          {"w2_table", table},
                          {"methods", methods_json},
                          {"direction_agreement", agreement}};

    std::string csv = "method,K,w2_mean,w2_sem,n\n";
    std::string points = "method,K,index,w2\n";
    for (std::size_t mi = 0; mi < result.table.methods.size(); ++mi) {
        for (std::size_t ki = 0; ki < result.table.ks.size(); ++ki) {
            const W2Cell& cell = result.table.cells[mi][ki];
            const std::string prefix = result.table.methods[mi] + "," + std::to_string(result.table.ks[ki]) + ",";
            csv += prefix + io::format_double(cell.mean) + "," + io::format_double(cell.sem) + "," +
                   std::to_string(cell.n) + "\n";
            for (std::size_t i = 0; i < cell.per_point.size(); ++i) {
                points += prefix + std::to_string(i) + "," + io::format_double(cell.per_point[i]) + "\n";
            }
        }
    }
    result.table_csv = out_path(c, "w2_table.csv");
    result.points_csv = out_path(c, "w2_points.csv");
    result.summary_json = out_path(c, "summary.json");
    io::write_text(result.table_csv, csv + csv_footer(c));
    io::write_text(result.points_csv, points + csv_footer(c));
    io::write_json(result.summary_json, result.summary);
    return result;
}

// ---------------------------------------------------------------------------
// Traversal

Matrix traverse(const io::ModelBundle& bundle, std::span<const double> y, std::size_t k, std::size_t steps,
                double span) {
    const std::size_t big_k = bundle.k();
    if (k == 0 || k > big_k) {
        throw BadIndex("traverse: k=" + std::to_string(k) + " outside 1.." + std::to_string(big_k));
    }
    if (steps == 0) throw InvalidConfig("traverse: steps must be positive");
    Matrix ys(1, y.size());
    std::copy(y.begin(), y.end(), ys.row(0).begin());
    const Matrix xhat = bundle.predict_mean(ys);
    const NppcOutput out = bundle.predict(ys, xhat).front();
    const std::size_t d = xhat.cols();
    const double sd = std::sqrt(std::max(out.sigma2[k - 1], 0.0));
    Matrix rows(steps, d + 1);
    for (std::size_t s = 0; s < steps; ++s) {
        // Symmetric grid; the middle row of an odd grid is exactly t = 0.
        const double t = steps == 1 ? 0.0
                                    : span * (2.0 * static_cast<double>(s) - static_cast<double>(steps - 1)) /
                                          static_cast<double>(steps - 1);
        rows(s, 0) = t;
        for (std::size_t j = 0; j < d; ++j) rows(s, j + 1) = xhat(0, j) + t * sd * out.w(k - 1, j);
    }
    return rows;
}

namespace {

std::string traversal_header(std::size_t d, bool with_point) {
    std::string h = with_point ? "point,k,t" : "t";
    for (std::size_t j = 0; j < d; ++j) h += ",x" + std::to_string(j);
    return h + "\n";
}

}  // namespace

fs::path cmd_traverse(const ExperimentConfig& c, const fs::path& checkpoint, std::span<const double> y,
                      std::size_t k, std::size_t steps, double span, const fs::path& out) {
    const io::Checkpoint ck = io::load_checkpoint(checkpoint);
    if (ck.kind != "nppc") throw InvalidConfig(checkpoint.string() + " is not an NPPC checkpoint");
    if (y.size() != ck.mixture.dim()) throw ShapeMismatch("traverse: y has the wrong dimension");
    const Matrix rows = traverse(io::bundle_from_checkpoint(ck), y, k, steps, span);
    std::string csv = traversal_header(rows.cols() - 1, false);
    for (std::size_t r = 0; r < rows.rows(); ++r) csv += join_doubles(rows.row(r)) + "\n";
    io::write_text(out, csv + csv_footer(c));
    return out;
}

// ---------------------------------------------------------------------------
// Reproductions

namespace {

void write_resolved_config(const ExperimentConfig& c, std::vector<fs::path>& files) {
    Json j = config_to_json(c);
    j["config_hash"] = config_hash(c);
    j["format_version"] = io::kFormatVersion;
    const fs::path p = out_path(c, "config.json");
    io::write_json(p, j);
    files.push_back(p);
}

void add_eval_files(const EvalResult& e, std::vector<fs::path>& files) {
    files.push_back(e.table_csv);
    files.push_back(e.points_csv);
    files.push_back(e.summary_json);
}

}  // namespace

ReproduceResult reproduce_toy2d(const ExperimentConfig& c) {
    const ExperimentConfig& cc = c;
    cc.validate();
    ReproduceResult r;
    write_resolved_config(cc, r.files);
    cmd_gen_data(cc);
    const TrainMeanResult mean = cmd_train_mean(cc);
    r.files.push_back(out_path(cc, "mean_metrics.jsonl"));

    const TrainNppcResult posthoc = train_nppc_mode(cc, "posthoc", mean.checkpoint);
    r.files.push_back(out_path(cc, "nppc_posthoc_metrics.jsonl"));
    const TrainNppcResult iterative = train_nppc_mode(cc, "iterative", mean.checkpoint);
    r.files.push_back(out_path(cc, "nppc_iterative_metrics.jsonl"));

    r.eval = cmd_eval(cc, {posthoc.checkpoints.front(), iterative.checkpoints.back()});
    add_eval_files(r.eval, r.files);

    // Traversals along every direction for the first few test points.
    const Dataset test = obtain_split(cc, "test");
    const std::size_t points = std::min(cc.analysis.traverse_points, test.size());
    const std::size_t d = test.x.cols();
    std::string csv = traversal_header(d, true);
    for (std::size_t p = 0; p < points; ++p) {
        for (std::size_t k = 1; k <= posthoc.bundle.k(); ++k) {
            const Matrix rows = traverse(posthoc.bundle, test.y.row(p), k, cc.analysis.traverse_steps,
                                         cc.analysis.traverse_span);
            for (std::size_t s = 0; s < rows.rows(); ++s) {
                csv += std::to_string(p) + "," + std::to_string(k) + "," + join_doubles(rows.row(s)) + "\n";
            }
        }
    }
    const fs::path trav = out_path(cc, "traverse.csv");
    io::write_text(trav, csv + csv_footer(cc));
    r.files.push_back(trav);
    return r;
}

ReproduceResult reproduce_toy100d(const ExperimentConfig& c) {
    const ExperimentConfig& cc = c;
    cc.validate();
    ReproduceResult r;
    write_resolved_config(cc, r.files);
    cmd_gen_data(cc);
    const TrainMeanResult mean = cmd_train_mean(cc);
    r.files.push_back(out_path(cc, "mean_metrics.jsonl"));
    const TrainNppcResult posthoc = train_nppc_mode(cc, "posthoc", mean.checkpoint);
    r.files.push_back(out_path(cc, "nppc_posthoc_metrics.jsonl"));
    r.eval = cmd_eval(cc, {posthoc.checkpoints.front()});
    add_eval_files(r.eval, r.files);
    return r;
}

}  // namespace nppc::exp
