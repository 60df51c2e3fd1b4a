#include "nppc/io.hpp"

#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "nppc/errors.hpp"

namespace nppc::io {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

std::string format_double(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

std::uint64_t fnv1a(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

void write_text(const fs::path& path, std::string_view text) {
    std::error_code ec;
    if (path.has_parent_path()) fs::create_directories(path.parent_path(), ec);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out) throw IoError("failed writing " + path.string());
}

std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_json(const fs::path& path, const Json& value) { write_text(path, value.dump(2) + "\n"); }

Json read_json(const fs::path& path) {
    const std::string text = read_text(path);
    try {
        return Json::parse(text);
    } catch (const Json::exception& e) {
        throw IoError("malformed JSON in " + path.string() + ": " + e.what());
    }
}

namespace {

fs::path with_ext(const fs::path& stem, const char* ext) {
    fs::path p = stem;
    p += ext;
    return p;
}

void append_doubles(std::string& blob, std::span<const double> values) {
    const std::size_t at = blob.size();
    blob.resize(at + values.size() * sizeof(double));
    std::memcpy(blob.data() + at, values.data(), values.size() * sizeof(double));
}

void read_doubles(const std::string& blob, std::size_t offset, std::span<double> out, const fs::path& where) {
    const std::size_t bytes = out.size() * sizeof(double);
    if (offset + bytes > blob.size()) throw IoError("truncated binary file " + where.string());
    std::memcpy(out.data(), blob.data() + offset, bytes);
}

template <class T>
T get_field(const Json& j, const char* key, const fs::path& where) {
    if (!j.contains(key)) throw IoError("missing field '" + std::string(key) + "' in " + where.string());
    try {
        return j.at(key).get<T>();
    } catch (const Json::exception& e) {
        throw IoError("bad field '" + std::string(key) + "' in " + where.string() + ": " + e.what());
    }
}

void check_version(const Json& j, const fs::path& where) {
    const int v = get_field<int>(j, "format_version", where);
    if (v != kFormatVersion) {
        throw IoError(where.string() + " has format version " + std::to_string(v) + ", expected " +
                      std::to_string(kFormatVersion));
    }
}

Json matrix_to_json(const Matrix& m) {
    Json rows = Json::array();
    for (std::size_t r = 0; r < m.rows(); ++r) {
        const auto row = m.row(r);
        rows.push_back(std::vector<double>(row.begin(), row.end()));
    }
    return rows;
}

Matrix matrix_from_json(const Json& j) {
    const auto rows = j.get<std::vector<std::vector<double>>>();
    if (rows.empty()) return Matrix();
    return Matrix::from_rows(rows);
}

}  // namespace

// ---------------------------------------------------------------------------

void save_dataset(const fs::path& stem, const DatasetFile& file) {
    const Dataset& d = file.data;
    if (d.x.rows() != d.y.rows()) throw ShapeMismatch("save_dataset: x and y row counts differ");
    std::string blob;
    append_doubles(blob, d.x.data());
    append_doubles(blob, d.y.data());
    write_text(with_ext(stem, ".bin"), blob);
    Json meta{{"format_version", kFormatVersion},
              {"rows", d.x.rows()},
              {"dx", d.x.cols()},
              {"dy", d.y.cols()},
              {"seed", file.seed},
              {"config_hash", file.config_hash},
              {"layout", "float64 little-endian; x rows then y rows, row-major"},
              {"checksum", hex64(fnv1a(blob))}};
    write_json(with_ext(stem, ".json"), meta);
}

DatasetFile load_dataset(const fs::path& stem) {
    const fs::path meta_path = with_ext(stem, ".json");
    const Json meta = read_json(meta_path);
    check_version(meta, meta_path);
    const auto rows = get_field<std::size_t>(meta, "rows", meta_path);
    const auto dx = get_field<std::size_t>(meta, "dx", meta_path);
    const auto dy = get_field<std::size_t>(meta, "dy", meta_path);
    const fs::path bin_path = with_ext(stem, ".bin");
    const std::string blob = read_text(bin_path);
    if (blob.size() != rows * (dx + dy) * sizeof(double)) {
        throw IoError(bin_path.string() + " has " + std::to_string(blob.size()) + " bytes, expected " +
                      std::to_string(rows * (dx + dy) * sizeof(double)));
    }
    if (get_field<std::string>(meta, "checksum", meta_path) != hex64(fnv1a(blob))) {
        throw IoError("checksum mismatch for " + bin_path.string());
    }
    DatasetFile file;
    file.data.x = Matrix(rows, dx);
    file.data.y = Matrix(rows, dy);
    read_doubles(blob, 0, file.data.x.data(), bin_path);
    read_doubles(blob, rows * dx * sizeof(double), file.data.y.data(), bin_path);
    file.seed = get_field<std::uint64_t>(meta, "seed", meta_path);
    file.config_hash = get_field<std::string>(meta, "config_hash", meta_path);
    return file;
}

// ---------------------------------------------------------------------------

Json mixture_to_json(const GaussianMixture& mix, const NoiseModel& noise) {
    Json covs = Json::array();
    for (const Matrix& c : mix.covariances) covs.push_back(matrix_to_json(c));
    return Json{{"weights", mix.weights}, {"means", mix.means}, {"covariances", covs}, {"sigma", noise.sigma}};
}

std::pair<GaussianMixture, NoiseModel> mixture_from_json(const Json& j) {
    try {
        GaussianMixture mix;
        mix.weights = j.at("weights").get<Vector>();
        mix.means = j.at("means").get<std::vector<Vector>>();
        for (const Json& c : j.at("covariances")) mix.covariances.push_back(matrix_from_json(c));
        NoiseModel noise{j.at("sigma").get<double>()};
        mix.validate();
        if (!(noise.sigma > 0.0)) throw InvalidConfig("mixture: sigma must be positive");
        return {std::move(mix), noise};
    } catch (const Json::exception& e) {
        throw InvalidConfig(std::string("malformed mixture definition: ") + e.what());
    }
}

Json mlp_config_to_json(const MlpConfig& c) {
    return Json{{"input_dim", c.input_dim}, {"hidden_width", c.hidden_width}, {"depth", c.depth},
                {"slope", c.slope}, {"output_dim", c.output_dim}};
}

MlpConfig mlp_config_from_json(const Json& j) {
    MlpConfig c;
    c.input_dim = j.at("input_dim").get<std::size_t>();
    c.hidden_width = j.at("hidden_width").get<std::size_t>();
    c.depth = j.at("depth").get<std::size_t>();
    c.slope = j.at("slope").get<double>();
    c.output_dim = j.at("output_dim").get<std::size_t>();
    return c;
}

Json head_config_to_json(const NppcHeadConfig& c) {
    return Json{{"k", c.k}, {"dx", c.dx}, {"dy", c.dy}, {"include_mean_input", c.include_mean_input}};
}

NppcHeadConfig head_config_from_json(const Json& j) {
    NppcHeadConfig c;
    c.k = j.at("k").get<std::size_t>();
    c.dx = j.at("dx").get<std::size_t>();
    c.dy = j.at("dy").get<std::size_t>();
    c.include_mean_input = j.at("include_mean_input").get<bool>();
    return c;
}

Json train_config_to_json(const TrainConfig& c) {
    return Json{{"k", c.k},
                {"epochs", c.epochs},
                {"batch_size", c.batch_size},
                {"learning_rate", c.learning_rate},
                {"lambda1", c.lambda1},
                {"lambda2", c.lambda2},
                {"ramp_w_epoch", c.ramp_w_epoch},
                {"ramp_sigma_epoch", c.ramp_sigma_epoch},
                {"normalize_losses", c.normalize_losses},
                {"validation_fraction", c.validation_fraction},
                {"lr_patience", c.lr_patience},
                {"lr_factor", c.lr_factor},
                {"min_learning_rate", c.min_learning_rate}};
}

TrainConfig train_config_from_json(const Json& j, TrainConfig c) {
    if (!j.is_object()) throw InvalidConfig("training section must be an object");
    static const std::set<std::string> known = {
        "k", "epochs", "batch_size", "learning_rate", "lambda1", "lambda2", "ramp_w_epoch",
        "ramp_sigma_epoch", "normalize_losses", "validation_fraction", "lr_patience", "lr_factor",
        "min_learning_rate"};
    for (const auto& [key, _] : j.items()) {
        if (!known.contains(key)) throw InvalidConfig("unknown training option '" + key + "'");
    }
    try {
        if (j.contains("k")) c.k = j["k"].get<std::size_t>();
        if (j.contains("epochs")) c.epochs = j["epochs"].get<std::size_t>();
        if (j.contains("batch_size")) c.batch_size = j["batch_size"].get<std::size_t>();
        if (j.contains("learning_rate")) c.learning_rate = j["learning_rate"].get<double>();
        if (j.contains("lambda1")) c.lambda1 = j["lambda1"].get<double>();
        if (j.contains("lambda2")) c.lambda2 = j["lambda2"].get<double>();
        if (j.contains("ramp_w_epoch")) c.ramp_w_epoch = j["ramp_w_epoch"].get<std::size_t>();
        if (j.contains("ramp_sigma_epoch")) c.ramp_sigma_epoch = j["ramp_sigma_epoch"].get<std::size_t>();
        if (j.contains("normalize_losses")) c.normalize_losses = j["normalize_losses"].get<bool>();
        if (j.contains("validation_fraction")) c.validation_fraction = j["validation_fraction"].get<double>();
        if (j.contains("lr_patience")) c.lr_patience = j["lr_patience"].get<std::size_t>();
        if (j.contains("lr_factor")) c.lr_factor = j["lr_factor"].get<double>();
        if (j.contains("min_learning_rate")) c.min_learning_rate = j["min_learning_rate"].get<double>();
    } catch (const Json::exception& e) {
        throw InvalidConfig(std::string("bad training option: ") + e.what());
    }
    return c;
}

// ---------------------------------------------------------------------------

fs::path checkpoint_stem(const fs::path& path) {
    if (path.extension() == ".json" || path.extension() == ".bin") {
        fs::path p = path;
        return p.replace_extension();
    }
    return path;
}

void save_checkpoint(const fs::path& stem, const Checkpoint& ckpt) {
    std::string blob;
    Json tensors = Json::array();
    for (std::size_t i = 0; i < ckpt.params.size(); ++i) {
        const Matrix& t = ckpt.params.value(i);
        tensors.push_back(Json{{"name", ckpt.params.name(i)}, {"rows", t.rows()}, {"cols", t.cols()},
                               {"offset", blob.size()}});
        append_doubles(blob, t.data());
    }
    Json heads = Json::array();
    for (const HeadEntry& h : ckpt.heads) {
        heads.push_back(Json{{"head", head_config_to_json(h.head)}, {"trunk", mlp_config_to_json(h.trunk)},
                             {"prefix", h.prefix}});
    }
    const fs::path bin = with_ext(stem, ".bin");
    Json manifest{{"format_version", kFormatVersion},
                  {"kind", ckpt.kind},
                  {"mode", ckpt.mode},
                  {"mean", mlp_config_to_json(ckpt.mean)},
                  {"heads", heads},
                  {"tensors", tensors},
                  {"blob", bin.filename().string()},
                  {"checksum", hex64(fnv1a(blob))},
                  {"mixture", mixture_to_json(ckpt.mixture, ckpt.noise)},
                  {"training", ckpt.training},
                  {"seed", ckpt.seed},
                  {"config_hash", ckpt.config_hash}};
    write_text(bin, blob);
    write_json(with_ext(stem, ".json"), manifest);
}

Checkpoint load_checkpoint(const fs::path& path) {
    const fs::path stem = checkpoint_stem(path);
    const fs::path meta_path = with_ext(stem, ".json");
    const Json m = read_json(meta_path);
    check_version(m, meta_path);
    Checkpoint c;
    try {
        c.kind = m.at("kind").get<std::string>();
        c.mode = m.at("mode").get<std::string>();
        c.mean = mlp_config_from_json(m.at("mean"));
        for (const Json& h : m.at("heads")) {
            c.heads.push_back(HeadEntry{head_config_from_json(h.at("head")), mlp_config_from_json(h.at("trunk")),
                                        h.at("prefix").get<std::string>()});
        }
        std::tie(c.mixture, c.noise) = mixture_from_json(m.at("mixture"));
        c.training = m.at("training");
        c.seed = m.at("seed").get<std::uint64_t>();
        c.config_hash = m.at("config_hash").get<std::string>();
    } catch (const Json::exception& e) {
        throw IoError("malformed checkpoint manifest " + meta_path.string() + ": " + e.what());
    }
    const fs::path bin = stem.parent_path() / get_field<std::string>(m, "blob", meta_path);
    const std::string blob = read_text(bin);
    if (get_field<std::string>(m, "checksum", meta_path) != hex64(fnv1a(blob))) {
        throw IoError("checksum mismatch for " + bin.string());
    }
    for (const Json& t : m.at("tensors")) {
        Matrix value(t.at("rows").get<std::size_t>(), t.at("cols").get<std::size_t>());
        read_doubles(blob, t.at("offset").get<std::size_t>(), value.data(), bin);
        c.params.add(t.at("name").get<std::string>(), std::move(value));
    }
    return c;
}

ad::ParamStore copy_prefixed(const ad::ParamStore& src, std::string_view from, std::string_view to,
                             ad::ParamStore dst) {
    const std::string pfx = std::string(from) + "/";
    for (std::size_t i = 0; i < src.size(); ++i) {
        const std::string& name = src.name(i);
        if (name.rfind(pfx, 0) != 0) continue;
        dst.add(std::string(to) + "/" + name.substr(pfx.size()), src.value(i));
    }
    return dst;
}

// ---------------------------------------------------------------------------

Matrix ModelBundle::predict_mean(const Matrix& ys) const {
    return mean_predict_batch(mean.mlp, mean.params, ys);
}

std::vector<NppcOutput> ModelBundle::predict(const Matrix& ys, const Matrix& xhats) const {
    if (heads.empty()) throw InvalidConfig("checkpoint has no NPPC head");
    if (mode == "iterative") return iterative_predict(heads, ys, xhats);
    return nppc_predict(heads.front(), ys, xhats);
}

std::size_t ModelBundle::k() const {
    if (mode == "iterative") return heads.size();
    return heads.empty() ? 0 : heads.front().head.k;
}

ModelBundle bundle_from_checkpoint(const Checkpoint& ckpt) {
    ModelBundle b;
    b.mode = ckpt.mode;
    b.mean.params = copy_prefixed(ckpt.params, "mean", "mean");
    b.mean.mlp = Mlp::bind(ckpt.mean, "mean", b.mean.params);
    for (const HeadEntry& h : ckpt.heads) {
        NppcModel m;
        m.head = h.head;
        m.params = copy_prefixed(ckpt.params, h.prefix, "head");
        m.trunk = Mlp::bind(h.trunk, "head", m.params);
        b.heads.push_back(std::move(m));
    }
    if (ckpt.kind == "nppc" && b.heads.empty()) throw IoError("NPPC checkpoint without heads");
    return b;
}

}  // namespace nppc::io
