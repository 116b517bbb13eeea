// Experiment runner behind the command-line tool: JSON config <-> spec,
// data preparation, and the partition / run / sweep / verify commands.
//
// Output layout (under spec.out):
//   run:    config.json, summary.csv, seed_<s>.jsonl, model_seed_<s>.txt
//   sweep:  summary.csv, c<idx>_<key>/config.json, c<idx>_<key>/seed_<s>.jsonl
//   partition: train.csv, test.csv, manifest.csv, histogram.csv
// Every file is a pure function of (config, seed); thread count never shows.
#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedmix/data.hpp"
#include "fedmix/errors.hpp"
#include "fedmix/federation.hpp"
#include "fedmix/io.hpp"
#include "fedmix/parallel.hpp"
#include "fedmix/verify.hpp"

namespace fedmix::harness {

using Json = nlohmann::ordered_json;
namespace fs = std::filesystem;

enum class DatasetKind { blobs, file };
enum class PartitionKind { by_class, dirichlet, power_law };

struct DatasetRecipe {
    DatasetKind kind = DatasetKind::blobs;
    std::size_t total_dataset_classes = 4;  // C
    std::size_t input_dim = 8;              // d_i
    std::size_t samples = 2000;             // training rows, split evenly across classes
    double spread = 1.5;
    std::size_t test_per_class = 200;  // held-out rows per class
    std::string train_path, test_path;  // kind == file

    bool operator==(const DatasetRecipe&) const = default;
};

struct PartitionRecipe {
    PartitionKind kind = PartitionKind::by_class;
    std::size_t class_per_clients = 2;
    double alpha = 0.5;     // dirichlet
    double exponent = 1.5;  // power_law

    bool operator==(const PartitionRecipe&) const = default;
};

struct SweepAxis {
    std::string name;
    std::vector<Json> values;

    bool operator==(const SweepAxis&) const = default;
};

struct ExperimentSpec {
    FedConfig base;
    std::optional<double> lambda_naivemix;  // per-variant overrides of base.lambda
    std::optional<double> lambda_fedmix;
    DatasetRecipe dataset;
    PartitionRecipe partition;
    std::vector<SweepAxis> sweep;
    std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
    std::string out = "runs";
    double target_accuracy = 0.7;

    bool operator==(const ExperimentSpec&) const = default;
};

// ---------------------------------------------------------------- names

namespace detail {

template <class E>
struct EnumNames;

template <>
struct EnumNames<Variant> {
    static constexpr std::pair<Variant, const char*> table[] = {{Variant::fedavg, "fedavg"},
                                                               {Variant::localmix, "localmix"},
                                                               {Variant::globalmix, "globalmix"},
                                                               {Variant::naivemix, "naivemix"},
                                                               {Variant::fedmix, "fedmix"}};
};
template <>
struct EnumNames<MashSource> {
    static constexpr std::pair<MashSource, const char*> table[] = {{MashSource::global, "global"},
                                                                  {MashSource::random_noise, "random_noise"},
                                                                  {MashSource::local_means, "local_means"}};
};
template <>
struct EnumNames<MashSplit> {
    static constexpr std::pair<MashSplit, const char*> table[] = {{MashSplit::random, "random"},
                                                                 {MashSplit::same_class, "same_class"}};
};
template <>
struct EnumNames<LambdaMode> {
    static constexpr std::pair<LambdaMode, const char*> table[] = {{LambdaMode::fixed, "fixed"},
                                                                  {LambdaMode::beta, "beta"}};
};
template <>
struct EnumNames<DatasetKind> {
    static constexpr std::pair<DatasetKind, const char*> table[] = {{DatasetKind::blobs, "blobs"},
                                                                   {DatasetKind::file, "file"}};
};
template <>
struct EnumNames<PartitionKind> {
    static constexpr std::pair<PartitionKind, const char*> table[] = {{PartitionKind::by_class, "class"},
                                                                     {PartitionKind::dirichlet, "dirichlet"},
                                                                     {PartitionKind::power_law, "power_law"}};
};

template <class E>
std::string enum_name(E v) {
    for (auto [e, n] : EnumNames<E>::table)
        if (e == v) return n;
    return "?";
}

template <class E>
E enum_from(const std::string& field, const std::string& s) {
    std::string options;
    for (auto [e, n] : EnumNames<E>::table) {
        if (s == n) return e;
        options += options.empty() ? n : std::string("|") + n;
    }
    throw ConfigError(field, "unknown value '" + s + "', expected " + options);
}

inline bool is_count(const Json& v) {
    return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
}

// Reads the keys of one JSON object, rejecting wrong types and unknown keys.
class Section {
public:
    Section(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(path_.empty() ? "config" : path_, "expected an object");
    }

    bool has(const std::string& key) const { return j_.contains(key); }
    std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

    const Json* get(const std::string& key) {
        seen_.insert(key);
        auto it = j_.find(key);
        return it == j_.end() ? nullptr : &*it;
    }

    void count(const std::string& key, std::size_t& out) {
        if (const Json* v = get(key)) {
            if (!is_count(*v)) throw ConfigError(field(key), "expected a non-negative integer");
            out = v->get<std::size_t>();
        }
    }
    void seed(const std::string& key, std::uint64_t& out) {
        if (const Json* v = get(key)) {
            if (!is_count(*v)) throw ConfigError(field(key), "expected a non-negative integer");
            out = v->get<std::uint64_t>();
        }
    }
    void number(const std::string& key, double& out) {
        if (const Json* v = get(key)) {
            if (!v->is_number()) throw ConfigError(field(key), "expected a number");
            out = v->get<double>();
        }
    }
    void text(const std::string& key, std::string& out) {
        if (const Json* v = get(key)) {
            if (!v->is_string()) throw ConfigError(field(key), "expected a string");
            out = v->get<std::string>();
        }
    }
    template <class E>
    void choice(const std::string& key, E& out) {
        std::string s;
        if (has(key)) {
            text(key, s);
            out = enum_from<E>(field(key), s);
        } else {
            get(key);
        }
    }
    void optional_number(const std::string& key, std::optional<double>& out) {
        if (const Json* v = get(key)) {
            if (v->is_null()) {
                out.reset();
                return;
            }
            if (!v->is_number()) throw ConfigError(field(key), "expected a number or null");
            out = v->get<double>();
        }
    }
    void counts(const std::string& key, std::vector<std::size_t>& out) {
        if (const Json* v = get(key)) {
            if (!v->is_array()) throw ConfigError(field(key), "expected an array of integers");
            out.clear();
            for (const auto& x : *v) {
                if (!is_count(x)) throw ConfigError(field(key), "expected an array of integers");
                out.push_back(x.get<std::size_t>());
            }
        }
    }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!seen_.count(it.key())) throw ConfigError(field(it.key()), "unknown key");
    }

private:
    const Json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

// Which config section owns a sweepable key.
inline std::string section_of(const std::string& key) {
    static const std::set<std::string> fed{
        "num_clients",     "clients_per_round", "fraction_of_clients", "rounds",        "local_epochs",
        "local_batch_size", "learning_rate",    "learning_decay_rate", "variant",       "mash_source",
        "lambda_mode",     "lambda",            "beta_param",          "lambda_naivemix", "lambda_fedmix",
        "mash_batch_size", "mash_split",        "mu_fedprox",          "noise_sigma",   "threshold",
        "server_fold",     "global_mix_pool",   "hidden_layers"};
    static const std::set<std::string> part{"kind", "class_per_clients", "alpha", "exponent"};
    static const std::set<std::string> data{"total_dataset_classes", "input_dim", "samples", "spread",
                                            "test_per_class"};
    if (fed.count(key)) return "federation";
    if (key == "partition" || part.count(key)) return "partition";
    if (data.count(key)) return "dataset";
    return {};
}

}  // namespace detail

// ---------------------------------------------------------------- config

inline Json to_json(const ExperimentSpec& s) {
    const FedConfig& f = s.base;
    Json fed = {{"num_clients", f.num_clients},
                {"clients_per_round", f.clients_per_round},
                {"rounds", f.rounds},
                {"local_epochs", f.local_epochs},
                {"local_batch_size", f.local_batch_size},
                {"learning_rate", f.learning_rate},
                {"learning_decay_rate", f.learning_decay_rate},
                {"variant", detail::enum_name(f.variant)},
                {"mash_source", detail::enum_name(f.mash_source)},
                {"lambda_mode", detail::enum_name(f.lambda.mode)},
                {"lambda", f.lambda.lambda},
                {"beta_param", f.lambda.beta_param},
                {"lambda_naivemix", s.lambda_naivemix ? Json(*s.lambda_naivemix) : Json(nullptr)},
                {"lambda_fedmix", s.lambda_fedmix ? Json(*s.lambda_fedmix) : Json(nullptr)},
                {"mash_batch_size", f.mash_batch_size},
                {"mash_split", detail::enum_name(f.mash_split)},
                {"mu_fedprox", f.mu_fedprox},
                {"noise_sigma", f.noise_sigma},
                {"threshold", f.threshold},
                {"server_fold", f.server_fold},
                {"global_mix_pool", f.global_mix_pool},
                {"hidden_layers", f.hidden_layers}};
    Json data = {{"kind", detail::enum_name(s.dataset.kind)},
                 {"total_dataset_classes", s.dataset.total_dataset_classes},
                 {"input_dim", s.dataset.input_dim},
                 {"samples", s.dataset.samples},
                 {"spread", s.dataset.spread},
                 {"test_per_class", s.dataset.test_per_class}};
    if (s.dataset.kind == DatasetKind::file) {
        data["train"] = s.dataset.train_path;
        data["test"] = s.dataset.test_path;
    }
    Json part = {{"kind", detail::enum_name(s.partition.kind)},
                 {"class_per_clients", s.partition.class_per_clients},
                 {"alpha", s.partition.alpha},
                 {"exponent", s.partition.exponent}};
    Json sweep = Json::object();
    for (const auto& a : s.sweep) sweep[a.name] = a.values;
    return {{"seeds", s.seeds},   {"out", s.out},        {"target_accuracy", s.target_accuracy},
            {"dataset", data},    {"partition", part},   {"federation", fed},
            {"sweep", sweep}};
}

inline void validate(const ExperimentSpec& s) {
    s.base.validate();
    if (s.seeds.empty()) throw ConfigError("seeds", "at least one seed required");
    if (std::set<std::uint64_t>(s.seeds.begin(), s.seeds.end()).size() != s.seeds.size())
        throw ConfigError("seeds", "seeds must be distinct");
    if (!(s.target_accuracy >= 0.0 && s.target_accuracy <= 1.0))
        throw ConfigError("target_accuracy", "must lie in [0, 1]");
    for (auto [name, v] : {std::pair{"lambda_naivemix", s.lambda_naivemix}, std::pair{"lambda_fedmix", s.lambda_fedmix}})
        if (v && !(*v >= 0.0 && *v <= 1.0)) throw ConfigError(std::string("federation.") + name, "must lie in [0, 1]");
    const auto& d = s.dataset;
    if (d.kind == DatasetKind::blobs) {
        if (d.total_dataset_classes < 2) throw ConfigError("dataset.total_dataset_classes", "must be >= 2");
        if (d.input_dim < 2) throw ConfigError("dataset.input_dim", "must be >= 2");
        if (d.samples < d.total_dataset_classes)
            throw ConfigError("dataset.samples", "need at least one training row per class");
        if (d.test_per_class < 1) throw ConfigError("dataset.test_per_class", "must be >= 1");
        if (!(d.spread > 0.0)) throw ConfigError("dataset.spread", "must be > 0");
    } else if (d.train_path.empty() || d.test_path.empty()) {
        throw ConfigError("dataset.train", "file datasets need both 'train' and 'test' paths");
    }
    const auto& p = s.partition;
    if (p.kind == PartitionKind::by_class && p.class_per_clients < 1)
        throw ConfigError("partition.class_per_clients", "must be >= 1");
    if (d.kind == DatasetKind::blobs && p.kind == PartitionKind::by_class &&
        p.class_per_clients > d.total_dataset_classes)
        throw ConfigError("partition.class_per_clients", "exceeds total_dataset_classes");
    if (!(p.alpha > 0.0)) throw ConfigError("partition.alpha", "must be > 0");
    if (!(p.exponent >= 0.0)) throw ConfigError("partition.exponent", "must be >= 0");
    for (const auto& a : s.sweep) {
        if (detail::section_of(a.name).empty()) throw ConfigError("sweep." + a.name, "not a sweepable key");
        if (a.values.empty()) throw ConfigError("sweep." + a.name, "axis has no values");
    }
}

inline ExperimentSpec from_json(const Json& j) {
    ExperimentSpec s;
    detail::Section top(j, "");
    if (const Json* v = top.get("seeds")) {
        if (!v->is_array()) throw ConfigError("seeds", "expected an array of integers");
        s.seeds.clear();
        for (const auto& x : *v) {
            if (!detail::is_count(x)) throw ConfigError("seeds", "expected an array of integers");
            s.seeds.push_back(x.get<std::uint64_t>());
        }
    }
    top.text("out", s.out);
    top.number("target_accuracy", s.target_accuracy);

    if (const Json* v = top.get("dataset")) {
        detail::Section d(*v, "dataset");
        d.choice("kind", s.dataset.kind);
        d.count("total_dataset_classes", s.dataset.total_dataset_classes);
        d.count("input_dim", s.dataset.input_dim);
        d.count("samples", s.dataset.samples);
        d.number("spread", s.dataset.spread);
        d.count("test_per_class", s.dataset.test_per_class);
        d.text("train", s.dataset.train_path);
        d.text("test", s.dataset.test_path);
        d.finish();
    }
    if (const Json* v = top.get("partition")) {
        detail::Section p(*v, "partition");
        p.choice("kind", s.partition.kind);
        p.count("class_per_clients", s.partition.class_per_clients);
        p.number("alpha", s.partition.alpha);
        p.number("exponent", s.partition.exponent);
        p.finish();
    }
    if (const Json* v = top.get("federation")) {
        FedConfig& f = s.base;
        detail::Section fs(*v, "federation");
        fs.count("num_clients", f.num_clients);
        if (fs.has("clients_per_round") && fs.has("fraction_of_clients"))
            throw ConfigError("federation.fraction_of_clients", "give clients_per_round or fraction_of_clients, not both");
        fs.count("clients_per_round", f.clients_per_round);
        double fraction = -1.0;
        fs.number("fraction_of_clients", fraction);
        if (fs.has("fraction_of_clients")) {
            if (!(fraction > 0.0 && fraction <= 1.0))
                throw ConfigError("federation.fraction_of_clients", "must lie in (0, 1]");
            f.clients_per_round = std::max<std::size_t>(
                1, static_cast<std::size_t>(std::llround(fraction * static_cast<double>(f.num_clients))));
        }
        fs.count("rounds", f.rounds);
        fs.count("local_epochs", f.local_epochs);
        fs.count("local_batch_size", f.local_batch_size);
        fs.number("learning_rate", f.learning_rate);
        fs.number("learning_decay_rate", f.learning_decay_rate);
        fs.choice("variant", f.variant);
        fs.choice("mash_source", f.mash_source);
        fs.choice("lambda_mode", f.lambda.mode);
        fs.number("lambda", f.lambda.lambda);
        fs.number("beta_param", f.lambda.beta_param);
        fs.optional_number("lambda_naivemix", s.lambda_naivemix);
        fs.optional_number("lambda_fedmix", s.lambda_fedmix);
        fs.count("mash_batch_size", f.mash_batch_size);
        fs.choice("mash_split", f.mash_split);
        fs.number("mu_fedprox", f.mu_fedprox);
        fs.number("noise_sigma", f.noise_sigma);
        fs.count("threshold", f.threshold);
        fs.count("server_fold", f.server_fold);
        fs.count("global_mix_pool", f.global_mix_pool);
        fs.counts("hidden_layers", f.hidden_layers);
        fs.finish();
    }
    if (const Json* v = top.get("sweep")) {
        if (!v->is_object()) throw ConfigError("sweep", "expected an object of axis -> values");
        for (auto it = v->begin(); it != v->end(); ++it) {
            if (!it.value().is_array()) throw ConfigError("sweep." + it.key(), "expected an array of values");
            s.sweep.push_back({it.key(), std::vector<Json>(it.value().begin(), it.value().end())});
        }
    }
    top.finish();
    validate(s);
    return s;
}

inline ExperimentSpec parse_config(const std::string& text) {
    Json j;
    try {
        j = Json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("config", std::string("malformed JSON: ") + e.what());
    }
    return from_json(j);
}

inline ExperimentSpec load_config(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config", "cannot read " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str());
}

inline std::string dump_config(const ExperimentSpec& s) { return to_json(s).dump(2) + "\n"; }

// Effective run config for one seed, with the per-variant lambda overrides.
inline FedConfig fed_config(const ExperimentSpec& s, std::uint64_t seed) {
    FedConfig cfg = s.base;
    cfg.seed = seed;
    std::optional<double> over = cfg.variant == Variant::fedmix     ? s.lambda_fedmix
                                 : cfg.variant == Variant::naivemix ? s.lambda_naivemix
                                                                    : std::nullopt;
    if (over) cfg.lambda = {LambdaMode::fixed, *over, cfg.lambda.beta_param};
    return cfg;
}

// Spec with one axis value substituted. A "lambda" axis clears the
// per-variant overrides so the swept value is the one used.
inline ExperimentSpec with_axis(const ExperimentSpec& s, const std::string& name, const Json& value) {
    Json j = to_json(s);
    j["sweep"] = Json::object();
    const std::string section = detail::section_of(name);
    if (section.empty()) throw ConfigError("sweep." + name, "not a sweepable key");
    Json& sec = j[section];
    if (name == "lambda") {
        sec["lambda_fedmix"] = nullptr;
        sec["lambda_naivemix"] = nullptr;
    }
    if (name == "fraction_of_clients") sec.erase("clients_per_round");
    if (name == "clients_per_round") sec.erase("fraction_of_clients");
    sec[name == "partition" ? "kind" : name] = value;
    return from_json(j);
}

// ---------------------------------------------------------------- data

struct PreparedData {
    Dataset train, test;
    std::vector<ClientShard> shards;
};

inline PreparedData prepare_data(const ExperimentSpec& s, std::uint64_t seed) {
    PreparedData out;
    const auto& d = s.dataset;
    if (d.kind == DatasetKind::blobs) {
        const std::size_t C = d.total_dataset_classes;
        Dataset full = make_blobs(C, d.input_dim, d.samples / C + d.test_per_class, d.spread, seed);
        auto [train, test] = split_holdout(full, d.test_per_class, seed);
        out.train = std::move(train);
        out.test = std::move(test);
    } else {
        auto read = [](const std::string& path) {
            std::ifstream in(path);
            if (!in) throw ConfigError("dataset", "cannot read " + path);
            try {
                return load_dataset(in);
            } catch (const FormatError& e) {
                throw ConfigError("dataset", path + ": " + e.what());
            }
        };
        out.train = read(d.train_path);
        out.test = read(d.test_path);
        if (out.train.dim() != out.test.dim() || out.train.classes != out.test.classes)
            throw ConfigError("dataset", "train and test files disagree on d_i or C");
    }
    const std::size_t N = s.base.num_clients;
    switch (s.partition.kind) {
        case PartitionKind::by_class:
            if (s.partition.class_per_clients > out.train.classes)
                throw ConfigError("partition.class_per_clients", "exceeds the dataset's class count");
            out.shards = partition_by_class(out.train, N, s.partition.class_per_clients, seed);
            break;
        case PartitionKind::dirichlet:
            out.shards = partition_dirichlet(out.train, N, s.partition.alpha, seed);
            break;
        case PartitionKind::power_law:
            out.shards = partition_sized(out.train, N, s.partition.exponent, seed);
            break;
    }
    return out;
}

// ---------------------------------------------------------------- output

namespace detail {

inline void write_file(const fs::path& path, const std::string& content) {
    fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("out", "cannot write " + path.string());
    out << content;
}

inline std::string fixed(double v, int digits = 6) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(digits) << v;
    return os.str();
}

inline std::string value_text(const Json& v) { return v.is_string() ? v.get<std::string>() : v.dump(); }

// Filesystem-safe cell directory name.
inline std::string cell_dir_name(std::size_t index, const std::string& key) {
    std::ostringstream os;
    os << "c" << std::setw(3) << std::setfill('0') << index;
    if (!key.empty()) os << "_";
    for (char ch : key) os << (std::isalnum(static_cast<unsigned char>(ch)) || ch == '.' || ch == '-' ? ch : '_');
    return os.str();
}

}  // namespace detail

// ---------------------------------------------------------------- execution

enum class CellStatus { ok, invalid, diverged };

struct SeedOutcome {
    std::uint64_t seed = 0;
    std::vector<RoundMetrics> metrics;
    bool diverged = false;
    std::string note;
};

struct CellResult {
    std::string key;  // "axis=value;axis=value"
    std::vector<std::string> axis_values;
    CellStatus status = CellStatus::ok;
    std::string note;
    std::vector<SeedOutcome> seeds;

    // final test accuracy per seed; empty optional for an empty curve
    std::vector<std::optional<double>> finals() const {
        std::vector<std::optional<double>> out;
        for (const auto& s : seeds)
            out.push_back(s.metrics.empty() ? std::nullopt : std::optional<double>(s.metrics.back().test_accuracy));
        return out;
    }

    std::optional<double> median_final() const {
        std::vector<double> v;
        for (auto f : finals())
            if (f) v.push_back(*f);
        if (v.empty() || status != CellStatus::ok) return std::nullopt;
        return verify::detail::median(v);
    }
};

struct SweepReport {
    std::vector<std::string> axes;
    std::vector<CellResult> cells;

    bool any_diverged() const {
        return std::any_of(cells.begin(), cells.end(), [](const CellResult& c) { return c.status == CellStatus::diverged; });
    }
    const CellResult* find(const std::string& key) const {
        for (const auto& c : cells)
            if (c.key == key) return &c;
        return nullptr;
    }
};

namespace detail {

struct Cell {
    std::string key;
    std::vector<std::string> axis_values;
    std::optional<ExperimentSpec> spec;
    std::string error;
};

inline std::vector<Cell> expand(const ExperimentSpec& s) {
    std::vector<Cell> cells;
    std::vector<std::size_t> idx(s.sweep.size(), 0);
    for (;;) {
        Cell c;
        ExperimentSpec cur = s;
        cur.sweep.clear();
        try {
            for (std::size_t a = 0; a < s.sweep.size(); ++a)
                cur = with_axis(cur, s.sweep[a].name, s.sweep[a].values[idx[a]]);
            c.spec = cur;
        } catch (const ConfigError& e) {
            c.error = e.what();
        }
        for (std::size_t a = 0; a < s.sweep.size(); ++a) {
            std::string v = value_text(s.sweep[a].values[idx[a]]);
            c.axis_values.push_back(v);
            c.key += (a ? ";" : "") + s.sweep[a].name + "=" + v;
        }
        cells.push_back(std::move(c));
        // odometer, last axis fastest
        std::size_t a = s.sweep.size();
        while (a > 0) {
            --a;
            if (++idx[a] < s.sweep[a].values.size()) break;
            idx[a] = 0;
            if (a == 0) return cells;
        }
        if (s.sweep.empty()) return cells;
    }
}

inline std::string summary_csv(const SweepReport& r, double target) {
    std::ostringstream os;
    os << "cell";
    for (const auto& a : r.axes) os << "," << a;
    os << ",status,seeds,median_final_accuracy,mean_final_accuracy,median_rounds_to_target,final_accuracies,note\n";
    for (std::size_t i = 0; i < r.cells.size(); ++i) {
        const auto& c = r.cells[i];
        os << (c.key.empty() ? "base" : c.key);
        for (const auto& v : c.axis_values) os << "," << v;
        os << "," << (c.status == CellStatus::ok ? "ok" : c.status == CellStatus::invalid ? "invalid" : "diverged");
        os << "," << c.seeds.size();
        std::vector<double> fin, rtt;
        std::string list;
        for (const auto& s : c.seeds) {
            if (!list.empty()) list += ";";
            if (s.metrics.empty()) {
                list += "NA";
                continue;
            }
            fin.push_back(s.metrics.back().test_accuracy);
            list += fixed(s.metrics.back().test_accuracy);
            auto hit = rounds_to_target(s.metrics, target);
            rtt.push_back(hit ? static_cast<double>(*hit) : std::numeric_limits<double>::infinity());
        }
        auto m = c.median_final();
        os << "," << (m ? fixed(*m) : "NA");
        os << "," << (fin.empty() || c.status != CellStatus::ok
                          ? "NA"
                          : fixed(std::accumulate(fin.begin(), fin.end(), 0.0) / static_cast<double>(fin.size())));
        double mr = verify::detail::median(rtt);
        os << "," << (rtt.empty() || c.status != CellStatus::ok ? "NA" : std::isinf(mr) ? "never" : fixed(mr, 1));
        os << "," << (list.empty() ? "NA" : list);
        std::string note = c.note;
        std::replace(note.begin(), note.end(), ',', ';');
        std::replace(note.begin(), note.end(), '\n', ' ');
        os << "," << note << "\n";
    }
    return os.str();
}

}  // namespace detail

// Runs every (cell, seed) job; per-job files are written by the job itself,
// the summary afterwards in cell order. With a single job the thread budget
// goes to the clients of that run instead.
inline SweepReport execute(const ExperimentSpec& spec, std::size_t threads, const fs::path& out, bool per_cell_dirs,
                           bool save_models = false) {
    auto cells = detail::expand(spec);
    SweepReport report;
    for (const auto& a : spec.sweep) report.axes.push_back(a.name);

    struct Job {
        std::size_t cell;
        std::uint64_t seed;
    };
    std::vector<Job> jobs;
    report.cells.resize(cells.size());
    for (std::size_t c = 0; c < cells.size(); ++c) {
        auto& rc = report.cells[c];
        rc.key = cells[c].key;
        rc.axis_values = cells[c].axis_values;
        if (!cells[c].spec) {
            rc.status = CellStatus::invalid;
            rc.note = cells[c].error;
            continue;
        }
        rc.seeds.resize(spec.seeds.size());
        for (std::size_t s = 0; s < spec.seeds.size(); ++s) {
            rc.seeds[s].seed = spec.seeds[s];
            jobs.push_back({c, spec.seeds[s]});
        }
    }
    auto dir_of = [&](std::size_t c) {
        return per_cell_dirs ? out / detail::cell_dir_name(c, cells[c].key) : out;
    };
    for (std::size_t c = 0; c < cells.size(); ++c)
        if (cells[c].spec) {
            ExperimentSpec rec = *cells[c].spec;
            rec.out = out.string();
            detail::write_file(dir_of(c) / "config.json", dump_config(rec));
        }

    const std::size_t inner = jobs.size() == 1 ? threads : 1;
    std::vector<std::string> job_errors(jobs.size());
    parallel_for(jobs.size(), jobs.size() == 1 ? 1 : threads, [&](std::size_t j) {
        const auto& job = jobs[j];
        const ExperimentSpec& cs = *cells[job.cell].spec;
        std::size_t slot = static_cast<std::size_t>(
            std::find(spec.seeds.begin(), spec.seeds.end(), job.seed) - spec.seeds.begin());
        SeedOutcome& outcome = report.cells[job.cell].seeds[slot];
        std::ostringstream lines;
        try {
            PreparedData data = prepare_data(cs, job.seed);
            FedConfig cfg = fed_config(cs, job.seed);
            auto result = run_federation(cfg, data.shards, data.test, inner, [&](const RoundMetrics& m) {
                outcome.metrics.push_back(m);
                write_metrics_line(lines, m);
            });
            if (save_models) {
                std::ostringstream ms;
                save_model(ms, result.model);
                detail::write_file(dir_of(job.cell) / ("model_seed_" + std::to_string(job.seed) + ".txt"), ms.str());
            }
        } catch (const DivergenceError& e) {
            outcome.diverged = true;
            outcome.note = e.what();
        } catch (const ConfigError& e) {
            job_errors[j] = e.what();
        } catch (const PartitionError& e) {
            job_errors[j] = std::string("partition: ") + e.what();
        } catch (const std::invalid_argument& e) {
            job_errors[j] = e.what();
        }
        detail::write_file(dir_of(job.cell) / ("seed_" + std::to_string(job.seed) + ".jsonl"), lines.str());
    });

    for (std::size_t j = 0; j < jobs.size(); ++j) {
        auto& rc = report.cells[jobs[j].cell];
        if (!job_errors[j].empty() && rc.status == CellStatus::ok) {
            rc.status = CellStatus::invalid;
            rc.note = job_errors[j];
        }
    }
    for (auto& rc : report.cells) {
        for (const auto& s : rc.seeds)
            if (s.diverged && rc.status == CellStatus::ok) {
                rc.status = CellStatus::diverged;
                rc.note = s.note;
            }
    }
    detail::write_file(out / "summary.csv", detail::summary_csv(report, spec.target_accuracy));
    return report;
}

// ---------------------------------------------------------------- commands

inline SweepReport cmd_run(const ExperimentSpec& spec, std::size_t threads) {
    if (!spec.sweep.empty()) throw ConfigError("sweep", "sweep axes are only valid for the sweep subcommand");
    return execute(spec, threads, spec.out, false, true);
}

inline SweepReport cmd_sweep(const ExperimentSpec& spec, std::size_t threads) {
    if (spec.sweep.empty()) throw ConfigError("sweep", "the sweep subcommand needs at least one axis");
    return execute(spec, threads, spec.out, true);
}

// Partition of the first seed: datasets, shard index lists and histograms.
inline std::vector<ClientShard> cmd_partition(const ExperimentSpec& spec) {
    if (!spec.sweep.empty()) throw ConfigError("sweep", "sweep axes are only valid for the sweep subcommand");
    const std::uint64_t seed = spec.seeds.front();
    PreparedData data = prepare_data(spec, seed);
    const fs::path out = spec.out;
    std::ostringstream train, test, manifest, hist;
    save_dataset(train, data.train);
    save_dataset(test, data.test);
    manifest << "client_id,size,indices\n";
    hist << "client_id,size";
    for (std::size_t c = 0; c < data.train.classes; ++c) hist << ",class_" << c;
    hist << ",label_entropy\n";
    for (const auto& s : data.shards) {
        manifest << s.client_id << "," << s.size() << ",";
        for (std::size_t i = 0; i < s.indices.size(); ++i) manifest << (i ? " " : "") << s.indices[i];
        manifest << "\n";
        hist << s.client_id << "," << s.size();
        for (auto n : class_counts(s.data)) hist << "," << n;
        hist << "," << detail::fixed(label_entropy(s.data)) << "\n";
    }
    detail::write_file(out / "train.csv", train.str());
    detail::write_file(out / "test.csv", test.str());
    detail::write_file(out / "manifest.csv", manifest.str());
    detail::write_file(out / "histogram.csv", hist.str());
    return data.shards;
}

// All property suites; the degeneracy suite runs on the spec's own recipe.
inline std::vector<verify::PropertyResult> cmd_verify(const ExperimentSpec& spec, std::size_t threads) {
    std::vector<verify::PropertyResult> out;
    out.push_back(verify::gradient_fidelity());
    out.push_back(verify::taylor_order());
    out.push_back(verify::linearity_identity());
    PreparedData data = prepare_data(spec, spec.seeds.front());
    out.push_back(verify::degeneracy(fed_config(spec, spec.seeds.front()), data.shards, data.test, threads));
    out.push_back(verify::mean_preservation());
    out.push_back(verify::comm_cost_formulas());
    return out;
}

inline void print_report(std::ostream& os, const std::vector<verify::PropertyResult>& results) {
    for (const auto& r : results)
        os << (r.passed ? "PASS " : "FAIL ") << r.name << "  " << r.detail << "  [" << detail::fixed(r.seconds, 2)
           << " s]\n";
}

}  // namespace fedmix::harness
