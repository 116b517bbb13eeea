// Text formats: model checkpoints, dataset CSV, averaged-data tables and
// per-round metrics records.
#pragma once

#include <charconv>
#include <cstddef>
#include <iomanip>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedmix/data.hpp"
#include "fedmix/errors.hpp"
#include "fedmix/federation.hpp"
#include "fedmix/mashing.hpp"
#include "fedmix/model.hpp"

namespace fedmix {

struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

namespace detail {

inline std::string format_double(double v) {
    std::ostringstream os;
    os << std::setprecision(std::numeric_limits<double>::max_digits10) << v;
    return os.str();
}

inline std::vector<std::string> split(const std::string& line, char sep) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream is(line);
    while (std::getline(is, cur, sep)) out.push_back(cur);
    if (!line.empty() && line.back() == sep) out.emplace_back();
    return out;
}

inline double parse_double(const std::string& s) {
    std::size_t pos = 0;
    double v = 0.0;
    try {
        v = std::stod(s, &pos);
    } catch (const std::exception&) {
        throw FormatError("not a number: '" + s + "'");
    }
    while (pos < s.size() && std::isspace(static_cast<unsigned char>(s[pos]))) ++pos;
    if (pos != s.size()) throw FormatError("trailing characters in number: '" + s + "'");
    return v;
}

inline std::size_t parse_count(const std::string& s) {
    std::size_t v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) throw FormatError("not a count: '" + s + "'");
    return v;
}

}  // namespace detail

// Checkpoint layout:
//   fedmix-model 1
//   layers <L>
//   layer <out> <in>
//   <out*in weights, row-major>
//   <out biases>
//   ... (one block per layer)
inline void save_model(std::ostream& os, const Model& m) {
    os << "fedmix-model 1\n";
    os << "layers " << m.layers.size() << "\n";
    for (const auto& l : m.layers) {
        os << "layer " << l.out() << " " << l.in() << "\n";
        for (std::size_t i = 0; i < l.weight.size(); ++i)
            os << (i ? " " : "") << detail::format_double(l.weight[i]);
        os << "\n";
        for (std::size_t i = 0; i < l.bias.size(); ++i) os << (i ? " " : "") << detail::format_double(l.bias[i]);
        os << "\n";
    }
}

inline Model load_model(std::istream& is) {
    std::string tag;
    int version = 0;
    if (!(is >> tag >> version) || tag != "fedmix-model" || version != 1) throw FormatError("not a fedmix-model v1 file");
    std::size_t count = 0;
    if (!(is >> tag >> count) || tag != "layers") throw FormatError("missing layer count");
    Model m;
    for (std::size_t l = 0; l < count; ++l) {
        std::size_t out = 0, in = 0;
        if (!(is >> tag >> out >> in) || tag != "layer") throw FormatError("bad layer header");
        DenseLayer layer{Tensor::matrix(out, in), Tensor({out})};
        for (auto& v : layer.weight.data())
            if (!(is >> v)) throw FormatError("truncated weights");
        for (auto& v : layer.bias.data())
            if (!(is >> v)) throw FormatError("truncated biases");
        m.layers.push_back(std::move(layer));
    }
    validate_chain(m);
    return m;
}

// Dataset CSV: header "d_i,C", then one row per sample: features, class index.
inline void save_dataset(std::ostream& os, const Dataset& ds) {
    os << ds.dim() << "," << ds.classes << "\n";
    for (std::size_t i = 0; i < ds.size(); ++i) {
        for (std::size_t k = 0; k < ds.dim(); ++k) os << detail::format_double(ds.X(i, k)) << ",";
        os << ds.label(i) << "\n";
    }
}

inline Dataset load_dataset(std::istream& is) {
    std::string line;
    if (!std::getline(is, line)) throw FormatError("empty dataset file");
    auto head = detail::split(line, ',');
    if (head.size() != 2) throw FormatError("dataset header must be 'd_i,C'");
    const std::size_t d = detail::parse_count(head[0]), C = detail::parse_count(head[1]);
    std::vector<double> xs;
    std::vector<std::size_t> labels;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        auto cells = detail::split(line, ',');
        if (cells.size() != d + 1)
            throw FormatError("row " + std::to_string(labels.size() + 1) + " has " + std::to_string(cells.size()) +
                              " cells, expected " + std::to_string(d + 1));
        for (std::size_t k = 0; k < d; ++k) xs.push_back(detail::parse_double(cells[k]));
        labels.push_back(detail::parse_count(cells[d]));
    }
    if (labels.empty()) throw FormatError("dataset has no rows");
    return make_dataset(Tensor({labels.size(), d}, std::move(xs)), labels, C);
}

// Averaged-data CSV: header, then source_count, x_bar..., y_bar... per entry.
inline void save_mash(std::ostream& os, const GlobalMash& g, std::size_t input_dim, std::size_t classes) {
    os << "source_count";
    for (std::size_t k = 0; k < input_dim; ++k) os << ",x" << k;
    for (std::size_t c = 0; c < classes; ++c) os << ",y" << c;
    os << "\n";
    for (const auto& e : g.entries) {
        os << e.source_count;
        for (double v : e.x_bar) os << "," << detail::format_double(v);
        for (double v : e.y_bar) os << "," << detail::format_double(v);
        os << "\n";
    }
}

inline GlobalMash load_mash(std::istream& is) {
    std::string line;
    if (!std::getline(is, line)) throw FormatError("empty mash file");
    auto head = detail::split(line, ',');
    std::size_t d = 0, C = 0;
    for (std::size_t i = 1; i < head.size(); ++i) (head[i].starts_with("x") ? d : C)++;
    GlobalMash g;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        auto cells = detail::split(line, ',');
        if (cells.size() != 1 + d + C) throw FormatError("mash row width mismatch");
        MashedEntry e;
        e.source_count = detail::parse_count(cells[0]);
        for (std::size_t k = 0; k < d; ++k) e.x_bar.push_back(detail::parse_double(cells[1 + k]));
        for (std::size_t c = 0; c < C; ++c) e.y_bar.push_back(detail::parse_double(cells[1 + d + c]));
        e.batch = g.entries.size();
        g.entries.push_back(std::move(e));
    }
    return g;
}

// One metrics record; written as a single JSON line.
inline nlohmann::ordered_json to_json(const RoundMetrics& m) {
    return {{"round", m.round},
            {"test_accuracy", m.test_accuracy},
            {"test_loss", m.test_loss},
            {"train_loss", m.train_loss},
            {"l1", m.terms.l1},
            {"l2", m.terms.l2},
            {"l3", m.terms.l3},
            {"fallback_batches", m.fallback_batches},
            {"param_cost", m.param_cost},
            {"mash_cost", m.mash_cost}};
}

inline RoundMetrics metrics_from_json(const nlohmann::json& j) {
    RoundMetrics m;
    m.round = j.at("round").get<std::size_t>();
    m.test_accuracy = j.at("test_accuracy").get<double>();
    m.test_loss = j.at("test_loss").get<double>();
    m.train_loss = j.at("train_loss").get<double>();
    m.terms = {j.at("l1").get<double>(), j.at("l2").get<double>(), j.at("l3").get<double>()};
    m.fallback_batches = j.at("fallback_batches").get<std::size_t>();
    m.param_cost = j.at("param_cost").get<double>();
    m.mash_cost = j.at("mash_cost").get<double>();
    return m;
}

inline void write_metrics_line(std::ostream& os, const RoundMetrics& m) { os << to_json(m).dump() << "\n"; }

}  // namespace fedmix
