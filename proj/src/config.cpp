#include "config.hpp"

#include <yaml-cpp/yaml.h>

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <memory>
#include <set>
#include <sstream>

namespace rfs::cli {

std::string to_string(SweepAxis a) {
    switch (a) {
        case SweepAxis::Samples: return "samples";
        case SweepAxis::Width: return "width";
        case SweepAxis::Ridge: return "ridge";
        case SweepAxis::FeatureNoise: return "feature_noise_var";
    }
    return "?";
}

namespace {

std::string located(const std::string& source, const YAML::Mark& mark, const std::string& message) {
    if (mark.is_null()) return source + ": " + message;
    return source + ":" + std::to_string(mark.line + 1) + ":" + std::to_string(mark.column + 1) + ": " + message;
}

// Shortest round-trip text, with YAML's spelling of infinity.
YAML::Node number_node(double v) {
    if (std::isinf(v)) return YAML::Node(v > 0 ? ".inf" : "-.inf");
    char buf[32];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return YAML::Node(std::string(buf, res.ptr));
}

YAML::Node number_node(const std::vector<double>& v) {
    YAML::Node seq(YAML::NodeType::Sequence);
    for (double x : v) seq.push_back(number_node(x));
    return seq;
}

// A mapping being read against a schema. Every key read is echoed into `out`
// with the value actually used; keys never read are rejected by finish().
class Section {
public:
    Section(YAML::Node in, YAML::Node out, const std::string& source, std::string path)
        : in_(std::move(in)), out_(std::move(out)), source_(source), path_(std::move(path)) {
        if (in_.IsDefined() && !in_.IsNull() && !in_.IsMap()) fail(in_, "'" + label() + "' must be a mapping");
    }

    [[noreturn]] void fail(const YAML::Node& at, const std::string& message) const {
        throw ConfigError(located(source_, at.Mark(), message));
    }
    [[noreturn]] void fail_key(const std::string& key, const std::string& message) const {
        const YAML::Node& n = lookup(key);
        fail(n.IsDefined() ? n : in_, qualified(key) + ": " + message);
    }

    bool has(const std::string& key) const {
        const YAML::Node& n = lookup(key);
        return n.IsDefined() && !n.IsNull();
    }

    // Converts library validation errors into errors anchored at `key`.
    template <class F>
    auto guarded(const std::string& key, F&& f) const {
        try {
            return f();
        } catch (const ConfigError& e) {
            fail_key(key, e.what());
        } catch (const DomainError& e) {
            fail_key(key, e.what());
        }
    }

    double number(const std::string& key, std::optional<double> fallback = std::nullopt) {
        consumed_.insert(key);
        double v;
        if (!has(key)) {
            if (!fallback) fail(in_, "missing required key '" + qualified(key) + "'");
            v = *fallback;
        } else {
            v = to_number(lookup(key), key);
        }
        out_[key] = number_node(v);
        return v;
    }

    double positive(const std::string& key, std::optional<double> fallback = std::nullopt) {
        double v = number(key, fallback);
        if (!(v > 0)) fail_key(key, "must be > 0");
        return v;
    }

    double non_negative(const std::string& key, std::optional<double> fallback = std::nullopt) {
        double v = number(key, fallback);
        if (!(v >= 0)) fail_key(key, "must be >= 0");
        return v;
    }

    std::size_t count(const std::string& key, std::optional<std::size_t> fallback = std::nullopt,
                      std::size_t minimum = 1) {
        consumed_.insert(key);
        std::size_t v;
        if (!has(key)) {
            if (!fallback) fail(in_, "missing required key '" + qualified(key) + "'");
            v = *fallback;
        } else {
            v = to_count(lookup(key), key, minimum);
        }
        out_[key] = v;
        return v;
    }

    std::optional<std::size_t> optional_count(const std::string& key) {
        consumed_.insert(key);
        if (!has(key)) {
            out_[key] = YAML::Node(YAML::NodeType::Null);
            return std::nullopt;
        }
        auto v = to_count(lookup(key), key, 1);
        out_[key] = v;
        return v;
    }

    bool flag(const std::string& key, bool fallback) {
        consumed_.insert(key);
        bool v = fallback;
        if (has(key)) {
            try {
                v = lookup(key).as<bool>();
            } catch (const YAML::Exception&) {
                fail_key(key, "expected true or false");
            }
        }
        out_[key] = v;
        return v;
    }

    std::uint64_t unsigned_integer(const std::string& key, std::uint64_t fallback) {
        consumed_.insert(key);
        std::uint64_t v = fallback;
        if (has(key)) {
            try {
                v = lookup(key).as<std::uint64_t>();
            } catch (const YAML::Exception&) {
                fail_key(key, "expected a non-negative integer");
            }
        }
        out_[key] = v;
        return v;
    }

    std::string choice(const std::string& key, std::optional<std::string> fallback,
                       std::initializer_list<const char*> allowed) {
        consumed_.insert(key);
        std::string v;
        if (!has(key)) {
            if (!fallback) fail(in_, "missing required key '" + qualified(key) + "'");
            v = *fallback;
        } else {
            const YAML::Node& n = lookup(key);
            if (!n.IsScalar()) fail_key(key, "expected a string");
            v = n.Scalar();
        }
        bool known = false;
        std::string options;
        for (const char* a : allowed) {
            known |= v == a;
            options += (options.empty() ? "" : ", ") + std::string(a);
        }
        if (!known) fail_key(key, "'" + v + "' is not one of: " + options);
        out_[key] = v;
        return v;
    }

    std::vector<double> numbers(const std::string& key) {
        consumed_.insert(key);
        const YAML::Node& n = lookup(key);
        if (!n.IsDefined() || n.IsNull()) fail(in_, "missing required key '" + qualified(key) + "'");
        if (!n.IsSequence()) fail_key(key, "expected a list of numbers");
        std::vector<double> v;
        for (const auto& item : n) v.push_back(to_number(item, key));
        out_[key] = number_node(v);
        return v;
    }

    std::vector<std::size_t> counts(const std::string& key) {
        consumed_.insert(key);
        const YAML::Node& n = lookup(key);
        if (!n.IsDefined() || n.IsNull()) fail(in_, "missing required key '" + qualified(key) + "'");
        if (!n.IsSequence()) fail_key(key, "expected a list of positive integers");
        std::vector<std::size_t> v;
        for (const auto& item : n) v.push_back(to_count(item, key, 1));
        out_[key] = v;
        return v;
    }

    // Either an explicit list or {from, to, count, spacing: linear|log}; echoed expanded.
    std::vector<double> grid(const std::string& key) {
        consumed_.insert(key);
        const YAML::Node& n = lookup(key);
        if (!n.IsDefined() || n.IsNull()) fail(in_, "missing required key '" + qualified(key) + "'");
        if (n.IsSequence()) return numbers(key);
        YAML::Node scratch(YAML::NodeType::Map);
        Section g(n, scratch, source_, qualified(key));
        double from = g.number("from"), to = g.number("to");
        std::size_t points = g.count("count", std::nullopt, 0);
        std::string spacing = g.choice("spacing", "linear", {"linear", "log"});
        g.finish();
        std::vector<double> v;
        if (spacing == "log") {
            if (!(from > 0 && to > 0)) fail_key(key, "log spacing needs positive endpoints");
            if (points > 0) v = log_grid(from, to, points);
        } else {
            for (std::size_t i = 0; i < points; ++i)
                v.push_back(points == 1 ? from : from + (to - from) * double(i) / double(points - 1));
        }
        out_[key] = number_node(v);
        return v;
    }

    Section child(const std::string& key) {
        consumed_.insert(key);
        const YAML::Node& n = lookup(key);
        if (!n.IsDefined() || n.IsNull()) fail(in_, "missing required key '" + qualified(key) + "'");
        out_[key] = YAML::Node(YAML::NodeType::Map);
        return Section(n, out_[key], source_, qualified(key));
    }

    // Missing sections read as empty mappings so their defaults get echoed.
    Section child_or_empty(const std::string& key) {
        if (has(key)) return child(key);
        consumed_.insert(key);
        out_[key] = YAML::Node(YAML::NodeType::Map);
        return Section(YAML::Node(YAML::NodeType::Map), out_[key], source_, qualified(key));
    }

    std::vector<Section> items(const std::string& key) {
        consumed_.insert(key);
        std::vector<Section> v;
        out_[key] = YAML::Node(YAML::NodeType::Sequence);
        if (!has(key)) return v;
        const YAML::Node& n = lookup(key);
        if (!n.IsSequence()) fail_key(key, "expected a list");
        YAML::Node seq = out_[key];
        for (std::size_t i = 0; i < n.size(); ++i) {
            YAML::Node slot(YAML::NodeType::Map);
            seq.push_back(slot);
            v.emplace_back(n[i], seq[i], source_, qualified(key) + "[" + std::to_string(i) + "]");
        }
        return v;
    }

    void finish() const {
        if (!in_.IsMap()) return;
        for (const auto& kv : in_) {
            auto key = kv.first.as<std::string>();
            if (!consumed_.count(key)) fail(kv.first, "unknown key '" + qualified(key) + "'");
        }
    }

    template <class T>
    void record(const std::string& key, const T& value) {
        consumed_.insert(key);
        if constexpr (std::is_floating_point_v<T>)
            out_[key] = number_node(value);
        else
            out_[key] = value;
    }

private:
    // operator[] on a const node does not insert.
    YAML::Node lookup(const std::string& key) const { return in_.IsMap() ? in_[key] : YAML::Node(); }

    std::string label() const { return path_.empty() ? "<root>" : path_; }
    std::string qualified(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

    double to_number(const YAML::Node& n, const std::string& key) const {
        if (!n.IsScalar()) fail(n, qualified(key) + ": expected a number");
        try {
            return n.as<double>();
        } catch (const YAML::Exception&) {
            fail(n, qualified(key) + ": expected a number, got '" + n.Scalar() + "'");
        }
    }

    std::size_t to_count(const YAML::Node& n, const std::string& key, std::size_t minimum) const {
        double v = to_number(n, key);
        if (!(v >= double(minimum)) || v != std::floor(v) || v > 9e15)
            fail(n, qualified(key) + ": expected an integer >= " + std::to_string(minimum));
        return std::size_t(v);
    }

    const YAML::Node in_;
    YAML::Node out_;
    const std::string& source_;
    std::string path_;
    std::set<std::string> consumed_;
};

Spectrum read_spectrum(Section s) {
    auto kind = s.choice("kind", std::nullopt, {"isotropic", "power_law", "discrete", "plateaus"});
    Spectrum out = Spectrum::isotropic(1);
    if (kind == "isotropic") {
        auto dim = s.count("dim");
        out = Spectrum::isotropic(dim);
    } else if (kind == "power_law") {
        double alpha = s.number("alpha");
        auto dim = s.optional_count("dim");
        double scale = s.number("scale", 1.0);
        out = s.guarded("alpha", [&] { return Spectrum::power_law(alpha, dim, scale); });
    } else {
        auto values = s.numbers("values");
        std::vector<std::size_t> mults(values.size(), 1);
        if (s.has("multiplicities"))
            mults = s.counts("multiplicities");
        else
            s.record("multiplicities", mults);
        out = s.guarded("values", [&] {
            return kind == "discrete" ? Spectrum::discrete(values, mults) : Spectrum::plateaus(values, mults);
        });
    }
    s.finish();
    return out;
}

Teacher read_teacher(Section s) {
    auto kind = s.choice("kind", "isotropic_average", {"isotropic_average", "source_power_law", "explicit"});
    Teacher t = IsotropicAverageTeacher{};
    if (kind == "isotropic_average")
        t = IsotropicAverageTeacher{s.positive("norm", 1.0)};
    else if (kind == "source_power_law")
        t = SourcePowerLawTeacher{s.positive("r")};
    else
        t = ExplicitTeacher{s.numbers("coefficients")};
    s.finish();
    return t;
}

FeatureLayer read_layer(Section s) {
    auto width = s.count("width");
    auto kind = s.choice("kind", "white", {"white", "structured", "projection"});
    FeatureLayer layer = FeatureLayer::white(width);
    if (kind == "structured") {
        auto spectrum = read_spectrum(s.child("spectrum"));
        if (spectrum.finite() && spectrum.dimension() != width)
            s.fail_key("spectrum", "structured layer spectrum dimension must equal the layer width");
        layer = FeatureLayer::structured(width, std::move(spectrum));
    } else if (kind == "projection") {
        layer = FeatureLayer::projection(width);
    }
    s.finish();
    return layer;
}

ModelSpec read_model(Section s) {
    ModelSpec m{read_spectrum(s.child("spectrum")), read_teacher(s.child_or_empty("teacher")), {}};
    for (auto& item : s.items("layers")) m.layers.push_back(read_layer(std::move(item)));
    m.samples = s.count("samples");
    m.ridge = s.non_negative("ridge", 0.0);
    m.label_noise_var = s.non_negative("label_noise_var", 0.0);
    m.feature_noise_var = s.non_negative("feature_noise_var", 0.0);
    s.guarded("layers", [&] {
        detail::validate_layers(m);
        return 0;
    });
    if (m.feature_noise_var > 0 && (m.layers.size() != 1 || m.layers[0].kind != LayerKind::GaussianWhite))
        s.fail_key("feature_noise_var", "feature noise needs exactly one white layer");
    s.finish();
    return m;
}

Sweep read_sweep(Section s, const std::optional<ModelSpec>& model) {
    Sweep sw;
    auto axis = s.choice("axis", std::nullopt, {"samples", "width", "ridge", "feature_noise_var"});
    if (axis == "samples") sw.axis = SweepAxis::Samples;
    if (axis == "width") sw.axis = SweepAxis::Width;
    if (axis == "ridge") sw.axis = SweepAxis::Ridge;
    if (axis == "feature_noise_var") sw.axis = SweepAxis::FeatureNoise;
    if (sw.axis == SweepAxis::Width) {
        sw.layer = s.count("layer", 0, 0);
        if (model && sw.layer >= model->layers.size()) s.fail_key("layer", "no such feature layer in the model");
    } else if (s.has("layer")) {
        s.fail_key("layer", "only width sweeps take a layer index");
    }
    sw.values = s.grid("values");
    for (double v : sw.values) {
        bool integral = sw.axis == SweepAxis::Samples || sw.axis == SweepAxis::Width;
        if (integral && !(v >= 1 && v == std::floor(v)))
            s.fail_key("values", "sample counts and widths must be positive integers");
        if (!(v >= 0)) s.fail_key("values", "sweep values must be >= 0");
    }
    if (sw.axis == SweepAxis::FeatureNoise && model &&
        (model->layers.size() != 1 || model->layers[0].kind != LayerKind::GaussianWhite))
        s.fail_key("axis", "feature noise sweeps need exactly one white layer");
    s.finish();
    return sw;
}

EnsembleTransform read_ensemble(Section s) {
    auto kind = s.choice("kind", std::nullopt,
                         {"white_wishart", "wishart_gram", "square_projection", "shifted_wishart", "deep_white_gram",
                          "deep_white_wishart", "deep_structured_gram", "structured_wishart", "correlated_samples",
                          "fully_structured", "wigner", "population", "rectangular_projection"});
    EnsembleTransform e{WhiteWishart{1}};
    if (kind == "white_wishart") {
        e.kind = WhiteWishart{s.positive("q")};
    } else if (kind == "wishart_gram") {
        e.kind = WishartGram{s.positive("q")};
    } else if (kind == "square_projection") {
        double q = s.positive("q");
        if (q > 1) s.fail_key("q", "a projection needs q <= 1");
        e.kind = SquareProjection{q};
    } else if (kind == "shifted_wishart") {
        double q = s.positive("q");
        e.kind = ShiftedWishart{q, s.number("shift")};
    } else if (kind == "deep_white_gram") {
        auto widths = s.counts("widths");
        e.kind = DeepWhiteGram{widths, s.count("input_dim")};
    } else if (kind == "deep_white_wishart") {
        auto widths = s.counts("widths");
        if (widths.size() < 2) s.fail_key("widths", "needs the input width and at least one layer width");
        e.kind = DeepWhiteWishart{widths};
    } else if (kind == "deep_structured_gram") {
        std::vector<Spectrum> layers;
        for (auto& item : s.items("layers")) layers.push_back(read_spectrum(std::move(item)));
        auto widths = s.counts("widths");
        if (widths.size() != layers.size()) s.fail_key("widths", "needs one width per layer spectrum");
        e.kind = DeepStructuredGram{std::move(layers), widths, s.count("input_dim")};
    } else if (kind == "structured_wishart") {
        auto pop = read_spectrum(s.child("population"));
        e.kind = StructuredWishart{std::move(pop), s.positive("q")};
    } else if (kind == "correlated_samples") {
        auto ker = read_spectrum(s.child("kernel"));
        e.kind = CorrelatedSamples{std::move(ker), s.positive("q")};
    } else if (kind == "fully_structured") {
        auto pop = read_spectrum(s.child("population"));
        auto ker = read_spectrum(s.child("kernel"));
        e.kind = FullyStructured{std::move(pop), std::move(ker), s.positive("q")};
    } else if (kind == "wigner") {
        e.kind = Wigner{s.positive("sigma2")};
    } else if (kind == "population") {
        e.kind = Population{read_spectrum(s.child("spectrum"))};
    } else {
        auto inner = std::make_shared<const EnsembleTransform>(read_ensemble(s.child("inner")));
        double q = s.positive("q");
        if (q > 1) s.fail_key("q", "a projection needs q <= 1");
        e.kind = RectangularProjectionOf{std::move(inner), q};
    }
    s.finish();
    return e;
}

DensitySettings read_density(Section s) {
    DensitySettings d{read_ensemble(s.child("ensemble")), s.grid("grid"), std::nullopt, std::nullopt};
    if (s.has("epsilon")) d.epsilon = s.positive("epsilon");
    if (s.has("empirical_size")) d.empirical_size = s.count("empirical_size", std::nullopt, 0);
    s.finish();
    return d;
}

ScalingSettings read_scaling(Section s) {
    ScalingSettings out;
    auto& in = out.inputs;
    in.alpha = s.positive("alpha");
    in.r = s.positive("r", 1.0);
    in.l = s.non_negative("ridge_exponent", kRidgeless);
    in.q_exp = s.positive("width_exponent", 1.0);
    if (s.has("weight_alpha")) {
        double aw = s.positive("weight_alpha");
        in.c = weight_structure_exponent(aw);
        s.record("weight_exponent", in.c);
    } else {
        in.c = s.number("weight_exponent", 1.0);
    }
    in.sigma_eps2 = s.non_negative("label_noise_var", 0.0);
    out.noisy = s.flag("noisy", in.sigma_eps2 > 0);
    s.guarded("alpha", [&] {
        in.validate();
        return 0;
    });
    if (s.has("point")) {
        auto p = s.child("point");
        auto axis = p.choice("axis", std::nullopt, {"n_bottlenecked", "p_overparameterized"});
        RegimePoint rp{axis == "n_bottlenecked" ? RegimeAxis::NBottlenecked : RegimeAxis::POverparameterized,
                       {p.positive("samples"), p.positive("width")},
                       p.positive("margin", 10.0)};
        bool ok = rp.axis == RegimeAxis::NBottlenecked ? rp.at.width < rp.at.samples : rp.at.samples < rp.at.width;
        if (!ok) p.fail_key("axis", "samples and width contradict the chosen axis");
        p.finish();
        out.point = rp;
    }
    if (s.has("crossover_width")) out.crossover_width = s.positive("crossover_width");
    if (s.has("fit")) {
        auto f = s.child("fit");
        out.fit_grid = f.grid("samples");
        for (double p : out.fit_grid)
            if (!(p > 0)) f.fail_key("samples", "fit grid must be positive");
        if (out.fit_grid.size() < 2) f.fail_key("samples", "fit grid needs at least two points");
        out.fit_middle = f.choice("window", "middle", {"middle", "all"}) == "middle";
        f.finish();
    }
    s.finish();
    return out;
}

PhaseSettings read_phase(Section s) {
    PhaseSettings p;
    p.alpha = s.positive("alpha");
    p.r = s.positive("r", 1.0);
    p.c = s.number("weight_exponent", 1.0);
    if (!(p.c >= 0 && p.c <= 1)) s.fail_key("weight_exponent", "must be in [0, 1]");
    p.noisy = s.flag("noisy", false);
    p.l_grid = s.grid("ridge_exponents");
    p.q_grid = s.grid("width_exponents");
    for (double l : p.l_grid)
        if (!(l >= 0)) s.fail_key("ridge_exponents", "must be >= 0");
    for (double q : p.q_grid)
        if (!(q > 0)) s.fail_key("width_exponents", "must be > 0");
    s.finish();
    return p;
}

MonteCarloSettings read_monte_carlo(Section s) {
    MonteCarloSettings mc;
    mc.data_seeds = s.count("data_seeds", mc.data_seeds);
    mc.feature_seeds = s.count("feature_seeds", mc.feature_seeds);
    mc.test_points = s.count("test_points", mc.test_points);
    mc.rotate_covariates = s.flag("rotate_covariates", false);
    mc.per_cell = s.flag("per_cell", false);
    s.finish();
    return mc;
}

}  // namespace

std::vector<double> ExperimentConfig::sweep_values() const {
    if (sweep) return sweep->values;
    if (model) return {double(model->samples)};
    return {};
}

ModelSpec ExperimentConfig::model_at(double value) const {
    if (!model) throw ConfigError("this command needs a 'model' section");
    ModelSpec m = *model;
    switch (sweep_axis()) {
        case SweepAxis::Samples: m.samples = std::size_t(value); break;
        case SweepAxis::Width: m.layers.at(sweep->layer).width = std::size_t(value); break;
        case SweepAxis::Ridge: m.ridge = value; break;
        case SweepAxis::FeatureNoise: m.feature_noise_var = value; break;
    }
    return m;
}

ExperimentConfig parse_config(const std::string& text, const std::string& source, const Overrides& overrides) {
    YAML::Node root;
    try {
        root = YAML::Load(text);
    } catch (const YAML::ParserException& e) {
        throw ConfigError(located(source, e.mark, e.msg));
    }
    if (root.IsNull()) root = YAML::Node(YAML::NodeType::Map);
    if (!root.IsMap()) throw ConfigError(located(source, root.Mark(), "configuration must be a mapping"));

    YAML::Node echo(YAML::NodeType::Map);
    Section s(root, echo, source, "");
    ExperimentConfig cfg;
    if (s.has("model")) cfg.model = read_model(s.child("model"));
    if (s.has("sweep")) cfg.sweep = read_sweep(s.child("sweep"), cfg.model);
    cfg.monte_carlo = read_monte_carlo(s.child_or_empty("monte_carlo"));
    if (s.has("density")) cfg.density = read_density(s.child("density"));
    if (s.has("scaling")) cfg.scaling = read_scaling(s.child("scaling"));
    if (s.has("phase")) cfg.phase = read_phase(s.child("phase"));

    cfg.seed = s.unsigned_integer("seed", 0);
    if (overrides.seed) s.record("seed", cfg.seed = *overrides.seed);
    cfg.threads = unsigned(s.unsigned_integer("threads", 0));
    if (overrides.threads) s.record("threads", cfg.threads = *overrides.threads);
    cfg.tolerance = s.positive("tolerance", 0.05);
    if (overrides.tolerance) {
        if (!(*overrides.tolerance > 0)) throw ConfigError("--tolerance must be > 0");
        s.record("tolerance", cfg.tolerance = *overrides.tolerance);
    }
    s.finish();

    YAML::Emitter out;
    out << echo;
    cfg.resolved_yaml = std::string(out.c_str()) + "\n";
    return cfg;
}

ExperimentConfig load_config(const std::string& path, const Overrides& overrides) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file '" + path + "'");
    std::ostringstream text;
    text << in.rdbuf();
    return parse_config(text.str(), path, overrides);
}

}  // namespace rfs::cli
