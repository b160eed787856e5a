#pragma once

// File formats: the JSON configuration, recording CSVs, the campaign
// manifest, fit results and the measurement report. Every JSON document
// carries "format" and "version" keys; readers reject unknown major versions.
// Errors name the file and line of the offending entry.

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdio>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include <json.hpp>

#include "lipol/analysis.hpp"
#include "lipol/errors.hpp"
#include "lipol/fringe_fit.hpp"
#include "lipol/synthetic_experiment.hpp"

#ifndef LIPOL_VERSION
#define LIPOL_VERSION "1.0.0"
#endif

namespace lipol::io {

using Json = nlohmann::ordered_json;
namespace fs = std::filesystem;

inline constexpr int format_major = 1;
inline constexpr const char* format_version = "1.0";

inline const char* tool_version() { return LIPOL_VERSION; }

inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::string hex64(std::uint64_t x) {
    char buf[17];
    auto [end, ec] = std::to_chars(buf, buf + 16, x, 16);
    std::string s(buf, end);
    return std::string(16 - s.size(), '0') + s;
}

/// Shortest decimal that round-trips to the same double.
inline std::string format_double(double x) {
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof buf, x);
    if (ec != std::errc{}) throw NumericalError("cannot format number");
    return std::string(buf, end);
}

//
// Files
//

inline std::string read_text_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw UsageError("cannot open '" + path.string() + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_text_file(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) {
        std::error_code ec;
        fs::create_directories(path.parent_path(), ec);
        if (ec) throw UsageError("cannot create directory '" + path.parent_path().string() + "'");
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw UsageError("cannot write '" + path.string() + "'");
    out << text;
    if (!out) throw UsageError("write failed for '" + path.string() + "'");
}

inline std::string dump(const Json& j) { return j.dump(2) + "\n"; }

//
// Line-anchored JSON reading
//

/// A document's text plus enough indexing to map a key path to a line.
class Source {
public:
    Source(std::string name, std::string text) : name_(std::move(name)), text_(std::move(text)) {
        line_starts_.push_back(0);
        for (std::size_t i = 0; i < text_.size(); ++i) {
            if (text_[i] == '\n') line_starts_.push_back(i + 1);
        }
    }

    static Source from_file(const fs::path& path) { return {path.string(), read_text_file(path)}; }

    const std::string& name() const { return name_; }
    const std::string& text() const { return text_; }

    int line_at(std::size_t offset) const {
        auto it = std::upper_bound(line_starts_.begin(), line_starts_.end(), offset);
        return static_cast<int>(it - line_starts_.begin());
    }

    /// Best-effort line of the value at `path` (object keys, or "[i]" for
    /// array elements). Falls back to the deepest component found.
    int line_of(const std::vector<std::string>& path) const {
        std::size_t pos = 0;
        for (const auto& key : path) {
            std::size_t next = std::string::npos;
            if (!key.empty() && key.front() == '[') {
                next = array_element(pos, std::stoul(key.substr(1)));
            } else {
                const std::string quoted = "\"" + key + "\"";
                for (std::size_t p = text_.find(quoted, pos); p != std::string::npos;
                     p = text_.find(quoted, p + 1)) {
                    std::size_t q = p + quoted.size();
                    while (q < text_.size() && std::isspace(static_cast<unsigned char>(text_[q]))) ++q;
                    if (q < text_.size() && text_[q] == ':') {
                        next = q + 1;
                        break;
                    }
                }
            }
            if (next == std::string::npos) break;
            pos = next;
        }
        return line_at(pos == 0 ? 0 : pos - 1);
    }

private:
    /// Position just past the first character of element `index` of the
    /// first array opening at or after pos.
    std::size_t array_element(std::size_t pos, std::size_t index) const {
        const std::size_t open = text_.find('[', pos);
        if (open == std::string::npos) return open;
        int depth = 1;
        std::size_t seen = 0;
        bool in_string = false;
        for (std::size_t i = open + 1; i < text_.size(); ++i) {
            const char ch = text_[i];
            if (in_string) {
                if (ch == '\\') ++i;
                else if (ch == '"') in_string = false;
                continue;
            }
            if (depth == 1 && seen == index && ch != ',' && ch != ']' &&
                !std::isspace(static_cast<unsigned char>(ch))) {
                return i + 1;
            }
            if (ch == '"') in_string = true;
            else if (ch == '[' || ch == '{') ++depth;
            else if ((ch == ']' || ch == '}') && --depth == 0) return std::string::npos;
            else if (ch == ',' && depth == 1) ++seen;
        }
        return std::string::npos;
    }

    std::string name_;
    std::string text_;
    std::vector<std::size_t> line_starts_;
};

inline Json parse_json(const Source& src) {
    try {
        return Json::parse(src.text());
    } catch (const nlohmann::json::parse_error& e) {
        const std::size_t at = e.byte > 0 ? e.byte - 1 : 0;
        const int line = src.line_at(at);
        std::string msg = e.what();
        if (auto p = msg.find(": "); p != std::string::npos) msg = msg.substr(p + 2);
        throw FormatError(src.name() + ":" + std::to_string(line) + ": invalid JSON: " + msg);
    }
}

inline std::string dotted(const std::vector<std::string>& path) {
    std::string s;
    for (const auto& k : path) {
        if (!k.empty() && k.front() == '[') {
            s += k;
        } else {
            if (!s.empty()) s += '.';
            s += k;
        }
    }
    return s;
}

/// Typed access to one JSON object with path-aware error messages.
/// finish() rejects keys that were never read.
class Reader {
public:
    Reader(const Json& node, const Source& src, std::vector<std::string> path = {})
        : node_(&node), src_(&src), path_(std::move(path)) {
        if (!node.is_object()) fail_at(path_, "expected an object");
    }

    const std::vector<std::string>& path() const { return path_; }
    const Source& source() const { return *src_; }
    const Json& node() const { return *node_; }

    bool has(const std::string& key) const { return node_->contains(key); }

    template <class T>
    T required(const std::string& key) {
        seen_.insert(key);
        if (!has(key)) fail("missing required key '" + key + "'");
        return convert<T>(node_->at(key), child_path(key));
    }

    template <class T>
    void optional(const std::string& key, T& out) {
        seen_.insert(key);
        if (has(key)) out = convert<T>(node_->at(key), child_path(key));
    }

    template <class T>
    std::optional<T> maybe(const std::string& key) {
        seen_.insert(key);
        if (!has(key) || node_->at(key).is_null()) return std::nullopt;
        return convert<T>(node_->at(key), child_path(key));
    }

    Reader object(const std::string& key) {
        seen_.insert(key);
        if (!has(key)) fail("missing required section '" + key + "'");
        return Reader(node_->at(key), *src_, child_path(key));
    }

    std::optional<Reader> optional_object(const std::string& key) {
        seen_.insert(key);
        if (!has(key)) return std::nullopt;
        return Reader(node_->at(key), *src_, child_path(key));
    }

    std::vector<Reader> objects(const std::string& key) {
        seen_.insert(key);
        std::vector<Reader> out;
        if (!has(key)) return out;
        const Json& arr = node_->at(key);
        if (!arr.is_array()) fail_at(child_path(key), "expected an array");
        for (std::size_t i = 0; i < arr.size(); ++i) {
            auto p = child_path(key);
            p.push_back("[" + std::to_string(i) + "]");
            out.emplace_back(arr[i], *src_, p);
        }
        return out;
    }

    /// Marks a key as consumed without converting it.
    const Json* raw(const std::string& key) {
        seen_.insert(key);
        return has(key) ? &node_->at(key) : nullptr;
    }

    void finish() const {
        for (const auto& [key, value] : node_->items()) {
            if (!seen_.count(key)) fail_at(child_path(key), "unknown key '" + key + "'");
        }
    }

    [[noreturn]] void fail(const std::string& msg) const { fail_at(path_, msg); }
    [[noreturn]] void fail(const std::string& key, const std::string& msg) const {
        fail_at(child_path(key), msg);
    }

    /// Runs a validate() call and re-anchors its UsageError at this object.
    template <class F>
    void checked(F&& f) const {
        try {
            f();
        } catch (const FormatError&) {
            throw;
        } catch (const UsageError& e) {
            fail(e.what());
        }
    }

private:
    std::vector<std::string> child_path(const std::string& key) const {
        auto p = path_;
        p.push_back(key);
        return p;
    }

    [[noreturn]] void fail_at(const std::vector<std::string>& p, const std::string& msg) const {
        const std::string where = p.empty() ? std::string("document") : dotted(p);
        throw FormatError(src_->name() + ":" + std::to_string(src_->line_of(p)) + ": " + where +
                          ": " + msg);
    }

    template <class T>
    T convert(const Json& v, const std::vector<std::string>& p) const {
        if constexpr (std::is_same_v<T, bool>) {
            if (!v.is_boolean()) fail_at(p, "expected true or false");
            return v.get<bool>();
        } else if constexpr (std::is_same_v<T, int>) {
            if (!v.is_number_integer()) fail_at(p, "expected an integer");
            const auto x = v.get<long long>();
            if (x < INT32_MIN || x > INT32_MAX) fail_at(p, "integer out of range");
            return static_cast<int>(x);
        } else if constexpr (std::is_same_v<T, std::uint64_t>) {
            if (v.is_number_unsigned()) return v.get<std::uint64_t>();
            if (v.is_number_integer() && v.get<long long>() >= 0) {
                return static_cast<std::uint64_t>(v.get<long long>());
            }
            fail_at(p, "expected a nonnegative integer");
        } else if constexpr (std::is_same_v<T, double>) {
            if (!v.is_number()) fail_at(p, "expected a number");
            return v.get<double>();
        } else if constexpr (std::is_same_v<T, std::string>) {
            if (!v.is_string()) fail_at(p, "expected a string");
            return v.get<std::string>();
        } else if constexpr (std::is_same_v<T, std::vector<double>>) {
            if (!v.is_array()) fail_at(p, "expected an array of numbers");
            std::vector<double> out;
            for (const auto& x : v) {
                if (!x.is_number()) fail_at(p, "expected an array of numbers");
                out.push_back(x.get<double>());
            }
            return out;
        } else if constexpr (std::is_same_v<T, std::vector<std::string>>) {
            if (!v.is_array()) fail_at(p, "expected an array of strings");
            std::vector<std::string> out;
            for (const auto& x : v) {
                if (!x.is_string()) fail_at(p, "expected an array of strings");
                out.push_back(x.get<std::string>());
            }
            return out;
        } else {
            static_assert(sizeof(T) == 0, "unsupported type");
        }
    }

    const Json* node_;
    const Source* src_;
    std::vector<std::string> path_;
    mutable std::set<std::string> seen_;
};

/// Checks the "format" tag and the major version of a document.
inline void check_format(Reader& r, const std::string& expected) {
    const auto format = r.required<std::string>("format");
    if (format != expected) r.fail("format", "expected format '" + expected + "', found '" + format + "'");
    const auto version = r.required<std::string>("version");
    int major = -1;
    const auto dot = version.find('.');
    const std::string head = version.substr(0, dot);
    auto [ptr, ec] = std::from_chars(head.data(), head.data() + head.size(), major);
    if (ec != std::errc{} || ptr != head.data() + head.size() || dot == std::string::npos) {
        r.fail("version", "malformed version '" + version + "'");
    }
    if (major != format_major) {
        r.fail("version", "unsupported " + expected + " major version " + std::to_string(major) +
                              " (this build reads " + std::to_string(format_major) + ".x)");
    }
}

inline Json header(const std::string& format) {
    Json j;
    j["format"] = format;
    j["version"] = format_version;
    return j;
}

//
// Configuration
//

struct AnalysisSettings {
    ErrorMode error_mode = ErrorMode::scatter_inflated;
    VisibilityReference visibility_reference = VisibilityReference::bracketing;
    double global_visibility = 0.62;
    double global_visibility_sigma = 0.0;
    bool include_v3_prefactor = false;
    // Nominal model used only to choose 2 pi branches.
    double expected_phase_coefficient = 1.387e-4; // rad/V^2
    double expected_speed_ratio = 8.0;
};

struct CheckSettings {
    double nozzle_temperature = 1073.0; // K
    double carrier_mass_u = argon_mass_u;
    double velocity_slip = 0.01;
    double laser_wavelength = 671e-9;   // m
    double bragg_velocity = 1065.0;     // m/s
    double max_voltage = 450.0;         // V
};

struct ScheduleSpec {
    int count = 44;
    double volts_per_index = 10.0;
    double dead_time = 30.0; // s between recordings
    std::vector<ScheduleEntry> explicit_entries;
};

struct Config {
    std::uint64_t seed = 1;
    SimulationModel model;
    ScheduleSpec schedule_spec;
    GeometryUncertainty geometry_sigma{0.10e-3, 0.003e-3};
    std::vector<VelocityMeasurement> velocities;
    std::optional<std::vector<std::string>> velocity_subset;
    AnalysisSettings analysis;
    CheckSettings check;

    VoltageSchedule schedule() const {
        if (!schedule_spec.explicit_entries.empty()) return {schedule_spec.explicit_entries};
        return VoltageSchedule::alternating(schedule_spec.count, schedule_spec.volts_per_index,
                                            model.recording.recording_duration(),
                                            schedule_spec.dead_time);
    }
};

inline const char* to_string(ErrorMode m) {
    return m == ErrorMode::as_reported ? "as_reported" : "scatter_inflated";
}

inline const char* to_string(VisibilityReference v) {
    return v == VisibilityReference::bracketing ? "bracketing" : "global";
}

inline Json velocities_to_json(const std::vector<VelocityMeasurement>& v) {
    Json arr = Json::array();
    for (const auto& m : v) arr.push_back({{"method", m.method}, {"u", m.u}, {"sigma", m.sigma}});
    return arr;
}

inline std::vector<VelocityMeasurement> read_velocity_list(Reader& r, const std::string& key) {
    std::vector<VelocityMeasurement> out;
    for (auto& e : r.objects(key)) {
        VelocityMeasurement m;
        m.method = e.required<std::string>("method");
        m.u = e.required<double>("u");
        m.sigma = e.required<double>("sigma");
        if (!(m.u > 0)) e.fail("u", "velocity must be positive");
        if (!(m.sigma > 0)) e.fail("sigma", "sigma must be positive");
        e.finish();
        out.push_back(m);
    }
    return out;
}

/// Normalized form: every field with its effective value.
inline Json config_to_json(const Config& c) {
    const auto& rc = c.model.recording;
    const auto& d = c.model.drift;
    const auto& b = c.model.beam;
    const auto& g = c.model.geometry;
    Json j = header("lipol-config");
    j["seed"] = c.seed;
    j["recording"] = {{"n_channels", rc.n_channels},
                      {"dwell_time", rc.dwell_time},
                      {"mean_rate", rc.mean_rate},
                      {"base_visibility", rc.base_visibility},
                      {"ramp_b", rc.ramp_b},
                      {"ramp_c", rc.ramp_c},
                      {"phase_origin", rc.phase_origin},
                      {"excess_noise_factor", rc.excess_noise_factor},
                      {"noise_enabled", rc.noise_enabled},
                      {"collimation_slit_e1", rc.collimation_slit_e1},
                      {"detection_slit_eD", rc.detection_slit_eD}};
    j["drift"] = {{"linear_drift", d.linear_drift},
                  {"drift_enabled", d.drift_enabled},
                  {"scatter_rms", d.scatter_rms},
                  {"scatter_period", d.scatter_period},
                  {"scatter_white_fraction", d.scatter_white_fraction},
                  {"scatter_enabled", d.scatter_enabled}};
    j["beam"] = {{"most_probable_velocity", b.most_probable_velocity},
                 {"speed_ratio", b.speed_ratio},
                 {"species",
                  {{"name", b.species.name},
                   {"mass_u", b.species.mass / c.model.constants.amu},
                   {"polarizability", b.species.polarizability}}}};
    j["geometry"] = {{"half_length", g.half_length},
                     {"gap_h", g.gap_h},
                     {"septum_offset", g.septum_offset},
                     {"gap_variance", g.gap_variance}};
    j["geometry_sigma"] = {{"full_length", c.geometry_sigma.full_length},
                           {"gap_h", c.geometry_sigma.gap_h}};
    Json sched;
    if (c.schedule_spec.explicit_entries.empty()) {
        sched = {{"count", c.schedule_spec.count},
                 {"volts_per_index", c.schedule_spec.volts_per_index},
                 {"dead_time", c.schedule_spec.dead_time}};
    } else {
        sched["entries"] = Json::array();
        for (const auto& e : c.schedule_spec.explicit_entries) {
            sched["entries"].push_back(
                {{"index", e.index}, {"voltage", e.voltage}, {"start_time", e.start_time}});
        }
    }
    j["schedule"] = sched;
    if (c.model.phase_coefficient_override) {
        j["truth"] = {{"phase_coefficient", *c.model.phase_coefficient_override}};
    }
    j["velocities"] = {{"measurements", velocities_to_json(c.velocities)}};
    if (c.velocity_subset) j["velocities"]["use"] = *c.velocity_subset;
    j["analysis"] = {{"error_mode", to_string(c.analysis.error_mode)},
                     {"visibility_reference", to_string(c.analysis.visibility_reference)},
                     {"global_visibility", c.analysis.global_visibility},
                     {"global_visibility_sigma", c.analysis.global_visibility_sigma},
                     {"include_v3_prefactor", c.analysis.include_v3_prefactor},
                     {"expected_phase_coefficient", c.analysis.expected_phase_coefficient},
                     {"expected_speed_ratio", c.analysis.expected_speed_ratio}};
    j["check"] = {{"nozzle_temperature", c.check.nozzle_temperature},
                  {"carrier_mass_u", c.check.carrier_mass_u},
                  {"velocity_slip", c.check.velocity_slip},
                  {"laser_wavelength", c.check.laser_wavelength},
                  {"bragg_velocity", c.check.bragg_velocity},
                  {"max_voltage", c.check.max_voltage}};
    return j;
}

/// Reads a configuration object. Missing keys keep their defaults; unknown
/// keys are errors.
inline Config read_config(Reader r) {
    check_format(r, "lipol-config");
    Config c;
    r.optional("seed", c.seed);

    if (auto s = r.optional_object("recording")) {
        auto& rc = c.model.recording;
        s->optional("n_channels", rc.n_channels);
        s->optional("dwell_time", rc.dwell_time);
        s->optional("mean_rate", rc.mean_rate);
        s->optional("base_visibility", rc.base_visibility);
        s->optional("ramp_b", rc.ramp_b);
        s->optional("ramp_c", rc.ramp_c);
        s->optional("phase_origin", rc.phase_origin);
        s->optional("excess_noise_factor", rc.excess_noise_factor);
        s->optional("noise_enabled", rc.noise_enabled);
        s->optional("collimation_slit_e1", rc.collimation_slit_e1);
        s->optional("detection_slit_eD", rc.detection_slit_eD);
        s->finish();
        s->checked([&] { rc.validate(); });
    }
    if (auto s = r.optional_object("drift")) {
        auto& d = c.model.drift;
        s->optional("linear_drift", d.linear_drift);
        s->optional("drift_enabled", d.drift_enabled);
        s->optional("scatter_rms", d.scatter_rms);
        s->optional("scatter_period", d.scatter_period);
        s->optional("scatter_white_fraction", d.scatter_white_fraction);
        s->optional("scatter_enabled", d.scatter_enabled);
        s->finish();
        s->checked([&] { d.validate(); });
    }
    if (auto s = r.optional_object("beam")) {
        auto& b = c.model.beam;
        s->optional("most_probable_velocity", b.most_probable_velocity);
        s->optional("speed_ratio", b.speed_ratio);
        if (auto sp = s->optional_object("species")) {
            double mass_u = b.species.mass / c.model.constants.amu;
            sp->optional("name", b.species.name);
            sp->optional("mass_u", mass_u);
            sp->optional("polarizability", b.species.polarizability);
            b.species.mass = mass_u * c.model.constants.amu;
            sp->finish();
        }
        s->finish();
        s->checked([&] { b.validate(); });
    }
    if (auto s = r.optional_object("geometry")) {
        auto& g = c.model.geometry;
        s->optional("half_length", g.half_length);
        s->optional("gap_h", g.gap_h);
        s->optional("septum_offset", g.septum_offset);
        s->optional("gap_variance", g.gap_variance);
        s->finish();
        s->checked([&] { g.validate(); });
    }
    if (auto s = r.optional_object("geometry_sigma")) {
        s->optional("full_length", c.geometry_sigma.full_length);
        s->optional("gap_h", c.geometry_sigma.gap_h);
        s->finish();
        if (!(c.geometry_sigma.full_length >= 0 && c.geometry_sigma.gap_h >= 0)) {
            s->fail("uncertainties must be nonnegative");
        }
    }
    if (auto s = r.optional_object("schedule")) {
        auto& sp = c.schedule_spec;
        s->optional("count", sp.count);
        s->optional("volts_per_index", sp.volts_per_index);
        s->optional("dead_time", sp.dead_time);
        for (auto& e : s->objects("entries")) {
            sp.explicit_entries.push_back({e.required<int>("index"), e.required<double>("voltage"),
                                           e.required<double>("start_time")});
            e.finish();
        }
        s->finish();
        if (sp.count < 1) s->fail("count", "schedule needs at least one recording");
        if (!(sp.dead_time >= 0)) s->fail("dead_time", "dead time must be nonnegative");
        s->checked([&] { c.schedule().validate(); });
    }
    if (auto s = r.optional_object("truth")) {
        c.model.phase_coefficient_override = s->maybe<double>("phase_coefficient");
        s->finish();
        if (c.model.phase_coefficient_override && !(*c.model.phase_coefficient_override > 0)) {
            s->fail("phase_coefficient", "must be positive");
        }
    }
    if (auto s = r.optional_object("velocities")) {
        c.velocities = read_velocity_list(*s, "measurements");
        c.velocity_subset = s->maybe<std::vector<std::string>>("use");
        s->finish();
    }
    if (auto s = r.optional_object("analysis")) {
        auto& a = c.analysis;
        std::string mode = to_string(a.error_mode), ref = to_string(a.visibility_reference);
        s->optional("error_mode", mode);
        s->optional("visibility_reference", ref);
        if (mode == "as_reported") a.error_mode = ErrorMode::as_reported;
        else if (mode == "scatter_inflated") a.error_mode = ErrorMode::scatter_inflated;
        else s->fail("error_mode", "expected 'as_reported' or 'scatter_inflated'");
        if (ref == "bracketing") a.visibility_reference = VisibilityReference::bracketing;
        else if (ref == "global") a.visibility_reference = VisibilityReference::global;
        else s->fail("visibility_reference", "expected 'bracketing' or 'global'");
        s->optional("global_visibility", a.global_visibility);
        s->optional("global_visibility_sigma", a.global_visibility_sigma);
        s->optional("include_v3_prefactor", a.include_v3_prefactor);
        s->optional("expected_phase_coefficient", a.expected_phase_coefficient);
        s->optional("expected_speed_ratio", a.expected_speed_ratio);
        s->finish();
        if (!(a.expected_speed_ratio > 1)) s->fail("expected_speed_ratio", "must exceed 1");
        if (!(a.global_visibility > 0 && a.global_visibility <= 1)) {
            s->fail("global_visibility", "must lie in (0, 1]");
        }
    }
    if (auto s = r.optional_object("check")) {
        auto& k = c.check;
        s->optional("nozzle_temperature", k.nozzle_temperature);
        s->optional("carrier_mass_u", k.carrier_mass_u);
        s->optional("velocity_slip", k.velocity_slip);
        s->optional("laser_wavelength", k.laser_wavelength);
        s->optional("bragg_velocity", k.bragg_velocity);
        s->optional("max_voltage", k.max_voltage);
        s->finish();
        if (!(k.nozzle_temperature > 0 && k.carrier_mass_u > 0 && k.velocity_slip >= 0 &&
              k.laser_wavelength > 0 && k.bragg_velocity > 0 && std::isfinite(k.max_voltage))) {
            s->fail("values must be positive (slip nonnegative)");
        }
    }
    r.finish();
    r.checked([&] { c.model.validate(); });
    return c;
}

inline Config parse_config(const Source& src) {
    const Json j = parse_json(src);
    return read_config(Reader(j, src));
}

inline Config load_config(const fs::path& path) { return parse_config(Source::from_file(path)); }

inline std::string config_hash(const Config& c) { return hex64(fnv1a64(config_to_json(c).dump())); }

/// A standalone velocities file: {"format": "lipol-velocities", ...}.
struct VelocitySet {
    std::vector<VelocityMeasurement> measurements;
    std::optional<std::vector<std::string>> use;
};

inline VelocitySet load_velocities(const fs::path& path) {
    const Source src = Source::from_file(path);
    const Json j = parse_json(src);
    Reader r(j, src);
    check_format(r, "lipol-velocities");
    VelocitySet v;
    v.measurements = read_velocity_list(r, "measurements");
    v.use = r.maybe<std::vector<std::string>>("use");
    r.finish();
    if (v.measurements.empty()) r.fail("measurements", "no velocity measurements");
    return v;
}

//
// Recording CSV: "channel,counts" header, one row per channel.
//

inline std::string recording_to_csv(const Recording& rec) {
    std::string out = "channel,counts\n";
    out.reserve(rec.counts.size() * 12);
    for (std::size_t n = 0; n < rec.counts.size(); ++n) {
        out += std::to_string(n);
        out += ',';
        out += format_double(rec.counts[n]);
        out += '\n';
    }
    return out;
}

inline std::vector<double> parse_recording_csv(const std::string& text, const std::string& name) {
    std::vector<double> counts;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    auto fail = [&](const std::string& msg) -> void {
        throw FormatError(name + ":" + std::to_string(lineno) + ": " + msg);
    };
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (lineno == 1) {
            if (line != "channel,counts") fail("expected header 'channel,counts'");
            continue;
        }
        if (line.empty()) fail("empty line");
        const auto comma = line.find(',');
        if (comma == std::string::npos || line.find(',', comma + 1) != std::string::npos) {
            fail("expected two comma-separated columns");
        }
        long long channel = -1;
        auto r1 = std::from_chars(line.data(), line.data() + comma, channel);
        if (r1.ec != std::errc{} || r1.ptr != line.data() + comma) fail("channel is not an integer");
        if (channel != static_cast<long long>(counts.size())) {
            fail("channel " + std::to_string(channel) + " out of sequence");
        }
        double value = 0;
        const char* begin = line.data() + comma + 1;
        const char* end = line.data() + line.size();
        auto r2 = std::from_chars(begin, end, value);
        if (r2.ec != std::errc{} || r2.ptr != end) fail("counts is not a number");
        if (!(value >= 0) || !std::isfinite(value)) fail("counts must be finite and >= 0");
        counts.push_back(value);
    }
    if (lineno == 0) throw FormatError(name + ":1: empty file");
    if (counts.empty()) throw FormatError(name + ":2: no data rows");
    return counts;
}

inline std::vector<double> read_recording_csv(const fs::path& path) {
    return parse_recording_csv(read_text_file(path), path.string());
}

//
// Campaign manifest
//

struct ManifestEntry {
    int index = 0;
    double voltage = 0;
    double start_time = 0;
    double dwell_time = 0;
    int n_channels = 0;
    std::uint64_t seed = 0;
    std::string file; // relative to the manifest directory
    std::optional<RecordingTruth> truth;
};

struct CampaignTruth {
    double phase_coefficient = 0;
    double speed_ratio = 0;
    double velocity = 0;
    double alpha = 0;
    double scatter_phase0 = 0;
};

struct Manifest {
    std::string tool_version;
    std::string config_hash;
    std::uint64_t seed = 0;
    bool blind = false;
    Json config; // normalized config; blind manifests drop "beam" and "truth"
    Config parsed_config;
    std::optional<CampaignTruth> truth;
    std::vector<ManifestEntry> recordings;
};

inline std::string recording_file_name(int index) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "recording_%03d.csv", index);
    return buf;
}

inline Json truth_to_json(const RecordingTruth& t) {
    return {{"I0", t.I0},
            {"visibility", t.visibility},
            {"a", t.a},
            {"b", t.b},
            {"c", t.c},
            {"phi_m", t.phi_m},
            {"effective_phase", t.effective_phase},
            {"visibility_ratio", t.visibility_ratio},
            {"scatter", t.scatter}};
}

inline RecordingTruth read_truth(Reader r) {
    RecordingTruth t{};
    t.I0 = r.required<double>("I0");
    t.visibility = r.required<double>("visibility");
    t.a = r.required<double>("a");
    t.b = r.required<double>("b");
    t.c = r.required<double>("c");
    t.phi_m = r.required<double>("phi_m");
    t.effective_phase = r.required<double>("effective_phase");
    t.visibility_ratio = r.required<double>("visibility_ratio");
    t.scatter = r.required<double>("scatter");
    r.finish();
    return t;
}

inline Json campaign_truth_to_json(const CampaignTruth& t) {
    return {{"phase_coefficient", t.phase_coefficient},
            {"speed_ratio", t.speed_ratio},
            {"velocity", t.velocity},
            {"alpha", t.alpha},
            {"scatter_phase0", t.scatter_phase0}};
}

inline CampaignTruth read_campaign_truth(Reader r) {
    CampaignTruth t;
    t.phase_coefficient = r.required<double>("phase_coefficient");
    t.speed_ratio = r.required<double>("speed_ratio");
    t.velocity = r.required<double>("velocity");
    t.alpha = r.required<double>("alpha");
    t.scatter_phase0 = r.required<double>("scatter_phase0");
    r.finish();
    return t;
}

inline Json manifest_to_json(const Manifest& m) {
    Json j = header("lipol-manifest");
    j["tool_version"] = m.tool_version;
    j["config_hash"] = m.config_hash;
    j["seed"] = m.seed;
    j["blind"] = m.blind;
    j["recording_format"] = {{"columns", {"channel", "counts"}}, {"version", format_version}};
    j["config"] = m.config;
    if (!m.blind && m.truth) j["truth"] = campaign_truth_to_json(*m.truth);
    j["recordings"] = Json::array();
    for (const auto& e : m.recordings) {
        Json r = {{"index", e.index},         {"voltage", e.voltage},
                  {"start_time", e.start_time}, {"dwell_time", e.dwell_time},
                  {"n_channels", e.n_channels}, {"seed", e.seed},
                  {"file", e.file}};
        if (!m.blind && e.truth) r["truth"] = truth_to_json(*e.truth);
        j["recordings"].push_back(r);
    }
    return j;
}

/// Reads a manifest and checks that every referenced recording file exists.
inline Manifest load_manifest(const fs::path& path) {
    const Source src = Source::from_file(path);
    const Json j = parse_json(src);
    Reader r(j, src);
    check_format(r, "lipol-manifest");
    Manifest m;
    m.tool_version = r.required<std::string>("tool_version");
    m.config_hash = r.required<std::string>("config_hash");
    m.seed = r.required<std::uint64_t>("seed");
    m.blind = r.required<bool>("blind");
    {
        Reader rf = r.object("recording_format");
        rf.raw("columns");
        const auto v = rf.required<std::string>("version");
        if (v.substr(0, v.find('.')) != std::to_string(format_major)) {
            rf.fail("version", "unsupported recording format version " + v);
        }
        rf.finish();
    }
    m.config = *r.raw("config");
    if (!m.config.is_object()) r.fail("config", "expected an object");
    m.parsed_config = read_config(Reader(m.config, src, {"config"}));
    if (auto t = r.optional_object("truth")) m.truth = read_campaign_truth(*t);

    const fs::path dir = path.parent_path();
    auto entries = r.objects("recordings");
    if (entries.empty()) r.fail("recordings", "manifest lists no recordings");
    std::set<int> indices;
    for (auto& e : entries) {
        ManifestEntry me;
        me.index = e.required<int>("index");
        me.voltage = e.required<double>("voltage");
        me.start_time = e.required<double>("start_time");
        me.dwell_time = e.required<double>("dwell_time");
        me.n_channels = e.required<int>("n_channels");
        me.seed = e.required<std::uint64_t>("seed");
        me.file = e.required<std::string>("file");
        if (auto t = e.optional_object("truth")) me.truth = read_truth(*t);
        e.finish();
        if (!indices.insert(me.index).second) e.fail("index", "duplicate recording index");
        if (!fs::exists(dir / me.file)) e.fail("file", "recording file '" + me.file + "' not found");
        m.recordings.push_back(me);
    }
    r.finish();
    const auto sched = m.parsed_config.schedule();
    if (sched.entries.size() != m.recordings.size()) {
        r.fail("recordings", "schedule has " + std::to_string(sched.entries.size()) +
                                 " entries but the manifest lists " +
                                 std::to_string(m.recordings.size()) + " recordings");
    }
    return m;
}

//
// Fit results
//

struct FitRecord {
    int index = 0;
    double voltage = 0;
    double start_time = 0;
    std::string file;
    std::optional<FringeFit> fit;
    std::string error; // set when fit is empty
    int error_code = 0; // 1 usage/format, 2 numerical
};

struct FitResults {
    std::string tool_version;
    std::string config_hash;
    bool blind = false;
    Json config;
    std::optional<CampaignTruth> truth;
    std::vector<FitRecord> records;

    std::vector<FringeFit> successful() const {
        std::vector<FringeFit> out;
        for (const auto& r : records) {
            if (r.fit) out.push_back(*r.fit);
        }
        return out;
    }

    int failures() const {
        int n = 0;
        for (const auto& r : records) n += !r.fit;
        return n;
    }
};

inline Json fit_to_json(const FringeFit& f) {
    Json cov = Json::array();
    for (Eigen::Index i = 0; i < f.covariance.rows(); ++i) {
        Json row = Json::array();
        for (Eigen::Index k = 0; k < f.covariance.cols(); ++k) row.push_back(f.covariance(i, k));
        cov.push_back(row);
    }
    Json params = f.fixed_ramp ? Json{"I0", "visibility", "a"} : Json{"I0", "visibility", "a", "b", "c"};
    return {{"n_channels", f.n_channels},
            {"fixed_ramp", f.fixed_ramp},
            {"I0", f.I0},
            {"visibility", f.visibility},
            {"a", f.a},
            {"b", f.b},
            {"c", f.c},
            {"mean_phase", f.mean_phase},
            {"mean_phase_sigma", f.mean_phase_sigma},
            {"visibility_sigma", f.visibility_sigma},
            {"covariance_parameters", params},
            {"covariance", cov},
            {"chi2", f.chi2},
            {"dof", f.dof},
            {"iterations", f.iterations},
            {"converged", f.converged},
            {"stop", f.stop}};
}

inline FringeFit read_fit(Reader& r) {
    FringeFit f;
    f.n_channels = r.required<int>("n_channels");
    f.fixed_ramp = r.required<bool>("fixed_ramp");
    f.I0 = r.required<double>("I0");
    f.visibility = r.required<double>("visibility");
    f.a = r.required<double>("a");
    f.b = r.required<double>("b");
    f.c = r.required<double>("c");
    f.mean_phase = r.required<double>("mean_phase");
    f.mean_phase_sigma = r.required<double>("mean_phase_sigma");
    f.visibility_sigma = r.required<double>("visibility_sigma");
    r.raw("covariance_parameters");
    const Json* cov = r.raw("covariance");
    const Eigen::Index n = f.fixed_ramp ? 3 : 5;
    if (!cov || !cov->is_array() || static_cast<Eigen::Index>(cov->size()) != n) {
        r.fail("covariance", "expected a " + std::to_string(n) + "x" + std::to_string(n) + " matrix");
    }
    f.covariance.resize(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const Json& row = (*cov)[static_cast<std::size_t>(i)];
        if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != n) {
            r.fail("covariance", "malformed covariance row");
        }
        for (Eigen::Index k = 0; k < n; ++k) {
            if (!row[static_cast<std::size_t>(k)].is_number()) r.fail("covariance", "non-numeric entry");
            f.covariance(i, k) = row[static_cast<std::size_t>(k)].get<double>();
        }
    }
    f.chi2 = r.required<double>("chi2");
    f.dof = r.required<int>("dof");
    f.iterations = r.required<int>("iterations");
    f.converged = r.required<bool>("converged");
    f.stop = r.required<std::string>("stop");
    if (!(f.mean_phase_sigma > 0)) r.fail("mean_phase_sigma", "must be positive");
    return f;
}

inline Json fit_results_to_json(const FitResults& fr) {
    Json j = header("lipol-fits");
    j["tool_version"] = fr.tool_version;
    j["config_hash"] = fr.config_hash;
    j["blind"] = fr.blind;
    j["config"] = fr.config;
    if (!fr.blind && fr.truth) j["truth"] = campaign_truth_to_json(*fr.truth);
    j["failures"] = fr.failures();
    j["fits"] = Json::array();
    for (const auto& rec : fr.records) {
        Json e = {{"index", rec.index},
                  {"voltage", rec.voltage},
                  {"start_time", rec.start_time},
                  {"file", rec.file},
                  {"status", rec.fit ? "ok" : "failed"}};
        if (rec.fit) {
            const Json body = fit_to_json(*rec.fit);
            for (const auto& [k, v] : body.items()) e[k] = v;
        } else {
            e["error"] = rec.error;
            e["error_code"] = rec.error_code;
        }
        j["fits"].push_back(e);
    }
    return j;
}

inline FitResults load_fit_results(const fs::path& path) {
    const Source src = Source::from_file(path);
    const Json j = parse_json(src);
    Reader r(j, src);
    check_format(r, "lipol-fits");
    FitResults fr;
    fr.tool_version = r.required<std::string>("tool_version");
    fr.config_hash = r.required<std::string>("config_hash");
    fr.blind = r.required<bool>("blind");
    fr.config = *r.raw("config");
    if (auto t = r.optional_object("truth")) fr.truth = read_campaign_truth(*t);
    r.raw("failures");
    for (auto& e : r.objects("fits")) {
        FitRecord rec;
        rec.index = e.required<int>("index");
        rec.voltage = e.required<double>("voltage");
        rec.start_time = e.required<double>("start_time");
        rec.file = e.required<std::string>("file");
        const auto status = e.required<std::string>("status");
        if (status == "ok") {
            FringeFit f = read_fit(e);
            f.index = rec.index;
            f.voltage = rec.voltage;
            f.start_time = rec.start_time;
            rec.fit = f;
        } else if (status == "failed") {
            rec.error = e.required<std::string>("error");
            rec.error_code = e.required<int>("error_code");
        } else {
            e.fail("status", "expected 'ok' or 'failed'");
        }
        e.finish();
        fr.records.push_back(rec);
    }
    r.finish();
    if (fr.records.empty()) r.fail("fits", "no fit records");
    return fr;
}

//
// Report
//

inline Json measured(const Measured& m) { return {{"value", m.value}, {"sigma", m.sigma}}; }

inline Measured read_measured(Reader r) {
    Measured m{r.required<double>("value"), r.required<double>("sigma")};
    r.finish();
    return m;
}

inline Json shift_point_to_json(const ShiftPoint& p) {
    return {{"index", p.index},
            {"voltage", p.voltage},
            {"phase_shift", p.phase_shift},
            {"phase_sigma", p.phase_sigma},
            {"visibility_ratio", p.visibility_ratio},
            {"visibility_sigma", p.visibility_sigma},
            {"branch_ambiguous", p.branch_ambiguous}};
}

inline Json joint_fit_to_json(const JointFitResult& r, ErrorMode mode) {
    return {{"error_mode", to_string(mode)},
            {"phase_coefficient", measured(r.phase_coefficient)},
            {"speed_ratio", measured(r.speed_ratio)},
            {"correlation", r.correlation},
            {"chi2_phase", r.chi2_phase},
            {"chi2_visibility", r.chi2_visibility},
            {"dof", r.dof},
            {"extra_phase_sigma", r.extra_phase_sigma},
            {"iterations", r.iterations},
            {"converged", r.converged}};
}

inline Json budget_to_json(const std::vector<BudgetTerm>& terms) {
    Json arr = Json::array();
    for (const auto& t : terms) arr.push_back({{"source", t.source}, {"relative", t.relative}});
    return arr;
}

inline Json constants_to_json(const PhysicalConstants& k) {
    return {{"epsilon0", k.epsilon0},
            {"hbar", k.hbar},
            {"planck", k.planck},
            {"boltzmann", k.boltzmann},
            {"amu", k.amu}};
}

inline PhysicalConstants read_constants(Reader r) {
    PhysicalConstants k{};
    k.epsilon0 = r.required<double>("epsilon0");
    k.hbar = r.required<double>("hbar");
    k.planck = r.required<double>("planck");
    k.boltzmann = r.required<double>("boltzmann");
    k.amu = r.required<double>("amu");
    r.finish();
    r.checked([&] { k.validate(); });
    return k;
}

/// Plot-ready CSV with a header row; numbers in shortest round-trip form.
inline std::string csv_table(const std::vector<std::string>& columns,
                             const std::vector<std::vector<double>>& rows) {
    std::string out;
    for (std::size_t i = 0; i < columns.size(); ++i) {
        out += (i ? "," : "") + columns[i];
    }
    out += '\n';
    for (const auto& row : rows) {
        for (std::size_t i = 0; i < row.size(); ++i) {
            if (i) out += ',';
            out += format_double(row[i]);
        }
        out += '\n';
    }
    return out;
}

} // namespace lipol::io
