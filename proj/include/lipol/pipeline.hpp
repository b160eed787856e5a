#pragma once

// The five commands behind the CLI: simulate, fit, analyze, check, report.
// Each is a plain function over paths and options so it can be driven from
// tests as well as from tools/lipol.cpp.

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "lipol/analysis.hpp"
#include "lipol/fringe_fit.hpp"
#include "lipol/io.hpp"
#include "lipol/physics_core.hpp"
#include "lipol/synthetic_experiment.hpp"

namespace lipol::pipeline {

namespace fs = std::filesystem;
using io::Json;

/// Runs fn(0..n-1) on up to `threads` workers. fn must not throw.
inline void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn) {
    const std::size_t workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(threads, 1)));
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) fn(i);
        });
    }
}

inline double alpha_for(double k, double u, const CapacitorGeometry& g, const PhysicalConstants& c) {
    return k * c.hbar * u * g.gap_h * g.gap_h / (two_pi * c.epsilon0 * effective_length(g));
}

//
// simulate
//

struct SimulateOptions {
    fs::path config;
    fs::path out_dir;
    std::optional<std::uint64_t> seed; // overrides the config seed
    bool blind = false;
};

struct SimulateSummary {
    fs::path manifest;
    std::size_t recordings = 0;
    std::uint64_t seed = 0;
};

inline SimulateSummary simulate(const SimulateOptions& opts) {
    io::Config cfg = io::load_config(opts.config);
    if (opts.seed) cfg.seed = *opts.seed;
    const VoltageSchedule schedule = cfg.schedule();
    const Campaign campaign = generate_campaign(cfg.model, schedule, cfg.seed);

    io::Manifest m;
    m.tool_version = io::tool_version();
    m.config_hash = io::config_hash(cfg);
    m.seed = cfg.seed;
    m.blind = opts.blind;
    m.config = io::config_to_json(cfg);
    if (opts.blind) {
        m.config.erase("beam");
        m.config.erase("truth");
    }
    m.truth = io::CampaignTruth{
        campaign.phase_coefficient, cfg.model.beam.speed_ratio,
        cfg.model.beam.most_probable_velocity,
        cfg.model.phase_coefficient_override
            ? alpha_for(campaign.phase_coefficient, cfg.model.beam.most_probable_velocity,
                        cfg.model.geometry, cfg.model.constants)
            : cfg.model.beam.species.polarizability,
        campaign.scatter_phase0};

    for (std::size_t i = 0; i < campaign.recordings.size(); ++i) {
        const Recording& rec = campaign.recordings[i];
        const std::string file = "recordings/" + io::recording_file_name(rec.index);
        io::write_text_file(opts.out_dir / file, io::recording_to_csv(rec));
        m.recordings.push_back({rec.index, rec.voltage, rec.start_time, rec.dwell_time,
                                static_cast<int>(rec.counts.size()), campaign.recording_seeds[i],
                                file, rec.truth});
    }
    const fs::path manifest = opts.out_dir / "manifest.json";
    io::write_text_file(manifest, io::dump(io::manifest_to_json(m)));
    return {manifest, campaign.recordings.size(), cfg.seed};
}

//
// fit
//

struct FitCommandOptions {
    fs::path manifest;
    fs::path out; // fit results file
    int parallel = 1;
};

namespace detail {

inline void record_failure(io::FitRecord& rec, const std::exception& e, int code) {
    rec.fit.reset();
    rec.error = e.what();
    rec.error_code = code;
}

template <class F>
void guarded(io::FitRecord& rec, F&& f) {
    try {
        f();
    } catch (const UsageError& e) {
        record_failure(rec, e, 1);
    } catch (const NumericalError& e) {
        record_failure(rec, e, 2);
    } catch (const std::exception& e) {
        record_failure(rec, e, 2);
    }
}

} // namespace detail

/// Fits every recording of a campaign. Odd indices get the free-ramp
/// reference fit; even indices reuse (b, c) from recording i-1. A failure
/// is recorded against its recording and the rest of the campaign proceeds.
inline io::FitResults fit_campaign(const io::Manifest& m, const fs::path& base_dir, int parallel) {
    io::FitResults out;
    out.tool_version = io::tool_version();
    out.config_hash = m.config_hash;
    out.blind = m.blind;
    out.config = m.config;
    if (!m.blind) out.truth = m.truth;

    std::vector<io::ManifestEntry> entries = m.recordings;
    std::sort(entries.begin(), entries.end(),
              [](const auto& x, const auto& y) { return x.index < y.index; });
    out.records.resize(entries.size());
    std::map<int, std::size_t> position;
    for (std::size_t i = 0; i < entries.size(); ++i) {
        out.records[i] = {entries[i].index, entries[i].voltage, entries[i].start_time,
                          entries[i].file, std::nullopt, "", 0};
        position[entries[i].index] = i;
    }

    auto load = [&](std::size_t i) {
        const auto& e = entries[i];
        Recording rec;
        rec.index = e.index;
        rec.voltage = e.voltage;
        rec.start_time = e.start_time;
        rec.dwell_time = e.dwell_time;
        rec.counts = io::read_recording_csv(base_dir / e.file);
        if (static_cast<int>(rec.counts.size()) != e.n_channels) {
            throw FormatError(e.file + ": expected " + std::to_string(e.n_channels) +
                              " channels, found " + std::to_string(rec.counts.size()));
        }
        return rec;
    };

    std::vector<std::size_t> reference, fixed;
    for (std::size_t i = 0; i < entries.size(); ++i) {
        (entries[i].index % 2 ? reference : fixed).push_back(i);
    }

    parallel_for(reference.size(), parallel, [&](std::size_t j) {
        const std::size_t i = reference[j];
        detail::guarded(out.records[i], [&] { out.records[i].fit = fit_reference(load(i)); });
    });
    parallel_for(fixed.size(), parallel, [&](std::size_t j) {
        const std::size_t i = fixed[j];
        io::FitRecord& rec = out.records[i];
        auto ref = position.find(entries[i].index - 1);
        if (ref == position.end()) {
            rec.error = "reference recording " + std::to_string(entries[i].index - 1) + " missing";
            rec.error_code = 1;
            return;
        }
        const io::FitRecord& r = out.records[ref->second];
        if (!r.fit) {
            rec.error = "reference recording " + std::to_string(r.index) + " failed";
            rec.error_code = r.error_code;
            return;
        }
        detail::guarded(rec, [&] { rec.fit = fit_fixed_ramp(load(i), r.fit->b, r.fit->c); });
    });
    return out;
}

struct FitSummary {
    fs::path out;
    io::FitResults results;
    int exit_code = 0; // 0 all fitted, else the worst per-recording code
};

inline FitSummary fit(const FitCommandOptions& opts) {
    if (opts.parallel < 1) throw UsageError("--parallel must be at least 1");
    const io::Manifest m = io::load_manifest(opts.manifest);
    FitSummary s;
    s.results = fit_campaign(m, opts.manifest.parent_path(), opts.parallel);
    s.out = opts.out.empty() ? opts.manifest.parent_path() / "fits.json" : opts.out;
    io::write_text_file(s.out, io::dump(io::fit_results_to_json(s.results)));
    for (const auto& r : s.results.records) s.exit_code = std::max(s.exit_code, r.fit ? 0 : r.error_code);
    return s;
}

//
// analyze
//

struct AnalyzeOptions {
    fs::path fits;
    fs::path out_dir;
    std::optional<fs::path> config;        // overrides the config carried by the fits
    std::optional<fs::path> velocity_file; // overrides the config velocities
    bool blind = false;
};

struct Analysis {
    ShiftTable table;
    JointFitResult joint;
    ErrorMode mode = ErrorMode::scatter_inflated;
    std::vector<VelocityMeasurement> velocities;
    std::vector<std::string> velocity_methods_used;
    Measured velocity;
    MeasurementResult result;
    std::vector<std::string> warnings;
};

inline Analysis analyze_fits(const io::FitResults& fits, const io::Config& cfg,
                             const std::vector<VelocityMeasurement>& velocities,
                             const std::optional<std::vector<std::string>>& subset) {
    Analysis a;
    for (const auto& r : fits.records) {
        if (!r.fit) a.warnings.push_back("recording " + std::to_string(r.index) + ": fit failed: " + r.error);
    }
    const ExpectedShiftModel expected{cfg.analysis.expected_phase_coefficient,
                                      cfg.analysis.expected_speed_ratio};
    ShiftOptions shift;
    shift.reference = cfg.analysis.visibility_reference;
    shift.global_visibility = cfg.analysis.global_visibility;
    shift.global_visibility_sigma = cfg.analysis.global_visibility_sigma;
    a.table = build_shift_table(fits.successful(), expected, shift);
    a.warnings.insert(a.warnings.end(), a.table.warnings.begin(), a.table.warnings.end());

    JointFitOptions jopts;
    jopts.mode = cfg.analysis.error_mode;
    jopts.include_v3_prefactor = cfg.analysis.include_v3_prefactor;
    jopts.initial_phase_coefficient = cfg.analysis.expected_phase_coefficient;
    jopts.initial_speed_ratio = cfg.analysis.expected_speed_ratio;
    a.mode = jopts.mode;
    a.joint = joint_fit(a.table.points, jopts);

    if (velocities.empty()) {
        throw UsageError("no velocity measurements: add them to the config or pass --velocity-file");
    }
    a.velocities = velocities;
    a.velocity = combine_velocities(velocities, subset);
    for (const auto& v : velocities) {
        const bool used = subset ? std::find(subset->begin(), subset->end(), v.method) != subset->end()
                                 : v.method != "supersonic";
        if (used) a.velocity_methods_used.push_back(v.method);
    }
    a.result = extract_polarizability(a.joint.phase_coefficient, a.velocity, cfg.model.geometry,
                                      cfg.geometry_sigma, cfg.model.constants, a.joint.speed_ratio);
    return a;
}

inline Json geometry_to_json(const CapacitorGeometry& g) {
    return {{"half_length", g.half_length},
            {"gap_h", g.gap_h},
            {"septum_offset", g.septum_offset},
            {"gap_variance", g.gap_variance}};
}

/// alpha recomputed from a report document's own recorded inputs.
inline double recompute_alpha(const Json& report, const std::string& name = "report") {
    const io::Source src(name, report.dump());
    try {
        const Json& in = report.at("inputs");
        const Json& meas = report.at("measurement");
        const PhysicalConstants k = io::read_constants(io::Reader(in.at("constants"), src, {"inputs", "constants"}));
        CapacitorGeometry g{in.at("geometry").at("half_length").get<double>(),
                            in.at("geometry").at("gap_h").get<double>(),
                            in.at("geometry").at("septum_offset").get<double>(),
                            in.at("geometry").at("gap_variance").get<double>()};
        return alpha_for(meas.at("phase_coefficient").at("value").get<double>(),
                         meas.at("u").at("value").get<double>(), g, k);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(name + ": report lacks the inputs needed to recompute alpha (" +
                          std::string(e.what()) + ")");
    }
}

inline Json report_to_json(const io::FitResults& fits, const io::Config& cfg, const Analysis& a,
                           bool blind) {
    Json j = io::header("lipol-report");
    j["tool_version"] = io::tool_version();
    j["config_hash"] = fits.config_hash;
    j["blind"] = blind;
    j["inputs"] = {{"geometry", geometry_to_json(cfg.model.geometry)},
                   {"geometry_sigma",
                    {{"full_length", cfg.geometry_sigma.full_length}, {"gap_h", cfg.geometry_sigma.gap_h}}},
                   {"constants", io::constants_to_json(cfg.model.constants)},
                   {"velocities", io::velocities_to_json(a.velocities)},
                   {"expected_phase_coefficient", cfg.analysis.expected_phase_coefficient},
                   {"expected_speed_ratio", cfg.analysis.expected_speed_ratio},
                   {"visibility_reference", io::to_string(cfg.analysis.visibility_reference)},
                   {"include_v3_prefactor", cfg.analysis.include_v3_prefactor}};
    j["fits"] = io::fit_results_to_json(fits)["fits"];
    j["warnings"] = a.warnings;
    j["shift_table"] = Json::array();
    for (const auto& p : a.table.points) j["shift_table"].push_back(io::shift_point_to_json(p));
    j["joint_fit"] = io::joint_fit_to_json(a.joint, a.mode);
    j["velocity"] = {{"value", a.velocity.value},
                     {"sigma", a.velocity.sigma},
                     {"methods_used", a.velocity_methods_used}};
    const auto& r = a.result;
    j["measurement"] = {{"phase_coefficient", io::measured(r.phase_coefficient)},
                        {"speed_ratio", io::measured(r.speed_ratio)},
                        {"u", io::measured(r.u)},
                        {"alpha", io::measured(r.alpha)},
                        {"alpha_relative_uncertainty", r.alpha.relative()},
                        {"effective_length", r.effective_length},
                        {"budget", io::budget_to_json(r.budget)},
                        {"neglected", io::budget_to_json(r.neglected)}};
    if (!blind && fits.truth) {
        const auto& t = *fits.truth;
        auto cmp = [](double truth, const Measured& m) {
            return Json{{"truth", truth},
                        {"recovered", m.value},
                        {"sigma", m.sigma},
                        {"pull", m.sigma > 0 ? (m.value - truth) / m.sigma : 0.0}};
        };
        j["truth_comparison"] = {{"phase_coefficient", cmp(t.phase_coefficient, r.phase_coefficient)},
                                 {"speed_ratio", cmp(t.speed_ratio, r.speed_ratio)},
                                 {"velocity", cmp(t.velocity, r.u)},
                                 {"alpha", cmp(t.alpha, r.alpha)}};
    }
    return j;
}

struct AnalyzeSummary {
    fs::path report;
    Analysis analysis;
    Json document;
};

inline AnalyzeSummary analyze(const AnalyzeOptions& opts) {
    const io::FitResults fits = io::load_fit_results(opts.fits);
    io::Config cfg;
    if (opts.config) {
        cfg = io::load_config(*opts.config);
    } else {
        const io::Source src = io::Source::from_file(opts.fits);
        cfg = io::read_config(io::Reader(fits.config, src, {"config"}));
    }
    std::vector<VelocityMeasurement> velocities = cfg.velocities;
    std::optional<std::vector<std::string>> subset = cfg.velocity_subset;
    if (opts.velocity_file) {
        const io::VelocitySet v = io::load_velocities(*opts.velocity_file);
        velocities = v.measurements;
        subset = v.use;
    }
    const bool blind = opts.blind || fits.blind;

    AnalyzeSummary s;
    s.analysis = analyze_fits(fits, cfg, velocities, subset);
    s.document = report_to_json(fits, cfg, s.analysis, blind);

    // The report must reproduce its own alpha after serialization.
    const std::string text = io::dump(s.document);
    const double again = recompute_alpha(Json::parse(text));
    const double alpha = s.analysis.result.alpha.value;
    const double rel = std::abs(again - alpha) / std::abs(alpha);
    s.document["self_consistency"] = {{"alpha_recomputed", again}, {"relative_difference", rel}};
    if (rel > 1e-12) {
        throw NumericalError("report self-consistency check failed: alpha differs by " +
                             io::format_double(rel) + " relative");
    }

    const fs::path dir = opts.out_dir.empty() ? opts.fits.parent_path() : opts.out_dir;
    s.report = dir / "report.json";
    io::write_text_file(s.report, io::dump(s.document));

    const auto& pts = s.analysis.table.points;
    const auto& jf = s.analysis.joint;
    std::vector<std::vector<double>> phase_rows, vis_rows, curve_rows;
    double v_max = 0;
    for (std::size_t i = 0; i < pts.size(); ++i) {
        const auto& p = pts[i];
        phase_rows.push_back({static_cast<double>(p.index), p.voltage, p.phase_shift, p.phase_sigma,
                              jf.model_phase[i], p.phase_shift - jf.model_phase[i]});
        vis_rows.push_back({static_cast<double>(p.index), p.voltage, p.visibility_ratio,
                            p.visibility_sigma, jf.model_visibility[i],
                            p.visibility_ratio - jf.model_visibility[i]});
        v_max = std::max(v_max, std::abs(p.voltage));
    }
    const int steps = 200;
    const VelocityDistribution dist{1.0, jf.speed_ratio.value, cfg.analysis.include_v3_prefactor};
    for (int i = 0; i <= steps; ++i) {
        const double v = 1.05 * v_max * i / steps;
        const double phi = jf.phase_coefficient.value * v * v;
        const FringeAverage m = complex_fringe_average(phi, dist);
        curve_rows.push_back({v, phi, m.effective_phase, m.visibility_ratio});
    }
    io::write_text_file(dir / "phase_shift_vs_voltage.csv",
                        io::csv_table({"index", "voltage", "phase_shift", "phase_sigma", "model_phase",
                                       "residual"},
                                      phase_rows));
    io::write_text_file(dir / "visibility_vs_voltage.csv",
                        io::csv_table({"index", "voltage", "visibility_ratio", "visibility_sigma",
                                       "model_visibility", "residual"},
                                      vis_rows));
    io::write_text_file(dir / "model_curves.csv",
                        io::csv_table({"voltage", "phi_m", "effective_phase", "visibility_ratio"},
                                      curve_rows));
    return s;
}

//
// check
//

struct CheckReport {
    double effective_length = 0;
    CorrectionBounds bounds{};
    double polarizability = 0;
    double velocity = 0;
    double phase_coefficient = 0;
    double max_voltage = 0;
    double max_phase = 0;
    double velocity_fraction_change = 0;
    double supersonic_bare = 0;
    double supersonic = 0;
    double bragg_velocity = 0;
    double bragg_angle = 0;
    std::optional<Measured> combined_velocity;
};

inline CheckReport check(const io::Config& cfg) {
    const auto& m = cfg.model;
    const auto& c = cfg.check;
    const AtomSpecies& sp = m.beam.species;
    CheckReport r;
    r.effective_length = effective_length(m.geometry);
    r.bounds = correction_bounds(m.geometry);
    r.polarizability = sp.polarizability;
    r.velocity = m.beam.most_probable_velocity;
    r.phase_coefficient = phase_coefficient(sp, m.geometry, r.velocity, m.constants);
    r.max_voltage = c.max_voltage;
    r.max_phase = r.phase_coefficient * c.max_voltage * c.max_voltage;
    r.velocity_fraction_change =
        velocity_fraction_change(sp, r.velocity, r.effective_length, r.max_phase, m.constants);
    const double carrier = c.carrier_mass_u * m.constants.amu;
    r.supersonic_bare = supersonic_velocity(c.nozzle_temperature, carrier, 0.0, m.constants);
    r.supersonic = supersonic_velocity(c.nozzle_temperature, carrier, c.velocity_slip, m.constants);
    r.bragg_velocity = c.bragg_velocity;
    r.bragg_angle = bragg_angle(sp, c.bragg_velocity, c.laser_wavelength, m.constants);
    if (!cfg.velocities.empty()) {
        try {
            r.combined_velocity = combine_velocities(cfg.velocities, cfg.velocity_subset);
        } catch (const UsageError&) {
        }
    }
    return r;
}

inline Json check_to_json(const CheckReport& r) {
    Json j = io::header("lipol-check");
    j["tool_version"] = io::tool_version();
    j["effective_length"] = r.effective_length;
    j["correction_bounds"] = {{"fringe_field_exponential", r.bounds.exp_correction},
                              {"septum_offset_order", r.bounds.offset_correction},
                              {"gap_nonuniformity", r.bounds.gap_variance}};
    j["polarizability"] = r.polarizability;
    j["velocity"] = r.velocity;
    j["phase_coefficient"] = r.phase_coefficient;
    j["max_voltage"] = r.max_voltage;
    j["max_phase"] = r.max_phase;
    j["velocity_fraction_change"] = r.velocity_fraction_change;
    j["supersonic_velocity_bare"] = r.supersonic_bare;
    j["supersonic_velocity"] = r.supersonic;
    j["bragg_velocity"] = r.bragg_velocity;
    j["bragg_angle"] = r.bragg_angle;
    if (r.combined_velocity) j["combined_velocity"] = io::measured(*r.combined_velocity);
    return j;
}

inline std::string format_check(const CheckReport& r) {
    char buf[256];
    std::string s;
    auto line = [&](const char* fmt, auto... args) {
        std::snprintf(buf, sizeof buf, fmt, args...);
        s += buf;
        s += '\n';
    };
    line("effective length          %.4f mm", r.effective_length * 1e3);
    line("  exp(-2 pi a/h) bound    %.3e", r.bounds.exp_correction);
    line("  (x/h)^2 offset bound    %.3e", r.bounds.offset_correction);
    line("  gap variance / h^2      %.3e", r.bounds.gap_variance);
    line("phase coefficient         %.5e rad/V^2  (alpha %.4g m^3, u %.1f m/s)",
         r.phase_coefficient, r.polarizability, r.velocity);
    line("phase at %.0f V            %.4f rad", r.max_voltage, r.max_phase);
    line("dv/v at %.0f V             %.3e", r.max_voltage, r.velocity_fraction_change);
    line("supersonic velocity       %.2f m/s  (no slip %.2f m/s)", r.supersonic, r.supersonic_bare);
    line("Bragg angle at %.1f m/s  %.2f urad", r.bragg_velocity, r.bragg_angle * 1e6);
    if (r.combined_velocity) {
        line("combined velocity         %.2f +- %.2f m/s", r.combined_velocity->value,
             r.combined_velocity->sigma);
    }
    return s;
}

//
// report
//

/// Human-readable summary of a report file; verifies its self-consistency.
inline std::string summarize_report(const fs::path& path) {
    const io::Source src = io::Source::from_file(path);
    const Json j = io::parse_json(src);
    io::Reader r(j, src);
    io::check_format(r, "lipol-report");
    const double again = recompute_alpha(j, path.string());
    const auto get = [&](const char* section, const char* key) {
        return j.at(section).at(key).at("value").get<double>();
    };
    const auto sig = [&](const char* section, const char* key) {
        return j.at(section).at(key).at("sigma").get<double>();
    };
    const double alpha = get("measurement", "alpha");
    if (std::abs(again - alpha) > 1e-12 * std::abs(alpha)) {
        throw NumericalError(path.string() + ": alpha is not reproducible from the report inputs");
    }

    char buf[256];
    std::string s;
    auto line = [&](const char* fmt, auto... args) {
        std::snprintf(buf, sizeof buf, fmt, args...);
        s += buf;
        s += '\n';
    };
    line("alpha              (%.3f +- %.3f) x 1e-30 m^3  (%.3f %%)", alpha * 1e30,
         sig("measurement", "alpha") * 1e30, 100 * sig("measurement", "alpha") / alpha);
    line("phi_m / V^2        (%.5f +- %.5f) x 1e-4 rad/V^2", get("measurement", "phase_coefficient") * 1e4,
         sig("measurement", "phase_coefficient") * 1e4);
    line("S_par              %.3f +- %.3f", get("measurement", "speed_ratio"),
         sig("measurement", "speed_ratio"));
    line("u                  %.2f +- %.2f m/s", get("measurement", "u"), sig("measurement", "u"));
    line("shift points       %zu", j.at("shift_table").size());
    line("phase chi2         %.2f (extra phase sigma %.1f mrad)",
         j.at("joint_fit").at("chi2_phase").get<double>(),
         1e3 * j.at("joint_fit").at("extra_phase_sigma").get<double>());
    s += "budget (relative):\n";
    for (const auto& t : j.at("measurement").at("budget")) {
        line("  %-18s %.4f %%", t.at("source").get<std::string>().c_str(),
             100 * t.at("relative").get<double>());
    }
    s += "neglected (orders of magnitude):\n";
    for (const auto& t : j.at("measurement").at("neglected")) {
        line("  %-26s %.2e", t.at("source").get<std::string>().c_str(), t.at("relative").get<double>());
    }
    if (j.contains("truth_comparison")) {
        s += "truth comparison:\n";
        for (const auto& [key, v] : j.at("truth_comparison").items()) {
            line("  %-18s truth %.6g  recovered %.6g  pull %+.2f", key.c_str(),
                 v.at("truth").get<double>(), v.at("recovered").get<double>(), v.at("pull").get<double>());
        }
    }
    for (const auto& w : j.at("warnings")) s += "warning: " + w.get<std::string>() + "\n";
    return s;
}

} // namespace lipol::pipeline
