// Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fails.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <random>
#include <string>
#include <vector>

#include "lipol/lipol.hpp"
#include "oracles.hpp"

using namespace lipol;
namespace fs = std::filesystem;

namespace {

const PhysicalConstants K = PhysicalConstants::codata2018();
const CapacitorGeometry PaperGeometry{25.00e-3, 2.056e-3, 50e-6, 0.0};
const fs::path ConfigDir = LIPOL_CONFIG_DIR;

struct Outcome {
    bool pass = true;
    std::string detail;

    void require(bool ok, const std::string& what) {
        pass = pass && ok;
        if (!detail.empty()) detail += "; ";
        detail += what + (ok ? "" : " [miss]");
    }
};

std::string fmt(const char* f, double x) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, x);
    return buf;
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double mean(const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

double stddev(const std::vector<double>& v) {
    const double m = mean(v);
    double s = 0;
    for (double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / static_cast<double>(v.size() - 1));
}

Outcome coefficient_identity() {
    Outcome o;
    const AtomSpecies li = AtomSpecies::lithium7(K);
    const double k = phase_coefficient(li, PaperGeometry, 1065.7, K);
    o.require(std::abs(k / 1.387e-4 - 1) <= 1.5e-3, "k = " + fmt("%.5e", k) + " rad/V^2 (0.15% of 1.387e-4)");
    o.require(std::abs(k - 1.387e-4) <= 0.002e-4, "within +-0.002e-4");
    return o;
}

Outcome extraction_inverse() {
    Outcome o;
    const auto r = extract_polarizability({1.3870e-4, 0.0010e-4}, {1065.7, 5.8}, PaperGeometry,
                                          {0.10e-3, 0.003e-3}, K);
    const double a = r.alpha.value * 1e30;
    const double rel = 100 * r.alpha.relative();
    o.require(std::abs(a - 24.33) <= 0.05, "alpha = " + fmt("%.3f", a) + "e-30 m^3");
    o.require(std::abs(rel - 0.66) <= 0.08, "total " + fmt("%.3f", rel) + "%");
    const auto largest = std::max_element(r.budget.begin(), r.budget.end(), [](const auto& x, const auto& y) {
        return x.relative < y.relative;
    });
    o.require(largest->source == "velocity", "largest term '" + largest->source + "'");
    return o;
}

Outcome velocity_cross_checks() {
    Outcome o;
    const double u_sup = supersonic_velocity(1073.0, argon_mass_u * K.amu, 0.01, K);
    o.require(std::abs(u_sup - 1068.4) <= 1.0, "supersonic " + fmt("%.2f", u_sup) + " m/s (1068.4 +- 1.0)");
    const double th = bragg_angle(AtomSpecies::lithium7(K), 1065.0, 671e-9, K) * 1e6;
    o.require(std::abs(th - 79.6) <= 0.2, "Bragg " + fmt("%.2f", th) + " urad");
    const Measured u = combine_velocities({{"doppler", 1066.4, 8.0}, {"bragg", 1065.0, 8.4}});
    o.require(std::abs(u.value - 1065.7) <= 0.1 && std::abs(u.sigma - 5.8) <= 0.1,
              "combined " + fmt("%.2f", u.value) + " +- " + fmt("%.2f", u.sigma) + " m/s");
    return o;
}

Outcome dispersion_model() {
    Outcome o;
    const VelocityDistribution d{1.0, 8.0, false};
    const double ratio = complex_fringe_average(3 * pi, d).visibility_ratio;
    const double ref = std::abs(oracle::fringe_average(3 * pi, 8.0));
    o.require(std::abs(ratio - ref) <= 1e-6, "|ratio - oracle| = " + fmt("%.1e", std::abs(ratio - ref)));

    double worst_ratio = 0, worst_rel = 0, worst_phase = 0;
    for (int i = 0; i <= 300; ++i) {
        const double phi = 3 * pi * i / 300;
        const auto exact = complex_fringe_average(phi, d);
        const auto approx = second_order_approximation(phi, d);
        worst_ratio = std::max(worst_ratio, std::abs(approx.visibility_ratio - exact.visibility_ratio));
        worst_rel = std::max(worst_rel, std::abs(approx.visibility_ratio / exact.visibility_ratio - 1));
        worst_phase = std::max(worst_phase, std::abs(approx.effective_phase - exact.effective_phase));
    }
    // "1%" on the ratio read as one percentage point of V/V0.
    o.require(worst_ratio <= 0.01, "2nd-order ratio gap " + fmt("%.4f", worst_ratio) + " (relative " +
                                       fmt("%.2f", 100 * worst_rel) + "%)");
    o.require(worst_phase <= 0.01, "phase gap " + fmt("%.2f", 1e3 * worst_phase) + " mrad");
    return o;
}

struct RoundTrip {
    std::vector<double> pulls, rel_sigma, sigma, speed_ratio;
};

RoundTrip round_trips(bool scatter, int seeds) {
    const fs::path root = fs::temp_directory_path() / (scatter ? "lipol_acc_scatter" : "lipol_acc_clean");
    fs::remove_all(root);
    std::string text = io::read_text_file(ConfigDir / "paper.json");
    if (!scatter) text.replace(text.find("\"scatter_enabled\": true"), 23, "\"scatter_enabled\": false");
    io::write_text_file(root / "config.json", text);

    RoundTrip rt;
    for (int s = 0; s < seeds; ++s) {
        const fs::path dir = root / std::to_string(s);
        const auto sim = pipeline::simulate({root / "config.json", dir, 1000 + static_cast<std::uint64_t>(s), false});
        const auto fits = pipeline::fit({sim.manifest, dir / "fits.json", 4});
        const auto an = pipeline::analyze({fits.out, dir, std::nullopt, ConfigDir / "velocities.json", false});
        const Measured k = an.analysis.joint.phase_coefficient;
        rt.pulls.push_back((k.value - 1.3870e-4) / k.sigma);
        rt.rel_sigma.push_back(k.relative());
        rt.sigma.push_back(k.sigma);
        rt.speed_ratio.push_back(an.analysis.joint.speed_ratio.value);
    }
    fs::remove_all(root);
    return rt;
}

Outcome end_to_end() {
    Outcome o;
    const RoundTrip clean = round_trips(false, 50);
    const RoundTrip noisy = round_trips(true, 50);
    for (const auto* rt : {&clean, &noisy}) {
        const std::string tag = rt == &clean ? "no scatter" : "scatter";
        o.require(std::abs(mean(rt->pulls)) < 0.3, tag + ": pull mean " + fmt("%+.3f", mean(rt->pulls)) +
                                                       " (sd " + fmt("%.2f", stddev(rt->pulls)) + ")");
        const auto [lo, hi] = std::minmax_element(rt->speed_ratio.begin(), rt->speed_ratio.end());
        o.require(*lo >= 7.5 && *hi <= 8.5, tag + ": S in [" + fmt("%.3f", *lo) + ", " + fmt("%.3f", *hi) + "]");
    }
    const double med_clean = median(clean.rel_sigma), med_noisy = median(noisy.rel_sigma);
    o.require(med_clean <= 3e-3, "median sigma_k/k " + fmt("%.3f", 100 * med_clean) + "% without scatter");
    o.require(med_noisy > med_clean, "with scatter " + fmt("%.3f", 100 * med_noisy) + "%");
    return o;
}

Outcome estimator_property() {
    Outcome o;
    std::mt19937_64 rng(2024);
    std::uniform_real_distribution<double> rate(-2e-3, 2e-3), t0(0, 2e4), dt(1, 500), phase0(-10, 10);
    double worst = 0;
    for (int i = 0; i < 100; ++i) {
        const double d = rate(rng), t = t0(rng), step = dt(rng), p0 = phase0(rng);
        auto make = [&](int index, double time, double volts) {
            FringeFit f;
            f.index = index;
            f.voltage = volts;
            f.start_time = time;
            f.mean_phase = p0 + d * time;
            f.mean_phase_sigma = 2e-3;
            f.visibility = 0.62;
            f.visibility_sigma = 1e-3;
            return f;
        };
        const auto p = phase_shift_estimator(make(1, t, 0), make(2, t + step, 100), make(3, t + 2 * step, 0));
        worst = std::max(worst, std::abs(p.phase_shift));
    }
    o.require(worst <= 1e-12, "max |shift| " + fmt("%.1e", worst) + " rad over 100 drift rates");
    return o;
}

Outcome fit_statistics() {
    Outcome o;
    const io::Config cfg = io::load_config(ConfigDir / "paper.json");
    std::vector<double> off, high;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const Campaign c = generate_campaign(cfg.model, cfg.schedule(), 300 + seed);
        for (std::size_t i = 0; i < c.recordings.size(); ++i) {
            const Recording& r = c.recordings[i];
            if (r.voltage == 0.0) {
                off.push_back(fit_reference(r).mean_phase_sigma);
            } else if (r.voltage == 440.0) {
                const FringeFit ref = fit_reference(c.recordings[i - 1]);
                high.push_back(fit_fixed_ramp(r, ref.b, ref.c).mean_phase_sigma);
            }
        }
    }
    const auto [off_lo, off_hi] = std::minmax_element(off.begin(), off.end());
    const auto [hi_lo, hi_hi] = std::minmax_element(high.begin(), high.end());
    o.require(*off_lo >= 1.5e-3 && *off_hi <= 4e-3,
              "field-off sigma " + fmt("%.2f", 1e3 * *off_lo) + "-" + fmt("%.2f", 1e3 * *off_hi) + " mrad");
    o.require(*hi_lo >= 15e-3 && *hi_hi <= 30e-3,
              "440 V sigma " + fmt("%.1f", 1e3 * *hi_lo) + "-" + fmt("%.1f", 1e3 * *hi_hi) + " mrad");
    return o;
}

Outcome velocity_change_anchor() {
    Outcome o;
    const auto r = pipeline::check(io::load_config(ConfigDir / "paper.json"));
    o.require(r.max_voltage == 450.0, "V_max 450 V");
    o.require(r.velocity_fraction_change >= 4e-9 && r.velocity_fraction_change <= 6e-9,
              "dv/v = " + fmt("%.3e", r.velocity_fraction_change));
    return o;
}

} // namespace

int main() {
    struct Criterion {
        int number;
        const char* name;
        Outcome (*run)();
    };
    const Criterion criteria[] = {
        {1, "coefficient identity", coefficient_identity},
        {2, "extraction inverse", extraction_inverse},
        {3, "velocity cross-checks", velocity_cross_checks},
        {4, "dispersion model", dispersion_model},
        {5, "end-to-end round trip", end_to_end},
        {6, "estimator property", estimator_property},
        {7, "fit statistics", fit_statistics},
        {8, "dv/v anchor", velocity_change_anchor},
    };
    int failed = 0;
    for (const auto& c : criteria) {
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o.pass = false;
            o.detail = std::string("exception: ") + e.what();
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::printf("%s criterion %d (%s): %s [%.1f s]\n", o.pass ? "PASS" : "FAIL", c.number, c.name,
                    o.detail.c_str(), secs);
        std::fflush(stdout);
        failed += !o.pass;
    }
    std::printf("%d/%zu criteria passed\n", static_cast<int>(std::size(criteria)) - failed, std::size(criteria));
    return failed ? 1 : 0;
}
