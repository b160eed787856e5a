#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numeric>

#include "lipol/fringe_fit.hpp"
#include "lipol/synthetic_experiment.hpp"
#include "oracles.hpp"

using namespace lipol;
using Catch::Approx;

namespace {

SimulationModel paper_model() {
    SimulationModel m;
    m.phase_coefficient_override = 1.3870e-4;
    return m;
}

VoltageSchedule paper_schedule(const SimulationModel& m, int count = 44) {
    return VoltageSchedule::alternating(count, 10.0, m.recording.recording_duration(), 30.0);
}

std::vector<double> expected_counts(const SimulationModel& m, const Recording& r) {
    std::vector<double> out;
    const auto& t = *r.truth;
    for (int n = 0; n < m.recording.n_channels; ++n) {
        out.push_back(t.I0 * (1 + t.visibility * std::cos(t.a + t.b * n + t.c * n * n)));
    }
    return out;
}

} // namespace

TEST_CASE("seed derivation is stable", "[synthetic]") {
    // First splitmix64 output for state 0.
    REQUIRE(splitmix64(0) == 0xE220A8397B1DCDAFull);
    REQUIRE(derive_seed(42, 1) != derive_seed(42, 2));
    REQUIRE(derive_seed(42, 1) != derive_seed(43, 1));
    REQUIRE(derive_seed(42, 7) == splitmix64(splitmix64(42) ^ 7));
}

TEST_CASE("voltage schedule", "[synthetic]") {
    const auto m = paper_model();
    const auto s = paper_schedule(m);
    REQUIRE(s.entries.size() == 44);
    int off = 0, on = 0;
    for (const auto& e : s.entries) {
        if (e.index % 2) {
            REQUIRE(e.voltage == 0.0);
            ++off;
        } else {
            REQUIRE(e.voltage == 10.0 * e.index);
            ++on;
        }
    }
    REQUIRE(off == 22);
    REQUIRE(on == 22);
    REQUIRE(s.entries[1].start_time - s.entries[0].start_time == Approx(471 * 0.36 + 30.0));
    REQUIRE_NOTHROW(s.validate());

    VoltageSchedule bad = s;
    bad.entries[2].voltage = 5.0;
    REQUIRE_THROWS_AS(bad.validate(), UsageError);
    bad = s;
    bad.entries[3].start_time = bad.entries[2].start_time;
    REQUIRE_THROWS_AS(bad.validate(), UsageError);
    REQUIRE_THROWS_AS(VoltageSchedule{}.validate(), UsageError);
}

TEST_CASE("campaigns are deterministic", "[synthetic]") {
    const auto m = paper_model();
    const auto s = paper_schedule(m, 3);
    const auto c1 = generate_campaign(m, s, 99);
    const auto c2 = generate_campaign(m, s, 99);
    const auto c3 = generate_campaign(m, s, 100);
    REQUIRE(c1.recordings.size() == 3);
    REQUIRE(c1.recordings[1].voltage == 20.0);
    for (std::size_t i = 0; i < 3; ++i) {
        REQUIRE(c1.recordings[i].counts == c2.recordings[i].counts);
        REQUIRE(c1.recording_seeds[i] == derive_seed(99, c1.recordings[i].index));
    }
    REQUIRE(c1.recordings[0].counts != c3.recordings[0].counts);
}

TEST_CASE("generated counts follow the fringe model", "[synthetic]") {
    auto m = paper_model();
    SECTION("noiseless counts equal the expected signal") {
        m.recording.noise_enabled = false;
        const auto r = generate_recording(m, 2, 260.0, 200.0, 1);
        const auto e = expected_counts(m, r);
        for (std::size_t n = 0; n < e.size(); ++n) {
            REQUIRE(r.counts[n] == Approx(e[n]).epsilon(1e-12));
        }
    }
    SECTION("channel mean within 5 sigma of the expected mean") {
        for (double F : {1.0, 14.0}) {
            m.recording.excess_noise_factor = F;
            for (int seed = 0; seed < 20; ++seed) {
                const auto r = generate_recording(m, 1 + 2 * (seed % 2), seed % 2 ? 0.0 : 200.0,
                                                  0.0, 500 + seed);
                const auto e = expected_counts(m, r);
                const double mean_c = std::accumulate(r.counts.begin(), r.counts.end(), 0.0) / 471;
                const double mean_e = std::accumulate(e.begin(), e.end(), 0.0) / 471;
                REQUIRE(std::abs(mean_c - mean_e) < 5 * std::sqrt(F * mean_e / 471));
                for (double c : r.counts) {
                    REQUIRE(c >= 0);
                    REQUIRE(c == std::floor(c));
                }
            }
        }
    }
    SECTION("count variance equals the excess-noise factor times the mean") {
        for (double F : {1.0, 14.0}) {
            m.recording.excess_noise_factor = F;
            double sum = 0;
            int n = 0;
            for (int seed = 0; seed < 10; ++seed) {
                const auto r = generate_recording(m, 1, 0.0, 0.0, 900 + seed);
                const auto e = expected_counts(m, r);
                for (std::size_t j = 0; j < e.size(); ++j, ++n) {
                    sum += (r.counts[j] - e[j]) * (r.counts[j] - e[j]) / e[j];
                }
            }
            REQUIRE(sum / n == Approx(F).epsilon(0.08));
        }
    }
    SECTION("260 V: phase offset near 3 pi with the dispersion-reduced visibility") {
        m.phase_coefficient_override.reset();
        const auto r = generate_recording(m, 26, 260.0, 0.0, 3);
        const auto& t = *r.truth;
        REQUIRE(t.phi_m == Approx(9.378).margin(0.005));
        REQUIRE(t.effective_phase == Approx(3 * pi).margin(0.1));
        const double ref = std::abs(oracle::fringe_average(t.phi_m, 8.0));
        REQUIRE(t.visibility_ratio == Approx(ref).margin(1e-6));
        REQUIRE(t.visibility == Approx(0.62 * ref).margin(1e-6));
    }
    SECTION("overflow guard") {
        m.recording.mean_rate = 1e20;
        REQUIRE_THROWS_AS(generate_recording(m, 1, 0.0, 0.0, 1), NumericalError);
    }
    SECTION("invalid configuration") {
        m.recording.n_channels = 1;
        REQUIRE_THROWS_AS(generate_recording(m, 1, 0.0, 0.0, 1), UsageError);
        m = paper_model();
        m.recording.base_visibility = 1.5;
        REQUIRE_THROWS_AS(generate_recording(m, 1, 0.0, 0.0, 1), UsageError);
        m = paper_model();
        m.drift.scatter_rms = -1;
        REQUIRE_THROWS_AS(generate_recording(m, 1, 0.0, 0.0, 1), UsageError);
    }
}

TEST_CASE("noiseless limit converges to the truth", "[synthetic]") {
    auto m = paper_model();
    m.recording.excess_noise_factor = 1.0;
    double prev = INFINITY;
    for (double scale : {1.0, 1e2, 1e4, 1e6}) {
        m.recording.mean_rate = 1e5 * scale;
        const auto r = generate_recording(m, 1, 0.0, 0.0, 77);
        const auto f = fit_reference(r);
        const double err = std::abs(std::remainder(
            f.mean_phase - mean_phase_of(r.truth->a, r.truth->b, r.truth->c, 471), two_pi));
        REQUIRE(err < std::max(prev, 1e-12) * 1.5);
        prev = err;
    }
    REQUIRE(prev < 1e-5);
}

TEST_CASE("generator is unbiased over 200 seeds", "[synthetic]") {
    auto m = paper_model();
    std::vector<double> d;
    for (int seed = 0; seed < 200; ++seed) {
        const auto r = generate_recording(m, 1, 0.0, 0.0, 10000 + seed);
        const auto f = fit_reference(r);
        d.push_back(std::remainder(
            f.mean_phase - mean_phase_of(r.truth->a, r.truth->b, r.truth->c, 471), two_pi));
    }
    const double mean = std::accumulate(d.begin(), d.end(), 0.0) / d.size();
    double var = 0;
    for (double x : d) var += (x - mean) * (x - mean) / (d.size() - 1);
    REQUIRE(std::abs(mean) < 3 * std::sqrt(var / d.size()));
}

TEST_CASE("phase scatter reproduces its target rms", "[synthetic]") {
    auto m = paper_model();
    const auto s = paper_schedule(m);
    const double drift = m.drift.rate_per_second();
    double sum2 = 0;
    int n = 0;
    for (int seed = 0; seed < 100; ++seed) {
        const auto c = generate_campaign(m, s, seed);
        for (const auto& r : c.recordings) {
            if (r.voltage != 0.0) continue;
            const auto f = fit_reference(r);
            // Remove the deterministic part: origin, drift and ramp.
            const double regular = m.recording.phase_origin + drift * r.start_time +
                                   mean_phase_of(0.0, r.truth->b, r.truth->c, 471);
            const double s_hat = std::remainder(f.mean_phase - regular, two_pi);
            sum2 += s_hat * s_hat;
            ++n;
        }
    }
    const double rms = std::sqrt(sum2 / n);
    REQUIRE(rms == Approx(33e-3).epsilon(0.2));
}
