#pragma once

// Synthetic recording campaigns: alternating field-off / field-on fringe
// scans with a quadratic piezo ramp, counting noise, a linear thermal phase
// drift and an optional quasi-periodic phase scatter.

#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include "lipol/errors.hpp"
#include "lipol/physics_core.hpp"
#include "lipol/random.hpp"
#include "lipol/signal_model.hpp"

namespace lipol {

struct RecordingConfig {
    int n_channels = 471;
    double dwell_time = 0.36;       // s per channel
    double mean_rate = 1e5;         // counts/s
    double base_visibility = 0.62;  // V0
    double ramp_b = two_pi * 6.0 / 470.0; // rad/channel, about six fringes per scan
    double ramp_c = 1e-6;           // rad/channel^2, piezo nonlinearity
    double phase_origin = 0.5;      // a0, rad
    // Count variance / mean. 14 reproduces the quoted 2-3 mrad field-off and
    // ~23 mrad high-field mean-phase errors; 1 is pure Poisson.
    double excess_noise_factor = 14.0;
    bool noise_enabled = true;
    double collimation_slit_e1 = 18e-6; // metadata only
    double detection_slit_eD = 50e-6;   // metadata only

    double recording_duration() const { return n_channels * dwell_time; }

    void validate() const {
        if (n_channels < 2) throw UsageError("recording needs at least 2 channels");
        if (!(dwell_time > 0)) throw UsageError("dwell time must be positive");
        if (!(mean_rate >= 0)) throw UsageError("mean rate must be nonnegative");
        if (!(base_visibility >= 0 && base_visibility <= 1)) {
            throw UsageError("base visibility must lie in [0, 1]");
        }
        if (!(excess_noise_factor >= 1)) throw UsageError("excess noise factor must be >= 1");
    }
};

struct DriftModel {
    double linear_drift = 7.5e-3; // rad/min
    bool drift_enabled = true;
    double scatter_rms = 33e-3;   // rad
    double scatter_period = 8.0;  // recordings
    double scatter_white_fraction = 0.25; // share of the scatter variance that is white
    double scatter_phase0 = 0.0;  // phase of the periodic component, set per campaign
    bool scatter_enabled = true;

    double rate_per_second() const { return drift_enabled ? linear_drift / 60.0 : 0.0; }

    void validate() const {
        if (!(scatter_rms >= 0)) throw UsageError("scatter rms must be nonnegative");
        if (!(scatter_period > 0)) throw UsageError("scatter period must be positive");
        if (!(scatter_white_fraction >= 0 && scatter_white_fraction <= 1)) {
            throw UsageError("scatter white fraction must lie in [0, 1]");
        }
    }
};

struct ScheduleEntry {
    int index;
    double voltage;    // V
    double start_time; // s
};

struct VoltageSchedule {
    std::vector<ScheduleEntry> entries;

    /// Recordings 1..count, V = 0 for odd i and volts_per_index * i for even i,
    /// started back to back with the given dead time in between.
    static VoltageSchedule alternating(int count, double volts_per_index, double recording_duration,
                                       double dead_time) {
        VoltageSchedule s;
        for (int i = 1; i <= count; ++i) {
            const double v = (i % 2 == 1) ? 0.0 : volts_per_index * i;
            s.entries.push_back({i, v, (i - 1) * (recording_duration + dead_time)});
        }
        return s;
    }

    void validate() const {
        if (entries.empty()) throw UsageError("voltage schedule is empty");
        for (std::size_t j = 0; j < entries.size(); ++j) {
            if (j > 0 && !(entries[j].start_time > entries[j - 1].start_time)) {
                throw UsageError("schedule start times must be strictly increasing");
            }
            if (entries[j].index % 2 != 0 && entries[j].voltage != 0.0) {
                throw UsageError("odd schedule entries must be field-off (V = 0)");
            }
            if (!std::isfinite(entries[j].voltage)) throw UsageError("schedule voltage not finite");
        }
    }
};

/// Hidden parameters behind a generated recording.
struct RecordingTruth {
    double I0;              // counts per channel
    double visibility;      // V0 * visibility ratio
    double a;               // rad, includes drift, scatter and effective phase
    double b;               // rad/channel, includes intra-recording drift
    double c;               // rad/channel^2
    double phi_m;           // monochromatic phase, rad
    double effective_phase; // rad
    double visibility_ratio;
    double scatter;         // rad
};

struct Recording {
    int index = 0;
    double voltage = 0;
    double start_time = 0;
    double dwell_time = 0.36;
    std::vector<double> counts; // integral values unless noise is disabled
    std::optional<RecordingTruth> truth;

    void validate() const {
        if (counts.size() < 2) throw UsageError("recording has fewer than 2 channels");
        for (double c : counts) {
            if (!(c >= 0) || !std::isfinite(c)) throw UsageError("recording counts must be >= 0");
        }
    }
};

/// Everything the generator needs besides the schedule and the seed.
struct SimulationModel {
    RecordingConfig recording;
    DriftModel drift;
    BeamModel beam{1065.7, 8.0, AtomSpecies::lithium7()};
    CapacitorGeometry geometry{25e-3, 2.056e-3, 50e-6, 0.0};
    PhysicalConstants constants = PhysicalConstants::codata2018();
    std::optional<double> phase_coefficient_override; // rad/V^2
    DispersionOptions dispersion;

    double phase_coefficient() const {
        if (phase_coefficient_override) return *phase_coefficient_override;
        return lipol::phase_coefficient(beam.species, geometry, beam.most_probable_velocity,
                                        constants);
    }

    VelocityDistribution velocity_distribution() const {
        return {beam.most_probable_velocity, beam.speed_ratio, false};
    }

    void validate() const {
        recording.validate();
        drift.validate();
        beam.validate();
        geometry.validate();
        constants.validate();
    }
};

/// Phase scatter of recording i: a sinusoid in the recording index plus a
/// white component, scaled so the total rms equals scatter_rms.
inline double scatter_offset(const DriftModel& drift, int index, Rng& rng) {
    if (!drift.scatter_enabled || drift.scatter_rms == 0.0) return 0.0;
    std::normal_distribution<double> normal;
    const double white = normal(rng);
    const double periodic =
        std::sqrt(2.0) * std::sin(two_pi * index / drift.scatter_period + drift.scatter_phase0);
    return drift.scatter_rms * (std::sqrt(1.0 - drift.scatter_white_fraction) * periodic +
                                std::sqrt(drift.scatter_white_fraction) * white);
}

inline Recording generate_recording(const SimulationModel& model, int index, double voltage,
                                    double start_time, std::uint64_t seed) {
    model.validate();
    const RecordingConfig& cfg = model.recording;
    Rng rng(seed);

    const double scatter = scatter_offset(model.drift, index, rng);
    const double phi_m = model.phase_coefficient() * voltage * voltage;
    const FringeAverage avg =
        complex_fringe_average(phi_m, model.velocity_distribution(), model.dispersion);

    const double I0 = cfg.mean_rate * cfg.dwell_time;
    const double drift_rate = model.drift.rate_per_second();
    const double a = cfg.phase_origin + drift_rate * start_time + scatter;
    const double b = cfg.ramp_b + drift_rate * cfg.dwell_time;

    Recording rec;
    rec.index = index;
    rec.voltage = voltage;
    rec.start_time = start_time;
    rec.dwell_time = cfg.dwell_time;
    rec.counts.resize(static_cast<std::size_t>(cfg.n_channels));
    for (int n = 0; n < cfg.n_channels; ++n) {
        const double psi = a + b * n + cfg.ramp_c * n * n;
        const double expected = dispersed_signal(psi, I0, cfg.base_visibility, avg);
        if (!std::isfinite(expected) || expected > 1e15) {
            throw NumericalError("expected counts overflow in recording " + std::to_string(index));
        }
        rec.counts[static_cast<std::size_t>(n)] =
            cfg.noise_enabled ? sample_counts(rng, expected, cfg.excess_noise_factor) : expected;
    }
    rec.truth = RecordingTruth{I0,
                               cfg.base_visibility * avg.visibility_ratio,
                               a + avg.effective_phase,
                               b,
                               cfg.ramp_c,
                               phi_m,
                               avg.effective_phase,
                               avg.visibility_ratio,
                               scatter};
    return rec;
}

struct Campaign {
    std::uint64_t seed = 0;
    double phase_coefficient = 0; // rad/V^2 used to generate the data
    double scatter_phase0 = 0;
    std::vector<std::uint64_t> recording_seeds;
    std::vector<Recording> recordings;
};

/// Seed reserved for campaign-level draws (the scatter phase).
inline constexpr std::uint64_t campaign_stream = 0xFFFFFFFFFFFFFFFFull;

inline Campaign generate_campaign(const SimulationModel& model, const VoltageSchedule& schedule,
                                  std::uint64_t seed) {
    schedule.validate();
    SimulationModel m = model;
    Rng campaign_rng(derive_seed(seed, campaign_stream));
    m.drift.scatter_phase0 = std::uniform_real_distribution<double>(0.0, two_pi)(campaign_rng);

    Campaign c;
    c.seed = seed;
    c.phase_coefficient = m.phase_coefficient();
    c.scatter_phase0 = m.drift.scatter_phase0;
    for (const auto& e : schedule.entries) {
        const std::uint64_t s = derive_seed(seed, static_cast<std::uint64_t>(e.index));
        c.recording_seeds.push_back(s);
        c.recordings.push_back(generate_recording(m, e.index, e.voltage, e.start_time, s));
    }
    return c;
}

} // namespace lipol
