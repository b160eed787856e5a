#pragma once

// Closed-form physics of the septum capacitor interferometer: constants,
// geometry, the polarizability phase and the beam-velocity cross-checks.

#include <cmath>
#include <numbers>
#include <string>

#include "lipol/errors.hpp"

namespace lipol {

inline constexpr double pi = std::numbers::pi;
inline constexpr double two_pi = 2.0 * std::numbers::pi;

//
// Physical constants
//

struct PhysicalConstants {
    double epsilon0;  // F/m
    double hbar;      // J s
    double planck;    // J s
    double boltzmann; // J/K
    double amu;       // kg

    /// CODATA 2018 values; hbar is derived from the exact Planck constant.
    static constexpr PhysicalConstants codata2018() {
        constexpr double h = 6.62607015e-34;
        return {8.8541878128e-12, h / two_pi, h, 1.380649e-23, 1.66053906660e-27};
    }

    void validate() const {
        if (!(epsilon0 > 0 && hbar > 0 && planck > 0 && boltzmann > 0 && amu > 0)) {
            throw UsageError("physical constants must be strictly positive");
        }
        if (std::abs(planck / (two_pi * hbar) - 1.0) > 1e-12) {
            throw UsageError("planck and hbar disagree: planck must equal 2*pi*hbar");
        }
    }
};

/// Standard atomic weight of argon, the carrier gas of the supersonic beam.
inline constexpr double argon_mass_u = 39.948;
/// Atomic mass of 7Li.
inline constexpr double lithium7_mass_u = 7.0160034366;

struct AtomSpecies {
    std::string name;
    double mass;           // kg
    double polarizability; // volume polarizability, m^3 (U = -2 pi eps0 alpha E^2)

    static AtomSpecies lithium7(const PhysicalConstants& k = PhysicalConstants::codata2018()) {
        return {"7Li", lithium7_mass_u * k.amu, 24.33e-30};
    }

    void validate() const {
        if (!(mass > 0)) throw UsageError("species mass must be positive");
        if (!(polarizability > 0)) throw UsageError("species polarizability must be positive");
    }
};

/// Volume polarizability (m^3) to SI polarizability (C m^2 / V): alpha_SI = 4 pi eps0 alpha.
inline double to_si_polarizability(double volume_alpha, const PhysicalConstants& k) {
    return 2.0 * two_pi * k.epsilon0 * volume_alpha;
}

inline double from_si_polarizability(double si_alpha, const PhysicalConstants& k) {
    return si_alpha / (2.0 * two_pi * k.epsilon0);
}

/// Guarded septum capacitor. The high-voltage electrode spans z in [-a, +a];
/// the septum sits at mean distance gap_h from the electrodes.
struct CapacitorGeometry {
    double half_length;        // a, m
    double gap_h;              // <h>, m
    double septum_offset = 0;  // x, distance of the atoms from the septum, m
    double gap_variance = 0;   // <(h - <h>)^2>, m^2

    void validate() const {
        if (!(gap_h > 0 && gap_h < half_length)) {
            throw UsageError("capacitor geometry requires 0 < gap_h < half_length");
        }
        if (!(septum_offset >= 0 && septum_offset < gap_h)) {
            throw UsageError("capacitor geometry requires 0 <= septum_offset < gap_h");
        }
        if (!(gap_variance >= 0)) throw UsageError("gap variance must be nonnegative");
    }
};

/// One-sigma uncertainties on the measured capacitor dimensions.
struct GeometryUncertainty {
    double full_length = 0; // sigma of 2a, m
    double gap_h = 0;       // sigma of <h>, m
};

struct BeamModel {
    double most_probable_velocity; // u, m/s
    double speed_ratio;            // S_par
    AtomSpecies species;

    void validate() const {
        if (!(most_probable_velocity > 0)) throw UsageError("beam velocity must be positive");
        if (!(speed_ratio > 1)) throw UsageError("parallel speed ratio must exceed 1");
        species.validate();
    }
};

//
// Capacitor field
//

/// L_eff = 2a - 2<h>/pi. Exponentially small terms and the off-septum
/// correction are not applied; see correction_bounds().
inline double effective_length(const CapacitorGeometry& geom) {
    geom.validate();
    return 2.0 * geom.half_length - 2.0 * geom.gap_h / pi;
}

struct CorrectionBounds {
    double exp_correction;    // order of exp(-2 pi a / <h>), relative to L_eff
    double offset_correction; // (x/<h>)^2 order bound, relative to L_eff
    double gap_variance;      // <(h-<h>)^2>/<h>^2
};

/// Orders of magnitude of the neglected corrections to L_eff. Reported only.
/// The off-septum bound (x/<h>)^2 carries no prefactor (it is unpublished);
/// the true correction is asserted to stay below 1e-4 L_eff for x <~ 50 um.
inline CorrectionBounds correction_bounds(const CapacitorGeometry& geom) {
    geom.validate();
    const double r = geom.septum_offset / geom.gap_h;
    return {std::exp(-two_pi * geom.half_length / geom.gap_h), r * r,
            geom.gap_variance / (geom.gap_h * geom.gap_h)};
}

/// Integral of E^2 along the septum, (V0/<h>)^2 L_eff, in V^2/m.
inline double field_squared_integral(const CapacitorGeometry& geom, double voltage) {
    if (!std::isfinite(voltage)) throw UsageError("voltage must be finite");
    const double field = voltage / geom.gap_h;
    return field * field * effective_length(geom);
}

//
// Phases
//

/// Polarizability phase 2 pi eps0 alpha / (hbar v) * integral(E^2 dz).
inline double polarizability_phase(const AtomSpecies& species, double velocity,
                                   double field_sq_integral, const PhysicalConstants& k) {
    if (!(velocity > 0)) throw UsageError("atom velocity must be positive");
    return two_pi * k.epsilon0 * species.polarizability * field_sq_integral / (k.hbar * velocity);
}

/// phi_m / V0^2 at the most probable velocity u, in rad/V^2.
inline double phase_coefficient(const AtomSpecies& species, const CapacitorGeometry& geom,
                                double u, const PhysicalConstants& k) {
    if (!(u > 0)) throw UsageError("most probable velocity must be positive");
    const double leff = effective_length(geom);
    return two_pi * k.epsilon0 * species.polarizability * leff /
           (k.hbar * u * geom.gap_h * geom.gap_h);
}

//
// Beam velocity
//

/// Terminal velocity of a monatomic supersonic expansion, sqrt(5 kB T0 / m),
/// raised by the fractional velocity slip.
inline double supersonic_velocity(double nozzle_temperature, double carrier_mass,
                                  double slip_fraction, const PhysicalConstants& k) {
    if (!(nozzle_temperature > 0)) throw UsageError("nozzle temperature must be positive");
    if (!(carrier_mass > 0)) throw UsageError("carrier mass must be positive");
    if (!(slip_fraction >= 0)) throw UsageError("slip fraction must be nonnegative");
    return std::sqrt(5.0 * k.boltzmann * nozzle_temperature / carrier_mass) * (1.0 + slip_fraction);
}

inline double de_broglie_wavelength(const AtomSpecies& species, double velocity,
                                    const PhysicalConstants& k) {
    if (!(velocity > 0)) throw UsageError("atom velocity must be positive");
    return k.planck / (species.mass * velocity);
}

/// First-order Bragg angle planck / (m u lambda_L).
inline double bragg_angle(const AtomSpecies& species, double u, double laser_wavelength,
                          const PhysicalConstants& k) {
    if (!(u > 0 && laser_wavelength > 0)) {
        throw UsageError("bragg_angle requires positive velocity and wavelength");
    }
    return k.planck / (species.mass * u * laser_wavelength);
}

/// Inverse of bragg_angle: the velocity that diffracts at angle theta.
inline double velocity_from_bragg_angle(const AtomSpecies& species, double theta,
                                        double laser_wavelength, const PhysicalConstants& k) {
    if (!(theta > 0 && laser_wavelength > 0)) {
        throw UsageError("velocity_from_bragg_angle requires positive angle and wavelength");
    }
    return k.planck / (species.mass * theta * laser_wavelength);
}

/// Fractional velocity increase of an atom entering the field,
/// (lambda_dB / L_eff) * phase / 2 pi.
inline double velocity_fraction_change(const AtomSpecies& species, double velocity,
                                       double effective_len, double phase,
                                       const PhysicalConstants& k) {
    if (!(effective_len > 0)) throw UsageError("effective length must be positive");
    return de_broglie_wavelength(species, velocity, k) / effective_len * phase / two_pi;
}

} // namespace lipol
