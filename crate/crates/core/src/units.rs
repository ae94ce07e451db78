//! Physical constants. Energies are kcal/mol.

/// Boltzmann constant in kcal/(mol·K).
pub const BOLTZMANN_KCAL: f64 = 0.0019872041;

/// Room temperature used by the free-energy pipeline, in kelvin.
pub const DEFAULT_TEMPERATURE: f64 = 300.0;

/// Thermal energy k_B·T in kcal/mol.
#[inline]
pub fn kt(temperature: f64) -> f64 {
    BOLTZMANN_KCAL * temperature
}
