//! Complex channel arithmetic and free-space propagation.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::geometry::{Direction, Position};
use crate::sim::PathRecord;

pub type ComplexValue = Complex64;

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Vacuum permittivity, F/m.
pub const VACUUM_PERMITTIVITY: f64 = 8.854_187_812_8e-12;

pub fn wavelength(f: f64) -> f64 {
    SPEED_OF_LIGHT / f
}

/// Free-space gain `c/(4 pi d f) * exp(-j 2 pi f d / c)` over distance `d`.
pub fn free_space_gain(d: f64, f: f64) -> Result<ComplexValue> {
    if !(d > 0.0 && d.is_finite()) {
        return domain(format!("propagation distance must be positive, got {d}"));
    }
    if !(f > 0.0 && f.is_finite()) {
        return domain(format!("frequency must be positive, got {f}"));
    }
    Ok(free_space_gain_unchecked(d, f))
}

#[inline]
pub(crate) fn free_space_gain_unchecked(d: f64, f: f64) -> ComplexValue {
    let amplitude = SPEED_OF_LIGHT / (4.0 * PI * d * f);
    let phase = phase_delay(d, f);
    ComplexValue::from_polar(amplitude, phase)
}

/// Propagation phase `-2 pi f d / c`, reduced modulo 2 pi.
///
/// The cycle count `f d / c` is reduced before scaling by 2 pi so that long
/// paths at GHz frequencies keep full precision.
#[inline]
fn phase_delay(d: f64, f: f64) -> f64 {
    let cycles = f * d / SPEED_OF_LIGHT;
    -2.0 * PI * (cycles - cycles.round())
}

/// Sum of complex path contributions.
pub fn multipath_sum(paths: &[ComplexValue]) -> Result<ComplexValue> {
    if paths.is_empty() {
        return domain("multipath sum over an empty path list");
    }
    Ok(paths.iter().sum())
}

/// Amplitude and phase of an I/Q pair; phase in (-pi, pi].
pub fn iq_to_amp_phase(v: ComplexValue) -> (f64, f64) {
    if v.re == 0.0 && v.im == 0.0 {
        return (0.0, 0.0);
    }
    let phase = v.im.atan2(v.re);
    // atan2 returns -pi for (-x, -0.0)
    let phase = if phase == -PI { PI } else { phase };
    (v.norm(), phase)
}

/// Carrier plus optional OFDM subcarrier grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrequencyConfig {
    pub carrier_hz: f64,
    #[serde(default)]
    pub subcarrier_spacing_hz: f64,
    #[serde(default)]
    pub subcarrier_index_range: Option<(i32, i32)>,
}

impl FrequencyConfig {
    /// Default OFDM spacing for 20 MHz WiFi channels.
    pub const WIFI_SUBCARRIER_SPACING_HZ: f64 = 312_500.0;

    pub fn carrier(carrier_hz: f64) -> Result<Self> {
        Self::new(carrier_hz, Self::WIFI_SUBCARRIER_SPACING_HZ, None)
    }

    pub fn new(carrier_hz: f64, spacing_hz: f64, range: Option<(i32, i32)>) -> Result<Self> {
        let cfg = FrequencyConfig {
            carrier_hz,
            subcarrier_spacing_hz: spacing_hz,
            subcarrier_index_range: range,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.carrier_hz > 0.0 && self.carrier_hz.is_finite()) {
            return domain(format!("carrier must be positive, got {}", self.carrier_hz));
        }
        if !(self.subcarrier_spacing_hz >= 0.0 && self.subcarrier_spacing_hz.is_finite()) {
            return domain("subcarrier spacing must be non-negative");
        }
        if let Some((lo, hi)) = self.subcarrier_index_range {
            if lo != -hi || lo > hi {
                return domain(format!("subcarrier range {lo}..={hi} is not symmetric about 0"));
            }
        }
        Ok(())
    }

    /// `f_c + k * spacing`.
    pub fn subcarrier_frequency(&self, k: i32) -> f64 {
        self.carrier_hz + f64::from(k) * self.subcarrier_spacing_hz
    }

    pub fn subcarrier_indices(&self) -> Vec<i32> {
        match self.subcarrier_index_range {
            Some((lo, hi)) => (lo..=hi).collect(),
            None => vec![0],
        }
    }
}

/// One channel measurement at a receiver location.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub position: Position,
    pub channel: ComplexValue,
    pub doas: Vec<Direction>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub paths: Option<Vec<PathRecord>>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn unit_amplitude_distance() {
        for f in [1e9, 2.412e9, 5.8e9] {
            let d = SPEED_OF_LIGHT / (4.0 * PI * f);
            let g = free_space_gain(d, f).unwrap();
            assert_relative_eq!(g.norm(), 1.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn one_wavelength_has_zero_phase() {
        for f in [1e9, 2.412e9, 5.8e9] {
            let g = free_space_gain(wavelength(f), f).unwrap();
            assert!(g.arg().abs() < 1e-9, "phase {}", g.arg());
        }
    }

    #[test]
    fn ten_meters_at_wifi_channel_one() {
        // c / (4 pi * 10 * 2.412e9)
        let g = free_space_gain(10.0, 2.412e9).unwrap();
        assert_relative_eq!(g.norm(), 9.890_848_174e-4, max_relative = 1e-9);
    }

    #[test]
    fn rejects_non_positive_inputs() {
        assert!(free_space_gain(0.0, 1e9).is_err());
        assert!(free_space_gain(-1.0, 1e9).is_err());
        assert!(free_space_gain(1.0, 0.0).is_err());
    }

    #[test]
    fn multipath_examples() {
        let one = ComplexValue::new(1.0, 0.0);
        assert_eq!(multipath_sum(&[one]).unwrap(), one);
        assert_eq!(multipath_sum(&[one, -one]).unwrap(), ComplexValue::new(0.0, 0.0));
        let a = ComplexValue::from_polar(0.3, 0.2);
        let b = ComplexValue::from_polar(0.3, 0.2 + PI / 2.0);
        assert_relative_eq!(multipath_sum(&[a, b]).unwrap().norm(), 0.3 * 2f64.sqrt(), epsilon = 1e-15);
        assert!(multipath_sum(&[]).is_err());
    }

    #[test]
    fn iq_conversion() {
        assert_eq!(iq_to_amp_phase(ComplexValue::new(1.0, 0.0)), (1.0, 0.0));
        let (a, p) = iq_to_amp_phase(ComplexValue::new(0.0, 1.0));
        assert_eq!(a, 1.0);
        assert_relative_eq!(p, PI / 2.0);
        let (a, p) = iq_to_amp_phase(ComplexValue::new(-1.0, -1.0));
        assert_relative_eq!(a, 2f64.sqrt());
        assert_relative_eq!(p, -3.0 * PI / 4.0);
        assert_eq!(iq_to_amp_phase(ComplexValue::new(0.0, 0.0)), (0.0, 0.0));
        assert_eq!(iq_to_amp_phase(ComplexValue::new(-1.0, -0.0)).1, PI);
    }

    #[test]
    fn subcarrier_frequencies() {
        let cfg = FrequencyConfig::new(2.412e9, 312_500.0, Some((-26, 26))).unwrap();
        assert_eq!(cfg.subcarrier_frequency(0), 2.412e9);
        assert_eq!(cfg.subcarrier_frequency(26) - 2.412e9, 8.125e6);
        assert_eq!(cfg.subcarrier_indices().len(), 53);
        assert!(FrequencyConfig::new(2.4e9, 1.0, Some((-3, 4))).is_err());
        assert!(FrequencyConfig::new(-2.4e9, 1.0, None).is_err());
    }
}
