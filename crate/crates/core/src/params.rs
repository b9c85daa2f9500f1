//! Physical constants, constraint bounds and the flat `key = value` config schema.
//!
//! Every key is optional; missing keys keep the defaults below. Accepted keys are
//! the field names of [`ParamSet`], [`ConstraintBounds`] (prefixed `bound_`) and
//! [`LinearModelOverrides`]. Values are plain numbers in SI units.
//!
//! ```text
//! body_mass = 0.277
//! wheel_radius = 0.033
//! bound_voltage = 5.0
//! visc_damping_linear = 4.25e-3
//! ```

use std::fmt::Write as _;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ParamError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("key `{key}` must be a number")]
    NotANumber { key: String },
    #[error("invalid value for `{key}`: {value} ({reason})")]
    Invalid {
        key: String,
        value: f64,
        reason: &'static str,
    },
}

/// State and input limits of the planning problem.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstraintBounds {
    /// |u| limit, V.
    pub voltage: f64,
    /// |du/dt| limit, V/s.
    pub voltage_rate: f64,
    /// |i| limit, A.
    pub current: f64,
    /// |alpha| limit, rad.
    pub tilt: f64,
    /// |v_theta| limit, rad/s.
    pub heading_rate: f64,
}

impl Default for ConstraintBounds {
    fn default() -> Self {
        Self {
            voltage: 5.0,
            voltage_rate: 2.0,
            current: 3.0,
            tilt: std::f64::consts::PI / 12.0,
            heading_rate: 2.0 * std::f64::consts::PI / 3.0,
        }
    }
}

/// Damping used only when building the linear design model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearModelOverrides {
    pub visc_damping_linear: f64,
    pub coulomb_damping_linear: f64,
}

impl Default for LinearModelOverrides {
    fn default() -> Self {
        Self {
            visc_damping_linear: 4.25e-3,
            coulomb_damping_linear: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamSet {
    pub gravity: f64,
    pub body_mass: f64,
    pub body_inertia_xx: f64,
    pub body_inertia_yy: f64,
    pub body_inertia_zz: f64,
    pub wheel_mass: f64,
    pub wheel_inertia_xx: f64,
    pub wheel_inertia_yy: f64,
    pub wheel_inertia_zz: f64,
    /// Wheel axis to body centre of mass, `l`.
    pub com_height: f64,
    /// `r`
    pub wheel_radius: f64,
    /// Half the wheel separation, `d`.
    pub half_track: f64,
    /// `c_v`
    pub visc_damping: f64,
    /// `c_c`
    pub coulomb_damping: f64,
    /// `c_0`, slope of the tanh Coulomb smoothing.
    pub damping_slope: f64,
    pub motor_inertia: f64,
    pub gear_inertia: f64,
    /// `i_t = (78/11)^2`, stored evaluated.
    pub ratio_total: f64,
    /// `i_g = 78/11`
    pub ratio_gear: f64,
    /// `k_e`, carries the coupling in both directions.
    pub emf_const: f64,
    /// Kept for completeness; the equations use `emf_const` for the torque side too.
    pub torque_const: f64,
    pub inductance: f64,
    pub resistance: f64,
    pub bounds: ConstraintBounds,
    pub linear: LinearModelOverrides,
}

impl Default for ParamSet {
    fn default() -> Self {
        Self {
            gravity: 9.81,
            body_mass: 277e-3,
            body_inertia_xx: 543.108e-6,
            body_inertia_yy: 481.457e-6,
            body_inertia_zz: 153.951e-6,
            wheel_mass: 28e-3,
            wheel_inertia_xx: 4.957e-6,
            wheel_inertia_yy: 7.411e-6,
            wheel_inertia_zz: 4.957e-6,
            com_height: 48.67e-3,
            wheel_radius: 33e-3,
            half_track: 49e-3,
            visc_damping: 1.532e-3,
            coulomb_damping: 32.6e-3,
            damping_slope: 8.0,
            motor_inertia: 268.528e-9,
            gear_inertia: 1.807e-6,
            ratio_total: (78.0 / 11.0) * (78.0 / 11.0),
            ratio_gear: 78.0 / 11.0,
            emf_const: 3.76e-3,
            torque_const: 3.76e-3,
            inductance: 4e-4,
            resistance: 1.5,
            bounds: ConstraintBounds::default(),
            linear: LinearModelOverrides::default(),
        }
    }
}

#[derive(Clone, Copy)]
enum Rule {
    Positive,
    NonNegative,
    Any,
}

type Accessor = fn(&mut ParamSet) -> &mut f64;

const FIELDS: &[(&str, Rule, Accessor)] = &[
    ("gravity", Rule::Positive, |p| &mut p.gravity),
    ("body_mass", Rule::Positive, |p| &mut p.body_mass),
    ("body_inertia_xx", Rule::Positive, |p| &mut p.body_inertia_xx),
    ("body_inertia_yy", Rule::Positive, |p| &mut p.body_inertia_yy),
    ("body_inertia_zz", Rule::Positive, |p| &mut p.body_inertia_zz),
    ("wheel_mass", Rule::Positive, |p| &mut p.wheel_mass),
    ("wheel_inertia_xx", Rule::Positive, |p| &mut p.wheel_inertia_xx),
    ("wheel_inertia_yy", Rule::Positive, |p| &mut p.wheel_inertia_yy),
    ("wheel_inertia_zz", Rule::Positive, |p| &mut p.wheel_inertia_zz),
    ("com_height", Rule::Positive, |p| &mut p.com_height),
    ("wheel_radius", Rule::Positive, |p| &mut p.wheel_radius),
    ("half_track", Rule::Positive, |p| &mut p.half_track),
    ("visc_damping", Rule::NonNegative, |p| &mut p.visc_damping),
    ("coulomb_damping", Rule::NonNegative, |p| &mut p.coulomb_damping),
    ("damping_slope", Rule::NonNegative, |p| &mut p.damping_slope),
    ("motor_inertia", Rule::Positive, |p| &mut p.motor_inertia),
    ("gear_inertia", Rule::Positive, |p| &mut p.gear_inertia),
    ("ratio_total", Rule::Positive, |p| &mut p.ratio_total),
    ("ratio_gear", Rule::Positive, |p| &mut p.ratio_gear),
    ("emf_const", Rule::Any, |p| &mut p.emf_const),
    ("torque_const", Rule::Any, |p| &mut p.torque_const),
    ("inductance", Rule::Positive, |p| &mut p.inductance),
    ("resistance", Rule::Positive, |p| &mut p.resistance),
    ("bound_voltage", Rule::Positive, |p| &mut p.bounds.voltage),
    ("bound_voltage_rate", Rule::Positive, |p| &mut p.bounds.voltage_rate),
    ("bound_current", Rule::Positive, |p| &mut p.bounds.current),
    ("bound_tilt", Rule::Positive, |p| &mut p.bounds.tilt),
    ("bound_heading_rate", Rule::Positive, |p| &mut p.bounds.heading_rate),
    ("visc_damping_linear", Rule::NonNegative, |p| &mut p.linear.visc_damping_linear),
    ("coulomb_damping_linear", Rule::NonNegative, |p| &mut p.linear.coulomb_damping_linear),
];

impl ParamSet {
    /// Checks every field against its rule and reports the first offending key.
    pub fn validate(&self) -> Result<(), ParamError> {
        let mut copy = *self;
        for (key, rule, get) in FIELDS {
            let value = *get(&mut copy);
            let reason = if !value.is_finite() {
                Some("not finite")
            } else {
                match rule {
                    Rule::Positive if value <= 0.0 => Some("must be > 0"),
                    Rule::NonNegative if value < 0.0 => Some("must be >= 0"),
                    _ => None,
                }
            };
            if let Some(reason) = reason {
                return Err(ParamError::Invalid {
                    key: (*key).to_string(),
                    value,
                    reason,
                });
            }
        }
        Ok(())
    }

    /// Flat config text that [`load_params`] reads back to an equal set.
    pub fn to_config_string(&self) -> String {
        let mut copy = *self;
        let mut out = String::new();
        for (key, _, get) in FIELDS {
            let _ = writeln!(out, "{key} = {:?}", *get(&mut copy));
        }
        out
    }

    /// Same constants with damping replaced by the linear-model overrides.
    pub fn with_linear_damping(&self) -> ParamSet {
        let mut p = *self;
        p.visc_damping = self.linear.visc_damping_linear;
        p.coulomb_damping = self.linear.coulomb_damping_linear;
        p
    }
}

/// Parses flat `key = value` text on top of the default set and validates it.
pub fn load_params(source: &str) -> Result<ParamSet, ParamError> {
    let table: toml::Table = source
        .parse()
        .map_err(|e: toml::de::Error| ParamError::Parse(e.to_string()))?;
    let mut params = ParamSet::default();
    for (key, value) in &table {
        let Some((_, _, get)) = FIELDS.iter().find(|(k, _, _)| k == key) else {
            return Err(ParamError::UnknownKey(key.clone()));
        };
        let number = match value {
            toml::Value::Float(f) => *f,
            toml::Value::Integer(i) => *i as f64,
            _ => return Err(ParamError::NotANumber { key: key.clone() }),
        };
        *get(&mut params) = number;
    }
    params.validate()?;
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_gives_table_values() {
        let p = load_params("").unwrap();
        assert_eq!(p.wheel_radius, 33e-3);
        assert_eq!(p.body_mass, 277e-3);
        assert_eq!(p.resistance, 1.5);
        assert_eq!(p, ParamSet::default());
    }

    #[test]
    fn identity_override() {
        assert_eq!(load_params("gravity = 9.81").unwrap(), ParamSet::default());
    }

    #[test]
    fn negative_mass_names_key() {
        let err = load_params("body_mass = -1").unwrap_err();
        assert!(err.to_string().contains("body_mass"));
    }

    #[test]
    fn unknown_and_malformed() {
        assert_eq!(
            load_params("wheel_radus = 1.0").unwrap_err(),
            ParamError::UnknownKey("wheel_radus".into())
        );
        assert!(matches!(load_params("body_mass = \"heavy\""), Err(ParamError::NotANumber { .. })));
        assert!(matches!(load_params("body_mass = = 2"), Err(ParamError::Parse(_))));
    }

    #[test]
    fn integers_accepted() {
        let p = load_params("resistance = 2").unwrap();
        assert_eq!(p.resistance, 2.0);
    }

    #[test]
    fn ratio_total_is_square_of_gear_ratio() {
        let p = ParamSet::default();
        assert!((p.ratio_total - 50.280_991_735_537_19).abs() < 1e-12);
        assert_eq!(p.ratio_total, p.ratio_gear * p.ratio_gear);
    }
}
