//! Data-generating processes for the coverage experiments.
//!
//! All settings share `Y = mu0 + nu * T * delta(X, M) + sigma * N(0, 1)` with
//! `mu0 = 0` and `T ~ Bernoulli(1/2)`. `S1` is univariate, `S2` multivariate
//! with zero residual shift, `S3` adds a residual shift by using a different
//! `delta` under the original population. `Sel` reuses the `S2` processes
//! with `sigma = 1` and a signal strength `nu`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Column, Role, StudyDataset};
use crate::error::{Error, Result};
use crate::spec::{AnalysisSpec, ColumnSpec, Moment, SelectionSe, SelectionSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    S1,
    S2,
    S3,
    Sel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Outcome and density ratio both (log-)linear.
    I,
    /// Only the outcome model is linear.
    Ii,
    /// Only the density ratio is log-linear.
    Iii,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Setting {
    pub family: Family,
    pub variant: Variant,
}

impl Setting {
    pub const fn new(family: Family, variant: Variant) -> Self {
        Self { family, variant }
    }

    pub fn all() -> Vec<Setting> {
        let mut out = Vec::new();
        for family in [Family::S1, Family::S2, Family::S3, Family::Sel] {
            for variant in [Variant::I, Variant::Ii, Variant::Iii] {
                out.push(Setting { family, variant });
            }
        }
        out
    }

    /// Setting whose processes generate the data (`Sel` borrows `S2`).
    fn base(self) -> Family {
        if self.family == Family::Sel {
            Family::S2
        } else {
            self.family
        }
    }

    fn univariate(self) -> bool {
        self.family == Family::S1
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let fam = match self.family {
            Family::S1 => "s1",
            Family::S2 => "s2",
            Family::S3 => "s3",
            Family::Sel => "sel_",
        };
        let var = match self.variant {
            Variant::I => "i",
            Variant::Ii => "ii",
            Variant::Iii => "iii",
        };
        write!(f, "{fam}{var}")
    }
}

impl FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        let (family, rest) = if let Some(r) = lower.strip_prefix("sel_").or_else(|| lower.strip_prefix("sel")) {
            (Family::Sel, r)
        } else if let Some(r) = lower.strip_prefix("s1") {
            (Family::S1, r)
        } else if let Some(r) = lower.strip_prefix("s2") {
            (Family::S2, r)
        } else if let Some(r) = lower.strip_prefix("s3") {
            (Family::S3, r)
        } else {
            return Err(Error::InvalidArgument(format!("unknown setting `{s}`")));
        };
        let variant = match rest.trim_start_matches(['_', '(']).trim_end_matches(')') {
            "i" | "1" => Variant::I,
            "ii" | "2" => Variant::Ii,
            "iii" | "3" => Variant::Iii,
            _ => return Err(Error::InvalidArgument(format!("unknown setting `{s}`"))),
        };
        Ok(Setting { family, variant })
    }
}

impl Serialize for Setting {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Setting {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Sampling {
    FixedN2 { n2: usize },
    PowerCalculated { shrink: f64, power: f64, alpha: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DgpConfig {
    pub setting: Setting,
    pub sigma: f64,
    pub nu: f64,
    pub n1: usize,
    pub sampling: Sampling,
    pub seed: u64,
}

impl DgpConfig {
    /// `n1 = n2 = 500`, unit signal.
    pub fn standard(setting: Setting, sigma: f64, seed: u64) -> Self {
        Self { setting, sigma, nu: 1.0, n1: 500, sampling: Sampling::FixedN2 { n2: 500 }, seed }
    }

    /// Replication size from a 90%-power calculation at 90% of the original estimate.
    pub fn power_calculated(setting: Setting, sigma: f64, seed: u64) -> Self {
        Self {
            setting,
            sigma,
            nu: 1.0,
            n1: 500,
            sampling: Sampling::PowerCalculated { shrink: 0.9, power: 0.9, alpha: 0.05 },
            seed,
        }
    }

    /// Selection experiment: unit noise, 80% power.
    pub fn selected(variant: Variant, nu: f64, seed: u64) -> Self {
        Self {
            setting: Setting::new(Family::Sel, variant),
            sigma: 1.0,
            nu,
            n1: 500,
            sampling: Sampling::PowerCalculated { shrink: 0.9, power: 0.8, alpha: 0.05 },
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::InvalidArgument(format!("sigma = {} must be positive", self.sigma)));
        }
        if !(self.nu >= 0.0) || !self.nu.is_finite() {
            return Err(Error::InvalidArgument(format!("nu = {} must be nonnegative", self.nu)));
        }
        if self.n1 < 2 {
            return Err(Error::InvalidArgument("n1 must be at least 2".into()));
        }
        if let Sampling::FixedN2 { n2 } = self.sampling {
            if n2 < 2 {
                return Err(Error::InvalidArgument("n2 must be at least 2".into()));
            }
        }
        Ok(())
    }

    /// Independent generator for replicate `rep`.
    pub fn rng(&self, rep: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(rep);
        rng
    }
}

/// Which population a unit is drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Population {
    Original,
    Replication,
}

/// Covariates and mediators of one unit.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Unit {
    pub x: [f64; 4],
    pub m: [f64; 3],
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Covariates under `pop`.
pub fn draw_x<R: Rng + ?Sized>(setting: Setting, pop: Population, rng: &mut R) -> [f64; 4] {
    let mut x = [0.0; 4];
    for v in &mut x {
        *v = normal(rng);
    }
    if pop == Population::Replication {
        return x;
    }
    match (setting.univariate(), setting.variant) {
        (true, Variant::Ii) => {
            // Equal mixture of N(1, 1) and N(0, 1).
            if rng.random::<bool>() {
                x[0] += 1.0;
            }
        }
        (true, _) => x[0] += 0.5,
        (false, Variant::Ii) => {
            if rng.random::<bool>() {
                x[0] += 0.5;
                x[1] -= 0.5;
            }
        }
        (false, _) => {
            x[0] += 0.5;
            x[1] -= 0.5;
        }
    }
    x
}

/// Mediators under `pop` given covariates and treatment.
pub fn draw_m<R: Rng + ?Sized>(setting: Setting, pop: Population, x: &[f64; 4], t: u8, rng: &mut R) -> [f64; 3] {
    let mut e = [0.0; 3];
    for v in &mut e {
        *v = normal(rng);
    }
    if pop == Population::Replication {
        return e;
    }
    if setting.univariate() {
        return [e[0] + 0.5, e[1], e[2]];
    }
    match setting.variant {
        Variant::I => [0.5 * e[0] + 0.5 * x[0] + 0.5, 0.5 * e[1] + 0.5 * x[0] - 0.5, e[2]],
        Variant::Ii => [e[0] + f64::from(t), e[1] + 0.5 * x[0] - 0.5, e[2]],
        Variant::Iii => [0.5 * e[0] + 0.5 * x[0], 0.5 * e[1] + 0.5 * x[0] - 0.5, e[2]],
    }
}

/// Conditional average treatment effect under `pop`.
pub fn delta(setting: Setting, pop: Population, x: &[f64; 4], m: &[f64; 3]) -> f64 {
    match setting.base() {
        Family::S1 => match setting.variant {
            Variant::I | Variant::Ii => x[0] + m[0],
            Variant::Iii => 1.1 * (x[0] + m[0] + x[0] * x[0] / 2.0 + m[0] * m[0] / 2.0),
        },
        Family::S3 if pop == Population::Original => match setting.variant {
            Variant::I => x[0] + x[2] + x[0] * x[0] / 2.0,
            Variant::Ii => x[0] + x[2] + 0.7,
            Variant::Iii => 2.0 * x[0],
        },
        _ => match setting.variant {
            Variant::I | Variant::Ii => x[0] + x[2] + m[0],
            Variant::Iii => x[0] + x[2] * x[2] / 4.0 + m[0] * m[0],
        },
    }
}

/// Multiplier on `T * delta` and the noise scale.
fn scales(config: &DgpConfig) -> (f64, f64) {
    if config.setting.family == Family::Sel {
        (config.nu, 1.0)
    } else {
        (1.0, config.sigma)
    }
}

/// `n` units from `pop`.
pub fn draw_study<R: Rng + ?Sized>(config: &DgpConfig, pop: Population, n: usize, rng: &mut R) -> Result<StudyDataset> {
    let setting = config.setting;
    let (nu, sigma) = scales(config);
    let mut t = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut units = Vec::with_capacity(n);
    for _ in 0..n {
        let ti = u8::from(rng.random::<bool>());
        let x = draw_x(setting, pop, rng);
        let m = draw_m(setting, pop, &x, ti, rng);
        let eps = normal(rng);
        y.push(nu * f64::from(ti) * delta(setting, pop, &x, &m) + sigma * eps);
        t.push(ti);
        units.push(Unit { x, m });
    }
    let role = if pop == Population::Original { Role::Original } else { Role::Replication };
    let (xs, ms) = columns(setting);
    let mut cov = BTreeMap::new();
    for (name, j) in xs {
        cov.insert(name.to_string(), Column::Numeric(units.iter().map(|u| u.x[j]).collect()));
    }
    let mut med = BTreeMap::new();
    for (name, j) in ms {
        med.insert(name.to_string(), Column::Numeric(units.iter().map(|u| u.m[j]).collect()));
    }
    StudyDataset::new(role, t, vec![y], cov, med)
}

type Columns = Vec<(&'static str, usize)>;

/// Covariate and mediator columns carried by the generated datasets.
fn columns(setting: Setting) -> (Columns, Columns) {
    if setting.univariate() {
        (vec![("x", 0)], vec![("m", 0)])
    } else {
        (vec![("x1", 0), ("x2", 1), ("x3", 2)], vec![("m1", 0), ("m2", 1)])
    }
}

/// Analysis spec for a setting: difference in means, with the balancing
/// features each setting prescribes.
pub fn analysis_spec(setting: Setting) -> AnalysisSpec {
    let mut spec = AnalysisSpec::ttest("y", "t");
    let mean = |c: &str| ColumnSpec::numeric(c, Moment::Mean);
    if setting.univariate() {
        spec.covariate_moments = vec![mean("x")];
        spec.mediator_moments = vec![mean("m")];
    } else if setting.variant == Variant::Iii {
        spec.covariate_moments = vec![mean("x1"), mean("x3")];
        spec.mediator_moments = vec![
            ColumnSpec::numeric("m1", Moment::MeanAndSecondMoment),
            ColumnSpec::numeric("m2", Moment::MeanAndSecondMoment),
        ];
    } else {
        spec.covariate_moments = vec![mean("x1"), mean("x2"), mean("x3")];
        spec.mediator_moments = vec![mean("m1"), mean("m2")];
    }
    if setting.family == Family::Sel {
        spec.selection = Some(SelectionSpec { alpha0: 0.05, template: None, se: SelectionSe::Model });
    }
    spec
}
