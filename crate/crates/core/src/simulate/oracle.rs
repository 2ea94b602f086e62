//! Monte Carlo ground truth for the decomposition estimands.
//!
//! With `mu0 = 0` only the treated arm carries signal, so every estimand is a
//! mean of `delta` under some coupling of the two populations:
//!
//! ```text
//! A = E[delta_P(X_P, M_P)]          theta(P)
//! B = E[delta_Q(X_P, M_Q(X_P))]     covariates from P, the rest from Q
//! C = E[delta_Q(X_P, M_P)]          covariates and mediators from P
//! D = E[delta_Q(X_Q, M_Q)]          theta(Q)
//! ```
//!
//! Outcome noise is omitted; it is mean zero and leaves the truth unchanged.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dgp::{delta, draw_m, draw_x, Family, Population, Setting};
use crate::error::{Error, Result};

pub const ORACLE_SIZE: usize = 1_000_000;
pub const ORACLE_SEED: u64 = 20_240_917;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub observed: f64,
    pub covariate_shift: f64,
    pub mediation_shift: f64,
    pub residual: f64,
}

impl Truth {
    pub fn scaled(self, nu: f64) -> Self {
        Self {
            observed: nu * self.observed,
            covariate_shift: nu * self.covariate_shift,
            mediation_shift: nu * self.mediation_shift,
            residual: nu * self.residual,
        }
    }
}

/// Oracle estimate plus its Monte Carlo standard errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleEstimate {
    pub truth: Truth,
    pub standard_error: Truth,
}

/// Run the oracle for a non-selection setting at unit signal.
pub fn oracle_truth(setting: Setting, n: usize, seed: u64) -> OracleEstimate {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Running sums of the four per-draw differences and their squares.
    let mut sum = [0.0f64; 4];
    let mut sq = [0.0f64; 4];
    for _ in 0..n {
        let xp = draw_x(setting, Population::Original, &mut rng);
        let mp = draw_m(setting, Population::Original, &xp, 1, &mut rng);
        let mq_at_xp = draw_m(setting, Population::Replication, &xp, 1, &mut rng);
        let xq = draw_x(setting, Population::Replication, &mut rng);
        let mq = draw_m(setting, Population::Replication, &xq, 1, &mut rng);
        let a = delta(setting, Population::Original, &xp, &mp);
        let b = delta(setting, Population::Replication, &xp, &mq_at_xp);
        let c = delta(setting, Population::Replication, &xp, &mp);
        let d = delta(setting, Population::Replication, &xq, &mq);
        let diffs = [a - d, b - d, c - b, a - c];
        for k in 0..4 {
            sum[k] += diffs[k];
            sq[k] += diffs[k] * diffs[k];
        }
    }
    let nf = n as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
    let se: Vec<f64> = (0..4).map(|k| ((sq[k] / nf - mean[k] * mean[k]).max(0.0) / nf).sqrt()).collect();
    let pack = |v: &[f64]| Truth { observed: v[0], covariate_shift: v[1], mediation_shift: v[2], residual: v[3] };
    OracleEstimate { truth: pack(&mean), standard_error: pack(&se) }
}

/// Cached oracle output, keyed by setting name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthTable {
    pub n: usize,
    pub seed: u64,
    pub truths: BTreeMap<String, OracleEstimate>,
}

impl TruthTable {
    pub fn compute(n: usize, seed: u64) -> Self {
        let truths = Setting::all()
            .into_iter()
            .filter(|s| s.family != Family::Sel)
            .map(|s| (s.to_string(), oracle_truth(s, n, seed)))
            .collect();
        Self { n, seed, truths }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes") + "\n"
    }
}

const CACHED: &str = include_str!("../../data/oracle_truths.json");

pub fn cached_table() -> &'static TruthTable {
    static TABLE: OnceLock<TruthTable> = OnceLock::new();
    TABLE.get_or_init(|| serde_json::from_str(CACHED).expect("checked-in oracle table parses"))
}

/// Truth for `setting` at signal `nu` (`nu` only matters for `Sel`).
pub fn truth(setting: Setting, nu: f64) -> Result<Truth> {
    let (base, scale) = match setting.family {
        Family::Sel => (Setting::new(Family::S2, setting.variant), nu),
        _ => (setting, 1.0),
    };
    let table = cached_table();
    let est = table
        .truths
        .get(&base.to_string())
        .ok_or_else(|| Error::InvalidArgument(format!("no cached oracle truth for {base}")))?;
    Ok(est.truth.scaled(scale))
}
