//! Derived sustainability and quality metrics.
//!
//! Every quantity here is a pure function of a [`PrimaryAggregate`]. Division
//! by zero is always an error with its own diagnostic, never an infinity.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sandbox::CoverageOutcome;
use crate::strategy::StrategyId;

pub const DEFAULT_ALPHAS: [f64; 3] = [0.5, 1.0, 2.0];
pub const IDENTITY_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum MetricsError {
    #[error("no coverage values to normalize")]
    EmptyCoverage,
    #[error("coverage percent {0} outside [0, 100]")]
    CoverageOutOfRange(f64),
    #[error("{pair}: total tokens is zero")]
    ZeroTokens { pair: String },
    #[error("{pair}: total duration is zero")]
    ZeroDuration { pair: String },
    #[error("{pair}: total energy is zero, quality per kWh is undefined")]
    ZeroEnergy { pair: String },
    #[error("{pair}: emissions are zero, quality per kg CO2 is undefined")]
    ZeroEmissions { pair: String },
    #[error("{pair}: {field} = {value} is negative or not finite")]
    BadInput {
        pair: String,
        field: &'static str,
        value: f64,
    },
    #[error("{pair}: Q = {q} outside [0, 1]")]
    QOutOfRange { pair: String, q: f64 },
    #[error("alpha {0} must be positive")]
    BadAlpha(f64),
    #[error("empty group")]
    EmptyGroup,
    #[error("{pair}: cost factor {cost} must be positive")]
    NonPositiveCost { pair: String, cost: f64 },
}

/// Summed primary measurements for one (model, strategy) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrimaryAggregate {
    pub model: String,
    pub strategy: StrategyId,
    /// Total tokens.
    pub t: u64,
    /// Seconds.
    pub tau: f64,
    /// kg CO2-eq.
    pub co2: f64,
    pub e_cpu: f64,
    pub e_gpu: f64,
    pub e_ram: f64,
    /// Normalized coverage; absent when coverage records are missing.
    pub q: Option<f64>,
}

impl PrimaryAggregate {
    pub fn pair(&self) -> String {
        format!("{}/{}", self.model, self.strategy.display_name())
    }

    pub fn e_tot(&self) -> f64 {
        self.e_cpu + self.e_gpu + self.e_ram
    }

    pub fn tau_hr(&self) -> f64 {
        self.tau / 3600.0
    }

    /// The product penalized by the score: emissions, energy and hours.
    pub fn cost(&self) -> f64 {
        self.co2 * self.e_tot() * self.tau_hr()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SqEntry {
    pub alpha: f64,
    pub literal: Option<f64>,
    pub normalized: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub model: String,
    pub strategy: StrategyId,
    pub t: u64,
    pub tau: f64,
    pub co2: f64,
    pub e_cpu: f64,
    pub e_gpu: f64,
    pub e_ram: f64,
    pub q: Option<f64>,
    pub e_tot: f64,
    pub tau_hr: f64,
    pub tok_rate: f64,
    pub sec_per_1k_tok: f64,
    pub co2_per_1k_tok: f64,
    pub e_per_1k_tok: f64,
    pub q_per_1k_tok: Option<f64>,
    pub q_per_kwh: Option<f64>,
    pub q_per_co2: Option<f64>,
    pub sq: Vec<SqEntry>,
}

impl MetricRow {
    pub fn sq_at(&self, alpha: f64) -> Option<&SqEntry> {
        self.sq.iter().find(|e| e.alpha == alpha)
    }
}

/// Percent coverage that counts toward Q. Unusable scripts count as zero.
pub fn effective_coverage(outcome: &CoverageOutcome) -> f64 {
    if !outcome.syntax_ok || outcome.error.as_deref() == Some(CoverageOutcome::NO_SCRIPT) {
        0.0
    } else {
        outcome.coverage_percent
    }
}

/// Mean of per-execution coverage percentages, scaled to [0, 1].
pub fn normalize_coverage(percents: &[f64]) -> Result<f64, MetricsError> {
    if percents.is_empty() {
        return Err(MetricsError::EmptyCoverage);
    }
    if let Some(&bad) = percents.iter().find(|p| !(0.0..=100.0).contains(*p)) {
        return Err(MetricsError::CoverageOutOfRange(bad));
    }
    let mean = percents.iter().sum::<f64>() / percents.len() as f64;
    Ok(mean / 100.0)
}

fn check_primary(agg: &PrimaryAggregate) -> Result<(), MetricsError> {
    let pair = |a: &PrimaryAggregate| a.pair();
    for (field, value) in [
        ("tau", agg.tau),
        ("co2", agg.co2),
        ("e_cpu", agg.e_cpu),
        ("e_gpu", agg.e_gpu),
        ("e_ram", agg.e_ram),
    ] {
        if !(value >= 0.0 && value.is_finite()) {
            return Err(MetricsError::BadInput {
                pair: pair(agg),
                field,
                value,
            });
        }
    }
    if let Some(q) = agg.q {
        if !(0.0..=1.0).contains(&q) {
            return Err(MetricsError::QOutOfRange { pair: pair(agg), q });
        }
    }
    if agg.t == 0 {
        return Err(MetricsError::ZeroTokens { pair: pair(agg) });
    }
    if agg.tau == 0.0 {
        return Err(MetricsError::ZeroDuration { pair: pair(agg) });
    }
    Ok(())
}

/// Every single-row derived metric. SQ entries are left empty; see
/// [`score_rows`].
pub fn derive(agg: &PrimaryAggregate) -> Result<MetricRow, MetricsError> {
    check_primary(agg)?;
    let t = agg.t as f64;
    let e_tot = agg.e_tot();
    let tau_hr = agg.tau_hr();
    let (q_per_1k_tok, q_per_kwh, q_per_co2) = match agg.q {
        None => (None, None, None),
        Some(q) => {
            if e_tot == 0.0 {
                return Err(MetricsError::ZeroEnergy { pair: agg.pair() });
            }
            if agg.co2 == 0.0 {
                return Err(MetricsError::ZeroEmissions { pair: agg.pair() });
            }
            (Some(1000.0 * q / t), Some(q / e_tot), Some(q / agg.co2))
        }
    };
    Ok(MetricRow {
        model: agg.model.clone(),
        strategy: agg.strategy,
        t: agg.t,
        tau: agg.tau,
        co2: agg.co2,
        e_cpu: agg.e_cpu,
        e_gpu: agg.e_gpu,
        e_ram: agg.e_ram,
        q: agg.q,
        e_tot,
        tau_hr,
        tok_rate: t / tau_hr,
        sec_per_1k_tok: 1000.0 * agg.tau / t,
        co2_per_1k_tok: 1000.0 * agg.co2 / t,
        e_per_1k_tok: 1000.0 * e_tot / t,
        q_per_1k_tok,
        q_per_kwh,
        q_per_co2,
        sq: Vec::new(),
    })
}

fn check_alpha(alpha: f64) -> Result<(), MetricsError> {
    if alpha > 0.0 && alpha.is_finite() {
        Ok(())
    } else {
        Err(MetricsError::BadAlpha(alpha))
    }
}

/// `alpha * Q / (CO2 * E_tot * tau_hr)` in raw units.
pub fn sq_literal(agg: &PrimaryAggregate, alpha: f64) -> Result<Option<f64>, MetricsError> {
    check_alpha(alpha)?;
    let cost = agg.cost();
    if !(cost > 0.0) {
        return Err(MetricsError::NonPositiveCost { pair: agg.pair(), cost });
    }
    Ok(agg.q.map(|q| alpha * q / cost))
}

/// `Q^alpha / (1 + c)` where `c` is the member's cost over the group mean.
pub fn sq_normalized(group: &[&PrimaryAggregate], alpha: f64) -> Result<Vec<Option<f64>>, MetricsError> {
    check_alpha(alpha)?;
    if group.is_empty() {
        return Err(MetricsError::EmptyGroup);
    }
    for agg in group {
        let cost = agg.cost();
        if !(cost > 0.0 && cost.is_finite()) {
            return Err(MetricsError::NonPositiveCost { pair: agg.pair(), cost });
        }
    }
    let mean = group.iter().map(|a| a.cost()).sum::<f64>() / group.len() as f64;
    Ok(group
        .iter()
        .map(|a| a.q.map(|q| q.powf(alpha) / (1.0 + a.cost() / mean)))
        .collect())
}

/// Derives every row and attaches SQ scores grouped by model.
pub fn score_rows(aggs: &[PrimaryAggregate], alphas: &[f64]) -> Result<Vec<MetricRow>, MetricsError> {
    let mut rows = aggs.iter().map(derive).collect::<Result<Vec<_>, _>>()?;
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, a) in aggs.iter().enumerate() {
        groups.entry(a.model.as_str()).or_default().push(i);
    }
    for &alpha in alphas {
        for idx in groups.values() {
            let members: Vec<&PrimaryAggregate> = idx.iter().map(|&i| &aggs[i]).collect();
            let normalized = sq_normalized(&members, alpha)?;
            for (&i, n) in idx.iter().zip(normalized) {
                rows[i].sq.push(SqEntry {
                    alpha,
                    literal: sq_literal(&aggs[i], alpha)?,
                    normalized: n,
                });
            }
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, Error, PartialEq)]
#[error("{pair}: identity {name} violated: {lhs:e} vs {rhs:e}")]
pub struct IdentityViolation {
    pub pair: String,
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs())
}

/// Cross-checks a row's derived fields against each other.
pub fn check_identities(row: &MetricRow) -> Result<(), IdentityViolation> {
    let pair = format!("{}/{}", row.model, row.strategy.display_name());
    let mut checks: Vec<(String, f64, f64)> = vec![
        (
            "E_tot = E_cpu + E_gpu + E_ram".into(),
            row.e_tot,
            row.e_cpu + row.e_gpu + row.e_ram,
        ),
        (
            "TokRate * SecPer1KTok = 3.6e6".into(),
            row.tok_rate * row.sec_per_1k_tok,
            3.6e6,
        ),
    ];
    if let (Some(q1k), Some(qkwh), Some(qco2)) = (row.q_per_1k_tok, row.q_per_kwh, row.q_per_co2) {
        checks.push(("QPerkWh * EPer1KTok = QPer1KTok".into(), qkwh * row.e_per_1k_tok, q1k));
        checks.push((
            "QPerCO2 * CO2Per1KTok = QPer1KTok".into(),
            qco2 * row.co2_per_1k_tok,
            q1k,
        ));
    }
    if let Some(q) = row.q.filter(|&q| q > 0.0) {
        for pair_ in row.sq.windows(2) {
            let (a, b) = (&pair_[0], &pair_[1]);
            if let (Some(na), Some(nb)) = (a.normalized, b.normalized) {
                checks.push((
                    format!("SQ({})/SQ({}) = Q^{}", b.alpha, a.alpha, b.alpha - a.alpha),
                    nb / na,
                    q.powf(b.alpha - a.alpha),
                ));
            }
            if let (Some(la), Some(lb)) = (a.literal, b.literal) {
                checks.push((
                    format!("literal SQ linear in alpha ({} vs {})", a.alpha, b.alpha),
                    lb * a.alpha,
                    la * b.alpha,
                ));
            }
        }
    }
    for (name, lhs, rhs) in checks {
        if !rel_close(lhs, rhs, IDENTITY_TOLERANCE) {
            return Err(IdentityViolation { pair, name, lhs, rhs });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn agg(t: u64, tau: f64, co2: f64, e: [f64; 3], q: Option<f64>) -> PrimaryAggregate {
        PrimaryAggregate {
            model: "m".into(),
            strategy: StrategyId::Zeroshot,
            t,
            tau,
            co2,
            e_cpu: e[0],
            e_gpu: e[1],
            e_ram: e[2],
            q,
        }
    }

    #[test]
    fn coverage_normalization() {
        assert_eq!(normalize_coverage(&[85.0]).unwrap(), 0.85);
        assert_eq!(normalize_coverage(&[100.0, 100.0, 100.0]).unwrap(), 1.0);
        assert!((normalize_coverage(&[80.0, 90.0]).unwrap() - 0.85).abs() < 1e-15);
        assert_eq!(normalize_coverage(&[]), Err(MetricsError::EmptyCoverage));
        assert_eq!(
            normalize_coverage(&[101.0]),
            Err(MetricsError::CoverageOutOfRange(101.0))
        );
    }

    #[test]
    fn unusable_scripts_count_zero() {
        let mut o = CoverageOutcome::no_script(1);
        o.coverage_percent = 50.0;
        o.syntax_ok = true;
        assert_eq!(effective_coverage(&o), 0.0);
        o.error = None;
        assert_eq!(effective_coverage(&o), 50.0);
        o.syntax_ok = false;
        assert_eq!(effective_coverage(&o), 0.0);
    }

    #[test]
    fn hour_conversion() {
        let r = derive(&agg(1000, 3600.0, 1.0, [1.0, 0.0, 0.0], Some(0.5))).unwrap();
        assert_eq!(r.tau_hr, 1.0);
        assert_eq!(r.tok_rate, 1000.0);
    }

    #[test]
    fn quality_per_kwh_and_per_1k() {
        let r = derive(&agg(2_771_400, 3600.0, 0.4, [0.5, 0.3, 0.066], Some(0.97))).unwrap();
        assert!((r.q_per_kwh.unwrap() - 1.12).abs() < 0.005);
        assert!((r.q_per_1k_tok.unwrap() - 0.00035).abs() < 0.000005);
        check_identities(&r).unwrap();
    }

    #[test]
    fn distinct_zero_diagnostics() {
        assert!(matches!(
            derive(&agg(0, 1.0, 1.0, [1.0; 3], None)),
            Err(MetricsError::ZeroTokens { .. })
        ));
        assert!(matches!(
            derive(&agg(1, 0.0, 1.0, [1.0; 3], None)),
            Err(MetricsError::ZeroDuration { .. })
        ));
        assert!(matches!(
            derive(&agg(1, 1.0, 1.0, [0.0; 3], Some(0.5))),
            Err(MetricsError::ZeroEnergy { .. })
        ));
        assert!(matches!(
            derive(&agg(1, 1.0, 0.0, [1.0; 3], Some(0.5))),
            Err(MetricsError::ZeroEmissions { .. })
        ));
        // Without Q there is nothing to divide.
        assert!(derive(&agg(1, 1.0, 0.0, [0.0; 3], None)).is_ok());
    }

    #[test]
    fn literal_substitution_and_linearity() {
        let a = agg(1, 36000.0, 0.5, [1.0, 0.0, 0.0], Some(0.9));
        assert!((sq_literal(&a, 1.0).unwrap().unwrap() - 0.18).abs() < 1e-15);
        let ratio = sq_literal(&a, 2.0).unwrap().unwrap() / sq_literal(&a, 0.5).unwrap().unwrap();
        assert_eq!(ratio, 4.0);
        let z = PrimaryAggregate {
            q: Some(0.0),
            ..a.clone()
        };
        assert_eq!(sq_literal(&z, 2.0).unwrap(), Some(0.0));
        let free = PrimaryAggregate { co2: 0.0, ..a };
        assert!(matches!(
            sq_literal(&free, 1.0),
            Err(MetricsError::NonPositiveCost { .. })
        ));
    }

    #[test]
    fn normalized_group_examples() {
        let one = agg(1, 3600.0, 3.0, [2.0, 0.0, 0.0], Some(1.0));
        assert_eq!(sq_normalized(&[&one], 0.5).unwrap(), vec![Some(0.5)]);
        let a = agg(1, 3600.0, 1.0, [1.0, 0.0, 0.0], Some(0.9));
        let b = agg(1, 3600.0, 1.0, [1.0, 0.0, 0.0], Some(0.8));
        let s = sq_normalized(&[&a, &b], 1.0).unwrap();
        assert!((s[0].unwrap() - 0.45).abs() < 1e-15);
        assert!((s[1].unwrap() - 0.40).abs() < 1e-15);
        assert_eq!(sq_normalized(&[], 1.0), Err(MetricsError::EmptyGroup));
    }

    #[test]
    fn score_rows_groups_by_model() {
        let mut a = agg(10, 10.0, 1.0, [1.0, 0.0, 0.0], Some(0.5));
        let mut b = a.clone();
        b.model = "other".into();
        b.co2 = 100.0;
        a.strategy = StrategyId::Cot;
        // Different models never share a mean, so both see c = 1.
        let rows = score_rows(&[a, b], &DEFAULT_ALPHAS).unwrap();
        for r in &rows {
            assert_eq!(r.sq.len(), 3);
            assert_eq!(r.sq_at(1.0).unwrap().normalized, Some(0.25));
            check_identities(r).unwrap();
        }
    }

    #[test]
    fn absent_q_leaves_q_fields_blank() {
        let rows = score_rows(&[agg(10, 10.0, 1.0, [1.0, 0.0, 0.0], None)], &[1.0]).unwrap();
        assert_eq!(rows[0].q_per_kwh, None);
        assert_eq!(rows[0].sq[0].normalized, None);
        assert_eq!(rows[0].sq[0].literal, None);
        check_identities(&rows[0]).unwrap();
    }

    #[test]
    fn violation_detected() {
        let mut r = derive(&agg(10, 10.0, 1.0, [1.0, 0.0, 0.0], Some(0.5))).unwrap();
        r.tok_rate *= 1.0 + 1e-6;
        assert!(check_identities(&r).is_err());
    }

    fn arb_agg() -> impl Strategy<Value = PrimaryAggregate> {
        (
            1u64..10_000_000,
            1e-3f64..1e6,
            1e-6f64..1e3,
            (1e-6f64..1e3, 0.0f64..1e3, 0.0f64..1e2),
            prop::option::of(0.0f64..=1.0),
        )
            .prop_map(|(t, tau, co2, (c, g, r), q)| agg(t, tau, co2, [c, g, r], q))
    }

    proptest! {
        #[test]
        fn identities_hold(aggs in prop::collection::vec(arb_agg(), 1..8)) {
            let rows = score_rows(&aggs, &DEFAULT_ALPHAS).unwrap();
            for r in &rows {
                prop_assert!(check_identities(r).is_ok(), "{:?}", check_identities(r));
                for e in &r.sq {
                    if let Some(n) = e.normalized {
                        prop_assert!((0.0..1.0).contains(&n));
                    }
                }
            }
        }

        #[test]
        fn derive_is_pure(a in arb_agg()) {
            let x = derive(&a).unwrap();
            let y = derive(&a).unwrap();
            prop_assert_eq!(format!("{x:?}"), format!("{y:?}"));
        }

        #[test]
        fn scaling_t_and_tau_keeps_rates(a in arb_agg(), k in 1u64..100) {
            let mut b = a.clone();
            b.t *= k;
            b.tau *= k as f64;
            let (x, y) = (derive(&a).unwrap(), derive(&b).unwrap());
            prop_assert!(rel_close(x.sec_per_1k_tok, y.sec_per_1k_tok, 1e-12));
            prop_assert!(rel_close(x.tok_rate, y.tok_rate, 1e-12));
        }

        #[test]
        fn normalized_monotone(q1 in 0.01f64..0.99, dq in 0.001f64..0.01, alpha in 0.1f64..3.0) {
            let a = agg(1, 3600.0, 1.0, [1.0, 0.0, 0.0], Some(q1));
            let b = agg(1, 3600.0, 1.0, [1.0, 0.0, 0.0], Some(q1 + dq));
            let s = sq_normalized(&[&a, &b], alpha).unwrap();
            prop_assert!(s[1].unwrap() > s[0].unwrap());
            let cheap = agg(1, 3600.0, 0.5, [1.0, 0.0, 0.0], Some(q1));
            let s = sq_normalized(&[&a, &cheap], alpha).unwrap();
            prop_assert!(s[1].unwrap() > s[0].unwrap());
        }
    }
}
