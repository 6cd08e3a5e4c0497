//! Topology statistics, matrix correlation and runtime adaptation.

use std::fmt::Write as _;

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::agent::{ConditionSet, Query, Roster};
use crate::error::{CardError, Result};
use crate::generator::{generate, hex_digest, GeneratorParams};
use crate::graph::{AnchorKind, AnchorTopology, CommTopology, EdgeProbabilityMatrix};
use crate::manifest::Manifest;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TopologyStats {
    pub n: usize,
    pub mean_offdiag: f64,
    pub density_at_tau: f64,
    pub tau: f64,
    #[serde(skip)]
    pub per_edge: EdgeProbabilityMatrix,
}

pub fn stats(s: &EdgeProbabilityMatrix, tau: f64) -> TopologyStats {
    let off = s.off_diagonal();
    let (mean, density) = if off.is_empty() {
        (0.0, 0.0)
    } else {
        let k = off.len() as f64;
        (off.iter().sum::<f64>() / k, off.iter().filter(|&&v| v > tau).count() as f64 / k)
    };
    TopologyStats { n: s.n(), mean_offdiag: mean, density_at_tau: density, tau, per_edge: s.clone() }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Correlation {
    pub r: f64,
    /// Two-sided, Student t with `points − 2` degrees of freedom.
    pub p: f64,
    pub points: usize,
}

/// Pearson correlation over paired off-diagonal entries.
pub fn pearson(a: &EdgeProbabilityMatrix, b: &EdgeProbabilityMatrix) -> Result<Correlation> {
    if a.n() != b.n() {
        return Err(CardError::ShapeMismatch(format!("cannot correlate {0}x{0} with {1}x{1}", a.n(), b.n())));
    }
    let x = a.off_diagonal();
    let y = b.off_diagonal();
    let k = x.len();
    if k < 3 {
        return Err(CardError::Invalid(format!("{k} off-diagonal entries are too few to correlate")));
    }
    let mx = x.iter().sum::<f64>() / k as f64;
    let my = y.iter().sum::<f64>() / k as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (u, v) in x.iter().zip(&y) {
        let (du, dv) = (u - mx, v - my);
        sxy += du * dv;
        sxx += du * du;
        syy += dv * dv;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(CardError::DegenerateVariance);
    }
    let r = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    let df = (k - 2) as f64;
    let p = if r.abs() == 1.0 {
        0.0
    } else {
        let t = r * (df / (1.0 - r * r)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| CardError::Invalid(e.to_string()))?;
        (2.0 * dist.sf(t.abs())).min(1.0)
    };
    Ok(Correlation { r, p, points: k })
}

pub fn strength_label(r: f64) -> &'static str {
    match r.abs() {
        a if a >= 0.8 => "Very strong",
        a if a >= 0.6 => "Strong",
        a if a >= 0.4 => "Moderate",
        a if a >= 0.2 => "Weak",
        _ => "Very weak",
    }
}

pub fn significance_label(p: f64) -> &'static str {
    if p < 0.05 {
        "Yes"
    } else if p < 0.1 {
        "Marginal"
    } else {
        "No"
    }
}

fn fmt_p(p: f64) -> String {
    if p < 0.001 {
        "<0.001".into()
    } else if p < 0.01 {
        format!("{p:.3}")
    } else {
        format!("{p:.2}")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MatrixSummary {
    pub name: String,
    pub mean_offdiag: f64,
    pub density: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Comparison {
    pub a: String,
    pub b: String,
    pub r: f64,
    pub p: f64,
    pub strength: &'static str,
    pub significance: &'static str,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorrelationReport {
    pub tau: f64,
    pub matrices: Vec<MatrixSummary>,
    pub comparisons: Vec<Comparison>,
}

impl CorrelationReport {
    /// Every unordered pair, in input order.
    pub fn build(named: &[(String, EdgeProbabilityMatrix)], tau: f64) -> Result<Self> {
        if named.len() < 2 {
            return Err(CardError::Invalid("a comparison report needs at least two matrices".into()));
        }
        let mut matrices = Vec::with_capacity(named.len());
        for (name, m) in named {
            let st = stats(m, tau);
            matrices.push(MatrixSummary {
                name: name.clone(),
                mean_offdiag: st.mean_offdiag,
                density: st.density_at_tau,
            });
        }
        let mut comparisons = Vec::new();
        for i in 0..named.len() {
            for j in i + 1..named.len() {
                let c = pearson(&named[i].1, &named[j].1)?;
                comparisons.push(Comparison {
                    a: named[i].0.clone(),
                    b: named[j].0.clone(),
                    r: c.r,
                    p: c.p,
                    strength: strength_label(c.r),
                    significance: significance_label(c.p),
                });
            }
        }
        Ok(CorrelationReport { tau, matrices, comparisons })
    }

    pub fn comparison(&self, a: &str, b: &str) -> Option<&Comparison> {
        self.comparisons.iter().find(|c| (c.a == a && c.b == b) || (c.a == b && c.b == a))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("Comparison & r & p & Strength & Sig. \\\\\n");
        for c in &self.comparisons {
            writeln!(
                out,
                "{} vs {} & {:.2} & {} & {} & {} \\\\",
                c.a,
                c.b,
                c.r,
                fmt_p(c.p),
                c.strength,
                c.significance
            )
            .unwrap();
        }
        writeln!(out, "\nMatrix & Mean & Density (tau={}) \\\\", self.tau).unwrap();
        for m in &self.matrices {
            writeln!(out, "{} & {:.4} & {:.4} \\\\", m.name, m.mean_offdiag, m.density).unwrap();
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Re-decodes the topology for new conditions. `params` is only read.
pub fn adapt(
    params: &GeneratorParams,
    roster: &Roster,
    new_conditions: &ConditionSet,
    query: &Query,
    anchor: &AnchorTopology,
    tau: f64,
) -> Result<(EdgeProbabilityMatrix, CommTopology)> {
    generate(roster, new_conditions, query, anchor, params, tau)
}

/// Per-entry `after − before`.
pub fn edge_deltas(before: &EdgeProbabilityMatrix, after: &EdgeProbabilityMatrix) -> Result<Vec<(usize, usize, f64)>> {
    if before.n() != after.n() {
        return Err(CardError::ShapeMismatch(format!("{} agents before, {} after", before.n(), after.n())));
    }
    Ok(before.pairs().map(|(i, j)| (i, j, after.get(i, j) - before.get(i, j))).collect())
}

/// Result of re-decoding a stored checkpoint under old and new conditions.
#[derive(Clone, Debug)]
pub struct AdaptOutcome {
    pub before: (EdgeProbabilityMatrix, CommTopology),
    pub after: (EdgeProbabilityMatrix, CommTopology),
    pub deltas: Vec<(usize, usize, f64)>,
    /// SHA-256 of the checkpoint file before and after adaptation.
    pub digest_before: String,
    pub digest_after: String,
}

impl AdaptOutcome {
    pub fn changed(&self) -> usize {
        self.deltas.iter().filter(|(_, _, d)| *d != 0.0).count()
    }
}

fn file_digest(path: &std::path::Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| CardError::io(path, e))?;
    Ok(hex_digest(&bytes))
}

/// Loads `checkpoint`, decodes under both manifests and re-hashes the file.
/// Fails if the rosters differ or the checkpoint file changed.
pub fn adapt_checkpoint(
    checkpoint: &std::path::Path,
    old: &Manifest,
    new: &Manifest,
    query: &Query,
    anchor: AnchorKind,
    tau: f64,
) -> Result<AdaptOutcome> {
    if old.roster != new.roster {
        return Err(CardError::Invalid("old and new manifests must share the same roster".into()));
    }
    let digest_before = file_digest(checkpoint)?;
    let params = GeneratorParams::load(checkpoint)?;
    let anchor = AnchorTopology::new(anchor, old.roster.len())?;
    let before = adapt(&params, &old.roster, &old.conditions, query, &anchor, tau)?;
    let after = adapt(&params, &new.roster, &new.conditions, query, &anchor, tau)?;
    let deltas = edge_deltas(&before.0, &after.0)?;
    let digest_after = file_digest(checkpoint)?;
    if digest_before != digest_after {
        return Err(CardError::Invalid("checkpoint changed during adaptation".into()));
    }
    Ok(AdaptOutcome { before, after, deltas, digest_before, digest_after })
}
