//! Distances between distributions and the sequential likelihood ratio.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hafnian::DetectionPattern;
use crate::io::fmt_f64;
use crate::probability::{self, ModelKind, ModelSpec, PatternDistribution, Prepared};
use crate::state::GaussianState;
use crate::sum::NeumaierSum;

/// `Σ |p_i − q_i| / 2` over two tables with identical pattern lists.
pub fn tvd(p: &PatternDistribution, q: &PatternDistribution) -> Result<f64> {
    if p.patterns != q.patterns {
        return Err(Error::invalid(
            "distributions are indexed by different pattern sets",
        ));
    }
    tvd_slices(&p.probabilities, &q.probabilities)
}

pub fn tvd_slices(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::dim(format!("{} vs {} probabilities", p.len(), q.len())));
    }
    let s: NeumaierSum = p.iter().zip(q).map(|(a, b)| (a - b).abs()).collect();
    Ok((s.value() / 2.0).clamp(0.0, 1.0))
}

/// How sample probabilities enter the likelihood ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Probabilities normalised within each fixed-N collision-free set.
    #[default]
    FixedN,
    /// Unnormalised pattern probabilities.
    Raw,
}

/// Model probabilities for every photon number that occurs in a sample set.
#[derive(Debug, Clone, Default)]
pub struct ModelTables {
    pub by_photons: BTreeMap<usize, PatternDistribution>,
}

impl ModelTables {
    pub fn insert(&mut self, dist: PatternDistribution) {
        self.by_photons.insert(dist.photons, dist);
    }

    /// `None` when the pattern is outside the tabulated sets.
    pub fn probability(&self, n: &DetectionPattern, norm: Normalization) -> Option<f64> {
        let dist = self.by_photons.get(&n.total())?;
        let p = dist.probability_of(n)?;
        Some(match norm {
            Normalization::FixedN => p,
            Normalization::Raw => p * dist.unnormalized_total,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LikelihoodTrace {
    /// `ln pr(A|S_i) − ln pr(B|S_i)` per sample.
    pub increments: Vec<f64>,
    /// Running `ln L` after each sample.
    pub cumulative_log: Vec<f64>,
    pub log_l: f64,
    pub l: f64,
    pub samples: usize,
    /// Indices of samples with zero (or untabulated) probability under
    /// either model; their increment is ±∞ (or 0 when both vanish).
    pub flagged: Vec<usize>,
}

impl LikelihoodTrace {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["sample", "increment", "log_l", "l"])?;
        for (i, (inc, cum)) in self.increments.iter().zip(&self.cumulative_log).enumerate() {
            out.write_record([
                (i + 1).to_string(),
                fmt_f64(*inc),
                fmt_f64(*cum),
                fmt_f64(cum.exp()),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// `L = ∏ pr(A|S_i) / pr(B|S_i)`, accumulated as a sum of logs.
pub fn likelihood_ratio(
    samples: &[DetectionPattern],
    a: &ModelTables,
    b: &ModelTables,
    norm: Normalization,
) -> LikelihoodTrace {
    let mut acc = NeumaierSum::new();
    let mut increments = Vec::with_capacity(samples.len());
    let mut cumulative_log = Vec::with_capacity(samples.len());
    let mut flagged = Vec::new();
    // Compensated sums cannot carry infinities; keep them apart.
    let mut infinite = 0.0;
    for (i, s) in samples.iter().enumerate() {
        let pa = a.probability(s, norm).unwrap_or(0.0);
        let pb = b.probability(s, norm).unwrap_or(0.0);
        if pa <= 0.0 || pb <= 0.0 {
            flagged.push(i);
        }
        let inc = if pa == pb { 0.0 } else { pa.ln() - pb.ln() };
        if inc.is_finite() {
            acc.add(inc);
        } else {
            infinite += inc;
        }
        increments.push(inc);
        cumulative_log.push(acc.value() + infinite);
    }
    let log_l = acc.value() + infinite;
    LikelihoodTrace {
        increments,
        cumulative_log,
        log_l,
        l: log_l.exp(),
        samples: samples.len(),
        flagged,
    }
}

/// Tables for several models of one state over the photon numbers in
/// `samples`. K-order models share one pair-count decomposition per pattern.
pub fn tables_for_state(
    state: &GaussianState,
    kinds: &[ModelKind],
    samples: &[DetectionPattern],
    budget: u64,
) -> Result<Vec<ModelTables>> {
    let photon_numbers: std::collections::BTreeSet<usize> = samples.iter().map(|s| s.total()).collect();
    let mut tables = vec![ModelTables::default(); kinds.len()];
    let full = Prepared::from_state(state, ModelSpec::full());
    for &n in &photon_numbers {
        let (patterns, decs) = probability::enumerate_decompositions(&full, n, true, budget)?;
        for (t, &kind) in tables.iter_mut().zip(kinds) {
            let dist = match kind {
                ModelKind::Full | ModelKind::Korder { .. } => probability::distribution_from_decompositions(
                    &full,
                    patterns.clone(),
                    &decs,
                    kind,
                    n,
                    true,
                )?,
                _ => probability::enumerate_distribution(state, n, true, ModelSpec::new(kind), budget)?,
            };
            t.insert(dist);
        }
    }
    Ok(tables)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probability::{enumerate_distribution, DEFAULT_BUDGET};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn table(probs: Vec<f64>) -> PatternDistribution {
        let patterns = probability::collision_free_patterns(probs.len(), 1);
        PatternDistribution {
            d: probs.len(),
            photons: 1,
            collision_free: true,
            model: ModelSpec::full(),
            patterns,
            probabilities: probs,
            unnormalized_total: 0.5,
            p_vac: None,
            state_hash: None,
        }
    }

    #[test]
    fn tvd_extremes() {
        let p = table(vec![0.5, 0.5, 0.0, 0.0]);
        let q = table(vec![0.0, 0.0, 0.25, 0.75]);
        assert_eq!(tvd(&p, &p).unwrap(), 0.0);
        assert_eq!(tvd(&p, &q).unwrap(), 1.0);
        assert!(tvd(&p, &table(vec![1.0, 0.0, 0.0])).is_err());
    }

    proptest! {
        #[test]
        fn tvd_is_a_metric(raw in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0), 1..12)) {
            let norm = |v: Vec<f64>| { let s: f64 = v.iter().sum::<f64>().max(1e-12); v.into_iter().map(|x| x / s).collect::<Vec<_>>() };
            let p = norm(raw.iter().map(|t| t.0).collect());
            let q = norm(raw.iter().map(|t| t.1).collect());
            let r = norm(raw.iter().map(|t| t.2).collect());
            let pq = tvd_slices(&p, &q).unwrap();
            prop_assert_eq!(pq, tvd_slices(&q, &p).unwrap());
            prop_assert!(pq <= tvd_slices(&p, &r).unwrap() + tvd_slices(&r, &q).unwrap() + 1e-12);
            prop_assert!((0.0..=1.0).contains(&pq));
        }
    }

    #[test]
    fn identical_models_give_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = crate::random::physical_state(4, &mut rng);
        let samples: Vec<_> = probability::collision_free_patterns(4, 2).into_iter().cycle().take(40).collect();
        let tables = tables_for_state(&s, &[ModelKind::Full, ModelKind::Korder { k: 2 }], &samples, DEFAULT_BUDGET).unwrap();
        let t = likelihood_ratio(&samples, &tables[0], &tables[0], Normalization::FixedN);
        assert_eq!(t.l, 1.0);
        let t = likelihood_ratio(&samples, &tables[1], &tables[0], Normalization::FixedN);
        assert_eq!(t.l, 1.0);
        assert_eq!(t.samples, 40);
        assert!(t.flagged.is_empty());
    }

    #[test]
    fn order_invariance_and_raw_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = crate::random::physical_state(4, &mut rng);
        let mut samples: Vec<_> = probability::collision_free_patterns(4, 2);
        samples.extend(probability::collision_free_patterns(4, 1));
        let tables = tables_for_state(&s, &[ModelKind::Full, ModelKind::Korder { k: 0 }], &samples, DEFAULT_BUDGET).unwrap();
        let fwd = likelihood_ratio(&samples, &tables[1], &tables[0], Normalization::FixedN);
        samples.reverse();
        let rev = likelihood_ratio(&samples, &tables[1], &tables[0], Normalization::FixedN);
        assert!((fwd.log_l - rev.log_l).abs() < 1e-12);
        assert_ne!(fwd.increments, rev.increments);
        let raw = likelihood_ratio(&samples, &tables[1], &tables[0], Normalization::Raw);
        assert_ne!(raw.log_l, fwd.log_l);
        let pv = s.vacuum_probability();
        let direct = enumerate_distribution(&s, 2, true, ModelSpec::full(), DEFAULT_BUDGET).unwrap();
        let n = &direct.patterns[0];
        let raw_p = tables[0].probability(n, Normalization::Raw).unwrap();
        let exact = crate::probability::pattern_probability(&s, n, ModelSpec::full()).unwrap();
        assert!((raw_p - exact).abs() < 1e-14 * exact.max(pv));
    }

    #[test]
    fn zero_probability_samples_flagged() {
        let p = table(vec![0.5, 0.5, 0.0]);
        let q = table(vec![0.2, 0.3, 0.5]);
        let mut a = ModelTables::default();
        a.insert(p);
        let mut b = ModelTables::default();
        b.insert(q);
        let samples = probability::collision_free_patterns(3, 1);
        let t = likelihood_ratio(&samples, &a, &b, Normalization::FixedN);
        assert_eq!(t.flagged, vec![2]);
        assert_eq!(t.log_l, f64::NEG_INFINITY);
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("sample,increment,log_l,l\n1,"));
    }
}
