//! Metrics: feature average bit-width, bit operations, a kernel two-sample
//! distance and rank correlations.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{self, Parallelism};
use crate::qlip::BitPlan;
use crate::quant::IDENTITY_BITS;

/// Mean activation bit-width over every `(layer, step, sample)`.
pub fn compute_fab(plans: &[BitPlan]) -> Result<f64> {
    let first = plans
        .first()
        .ok_or_else(|| Error::contract("FAB of an empty plan list"))?;
    let mut total = 0u64;
    for p in plans {
        if p.layers() != first.layers() || p.steps() != first.steps() {
            return Err(Error::contract("plans differ in shape"));
        }
        total += p.entries().iter().map(|&b| b as u64).sum::<u64>();
    }
    Ok(total as f64 / (plans.len() * first.entries().len()) as f64)
}

/// Multiply-accumulate counts of one denoiser evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    /// MACs of each quantizable layer, in plan row order.
    pub macs: Vec<u64>,
    pub weight_bits: u32,
    /// MACs per step of layers that stay in full precision.
    pub unquantized_macs: u64,
}

impl CostModel {
    pub fn new(macs: Vec<u64>, weight_bits: u32, unquantized_macs: u64) -> Result<Self> {
        if macs.contains(&0) {
            return Err(Error::contract("every quantizable layer needs MACs > 0"));
        }
        Ok(CostModel {
            macs,
            weight_bits,
            unquantized_macs,
        })
    }
}

/// `Σ_{k,t} MACs_k · (b_w/32) · (b_a(k,t)/32)`, plus the full-precision
/// layers at factor 1.
pub fn compute_bitops(cost: &CostModel, plan: &BitPlan) -> Result<f64> {
    if plan.layers() != cost.macs.len() {
        return Err(Error::contract(format!(
            "plan has {} layers, cost model {}",
            plan.layers(),
            cost.macs.len()
        )));
    }
    let full = IDENTITY_BITS as f64;
    let w = cost.weight_bits as f64 / full;
    let mut total = cost.unquantized_macs as f64 * plan.steps() as f64;
    for (k, &m) in cost.macs.iter().enumerate() {
        let bits: u64 = plan.row(k).iter().map(|&b| b as u64).sum();
        total += m as f64 * w * bits as f64 / full;
    }
    Ok(total)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Median of all pairwise Euclidean distances in `points`.
pub fn median_pairwise_distance(points: &[Vec<f64>], par: Parallelism) -> Result<f64> {
    let n = points.len();
    if n < 2 {
        return Err(Error::contract("median distance needs two points"));
    }
    let mut d: Vec<f64> = par::map_indices(par, n, |i| {
        (i + 1..n)
            .map(|j| sq_dist(&points[i], &points[j]).sqrt())
            .collect::<Vec<_>>()
    })
    .into_iter()
    .flatten()
    .collect();
    let mid = d.len() / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    let mut med = *m;
    if d.len().is_multiple_of(2) {
        let lower = d[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        med = 0.5 * (med + lower);
    }
    Ok(med)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MmdEstimate {
    /// Unbiased estimate; may be slightly negative.
    pub mmd2: f64,
    pub bandwidth: f64,
}

impl MmdEstimate {
    /// Estimate floored at zero.
    pub fn reported(&self) -> f64 {
        self.mmd2.max(0.0)
    }
}

/// Unbiased RBF-kernel MMD², `k(a, b) = exp(−‖a − b‖² / 2h²)`. Without a
/// bandwidth the median pairwise distance of the pooled sets is used.
pub fn mmd_distance(
    x: &[Vec<f64>],
    y: &[Vec<f64>],
    bandwidth: Option<f64>,
    par: Parallelism,
) -> Result<MmdEstimate> {
    if x.len() < 2 || y.len() < 2 {
        return Err(Error::contract("MMD needs at least two points per set"));
    }
    let dim = x[0].len();
    if x.iter().chain(y).any(|p| p.len() != dim) {
        return Err(Error::contract("MMD inputs differ in dimension"));
    }
    let h = match bandwidth {
        Some(h) if h > 0.0 && h.is_finite() => h,
        Some(h) => return Err(Error::contract(format!("bandwidth {h} must be positive"))),
        None => {
            let pooled: Vec<Vec<f64>> = x.iter().chain(y).cloned().collect();
            median_pairwise_distance(&pooled, par)?.max(1e-12)
        }
    };
    let gamma = 1.0 / (2.0 * h * h);
    let k = |a: &[f64], b: &[f64]| (-gamma * sq_dist(a, b)).exp();
    let within = |s: &[Vec<f64>]| {
        let n = s.len();
        let total = par::sum_indices(par, n, |i| (i + 1..n).map(|j| k(&s[i], &s[j])).sum::<f64>());
        2.0 * total / (n * (n - 1)) as f64
    };
    let cross = par::sum_indices(par, x.len(), |i| y.iter().map(|b| k(&x[i], b)).sum::<f64>());
    let mmd2 = within(x) + within(y) - 2.0 * cross / (x.len() * y.len()) as f64;
    Ok(MmdEstimate { mmd2, bandwidth: h })
}

/// Ranks starting at 1; tied values share their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &p in &idx[i..=j] {
            ranks[p] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Numeric(
            "correlation of a zero-variance input".into(),
        ));
    }
    Ok(sab / (saa * sbb).sqrt())
}

/// `(SROCC, PLCC)` of predictions against ground truth.
pub fn rank_correlation(pred: &[f64], truth: &[f64]) -> Result<(f64, f64)> {
    if pred.len() != truth.len() || pred.len() < 3 {
        return Err(Error::contract(
            "rank correlation needs two equal-length inputs of length ≥ 3",
        ));
    }
    let plcc = pearson(pred, truth)?;
    let srocc = pearson(&average_ranks(pred), &average_ranks(truth))?;
    Ok((srocc, plcc))
}

/// Count of each bit-width per layer over all plans, keyed `(layer, bits)`.
pub fn bit_histogram(plans: &[BitPlan]) -> BTreeMap<(usize, u32), u64> {
    let mut h = BTreeMap::new();
    for p in plans {
        for k in 0..p.layers() {
            for &b in p.row(k) {
                *h.entry((k, b)).or_insert(0) += 1;
            }
        }
    }
    h
}

pub fn bit_histogram_csv(hist: &BTreeMap<(usize, u32), u64>) -> String {
    let mut s = String::from("layer,bits,count\n");
    for ((k, b), c) in hist {
        writeln!(s, "{k},{b},{c}").expect("write to string");
    }
    s
}

/// One row of the metrics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub arm: String,
    pub fab: f64,
    /// Denoiser BitOPs summed over samples.
    pub bitops: f64,
    /// BitOPs of the predictor and allocator, kept separate.
    pub overhead_bitops: f64,
    pub mmd2: f64,
    /// FAB per prompt detail level, index = level.
    pub fab_by_level: Vec<f64>,
    pub t2q_srocc: f64,
    pub t2q_plcc: f64,
}

impl MetricsReport {
    pub fn csv_header(levels: usize) -> String {
        let mut s = String::from("arm,fab,bitops,overhead_bitops,mmd2");
        for l in 0..levels {
            write!(s, ",fab_level{l}").expect("write to string");
        }
        s.push_str(",t2q_srocc,t2q_plcc");
        s
    }

    /// Fixed-precision formatting so reruns compare byte-for-byte.
    pub fn csv_row(&self) -> String {
        let mut s = format!(
            "{},{:.6},{:.6e},{:.6e},{:.8}",
            self.arm, self.fab, self.bitops, self.overhead_bitops, self.mmd2
        );
        for f in &self.fab_by_level {
            write!(s, ",{f:.6}").expect("write to string");
        }
        write!(s, ",{:.6},{:.6}", self.t2q_srocc, self.t2q_plcc).expect("write to string");
        s
    }
}

pub fn metrics_csv(reports: &[MetricsReport]) -> String {
    let levels = reports.first().map_or(0, |r| r.fab_by_level.len());
    let mut s = MetricsReport::csv_header(levels);
    s.push('\n');
    for r in reports {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;

    #[test]
    fn fab_examples() {
        assert_eq!(compute_fab(&[BitPlan::filled(3, 5, 8)]).unwrap(), 8.0);
        let p = BitPlan::from_rows(&[vec![6], vec![8], vec![10]]).unwrap();
        assert_eq!(compute_fab(&[p]).unwrap(), 8.0);
        assert!(compute_fab(&[]).is_err());
    }

    #[test]
    fn bitops_examples() {
        let c = CostModel::new(vec![1_000_000_000], 32, 0).unwrap();
        assert_eq!(compute_bitops(&c, &BitPlan::filled(1, 1, 32)).unwrap(), 1e9);
        let c = CostModel::new(vec![1_000_000_000], 4, 0).unwrap();
        assert_eq!(
            compute_bitops(&c, &BitPlan::filled(1, 1, 16)).unwrap(),
            6.25e7
        );
        let c2 = CostModel::new(vec![2_000_000_000], 4, 0).unwrap();
        assert_eq!(
            compute_bitops(&c2, &BitPlan::filled(1, 1, 16)).unwrap(),
            1.25e8
        );
        assert!(CostModel::new(vec![0], 4, 0).is_err());
    }

    #[test]
    fn correlation_examples() {
        let (s, p) = rank_correlation(&[1.0, 2.0, 3.0], &[2.0, 4.0, 9.0]).unwrap();
        assert!((s - 1.0).abs() < 1e-15);
        // centred sums: Σab = 7, Σa² = 2, Σb² = 26
        assert!((p - 7.0 / 52f64.sqrt()).abs() < 1e-15);
        let (s, _) = rank_correlation(&[1.0, 2.0, 3.0, 4.0], &[4.0, 3.0, 2.0, 1.0]).unwrap();
        assert!((s + 1.0).abs() < 1e-15);
        assert!(rank_correlation(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
        assert_eq!(
            average_ranks(&[3.0, 1.0, 3.0, 2.0]),
            vec![3.5, 1.0, 3.5, 2.0]
        );
    }

    #[test]
    fn mmd_separated_and_self() {
        let mut rng = Stream::new(1, "mmd");
        let a: Vec<Vec<f64>> = (0..500).map(|_| rng.normals(2)).collect();
        let b: Vec<Vec<f64>> = (0..500)
            .map(|_| vec![rng.normal() + 10.0, rng.normal()])
            .collect();
        let far = mmd_distance(&a, &b, None, Parallelism::Rayon).unwrap();
        assert!(far.mmd2 > 0.5, "{far:?}");
        let same = mmd_distance(&a, &a, None, Parallelism::Rayon).unwrap();
        assert!(same.mmd2.abs() < 0.01, "{same:?}");
        assert!(mmd_distance(&a[..1], &b, None, Parallelism::Sequential).is_err());
        let seq = mmd_distance(&a, &b, Some(1.3), Parallelism::Sequential).unwrap();
        let par = mmd_distance(&a, &b, Some(1.3), Parallelism::Rayon).unwrap();
        assert_eq!(seq.mmd2.to_bits(), par.mmd2.to_bits());
    }

    #[test]
    fn histogram_counts() {
        let plans = vec![
            BitPlan::from_rows(&[vec![6, 8], vec![10, 10]]).unwrap(),
            BitPlan::from_rows(&[vec![6, 6], vec![8, 10]]).unwrap(),
        ];
        let h = bit_histogram(&plans);
        assert_eq!(h.values().sum::<u64>(), 8);
        assert_eq!(h[&(0, 6)], 3);
        assert_eq!(h[&(1, 10)], 3);
        assert!(bit_histogram_csv(&h).starts_with("layer,bits,count\n0,6,3\n"));
    }
}
