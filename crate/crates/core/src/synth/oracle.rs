//! Quality oracle: a diagonal Gaussian mixture fitted by EM to reference
//! samples, scoring log-likelihood mapped to [0, 1] through its 1st/99th
//! reference percentiles. A k-nearest-neighbour realism score is available
//! as an alternative scorer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Checkpoint, Tensor};
use crate::rng::{Stream, StreamKey};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QualityMetric {
    Gmm,
    Realism,
}

impl QualityMetric {
    pub fn name(self) -> &'static str {
        match self {
            QualityMetric::Gmm => "gmm",
            QualityMetric::Realism => "realism",
        }
    }
}

impl std::str::FromStr for QualityMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gmm" => Ok(QualityMetric::Gmm),
            "realism" => Ok(QualityMetric::Realism),
            _ => Err(Error::Config(format!("unknown quality metric `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gmm {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub vars: Vec<Vec<f64>>,
}

const MAX_ITER: usize = 200;
const MAX_RETRIES: usize = 3;
const TOL: f64 = 1e-10;

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl Gmm {
    pub fn components(&self) -> usize {
        self.weights.len()
    }

    fn component_logs(&self, x: &[f64], out: &mut [f64]) {
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        for (c, o) in out.iter_mut().enumerate() {
            let mut l = self.weights[c].ln();
            for ((xi, m), v) in x.iter().zip(&self.means[c]).zip(&self.vars[c]) {
                l -= 0.5 * (ln2pi + v.ln() + (xi - m) * (xi - m) / v);
            }
            *o = l;
        }
    }

    pub fn log_likelihood(&self, x: &[f64]) -> f64 {
        let mut buf = vec![0.0; self.components()];
        self.component_logs(x, &mut buf);
        log_sum_exp(&buf)
    }

    /// EM from a k-means++ seeding. A component whose variance collapses
    /// or whose weight vanishes triggers a re-seed with jittered means.
    pub fn fit(data: &[Vec<f64>], components: usize, key: StreamKey) -> Result<Gmm> {
        if components == 0 {
            return Err(Error::Config("GMM needs at least one component".into()));
        }
        if data.len() < 10 * components {
            return Err(Error::contract(format!(
                "GMM with {components} components needs ≥ {} reference points, got {}",
                10 * components,
                data.len()
            )));
        }
        let d = data[0].len();
        if data.iter().any(|x| x.len() != d) {
            return Err(Error::contract("reference points differ in dimension"));
        }
        let n = data.len() as f64;
        let mean: Vec<f64> = (0..d)
            .map(|j| data.iter().map(|x| x[j]).sum::<f64>() / n)
            .collect();
        let global_var: Vec<f64> = (0..d)
            .map(|j| data.iter().map(|x| (x[j] - mean[j]).powi(2)).sum::<f64>() / n)
            .collect();
        let scale = global_var.iter().sum::<f64>() / d as f64;
        let floor = 1e-10 * scale.max(1e-300);
        for attempt in 0..=MAX_RETRIES {
            let mut rng = key.child(attempt as u64).rng();
            let mut means = kmeans_pp(data, components, &mut rng);
            if attempt > 0 {
                let jitter = 0.1 * scale.sqrt();
                for m in &mut means {
                    for v in m.iter_mut() {
                        *v += jitter * rng.normal();
                    }
                }
            }
            let gmm = Gmm {
                weights: vec![1.0 / components as f64; components],
                means,
                vars: vec![global_var.iter().map(|v| v.max(floor)).collect(); components],
            };
            match em(gmm, data, floor) {
                Some(g) => return Ok(g),
                None => log::warn!("GMM attempt {attempt} degenerated; re-seeding with jitter"),
            }
        }
        Err(Error::Numeric(format!(
            "GMM fit degenerated after {MAX_RETRIES} retries"
        )))
    }
}

fn kmeans_pp(data: &[Vec<f64>], k: usize, rng: &mut Stream) -> Vec<Vec<f64>> {
    let mut centers = vec![data[rng.below(data.len())].clone()];
    let mut dist: Vec<f64> = data.iter().map(|x| sq(x, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.uniform() * total;
            let mut idx = data.len() - 1;
            for (i, &w) in dist.iter().enumerate() {
                if u < w {
                    idx = i;
                    break;
                }
                u -= w;
            }
            idx
        } else {
            rng.below(data.len())
        };
        centers.push(data[pick].clone());
        let c = centers.last().expect("non-empty");
        for (dv, x) in dist.iter_mut().zip(data) {
            *dv = dv.min(sq(x, c));
        }
    }
    centers
}

/// Runs EM; `None` when a component degenerates.
fn em(mut g: Gmm, data: &[Vec<f64>], floor: f64) -> Option<Gmm> {
    let k = g.components();
    let d = data[0].len();
    let n = data.len();
    let mut resp = vec![0.0; n * k];
    let mut prev = f64::NEG_INFINITY;
    for _ in 0..MAX_ITER {
        let mut total = 0.0;
        for (i, x) in data.iter().enumerate() {
            let r = &mut resp[i * k..(i + 1) * k];
            g.component_logs(x, r);
            let lse = log_sum_exp(r);
            total += lse;
            for v in r.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let avg = total / n as f64;
        for c in 0..k {
            let nk: f64 = (0..n).map(|i| resp[i * k + c]).sum();
            if nk < 1e-8 * n as f64 {
                return None;
            }
            let mut m = vec![0.0; d];
            for (i, x) in data.iter().enumerate() {
                let w = resp[i * k + c];
                for j in 0..d {
                    m[j] += w * x[j];
                }
            }
            m.iter_mut().for_each(|v| *v /= nk);
            let mut v = vec![0.0; d];
            for (i, x) in data.iter().enumerate() {
                let w = resp[i * k + c];
                for j in 0..d {
                    v[j] += w * (x[j] - m[j]).powi(2);
                }
            }
            v.iter_mut().for_each(|s| *s /= nk);
            if v.iter().any(|&s| s <= floor || !s.is_finite()) {
                return None;
            }
            g.weights[c] = nk / n as f64;
            g.means[c] = m;
            g.vars[c] = v;
        }
        if (avg - prev).abs() < TOL * avg.abs().max(1.0) {
            break;
        }
        prev = avg;
    }
    Some(g)
}

/// Realism-style score: `max_j r_j / ‖x − y_j‖` over reference points
/// `y_j` with `r_j` the distance to their k-th neighbour, taken as a log.
/// Reference points with a radius above the median are dropped, and exact
/// matches are skipped so reference points do not score themselves.
#[derive(Debug, Clone, PartialEq)]
pub struct Realism {
    pub reference: Vec<Vec<f64>>,
    pub radii: Vec<f64>,
}

const REALISM_K: usize = 3;
const REALISM_MAX_REFERENCE: usize = 1000;

impl Realism {
    pub fn fit(data: &[Vec<f64>]) -> Result<Realism> {
        if data.len() <= REALISM_K {
            return Err(Error::contract(
                "realism score needs more reference points than k",
            ));
        }
        let stride = data.len().div_ceil(REALISM_MAX_REFERENCE);
        let reference: Vec<Vec<f64>> = data.iter().step_by(stride).cloned().collect();
        let radii = reference
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let mut d: Vec<f64> = reference
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .map(|(_, y)| sq(x, y).sqrt())
                    .collect();
                d.sort_by(f64::total_cmp);
                d[REALISM_K - 1].max(1e-12)
            })
            .collect::<Vec<f64>>();
        let mut sorted = radii.clone();
        sorted.sort_by(f64::total_cmp);
        let median = sorted[sorted.len() / 2];
        let (reference, radii) = reference
            .into_iter()
            .zip(radii)
            .filter(|&(_, r)| r <= median)
            .unzip();
        Ok(Realism { reference, radii })
    }

    pub fn raw(&self, x: &[f64]) -> f64 {
        self.reference
            .iter()
            .zip(&self.radii)
            .filter_map(|(y, r)| {
                let d2 = sq(x, y);
                (d2 > 0.0).then(|| r.ln() - 0.5 * d2.ln())
            })
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Scorer {
    Gmm(Gmm),
    Realism(Realism),
}

#[derive(Debug, Clone, PartialEq)]
pub struct QualityOracle {
    pub scorer: Scorer,
    /// 1st and 99th percentile of reference raw scores.
    pub lo: f64,
    pub hi: f64,
}

/// Linear-interpolated percentile of sorted data, `p ∈ [0, 100]`.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let f = pos - i as f64;
    if i + 1 < sorted.len() {
        sorted[i] + f * (sorted[i + 1] - sorted[i])
    } else {
        sorted[i]
    }
}

impl QualityOracle {
    pub fn fit(
        reference: &[Vec<f64>],
        metric: QualityMetric,
        components: usize,
        key: StreamKey,
    ) -> Result<Self> {
        let scorer = match metric {
            QualityMetric::Gmm => Scorer::Gmm(Gmm::fit(reference, components, key)?),
            QualityMetric::Realism => Scorer::Realism(Realism::fit(reference)?),
        };
        let mut raw: Vec<f64> = reference.iter().map(|x| raw_score(&scorer, x)).collect();
        raw.sort_by(f64::total_cmp);
        let lo = percentile(&raw, 1.0);
        let hi = percentile(&raw, 99.0);
        if !(hi > lo) {
            return Err(Error::Numeric(
                "quality normalisation bounds coincide".into(),
            ));
        }
        Ok(QualityOracle { scorer, lo, hi })
    }

    pub fn raw(&self, x: &[f64]) -> f64 {
        raw_score(&self.scorer, x)
    }

    /// `clamp((raw(x) − lo)/(hi − lo), 0, 1)`.
    pub fn score(&self, x: &[f64]) -> f64 {
        self.normalize(self.raw(x))
    }

    pub fn normalize(&self, raw: f64) -> f64 {
        ((raw - self.lo) / (self.hi - self.lo)).clamp(0.0, 1.0)
    }

    pub fn to_checkpoint(&self, ck: &mut Checkpoint) -> Result<()> {
        ck.put_f64s("oracle/bounds", &[self.lo, self.hi])?;
        match &self.scorer {
            Scorer::Gmm(g) => {
                ck.put_i32s("oracle/kind", &[0])?;
                ck.put_f64s("oracle/weights", &g.weights)?;
                ck.put_tensor("oracle/means", &Tensor::from_rows(&g.means)?)?;
                ck.put_tensor("oracle/vars", &Tensor::from_rows(&g.vars)?)?;
            }
            Scorer::Realism(r) => {
                ck.put_i32s("oracle/kind", &[1])?;
                ck.put_tensor("oracle/reference", &Tensor::from_rows(&r.reference)?)?;
                ck.put_f64s("oracle/radii", &r.radii)?;
            }
        }
        Ok(())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let b = ck.f64s("oracle/bounds")?;
        if b.len() != 2 {
            return Err(Error::contract("oracle/bounds must hold 2 values"));
        }
        let rows =
            |t: Tensor| -> Vec<Vec<f64>> { (0..t.rows()).map(|r| t.row(r).to_vec()).collect() };
        let scorer = match ck.i32s("oracle/kind")?.first() {
            Some(0) => Scorer::Gmm(Gmm {
                weights: ck.f64s("oracle/weights")?,
                means: rows(ck.tensor("oracle/means")?),
                vars: rows(ck.tensor("oracle/vars")?),
            }),
            Some(1) => Scorer::Realism(Realism {
                reference: rows(ck.tensor("oracle/reference")?),
                radii: ck.f64s("oracle/radii")?,
            }),
            _ => return Err(Error::contract("unknown oracle kind")),
        };
        Ok(QualityOracle {
            scorer,
            lo: b[0],
            hi: b[1],
        })
    }
}

fn raw_score(s: &Scorer, x: &[f64]) -> f64 {
    match s {
        Scorer::Gmm(g) => g.log_likelihood(x),
        Scorer::Realism(r) => r.raw(x),
    }
}
