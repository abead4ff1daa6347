use crate::error::{Error, Result};
use crate::quant::BitMenu;

/// Activation bit-widths for one generation: `layers × steps`, where step
/// column 0 is the first reverse step (highest noise).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitPlan {
    layers: usize,
    steps: usize,
    bits: Vec<u32>,
}

impl BitPlan {
    pub fn filled(layers: usize, steps: usize, bits: u32) -> Self {
        BitPlan {
            layers,
            steps,
            bits: vec![bits; layers * steps],
        }
    }

    pub fn from_rows(rows: &[Vec<u32>]) -> Result<Self> {
        let steps = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || steps == 0 || rows.iter().any(|r| r.len() != steps) {
            return Err(Error::contract(
                "bit plan rows must be non-empty and equal length",
            ));
        }
        Ok(BitPlan {
            layers: rows.len(),
            steps,
            bits: rows.concat(),
        })
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn get(&self, layer: usize, step: usize) -> u32 {
        self.bits[layer * self.steps + step]
    }

    pub fn set(&mut self, layer: usize, step: usize, bits: u32) {
        self.bits[layer * self.steps + step] = bits;
    }

    pub fn column(&self, step: usize) -> Vec<u32> {
        (0..self.layers).map(|k| self.get(k, step)).collect()
    }

    pub fn set_column(&mut self, step: usize, bits: &[u32]) {
        for (k, &b) in bits.iter().enumerate() {
            self.set(k, step, b);
        }
    }

    pub fn row(&self, layer: usize) -> &[u32] {
        &self.bits[layer * self.steps..(layer + 1) * self.steps]
    }

    pub fn entries(&self) -> &[u32] {
        &self.bits
    }

    pub fn mean_bits(&self) -> f64 {
        self.bits.iter().map(|&b| f64::from(b)).sum::<f64>() / self.bits.len() as f64
    }

    pub fn all_in_menu(&self, menu: &BitMenu) -> bool {
        self.bits.iter().all(|&b| menu.contains(b))
    }

    /// CSV with one row per layer and one column per reverse step.
    pub fn to_csv(&self) -> String {
        let mut s = String::with_capacity(self.bits.len() * 3);
        for k in 0..self.layers {
            let row: Vec<String> = self.row(k).iter().map(u32::to_string).collect();
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let rows = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.split(',')
                    .map(|v| {
                        v.trim()
                            .parse::<u32>()
                            .map_err(|e| Error::contract(format!("bad bit entry `{v}`: {e}")))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        BitPlan::from_rows(&rows)
    }
}

/// Elementwise maximum across a batch, so every prompt gets at least the
/// precision it asked for.
pub fn merge_bit_plans(plans: &[BitPlan]) -> Result<BitPlan> {
    let first = plans
        .first()
        .ok_or_else(|| Error::contract("cannot merge an empty list of plans"))?;
    let mut out = first.clone();
    for p in &plans[1..] {
        if (p.layers, p.steps) != (first.layers, first.steps) {
            return Err(Error::contract(format!(
                "plan dims differ: {}x{} vs {}x{}",
                p.layers, p.steps, first.layers, first.steps
            )));
        }
        for (o, &b) in out.bits.iter_mut().zip(&p.bits) {
            *o = (*o).max(b);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;

    #[test]
    fn merge_single_and_pair() {
        let a = BitPlan::filled(3, 5, 6);
        assert_eq!(merge_bit_plans(std::slice::from_ref(&a)).unwrap(), a);
        let b = BitPlan::filled(3, 5, 10);
        assert_eq!(merge_bit_plans(&[a.clone(), b.clone()]).unwrap(), b);
        assert!(merge_bit_plans(&[a, BitPlan::filled(2, 5, 6)]).is_err());
        assert!(merge_bit_plans(&[]).is_err());
    }

    #[test]
    fn merge_matches_brute_force() {
        let mut rng = Stream::new(5, "plans");
        let menu = [6, 8, 10];
        for _ in 0..20 {
            let plans: Vec<BitPlan> = (0..1 + rng.below(6))
                .map(|_| {
                    let rows: Vec<Vec<u32>> = (0..4)
                        .map(|_| (0..7).map(|_| menu[rng.below(3)]).collect())
                        .collect();
                    BitPlan::from_rows(&rows).unwrap()
                })
                .collect();
            let m = merge_bit_plans(&plans).unwrap();
            for k in 0..4 {
                for t in 0..7 {
                    let mut best = 0;
                    for p in &plans {
                        if p.get(k, t) > best {
                            best = p.get(k, t);
                        }
                    }
                    assert_eq!(m.get(k, t), best);
                }
            }
        }
    }

    #[test]
    fn csv_layout() {
        let p = BitPlan::from_rows(&[vec![6, 8], vec![10, 6]]).unwrap();
        assert_eq!(p.to_csv(), "6,8\n10,6\n");
        assert_eq!(BitPlan::from_csv(&p.to_csv()).unwrap(), p);
    }
}
