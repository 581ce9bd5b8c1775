//! Step-aware mixed precision: per-step activation bitwidths chosen by
//! comparing the quantized network's SNR with the forward-process SNR, and
//! bit-operation accounting.

use std::collections::BTreeMap;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Returned by [`compute_snr_q`] when the quantization noise is exactly zero.
pub const SNR_Q_SATURATION: f64 = 1e12;

pub const DEFAULT_BIT_SET: [u32; 2] = [4, 8];
pub const DEFAULT_WEIGHT_BITS: u32 = 4;
pub const DEFAULT_IO_BITS: u32 = 8;

/// `‖ε‖₂ / ‖Δ‖₂` over all elements of the set.
pub fn compute_snr_q(eps: ArrayView2<'_, f64>, delta: ArrayView2<'_, f64>) -> Result<f64> {
    if eps.shape() != delta.shape() {
        return Err(Error::InvalidInput(format!(
            "paired sets differ in shape: {:?} vs {:?}",
            eps.shape(),
            delta.shape()
        )));
    }
    let signal = eps.iter().map(|v| v * v).sum::<f64>().sqrt();
    let noise = delta.iter().map(|v| v * v).sum::<f64>().sqrt();
    if noise == 0.0 {
        return Ok(SNR_Q_SATURATION);
    }
    Ok((signal / noise).min(SNR_Q_SATURATION))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixedPrecisionPlan {
    pub weight_bits: u32,
    /// Candidate activation bitwidths, ascending.
    pub bit_set: Vec<u32>,
    /// Chosen activation bitwidth per step (index `t − 1`).
    pub activation_bits: Vec<u32>,
    /// `snr_q[t − 1][j]` is the SNR of bitwidth `bit_set[j]` at step `t`.
    pub snr_q: Vec<Vec<f64>>,
    pub snr_f: Vec<f64>,
    pub bops_per_step: Vec<f64>,
    pub total_bops: f64,
    pub compression_ratio: f64,
}

impl MixedPrecisionPlan {
    /// A plan that uses `act_bits` at every step (no SNR data).
    pub fn constant(steps: usize, weight_bits: u32, act_bits: u32) -> Self {
        MixedPrecisionPlan {
            weight_bits,
            bit_set: vec![act_bits],
            activation_bits: vec![act_bits; steps],
            snr_q: Vec::new(),
            snr_f: Vec::new(),
            bops_per_step: Vec::new(),
            total_bops: 0.0,
            compression_ratio: 0.0,
        }
    }

    pub fn steps(&self) -> usize {
        self.activation_bits.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.bit_set.is_empty() {
            return Err(Error::Validation("empty bit set".into()));
        }
        if self.bit_set.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Validation("bit set must be strictly ascending".into()));
        }
        if let Some(i) = self
            .activation_bits
            .iter()
            .position(|b| !self.bit_set.contains(b))
        {
            return Err(Error::Validation(format!(
                "step {} uses {}-bit activations, not in the bit set",
                i + 1,
                self.activation_bits[i]
            )));
        }
        Ok(())
    }

    /// Steps (1-based) assigned to each bitwidth.
    pub fn steps_by_bits(&self) -> BTreeMap<u32, Vec<usize>> {
        let mut out: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, &b) in self.activation_bits.iter().enumerate() {
            out.entry(b).or_default().push(i + 1);
        }
        out
    }
}

/// Pick, per step, the smallest bitwidth whose SNR strictly exceeds the
/// forward SNR, falling back to the largest bitwidth.
pub fn select_plan(snr_q: &[Vec<f64>], snr_f: &[f64], bit_set: &[u32], weight_bits: u32) -> Result<MixedPrecisionPlan> {
    if bit_set.is_empty() {
        return Err(Error::InvalidConfig("bit set is empty".into()));
    }
    if bit_set.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidConfig(format!(
            "bit set {bit_set:?} must be strictly ascending"
        )));
    }
    if snr_q.len() != snr_f.len() || snr_q.iter().any(|row| row.len() != bit_set.len()) {
        return Err(Error::InvalidInput(
            "SNR table must have one row per step and one column per bitwidth".into(),
        ));
    }
    let max_bits = *bit_set.last().expect("non-empty");
    let activation_bits = snr_q
        .iter()
        .zip(snr_f)
        .map(|(row, &f)| {
            row.iter()
                .zip(bit_set)
                .find(|(&q, _)| q > f)
                .map_or(max_bits, |(_, &b)| b)
        })
        .collect();
    Ok(MixedPrecisionPlan {
        weight_bits,
        bit_set: bit_set.to_vec(),
        activation_bits,
        snr_q: snr_q.to_vec(),
        snr_f: snr_f.to_vec(),
        bops_per_step: Vec::new(),
        total_bops: 0.0,
        compression_ratio: 0.0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BopsSummary {
    pub bops_per_step: Vec<f64>,
    pub total: f64,
    pub compression_ratio_vs_fp32: f64,
}

/// Bit operations `MACs·b_w·b_a` per layer, summed per step with that step's
/// activation bitwidth. With `io_bits` set, the first and last layers use it
/// for both operands.
pub fn compute_bops(layer_macs: &[u64], plan: &MixedPrecisionPlan, io_bits: Option<u32>) -> Result<BopsSummary> {
    if layer_macs.is_empty() {
        return Err(Error::InvalidInput("network has no layers".into()));
    }
    let last = layer_macs.len() - 1;
    let bops_per_step: Vec<f64> = plan
        .activation_bits
        .iter()
        .map(|&ab| {
            layer_macs
                .iter()
                .enumerate()
                .map(|(i, &macs)| {
                    let (bw, ba) = match io_bits {
                        Some(io) if i == 0 || i == last => (io, io),
                        _ => (plan.weight_bits, ab),
                    };
                    macs as f64 * bw as f64 * ba as f64
                })
                .sum()
        })
        .collect();
    let total: f64 = bops_per_step.iter().sum();
    let fp32: f64 = layer_macs.iter().sum::<u64>() as f64 * 32.0 * 32.0 * plan.steps() as f64;
    Ok(BopsSummary {
        compression_ratio_vs_fp32: if total > 0.0 { fp32 / total } else { 0.0 },
        bops_per_step,
        total,
    })
}

impl MixedPrecisionPlan {
    /// Fill the BOPs fields from [`compute_bops`].
    pub fn with_bops(mut self, layer_macs: &[u64], io_bits: Option<u32>) -> Result<Self> {
        let b = compute_bops(layer_macs, &self, io_bits)?;
        self.bops_per_step = b.bops_per_step;
        self.total_bops = b.total;
        self.compression_ratio = b.compression_ratio_vs_fp32;
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use proptest::prelude::*;

    #[test]
    fn snr_examples() {
        let e = arr2(&[[1.0, -2.0], [0.5, 3.0]]);
        assert_eq!(compute_snr_q(e.view(), e.view()).unwrap(), 1.0);
        let e = arr2(&[[2.0, 0.0]]);
        let d = arr2(&[[0.0, 0.5]]);
        assert_eq!(compute_snr_q(e.view(), d.view()).unwrap(), 4.0);
        let z = arr2(&[[0.0, 0.0]]);
        assert_eq!(compute_snr_q(e.view(), z.view()).unwrap(), SNR_Q_SATURATION);
    }

    #[test]
    fn selection_examples() {
        let p = select_plan(&[vec![2.0, 5.0]], &[3.0], &[4, 8], 4).unwrap();
        assert_eq!(p.activation_bits, vec![8]);
        let p = select_plan(&[vec![4.0, 5.0]], &[3.0], &[4, 8], 4).unwrap();
        assert_eq!(p.activation_bits, vec![4]);
        let p = select_plan(&[vec![1.0, 2.0]], &[3.0], &[4, 8], 4).unwrap();
        assert_eq!(p.activation_bits, vec![8]);
        let p = select_plan(&[vec![0.1], vec![100.0]], &[3.0, 3.0], &[8], 4).unwrap();
        assert_eq!(p.activation_bits, vec![8, 8]);
        // equality does not qualify
        let p = select_plan(&[vec![3.0, 3.0]], &[3.0], &[4, 8], 4).unwrap();
        assert_eq!(p.activation_bits, vec![8]);
        assert!(matches!(select_plan(&[], &[], &[], 4), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn bops_examples() {
        let plan = MixedPrecisionPlan::constant(1, 4, 8);
        assert_eq!(compute_bops(&[100], &plan, None).unwrap().total, 3200.0);
        let plan = MixedPrecisionPlan::constant(7, 8, 8);
        let b = compute_bops(&[10, 300, 40], &plan, None).unwrap();
        assert_eq!(b.compression_ratio_vs_fp32, 16.0);
    }

    proptest! {
        #[test]
        fn raising_threshold_never_lowers_bits(
            table in prop::collection::vec((0.0f64..20.0, 0.0f64..20.0, 0.0f64..20.0), 1..50),
            bump in 0.0f64..10.0,
        ) {
            let snr_q: Vec<Vec<f64>> = table.iter().map(|&(a, b, _)| vec![a, b]).collect();
            let snr_f: Vec<f64> = table.iter().map(|&(_, _, f)| f).collect();
            let raised: Vec<f64> = snr_f.iter().map(|f| f + bump).collect();
            let lo = select_plan(&snr_q, &snr_f, &[4, 8], 4).unwrap();
            let hi = select_plan(&snr_q, &raised, &[4, 8], 4).unwrap();
            for (a, b) in lo.activation_bits.iter().zip(&hi.activation_bits) {
                prop_assert!(b >= a);
            }
        }

        #[test]
        fn bops_total_is_sum_of_steps(bits in prop::collection::vec(prop::sample::select(vec![4u32, 8]), 1..100)) {
            let mut plan = MixedPrecisionPlan::constant(bits.len(), 4, 4);
            plan.bit_set = vec![4, 8];
            plan.activation_bits = bits;
            let b = compute_bops(&[2304, 16384, 16384, 256], &plan, Some(8)).unwrap();
            prop_assert_eq!(b.total, b.bops_per_step.iter().sum::<f64>());
        }
    }
}
