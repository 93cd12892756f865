//! Unstructured magnitude pruning with persistent binary masks.
//!
//! Masks are monotone: once a coordinate is pruned it stays pruned, and its
//! parameter value is pinned to exactly zero. Sparsity is reported over the
//! prunable set of the initial model.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::{GradSet, ParamSet};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum PruneError {
    #[error("no surviving prunable weights")]
    NoSurvivors,
    #[error("prunable parameter {0} not present in the model")]
    MissingParam(String),
    #[error("mask for {name} has {mask} entries but parameter has {param}")]
    Shape { name: String, mask: usize, param: usize },
    #[error("invalid prune schedule: {0}")]
    Schedule(String),
    #[error("cannot prune {requested} of {survivors} surviving weights")]
    OverPrune { requested: usize, survivors: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PruneScope {
    #[default]
    Global,
    PerLayer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneSchedule {
    /// Fraction of *surviving* weights removed per round.
    pub zeta_iter: f64,
    /// Terminal sparsity; the loop stops once reached.
    pub zeta_end: f64,
    #[serde(default)]
    pub scope: PruneScope,
}

impl PruneSchedule {
    pub fn validate(&self) -> Result<(), PruneError> {
        if !(self.zeta_iter > 0.0 && self.zeta_iter < 1.0) {
            return Err(PruneError::Schedule(format!("zeta_iter {} outside (0,1)", self.zeta_iter)));
        }
        if !(self.zeta_end > 0.0 && self.zeta_end < 1.0) {
            return Err(PruneError::Schedule(format!("zeta_end {} outside (0,1)", self.zeta_end)));
        }
        Ok(())
    }

    /// Survivor target after `round` rounds: `⌈total·(1−ζ_iter)^round⌉`.
    ///
    /// Tracking the closed form (instead of iterating per-round floors, whose
    /// rounding drift compounds) keeps every curve row within 1/total of
    /// `1−(1−ζ_iter)^k`.
    pub fn target_survivors(&self, total: usize, round: usize) -> usize {
        let frac = (1.0 - self.zeta_iter).powi(round as i32);
        // the 1e-9 slack keeps exact products (e.g. 0.8³·1000) from being
        // pushed to the next integer by representation error
        (total as f64 * frac - 1e-9).ceil().max(0.0) as usize
    }

    /// Smallest k with `1−(1−ζ_iter)^k ≥ ζ_end`.
    pub fn planned_rounds(&self) -> usize {
        ((1.0 - self.zeta_end).ln() / (1.0 - self.zeta_iter).ln()).ceil() as usize
    }
}

/// Per-parameter binary masks (1 = alive) over the prunable name set.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneMask {
    masks: BTreeMap<String, Vec<u8>>,
}

impl PruneMask {
    /// Fresh all-alive mask over `prunable` names of `params`.
    pub fn new<E: Scalar>(params: &ParamSet<E>, prunable: &[String]) -> Result<Self, PruneError> {
        let mut masks = BTreeMap::new();
        for name in prunable {
            let t = params.get(name).ok_or_else(|| PruneError::MissingParam(name.clone()))?;
            masks.insert(name.clone(), vec![1u8; t.numel()]);
        }
        Ok(Self { masks })
    }

    /// Rebuild from persisted per-parameter masks.
    pub fn from_parts(masks: BTreeMap<String, Vec<u8>>) -> Self {
        Self { masks }
    }

    pub fn get(&self, name: &str) -> Option<&[u8]> {
        self.masks.get(name).map(|m| m.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Vec<u8>)> {
        self.masks.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.masks.keys()
    }

    /// Prunable weights in the initial model.
    pub fn total(&self) -> usize {
        self.masks.values().map(Vec::len).sum()
    }

    pub fn survivors(&self) -> usize {
        self.masks.values().flatten().filter(|&&b| b == 1).count()
    }

    /// ζ: pruned prunable weights over total prunable weights.
    pub fn sparsity(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        (total - self.survivors()) as f64 / total as f64
    }

    fn validate_against<E: Scalar>(&self, params: &ParamSet<E>) -> Result<(), PruneError> {
        for (name, mask) in &self.masks {
            let t = params.get(name).ok_or_else(|| PruneError::MissingParam(name.clone()))?;
            if t.numel() != mask.len() {
                return Err(PruneError::Shape { name: name.clone(), mask: mask.len(), param: t.numel() });
            }
        }
        Ok(())
    }
}

/// Prune the `count` smallest-magnitude surviving weights, pooled across all
/// prunable tensors. Ties break by parameter name, then flat index. Newly
/// masked weights are set to exactly zero.
pub fn magnitude_prune_count<E: Scalar>(
    params: &mut ParamSet<E>,
    mask: &mut PruneMask,
    count: usize,
) -> Result<usize, PruneError> {
    mask.validate_against(params)?;
    let survivors = mask.survivors();
    if survivors == 0 {
        return Err(PruneError::NoSurvivors);
    }
    if count == 0 {
        return Ok(0);
    }
    if count > survivors {
        return Err(PruneError::OverPrune { requested: count, survivors });
    }
    // (|w|, name order, index) gives a deterministic total order
    let names: Vec<String> = mask.names().cloned().collect();
    let mut candidates: Vec<(f64, u32, u32)> = Vec::with_capacity(survivors);
    for (ni, name) in names.iter().enumerate() {
        let m = &mask.masks[name];
        let data = params.get(name).expect("validated").data();
        for (i, (&keep, &v)) in m.iter().zip(data).enumerate() {
            if keep == 1 {
                candidates.push((v.to_f64().expect("finite").abs(), ni as u32, i as u32));
            }
        }
    }
    candidates.sort_unstable_by(|a, b| {
        a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
    });
    for &(_, ni, i) in &candidates[..count] {
        let name = &names[ni as usize];
        mask.masks.get_mut(name).expect("present")[i as usize] = 0;
        params.get_mut(name).expect("present").data_mut()[i as usize] = E::zero();
    }
    Ok(count)
}

/// Spec form of one pruning round: remove `⌊ζ_iter·S⌋` of the `S` surviving
/// weights.
pub fn magnitude_prune<E: Scalar>(
    params: &mut ParamSet<E>,
    mask: &mut PruneMask,
    zeta_iter: f64,
) -> Result<usize, PruneError> {
    let survivors = mask.survivors();
    if survivors == 0 {
        return Err(PruneError::NoSurvivors);
    }
    let count = (zeta_iter * survivors as f64 + 1e-9).floor() as usize;
    magnitude_prune_count(params, mask, count)
}

/// Per-layer variant: each prunable tensor gives up `⌊ζ_iter·S_t⌋` of its own
/// survivors.
pub fn magnitude_prune_per_layer<E: Scalar>(
    params: &mut ParamSet<E>,
    mask: &mut PruneMask,
    zeta_iter: f64,
) -> Result<usize, PruneError> {
    mask.validate_against(params)?;
    if mask.survivors() == 0 {
        return Err(PruneError::NoSurvivors);
    }
    let names: Vec<String> = mask.names().cloned().collect();
    let mut pruned = 0;
    for name in names {
        let m = mask.masks.get_mut(&name).expect("present");
        let data = params.get_mut(&name).expect("validated").data_mut();
        let mut alive: Vec<(f64, usize)> = m
            .iter()
            .zip(data.iter())
            .enumerate()
            .filter(|(_, (&keep, _))| keep == 1)
            .map(|(i, (_, &v))| (v.to_f64().expect("finite").abs(), i))
            .collect();
        let count = (zeta_iter * alive.len() as f64 + 1e-9).floor() as usize;
        alive.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, i) in &alive[..count] {
            m[i] = 0;
            data[i] = E::zero();
        }
        pruned += count;
    }
    Ok(pruned)
}

/// Prune the `count` smallest surviving weights of one named tensor.
pub fn magnitude_prune_layer_count<E: Scalar>(
    params: &mut ParamSet<E>,
    mask: &mut PruneMask,
    name: &str,
    count: usize,
) -> Result<usize, PruneError> {
    if count == 0 {
        return Ok(0);
    }
    let m = mask.masks.get_mut(name).ok_or_else(|| PruneError::MissingParam(name.to_string()))?;
    let data = params.get_mut(name).ok_or_else(|| PruneError::MissingParam(name.to_string()))?;
    if data.numel() != m.len() {
        return Err(PruneError::Shape { name: name.to_string(), mask: m.len(), param: data.numel() });
    }
    let mut alive: Vec<(f64, usize)> = m
        .iter()
        .zip(data.data().iter())
        .enumerate()
        .filter(|(_, (&keep, _))| keep == 1)
        .map(|(i, (_, &v))| (v.to_f64().expect("finite").abs(), i))
        .collect();
    if count > alive.len() {
        return Err(PruneError::OverPrune { requested: count, survivors: alive.len() });
    }
    alive.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    for &(_, i) in &alive[..count] {
        m[i] = 0;
        data.data_mut()[i] = E::zero();
    }
    Ok(count)
}

/// Zero every masked coordinate of the parameters.
pub fn apply_mask<E: Scalar>(params: &mut ParamSet<E>, mask: &PruneMask) {
    for (name, m) in mask.iter() {
        if let Some(t) = params.get_mut(name) {
            for (v, &keep) in t.data_mut().iter_mut().zip(m) {
                if keep == 0 {
                    *v = E::zero();
                }
            }
        }
    }
}

/// Zero gradients at masked coordinates so optimizers cannot move them.
pub fn mask_gradients<E: Scalar>(grads: &mut GradSet<E>, mask: &PruneMask) {
    for (name, m) in mask.iter() {
        if let Some(g) = grads.get_mut(name) {
            for (v, &keep) in g.iter_mut().zip(m) {
                if keep == 0 {
                    *v = E::zero();
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single_param(values: &[f64]) -> (ParamSet<f64>, PruneMask) {
        let mut params = ParamSet::new();
        params.insert("w", Tensor::from_vec(values.to_vec()));
        let mask = PruneMask::new(&params, &["w".to_string()]).unwrap();
        (params, mask)
    }

    #[test]
    fn prunes_smallest_magnitude_weight() {
        // brute-force oracle: sort |w| and compare the survivor set
        let values = [0.1, -0.5, 0.3, 0.05, -0.2];
        let (mut params, mut mask) = single_param(&values);
        let pruned = magnitude_prune(&mut params, &mut mask, 0.2).unwrap();
        assert_eq!(pruned, 1);

        let mut order: Vec<usize> = (0..values.len()).collect();
        order.sort_by(|&a, &b| values[a].abs().total_cmp(&values[b].abs()));
        let expect_gone = order[0];
        assert_eq!(expect_gone, 3);
        let m = mask.get("w").unwrap();
        for (i, &keep) in m.iter().enumerate() {
            assert_eq!(keep == 0, i == expect_gone);
        }
        assert_eq!(params.get("w").unwrap().data()[3], 0.0);
    }

    #[test]
    fn floor_zero_leaves_mask_unchanged() {
        let (mut params, mut mask) = single_param(&[1.0, 2.0, 3.0]);
        let pruned = magnitude_prune(&mut params, &mut mask, 0.2).unwrap();
        assert_eq!(pruned, 0);
        assert_eq!(mask.survivors(), 3);
    }

    #[test]
    fn two_rounds_survivor_arithmetic() {
        let values: Vec<f64> = (1..=100).map(|v| v as f64).collect();
        let (mut params, mut mask) = single_param(&values);
        magnitude_prune(&mut params, &mut mask, 0.2).unwrap();
        assert_eq!(mask.survivors(), 80);
        magnitude_prune(&mut params, &mut mask, 0.2).unwrap();
        assert_eq!(mask.survivors(), 64);
    }

    #[test]
    fn sparsity_fresh_and_after_rounds() {
        let values: Vec<f64> = (1..=1000).map(|v| v as f64 * 0.013).collect();
        let (mut params, mut mask) = single_param(&values);
        assert_eq!(mask.sparsity(), 0.0);
        for k in 1..=6 {
            magnitude_prune(&mut params, &mut mask, 0.2).unwrap();
            let ideal = 1.0 - 0.8f64.powi(k);
            // iterated floors stay within a few weights of the closed form
            assert!((mask.sparsity() - ideal).abs() <= 5.0 / 1000.0, "round {k}");
        }
    }

    #[test]
    fn target_survivors_tracks_closed_form_within_one() {
        let sched = PruneSchedule { zeta_iter: 0.2, zeta_end: 0.9999, scope: PruneScope::Global };
        for total in [100usize, 1000, 132_352] {
            for k in 0..=42 {
                let target = sched.target_survivors(total, k);
                let ideal = total as f64 * 0.8f64.powi(k as i32);
                assert!((target as f64 - ideal).abs() < 1.0);
            }
        }
        // k=3 on a clean total reproduces 48.8%
        assert_eq!(sched.target_survivors(1000, 3), 512);
    }

    #[test]
    fn planned_rounds_matches_formula() {
        let s = |zeta_end: f64| PruneSchedule { zeta_iter: 0.2, zeta_end, scope: PruneScope::Global };
        assert_eq!(s(0.9999).planned_rounds(), 42);
        assert_eq!(s(0.5).planned_rounds(), 4);
        assert_eq!(s(0.99).planned_rounds(), 21);
    }

    #[test]
    fn masks_are_monotone_and_threshold_consistent() {
        let values: Vec<f64> = (0..500).map(|v| ((v * 37 % 997) as f64 - 400.0) * 0.01).collect();
        let (mut params, mut mask) = single_param(&values);
        let mut prev = mask.get("w").unwrap().to_vec();
        for _ in 0..5 {
            let before: Vec<u8> = mask.get("w").unwrap().to_vec();
            magnitude_prune(&mut params, &mut mask, 0.2).unwrap();
            let after = mask.get("w").unwrap().to_vec();
            // monotone: alive after implies alive before
            for (a, b) in after.iter().zip(&before) {
                assert!(*a <= *b);
            }
            // threshold: every survivor >= every newly pruned weight
            let newly_pruned_max = values
                .iter()
                .zip(before.iter().zip(&after))
                .filter(|(_, (&b, &a))| b == 1 && a == 0)
                .map(|(v, _)| v.abs())
                .fold(0.0f64, f64::max);
            let survivor_min = values
                .iter()
                .zip(&after)
                .filter(|(_, &a)| a == 1)
                .map(|(v, _)| v.abs())
                .fold(f64::INFINITY, f64::min);
            assert!(survivor_min >= newly_pruned_max);
            prev = after;
        }
        assert!(prev.iter().any(|&b| b == 0));
    }

    #[test]
    fn apply_mask_counting_oracle() {
        let values = [1.0, -2.0, 0.0, 4.0, -5.0, 6.0];
        let mut params = ParamSet::new();
        params.insert("w", Tensor::from_vec(values.to_vec()));
        let mut masks = BTreeMap::new();
        masks.insert("w".to_string(), vec![1u8, 0, 1, 1, 0, 1]);
        let mask = PruneMask::from_parts(masks);
        apply_mask(&mut params, &mask);
        let data = params.get("w").unwrap().data();
        let nonzero = data.iter().filter(|v| **v != 0.0).count();
        // popcount of mask intersected with original nonzeros: indices 0,3,5
        assert_eq!(nonzero, 3);
        assert_eq!(data[1], 0.0);
        assert_eq!(data[4], 0.0);
    }

    #[test]
    fn all_ones_mask_is_identity() {
        let values = [1.5, -0.25, 3.0];
        let (mut params, mask) = single_param(&values);
        apply_mask(&mut params, &mask);
        assert_eq!(params.get("w").unwrap().data(), &values);
    }

    #[test]
    fn masked_gradients_are_zeroed() {
        let (_, mut mask) = single_param(&[1.0, 2.0, 3.0]);
        let mut params = ParamSet::<f64>::new();
        params.insert("w", Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        magnitude_prune_count(&mut params, &mut mask, 1).unwrap();
        let mut grads = GradSet::new();
        grads.insert("w".to_string(), vec![0.7, 0.7, 0.7]);
        mask_gradients(&mut grads, &mask);
        let g = &grads["w"];
        assert_eq!(g.iter().filter(|v| **v == 0.0).count(), 1);
    }

    #[test]
    fn no_survivors_is_terminal() {
        let (mut params, mut mask) = single_param(&[1.0]);
        magnitude_prune_count(&mut params, &mut mask, 1).unwrap();
        assert!(matches!(
            magnitude_prune(&mut params, &mut mask, 0.2),
            Err(PruneError::NoSurvivors)
        ));
    }

    #[test]
    fn per_layer_scope_prunes_each_tensor() {
        let mut params = ParamSet::new();
        params.insert("a", Tensor::from_vec((1..=10).map(|v| v as f64).collect()));
        params.insert("b", Tensor::from_vec((1..=10).map(|v| v as f64 * 100.0).collect()));
        let mut mask = PruneMask::new(&params, &["a".to_string(), "b".to_string()]).unwrap();
        magnitude_prune_per_layer(&mut params, &mut mask, 0.2).unwrap();
        // global ranking would have taken both from "a"; per-layer takes 2 each
        assert_eq!(mask.get("a").unwrap().iter().filter(|&&m| m == 0).count(), 2);
        assert_eq!(mask.get("b").unwrap().iter().filter(|&&m| m == 0).count(), 2);
    }
}
