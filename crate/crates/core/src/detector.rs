//! Sparse-double-descent detection over pruning curves.
//!
//! The online detector is a small boolean state machine: it tracks the last
//! movement direction of the validation performance and flags SDD the moment
//! a direction recurs after a reversal (two reversals total). Movements of
//! `|Δp| ≤ δ` count as flat and leave the state untouched, so the comparison
//! anchor only advances on real moves; `δ = 0` recovers strict comparisons.

use serde::{Deserialize, Serialize};

/// One point of a pruning curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub prune_iter: usize,
    pub sparsity: f64,
    pub train_acc: f64,
    pub train_loss: f64,
    pub val_acc: f64,
    pub val_loss: f64,
}

/// Detector state after some prefix of the curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SddState {
    pub p_prev: Option<f64>,
    pub prev_increasing: bool,
    pub prev_decreasing: bool,
    pub already_increased: bool,
    pub already_decreased: bool,
    pub sdd: bool,
    pub delta: f64,
}

impl SddState {
    pub fn new(delta: f64) -> Self {
        Self {
            p_prev: None,
            prev_increasing: false,
            prev_decreasing: false,
            already_increased: false,
            already_decreased: false,
            sdd: false,
            delta,
        }
    }

    /// Pure transition on the next performance value.
    pub fn step(&self, p: f64) -> Self {
        let mut next = *self;
        let Some(prev) = self.p_prev else {
            next.p_prev = Some(p);
            return next;
        };
        if p < prev - self.delta {
            if self.already_decreased && !self.prev_decreasing {
                next.sdd = true;
            }
            next.prev_decreasing = true;
            next.prev_increasing = false;
            next.already_decreased = true;
            next.p_prev = Some(p);
        } else if p > prev + self.delta {
            if self.already_increased && !self.prev_increasing {
                next.sdd = true;
            }
            next.prev_increasing = true;
            next.prev_decreasing = false;
            next.already_increased = true;
            next.p_prev = Some(p);
        }
        // flat: state unchanged
        next
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub sdd: bool,
    /// Curve index at which the flag first became true.
    pub trigger_index: Option<usize>,
    pub delta: f64,
    pub smoothing_window: usize,
}

/// Fold the state machine over a performance curve.
pub fn detect_sdd_curve(values: &[f64], delta: f64) -> Verdict {
    let mut state = SddState::new(delta);
    let mut trigger = None;
    for (i, &p) in values.iter().enumerate() {
        state = state.step(p);
        if state.sdd && trigger.is_none() {
            trigger = Some(i);
        }
    }
    Verdict { sdd: state.sdd, trigger_index: trigger, delta, smoothing_window: 1 }
}

/// Centered moving average; the window shrinks at the edges. `window <= 1`
/// is the identity.
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    if window <= 1 || values.is_empty() {
        return values.to_vec();
    }
    let r = window / 2;
    (0..values.len())
        .map(|i| {
            let lo = i.saturating_sub(r);
            let hi = (i + r + 1).min(values.len());
            values[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

/// Detection with optional pre-smoothing, recorded in the verdict.
pub fn detect_with_smoothing(values: &[f64], delta: f64, window: usize) -> Verdict {
    let smoothed = smooth(values, window);
    let mut verdict = detect_sdd_curve(&smoothed, delta);
    verdict.smoothing_window = window.max(1);
    verdict
}

/// Contiguous index ranges of the four curve phases, in order. Empty ranges
/// are allowed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSegmentation {
    pub phases: [std::ops::Range<usize>; 4],
}

impl PhaseSegmentation {
    pub fn is_partition(&self, len: usize) -> bool {
        let mut cursor = 0;
        for p in &self.phases {
            if p.start != cursor || p.end < p.start {
                return false;
            }
            cursor = p.end;
        }
        cursor == len
    }
}

/// Split a curve into the four canonical phases:
/// 1. prefix still within δ of the dense reference,
/// 2. decline into the interior minimum,
/// 3. recovery up to the subsequent maximum,
/// 4. final collapse.
///
/// The interior minimum/maximum pair is the one maximizing the recovery
/// `p[M]−p[m]` (so a terminal collapse deeper than the dip cannot swallow
/// phase 3); without a recovery above δ, phases 2 and 3 are empty.
pub fn segment_phases(values: &[f64], delta: f64, dense_ref: f64) -> PhaseSegmentation {
    let n = values.len();
    let drop_start = values
        .iter()
        .position(|&p| p < dense_ref - delta)
        .unwrap_or(n);
    let empty_tail = PhaseSegmentation {
        phases: [0..drop_start, drop_start..drop_start, drop_start..drop_start, drop_start..n],
    };
    if drop_start == n {
        return PhaseSegmentation { phases: [0..n, n..n, n..n, n..n] };
    }
    // best recovery pair over the region after the initial drop
    let mut min_idx = drop_start;
    let mut best: Option<(f64, usize, usize)> = None;
    for i in drop_start..n {
        if values[i] < values[min_idx] {
            min_idx = i;
        }
        let rise = values[i] - values[min_idx];
        if best.map_or(true, |(b, _, _)| rise >= b) && i > min_idx {
            best = Some((rise, min_idx, i));
        }
    }
    match best {
        Some((rise, m, peak)) if rise > delta => PhaseSegmentation {
            phases: [0..drop_start, drop_start..m + 1, m + 1..peak + 1, peak + 1..n],
        },
        _ => empty_tail,
    }
}

/// Maximum excess of the loss over its dense value across interior points
/// (both endpoints excluded), floored at zero.
pub fn bump_magnitude(losses: &[f64]) -> f64 {
    if losses.len() < 3 {
        return 0.0;
    }
    let dense = losses[0];
    losses[1..losses.len() - 1]
        .iter()
        .map(|&l| l - dense)
        .fold(0.0f64, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent oracle: collapse the direction sequence (relative to the
    /// last distinct value) into maximal runs; SDD iff there are at least
    /// three runs, i.e. at least two reversals. Valid at δ = 0.
    pub(crate) fn reversal_oracle(values: &[f64]) -> bool {
        let mut dirs = Vec::new();
        let mut anchor: Option<f64> = None;
        for &p in values {
            match anchor {
                None => anchor = Some(p),
                Some(a) => {
                    if p != a {
                        dirs.push(p > a);
                        anchor = Some(p);
                    }
                }
            }
        }
        let mut runs = 0;
        let mut last: Option<bool> = None;
        for d in dirs {
            if last != Some(d) {
                runs += 1;
                last = Some(d);
            }
        }
        runs >= 3
    }

    #[test]
    fn fresh_state_first_point_never_flags() {
        let s = SddState::new(0.0).step(0.42);
        assert!(!s.sdd);
        assert_eq!(s.p_prev, Some(0.42));
        assert!(!s.already_decreased && !s.already_increased);
    }

    #[test]
    fn hand_trace_second_decline_flags() {
        let verdict = detect_sdd_curve(&[0.90, 0.85, 0.88, 0.84], 0.0);
        assert!(verdict.sdd);
        assert_eq!(verdict.trigger_index, Some(3));
    }

    #[test]
    fn hand_trace_single_reversal_does_not_flag() {
        assert!(!detect_sdd_curve(&[0.90, 0.85, 0.88], 0.0).sdd);
    }

    #[test]
    fn monotone_and_constant_curves_are_negative() {
        assert!(!detect_sdd_curve(&[0.9, 0.8, 0.8, 0.7, 0.5], 0.0).sdd);
        assert!(!detect_sdd_curve(&[0.5; 8], 0.0).sdd);
        assert!(!detect_sdd_curve(&[0.2], 0.0).sdd);
    }

    #[test]
    fn canonical_four_phase_shape_is_positive() {
        // plateau, drop, rise, collapse
        let curve = [0.90, 0.90, 0.89, 0.70, 0.55, 0.60, 0.75, 0.85, 0.60, 0.30];
        let verdict = detect_sdd_curve(&curve, 0.0);
        assert!(verdict.sdd);
        assert!(reversal_oracle(&curve));
    }

    #[test]
    fn exhaustive_oracle_small() {
        // lengths <= 7 over a 3-value alphabet; acceptance covers the full grid
        let alphabet = [0.0, 0.1, 0.2];
        for len in 1..=7usize {
            let mut idx = vec![0usize; len];
            loop {
                let seq: Vec<f64> = idx.iter().map(|&i| alphabet[i]).collect();
                assert_eq!(
                    detect_sdd_curve(&seq, 0.0).sdd,
                    reversal_oracle(&seq),
                    "mismatch on {seq:?}"
                );
                let mut pos = 0;
                loop {
                    if pos == len {
                        break;
                    }
                    idx[pos] += 1;
                    if idx[pos] < alphabet.len() {
                        break;
                    }
                    idx[pos] = 0;
                    pos += 1;
                }
                if pos == len {
                    break;
                }
            }
        }
    }

    #[test]
    fn delta_monotonicity_on_random_curves() {
        let mut state = 0x12345u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..500 {
            let n = 2 + (next() * 12.0) as usize;
            let curve: Vec<f64> = (0..n).map(|_| next()).collect();
            let d1 = next() * 0.3;
            let d2 = d1 + next() * 0.3;
            let at_d1 = detect_sdd_curve(&curve, d1).sdd;
            let at_d2 = detect_sdd_curve(&curve, d2).sdd;
            if !at_d1 {
                assert!(!at_d2, "sdd false at {d1} but true at larger {d2}: {curve:?}");
            }
        }
    }

    #[test]
    fn step_is_pure_and_flag_is_monotone() {
        let s = SddState::new(0.01);
        let s1 = s.step(0.5);
        let s2 = s.step(0.5);
        assert_eq!(s1, s2);

        // appending points never clears a true flag
        let base = [0.9, 0.7, 0.8, 0.6];
        let mut st = SddState::new(0.0);
        for p in base {
            st = st.step(p);
        }
        assert!(st.sdd);
        for p in [0.9, 0.1, 0.9, 0.1] {
            st = st.step(p);
            assert!(st.sdd);
        }
    }

    #[test]
    fn at_most_one_prev_direction() {
        let mut st = SddState::new(0.0);
        for p in [0.5, 0.7, 0.2, 0.2, 0.9, 0.1] {
            st = st.step(p);
            assert!(!(st.prev_increasing && st.prev_decreasing));
        }
    }

    #[test]
    fn smoothing_window_one_is_identity() {
        let v = [0.3, 0.9, 0.1];
        assert_eq!(smooth(&v, 1), v.to_vec());
        let s = smooth(&v, 3);
        assert!((s[1] - (0.3 + 0.9 + 0.1) / 3.0).abs() < 1e-15);
        assert!((s[0] - (0.3 + 0.9) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn segment_flat_then_collapse_has_empty_middle() {
        let curve = [0.9, 0.9, 0.9, 0.5, 0.3, 0.1];
        let seg = segment_phases(&curve, 0.01, 0.9);
        assert!(seg.is_partition(curve.len()));
        assert_eq!(seg.phases[0], 0..3);
        assert!(seg.phases[1].is_empty());
        assert!(seg.phases[2].is_empty());
        assert_eq!(seg.phases[3], 3..6);
    }

    #[test]
    fn segment_canonical_curve_has_four_phases() {
        let curve = [0.90, 0.89, 0.88, 0.70, 0.55, 0.62, 0.75, 0.84, 0.50, 0.25];
        let seg = segment_phases(&curve, 0.02, 0.90);
        assert!(seg.is_partition(curve.len()));
        for (i, p) in seg.phases.iter().enumerate() {
            assert!(!p.is_empty(), "phase {} empty: {seg:?}", i + 1);
        }
        // dip (index 4) ends phase 2; peak (index 7) ends phase 3
        assert_eq!(seg.phases[1].end, 5);
        assert_eq!(seg.phases[2].end, 8);
    }

    #[test]
    fn segment_terminal_collapse_below_dip_keeps_recovery() {
        // final collapse dives below the interior minimum
        let curve = [0.9, 0.6, 0.5, 0.7, 0.8, 0.4, 0.1];
        let seg = segment_phases(&curve, 0.01, 0.9);
        assert!(seg.is_partition(curve.len()));
        assert_eq!(seg.phases[1], 1..3);
        assert_eq!(seg.phases[2], 3..5);
        assert_eq!(seg.phases[3], 5..7);
    }

    #[test]
    fn segment_single_point_is_phase_one() {
        let seg = segment_phases(&[0.77], 0.0, 0.77);
        assert_eq!(seg.phases[0], 0..1);
        assert!(seg.phases[1].is_empty() && seg.phases[2].is_empty() && seg.phases[3].is_empty());
    }

    #[test]
    fn bump_examples() {
        assert_eq!(bump_magnitude(&[1.0, 0.9, 0.8, 0.7]), 0.0);
        assert!((bump_magnitude(&[1.0, 1.4, 0.9]) - 0.4).abs() < 1e-15);
        assert_eq!(bump_magnitude(&[0.7; 6]), 0.0);
        assert_eq!(bump_magnitude(&[1.0, 2.0]), 0.0);
    }
}
