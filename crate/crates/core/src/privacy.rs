//! Client-side update sanitization.
//!
//! The private modes share one pipeline: keep the top-q fraction of the
//! update by magnitude, clip the result to an l2 bound, then add Laplace
//! noise whose scale is proportional to that bound. Adaptive mode derives
//! the bound per update from a percentile of the retained magnitudes; static
//! mode uses a fixed threshold.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::ParamVector;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PrivacyMode {
    /// Non-private federated averaging.
    None,
    /// Fixed clipping threshold with noise scale `sigma * C / epsilon`.
    Static,
    /// Percentile-derived threshold with noise scale `sigma * gamma / epsilon`.
    Adaptive,
}

impl PrivacyMode {
    pub const ALL: [PrivacyMode; 3] = [PrivacyMode::None, PrivacyMode::Static, PrivacyMode::Adaptive];

    pub fn as_str(self) -> &'static str {
        match self {
            PrivacyMode::None => "none",
            PrivacyMode::Static => "static",
            PrivacyMode::Adaptive => "adaptive",
        }
    }

    /// Conventional method label used in reports.
    pub fn method_name(self) -> &'static str {
        match self {
            PrivacyMode::None => "NP-FL",
            PrivacyMode::Static => "DP-FL",
            PrivacyMode::Adaptive => "ADP-FL",
        }
    }
}

impl fmt::Display for PrivacyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PrivacyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" | "np-fl" => Ok(PrivacyMode::None),
            "static" | "dp-fl" => Ok(PrivacyMode::Static),
            "adaptive" | "adp-fl" => Ok(PrivacyMode::Adaptive),
            other => Err(Error::config(format!("unknown privacy mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrivacyConfig {
    pub mode: PrivacyMode,
    /// Fraction of components kept by sparsification, in (0, 1].
    pub q: f64,
    /// Clipping percentile, in (0, 100].
    pub p: f64,
    /// Static-mode l2 bound. `None` means "calibrate before training".
    pub fixed_threshold: Option<f64>,
    pub epsilon: f64,
    pub sigma: f64,
    /// Compute the percentile over all d components (zeros included)
    /// instead of only the retained nonzero ones.
    pub percentile_includes_zeros: bool,
    /// Add noise only on the components kept by sparsification.
    pub noise_on_support_only: bool,
}

impl Default for PrivacyConfig {
    fn default() -> Self {
        Self {
            mode: PrivacyMode::Adaptive,
            q: 0.9,
            p: 95.0,
            fixed_threshold: None,
            epsilon: 0.001,
            sigma: 1.0,
            percentile_includes_zeros: false,
            noise_on_support_only: false,
        }
    }
}

impl PrivacyConfig {
    pub fn non_private() -> Self {
        Self {
            mode: PrivacyMode::None,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_fraction(self.q)?;
        check_percentile(self.p)?;
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::config(format!("sigma must be positive, got {}", self.sigma)));
        }
        if let Some(c) = self.fixed_threshold {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::config(format!("fixed threshold must be positive, got {c}")));
            }
        }
        Ok(())
    }

    /// Laplace scale for a given clipping bound.
    pub fn noise_scale(&self, bound: f64) -> f64 {
        self.sigma * bound / self.epsilon
    }
}

/// What happened to one update on its way through [`sanitize`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SanitizationTrace {
    /// l2 norm of the raw update.
    pub pre_clip_norm: f64,
    /// l2 norm after sparsification and clipping, before noise.
    pub post_clip_norm: f64,
    /// Clipping bound in force: gamma (adaptive), C (static), 0 (none).
    pub gamma: f64,
    pub clip_factor: f64,
    pub noise_scale_b: f64,
    pub retained_count: usize,
    /// Set when sparsification left nothing nonzero.
    pub degenerate: bool,
}

fn check_fraction(q: f64) -> Result<()> {
    if q > 0.0 && q <= 1.0 {
        Ok(())
    } else {
        Err(Error::config(format!("sparsification fraction must lie in (0, 1], got {q}")))
    }
}

fn check_percentile(p: f64) -> Result<()> {
    if p > 0.0 && p <= 100.0 {
        Ok(())
    } else {
        Err(Error::config(format!("percentile must lie in (0, 100], got {p}")))
    }
}

/// Number of components kept out of `d` at fraction `q`: `ceil(q * d)`,
/// with a small allowance so products like `0.7 * 10` do not round up.
pub fn retained_count(d: usize, q: f64) -> usize {
    if d == 0 {
        return 0;
    }
    let raw = q * d as f64;
    let k = (raw - raw * 4.0 * f64::EPSILON).ceil() as usize;
    k.clamp(1, d)
}

fn top_q_indices(values: &[f64], q: f64) -> Vec<usize> {
    let k = retained_count(values.len(), q);
    let mut order: Vec<usize> = (0..values.len()).collect();
    // Larger magnitude first; equal magnitudes keep index order.
    order.sort_by(|&a, &b| values[b].abs().total_cmp(&values[a].abs()).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Keeps the `ceil(q * d)` largest-magnitude components (ties go to the
/// lower index) and zeroes the rest.
pub fn sparsify_top_q(delta: &ParamVector, q: f64) -> Result<ParamVector> {
    check_fraction(q)?;
    let values = delta.as_slice();
    let mut out = vec![0.0; values.len()];
    for i in top_q_indices(values, q) {
        out[i] = values[i];
    }
    Ok(ParamVector::new(out))
}

/// p-th percentile of the absolute values of the nonzero components, by
/// linear interpolation at rank `(p / 100) * (m - 1)` over the `m` sorted
/// magnitudes.
pub fn percentile_abs(delta: &ParamVector, p: f64) -> Result<f64> {
    percentile_abs_with(delta, p, false)
}

pub fn percentile_abs_with(delta: &ParamVector, p: f64, include_zeros: bool) -> Result<f64> {
    check_percentile(p)?;
    let mut mags: Vec<f64> = delta
        .iter()
        .map(|v| v.abs())
        .filter(|&m| include_zeros || m != 0.0)
        .collect();
    if mags.iter().all(|&m| m == 0.0) {
        return Err(Error::DegenerateUpdate);
    }
    mags.sort_by(f64::total_cmp);
    let rank = p / 100.0 * (mags.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(mags.len() - 1);
    let frac = rank - lo as f64;
    Ok(mags[lo] + frac * (mags[hi] - mags[lo]))
}

/// Projects `delta` onto the l2 ball of radius `gamma`.
/// Returns the projected vector and the factor `1 / max(1, ||delta|| / gamma)`.
pub fn clip_l2(delta: &ParamVector, gamma: f64) -> Result<(ParamVector, f64)> {
    if !(gamma > 0.0) {
        return Err(Error::config(format!("clipping threshold must be positive, got {gamma}")));
    }
    let ratio = delta.l2_norm() / gamma;
    if ratio <= 1.0 {
        return Ok((delta.clone(), 1.0));
    }
    let factor = 1.0 / ratio;
    Ok((delta.scale(factor), factor))
}

/// One draw from Laplace(0, b) by inverse CDF on u ~ U(-1/2, 1/2).
pub fn sample_laplace<R: Rng + ?Sized>(b: f64, rng: &mut R) -> f64 {
    let u = loop {
        let u: f64 = rng.random::<f64>() - 0.5;
        // u = -0.5 maps to ln(0)
        if u > -0.5 {
            break u;
        }
    };
    let sign = if u > 0.0 {
        1.0
    } else if u < 0.0 {
        -1.0
    } else {
        0.0
    };
    -b * sign * (1.0 - 2.0 * u.abs()).ln()
}

/// Adds i.i.d. Laplace(0, b) noise to every component.
pub fn laplace_noise<R: Rng + ?Sized>(delta: &ParamVector, b: f64, rng: &mut R) -> Result<ParamVector> {
    add_noise(delta, b, None, rng)
}

fn add_noise<R: Rng + ?Sized>(
    delta: &ParamVector,
    b: f64,
    support: Option<&[bool]>,
    rng: &mut R,
) -> Result<ParamVector> {
    if !(b >= 0.0) || !b.is_finite() {
        return Err(Error::config(format!("noise scale must be finite and non-negative, got {b}")));
    }
    if b == 0.0 {
        return Ok(delta.clone());
    }
    let out = delta
        .iter()
        .enumerate()
        .map(|(i, &v)| match support {
            Some(mask) if !mask[i] => v,
            _ => v + sample_laplace(b, rng),
        })
        .collect();
    Ok(ParamVector::new(out))
}

/// Runs the configured sanitization pipeline on one client update.
///
/// Static mode requires `cfg.fixed_threshold` to be resolved. An update
/// that is all zeros after sparsification is returned as zeros with no
/// noise and `degenerate` set in the trace.
pub fn sanitize<R: Rng + ?Sized>(
    delta: &ParamVector,
    cfg: &PrivacyConfig,
    rng: &mut R,
) -> Result<(ParamVector, SanitizationTrace)> {
    cfg.validate()?;
    let d = delta.len();
    let pre_clip_norm = delta.l2_norm();

    if cfg.mode == PrivacyMode::None {
        return Ok((
            delta.clone(),
            SanitizationTrace {
                pre_clip_norm,
                post_clip_norm: pre_clip_norm,
                gamma: 0.0,
                clip_factor: 1.0,
                noise_scale_b: 0.0,
                retained_count: d,
                degenerate: false,
            },
        ));
    }

    let retained = retained_count(d, cfg.q);
    let sparse = sparsify_top_q(delta, cfg.q)?;
    if sparse.iter().all(|&v| v == 0.0) {
        return Ok((
            ParamVector::zeros(d),
            SanitizationTrace {
                pre_clip_norm,
                post_clip_norm: 0.0,
                gamma: 0.0,
                clip_factor: 1.0,
                noise_scale_b: 0.0,
                retained_count: retained,
                degenerate: true,
            },
        ));
    }

    let bound = match cfg.mode {
        PrivacyMode::Adaptive => percentile_abs_with(&sparse, cfg.p, cfg.percentile_includes_zeros)?,
        PrivacyMode::Static => cfg
            .fixed_threshold
            .ok_or_else(|| Error::config("static mode needs a resolved fixed threshold"))?,
        PrivacyMode::None => unreachable!(),
    };
    let (clipped, clip_factor) = clip_l2(&sparse, bound)?;
    let post_clip_norm = clipped.l2_norm();
    let b = cfg.noise_scale(bound);

    let support: Option<Vec<bool>> = cfg
        .noise_on_support_only
        .then(|| sparse.iter().map(|&v| v != 0.0).collect());
    let noisy = add_noise(&clipped, b, support.as_deref(), rng)?;

    Ok((
        noisy,
        SanitizationTrace {
            pre_clip_norm,
            post_clip_norm,
            gamma: bound,
            clip_factor,
            noise_scale_b: b,
            retained_count: retained,
            degenerate: false,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SimRng;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::new(v.to_vec())
    }

    fn rng(seed: u64) -> SimRng {
        SimRng::seed_from_u64(seed)
    }

    /// Exhaustive reference for top-k selection: among all index subsets of
    /// size k, pick the one maximizing total magnitude, preferring the
    /// lexicographically smallest subset when magnitudes tie.
    fn brute_force_top_k(values: &[f64], k: usize) -> Vec<f64> {
        let n = values.len();
        let mut best: Option<(Vec<f64>, Vec<usize>)> = None;
        for mask in 0u32..(1 << n) {
            if mask.count_ones() as usize != k {
                continue;
            }
            let idx: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
            let mut mags: Vec<f64> = idx.iter().map(|&i| values[i].abs()).collect();
            mags.sort_by(|a, b| b.total_cmp(a));
            let better = match &best {
                None => true,
                Some((bm, bi)) => match mags.partial_cmp(bm).unwrap() {
                    std::cmp::Ordering::Greater => true,
                    std::cmp::Ordering::Equal => idx < *bi,
                    std::cmp::Ordering::Less => false,
                },
            };
            if better {
                best = Some((mags, idx));
            }
        }
        let idx = best.unwrap().1;
        (0..n).map(|i| if idx.contains(&i) { values[i] } else { 0.0 }).collect()
    }

    #[test]
    fn sparsify_examples() {
        assert_eq!(
            sparsify_top_q(&pv(&[1.0, -4.0, 0.5, 3.0]), 0.5).unwrap(),
            pv(&[0.0, -4.0, 0.0, 3.0])
        );
        let v = pv(&[0.3, -1.0, 2.0, 0.0, -7.5]);
        assert_eq!(sparsify_top_q(&v, 1.0).unwrap(), v);
        assert_eq!(sparsify_top_q(&pv(&[2.0, 2.0, 2.0]), 1.0 / 3.0).unwrap(), pv(&[2.0, 0.0, 0.0]));
        assert_eq!(brute_force_top_k(&[2.0, 2.0, 2.0], 1), vec![2.0, 0.0, 0.0]);
    }

    #[test]
    fn sparsify_rejects_bad_fraction() {
        for q in [0.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(sparsify_top_q(&pv(&[1.0]), q), Err(Error::Config(_))));
        }
    }

    #[test]
    fn retained_count_rounds_up() {
        assert_eq!(retained_count(10, 0.7), 7);
        assert_eq!(retained_count(97, 0.9), 88);
        assert_eq!(retained_count(3, 1.0 / 3.0), 1);
        assert_eq!(retained_count(5, 0.01), 1);
        assert_eq!(retained_count(113, 1.0), 113);
    }

    #[test]
    fn percentile_examples() {
        let v = pv(&[1.0, -2.0, 3.0, -4.0, 5.0]);
        assert_eq!(percentile_abs(&v, 50.0).unwrap(), 3.0);
        assert!((percentile_abs(&v, 95.0).unwrap() - 4.8).abs() < 1e-12);
        assert_eq!(percentile_abs(&v, 100.0).unwrap(), 5.0);
        for p in [1.0, 33.0, 70.0, 100.0] {
            assert_eq!(percentile_abs(&pv(&[-0.7, 0.7, 0.7]), p).unwrap(), 0.7);
        }
    }

    #[test]
    fn percentile_ignores_structural_zeros_by_default() {
        let v = pv(&[0.0, 0.0, 0.0, 2.0, 4.0]);
        assert_eq!(percentile_abs(&v, 50.0).unwrap(), 3.0);
        assert_eq!(percentile_abs_with(&v, 50.0, true).unwrap(), 0.0);
    }

    #[test]
    fn percentile_of_zero_vector_is_degenerate() {
        assert!(matches!(percentile_abs(&ParamVector::zeros(4), 95.0), Err(Error::DegenerateUpdate)));
    }

    #[test]
    fn clip_examples() {
        assert_eq!(clip_l2(&pv(&[3.0, 4.0]), 10.0).unwrap(), (pv(&[3.0, 4.0]), 1.0));
        let (c, f) = clip_l2(&pv(&[3.0, 4.0]), 1.0).unwrap();
        assert!((c[0] - 0.6).abs() < 1e-15 && (c[1] - 0.8).abs() < 1e-15);
        assert!((f - 0.2).abs() < 1e-15);
        assert_eq!(clip_l2(&ParamVector::zeros(2), 1.0).unwrap(), (ParamVector::zeros(2), 1.0));
        assert!(matches!(clip_l2(&pv(&[1.0]), 0.0), Err(Error::Config(_))));
        assert!(matches!(clip_l2(&pv(&[1.0]), -1.0), Err(Error::Config(_))));
    }

    #[test]
    fn zero_scale_noise_is_identity() {
        let v = pv(&[1.5, -2.0, 0.0]);
        assert_eq!(laplace_noise(&v, 0.0, &mut rng(1)).unwrap(), v);
        assert!(matches!(laplace_noise(&v, -1.0, &mut rng(1)), Err(Error::Config(_))));
    }

    #[test]
    fn laplace_moments() {
        let n = 100_000;
        let mut r = rng(99);
        let draws: Vec<f64> = (0..n).map(|_| sample_laplace(1.0, &mut r)).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let mean_abs = draws.iter().map(|x| x.abs()).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((mean_abs - 1.0).abs() < 0.02, "mean |x| {mean_abs}");
    }

    #[test]
    fn sanitize_none_is_identity() {
        let v = pv(&[0.1, -3.0, 2.0]);
        let cfg = PrivacyConfig::non_private();
        let (out, trace) = sanitize(&v, &cfg, &mut rng(3)).unwrap();
        assert_eq!(out, v);
        assert_eq!(trace.clip_factor, 1.0);
        assert_eq!(trace.noise_scale_b, 0.0);
        assert_eq!(trace.pre_clip_norm, v.l2_norm());
    }

    #[test]
    fn sanitize_adaptive_composes_steps() {
        let cfg = PrivacyConfig {
            mode: PrivacyMode::Adaptive,
            q: 1.0,
            p: 100.0,
            epsilon: 1.0,
            sigma: 1.0,
            ..PrivacyConfig::default()
        };
        let v = pv(&[3.0, 4.0]);
        let (out, trace) = sanitize(&v, &cfg, &mut rng(11)).unwrap();
        assert_eq!(trace.gamma, 4.0);
        assert!((trace.clip_factor - 0.8).abs() < 1e-15);
        assert!((trace.post_clip_norm - 4.0).abs() < 1e-12);
        assert_eq!(trace.noise_scale_b, 4.0);
        assert_eq!(trace.retained_count, 2);

        // same stream, applied by hand to the hand-clipped vector
        let expected = laplace_noise(&pv(&[2.4, 3.2]), 4.0, &mut rng(11)).unwrap();
        for (a, b) in out.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sanitize_static_uses_fixed_threshold() {
        let cfg = PrivacyConfig {
            mode: PrivacyMode::Static,
            q: 1.0,
            fixed_threshold: Some(5.0),
            epsilon: 1.0,
            sigma: 1.0,
            ..PrivacyConfig::default()
        };
        let v = pv(&[3.0, 4.0]);
        let (out, trace) = sanitize(&v, &cfg, &mut rng(5)).unwrap();
        assert_eq!(trace.clip_factor, 1.0);
        assert_eq!(trace.gamma, 5.0);
        assert_eq!(trace.noise_scale_b, 5.0);
        assert_eq!(out, laplace_noise(&v, 5.0, &mut rng(5)).unwrap());

        let unresolved = PrivacyConfig { fixed_threshold: None, ..cfg };
        assert!(matches!(sanitize(&v, &unresolved, &mut rng(5)), Err(Error::Config(_))));
    }

    #[test]
    fn sanitize_degenerate_update() {
        let cfg = PrivacyConfig::default();
        let (out, trace) = sanitize(&ParamVector::zeros(6), &cfg, &mut rng(0)).unwrap();
        assert_eq!(out, ParamVector::zeros(6));
        assert!(trace.degenerate);
        assert_eq!(trace.gamma, 0.0);
        assert_eq!(trace.noise_scale_b, 0.0);
    }

    #[test]
    fn noise_can_be_restricted_to_support() {
        let cfg = PrivacyConfig {
            q: 0.5,
            noise_on_support_only: true,
            ..PrivacyConfig::default()
        };
        let (out, _) = sanitize(&pv(&[0.1, 5.0, -0.2, 3.0]), &cfg, &mut rng(8)).unwrap();
        assert_eq!(out[0], 0.0);
        assert_eq!(out[2], 0.0);
        assert_ne!(out[1], 0.0);
    }

    proptest! {
        #[test]
        fn sparsify_matches_exhaustive_rule(
            v in prop::collection::vec(prop::sample::select(vec![-3.0, -1.0, 0.0, 1.0, 2.0, 3.0]), 1..10),
            q in 0.05f64..=1.0,
        ) {
            let v = pv(&v);
            let k = retained_count(v.len(), q);
            prop_assert_eq!(sparsify_top_q(&v, q).unwrap().into_inner(), brute_force_top_k(v.as_slice(), k));
        }

        #[test]
        fn sparsify_keeps_exactly_k_nonzero(
            v in prop::collection::vec(prop::num::f64::NORMAL, 1..200),
            q in 0.01f64..=1.0,
        ) {
            let v = pv(&v);
            let k = retained_count(v.len(), q);
            let nz = sparsify_top_q(&v, q).unwrap().iter().filter(|&&x| x != 0.0).count();
            prop_assert_eq!(nz, k);
        }

        #[test]
        fn percentile_is_monotone(
            v in prop::collection::vec(-10.0f64..10.0, 1..100),
            p1 in 0.5f64..=100.0,
            p2 in 0.5f64..=100.0,
        ) {
            let v = pv(&v);
            prop_assume!(v.iter().any(|&x| x != 0.0));
            let (lo, hi) = if p1 <= p2 { (p1, p2) } else { (p2, p1) };
            prop_assert!(percentile_abs(&v, lo).unwrap() <= percentile_abs(&v, hi).unwrap());
        }

        #[test]
        fn clip_respects_bound(
            v in prop::collection::vec(-1e3f64..1e3, 1..100),
            gamma in 1e-6f64..1e3,
        ) {
            let (c, f) = clip_l2(&pv(&v), gamma).unwrap();
            prop_assert!(c.l2_norm() <= gamma * (1.0 + 1e-12));
            prop_assert!(f > 0.0 && f <= 1.0);
        }

        #[test]
        fn sanitize_is_deterministic(
            v in prop::collection::vec(-1.0f64..1.0, 1..50),
            seed in any::<u64>(),
        ) {
            let v = pv(&v);
            let cfg = PrivacyConfig::default();
            let a = sanitize(&v, &cfg, &mut rng(seed)).unwrap();
            let b = sanitize(&v, &cfg, &mut rng(seed)).unwrap();
            prop_assert_eq!(a.0.into_inner().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                            b.0.into_inner().iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        }
    }
}
