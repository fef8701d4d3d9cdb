//! WebAssembly bindings for the interactive demo page in `www/`.

use adpfed::federation::run_experiment;
use adpfed::privacy::{clip_l2, percentile_abs, sanitize, sparsify_top_q};
use adpfed::rng::derive;
use adpfed::{ExperimentConfig, ParamVector, PrivacyConfig, PrivacyMode};
use wasm_bindgen::prelude::*;

fn js_err(e: adpfed::Error) -> JsError {
    JsError::new(&e.to_string())
}

fn parse_mode(mode: &str) -> Result<PrivacyMode, JsError> {
    mode.parse().map_err(js_err)
}

/// Every stage of one sanitized update.
#[wasm_bindgen]
pub struct SanitizeStages {
    sparse: Vec<f64>,
    clipped: Vec<f64>,
    noised: Vec<f64>,
    bound: f64,
    clip_factor: f64,
    noise_scale: f64,
}

#[wasm_bindgen]
impl SanitizeStages {
    #[wasm_bindgen(getter)]
    pub fn sparse(&self) -> Vec<f64> {
        self.sparse.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn clipped(&self) -> Vec<f64> {
        self.clipped.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn noised(&self) -> Vec<f64> {
        self.noised.clone()
    }

    /// gamma in adaptive mode, C in static mode, 0 when non-private.
    #[wasm_bindgen(getter)]
    pub fn bound(&self) -> f64 {
        self.bound
    }

    #[wasm_bindgen(getter, js_name = clipFactor)]
    pub fn clip_factor(&self) -> f64 {
        self.clip_factor
    }

    #[wasm_bindgen(getter, js_name = noiseScale)]
    pub fn noise_scale(&self) -> f64 {
        self.noise_scale
    }
}

/// Runs one update through sparsification, clipping and noise.
///
/// `threshold` is only read in static mode.
#[wasm_bindgen(js_name = sanitizeUpdate)]
#[allow(clippy::too_many_arguments)]
pub fn sanitize_update(
    update: Vec<f64>,
    mode: &str,
    q: f64,
    p: f64,
    epsilon: f64,
    sigma: f64,
    threshold: f64,
    seed: u32,
) -> Result<SanitizeStages, JsError> {
    let mode = parse_mode(mode)?;
    let cfg = PrivacyConfig {
        mode,
        q,
        p,
        epsilon,
        sigma,
        fixed_threshold: (mode == PrivacyMode::Static).then_some(threshold),
        ..PrivacyConfig::default()
    };
    let delta = ParamVector::new(update);
    let (noised, trace) = sanitize(&delta, &cfg, &mut derive(seed.into(), &[])).map_err(js_err)?;
    let (sparse, clipped) = match mode {
        PrivacyMode::None => (delta.clone(), delta),
        _ if trace.degenerate => (ParamVector::zeros(delta.len()), ParamVector::zeros(delta.len())),
        _ => {
            let sparse = sparsify_top_q(&delta, q).map_err(js_err)?;
            let bound = cfg.fixed_threshold.unwrap_or(trace.gamma);
            let (clipped, _) = clip_l2(&sparse, bound).map_err(js_err)?;
            (sparse, clipped)
        }
    };
    Ok(SanitizeStages {
        sparse: sparse.into_inner(),
        clipped: clipped.into_inner(),
        noised: noised.into_inner(),
        bound: cfg.fixed_threshold.unwrap_or(trace.gamma),
        clip_factor: trace.clip_factor,
        noise_scale: trace.noise_scale_b,
    })
}

/// Adaptive threshold of the top-q sparsified update at each percentile.
#[wasm_bindgen(js_name = thresholdCurve)]
pub fn threshold_curve(update: Vec<f64>, q: f64, percentiles: Vec<f64>) -> Result<Vec<f64>, JsError> {
    let sparse = sparsify_top_q(&ParamVector::new(update), q).map_err(js_err)?;
    percentiles
        .iter()
        .map(|&p| percentile_abs(&sparse, p).map_err(js_err))
        .collect()
}

/// Trains a small federation and returns the mean validation Dice after
/// every round, followed by the test Dice of the best-validation model.
#[wasm_bindgen(js_name = trainFederation)]
pub fn train_federation(mode: &str, rounds: usize, epsilon: f64, p: f64, lr: f64, seed: u32) -> Result<Vec<f64>, JsError> {
    let mut cfg = ExperimentConfig {
        rounds,
        repeats: 1,
        hidden: 8,
        ..ExperimentConfig::default()
    };
    cfg.data.sizes = vec![40, 32, 24];
    cfg.data.test_size = 12;
    cfg.data.image_size = 16;
    cfg.adam.lr = lr;
    cfg.privacy.mode = parse_mode(mode)?;
    cfg.privacy.epsilon = epsilon;
    cfg.privacy.p = p;
    let result = run_experiment(&cfg, seed.into()).map_err(js_err)?;
    let mut curve: Vec<f64> = result.records.iter().map(|r| r.mean_val_dice).collect();
    curve.push(result.headline());
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adaptive_stages_respect_the_bound() {
        let update = vec![0.5, -2.0, 0.1, 3.0, -0.2, 0.0, 1.0, -0.7];
        let s = sanitize_update(update, "adaptive", 0.5, 90.0, 1.0, 1.0, 0.0, 7).unwrap();
        assert_eq!(s.sparse.iter().filter(|&&v| v != 0.0).count(), 4);
        let norm = s.clipped.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm <= s.bound + 1e-12);
        assert!((s.noise_scale - s.bound).abs() < 1e-12);
    }

    #[test]
    fn non_private_stages_are_identity() {
        let update = vec![1.0, -2.0, 3.0];
        let s = sanitize_update(update.clone(), "none", 0.9, 95.0, 1e-3, 1.0, 0.0, 1).unwrap();
        assert_eq!(s.noised, update);
        assert_eq!(s.bound, 0.0);
    }

    #[test]
    fn threshold_curve_is_monotone() {
        let update: Vec<f64> = (1..=20).map(|i| (i as f64 * 0.37).sin()).collect();
        let curve = threshold_curve(update, 0.9, vec![50.0, 70.0, 90.0, 100.0]).unwrap();
        assert!(curve.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn training_curve_has_one_point_per_round_plus_headline() {
        let curve = train_federation("none", 3, 1.0, 95.0, 0.01, 1).unwrap();
        assert_eq!(curve.len(), 4);
        assert!(curve.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
