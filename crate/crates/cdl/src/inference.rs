//! Early-exit classification: evaluate the network stage by stage, consult
//! each exit classifier's confidences against the runtime threshold, and
//! terminate or forward. Layers past the exit point are never evaluated.

use std::fmt;

use crate::cascade::Cascade;
use crate::error::{CdlError, Result};
use crate::network::{argmax, LayerParams};
use crate::tensor::{conv2d_valid, dense, maxpool, sigmoid_inplace, sigmoid_vec, Tensor};

/// Outcome of the per-stage decision rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitDecision {
    /// Exactly one class cleared the threshold; classification ends here.
    Terminate(usize),
    /// No class, or more than one class, cleared the threshold.
    Continue,
}

/// Where an input left the cascade.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ExitPoint {
    /// 1-based pooling-stage index of the exit classifier that terminated.
    Stage(usize),
    /// The fully connected output layer.
    Final,
}

impl fmt::Display for ExitPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExitPoint::Stage(s) => write!(f, "{s}"),
            ExitPoint::Final => write!(f, "FINAL"),
        }
    }
}

/// One classified input: the label, where it exited, the confidence vector
/// at that point, and the exact operation count expended.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationResult {
    pub label: usize,
    pub exit: ExitPoint,
    pub confidences: Vec<f64>,
    pub ops_used: u64,
}

/// The activation-module rule: terminate if and only if exactly one class's
/// confidence strictly exceeds `delta`. Thresholds above 1.0 therefore mean
/// "never terminate". Zero classes above, or more than one class above,
/// both forward the input.
pub fn activation_decision(confidences: &[f64], delta: f64) -> Result<ExitDecision> {
    if confidences.is_empty() {
        return Err(CdlError::InvalidArgument {
            op: "activation_decision",
            reason: "empty confidence vector".into(),
        });
    }
    let mut above: Option<usize> = None;
    for (class, &confidence) in confidences.iter().enumerate() {
        if confidence > delta {
            if above.is_some() {
                return Ok(ExitDecision::Continue);
            }
            above = Some(class);
        }
    }
    Ok(match above {
        Some(class) => ExitDecision::Terminate(class),
        None => ExitDecision::Continue,
    })
}

/// Classifies one input through the cascade at threshold `delta`.
///
/// Convolution/pooling layers are evaluated incrementally; after each
/// pooling layer that carries an admitted classifier, that classifier's
/// confidences are tested. On termination the remaining layers are skipped
/// and `ops_used` reflects only the work done. If no stage terminates, the
/// fully connected layer classifies unconditionally regardless of `delta`.
pub fn classify(cascade: &Cascade, input: &Tensor, delta: f64) -> Result<ClassificationResult> {
    let mut current: Option<Tensor> = None;
    let mut pool_seen = 0usize;
    let mut next_classifier = 0usize;
    for params in &cascade.base.params {
        let prev = current.as_ref().unwrap_or(input);
        match params {
            LayerParams::Conv(bank) => {
                let mut out = conv2d_valid(prev, bank)?;
                sigmoid_inplace(&mut out);
                current = Some(out);
            }
            LayerParams::Pool { window } => {
                let pooled = maxpool(prev, *window)?.output;
                pool_seen += 1;
                if let Some(lc) = cascade.classifiers.get(next_classifier) {
                    if lc.stage_index == pool_seen {
                        let confidences = lc.apply(pooled.data())?;
                        next_classifier += 1;
                        if let ExitDecision::Terminate(label) = activation_decision(&confidences, delta)? {
                            return Ok(ClassificationResult {
                                label,
                                exit: ExitPoint::Stage(pool_seen),
                                ops_used: cascade.costs.ops_at(ExitPoint::Stage(pool_seen)),
                                confidences,
                            });
                        }
                    }
                }
                current = Some(pooled);
            }
            LayerParams::Dense { weights, bias } => {
                let confidences = sigmoid_vec(&dense(prev.data(), weights, bias)?);
                return Ok(ClassificationResult {
                    label: argmax(&confidences),
                    exit: ExitPoint::Final,
                    ops_used: cascade.costs.ops_at(ExitPoint::Final),
                    confidences,
                });
            }
        }
    }
    unreachable!("validated spec ends with a fully connected layer")
}

/// Classifies every input in order and tallies an exit histogram with one
/// bucket per admitted stage plus one for the final layer.
pub fn classify_batch(
    cascade: &Cascade,
    inputs: &[Tensor],
    delta: f64,
) -> Result<(Vec<ClassificationResult>, Vec<usize>)> {
    let mut histogram = vec![0usize; cascade.stage_count() + 1];
    let mut results = Vec::with_capacity(inputs.len());
    for input in inputs {
        let result = classify(cascade, input, delta)?;
        let bucket = match result.exit {
            ExitPoint::Final => cascade.stage_count(),
            ExitPoint::Stage(s) => cascade
                .classifiers
                .iter()
                .position(|c| c.stage_index == s)
                .expect("exit stage is an admitted stage"),
        };
        histogram[bucket] += 1;
        results.push(result);
    }
    Ok((results, histogram))
}

/// Per-input trace line in the documented
/// `idx=<n> exit=<stage|FINAL> label=<c> conf=<max> ops=<v>` schema.
pub fn trace_line(index: usize, result: &ClassificationResult) -> String {
    let max_conf = result.confidences.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    format!(
        "idx={} exit={} label={} conf={} ops={}",
        index, result.exit, result.label, max_conf, result.ops_used
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cascade::{Cascade, LinearClassifier};
    use crate::network::{build_network, predict, LayerSpec, NetworkSpec};

    #[test]
    fn terminates_on_single_confident_class() {
        let conf = vec![0.1, 0.95, 0.2, 0.05];
        assert_eq!(activation_decision(&conf, 0.8).unwrap(), ExitDecision::Terminate(1));
    }

    #[test]
    fn forwards_when_nothing_is_confident() {
        let conf = vec![0.3, 0.1, 0.2];
        assert_eq!(activation_decision(&conf, 0.8).unwrap(), ExitDecision::Continue);
    }

    #[test]
    fn forwards_on_ambiguity() {
        let conf = vec![0.9, 0.85, 0.1];
        assert_eq!(activation_decision(&conf, 0.8).unwrap(), ExitDecision::Continue);
    }

    #[test]
    fn threshold_above_one_never_terminates() {
        let conf = vec![1.0, 0.99, 0.0];
        assert_eq!(activation_decision(&conf, 1.5).unwrap(), ExitDecision::Continue);
    }

    #[test]
    fn tie_at_threshold_forwards() {
        // Strict inequality: a confidence exactly at delta does not count.
        let conf = vec![0.8, 0.2];
        assert_eq!(activation_decision(&conf, 0.8).unwrap(), ExitDecision::Continue);
    }

    #[test]
    fn empty_confidences_error() {
        assert!(activation_decision(&[], 0.5).is_err());
    }

    fn toy_spec() -> NetworkSpec {
        NetworkSpec {
            input_shape: [1, 8, 8],
            layers: vec![
                LayerSpec::Conv { kernel: 3, out_maps: 2 },
                LayerSpec::Pool { window: 2 },
                LayerSpec::Conv { kernel: 2, out_maps: 3 },
                LayerSpec::Pool { window: 2 },
                LayerSpec::FullyConnected { out_units: 3 },
            ],
            class_count: 3,
        }
    }

    fn toy_image(seed: u64) -> Tensor {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![1, 8, 8], (0..64).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn degenerate_cascade_matches_baseline_predict() {
        let net = build_network(&toy_spec(), 21).unwrap();
        let cascade = Cascade::baseline_only(net.clone()).unwrap();
        for seed in 0..5 {
            let img = toy_image(seed);
            let result = classify(&cascade, &img, 0.5).unwrap();
            let (label, conf) = predict(&net, &img).unwrap();
            assert_eq!(result.label, label);
            assert_eq!(result.confidences, conf);
            assert_eq!(result.exit, ExitPoint::Final);
            assert_eq!(result.ops_used, cascade.costs.baseline.total());
        }
    }

    /// A cascade over the toy topology with one hand-set stage-1 classifier
    /// that fires hard for inputs whose mean is high.
    fn hand_cascade() -> Cascade {
        let net = build_network(&toy_spec(), 2).unwrap();
        // Stage 1 features: 2 maps x 3x3 = 18 values.
        let mut w = vec![0.0; 3 * 18];
        for v in &mut w[0..18] {
            *v = 4.0; // class 0 watches the mean of every feature
        }
        let lc = LinearClassifier {
            weights: Tensor::new(vec![3, 18], w).unwrap(),
            bias: vec![-40.0, -80.0, -80.0],
            stage_index: 1,
        };
        Cascade::from_parts(net, vec![lc], Vec::new(), 0.6, 0.0, Default::default()).unwrap()
    }

    #[test]
    fn early_exit_costs_less_than_full_path() {
        let cascade = hand_cascade();
        // An all-ones image saturates the stage-1 classifier (features near
        // 1.0, pre-activation near 4*18-40 = 32), while an all-zeros image
        // leaves it far below threshold (pre-activation near 18*4*0.5-40 = -4).
        let bright = Tensor::new(vec![1, 8, 8], vec![1.0; 64]).unwrap();
        let dark = Tensor::zeros(vec![1, 8, 8]);
        let early = classify(&cascade, &bright, 0.6).unwrap();
        let late = classify(&cascade, &dark, 0.6).unwrap();
        assert_eq!(early.exit, ExitPoint::Stage(1));
        assert_eq!(early.label, 0);
        assert_eq!(late.exit, ExitPoint::Final);
        assert!(early.ops_used < late.ops_used);
        assert_eq!(early.ops_used, cascade.costs.stage_costs[0].cumulative.total());
        assert_eq!(late.ops_used, cascade.costs.full_path.total());
    }

    #[test]
    fn deep_layers_untouched_on_early_exit() {
        let mut cascade = hand_cascade();
        // Poison everything past stage 1; an early exit must never see it.
        if let LayerParams::Conv(bank) = &mut cascade.base.params[2] {
            bank.weights.data_mut().fill(f64::NAN);
        }
        if let LayerParams::Dense { weights, .. } = &mut cascade.base.params[4] {
            weights.data_mut().fill(f64::NAN);
        }
        let bright = Tensor::new(vec![1, 8, 8], vec![1.0; 64]).unwrap();
        let result = classify(&cascade, &bright, 0.6).unwrap();
        assert_eq!(result.exit, ExitPoint::Stage(1));
        assert!(result.confidences.iter().all(|c| c.is_finite()));
    }

    #[test]
    fn threshold_above_one_collapses_to_baseline() {
        let cascade = hand_cascade();
        for seed in 0..10 {
            let img = toy_image(seed);
            let result = classify(&cascade, &img, 1.5).unwrap();
            let (label, _) = predict(&cascade.base, &img).unwrap();
            assert_eq!(result.exit, ExitPoint::Final);
            assert_eq!(result.label, label);
        }
    }

    #[test]
    fn batch_matches_sequential_and_conserves_counts() {
        let cascade = hand_cascade();
        let inputs: Vec<Tensor> = (0..20).map(toy_image).collect();
        let (results, histogram) = classify_batch(&cascade, &inputs, 0.6).unwrap();
        assert_eq!(results.len(), inputs.len());
        assert_eq!(histogram.iter().sum::<usize>(), inputs.len());
        for (input, result) in inputs.iter().zip(&results) {
            assert_eq!(classify(&cascade, input, 0.6).unwrap(), *result);
        }
    }

    #[test]
    fn empty_batch_is_empty() {
        let cascade = hand_cascade();
        let (results, histogram) = classify_batch(&cascade, &[], 0.6).unwrap();
        assert!(results.is_empty());
        assert_eq!(histogram, vec![0, 0]);
    }

    #[test]
    fn trace_line_schema() {
        let result = ClassificationResult {
            label: 4,
            exit: ExitPoint::Stage(1),
            confidences: vec![0.1, 0.25],
            ops_used: 321,
        };
        assert_eq!(trace_line(7, &result), "idx=7 exit=1 label=4 conf=0.25 ops=321");
        let result = ClassificationResult {
            exit: ExitPoint::Final,
            ..result
        };
        assert_eq!(trace_line(8, &result), "idx=8 exit=FINAL label=4 conf=0.25 ops=321");
    }
}
