//! Cascade construction: per-stage linear classifiers trained on pooled
//! features, instance routing at a training-time confidence threshold, and
//! the cost/benefit gain criterion that decides which stages to admit.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CdlError, Result};
use crate::inference::{activation_decision, ExitDecision};
use crate::metrics::{cost_table, dense_op_count, layer_op_count, CostModel, CostTable};
use crate::network::{LayerParams, LayerSpec, TrainedNetwork};
use crate::tensor::{conv2d_valid, dense, maxpool, sigmoid_grad_scalar, sigmoid_inplace, sigmoid_vec, Tensor};

/// A single output layer attached to one pooling stage: one sigmoid unit per
/// class over the stage's flattened feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier {
    /// Shape `[class_count, feature_len]`.
    pub weights: Tensor,
    pub bias: Vec<f64>,
    /// 1-based index of the pooling layer that feeds this classifier.
    pub stage_index: usize,
}

impl LinearClassifier {
    pub fn class_count(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn feature_len(&self) -> usize {
        self.weights.shape()[1]
    }

    /// Sigmoid confidences over all classes for one feature vector.
    pub fn apply(&self, features: &[f64]) -> Result<Vec<f64>> {
        Ok(sigmoid_vec(&dense(features, &self.weights, &self.bias)?))
    }
}

/// Measurements taken at one examined stage during construction. Fractions
/// are relative to the full training set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageStats {
    /// 1-based pooling-layer index.
    pub stage: usize,
    /// Fraction of training instances that reached this stage.
    pub reach_fraction: f64,
    /// Fraction of training instances terminated at this stage.
    pub exit_fraction: f64,
    /// Weighted cumulative cost of exiting here, classifier included.
    pub cumulative_cost: f64,
    /// Net benefit of admitting the stage.
    pub gain: f64,
    pub admitted: bool,
}

/// A trained base network plus its admitted exit classifiers and the
/// bookkeeping recorded while building them.
#[derive(Debug, Clone)]
pub struct Cascade {
    pub base: TrainedNetwork,
    /// Admitted classifiers in ascending stage order.
    pub classifiers: Vec<LinearClassifier>,
    /// One entry per examined stage, admitted or not.
    pub stats: Vec<StageStats>,
    /// Routing threshold used during construction.
    pub train_delta: f64,
    /// Admission threshold the gain was compared against.
    pub epsilon: f64,
    /// Cost model the gains were computed under.
    pub cost_model: CostModel,
    /// Exact per-exit-point cost table.
    pub costs: CostTable,
}

impl Cascade {
    /// Assembles a cascade, validating classifier ordering and shapes and
    /// recomputing the cost table.
    pub fn from_parts(
        base: TrainedNetwork,
        classifiers: Vec<LinearClassifier>,
        stats: Vec<StageStats>,
        train_delta: f64,
        epsilon: f64,
        cost_model: CostModel,
    ) -> Result<Self> {
        let resolved = base.spec.resolve()?;
        if classifiers.windows(2).any(|w| w[0].stage_index >= w[1].stage_index) {
            return Err(CdlError::InvalidArgument {
                op: "Cascade::from_parts",
                reason: "classifiers must be in strictly ascending stage order".into(),
            });
        }
        for lc in &classifiers {
            let expected = stage_feature_len(&resolved, lc.stage_index).ok_or_else(|| CdlError::InvalidArgument {
                op: "Cascade::from_parts",
                reason: format!("stage {} has no pooling layer", lc.stage_index),
            })?;
            if lc.feature_len() != expected || lc.class_count() != base.spec.class_count {
                return Err(CdlError::ShapeMismatch {
                    context: format!("exit classifier at stage {}", lc.stage_index),
                    expected: format!("[{} x {expected}]", base.spec.class_count),
                    actual: format!("[{} x {}]", lc.class_count(), lc.feature_len()),
                });
            }
        }
        let stages: Vec<usize> = classifiers.iter().map(|c| c.stage_index).collect();
        let costs = cost_table(&base.spec, &stages)?;
        Ok(Cascade {
            base,
            classifiers,
            stats,
            train_delta,
            epsilon,
            cost_model,
            costs,
        })
    }

    /// A cascade with no exit stages; classification degenerates to the
    /// baseline network.
    pub fn baseline_only(base: TrainedNetwork) -> Result<Self> {
        Cascade::from_parts(base, Vec::new(), Vec::new(), 0.6, f64::INFINITY, CostModel::default())
    }

    /// The same base network with only the first `k` classifiers kept.
    pub fn truncated(&self, k: usize) -> Result<Self> {
        if k > self.classifiers.len() {
            return Err(CdlError::InvalidArgument {
                op: "Cascade::truncated",
                reason: format!("asked for {k} stages but only {} were built", self.classifiers.len()),
            });
        }
        Cascade::from_parts(
            self.base.clone(),
            self.classifiers[..k].to_vec(),
            self.stats.iter().take(k).cloned().collect(),
            self.train_delta,
            self.epsilon,
            self.cost_model,
        )
    }

    pub fn stage_count(&self) -> usize {
        self.classifiers.len()
    }
}

fn stage_feature_len(resolved: &[crate::network::ResolvedLayer], stage: usize) -> Option<usize> {
    resolved
        .iter()
        .filter(|l| matches!(l.spec, LayerSpec::Pool { .. }))
        .nth(stage.checked_sub(1)?)
        .map(|l| l.out_dims.iter().product())
}

/// Runs the network's convolution/pooling prefix up through the `stage`-th
/// pooling layer and returns that pooled tensor.
fn forward_to_stage(net: &TrainedNetwork, input: &Tensor, stage: usize) -> Result<Tensor> {
    let mut current = input.clone();
    let mut pools_seen = 0usize;
    for params in &net.params {
        match params {
            LayerParams::Conv(bank) => {
                current = conv2d_valid(&current, bank)?;
                sigmoid_inplace(&mut current);
            }
            LayerParams::Pool { window } => {
                current = maxpool(&current, *window)?.output;
                pools_seen += 1;
                if pools_seen == stage {
                    return Ok(current);
                }
            }
            LayerParams::Dense { .. } => break,
        }
    }
    Err(CdlError::InvalidArgument {
        op: "forward_to_stage",
        reason: format!("stage {stage} exceeds the {pools_seen} pooling layers"),
    })
}

/// Flattened pooled features of the given stage for every input, map-major
/// then row-major: one row per input.
pub fn extract_stage_features(net: &TrainedNetwork, images: &[Tensor], stage: usize) -> Result<Vec<Vec<f64>>> {
    let pools = net.spec.pool_count();
    if stage == 0 || stage > pools {
        return Err(CdlError::InvalidArgument {
            op: "extract_stage_features",
            reason: format!("stage {stage} outside 1..={pools}"),
        });
    }
    images
        .iter()
        .map(|img| Ok(forward_to_stage(net, img, stage)?.into_data()))
        .collect()
}

/// Hyperparameters for training one exit classifier.
#[derive(Debug, Clone)]
pub struct LcTrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for LcTrainOptions {
    fn default() -> Self {
        LcTrainOptions {
            epochs: 20,
            batch_size: 50,
            learning_rate: 1.0,
            seed: 0,
        }
    }
}

/// Trains a single sigmoid output layer on the feature rows with mini-batch
/// SGD on one-hot mean squared error (the delta rule).
pub fn train_linear_classifier(
    features: &[Vec<f64>],
    labels: &[usize],
    class_count: usize,
    stage_index: usize,
    opts: &LcTrainOptions,
) -> Result<LinearClassifier> {
    if features.is_empty() || features.len() != labels.len() {
        return Err(CdlError::InvalidArgument {
            op: "train_linear_classifier",
            reason: format!(
                "{} feature rows vs {} labels (both must be nonempty and equal)",
                features.len(),
                labels.len()
            ),
        });
    }
    let feat_len = features[0].len();
    if feat_len == 0 || features.iter().any(|f| f.len() != feat_len) {
        return Err(CdlError::InvalidArgument {
            op: "train_linear_classifier",
            reason: "feature rows must be nonempty and of equal length".into(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
        return Err(CdlError::InvalidArgument {
            op: "train_linear_classifier",
            reason: format!("label {bad} outside [0, {class_count})"),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let a = 1.0 / (feat_len as f64).sqrt();
    let mut weights: Vec<f64> = (0..class_count * feat_len).map(|_| rng.random_range(-a..a)).collect();
    let mut bias: Vec<f64> = (0..class_count).map(|_| rng.random_range(-a..a)).collect();

    let mut order: Vec<usize> = (0..features.len()).collect();
    let mut lr = opts.learning_rate;
    let mut prev_loss = f64::INFINITY;
    let mut g_w = vec![0.0; class_count * feat_len];
    let mut g_b = vec![0.0; class_count];
    let inv_c = 1.0 / class_count as f64;

    for epoch in 0..opts.epochs {
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        for (batch_idx, batch) in order.chunks(opts.batch_size.max(1)).enumerate() {
            g_w.fill(0.0);
            g_b.fill(0.0);
            for &row in batch {
                let f = &features[row];
                for j in 0..class_count {
                    let w_row = &weights[j * feat_len..(j + 1) * feat_len];
                    let z = bias[j] + w_row.iter().zip(f).map(|(&w, &x)| w * x).sum::<f64>();
                    let y = crate::tensor::sigmoid_scalar(z);
                    let t = if labels[row] == j { 1.0 } else { 0.0 };
                    epoch_loss += (y - t) * (y - t) * inv_c;
                    let delta = 2.0 * (y - t) * inv_c * sigmoid_grad_scalar(y);
                    let gw_row = &mut g_w[j * feat_len..(j + 1) * feat_len];
                    for (g, &x) in gw_row.iter_mut().zip(f) {
                        *g += delta * x;
                    }
                    g_b[j] += delta;
                }
            }
            if !epoch_loss.is_finite() {
                return Err(CdlError::NonFiniteLoss { epoch, batch: batch_idx });
            }
            let scale = lr / batch.len() as f64;
            for (w, g) in weights.iter_mut().zip(&g_w) {
                *w -= scale * g;
            }
            for (b, g) in bias.iter_mut().zip(&g_b) {
                *b -= scale * g;
            }
        }
        epoch_loss /= features.len() as f64;
        if epoch_loss >= prev_loss {
            lr *= 0.5;
        }
        prev_loss = epoch_loss;
    }

    Ok(LinearClassifier {
        weights: Tensor::new(vec![class_count, feat_len], weights)?,
        bias,
        stage_index,
    })
}

/// Net benefit of terminating `exit_fraction` of the inputs at a stage whose
/// cumulative cost is `stage_cost`, given that `reach_fraction` of the
/// inputs arrive there and the full network costs `full_cost`:
/// the savings on terminated inputs minus the stage cost wasted on the
/// inputs that continue.
pub fn stage_gain(full_cost: f64, stage_cost: f64, exit_fraction: f64, reach_fraction: f64) -> Result<f64> {
    if !(stage_cost > 0.0 && full_cost >= stage_cost) {
        return Err(CdlError::InvalidArgument {
            op: "stage_gain",
            reason: format!("need full_cost >= stage_cost > 0, got full={full_cost}, stage={stage_cost}"),
        });
    }
    if !(0.0..=1.0).contains(&exit_fraction) || exit_fraction > reach_fraction {
        return Err(CdlError::InvalidArgument {
            op: "stage_gain",
            reason: format!("need 0 <= exit <= reach, got exit={exit_fraction}, reach={reach_fraction}"),
        });
    }
    Ok(raw_gain(full_cost, stage_cost, exit_fraction, reach_fraction))
}

#[inline]
fn raw_gain(full_cost: f64, stage_cost: f64, exit_fraction: f64, reach_fraction: f64) -> f64 {
    (full_cost - stage_cost) * exit_fraction - stage_cost * (reach_fraction - exit_fraction)
}

/// Whether terminating inputs at a stage improves overall efficiency: the
/// savings on inputs that stop before the next stage must exceed the cost
/// this stage inflicts on the inputs that continue.
pub fn stage_pays_off(stage_cost: f64, next_cost: f64, reach_fraction: f64, next_reach: f64) -> Result<bool> {
    if !(stage_cost > 0.0 && next_cost > stage_cost) {
        return Err(CdlError::InvalidArgument {
            op: "stage_pays_off",
            reason: format!("need next_cost > stage_cost > 0, got stage={stage_cost}, next={next_cost}"),
        });
    }
    if !(0.0 <= next_reach && next_reach <= reach_fraction) {
        return Err(CdlError::InvalidArgument {
            op: "stage_pays_off",
            reason: format!("need 0 <= next_reach <= reach, got reach={reach_fraction}, next={next_reach}"),
        });
    }
    Ok((next_cost - stage_cost) * (reach_fraction - next_reach) > stage_cost * next_reach)
}

/// Applies a classifier to each feature row at the given threshold and
/// splits the rows into terminated and forwarded (local indices).
pub fn route_stage(
    lc: &LinearClassifier,
    features: &[Vec<f64>],
    delta: f64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut terminated = Vec::new();
    let mut forwarded = Vec::new();
    for (i, f) in features.iter().enumerate() {
        let conf = lc.apply(f)?;
        match activation_decision(&conf, delta)? {
            ExitDecision::Terminate(_) => terminated.push(i),
            ExitDecision::Continue => forwarded.push(i),
        }
    }
    Ok((terminated, forwarded))
}

/// Controls for [`build_cascade`].
#[derive(Debug, Clone)]
pub struct BuildOptions {
    /// Admission threshold for the stage gain. May be infinite in either
    /// direction: positive infinity admits nothing, negative infinity admits
    /// every examined stage.
    pub epsilon: f64,
    /// Routing threshold applied while measuring reach/exit fractions.
    pub train_delta: f64,
    /// Examine at most this many stages (defaults to every pooling layer).
    pub max_stages: Option<usize>,
    pub cost_model: CostModel,
    pub lc: LcTrainOptions,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions {
            epsilon: 0.0,
            train_delta: 0.6,
            max_stages: None,
            cost_model: CostModel::default(),
            lc: LcTrainOptions::default(),
        }
    }
}

/// A built cascade together with the admission log.
pub struct BuildReport {
    pub cascade: Cascade,
    /// One line per examined stage in the documented
    /// `stage=<i> gamma_i=<v> I_i=<v> Cl_i=<v> G_i=<v> admitted=<bool>`
    /// schema, plus any diagnostics.
    pub log: Vec<String>,
}

/// Formats one admission-log line.
pub fn admission_log_line(stats: &StageStats) -> String {
    format!(
        "stage={} gamma_i={} I_i={} Cl_i={} G_i={} admitted={}",
        stats.stage, stats.cumulative_cost, stats.reach_fraction, stats.exit_fraction, stats.gain, stats.admitted
    )
}

/// Builds a cascade over a trained base network.
///
/// Stages are examined in ascending order. Each stage's classifier is
/// trained only on the instances forwarded from the previous stage, routing
/// at `train_delta`; its gain is measured against the admission threshold
/// and examination stops at the first stage that does not clear it (or when
/// no instances remain to train on).
pub fn build_cascade(
    net: &TrainedNetwork,
    images: &[Tensor],
    labels: &[usize],
    opts: &BuildOptions,
) -> Result<BuildReport> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(CdlError::InvalidArgument {
            op: "build_cascade",
            reason: format!("{} images vs {} labels (both must be nonempty and equal)", images.len(), labels.len()),
        });
    }
    if !(opts.train_delta > 0.0 && opts.train_delta < 1.0) {
        return Err(CdlError::InvalidArgument {
            op: "build_cascade",
            reason: format!("train_delta must lie in (0, 1), got {}", opts.train_delta),
        });
    }
    opts.cost_model.validate()?;
    let resolved = net.spec.resolve()?;
    let classes = net.spec.class_count;
    let pools = net.spec.pool_count();
    let max_stages = opts.max_stages.unwrap_or(pools).min(pools);
    let total = images.len() as f64;

    // Cumulative conv/pool cost through each pooling layer, and each
    // candidate classifier's own cost.
    let mut prefix_cost = Vec::with_capacity(pools);
    let mut lc_cost = Vec::with_capacity(pools);
    let mut running = 0.0;
    for layer in &resolved {
        running += layer_op_count(layer).weighted(&opts.cost_model);
        if let LayerSpec::Pool { .. } = layer.spec {
            let feat_len: usize = layer.out_dims.iter().product();
            prefix_cost.push(running);
            lc_cost.push(dense_op_count(feat_len, classes).weighted(&opts.cost_model));
        }
    }
    let full_cost: f64 = resolved.iter().map(|l| layer_op_count(l).weighted(&opts.cost_model)).sum();

    let mut classifiers: Vec<LinearClassifier> = Vec::new();
    let mut stats: Vec<StageStats> = Vec::new();
    let mut log: Vec<String> = Vec::new();
    let mut reaching: Vec<usize> = (0..images.len()).collect();
    let mut admitted_overhead = 0.0;

    for stage in 1..=max_stages {
        if reaching.is_empty() {
            log.push(format!(
                "stage={stage} admitted=false reason=no-forwarded-instances"
            ));
            break;
        }
        let subset: Vec<Tensor> = reaching.iter().map(|&i| images[i].clone()).collect();
        let subset_labels: Vec<usize> = reaching.iter().map(|&i| labels[i]).collect();
        let features = extract_stage_features(net, &subset, stage)?;
        let lc = train_linear_classifier(
            &features,
            &subset_labels,
            classes,
            stage,
            &LcTrainOptions {
                seed: opts.lc.seed.wrapping_add(stage as u64),
                ..opts.lc.clone()
            },
        )?;

        let (terminated, forwarded) = route_stage(&lc, &features, opts.train_delta)?;
        let reach_fraction = reaching.len() as f64 / total;
        let exit_fraction = terminated.len() as f64 / total;
        let stage_cost = prefix_cost[stage - 1] + admitted_overhead + lc_cost[stage - 1];
        let gain = if stage_cost > 0.0 && stage_cost <= full_cost {
            stage_gain(full_cost, stage_cost, exit_fraction, reach_fraction)?
        } else {
            // The stage already costs at least the whole network; the gain
            // formula is still well-defined and necessarily unattractive.
            raw_gain(full_cost, stage_cost, exit_fraction, reach_fraction)
        };
        let admitted = gain > opts.epsilon;
        let entry = StageStats {
            stage,
            reach_fraction,
            exit_fraction,
            cumulative_cost: stage_cost,
            gain,
            admitted,
        };
        log.push(admission_log_line(&entry));
        stats.push(entry);

        if !admitted {
            break;
        }
        admitted_overhead += lc_cost[stage - 1];
        classifiers.push(lc);
        reaching = forwarded.into_iter().map(|local| reaching[local]).collect();
    }

    let cascade = Cascade::from_parts(
        net.clone(),
        classifiers,
        stats,
        opts.train_delta,
        opts.epsilon,
        opts.cost_model,
    )?;
    Ok(BuildReport { cascade, log })
}
