//! Operation-count cost model, cumulative-cost tables, evaluation reports,
//! and the two tradeoff sweeps (confidence threshold and stage count).
//!
//! Counting conventions: one multiply-accumulate is one operation and each
//! layer's bias addition counts as one MAC per output; a max over an `s x s`
//! window costs `s^2 - 1` compares; each sigmoid evaluation is one
//! nonlinearity. The three kinds carry independent weights so the same
//! counts serve as both an OPS metric and an energy proxy.

use std::io::{self, Write};

use crate::cascade::{build_cascade, BuildOptions, Cascade};
use crate::error::{CdlError, Result};
use crate::inference::{classify_batch, ExitPoint};
use crate::network::{predict, LayerSpec, NetworkSpec, ResolvedLayer, TrainedNetwork};
use crate::tensor::Tensor;

/// Per-kind operation weights. All default to 1.0, making the weighted cost
/// equal to the raw operation count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostModel {
    pub mac: f64,
    pub compare: f64,
    pub nonlinearity: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            mac: 1.0,
            compare: 1.0,
            nonlinearity: 1.0,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        if self.mac > 0.0 && self.compare > 0.0 && self.nonlinearity > 0.0 {
            Ok(())
        } else {
            Err(CdlError::InvalidArgument {
                op: "CostModel::validate",
                reason: format!("weights must be positive, got {self:?}"),
            })
        }
    }

    pub fn is_unit(&self) -> bool {
        self.mac == 1.0 && self.compare == 1.0 && self.nonlinearity == 1.0
    }
}

/// Exact operation counts, split by kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct OpCount {
    pub macs: u64,
    pub compares: u64,
    pub nonlinearities: u64,
}

impl OpCount {
    pub fn total(&self) -> u64 {
        self.macs + self.compares + self.nonlinearities
    }

    pub fn weighted(&self, model: &CostModel) -> f64 {
        self.macs as f64 * model.mac
            + self.compares as f64 * model.compare
            + self.nonlinearities as f64 * model.nonlinearity
    }
}

impl std::ops::Add for OpCount {
    type Output = OpCount;
    fn add(self, rhs: OpCount) -> OpCount {
        OpCount {
            macs: self.macs + rhs.macs,
            compares: self.compares + rhs.compares,
            nonlinearities: self.nonlinearities + rhs.nonlinearities,
        }
    }
}

impl std::ops::AddAssign for OpCount {
    fn add_assign(&mut self, rhs: OpCount) {
        *self = *self + rhs;
    }
}

/// Operation count of one layer at its resolved dimensions.
pub fn layer_op_count(layer: &ResolvedLayer) -> OpCount {
    match layer.spec {
        LayerSpec::Conv { kernel, .. } => {
            let outputs = (layer.out_dims.iter().product::<usize>()) as u64;
            let per_output = (layer.in_dims[0] * kernel * kernel + 1) as u64;
            OpCount {
                macs: outputs * per_output,
                compares: 0,
                nonlinearities: outputs,
            }
        }
        LayerSpec::Pool { window } => {
            let outputs = (layer.out_dims.iter().product::<usize>()) as u64;
            OpCount {
                macs: 0,
                compares: outputs * (window * window - 1) as u64,
                nonlinearities: 0,
            }
        }
        LayerSpec::FullyConnected { .. } => {
            let in_len: usize = layer.in_dims.iter().product();
            let out_len: usize = layer.out_dims.iter().product();
            dense_op_count(in_len, out_len)
        }
    }
}

/// Operation count of a fully connected transform with sigmoid outputs;
/// also the cost of one exit classifier.
pub fn dense_op_count(in_len: usize, out_len: usize) -> OpCount {
    OpCount {
        macs: (out_len * (in_len + 1)) as u64,
        compares: 0,
        nonlinearities: out_len as u64,
    }
}

/// Weighted operation cost of one layer under `model`.
pub fn layer_ops(layer: &ResolvedLayer, model: &CostModel) -> f64 {
    layer_op_count(layer).weighted(model)
}

/// Cumulative cost at one admitted exit stage: every layer up through that
/// stage's pooling layer plus every exit classifier evaluated on the way.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageCost {
    /// 1-based pooling-layer index the classifier is attached to.
    pub stage: usize,
    pub cumulative: OpCount,
}

/// Per-input cost of every possible exit point.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostTable {
    /// One entry per admitted classifier, in stage order.
    pub stage_costs: Vec<StageCost>,
    /// Cost of the bare network: all layers, no exit classifiers.
    pub baseline: OpCount,
    /// Cost of the longest path: all layers plus every admitted classifier.
    pub full_path: OpCount,
}

impl CostTable {
    /// Raw operation count charged to an input leaving at `exit`.
    pub fn ops_at(&self, exit: ExitPoint) -> u64 {
        self.count_at(exit).total()
    }

    /// Exact counts for an exit point.
    pub fn count_at(&self, exit: ExitPoint) -> OpCount {
        match exit {
            ExitPoint::Final => self.full_path,
            ExitPoint::Stage(s) => {
                self.stage_costs
                    .iter()
                    .find(|c| c.stage == s)
                    .expect("exit stage present in cost table")
                    .cumulative
            }
        }
    }
}

/// Builds the cumulative cost table for a topology with exit classifiers
/// attached after the listed pooling stages (ascending, 1-based).
pub fn cost_table(spec: &NetworkSpec, admitted_stages: &[usize]) -> Result<CostTable> {
    let resolved = spec.resolve()?;
    let pools = spec.pool_count();
    if admitted_stages.windows(2).any(|w| w[0] >= w[1]) {
        return Err(CdlError::InvalidArgument {
            op: "cost_table",
            reason: format!("admitted stages must be strictly ascending, got {admitted_stages:?}"),
        });
    }
    if let Some(&out_of_range) = admitted_stages.iter().find(|&&s| s == 0 || s > pools) {
        return Err(CdlError::InvalidArgument {
            op: "cost_table",
            reason: format!("stage {out_of_range} outside 1..={pools}"),
        });
    }

    let mut stage_costs = Vec::with_capacity(admitted_stages.len());
    let mut running = OpCount::default();
    let mut exit_overhead = OpCount::default();
    let mut pool_seen = 0usize;
    let mut next_admitted = admitted_stages.iter().peekable();
    for layer in &resolved {
        running += layer_op_count(layer);
        if let LayerSpec::Pool { .. } = layer.spec {
            pool_seen += 1;
            if next_admitted.peek() == Some(&&pool_seen) {
                next_admitted.next();
                let feat_len: usize = layer.out_dims.iter().product();
                let lc = dense_op_count(feat_len, spec.class_count);
                exit_overhead += lc;
                stage_costs.push(StageCost {
                    stage: pool_seen,
                    cumulative: running + exit_overhead,
                });
            }
        }
    }
    let baseline = running;
    Ok(CostTable {
        stage_costs,
        baseline,
        full_path: baseline + exit_overhead,
    })
}

/// Cost table for a cascade's own topology and admitted stages.
pub fn cascade_cost_table(cascade: &Cascade) -> Result<CostTable> {
    let stages: Vec<usize> = cascade.classifiers.iter().map(|c| c.stage_index).collect();
    cost_table(&cascade.base.spec, &stages)
}

/// Evaluation controls.
#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub delta: f64,
    /// Skip the exit classifiers entirely and charge every input the bare
    /// baseline cost; used for self-comparison plots.
    pub bypass_exits: bool,
    pub model: CostModel,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            delta: 0.5,
            bypass_exits: false,
            model: CostModel::default(),
        }
    }
}

/// Per-class slice of an evaluation.
#[derive(Debug, Clone)]
pub struct ClassReport {
    pub class: usize,
    pub count: usize,
    pub accuracy: f64,
    pub mean_ops: f64,
    /// Weighted baseline cost over this class's mean weighted cost.
    pub energy_benefit: f64,
    /// Fraction exiting at each stage; the last entry is the final layer.
    pub exit_fractions: Vec<f64>,
}

/// Aggregate evaluation of a cascade over a labeled set.
#[derive(Debug, Clone)]
pub struct EvaluationReport {
    pub inputs: usize,
    pub accuracy: f64,
    /// Raw operations per input, averaged.
    pub mean_ops: f64,
    /// `mean_ops` relative to the bare baseline cost; below 1.0 is better.
    pub norm_ops: f64,
    /// Baseline cost over `mean_ops`; above 1.0 is better.
    pub improvement: f64,
    /// Weighted cost per input under the evaluation's cost model.
    pub mean_energy: f64,
    pub energy_improvement: f64,
    /// Exit fractions over all inputs; the last entry is the final layer.
    pub exit_fractions: Vec<f64>,
    pub exit_histogram: Vec<usize>,
    pub per_class: Vec<ClassReport>,
    /// Exact total of raw operation counts, for conservation checks.
    pub total_ops: u64,
}

/// Classifies the labeled set through the cascade and aggregates accuracy,
/// cost, and exit statistics.
pub fn evaluate(cascade: &Cascade, images: &[Tensor], labels: &[usize], opts: &EvalOptions) -> Result<EvaluationReport> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(CdlError::InvalidArgument {
            op: "evaluate",
            reason: format!("{} images vs {} labels (both must be nonempty and equal)", images.len(), labels.len()),
        });
    }
    opts.model.validate()?;
    let classes = cascade.base.spec.class_count;
    let n_stages = cascade.classifiers.len();
    let n_exits = n_stages + 1;

    // (exit index, predicted label) per input; exit index n_stages = final.
    let outcomes: Vec<(usize, usize)> = if opts.bypass_exits {
        images
            .iter()
            .map(|img| predict(&cascade.base, img).map(|(label, _)| (n_stages, label)))
            .collect::<Result<_>>()?
    } else {
        let (results, _) = classify_batch(cascade, images, opts.delta)?;
        results
            .into_iter()
            .map(|r| {
                let exit = match r.exit {
                    ExitPoint::Final => n_stages,
                    ExitPoint::Stage(s) => {
                        cascade
                            .classifiers
                            .iter()
                            .position(|c| c.stage_index == s)
                            .expect("exit stage is an admitted stage")
                    }
                };
                (exit, r.label)
            })
            .collect()
    };

    // Cost of each exit index, as exact counts.
    let exit_counts: Vec<OpCount> = if opts.bypass_exits {
        vec![cascade.costs.baseline; n_exits]
    } else {
        let mut v: Vec<OpCount> = cascade.costs.stage_costs.iter().map(|c| c.cumulative).collect();
        v.push(cascade.costs.full_path);
        v
    };

    let mut exit_histogram = vec![0usize; n_exits];
    let mut hits = 0usize;
    let mut class_counts = vec![0usize; classes];
    let mut class_hits = vec![0usize; classes];
    let mut class_exits = vec![vec![0usize; n_exits]; classes];
    for ((exit, label), &truth) in outcomes.iter().zip(labels) {
        exit_histogram[*exit] += 1;
        class_counts[truth] += 1;
        class_exits[truth][*exit] += 1;
        if label == &truth {
            hits += 1;
            class_hits[truth] += 1;
        }
    }

    let total_ops: u64 = exit_histogram
        .iter()
        .zip(&exit_counts)
        .map(|(&n, c)| n as u64 * c.total())
        .sum();
    let total_energy: f64 = exit_histogram
        .iter()
        .zip(&exit_counts)
        .map(|(&n, c)| n as f64 * c.weighted(&opts.model))
        .sum();
    let n = images.len() as f64;
    let baseline_ops = cascade.costs.baseline.total() as f64;
    let baseline_energy = cascade.costs.baseline.weighted(&opts.model);
    let mean_ops = total_ops as f64 / n;
    let mean_energy = total_energy / n;

    let per_class = (0..classes)
        .map(|class| {
            let count = class_counts[class];
            let ops: u64 = class_exits[class]
                .iter()
                .zip(&exit_counts)
                .map(|(&n, c)| n as u64 * c.total())
                .sum();
            let energy: f64 = class_exits[class]
                .iter()
                .zip(&exit_counts)
                .map(|(&n, c)| n as f64 * c.weighted(&opts.model))
                .sum();
            let mean_class_ops = if count > 0 { ops as f64 / count as f64 } else { 0.0 };
            let mean_class_energy = if count > 0 { energy / count as f64 } else { 0.0 };
            ClassReport {
                class,
                count,
                accuracy: if count > 0 { class_hits[class] as f64 / count as f64 } else { 0.0 },
                mean_ops: mean_class_ops,
                energy_benefit: if mean_class_energy > 0.0 {
                    baseline_energy / mean_class_energy
                } else {
                    0.0
                },
                exit_fractions: class_exits[class]
                    .iter()
                    .map(|&e| if count > 0 { e as f64 / count as f64 } else { 0.0 })
                    .collect(),
            }
        })
        .collect();

    Ok(EvaluationReport {
        inputs: images.len(),
        accuracy: hits as f64 / n,
        mean_ops,
        norm_ops: mean_ops / baseline_ops,
        improvement: baseline_ops / mean_ops,
        mean_energy,
        energy_improvement: baseline_energy / mean_energy,
        exit_fractions: exit_histogram.iter().map(|&e| e as f64 / n).collect(),
        exit_histogram,
        per_class,
        total_ops,
    })
}

/// One row of the confidence-threshold sweep.
#[derive(Debug, Clone, Copy)]
pub struct DeltaPoint {
    pub delta: f64,
    pub accuracy: f64,
    pub norm_ops: f64,
    pub improvement: f64,
}

/// Evaluates the cascade at each threshold in `deltas` (which must be sorted
/// ascending).
pub fn sweep_delta(
    cascade: &Cascade,
    images: &[Tensor],
    labels: &[usize],
    deltas: &[f64],
    model: &CostModel,
) -> Result<Vec<DeltaPoint>> {
    if deltas.windows(2).any(|w| w[0] > w[1]) {
        return Err(CdlError::InvalidArgument {
            op: "sweep_delta",
            reason: format!("deltas must be sorted ascending, got {deltas:?}"),
        });
    }
    deltas
        .iter()
        .map(|&delta| {
            let report = evaluate(
                cascade,
                images,
                labels,
                &EvalOptions {
                    delta,
                    bypass_exits: false,
                    model: *model,
                },
            )?;
            Ok(DeltaPoint {
                delta,
                accuracy: report.accuracy,
                norm_ops: report.norm_ops,
                improvement: report.improvement,
            })
        })
        .collect()
}

/// One row of the stage-count sweep.
#[derive(Debug, Clone, Copy)]
pub struct StagePoint {
    pub stages: usize,
    pub norm_ops: f64,
    /// Fraction of inputs that reach the final fully connected layer.
    pub fc_fraction: f64,
    pub accuracy: f64,
}

/// Explores the cost/accuracy effect of the number of exit stages: builds a
/// cascade with every candidate stage force-admitted (the gain threshold is
/// driven to negative infinity), then evaluates each truncation
/// `k = 0..=max_stages` on the test set at the given runtime threshold.
#[allow(clippy::too_many_arguments)]
pub fn sweep_stages(
    net: &TrainedNetwork,
    train_images: &[Tensor],
    train_labels: &[usize],
    test_images: &[Tensor],
    test_labels: &[usize],
    max_stages: usize,
    delta: f64,
    build: &BuildOptions,
) -> Result<Vec<StagePoint>> {
    let pools = net.spec.pool_count();
    if max_stages > pools {
        return Err(CdlError::InvalidArgument {
            op: "sweep_stages",
            reason: format!("requested {max_stages} stages but the topology has {pools} pooling layers"),
        });
    }
    let forced = BuildOptions {
        epsilon: f64::NEG_INFINITY,
        max_stages: Some(max_stages),
        ..build.clone()
    };
    let full = build_cascade(net, train_images, train_labels, &forced)?.cascade;
    let mut points = Vec::with_capacity(max_stages + 1);
    for k in 0..=max_stages {
        let cascade = full.truncated(k)?;
        let report = evaluate(
            &cascade,
            test_images,
            test_labels,
            &EvalOptions {
                delta,
                bypass_exits: false,
                model: build.cost_model,
            },
        )?;
        points.push(StagePoint {
            stages: k,
            norm_ops: report.norm_ops,
            fc_fraction: *report.exit_fractions.last().expect("at least the final exit"),
            accuracy: report.accuracy,
        });
    }
    Ok(points)
}

/// Renders an exit point for CSV and trace output.
fn exit_name(index: usize, cascade_stages: &[usize]) -> String {
    cascade_stages
        .get(index)
        .map(|s| s.to_string())
        .unwrap_or_else(|| "FINAL".to_string())
}

/// `report.csv`: one row per class.
/// Columns: `class,accuracy,mean_ops,improvement,energy_benefit`.
pub fn write_report_csv<W: Write>(report: &EvaluationReport, mut w: W) -> io::Result<()> {
    writeln!(w, "class,accuracy,mean_ops,improvement,energy_benefit")?;
    let baseline_ops = report.mean_ops * report.norm_ops.recip();
    for c in &report.per_class {
        let improvement = if c.mean_ops > 0.0 { baseline_ops / c.mean_ops } else { 0.0 };
        writeln!(
            w,
            "{},{},{},{},{}",
            c.class, c.accuracy, c.mean_ops, improvement, c.energy_benefit
        )?;
    }
    Ok(())
}

/// `exits.csv`: one row per (class, exit point).
/// Columns: `class,stage,fraction`; `stage` is the pooling-stage index or `FINAL`.
pub fn write_exits_csv<W: Write>(report: &EvaluationReport, stages: &[usize], mut w: W) -> io::Result<()> {
    writeln!(w, "class,stage,fraction")?;
    for c in &report.per_class {
        for (i, &fraction) in c.exit_fractions.iter().enumerate() {
            writeln!(w, "{},{},{}", c.class, exit_name(i, stages), fraction)?;
        }
    }
    Ok(())
}

/// `delta_sweep.csv` columns: `delta,accuracy,norm_ops,improvement`.
pub fn write_delta_sweep_csv<W: Write>(points: &[DeltaPoint], mut w: W) -> io::Result<()> {
    writeln!(w, "delta,accuracy,norm_ops,improvement")?;
    for p in points {
        writeln!(w, "{},{},{},{}", p.delta, p.accuracy, p.norm_ops, p.improvement)?;
    }
    Ok(())
}

/// `stage_sweep.csv` columns: `k,norm_ops,fc_fraction,accuracy`.
pub fn write_stage_sweep_csv<W: Write>(points: &[StagePoint], mut w: W) -> io::Result<()> {
    writeln!(w, "k,norm_ops,fc_fraction,accuracy")?;
    for p in points {
        writeln!(w, "{},{},{},{}", p.stages, p.norm_ops, p.fc_fraction, p.accuracy)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{LayerSpec, NetworkSpec};

    fn resolved(spec: &NetworkSpec) -> Vec<ResolvedLayer> {
        spec.resolve().unwrap()
    }

    #[test]
    fn dense_cost_matches_hand_count() {
        // 192 -> 10: ten rows of 192 multiplies plus one bias add each.
        let c = dense_op_count(192, 10);
        assert_eq!(c.macs, 1930);
        assert_eq!(c.nonlinearities, 10);
        assert_eq!(c.compares, 0);
    }

    #[test]
    fn table2_first_conv_cost() {
        let layers = resolved(&NetworkSpec::table2());
        let c = layer_op_count(&layers[0]);
        assert_eq!(c.macs, 20_280);
        assert_eq!(c.nonlinearities, 2_028);
        assert_eq!(c.compares, 0);
    }

    #[test]
    fn identity_pool_is_free() {
        let layers = resolved(&NetworkSpec::table2());
        // P3 is the window-1 pool.
        let c = layer_op_count(&layers[5]);
        assert_eq!(c, OpCount::default());
    }

    #[test]
    fn pool_compare_count() {
        let layers = resolved(&NetworkSpec::table1());
        // P1: 6 maps of 12x12 outputs, window 2 -> 3 compares each.
        let c = layer_op_count(&layers[1]);
        assert_eq!(c.compares, 6 * 12 * 12 * 3);
        assert_eq!(c.macs, 0);
    }

    #[test]
    fn cost_table_single_dense_layer() {
        let spec = NetworkSpec {
            input_shape: [1, 4, 4],
            layers: vec![
                LayerSpec::Conv { kernel: 1, out_maps: 1 },
                LayerSpec::Pool { window: 1 },
                LayerSpec::FullyConnected { out_units: 2 },
            ],
            class_count: 2,
        };
        let table = cost_table(&spec, &[]).unwrap();
        // conv 1x1: 16 outputs * 2 macs + 16 nonlin; pool free; fc 2*(16+1)+2.
        assert_eq!(table.baseline.macs, 32 + 34);
        assert_eq!(table.baseline, table.full_path);
        assert!(table.stage_costs.is_empty());
    }

    #[test]
    fn table2_gamma_strictly_increases() {
        let table = cost_table(&NetworkSpec::table2(), &[1, 2, 3]).unwrap();
        let mut prev = 0u64;
        for sc in &table.stage_costs {
            let t = sc.cumulative.total();
            assert!(t > prev, "stage {} cost {t} not above {prev}", sc.stage);
            prev = t;
        }
        assert!(table.full_path.total() > prev);
        assert!(table.full_path.total() >= table.baseline.total());
    }

    #[test]
    fn cost_table_rejects_bad_stage_lists() {
        let spec = NetworkSpec::table1();
        assert!(cost_table(&spec, &[2, 1]).is_err());
        assert!(cost_table(&spec, &[0]).is_err());
        assert!(cost_table(&spec, &[3]).is_err());
    }

    #[test]
    fn cost_model_weighting() {
        let c = OpCount {
            macs: 10,
            compares: 4,
            nonlinearities: 2,
        };
        assert_eq!(c.total(), 16);
        assert_eq!(c.weighted(&CostModel::default()), 16.0);
        let m = CostModel {
            mac: 2.0,
            compare: 0.5,
            nonlinearity: 10.0,
        };
        assert_eq!(c.weighted(&m), 20.0 + 2.0 + 20.0);
    }

    #[test]
    fn cost_model_rejects_nonpositive_weights() {
        let m = CostModel {
            mac: 0.0,
            ..CostModel::default()
        };
        assert!(m.validate().is_err());
    }
}
