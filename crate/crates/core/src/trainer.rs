//! Mini-batch SGD on the combined attention objective, and the ablation
//! matrix built on top of it.
//!
//! The last `⌊count · eval_split⌋` samples of a corpus are held out. Each
//! epoch visits the training samples in an order drawn from the seed; the
//! batch gradient is the mean of per-sample gradients, summed in batch
//! order so results do not depend on thread scheduling.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{decode_click, size_stratified_report, DecodeMode, EvalItem, EvalReport};
use crate::head::{AttentionMap, HeadConfig, HeadParameters};
use crate::labels::{label_map, suppression_set, LabelKind, LabelMap, SuppressionSet, DEFAULT_EPSILON};
use crate::losses::{combined_loss, LossBreakdown};
use crate::rng::Rng;
use crate::synth::{GroundingSample, SizeClass};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub sigma_factor: f64,
    pub epsilon: f64,
    pub labels: LabelKind,
    pub suppression: bool,
    pub seed: u64,
    pub eval_split: f64,
    /// Externally supplied language-model loss added to every sample.
    #[serde(default)]
    pub l_ntp: f64,
    pub head: HeadConfig,
    pub decode: DecodeMode,
    pub gamma: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            batch_size: 32,
            epochs: 30,
            lambda1: 1.0,
            lambda2: 1.0,
            sigma_factor: 1.0,
            epsilon: DEFAULT_EPSILON,
            labels: LabelKind::Gaussian,
            suppression: true,
            seed: 0,
            eval_split: 0.2,
            l_ntp: 0.0,
            head: HeadConfig::default(),
            decode: DecodeMode::Argmax,
            gamma: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be non-negative, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if !(self.eval_split > 0.0 && self.eval_split < 1.0) {
            return bad(format!("eval split must lie in (0, 1), got {}", self.eval_split));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return bad("loss weights must be non-negative".into());
        }
        if self.sigma_factor.is_nan() || self.sigma_factor <= 0.0 {
            return bad(format!("sigma factor must be positive, got {}", self.sigma_factor));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma must lie in (0, 1], got {}", self.gamma));
        }
        self.head.validate()
    }

    /// Weight actually applied to the suppression term.
    pub fn effective_lambda1(&self) -> f64 {
        if self.suppression {
            self.lambda1
        } else {
            0.0
        }
    }
}

/// Supervision targets for one sample under a given config.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub label: LabelMap<f64>,
    pub suppression: SuppressionSet,
}

pub fn prepare(config: &TrainConfig, samples: &[GroundingSample]) -> Result<Vec<Prepared>> {
    samples
        .par_iter()
        .map(|s| {
            Ok(Prepared {
                label: label_map(config.labels, &s.grid, &s.target, config.sigma_factor, config.epsilon)?,
                suppression: suppression_set(&s.grid, &s.target)?,
            })
        })
        .collect()
}

/// Held-out range `[train_len, count)`.
pub fn split_point(count: usize, eval_split: f64) -> usize {
    count - (count as f64 * eval_split).floor() as usize
}

pub fn eval_items(samples: &[GroundingSample]) -> Vec<EvalItem> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| EvalItem {
            id: format!("{i:06}"),
            target: s.target,
            size_class: Some(s.size_class),
            category: None,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSnapshot {
    pub accuracy: f64,
    pub per_size: BTreeMap<SizeClass, f64>,
    /// Mean attention mass on each sample's suppression set.
    pub suppression_mass: f64,
}

pub struct Evaluation {
    pub report: EvalReport,
    pub suppression_mass: f64,
    pub maps: Vec<AttentionMap<f64>>,
}

pub fn evaluate(
    params: &HeadParameters<f64>,
    samples: &[GroundingSample],
    decode: DecodeMode,
    gamma: f64,
) -> Result<Evaluation> {
    let maps = samples
        .par_iter()
        .map(|s| crate::head::attention_forward(params, &s.feats, &s.query, &s.grid))
        .collect::<Result<Vec<_>>>()?;
    let preds: Vec<_> = maps.iter().map(|m| decode_click(m, decode, gamma)).collect();
    let gamma_used = (decode == DecodeMode::ThresholdCentroid).then_some(gamma);
    let report = size_stratified_report(&eval_items(samples), &preds, decode, gamma_used)?;
    let mut mass = 0.0;
    for (m, s) in maps.iter().zip(samples) {
        let sup = suppression_set(&s.grid, &s.target)?;
        mass += m.mass_on(&sup.indices);
    }
    let suppression_mass = if samples.is_empty() { 0.0 } else { mass / samples.len() as f64 };
    Ok(Evaluation {
        report,
        suppression_mass,
        maps,
    })
}

impl Evaluation {
    pub fn snapshot(&self) -> EvalSnapshot {
        EvalSnapshot {
            accuracy: self.report.overall,
            per_size: self.report.per_size.iter().map(|(c, g)| (*c, g.accuracy)).collect(),
            suppression_mass: self.suppression_mass,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean over training samples, measured before each batch update.
    pub loss: LossBreakdown<f64>,
    pub eval: EvalSnapshot,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub config: TrainConfig,
    pub train_samples: usize,
    pub eval_samples: usize,
    pub initial: EvalSnapshot,
    pub epochs: Vec<EpochLog>,
    pub wall_time_secs: f64,
    #[serde(default)]
    pub checkpoint: Option<String>,
}

impl TrainLog {
    pub fn final_eval(&self) -> &EvalSnapshot {
        self.epochs.last().map(|e| &e.eval).unwrap_or(&self.initial)
    }

    /// One JSON object per epoch.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for e in &self.epochs {
            s.push_str(&serde_json::to_string(e)?);
            s.push('\n');
        }
        Ok(s)
    }
}

fn sample_step(
    params: &HeadParameters<f64>,
    config: &TrainConfig,
    sample: &GroundingSample,
    prep: &Prepared,
) -> Result<(LossBreakdown<f64>, HeadParameters<f64>)> {
    let pass = params.forward(&sample.feats, &sample.query)?;
    let attn = AttentionMap::new(sample.grid, pass.probs.to_vec())?;
    let (loss, upstream) = combined_loss(
        &prep.label,
        &attn,
        &prep.suppression,
        config.effective_lambda1(),
        config.lambda2,
        config.l_ntp,
    )?;
    let grad = params.backward(&pass, &sample.feats, &sample.query, &upstream)?;
    Ok((loss, grad))
}

fn add_loss(acc: &mut LossBreakdown<f64>, l: &LossBreakdown<f64>) {
    acc.l_ntp += l.l_ntp;
    acc.l_sup += l.l_sup;
    acc.l_attn += l.l_attn;
    acc.total += l.total;
}

/// Trains from a fresh seeded initialisation.
pub fn train(config: &TrainConfig, corpus: &[GroundingSample]) -> Result<(HeadParameters<f64>, TrainLog)> {
    config.validate()?;
    let init = HeadParameters::init(config.head, config.seed)?;
    train_from(config, corpus, init)
}

pub fn train_from(
    config: &TrainConfig,
    corpus: &[GroundingSample],
    mut params: HeadParameters<f64>,
) -> Result<(HeadParameters<f64>, TrainLog)> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("training corpus is empty".into()));
    }
    if params.config != config.head {
        return Err(Error::Dimension("initial parameters do not match the head config".into()));
    }
    let started = Instant::now();
    let cut = split_point(corpus.len(), config.eval_split);
    let train_set = &corpus[..cut];
    // a corpus too small to split is evaluated on its training samples
    let eval_set = if cut < corpus.len() { &corpus[cut..] } else { train_set };
    let prepared = prepare(config, train_set)?;

    let initial = evaluate(&params, eval_set, config.decode, config.gamma)?.snapshot();
    let mut rng = Rng::new(config.seed, 1);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut epochs = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        rng.shuffle(&mut order);
        let mut sum = LossBreakdown {
            lambda1: config.effective_lambda1(),
            lambda2: config.lambda2,
            ..Default::default()
        };
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let results = batch
                .par_iter()
                .map(|&i| sample_step(&params, config, &train_set[i], &prepared[i]))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| match e {
                    Error::NonFinite(what) => Error::NonFinite(format!("{what} at epoch {epoch}, batch {b}")),
                    other => other,
                })?;
            let mut grad = HeadParameters::zeros(config.head);
            let mut batch_loss = LossBreakdown::default();
            for (loss, g) in &results {
                add_loss(&mut batch_loss, loss);
                grad.add_scaled(1.0, g);
            }
            if !batch_loss.is_finite() || !grad.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss at epoch {epoch}, batch {b}: l_sup={} l_attn={} total={}",
                    batch_loss.l_sup, batch_loss.l_attn, batch_loss.total
                )));
            }
            add_loss(&mut sum, &batch_loss);
            params.add_scaled(-config.learning_rate / batch.len() as f64, &grad);
        }
        let n = train_set.len() as f64;
        sum.l_ntp /= n;
        sum.l_sup /= n;
        sum.l_attn /= n;
        sum.total /= n;
        let eval = evaluate(&params, eval_set, config.decode, config.gamma)?.snapshot();
        log::debug!("epoch {epoch}: loss {:.5} acc {:.4}", sum.total, eval.accuracy);
        epochs.push(EpochLog { epoch, loss: sum, eval });
    }

    let log = TrainLog {
        config: config.clone(),
        train_samples: train_set.len(),
        eval_samples: eval_set.len(),
        initial,
        epochs,
        wall_time_secs: started.elapsed().as_secs_f64(),
        checkpoint: None,
    };
    Ok((params, log))
}

/// One row of the ablation matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationVariant {
    pub name: String,
    pub labels: LabelKind,
    pub suppression: bool,
    pub sigma_factor: Option<f64>,
}

pub const SIGMA_SWEEP: [f64; 3] = [0.5, 1.0, 6.0];

pub fn ablation_variants() -> Vec<AblationVariant> {
    let mut v: Vec<AblationVariant> = SIGMA_SWEEP
        .iter()
        .map(|&s| AblationVariant {
            name: format!("gaussian+sup@{s}"),
            labels: LabelKind::Gaussian,
            suppression: true,
            sigma_factor: Some(s),
        })
        .collect();
    v.push(AblationVariant {
        name: "uniform+sup".into(),
        labels: LabelKind::Uniform,
        suppression: true,
        sigma_factor: None,
    });
    v.push(AblationVariant {
        name: "uniform".into(),
        labels: LabelKind::Uniform,
        suppression: false,
        sigma_factor: None,
    });
    v
}

impl AblationVariant {
    pub fn apply(&self, base: &TrainConfig, seed: u64) -> TrainConfig {
        TrainConfig {
            labels: self.labels,
            suppression: self.suppression,
            sigma_factor: self.sigma_factor.unwrap_or(base.sigma_factor),
            seed,
            ..base.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub seed: u64,
    pub accuracy: f64,
    pub per_size: BTreeMap<SizeClass, f64>,
    pub suppression_mass: f64,
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl Spread {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len().max(1) as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Spread {
            mean,
            std: var.sqrt(),
            min: xs.iter().cloned().fold(f64::INFINITY, f64::min),
            max: xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub variant: AblationVariant,
    pub runs: Vec<AblationRun>,
    pub accuracy: Spread,
    pub per_size: BTreeMap<SizeClass, Spread>,
    pub suppression_mass: Spread,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmaSweep {
    /// `(sigma_factor, mean accuracy)` in sweep order.
    pub points: Vec<(f64, f64)>,
    /// Sigma factors ordered by decreasing mean accuracy.
    pub observed_order: Vec<f64>,
    pub reference_direction: String,
    pub matches_reference: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub base: TrainConfig,
    pub seeds: Vec<u64>,
    pub corpus_size: usize,
    pub cells: Vec<AblationCell>,
    pub sigma_sweep: SigmaSweep,
}

impl AblationReport {
    pub fn cell(&self, name: &str) -> Option<&AblationCell> {
        self.cells.iter().find(|c| c.variant.name == name)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<18} {:>16} {:>8} {:>8} {:>8} {:>10}",
            "cell", "accuracy", "small", "medium", "large", "sup-mass"
        );
        for c in &self.cells {
            let size = |k| c.per_size.get(&k).map(|sp| format!("{:.4}", sp.mean)).unwrap_or_else(|| "-".into());
            let _ = writeln!(
                s,
                "{:<18} {:>8.4} ± {:<5.4} {:>8} {:>8} {:>8} {:>10.5}",
                c.variant.name,
                c.accuracy.mean,
                c.accuracy.std,
                size(SizeClass::Small),
                size(SizeClass::Medium),
                size(SizeClass::Large),
                c.suppression_mass.mean
            );
        }
        let order: Vec<String> = self.sigma_sweep.observed_order.iter().map(|s| s.to_string()).collect();
        let _ = writeln!(
            s,
            "sigma sweep order (best first): {}  [reference: {}]",
            order.join(" > "),
            self.sigma_sweep.reference_direction
        );
        s
    }
}

/// Trained parameters of one (cell, seed) run, in report order.
pub struct AblationArtifacts {
    pub report: AblationReport,
    pub params: Vec<Vec<HeadParameters<f64>>>,
    pub logs: Vec<Vec<TrainLog>>,
}

pub fn run_ablation_matrix(
    base: &TrainConfig,
    corpus: &[GroundingSample],
    seeds: usize,
) -> Result<AblationArtifacts> {
    run_ablation(base, corpus, seeds, &ablation_variants())
}

pub fn run_ablation(
    base: &TrainConfig,
    corpus: &[GroundingSample],
    seeds: usize,
    variants: &[AblationVariant],
) -> Result<AblationArtifacts> {
    base.validate()?;
    if seeds == 0 {
        return Err(Error::InvalidArgument("need at least one seed".into()));
    }
    let seed_list: Vec<u64> = (0..seeds as u64).map(|k| base.seed + k).collect();
    let jobs: Vec<(usize, u64)> = (0..variants.len())
        .flat_map(|v| seed_list.iter().map(move |&s| (v, s)))
        .collect();
    let results = jobs
        .par_iter()
        .map(|&(v, s)| train(&variants[v].apply(base, s), corpus))
        .collect::<Result<Vec<_>>>()?;

    let mut cells = Vec::new();
    let mut params = Vec::new();
    let mut logs = Vec::new();
    let mut it = results.into_iter();
    for variant in variants {
        let mut runs = Vec::new();
        let mut cell_params = Vec::new();
        let mut cell_logs = Vec::new();
        for &seed in &seed_list {
            let (p, log) = it.next().expect("one result per job");
            let fin = log.final_eval();
            runs.push(AblationRun {
                seed,
                accuracy: fin.accuracy,
                per_size: fin.per_size.clone(),
                suppression_mass: fin.suppression_mass,
                final_loss: log.epochs.last().map(|e| e.loss.total).unwrap_or(f64::NAN),
            });
            cell_params.push(p);
            cell_logs.push(log);
        }
        let acc: Vec<f64> = runs.iter().map(|r| r.accuracy).collect();
        let mass: Vec<f64> = runs.iter().map(|r| r.suppression_mass).collect();
        let per_size = SizeClass::ALL
            .iter()
            .filter_map(|c| {
                let xs: Vec<f64> = runs.iter().filter_map(|r| r.per_size.get(c).copied()).collect();
                (!xs.is_empty()).then(|| (*c, Spread::of(&xs)))
            })
            .collect();
        cells.push(AblationCell {
            variant: variant.clone(),
            accuracy: Spread::of(&acc),
            per_size,
            suppression_mass: Spread::of(&mass),
            runs,
        });
        params.push(cell_params);
        logs.push(cell_logs);
    }

    let points: Vec<(f64, f64)> = cells
        .iter()
        .filter(|c| c.variant.labels == LabelKind::Gaussian && c.variant.suppression)
        .filter_map(|c| c.variant.sigma_factor.map(|s| (s, c.accuracy.mean)))
        .collect();
    let mut ranked = points.clone();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.total_cmp(&b.0)));
    let observed_order: Vec<f64> = ranked.iter().map(|p| p.0).collect();
    // reference: accuracy improves as the factor decreases
    let mut by_sigma = points.clone();
    by_sigma.sort_by(|a, b| a.0.total_cmp(&b.0));
    let matches_reference = by_sigma.windows(2).all(|w| w[0].1 >= w[1].1);

    Ok(AblationArtifacts {
        report: AblationReport {
            base: base.clone(),
            seeds: seed_list,
            corpus_size: corpus.len(),
            cells,
            sigma_sweep: SigmaSweep {
                points,
                observed_order,
                reference_direction: "accuracy rises as sigma_factor decreases".into(),
                matches_reference,
            },
        },
        params,
        logs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_corpus, SynthConfig};

    fn tiny_corpus(n: usize, noise: f64) -> Vec<GroundingSample> {
        let cfg = SynthConfig {
            image_width: 64,
            image_height: 64,
            patch_size: 16,
            elements: 2,
            small: crate::synth::SideRange { min: 16, max: 20 },
            medium: crate::synth::SideRange { min: 20, max: 26 },
            large: crate::synth::SideRange { min: 26, max: 32 },
            d_v: 4,
            d_q: 4,
            noise,
            seed: 3,
            ..SynthConfig::default()
        };
        generate_corpus(&cfg, n).unwrap().samples
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_size: 4,
            head: HeadConfig { d_v: 4, d_q: 4, d_h: 6, d: 5 },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let corpus = tiny_corpus(10, 0.1);
        let cfg = TrainConfig { learning_rate: 0.0, ..tiny_config() };
        let init = HeadParameters::init(cfg.head, cfg.seed).unwrap();
        let (p, log) = train(&cfg, &corpus).unwrap();
        assert_eq!(p, init);
        assert_eq!(log.epochs.len(), 3);
        assert_eq!(log.epochs.iter().map(|e| e.epoch).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn single_sample_loss_decreases() {
        let corpus = tiny_corpus(1, 0.0);
        let cfg = TrainConfig {
            epochs: 10,
            lambda1: 0.0,
            lambda2: 1.0,
            learning_rate: 0.05,
            ..tiny_config()
        };
        let (_, log) = train(&cfg, &corpus).unwrap();
        let losses: Vec<f64> = log.epochs.iter().map(|e| e.loss.total).collect();
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    }

    #[test]
    fn training_is_deterministic() {
        let corpus = tiny_corpus(12, 0.1);
        let cfg = tiny_config();
        let (p1, l1) = train(&cfg, &corpus).unwrap();
        let (p2, l2) = train(&cfg, &corpus).unwrap();
        assert_eq!(p1.to_flat(), p2.to_flat());
        let losses = |l: &TrainLog| l.epochs.iter().map(|e| e.loss.total.to_bits()).collect::<Vec<_>>();
        assert_eq!(losses(&l1), losses(&l2));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let corpus = tiny_corpus(4, 0.1);
        assert!(train(&TrainConfig { batch_size: 0, ..tiny_config() }, &corpus).is_err());
        assert!(train(&TrainConfig { eval_split: 1.0, ..tiny_config() }, &corpus).is_err());
        assert!(train(&TrainConfig { learning_rate: -1.0, ..tiny_config() }, &corpus).is_err());
        assert!(train(&tiny_config(), &[]).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let corpus = tiny_corpus(8, 0.1);
        let cfg = TrainConfig { learning_rate: 1e300, ..tiny_config() };
        match train(&cfg, &corpus) {
            Err(e) => assert!(e.is_numerical(), "{e}"),
            Ok(_) => panic!("expected numerical failure"),
        }
    }

    #[test]
    fn suppression_lowers_background_mass() {
        let corpus = tiny_corpus(40, 0.1);
        let cfg = TrainConfig { epochs: 5, lambda2: 0.0, ..tiny_config() };
        let (_, log) = train(&cfg, &corpus).unwrap();
        assert!(log.final_eval().suppression_mass < log.initial.suppression_mass);
    }

    #[test]
    fn split_sizes() {
        assert_eq!(split_point(2000, 0.2), 1600);
        assert_eq!(split_point(1, 0.2), 1);
        assert_eq!(split_point(10, 0.25), 8);
    }

    #[test]
    fn smoke_matrix_emits_every_cell() {
        let corpus = tiny_corpus(20, 0.1);
        let cfg = TrainConfig { epochs: 1, ..tiny_config() };
        let art = run_ablation_matrix(&cfg, &corpus, 1).unwrap();
        let names: Vec<_> = art.report.cells.iter().map(|c| c.variant.name.as_str()).collect();
        assert_eq!(names, ["gaussian+sup@0.5", "gaussian+sup@1", "gaussian+sup@6", "uniform+sup", "uniform"]);
        assert_eq!(art.report.sigma_sweep.points.len(), 3);
        assert!(art.report.to_table().contains("uniform+sup"));
    }
}
