//! Dataset splitting, the learning-rate range test, the training loop,
//! and evaluation metrics.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::ink::{Corpus, Label, PenState, SignatureInstance};
use crate::models::{Mode, Model, ModelConfig, ModelError, ModelKind};
use crate::nn::tape::Tape;
use crate::nn::tensor::{Scalar, Tensor};
use crate::nn::NnError;
use crate::preprocess::{normalize, resample_uniform, PreprocessError, ResampledSequence};
use crate::psf::{rasterize, scale_to_square, FeatureTensor, PsfError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("test set is empty")]
    EmptyTestSet,
    #[error("invalid learning-rate range: {0}")]
    InvalidRange(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Psf(#[from] PsfError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// One prepared training or evaluation example.
#[derive(Debug, Clone)]
pub struct Sample<F: Scalar> {
    pub input: Tensor<F>,
    pub genuine: bool,
}

/// Source of prepared samples. Implementations may hold everything in
/// memory or load lazily from disk.
pub trait Dataset<F: Scalar> {
    fn len(&self) -> usize;
    fn get(&self, index: usize) -> Result<Sample<F>, PipelineError>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Samples held in memory.
pub struct InMemoryDataset<F: Scalar> {
    samples: Vec<Sample<F>>,
}

impl<F: Scalar> InMemoryDataset<F> {
    pub fn new(samples: Vec<Sample<F>>) -> Self {
        InMemoryDataset { samples }
    }
}

impl<F: Scalar> Dataset<F> for InMemoryDataset<F> {
    fn len(&self) -> usize {
        self.samples.len()
    }

    fn get(&self, index: usize) -> Result<Sample<F>, PipelineError> {
        Ok(self.samples[index].clone())
    }
}

/// Extracts features on every access instead of ahead of time. Keeps the
/// footprint flat on corpora whose tensors would not fit in memory.
pub struct LazyCorpusDataset<'a, F: Scalar> {
    corpus: &'a Corpus,
    indices: Vec<usize>,
    config: ModelConfig,
    _marker: std::marker::PhantomData<F>,
}

impl<'a, F: Scalar> LazyCorpusDataset<'a, F> {
    pub fn new(corpus: &'a Corpus, indices: Vec<usize>, config: ModelConfig) -> Self {
        LazyCorpusDataset { corpus, indices, config, _marker: std::marker::PhantomData }
    }
}

impl<F: Scalar> Dataset<F> for LazyCorpusDataset<'_, F> {
    fn len(&self) -> usize {
        self.indices.len()
    }

    fn get(&self, index: usize) -> Result<Sample<F>, PipelineError> {
        let inst = &self.corpus.instances[self.indices[index]];
        Ok(Sample {
            input: prepare_input(&self.config, inst)?,
            genuine: inst.label == Label::Genuine,
        })
    }
}

/// Convert a feature raster to a model input tensor, shape (C, H, W).
pub fn feature_to_tensor<F: Scalar>(t: &FeatureTensor) -> Tensor<F> {
    let data = t.data().iter().map(|&v| F::from_f64(v)).collect();
    Tensor::from_vec(&[t.channels, t.height, t.width], data).expect("feature tensor shape")
}

/// Convert a resampled sequence to a model input tensor of (x, y,
/// elapsed, pen) rows.
pub fn sequence_to_tensor<F: Scalar>(seq: &ResampledSequence) -> Tensor<F> {
    let mut data = Vec::with_capacity(seq.points.len() * 4);
    for p in &seq.points {
        data.push(F::from_f64(p.x));
        data.push(F::from_f64(p.y));
        data.push(F::from_f64(p.elapsed_ms));
        data.push(F::from_f64(if p.pen == PenState::Down { 1.0 } else { 0.0 }));
    }
    Tensor::from_vec(&[seq.points.len(), 4], data).expect("sequence shape")
}

/// Extract the input a model kind consumes from one signature instance.
pub fn prepare_input<F: Scalar>(
    config: &ModelConfig,
    instance: &SignatureInstance,
) -> Result<Tensor<F>, PipelineError> {
    let sig = normalize(instance)?;
    match config.kind {
        ModelKind::RnnPoints => {
            let n = config.resample_n.unwrap_or(crate::preprocess::DEFAULT_RESAMPLE_POINTS);
            Ok(sequence_to_tensor(&resample_uniform(&sig, n)?))
        }
        ModelKind::CnnFixed => {
            let raster = rasterize(&sig, config.feature_variant)?;
            Ok(feature_to_tensor(&scale_to_square(&raster)))
        }
        ModelKind::CnnLstm => Ok(feature_to_tensor(&rasterize(&sig, config.feature_variant)?)),
    }
}

/// Prepare the given corpus instances for a model, in index order.
pub fn prepare_dataset<F: Scalar>(
    corpus: &Corpus,
    indices: &[usize],
    config: &ModelConfig,
) -> Result<InMemoryDataset<F>, PipelineError> {
    let mut samples = Vec::with_capacity(indices.len());
    for &i in indices {
        let inst = &corpus.instances[i];
        samples.push(Sample {
            input: prepare_input(config, inst)?,
            genuine: inst.label == Label::Genuine,
        });
    }
    Ok(InMemoryDataset::new(samples))
}

/// Random split of labeled items, stratified by class: each class is
/// shuffled separately and cut at round(fraction * class size).
/// Deterministic under the seed; the returned index lists are disjoint,
/// exhaustive, and sorted.
pub fn stratified_split(
    genuine: &[bool],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>), PipelineError> {
    if genuine.is_empty() {
        return Err(PipelineError::EmptyCorpus);
    }
    if !(0.0..1.0).contains(&fraction) || fraction == 0.0 {
        return Err(PipelineError::InvalidConfig(format!("split fraction {fraction}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class_label in [true, false] {
        let mut class: Vec<usize> = genuine
            .iter()
            .enumerate()
            .filter(|(_, &g)| g == class_label)
            .map(|(i, _)| i)
            .collect();
        class.shuffle(&mut rng);
        let cut = (fraction * class.len() as f64).round() as usize;
        train.extend_from_slice(&class[..cut]);
        test.extend_from_slice(&class[cut..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Instance-level stratified split of a corpus; see [`stratified_split`].
pub fn split_dataset(
    corpus: &Corpus,
    fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>), PipelineError> {
    let genuine: Vec<bool> =
        corpus.instances.iter().map(|i| i.label == Label::Genuine).collect();
    stratified_split(&genuine, fraction, seed)
}

/// Writer-disjoint split: whole writers are assigned to one side. Not the
/// default; exposed for experiments on generalization across writers.
pub fn split_writer_disjoint(
    corpus: &Corpus,
    fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>), PipelineError> {
    if corpus.is_empty() {
        return Err(PipelineError::EmptyCorpus);
    }
    let mut writers: Vec<u32> = corpus.instances.iter().map(|i| i.writer_id).collect();
    writers.sort_unstable();
    writers.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    writers.shuffle(&mut rng);
    let cut = (fraction * writers.len() as f64).round() as usize;
    let train_writers: std::collections::HashSet<u32> = writers[..cut].iter().copied().collect();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, inst) in corpus.instances.iter().enumerate() {
        if train_writers.contains(&inst.writer_id) {
            train.push(i);
        } else {
            test.push(i);
        }
    }
    Ok((train, test))
}

/// Confusion counts and the derived rates, genuine as the positive class.
/// Undefined ratios (zero denominators) report 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Metrics {
    pub fn from_counts(tp: usize, fp: usize, tn: usize, fn_: usize) -> Metrics {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let accuracy = ratio(tp + tn, tp + tn + fp + fn_);
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Metrics { tp, fp, tn, fn_, accuracy, precision, recall, f1 }
    }

    /// Metrics report as a JSON object.
    pub fn to_json(&self, threshold: f64, seed: u64) -> String {
        format!(
            "{{\"tp\":{},\"fp\":{},\"tn\":{},\"fn\":{},\"accuracy\":{},\"precision\":{},\"recall\":{},\"f1\":{},\"threshold\":{},\"seed\":{}}}",
            self.tp, self.fp, self.tn, self.fn_,
            self.accuracy, self.precision, self.recall, self.f1,
            threshold, seed
        )
    }
}

/// Strict decision rule: genuine only above the threshold, so an exact
/// tie rejects.
pub fn classify(probability: f64, threshold: f64) -> bool {
    probability > threshold
}

/// Score a model over a dataset.
pub fn evaluate<F: Scalar, D: Dataset<F> + ?Sized>(
    model: &Model<F>,
    data: &D,
    threshold: f64,
) -> Result<Metrics, PipelineError> {
    if data.is_empty() {
        return Err(PipelineError::EmptyTestSet);
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for i in 0..data.len() {
        let sample = data.get(i)?;
        let mut tape = Tape::new();
        let prob = model.forward(&mut tape, &sample.input, Mode::Eval)?;
        let p = tape.value(prob).item().to_f64();
        match (classify(p, threshold), sample.genuine) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    Ok(Metrics::from_counts(tp, fp, tn, fn_))
}

/// Training hyperparameters.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_initial: f64,
    pub lr_decay_per_epoch: f64,
    pub seed: u64,
    pub split_fraction_train: f64,
    /// Stop once per-epoch training accuracy reaches this value; used by
    /// capacity probes, off in normal runs.
    pub stop_at_train_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 10,
            epochs: 50,
            lr_initial: 1e-3,
            lr_decay_per_epoch: 0.95,
            seed: 0,
            split_fraction_train: 0.8,
            stop_at_train_accuracy: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.batch_size == 0 {
            return Err(PipelineError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.lr_initial <= 0.0 {
            return Err(PipelineError::InvalidConfig("lr_initial must be positive".into()));
        }
        if !(0.0 < self.split_fraction_train && self.split_fraction_train < 1.0) {
            return Err(PipelineError::InvalidConfig(
                "split_fraction_train must lie in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Per-epoch training statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_train_loss: f64,
    pub lr: f64,
    pub test_accuracy: Option<f64>,
}

/// Render the per-epoch log as `epoch,mean_train_loss,lr[,test_accuracy]`.
pub fn loss_log_csv(stats: &[EpochStats]) -> String {
    let with_test = stats.iter().any(|s| s.test_accuracy.is_some());
    let mut out = String::from(if with_test {
        "epoch,mean_train_loss,lr,test_accuracy\n"
    } else {
        "epoch,mean_train_loss,lr\n"
    });
    for s in stats {
        out.push_str(&format!("{},{:.6e},{:.6e}", s.epoch, s.mean_train_loss, s.lr));
        if with_test {
            out.push_str(&format!(",{:.4}", s.test_accuracy.unwrap_or(f64::NAN)));
        }
        out.push('\n');
    }
    out
}

/// Train with shuffled mini-batches, per-batch Adam steps, and an
/// exponentially decayed learning rate (`lr_initial * decay^epoch`).
///
/// Gradients are accumulated per sample and averaged over the batch, so
/// the batch loss is the mean of sample losses. Deterministic under the
/// config seed.
pub fn train<F: Scalar, D: Dataset<F> + ?Sized>(
    model: &mut Model<F>,
    train_set: &D,
    test_set: Option<&D>,
    cfg: &TrainConfig,
) -> Result<Vec<EpochStats>, PipelineError> {
    cfg.validate()?;
    let n = train_set.len();
    if n == 0 {
        return Err(PipelineError::EmptyCorpus);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut indices: Vec<usize> = (0..n).collect();

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_initial * cfg.lr_decay_per_epoch.powi(epoch as i32);
        indices.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (batch_no, batch) in indices.chunks(cfg.batch_size).enumerate() {
            for &idx in batch {
                let sample = train_set.get(idx)?;
                let mut tape = Tape::new();
                let prob = model.forward(&mut tape, &sample.input, Mode::Train(&mut rng))?;
                let loss = tape.bce_loss(prob, if sample.genuine { 1.0 } else { 0.0 })?;
                let value = tape.value(loss).item().to_f64();
                if !value.is_finite() {
                    return Err(PipelineError::NonFiniteLoss { epoch, batch: batch_no });
                }
                loss_sum += value;
                tape.backward(loss, &mut model.params)?;
            }
            model.params.scale_grads(F::from_f64(1.0 / batch.len() as f64));
            model.params.adam_step_all(lr)?;
        }
        let mut stats = EpochStats {
            epoch,
            mean_train_loss: loss_sum / n as f64,
            lr,
            test_accuracy: None,
        };
        if let Some(test) = test_set {
            stats.test_accuracy = Some(evaluate(model, test, 0.5)?.accuracy);
        }
        log.push(stats);
        if let Some(target) = cfg.stop_at_train_accuracy {
            let train_acc = evaluate(model, train_set, 0.5)?.accuracy;
            if train_acc >= target {
                break;
            }
        }
    }
    Ok(log)
}

/// How the scan picks the learning rate from the smoothed-loss minimum.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrPick {
    /// Rate at the smoothed-loss minimum divided by 10 (safety margin).
    MinOverTen,
    /// Rate exactly at the smoothed-loss minimum.
    Min,
}

#[derive(Debug, Clone)]
pub struct LrScanConfig {
    pub lr_min: f64,
    pub lr_max: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub pick: LrPick,
}

impl Default for LrScanConfig {
    fn default() -> Self {
        LrScanConfig {
            lr_min: 1e-7,
            lr_max: 1.0,
            steps: 100,
            batch_size: 10,
            seed: 0,
            pick: LrPick::MinOverTen,
        }
    }
}

/// Outcome of a learning-rate range scan.
#[derive(Debug, Clone)]
pub struct LrScanResult {
    /// (learning rate, bias-corrected smoothed loss) per executed step.
    pub points: Vec<(f64, f64)>,
    pub lr_chosen: f64,
    /// The scan never moved: the smoothed loss was flat to within 1e-9
    /// relative, so the chosen rate is not informative.
    pub flat_scan: bool,
}

/// Sweep the learning rate geometrically from `lr_min` towards `lr_max`,
/// one mini-batch per step, recording exponentially smoothed loss
/// (factor 0.9, bias-corrected). Stops early when the smoothed loss
/// exceeds 4x its running minimum. Model parameters and optimizer state
/// are restored bitwise afterwards.
///
/// The chosen rate is the first smoothed-loss minimum, divided by 10
/// under [`LrPick::MinOverTen`], then clamped into the scanned range.
pub fn lr_range_test<F: Scalar, D: Dataset<F> + ?Sized>(
    model: &mut Model<F>,
    data: &D,
    cfg: &LrScanConfig,
) -> Result<LrScanResult, PipelineError> {
    if !(cfg.lr_min > 0.0 && cfg.lr_min < cfg.lr_max) {
        return Err(PipelineError::InvalidRange(format!(
            "need 0 < lr_min < lr_max, got {} .. {}",
            cfg.lr_min, cfg.lr_max
        )));
    }
    if cfg.steps < 10 {
        return Err(PipelineError::InvalidRange(format!("need at least 10 steps, got {}", cfg.steps)));
    }
    if data.is_empty() {
        return Err(PipelineError::EmptyCorpus);
    }

    let snapshot = model.params.snapshot();
    let ratio = (cfg.lr_max / cfg.lr_min).powf(1.0 / cfg.steps as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);

    let mut points = Vec::with_capacity(cfg.steps);
    let mut smoothed = 0.0;
    let mut best = f64::INFINITY;
    let mut cursor = 0usize;

    let result = (|| -> Result<(), PipelineError> {
        for step in 0..cfg.steps {
            let lr = cfg.lr_min * ratio.powi(step as i32);
            let mut batch_loss = 0.0;
            let batch_len = cfg.batch_size.min(data.len());
            for _ in 0..batch_len {
                if cursor == order.len() {
                    cursor = 0;
                    order.shuffle(&mut rng);
                }
                let sample = data.get(order[cursor])?;
                cursor += 1;
                let mut tape = Tape::new();
                let prob = model.forward(&mut tape, &sample.input, Mode::Train(&mut rng))?;
                let loss = tape.bce_loss(prob, if sample.genuine { 1.0 } else { 0.0 })?;
                let value = tape.value(loss).item().to_f64();
                if !value.is_finite() {
                    return Err(PipelineError::NonFiniteLoss { epoch: 0, batch: step });
                }
                batch_loss += value;
                tape.backward(loss, &mut model.params)?;
            }
            batch_loss /= batch_len as f64;
            model.params.scale_grads(F::from_f64(1.0 / batch_len as f64));
            model.params.adam_step_all(lr)?;

            smoothed = 0.9 * smoothed + 0.1 * batch_loss;
            let corrected = smoothed / (1.0 - 0.9f64.powi(step as i32 + 1));
            points.push((lr, corrected));
            best = best.min(corrected);
            if corrected > 4.0 * best {
                break;
            }
        }
        Ok(())
    })();
    model.params.restore(&snapshot);
    result?;

    let (mut best_idx, mut best_loss) = (0usize, f64::INFINITY);
    for (i, &(_, loss)) in points.iter().enumerate() {
        if loss < best_loss {
            best_loss = loss;
            best_idx = i;
        }
    }
    let max_loss = points.iter().map(|&(_, l)| l).fold(f64::NEG_INFINITY, f64::max);
    let flat_scan = (max_loss - best_loss).abs() <= 1e-9 * max_loss.abs().max(1e-12);

    let raw = match cfg.pick {
        LrPick::Min => points[best_idx].0,
        LrPick::MinOverTen => points[best_idx].0 / 10.0,
    };
    let lr_chosen = raw.clamp(cfg.lr_min, cfg.lr_max);

    Ok(LrScanResult { points, lr_chosen, flat_scan })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ink::{StrokePoint, Task};
    use crate::models::ModelKind;
    use crate::psf::Variant;

    fn tiny_instance(writer: u32, sample: u32, salt: i32) -> SignatureInstance {
        let pts = vec![
            StrokePoint { x: 0, y: 0, t: 0, pen: PenState::Down, aux: None },
            StrokePoint { x: 40 + salt, y: 30, t: 50, pen: PenState::Down, aux: None },
            StrokePoint { x: 80, y: 60 + salt, t: 100, pen: PenState::Up, aux: None },
        ];
        crate::ink::instance_from_points(&pts, writer, sample).unwrap()
    }

    fn corpus_of(n_per_label: usize) -> Corpus {
        let mut instances = Vec::new();
        for i in 0..n_per_label {
            let writer = (i / 20) as u32 + 1;
            let g_sample = (i % 20) as u32 + 1;
            instances.push(tiny_instance(writer, g_sample, i as i32));
            instances.push(tiny_instance(writer, g_sample + 20, i as i32 + 7));
        }
        Corpus { instances, source_task: Task::Task1 }
    }

    #[test]
    fn split_sizes_match_stratified_rounding() {
        let corpus = corpus_of(800); // 1600 instances, balanced
        let (train, test) = split_dataset(&corpus, 0.8, 7).unwrap();
        assert_eq!(train.len(), 1280);
        assert_eq!(test.len(), 320);

        let small = corpus_of(5); // 10 instances, 5 + 5
        let (tr, te) = split_dataset(&small, 0.8, 3).unwrap();
        assert_eq!(tr.len(), 8);
        assert_eq!(te.len(), 2);
        let genuine_in_train =
            tr.iter().filter(|&&i| small.instances[i].label == Label::Genuine).count();
        assert_eq!(genuine_in_train, 4);
    }

    #[test]
    fn split_is_deterministic_and_partitions() {
        let corpus = corpus_of(25);
        let (a_train, a_test) = split_dataset(&corpus, 0.8, 42).unwrap();
        let (b_train, b_test) = split_dataset(&corpus, 0.8, 42).unwrap();
        assert_eq!(a_train, b_train);
        assert_eq!(a_test, b_test);

        let mut all: Vec<usize> = a_train.iter().chain(a_test.iter()).copied().collect();
        all.sort_unstable();
        let want: Vec<usize> = (0..corpus.len()).collect();
        assert_eq!(all, want);
    }

    #[test]
    fn split_rejects_empty_corpus() {
        let corpus = Corpus { instances: vec![], source_task: Task::Task1 };
        assert!(matches!(split_dataset(&corpus, 0.8, 0), Err(PipelineError::EmptyCorpus)));
    }

    #[test]
    fn writer_disjoint_split_separates_writers() {
        let corpus = corpus_of(100);
        let (train, test) = split_writer_disjoint(&corpus, 0.8, 1).unwrap();
        let train_writers: std::collections::HashSet<u32> =
            train.iter().map(|&i| corpus.instances[i].writer_id).collect();
        let test_writers: std::collections::HashSet<u32> =
            test.iter().map(|&i| corpus.instances[i].writer_id).collect();
        assert!(train_writers.is_disjoint(&test_writers));
        assert_eq!(train.len() + test.len(), corpus.len());
    }

    #[test]
    fn metrics_worked_example() {
        let m = Metrics::from_counts(3, 1, 4, 2);
        assert!((m.accuracy - 0.7).abs() < 1e-12);
        assert!((m.precision - 0.75).abs() < 1e-12);
        assert!((m.recall - 0.6).abs() < 1e-12);
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-4);
    }

    #[test]
    fn metrics_all_correct_and_degenerate() {
        let perfect = Metrics::from_counts(5, 0, 5, 0);
        assert_eq!(
            (perfect.accuracy, perfect.precision, perfect.recall, perfect.f1),
            (1.0, 1.0, 1.0, 1.0)
        );
        let none = Metrics::from_counts(0, 0, 0, 0);
        assert_eq!((none.accuracy, none.precision, none.recall, none.f1), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn metrics_json_is_self_consistent() {
        let m = Metrics::from_counts(3, 1, 4, 2);
        let json = m.to_json(0.5, 7);
        assert!(json.contains("\"tp\":3"));
        assert!(json.contains("\"fn\":2"));
        assert!(json.contains("\"threshold\":0.5"));
    }

    #[test]
    fn classify_rejects_exact_tie() {
        assert!(!classify(0.5, 0.5));
        assert!(classify(0.5000001, 0.5));
    }

    fn rnn_dataset(n: usize, steps: usize) -> InMemoryDataset<f32> {
        let mut samples = Vec::new();
        for i in 0..n {
            let genuine = i % 2 == 0;
            let data: Vec<f32> = (0..steps * 4)
                .map(|j| ((i * steps * 4 + j) % 17) as f32 / 17.0 + if genuine { 0.5 } else { 0.0 })
                .collect();
            samples.push(Sample {
                input: Tensor::from_vec(&[steps, 4], data).unwrap(),
                genuine,
            });
        }
        InMemoryDataset::new(samples)
    }

    fn rnn_config(n: usize) -> ModelConfig {
        ModelConfig {
            kind: ModelKind::RnnPoints,
            feature_variant: Variant::Original,
            input_channels: 7,
            resample_n: Some(n),
            dropout_fc1: false,
        }
    }

    #[test]
    fn train_zero_epochs_is_identity() {
        let mut model: Model<f32> = Model::build(rnn_config(6), 2).unwrap();
        let before = model.params.snapshot();
        let data = rnn_dataset(4, 6);
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
        let log = train(&mut model, &data, None, &cfg).unwrap();
        assert!(log.is_empty());
        assert!(model.params.values_equal(&before));
    }

    #[test]
    fn train_applies_exponential_decay() {
        let mut model: Model<f32> = Model::build(rnn_config(4), 2).unwrap();
        let data = rnn_dataset(6, 4);
        let cfg = TrainConfig { epochs: 11, lr_initial: 1.0, batch_size: 3, ..TrainConfig::default() };
        let log = train(&mut model, &data, None, &cfg).unwrap();
        assert_eq!(log.len(), 11);
        assert!((log[10].lr - 0.95f64.powi(10)).abs() < 1e-12);
        assert!((log[10].lr - 0.5987).abs() < 1e-3);
    }

    #[test]
    fn train_is_reproducible_under_seed() {
        let data = rnn_dataset(8, 5);
        let cfg = TrainConfig { epochs: 3, batch_size: 4, seed: 77, ..TrainConfig::default() };
        let run = |_: ()| {
            let mut model: Model<f32> = Model::build(rnn_config(5), 11).unwrap();
            let log = train(&mut model, &data, None, &cfg).unwrap();
            (log, model.params.snapshot())
        };
        let ((log_a, params_a), (log_b, params_b)) = (run(()), run(()));
        assert_eq!(log_a, log_b);
        // Bit-identical parameters, not merely matching losses.
        for (a, b) in params_a.iter().zip(&params_b) {
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value));
        }
    }

    #[test]
    fn loss_log_csv_shapes() {
        let stats = vec![
            EpochStats { epoch: 0, mean_train_loss: 0.7, lr: 1e-3, test_accuracy: None },
            EpochStats { epoch: 1, mean_train_loss: 0.5, lr: 9.5e-4, test_accuracy: None },
        ];
        let csv = loss_log_csv(&stats);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "epoch,mean_train_loss,lr");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("0,"));
    }

    #[test]
    fn lr_scan_schedule_is_geometric_and_restores() {
        let mut model: Model<f32> = Model::build(rnn_config(4), 3).unwrap();
        let before = model.params.snapshot();
        let data = rnn_dataset(6, 4);
        let cfg = LrScanConfig {
            lr_min: 1e-7,
            lr_max: 1.0,
            steps: 100,
            batch_size: 3,
            seed: 5,
            pick: LrPick::MinOverTen,
        };
        let scan = lr_range_test(&mut model, &data, &cfg).unwrap();
        assert!(scan.points.len() <= 100);
        let ratio = (1.0f64 / 1e-7).powf(0.01);
        assert!((ratio - 1.1749).abs() < 1e-3);
        for pair in scan.points.windows(2) {
            let r = pair[1].0 / pair[0].0;
            assert!((r - ratio).abs() / ratio < 1e-12);
        }
        assert!(model.params.values_equal(&before));
        assert!(scan.lr_chosen >= cfg.lr_min && scan.lr_chosen <= cfg.lr_max);
    }

    #[test]
    fn lr_scan_rejects_bad_range() {
        let mut model: Model<f32> = Model::build(rnn_config(4), 3).unwrap();
        let data = rnn_dataset(4, 4);
        let cfg = LrScanConfig { lr_min: 1.0, lr_max: 0.1, ..LrScanConfig::default() };
        assert!(matches!(
            lr_range_test(&mut model, &data, &cfg),
            Err(PipelineError::InvalidRange(_))
        ));
        let cfg = LrScanConfig { steps: 5, ..LrScanConfig::default() };
        assert!(matches!(
            lr_range_test(&mut model, &data, &cfg),
            Err(PipelineError::InvalidRange(_))
        ));
    }

    #[test]
    fn prepare_input_shapes_per_model_kind() {
        let inst = tiny_instance(1, 1, 0);
        let rnn: Tensor<f32> = prepare_input(&rnn_config(16), &inst).unwrap();
        assert_eq!(rnn.shape(), &[16, 4]);

        let cnn_cfg = ModelConfig::new(ModelKind::CnnFixed, Variant::Temporal);
        let cnn: Tensor<f32> = prepare_input(&cnn_cfg, &inst).unwrap();
        assert_eq!(cnn.shape(), &[7, 128, 128]);

        let hybrid_cfg = ModelConfig::new(ModelKind::CnnLstm, Variant::Stacked);
        let hybrid: Tensor<f32> = prepare_input(&hybrid_cfg, &inst).unwrap();
        assert_eq!(hybrid.shape()[0], 14);
        assert_eq!(hybrid.shape()[1], 128);
        assert_eq!(hybrid.shape()[2] % 16, 0);
    }
}
