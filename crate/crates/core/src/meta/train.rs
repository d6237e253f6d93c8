use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{corrupt, gen_blobs, split_dataset, test_corruptions, training_corruptions, CorruptionSpec, Dataset};
use crate::dece::dece_value;
use crate::error::{Error, Result};
use crate::losses::HyperParams;
use crate::meta::config::TrainConfig;
use crate::meta::report::{DataSummary, DomainMetrics, DomainReport, EpochLog, RunReport, TestMetrics};
use crate::meta::step::{base_step, meta_step, Batch, MetaState};
use crate::metrics::{aece, ece, ece_with_bins, evaluate_scores, fit_temperature, PredictionBatch, TemperatureGrid};
use crate::nn::{init_params, Architecture, ModelParams, SgdMomentum};
use crate::tensor::Tensor;

/// Independent random streams derived from one seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Data = 1,
    Test = 2,
    Split = 3,
    Init = 4,
    Batching = 5,
    MetaSampling = 6,
    Corruption = 7,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

pub fn stream_seed(seed: u64, stream: Stream) -> u64 {
    stream_rng(seed, stream).next_u64()
}

/// Train, validation, meta-validation and test data for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub metaval: Dataset,
    pub test: Dataset,
}

impl Splits {
    pub fn summary(&self) -> DataSummary {
        DataSummary {
            train_n: self.train.len(),
            val_n: self.val.len(),
            metaval_n: self.metaval.len(),
            test_n: self.test.len(),
            num_features: self.train.num_features(),
            num_classes: self.train.num_classes(),
            provenance: self.train.provenance().to_string(),
        }
    }
}

/// Loads or generates the data described by `cfg.data` and splits it into
/// train, validation and meta-validation. The test set is a separate draw
/// (or file).
pub fn prepare_data(cfg: &TrainConfig) -> Result<Splits> {
    cfg.validate()?;
    let seed = cfg.data.seed.unwrap_or(cfg.seed);
    let (full, test) = match (&cfg.data.train_csv, &cfg.data.test_csv) {
        (Some(train), Some(test)) => (Dataset::load_csv(train)?, Dataset::load_csv(test)?),
        _ => {
            let full = gen_blobs(stream_seed(seed, Stream::Data), &cfg.data.blobs)?;
            let spec = crate::data::BlobsSpec {
                n: cfg.data.test_n,
                ..cfg.data.blobs
            };
            (full, gen_blobs(stream_seed(seed, Stream::Test), &spec)?)
        }
    };
    if test.num_features() != full.num_features() {
        return Err(Error::Config(format!(
            "test data has {} features, training data {}",
            test.num_features(),
            full.num_features()
        )));
    }
    let k = full.num_classes().max(test.num_classes());
    let full = Dataset::new(full.x().clone(), full.y().to_vec(), k, full.provenance())?;
    let test = Dataset::new(test.x().clone(), test.y().to_vec(), k, test.provenance())?;
    let mut parts = split_dataset(&full, &cfg.data.splits, stream_seed(seed, Stream::Split))?.into_iter();
    let (Some(train), Some(val), Some(metaval)) = (parts.next(), parts.next(), parts.next()) else {
        return Err(Error::Config("data.splits must have three entries".into()));
    };
    Ok(Splits {
        train,
        val,
        metaval,
        test,
    })
}

/// Everything produced by one training run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: RunReport,
    /// Parameters used for the test metrics.
    pub params: ModelParams,
    pub omega: Option<HyperParams>,
    /// `(epoch, params)` pairs taken every `eval.snapshot_every` epochs.
    pub snapshots: Vec<(usize, ModelParams)>,
}

fn sample_batch(data: &Dataset, size: usize, rng: &mut ChaCha8Rng) -> Result<Batch> {
    let idx = rand::seq::index::sample(rng, data.len(), size.min(data.len())).into_vec();
    Batch::from_dataset(data, &idx)
}

/// Runs the configured training, with the meta loop when `cfg.meta.enabled`.
pub fn run_training(cfg: &TrainConfig, data: &Splits) -> Result<RunOutput> {
    cfg.validate()?;
    let omega = cfg.meta.enabled.then(|| {
        let d = cfg.model.hidden.last().copied().unwrap_or(data.train.num_features());
        HyperParams::zeros(cfg.meta.hyper, data.train.num_classes(), d)
    });
    train_loop(cfg, data, &data.train, omega, cfg.meta.enabled, "train")
}

/// Plain training with `omega` frozen on train ∪ meta-validation.
pub fn retrain_with_fixed_hparams(omega: &HyperParams, cfg: &TrainConfig, data: &Splits) -> Result<RunOutput> {
    cfg.validate()?;
    if omega.kind != cfg.meta.hyper {
        return Err(Error::Config(format!(
            "hyper-parameters are {:?} but meta.hyper is {:?}",
            omega.kind, cfg.meta.hyper
        )));
    }
    omega.validate()?;
    if omega.num_classes != data.train.num_classes() {
        return Err(Error::Config(format!(
            "hyper-parameters are for {} classes, data has {}",
            omega.num_classes,
            data.train.num_classes()
        )));
    }
    let d = cfg.model.hidden.last().copied().unwrap_or(data.train.num_features());
    if omega.feature_dim().is_some_and(|f| f != d) {
        return Err(Error::Config(format!(
            "hyper-parameters are for feature dimension {:?}, model has {d}",
            omega.feature_dim()
        )));
    }
    let merged = data.train.concat(&data.metaval)?;
    train_loop(cfg, data, &merged, Some(omega.clone()), false, "retrain")
}

fn train_loop(
    cfg: &TrainConfig,
    data: &Splits,
    train: &Dataset,
    omega: Option<HyperParams>,
    meta_enabled: bool,
    mode: &str,
) -> Result<RunOutput> {
    let mut dims = vec![train.num_features()];
    dims.extend(&cfg.model.hidden);
    let arch = Architecture::new(dims, train.num_classes())?;
    let mut params = init_params(stream_seed(cfg.seed, Stream::Init), arch);
    let o = &cfg.optim;
    let mut sgd = SgdMomentum::new(o.lr, o.momentum, o.weight_decay);
    let mut meta = match (&omega, meta_enabled) {
        (Some(om), true) => Some(MetaState::new(om.clone(), cfg.meta.lr)),
        _ => None,
    };
    if meta_enabled && data.metaval.is_empty() {
        return Err(Error::Config(
            "meta-learning needs a non-empty meta-validation split".into(),
        ));
    }
    let mut batch_rng = stream_rng(cfg.seed, Stream::Batching);
    let mut meta_rng = stream_rng(cfg.seed, Stream::MetaSampling);
    let mut corr_rng = stream_rng(cfg.seed, Stream::Corruption);
    let pool = training_corruptions();

    let mut epochs = Vec::with_capacity(o.epochs);
    let mut snapshots = Vec::new();
    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0usize;
    for epoch in 0..o.epochs {
        let lr = o.lr_at(epoch);
        order.shuffle(&mut batch_rng);
        let mut loss_sum = 0.0;
        let mut outer_sum = 0.0;
        let mut outer_count = 0usize;
        for chunk in order.chunks(o.batch_size) {
            let batch = Batch::from_dataset(train, chunk)?;
            let loss = match meta.as_mut() {
                Some(state) if step.is_multiple_of(cfg.meta.stride) => {
                    let fresh = sample_batch(train, o.batch_size, &mut meta_rng)?;
                    let mut mv = sample_batch(&data.metaval, o.batch_size, &mut meta_rng)?;
                    if cfg.meta.multi_domain {
                        let (family, severity) = pool[corr_rng.random_range(0..pool.len())];
                        let spec = CorruptionSpec::new(family, severity, corr_rng.next_u64())?;
                        mv.x = corrupt(&mv.x, &spec)?;
                    }
                    let out = meta_step(&mut params, &mut sgd, state, &batch, &fresh, &mv, cfg, lr)?;
                    outer_sum += out.outer_loss;
                    outer_count += 1;
                    out.train_loss
                }
                Some(state) => base_step(&mut params, &mut sgd, &batch, cfg, Some(&state.omega), lr)?,
                None => base_step(&mut params, &mut sgd, &batch, cfg, omega.as_ref(), lr)?,
            };
            loss_sum += loss * chunk.len() as f64;
            step += 1;
        }
        let val_logits = params.predict(data.val.x())?;
        let val_scores = evaluate_scores(&val_logits, data.val.y())?;
        let val_batch = PredictionBatch::from_logits(&val_logits, data.val.y().to_vec())?;
        epochs.push(EpochLog {
            epoch,
            lr,
            train_loss: loss_sum / train.len() as f64,
            meta_loss: (outer_count > 0).then(|| outer_sum / outer_count as f64),
            val_error: val_scores.error_rate,
            val_ece: ece(&val_batch, cfg.eval.bins)?,
            val_nll: val_scores.nll,
        });
        if best.as_ref().is_none_or(|(err, _, _)| val_scores.error_rate < *err) {
            best = Some((val_scores.error_rate, epoch, params.clone()));
        }
        let every = cfg.eval.snapshot_every;
        if every > 0 && (epoch + 1) % every == 0 {
            snapshots.push((epoch + 1, params.clone()));
        }
    }
    let (best_epoch, final_params) = match best {
        Some((_, e, p)) if cfg.eval.early_stopping => (e, p),
        _ => (o.epochs - 1, params),
    };

    let (test, reliability) = test_metrics(&final_params, &data.val, &data.test, cfg)?;
    let domains = if cfg.eval.corrupted_domains {
        Some(domain_metrics(&final_params, &data.test, cfg)?)
    } else {
        None
    };
    let final_omega = meta.as_ref().map(|m| m.omega.clone()).or(omega);
    let stride = cfg.meta.trajectory_stride.max(1);
    let (trajectory, meta_updates) = match &meta {
        Some(m) => (
            m.trajectory
                .iter()
                .filter(|p| p.iter % stride as u64 == 0)
                .cloned()
                .collect(),
            m.updates,
        ),
        None => (Vec::new(), 0),
    };
    let mut summary = data.summary();
    summary.train_n = train.len();
    let report = RunReport::new(
        mode,
        cfg.clone(),
        summary,
        epochs,
        best_epoch,
        test,
        reliability,
        final_omega.clone(),
        trajectory,
        meta_updates,
        domains,
    );
    Ok(RunOutput {
        report,
        params: final_params,
        omega: final_omega,
        snapshots,
    })
}

fn scaled(logits: &Tensor, t: f64) -> Tensor {
    logits.map(|v| v / t)
}

/// Test metrics of `params`, with the temperature fitted on `val`.
pub fn test_metrics(
    params: &ModelParams,
    val: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
) -> Result<(TestMetrics, crate::metrics::BinStats)> {
    let bins = cfg.eval.bins;
    let logits = params.predict(test.x())?;
    let scores = evaluate_scores(&logits, test.y())?;
    let batch = PredictionBatch::from_logits(&logits, test.y().to_vec())?;
    let (test_ece, reliability) = ece_with_bins(&batch, bins)?;
    let fit = fit_temperature(&params.predict(val.x())?, val.y(), TemperatureGrid::default())?;
    let ts_batch = PredictionBatch::from_logits(&scaled(&logits, fit.temperature), test.y().to_vec())?;
    let metrics = TestMetrics {
        error: scores.error_rate,
        ece: test_ece,
        aece: if test.len() >= bins {
            Some(aece(&batch, bins)?)
        } else {
            None
        },
        dece: dece_value(&logits, test.y(), &cfg.dece)?,
        nll: scores.nll,
        brier: scores.brier,
        temperature: fit.temperature,
        ece_after_temperature: ece(&ts_batch, bins)?,
    };
    Ok((metrics, reliability))
}

/// Metrics on each held-out corrupted copy of the test set.
pub fn domain_metrics(params: &ModelParams, test: &Dataset, cfg: &TrainConfig) -> Result<DomainReport> {
    let mut domains = Vec::new();
    let seed = stream_seed(cfg.seed, Stream::Test);
    for (i, (family, severity)) in test_corruptions().into_iter().enumerate() {
        let spec = CorruptionSpec::new(family, severity, seed.wrapping_add(i as u64))?;
        let logits = params.predict(&corrupt(test.x(), &spec)?)?;
        let scores = evaluate_scores(&logits, test.y())?;
        let batch = PredictionBatch::from_logits(&logits, test.y().to_vec())?;
        domains.push(DomainMetrics {
            domain: spec.label(),
            error: scores.error_rate,
            ece: ece(&batch, cfg.eval.bins)?,
            nll: scores.nll,
        });
    }
    Ok(DomainReport::new(domains))
}
