//! Training configuration, the epoch loop, evaluation and checkpointing.

pub mod adam;
pub mod loss;

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;

pub use adam::{Adam, AdamConfig};
pub use loss::{cross_entropy_map, focal_loss_map, loss_term_names, total_loss, LossBreakdown, LossMode};

use crate::checkpoint;
use crate::config::KeyValues;
use crate::data::{batch_images, ImagePair};
use crate::error::{Error, Result};
use crate::metrics::{binarize, confusion, metrics_from_confusion, ConfusionCounts, Mask, MetricReport};
use crate::model::{Model, ModelConfig, MODEL_KEYS};
use crate::nn::{apply_stat_updates, Session};
use crate::params::ParamStore;
use crate::rng::RngSeed;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub loss_mode: LossMode,
    pub focal_gamma: f64,
    pub seed: RngSeed,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            batch_size: 4,
            epochs: 20,
            loss_mode: LossMode::MultiCe,
            focal_gamma: 2.0,
            seed: RngSeed(0),
        }
    }
}

pub const TRAIN_KEYS: &[&str] = &[
    "lr",
    "beta1",
    "beta2",
    "eps",
    "batch_size",
    "epochs",
    "loss_mode",
    "focal_gamma",
    "seed",
];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.focal_gamma >= 0.0) {
            return Err(Error::Config("focal_gamma must be >= 0".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("lr", self.adam.lr);
        kv.set("beta1", self.adam.beta1);
        kv.set("beta2", self.adam.beta2);
        kv.set("eps", self.adam.eps);
        kv.set("batch_size", self.batch_size);
        kv.set("epochs", self.epochs);
        kv.set("loss_mode", self.loss_mode.as_str());
        kv.set("focal_gamma", self.focal_gamma);
        kv.set("seed", self.seed.0);
        kv
    }

    pub fn update(&mut self, kv: &KeyValues) -> Result<()> {
        kv.apply("lr", &mut self.adam.lr)?;
        kv.apply("beta1", &mut self.adam.beta1)?;
        kv.apply("beta2", &mut self.adam.beta2)?;
        kv.apply("eps", &mut self.adam.eps)?;
        kv.apply("batch_size", &mut self.batch_size)?;
        kv.apply("epochs", &mut self.epochs)?;
        if let Some(m) = kv.get("loss_mode") {
            self.loss_mode = LossMode::parse(m)?;
        }
        kv.apply("focal_gamma", &mut self.focal_gamma)?;
        kv.apply("seed", &mut self.seed.0)?;
        Ok(())
    }
}

/// Parses a run configuration that may mix model and training keys.
pub fn parse_run_config(kv: &KeyValues) -> Result<(ModelConfig, TrainConfig)> {
    let known: Vec<&str> = MODEL_KEYS.iter().chain(TRAIN_KEYS).copied().collect();
    kv.check_known(&known)?;
    let model = ModelConfig::from_kv(kv)?;
    let mut train = TrainConfig::default();
    if model.arch == crate::model::Arch::Basic {
        train.loss_mode = LossMode::SingleCe;
    }
    train.update(kv)?;
    train.validate()?;
    Ok((model, train))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
    pub terms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val: Option<MetricReport>,
}

/// Append-only record of a run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub term_names: Vec<String>,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn steps_header(&self) -> String {
        let mut s = "step,epoch,loss".to_string();
        for n in &self.term_names {
            write!(s, ",loss_{n}").expect("string write");
        }
        s
    }

    pub fn step_row(r: &StepRecord) -> String {
        let mut s = format!("{},{},{:.6}", r.step, r.epoch, r.loss);
        for t in &r.terms {
            write!(s, ",{t:.6}").expect("string write");
        }
        s
    }

    pub const EPOCH_HEADER: &'static str = "epoch,mean_loss,P,R,F1,OA,IoU";

    pub fn epoch_row(r: &EpochRecord) -> String {
        let mut s = format!("{},{:.6}", r.epoch, r.mean_loss);
        match &r.val {
            Some(m) => {
                for v in [m.precision, m.recall, m.f1, m.oa, m.iou] {
                    write!(s, ",{v:.6}").expect("string write");
                }
            }
            None => s.push_str(",,,,,"),
        }
        s
    }
}

/// Pixel tallies over a set of pairs, kept per image as well.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub per_image: Vec<ConfusionCounts>,
}

impl Evaluation {
    pub fn total(&self) -> ConfusionCounts {
        self.per_image.iter().copied().sum()
    }

    pub fn report(&self) -> Result<MetricReport> {
        metrics_from_confusion(&self.total())
    }

    /// Mean of per-image F1 scores.
    pub fn mean_image_f1(&self) -> Result<f64> {
        let mut s = 0.0;
        for c in &self.per_image {
            s += metrics_from_confusion(c)?.f1;
        }
        Ok(s / self.per_image.len().max(1) as f64)
    }
}

/// Binary predictions for each pair, in batches of `batch_size`.
pub fn predict(model: &Model, store: &ParamStore<f32>, pairs: &[ImagePair], batch_size: usize) -> Result<Vec<Mask>> {
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(batch_size.max(1)) {
        let refs: Vec<&ImagePair> = chunk.iter().collect();
        let (xb, yb) = batch_images(&refs)?;
        let mut s = Session::new(store, false);
        let (x, y) = (s.graph.input(xb), s.graph.input(yb));
        let maps = model.forward(&mut s, x, y)?;
        out.extend(binarize(s.graph.value(maps.logits))?);
    }
    Ok(out)
}

pub fn evaluate(model: &Model, store: &ParamStore<f32>, pairs: &[ImagePair], batch_size: usize) -> Result<Evaluation> {
    let preds = predict(model, store, pairs, batch_size)?;
    let per_image = preds
        .iter()
        .zip(pairs)
        .map(|(p, pair)| confusion(p, &pair.gt))
        .collect::<Result<_>>()?;
    Ok(Evaluation { per_image })
}

/// Where a run writes its checkpoint and logs.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub dir: PathBuf,
}

impl RunDir {
    pub const CHECKPOINT: &'static str = "checkpoint.idet";
    pub const STEPS_CSV: &'static str = "train_log.csv";
    pub const EPOCHS_CSV: &'static str = "val_metrics.csv";
    pub const BEST: &'static str = "best.idet";

    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self { dir })
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join(Self::CHECKPOINT)
    }

    pub fn best(&self) -> PathBuf {
        self.dir.join(Self::BEST)
    }

    fn append(&self, name: &str, header: &str, rows: &[String], fresh: bool) -> Result<()> {
        let path = self.dir.join(name);
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(!fresh)
            .write(true)
            .truncate(fresh)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let mut text = String::new();
        if fresh {
            text.push_str(header);
            text.push('\n');
        }
        for r in rows {
            text.push_str(r);
            text.push('\n');
        }
        f.write_all(text.as_bytes()).map_err(|e| Error::io(&path, e))
    }
}

/// Parameters of the epoch with the highest validation F1 so far.
#[derive(Debug, Clone)]
pub struct BestSnapshot {
    pub epoch: usize,
    pub f1: f64,
    pub store: ParamStore<f32>,
}

pub struct Trainer {
    pub model: Model,
    pub model_config: ModelConfig,
    pub store: ParamStore<f32>,
    pub adam: Adam<f32>,
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub log: TrainLog,
    pub best: Option<BestSnapshot>,
}

impl Trainer {
    pub fn new(model_config: &ModelConfig, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let (model, store) = Model::init::<f32>(model_config, config.seed.labeled("init"))?;
        let adam = Adam::new(config.adam, &store)?;
        Ok(Self {
            model,
            model_config: model_config.clone(),
            store,
            adam,
            config: config.clone(),
            epoch: 0,
            log: TrainLog::default(),
            best: None,
        })
    }

    /// Restores parameters, optimizer state and progress from a checkpoint,
    /// plus the best-validation snapshot when `best.idet` sits next to it.
    /// `epochs` overrides the stored epoch budget when given.
    pub fn resume(path: &Path, epochs: Option<usize>) -> Result<Self> {
        let kv = checkpoint::read_sidecar(path)?;
        let (model_config, mut config) = parse_run_config(&strip_progress(&kv))?;
        if let Some(e) = epochs {
            config.epochs = e;
        }
        let mut t = Self::new(&model_config, &config)?;
        let records = checkpoint::read(path)?;
        let values: Vec<(String, crate::tensor::Tensor<f32>)> = records
            .iter()
            .filter(|(n, _)| !n.starts_with(adam::STATE_PREFIX))
            .cloned()
            .collect();
        t.store.load_values(&values)?;
        let step: u64 = kv.parsed("progress_step")?.unwrap_or(0);
        t.adam.load_state(&t.store, &records, step)?;
        t.epoch = kv.parsed("progress_epoch")?.unwrap_or(0);
        let best_path = path.with_file_name(RunDir::BEST);
        if best_path.exists() {
            let best_kv = checkpoint::read_sidecar(&best_path)?;
            let mut store = t.store.clone();
            store.load_values(&checkpoint::read(&best_path)?)?;
            t.best = Some(BestSnapshot {
                epoch: best_kv.parsed("progress_epoch")?.unwrap_or(0),
                f1: best_kv.parsed("progress_val_f1")?.unwrap_or(f64::NEG_INFINITY),
                store,
            });
        }
        Ok(t)
    }

    pub fn run_config(&self) -> KeyValues {
        let mut kv = self.model_config.to_kv();
        kv.merge(&self.config.to_kv());
        kv
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut records = checkpoint::store_records(&self.store);
        records.extend(self.adam.state_records(&self.store));
        let refs: Vec<(String, &crate::tensor::Tensor<f32>)> = records.iter().map(|(n, t)| (n.clone(), t)).collect();
        checkpoint::write(path, &refs)?;
        let mut kv = self.run_config();
        kv.set("progress_epoch", self.epoch);
        kv.set("progress_step", self.adam.steps());
        checkpoint::write_sidecar(path, &kv)
    }

    /// Parameters selected on validation F1, or the latest ones when no
    /// validation epoch has run.
    pub fn best_store(&self) -> &ParamStore<f32> {
        self.best.as_ref().map_or(&self.store, |b| &b.store)
    }

    fn write_best(&self, path: &Path, best: &BestSnapshot) -> Result<()> {
        let records = checkpoint::store_records(&best.store);
        let refs: Vec<(String, &crate::tensor::Tensor<f32>)> = records.iter().map(|(n, t)| (n.clone(), t)).collect();
        checkpoint::write(path, &refs)?;
        let mut kv = self.run_config();
        kv.set("progress_epoch", best.epoch);
        kv.set("progress_val_f1", best.f1);
        checkpoint::write_sidecar(path, &kv)
    }

    /// Forward, loss, backward and one Adam update on a batch.
    pub fn train_step(&mut self, batch: &[&ImagePair]) -> Result<StepRecord> {
        let (xb, yb) = batch_images(batch)?;
        let gt: Vec<Mask> = batch.iter().map(|p| p.gt.clone()).collect();
        let (loss, terms, grads, stats, names) = {
            let mut s = Session::new(&self.store, true);
            let (x, y) = (s.graph.input(xb), s.graph.input(yb));
            let maps = self.model.forward(&mut s, x, y)?;
            let lb = total_loss(&mut s.graph, &maps, &gt, self.config.loss_mode, self.config.focal_gamma)?;
            let loss = s.graph.value(lb.total).item() as f64;
            if !loss.is_finite() {
                return Err(Error::Degenerate(format!("non-finite loss at step {}", self.adam.steps() + 1)));
            }
            let terms: Vec<f64> = lb.terms.iter().map(|(_, v)| s.graph.value(*v).item() as f64).collect();
            let names: Vec<String> = lb.terms.iter().map(|(n, _)| n.clone()).collect();
            let grads = s.graph.backward(lb.total)?;
            let owned: Vec<_> = grads.param_grads().into_iter().map(|(id, t)| (id, t.clone())).collect();
            (loss, terms, owned, s.take_stat_updates(), names)
        };
        if self.log.term_names.is_empty() {
            self.log.term_names = names;
        }
        let refs: Vec<_> = grads.iter().map(|(id, t)| (*id, t)).collect();
        self.adam.step(&mut self.store, &refs)?;
        apply_stat_updates(&mut self.store, &stats);
        let rec = StepRecord {
            step: self.adam.steps(),
            epoch: self.epoch + 1,
            loss,
            terms,
        };
        self.log.steps.push(rec.clone());
        Ok(rec)
    }

    /// Seeded batch order for an epoch; depends only on the seed and epoch.
    pub fn epoch_order(&self, n: usize, epoch: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut self.config.seed.derive(&[0x5348_5546, epoch as u64]).rng());
        idx
    }

    /// Trains until `config.epochs` epochs are complete, evaluating on `val`
    /// after each epoch and checkpointing into `run` when given.
    pub fn fit(&mut self, train: &[ImagePair], val: &[ImagePair], run: Option<&RunDir>) -> Result<()> {
        if train.is_empty() {
            return Err(Error::Input("training set is empty".into()));
        }
        let mut fresh = self.epoch == 0;
        while self.epoch < self.config.epochs {
            let order = self.epoch_order(train.len(), self.epoch);
            let first_step = self.log.steps.len();
            for chunk in order.chunks(self.config.batch_size) {
                let batch: Vec<&ImagePair> = chunk.iter().map(|&i| &train[i]).collect();
                self.train_step(&batch)?;
            }
            let new_steps = &self.log.steps[first_step..];
            let mean_loss = new_steps.iter().map(|r| r.loss).sum::<f64>() / new_steps.len() as f64;
            self.epoch += 1;
            let val_report = if val.is_empty() {
                None
            } else {
                Some(evaluate(&self.model, &self.store, val, self.config.batch_size)?.report()?)
            };
            let rec = EpochRecord {
                epoch: self.epoch,
                mean_loss,
                val: val_report,
            };
            info!(
                "epoch {}/{} mean loss {:.4} val F1 {}",
                self.epoch,
                self.config.epochs,
                mean_loss,
                val_report.map_or("-".to_string(), |r| format!("{:.4}", r.f1))
            );
            let improved = match (val_report, &self.best) {
                (Some(r), Some(b)) => r.f1 > b.f1,
                (Some(_), None) => true,
                (None, _) => false,
            };
            if improved {
                self.best = Some(BestSnapshot {
                    epoch: self.epoch,
                    f1: val_report.map_or(0.0, |r| r.f1),
                    store: self.store.clone(),
                });
            }
            if let Some(run) = run {
                if improved {
                    self.write_best(&run.best(), self.best.as_ref().expect("just set"))?;
                }
                let rows: Vec<String> = new_steps.iter().map(TrainLog::step_row).collect();
                run.append(RunDir::STEPS_CSV, &self.log.steps_header(), &rows, fresh)?;
                run.append(RunDir::EPOCHS_CSV, TrainLog::EPOCH_HEADER, &[TrainLog::epoch_row(&rec)], fresh)?;
                self.save(&run.checkpoint())?;
                fresh = false;
            }
            self.log.epochs.push(rec);
        }
        Ok(())
    }
}

fn strip_progress(kv: &KeyValues) -> KeyValues {
    let mut out = KeyValues::new();
    for k in kv.keys().filter(|k| !k.starts_with("progress_")) {
        out.set(k, kv.get(k).expect("key listed"));
    }
    out
}

/// Loads a trained model for inference.
pub fn load_model(path: &Path) -> Result<(Model, ModelConfig, ParamStore<f32>)> {
    let kv = strip_progress(&checkpoint::read_sidecar(path)?);
    let (model_config, train) = parse_run_config(&kv)?;
    let (model, mut store) = Model::init::<f32>(&model_config, train.seed.labeled("init"))?;
    store.load_values(&checkpoint::read(path)?)?;
    Ok((model, model_config, store))
}
