//! Training runs over the synthetic benchmark: the overfit smoke run, the
//! variant/loss/iteration arms and their CSV summaries.

use std::fmt::Write as _;

use log::info;

use crate::data::{select_split, synth_pair, ImagePair, Split, SynthConfig};
use crate::training::{evaluate, LossMode, RunDir, TrainConfig, Trainer};
use crate::{Arch, Error, ModelConfig, Result, RngSeed, Variant};

/// Learning rate for the fixed-batch smoke run. At the training rate Adam
/// overshoots a few times within 50 steps, so the run uses a smaller step.
pub const SMOKE_LR: f64 = 5e-5;

/// Training seeds used by the ablation and iteration sweeps.
pub const SEEDS: [u64; 3] = [0, 1, 2];

/// Generates the pairs of `cfg` in memory and splits them into train/val.
pub fn synthetic_splits(cfg: &SynthConfig) -> Result<(Vec<ImagePair>, Vec<ImagePair>)> {
    let pairs = (0..cfg.n_pairs).map(|i| synth_pair(cfg, i)).collect::<Result<Vec<_>>>()?;
    Ok((select_split(&pairs, Split::Train), select_split(&pairs, Split::Val)))
}

/// Loss after each of `steps` updates on the same batch.
pub fn overfit_losses(model: &ModelConfig, train: &TrainConfig, batch: &[&ImagePair], steps: usize) -> Result<Vec<f64>> {
    let mut t = Trainer::new(model, train)?;
    (0..steps).map(|_| t.train_step(batch).map(|r| r.loss)).collect()
}

/// One configuration in a comparison.
#[derive(Debug, Clone)]
pub struct Arm {
    pub name: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Arm {
    pub fn new(name: impl Into<String>, model: ModelConfig, train: TrainConfig) -> Self {
        Self {
            name: name.into(),
            model,
            train,
        }
    }

    /// The basic model has no intermediate maps and trains on M alone.
    pub fn basic(base: &ModelConfig, train: &TrainConfig) -> Self {
        let mut model = base.clone();
        model.arch = Arch::Basic;
        let mut train = train.clone();
        train.loss_mode = LossMode::SingleCe;
        Self::new("basic", model, train)
    }
}

/// Every MS-IDET variant with the base settings.
pub fn variant_arms(base: &ModelConfig, train: &TrainConfig) -> Vec<Arm> {
    Variant::ALL
        .iter()
        .map(|&v| {
            let mut model = base.clone();
            model.net.variant = v;
            Arm::new(v.as_str(), model, train.clone())
        })
        .collect()
}

/// The full model under each loss mode.
pub fn loss_arms(base: &ModelConfig, train: &TrainConfig) -> Vec<Arm> {
    [LossMode::MultiCe, LossMode::SingleCe, LossMode::MultiFocal]
        .iter()
        .map(|&mode| {
            let mut train = train.clone();
            train.loss_mode = mode;
            Arm::new(mode.as_str(), base.clone(), train)
        })
        .collect()
}

/// The full model with T = 0..=max_t.
pub fn iteration_arms(base: &ModelConfig, train: &TrainConfig, max_t: usize) -> Vec<Arm> {
    (0..=max_t)
        .map(|t| {
            let mut model = base.clone();
            model.net.idet.iterations = t;
            Arm::new(format!("T={t}"), model, train.clone())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmResult {
    pub arm: String,
    pub seed: u64,
    /// Epoch with the highest validation F1; its weights are the ones scored.
    pub best_epoch: usize,
    pub val_f1: f64,
    pub final_val_f1: f64,
    pub train_f1: f64,
}

/// Trains one arm with `seed`, keeping the best-validation weights.
pub fn run_arm(arm: &Arm, seed: u64, train: &[ImagePair], val: &[ImagePair], run: Option<&RunDir>) -> Result<(Trainer, ArmResult)> {
    if val.is_empty() {
        return Err(Error::Input("validation split is empty".into()));
    }
    let mut cfg = arm.train.clone();
    cfg.seed = RngSeed(seed);
    let mut t = Trainer::new(&arm.model, &cfg)?;
    t.fit(train, val, run)?;
    let best = t.best.as_ref().expect("validation ran");
    let final_val_f1 = t
        .log
        .epochs
        .last()
        .and_then(|e| e.val)
        .map_or(f64::NAN, |r| r.f1);
    let train_f1 = evaluate(&t.model, &best.store, train, cfg.batch_size)?.report()?.f1;
    let result = ArmResult {
        arm: arm.name.clone(),
        seed,
        best_epoch: best.epoch,
        val_f1: best.f1,
        final_val_f1,
        train_f1,
    };
    info!(
        "{} seed {seed}: val F1 {:.4} (epoch {}), train F1 {:.4}",
        arm.name, result.val_f1, result.best_epoch, result.train_f1
    );
    Ok((t, result))
}

/// Runs every arm for every seed, arms outermost.
pub fn run_arms(arms: &[Arm], seeds: &[u64], train: &[ImagePair], val: &[ImagePair]) -> Result<Vec<ArmResult>> {
    let mut out = Vec::with_capacity(arms.len() * seeds.len());
    for arm in arms {
        for &seed in seeds {
            out.push(run_arm(arm, seed, train, val, None)?.1);
        }
    }
    Ok(out)
}

pub const RESULTS_HEADER: &str = "arm,seed,best_epoch,val_f1,final_val_f1,train_f1";

pub fn results_csv(rows: &[ArmResult]) -> String {
    let mut s = format!("{RESULTS_HEADER}\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{:.6},{:.6},{:.6}",
            r.arm, r.seed, r.best_epoch, r.val_f1, r.final_val_f1, r.train_f1
        )
        .expect("string write");
    }
    s
}

pub const SUMMARY_HEADER: &str = "arm,seeds,mean_val_f1,min_val_f1,max_val_f1";

/// One row per arm, in first-seen order.
pub fn summary_csv(rows: &[ArmResult]) -> String {
    let mut s = format!("{SUMMARY_HEADER}\n");
    let mut arms: Vec<&str> = Vec::new();
    for r in rows {
        if !arms.contains(&r.arm.as_str()) {
            arms.push(&r.arm);
        }
    }
    for arm in arms {
        let f1s: Vec<f64> = rows.iter().filter(|r| r.arm == arm).map(|r| r.val_f1).collect();
        let mean = f1s.iter().sum::<f64>() / f1s.len() as f64;
        let min = f1s.iter().copied().fold(f64::INFINITY, f64::min);
        let max = f1s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        writeln!(s, "{arm},{},{mean:.6},{min:.6},{max:.6}", f1s.len()).expect("string write");
    }
    s
}

pub const ITERATIONS_HEADER: &str = "T,seeds,mean_val_f1,min_val_f1,max_val_f1";

/// One row per T from the rows of [`iteration_arms`].
pub fn iterations_csv(rows: &[ArmResult], max_t: usize) -> String {
    let summary = summary_csv(rows);
    let mut s = format!("{ITERATIONS_HEADER}\n");
    for t in 0..=max_t {
        let name = format!("T={t},");
        if let Some(line) = summary.lines().find(|l| l.starts_with(&name)) {
            writeln!(s, "{t},{}", &line[name.len()..]).expect("string write");
        }
    }
    s
}

/// Outcome of a per-seed `a >= b` comparison on validation F1.
#[derive(Debug, Clone, PartialEq)]
pub struct SignCheck {
    pub a: String,
    pub b: String,
    /// (seed, a's F1, b's F1)
    pub pairs: Vec<(u64, f64, f64)>,
}

impl SignCheck {
    pub fn compare(rows: &[ArmResult], a: &str, b: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for ra in rows.iter().filter(|r| r.arm == a) {
            let rb = rows
                .iter()
                .find(|r| r.arm == b && r.seed == ra.seed)
                .ok_or_else(|| Error::Input(format!("no {b} run for seed {}", ra.seed)))?;
            pairs.push((ra.seed, ra.val_f1, rb.val_f1));
        }
        if pairs.is_empty() {
            return Err(Error::Input(format!("no {a} runs")));
        }
        Ok(Self {
            a: a.into(),
            b: b.into(),
            pairs,
        })
    }

    pub fn wins(&self) -> usize {
        self.pairs.iter().filter(|(_, a, b)| a >= b).count()
    }

    /// Strict majority of seeds with a >= b.
    pub fn holds(&self) -> bool {
        2 * self.wins() > self.pairs.len()
    }

    pub fn describe(&self) -> String {
        let per_seed: Vec<String> = self
            .pairs
            .iter()
            .map(|(s, a, b)| format!("seed {s}: {a:.4} vs {b:.4}"))
            .collect();
        format!(
            "{} >= {} on {}/{} seeds ({})",
            self.a,
            self.b,
            self.wins(),
            self.pairs.len(),
            per_seed.join(", ")
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(arm: &str, seed: u64, f1: f64) -> ArmResult {
        ArmResult {
            arm: arm.into(),
            seed,
            best_epoch: 1,
            val_f1: f1,
            final_val_f1: f1,
            train_f1: f1,
        }
    }

    #[test]
    fn sign_check_is_a_per_seed_majority() {
        let rows = [
            row("a", 0, 0.8),
            row("a", 1, 0.7),
            row("a", 2, 0.9),
            row("b", 0, 0.79),
            row("b", 1, 0.75),
            row("b", 2, 0.85),
        ];
        let c = SignCheck::compare(&rows, "a", "b").unwrap();
        assert_eq!(c.wins(), 2);
        assert!(c.holds());
        assert!(!SignCheck::compare(&rows, "b", "a").unwrap().holds());
        assert!(SignCheck::compare(&rows, "a", "c").is_err());
    }

    #[test]
    fn summary_averages_per_arm() {
        let rows = [row("a", 0, 0.5), row("b", 0, 0.25), row("a", 1, 1.0)];
        assert_eq!(
            summary_csv(&rows),
            "arm,seeds,mean_val_f1,min_val_f1,max_val_f1\na,2,0.750000,0.500000,1.000000\nb,1,0.250000,0.250000,0.250000\n"
        );
        let t_rows = [row("T=0", 0, 0.5), row("T=1", 0, 0.25)];
        assert_eq!(
            iterations_csv(&t_rows, 1),
            "T,seeds,mean_val_f1,min_val_f1,max_val_f1\n0,1,0.500000,0.500000,0.500000\n1,1,0.250000,0.250000,0.250000\n"
        );
        assert!(results_csv(&rows).starts_with("arm,seed,best_epoch,val_f1,final_val_f1,train_f1\na,0,1,0.500000,"));
    }

    #[test]
    fn arm_lists() {
        let (m, t) = (ModelConfig::default(), TrainConfig::default());
        let names: Vec<String> = variant_arms(&m, &t).into_iter().map(|a| a.name).collect();
        assert_eq!(names.len(), 7);
        assert_eq!(names[0], "full");
        let its = iteration_arms(&m, &t, 5);
        assert_eq!(its.len(), 6);
        assert_eq!(its[3].model.net.idet.iterations, 3);
        assert_eq!(loss_arms(&m, &t)[1].train.loss_mode, LossMode::SingleCe);
        assert_eq!(Arm::basic(&m, &t).model.arch, Arch::Basic);
    }
}
