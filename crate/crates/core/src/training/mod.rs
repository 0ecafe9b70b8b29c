//! Dataset assembly and the training regimes: forward predictor, independent
//! inverse corrector, tandem inverse corrector, and ensembles of each.

mod dataset;
mod ensemble;

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::{
    AdamConfig, AdamState, Architecture, Gradients, ModelWeights, Scalar, Tensor4, adam_step,
    bce_dprob, bce_slices,
};

pub use dataset::{Dataset, DatasetOptions, Direction, Split, build_dataset, build_dataset_with};
pub use ensemble::{Ensemble, Predictor, Role};

/// Windows per evaluation batch.
const EVAL_BATCH: usize = 64;

/// Salt separating the ordering stream from the initialization stream.
const ORDER_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub architecture: Architecture,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a test-BCE improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub dataset_stride: usize,
    pub ensemble_size: usize,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::STANDARD,
            batch_size: 32,
            max_epochs: 100,
            patience: 10,
            seed: 0,
            dataset_stride: 32,
            ensemble_size: 10,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.architecture.validate()?;
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
            ("patience", self.patience),
            ("dataset_stride", self.dataset_stride),
            ("ensemble_size", self.ensemble_size),
        ] {
            if v == 0 {
                return Err(Error::Parameter(format!("{name} must be >= 1")));
            }
        }
        let a = &self.adam;
        if !(a.lr > 0.0
            && a.eps > 0.0
            && (0.0..1.0).contains(&a.beta1)
            && (0.0..1.0).contains(&a.beta2))
        {
            return Err(Error::Parameter(format!("invalid Adam settings {a:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_bce: f64,
    pub test_bce: f64,
}

/// Result of one training run: the best-test-BCE weights and the history.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub weights: ModelWeights<f32>,
    pub report: TrainReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_test_bce: f64,
}

impl TrainReport {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("report serializes")
    }
}

/// `epoch,train_bce,test_bce` lines, optionally prefixed by a member column.
pub fn history_csv(reports: &[TrainReport]) -> String {
    let mut out = String::from("member,seed,epoch,train_bce,test_bce\n");
    for (m, r) in reports.iter().enumerate() {
        for e in &r.history {
            out.push_str(&format!(
                "{m},{},{},{:.6},{:.6}\n",
                r.seed, e.epoch, e.train_bce, e.test_bce
            ));
        }
    }
    out
}

pub fn write_history_csv(reports: &[TrainReport], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(history_csv(reports).as_bytes())
        .map_err(|e| Error::io(path, e))
}

/// Mean BCE of the predictor's outputs against the labels of `indices`.
pub fn mean_bce<P: Predictor + ?Sized>(
    model: &P,
    dataset: &Dataset,
    indices: &[usize],
    direction: Direction,
) -> Result<f64> {
    check_window(model.window(), dataset)?;
    if indices.is_empty() {
        return Err(Error::Parameter("no pairs to evaluate".into()));
    }
    let mut total = 0.0;
    for chunk in indices.chunks(EVAL_BATCH) {
        let (x, y) = dataset.batch(chunk, direction)?;
        let p = model.predict(&x)?;
        total += bce_slices(p.as_slice(), y.as_slice()) * chunk.len() as f64;
    }
    Ok(total / indices.len() as f64)
}

/// Mean of BCE(forward(corrector(fab)), fab): how well the predicted outcome
/// of a correction reproduces the target.
pub fn tandem_bce<C: Predictor + ?Sized, F: Predictor + ?Sized>(
    corrector: &C,
    forward: &F,
    dataset: &Dataset,
    indices: &[usize],
) -> Result<f64> {
    check_window(corrector.window(), dataset)?;
    check_window(forward.window(), dataset)?;
    if indices.is_empty() {
        return Err(Error::Parameter("no pairs to evaluate".into()));
    }
    let mut total = 0.0;
    for chunk in indices.chunks(EVAL_BATCH) {
        let (x, _) = dataset.batch(chunk, Direction::Inverse)?;
        let outcome = forward.predict(&corrector.predict(&x)?)?;
        total += bce_slices(outcome.as_slice(), x.as_slice()) * chunk.len() as f64;
    }
    Ok(total / indices.len() as f64)
}

fn check_window(window: usize, dataset: &Dataset) -> Result<()> {
    if window != dataset.patch_size() {
        return Err(Error::Shape(format!(
            "model window {window} does not match dataset windows of {}",
            dataset.patch_size()
        )));
    }
    Ok(())
}

/// One of the three training regimes.
#[derive(Clone, Copy, Debug)]
pub enum Trainer<'a> {
    /// Layout in, fabricated label.
    Forward,
    /// Fabricated in, layout label.
    InverseIndependent,
    /// Fabricated in, loss taken after the frozen forward ensemble.
    InverseTandem(&'a Ensemble),
}

impl Trainer<'_> {
    pub fn role(&self) -> Role {
        match self {
            Trainer::Forward => Role::Forward,
            _ => Role::Corrector,
        }
    }

    pub fn train(&self, dataset: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
        self.train_seeded(dataset, config, config.seed, &|_| {})
    }

    /// Trains one model with `seed` for both initialization and ordering,
    /// calling `progress` after every epoch.
    pub fn train_seeded(
        &self,
        dataset: &Dataset,
        config: &TrainConfig,
        seed: u64,
        progress: &dyn Fn(&EpochRecord),
    ) -> Result<TrainOutcome> {
        config.validate()?;
        check_window(config.architecture.side, dataset)?;
        if dataset.indices(Split::Train).is_empty() {
            return Err(Error::Parameter("the training split is empty".into()));
        }
        match self {
            Trainer::InverseTandem(forward) => {
                if forward.role() != Role::Forward {
                    return Err(Error::Parameter(
                        "tandem training needs a forward ensemble".into(),
                    ));
                }
                check_window(forward.window(), dataset)?;
                let before = forward.fingerprint();
                let out = run(self, dataset, config, seed, progress);
                if forward.fingerprint() != before {
                    return Err(Error::Invariant(
                        "forward ensemble changed during tandem training".into(),
                    ));
                }
                out
            }
            _ => run(self, dataset, config, seed, progress),
        }
    }

    fn evaluate(
        &self,
        weights: &ModelWeights<f32>,
        dataset: &Dataset,
        indices: &[usize],
    ) -> Result<f64> {
        match self {
            Trainer::Forward => mean_bce(weights, dataset, indices, Direction::Forward),
            Trainer::InverseIndependent => mean_bce(weights, dataset, indices, Direction::Inverse),
            Trainer::InverseTandem(forward) => tandem_bce(weights, *forward, dataset, indices),
        }
    }

    /// Loss of one mini-batch, with the parameter gradients written to `grads`.
    fn step(
        &self,
        weights: &ModelWeights<f32>,
        dataset: &Dataset,
        batch: &[usize],
        grads: &mut Gradients<f32>,
    ) -> Result<f64> {
        match self {
            Trainer::Forward => {
                let (x, y) = dataset.batch(batch, Direction::Forward)?;
                weights.loss_and_gradients_into(&x, &y, grads)
            }
            Trainer::InverseIndependent => {
                let (x, y) = dataset.batch(batch, Direction::Inverse)?;
                weights.loss_and_gradients_into(&x, &y, grads)
            }
            Trainer::InverseTandem(forward) => {
                let (x, _) = dataset.batch(batch, Direction::Inverse)?;
                tandem_step(weights, forward.members(), &x, grads)
            }
        }
    }
}

/// Loss BCE(mean_j F_j(C(x)), x) and its gradient with respect to the
/// corrector's parameters, back-propagated through the frozen members.
pub fn tandem_loss_and_gradients<T: Scalar>(
    corrector: &ModelWeights<T>,
    forward: &[ModelWeights<T>],
    x: &Tensor4<T>,
) -> Result<(f64, Gradients<T>)> {
    let mut g = Gradients::zeros(corrector.architecture())?;
    let loss = tandem_step(corrector, forward, x, &mut g)?;
    Ok((loss, g))
}

fn tandem_step<T: Scalar>(
    corrector: &ModelWeights<T>,
    forward: &[ModelWeights<T>],
    x: &Tensor4<T>,
    grads: &mut Gradients<T>,
) -> Result<f64> {
    if forward.is_empty() {
        return Err(Error::Parameter(
            "tandem training needs at least one forward member".into(),
        ));
    }
    let c_pass = corrector.forward_train(x)?;
    let c = &c_pass.probs;
    let passes = forward
        .iter()
        .map(|m| m.forward_train(c))
        .collect::<Result<Vec<_>>>()?;
    let k = T::of(passes.len() as f64);
    let n = x.as_slice().len();
    let mut p = vec![T::zero(); n];
    for pass in &passes {
        for (a, &b) in p.iter_mut().zip(pass.probs.as_slice()) {
            *a += b;
        }
    }
    for v in &mut p {
        *v = *v / k;
    }
    let loss = bce_slices(&p, x.as_slice());
    let scale = T::one() / (T::of(n as f64) * k);
    let d_mean: Vec<T> = p
        .iter()
        .zip(x.as_slice())
        .map(|(&p, &y)| bce_dprob(p, y) * scale)
        .collect();

    let mut dc = vec![T::zero(); n];
    for (member, pass) in forward.iter().zip(&passes) {
        let g: Vec<T> = d_mean
            .iter()
            .zip(pass.probs.as_slice())
            .map(|(&d, &q)| (d * q * (T::one() - q)).flush())
            .collect();
        let input_grad = member
            .backward(pass, &g, None, true)?
            .expect("input gradient requested");
        for (a, &b) in dc.iter_mut().zip(input_grad.as_slice()) {
            *a += b;
        }
    }
    let g_logits: Vec<T> = dc
        .iter()
        .zip(c.as_slice())
        .map(|(&d, &q)| (d * q * (T::one() - q)).flush())
        .collect();
    corrector.backward(&c_pass, &g_logits, Some(grads), false)?;
    Ok(loss)
}

struct Best {
    epoch: usize,
    bce: f64,
    weights: ModelWeights<f32>,
}

fn run(
    trainer: &Trainer<'_>,
    dataset: &Dataset,
    config: &TrainConfig,
    seed: u64,
    progress: &dyn Fn(&EpochRecord),
) -> Result<TrainOutcome> {
    let arch = config.architecture;
    let mut weights = ModelWeights::<f32>::init(arch, seed)?;
    let mut adam = AdamState::new(&weights, config.adam)?;
    let mut grads = Gradients::<f32>::zeros(arch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ORDER_SALT);
    let train = dataset.indices(Split::Train);
    // with fewer than five pairs there is no held-out split; fall back to train
    let held_out = match dataset.indices(Split::Test) {
        [] => train,
        test => test,
    };

    let mut history = Vec::new();
    let mut best: Option<Best> = None;
    let mut order = train.to_vec();
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let loss = trainer.step(&weights, dataset, batch, &mut grads)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    message: format!("training loss {loss}"),
                });
            }
            adam_step(&mut weights, &grads, &mut adam).map_err(|e| match e {
                Error::Optimizer { block, message } => Error::Diverged {
                    epoch,
                    message: format!("{block}: {message}"),
                },
                other => other,
            })?;
            sum += loss * batch.len() as f64;
        }
        let test_bce = trainer.evaluate(&weights, dataset, held_out)?;
        if !test_bce.is_finite() {
            return Err(Error::Diverged {
                epoch,
                message: format!("test loss {test_bce}"),
            });
        }
        let record = EpochRecord {
            epoch,
            train_bce: sum / order.len() as f64,
            test_bce,
        };
        history.push(record);
        progress(&record);

        match &mut best {
            Some(b) if test_bce >= b.bce => {
                if epoch - b.epoch >= config.patience {
                    break;
                }
            }
            _ => {
                best = Some(Best {
                    epoch,
                    bce: test_bce,
                    weights: weights.clone(),
                })
            }
        }
    }
    let best = best.expect("at least one epoch");
    Ok(TrainOutcome {
        weights: best.weights,
        report: TrainReport {
            seed,
            history,
            best_epoch: best.epoch,
            best_test_bce: best.bce,
        },
    })
}

pub fn train_forward(dataset: &Dataset, config: &TrainConfig) -> Result<ModelWeights<f32>> {
    Trainer::Forward.train(dataset, config).map(|o| o.weights)
}

pub fn train_inverse_independent(
    dataset: &Dataset,
    config: &TrainConfig,
) -> Result<ModelWeights<f32>> {
    Trainer::InverseIndependent
        .train(dataset, config)
        .map(|o| o.weights)
}

pub fn train_inverse_tandem(
    dataset: &Dataset,
    forward: &Ensemble,
    config: &TrainConfig,
) -> Result<ModelWeights<f32>> {
    Trainer::InverseTandem(forward)
        .train(dataset, config)
        .map(|o| o.weights)
}

#[derive(Clone, Debug)]
pub struct EnsembleOutcome {
    pub ensemble: Ensemble,
    pub reports: Vec<TrainReport>,
}

/// Trains `ensemble_size` members with seeds `seed..seed + size`.
pub fn train_ensemble(
    trainer: Trainer<'_>,
    dataset: &Dataset,
    config: &TrainConfig,
) -> Result<EnsembleOutcome> {
    train_ensemble_with_progress(trainer, dataset, config, &|_, _| {})
}

/// As [`train_ensemble`], reporting `(member, record)` after every epoch.
pub fn train_ensemble_with_progress(
    trainer: Trainer<'_>,
    dataset: &Dataset,
    config: &TrainConfig,
    progress: &dyn Fn(usize, &EpochRecord),
) -> Result<EnsembleOutcome> {
    config.validate()?;
    let mut members = Vec::with_capacity(config.ensemble_size);
    let mut reports = Vec::with_capacity(config.ensemble_size);
    for m in 0..config.ensemble_size {
        let seed = config.seed.wrapping_add(m as u64);
        let out = trainer.train_seeded(dataset, config, seed, &|r| progress(m, r))?;
        members.push(out.weights);
        reports.push(out.report);
    }
    Ok(EnsembleOutcome {
        ensemble: Ensemble::new(trainer.role(), members)?,
        reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fabsim::FabParams;
    use crate::patterns::{PatternSpec, generate_pattern};
    use crate::raster::Bitmap;

    fn small_corpus(side: usize, n: usize) -> Vec<Bitmap> {
        (0..n as u64)
            .map(|seed| {
                let spec = PatternSpec {
                    width: side,
                    height: side,
                    n_shapes: (2, 4),
                    feature_size_range: (4, 12),
                    seed,
                    ..PatternSpec::default()
                };
                generate_pattern(&spec).unwrap()
            })
            .collect()
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            architecture: Architecture::reduced(32).unwrap(),
            batch_size: 8,
            max_epochs: 3,
            patience: 2,
            ensemble_size: 2,
            adam: AdamConfig {
                lr: 3e-3,
                ..AdamConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    fn small_dataset() -> Dataset {
        let options = DatasetOptions {
            patch_size: 32,
            stride: 8,
            ..DatasetOptions::default()
        };
        build_dataset_with(&small_corpus(64, 2), &FabParams::default(), &options).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            patience: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Parameter(_))));
    }

    #[test]
    fn seeded_runs_are_bitwise_identical() {
        let ds = small_dataset();
        let cfg = small_config();
        let a = Trainer::Forward.train(&ds, &cfg).unwrap();
        let b = Trainer::Forward.train(&ds, &cfg).unwrap();
        assert_eq!(a.weights.fingerprint(), b.weights.fingerprint());
        assert_eq!(a.report, b.report);
        let c = Trainer::Forward
            .train(&ds, &TrainConfig { seed: 1, ..cfg })
            .unwrap();
        assert_ne!(a.weights.fingerprint(), c.weights.fingerprint());
    }

    #[test]
    fn best_epoch_weights_are_returned() {
        let ds = small_dataset();
        let cfg = small_config();
        let out = Trainer::InverseIndependent.train(&ds, &cfg).unwrap();
        let min = out
            .report
            .history
            .iter()
            .map(|r| r.test_bce)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(out.report.best_test_bce, min);
        let held_out = ds.indices(Split::Test);
        let again = mean_bce(&out.weights, &ds, held_out, Direction::Inverse).unwrap();
        assert!((again - min).abs() < 1e-9);
    }

    #[test]
    fn overfits_a_single_batch() {
        let options = DatasetOptions {
            patch_size: 32,
            stride: 32,
            ..DatasetOptions::default()
        };
        let ds = build_dataset_with(&small_corpus(64, 1), &FabParams::default(), &options).unwrap();
        assert_eq!(ds.len(), 4);
        let batch = [0, 1, 2, 3];
        let (x, y) = ds.batch(&batch, Direction::Forward).unwrap();
        let mut w = ModelWeights::<f32>::init(Architecture::reduced(32).unwrap(), 3).unwrap();
        let mut adam = AdamState::new(&w, AdamConfig::default()).unwrap();
        let mut loss = f64::INFINITY;
        for _ in 0..2000 {
            let (l, g) = w.loss_and_gradients(&x, &y).unwrap();
            loss = l;
            if loss < 0.01 {
                break;
            }
            adam_step(&mut w, &g, &mut adam).unwrap();
        }
        assert!(loss < 0.01, "loss {loss}");
    }

    #[test]
    fn tandem_leaves_forward_untouched() {
        let ds = small_dataset();
        let cfg = TrainConfig {
            ensemble_size: 1,
            max_epochs: 2,
            ..small_config()
        };
        let forward = train_ensemble(Trainer::Forward, &ds, &cfg)
            .unwrap()
            .ensemble;
        let before = forward.fingerprint();
        let out = Trainer::InverseTandem(&forward).train(&ds, &cfg).unwrap();
        assert_eq!(forward.fingerprint(), before);
        assert!(out.report.best_test_bce.is_finite());
    }

    #[test]
    fn tandem_rejects_corrector_ensemble() {
        let ds = small_dataset();
        let cfg = small_config();
        let w = ModelWeights::<f32>::init(cfg.architecture, 0).unwrap();
        let wrong = Ensemble::new(Role::Corrector, vec![w]).unwrap();
        assert!(matches!(
            Trainer::InverseTandem(&wrong).train(&ds, &cfg),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn ensemble_members_use_consecutive_seeds() {
        let ds = small_dataset();
        let cfg = TrainConfig {
            max_epochs: 1,
            ..small_config()
        };
        let out = train_ensemble(Trainer::Forward, &ds, &cfg).unwrap();
        assert_eq!(out.ensemble.len(), 2);
        assert_eq!(
            out.reports.iter().map(|r| r.seed).collect::<Vec<_>>(),
            vec![0, 1]
        );
        assert_ne!(
            out.ensemble.members()[0].fingerprint(),
            out.ensemble.members()[1].fingerprint()
        );
        let single = Trainer::Forward
            .train(&ds, &TrainConfig { seed: 1, ..cfg })
            .unwrap();
        assert_eq!(single.weights, out.ensemble.members()[1]);
        let csv = history_csv(&out.reports);
        assert!(csv.starts_with("member,seed,epoch,train_bce,test_bce\n"));
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn constant_predictor_bce_is_ln2() {
        struct Half;
        impl Predictor for Half {
            fn window(&self) -> usize {
                32
            }
            fn predict(&self, batch: &Tensor4<f32>) -> Result<Tensor4<f32>> {
                Ok(batch.map(|_| 0.5))
            }
        }
        let ds = small_dataset();
        let bce = mean_bce(&Half, &ds, ds.indices(Split::Test), Direction::Forward).unwrap();
        assert!((bce - std::f64::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn tandem_gradient_matches_finite_differences() {
        let arch = Architecture::reduced(16).unwrap();
        let corrector = ModelWeights::<f64>::init(arch, 5).unwrap();
        let forward = [
            ModelWeights::<f64>::init(arch, 6).unwrap(),
            ModelWeights::<f64>::init(arch, 7).unwrap(),
        ];
        let x = Tensor4::from_fn([2, 16, 16, 1], |[i, y, x, _]| {
            f64::from((x * 3 + y + i) % 5 < 2)
        })
        .unwrap();
        let (_, g) = tandem_loss_and_gradients(&corrector, &forward, &x).unwrap();
        // gradients through two frozen networks are ~1e-7 at init, so a wider
        // step keeps the loss roundoff well below them
        let h = 1e-3;
        let mut order: Vec<usize> = (0..g.dense_bias.len()).collect();
        order.sort_by(|&a, &b| g.dense_bias[b].abs().total_cmp(&g.dense_bias[a].abs()));
        for &idx in &order[..3] {
            let eval = |delta: f64| {
                let mut c = corrector.clone();
                c.dense_bias[idx] += delta;
                tandem_loss_and_gradients(&c, &forward, &x).unwrap().0
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let analytic = g.dense_bias[idx];
            assert!(
                (numeric - analytic).abs() <= 1e-4 * analytic.abs(),
                "{numeric} vs {analytic}"
            );
        }
    }
}
