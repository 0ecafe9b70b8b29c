#![allow(dead_code)]

use fabfix::neural::{Architecture, ModelWeights, Tensor4};
use fabfix::raster::{Bitmap, Rect};

/// Largest-magnitude entries checked per block. Central differences at
/// h = 1e-5 carry ~1e-11 absolute roundoff, which only the large entries
/// dominate.
pub const ENTRIES_PER_BLOCK: usize = 6;

pub struct BlockCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel: f64,
}

fn mean_bce(p: &[f64], y: &[f64]) -> f64 {
    let eps = 1e-7;
    let s: f64 = p
        .iter()
        .zip(y)
        .map(|(&p, &y)| {
            let p = p.clamp(eps, 1.0 - eps);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    s / p.len() as f64
}

fn loss(w: &ModelWeights<f64>, x: &Tensor4<f64>, y: &Tensor4<f64>) -> f64 {
    mean_bce(w.forward(x).unwrap().as_slice(), y.as_slice())
}

fn top_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].abs().total_cmp(&values[a].abs()));
    idx.truncate(k);
    idx
}

fn rel(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs())
}

/// Checks every parameter block (step `h`) and the input gradient (step
/// `input_h`) against central differences of an independently computed mean
/// BCE. Input gradients are orders of magnitude smaller than parameter
/// gradients, so their check needs a larger step to stay above roundoff.
pub fn gradcheck(
    arch: Architecture,
    seed: u64,
    batch: usize,
    h: f64,
    input_h: f64,
) -> Vec<BlockCheck> {
    let s = arch.side;
    // Zero biases on binary inputs put whole regions exactly on the ReLU kink,
    // where central differences see a one-sided slope. Nonzero biases and
    // graded inputs move the check point off it.
    let mut w = ModelWeights::<f64>::init(arch, seed).unwrap();
    let bias_blocks: Vec<usize> = w
        .blocks()
        .iter()
        .enumerate()
        .filter(|(_, b)| b.name.ends_with("bias"))
        .map(|(i, _)| i)
        .collect();
    for b in bias_blocks {
        for (j, v) in w.blocks_mut()[b].iter_mut().enumerate() {
            *v = 0.05 * ((j + b) as f64 * 1.7 + 0.3).sin();
        }
    }
    let x = Tensor4::from_fn([batch, s, s, 1], |[i, y, x, _]| {
        let on = f64::from(((x / 3) + (y / 2) * 3 + i) % 4 < 2);
        0.15 + 0.7 * on + 0.01 * ((x * 7 + y * 3) % 5) as f64
    })
    .unwrap();
    let y = Tensor4::from_fn([batch, s, s, 1], |[i, y, x, _]| {
        f64::from((x + 2 * y + i) % 5 < 2)
    })
    .unwrap();
    let (_, grads) = w.loss_and_gradients(&x, &y).unwrap();

    let mut out = Vec::new();
    let names: Vec<String> = w.blocks().iter().map(|b| b.name.clone()).collect();
    let analytic: Vec<Vec<f64>> = grads.blocks().iter().map(|b| b.values.to_vec()).collect();
    for (b, name) in names.iter().enumerate() {
        let mut max_rel: f64 = 0.0;
        let picks = top_indices(&analytic[b], ENTRIES_PER_BLOCK);
        for &i in &picks {
            let eval = |delta: f64| {
                let mut p = w.clone();
                p.blocks_mut()[b][i] += delta;
                loss(&p, &x, &y)
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            max_rel = max_rel.max(rel(analytic[b][i], numeric));
        }
        out.push(BlockCheck {
            name: name.clone(),
            checked: picks.len(),
            max_rel,
        });
    }

    let pass = w.forward_train(&x).unwrap();
    let n = pass.probs.as_slice().len() as f64;
    let g: Vec<f64> = pass
        .probs
        .as_slice()
        .iter()
        .zip(y.as_slice())
        .map(|(p, t)| (p - t) / n)
        .collect();
    let dx = w.backward(&pass, &g, None, true).unwrap().unwrap();
    let picks = top_indices(dx.as_slice(), ENTRIES_PER_BLOCK);
    let mut max_rel: f64 = 0.0;
    for &i in &picks {
        let eval = |delta: f64| {
            let mut xp = x.clone();
            xp.as_mut_slice()[i] += delta;
            loss(&w, &xp, &y)
        };
        let numeric = (eval(input_h) - eval(-input_h)) / (2.0 * input_h);
        max_rel = max_rel.max(rel(dx.as_slice()[i], numeric));
    }
    out.push(BlockCheck {
        name: "input".into(),
        checked: picks.len(),
        max_rel,
    });
    out
}

/// Five-pointed star centered on a `side` canvas.
pub fn star(side: usize, outer: f64, inner: f64, points: usize) -> Bitmap {
    let c = side as f64 / 2.0;
    let verts: Vec<(f64, f64)> = (0..2 * points)
        .map(|i| {
            let a = std::f64::consts::PI * i as f64 / points as f64 - std::f64::consts::FRAC_PI_2;
            let r = if i % 2 == 0 { outer } else { inner };
            (c + r * a.cos(), c + r * a.sin())
        })
        .collect();
    let mut b = Bitmap::zeros(side, side).unwrap();
    b.fill_polygon(&verts, true);
    b
}

/// Plus sign with arms of width `arm` spanning 70% of the canvas.
pub fn thin_cross(side: usize, arm: f64) -> Bitmap {
    let c = side as f64 / 2.0;
    let m = 0.15 * side as f64;
    let far = side as f64 - m;
    let mut b = Bitmap::zeros(side, side).unwrap();
    b.fill_rect(Rect::new(m, c - arm / 2.0, far, c + arm / 2.0));
    b.fill_rect(Rect::new(c - arm / 2.0, m, c + arm / 2.0, far));
    b
}

/// Artifacts of one seeded generate, train and correct run.
#[derive(Debug, PartialEq)]
pub struct PipelineRun {
    pub forward_bytes: Vec<Vec<u8>>,
    pub corrector_bytes: Vec<Vec<u8>>,
    pub correction_pgm: Vec<u8>,
    pub forward_fingerprint_before: String,
    pub forward_fingerprint_after: String,
}

/// A small end-to-end run on 32 px windows: two 96 px patterns, a two-member
/// forward ensemble, a tandem corrector, and a stride-8 correction.
pub fn small_pipeline(seed: u64) -> PipelineRun {
    use fabfix::correct::{InferenceParams, correct_layout};
    use fabfix::fabsim::FabParams;
    use fabfix::neural::{AdamConfig, encode_weights};
    use fabfix::patterns::{PatternSpec, generate_corpus};
    use fabfix::raster::encode_pgm;
    use fabfix::training::{
        DatasetOptions, TrainConfig, Trainer, build_dataset_with, train_ensemble,
    };

    let spec = PatternSpec {
        width: 96,
        height: 96,
        n_shapes: (2, 5),
        feature_size_range: (4, 16),
        seed,
        ..PatternSpec::default()
    };
    let corpus = generate_corpus(&spec, 2).unwrap();
    let fab = FabParams {
        sigma: 1.5,
        edge_noise_amp: 0.02,
        seed,
        ..FabParams::default()
    };
    let options = DatasetOptions {
        patch_size: 32,
        stride: 16,
        split_seed: seed,
        fab_runs: 1,
    };
    let ds = build_dataset_with(&corpus, &fab, &options).unwrap();
    let config = TrainConfig {
        architecture: Architecture::reduced(32).unwrap(),
        batch_size: 8,
        max_epochs: 2,
        patience: 2,
        seed,
        ensemble_size: 2,
        adam: AdamConfig {
            lr: 2e-3,
            ..AdamConfig::default()
        },
        ..TrainConfig::default()
    };
    let forward = train_ensemble(Trainer::Forward, &ds, &config)
        .unwrap()
        .ensemble;
    let before = forward.fingerprint();
    let corrector_config = TrainConfig {
        ensemble_size: 1,
        ..config
    };
    let corrector = train_ensemble(Trainer::InverseTandem(&forward), &ds, &corrector_config)
        .unwrap()
        .ensemble;
    let after = forward.fingerprint();
    let (correction, _) = correct_layout(
        &corpus[0],
        &corrector,
        &InferenceParams::default().with_stride(8),
    )
    .unwrap();
    let bytes = |e: &fabfix::training::Ensemble| {
        e.members()
            .iter()
            .map(|m| encode_weights(m, seed, serde_json::Value::Null))
            .collect()
    };
    PipelineRun {
        forward_bytes: bytes(&forward),
        corrector_bytes: bytes(&corrector),
        correction_pgm: encode_pgm(&correction),
        forward_fingerprint_before: before,
        forward_fingerprint_after: after,
    }
}
