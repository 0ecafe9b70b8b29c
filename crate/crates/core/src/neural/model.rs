//! The fixed encoder/decoder network: four (conv 3x3 -> 2x2 mean pool -> ReLU)
//! stages, a flatten, one dense layer and a per-pixel sigmoid that reshapes
//! back to the input window.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::par;

use super::ops::{
    ConvLayer, KERNEL_SIZE, bce_dlogit, bce_slices, conv_input_grad, conv_param_grads, conv_sample,
    pool_backward_sample, pool_sample, sigmoid_scalar,
};
use super::scalar::{MatRef, gemm_rows_parallel};
use super::{Scalar, Tensor4};

const STAGES: usize = 4;
/// Output rows per dense-layer task.
const DENSE_ROWS_PER_TASK: usize = 1024;
/// Weight rows per task for the dense-layer gradients.
const DENSE_GRAD_ROWS_PER_TASK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    /// Input and output window side in pixels; divisible by 16.
    pub side: usize,
    /// Output channels of the four convolution stages.
    pub channels: [usize; STAGES],
}

impl Default for Architecture {
    fn default() -> Self {
        Self::STANDARD
    }
}

impl Architecture {
    pub const STANDARD: Architecture = Architecture {
        side: 128,
        channels: [8, 8, 16, 16],
    };

    /// Same channel plan on a smaller window, for test harnesses.
    pub fn reduced(side: usize) -> Result<Self> {
        let arch = Self {
            side,
            ..Self::STANDARD
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.side < 16 || !self.side.is_multiple_of(16) {
            return Err(Error::Parameter(format!(
                "window side {} must be a positive multiple of 16",
                self.side
            )));
        }
        if self.channels.contains(&0) {
            return Err(Error::Parameter(format!(
                "channel plan {:?} has an empty stage",
                self.channels
            )));
        }
        Ok(())
    }

    /// `(input side, input channels, output channels)` of stage `l`.
    pub fn stage(&self, l: usize) -> (usize, usize, usize) {
        let cin = if l == 0 { 1 } else { self.channels[l - 1] };
        (self.side >> l, cin, self.channels[l])
    }

    pub fn bottleneck_side(&self) -> usize {
        self.side >> STAGES
    }

    pub fn dense_in(&self) -> usize {
        self.bottleneck_side() * self.bottleneck_side() * self.channels[STAGES - 1]
    }

    pub fn dense_out(&self) -> usize {
        self.side * self.side
    }

    /// Parameter block names and shapes in serialization order.
    pub fn block_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut blocks = Vec::with_capacity(2 * STAGES + 2);
        for l in 0..STAGES {
            let (_, cin, cout) = self.stage(l);
            blocks.push((
                format!("conv{}.kernel", l + 1),
                vec![KERNEL_SIZE, KERNEL_SIZE, cin, cout],
            ));
            blocks.push((format!("conv{}.bias", l + 1), vec![cout]));
        }
        blocks.push((
            "dense.weight".into(),
            vec![self.dense_in(), self.dense_out()],
        ));
        blocks.push(("dense.bias".into(), vec![self.dense_out()]));
        blocks
    }

    pub fn param_count(&self) -> usize {
        self.block_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// Parameters of one network instance. Gradients share this layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights<T = f32> {
    arch: Architecture,
    pub conv: Vec<ConvLayer<T>>,
    /// `dense_in x dense_out`, row-major.
    pub dense_weight: Vec<T>,
    pub dense_bias: Vec<T>,
}

pub type Gradients<T = f32> = ModelWeights<T>;

/// Borrowed view of one named parameter block.
pub struct ParamBlock<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: &'a [T],
}

impl<T: Scalar> ModelWeights<T> {
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let conv = (0..STAGES)
            .map(|l| {
                let (_, cin, cout) = arch.stage(l);
                ConvLayer::zeros(cin, cout)
            })
            .collect();
        let weights = Self {
            arch,
            conv,
            dense_weight: vec![T::zero(); arch.dense_in() * arch.dense_out()],
            dense_bias: vec![T::zero(); arch.dense_out()],
        };
        assert_eq!(weights.param_count(), arch.param_count());
        Ok(weights)
    }

    /// Glorot-uniform weights, zero biases, drawn from `seed`.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        let mut w = Self::zeros(arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let taps = (KERNEL_SIZE * KERNEL_SIZE) as f64;
        for layer in &mut w.conv {
            let limit = (6.0 / (taps * (layer.cin + layer.cout) as f64)).sqrt();
            for v in &mut layer.kernel {
                *v = T::of(rng.random_range(-limit..limit));
            }
        }
        let limit = (6.0 / (arch.dense_in() + arch.dense_out()) as f64).sqrt();
        for v in &mut w.dense_weight {
            *v = T::of(rng.random_range(-limit..limit));
        }
        Ok(w)
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn param_count(&self) -> usize {
        self.blocks().iter().map(|b| b.values.len()).sum()
    }

    pub fn blocks(&self) -> Vec<ParamBlock<'_, T>> {
        let mut values: Vec<&[T]> = Vec::with_capacity(2 * STAGES + 2);
        for layer in &self.conv {
            values.push(&layer.kernel);
            values.push(&layer.bias);
        }
        values.push(&self.dense_weight);
        values.push(&self.dense_bias);
        self.arch
            .block_shapes()
            .into_iter()
            .zip(values)
            .map(|((name, shape), values)| ParamBlock {
                name,
                shape,
                values,
            })
            .collect()
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [T]> {
        let mut values: Vec<&mut [T]> = Vec::with_capacity(2 * STAGES + 2);
        for layer in &mut self.conv {
            values.push(&mut layer.kernel);
            values.push(&mut layer.bias);
        }
        values.push(&mut self.dense_weight);
        values.push(&mut self.dense_bias);
        values
    }

    pub fn cast<U: Scalar>(&self) -> ModelWeights<U> {
        let conv_vec = |v: &[T]| {
            v.iter()
                .map(|x| U::of(x.to_f64().expect("finite")))
                .collect::<Vec<U>>()
        };
        ModelWeights {
            arch: self.arch,
            conv: self
                .conv
                .iter()
                .map(|l| ConvLayer {
                    cin: l.cin,
                    cout: l.cout,
                    kernel: conv_vec(&l.kernel),
                    bias: conv_vec(&l.bias),
                })
                .collect(),
            dense_weight: conv_vec(&self.dense_weight),
            dense_bias: conv_vec(&self.dense_bias),
        }
    }

    /// SHA-256 over the architecture and every parameter's bit pattern.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.arch.side as u64).to_le_bytes());
        for c in self.arch.channels {
            hasher.update((c as u64).to_le_bytes());
        }
        for block in self.blocks() {
            for v in block.values {
                hasher.update(v.to_f64().expect("finite").to_bits().to_le_bytes());
            }
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.blocks()
            .iter()
            .all(|b| b.values.iter().all(|v| v.is_finite()))
    }

    fn check_batch(&self, batch: &Tensor4<T>) -> Result<()> {
        let s = self.arch.side;
        if batch.dims()[1..] != [s, s, 1] {
            return Err(Error::Shape(format!(
                "batch {:?} does not match network input [N, {s}, {s}, 1]",
                batch.dims()
            )));
        }
        Ok(())
    }

    fn encode_sample(&self, input: &[T], mut cache: Option<&mut SampleCache<T>>) -> Vec<T> {
        let mut act = input.to_vec();
        for l in 0..STAGES {
            let (s, _, cout) = self.arch.stage(l);
            let mut conv = vec![T::zero(); s * s * cout];
            conv_sample(&act, s, s, &self.conv[l], &mut conv);
            let mut pooled = vec![T::zero(); (s / 2) * (s / 2) * cout];
            pool_sample(&conv, s, s, cout, &mut pooled);
            for v in &mut pooled {
                if *v <= T::zero() {
                    *v = T::zero();
                }
            }
            if let Some(c) = cache.as_deref_mut() {
                c.inputs.push(std::mem::replace(&mut act, pooled));
                c.acts.push(act.clone());
            } else {
                act = pooled;
            }
        }
        act
    }

    /// Pre-sigmoid outputs, `dense_out x N` (one row per output pixel).
    fn dense_logits_t(&self, features: &[T], n: usize) -> Vec<T> {
        let (din, dout) = (self.arch.dense_in(), self.arch.dense_out());
        let mut z_t = vec![T::zero(); dout * n];
        for (row, &b) in z_t.chunks_exact_mut(n).zip(&self.dense_bias) {
            row.fill(b);
        }
        gemm_rows_parallel(
            MatRef::row_major(&self.dense_weight, din, dout).t(),
            MatRef::row_major(features, n, din).t(),
            T::one(),
            &mut z_t,
            DENSE_ROWS_PER_TASK,
        );
        z_t
    }

    fn probabilities(&self, z_t: &[T], n: usize) -> Result<Tensor4<T>> {
        let s = self.arch.side;
        let dout = self.arch.dense_out();
        let mut probs = vec![T::zero(); n * dout];
        for o in 0..dout {
            for i in 0..n {
                probs[i * dout + o] = sigmoid_scalar(z_t[o * n + i]);
            }
        }
        Tensor4::from_vec([n, s, s, 1], probs)
    }

    /// Per-pixel foreground probabilities for a batch of windows.
    pub fn forward(&self, batch: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.check_batch(batch)?;
        let n = batch.batch();
        let encoded = par::map_indexed(n, |i| self.encode_sample(batch.sample(i), None));
        let features: Vec<T> = encoded.concat();
        let z_t = self.dense_logits_t(&features, n);
        self.probabilities(&z_t, n)
    }

    /// Forward pass retaining what [`ModelWeights::backward`] needs.
    pub fn forward_train(&self, batch: &Tensor4<T>) -> Result<ForwardPass<T>> {
        self.check_batch(batch)?;
        let n = batch.batch();
        let encoded = par::map_indexed(n, |i| {
            let mut cache = SampleCache {
                inputs: Vec::with_capacity(STAGES),
                acts: Vec::with_capacity(STAGES),
            };
            let features = self.encode_sample(batch.sample(i), Some(&mut cache));
            (features, cache)
        });
        let mut features = Vec::with_capacity(n * self.arch.dense_in());
        let mut caches = Vec::with_capacity(n);
        for (f, c) in encoded {
            features.extend_from_slice(&f);
            caches.push(c);
        }
        let z_t = self.dense_logits_t(&features, n);
        let probs = self.probabilities(&z_t, n)?;
        Ok(ForwardPass {
            features,
            caches,
            probs,
        })
    }

    /// Back-propagates `grad_logits` (gradient of the loss with respect to
    /// the pre-sigmoid outputs, sample-major like the batch). Parameter
    /// gradients overwrite `grads` when given; the input gradient is returned
    /// when `want_input` is set.
    pub fn backward(
        &self,
        pass: &ForwardPass<T>,
        grad_logits: &[T],
        grads: Option<&mut Gradients<T>>,
        want_input: bool,
    ) -> Result<Option<Tensor4<T>>> {
        let n = pass.caches.len();
        let (din, dout) = (self.arch.dense_in(), self.arch.dense_out());
        if grad_logits.len() != n * dout {
            return Err(Error::Shape(format!(
                "output gradient has {} values, expected {n}x{dout}",
                grad_logits.len()
            )));
        }
        if let Some(g) = &grads
            && g.arch != self.arch
        {
            return Err(Error::Shape(format!(
                "gradient buffer {:?} vs network {:?}",
                g.arch, self.arch
            )));
        }

        let mut grads = grads;
        if let Some(g) = grads.as_deref_mut() {
            g.dense_bias.fill(T::zero());
            for row in grad_logits.chunks_exact(dout) {
                for (b, &v) in g.dense_bias.iter_mut().zip(row) {
                    *b += v;
                }
            }
            gemm_rows_parallel(
                MatRef::row_major(&pass.features, n, din).t(),
                MatRef::row_major(grad_logits, n, dout),
                T::zero(),
                &mut g.dense_weight,
                DENSE_GRAD_ROWS_PER_TASK,
            );
        }

        let mut d_features_t = vec![T::zero(); din * n];
        gemm_rows_parallel(
            MatRef::row_major(&self.dense_weight, din, dout),
            MatRef::row_major(grad_logits, n, dout).t(),
            T::zero(),
            &mut d_features_t,
            DENSE_GRAD_ROWS_PER_TASK,
        );
        let want_params = grads.is_some();
        let per_sample = par::map_indexed(n, |i| {
            let d_features: Vec<T> = (0..din).map(|j| d_features_t[j * n + i]).collect();
            self.encode_backward(&pass.caches[i], d_features, want_params, want_input)
        });

        if let Some(g) = grads {
            for layer in &mut g.conv {
                layer.kernel.fill(T::zero());
                layer.bias.fill(T::zero());
            }
            for sample in &per_sample {
                for (layer, (dk, db)) in g.conv.iter_mut().zip(&sample.conv) {
                    for (a, &b) in layer.kernel.iter_mut().zip(dk) {
                        *a += b;
                    }
                    for (a, &b) in layer.bias.iter_mut().zip(db) {
                        *a += b;
                    }
                }
            }
        }
        if !want_input {
            return Ok(None);
        }
        let s = self.arch.side;
        let mut input_grad = Vec::with_capacity(n * s * s);
        for sample in per_sample {
            input_grad.extend(sample.input.expect("requested input gradient"));
        }
        Tensor4::from_vec([n, s, s, 1], input_grad).map(Some)
    }

    fn encode_backward(
        &self,
        cache: &SampleCache<T>,
        d_features: Vec<T>,
        want_params: bool,
        want_input: bool,
    ) -> SampleGrads<T> {
        let mut conv_grads = vec![(Vec::new(), Vec::new()); STAGES];
        let mut g = d_features;
        let mut input = None;
        for l in (0..STAGES).rev() {
            let (s, cin, cout) = self.arch.stage(l);
            for (gv, &a) in g.iter_mut().zip(&cache.acts[l]) {
                if a <= T::zero() {
                    *gv = T::zero();
                }
            }
            let mut dy = vec![T::zero(); s * s * cout];
            pool_backward_sample(&g, s, s, cout, &mut dy);
            if want_params {
                conv_grads[l] = conv_param_grads(&cache.inputs[l], &dy, s, s, cin, cout);
            }
            if l > 0 || want_input {
                let mut dx = vec![T::zero(); s * s * cin];
                conv_input_grad(&dy, s, s, &self.conv[l], &mut dx);
                if l == 0 {
                    input = Some(dx);
                } else {
                    g = dx;
                }
            }
        }
        SampleGrads {
            conv: conv_grads,
            input,
        }
    }

    /// Mean clamped BCE of the batch and its exact parameter gradients.
    pub fn loss_and_gradients(
        &self,
        batch: &Tensor4<T>,
        labels: &Tensor4<T>,
    ) -> Result<(f64, Gradients<T>)> {
        let mut grads = Gradients::zeros(self.arch)?;
        let loss = self.loss_and_gradients_into(batch, labels, &mut grads)?;
        Ok((loss, grads))
    }

    /// As [`ModelWeights::loss_and_gradients`], reusing a gradient buffer.
    pub fn loss_and_gradients_into(
        &self,
        batch: &Tensor4<T>,
        labels: &Tensor4<T>,
        grads: &mut Gradients<T>,
    ) -> Result<f64> {
        if batch.dims() != labels.dims() {
            return Err(Error::Shape(format!(
                "batch {:?} and labels {:?} differ",
                batch.dims(),
                labels.dims()
            )));
        }
        let pass = self.forward_train(batch)?;
        let loss = bce_slices(pass.probs.as_slice(), labels.as_slice());
        let grad_logits = bce_logit_gradient(pass.probs.as_slice(), labels.as_slice());
        self.backward(&pass, &grad_logits, Some(grads), false)?;
        Ok(loss)
    }
}

/// Gradient of the mean clamped BCE with respect to the logits.
pub(crate) fn bce_logit_gradient<T: Scalar>(probs: &[T], labels: &[T]) -> Vec<T> {
    let scale = T::one() / T::of(probs.len() as f64);
    probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| bce_dlogit(p, y) * scale)
        .collect()
}

pub(crate) struct SampleCache<T> {
    /// Input of each conv stage.
    inputs: Vec<Vec<T>>,
    acts: Vec<Vec<T>>,
}

struct SampleGrads<T> {
    conv: Vec<(Vec<T>, Vec<T>)>,
    input: Option<Vec<T>>,
}

/// Activations of one training forward pass.
pub struct ForwardPass<T> {
    features: Vec<T>,
    caches: Vec<SampleCache<T>>,
    pub probs: Tensor4<T>,
}

/// Spec-level entry point: exact gradients of the mean BCE.
pub fn backward<T: Scalar>(
    weights: &ModelWeights<T>,
    batch: &Tensor4<T>,
    labels: &Tensor4<T>,
) -> Result<Gradients<T>> {
    weights.loss_and_gradients(batch, labels).map(|(_, g)| g)
}

pub fn forward<T: Scalar>(weights: &ModelWeights<T>, batch: &Tensor4<T>) -> Result<Tensor4<T>> {
    weights.forward(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::ops::{avgpool2, bce, conv2d_forward, relu, sigmoid};

    #[test]
    fn standard_parameter_count() {
        let arch = Architecture::STANDARD;
        assert_eq!(arch.dense_in(), 8 * 8 * 16);
        let conv: usize = 9 * (8 + 8 * 8 + 8 * 16 + 16 * 16) + (8 + 8 + 16 + 16);
        let dense = 1024 * 16384 + 16384;
        assert_eq!(arch.param_count(), conv + dense);
        assert_eq!(
            ModelWeights::<f32>::zeros(arch).unwrap().param_count(),
            conv + dense
        );
    }

    #[test]
    fn invalid_architectures_rejected() {
        assert!(Architecture::reduced(24).is_err());
        assert!(Architecture::reduced(8).is_err());
        assert!(Architecture::reduced(32).is_ok());
    }

    #[test]
    fn zero_weights_give_one_half() {
        let w = ModelWeights::<f32>::zeros(Architecture::reduced(32).unwrap()).unwrap();
        let batch =
            Tensor4::from_fn([3, 32, 32, 1], |[i, y, x, _]| ((i + x * y) % 2) as f32).unwrap();
        let out = w.forward(&batch).unwrap();
        assert_eq!(out.dims(), batch.dims());
        assert!(out.as_slice().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn matches_layer_by_layer_composition() {
        let arch = Architecture::reduced(32).unwrap();
        let w = ModelWeights::<f64>::init(arch, 5).unwrap();
        let batch = Tensor4::from_fn([2, 32, 32, 1], |[i, y, x, _]| {
            ((x * 3 + y * 5 + i) % 7) as f64 / 6.0
        })
        .unwrap();
        let fast = w.forward(&batch).unwrap();

        let mut act = batch.clone();
        for layer in &w.conv {
            act = relu(&avgpool2(&conv2d_forward(&act, layer).unwrap()).unwrap());
        }
        let (din, dout) = (arch.dense_in(), arch.dense_out());
        for i in 0..2 {
            let feat = act.sample(i);
            for o in 0..dout {
                let mut z = w.dense_bias[o];
                for j in 0..din {
                    z += feat[j] * w.dense_weight[j * dout + o];
                }
                let p = sigmoid(&Tensor4::from_vec([1, 1, 1, 1], vec![z]).unwrap()).as_slice()[0];
                assert!((fast.as_slice()[i * dout + o] - p).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn outputs_strictly_inside_unit_interval_and_deterministic() {
        let w = ModelWeights::<f32>::init(Architecture::reduced(32).unwrap(), 9).unwrap();
        let batch = Tensor4::from_fn([2, 32, 32, 1], |[_, y, x, _]| f32::from(x > y)).unwrap();
        let a = w.forward(&batch).unwrap();
        let b = w.forward(&batch).unwrap();
        assert!(a.as_slice().iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(a.as_slice(), b.as_slice());
    }

    #[test]
    fn rejects_wrong_window() {
        let w = ModelWeights::<f32>::zeros(Architecture::reduced(32).unwrap()).unwrap();
        let batch = Tensor4::<f32>::zeros([1, 16, 16, 1]).unwrap();
        assert!(matches!(w.forward(&batch), Err(Error::Shape(_))));
    }

    #[test]
    fn duplicated_batch_keeps_mean_gradient() {
        let arch = Architecture::reduced(16).unwrap();
        let w = ModelWeights::<f64>::init(arch, 2).unwrap();
        let x = Tensor4::from_fn([2, 16, 16, 1], |[i, y, x, _]| {
            f64::from((x + y + i) % 3 == 0)
        })
        .unwrap();
        let y = Tensor4::from_fn([2, 16, 16, 1], |[i, y, x, _]| {
            f64::from((x * y + i) % 2 == 0)
        })
        .unwrap();
        let (loss1, g1) = w.loss_and_gradients(&x, &y).unwrap();
        let dup = |t: &Tensor4<f64>| {
            let mut v = t.as_slice().to_vec();
            v.extend_from_slice(t.as_slice());
            Tensor4::from_vec([4, 16, 16, 1], v).unwrap()
        };
        let (loss2, g2) = w.loss_and_gradients(&dup(&x), &dup(&y)).unwrap();
        assert!((loss1 - loss2).abs() < 1e-12);
        for (a, b) in g1.blocks().iter().zip(g2.blocks()) {
            for (p, q) in a.values.iter().zip(b.values) {
                assert!((p - q).abs() < 1e-12, "{}", a.name);
            }
        }
        assert!((bce(&w.forward(&x).unwrap(), &y).unwrap() - loss1).abs() < 1e-12);
    }

    #[test]
    fn saturated_predictions_have_zero_gradient() {
        // a huge dense bias pins every output at the clamp
        let arch = Architecture::reduced(16).unwrap();
        let mut w = ModelWeights::<f64>::init(arch, 4).unwrap();
        w.dense_bias.iter_mut().for_each(|b| *b = 60.0);
        let x = Tensor4::from_fn([1, 16, 16, 1], |[_, y, _, _]| f64::from(y < 8)).unwrap();
        let ones = Tensor4::from_vec([1, 16, 16, 1], vec![1.0; 256]).unwrap();
        let (loss, g) = w.loss_and_gradients(&x, &ones).unwrap();
        assert!(loss < 1e-6);
        for b in g.blocks() {
            assert!(b.values.iter().all(|&v| v.abs() < 1e-12), "{}", b.name);
        }
    }

    #[test]
    fn fingerprint_tracks_values() {
        let arch = Architecture::reduced(16).unwrap();
        let a = ModelWeights::<f32>::init(arch, 1).unwrap();
        let mut b = a.clone();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.conv[2].bias[0] = 1e-6;
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_ne!(
            a.fingerprint(),
            ModelWeights::<f32>::init(arch, 2).unwrap().fingerprint()
        );
    }
}
