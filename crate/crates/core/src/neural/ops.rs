//! Layer primitives. The per-sample kernels operate on HWC slices and are
//! shared by the public tensor ops and the model's batched passes.

use crate::error::{Error, Result};

use super::{Scalar, Tensor4};

pub const KERNEL_SIZE: usize = 3;
const PAD: isize = (KERNEL_SIZE / 2) as isize;

/// Probability clamp applied before taking logarithms in the loss.
pub const BCE_CLAMP: f64 = 1e-7;

/// 3x3 convolution parameters; the kernel is stored `[ky][kx][cin][cout]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T> {
    pub cin: usize,
    pub cout: usize,
    pub kernel: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> ConvLayer<T> {
    pub fn zeros(cin: usize, cout: usize) -> Self {
        Self {
            cin,
            cout,
            kernel: vec![T::zero(); KERNEL_SIZE * KERNEL_SIZE * cin * cout],
            bias: vec![T::zero(); cout],
        }
    }

    pub fn kernel_shape(&self) -> [usize; 4] {
        [KERNEL_SIZE, KERNEL_SIZE, self.cin, self.cout]
    }

    #[inline]
    pub fn weight(&self, ky: usize, kx: usize, ci: usize, co: usize) -> T {
        self.kernel[((ky * KERNEL_SIZE + kx) * self.cin + ci) * self.cout + co]
    }

    fn check_shapes(&self) -> Result<()> {
        if self.kernel.len() != KERNEL_SIZE * KERNEL_SIZE * self.cin * self.cout
            || self.bias.len() != self.cout
        {
            return Err(Error::Shape(format!(
                "conv layer {:?} holds {} kernel and {} bias values",
                self.kernel_shape(),
                self.kernel.len(),
                self.bias.len()
            )));
        }
        Ok(())
    }
}

/// In-bounds tap offsets `lo..hi` along one axis for output coordinate `i`.
#[inline]
fn tap_range(i: usize, n: usize) -> (usize, usize) {
    (
        usize::from(i == 0),
        if i + 1 == n {
            KERNEL_SIZE - 1
        } else {
            KERNEL_SIZE
        },
    )
}

/// Visits every in-bounds `(output pixel, tap, source pixel)` triple in a
/// fixed order.
#[inline]
fn for_each_tap(h: usize, w: usize, mut f: impl FnMut(usize, usize, usize)) {
    for y in 0..h {
        let (ky0, ky1) = tap_range(y, h);
        for x in 0..w {
            let (kx0, kx1) = tap_range(x, w);
            let px = y * w + x;
            for ky in ky0..ky1 {
                let sy = y + ky - PAD as usize;
                for kx in kx0..kx1 {
                    f(px, ky * KERNEL_SIZE + kx, sy * w + x + kx - PAD as usize);
                }
            }
        }
    }
}

/// Same-padded 3x3 convolution of one `h x w x cin` sample.
pub(crate) fn conv_sample<T: Scalar>(
    input: &[T],
    h: usize,
    w: usize,
    layer: &ConvLayer<T>,
    out: &mut [T],
) {
    match layer.cout {
        1 => conv_sample_fixed::<T, 1>(input, h, w, layer, out),
        8 => conv_sample_fixed::<T, 8>(input, h, w, layer, out),
        16 => conv_sample_fixed::<T, 16>(input, h, w, layer, out),
        _ => conv_sample_any(input, h, w, layer, out),
    }
}

/// [`conv_sample`] with the output channel count known at compile time, so
/// the per-pixel accumulator stays in registers. Same summation order as
/// [`conv_sample_any`].
fn conv_sample_fixed<T: Scalar, const N: usize>(
    input: &[T],
    h: usize,
    w: usize,
    layer: &ConvLayer<T>,
    out: &mut [T],
) {
    let cin = layer.cin;
    let bias: [T; N] = layer.bias[..].try_into().expect("bias length matches cout");
    for y in 0..h {
        let (ky0, ky1) = tap_range(y, h);
        for x in 0..w {
            let (kx0, kx1) = tap_range(x, w);
            let mut acc = bias;
            for ky in ky0..ky1 {
                let sy = y + ky - PAD as usize;
                for kx in kx0..kx1 {
                    let src = (sy * w + x + kx - PAD as usize) * cin;
                    let k = &layer.kernel[(ky * KERNEL_SIZE + kx) * cin * N..][..cin * N];
                    for (&v, row) in input[src..src + cin].iter().zip(k.chunks_exact(N)) {
                        for j in 0..N {
                            acc[j] += v * row[j];
                        }
                    }
                }
            }
            out[(y * w + x) * N..][..N].copy_from_slice(&acc);
        }
    }
}

fn conv_sample_any<T: Scalar>(
    input: &[T],
    h: usize,
    w: usize,
    layer: &ConvLayer<T>,
    out: &mut [T],
) {
    let (cin, cout) = (layer.cin, layer.cout);
    for px in out.chunks_exact_mut(cout) {
        px.copy_from_slice(&layer.bias);
    }
    for_each_tap(h, w, |px, tap, src| {
        let acc = &mut out[px * cout..(px + 1) * cout];
        let k = &layer.kernel[tap * cin * cout..(tap + 1) * cin * cout];
        for (&v, row) in input[src * cin..(src + 1) * cin]
            .iter()
            .zip(k.chunks_exact(cout))
        {
            for (a, &kv) in acc.iter_mut().zip(row) {
                *a += v * kv;
            }
        }
    });
}

/// Kernel and bias gradients of [`conv_sample`] given the output gradient.
pub(crate) fn conv_param_grads<T: Scalar>(
    input: &[T],
    dy: &[T],
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
) -> (Vec<T>, Vec<T>) {
    let mut dk = vec![T::zero(); KERNEL_SIZE * KERNEL_SIZE * cin * cout];
    let mut db = vec![T::zero(); cout];
    for g in dy.chunks_exact(cout) {
        for (b, &v) in db.iter_mut().zip(g) {
            *b += v;
        }
    }
    let rows = dk.chunks_exact_mut(cout).enumerate();
    match cout {
        8 => rows.for_each(|(r, row)| {
            row.copy_from_slice(&kernel_row_grad::<T, 8>(input, dy, h, w, cin, r))
        }),
        16 => rows.for_each(|(r, row)| {
            row.copy_from_slice(&kernel_row_grad::<T, 16>(input, dy, h, w, cin, r))
        }),
        _ => rows.for_each(|(r, row)| kernel_row_grad_any(input, dy, h, w, cin, r, row)),
    }
    (dk, db)
}

/// Output pixels `lo..hi` along one axis whose tap offset `k` stays in bounds.
#[inline]
fn valid_range(k: usize, n: usize) -> (usize, usize) {
    (
        PAD as usize - k.min(PAD as usize),
        (n + PAD as usize - k).min(n),
    )
}

/// Gradient of kernel row `r` (tap `r / cin`, input channel `r % cin`),
/// accumulated over all output pixels.
fn kernel_row_grad<T: Scalar, const N: usize>(
    input: &[T],
    dy: &[T],
    h: usize,
    w: usize,
    cin: usize,
    r: usize,
) -> [T; N] {
    let (tap, ci) = (r / cin, r % cin);
    let (ky, kx) = (tap / KERNEL_SIZE, tap % KERNEL_SIZE);
    let (y0, y1) = valid_range(ky, h);
    let (x0, x1) = valid_range(kx, w);
    let mut acc = [T::zero(); N];
    for y in y0..y1 {
        let sy = y + ky - PAD as usize;
        for x in x0..x1 {
            let v = input[(sy * w + x + kx - PAD as usize) * cin + ci];
            let g = &dy[(y * w + x) * N..][..N];
            for j in 0..N {
                acc[j] += v * g[j];
            }
        }
    }
    acc
}

fn kernel_row_grad_any<T: Scalar>(
    input: &[T],
    dy: &[T],
    h: usize,
    w: usize,
    cin: usize,
    r: usize,
    out: &mut [T],
) {
    let cout = out.len();
    let (tap, ci) = (r / cin, r % cin);
    let (ky, kx) = (tap / KERNEL_SIZE, tap % KERNEL_SIZE);
    let (y0, y1) = valid_range(ky, h);
    let (x0, x1) = valid_range(kx, w);
    for y in y0..y1 {
        let sy = y + ky - PAD as usize;
        for x in x0..x1 {
            let v = input[(sy * w + x + kx - PAD as usize) * cin + ci];
            for (o, &g) in out
                .iter_mut()
                .zip(&dy[(y * w + x) * cout..(y * w + x + 1) * cout])
            {
                *o += v * g;
            }
        }
    }
}

/// Input gradient of [`conv_sample`] given the output gradient: a same-padded
/// convolution of `dy` with the spatially flipped, channel-transposed kernel.
pub(crate) fn conv_input_grad<T: Scalar>(
    dy: &[T],
    h: usize,
    w: usize,
    layer: &ConvLayer<T>,
    dx: &mut [T],
) {
    let (cin, cout) = (layer.cin, layer.cout);
    let taps = KERNEL_SIZE * KERNEL_SIZE;
    let mut adjoint = ConvLayer::zeros(cout, cin);
    for tap in 0..taps {
        for ci in 0..cin {
            for co in 0..cout {
                adjoint.kernel[((taps - 1 - tap) * cout + co) * cin + ci] =
                    layer.kernel[(tap * cin + ci) * cout + co];
            }
        }
    }
    conv_sample(dy, h, w, &adjoint, dx);
}

/// 2x2 mean pooling of an `h x w x c` image.
pub(crate) fn pool_sample<T: Scalar>(input: &[T], h: usize, w: usize, c: usize, out: &mut [T]) {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::of(0.25);
    for y in 0..oh {
        for x in 0..ow {
            let a = ((2 * y) * w + 2 * x) * c;
            let b = a + c;
            let d = a + w * c;
            let e = d + c;
            let dst = (y * ow + x) * c;
            for ch in 0..c {
                out[dst + ch] =
                    (input[a + ch] + input[b + ch] + input[d + ch] + input[e + ch]) * quarter;
            }
        }
    }
}

/// Adjoint of [`pool_sample`]: each input pixel receives a quarter of its
/// window's gradient.
pub(crate) fn pool_backward_sample<T: Scalar>(
    grad: &[T],
    h: usize,
    w: usize,
    c: usize,
    out: &mut [T],
) {
    let ow = w / 2;
    let quarter = T::of(0.25);
    for y in 0..h {
        for x in 0..w {
            let src = ((y / 2) * ow + x / 2) * c;
            let dst = (y * w + x) * c;
            for ch in 0..c {
                out[dst + ch] = grad[src + ch] * quarter;
            }
        }
    }
}

#[inline]
pub fn relu_scalar<T: Scalar>(x: T) -> T {
    if x > T::zero() { x } else { T::zero() }
}

/// Logistic function, evaluated without overflow for large `|x|`.
#[inline]
pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        (e / (T::one() + e)).flush()
    }
}

pub fn relu<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(relu_scalar)
}

pub fn sigmoid<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(sigmoid_scalar)
}

/// Same-padded, stride-1 3x3 convolution.
pub fn conv2d_forward<T: Scalar>(input: &Tensor4<T>, layer: &ConvLayer<T>) -> Result<Tensor4<T>> {
    layer.check_shapes()?;
    let [n, h, w, c] = input.dims();
    if c != layer.cin {
        return Err(Error::Shape(format!(
            "input {:?} does not match kernel {:?}",
            input.dims(),
            layer.kernel_shape()
        )));
    }
    let mut out = Tensor4::zeros([n, h, w, layer.cout])?;
    let out_len = h * w * layer.cout;
    for i in 0..n {
        conv_sample(
            input.sample(i),
            h,
            w,
            layer,
            &mut out.as_mut_slice()[i * out_len..(i + 1) * out_len],
        );
    }
    Ok(out)
}

pub fn avgpool2<T: Scalar>(input: &Tensor4<T>) -> Result<Tensor4<T>> {
    let [n, h, w, c] = input.dims();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!(
            "average pooling needs even spatial dims, got {:?}",
            input.dims()
        )));
    }
    let mut out = Tensor4::zeros([n, h / 2, w / 2, c])?;
    let out_len = (h / 2) * (w / 2) * c;
    for i in 0..n {
        pool_sample(
            input.sample(i),
            h,
            w,
            c,
            &mut out.as_mut_slice()[i * out_len..(i + 1) * out_len],
        );
    }
    Ok(out)
}

/// Mean binary cross-entropy, accumulated in double precision.
pub(crate) fn bce_slices<T: Scalar>(pred: &[T], label: &[T]) -> f64 {
    let total: f64 = pred
        .iter()
        .zip(label)
        .map(|(&p, &y)| {
            let p = p.to_f64().unwrap_or(0.5).clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            let y = y.to_f64().unwrap_or(0.0);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    total / pred.len() as f64
}

/// Derivative of the loss with respect to `p`, for one element, before
/// division by the element count. The clamp passes gradients straight
/// through: a prediction saturated on the wrong side keeps a gradient pointing
/// back toward its label instead of being cut off.
#[inline]
pub(crate) fn bce_dprob<T: Scalar>(p: T, y: T) -> T {
    let lo = T::of(BCE_CLAMP);
    let p = if p < lo {
        lo
    } else if p > T::one() - lo {
        T::one() - lo
    } else {
        p
    };
    (p - y) / (p * (T::one() - p))
}

/// Gradient of the loss with respect to the pre-sigmoid logit, before
/// division by the element count (straight through the clamp).
#[inline]
pub(crate) fn bce_dlogit<T: Scalar>(p: T, y: T) -> T {
    p - y
}

pub fn bce<T: Scalar>(pred: &Tensor4<T>, label: &Tensor4<T>) -> Result<T> {
    if pred.dims() != label.dims() {
        return Err(Error::Shape(format!(
            "prediction {:?} and label {:?} differ",
            pred.dims(),
            label.dims()
        )));
    }
    Ok(T::of(bce_slices(pred.as_slice(), label.as_slice())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(dims: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor4<f64> {
        let n: usize = dims.iter().product();
        Tensor4::from_vec(dims, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Quadruple-loop reference convolution.
    fn reference_conv(input: &Tensor4<f64>, layer: &ConvLayer<f64>) -> Tensor4<f64> {
        let [n, h, w, c] = input.dims();
        Tensor4::from_fn([n, h, w, layer.cout], |[i, y, x, co]| {
            let mut acc = layer.bias[co];
            for ky in 0..3 {
                for kx in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    let sx = x as isize + kx as isize - 1;
                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                        continue;
                    }
                    for ci in 0..c {
                        acc += input.at([i, sy as usize, sx as usize, ci])
                            * layer.weight(ky, kx, ci, co);
                    }
                }
            }
            acc
        })
        .unwrap()
    }

    #[test]
    fn delta_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let input = random_tensor([2, 6, 5, 1], &mut rng);
        let mut layer = ConvLayer::<f64>::zeros(1, 1);
        layer.kernel[4] = 1.0;
        assert_eq!(conv2d_forward(&input, &layer).unwrap(), input);
    }

    #[test]
    fn ones_kernel_sums_window() {
        let input = Tensor4::from_vec([1, 5, 5, 1], vec![0.3f64; 25]).unwrap();
        let layer = ConvLayer {
            cin: 1,
            cout: 1,
            kernel: vec![1.0; 9],
            bias: vec![0.0],
        };
        let out = conv2d_forward(&input, &layer).unwrap();
        assert!((out.at([0, 2, 2, 0]) - 9.0 * 0.3).abs() < 1e-12);
        // corners only see four in-bounds pixels
        assert!((out.at([0, 0, 0, 0]) - 4.0 * 0.3).abs() < 1e-12);
    }

    #[test]
    fn conv_matches_reference_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let input = random_tensor([1, 5, 5, 2], &mut rng);
        let layer = ConvLayer {
            cin: 2,
            cout: 3,
            kernel: (0..54).map(|_| rng.random_range(-1.0..1.0)).collect(),
            bias: (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(),
        };
        let fast = conv2d_forward(&input, &layer).unwrap();
        let slow = reference_conv(&input, &layer);
        for (a, b) in fast.as_slice().iter().zip(slow.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_channel_mismatch_names_shapes() {
        let input = Tensor4::<f32>::zeros([1, 4, 4, 3]).unwrap();
        let err = conv2d_forward(&input, &ConvLayer::zeros(2, 4))
            .unwrap_err()
            .to_string();
        assert!(
            err.contains("[1, 4, 4, 3]") && err.contains("[3, 3, 2, 4]"),
            "{err}"
        );
    }

    #[test]
    fn conv_gradients_are_adjoints() {
        // <conv(x) - b, g> == <x, dx(g)> == <k, dk(x, g)>
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (h, w, cin, cout) = (4, 6, 2, 3);
        let x: Vec<f64> = (0..h * w * cin)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let g: Vec<f64> = (0..h * w * cout)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let layer = ConvLayer {
            cin,
            cout,
            kernel: (0..9 * cin * cout)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
            bias: vec![0.0; cout],
        };
        let mut y = vec![0.0; g.len()];
        conv_sample(&x, h, w, &layer, &mut y);
        let mut dx = vec![0.0; x.len()];
        conv_input_grad(&g, h, w, &layer, &mut dx);
        let (dk, db) = conv_param_grads(&x, &g, h, w, cin, cout);
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
        assert!((dot(&y, &g) - dot(&x, &dx)).abs() < 1e-10);
        assert!((dot(&y, &g) - dot(&layer.kernel, &dk)).abs() < 1e-10);
        let col_sums: Vec<f64> = (0..cout)
            .map(|c| g.iter().skip(c).step_by(cout).sum())
            .collect();
        assert_eq!(db, col_sums);
    }

    #[test]
    fn pooling() {
        let c = Tensor4::from_vec([1, 4, 4, 1], vec![0.7f64; 16]).unwrap();
        assert!(
            avgpool2(&c)
                .unwrap()
                .as_slice()
                .iter()
                .all(|&v| (v - 0.7).abs() < 1e-15)
        );
        let win = Tensor4::from_vec([1, 2, 2, 1], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(avgpool2(&win).unwrap().as_slice(), &[2.5]);
        let mut t = Tensor4::<f32>::zeros([1, 128, 128, 1]).unwrap();
        for _ in 0..4 {
            t = avgpool2(&t).unwrap();
        }
        assert_eq!(t.dims(), [1, 8, 8, 1]);
        assert!(matches!(
            avgpool2(&Tensor4::<f32>::zeros([1, 3, 4, 1]).unwrap()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn activations() {
        assert_eq!(relu_scalar(-1.0f64), 0.0);
        assert_eq!(relu_scalar(2.0f64), 2.0);
        assert_eq!(sigmoid_scalar(0.0f32), 0.5);
        // 1 / (1 + e^-40) and e^-40 / (1 + e^-40)
        let tail = (-40.0f64).exp();
        assert!((sigmoid_scalar(40.0f64) - 1.0 / (1.0 + tail)).abs() < 1e-16);
        assert!((sigmoid_scalar(-40.0f64) - tail / (1.0 + tail)).abs() / tail < 1e-12);
        for x in [-1000.0f32, -40.0, 40.0, 1000.0] {
            let s = sigmoid_scalar(x);
            assert!(s.is_finite() && (0.0..=1.0).contains(&s));
        }
    }

    #[test]
    fn bce_values() {
        let dims = [1, 2, 2, 1];
        let label = Tensor4::from_vec(dims, vec![0.0f64, 1.0, 1.0, 0.0]).unwrap();
        let exact = bce(&label, &label).unwrap();
        assert!(exact > 0.0 && exact < 2e-7);
        let half = Tensor4::from_vec(dims, vec![0.5f64; 4]).unwrap();
        assert!((bce(&half, &label).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);

        let pred = Tensor4::from_vec(dims, vec![0.2f64, 0.9, 0.6, 0.35]).unwrap();
        let expected = -((0.8f64).ln() + (0.9f64).ln() + (0.6f64).ln() + (0.65f64).ln()) / 4.0;
        assert!((bce(&pred, &label).unwrap() - expected).abs() < 1e-12);

        let other = Tensor4::<f64>::zeros([1, 2, 1, 1]).unwrap();
        assert!(matches!(bce(&other, &label), Err(Error::Shape(_))));
    }
}
