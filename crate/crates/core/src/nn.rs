//! Minimal layers with hand-written backward passes.
//!
//! Everything operates on a single sample: feature maps are `[C, H, W]`
//! arrays, vectors are 1-D. Gradients accumulate into a value of the same
//! type as the layer (`grad: &mut Self`), so a zeroed clone of a model is its
//! gradient buffer.

use ndarray::{Array1, Array2, Array3, Array4, ArrayView1, ArrayView3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Uniform visitation of learnable tensors in a fixed order.
pub trait Params {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [f64])>);
    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>);

    fn named_params(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        self.collect("", &mut out);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        self.collect_mut(&mut out);
        out
    }

    fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, s)| s.len()).sum()
    }
}

/// A copy of `t` with every learnable value set to zero.
pub fn zeros_like<T: Params + Clone>(t: &T) -> T {
    let mut z = t.clone();
    for s in z.params_mut() {
        s.fill(0.0);
    }
    z
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

fn slice<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> &[f64] {
    a.as_slice()
        .expect("parameters are kept in standard layout")
}

fn slice_mut<D: ndarray::Dimension>(a: &mut ndarray::Array<f64, D>) -> &mut [f64] {
    a.as_slice_mut()
        .expect("parameters are kept in standard layout")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    /// `[out, in, k, k]`
    pub weight: Array4<f64>,
    pub stride: usize,
    pub padding: usize,
}

/// Saved state for [`Conv2d::backward`].
#[derive(Clone, Debug)]
pub struct ConvCache {
    cols: Array2<f64>,
    in_dim: (usize, usize, usize),
}

impl Conv2d {
    /// He-uniform initialization for layers followed by a ReLU.
    pub fn new(
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = (cin * kernel * kernel) as f64;
        let bound = (6.0 / fan_in).sqrt();
        Self {
            weight: Array4::from_shape_simple_fn((cout, cin, kernel, kernel), || {
                rng.random_range(-bound..bound)
            }),
            stride,
            padding,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().0
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim().1
    }

    fn kernel(&self) -> usize {
        self.weight.dim().2
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel();
        (
            (h + 2 * self.padding - k) / self.stride + 1,
            (w + 2 * self.padding - k) / self.stride + 1,
        )
    }

    fn weight_matrix(&self) -> ndarray::ArrayView2<'_, f64> {
        let (o, i, k, _) = self.weight.dim();
        self.weight
            .view()
            .into_shape_with_order((o, i * k * k))
            .expect("standard layout")
    }

    fn im2col(&self, x: &ArrayView3<f64>) -> Array2<f64> {
        let (c, h, w) = x.dim();
        let k = self.kernel();
        let (ho, wo) = self.out_hw(h, w);
        let (s, p) = (self.stride as isize, self.padding as isize);
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let mut cols = Array2::<f64>::zeros((c * k * k, ho * wo));
        let cs = cols.as_slice_mut().expect("fresh array");
        for ci in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let dst = &mut cs[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = oy as isize * s + ki as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &xs[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                        for ox in 0..wo {
                            let ix = ox as isize * s + kj as isize - p;
                            if ix >= 0 && ix < w as isize {
                                dst[oy * wo + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &Array2<f64>, in_dim: (usize, usize, usize)) -> Array3<f64> {
        let (c, h, w) = in_dim;
        let k = self.kernel();
        let (ho, wo) = self.out_hw(h, w);
        let (s, p) = (self.stride as isize, self.padding as isize);
        let mut out = Array3::<f64>::zeros(in_dim);
        let os = out.as_slice_mut().expect("fresh array");
        let cols = cols.as_standard_layout();
        let cs = cols.as_slice().expect("standard layout");
        for ci in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let src = &cs[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = oy as isize * s + ki as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = (ci * h + iy as usize) * w;
                        for ox in 0..wo {
                            let ix = ox as isize * s + kj as isize - p;
                            if ix >= 0 && ix < w as isize {
                                os[base + ix as usize] += src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn forward(&self, x: &ArrayView3<f64>) -> (Array3<f64>, ConvCache) {
        let (c, h, w) = x.dim();
        assert_eq!(c, self.in_channels(), "conv input channels");
        let (ho, wo) = self.out_hw(h, w);
        let cols = self.im2col(x);
        let y = self.weight_matrix().dot(&cols);
        let y = y
            .into_shape_with_order((self.out_channels(), ho, wo))
            .expect("matmul output is contiguous");
        (
            y,
            ConvCache {
                cols,
                in_dim: (c, h, w),
            },
        )
    }

    pub fn backward(
        &self,
        cache: &ConvCache,
        grad_out: &ArrayView3<f64>,
        grad: &mut Conv2d,
    ) -> Array3<f64> {
        let (o, ho, wo) = grad_out.dim();
        let g = grad_out.as_standard_layout();
        let g2 = g
            .view()
            .into_shape_with_order((o, ho * wo))
            .expect("standard layout");
        let dw = g2.dot(&cache.cols.t());
        let dw4 = dw
            .into_shape_with_order(grad.weight.dim())
            .expect("contiguous");
        grad.weight += &dw4;
        let dcols = self.weight_matrix().t().dot(&g2);
        self.col2im(&dcols, cache.in_dim)
    }
}

impl Params for Conv2d {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [f64])>) {
        out.push((join(prefix, "weight"), slice(&self.weight)));
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        out.push(slice_mut(&mut self.weight));
    }
}

/// Per-channel `scale * x + shift`; the inference form of batch normalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelAffine {
    pub scale: Array1<f64>,
    pub shift: Array1<f64>,
}

impl ChannelAffine {
    pub fn new(channels: usize, scale: f64) -> Self {
        Self {
            scale: Array1::from_elem(channels, scale),
            shift: Array1::zeros(channels),
        }
    }

    pub fn forward(&self, x: &ArrayView3<f64>) -> Array3<f64> {
        let mut y = x.to_owned();
        for (c, mut plane) in y.axis_iter_mut(Axis(0)).enumerate() {
            let (s, t) = (self.scale[c], self.shift[c]);
            plane.mapv_inplace(|v| s * v + t);
        }
        y
    }

    pub fn backward(
        &self,
        x: &ArrayView3<f64>,
        grad_out: &ArrayView3<f64>,
        grad: &mut ChannelAffine,
    ) -> Array3<f64> {
        let mut gin = grad_out.to_owned();
        for (c, mut plane) in gin.axis_iter_mut(Axis(0)).enumerate() {
            let go = grad_out.index_axis(Axis(0), c);
            let xi = x.index_axis(Axis(0), c);
            grad.scale[c] += (&go * &xi).sum();
            grad.shift[c] += go.sum();
            plane *= self.scale[c];
        }
        gin
    }
}

impl Params for ChannelAffine {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [f64])>) {
        out.push((join(prefix, "scale"), slice(&self.scale)));
        out.push((join(prefix, "shift"), slice(&self.shift)));
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        out.push(slice_mut(&mut self.scale));
        out.push(slice_mut(&mut self.shift));
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// `[out, in]`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    /// Uniform initialization in `±1/sqrt(fan_in)` for weights and bias.
    pub fn new(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self {
            weight: Array2::from_shape_simple_fn((fan_out, fan_in), || {
                rng.random_range(-bound..bound)
            }),
            bias: Array1::from_shape_simple_fn(fan_out, || rng.random_range(-bound..bound)),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Array2::zeros((fan_out, fan_in)),
            bias: Array1::zeros(fan_out),
        }
    }

    pub fn forward(&self, x: &ArrayView1<f64>) -> Array1<f64> {
        self.weight.dot(x) + &self.bias
    }

    pub fn backward(
        &self,
        x: &ArrayView1<f64>,
        grad_out: &ArrayView1<f64>,
        grad: &mut Linear,
    ) -> Array1<f64> {
        for (i, &go) in grad_out.iter().enumerate() {
            if go != 0.0 {
                grad.weight.row_mut(i).scaled_add(go, x);
            }
        }
        grad.bias += grad_out;
        self.weight.t().dot(grad_out)
    }
}

impl Params for Linear {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [f64])>) {
        out.push((join(prefix, "weight"), slice(&self.weight)));
        out.push((join(prefix, "bias"), slice(&self.bias)));
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        out.push(slice_mut(&mut self.weight));
        out.push(slice_mut(&mut self.bias));
    }
}

pub fn relu<D: ndarray::Dimension>(x: ndarray::Array<f64, D>) -> ndarray::Array<f64, D> {
    x.mapv_into(|v| v.max(0.0))
}

/// Gradient through a ReLU given its output.
pub fn relu_backward<D: ndarray::Dimension>(
    y: &ndarray::Array<f64, D>,
    grad_out: ndarray::Array<f64, D>,
) -> ndarray::Array<f64, D> {
    let mut g = grad_out;
    ndarray::Zip::from(&mut g).and(y).for_each(|g, &y| {
        if y <= 0.0 {
            *g = 0.0;
        }
    });
    g
}

/// 3×3 max pooling, stride 2, padding 1.
pub fn max_pool(x: &ArrayView3<f64>) -> (Array3<f64>, Vec<usize>) {
    let (c, h, w) = x.dim();
    let (ho, wo) = ((h + 2 - 3) / 2 + 1, (w + 2 - 3) / 2 + 1);
    let mut y = Array3::zeros((c, ho, wo));
    let mut argmax = Vec::with_capacity(c * ho * wo);
    for ci in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut at = 0;
                for dy in 0..3 {
                    for dx in 0..3 {
                        let iy = (oy * 2 + dy) as isize - 1;
                        let ix = (ox * 2 + dx) as isize - 1;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            continue;
                        }
                        let v = x[[ci, iy as usize, ix as usize]];
                        if v > best {
                            best = v;
                            at = (ci * h + iy as usize) * w + ix as usize;
                        }
                    }
                }
                y[[ci, oy, ox]] = best;
                argmax.push(at);
            }
        }
    }
    (y, argmax)
}

pub fn max_pool_backward(
    argmax: &[usize],
    in_dim: (usize, usize, usize),
    grad_out: &ArrayView3<f64>,
) -> Array3<f64> {
    let mut g = Array3::zeros(in_dim);
    let gs = g.as_slice_mut().expect("fresh array");
    for (&idx, &go) in argmax.iter().zip(grad_out.iter()) {
        gs[idx] += go;
    }
    g
}

pub fn global_avg_pool(x: &ArrayView3<f64>) -> Array1<f64> {
    let (_, h, w) = x.dim();
    let n = (h * w) as f64;
    x.axis_iter(Axis(0)).map(|p| p.sum() / n).collect()
}

pub fn global_avg_pool_backward(
    in_dim: (usize, usize, usize),
    grad_out: &ArrayView1<f64>,
) -> Array3<f64> {
    let (c, h, w) = in_dim;
    let n = (h * w) as f64;
    Array3::from_shape_fn((c, h, w), |(ci, _, _)| grad_out[ci] / n)
}

/// Inverted-dropout mask: zero with probability `rate`, else `1 / (1 - rate)`.
pub fn dropout_mask(len: usize, rate: f64, rng: &mut impl Rng) -> Array1<f64> {
    if rate <= 0.0 {
        return Array1::ones(len);
    }
    let keep = 1.0 / (1.0 - rate);
    Array1::from_shape_simple_fn(len, || {
        if rng.random::<f64>() < rate {
            0.0
        } else {
            keep
        }
    })
}


#[cfg(test)]
mod tests {
    use super::gradcheck::{central, rel};
    use super::*;
    use ndarray::Array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand3(dim: (usize, usize, usize), rng: &mut ChaCha8Rng) -> Array3<f64> {
        Array::from_shape_simple_fn(dim, || rng.random_range(-1.0..1.0))
    }

    /// Direct nested-loop convolution, independent of the im2col path.
    fn naive_conv(conv: &Conv2d, x: &Array3<f64>) -> Array3<f64> {
        let (c, h, w) = x.dim();
        let (o, _, k, _) = conv.weight.dim();
        let (ho, wo) = conv.out_hw(h, w);
        let mut y = Array3::zeros((o, ho, wo));
        for oc in 0..o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = 0.0;
                    for ci in 0..c {
                        for ki in 0..k {
                            for kj in 0..k {
                                let iy = (oy * conv.stride + ki) as isize - conv.padding as isize;
                                let ix = (ox * conv.stride + kj) as isize - conv.padding as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    s += conv.weight[[oc, ci, ki, kj]]
                                        * x[[ci, iy as usize, ix as usize]];
                                }
                            }
                        }
                    }
                    y[[oc, oy, ox]] = s;
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (1, 2, 0), (7, 2, 3)] {
            let conv = Conv2d::new(3, 4, k, s, p, &mut rng);
            let x = rand3((3, 9, 11), &mut rng);
            let (y, _) = conv.forward(&x.view());
            let oracle = naive_conv(&conv, &x);
            assert_eq!(y.dim(), oracle.dim());
            for (a, b) in y.iter().zip(oracle.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let conv = Conv2d::new(2, 3, 3, 2, 1, &mut rng);
        let x = rand3((2, 7, 6), &mut rng);
        let (y, cache) = conv.forward(&x.view());
        let probe = Array::from_shape_simple_fn(y.dim(), || rng.random_range(-1.0..1.0));
        let mut grad = zeros_like(&conv);
        let gin = conv.backward(&cache, &probe.view(), &mut grad);

        let mut xs = x.as_slice().unwrap().to_vec();
        for i in 0..xs.len() {
            let n = central(&mut xs, i, 1e-5, |v| {
                let xa = Array3::from_shape_vec(x.dim(), v.to_vec()).unwrap();
                (conv.forward(&xa.view()).0 * &probe).sum()
            });
            assert!(rel(gin.as_slice().unwrap()[i], n) < 1e-6);
        }
        let mut ws = conv.weight.as_slice().unwrap().to_vec();
        for i in 0..ws.len() {
            let n = central(&mut ws, i, 1e-5, |v| {
                let mut c = conv.clone();
                c.weight = Array4::from_shape_vec(conv.weight.dim(), v.to_vec()).unwrap();
                (c.forward(&x.view()).0 * &probe).sum()
            });
            assert!(rel(grad.weight.as_slice().unwrap()[i], n) < 1e-6);
        }
    }

    #[test]
    fn affine_and_linear_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut aff = ChannelAffine::new(3, 1.0);
        aff.scale.mapv_inplace(|_| rng.random_range(0.5..1.5));
        let x = rand3((3, 4, 4), &mut rng);
        let probe = rand3((3, 4, 4), &mut rng);
        let mut grad = zeros_like(&aff);
        let gin = aff.backward(&x.view(), &probe.view(), &mut grad);
        let mut xs = x.as_slice().unwrap().to_vec();
        for i in 0..xs.len() {
            let n = central(&mut xs, i, 1e-5, |v| {
                let xa = Array3::from_shape_vec(x.dim(), v.to_vec()).unwrap();
                (aff.forward(&xa.view()) * &probe).sum()
            });
            assert!(rel(gin.as_slice().unwrap()[i], n) < 1e-6);
        }
        for c in 0..3 {
            let mut a2 = aff.clone();
            a2.shift[c] += 1.0;
            let diff = (a2.forward(&x.view()) - aff.forward(&x.view())) * &probe;
            assert!((diff.sum() - grad.shift[c]).abs() < 1e-9);
        }

        let lin = Linear::new(5, 3, &mut rng);
        let x = Array::from_shape_simple_fn(5, || rng.random_range(-1.0..1.0));
        let probe = Array::from_shape_simple_fn(3, || rng.random_range(-1.0..1.0));
        let mut grad = zeros_like(&lin);
        let gin = lin.backward(&x.view(), &probe.view(), &mut grad);
        let mut xs = x.to_vec();
        for i in 0..5 {
            let n = central(&mut xs, i, 1e-5, |v| {
                lin.forward(&ArrayView1::from(v)).dot(&probe)
            });
            assert!(rel(gin[i], n) < 1e-6);
        }
        assert_eq!(grad.bias, probe);
    }

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        let x = Array3::from_shape_fn((1, 4, 4), |(_, i, j)| (i * 4 + j) as f64);
        let (y, arg) = max_pool(&x.view());
        assert_eq!(y.dim(), (1, 2, 2));
        assert_eq!(y[[0, 0, 0]], 5.0);
        assert_eq!(y[[0, 1, 1]], 15.0);
        let g = max_pool_backward(&arg, x.dim(), &Array3::ones(y.dim()).view());
        assert_eq!(g.sum(), 4.0);
        assert_eq!(g[[0, 1, 1]], 1.0);
    }

    #[test]
    fn dropout_mask_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = dropout_mask(10_000, 0.5, &mut rng);
        assert!(m.iter().all(|&v| v == 0.0 || v == 2.0));
        let kept = m.iter().filter(|&&v| v > 0.0).count();
        assert!((4_500..5_500).contains(&kept));
        assert_eq!(dropout_mask(4, 0.0, &mut rng), Array1::<f64>::ones(4));
    }
}
