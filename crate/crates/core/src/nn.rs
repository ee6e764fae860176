//! Minimal CPU building blocks with explicit backward passes: parameter
//! store, 2-D convolution (im2col + GEMM), dense layers and Adam.
//!
//! Convolution activations use a channel-major `C x B x H x W` layout so a
//! whole batch becomes a single GEMM.

use std::collections::BTreeMap;

use ndarray::{s, Array2, Array4, ArrayD, ArrayView2, ArrayView4, Axis, Ix1, Ix2, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

/// Named `f32` tensors. Also used to hold gradients with matching names.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, ArrayD<f32>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<f32>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> &ArrayD<f32> {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` not registered"))
    }

    pub fn try_get(&self, name: &str) -> Option<&ArrayD<f32>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<f32> {
        self.tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("parameter `{name}` not registered"))
    }

    pub fn view2(&self, name: &str) -> ArrayView2<'_, f32> {
        self.get(name).view().into_dimensionality::<Ix2>().unwrap()
    }

    pub fn view1(&self, name: &str) -> ndarray::ArrayView1<'_, f32> {
        self.get(name).view().into_dimensionality::<Ix1>().unwrap()
    }

    pub fn scalar(&self, name: &str) -> f32 {
        self.get(name).iter().next().copied().unwrap_or(0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f32>)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), ArrayD::zeros(v.raw_dim())))
                .collect(),
        }
    }

    /// Adds `g` into the tensor `name`, which must already exist.
    pub fn accumulate(&mut self, name: &str, g: &ArrayD<f32>) {
        let t = self.get_mut(name);
        debug_assert_eq!(t.shape(), g.shape(), "gradient shape for {name}");
        *t += g;
    }

    pub fn accumulate_scalar(&mut self, name: &str, g: f32) {
        self.get_mut(name).iter_mut().for_each(|v| *v += g);
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

fn he_uniform<R: Rng>(shape: IxDyn, fan_in: usize, rng: &mut R) -> ArrayD<f32> {
    let bound = (6.0 / fan_in as f32).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).unwrap();
    ArrayD::from_shape_simple_fn(shape, || dist.sample(rng))
}

/// 2-D convolution with square kernel, zero padding and bias.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

pub struct ConvCache {
    cols: Array2<f32>,
    in_shape: (usize, usize, usize, usize),
}

impl Conv2d {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, kernel: usize, stride: usize) -> Self {
        Self {
            name: name.into(),
            cin,
            cout,
            kernel,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init<R: Rng>(&self, params: &mut ParamStore, rng: &mut R) {
        let fan_in = self.cin * self.kernel * self.kernel;
        params.insert(
            self.weight_name(),
            he_uniform(IxDyn(&[self.cout, fan_in]), fan_in, rng),
        );
        params.insert(self.bias_name(), ArrayD::zeros(IxDyn(&[self.cout])));
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    /// `x`: `C x B x H x W`. Returns `Cout x B x Ho x Wo`.
    pub fn forward(&self, params: &ParamStore, x: ArrayView4<f32>) -> (Array4<f32>, ConvCache) {
        let (c, b, h, w) = x.dim();
        assert_eq!(c, self.cin, "{}: expected {} input channels", self.name, self.cin);
        let (ho, wo) = self.out_size(h, w);
        let cols = im2col(x, self.kernel, self.stride, self.pad, ho, wo);
        let weight = params.view2(&self.weight_name());
        let bias = params.view1(&self.bias_name());
        let mut y = weight.dot(&cols);
        for (mut row, &bv) in y.axis_iter_mut(Axis(0)).zip(bias.iter()) {
            row += bv;
        }
        let y = y.into_shape_with_order((self.cout, b, ho, wo)).unwrap();
        (
            y,
            ConvCache {
                cols,
                in_shape: (c, b, h, w),
            },
        )
    }

    /// Accumulates weight/bias gradients and optionally returns `dL/dx`.
    pub fn backward(
        &self,
        params: &ParamStore,
        cache: &ConvCache,
        dy: ArrayView4<f32>,
        grads: &mut ParamStore,
        need_dx: bool,
    ) -> Option<Array4<f32>> {
        let (cout, b, ho, wo) = dy.dim();
        let dy2 = dy
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((cout, b * ho * wo))
            .unwrap();
        let dw = dy2.dot(&cache.cols.t());
        let db = dy2.sum_axis(Axis(1));
        grads.accumulate(&self.weight_name(), &dw.into_dyn());
        grads.accumulate(&self.bias_name(), &db.into_dyn());
        if !need_dx {
            return None;
        }
        let weight = params.view2(&self.weight_name());
        let dcols = weight.t().dot(&dy2);
        Some(col2im(
            dcols.view(),
            cache.in_shape,
            self.kernel,
            self.stride,
            self.pad,
            ho,
            wo,
        ))
    }
}

fn im2col(x: ArrayView4<f32>, k: usize, stride: usize, pad: usize, ho: usize, wo: usize) -> Array2<f32> {
    let (c, b, h, w) = x.dim();
    let x = x.as_standard_layout();
    let xs = x.as_slice().unwrap();
    let n = b * ho * wo;
    let mut cols = Array2::<f32>::zeros((c * k * k, n));
    let out = cols.as_slice_mut().unwrap();
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut out[row * n..(row + 1) * n];
                for bi in 0..b {
                    let src = &xs[(ci * b + bi) * h * w..(ci * b + bi + 1) * h * w];
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let srow = &src[iy as usize * w..(iy as usize + 1) * w];
                        let base = (bi * ho + oy) * wo;
                        for ox in 0..wo {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[base + ox] = srow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(
    cols: ArrayView2<f32>,
    shape: (usize, usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array4<f32> {
    let (c, b, h, w) = shape;
    let n = b * ho * wo;
    let cols = cols.as_standard_layout();
    let cs = cols.as_slice().unwrap();
    let mut dx = Array4::<f32>::zeros(shape);
    let out = dx.as_slice_mut().unwrap();
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cs[row * n..(row + 1) * n];
                for bi in 0..b {
                    let dst = &mut out[(ci * b + bi) * h * w..(ci * b + bi + 1) * h * w];
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = (bi * ho + oy) * wo;
                        for ox in 0..wo {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[iy as usize * w + ix as usize] += src[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

pub fn relu_inplace<D: ndarray::Dimension>(x: &mut ndarray::Array<f32, D>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Zeroes `grad` wherever the post-ReLU activation is not positive.
pub fn relu_backward<D: ndarray::Dimension>(grad: &mut ndarray::Array<f32, D>, activation: &ndarray::Array<f32, D>) {
    ndarray::Zip::from(grad)
        .and(activation)
        .for_each(|g, &a| {
            if a <= 0.0 {
                *g = 0.0;
            }
        });
}

/// Fully connected layer `y = x W^T + b`, `W: out x in`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, fan_in: usize, fan_out: usize) -> Self {
        Self {
            name: name.into(),
            fan_in,
            fan_out,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init<R: Rng>(&self, params: &mut ParamStore, rng: &mut R) {
        params.insert(
            self.weight_name(),
            he_uniform(IxDyn(&[self.fan_out, self.fan_in]), self.fan_in, rng),
        );
        params.insert(self.bias_name(), ArrayD::zeros(IxDyn(&[self.fan_out])));
    }

    pub fn forward(&self, params: &ParamStore, x: ArrayView2<f32>) -> Array2<f32> {
        let mut y = x.dot(&params.view2(&self.weight_name()).t());
        y += &params.view1(&self.bias_name());
        y
    }

    pub fn backward(
        &self,
        params: &ParamStore,
        x: ArrayView2<f32>,
        dy: ArrayView2<f32>,
        grads: &mut ParamStore,
    ) -> Array2<f32> {
        grads.accumulate(&self.weight_name(), &dy.t().dot(&x).into_dyn());
        grads.accumulate(&self.bias_name(), &dy.sum_axis(Axis(0)).into_dyn());
        dy.dot(&params.view2(&self.weight_name()))
    }
}

/// Two-layer perceptron with a ReLU between the layers.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

pub struct MlpCache {
    input: Array2<f32>,
    hidden: Array2<f32>,
}

impl Mlp {
    pub fn new(name: &str, fan_in: usize, hidden: usize, fan_out: usize) -> Self {
        Self {
            fc1: Linear::new(format!("{name}.fc1"), fan_in, hidden),
            fc2: Linear::new(format!("{name}.fc2"), hidden, fan_out),
        }
    }

    pub fn init<R: Rng>(&self, params: &mut ParamStore, rng: &mut R) {
        self.fc1.init(params, rng);
        self.fc2.init(params, rng);
    }

    pub fn forward(&self, params: &ParamStore, x: ArrayView2<f32>) -> (Array2<f32>, MlpCache) {
        let mut hidden = self.fc1.forward(params, x);
        relu_inplace(&mut hidden);
        let out = self.fc2.forward(params, hidden.view());
        (
            out,
            MlpCache {
                input: x.to_owned(),
                hidden,
            },
        )
    }

    pub fn backward(
        &self,
        params: &ParamStore,
        cache: &MlpCache,
        dy: ArrayView2<f32>,
        grads: &mut ParamStore,
    ) -> Array2<f32> {
        let mut dh = self.fc2.backward(params, cache.hidden.view(), dy, grads);
        relu_backward(&mut dh, &cache.hidden);
        self.fc1.backward(params, cache.input.view(), dh.view(), grads)
    }
}

/// Adam with bias correction. Only tensors whose name passes the filter given
/// to [`Adam::step`] are touched, so phases that train disjoint parameter
/// groups do not drift each other through stale moments.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    state: BTreeMap<String, AdamState>,
}

#[derive(Debug, Clone)]
struct AdamState {
    m: ArrayD<f32>,
    v: ArrayD<f32>,
    t: i32,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamStore, active: impl Fn(&str) -> bool) {
        self.step_scaled(params, grads, |name| active(name).then_some(1.0));
    }

    /// Like [`Adam::step`], with a per-tensor learning-rate multiplier;
    /// `None` leaves the tensor untouched.
    pub fn step_scaled(&mut self, params: &mut ParamStore, grads: &ParamStore, scale: impl Fn(&str) -> Option<f32>) {
        for (name, g) in grads.iter() {
            let Some(mult) = scale(name) else {
                continue;
            };
            let p = params.get_mut(name);
            let st = self.state.entry(name.clone()).or_insert_with(|| AdamState {
                m: ArrayD::zeros(g.raw_dim()),
                v: ArrayD::zeros(g.raw_dim()),
                t: 0,
            });
            st.t += 1;
            let (b1, b2) = (self.beta1, self.beta2);
            let c1 = 1.0 - b1.powi(st.t);
            let c2 = 1.0 - b2.powi(st.t);
            let step = mult * self.lr * c2.sqrt() / c1;
            let eps = self.eps * c2.sqrt();
            ndarray::Zip::from(p)
                .and(&mut st.m)
                .and(&mut st.v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= step * *m / (v.sqrt() + eps);
                });
        }
    }
}

/// Global average over the two trailing spatial axes of a `C x B x H x W`
/// activation; returns `B x C`.
pub fn global_avg_pool_cb(x: ArrayView4<f32>) -> Array2<f32> {
    let (c, b, h, w) = x.dim();
    let mut out = Array2::zeros((b, c));
    let area = (h * w) as f32;
    for ci in 0..c {
        for bi in 0..b {
            out[[bi, ci]] = x.slice(s![ci, bi, .., ..]).sum() / area;
        }
    }
    out
}

pub fn global_avg_pool_backward_cb(dy: ArrayView2<f32>, shape: (usize, usize, usize, usize)) -> Array4<f32> {
    let (c, b, h, w) = shape;
    let area = (h * w) as f32;
    Array4::from_shape_fn((c, b, h, w), |(ci, bi, _, _)| dy[[bi, ci]] / area)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand4(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_simple_fn(shape, || rng.random_range(-1.0..1.0))
    }

    /// Direct convolution used as an oracle for the im2col path.
    fn conv_direct(params: &ParamStore, conv: &Conv2d, x: &Array4<f32>) -> Array4<f32> {
        let (_, b, h, w) = x.dim();
        let (ho, wo) = conv.out_size(h, w);
        let wt = params.view2(&conv.weight_name());
        let bias = params.view1(&conv.bias_name());
        let k = conv.kernel;
        Array4::from_shape_fn((conv.cout, b, ho, wo), |(co, bi, oy, ox)| {
            let mut acc = bias[co];
            for ci in 0..conv.cin {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * conv.stride + ky) as isize - conv.pad as isize;
                        let ix = (ox * conv.stride + kx) as isize - conv.pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            acc += wt[[co, (ci * k + ky) * k + kx]] * x[[ci, bi, iy as usize, ix as usize]];
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_matches_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let conv = Conv2d::new("c", 3, 5, 3, 2);
        let mut p = ParamStore::new();
        conv.init(&mut p, &mut rng);
        p.get_mut("c.bias").iter_mut().enumerate().for_each(|(i, v)| *v = i as f32 * 0.1);
        let x = rand4((3, 2, 7, 6), 2);
        let (y, _) = conv.forward(&p, x.view());
        let want = conv_direct(&p, &conv, &x);
        assert_eq!(y.dim(), want.dim());
        for (a, b) in y.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let conv = Conv2d::new("c", 2, 3, 3, 2);
        let mut p = ParamStore::new();
        conv.init(&mut p, &mut rng);
        let x = rand4((2, 2, 5, 5), 4);
        let upstream = rand4((3, 2, 3, 3), 5);
        let loss = |p: &ParamStore, x: &Array4<f32>| -> f64 {
            let (y, _) = conv.forward(p, x.view());
            y.iter().zip(upstream.iter()).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
        };
        let (_, cache) = conv.forward(&p, x.view());
        let mut g = p.zeros_like();
        let dx = conv.backward(&p, &cache, upstream.view(), &mut g, true).unwrap();

        let h = 1e-2f32;
        for idx in [0usize, 7, 20, 53] {
            let mut pp = p.clone();
            pp.get_mut("c.weight").as_slice_mut().unwrap()[idx] += h;
            let mut pm = p.clone();
            pm.get_mut("c.weight").as_slice_mut().unwrap()[idx] -= h;
            let fd = (loss(&pp, &x) - loss(&pm, &x)) / (2.0 * h as f64);
            let an = g.get("c.weight").as_slice().unwrap()[idx] as f64;
            assert!((fd - an).abs() <= 1e-3 * fd.abs().max(1.0), "w[{idx}] fd={fd} an={an}");
        }
        for idx in [0usize, 13, 31, 49] {
            let mut xp = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            let mut xm = x.clone();
            xm.as_slice_mut().unwrap()[idx] -= h;
            let fd = (loss(&p, &xp) - loss(&p, &xm)) / (2.0 * h as f64);
            let an = dx.as_slice().unwrap()[idx] as f64;
            assert!((fd - an).abs() <= 1e-3 * fd.abs().max(1.0), "x[{idx}] fd={fd} an={an}");
        }
    }

    #[test]
    fn mlp_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mlp = Mlp::new("h", 4, 6, 3);
        let mut p = ParamStore::new();
        mlp.init(&mut p, &mut rng);
        let x = Array2::from_shape_fn((2, 4), |(i, j)| (i as f32 + 1.0) * 0.3 - j as f32 * 0.2);
        let up = Array2::from_shape_fn((2, 3), |(i, j)| 0.5 - (i * 3 + j) as f32 * 0.17);
        let loss = |p: &ParamStore, x: &Array2<f32>| -> f64 {
            let (y, _) = mlp.forward(p, x.view());
            y.iter().zip(up.iter()).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
        };
        let (_, cache) = mlp.forward(&p, x.view());
        let mut g = p.zeros_like();
        let dx = mlp.backward(&p, &cache, up.view(), &mut g);
        let h = 1e-3f32;
        for name in ["h.fc1.weight", "h.fc2.weight", "h.fc1.bias"] {
            let n = p.get(name).len();
            for idx in 0..n.min(6) {
                let mut pp = p.clone();
                pp.get_mut(name).as_slice_mut().unwrap()[idx] += h;
                let mut pm = p.clone();
                pm.get_mut(name).as_slice_mut().unwrap()[idx] -= h;
                let fd = (loss(&pp, &x) - loss(&pm, &x)) / (2.0 * h as f64);
                let an = g.get(name).as_slice().unwrap()[idx] as f64;
                assert!((fd - an).abs() < 2e-3, "{name}[{idx}] fd={fd} an={an}");
            }
        }
        for idx in 0..8 {
            let mut xp = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            let mut xm = x.clone();
            xm.as_slice_mut().unwrap()[idx] -= h;
            let fd = (loss(&p, &xp) - loss(&p, &xm)) / (2.0 * h as f64);
            assert!((fd - dx.as_slice().unwrap()[idx] as f64).abs() < 2e-3);
        }
    }

    #[test]
    fn adam_moves_only_active_params() {
        let mut p = ParamStore::new();
        p.insert("a.w", ArrayD::from_elem(IxDyn(&[2]), 1.0));
        p.insert("b.w", ArrayD::from_elem(IxDyn(&[2]), 1.0));
        let mut g = p.zeros_like();
        g.get_mut("a.w").fill(1.0);
        g.get_mut("b.w").fill(1.0);
        let mut opt = Adam::new(0.1);
        opt.step(&mut p, &g, |n| n.starts_with("a."));
        assert!(p.get("a.w").iter().all(|&v| (v - 0.9).abs() < 1e-5));
        assert!(p.get("b.w").iter().all(|&v| v == 1.0));
    }

    #[test]
    fn gap_backward_spreads_evenly() {
        let x = rand4((2, 3, 2, 2), 11);
        let y = global_avg_pool_cb(x.view());
        assert!((y[[1, 0]] - x.slice(s![0, 1, .., ..]).mean().unwrap()).abs() < 1e-6);
        let dy = Array2::ones((3, 2));
        let dx = global_avg_pool_backward_cb(dy.view(), x.dim());
        assert!(dx.iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }
}
