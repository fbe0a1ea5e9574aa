//! The embedding network: a stack of bidirectional LSTM layers reading one
//! feature frame per step, followed by a dense projection that emits `K`
//! values for each of the `F` frequency bins of that frame.
//!
//! Forward and backward passes are written out by hand. Gate blocks inside
//! every `4H`-wide weight matrix are ordered input, forget, cell, output.

mod checkpoint;

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, ArrayView2, ArrayViewD, ArrayViewMutD, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{load_checkpoint, save_checkpoint, Model};

use crate::signal::FeatureMatrix;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputActivation {
    Tanh,
    Identity,
}

impl fmt::Display for OutputActivation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OutputActivation::Tanh => "tanh",
            OutputActivation::Identity => "identity",
        })
    }
}

impl FromStr for OutputActivation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(OutputActivation::Tanh),
            "identity" => Ok(OutputActivation::Identity),
            other => Err(Error::invalid(format!("unknown activation {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetConfig {
    pub n_layers: usize,
    /// Units per direction.
    pub hidden: usize,
    /// Embedding dimension `K`.
    pub embed_dim: usize,
    /// Frequency bins `F`.
    pub n_freq: usize,
    pub activation: OutputActivation,
}

impl NetConfig {
    /// 2 x 64 BLSTM, `K = 20`, `F = 129`.
    pub fn desk() -> Self {
        Self {
            n_layers: 2,
            hidden: 64,
            embed_dim: 20,
            n_freq: 129,
            activation: OutputActivation::Tanh,
        }
    }

    /// 4 x 600 BLSTM, `K = 20`, `F = 129`.
    pub fn full_scale() -> Self {
        Self {
            n_layers: 4,
            hidden: 600,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.hidden == 0 || self.embed_dim == 0 || self.n_freq == 0 {
            return Err(Error::invalid(format!("invalid network config {self:?}")));
        }
        Ok(())
    }

    pub fn output_width(&self) -> usize {
        self.embed_dim * self.n_freq
    }

    fn layer_input(&self, layer: usize) -> usize {
        if layer == 0 {
            self.n_freq
        } else {
            2 * self.hidden
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmDirection {
    /// `in x 4H`
    pub w_ih: Array2<f64>,
    /// `H x 4H`
    pub w_hh: Array2<f64>,
    /// `4H`
    pub bias: Array1<f64>,
}

impl LstmDirection {
    fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w_ih: Array2::zeros((input, 4 * hidden)),
            w_hh: Array2::zeros((hidden, 4 * hidden)),
            bias: Array1::zeros(4 * hidden),
        }
    }

    fn hidden(&self) -> usize {
        self.w_hh.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayer {
    pub fwd: LstmDirection,
    pub bwd: LstmDirection,
}

/// All trainable tensors. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub layers: Vec<LstmLayer>,
    /// `2H x K*F`
    pub w_out: Array2<f64>,
    pub b_out: Array1<f64>,
}

pub type ParamGrads = Params;

impl Params {
    pub fn zeros(cfg: &NetConfig) -> Self {
        let layers = (0..cfg.n_layers)
            .map(|l| LstmLayer {
                fwd: LstmDirection::zeros(cfg.layer_input(l), cfg.hidden),
                bwd: LstmDirection::zeros(cfg.layer_input(l), cfg.hidden),
            })
            .collect();
        Self {
            layers,
            w_out: Array2::zeros((2 * cfg.hidden, cfg.output_width())),
            b_out: Array1::zeros(cfg.output_width()),
        }
    }

    /// Tensors in a fixed order, with stable names.
    pub fn named(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            for (dir, d) in [("fwd", &layer.fwd), ("bwd", &layer.bwd)] {
                out.push((format!("lstm.{l}.{dir}.w_ih"), d.w_ih.view().into_dyn()));
                out.push((format!("lstm.{l}.{dir}.w_hh"), d.w_hh.view().into_dyn()));
                out.push((format!("lstm.{l}.{dir}.bias"), d.bias.view().into_dyn()));
            }
        }
        out.push(("out.w".into(), self.w_out.view().into_dyn()));
        out.push(("out.b".into(), self.b_out.view().into_dyn()));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for (dir, d) in [("fwd", &mut layer.fwd), ("bwd", &mut layer.bwd)] {
                out.push((format!("lstm.{l}.{dir}.w_ih"), d.w_ih.view_mut().into_dyn()));
                out.push((format!("lstm.{l}.{dir}.w_hh"), d.w_hh.view_mut().into_dyn()));
                out.push((format!("lstm.{l}.{dir}.bias"), d.bias.view_mut().into_dyn()));
            }
        }
        out.push(("out.w".into(), self.w_out.view_mut().into_dyn()));
        out.push(("out.b".into(), self.b_out.view_mut().into_dyn()));
        out
    }

    pub fn n_values(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn add_assign(&mut self, other: &Params) {
        for ((_, mut a), (_, b)) in self.named_mut().into_iter().zip(other.named()) {
            a += &b;
        }
    }

    pub fn scale(&mut self, k: f64) {
        for (_, mut a) in self.named_mut() {
            a *= k;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.iter().all(|x| x.is_finite()))
    }

    /// Rounds every value to the nearest 32-bit float.
    pub fn round_to_f32(&mut self) {
        for (_, mut a) in self.named_mut() {
            a.mapv_inplace(|x| x as f32 as f64);
        }
    }
}

/// Uniform `(-r, r)` weights with `r = 1/sqrt(fan_in)`, forget-gate biases
/// of 1 and other biases 0. Values are representable as `f32`.
pub fn init_params(cfg: &NetConfig, seed: u64) -> Result<Params> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = Params::zeros(cfg);
    let mut fill = |a: &mut Array2<f64>, fan_in: usize| {
        let r = 1.0 / (fan_in as f64).sqrt();
        a.mapv_inplace(|_| rng.gen_range(-r..r) as f32 as f64);
    };
    let h = cfg.hidden;
    for (l, layer) in p.layers.iter_mut().enumerate() {
        for d in [&mut layer.fwd, &mut layer.bwd] {
            fill(&mut d.w_ih, cfg.layer_input(l));
            fill(&mut d.w_hh, h);
            d.bias.slice_mut(s![h..2 * h]).fill(1.0);
        }
    }
    fill(&mut p.w_out, 2 * h);
    Ok(p)
}

/// `N x K` embeddings, row `t * F + f`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTensor {
    pub v: Array2<f64>,
    pub n_freq: usize,
    pub n_frames: usize,
}

struct DirectionTape {
    /// Activated gates `i, f, g, o`, `T x 4H`.
    gates: Array2<f64>,
    cell: Array2<f64>,
    tanh_cell: Array2<f64>,
    hidden: Array2<f64>,
}

struct LayerTape {
    input: Array2<f64>,
    fwd: DirectionTape,
    bwd: DirectionTape,
}

/// Activations cached by [`forward`] for the matching [`backward`] call.
pub struct TapeState {
    layers: Vec<LayerTape>,
    /// Final `T x 2H` recurrent output.
    top: Array2<f64>,
    /// Activated projection output, `T x K*F`.
    out: Array2<f64>,
    n_frames: usize,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn run_direction(d: &LstmDirection, input: ArrayView2<f64>, reverse: bool) -> DirectionTape {
    let t_len = input.nrows();
    let h = d.hidden();
    let mut z_all = input.dot(&d.w_ih);
    z_all += &d.bias;
    let mut gates = Array2::zeros((t_len, 4 * h));
    let mut cell = Array2::zeros((t_len, h));
    let mut tanh_cell = Array2::zeros((t_len, h));
    let mut hidden = Array2::zeros((t_len, h));
    let mut h_prev = Array1::zeros(h);
    let mut c_prev = Array1::<f64>::zeros(h);
    // row-major 4H x H so each step is a contiguous mat-vec
    let w_hh_t = d.w_hh.t().as_standard_layout().into_owned();
    for step in 0..t_len {
        let t = if reverse { t_len - 1 - step } else { step };
        let mut z = z_all.row(t).to_owned();
        z += &w_hh_t.dot(&h_prev);
        let mut g_row = gates.row_mut(t);
        for j in 0..h {
            let i = sigmoid(z[j]);
            let f = sigmoid(z[h + j]);
            let g = z[2 * h + j].tanh();
            let o = sigmoid(z[3 * h + j]);
            let c = f * c_prev[j] + i * g;
            let tc = c.tanh();
            g_row[j] = i;
            g_row[h + j] = f;
            g_row[2 * h + j] = g;
            g_row[3 * h + j] = o;
            cell[[t, j]] = c;
            tanh_cell[[t, j]] = tc;
            hidden[[t, j]] = o * tc;
        }
        h_prev.assign(&hidden.row(t));
        c_prev.assign(&cell.row(t));
    }
    DirectionTape {
        gates,
        cell,
        tanh_cell,
        hidden,
    }
}

pub fn forward(p: &Params, cfg: &NetConfig, features: &FeatureMatrix) -> Result<(EmbeddingTensor, TapeState)> {
    forward_values(p, cfg, features.values.view())
}

/// [`forward`] on a raw `F x T` feature matrix.
pub fn forward_values(p: &Params, cfg: &NetConfig, features: ArrayView2<f64>) -> Result<(EmbeddingTensor, TapeState)> {
    let (nf, nt) = features.dim();
    if nf != cfg.n_freq {
        return Err(Error::shape(format!(
            "features have {nf} frequency rows, network expects {}",
            cfg.n_freq
        )));
    }
    if nt == 0 {
        return Err(Error::shape("features have zero frames"));
    }
    if p.layers.len() != cfg.n_layers {
        return Err(Error::shape("parameter layer count differs from config"));
    }
    let h = cfg.hidden;
    let mut input = features.t().to_owned();
    let mut layers = Vec::with_capacity(p.layers.len());
    for layer in &p.layers {
        let fwd = run_direction(&layer.fwd, input.view(), false);
        let bwd = run_direction(&layer.bwd, input.view(), true);
        let mut next = Array2::zeros((nt, 2 * h));
        next.slice_mut(s![.., ..h]).assign(&fwd.hidden);
        next.slice_mut(s![.., h..]).assign(&bwd.hidden);
        layers.push(LayerTape { input, fwd, bwd });
        input = next;
    }
    let mut out = input.dot(&p.w_out);
    out += &p.b_out;
    if cfg.activation == OutputActivation::Tanh {
        out.mapv_inplace(f64::tanh);
    }
    if out.iter().any(|x| !x.is_finite()) {
        return Err(Error::Divergence("non-finite embedding".into()));
    }
    // (T, F*K) row-major is exactly (T*F, K) in time-major bin order
    let v = out
        .clone()
        .into_shape_with_order((nt * nf, cfg.embed_dim))
        .expect("contiguous projection output");
    Ok((
        EmbeddingTensor {
            v,
            n_freq: nf,
            n_frames: nt,
        },
        TapeState {
            layers,
            top: input,
            out,
            n_frames: nt,
        },
    ))
}

/// Back-propagates `d_hidden` (`T x H`) through one direction, accumulating
/// into `grads` and returning `dL/d input` (`T x in`).
fn backprop_direction(
    d: &LstmDirection,
    tape: &DirectionTape,
    input: ArrayView2<f64>,
    d_hidden: ArrayView2<f64>,
    reverse: bool,
    grads: &mut LstmDirection,
) -> Array2<f64> {
    let t_len = input.nrows();
    let h = d.hidden();
    let mut dz_all = Array2::zeros((t_len, 4 * h));
    // hidden state fed into each step (zero at the sequence start)
    let mut h_prev_all = Array2::zeros((t_len, h));
    let mut dh_next = Array1::<f64>::zeros(h);
    let mut dc_next = Array1::<f64>::zeros(h);
    for step in (0..t_len).rev() {
        let t = if reverse { t_len - 1 - step } else { step };
        let prev = if step == 0 {
            None
        } else if reverse {
            Some(t + 1)
        } else {
            Some(t - 1)
        };
        let g = tape.gates.row(t);
        let mut dz = dz_all.row_mut(t);
        for j in 0..h {
            let (i, f, gg, o) = (g[j], g[h + j], g[2 * h + j], g[3 * h + j]);
            let tc = tape.tanh_cell[[t, j]];
            let c_prev = prev.map_or(0.0, |p| tape.cell[[p, j]]);
            let dh = d_hidden[[t, j]] + dh_next[j];
            let d_o = dh * tc;
            let dc = dh * o * (1.0 - tc * tc) + dc_next[j];
            dz[j] = dc * gg * i * (1.0 - i);
            dz[h + j] = dc * c_prev * f * (1.0 - f);
            dz[2 * h + j] = dc * i * (1.0 - gg * gg);
            dz[3 * h + j] = d_o * o * (1.0 - o);
            dc_next[j] = dc * f;
        }
        if let Some(p) = prev {
            h_prev_all.row_mut(t).assign(&tape.hidden.row(p));
        }
        dh_next = d.w_hh.dot(&dz_all.row(t));
    }
    grads.w_hh += &h_prev_all.t().dot(&dz_all);
    grads.w_ih += &input.t().dot(&dz_all);
    grads.bias += &dz_all.sum_axis(Axis(0));
    dz_all.dot(&d.w_ih.t())
}

/// Reverse-mode gradient of `sum(grad_v * V)` with respect to every
/// parameter.
pub fn backward(p: &Params, cfg: &NetConfig, tape: &TapeState, grad_v: ArrayView2<f64>) -> Result<ParamGrads> {
    let nt = tape.n_frames;
    if grad_v.dim() != (nt * cfg.n_freq, cfg.embed_dim) {
        return Err(Error::shape(format!(
            "embedding gradient {:?}, expected ({}, {})",
            grad_v.dim(),
            nt * cfg.n_freq,
            cfg.embed_dim
        )));
    }
    let h = cfg.hidden;
    let mut grads = Params::zeros(cfg);
    let mut d_pre = grad_v
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((nt, cfg.output_width()))
        .expect("contiguous gradient");
    if cfg.activation == OutputActivation::Tanh {
        Zip::from(&mut d_pre).and(&tape.out).for_each(|d, &y| *d *= 1.0 - y * y);
    }
    grads.w_out = tape.top.t().dot(&d_pre);
    grads.b_out = d_pre.sum_axis(Axis(0));
    let mut d_top = d_pre.dot(&p.w_out.t());

    for (l, (layer, lt)) in p.layers.iter().zip(&tape.layers).enumerate().rev() {
        let g = &mut grads.layers[l];
        let mut d_in = backprop_direction(
            &layer.fwd,
            &lt.fwd,
            lt.input.view(),
            d_top.slice(s![.., ..h]),
            false,
            &mut g.fwd,
        );
        d_in += &backprop_direction(
            &layer.bwd,
            &lt.bwd,
            lt.input.view(),
            d_top.slice(s![.., h..]),
            true,
            &mut g.bwd,
        );
        d_top = d_in;
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> NetConfig {
        NetConfig {
            n_layers: 1,
            hidden: 2,
            embed_dim: 2,
            n_freq: 3,
            activation: OutputActivation::Tanh,
        }
    }

    fn random_features(rng: &mut impl Rng, nf: usize, nt: usize) -> Array2<f64> {
        Array2::from_shape_fn((nf, nt), |_| rng.gen_range(-1.5..1.5))
    }

    #[test]
    fn init_is_deterministic_with_expected_shapes() {
        let cfg = NetConfig::desk();
        let a = init_params(&cfg, 3).unwrap();
        assert_eq!(a, init_params(&cfg, 3).unwrap());
        assert_ne!(a, init_params(&cfg, 4).unwrap());
        assert_eq!(a.w_out.dim(), (128, 20 * 129));
        assert_eq!(NetConfig::full_scale().output_width(), 2580);
        let b = &a.layers[0].fwd.bias;
        assert!(b.slice(s![64..128]).iter().all(|&x| x == 1.0));
        assert!(b.slice(s![..64]).iter().all(|&x| x == 0.0));
        let r = 1.0 / 129f64.sqrt();
        assert!(a.layers[0].fwd.w_ih.iter().all(|x| x.abs() < r));
        assert!(a.named().iter().all(|(_, t)| t.iter().all(|&x| x as f32 as f64 == x)));
    }

    #[test]
    fn shapes_and_order_sensitivity() {
        let cfg = NetConfig { n_freq: 5, hidden: 4, embed_dim: 3, ..NetConfig::desk() };
        let p = init_params(&cfg, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let one = random_features(&mut rng, 5, 1);
        let (v, _) = forward_values(&p, &cfg, one.view()).unwrap();
        assert_eq!(v.v.dim(), (5, 3));

        let x = random_features(&mut rng, 5, 6);
        let mut rev = x.clone();
        rev.invert_axis(Axis(1));
        let (a, _) = forward_values(&p, &cfg, x.view()).unwrap();
        let (b, _) = forward_values(&p, &cfg, rev.view()).unwrap();
        assert_ne!(a.v, b.v);
        let (again, _) = forward_values(&p, &cfg, x.view()).unwrap();
        assert_eq!(a.v, again.v);
        assert!(forward_values(&p, &cfg, random_features(&mut rng, 4, 2).view()).is_err());
    }

    /// Scalar-loop reference forward pass for a single-layer network.
    fn oracle_forward(p: &Params, cfg: &NetConfig, x: &Array2<f64>) -> Vec<Vec<f64>> {
        let (nf, nt) = x.dim();
        let h = cfg.hidden;
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut outs = vec![vec![0.0; 2 * h]; nt];
        for (di, d) in [&p.layers[0].fwd, &p.layers[0].bwd].into_iter().enumerate() {
            let mut hp = vec![0.0; h];
            let mut cp = vec![0.0; h];
            let order: Vec<usize> = if di == 0 { (0..nt).collect() } else { (0..nt).rev().collect() };
            for t in order {
                let mut z = vec![0.0; 4 * h];
                for (g, zg) in z.iter_mut().enumerate() {
                    *zg = d.bias[g];
                    for f in 0..nf {
                        *zg += x[[f, t]] * d.w_ih[[f, g]];
                    }
                    for j in 0..h {
                        *zg += hp[j] * d.w_hh[[j, g]];
                    }
                }
                for j in 0..h {
                    let c = sig(z[h + j]) * cp[j] + sig(z[j]) * z[2 * h + j].tanh();
                    cp[j] = c;
                    hp[j] = sig(z[3 * h + j]) * c.tanh();
                    outs[t][di * h + j] = hp[j];
                }
            }
        }
        // rows t*F + f, columns k
        let mut v = vec![vec![0.0; cfg.embed_dim]; nt * nf];
        for t in 0..nt {
            for f in 0..nf {
                for k in 0..cfg.embed_dim {
                    let col = f * cfg.embed_dim + k;
                    let mut acc = p.b_out[col];
                    for j in 0..2 * h {
                        acc += outs[t][j] * p.w_out[[j, col]];
                    }
                    v[t * nf + f][k] = acc.tanh();
                }
            }
        }
        v
    }

    #[test]
    fn tiny_net_matches_scalar_oracle() {
        let cfg = tiny_cfg();
        let mut p = Params::zeros(&cfg);
        // hand-set weights: a simple deterministic pattern
        for (n, (_, mut t)) in p.named_mut().into_iter().enumerate() {
            let len = t.len();
            for (i, x) in t.iter_mut().enumerate() {
                *x = ((n * 7 + i * 3) % 11) as f64 / 10.0 - 0.5 + 0.01 * len as f64;
            }
        }
        let x = ndarray::array![[0.5, -1.0], [1.5, 0.25], [-0.75, 2.0]];
        let (v, _) = forward_values(&p, &cfg, x.view()).unwrap();
        let want = oracle_forward(&p, &cfg, &x);
        for (i, row) in want.iter().enumerate() {
            for (k, w) in row.iter().enumerate() {
                assert!((v.v[[i, k]] - w).abs() < 1e-14);
            }
        }
    }

    fn weighted_sum(p: &Params, cfg: &NetConfig, x: &Array2<f64>, gv: &Array2<f64>) -> f64 {
        let (v, _) = forward_values(p, cfg, x.view()).unwrap();
        (&v.v * gv).sum()
    }

    fn gradient_check(cfg: NetConfig, nt: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = init_params(&cfg, seed).unwrap();
        let x = random_features(&mut rng, cfg.n_freq, nt);
        let gv = Array2::from_shape_fn((nt * cfg.n_freq, cfg.embed_dim), |_| rng.gen_range(-1.0..1.0));
        let (_, tape) = forward_values(&p, &cfg, x.view()).unwrap();
        let grads = backward(&p, &cfg, &tape, gv.view()).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        let names: Vec<String> = p.named().into_iter().map(|(n, _)| n).collect();
        for (ti, name) in names.iter().enumerate() {
            let n = p.named()[ti].1.len();
            for idx in 0..n {
                let perturbed = |delta: f64| {
                    let mut q = p.clone();
                    let mut tensors = q.named_mut();
                    *tensors[ti].1.iter_mut().nth(idx).unwrap() += delta;
                    drop(tensors);
                    weighted_sum(&q, &cfg, &x, &gv)
                };
                let fd = (perturbed(h) - perturbed(-h)) / (2.0 * h);
                let an = *grads.named()[ti].1.iter().nth(idx).unwrap();
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(rel < 1e-4, "{name}[{idx}]: analytic {an} numeric {fd}");
                worst = worst.max(rel);
            }
        }
        worst
    }

    #[test]
    fn backward_matches_finite_differences() {
        gradient_check(tiny_cfg(), 3, 1);
        let two_layer = NetConfig { n_layers: 2, hidden: 3, embed_dim: 2, n_freq: 4, activation: OutputActivation::Tanh };
        gradient_check(two_layer, 4, 2);
        let linear = NetConfig { activation: OutputActivation::Identity, ..two_layer };
        gradient_check(linear, 3, 3);
    }

    #[test]
    fn backward_is_linear_in_grad_v() {
        let cfg = NetConfig { n_layers: 2, hidden: 3, embed_dim: 2, n_freq: 4, activation: OutputActivation::Tanh };
        let p = init_params(&cfg, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_features(&mut rng, 4, 5);
        let (_, tape) = forward_values(&p, &cfg, x.view()).unwrap();
        let zero = backward(&p, &cfg, &tape, Array2::zeros((20, 2)).view()).unwrap();
        assert!(zero.named().iter().all(|(_, t)| t.iter().all(|&g| g == 0.0)));

        let gv = Array2::from_shape_fn((20, 2), |_| rng.gen_range(-1.0..1.0));
        let g1 = backward(&p, &cfg, &tape, gv.view()).unwrap();
        let g2 = backward(&p, &cfg, &tape, (&gv * 2.0).view()).unwrap();
        for ((_, a), (_, b)) in g1.named().into_iter().zip(g2.named()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((2.0 * x - y).abs() <= 1e-12 * x.abs().max(1.0));
            }
        }
        assert!(backward(&p, &cfg, &tape, Array2::zeros((19, 2)).view()).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let cfg = tiny_cfg();
        let mut p = init_params(&cfg, 1).unwrap();
        p.b_out[0] = f64::NAN;
        let x = Array2::zeros((3, 2));
        let err = forward_values(&p, &cfg, x.view()).err().unwrap();
        assert!(err.to_string().contains("numerical divergence"));
    }
}
