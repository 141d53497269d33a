use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mat::{matmul, matmul_nt, matmul_tn, Mat};
use crate::{Error, Result};

pub const LN_EPS: f64 = 1e-5;

/// Architecture hyperparameters.
///
/// The reference architecture is far larger (D = 1024, 24 layers); the
/// defaults here are desk-scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictorConfig {
    pub embed_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_dim: usize,
    pub head_dims: [usize; 2],
    pub input_channels: usize,
    pub seq_len: usize,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig {
            embed_dim: 64,
            heads: 4,
            layers: 4,
            ffn_dim: 256,
            head_dims: [50, 10],
            input_channels: 4,
            seq_len: 50,
        }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("embed_dim", self.embed_dim),
            ("heads", self.heads),
            ("layers", self.layers),
            ("ffn_dim", self.ffn_dim),
            ("head_dims[0]", self.head_dims[0]),
            ("head_dims[1]", self.head_dims[1]),
            ("input_channels", self.input_channels),
            ("seq_len", self.seq_len),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_width(&self) -> usize {
        self.embed_dim / self.heads
    }
}

/// Parameter group used for freezing and anchoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    Embed,
    Layer(usize),
    Head,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub wq: Vec<Mat>,
    pub wk: Vec<Mat>,
    pub wv: Vec<Mat>,
    pub wo: Mat,
    pub ln1_gain: Mat,
    pub ln1_bias: Mat,
    pub ffn_w1: Mat,
    pub ffn_b1: Mat,
    pub ffn_w2: Mat,
    pub ffn_b2: Mat,
    pub ln2_gain: Mat,
    pub ln2_bias: Mat,
}

/// All learnable tensors. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    /// `D x C`
    pub embed_w: Mat,
    pub embed_b: Mat,
    pub layers: Vec<LayerParams>,
    /// `D x d1`
    pub head_w1: Mat,
    pub head_b1: Mat,
    pub head_w2: Mat,
    pub head_b2: Mat,
    pub head_w3: Mat,
    pub head_b3: Mat,
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Mat {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let mut m = Mat::zeros(rows, cols);
    for v in &mut m.data {
        *v = rng.random_range(-bound..=bound);
    }
    m
}

fn ones(cols: usize) -> Mat {
    let mut m = Mat::zeros(1, cols);
    m.fill(1.0);
    m
}

impl Params {
    /// Seeded uniform init in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`; layer-norm
    /// gains start at one and biases at zero.
    pub fn init(config: &PredictorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, c, dk, dff) = (
            config.embed_dim,
            config.input_channels,
            config.head_width(),
            config.ffn_dim,
        );
        let [d1, d2] = config.head_dims;
        let embed_w = uniform(&mut rng, d, c, c);
        let embed_b = uniform(&mut rng, 1, d, c);
        let layers = (0..config.layers)
            .map(|_| {
                let mut proj = || {
                    (0..config.heads)
                        .map(|_| uniform(&mut rng, d, dk, d))
                        .collect::<Vec<_>>()
                };
                let wq = proj();
                let wk = proj();
                let wv = proj();
                LayerParams {
                    wq,
                    wk,
                    wv,
                    wo: uniform(&mut rng, d, d, d),
                    ln1_gain: ones(d),
                    ln1_bias: Mat::zeros(1, d),
                    ffn_w1: uniform(&mut rng, d, dff, d),
                    ffn_b1: uniform(&mut rng, 1, dff, d),
                    ffn_w2: uniform(&mut rng, dff, d, dff),
                    ffn_b2: uniform(&mut rng, 1, d, dff),
                    ln2_gain: ones(d),
                    ln2_bias: Mat::zeros(1, d),
                }
            })
            .collect();
        Ok(Params {
            embed_w,
            embed_b,
            layers,
            head_w1: uniform(&mut rng, d, d1, d),
            head_b1: uniform(&mut rng, 1, d1, d),
            head_w2: uniform(&mut rng, d1, d2, d1),
            head_b2: uniform(&mut rng, 1, d2, d1),
            head_w3: uniform(&mut rng, d2, 1, d2),
            head_b3: uniform(&mut rng, 1, 1, d2),
        })
    }

    /// Same shapes, every entry zero.
    pub fn zeros_like(&self) -> Self {
        let mut p = self.clone();
        p.for_each_mut(|_, _, m| m.fill(0.0));
        p
    }

    /// Visits every tensor with its group and a stable name.
    pub fn for_each<'a>(&'a self, mut f: impl FnMut(Group, &str, &'a Mat)) {
        f(Group::Embed, "embed.w", &self.embed_w);
        f(Group::Embed, "embed.b", &self.embed_b);
        for (i, l) in self.layers.iter().enumerate() {
            let g = Group::Layer(i);
            for (h, m) in l.wq.iter().enumerate() {
                f(g, &format!("layer.{i}.wq.{h}"), m);
            }
            for (h, m) in l.wk.iter().enumerate() {
                f(g, &format!("layer.{i}.wk.{h}"), m);
            }
            for (h, m) in l.wv.iter().enumerate() {
                f(g, &format!("layer.{i}.wv.{h}"), m);
            }
            f(g, &format!("layer.{i}.wo"), &l.wo);
            f(g, &format!("layer.{i}.ln1.gain"), &l.ln1_gain);
            f(g, &format!("layer.{i}.ln1.bias"), &l.ln1_bias);
            f(g, &format!("layer.{i}.ffn.w1"), &l.ffn_w1);
            f(g, &format!("layer.{i}.ffn.b1"), &l.ffn_b1);
            f(g, &format!("layer.{i}.ffn.w2"), &l.ffn_w2);
            f(g, &format!("layer.{i}.ffn.b2"), &l.ffn_b2);
            f(g, &format!("layer.{i}.ln2.gain"), &l.ln2_gain);
            f(g, &format!("layer.{i}.ln2.bias"), &l.ln2_bias);
        }
        f(Group::Head, "head.w1", &self.head_w1);
        f(Group::Head, "head.b1", &self.head_b1);
        f(Group::Head, "head.w2", &self.head_w2);
        f(Group::Head, "head.b2", &self.head_b2);
        f(Group::Head, "head.w3", &self.head_w3);
        f(Group::Head, "head.b3", &self.head_b3);
    }

    /// Mutable counterpart of [`Params::for_each`]; identical visiting order.
    pub fn for_each_mut(&mut self, mut f: impl FnMut(Group, &str, &mut Mat)) {
        f(Group::Embed, "embed.w", &mut self.embed_w);
        f(Group::Embed, "embed.b", &mut self.embed_b);
        for (i, l) in self.layers.iter_mut().enumerate() {
            let g = Group::Layer(i);
            for (h, m) in l.wq.iter_mut().enumerate() {
                f(g, &format!("layer.{i}.wq.{h}"), m);
            }
            for (h, m) in l.wk.iter_mut().enumerate() {
                f(g, &format!("layer.{i}.wk.{h}"), m);
            }
            for (h, m) in l.wv.iter_mut().enumerate() {
                f(g, &format!("layer.{i}.wv.{h}"), m);
            }
            f(g, &format!("layer.{i}.wo"), &mut l.wo);
            f(g, &format!("layer.{i}.ln1.gain"), &mut l.ln1_gain);
            f(g, &format!("layer.{i}.ln1.bias"), &mut l.ln1_bias);
            f(g, &format!("layer.{i}.ffn.w1"), &mut l.ffn_w1);
            f(g, &format!("layer.{i}.ffn.b1"), &mut l.ffn_b1);
            f(g, &format!("layer.{i}.ffn.w2"), &mut l.ffn_w2);
            f(g, &format!("layer.{i}.ffn.b2"), &mut l.ffn_b2);
            f(g, &format!("layer.{i}.ln2.gain"), &mut l.ln2_gain);
            f(g, &format!("layer.{i}.ln2.bias"), &mut l.ln2_bias);
        }
        f(Group::Head, "head.w1", &mut self.head_w1);
        f(Group::Head, "head.b1", &mut self.head_b1);
        f(Group::Head, "head.w2", &mut self.head_w2);
        f(Group::Head, "head.b2", &mut self.head_b2);
        f(Group::Head, "head.w3", &mut self.head_w3);
        f(Group::Head, "head.b3", &mut self.head_b3);
    }

    /// Flattened values of the tensors whose group passes `keep`.
    pub fn flatten(&self, keep: impl Fn(Group) -> bool) -> Vec<f64> {
        let mut out = Vec::new();
        self.for_each(|g, _, m| {
            if keep(g) {
                out.extend_from_slice(&m.data);
            }
        });
        out
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.for_each(|_, _, m| n += m.len());
        n
    }

    /// Checks tensor shapes against a config.
    pub fn check_shapes(&self, config: &PredictorConfig) -> Result<()> {
        let reference = Params::init(config, 0)?;
        let mut expected = Vec::new();
        reference.for_each(|_, name, m| expected.push((name.to_string(), m.rows, m.cols)));
        let mut actual = Vec::new();
        self.for_each(|_, name, m| actual.push((name.to_string(), m.rows, m.cols)));
        if expected != actual {
            return Err(Error::Shape(
                "parameter tensors do not match the predictor config".into(),
            ));
        }
        let mut finite = true;
        self.for_each(|_, _, m| finite &= m.data.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(Error::Numerical("non-finite parameter".into()));
        }
        Ok(())
    }
}

/// A configured model with its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorModel {
    pub config: PredictorConfig,
    pub params: Params,
}

impl PredictorModel {
    pub fn new(config: PredictorConfig, seed: u64) -> Result<Self> {
        let params = Params::init(&config, seed)?;
        Ok(PredictorModel { config, params })
    }

    pub fn check_input(&self, x: &Mat) -> Result<()> {
        if x.cols != self.config.input_channels || x.rows != self.config.seq_len {
            return Err(Error::Shape(format!(
                "input is {}x{}, model expects {}x{}",
                x.rows, x.cols, self.config.seq_len, self.config.input_channels
            )));
        }
        Ok(())
    }

    pub fn predict(&self, x: &Mat) -> Result<f64> {
        self.check_input(x)?;
        Ok(forward(&self.params, x).y)
    }

    pub fn predict_batch(&self, xs: &[Mat]) -> Result<Vec<f64>> {
        xs.iter().map(|x| self.predict(x)).collect()
    }
}

/// `E = X W_e^T + b_e`; no positional term.
pub fn embed_signal(x: &Mat, w: &Mat, b: &Mat) -> Result<Mat> {
    if x.cols != w.cols || b.cols != w.rows || b.rows != 1 {
        return Err(Error::Shape(format!(
            "embed: X {}x{}, W_e {}x{}, b_e {}x{}",
            x.rows, x.cols, w.rows, w.cols, b.rows, b.cols
        )));
    }
    let mut e = matmul_nt(x, w);
    e.add_row(b);
    Ok(e)
}

/// Row softmax of `Q K^T / sqrt(d_k)`; with `causal` row `t` only sees
/// columns `<= t`. Masked weights are exactly zero.
pub fn attention_weights(q: &Mat, k: &Mat, causal: bool) -> Mat {
    let scale = 1.0 / (q.cols as f64).sqrt();
    let mut p = Mat::zeros(q.rows, k.rows);
    for t in 0..q.rows {
        let visible = if causal { (t + 1).min(k.rows) } else { k.rows };
        let row = p.row_mut(t);
        let qt = q.row(t);
        for (j, slot) in row.iter_mut().enumerate().take(visible) {
            *slot = qt.iter().zip(k.row(j)).map(|(a, b)| a * b).sum::<f64>() * scale;
        }
        let max = row[..visible]
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in &mut row[..visible] {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in &mut row[..visible] {
            *v /= sum;
        }
    }
    p
}

/// Scaled dot-product attention.
pub fn attention(q: &Mat, k: &Mat, v: &Mat, causal: bool) -> Mat {
    matmul(&attention_weights(q, k, causal), v)
}

/// Multi-head attention, heads concatenated then projected by `W^O`.
pub fn mha(x: &Mat, layer: &LayerParams, causal: bool) -> Mat {
    let dk = layer.wq[0].cols;
    let mut concat = Mat::zeros(x.rows, dk * layer.wq.len());
    for h in 0..layer.wq.len() {
        let q = matmul(x, &layer.wq[h]);
        let k = matmul(x, &layer.wk[h]);
        let v = matmul(x, &layer.wv[h]);
        concat.set_cols(h * dk, &attention(&q, &k, &v, causal));
    }
    matmul(&concat, &layer.wo)
}

#[derive(Debug, Clone)]
struct LnCache {
    xhat: Mat,
    inv_std: Vec<f64>,
}

/// Per-row normalization to zero mean / unit variance, before gain and bias.
pub fn normalize_rows(x: &Mat) -> Mat {
    layer_norm_core(x).xhat
}

fn layer_norm_core(x: &Mat) -> LnCache {
    let mut xhat = x.clone();
    let mut inv_std = Vec::with_capacity(x.rows);
    let n = x.cols as f64;
    for r in 0..x.rows {
        let row = xhat.row_mut(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let is = 1.0 / (var + LN_EPS).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * is;
        }
        inv_std.push(is);
    }
    LnCache { xhat, inv_std }
}

fn layer_norm(x: &Mat, gain: &Mat, bias: &Mat) -> (Mat, LnCache) {
    let cache = layer_norm_core(x);
    let mut y = cache.xhat.clone();
    for r in 0..y.rows {
        for ((v, g), b) in y.row_mut(r).iter_mut().zip(&gain.data).zip(&bias.data) {
            *v = *v * g + b;
        }
    }
    (y, cache)
}

/// Returns dX; accumulates dgain/dbias.
fn layer_norm_backward(dy: &Mat, cache: &LnCache, gain: &Mat, dgain: &mut Mat, dbias: &mut Mat) -> Mat {
    let n = dy.cols as f64;
    let mut dx = Mat::zeros(dy.rows, dy.cols);
    for r in 0..dy.rows {
        let dyr = dy.row(r);
        let xh = cache.xhat.row(r);
        let mut dxhat = vec![0.0; dy.cols];
        for c in 0..dy.cols {
            dgain.data[c] += dyr[c] * xh[c];
            dbias.data[c] += dyr[c];
            dxhat[c] = dyr[c] * gain.data[c];
        }
        let mean_d = dxhat.iter().sum::<f64>() / n;
        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n;
        let is = cache.inv_std[r];
        for (c, out) in dx.row_mut(r).iter_mut().enumerate() {
            *out = is * (dxhat[c] - mean_d - xh[c] * mean_dx);
        }
    }
    dx
}

fn relu(m: &Mat) -> Mat {
    Mat {
        rows: m.rows,
        cols: m.cols,
        data: m.data.iter().map(|v| v.max(0.0)).collect(),
    }
}

fn relu_backward(d: &mut Mat, pre: &Mat) {
    for (g, p) in d.data.iter_mut().zip(&pre.data) {
        if *p <= 0.0 {
            *g = 0.0;
        }
    }
}

#[derive(Debug, Clone)]
struct LayerCache {
    input: Mat,
    q: Vec<Mat>,
    k: Vec<Mat>,
    v: Vec<Mat>,
    p: Vec<Mat>,
    concat: Mat,
    ln1: LnCache,
    y1: Mat,
    f1: Mat,
    z: Mat,
    ln2: LnCache,
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    x: Mat,
    layers: Vec<LayerCache>,
    /// Final transformer representation before pooling (`L x D`).
    pub hidden: Mat,
    pooled: Mat,
    z1: Mat,
    a1: Mat,
    z2: Mat,
    a2: Mat,
    pub y: f64,
}

/// Full forward pass with causal masking. Input shape must already be checked.
pub fn forward(params: &Params, x: &Mat) -> ForwardCache {
    let mut h = matmul_nt(x, &params.embed_w);
    h.add_row(&params.embed_b);
    let mut caches = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let heads = layer.wq.len();
        let dk = layer.wq[0].cols;
        let mut concat = Mat::zeros(h.rows, heads * dk);
        let (mut qs, mut ks, mut vs, mut ps) = (
            Vec::with_capacity(heads),
            Vec::with_capacity(heads),
            Vec::with_capacity(heads),
            Vec::with_capacity(heads),
        );
        for hd in 0..heads {
            let q = matmul(&h, &layer.wq[hd]);
            let k = matmul(&h, &layer.wk[hd]);
            let v = matmul(&h, &layer.wv[hd]);
            let p = attention_weights(&q, &k, true);
            concat.set_cols(hd * dk, &matmul(&p, &v));
            qs.push(q);
            ks.push(k);
            vs.push(v);
            ps.push(p);
        }
        let mut r1 = matmul(&concat, &layer.wo);
        r1.add_assign(&h);
        let (y1, ln1) = layer_norm(&r1, &layer.ln1_gain, &layer.ln1_bias);
        let mut f1 = matmul(&y1, &layer.ffn_w1);
        f1.add_row(&layer.ffn_b1);
        let z = relu(&f1);
        let mut r2 = matmul(&z, &layer.ffn_w2);
        r2.add_row(&layer.ffn_b2);
        r2.add_assign(&y1);
        let (y2, ln2) = layer_norm(&r2, &layer.ln2_gain, &layer.ln2_bias);
        caches.push(LayerCache {
            input: h,
            q: qs,
            k: ks,
            v: vs,
            p: ps,
            concat,
            ln1,
            y1,
            f1,
            z,
            ln2,
        });
        h = y2;
    }
    let mut pooled = h.col_sums();
    let inv_l = 1.0 / h.rows as f64;
    pooled.data.iter_mut().for_each(|v| *v *= inv_l);
    let mut z1 = matmul(&pooled, &params.head_w1);
    z1.add_row(&params.head_b1);
    let a1 = relu(&z1);
    let mut z2 = matmul(&a1, &params.head_w2);
    z2.add_row(&params.head_b2);
    let a2 = relu(&z2);
    let y = matmul(&a2, &params.head_w3).data[0] + params.head_b3.data[0];
    ForwardCache {
        x: x.clone(),
        layers: caches,
        hidden: h,
        pooled,
        z1,
        a1,
        z2,
        a2,
        y,
    }
}

/// Accumulates `dy * d(y)/d(params)` into `grads`.
pub fn backward(params: &Params, cache: &ForwardCache, dy: f64, grads: &mut Params) {
    // head
    grads.head_b3.data[0] += dy;
    grads.head_w3.axpy(dy, &transpose_row(&cache.a2));
    let mut da2 = Mat::zeros(1, params.head_w3.rows);
    for (i, v) in da2.data.iter_mut().enumerate() {
        *v = dy * params.head_w3.data[i];
    }
    relu_backward(&mut da2, &cache.z2);
    grads.head_b2.add_assign(&da2);
    grads.head_w2.add_assign(&matmul_tn(&cache.a1, &da2));
    let mut da1 = matmul_nt(&da2, &params.head_w2);
    relu_backward(&mut da1, &cache.z1);
    grads.head_b1.add_assign(&da1);
    grads.head_w1.add_assign(&matmul_tn(&cache.pooled, &da1));
    let dpooled = matmul_nt(&da1, &params.head_w1);

    // mean pool
    let l = cache.hidden.rows;
    let mut dh = Mat::zeros(l, cache.hidden.cols);
    let inv_l = 1.0 / l as f64;
    for r in 0..l {
        for (o, g) in dh.row_mut(r).iter_mut().zip(&dpooled.data) {
            *o = g * inv_l;
        }
    }

    for (li, layer) in params.layers.iter().enumerate().rev() {
        let c = &cache.layers[li];
        let g = &mut grads.layers[li];
        let dr2 = layer_norm_backward(&dh, &c.ln2, &layer.ln2_gain, &mut g.ln2_gain, &mut g.ln2_bias);
        // FFN branch + residual
        g.ffn_b2.add_assign(&dr2.col_sums());
        g.ffn_w2.add_assign(&matmul_tn(&c.z, &dr2));
        let mut dz = matmul_nt(&dr2, &layer.ffn_w2);
        relu_backward(&mut dz, &c.f1);
        g.ffn_b1.add_assign(&dz.col_sums());
        g.ffn_w1.add_assign(&matmul_tn(&c.y1, &dz));
        let mut dy1 = matmul_nt(&dz, &layer.ffn_w1);
        dy1.add_assign(&dr2);
        let dr1 = layer_norm_backward(&dy1, &c.ln1, &layer.ln1_gain, &mut g.ln1_gain, &mut g.ln1_bias);
        // attention branch + residual
        g.wo.add_assign(&matmul_tn(&c.concat, &dr1));
        let dconcat = matmul_nt(&dr1, &layer.wo);
        let mut dinput = dr1;
        let dk = layer.wq[0].cols;
        let scale = 1.0 / (dk as f64).sqrt();
        for hd in 0..layer.wq.len() {
            let da = dconcat.cols_slice(hd * dk, dk);
            let p = &c.p[hd];
            let dp = matmul_nt(&da, &c.v[hd]);
            let dv = matmul_tn(p, &da);
            let mut ds = Mat::zeros(p.rows, p.cols);
            for t in 0..p.rows {
                let pr = p.row(t);
                let dpr = dp.row(t);
                let dot: f64 = pr.iter().zip(dpr).map(|(a, b)| a * b).sum();
                for (j, s) in ds.row_mut(t).iter_mut().enumerate() {
                    *s = pr[j] * (dpr[j] - dot) * scale;
                }
            }
            let dq = matmul(&ds, &c.k[hd]);
            let dkm = matmul_tn(&ds, &c.q[hd]);
            g.wq[hd].add_assign(&matmul_tn(&c.input, &dq));
            g.wk[hd].add_assign(&matmul_tn(&c.input, &dkm));
            g.wv[hd].add_assign(&matmul_tn(&c.input, &dv));
            dinput.add_assign(&matmul_nt(&dq, &layer.wq[hd]));
            dinput.add_assign(&matmul_nt(&dkm, &layer.wk[hd]));
            dinput.add_assign(&matmul_nt(&dv, &layer.wv[hd]));
        }
        dh = dinput;
    }

    // embedding: E = X W^T + b  =>  dW = dE^T X
    grads.embed_b.add_assign(&dh.col_sums());
    grads.embed_w.add_assign(&matmul_tn(&dh, &cache.x));
}

fn transpose_row(v: &Mat) -> Mat {
    Mat {
        rows: v.cols,
        cols: v.rows,
        data: v.data.clone(),
    }
}
