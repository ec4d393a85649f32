//! Forward pass, loss and hand-written backpropagation for the decoder.
//!
//! All math is plain `ndarray` over a single sequence (T x channels);
//! batches are handled by the trainer, which accumulates gradients over
//! sequences. Keeping the forward strictly deterministic (dropout happens
//! during batch preparation, not here) lets the gradient check use central
//! finite differences directly.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use super::{Layout, ModelParams};

const LN_EPS: f64 = 1e-5;
/// Probabilities are clamped to [EPS, 1-EPS] inside the BCE logs.
pub const BCE_EPS: f64 = 1e-7;

/// Per-position predictions for a sequence of length T.
#[derive(Debug, Clone)]
pub struct Outputs {
    pub q: Array2<f64>,         // T x 108
    pub v: Array2<f64>,         // T x 3
    pub c_bits: Array2<f64>,    // T x 5, after sigmoid
    pub c_offsets: Array2<f64>, // T x 15
}

struct LayerCache {
    h_in: Array2<f64>,
    ln1_xhat: Array2<f64>,
    ln1_istd: Array1<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Vec<Array2<f64>>, // per head, T x T (zero above diagonal)
    ctx: Array2<f64>,
    h_mid: Array2<f64>,
    ln2_xhat: Array2<f64>,
    ln2_istd: Array1<f64>,
    ff_act: Array2<f64>, // after relu
}

/// Intermediate activations retained for the backward pass.
pub struct NetCache {
    x: Array2<f64>,
    layers: Vec<LayerCache>,
    final_xhat: Array2<f64>,
    final_istd: Array1<f64>,
    hf: Array2<f64>,
    gru_s: Array2<f64>, // T x S, states after each step
    gru_z: Array2<f64>,
    gru_r: Array2<f64>,
    gru_hc: Array2<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Row-wise layer norm; returns (output, xhat, inverse std).
fn layer_norm(
    x: &Array2<f64>,
    g: &ndarray::ArrayView1<f64>,
    b: &ndarray::ArrayView1<f64>,
) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut istd = Array1::zeros(x.nrows());
    for (i, mut row) in xhat.rows_mut().into_iter().enumerate() {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        row.mapv_inplace(|v| v * inv);
        istd[i] = inv;
    }
    let mut out = xhat.clone();
    for mut row in out.rows_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = *v * g[j] + b[j];
        }
    }
    (out, xhat, istd)
}

/// Backward through layer norm. Accumulates dg/db into the grad buffer and
/// returns dx.
fn layer_norm_backward(
    dy: &Array2<f64>,
    xhat: &Array2<f64>,
    istd: &Array1<f64>,
    g: &ndarray::ArrayView1<f64>,
    dg: &mut [f64],
    db: &mut [f64],
) -> Array2<f64> {
    let d = dy.ncols() as f64;
    let mut dx = Array2::zeros(dy.raw_dim());
    for i in 0..dy.nrows() {
        let dyr = dy.row(i);
        let xh = xhat.row(i);
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for j in 0..dy.ncols() {
            let dxh = dyr[j] * g[j];
            sum_dxhat += dxh;
            sum_dxhat_xhat += dxh * xh[j];
            dg[j] += dyr[j] * xh[j];
            db[j] += dyr[j];
        }
        let mut dxr = dx.row_mut(i);
        for j in 0..dy.ncols() {
            let dxh = dyr[j] * g[j];
            dxr[j] = istd[i] * (dxh - sum_dxhat / d - xh[j] * sum_dxhat_xhat / d);
        }
    }
    dx
}

fn add_bias(x: &mut Array2<f64>, b: &ndarray::ArrayView1<f64>) {
    for mut row in x.rows_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v += b[j];
        }
    }
}

/// Runs the decoder over one input sequence (T x INPUT_DIM, T <= M+1).
/// Output at position t attends to positions <= t only; masked scores are
/// excluded from both the softmax max and the normalizing sum, so later
/// inputs cannot perturb earlier outputs even at the bit level.
pub fn forward(params: &ModelParams, x: &ArrayView2<f64>) -> (Outputs, NetCache) {
    let cfg = &params.config;
    let lay = &params.layout;
    let p = &params.data;
    let t = x.nrows();
    assert!(t >= 1 && t <= cfg.max_window + 1, "window length {t} out of range");
    let d = cfg.embed_dim;
    let nh = cfg.n_heads;
    let dh = d / nh;
    let scale = 1.0 / (dh as f64).sqrt();

    let mut h = x.dot(&lay.view(p, "embed.w"));
    add_bias(&mut h, &lay.row(p, "embed.b"));
    let pos = lay.view(p, "pos");
    for i in 0..t {
        let mut row = h.row_mut(i);
        for j in 0..d {
            row[j] += pos[(i, j)];
        }
    }

    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let name = |suf: &str| format!("layer{l}.{suf}");
        let h_in = h.clone();
        let (a, ln1_xhat, ln1_istd) =
            layer_norm(&h, &lay.row(p, &name("ln1.g")), &lay.row(p, &name("ln1.b")));
        let mut q = a.dot(&lay.view(p, &name("attn.wq")));
        add_bias(&mut q, &lay.row(p, &name("attn.bq")));
        let mut k = a.dot(&lay.view(p, &name("attn.wk")));
        add_bias(&mut k, &lay.row(p, &name("attn.bk")));
        let mut v = a.dot(&lay.view(p, &name("attn.wv")));
        add_bias(&mut v, &lay.row(p, &name("attn.bv")));

        let mut ctx = Array2::zeros((t, d));
        let mut attn_heads = Vec::with_capacity(nh);
        for head in 0..nh {
            let cols = s![.., head * dh..(head + 1) * dh];
            let qh = q.slice(cols);
            let kh = k.slice(cols);
            let vh = v.slice(cols);
            let mut attn = Array2::zeros((t, t));
            for i in 0..t {
                // causal: scores only over j <= i
                let mut max = f64::NEG_INFINITY;
                let mut scores = vec![0.0; i + 1];
                for (j, sc) in scores.iter_mut().enumerate() {
                    *sc = qh.row(i).dot(&kh.row(j)) * scale;
                    if *sc > max {
                        max = *sc;
                    }
                }
                let mut sum = 0.0;
                for sc in scores.iter_mut() {
                    *sc = (*sc - max).exp();
                    sum += *sc;
                }
                for (j, sc) in scores.iter().enumerate() {
                    attn[(i, j)] = sc / sum;
                }
            }
            let ctxh = attn.dot(&vh);
            ctx.slice_mut(cols).assign(&ctxh);
            attn_heads.push(attn);
        }
        let mut o = ctx.dot(&lay.view(p, &name("attn.wo")));
        add_bias(&mut o, &lay.row(p, &name("attn.bo")));
        h = &h + &o;

        let h_mid = h.clone();
        let (a2, ln2_xhat, ln2_istd) =
            layer_norm(&h, &lay.row(p, &name("ln2.g")), &lay.row(p, &name("ln2.b")));
        let mut ff = a2.dot(&lay.view(p, &name("ff.w1")));
        add_bias(&mut ff, &lay.row(p, &name("ff.b1")));
        ff.mapv_inplace(|v| v.max(0.0));
        let ff_act = ff.clone();
        let mut ff_out = ff.dot(&lay.view(p, &name("ff.w2")));
        add_bias(&mut ff_out, &lay.row(p, &name("ff.b2")));
        h = &h + &ff_out;

        layers.push(LayerCache {
            h_in,
            ln1_xhat,
            ln1_istd,
            q,
            k,
            v,
            attn: attn_heads,
            ctx,
            h_mid,
            ln2_xhat,
            ln2_istd,
            ff_act,
        });
    }

    let (hf, final_xhat, final_istd) =
        layer_norm(&h, &lay.row(p, "final_ln.g"), &lay.row(p, "final_ln.b"));

    // recurrent summarizer over time (forward direction preserves causality)
    let sw = cfg.summarizer_width;
    let wz = lay.view(p, "gru.wz");
    let uz = lay.view(p, "gru.uz");
    let bz = lay.row(p, "gru.bz");
    let wr = lay.view(p, "gru.wr");
    let ur = lay.view(p, "gru.ur");
    let br = lay.row(p, "gru.br");
    let wh = lay.view(p, "gru.wh");
    let uh = lay.view(p, "gru.uh");
    let bh = lay.row(p, "gru.bh");
    let mut gru_s = Array2::zeros((t, sw));
    let mut gru_z = Array2::zeros((t, sw));
    let mut gru_r = Array2::zeros((t, sw));
    let mut gru_hc = Array2::zeros((t, sw));
    let mut state = Array1::<f64>::zeros(sw);
    for i in 0..t {
        let xr = hf.row(i);
        let z: Array1<f64> = (&xr.dot(&wz) + &state.dot(&uz) + &bz).mapv(sigmoid);
        let r: Array1<f64> = (&xr.dot(&wr) + &state.dot(&ur) + &br).mapv(sigmoid);
        let rs = &r * &state;
        let hc: Array1<f64> = (&xr.dot(&wh) + &rs.dot(&uh) + &bh).mapv(f64::tanh);
        state = &(&state * &(1.0 - &z)) + &(&z * &hc);
        gru_z.row_mut(i).assign(&z);
        gru_r.row_mut(i).assign(&r);
        gru_hc.row_mut(i).assign(&hc);
        gru_s.row_mut(i).assign(&state);
    }

    let mut q_out = gru_s.dot(&lay.view(p, "head_q.w"));
    add_bias(&mut q_out, &lay.row(p, "head_q.b"));
    let mut v_out = gru_s.dot(&lay.view(p, "head_v.w"));
    add_bias(&mut v_out, &lay.row(p, "head_v.b"));
    let mut cb = gru_s.dot(&lay.view(p, "head_cb.w"));
    add_bias(&mut cb, &lay.row(p, "head_cb.b"));
    cb.mapv_inplace(sigmoid);
    let mut cr = gru_s.dot(&lay.view(p, "head_cr.w"));
    add_bias(&mut cr, &lay.row(p, "head_cr.b"));

    (
        Outputs { q: q_out, v: v_out, c_bits: cb, c_offsets: cr },
        NetCache {
            x: x.to_owned(),
            layers,
            final_xhat,
            final_istd,
            hf,
            gru_s,
            gru_z,
            gru_r,
            gru_hc,
        },
    )
}

/// Per-position targets for one sequence.
#[derive(Debug, Clone)]
pub struct Targets {
    pub q: Array2<f64>,         // T x 108
    pub v: Array2<f64>,         // T x 3
    pub c_bits: Array2<f64>,    // T x 5, in {0,1}
    pub c_offsets: Array2<f64>, // T x 15
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LossBreakdown {
    pub joint: f64,
    pub root: f64,
    pub contact: f64,
    pub total: f64,
    /// Normalizing count: batch size x positions.
    pub positions: usize,
}

impl LossBreakdown {
    pub fn merge(&mut self, other: &LossBreakdown) {
        let n = (self.positions + other.positions) as f64;
        if n == 0.0 {
            return;
        }
        let w0 = self.positions as f64 / n;
        let w1 = other.positions as f64 / n;
        self.joint = self.joint * w0 + other.joint * w1;
        self.root = self.root * w0 + other.root * w1;
        self.contact = self.contact * w0 + other.contact * w1;
        self.total = self.total * w0 + other.total * w1;
        self.positions += other.positions;
    }
}

/// L = L_J + L_R + L_C: squared 6D joint-rotation error, squared root
/// velocity error, and squared offsets plus binary cross-entropy on the
/// contact bits; each term is a per-position sum, averaged over positions.
pub fn compute_loss(pred: &Outputs, target: &Targets) -> Result<LossBreakdown, super::ModelError> {
    let t = pred.q.nrows();
    if target.q.nrows() != t || target.v.nrows() != t || target.c_bits.nrows() != t {
        return Err(super::ModelError::ShapeMismatch("pred/target length".into()));
    }
    let mut joint = 0.0;
    let mut root = 0.0;
    let mut contact = 0.0;
    for i in 0..t {
        joint += (&pred.q.row(i) - &target.q.row(i)).mapv(|d| d * d).sum();
        root += (&pred.v.row(i) - &target.v.row(i)).mapv(|d| d * d).sum();
        contact += (&pred.c_offsets.row(i) - &target.c_offsets.row(i))
            .mapv(|d| d * d)
            .sum();
        for j in 0..5 {
            let p = pred.c_bits[(i, j)].clamp(BCE_EPS, 1.0 - BCE_EPS);
            let y = target.c_bits[(i, j)];
            contact += -y * p.ln() - (1.0 - y) * (1.0 - p).ln();
        }
    }
    let n = t as f64;
    let out = LossBreakdown {
        joint: joint / n,
        root: root / n,
        contact: contact / n,
        total: (joint + root + contact) / n,
        positions: t,
    };
    if !out.total.is_finite() {
        return Err(super::ModelError::NonFinite);
    }
    Ok(out)
}

/// Backpropagates the loss for one sequence, accumulating parameter
/// gradients into `grads` (same flat layout as the parameters). Gradients
/// are of the per-position-averaged loss scaled by `weight`; the trainer
/// passes `T / (total positions in batch)` so the batch sum matches the
/// batch-averaged loss.
pub fn backward(
    params: &ModelParams,
    cache: &NetCache,
    pred: &Outputs,
    target: &Targets,
    weight: f64,
    grads: &mut [f64],
) {
    let cfg = &params.config;
    let lay = &params.layout;
    let p = &params.data;
    let t = cache.x.nrows();
    let d = cfg.embed_dim;
    let nh = cfg.n_heads;
    let dh = d / nh;
    let scale = 1.0 / (dh as f64).sqrt();
    let coef = 2.0 * weight / t as f64; // d/dx of x^2 with the position average

    // output heads -> d(summarizer state)
    let dq = (&pred.q - &target.q) * coef;
    let dv = (&pred.v - &target.v) * coef;
    let dcr = (&pred.c_offsets - &target.c_offsets) * coef;
    // BCE through sigmoid: d(logit) = p - y (clamp only guards the logs)
    let dcb_logit = (&pred.c_bits - &target.c_bits) * (weight / t as f64);

    let mut ds_all = Array2::zeros(cache.gru_s.raw_dim());
    {
        let heads: [(&str, &Array2<f64>); 4] = [
            ("head_q", &dq),
            ("head_v", &dv),
            ("head_cb", &dcb_logit),
            ("head_cr", &dcr),
        ];
        for (name, dout) in heads {
            let w = lay.view(p, &format!("{name}.w"));
            let sp_w = lay.spec(&format!("{name}.w"));
            let sp_b = lay.spec(&format!("{name}.b"));
            let dw = cache.gru_s.t().dot(dout);
            for (gslot, gval) in grads[sp_w.offset..sp_w.offset + sp_w.rows * sp_w.cols]
                .iter_mut()
                .zip(dw.iter())
            {
                *gslot += gval;
            }
            let db = dout.sum_axis(Axis(0));
            for (gslot, gval) in grads[sp_b.offset..sp_b.offset + sp_b.cols]
                .iter_mut()
                .zip(db.iter())
            {
                *gslot += gval;
            }
            ds_all = &ds_all + &dout.dot(&w.t());
        }
    }

    // GRU backward through time
    let sw = cfg.summarizer_width;
    let uz = lay.view(p, "gru.uz");
    let ur = lay.view(p, "gru.ur");
    let uh = lay.view(p, "gru.uh");
    let wz = lay.view(p, "gru.wz");
    let wr = lay.view(p, "gru.wr");
    let wh = lay.view(p, "gru.wh");
    let mut dhf_x = Array2::zeros((t, d));
    let mut ds_next: Array1<f64> = Array1::zeros(sw);
    let mut acc = GruGrads::new(lay, grads);
    for i in (0..t).rev() {
        let ds: Array1<f64> = &ds_all.row(i).to_owned() + &ds_next;
        let z = cache.gru_z.row(i).to_owned();
        let r = cache.gru_r.row(i).to_owned();
        let hc = cache.gru_hc.row(i).to_owned();
        let s_prev: Array1<f64> = if i == 0 {
            Array1::zeros(sw)
        } else {
            cache.gru_s.row(i - 1).to_owned()
        };
        let xr = cache.hf.row(i).to_owned();

        let dz = &ds * &(&hc - &s_prev);
        let dhc = &ds * &z;
        let mut ds_prev: Array1<f64> = &ds * &(1.0 - &z);

        let dhc_pre = &dhc * &hc.mapv(|v| 1.0 - v * v);
        let rs = &r * &s_prev;
        acc.accumulate("gru.wh", &xr, &dhc_pre);
        acc.accumulate("gru.uh", &rs, &dhc_pre);
        acc.bias("gru.bh", &dhc_pre);
        let drs = dhc_pre.dot(&uh.t());
        let dr = &drs * &s_prev;
        ds_prev = &ds_prev + &(&drs * &r);

        let dr_pre = &dr * &(&r * &r.mapv(|v| 1.0 - v));
        acc.accumulate("gru.wr", &xr, &dr_pre);
        acc.accumulate("gru.ur", &s_prev, &dr_pre);
        acc.bias("gru.br", &dr_pre);
        ds_prev = &ds_prev + &dr_pre.dot(&ur.t());

        let dz_pre = &dz * &(&z * &z.mapv(|v| 1.0 - v));
        acc.accumulate("gru.wz", &xr, &dz_pre);
        acc.accumulate("gru.uz", &s_prev, &dz_pre);
        acc.bias("gru.bz", &dz_pre);
        ds_prev = &ds_prev + &dz_pre.dot(&uz.t());

        let dx: Array1<f64> =
            &(&dhc_pre.dot(&wh.t()) + &dr_pre.dot(&wr.t())) + &dz_pre.dot(&wz.t());
        dhf_x.row_mut(i).assign(&dx);
        ds_next = ds_prev;
    }
    drop(acc);

    // final layer norm
    let mut dhid = {
        let g = lay.row(p, "final_ln.g");
        let (gsp, bsp) = (lay.spec("final_ln.g"), lay.spec("final_ln.b"));
        let (mut dg, mut db) = (vec![0.0; d], vec![0.0; d]);
        let dx = layer_norm_backward(
            &dhf_x,
            &cache.final_xhat,
            &cache.final_istd,
            &g,
            &mut dg,
            &mut db,
        );
        for (slot, v) in grads[gsp.offset..gsp.offset + d].iter_mut().zip(&dg) {
            *slot += v;
        }
        for (slot, v) in grads[bsp.offset..bsp.offset + d].iter_mut().zip(&db) {
            *slot += v;
        }
        dx
    };

    for l in (0..cfg.n_layers).rev() {
        let c = &cache.layers[l];
        let name = |suf: &str| format!("layer{l}.{suf}");

        // feed-forward sub-block
        let a2 = {
            // recompute ln2 output from cached xhat (cheaper than storing it)
            let g = lay.row(p, &name("ln2.g"));
            let b = lay.row(p, &name("ln2.b"));
            let mut out = c.ln2_xhat.clone();
            for mut row in out.rows_mut() {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = *v * g[j] + b[j];
                }
            }
            out
        };
        let dff_out = dhid.clone(); // residual: gradient flows to both branch and skip
        let w2 = lay.view(p, &name("ff.w2"));
        accumulate_linear(lay, grads, &name("ff.w2"), &name("ff.b2"), &c.ff_act, &dff_out);
        let mut dff_act = dff_out.dot(&w2.t());
        // relu gate
        ndarray::Zip::from(&mut dff_act).and(&c.ff_act).for_each(|g, &a| {
            if a <= 0.0 {
                *g = 0.0;
            }
        });
        accumulate_linear(lay, grads, &name("ff.w1"), &name("ff.b1"), &a2, &dff_act);
        let w1 = lay.view(p, &name("ff.w1"));
        let da2 = dff_act.dot(&w1.t());
        let dx_ln2 = {
            let g = lay.row(p, &name("ln2.g"));
            let (gsp, bsp) = (lay.spec(&name("ln2.g")), lay.spec(&name("ln2.b")));
            let (mut dg, mut db) = (vec![0.0; d], vec![0.0; d]);
            let dx = layer_norm_backward(&da2, &c.ln2_xhat, &c.ln2_istd, &g, &mut dg, &mut db);
            for (slot, v) in grads[gsp.offset..gsp.offset + d].iter_mut().zip(&dg) {
                *slot += v;
            }
            for (slot, v) in grads[bsp.offset..bsp.offset + d].iter_mut().zip(&db) {
                *slot += v;
            }
            dx
        };
        dhid = &dhid + &dx_ln2;
        let _ = &c.h_mid; // h_mid = h_in + attn_out; gradient flows via dh directly

        // attention sub-block
        let do_out = dhid.clone();
        accumulate_linear(lay, grads, &name("attn.wo"), &name("attn.bo"), &c.ctx, &do_out);
        let wo = lay.view(p, &name("attn.wo"));
        let dctx = do_out.dot(&wo.t());

        let mut dq_full = Array2::zeros((t, d));
        let mut dk_full = Array2::zeros((t, d));
        let mut dv_full = Array2::zeros((t, d));
        for head in 0..nh {
            let cols = s![.., head * dh..(head + 1) * dh];
            let attn = &c.attn[head];
            let qh = c.q.slice(cols);
            let kh = c.k.slice(cols);
            let vh = c.v.slice(cols);
            let dctxh = dctx.slice(cols);
            // dV = attn^T dctx
            let dvh = attn.t().dot(&dctxh);
            dv_full.slice_mut(cols).assign(&dvh);
            // dattn = dctx V^T ; softmax backward rowwise over j <= i
            let dattn = dctxh.dot(&vh.t());
            let mut dscore = Array2::zeros((t, t));
            for i in 0..t {
                let mut dot = 0.0;
                for j in 0..=i {
                    dot += dattn[(i, j)] * attn[(i, j)];
                }
                for j in 0..=i {
                    dscore[(i, j)] = attn[(i, j)] * (dattn[(i, j)] - dot);
                }
            }
            let dqh = dscore.dot(&kh) * scale;
            let dkh = dscore.t().dot(&qh) * scale;
            dq_full.slice_mut(cols).assign(&dqh);
            dk_full.slice_mut(cols).assign(&dkh);
        }
        // recompute ln1 output
        let a1 = {
            let g = lay.row(p, &name("ln1.g"));
            let b = lay.row(p, &name("ln1.b"));
            let mut out = c.ln1_xhat.clone();
            for mut row in out.rows_mut() {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = *v * g[j] + b[j];
                }
            }
            out
        };
        accumulate_linear(lay, grads, &name("attn.wq"), &name("attn.bq"), &a1, &dq_full);
        accumulate_linear(lay, grads, &name("attn.wk"), &name("attn.bk"), &a1, &dk_full);
        accumulate_linear(lay, grads, &name("attn.wv"), &name("attn.bv"), &a1, &dv_full);
        let da1 = dq_full.dot(&lay.view(p, &name("attn.wq")).t())
            + dk_full.dot(&lay.view(p, &name("attn.wk")).t())
            + dv_full.dot(&lay.view(p, &name("attn.wv")).t());
        let dx_ln1 = {
            let g = lay.row(p, &name("ln1.g"));
            let (gsp, bsp) = (lay.spec(&name("ln1.g")), lay.spec(&name("ln1.b")));
            let (mut dg, mut db) = (vec![0.0; d], vec![0.0; d]);
            let dx = layer_norm_backward(&da1, &c.ln1_xhat, &c.ln1_istd, &g, &mut dg, &mut db);
            for (slot, v) in grads[gsp.offset..gsp.offset + d].iter_mut().zip(&dg) {
                *slot += v;
            }
            for (slot, v) in grads[bsp.offset..bsp.offset + d].iter_mut().zip(&db) {
                *slot += v;
            }
            dx
        };
        dhid = &dhid + &dx_ln1;
        let _ = &c.h_in;
    }

    // embedding + positional table
    {
        let sp_w = lay.spec("embed.w");
        let dw = cache.x.t().dot(&dhid);
        for (slot, v) in grads[sp_w.offset..sp_w.offset + sp_w.rows * sp_w.cols]
            .iter_mut()
            .zip(dw.iter())
        {
            *slot += v;
        }
        let sp_b = lay.spec("embed.b");
        let db = dhid.sum_axis(Axis(0));
        for (slot, v) in grads[sp_b.offset..sp_b.offset + sp_b.cols]
            .iter_mut()
            .zip(db.iter())
        {
            *slot += v;
        }
        let sp_pos = lay.spec("pos");
        for i in 0..t {
            for j in 0..d {
                grads[sp_pos.offset + i * sp_pos.cols + j] += dhid[(i, j)];
            }
        }
    }
}

/// dW = input^T dout, db = column sums, accumulated into the flat buffer.
fn accumulate_linear(
    lay: &Layout,
    grads: &mut [f64],
    w_name: &str,
    b_name: &str,
    input: &Array2<f64>,
    dout: &Array2<f64>,
) {
    let sp_w = lay.spec(w_name);
    let dw = input.t().dot(dout);
    for (slot, v) in grads[sp_w.offset..sp_w.offset + sp_w.rows * sp_w.cols]
        .iter_mut()
        .zip(dw.iter())
    {
        *slot += v;
    }
    let sp_b = lay.spec(b_name);
    let db = dout.sum_axis(Axis(0));
    for (slot, v) in grads[sp_b.offset..sp_b.offset + sp_b.cols]
        .iter_mut()
        .zip(db.iter())
    {
        *slot += v;
    }
}

/// Helper that scopes gradient accumulation for the recurrent cell.
struct GruGrads<'a> {
    lay: &'a Layout,
    grads: &'a mut [f64],
}

impl<'a> GruGrads<'a> {
    fn new(lay: &'a Layout, grads: &'a mut [f64]) -> Self {
        GruGrads { lay, grads }
    }
    fn accumulate(&mut self, name: &str, input: &Array1<f64>, dout: &Array1<f64>) {
        let sp = self.lay.spec(name);
        for (i, xi) in input.iter().enumerate() {
            if *xi == 0.0 {
                continue;
            }
            let row = &mut self.grads[sp.offset + i * sp.cols..sp.offset + (i + 1) * sp.cols];
            for (slot, dj) in row.iter_mut().zip(dout.iter()) {
                *slot += xi * dj;
            }
        }
    }
    fn bias(&mut self, name: &str, dout: &Array1<f64>) {
        let sp = self.lay.spec(name);
        for (slot, v) in self.grads[sp.offset..sp.offset + sp.cols]
            .iter_mut()
            .zip(dout.iter())
        {
            *slot += v;
        }
    }
}

/// Splits a flat 131-wide target row into the head layouts. Offsets follow
/// the interleaved c layout [b, rx, ry, rz] x 5.
pub fn split_targets(q: Array2<f64>, v: Array2<f64>, c: &Array2<f64>) -> Targets {
    let t = c.nrows();
    let mut bits = Array2::zeros((t, 5));
    let mut offs = Array2::zeros((t, 15));
    for i in 0..t {
        for j in 0..5 {
            bits[(i, j)] = c[(i, j * 4)];
            for k in 0..3 {
                offs[(i, j * 3 + k)] = c[(i, j * 4 + 1 + k)];
            }
        }
    }
    Targets { q, v, c_bits: bits, c_offsets: offs }
}
