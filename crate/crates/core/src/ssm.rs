//! Selective state-space layers and the bidirectional cross-variate global
//! context extractor.
//!
//! The recurrence is a diagonal linear state space with input-dependent B, C
//! and step size, discretized per step by the zero-order hold rule. Blocks
//! follow the standard selective-SSM layout: input expansion, short causal
//! depthwise convolution, SiLU, scan, multiplicative gate, output projection,
//! with a pre-norm residual around the whole block.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::mathx;
use crate::nn::{init_linear, ParamId, ParamStore};
use crate::patching::{PatchTensor, ScaleTag};
use crate::scan::{scan_forward, zoh_factors};
use crate::tensor::{matmul, Tensor};

const NORM_EPS: f64 = 1e-5;

/// Zero-order-hold discretization of a diagonal system for one step.
///
/// Returns elementwise `abar = exp(delta * a)` and
/// `bbar = (exp(delta * a) - 1) / a * b`, with the `a -> 0` limit
/// `bbar -> delta * b`.
pub fn discretize(a_diag: &[f64], b: &[f64], delta: f64) -> (Vec<f64>, Vec<f64>) {
    debug_assert!(delta >= 0.0, "step size must be non-negative");
    debug_assert_eq!(a_diag.len(), b.len());
    let mut abar = Vec::with_capacity(a_diag.len());
    let mut bbar = Vec::with_capacity(a_diag.len());
    for (&a, &bv) in a_diag.iter().zip(b) {
        debug_assert!(a <= 0.0, "diagonal entries must be negative");
        let (ab, bf) = zoh_factors(a, delta);
        abar.push(ab);
        bbar.push(bf * bv);
    }
    (abar, bbar)
}

/// Parameters of a standalone selective scan over `channels` input channels.
///
/// Per step t: `dt_t = softplus(x_t W_dt + b_dt)` (per channel),
/// `B_t = x_t W_b`, `C_t = x_t W_c` (shared across channels), and the
/// recurrence `h_t = abar_t h_{t-1} + bbar_t x_t`, `z_t = C_t . h_t + D x_t`.
#[derive(Clone, Debug)]
pub struct SsmParams {
    pub channels: usize,
    pub state_dim: usize,
    pub a_log: Tensor,
    pub b_proj: Tensor,
    pub c_proj: Tensor,
    pub delta_w: Tensor,
    pub delta_b: Tensor,
    pub d_skip: Tensor,
}

impl SsmParams {
    pub fn init(rng: &mut impl Rng, channels: usize, state_dim: usize) -> Self {
        SsmParams {
            channels,
            state_dim,
            a_log: a_log_init(channels, state_dim),
            b_proj: init_linear(rng, channels, state_dim, channels),
            c_proj: init_linear(rng, channels, state_dim, channels),
            delta_w: init_linear(rng, channels, channels, channels),
            delta_b: dt_bias_init(rng, channels),
            d_skip: Tensor::filled(1, 1, channels, 1.0),
        }
    }
}

/// Multi-timescale initialization: per channel, A[s] = -(s+1).
fn a_log_init(channels: usize, state_dim: usize) -> Tensor {
    Tensor::from_fn(1, channels, state_dim, |_, _, s| ((s + 1) as f64).ln())
}

/// Bias initialized so softplus(bias) is log-uniform in [1e-3, 1e-1].
fn dt_bias_init(rng: &mut impl Rng, channels: usize) -> Tensor {
    let (lo, hi) = (1e-3f64.ln(), 1e-1f64.ln());
    Tensor::from_fn(1, 1, channels, |_, _, _| {
        let dt = (rng.random::<f64>() * (hi - lo) + lo).exp();
        // inverse softplus: softplus(ln(e^dt - 1)) = dt
        dt.exp_m1().ln()
    })
}

/// Run the selective scan over a (1, seq, channels) input.
pub fn selective_scan(inputs: &Tensor, params: &SsmParams) -> Result<Tensor> {
    let (_, seq, ch) = inputs.shape();
    assert_eq!(ch, params.channels, "input channel mismatch");
    if seq == 0 {
        return Err(Error::InvalidSpec("empty sequence".into()));
    }
    if !inputs.all_finite() {
        return Err(Error::Data("scan input contains non-finite values".into()));
    }
    let mut dt = matmul(inputs, false, &params.delta_w, false);
    let db = params.delta_b.data();
    for row in dt.data_mut().chunks_mut(ch) {
        for (v, b) in row.iter_mut().zip(db) {
            *v = mathx::softplus(*v + b);
        }
    }
    let b = matmul(inputs, false, &params.b_proj, false);
    let c = matmul(inputs, false, &params.c_proj, false);
    let a = params.a_log.map(|v| -v.exp().max(1e-300));
    let (y, _) = scan_forward(inputs, &dt, &b, &c, &a, &params.d_skip, false)?;
    Ok(y)
}

#[derive(Clone, Copy, Debug)]
pub struct MambaDims {
    pub d_model: usize,
    pub d_state: usize,
    pub expand: usize,
    pub d_conv: usize,
}

impl MambaDims {
    pub fn d_inner(&self) -> usize {
        self.d_model * self.expand
    }

    pub fn dt_rank(&self) -> usize {
        self.d_model.div_ceil(16).max(1)
    }
}

/// One pre-norm residual selective-SSM block.
#[derive(Clone, Debug)]
pub struct MambaLayer {
    pub dims: MambaDims,
    norm_g: ParamId,
    in_proj: ParamId,
    conv_w: ParamId,
    conv_b: ParamId,
    x_proj: ParamId,
    dt_proj_w: ParamId,
    dt_proj_b: ParamId,
    a_log: ParamId,
    d_skip: ParamId,
    out_proj: ParamId,
}

impl MambaLayer {
    pub fn init(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, dims: MambaDims) -> Self {
        let dm = dims.d_model;
        let di = dims.d_inner();
        let ds = dims.d_state;
        let k = dims.d_conv;
        let dtr = dims.dt_rank();
        MambaLayer {
            dims,
            norm_g: store.add(format!("{prefix}.norm.g"), Tensor::filled(1, 1, dm, 1.0)),
            in_proj: store.add(format!("{prefix}.in_proj.w"), init_linear(rng, dm, 2 * di, dm)),
            conv_w: store.add(format!("{prefix}.conv.w"), init_linear(rng, k, di, k)),
            conv_b: store.add(format!("{prefix}.conv.b"), init_linear(rng, 1, di, k)),
            x_proj: store.add(format!("{prefix}.x_proj.w"), init_linear(rng, di, dtr + 2 * ds, di)),
            dt_proj_w: store.add(format!("{prefix}.dt_proj.w"), init_linear(rng, dtr, di, dtr)),
            dt_proj_b: store.add(format!("{prefix}.dt_proj.b"), dt_bias_init(rng, di)),
            a_log: store.add(format!("{prefix}.a_log"), a_log_init(di, ds)),
            d_skip: store.add(format!("{prefix}.d"), Tensor::filled(1, 1, di, 1.0)),
            out_proj: store.add(format!("{prefix}.out_proj.w"), init_linear(rng, di, dm, di)),
        }
    }

    /// x (n, seq, d_model) -> x + block(norm(x)), same shape.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let di = self.dims.d_inner();
        let ds = self.dims.d_state;
        let dtr = self.dims.dt_rank();

        let norm_g = g.param(store, self.norm_g);
        let h = g.rms_norm(x, norm_g, NORM_EPS);
        let in_w = g.param(store, self.in_proj);
        let proj = g.matmul(h, in_w);
        let xs = g.slice_cols(proj, 0, di);
        let zs = g.slice_cols(proj, di, di);

        let conv_w = g.param(store, self.conv_w);
        let conv_b = g.param(store, self.conv_b);
        let xc = g.causal_conv(xs, conv_w, conv_b);
        let xa = g.silu(xc);

        let xp_w = g.param(store, self.x_proj);
        let xdbl = g.matmul(xa, xp_w);
        let dt_low = g.slice_cols(xdbl, 0, dtr);
        let b = g.slice_cols(xdbl, dtr, ds);
        let c = g.slice_cols(xdbl, dtr + ds, ds);

        let dt_w = g.param(store, self.dt_proj_w);
        let dt_b = g.param(store, self.dt_proj_b);
        let dt_lin = g.linear(dt_low, dt_w, Some(dt_b));
        let dt = g.softplus(dt_lin);

        let a_log = g.param(store, self.a_log);
        let d_skip = g.param(store, self.d_skip);
        let y = g.scan(xa, dt, b, c, a_log, d_skip)?;

        let gate = g.silu(zs);
        let gated = g.mul(y, gate);
        let out_w = g.param(store, self.out_proj);
        let out = g.matmul(gated, out_w);
        Ok(g.add(x, out))
    }

    /// Evaluate outside any existing graph.
    pub fn eval(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new(false);
        let xv = g.constant(x.clone());
        let y = self.forward(&mut g, store, xv)?;
        Ok(g.value(y).clone())
    }

    pub fn step_state(&self) -> MambaStepState {
        let di = self.dims.d_inner();
        MambaStepState {
            conv_ring: vec![0.0; (self.dims.d_conv - 1) * di],
            ring_pos: 0,
            h: vec![0.0; di * self.dims.d_state],
        }
    }

    /// Recurrent single-step evaluation: consumes one d_model input row and
    /// produces one output row while touching only O(d_inner * d_state)
    /// state. Matches the sequence forward pass step for step.
    pub fn step(&self, store: &ParamStore, state: &mut MambaStepState, x: &[f64], out: &mut [f64]) {
        let dm = self.dims.d_model;
        let di = self.dims.d_inner();
        let ds = self.dims.d_state;
        let k = self.dims.d_conv;
        let dtr = self.dims.dt_rank();
        assert_eq!(x.len(), dm);
        assert_eq!(out.len(), dm);

        // pre-norm
        let gamma = store.get(self.norm_g).data();
        let ms = x.iter().map(|v| v * v).sum::<f64>() / dm as f64;
        let ir = 1.0 / (ms + NORM_EPS).sqrt();
        let normed: Vec<f64> = x.iter().zip(gamma).map(|(v, g)| v * ir * g).collect();

        // input expansion
        let in_w = store.get(self.in_proj);
        let mut xz = vec![0.0; 2 * di];
        for (j, &nv) in normed.iter().enumerate() {
            let wrow = &in_w.data()[j * 2 * di..(j + 1) * 2 * di];
            for (acc, w) in xz.iter_mut().zip(wrow) {
                *acc += nv * w;
            }
        }
        let (xs, zs) = xz.split_at(di);

        // causal depthwise conv over the ring of previous inputs
        let conv_w = store.get(self.conv_w).data();
        let conv_b = store.get(self.conv_b).data();
        let mut xa = vec![0.0; di];
        for c in 0..di {
            let mut acc = conv_b[c] + conv_w[(k - 1) * di + c] * xs[c];
            for j in 0..k - 1 {
                // ring slot (ring_pos + j) holds the input from k-1-j steps back
                let slot = (state.ring_pos + j) % (k - 1);
                acc += conv_w[j * di + c] * state.conv_ring[slot * di + c];
            }
            xa[c] = acc * mathx::sigmoid(acc); // SiLU
        }
        // push the current pre-conv activation into the ring
        if k > 1 {
            let slot = state.ring_pos;
            state.conv_ring[slot * di..(slot + 1) * di].copy_from_slice(xs);
            state.ring_pos = (state.ring_pos + 1) % (k - 1);
        }

        // projections to dt, B, C
        let xp = store.get(self.x_proj).data();
        let width = dtr + 2 * ds;
        let mut proj = vec![0.0; width];
        for (c, &v) in xa.iter().enumerate() {
            let row = &xp[c * width..(c + 1) * width];
            for (acc, w) in proj.iter_mut().zip(row) {
                *acc += v * w;
            }
        }
        let (dt_low, bc) = proj.split_at(dtr);
        let (bt, ct) = bc.split_at(ds);

        let dt_w = store.get(self.dt_proj_w).data();
        let dt_b = store.get(self.dt_proj_b).data();
        let a_log = store.get(self.a_log).data();
        let d_skip = store.get(self.d_skip).data();
        let gate_out: Vec<f64> = (0..di)
            .map(|c| {
                let mut pre = dt_b[c];
                for (r, &dl) in dt_low.iter().enumerate() {
                    pre += dl * dt_w[r * di + c];
                }
                let dt = mathx::softplus(pre);
                let mut acc = 0.0;
                for s in 0..ds {
                    let a = -a_log[c * ds + s].exp();
                    let (ab, bf) = zoh_factors(a, dt);
                    let h = ab * state.h[c * ds + s] + bf * bt[s] * xa[c];
                    state.h[c * ds + s] = h;
                    acc += ct[s] * h;
                }
                let y = acc + d_skip[c] * xa[c];
                y * (zs[c] * mathx::sigmoid(zs[c]))
            })
            .collect();

        // output projection plus residual
        let out_w = store.get(self.out_proj).data();
        out.copy_from_slice(x);
        for (c, &v) in gate_out.iter().enumerate() {
            let row = &out_w[c * dm..(c + 1) * dm];
            for (o, w) in out.iter_mut().zip(row) {
                *o += v * w;
            }
        }
    }

    #[cfg(test)]
    pub(crate) fn out_proj_id(&self) -> ParamId {
        self.out_proj
    }
}

/// Recurrent-inference state for one layer: a conv ring buffer and the SSM
/// hidden state. Its size is independent of sequence length.
#[derive(Clone, Debug)]
pub struct MambaStepState {
    conv_ring: Vec<f64>,
    ring_pos: usize,
    h: Vec<f64>,
}

impl MambaStepState {
    pub fn state_bytes(&self) -> usize {
        (self.conv_ring.len() + self.h.len()) * std::mem::size_of::<f64>()
    }
}

/// Cross-variate global context, (variates, patch_count, d_model).
#[derive(Clone, Debug)]
pub struct GlobalContext {
    pub values: Tensor,
}

/// Patch embedding plus forward and backward selective-SSM stacks summed into
/// one context sequence.
#[derive(Clone, Debug)]
pub struct GlobalModel {
    pub d_model: usize,
    pub patch_len: usize,
    embed_w: ParamId,
    embed_b: ParamId,
    fwd: Vec<MambaLayer>,
    bwd: Vec<MambaLayer>,
}

impl GlobalModel {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        patch_len: usize,
        n_layers: usize,
        dims: MambaDims,
    ) -> Self {
        let dm = dims.d_model;
        let embed_w = store.add("global.embed.w", init_linear(rng, patch_len, dm, patch_len));
        let embed_b = store.add("global.embed.b", init_linear(rng, 1, dm, patch_len));
        let fwd = (0..n_layers)
            .map(|i| MambaLayer::init(store, rng, &format!("global.fwd{i}"), dims))
            .collect();
        let bwd = (0..n_layers)
            .map(|i| MambaLayer::init(store, rng, &format!("global.bwd{i}"), dims))
            .collect();
        GlobalModel { d_model: dm, patch_len, embed_w, embed_b, fwd, bwd }
    }

    /// patches (n, seq, patch_len) -> context (n, seq, d_model).
    ///
    /// The sequence axis is scanned in both directions by separate stacks; the
    /// backward branch is re-reversed so positions align before the sum.
    pub fn context_var(&self, g: &mut Graph, store: &ParamStore, patches: Var) -> Result<Var> {
        let w = g.param(store, self.embed_w);
        let b = g.param(store, self.embed_b);
        let embedded = g.linear(patches, w, Some(b));

        let mut f = embedded;
        for layer in &self.fwd {
            f = layer.forward(g, store, f)?;
        }
        let mut r = g.reverse_rows(embedded);
        for layer in &self.bwd {
            r = layer.forward(g, store, r)?;
        }
        let r = g.reverse_rows(r);
        Ok(g.add(f, r))
    }

    #[cfg(test)]
    pub(crate) fn swapped_directions(&self) -> GlobalModel {
        let mut m = self.clone();
        std::mem::swap(&mut m.fwd, &mut m.bwd);
        m
    }
}

/// Extract the cross-variate context for one window's global patches.
///
/// Variates and patches are concatenated variate-major into a single sequence
/// of length `D * PN_g`, scanned bidirectionally, then viewed back as
/// (D, PN_g, d_model).
pub fn global_context(
    model: &GlobalModel,
    store: &ParamStore,
    patches: &PatchTensor,
) -> Result<GlobalContext> {
    assert_eq!(patches.scale, ScaleTag::Global, "global_context expects global-scale patches");
    let d = patches.variates();
    let pn = patches.patch_count();
    let pl = patches.patch_len();
    assert_eq!(pl, model.patch_len, "patch length mismatch");

    let flat = patches.values.reshaped(1, d * pn, pl);
    let mut g = Graph::new(false);
    let pv = g.constant(flat);
    let ctx = model.context_var(&mut g, store, pv)?;
    let out = g.value(ctx).reshaped(d, pn, model.d_model);
    Ok(GlobalContext { values: out })
}
