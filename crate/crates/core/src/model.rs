//! End-to-end S2TX assembly, its ablation variants, minimal baseline
//! forecasters for the scaling harness, and checkpoint persistence.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{ForecastHead, LocalModel};
use crate::config::{ExperimentConfig, Variant};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{init_linear, Adam, ParamId, ParamStore};
use crate::patching::PatchPlan;
use crate::ssm::{GlobalModel, MambaDims, MambaLayer};
use crate::tensor::Tensor;

const INSTANCE_NORM_EPS: f64 = 1e-5;

/// A (1, D, H) prediction; `denormalized` records whether per-window
/// normalization statistics were re-applied on the way out.
#[derive(Clone, Debug)]
pub struct Forecast {
    pub values: Tensor,
    pub denormalized: bool,
}

/// Anything that maps look-back windows to horizon forecasts.
pub trait Forecaster {
    fn horizon(&self) -> usize;

    /// inputs (n, D, L) -> forecasts (n, D, H).
    fn predict_batch(&self, inputs: &Tensor) -> Result<Tensor>;
}

/// Architecture wiring: parameter ids plus the variant-dependent data flow.
/// Parameter values live in a separate store so training and gradient
/// checking can perturb them independently.
#[derive(Clone, Debug)]
pub struct Arch {
    pub variant: Variant,
    pub plan: PatchPlan,
    pub instance_norm: bool,
    pub d_model: usize,
    pub pn_g: usize,
    pub pn_l: usize,
    global: GlobalModel,
    local: LocalModel,
    head: ForecastHead,
}

impl Arch {
    /// Build the forward graph for a batch of raw windows (n, D, L),
    /// returning the (n, D, H) prediction node.
    pub fn build_graph(&self, g: &mut Graph, store: &ParamStore, inputs: &Tensor) -> Result<Var> {
        self.build_graph_with(g, store, inputs, None)
    }

    /// As `build_graph`, but optionally sourcing the global context from a
    /// different batch of windows (used to probe variate isolation with the
    /// context frozen).
    pub fn build_graph_with(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        inputs: &Tensor,
        context_source: Option<&Tensor>,
    ) -> Result<Var> {
        let (n, d, len) = inputs.shape();
        if len != self.plan.window.lookback {
            return Err(Error::InvalidSpec(format!(
                "window length {len} does not match configured look-back {}",
                self.plan.window.lookback
            )));
        }
        if !inputs.all_finite() {
            return Err(Error::Data("model input contains non-finite values".into()));
        }

        let (normed, scale, shift) = if self.instance_norm {
            instance_normalize(inputs)
        } else {
            (inputs.clone(), Tensor::filled(n, d, 1, 1.0), Tensor::zeros(n, d, 1))
        };
        let ctx_normed = match context_source {
            Some(src) => {
                assert_eq!(src.shape(), inputs.shape(), "context source shape mismatch");
                if self.instance_norm {
                    instance_normalize(src).0
                } else {
                    src.clone()
                }
            }
            None => normed.clone(),
        };

        let (global_patches, local_patches) = self.batch_patches(&normed)?;
        let global_patches = if context_source.is_some() {
            self.batch_patches(&ctx_normed)?.0
        } else {
            global_patches
        };

        // global context, (n*D, PN_g, d_model)
        let ctx = {
            let flat = if self.variant.uses_cross_variate_scan() {
                global_patches.reshaped(n, d * self.pn_g, self.plan.global.patch_len)
            } else {
                global_patches.reshaped(n * d, self.pn_g, self.plan.global.patch_len)
            };
            let pv = g.constant(flat);
            let ctx = self.global.context_var(g, store, pv)?;
            g.reshape(ctx, n * d, self.pn_g, self.d_model)
        };

        let local_in = g.constant(local_patches);
        let pred = if self.variant.uses_cross_attention() {
            let local_out = self.local.forward(g, store, local_in, Some(ctx));
            let flat = g.reshape(local_out, n * d, 1, self.pn_l * self.d_model);
            self.head.forward(g, store, flat)
        } else {
            let local_out = self.local.forward(g, store, local_in, None);
            let flat = g.reshape(local_out, n * d, 1, self.pn_l * self.d_model);
            let pooled = g.mean_rows(ctx);
            let fused = g.concat_cols(&[flat, pooled]);
            self.head.forward(g, store, fused)
        };
        let pred = g.reshape(pred, n, d, self.plan.window.horizon);

        if self.instance_norm {
            Ok(g.scale_shift_rows(pred, scale, shift))
        } else {
            Ok(pred)
        }
    }

    /// Global patches as (n, D*PN_g, PL_g) variate-major per sample, local
    /// patches as (n*D, PN_l, PL_l).
    fn batch_patches(&self, normed: &Tensor) -> Result<(Tensor, Tensor)> {
        let (n, d, len) = normed.shape();
        let (pl_g, pl_l) = (self.plan.global.patch_len, self.plan.local.patch_len);
        let mut global = Tensor::zeros(n, d * self.pn_g, pl_g);
        let mut local = Tensor::zeros(n * d, self.pn_l, pl_l);
        for b in 0..n {
            let window = Tensor::from_vec(1, d, len, normed.item(b).to_vec());
            let (gp, lp) = crate::patching::make_multiscale(&window, &self.plan)?;
            global.item_mut(b).copy_from_slice(gp.values.data());
            let block = self.pn_l * pl_l;
            for v in 0..d {
                local.item_mut(b * d + v).copy_from_slice(&lp.values.data()[v * block..(v + 1) * block]);
            }
        }
        Ok((global, local))
    }

    pub fn head_in_dim(&self) -> usize {
        self.head.in_dim
    }

    pub(crate) fn head(&self) -> &ForecastHead {
        &self.head
    }
}

/// Per-(sample, variate) z-scoring over the window. Returns the normalized
/// windows plus the (n, D, 1) scale and shift that invert it.
pub fn instance_normalize(inputs: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (n, d, len) = inputs.shape();
    let mut normed = inputs.clone();
    let mut scale = Tensor::zeros(n, d, 1);
    let mut shift = Tensor::zeros(n, d, 1);
    for b in 0..n {
        let row = normed.item_mut(b);
        for v in 0..d {
            let series = &mut row[v * len..(v + 1) * len];
            let mean = series.iter().sum::<f64>() / len as f64;
            let var = series.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / len as f64;
            let std = (var + INSTANCE_NORM_EPS).sqrt();
            for x in series.iter_mut() {
                *x = (*x - mean) / std;
            }
            scale.set(b, v, 0, std);
            shift.set(b, v, 0, mean);
        }
    }
    (normed, scale, shift)
}

/// The S2TX forecaster: configuration, architecture, and parameters.
#[derive(Clone, Debug)]
pub struct S2TXModel {
    pub cfg: ExperimentConfig,
    pub arch: Arch,
    pub store: ParamStore,
}

impl S2TXModel {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        Self::make_variant(cfg, cfg.variant)
    }

    /// Construct a model with the given ablation variant. Parameters are
    /// drawn deterministically from `cfg.seed`; variants sharing a seed share
    /// the initialization of every parameter they have in common.
    pub fn make_variant(cfg: &ExperimentConfig, variant: Variant) -> Result<Self> {
        cfg.validate()?;
        let mut cfg = cfg.clone();
        cfg.variant = variant;
        let plan = cfg.patch_plan();
        let pn_g = plan.global_patches();
        let pn_l = plan.local_patches();
        let dims = cfg.mamba_dims();

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let global =
            GlobalModel::init(&mut store, &mut rng, cfg.pl_g, cfg.n_mamba_layers, dims);
        let local = LocalModel::init(
            &mut store,
            &mut rng,
            cfg.pl_l,
            pn_l,
            cfg.d_model,
            cfg.n_heads,
            cfg.ffn_width,
            cfg.n_local_layers,
            variant.uses_cross_attention(),
        );
        let head_in = if variant.uses_cross_attention() {
            pn_l * cfg.d_model
        } else {
            pn_l * cfg.d_model + cfg.d_model
        };
        let head = ForecastHead::init(&mut store, &mut rng, head_in, cfg.horizon);

        let arch = Arch {
            variant,
            plan,
            instance_norm: cfg.instance_norm,
            d_model: cfg.d_model,
            pn_g,
            pn_l,
            global,
            local,
            head,
        };
        Ok(S2TXModel { cfg, arch, store })
    }

    /// Forecast a single (1, D, L) window.
    pub fn forward(&self, window: &Tensor) -> Result<Forecast> {
        let values = self.predict_batch(window)?;
        Ok(Forecast { values, denormalized: self.arch.instance_norm })
    }

    pub fn param_count(&self) -> usize {
        self.store.total_len()
    }

    pub fn zero_forecast_head(&mut self) {
        let head = self.arch.head().clone();
        head.zero(&mut self.store);
    }
}

impl Forecaster for S2TXModel {
    fn horizon(&self) -> usize {
        self.cfg.horizon
    }

    fn predict_batch(&self, inputs: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new(false);
        let pred = self.arch.build_graph(&mut g, &self.store, inputs)?;
        Ok(g.value(pred).clone())
    }
}

/// Baseline encoder families for the runtime/memory comparison.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaselineKind {
    VanillaTransformer,
    PlainMamba,
}

impl BaselineKind {
    pub fn name(&self) -> &'static str {
        match self {
            BaselineKind::VanillaTransformer => "transformer",
            BaselineKind::PlainMamba => "mamba",
        }
    }
}

/// Point-wise token baseline: one token per time step with all variates
/// embedded jointly, a small encoder of the named kind, and a pooled linear
/// head. Exists to feed the scaling profiler, not to compete on accuracy.
#[derive(Clone, Debug)]
pub struct BaselineModel {
    pub kind: BaselineKind,
    pub n_variates: usize,
    pub lookback: usize,
    pub horizon: usize,
    pub d_model: usize,
    store: ParamStore,
    embed_w: ParamId,
    embed_b: ParamId,
    pos: Option<ParamId>,
    attn_layers: Vec<crate::attention::LocalLayer>,
    mamba_layers: Vec<MambaLayer>,
    head_w: ParamId,
    head_b: ParamId,
}

/// Encoder depth for the baselines; deliberately shallow.
const BASELINE_TRANSFORMER_LAYERS: usize = 1;
const BASELINE_MAMBA_LAYERS: usize = 2;
const BASELINE_HEADS: usize = 2;

impl BaselineModel {
    pub fn new(
        kind: BaselineKind,
        n_variates: usize,
        lookback: usize,
        horizon: usize,
        d_model: usize,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let embed_w = store.add("embed.w", init_linear(&mut rng, n_variates, d_model, n_variates));
        let embed_b = store.add("embed.b", init_linear(&mut rng, 1, d_model, n_variates));
        let mut pos = None;
        let mut attn_layers = Vec::new();
        let mut mamba_layers = Vec::new();
        match kind {
            BaselineKind::VanillaTransformer => {
                let mut p = Tensor::zeros(1, lookback, d_model);
                p.randn_fill(&mut rng, 0.02);
                pos = Some(store.add("pos", p));
                for i in 0..BASELINE_TRANSFORMER_LAYERS {
                    attn_layers.push(crate::attention::LocalLayer::init(
                        &mut store,
                        &mut rng,
                        &format!("enc{i}"),
                        d_model,
                        BASELINE_HEADS,
                        2 * d_model,
                        false,
                    ));
                }
            }
            BaselineKind::PlainMamba => {
                let dims = MambaDims { d_model, d_state: 16, expand: 2, d_conv: 4 };
                for i in 0..BASELINE_MAMBA_LAYERS {
                    mamba_layers.push(MambaLayer::init(&mut store, &mut rng, &format!("enc{i}"), dims));
                }
            }
        }
        let head_w =
            store.add("head.w", init_linear(&mut rng, d_model, n_variates * horizon, d_model));
        let head_b = store.add("head.b", init_linear(&mut rng, 1, n_variates * horizon, d_model));
        BaselineModel {
            kind,
            n_variates,
            lookback,
            horizon,
            d_model,
            store,
            embed_w,
            embed_b,
            pos,
            attn_layers,
            mamba_layers,
            head_w,
            head_b,
        }
    }

    /// window (1, D, L) -> Forecast (1, D, H).
    pub fn forward(&self, window: &Tensor) -> Result<Forecast> {
        let (n, d, len) = window.shape();
        assert_eq!(n, 1, "baselines evaluate one window at a time");
        if d != self.n_variates || len != self.lookback {
            return Err(Error::InvalidSpec(format!(
                "baseline expects ({}, {}), got ({d}, {len})",
                self.n_variates, self.lookback
            )));
        }
        match self.kind {
            BaselineKind::VanillaTransformer => self.forward_transformer(window),
            BaselineKind::PlainMamba => self.forward_mamba_streaming(window),
        }
    }

    fn forward_transformer(&self, window: &Tensor) -> Result<Forecast> {
        let (_, d, len) = window.shape();
        // tokens: one per time step, all variates embedded jointly
        let tokens = Tensor::from_fn(1, len, d, |_, t, v| window.at(0, v, t));
        let mut g = Graph::new(false);
        let tv = g.constant(tokens);
        let w = g.param(&self.store, self.embed_w);
        let b = g.param(&self.store, self.embed_b);
        let mut x = g.linear(tv, w, Some(b));
        let pos = g.param(&self.store, self.pos.expect("transformer has positions"));
        x = g.add(x, pos);
        for layer in &self.attn_layers {
            x = layer.forward(&mut g, &self.store, x, None);
        }
        let pooled = g.mean_rows(x);
        let hw = g.param(&self.store, self.head_w);
        let hb = g.param(&self.store, self.head_b);
        let out = g.linear(pooled, hw, Some(hb));
        let values = g.value(out).reshaped(1, d, self.horizon);
        Ok(Forecast { values, denormalized: false })
    }

    /// Recurrent evaluation: embeds one step at a time, keeps only the
    /// per-layer step states and a running mean, so transient memory does not
    /// grow with the look-back.
    fn forward_mamba_streaming(&self, window: &Tensor) -> Result<Forecast> {
        let (_, d, len) = window.shape();
        let dm = self.d_model;
        let ew = self.store.get(self.embed_w).data();
        let eb = self.store.get(self.embed_b).data();
        let mut states: Vec<_> = self.mamba_layers.iter().map(|l| l.step_state()).collect();
        let mut mean = vec![0.0; dm];
        let mut cur = vec![0.0; dm];
        let mut next = vec![0.0; dm];
        for t in 0..len {
            cur.copy_from_slice(eb);
            for v in 0..d {
                let xv = window.at(0, v, t);
                let row = &ew[v * dm..(v + 1) * dm];
                for (c, w) in cur.iter_mut().zip(row) {
                    *c += xv * w;
                }
            }
            for (layer, state) in self.mamba_layers.iter().zip(states.iter_mut()) {
                layer.step(&self.store, state, &cur, &mut next);
                std::mem::swap(&mut cur, &mut next);
            }
            for (m, c) in mean.iter_mut().zip(&cur) {
                *m += c;
            }
        }
        for m in mean.iter_mut() {
            *m /= len as f64;
        }
        if !mean.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric { context: "baseline_mamba".into(), step: len });
        }

        let hw = self.store.get(self.head_w).data();
        let hb = self.store.get(self.head_b).data();
        let width = d * self.horizon;
        let mut out = hb.to_vec();
        for (j, &m) in mean.iter().enumerate() {
            let row = &hw[j * width..(j + 1) * width];
            for (o, w) in out.iter_mut().zip(row) {
                *o += m * w;
            }
        }
        Ok(Forecast { values: Tensor::from_vec(1, d, self.horizon, out), denormalized: false })
    }

    /// Bytes of recurrent state carried across steps by the streaming path.
    pub fn mamba_state_bytes(&self) -> usize {
        self.mamba_layers.iter().map(|l| l.step_state().state_bytes()).sum()
    }
}

// ---------------------------------------------------------------------------
// checkpointing
//
// Layout (little-endian):
//   magic  b"S2TXCKP1"
//   u32    config length, followed by the flat key=value config text
//   u32    parameter count
//   per parameter: u32 name length, name bytes, u64 batch/rows/cols, f64 data
//   u8     optimizer-state flag
//   if 1:  u64 adam step, then first- and second-moment tensors in parameter
//          order, each as u64 batch/rows/cols + f64 data
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 8] = b"S2TXCKP1";

pub struct Checkpoint {
    pub cfg: ExperimentConfig,
    pub params: Vec<(String, Tensor)>,
    pub optimizer: Option<OptState>,
}

pub struct OptState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

pub fn save_checkpoint(path: &Path, model: &S2TXModel, opt: Option<&Adam>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(CKPT_MAGIC)?;
    let cfg = model.cfg.to_kv_string();
    f.write_all(&(cfg.len() as u32).to_le_bytes())?;
    f.write_all(cfg.as_bytes())?;
    f.write_all(&(model.store.len() as u32).to_le_bytes())?;
    for (name, tensor) in model.store.iter() {
        f.write_all(&(name.len() as u32).to_le_bytes())?;
        f.write_all(name.as_bytes())?;
        write_tensor(&mut f, tensor)?;
    }
    match opt {
        Some(adam) => {
            f.write_all(&[1u8])?;
            let (step, m, v) = adam.state();
            f.write_all(&step.to_le_bytes())?;
            for t in m.iter().chain(v.iter()) {
                write_tensor(&mut f, t)?;
            }
        }
        None => f.write_all(&[0u8])?,
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut f = std::io::BufReader::new(
        std::fs::File::open(path)
            .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?,
    );
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic).map_err(|_| Error::Checkpoint("truncated header".into()))?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let cfg_len = read_u32(&mut f)? as usize;
    let mut cfg_text = vec![0u8; cfg_len];
    f.read_exact(&mut cfg_text).map_err(|_| Error::Checkpoint("truncated config".into()))?;
    let cfg_text =
        String::from_utf8(cfg_text).map_err(|_| Error::Checkpoint("config not utf-8".into()))?;
    let pairs = crate::config::parse_kv_text(&cfg_text)?;
    let cfg = crate::config::resolve(None, &pairs)?;

    let n_params = read_u32(&mut f)? as usize;
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name_len = read_u32(&mut f)? as usize;
        let mut name = vec![0u8; name_len];
        f.read_exact(&mut name).map_err(|_| Error::Checkpoint("truncated name".into()))?;
        let name =
            String::from_utf8(name).map_err(|_| Error::Checkpoint("name not utf-8".into()))?;
        params.push((name, read_tensor(&mut f)?));
    }
    let mut flag = [0u8; 1];
    f.read_exact(&mut flag).map_err(|_| Error::Checkpoint("truncated flag".into()))?;
    let optimizer = if flag[0] == 1 {
        let mut step_b = [0u8; 8];
        f.read_exact(&mut step_b).map_err(|_| Error::Checkpoint("truncated step".into()))?;
        let step = u64::from_le_bytes(step_b);
        let m = (0..n_params).map(|_| read_tensor(&mut f)).collect::<Result<Vec<_>>>()?;
        let v = (0..n_params).map(|_| read_tensor(&mut f)).collect::<Result<Vec<_>>>()?;
        Some(OptState { step, m, v })
    } else {
        None
    };
    Ok(Checkpoint { cfg, params, optimizer })
}

/// Rebuild a model (and optionally its optimizer) from a checkpoint.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<(S2TXModel, Option<Adam>)> {
    let mut model = S2TXModel::new(&ckpt.cfg)?;
    if ckpt.params.len() != model.store.len() {
        return Err(Error::Checkpoint(format!(
            "parameter count mismatch: file has {}, architecture has {}",
            ckpt.params.len(),
            model.store.len()
        )));
    }
    for (name, tensor) in &ckpt.params {
        let id = model
            .store
            .find(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter '{name}'")))?;
        if model.store.get(id).shape() != tensor.shape() {
            return Err(Error::Checkpoint(format!("shape mismatch for '{name}'")));
        }
        *model.store.get_mut(id) = tensor.clone();
    }
    let adam = match &ckpt.optimizer {
        Some(st) => {
            let mut adam = Adam::new(&model.store, ckpt.cfg.lr);
            adam.restore(st.step, st.m.clone(), st.v.clone());
            Some(adam)
        }
        None => None,
    };
    Ok((model, adam))
}

fn write_tensor(f: &mut impl Write, t: &Tensor) -> Result<()> {
    f.write_all(&(t.batch() as u64).to_le_bytes())?;
    f.write_all(&(t.rows() as u64).to_le_bytes())?;
    f.write_all(&(t.cols() as u64).to_le_bytes())?;
    for v in t.data() {
        f.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_tensor(f: &mut impl Read) -> Result<Tensor> {
    let mut b = [0u8; 8];
    let mut dim = [0usize; 3];
    for d in dim.iter_mut() {
        f.read_exact(&mut b).map_err(|_| Error::Checkpoint("truncated tensor header".into()))?;
        *d = u64::from_le_bytes(b) as usize;
    }
    let len = dim[0] * dim[1] * dim[2];
    let mut data = Vec::with_capacity(len);
    for _ in 0..len {
        f.read_exact(&mut b).map_err(|_| Error::Checkpoint("truncated tensor data".into()))?;
        data.push(f64::from_le_bytes(b));
    }
    Ok(Tensor::from_vec(dim[0], dim[1], dim[2], data))
}

fn read_u32(f: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    f.read_exact(&mut b).map_err(|_| Error::Checkpoint("truncated field".into()))?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::resolve;

    pub(crate) fn tiny_cfg() -> ExperimentConfig {
        let kv: Vec<(String, String)> = [
            ("dataset", "synthetic"),
            ("lookback", "32"),
            ("local_window", "16"),
            ("pl_g", "8"),
            ("str_g", "4"),
            ("pl_l", "4"),
            ("str_l", "2"),
            ("horizon", "5"),
            ("d_model", "8"),
            ("n_heads", "2"),
            ("n_local_layers", "1"),
            ("n_mamba_layers", "1"),
            ("d_state", "4"),
            ("ffn_width", "16"),
            ("batch_size", "4"),
            ("max_epochs", "2"),
            ("seed", "3"),
        ]
        .iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
        resolve(None, &kv).unwrap()
    }

    fn random_window(seed: u64, n: usize, d: usize, len: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tensor::zeros(n, d, len);
        t.randn_fill(&mut rng, 1.0);
        t
    }

    #[test]
    fn forward_shape_at_benchmark_defaults() {
        let cfg = resolve(None, &[]).unwrap();
        let model = S2TXModel::new(&cfg).unwrap();
        let w = random_window(1, 1, 7, 336);
        let f = model.forward(&w).unwrap();
        assert_eq!(f.values.shape(), (1, 7, 96));
        assert!(f.denormalized);
        assert!(f.values.all_finite());
    }

    #[test]
    fn parameter_count_is_stable() {
        let cfg = resolve(None, &[]).unwrap();
        let model = S2TXModel::new(&cfg).unwrap();
        let again = S2TXModel::new(&cfg).unwrap();
        assert_eq!(model.param_count(), again.param_count());
        assert_eq!(model.store.digest(), again.store.digest());
        // regression guard for the default architecture
        assert_eq!(model.param_count(), 352_544, "parameter count drifted");
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = tiny_cfg();
        let model = S2TXModel::new(&cfg).unwrap();
        let w = random_window(2, 3, 4, 32);
        let a = model.predict_batch(&w).unwrap();
        let b = model.predict_batch(&w).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn constant_window_forecasts_its_level_with_zero_head() {
        let cfg = tiny_cfg();
        let mut model = S2TXModel::new(&cfg).unwrap();
        model.zero_forecast_head();
        let w = Tensor::from_fn(1, 2, 32, |_, v, _| if v == 0 { 5.0 } else { -3.0 });

        let (normed, _, _) = instance_normalize(&w);
        assert!(normed.data().iter().all(|&v| v == 0.0), "z-score of a constant must be zero");

        let f = model.forward(&w).unwrap();
        for j in 0..5 {
            assert_eq!(f.values.at(0, 0, j), 5.0);
            assert_eq!(f.values.at(0, 1, j), -3.0);
        }
    }

    #[test]
    fn forward_without_instance_norm() {
        let mut cfg = tiny_cfg();
        cfg.instance_norm = false;
        let model = S2TXModel::new(&cfg).unwrap();
        let w = random_window(3, 2, 3, 32);
        let f = model.forward(&w).unwrap();
        assert!(!f.denormalized);
        assert!(f.values.all_finite());

        // the toggle changes the computation
        cfg.instance_norm = true;
        let normed = S2TXModel::new(&cfg).unwrap();
        let g = normed.forward(&w).unwrap();
        assert!(g.denormalized);
        assert_ne!(f.values.data(), g.values.data());
    }

    #[test]
    fn instance_norm_roundtrip() {
        let w = random_window(9, 2, 3, 40);
        let (normed, scale, shift) = instance_normalize(&w);
        for b in 0..2 {
            for v in 0..3 {
                for t in 0..40 {
                    let restored = normed.at(b, v, t) * scale.at(b, v, 0) + shift.at(b, v, 0);
                    let want = w.at(b, v, t);
                    assert!((restored - want).abs() <= 1e-10 * want.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn variant_full_matches_plain_constructor() {
        let cfg = tiny_cfg();
        let a = S2TXModel::new(&cfg).unwrap();
        let b = S2TXModel::make_variant(&cfg, Variant::Full).unwrap();
        let w = random_window(4, 2, 3, 32);
        assert_eq!(
            a.predict_batch(&w).unwrap().data(),
            b.predict_batch(&w).unwrap().data()
        );
    }

    #[test]
    fn no_cross_variate_equals_full_for_single_variate() {
        let cfg = tiny_cfg();
        let full = S2TXModel::make_variant(&cfg, Variant::Full).unwrap();
        let ncv = S2TXModel::make_variant(&cfg, Variant::NoCrossVariate).unwrap();
        let w = random_window(5, 2, 1, 32);
        assert_eq!(
            full.predict_batch(&w).unwrap().data(),
            ncv.predict_batch(&w).unwrap().data()
        );
    }

    #[test]
    fn no_cross_attention_head_width() {
        let cfg = tiny_cfg();
        let m = S2TXModel::make_variant(&cfg, Variant::NoCrossAttention).unwrap();
        let pn_l = cfg.patch_plan().local_patches();
        assert_eq!(m.arch.head_in_dim(), pn_l * cfg.d_model + cfg.d_model);
        let w = random_window(6, 1, 3, 32);
        assert_eq!(m.predict_batch(&w).unwrap().shape(), (1, 3, 5));
        let neither = S2TXModel::make_variant(&cfg, Variant::Neither).unwrap();
        assert_eq!(neither.predict_batch(&w).unwrap().shape(), (1, 3, 5));
    }

    #[test]
    fn unknown_variant_string_rejected() {
        assert!(Variant::parse("no_such_variant").is_err());
    }

    #[test]
    fn variate_isolation_under_frozen_context() {
        let cfg = tiny_cfg();
        let model = S2TXModel::new(&cfg).unwrap();
        let w = random_window(7, 1, 3, 32);
        let mut w2 = w.clone();
        // reshape variate 2's window (a pure level shift would be erased by
        // instance normalization)
        let v = w2.at(0, 2, 20);
        w2.set(0, 2, 20, v + 2.0);

        let run = |inputs: &Tensor, ctx_src: Option<&Tensor>| {
            let mut g = Graph::new(false);
            let pred = model.arch.build_graph_with(&mut g, &model.store, inputs, ctx_src).unwrap();
            g.value(pred).clone()
        };

        // context frozen to the original window: other variates can't move
        let base = run(&w, None);
        let frozen = run(&w2, Some(&w));
        for v in 0..2 {
            for j in 0..5 {
                assert_eq!(frozen.at(0, v, j), base.at(0, v, j), "variate {v} leaked");
            }
        }
        // live context: the cross-variate path must propagate the change
        let live = run(&w2, None);
        let moved: f64 = (0..5).map(|j| (live.at(0, 0, j) - base.at(0, 0, j)).abs()).sum();
        assert!(moved > 1e-9, "cross-variate path appears dead");
    }

    #[test]
    fn gradients_finite_through_full_graph() {
        let cfg = tiny_cfg();
        let model = S2TXModel::new(&cfg).unwrap();
        let w = random_window(8, 2, 3, 32);
        let target = random_window(18, 2, 3, 5);

        let mut g = Graph::new(true);
        let pred = model.arch.build_graph(&mut g, &model.store, &w).unwrap();
        let t = g.constant(target);
        let d = g.sub(pred, t);
        let ss = g.sum_sq(d);
        let loss = g.scale(ss, 1.0 / 30.0);
        let mut grads = g.backward(loss);
        let by_param = crate::nn::param_grads(&g, &mut grads, model.store.len());
        let mut n = 0;
        for gopt in by_param.iter() {
            let gt = gopt.as_ref().expect("every parameter should receive gradient");
            assert!(gt.all_finite(), "non-finite gradient");
            n += gt.len();
        }
        assert_eq!(n, model.param_count());
    }

    #[test]
    fn baseline_shapes_and_score_matrix() {
        let w = random_window(11, 1, 7, 64);
        let tr = BaselineModel::new(BaselineKind::VanillaTransformer, 7, 64, 24, 16, 1);
        let f = tr.forward(&w).unwrap();
        assert_eq!(f.values.shape(), (1, 7, 24));

        // the attention matrix over point-wise tokens is (L, L)
        let mut g = Graph::new(false);
        let q = g.constant(random_window(12, 1, 64, 8));
        let k = g.constant(random_window(13, 1, 64, 8));
        let probs = crate::attention::attention_probs(&mut g, q, k, 1.0 / (8f64).sqrt());
        assert_eq!(g.shape(probs), (1, 64, 64));

        let mb = BaselineModel::new(BaselineKind::PlainMamba, 7, 64, 24, 16, 1);
        let f = mb.forward(&w).unwrap();
        assert_eq!(f.values.shape(), (1, 7, 24));
    }

    #[test]
    fn mamba_baseline_state_is_lookback_independent() {
        let short = BaselineModel::new(BaselineKind::PlainMamba, 7, 64, 24, 16, 1);
        let long = BaselineModel::new(BaselineKind::PlainMamba, 7, 4096, 24, 16, 1);
        assert_eq!(short.mamba_state_bytes(), long.mamba_state_bytes());
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let cfg = tiny_cfg();
        let model = S2TXModel::new(&cfg).unwrap();
        let mut adam = Adam::new(&model.store, cfg.lr);
        // give the optimizer some non-trivial state
        let grads: Vec<Option<Tensor>> = model
            .store
            .ids()
            .map(|id| {
                let t = model.store.get(id);
                Some(Tensor::filled(t.batch(), t.rows(), t.cols(), 0.01))
            })
            .collect();
        let mut store_copy = model.store.clone();
        adam.apply(&mut store_copy, &grads);
        let model = S2TXModel { store: store_copy, ..model };

        let path = std::env::temp_dir().join(format!("s2tx-{}-ckpt.bin", std::process::id()));
        save_checkpoint(&path, &model, Some(&adam)).unwrap();
        let ckpt = load_checkpoint(&path).unwrap();
        let (restored, adam2) = model_from_checkpoint(&ckpt).unwrap();
        std::fs::remove_file(&path).ok();

        assert_eq!(ckpt.cfg, model.cfg);
        assert_eq!(restored.store.digest(), model.store.digest());
        let adam2 = adam2.unwrap();
        assert_eq!(adam2.step_count(), adam.step_count());
        let w = random_window(14, 1, 2, 32);
        assert_eq!(
            restored.predict_batch(&w).unwrap().data(),
            model.predict_batch(&w).unwrap().data()
        );
    }
}
