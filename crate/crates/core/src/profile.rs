//! Runtime and peak-memory scaling harness.
//!
//! Sweeps look-back lengths across model kinds and records median forward
//! time plus peak transient allocation. Peak memory is observed through
//! `PeakAlloc`, which the measuring binary installs as its global allocator;
//! without it, memory is reported as unavailable rather than guessed.

use std::alloc::{GlobalAlloc, Layout, System};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ExperimentConfig, Variant};
use crate::error::{Error, Result};
use crate::model::{BaselineKind, BaselineModel, Forecaster, S2TXModel};
use crate::tensor::Tensor;

static CURRENT_BYTES: AtomicUsize = AtomicUsize::new(0);
static PEAK_BYTES: AtomicUsize = AtomicUsize::new(0);
static TRACKING: AtomicBool = AtomicBool::new(false);

/// Counting allocator. Install in a binary or test with
/// `#[global_allocator] static A: PeakAlloc = PeakAlloc;` to enable peak
/// measurements.
pub struct PeakAlloc;

unsafe impl GlobalAlloc for PeakAlloc {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        TRACKING.store(true, Ordering::Relaxed);
        let p = unsafe { System.alloc(layout) };
        if !p.is_null() {
            let cur = CURRENT_BYTES.fetch_add(layout.size(), Ordering::Relaxed) + layout.size();
            PEAK_BYTES.fetch_max(cur, Ordering::Relaxed);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        CURRENT_BYTES.fetch_sub(layout.size(), Ordering::Relaxed);
        unsafe { System.dealloc(ptr, layout) }
    }
}

impl PeakAlloc {
    pub fn installed() -> bool {
        TRACKING.load(Ordering::Relaxed)
    }

    pub fn reset_peak() {
        PEAK_BYTES.store(CURRENT_BYTES.load(Ordering::Relaxed), Ordering::Relaxed);
    }

    /// Peak bytes since the last reset, minus the level at reset time is not
    /// subtracted; callers compare peaks to a baseline they captured.
    pub fn peak_bytes() -> usize {
        PEAK_BYTES.load(Ordering::Relaxed)
    }

    pub fn current_bytes() -> usize {
        CURRENT_BYTES.load(Ordering::Relaxed)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regime {
    /// Patch length and stride scale with L so the global patch count stays
    /// constant.
    FixedPatchNumber,
    /// Patch geometry stays fixed, so the patch count grows with L.
    FixedStride,
}

impl Regime {
    pub fn name(&self) -> &'static str {
        match self {
            Regime::FixedPatchNumber => "fixed_patch_number",
            Regime::FixedStride => "fixed_stride",
        }
    }

    pub fn parse(s: &str) -> Result<Regime> {
        match s {
            "fixed_patch_number" | "fixed-patch-number" => Ok(Regime::FixedPatchNumber),
            "fixed_stride" | "fixed-stride" => Ok(Regime::FixedStride),
            other => Err(Error::Config(format!("unknown regime '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProfileKind {
    S2tx,
    SstLike,
    Transformer,
    Mamba,
}

impl ProfileKind {
    pub const DEFAULT: [ProfileKind; 4] =
        [ProfileKind::S2tx, ProfileKind::SstLike, ProfileKind::Transformer, ProfileKind::Mamba];

    pub fn name(&self) -> &'static str {
        match self {
            ProfileKind::S2tx => "s2tx",
            ProfileKind::SstLike => "sst_like",
            ProfileKind::Transformer => "transformer",
            ProfileKind::Mamba => "mamba",
        }
    }

    pub fn parse(s: &str) -> Result<ProfileKind> {
        match s {
            "s2tx" => Ok(ProfileKind::S2tx),
            "sst_like" | "sst-like" | "sst" => Ok(ProfileKind::SstLike),
            "transformer" => Ok(ProfileKind::Transformer),
            "mamba" => Ok(ProfileKind::Mamba),
            other => Err(Error::Config(format!("unknown profile kind '{other}'"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ScalingPoint {
    pub kind: ProfileKind,
    pub lookback: usize,
    pub regime: Regime,
    pub forward_ms: f64,
    pub peak_mem_bytes: Option<u64>,
    pub repetitions: usize,
    /// True when the point was skipped because its estimated footprint
    /// exceeded the memory budget.
    pub censored: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct ProfileOptions {
    pub repetitions: usize,
    pub warmup: usize,
    pub variates: usize,
    pub mem_budget_bytes: u64,
    pub seed: u64,
}

impl Default for ProfileOptions {
    fn default() -> Self {
        ProfileOptions {
            repetitions: 5,
            warmup: 1,
            variates: 7,
            mem_budget_bytes: 3 * 1024 * 1024 * 1024,
            seed: 7,
        }
    }
}

/// Coarse upper bound on transient forward bytes, used only to censor points
/// that would not fit the budget.
pub fn estimate_forward_bytes(kind: ProfileKind, l: usize, d: usize, d_model: usize) -> u64 {
    let l = l as u64;
    let d = d as u64;
    let dm = d_model as u64;
    match kind {
        // two (L, L) score/prob nodes per head plus ~16 (L, dm) activations
        ProfileKind::Transformer => 8 * (2 * 2 * l * l + 16 * l * dm + 4 * l * d),
        // streaming state plus input and embedding scratch
        ProfileKind::Mamba => 8 * (8 * dm * dm + 8 * l * d / 8 + 64 * dm + l * d * 8),
        // activations scale with D * PN_g * d_model; bounded via L for the
        // fixed-stride regime
        ProfileKind::S2tx | ProfileKind::SstLike => 8 * (64 * d * l * dm / 8 + 32 * l * d),
    }
}

type ForwardFn = Box<dyn Fn(&Tensor) -> Result<Tensor>>;

/// Build the model for one sweep point and return a forward closure.
fn point_runner(
    kind: ProfileKind,
    l: usize,
    regime: Regime,
    base: &ExperimentConfig,
    opts: &ProfileOptions,
) -> Result<ForwardFn> {
    match kind {
        ProfileKind::S2tx | ProfileKind::SstLike => {
            let mut cfg = base.clone();
            cfg.lookback = l;
            if l < cfg.local_window {
                cfg.local_window = l / 2;
            }
            match regime {
                Regime::FixedPatchNumber => {
                    if !l.is_multiple_of(base.lookback) {
                        return Err(Error::Config(format!(
                            "fixed-patch-number sweep needs L divisible by the base look-back {}; got {l}",
                            base.lookback
                        )));
                    }
                    let m = l / base.lookback;
                    cfg.pl_g = base.pl_g * m;
                    cfg.str_g = base.str_g * m;
                }
                Regime::FixedStride => {}
            }
            cfg.variant = match kind {
                ProfileKind::S2tx => Variant::Full,
                _ => Variant::NoCrossAttention,
            };
            let model = S2TXModel::new(&cfg)?;
            Ok(Box::new(move |w: &Tensor| model.predict_batch(w)))
        }
        ProfileKind::Transformer => {
            let model = BaselineModel::new(
                BaselineKind::VanillaTransformer,
                opts.variates,
                l,
                base.horizon,
                base.d_model,
                opts.seed,
            );
            Ok(Box::new(move |w: &Tensor| model.forward(w).map(|f| f.values)))
        }
        ProfileKind::Mamba => {
            let model = BaselineModel::new(
                BaselineKind::PlainMamba,
                opts.variates,
                l,
                base.horizon,
                base.d_model,
                opts.seed,
            );
            Ok(Box::new(move |w: &Tensor| model.forward(w).map(|f| f.values)))
        }
    }
}

/// Sweep the given kinds over strictly increasing look-back lengths, timing a
/// single-window forward per point.
pub fn sweep(
    kinds: &[ProfileKind],
    l_values: &[usize],
    regime: Regime,
    base: &ExperimentConfig,
    opts: &ProfileOptions,
) -> Result<Vec<ScalingPoint>> {
    if l_values.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config("look-back values must be strictly increasing".into()));
    }
    let mut points = Vec::new();
    for &kind in kinds {
        for &l in l_values {
            let estimate = estimate_forward_bytes(kind, l, opts.variates, base.d_model);
            if estimate > opts.mem_budget_bytes {
                points.push(ScalingPoint {
                    kind,
                    lookback: l,
                    regime,
                    forward_ms: f64::NAN,
                    peak_mem_bytes: None,
                    repetitions: 0,
                    censored: true,
                });
                continue;
            }
            let run = point_runner(kind, l, regime, base, opts)?;
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ l as u64);
            let mut window = Tensor::zeros(1, opts.variates, l);
            window.randn_fill(&mut rng, 1.0);

            // warmup, with peak-memory capture when the allocator is ours
            let mem = {
                PeakAlloc::reset_peak();
                let before = PeakAlloc::current_bytes();
                for _ in 0..opts.warmup.max(1) {
                    run(&window)?;
                }
                if PeakAlloc::installed() {
                    Some((PeakAlloc::peak_bytes().saturating_sub(before)) as u64)
                } else {
                    None
                }
            };

            let mut times = Vec::with_capacity(opts.repetitions);
            for _ in 0..opts.repetitions {
                let t0 = Instant::now();
                let out = run(&window)?;
                times.push(t0.elapsed().as_secs_f64() * 1e3);
                std::hint::black_box(out.data()[0]);
            }
            times.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let median = times[times.len() / 2];
            points.push(ScalingPoint {
                kind,
                lookback: l,
                regime,
                forward_ms: median,
                peak_mem_bytes: mem,
                repetitions: opts.repetitions,
                censored: false,
            });
        }
    }
    Ok(points)
}

pub fn render_table(points: &[ScalingPoint]) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "{:<12} {:>8} {:<19} {:>12} {:>14} {:>5}\n",
        "kind", "L", "regime", "forward_ms", "peak_bytes", "reps"
    ));
    for p in points {
        let ms = if p.censored { "censored".to_string() } else { format!("{:.3}", p.forward_ms) };
        let mem = match (p.censored, p.peak_mem_bytes) {
            (true, _) => "-".to_string(),
            (false, Some(b)) => b.to_string(),
            (false, None) => "unavailable".to_string(),
        };
        s.push_str(&format!(
            "{:<12} {:>8} {:<19} {:>12} {:>14} {:>5}\n",
            p.kind.name(),
            p.lookback,
            p.regime.name(),
            ms,
            mem,
            p.repetitions
        ));
    }
    s
}

/// Plot-ready CSV: `L,kind,regime,ms,bytes`.
pub fn write_plot_csv(path: &Path, points: &[ScalingPoint]) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "L,kind,regime,ms,bytes")?;
    for p in points {
        let ms = if p.censored { String::new() } else { format!("{:.6}", p.forward_ms) };
        let bytes = match (p.censored, p.peak_mem_bytes) {
            (false, Some(b)) => b.to_string(),
            _ => String::new(),
        };
        writeln!(f, "{},{},{},{},{}", p.lookback, p.kind.name(), p.regime.name(), ms, bytes)?;
    }
    Ok(())
}

pub fn to_jsonl(points: &[ScalingPoint]) -> String {
    let mut s = String::new();
    for p in points {
        let mem = match p.peak_mem_bytes {
            Some(b) => b.to_string(),
            None => "null".to_string(),
        };
        let ms = if p.censored { "null".to_string() } else { format!("{}", p.forward_ms) };
        s.push_str(&format!(
            "{{\"kind\":\"{}\",\"L\":{},\"regime\":\"{}\",\"forward_ms\":{},\"peak_mem_bytes\":{},\"repetitions\":{},\"censored\":{}}}\n",
            p.kind.name(),
            p.lookback,
            p.regime.name(),
            ms,
            mem,
            p.repetitions,
            p.censored
        ));
    }
    s
}
