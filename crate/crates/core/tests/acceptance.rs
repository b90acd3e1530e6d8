//! Acceptance suite: one test per release criterion, each printing a
//! PASS / SKIP line (run with `--nocapture` to see them).
//!
//! Criteria 5 and 7 and the ETTh1 half of criterion 6 need the standard
//! ETTh1.csv benchmark file. The suite looks for it under $S2TX_DATA_DIR,
//! ./data, and <workspace>/data, and reports SKIP when absent; everything
//! else runs unconditionally. Run single-threaded for stable timing:
//! `cargo test --release -p s2tx-core --test acceptance -- --test-threads=1 --nocapture`

use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use s2tx_core::attention::AttentionParams;
use s2tx_core::config::{resolve, ExperimentConfig, Variant};
use s2tx_core::data::{
    load_csv, make_windows, synth_global_local, Coupling, CsvSchema, DatasetKind, Split,
};
use s2tx_core::gradcheck::{check_param_grads, sum_sq_loss};
use s2tx_core::graph::Graph;
use s2tx_core::model::{
    load_checkpoint, model_from_checkpoint, save_checkpoint, S2TXModel,
};
use s2tx_core::nn::ParamStore;
use s2tx_core::patching::{patch_count, PatchSpec};
use s2tx_core::profile::{sweep, PeakAlloc, ProfileKind, ProfileOptions, Regime};
use s2tx_core::scan::scan_forward;
use s2tx_core::ssm::{selective_scan, MambaDims, MambaLayer, SsmParams};
use s2tx_core::tensor::Tensor;
use s2tx_core::train_eval::{evaluate, prepare, run_ablation, run_robustness, train, PreparedData};
use s2tx_core::Forecaster;

#[global_allocator]
static ALLOC: PeakAlloc = PeakAlloc;

fn randn(rng: &mut ChaCha8Rng, n: usize, r: usize, c: usize) -> Tensor {
    let mut t = Tensor::zeros(n, r, c);
    t.randn_fill(rng, 1.0);
    t
}

fn kv(pairs: &[(&str, &str)]) -> ExperimentConfig {
    let pairs: Vec<(String, String)> =
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
    resolve(None, &pairs).unwrap()
}

// ---------------------------------------------------------------------------
// criterion 1: selective_scan equals an independent sequential recurrence
// ---------------------------------------------------------------------------

/// Plain recurrence written against the operation contract, using only std
/// math. Deliberately shares no code with the kernel under test.
fn reference_scan(inputs: &Tensor, p: &SsmParams) -> Tensor {
    let (_, seq, ch) = inputs.shape();
    let s = p.state_dim;
    let x = inputs.item(0);
    let mut h = vec![0.0; ch * s];
    let mut y = Tensor::zeros(1, seq, ch);
    for t in 0..seq {
        let xrow = &x[t * ch..(t + 1) * ch];
        let mut bt = vec![0.0; s];
        let mut ct = vec![0.0; s];
        for si in 0..s {
            for (j, &xj) in xrow.iter().enumerate() {
                bt[si] += xj * p.b_proj.at(0, j, si);
                ct[si] += xj * p.c_proj.at(0, j, si);
            }
        }
        for c in 0..ch {
            let mut pre = p.delta_b.at(0, 0, c);
            for (j, &xj) in xrow.iter().enumerate() {
                pre += xj * p.delta_w.at(0, j, c);
            }
            let dt = if pre > 30.0 { pre } else { pre.exp().ln_1p() };
            let mut acc = 0.0;
            for si in 0..s {
                let a = -p.a_log.at(0, c, si).exp();
                let abar = (dt * a).exp();
                let bbar = (dt * a).exp_m1() / a * bt[si];
                let hv = abar * h[c * s + si] + bbar * xrow[c];
                h[c * s + si] = hv;
                acc += ct[si] * hv;
            }
            y.set(0, t, c, acc + p.d_skip.at(0, 0, c) * xrow[c]);
        }
    }
    y
}

#[test]
fn criterion_1_scan_matches_independent_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xA11CE);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let ch = rng.random_range(1..=8);
        let st = rng.random_range(1..=8);
        let seq = rng.random_range(1..=32);
        let params = SsmParams::init(&mut rng, ch, st);
        let x = randn(&mut rng, 1, seq, ch);
        let got = selective_scan(&x, &params).unwrap();
        let want = reference_scan(&x, &params);
        for (a, b) in got.data().iter().zip(want.data()) {
            let rel = (a - b).abs() / b.abs().max(1e-12);
            worst = worst.max(rel);
            assert!(rel < 1e-10, "scan deviates from oracle: {a} vs {b} (rel {rel:e})");
        }
    }
    println!("[1] selective_scan vs independent oracle: PASS (100 instances, max rel {worst:.2e})");
}

// ---------------------------------------------------------------------------
// criterion 2: finite-difference gradient checks
// ---------------------------------------------------------------------------

#[test]
fn criterion_2_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xBEEF);
    let mut total = 0usize;

    // mamba block on a (5, 8) input
    let mut store = ParamStore::new();
    let dims = MambaDims { d_model: 8, d_state: 4, expand: 2, d_conv: 4 };
    let layer = MambaLayer::init(&mut store, &mut rng, "blk", dims);
    let x = randn(&mut rng, 1, 5, 8);
    let target = randn(&mut rng, 1, 5, 8);
    let report = check_param_grads(&mut store, 1e-5, 1e-4, |g, st| {
        let xv = g.constant(x.clone());
        let y = layer.forward(g, st, xv).unwrap();
        sum_sq_loss(g, y, &target)
    });
    total += report.checked;

    // local transformer layer with cross-attention
    let mut store = ParamStore::new();
    let layer =
        s2tx_core::attention::LocalLayer::init(&mut store, &mut rng, "loc", 6, 2, 10, true);
    let tokens = randn(&mut rng, 1, 4, 6);
    let ctx = randn(&mut rng, 1, 3, 6);
    let target = randn(&mut rng, 1, 4, 6);
    let report = check_param_grads(&mut store, 1e-5, 1e-4, |g, st| {
        let tv = g.constant(tokens.clone());
        let cv = g.constant(ctx.clone());
        let y = layer.forward(g, st, tv, Some(cv));
        sum_sq_loss(g, y, &target)
    });
    total += report.checked;

    // forecast head
    let mut store = ParamStore::new();
    let head = s2tx_core::attention::ForecastHead::init(&mut store, &mut rng, 8, 3);
    let feats = randn(&mut rng, 2, 1, 8);
    let target = randn(&mut rng, 2, 1, 3);
    let report = check_param_grads(&mut store, 1e-5, 1e-4, |g, st| {
        let f = g.constant(feats.clone());
        let y = head.forward(g, st, f);
        sum_sq_loss(g, y, &target)
    });
    total += report.checked;

    // full forward on a tiny configuration
    let cfg = kv(&[
        ("dataset", "synthetic"),
        ("lookback", "16"),
        ("local_window", "8"),
        ("pl_g", "4"),
        ("str_g", "2"),
        ("pl_l", "2"),
        ("str_l", "1"),
        ("horizon", "3"),
        ("d_model", "8"),
        ("n_heads", "2"),
        ("n_local_layers", "1"),
        ("n_mamba_layers", "1"),
        ("d_state", "4"),
        ("ffn_width", "16"),
        ("seed", "5"),
    ]);
    let mut model = S2TXModel::new(&cfg).unwrap();
    let w = randn(&mut rng, 1, 2, 16);
    let target = randn(&mut rng, 1, 2, 3);
    let arch = model.arch.clone();
    let report = check_param_grads(&mut model.store, 1e-5, 1e-4, |g, st| {
        let pred = arch.build_graph(g, st, &w).unwrap();
        sum_sq_loss(g, pred, &target)
    });
    total += report.checked;

    println!("[2] gradient checks vs central differences: PASS ({total} parameters checked)");
}

// ---------------------------------------------------------------------------
// criterion 3: cross_attention(T, T) is bitwise self_attention(T)
// ---------------------------------------------------------------------------

#[test]
fn criterion_3_cross_equals_self_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE);
    for case in 0..50 {
        let heads = [1usize, 2, 4][rng.random_range(0..3)];
        let dm = heads * rng.random_range(1..=6);
        let lt = rng.random_range(1..=12);
        let n = rng.random_range(1..=2);
        let mut store = ParamStore::new();
        let p = AttentionParams::init(&mut store, &mut rng, "a", dm, heads);
        let t = randn(&mut rng, n, lt, dm);

        let mut g = Graph::new(false);
        let tv = g.constant(t.clone());
        let sv = g.constant(t.clone());
        let cross = p.cross(&mut g, &store, sv, tv);
        let cross = g.value(cross).clone();

        let mut g = Graph::new(false);
        let tv = g.constant(t.clone());
        let selfa = p.self_attn(&mut g, &store, tv);
        let selfa = g.value(selfa).clone();

        assert_eq!(cross.data(), selfa.data(), "case {case}: not bitwise identical");
    }
    println!("[3] cross_attention(T,T) == self_attention(T) bitwise: PASS (50 shapes)");
}

// ---------------------------------------------------------------------------
// criterion 4: shape ledger
// ---------------------------------------------------------------------------

#[test]
fn criterion_4_shape_ledger() {
    assert_eq!(patch_count(336, &PatchSpec::global(48, 16)).unwrap(), 18);
    assert_eq!(patch_count(168, &PatchSpec::local(16, 8)).unwrap(), 19);
    assert_eq!(patch_count(192, &PatchSpec::global(16, 8)).unwrap(), 22);
    assert_eq!(patch_count(96, &PatchSpec::local(4, 2)).unwrap(), 46);

    let defaults = resolve(None, &[]).unwrap();
    assert_eq!(defaults.patch_plan().global_patches(), 18);
    assert_eq!(defaults.patch_plan().local_patches(), 19);
    let exchange = kv(&[("dataset", "exchange")]);
    assert_eq!(exchange.patch_plan().global_patches(), 22);
    assert_eq!(exchange.patch_plan().local_patches(), 46);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for &h in &[96usize, 192, 336, 720] {
        let cfg = kv(&[("horizon", &h.to_string())]);
        let model = S2TXModel::new(&cfg).unwrap();
        let w = randn(&mut rng, 1, 7, 336);
        let f = model.forward(&w).unwrap();
        assert_eq!(f.values.shape(), (1, 7, h), "horizon {h}");
    }
    println!("[4] shape ledger (PN_g/PN_l and all four horizons): PASS");
}

// ---------------------------------------------------------------------------
// ETTh1-gated criteria
// ---------------------------------------------------------------------------

fn etth1_path() -> Option<PathBuf> {
    let mut candidates: Vec<PathBuf> = Vec::new();
    if let Ok(d) = std::env::var("S2TX_DATA_DIR") {
        candidates.push(Path::new(&d).join("ETTh1.csv"));
    }
    candidates.push(PathBuf::from("data/ETTh1.csv"));
    candidates.push(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/ETTh1.csv"));
    candidates.into_iter().find(|p| p.exists())
}

const ETTH1_SKIP: &str =
    "ETTh1.csv not found (set S2TX_DATA_DIR or place it under ./data); see README";

/// Benchmark-default configuration for the desk-scale ETTh1 run. Early
/// stopping usually fires well before the 10-epoch budget (<= 30 allowed).
fn etth1_cfg() -> ExperimentConfig {
    kv(&[
        ("dataset", "etth1"),
        ("horizon", "96"),
        ("max_epochs", "10"),
        ("patience", "3"),
        ("seed", "1"),
    ])
}

struct TrainedEtth1 {
    model: S2TXModel,
    data: PreparedData,
    test_mse: f64,
}

static ETTH1_RUN: OnceLock<Option<Arc<TrainedEtth1>>> = OnceLock::new();

fn trained_etth1() -> Option<Arc<TrainedEtth1>> {
    ETTH1_RUN
        .get_or_init(|| {
            let path = etth1_path()?;
            let cfg = etth1_cfg();
            let frame = load_csv(&path, &CsvSchema::default(), Some((7, 17420)))
                .expect("ETTh1.csv present but malformed");
            let data = prepare(&frame, DatasetKind::Etth1).expect("standard split");
            let mut model = S2TXModel::new(&cfg).expect("valid config");
            let started = std::time::Instant::now();
            let (state, _) = train(&mut model, &data).expect("training run");
            let stream = make_windows(
                &data.frame,
                &data.split,
                Split::Test,
                &cfg.window_spec(),
                1,
                cfg.batch_size,
            )
            .expect("test stream");
            let report = evaluate(&model, stream).expect("test evaluation");
            // repeat-last-value floor, as a sanity reference for the run log
            let stream = make_windows(
                &data.frame,
                &data.split,
                Split::Test,
                &cfg.window_spec(),
                1,
                cfg.batch_size,
            )
            .expect("test stream");
            let naive =
                evaluate(&s2tx_core::train_eval::NaiveLastValue { horizon: cfg.horizon }, stream)
                    .expect("naive evaluation");
            assert!(naive.mse.is_finite() && report.mse < naive.mse);
            println!(
                "    (ETTh1 desk-scale training: {} epochs, best val {:.4}, test mse {:.4}, naive floor {:.4}, {:.0}s)",
                state.history.len(),
                state.best_val,
                report.mse,
                naive.mse,
                started.elapsed().as_secs_f64()
            );
            Some(Arc::new(TrainedEtth1 { model, data, test_mse: report.mse }))
        })
        .clone()
}

#[test]
fn criterion_5_etth1_desk_scale_reproduction() {
    match trained_etth1() {
        None => println!("[5] ETTh1 desk-scale reproduction: SKIP ({ETTH1_SKIP})"),
        Some(run) => {
            assert!(
                run.test_mse <= 0.43,
                "ETTh1 H=96 test MSE {:.4} exceeds the 0.43 bound",
                run.test_mse
            );
            println!(
                "[5] ETTh1 desk-scale reproduction: PASS (test MSE {:.4} <= 0.43)",
                run.test_mse
            );
        }
    }
}

// ---------------------------------------------------------------------------
// criterion 6: ablation ordering
// ---------------------------------------------------------------------------

fn assert_full_is_best(rows: &[s2tx_core::train_eval::AblationRow], label: &str) -> f64 {
    let full = rows.iter().find(|r| r.variant == Variant::Full).unwrap().avg_mse;
    for row in rows {
        assert!(
            full <= row.avg_mse + 1e-12,
            "{label}: full ({:.5}) must not lose to {} ({:.5})",
            full,
            row.variant.name(),
            row.avg_mse
        );
    }
    full
}

#[test]
fn criterion_6_ablation_ordering() {
    // Fixture built to need both removed paths: children are lagged copies of
    // their parent, so every forecast step of variates 2 and 3 depends on
    // parent values that sit outside the child's own local window and exceed
    // what the pooled-fusion bottleneck can carry. The narrow width keeps the
    // four trainings fast and makes the pooled variant's capacity cap bind.
    let frame =
        synth_global_local(4, 2500, 17, Coupling { cross_strength: -0.95, regime_gain: 1.0 });
    let cfg = kv(&[
        ("dataset", "synthetic"),
        ("horizon", "96"),
        ("lookback", "192"),
        ("local_window", "96"),
        ("pl_g", "16"),
        ("str_g", "8"),
        ("pl_l", "4"),
        ("str_l", "2"),
        ("d_model", "8"),
        ("n_heads", "2"),
        ("n_local_layers", "1"),
        ("n_mamba_layers", "1"),
        ("d_state", "16"),
        ("ffn_width", "16"),
        ("max_epochs", "24"),
        ("patience", "24"),
        ("lr", "0.003"),
        ("seed", "7"),
    ]);
    let rows = run_ablation(&cfg, &frame, &[96]).unwrap();
    let full = assert_full_is_best(&rows, "synthetic fixture");
    let listing: Vec<String> =
        rows.iter().map(|r| format!("{}={:.4}", r.variant.name(), r.avg_mse)).collect();

    match etth1_path() {
        None => println!(
            "[6] ablation ordering: PASS on synthetic fixture (full={full:.4}; {}); ETTh1 half SKIP ({ETTH1_SKIP})",
            listing.join(", ")
        ),
        Some(path) => {
            let frame = load_csv(&path, &CsvSchema::default(), Some((7, 17420))).unwrap();
            // reduced width and sampling keep four desk-scale trainings tractable
            let cfg = kv(&[
                ("dataset", "etth1"),
                ("horizon", "96"),
                ("d_model", "32"),
                ("ffn_width", "64"),
                ("max_epochs", "5"),
                ("patience", "5"),
                ("train_stride", "2"),
                ("seed", "1"),
            ]);
            let rows = run_ablation(&cfg, &frame, &[96]).unwrap();
            let full_e = assert_full_is_best(&rows, "ETTh1 H=96");
            let listing_e: Vec<String> =
                rows.iter().map(|r| format!("{}={:.4}", r.variant.name(), r.avg_mse)).collect();
            println!(
                "[6] ablation ordering: PASS (synthetic full={full:.4}; ETTh1 full={full_e:.4}: {})",
                listing_e.join(", ")
            );
        }
    }
}

// ---------------------------------------------------------------------------
// criterion 7: missing-value robustness
// ---------------------------------------------------------------------------

#[test]
fn criterion_7_missing_value_robustness() {
    let Some(run) = trained_etth1() else {
        println!("[7] missing-value robustness: SKIP ({ETTH1_SKIP})");
        return;
    };
    let ratios = [0.0, 0.04, 0.08, 0.16, 0.24, 0.32, 0.40];
    let rows = run_robustness(&run.model, &run.data, &ratios, 4, 99).unwrap();
    assert_eq!(rows[0].degradation_pct, 0.0, "clean run must show zero degradation");
    for pair in rows.windows(2) {
        assert!(
            pair[1].degradation_pct >= pair[0].degradation_pct - 1.0,
            "degradation not weakly increasing: {:?} -> {:?}",
            pair[0],
            pair[1]
        );
    }
    let worst = rows.last().unwrap();
    assert!(
        worst.degradation_pct <= 15.0,
        "degradation at 40% missing is {:.2}%, above the 15% bound",
        worst.degradation_pct
    );
    println!(
        "[7] missing-value robustness: PASS (40% missing degrades MSE by {:.2}% <= 15%)",
        worst.degradation_pct
    );
}

// ---------------------------------------------------------------------------
// criterion 8: runtime scaling
// ---------------------------------------------------------------------------

#[test]
fn criterion_8_runtime_scaling() {
    let cfg = resolve(None, &[]).unwrap();
    let opts = ProfileOptions { repetitions: 5, variates: 7, seed: 11, ..Default::default() };
    let lengths = [336usize, 672, 1344, 2688];
    let kinds = [ProfileKind::S2tx, ProfileKind::Transformer, ProfileKind::Mamba];
    let points = sweep(&kinds, &lengths, Regime::FixedPatchNumber, &cfg, &opts).unwrap();

    let ms = |kind: ProfileKind, l: usize| {
        let p = points.iter().find(|p| p.kind == kind && p.lookback == l).unwrap();
        assert!(!p.censored, "{} at L={l} was censored", kind.name());
        p.forward_ms
    };
    let s2tx_ratio = ms(ProfileKind::S2tx, 2688) / ms(ProfileKind::S2tx, 336);
    let tr_ratio = ms(ProfileKind::Transformer, 2688) / ms(ProfileKind::Transformer, 336);
    let mb_ratio = ms(ProfileKind::Mamba, 2688) / ms(ProfileKind::Mamba, 336);

    assert!(s2tx_ratio < 2.0, "fixed-patch-number time ratio {s2tx_ratio:.2} must stay below 2");
    assert!(tr_ratio > 10.0, "transformer time ratio {tr_ratio:.2} must exceed 10");
    assert!((4.0..=16.0).contains(&mb_ratio), "mamba time ratio {mb_ratio:.2} outside [4, 16]");

    let t_big = ms(ProfileKind::Transformer, 2688);
    let m_big = ms(ProfileKind::Mamba, 2688);
    let s_big = ms(ProfileKind::S2tx, 2688);
    assert!(
        t_big > m_big && m_big > s_big,
        "ordering at L=2688 must be transformer ({t_big:.1}ms) > mamba ({m_big:.1}ms) > s2tx ({s_big:.1}ms)"
    );

    // medians for the quadratic/linear kinds grow with L, 10% jitter allowed
    for kind in [ProfileKind::Transformer, ProfileKind::Mamba] {
        for pair in lengths.windows(2) {
            let (a, b) = (ms(kind, pair[0]), ms(kind, pair[1]));
            assert!(
                b >= 0.9 * a,
                "{} time not monotone in L: {a:.2}ms at {} vs {b:.2}ms at {}",
                kind.name(),
                pair[0],
                pair[1]
            );
        }
    }

    // peak transient memory at the largest L: quadratic scores dominate both
    // the streaming recurrence and the constant-patch-count forward
    let mem = |kind: ProfileKind, l: usize| {
        points
            .iter()
            .find(|p| p.kind == kind && p.lookback == l)
            .and_then(|p| p.peak_mem_bytes)
            .expect("allocator installed in this binary")
    };
    let (t_mem, m_mem, s_mem) =
        (mem(ProfileKind::Transformer, 2688), mem(ProfileKind::Mamba, 2688), mem(ProfileKind::S2tx, 2688));
    assert!(
        t_mem > s_mem && t_mem > m_mem,
        "transformer peak ({t_mem}B) must dominate s2tx ({s_mem}B) and mamba ({m_mem}B)"
    );
    println!(
        "[8] runtime scaling: PASS (ratios s2tx {s2tx_ratio:.2} < 2, transformer {tr_ratio:.1} > 10, mamba {mb_ratio:.1} in [4,16]; L=2688 order ok)"
    );
}

// ---------------------------------------------------------------------------
// criterion 9: determinism and persistence
// ---------------------------------------------------------------------------

#[test]
fn criterion_9_determinism_and_persistence() {
    let frame =
        synth_global_local(3, 700, 23, Coupling { cross_strength: -0.8, regime_gain: 1.2 });
    let cfg = kv(&[
        ("dataset", "synthetic"),
        ("lookback", "48"),
        ("local_window", "24"),
        ("pl_g", "8"),
        ("str_g", "4"),
        ("pl_l", "4"),
        ("str_l", "2"),
        ("horizon", "8"),
        ("d_model", "8"),
        ("n_heads", "2"),
        ("n_local_layers", "1"),
        ("n_mamba_layers", "1"),
        ("d_state", "4"),
        ("ffn_width", "16"),
        ("max_epochs", "3"),
        ("batch_size", "16"),
        ("train_stride", "2"),
        ("seed", "31"),
    ]);
    let data = prepare(&frame, DatasetKind::Custom).unwrap();

    let mut a = S2TXModel::new(&cfg).unwrap();
    let mut b = S2TXModel::new(&cfg).unwrap();
    let (sa, adam) = train(&mut a, &data).unwrap();
    let (sb, _) = train(&mut b, &data).unwrap();
    assert_eq!(sa.history.len(), sb.history.len());
    for (x, y) in sa.history.iter().zip(sb.history.iter()) {
        assert!(
            x.train_loss == y.train_loss && x.val_mse == y.val_mse,
            "loss curves must be bit-identical: {x:?} vs {y:?}"
        );
    }
    assert_eq!(a.store.digest(), b.store.digest(), "final parameters must match bitwise");

    // checkpoint round-trip preserves evaluation metrics exactly
    let stream = make_windows(&data.frame, &data.split, Split::Test, &cfg.window_spec(), 1, 16)
        .unwrap();
    let before = evaluate(&a, stream).unwrap();
    let path = std::env::temp_dir().join(format!("s2tx-acc-{}.ckpt", std::process::id()));
    save_checkpoint(&path, &a, Some(&adam)).unwrap();
    let ckpt = load_checkpoint(&path).unwrap();
    let (restored, _) = model_from_checkpoint(&ckpt).unwrap();
    std::fs::remove_file(&path).ok();
    let stream = make_windows(&data.frame, &data.split, Split::Test, &cfg.window_spec(), 1, 16)
        .unwrap();
    let after = evaluate(&restored, stream).unwrap();
    assert_eq!(before.mse, after.mse, "round-trip must preserve MSE exactly");
    assert_eq!(before.mae, after.mae, "round-trip must preserve MAE exactly");

    println!(
        "[9] determinism and persistence: PASS ({} epochs bit-identical; checkpoint round-trip exact)",
        sa.history.len()
    );
}

// ---------------------------------------------------------------------------
// supporting checks used by several criteria
// ---------------------------------------------------------------------------

/// The scan kernel refuses non-finite intermediates with the offending step.
#[test]
fn scan_surfaces_numeric_errors_with_step_index() {
    let x = Tensor::filled(1, 3, 2, 1e308);
    let dt = Tensor::filled(1, 3, 2, 1.0);
    let b = Tensor::filled(1, 3, 1, 1e308);
    let c = Tensor::filled(1, 3, 1, 1e308);
    let a = Tensor::filled(1, 2, 1, -1e-6);
    let d = Tensor::filled(1, 1, 2, 1.0);
    let err = scan_forward(&x, &dt, &b, &c, &a, &d, false).unwrap_err();
    match err {
        s2tx_core::Error::Numeric { context, step } => {
            assert_eq!(context, "selective_scan");
            assert_eq!(step, 0);
        }
        other => panic!("expected numeric error, got {other}"),
    }
}
