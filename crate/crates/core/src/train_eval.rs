//! Minibatch training with early stopping, evaluation metrics, and the
//! ablation and missing-value robustness drivers.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ExperimentConfig, Variant};
use crate::data::{
    corrupt_missing, gather_batch, make_windows, window_offsets, DatasetKind, SeriesFrame, Split,
    SplitSpec,
};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{Forecaster, S2TXModel};
use crate::nn::{param_grads, Adam};
use crate::tensor::Tensor;

/// Normalized frame plus its split boundaries; everything downstream consumes
/// this pair.
pub struct PreparedData {
    pub frame: SeriesFrame,
    pub split: SplitSpec,
}

pub fn prepare(frame: &SeriesFrame, kind: DatasetKind) -> Result<PreparedData> {
    let split = SplitSpec::for_dataset(kind, frame)?;
    let normalized = split.normalize(frame);
    Ok(PreparedData { frame: normalized, split })
}

#[derive(Clone, Debug)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mse: f64,
    pub wall_s: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainState {
    /// Next epoch index to run.
    pub epoch: usize,
    pub best_val: f64,
    pub best_epoch: usize,
    pub patience_used: usize,
    pub seed: u64,
    pub history: Vec<EpochLog>,
}

impl TrainState {
    fn fresh(seed: u64) -> Self {
        TrainState {
            epoch: 0,
            best_val: f64::INFINITY,
            best_epoch: 0,
            patience_used: 0,
            seed,
            history: Vec::new(),
        }
    }
}

/// Per-epoch shuffle order derives from (seed, epoch) alone, so training can
/// resume from a checkpoint and replay the exact remaining schedule.
fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Train with squared-error loss, early stopping on validation MSE, and
/// best-checkpoint restoration. On divergence the model keeps the best
/// parameters seen so far and an error is returned.
pub fn train(model: &mut S2TXModel, data: &PreparedData) -> Result<(TrainState, Adam)> {
    let adam = Adam::new(&model.store, model.cfg.lr);
    let state = TrainState::fresh(model.cfg.seed);
    train_resume(model, data, state, adam)
}

/// Continue training from a saved state (or run `train` for a fresh one).
pub fn train_resume(
    model: &mut S2TXModel,
    data: &PreparedData,
    mut state: TrainState,
    mut adam: Adam,
) -> Result<(TrainState, Adam)> {
    let cfg = model.cfg.clone();
    let ws = cfg.window_spec();
    let offsets = window_offsets(&data.split, Split::Train, &ws, cfg.train_stride)?;
    // validation is optional on tiny fixtures that cannot fit a window
    let has_val = {
        let (_, len) = data.split.segment(Split::Val);
        len >= ws.lookback + ws.horizon
    };

    let mut best_params = model.store.clone();
    if state.best_val.is_finite() {
        // resumed: current parameters are the best we can restore to
    }

    while state.epoch < cfg.max_epochs {
        let epoch = state.epoch;
        let started = Instant::now();
        let mut order = offsets.clone();
        order.shuffle(&mut epoch_rng(state.seed, epoch));

        let mut loss_sum = 0.0;
        let mut elems = 0usize;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = gather_batch(&data.frame, &data.split.stats, chunk, &ws);
            let n_el = batch.targets.len();

            let mut g = Graph::new(true);
            let pred = model.arch.build_graph(&mut g, &model.store, &batch.inputs)?;
            let t = g.constant(batch.targets);
            let diff = g.sub(pred, t);
            let ss = g.sum_sq(diff);
            let loss = g.scale(ss, 1.0 / n_el as f64);
            let loss_v = g.scalar_value(loss);
            if !loss_v.is_finite() {
                model.store = best_params;
                return Err(Error::Diverged { epoch, batch: batch_idx });
            }
            loss_sum += loss_v * n_el as f64;
            elems += n_el;

            let mut grads = g.backward(loss);
            let by_param = param_grads(&g, &mut grads, model.store.len());
            adam.apply(&mut model.store, &by_param);
        }
        let train_loss = loss_sum / elems.max(1) as f64;

        let val_mse = if has_val {
            let stream =
                make_windows(&data.frame, &data.split, Split::Val, &ws, cfg.eval_stride, cfg.batch_size)?;
            evaluate(model, stream)?.mse
        } else {
            train_loss
        };

        state.epoch += 1;
        state.history.push(EpochLog {
            epoch,
            train_loss,
            val_mse,
            wall_s: started.elapsed().as_secs_f64(),
        });

        if val_mse < state.best_val {
            state.best_val = val_mse;
            state.best_epoch = epoch;
            state.patience_used = 0;
            best_params = model.store.clone();
        } else {
            state.patience_used += 1;
            if state.patience_used > cfg.patience {
                break;
            }
        }
    }

    model.store = best_params;
    Ok((state, adam))
}

#[derive(Clone, Debug)]
pub struct MetricReport {
    pub mse: f64,
    pub mae: f64,
    /// MSE per forecast step (1-based step i at index i-1).
    pub per_step_mse: Vec<f64>,
    pub wall_clock_s: f64,
    pub windows: usize,
}

/// Mean squared / absolute error over every window, variate, and step of the
/// stream, on the stream's (normalized) scale.
pub fn evaluate(
    model: &dyn Forecaster,
    stream: impl Iterator<Item = crate::data::ForecastBatch>,
) -> Result<MetricReport> {
    let started = Instant::now();
    let h = model.horizon();
    let mut se = 0.0;
    let mut ae = 0.0;
    let mut per_step = vec![0.0; h];
    let mut per_step_n = 0usize;
    let mut elems = 0usize;
    let mut windows = 0usize;
    for batch in stream {
        let pred = model.predict_batch(&batch.inputs)?;
        let (n, d, hh) = pred.shape();
        assert_eq!(hh, h, "forecaster horizon mismatch");
        assert_eq!(batch.targets.shape(), (n, d, h));
        for b in 0..n {
            for v in 0..d {
                for j in 0..h {
                    let e = pred.at(b, v, j) - batch.targets.at(b, v, j);
                    se += e * e;
                    ae += e.abs();
                    per_step[j] += e * e;
                }
            }
        }
        windows += n;
        per_step_n += n * d;
        elems += n * d * h;
    }
    if elems == 0 {
        return Err(Error::Data("empty evaluation stream".into()));
    }
    for s in per_step.iter_mut() {
        *s /= per_step_n as f64;
    }
    Ok(MetricReport {
        mse: se / elems as f64,
        mae: ae / elems as f64,
        per_step_mse: per_step,
        wall_clock_s: started.elapsed().as_secs_f64(),
        windows,
    })
}

/// Repeat-last-value forecaster; a sanity floor for the metrics.
pub struct NaiveLastValue {
    pub horizon: usize,
}

impl Forecaster for NaiveLastValue {
    fn horizon(&self) -> usize {
        self.horizon
    }

    fn predict_batch(&self, inputs: &Tensor) -> Result<Tensor> {
        let (n, d, l) = inputs.shape();
        Ok(Tensor::from_fn(n, d, self.horizon, |b, v, _| inputs.at(b, v, l - 1)))
    }
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: Variant,
    /// (horizon, test MSE) pairs in the order trained.
    pub per_horizon: Vec<(usize, f64)>,
    pub avg_mse: f64,
}

/// Train every variant at every horizon with a shared seed and report test
/// MSE per horizon plus the horizon average.
pub fn run_ablation(
    cfg: &ExperimentConfig,
    frame: &SeriesFrame,
    horizons: &[usize],
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for variant in Variant::ALL {
        let mut per_horizon = Vec::new();
        for &h in horizons {
            let mut run_cfg = cfg.clone();
            run_cfg.horizon = h;
            run_cfg.variant = variant;
            let data = prepare(frame, run_cfg.dataset_kind())?;
            let mut model = S2TXModel::new(&run_cfg)?;
            train(&mut model, &data)?;
            let stream = make_windows(
                &data.frame,
                &data.split,
                Split::Test,
                &run_cfg.window_spec(),
                run_cfg.eval_stride,
                run_cfg.batch_size,
            )?;
            let report = evaluate(&model, stream)?;
            per_horizon.push((h, report.mse));
        }
        let avg = per_horizon.iter().map(|(_, m)| m).sum::<f64>() / per_horizon.len() as f64;
        rows.push(AblationRow { variant, per_horizon, avg_mse: avg });
    }
    Ok(rows)
}

#[derive(Clone, Debug)]
pub struct RobustnessRow {
    pub miss_ratio: f64,
    pub mse: f64,
    /// Percent increase in MSE relative to the clean run (0 at ratio 0).
    pub degradation_pct: f64,
}

/// Evaluate one trained model with bursts of missing values imputed into the
/// test inputs at each ratio. Targets stay clean; corruption is an
/// inference-time stress only.
pub fn run_robustness(
    model: &S2TXModel,
    data: &PreparedData,
    ratios: &[f64],
    burst_len: usize,
    seed: u64,
) -> Result<Vec<RobustnessRow>> {
    let cfg = &model.cfg;
    let ws = cfg.window_spec();
    let mut rows: Vec<RobustnessRow> = Vec::new();
    let mut clean_mse = None;
    for &ratio in ratios {
        let stream =
            make_windows(&data.frame, &data.split, Split::Test, &ws, cfg.eval_stride, cfg.batch_size)?;
        let mut se = 0.0;
        let mut elems = 0usize;
        for (bi, batch) in stream.enumerate() {
            let inputs = corrupt_missing(&batch.inputs, ratio, burst_len, seed ^ (bi as u64) << 8)?;
            let pred = model.predict_batch(&inputs)?;
            let (n, d, h) = pred.shape();
            for b in 0..n {
                for v in 0..d {
                    for j in 0..h {
                        let e = pred.at(b, v, j) - batch.targets.at(b, v, j);
                        se += e * e;
                    }
                }
            }
            elems += n * d * h;
        }
        let mse = se / elems as f64;
        if clean_mse.is_none() {
            if ratio != 0.0 {
                return Err(Error::Config("robustness ratios must start at 0".into()));
            }
            clean_mse = Some(mse);
        }
        let base = clean_mse.unwrap();
        rows.push(RobustnessRow { miss_ratio: ratio, mse, degradation_pct: (mse / base - 1.0) * 100.0 });
    }
    Ok(rows)
}

/// One line of the machine-readable metrics log.
#[derive(Clone, Debug)]
pub struct RunRecord {
    pub run_id: String,
    pub dataset: String,
    pub horizon: usize,
    pub variant: String,
    pub mse: f64,
    pub mae: f64,
    pub wall_clock_s: f64,
}

impl RunRecord {
    pub fn to_json(&self) -> String {
        format!(
            "{{\"run_id\":\"{}\",\"dataset\":\"{}\",\"horizon\":{},\"variant\":\"{}\",\"mse\":{},\"mae\":{},\"wall_clock_s\":{}}}",
            escape(&self.run_id),
            escape(&self.dataset),
            self.horizon,
            escape(&self.variant),
            self.mse,
            self.mae,
            self.wall_clock_s
        )
    }
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

pub fn append_jsonl(path: &Path, record: &RunRecord) -> Result<()> {
    use std::io::Write;
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{}", record.to_json())?;
    Ok(())
}
