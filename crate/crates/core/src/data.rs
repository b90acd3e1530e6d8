//! Dataset ingestion, chronological splits, sliding-window sampling,
//! missing-value corruption, and synthetic series generation.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::patching::WindowSpec;
use crate::tensor::{randn, Tensor};

/// A D-variate series: `values` is row-major (time, variate).
#[derive(Clone, Debug)]
pub struct SeriesFrame {
    pub timestamps: Vec<String>,
    pub names: Vec<String>,
    values: Vec<f64>,
    /// Generation parameters for synthetic frames; empty for loaded data.
    pub meta: Vec<(String, String)>,
}

impl SeriesFrame {
    pub fn new(timestamps: Vec<String>, names: Vec<String>, values: Vec<f64>) -> Result<Self> {
        if values.len() != timestamps.len() * names.len() {
            return Err(Error::Data("value count does not match rows x columns".into()));
        }
        for w in timestamps.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::Data(format!(
                    "timestamps not strictly increasing at '{}' -> '{}'",
                    w[0], w[1]
                )));
            }
        }
        Ok(SeriesFrame { timestamps, names, values, meta: Vec::new() })
    }

    pub fn rows(&self) -> usize {
        self.timestamps.len()
    }

    pub fn variates(&self) -> usize {
        self.names.len()
    }

    #[inline]
    pub fn value(&self, t: usize, d: usize) -> f64 {
        self.values[t * self.names.len() + d]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Extract `[start, start+len)` as a (1, D, len) window.
    pub fn window(&self, start: usize, len: usize) -> Tensor {
        let d = self.variates();
        assert!(start + len <= self.rows(), "window escapes the frame");
        Tensor::from_fn(1, d, len, |_, v, j| self.value(start + j, v))
    }

    /// Write in the same schema `load_csv` reads: header with a date column
    /// followed by numeric variate columns.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "date,{}", self.names.join(","))?;
        for t in 0..self.rows() {
            write!(f, "{}", self.timestamps[t])?;
            for d in 0..self.variates() {
                write!(f, ",{}", self.value(t, d))?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Input schema for CSV ingestion.
#[derive(Clone, Debug)]
pub struct CsvSchema {
    pub date_column: String,
    /// None selects every non-date column, in file order.
    pub value_columns: Option<Vec<String>>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema { date_column: "date".into(), value_columns: None }
    }
}

/// Benchmark datasets with known shape expectations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Etth1,
    Etth2,
    Ettm1,
    Ettm2,
    Exchange,
    Weather,
    Ecl,
    Custom,
}

impl DatasetKind {
    pub fn from_name(name: &str) -> DatasetKind {
        match name.to_ascii_lowercase().as_str() {
            "etth1" => DatasetKind::Etth1,
            "etth2" => DatasetKind::Etth2,
            "ettm1" => DatasetKind::Ettm1,
            "ettm2" => DatasetKind::Ettm2,
            "exchange" | "exchange_rate" => DatasetKind::Exchange,
            "weather" => DatasetKind::Weather,
            "ecl" | "electricity" => DatasetKind::Ecl,
            _ => DatasetKind::Custom,
        }
    }

    /// Expected (variates, rows) for known benchmark files.
    pub fn expected_shape(&self) -> Option<(usize, usize)> {
        match self {
            DatasetKind::Etth1 | DatasetKind::Etth2 => Some((7, 17420)),
            DatasetKind::Ettm1 | DatasetKind::Ettm2 => Some((7, 69680)),
            DatasetKind::Exchange => Some((8, 7588)),
            DatasetKind::Weather => Some((21, 52696)),
            DatasetKind::Ecl => Some((321, 26304)),
            DatasetKind::Custom => None,
        }
    }

    pub fn file_name(&self) -> Option<&'static str> {
        match self {
            DatasetKind::Etth1 => Some("ETTh1.csv"),
            DatasetKind::Etth2 => Some("ETTh2.csv"),
            DatasetKind::Ettm1 => Some("ETTm1.csv"),
            DatasetKind::Ettm2 => Some("ETTm2.csv"),
            DatasetKind::Exchange => Some("exchange_rate.csv"),
            DatasetKind::Weather => Some("weather.csv"),
            DatasetKind::Ecl => Some("electricity.csv"),
            DatasetKind::Custom => None,
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DatasetKind::Etth1 => "etth1",
            DatasetKind::Etth2 => "etth2",
            DatasetKind::Ettm1 => "ettm1",
            DatasetKind::Ettm2 => "ettm2",
            DatasetKind::Exchange => "exchange",
            DatasetKind::Weather => "weather",
            DatasetKind::Ecl => "ecl",
            DatasetKind::Custom => "custom",
        };
        f.write_str(s)
    }
}

/// Load a comma-separated file with a header row. When `expect` is given the
/// parsed shape must match it exactly.
pub fn load_csv(
    path: &Path,
    schema: &CsvSchema,
    expect: Option<(usize, usize)>,
) -> Result<SeriesFrame> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let mut lines = BufReader::new(file).lines();
    let header = match lines.next() {
        Some(h) => h?,
        None => return Err(Error::Data(format!("{} is empty", path.display()))),
    };
    let cols: Vec<&str> = header.trim_end_matches('\r').split(',').collect();
    let date_idx = cols
        .iter()
        .position(|c| *c == schema.date_column)
        .ok_or_else(|| Error::Data(format!("missing date column '{}'", schema.date_column)))?;

    let value_idx: Vec<(usize, String)> = match &schema.value_columns {
        Some(wanted) => wanted
            .iter()
            .map(|w| {
                cols.iter()
                    .position(|c| c == w)
                    .map(|i| (i, w.clone()))
                    .ok_or_else(|| Error::Data(format!("missing value column '{w}'")))
            })
            .collect::<Result<_>>()?,
        None => cols
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != date_idx)
            .map(|(i, c)| (i, c.to_string()))
            .collect(),
    };
    if value_idx.is_empty() {
        return Err(Error::Data("no value columns".into()));
    }

    let mut timestamps = Vec::new();
    let mut values = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(Error::Data(format!(
                "line {}: expected {} fields, found {}",
                lineno + 2,
                cols.len(),
                fields.len()
            )));
        }
        timestamps.push(fields[date_idx].to_string());
        for (i, name) in &value_idx {
            let v: f64 = fields[*i].parse().map_err(|_| {
                Error::Data(format!("line {}: cannot parse '{}' in column '{}'", lineno + 2, fields[*i], name))
            })?;
            values.push(v);
        }
    }
    if timestamps.is_empty() {
        return Err(Error::Data(format!("{} has a header but no rows", path.display())));
    }

    let names: Vec<String> = value_idx.into_iter().map(|(_, n)| n).collect();
    let frame = SeriesFrame::new(timestamps, names, values)?;
    if let Some((d, t)) = expect {
        if frame.variates() != d || frame.rows() != t {
            return Err(Error::Data(format!(
                "{}: expected {} variates x {} rows, found {} x {}",
                path.display(),
                d,
                t,
                frame.variates(),
                frame.rows()
            )));
        }
    }
    Ok(frame)
}

/// Per-variate z-score statistics computed on the training segment.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Contiguous chronological train/val/test boundaries plus train-only
/// normalization statistics.
#[derive(Clone, Debug)]
pub struct SplitSpec {
    pub train_end: usize,
    pub val_end: usize,
    pub test_end: usize,
    pub stats: NormStats,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl SplitSpec {
    pub fn from_boundaries(frame: &SeriesFrame, train_end: usize, val_end: usize, test_end: usize) -> Result<Self> {
        if !(0 < train_end && train_end < val_end && val_end < test_end && test_end <= frame.rows()) {
            return Err(Error::Config(format!(
                "bad split boundaries {train_end}/{val_end}/{test_end} for {} rows",
                frame.rows()
            )));
        }
        let d = frame.variates();
        let mut mean = vec![0.0; d];
        let mut std = vec![0.0; d];
        for v in 0..d {
            let mut s = 0.0;
            for t in 0..train_end {
                s += frame.value(t, v);
            }
            let m = s / train_end as f64;
            let mut ss = 0.0;
            for t in 0..train_end {
                let e = frame.value(t, v) - m;
                ss += e * e;
            }
            mean[v] = m;
            std[v] = (ss / train_end as f64).sqrt().max(1e-12);
        }
        Ok(SplitSpec { train_end, val_end, test_end, stats: NormStats { mean, std } })
    }

    /// Community protocol for the hourly ETT files: 12/4/4 months.
    pub fn ett_hourly(frame: &SeriesFrame) -> Result<Self> {
        Self::from_boundaries(frame, 8640, 11520, 14400)
    }

    /// 12/4/4 months of 15-minute steps for the minutely ETT files.
    pub fn ett_minute(frame: &SeriesFrame) -> Result<Self> {
        Self::from_boundaries(frame, 34560, 46080, 57600)
    }

    /// 0.7 / 0.1 / 0.2 fractions of the full length.
    pub fn fractional(frame: &SeriesFrame) -> Result<Self> {
        let t = frame.rows();
        Self::from_boundaries(frame, t * 7 / 10, t * 8 / 10, t)
    }

    pub fn for_dataset(kind: DatasetKind, frame: &SeriesFrame) -> Result<Self> {
        match kind {
            DatasetKind::Etth1 | DatasetKind::Etth2 => Self::ett_hourly(frame),
            DatasetKind::Ettm1 | DatasetKind::Ettm2 => Self::ett_minute(frame),
            _ => Self::fractional(frame),
        }
    }

    pub fn segment(&self, split: Split) -> (usize, usize) {
        match split {
            Split::Train => (0, self.train_end),
            Split::Val => (self.train_end, self.val_end - self.train_end),
            Split::Test => (self.val_end, self.test_end - self.val_end),
        }
    }

    /// Z-score every value with the train-segment statistics.
    pub fn normalize(&self, frame: &SeriesFrame) -> SeriesFrame {
        let mut out = frame.clone();
        let d = frame.variates();
        for (i, v) in out.values_mut().iter_mut().enumerate() {
            let col = i % d;
            *v = (*v - self.stats.mean[col]) / self.stats.std[col];
        }
        out
    }

    /// Invert `normalize` on a normalized frame.
    pub fn denormalize(&self, frame: &SeriesFrame) -> SeriesFrame {
        let mut out = frame.clone();
        let d = frame.variates();
        for (i, v) in out.values_mut().iter_mut().enumerate() {
            let col = i % d;
            *v = *v * self.stats.std[col] + self.stats.mean[col];
        }
        out
    }
}

/// Paired look-back inputs and horizon targets.
#[derive(Clone, Debug)]
pub struct ForecastBatch {
    /// (batch, D, L)
    pub inputs: Tensor,
    /// (batch, D, H)
    pub targets: Tensor,
    pub stats: NormStats,
}

/// Windows per segment: (segment_len - L - H) / stride + 1.
pub fn window_count(segment_len: usize, ws: &WindowSpec, stride: usize) -> Result<usize> {
    let need = ws.lookback + ws.horizon;
    if segment_len < need {
        return Err(Error::Config(format!(
            "segment of {segment_len} steps cannot fit look-back {} + horizon {}",
            ws.lookback, ws.horizon
        )));
    }
    Ok((segment_len - need) / stride + 1)
}

/// Absolute window-start offsets for a split segment.
pub fn window_offsets(
    split: &SplitSpec,
    seg: Split,
    ws: &WindowSpec,
    stride: usize,
) -> Result<Vec<usize>> {
    assert!(stride >= 1, "stride must be at least 1");
    let (start, len) = split.segment(seg);
    let n = window_count(len, ws, stride)?;
    Ok((0..n).map(|i| start + i * stride).collect())
}

/// Gather the windows starting at `offsets` into one batch. Targets are the
/// `horizon` steps immediately following each input window.
pub fn gather_batch(
    frame: &SeriesFrame,
    stats: &NormStats,
    offsets: &[usize],
    ws: &WindowSpec,
) -> ForecastBatch {
    let d = frame.variates();
    let n = offsets.len();
    let inputs = Tensor::from_fn(n, d, ws.lookback, |b, v, j| frame.value(offsets[b] + j, v));
    let targets =
        Tensor::from_fn(n, d, ws.horizon, |b, v, j| frame.value(offsets[b] + ws.lookback + j, v));
    ForecastBatch { inputs, targets, stats: stats.clone() }
}

/// Stream of forecast batches over one split segment.
pub struct WindowStream<'a> {
    frame: &'a SeriesFrame,
    stats: NormStats,
    offsets: Vec<usize>,
    ws: WindowSpec,
    batch: usize,
    cursor: usize,
}

impl<'a> WindowStream<'a> {
    pub fn len_windows(&self) -> usize {
        self.offsets.len()
    }
}

impl<'a> Iterator for WindowStream<'a> {
    type Item = ForecastBatch;

    fn next(&mut self) -> Option<ForecastBatch> {
        if self.cursor >= self.offsets.len() {
            return None;
        }
        let end = (self.cursor + self.batch).min(self.offsets.len());
        let chunk = &self.offsets[self.cursor..end];
        self.cursor = end;
        Some(gather_batch(self.frame, &self.stats, chunk, &self.ws))
    }
}

/// Sliding windows over a (normalized) frame segment, batched.
pub fn make_windows<'a>(
    frame: &'a SeriesFrame,
    split: &SplitSpec,
    seg: Split,
    ws: &WindowSpec,
    stride: usize,
    batch: usize,
) -> Result<WindowStream<'a>> {
    assert!(batch >= 1);
    let offsets = window_offsets(split, seg, ws, stride)?;
    Ok(WindowStream {
        frame,
        stats: split.stats.clone(),
        offsets,
        ws: *ws,
        batch,
        cursor: 0,
    })
}

/// Replace random non-overlapping bursts of `burst_len` steps, per variate,
/// with the last observed value before each burst. Burst starts are drawn
/// from step 1 onward so a preceding observation always exists. Deterministic
/// per seed.
pub fn corrupt_missing(
    segment: &Tensor,
    miss_ratio: f64,
    burst_len: usize,
    seed: u64,
) -> Result<Tensor> {
    if !(0.0..1.0).contains(&miss_ratio) {
        return Err(Error::Config(format!("miss_ratio {miss_ratio} outside [0, 1)")));
    }
    assert!(burst_len >= 1);
    let (n, d, t_len) = segment.shape();
    let mut out = segment.clone();
    if miss_ratio == 0.0 {
        return Ok(out);
    }
    if t_len <= burst_len {
        return Err(Error::Config("segment shorter than one burst".into()));
    }
    let target = (miss_ratio * t_len as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = vec![false; t_len];

    for b in 0..n {
        for v in 0..d {
            mask.iter_mut().for_each(|m| *m = false);
            let mut covered = 0usize;
            let mut attempts = 0usize;
            while covered < target {
                attempts += 1;
                if attempts > 1000 * t_len {
                    return Err(Error::Data(format!(
                        "could not place bursts for miss_ratio {miss_ratio}"
                    )));
                }
                let start = rng.random_range(1..=t_len - burst_len);
                if mask[start..start + burst_len].iter().any(|&m| m) {
                    continue;
                }
                mask[start..start + burst_len].iter_mut().for_each(|m| *m = true);
                covered += burst_len;
            }
            let row = out.item_mut(b);
            let base = v * t_len;
            let mut last = row[base];
            for j in 0..t_len {
                if mask[j] {
                    row[base + j] = last;
                } else {
                    last = row[base + j];
                }
            }
        }
    }
    Ok(out)
}

/// Generation knobs for the synthetic fixture.
#[derive(Clone, Copy, Debug)]
pub struct Coupling {
    /// Scale applied when deriving variate d from variate d-1 (negative
    /// values give anti-correlated neighbors). Zero decouples variates.
    pub cross_strength: f64,
    /// How strongly the slow regime drives both the local oscillation
    /// amplitude and the noise level. Zero reduces every variate to plain
    /// white noise.
    pub regime_gain: f64,
}

const SYNTH_REGIME_PERIOD: f64 = 480.0;
const SYNTH_LOCAL_PERIOD: f64 = 24.0;
const SYNTH_BASE_NOISE: f64 = 0.3;
const SYNTH_CHAIN_NOISE: f64 = 0.25;
/// Variates beyond the first pair read their parent one local period late,
/// so their near future is observable only through the other variates.
const SYNTH_CHAIN_LAG: usize = 96;

/// Synthetic multivariate series with a shared slow regime, regime-modulated
/// local oscillation and noise level, and chained cross-variate coupling.
/// Variate 0 carries the signal; each later variate is a scaled copy of its
/// predecessor plus noise, lagged from variate 2 onward.
pub fn synth_global_local(d: usize, t_total: usize, seed: u64, coupling: Coupling) -> SeriesFrame {
    assert!(d >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = coupling.regime_gain;
    let rho = coupling.cross_strength;
    let tau = std::f64::consts::TAU;

    let mut values = vec![0.0; t_total * d];
    let mut prev = vec![0.0; t_total];
    for v in 0..d {
        let lag = if v >= 2 { SYNTH_CHAIN_LAG } else { 0 };
        for t in 0..t_total {
            let tf = t as f64;
            let regime = (tau * tf / SYNTH_REGIME_PERIOD).sin();
            let hi = 0.5 * (1.0 + regime);
            let x = if v == 0 {
                let signal = regime + hi * (tau * tf / SYNTH_LOCAL_PERIOD).sin();
                g * signal + SYNTH_BASE_NOISE * (1.0 + g * hi) * randn(&mut rng)
            } else {
                rho * prev[t.saturating_sub(lag)] + SYNTH_CHAIN_NOISE * (1.0 + g * hi) * randn(&mut rng)
            };
            values[t * d + v] = x;
        }
        for t in 0..t_total {
            prev[t] = values[t * d + v];
        }
    }

    let timestamps = (0..t_total).map(|t| format!("t{t:08}")).collect();
    let names = (0..d).map(|v| format!("v{v}")).collect();
    let mut frame = SeriesFrame::new(timestamps, names, values).expect("generated frame is valid");
    frame.meta = vec![
        ("generator".into(), "synth_global_local".into()),
        ("seed".into(), seed.to_string()),
        ("cross_strength".into(), rho.to_string()),
        ("regime_gain".into(), g.to_string()),
        ("regime_period".into(), SYNTH_REGIME_PERIOD.to_string()),
        ("local_period".into(), SYNTH_LOCAL_PERIOD.to_string()),
        ("base_noise".into(), SYNTH_BASE_NOISE.to_string()),
        ("chain_noise".into(), SYNTH_CHAIN_NOISE.to_string()),
        ("chain_lag".into(), SYNTH_CHAIN_LAG.to_string()),
    ];
    frame
}
