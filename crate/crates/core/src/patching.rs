//! Window extraction and two-scale patchification.
//!
//! A look-back window of length `L` is patched twice: coarse patches over the
//! full window feed the global model, fine patches over the most recent `S`
//! steps feed the local model. Patch `i` covers `[i*stride, i*stride + len)`;
//! if the last patch would run past the window it is completed by replicating
//! the final value.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Look-back / local-window / horizon lengths, in time steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowSpec {
    pub lookback: usize,
    pub local_window: usize,
    pub horizon: usize,
}

impl WindowSpec {
    pub fn validate(&self) -> Result<()> {
        if self.lookback == 0 || self.local_window == 0 || self.horizon == 0 {
            return Err(Error::InvalidSpec("window lengths must be positive".into()));
        }
        if self.local_window > self.lookback {
            return Err(Error::InvalidSpec(format!(
                "local window {} exceeds look-back {}",
                self.local_window, self.lookback
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScaleTag {
    Global,
    Local,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchSpec {
    pub patch_len: usize,
    pub stride: usize,
    pub scale: ScaleTag,
}

impl PatchSpec {
    pub fn global(patch_len: usize, stride: usize) -> Self {
        PatchSpec { patch_len, stride, scale: ScaleTag::Global }
    }

    pub fn local(patch_len: usize, stride: usize) -> Self {
        PatchSpec { patch_len, stride, scale: ScaleTag::Local }
    }
}

/// Patched view of one window: values are (variates, patch_count, patch_len).
#[derive(Clone, Debug)]
pub struct PatchTensor {
    pub values: Tensor,
    pub scale: ScaleTag,
    /// Half-open time-step span of the source window within the look-back.
    pub source_span: (usize, usize),
}

impl PatchTensor {
    pub fn variates(&self) -> usize {
        self.values.batch()
    }

    pub fn patch_count(&self) -> usize {
        self.values.rows()
    }

    pub fn patch_len(&self) -> usize {
        self.values.cols()
    }
}

/// Number of patches for a window: ceil((window_len - patch_len) / stride),
/// with a window exactly one patch long yielding one patch.
pub fn patch_count(window_len: usize, spec: &PatchSpec) -> Result<usize> {
    if spec.patch_len == 0 || spec.stride == 0 {
        return Err(Error::InvalidSpec("patch length and stride must be positive".into()));
    }
    if window_len < spec.patch_len {
        return Err(Error::InvalidSpec(format!(
            "window of {} steps is shorter than patch length {}",
            window_len, spec.patch_len
        )));
    }
    let n = (window_len - spec.patch_len).div_ceil(spec.stride);
    Ok(n.max(1))
}

/// Slice a (1, variates, window_len) window into overlapping patches.
pub fn patchify(window: &Tensor, spec: &PatchSpec) -> Result<PatchTensor> {
    let (b, d, len) = window.shape();
    assert_eq!(b, 1, "patchify expects a single window of shape (1, D, len)");
    if !window.all_finite() {
        return Err(Error::Data("window contains non-finite values".into()));
    }
    let pn = patch_count(len, spec)?;
    let pl = spec.patch_len;
    let mut values = Tensor::zeros(d, pn, pl);
    let src = window.item(0);
    for v in 0..d {
        let series = &src[v * len..(v + 1) * len];
        let dst = values.item_mut(v);
        for p in 0..pn {
            let start = p * spec.stride;
            for j in 0..pl {
                // replicate the last value past the window edge
                let t = (start + j).min(len - 1);
                dst[p * pl + j] = series[t];
            }
        }
    }
    Ok(PatchTensor { values, scale: spec.scale, source_span: (0, len) })
}

/// Global and local patch specs derived from one experiment configuration.
#[derive(Clone, Copy, Debug)]
pub struct PatchPlan {
    pub window: WindowSpec,
    pub global: PatchSpec,
    pub local: PatchSpec,
}

impl PatchPlan {
    pub fn validate(&self) -> Result<()> {
        self.window.validate()?;
        patch_count(self.window.lookback, &self.global)?;
        patch_count(self.window.local_window, &self.local)?;
        Ok(())
    }

    pub fn global_patches(&self) -> usize {
        patch_count(self.window.lookback, &self.global).expect("validated plan")
    }

    pub fn local_patches(&self) -> usize {
        patch_count(self.window.local_window, &self.local).expect("validated plan")
    }
}

/// Patch a (1, D, L) window at both scales: global patches over the full
/// window, local patches over its most recent `local_window` steps.
pub fn make_multiscale(window: &Tensor, plan: &PatchPlan) -> Result<(PatchTensor, PatchTensor)> {
    let (_, _, len) = window.shape();
    if len != plan.window.lookback {
        return Err(Error::InvalidSpec(format!(
            "window has {} steps, expected look-back {}",
            len, plan.window.lookback
        )));
    }
    let global = patchify(window, &plan.global)?;
    let s = plan.window.local_window;
    let local_window = suffix_window(window, s);
    let mut local = patchify(&local_window, &plan.local)?;
    local.source_span = (len - s, len);
    Ok((global, local))
}

/// Last `s` steps of a (1, D, len) window.
pub fn suffix_window(window: &Tensor, s: usize) -> Tensor {
    let (_, d, len) = window.shape();
    assert!(s <= len, "suffix longer than window");
    let src = window.item(0);
    Tensor::from_fn(1, d, s, |_, v, j| src[v * len + (len - s + j)])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(pl: usize, st: usize) -> PatchSpec {
        PatchSpec::global(pl, st)
    }

    #[test]
    fn patch_count_reference_values() {
        assert_eq!(patch_count(336, &spec(48, 16)).unwrap(), 18);
        assert_eq!(patch_count(168, &spec(16, 8)).unwrap(), 19);
        assert_eq!(patch_count(48, &spec(48, 16)).unwrap(), 1);
        assert_eq!(patch_count(192, &spec(16, 8)).unwrap(), 22);
        assert_eq!(patch_count(96, &spec(4, 2)).unwrap(), 46);
        assert!(patch_count(47, &spec(48, 16)).is_err());
    }

    #[test]
    fn patchify_enumerated_indices() {
        // window holding 1..=64; patch i covers steps [8i, 8i+16)
        let w = Tensor::from_fn(1, 1, 64, |_, _, j| (j + 1) as f64);
        let p = patchify(&w, &spec(16, 8)).unwrap();
        assert_eq!(p.values.shape(), (1, 6, 16));
        let want0: Vec<f64> = (1..=16).map(|v| v as f64).collect();
        let want1: Vec<f64> = (9..=24).map(|v| v as f64).collect();
        assert_eq!(&p.values.item(0)[0..16], &want0[..]);
        assert_eq!(&p.values.item(0)[16..32], &want1[..]);
    }

    #[test]
    fn patchify_single_patch_equals_window() {
        let w = Tensor::from_fn(1, 2, 48, |_, v, j| (v * 100 + j) as f64);
        let p = patchify(&w, &spec(48, 16)).unwrap();
        assert_eq!(p.values.shape(), (2, 1, 48));
        assert_eq!(p.values.item(0), &w.item(0)[0..48]);
        assert_eq!(p.values.item(1), &w.item(0)[48..96]);
    }

    #[test]
    fn patchify_default_window_shape() {
        let w = Tensor::from_fn(1, 3, 336, |_, v, j| (v + j) as f64);
        let p = patchify(&w, &spec(48, 16)).unwrap();
        assert_eq!(p.values.shape(), (3, 18, 48));
    }

    #[test]
    fn patchify_rejects_non_finite() {
        let mut w = Tensor::zeros(1, 1, 32);
        w.data_mut()[5] = f64::NAN;
        assert!(matches!(patchify(&w, &spec(8, 4)), Err(Error::Data(_))));
    }

    fn default_plan() -> PatchPlan {
        PatchPlan {
            window: WindowSpec { lookback: 336, local_window: 168, horizon: 96 },
            global: PatchSpec::global(48, 16),
            local: PatchSpec::local(16, 8),
        }
    }

    #[test]
    fn multiscale_default_shapes() {
        let w = Tensor::from_fn(1, 7, 336, |_, v, j| (v as f64) + (j as f64) * 0.01);
        let (g, l) = make_multiscale(&w, &default_plan()).unwrap();
        assert_eq!(g.values.shape(), (7, 18, 48));
        assert_eq!(l.values.shape(), (7, 19, 16));
        assert_eq!(g.scale, ScaleTag::Global);
        assert_eq!(l.scale, ScaleTag::Local);
        assert_eq!(l.source_span, (168, 336));
        // local patches come from the window suffix
        assert_eq!(l.values.at(0, 0, 0), w.at(0, 0, 168));
    }

    #[test]
    fn multiscale_exchange_shapes() {
        let plan = PatchPlan {
            window: WindowSpec { lookback: 192, local_window: 96, horizon: 96 },
            global: PatchSpec::global(16, 8),
            local: PatchSpec::local(4, 2),
        };
        let w = Tensor::from_fn(1, 8, 192, |_, v, j| (v + j) as f64);
        let (g, l) = make_multiscale(&w, &plan).unwrap();
        assert_eq!(g.values.shape(), (8, 22, 16));
        assert_eq!(l.values.shape(), (8, 46, 4));
    }

    #[test]
    fn multiscale_zero_variates() {
        let w = Tensor::zeros(1, 0, 336);
        let (g, l) = make_multiscale(&w, &default_plan()).unwrap();
        assert_eq!(g.values.shape(), (0, 18, 48));
        assert_eq!(l.values.shape(), (0, 19, 16));
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(128))]

            /// Patch i reads time steps [i*stride, i*stride + len). When
            /// stride <= patch length the covered indices are contiguous from
            /// 0 up to the last patch end; patches overlap exactly when
            /// stride < patch length (stride > patch length leaves gaps by
            /// construction).
            #[test]
            fn coverage_and_overlap(
                len in 1usize..200,
                pl in 1usize..40,
                st in 1usize..40,
            ) {
                prop_assume!(pl <= len);
                let sp = spec(pl, st);
                let pn = patch_count(len, &sp).unwrap();
                let mut hits = vec![0usize; len];
                for p in 0..pn {
                    for j in 0..pl {
                        let t = (p * st + j).min(len - 1);
                        hits[t] += 1;
                    }
                }
                let last_end = ((pn - 1) * st + pl).min(len);
                if st <= pl {
                    for (t, &h) in hits.iter().enumerate().take(last_end) {
                        prop_assert!(h >= 1, "gap at step {t}");
                    }
                }
                prop_assert!(hits[..last_end].iter().any(|&h| h >= 1));
                if pn >= 2 {
                    let overlapping = hits.iter().any(|&h| h > 1);
                    prop_assert_eq!(overlapping, st < pl);
                }
            }

            #[test]
            fn patch_count_monotone(len in 2usize..300, pl in 1usize..50, st in 1usize..50) {
                prop_assume!(pl < len);
                let n = patch_count(len, &spec(pl, st)).unwrap();
                let n_wider = patch_count(len, &spec(pl + 1, st)).unwrap();
                let n_longer_stride = patch_count(len, &spec(pl, st + 1)).unwrap();
                prop_assert!(n_wider <= n);
                prop_assert!(n_longer_stride <= n);
            }

            /// Permuting input variates permutes output variates identically.
            #[test]
            fn variate_permutation_equivariance(seed in 0u64..1000) {
                use rand::SeedableRng;
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                let mut w = Tensor::zeros(1, 3, 40);
                w.randn_fill(&mut rng, 1.0);
                let perm = [2usize, 0, 1];
                let wp = Tensor::from_fn(1, 3, 40, |_, v, j| w.at(0, perm[v], j));
                let sp = spec(8, 4);
                let p = patchify(&w, &sp).unwrap();
                let pp = patchify(&wp, &sp).unwrap();
                for v in 0..3 {
                    prop_assert_eq!(pp.values.item(v), p.values.item(perm[v]));
                }
            }
        }
    }
}
