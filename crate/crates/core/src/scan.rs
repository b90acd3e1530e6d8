//! Selective-scan forward/backward kernels.
//!
//! State update per step, channel c and state s, with diagonal negative A:
//! ```text
//! abar = exp(dt * a)
//! bbar = (exp(dt * a) - 1) / a * b_t
//! h    = abar * h_prev + bbar * x_t
//! y_t  = sum_s c_t[s] * h[s] + d_skip * x_t
//! ```
//!
//! Per step the kernel materializes expm1(dt * a) for all (channel, state)
//! pairs in one vectorizable pass, then runs the recurrence; abar is
//! recovered as 1 + expm1 and bbar via a precomputed 1/a. The backward pass
//! runs the adjoint recurrence in reverse time over the hidden states and
//! discretization factors saved during the forward pass.
//!
//! Callers must supply strictly negative diagonal entries; the graph wrapper
//! clamps the magnitude away from zero so 1/a stays finite.

use crate::error::{Error, Result};
use crate::mathx::{expm1_neg, expm1_neg_clamped};
use crate::tensor::Tensor;

/// Buffers captured by the forward pass for the backward recurrence.
///
/// These are the largest transient allocations in training (tens of MB per
/// layer), beyond the size glibc returns to its heap, so dropping them hands
/// the storage to a thread-local pool instead of unmapping it every batch.
#[derive(Debug, Default)]
pub struct ScanSaved {
    /// Hidden states, (batch, seq, d_inner, d_state) flattened.
    pub h: Vec<f64>,
    /// (exp(dt*a) - 1) / a factors, same layout as `h`.
    pub bfac: Vec<f64>,
}

thread_local! {
    static BUF_POOL: std::cell::RefCell<Vec<Vec<f64>>> = const { std::cell::RefCell::new(Vec::new()) };
}

const BUF_POOL_CAP: usize = 16;

fn pool_take(len: usize) -> Vec<f64> {
    if len == 0 {
        return Vec::new();
    }
    BUF_POOL.with(|p| {
        let mut p = p.borrow_mut();
        if let Some(pos) = p.iter().position(|v| v.capacity() >= len) {
            let mut v = p.swap_remove(pos);
            v.clear();
            return v;
        }
        Vec::with_capacity(len)
    })
}

impl Drop for ScanSaved {
    fn drop(&mut self) {
        BUF_POOL.with(|p| {
            let mut p = p.borrow_mut();
            for buf in [std::mem::take(&mut self.h), std::mem::take(&mut self.bfac)] {
                if buf.capacity() > 0 && p.len() < BUF_POOL_CAP {
                    p.push(buf);
                }
            }
        });
    }
}

/// ZOH factors for one (a, dt) pair: (abar, bfac) with bbar = bfac * b.
/// Handles the a -> 0 limit explicitly.
#[inline]
pub fn zoh_factors(a: f64, dt: f64) -> (f64, f64) {
    if a == 0.0 {
        return (1.0, dt);
    }
    let bf = expm1_neg(dt * a) / a;
    (a.mul_add(bf, 1.0), bf)
}

/// Forward scan.
///
/// * `x`, `dt`: (n, seq, d_inner); `dt` must already be positive.
/// * `b`, `c`: (n, seq, d_state)
/// * `a`: (1, d_inner, d_state) holding the strictly negative diagonal A
/// * `d_skip`: (1, 1, d_inner)
pub fn scan_forward(
    x: &Tensor,
    dt: &Tensor,
    b: &Tensor,
    c: &Tensor,
    a: &Tensor,
    d_skip: &Tensor,
    save: bool,
) -> Result<(Tensor, Option<ScanSaved>)> {
    let (n, seq, d_inner) = x.shape();
    let d_state = a.cols();
    assert_eq!(dt.shape(), (n, seq, d_inner), "dt shape mismatch");
    assert_eq!(b.shape(), (n, seq, d_state), "b shape mismatch");
    assert_eq!(c.shape(), (n, seq, d_state), "c shape mismatch");
    assert_eq!(a.shape(), (1, d_inner, d_state), "a shape mismatch");
    assert_eq!(d_skip.shape(), (1, 1, d_inner), "d_skip shape mismatch");
    debug_assert!(a.data().iter().all(|&v| v < 0.0), "diagonal must be strictly negative");

    let mut y = Tensor::zeros(n, seq, d_inner);
    let saved_len = if save { n * seq * d_inner * d_state } else { 0 };
    let mut h_saved = pool_take(saved_len);
    let mut bfac_saved = pool_take(saved_len);

    let av = a.data();
    let inv_a: Vec<f64> = av.iter().map(|&v| 1.0 / v).collect();
    let dsk = d_skip.data();
    let cells = d_inner * d_state;
    let mut hbuf = vec![0.0; cells];
    let mut za = vec![0.0; cells];
    let mut bfac = vec![0.0; cells];

    for bi in 0..n {
        hbuf.iter_mut().for_each(|v| *v = 0.0);
        let xs = x.item(bi);
        let dts = dt.item(bi);
        let bs = b.item(bi);
        let cs = c.item(bi);
        let ys = y.item_mut(bi);

        for t in 0..seq {
            let xrow = &xs[t * d_inner..(t + 1) * d_inner];
            let dtrow = &dts[t * d_inner..(t + 1) * d_inner];
            let brow = &bs[t * d_state..(t + 1) * d_state];
            let crow = &cs[t * d_state..(t + 1) * d_state];
            let yrow = &mut ys[t * d_inner..(t + 1) * d_inner];

            let mut finite = true;
            for ci in 0..d_inner {
                let dtv = dtrow[ci];
                let xv = xrow[ci];
                let base = ci * d_state;
                let arow = &av[base..base + d_state];
                let invrow = &inv_a[base..base + d_state];
                let erow = &mut za[base..base + d_state];
                let bfrow = &mut bfac[base..base + d_state];
                // expm1(dt*a) and bbar factor, one vector-friendly row pass
                for si in 0..d_state {
                    let e = expm1_neg_clamped(dtv * arow[si]);
                    erow[si] = e;
                    bfrow[si] = e * invrow[si];
                }
                let hrow = &mut hbuf[base..base + d_state];
                let mut acc = 0.0;
                for si in 0..d_state {
                    let h = (1.0 + erow[si]).mul_add(hrow[si], bfrow[si] * brow[si] * xv);
                    hrow[si] = h;
                    acc = crow[si].mul_add(h, acc);
                }
                let out = acc + dsk[ci] * xv;
                finite &= out.is_finite();
                yrow[ci] = out;
            }
            if save {
                h_saved.extend_from_slice(&hbuf);
                bfac_saved.extend_from_slice(&bfac);
            }
            if !finite {
                return Err(Error::Numeric { context: "selective_scan".into(), step: t });
            }
        }
    }

    let saved = save.then_some(ScanSaved { h: h_saved, bfac: bfac_saved });
    Ok((y, saved))
}

/// Gradients for all six scan inputs. `da` is with respect to A itself; the
/// caller converts to the log parameterization.
pub struct ScanGrads {
    pub dx: Tensor,
    pub ddt: Tensor,
    pub db: Tensor,
    pub dc: Tensor,
    pub da: Tensor,
    pub dd: Tensor,
}

#[allow(clippy::too_many_arguments)]
pub fn scan_backward(
    dy: &Tensor,
    x: &Tensor,
    dt: &Tensor,
    b: &Tensor,
    c: &Tensor,
    a: &Tensor,
    d_skip: &Tensor,
    saved: &ScanSaved,
) -> ScanGrads {
    let (n, seq, d_inner) = x.shape();
    let d_state = a.cols();

    let mut dx = Tensor::zeros(n, seq, d_inner);
    let mut ddt = Tensor::zeros(n, seq, d_inner);
    let mut db = Tensor::zeros(n, seq, d_state);
    let mut dc = Tensor::zeros(n, seq, d_state);
    let mut da = Tensor::zeros(1, d_inner, d_state);
    let mut dd = Tensor::zeros(1, 1, d_inner);

    let av = a.data();
    let inv_a: Vec<f64> = av.iter().map(|&v| 1.0 / v).collect();
    let dsk = d_skip.data();
    let da_s = da.data_mut();
    let dd_s = dd.data_mut();

    let mut g = vec![0.0; d_inner * d_state];
    let mut ab_next = vec![0.0; d_inner * d_state];

    for bi in 0..n {
        g.iter_mut().for_each(|v| *v = 0.0);
        ab_next.iter_mut().for_each(|v| *v = 0.0);
        let xs = x.item(bi);
        let dts = dt.item(bi);
        let bs = b.item(bi);
        let cs = c.item(bi);
        let dys = dy.item(bi);
        let item_off = bi * seq * d_inner * d_state;
        let dxs = dx.item_mut(bi);
        let ddts = ddt.item_mut(bi);
        let dbs = db.item_mut(bi);
        let dcs = dc.item_mut(bi);

        for t in (0..seq).rev() {
            let base = t * d_inner;
            let sb = t * d_state;
            for ci in 0..d_inner {
                let dyv = dys[base + ci];
                let xv = xs[base + ci];
                let dtv = dts[base + ci];
                dd_s[ci] += dyv * xv;
                let mut dxv = dyv * dsk[ci];
                let mut ddtv = 0.0;
                let off = item_off + (t * d_inner + ci) * d_state;
                let prev_off = off.wrapping_sub(d_inner * d_state);
                let cbase = ci * d_state;
                for si in 0..d_state {
                    let a_v = av[cbase + si];
                    let bfac = saved.bfac[off + si];
                    let ab = a_v.mul_add(bfac, 1.0);
                    let h_cur = saved.h[off + si];
                    let h_prev = if t > 0 { saved.h[prev_off + si] } else { 0.0 };
                    let bv = bs[sb + si];
                    let cv = cs[sb + si];

                    let gi = dyv.mul_add(cv, ab_next[cbase + si] * g[cbase + si]);
                    g[cbase + si] = gi;
                    ab_next[cbase + si] = ab;

                    dcs[sb + si] += dyv * h_cur;
                    let dab = gi * h_prev;
                    let dbb = gi * xv;
                    dxv += gi * bfac * bv;
                    ddtv += dab * a_v * ab + dbb * ab * bv;
                    let dbf_da = (dtv * ab - bfac) * inv_a[cbase + si];
                    da_s[cbase + si] += dab * dtv * ab + dbb * bv * dbf_da;
                    dbs[sb + si] += dbb * bfac;
                }
                dxs[base + ci] += dxv;
                ddts[base + ci] += ddtv;
            }
        }
    }

    ScanGrads { dx, ddt, db, dc, da, dd }
}
