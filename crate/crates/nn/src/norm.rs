//! Per-channel normalization of `[B, C, T, F]` arrays.
//!
//! Statistics are taken per `(batch item, channel)`. With
//! [`NormScope::Utterance`] they span the whole `(T, F)` plane; with
//! [`NormScope::Cumulative`] frame `t` is normalized with the statistics of
//! frames `0..=t` only, which keeps the operation causal in time.

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum NormScope {
    Utterance,
    #[default]
    Cumulative,
}

/// Mean and inverse standard deviation per `(b, c, t)`.
pub struct NormStats {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

pub struct NormGrads<T> {
    pub x: Tensor<T>,
    pub gain: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn forward<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    scope: NormScope,
) -> Result<(Tensor<T>, NormStats)> {
    let [b, c, t, f] = x.dims4()?;
    let mut mean = vec![0.0; b * c * t];
    let mut inv_std = vec![0.0; b * c * t];
    let xd = x.data();
    for bc in 0..b * c {
        let plane = &xd[bc * t * f..(bc + 1) * t * f];
        if scope == NormScope::Cumulative {
            // Welford updates; the raw-moment form loses all precision when
            // the mean is large against the spread.
            let (mut n, mut mu, mut m2) = (0.0f64, 0.0f64, 0.0f64);
            for ti in 0..t {
                for v in &plane[ti * f..(ti + 1) * f] {
                    let v = v.as_f64();
                    n += 1.0;
                    let d = v - mu;
                    mu += d / n;
                    m2 += d * (v - mu);
                }
                mean[bc * t + ti] = mu;
                inv_std[bc * t + ti] = 1.0 / (m2.max(0.0) / n + NORM_EPS).sqrt();
            }
        } else {
            let n = (t * f) as f64;
            let mu = plane.iter().map(|v| v.as_f64()).sum::<f64>() / n;
            // two-pass variance for the utterance case
            let var = plane
                .iter()
                .map(|v| (v.as_f64() - mu).powi(2))
                .sum::<f64>()
                / n;
            let r = 1.0 / (var + NORM_EPS).sqrt();
            mean[bc * t..(bc + 1) * t].fill(mu);
            inv_std[bc * t..(bc + 1) * t].fill(r);
        }
    }
    let mut y = Tensor::zeros(x.shape());
    let (g, bb) = (gain.data(), bias.data());
    for bc in 0..b * c {
        let (gv, bv) = (g[bc % c].as_f64(), bb[bc % c].as_f64());
        for ti in 0..t {
            let (mu, r) = (mean[bc * t + ti], inv_std[bc * t + ti]);
            let s = (bc * t + ti) * f;
            for k in s..s + f {
                y.data_mut()[k] = T::of_f64((xd[k].as_f64() - mu) * r * gv + bv);
            }
        }
    }
    Ok((y, NormStats { mean, inv_std }))
}

pub fn backward<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    gy: &Tensor<T>,
    scope: NormScope,
    stats: &NormStats,
) -> Result<NormGrads<T>> {
    let [b, c, t, f] = x.dims4()?;
    let xd = x.data();
    let gyd = gy.data();
    let mut gx = vec![0.0f64; xd.len()];
    let mut ggain = vec![0.0f64; c];
    let mut gbias = vec![0.0f64; c];
    for bc in 0..b * c {
        let ch = bc % c;
        let gv = gain.data()[ch].as_f64();
        let base = bc * t * f;
        for ti in 0..t {
            let (mu, r) = (stats.mean[bc * t + ti], stats.inv_std[bc * t + ti]);
            for k in base + ti * f..base + (ti + 1) * f {
                let g = gyd[k].as_f64();
                ggain[ch] += g * (xd[k].as_f64() - mu) * r;
                gbias[ch] += g;
            }
        }
        match scope {
            NormScope::Utterance => {
                let n = (t * f) as f64;
                let (mu, r) = (stats.mean[bc * t], stats.inv_std[bc * t]);
                let (mut sg, mut sgx) = (0.0, 0.0);
                for k in base..base + t * f {
                    let gh = gyd[k].as_f64() * gv;
                    sg += gh;
                    sgx += gh * (xd[k].as_f64() - mu) * r;
                }
                let (mg, mgx) = (sg / n, sgx / n);
                for k in base..base + t * f {
                    let gh = gyd[k].as_f64() * gv;
                    let xh = (xd[k].as_f64() - mu) * r;
                    gx[k] = r * (gh - mg - xh * mgx);
                }
            }
            NormScope::Cumulative => {
                // y_t depends on x_{<=t} through the prefix sums S1_t, S2_t.
                let mut d_s1 = vec![0.0; t];
                let mut d_s2 = vec![0.0; t];
                for ti in 0..t {
                    let (mu, r) = (stats.mean[bc * t + ti], stats.inv_std[bc * t + ti]);
                    let n = ((ti + 1) * f) as f64;
                    let (mut sg, mut sgc) = (0.0, 0.0);
                    for k in base + ti * f..base + (ti + 1) * f {
                        let gh = gyd[k].as_f64() * gv;
                        sg += gh;
                        sgc += gh * (xd[k].as_f64() - mu);
                        gx[k] = gh * r;
                    }
                    let d_mu = -r * sg;
                    let d_var = -0.5 * sgc * r * r * r;
                    d_s1[ti] = d_mu / n - 2.0 * mu * d_var / n;
                    d_s2[ti] = d_var / n;
                }
                let (mut acc1, mut acc2) = (0.0, 0.0);
                for ti in (0..t).rev() {
                    acc1 += d_s1[ti];
                    acc2 += d_s2[ti];
                    for k in base + ti * f..base + (ti + 1) * f {
                        gx[k] += acc1 + 2.0 * xd[k].as_f64() * acc2;
                    }
                }
            }
        }
    }
    Ok(NormGrads {
        x: Tensor::from_vec(x.shape(), gx.into_iter().map(T::of_f64).collect())?,
        gain: Tensor::from_fn(&[c], |k| T::of_f64(ggain[k])),
        bias: Tensor::from_fn(&[c], |k| T::of_f64(gbias[k])),
    })
}
