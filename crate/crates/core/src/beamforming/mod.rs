//! Delay-and-sum beamforming, mask-driven spatial covariance estimation and
//! the rank-1 constrained multichannel Wiener filter.

pub mod linalg;

use std::f64::consts::PI;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dsp::{Mask, Spectrogram};
use crate::error::{ensure, Result};
use crate::geometry::ArrayGeometry;
use crate::localization::{steering_delays, validate_doa};
use linalg::{hermitian_eigen, CMatrix};

/// Phase-aligned channel average toward `doa_deg`, referenced to the first
/// microphone: `Y = (1/I) sum_i X_i exp(+j 2 pi f (tau_i - tau_1))`. A plane
/// wave from `doa_deg` comes out in phase with `X_1`.
pub fn delay_and_sum(spec: &Spectrogram, doa_deg: f64, geometry: &ArrayGeometry) -> Result<Spectrogram> {
    validate_doa(doa_deg)?;
    let channels = spec.channel_count();
    ensure!(
        geometry.mic_count() == channels,
        Dimension,
        "geometry has {} microphones, spectrogram {} channels",
        geometry.mic_count(),
        channels
    );
    let tau = steering_delays(geometry, doa_deg);
    let bins = spec.bin_count();
    let steer: Vec<Vec<Complex64>> = tau
        .iter()
        .map(|&d| d - tau[0])
        .map(|d| {
            (0..bins)
                .map(|f| Complex64::from_polar(1.0, 2.0 * PI * spec.bin_freq_hz(f) * d))
                .collect()
        })
        .collect();
    let mut out = Spectrogram::zeros(1, spec.frame_count(), spec.config().clone(), spec.signal_len());
    let inv = 1.0 / channels as f64;
    for t in 0..spec.frame_count() {
        let y = out.frame_mut(0, t);
        for (c, s) in steer.iter().enumerate() {
            for ((acc, x), e) in y.iter_mut().zip(spec.frame(c, t)).zip(s) {
                *acc += x * e * inv;
            }
        }
    }
    Ok(out)
}

/// Spatial covariance matrices for every `(frame, bin)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceField {
    frame_count: usize,
    bin_count: usize,
    dim: usize,
    data: Vec<Complex64>,
}

impl CovarianceField {
    fn zeros(frame_count: usize, bin_count: usize, dim: usize) -> Self {
        Self {
            frame_count,
            bin_count,
            dim,
            data: vec![Complex64::new(0.0, 0.0); frame_count * bin_count * dim * dim],
        }
    }

    pub fn frame_count(&self) -> usize {
        self.frame_count
    }

    pub fn bin_count(&self) -> usize {
        self.bin_count
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, t: usize, f: usize) -> CMatrix {
        let d2 = self.dim * self.dim;
        let o = (t * self.bin_count + f) * d2;
        let rows: Vec<Vec<Complex64>> = self.data[o..o + d2].chunks(self.dim).map(|r| r.to_vec()).collect();
        CMatrix::from_rows(&rows)
    }

    fn set(&mut self, t: usize, f: usize, m: &CMatrix) {
        let d2 = self.dim * self.dim;
        let o = (t * self.bin_count + f) * d2;
        self.data[o..o + d2].copy_from_slice(m.data());
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    ensure!(
        (0.0..1.0).contains(&alpha),
        Validation,
        "forgetting factor {alpha} outside [0, 1)"
    );
    Ok(())
}

fn check_mask(spec: &Spectrogram, mask: &Mask) -> Result<()> {
    ensure!(
        mask.shape() == (spec.frame_count(), spec.bin_count()),
        Dimension,
        "mask {:?} does not match spectrogram ({}, {})",
        mask.shape(),
        spec.frame_count(),
        spec.bin_count()
    );
    Ok(())
}

fn snapshot(spec: &Spectrogram, t: usize, f: usize) -> Vec<Complex64> {
    (0..spec.channel_count()).map(|c| spec.get(c, t, f)).collect()
}

/// Recursive target/noise covariances with forgetting factor `alpha`:
///
/// `S_j(t) = a S_j(t-1) + (1-a) M(t) x x^H`,
/// `S_n(t) = a S_n(t-1) + (1-a) (1-M(t)) x x^H`,
///
/// both starting from `initial * I` before the first frame.
pub fn update_covariances(
    spec: &Spectrogram,
    mask: &Mask,
    alpha: f64,
    initial: f64,
) -> Result<(CovarianceField, CovarianceField)> {
    check_alpha(alpha)?;
    check_mask(spec, mask)?;
    let (frames, bins, dim) = (spec.frame_count(), spec.bin_count(), spec.channel_count());
    let mut target = CovarianceField::zeros(frames, bins, dim);
    let mut noise = CovarianceField::zeros(frames, bins, dim);
    for f in 0..bins {
        let mut sj = CMatrix::identity(dim);
        sj.scale(initial);
        let mut sn = sj.clone();
        for t in 0..frames {
            let x = snapshot(spec, t, f);
            let m = mask.get(t, f);
            sj.scale(alpha);
            sj.add_outer_scaled(&x, (1.0 - alpha) * m);
            sn.scale(alpha);
            sn.add_outer_scaled(&x, (1.0 - alpha) * (1.0 - m));
            target.set(t, f, &sj);
            noise.set(t, f, &sn);
        }
    }
    Ok((target, noise))
}

/// Utterance-level counterparts of [`update_covariances`]: per-bin averages
/// `(1/T) sum_t M x x^H` and `(1/T) sum_t (1-M) x x^H`, plus `initial * I`.
pub fn batch_covariances(spec: &Spectrogram, mask: &Mask, initial: f64) -> Result<(Vec<CMatrix>, Vec<CMatrix>)> {
    check_mask(spec, mask)?;
    let (frames, dim) = (spec.frame_count(), spec.channel_count());
    let scale = 1.0 / frames.max(1) as f64;
    let per_bin: Vec<(CMatrix, CMatrix)> = (0..spec.bin_count())
        .map(|f| {
            let mut sj = CMatrix::identity(dim);
            sj.scale(initial);
            let mut sn = sj.clone();
            for t in 0..frames {
                let x = snapshot(spec, t, f);
                let m = mask.get(t, f);
                sj.add_outer_scaled(&x, scale * m);
                sn.add_outer_scaled(&x, scale * (1.0 - m));
            }
            (sj, sn)
        })
        .collect();
    Ok(per_bin.into_iter().unzip())
}

/// Result of one rank-1 MWF solve.
#[derive(Debug, Clone, PartialEq)]
pub struct R1MwfSolution {
    pub weights: Vec<Complex64>,
    /// Principal eigenvector `h` of `S_n^{-1} S_j` (unit norm).
    pub h: Vec<Complex64>,
    /// Its eigenvalue.
    pub eigenvalue: f64,
    pub sigma: f64,
    pub lambda: f64,
    /// The solve failed and the weights are the passthrough selector `u_1`.
    pub fallback: bool,
}

/// Relative diagonal loading applied to `S_n` when it is ill-conditioned.
pub const NOISE_LOADING: f64 = 1e-6;

/// Principal eigenpair of `S_n^{-1} S_j`, computed in the whitened domain:
/// with `S_n = L L^H`, `B = L^{-1} S_j L^{-H}` is Hermitian and shares the
/// eigenvalues; eigenvectors map back through `h = L^{-H} v`.
pub fn principal_generalized_eigen(sj: &CMatrix, chol_n: &CMatrix) -> (f64, Vec<Complex64>) {
    let n = sj.dim();
    // columns of L^{-1} S_j, then rows -> B = (L^{-1} (L^{-1} S_j)^H)
    let mut tmp = CMatrix::zeros(n);
    for c in 0..n {
        let col: Vec<Complex64> = (0..n).map(|r| sj[(r, c)]).collect();
        let y = linalg::forward_subst(chol_n, &col);
        for r in 0..n {
            tmp[(r, c)] = y[r];
        }
    }
    let tmp_h = tmp.adjoint();
    let mut b = CMatrix::zeros(n);
    for c in 0..n {
        let col: Vec<Complex64> = (0..n).map(|r| tmp_h[(r, c)]).collect();
        let y = linalg::forward_subst(chol_n, &col);
        for r in 0..n {
            b[(r, c)] = y[r];
        }
    }
    let (vals, vecs) = hermitian_eigen(&b);
    let v = &vecs[n - 1];
    let mut h = linalg::backward_subst_adjoint(chol_n, v);
    let hn = linalg::norm(&h);
    if hn > 0.0 {
        h.iter_mut().for_each(|x| *x /= hn);
    }
    (vals[n - 1], h)
}

fn loaded_cholesky(sn: &CMatrix) -> Option<CMatrix> {
    let n = sn.dim();
    let load = NOISE_LOADING * sn.trace().re / n as f64;
    // Load only when the factorization is missing or badly conditioned, so
    // that well-posed covariances are used exactly as given.
    if let Some(l) = sn.cholesky() {
        let min_pivot = (0..n).map(|i| l[(i, i)].re.powi(2)).fold(f64::INFINITY, f64::min);
        if min_pivot >= load {
            return Some(l);
        }
    }
    if !(load > 0.0) {
        return None;
    }
    let mut loaded = sn.clone();
    for i in 0..n {
        loaded[(i, i)] += load;
    }
    loaded.cholesky()
}

fn passthrough(n: usize) -> Vec<Complex64> {
    let mut u = vec![Complex64::new(0.0, 0.0); n];
    u[0] = Complex64::new(1.0, 0.0);
    u
}

/// Rank-1 constrained MWF for the first channel:
///
/// `h` = principal eigenvector of `S_n^{-1} S_j`, steering vector `a = S_n h`,
/// `sigma = tr(S_j) / ||a||^2`, `S_r1 = sigma a a^H`,
/// `lambda = tr(S_n^{-1} S_r1)` and `W = S_n^{-1} S_r1 u_1 / (mu + lambda)`.
///
/// Building `S_r1` from `h` itself only agrees with this when `S_n` is a
/// multiple of the identity; with directional noise it points the filter
/// away from the target.
pub fn r1_mwf(sj: &CMatrix, sn: &CMatrix, mu: f64) -> R1MwfSolution {
    let n = sj.dim();
    let fallback = |eigenvalue| R1MwfSolution {
        weights: passthrough(n),
        h: passthrough(n),
        eigenvalue,
        sigma: 0.0,
        lambda: 0.0,
        fallback: true,
    };
    let trace_j = sj.trace().re;
    if trace_j <= 0.0 {
        return R1MwfSolution {
            weights: vec![Complex64::new(0.0, 0.0); n],
            h: passthrough(n),
            eigenvalue: 0.0,
            sigma: 0.0,
            lambda: 0.0,
            fallback: false,
        };
    }
    let Some(l) = loaded_cholesky(sn) else {
        return fallback(f64::NAN);
    };
    let (rho, h) = principal_generalized_eigen(sj, &l);
    // Steering vector of the rank-1 model: S_j h = rho S_n h, so a = S_n h.
    let a = sn.matvec(&h);
    let a_norm2: f64 = a.iter().map(|x| x.norm_sqr()).sum();
    let sigma = trace_j / a_norm2;
    // S_n^{-1} S_r1 = sigma h a^H
    let lambda = sigma * linalg::inner(&a, &h).re;
    let gain = sigma * a[0].conj() / (mu + lambda);
    let weights: Vec<Complex64> = h.iter().map(|v| v * gain).collect();
    if !weights.iter().all(|w| w.re.is_finite() && w.im.is_finite()) || !rho.is_finite() {
        return fallback(rho);
    }
    R1MwfSolution {
        weights,
        h,
        eigenvalue: rho,
        sigma,
        lambda,
        fallback: false,
    }
}

/// Beamformer weights for every `(frame, bin)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamformerWeights {
    frame_count: usize,
    bin_count: usize,
    dim: usize,
    data: Vec<Complex64>,
    fallbacks: usize,
}

impl BeamformerWeights {
    pub fn new(frame_count: usize, bin_count: usize, dim: usize, data: Vec<Complex64>) -> Result<Self> {
        ensure!(
            data.len() == frame_count * bin_count * dim,
            Dimension,
            "weight data length {} does not match {frame_count}x{bin_count}x{dim}",
            data.len()
        );
        Ok(Self {
            frame_count,
            bin_count,
            dim,
            data,
            fallbacks: 0,
        })
    }

    /// Passthrough `u_1` at every bin.
    pub fn passthrough(frame_count: usize, bin_count: usize, dim: usize) -> Self {
        let u = passthrough(dim);
        Self {
            frame_count,
            bin_count,
            dim,
            data: (0..frame_count * bin_count).flat_map(|_| u.iter().copied()).collect(),
            fallbacks: 0,
        }
    }

    pub fn get(&self, t: usize, f: usize) -> &[Complex64] {
        let o = (t * self.bin_count + f) * self.dim;
        &self.data[o..o + self.dim]
    }

    pub fn frame_count(&self) -> usize {
        self.frame_count
    }

    pub fn bin_count(&self) -> usize {
        self.bin_count
    }

    /// Number of bins whose solve fell back to passthrough.
    pub fn fallbacks(&self) -> usize {
        self.fallbacks
    }
}

/// R1-MWF weights from time-varying covariance fields.
pub fn r1_mwf_field(target: &CovarianceField, noise: &CovarianceField, mu: f64) -> Result<BeamformerWeights> {
    ensure!(
        (target.frame_count, target.bin_count, target.dim) == (noise.frame_count, noise.bin_count, noise.dim),
        Dimension,
        "target and noise covariance fields differ in shape"
    );
    let (frames, bins, dim) = (target.frame_count, target.bin_count, target.dim);
    let solved: Vec<R1MwfSolution> = (0..frames * bins)
        .into_par_iter()
        .map(|k| r1_mwf(&target.get(k / bins, k % bins), &noise.get(k / bins, k % bins), mu))
        .collect();
    let fallbacks = solved.iter().filter(|s| s.fallback).count();
    let data = solved.into_iter().flat_map(|s| s.weights).collect();
    let mut w = BeamformerWeights::new(frames, bins, dim, data)?;
    w.fallbacks = fallbacks;
    Ok(w)
}

/// `s(t, f) = W(t, f)^H x(t, f)`.
pub fn extract_source(spec: &Spectrogram, weights: &BeamformerWeights) -> Result<Spectrogram> {
    ensure!(
        (weights.frame_count, weights.bin_count, weights.dim)
            == (spec.frame_count(), spec.bin_count(), spec.channel_count()),
        Dimension,
        "weights ({}, {}, {}) do not match spectrogram ({}, {}, {})",
        weights.frame_count,
        weights.bin_count,
        weights.dim,
        spec.frame_count(),
        spec.bin_count(),
        spec.channel_count()
    );
    let mut out = Spectrogram::zeros(1, spec.frame_count(), spec.config().clone(), spec.signal_len());
    for t in 0..spec.frame_count() {
        for f in 0..spec.bin_count() {
            let w = weights.get(t, f);
            let y: Complex64 = (0..spec.channel_count()).map(|c| w[c].conj() * spec.get(c, t, f)).sum();
            out.set(0, t, f, y);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CovarianceMode {
    /// Utterance-level covariances, one filter per bin.
    #[default]
    Batch,
    /// Recursive covariances, one filter per frame and bin.
    Streaming,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BeamformConfig {
    pub alpha: f64,
    pub mu: f64,
    pub mode: CovarianceMode,
    /// Covariance initialization as a fraction of mean input power.
    pub init_fraction: f64,
}

impl Default for BeamformConfig {
    fn default() -> Self {
        Self {
            alpha: 0.95,
            mu: 1.0,
            mode: CovarianceMode::Batch,
            init_fraction: 1e-6,
        }
    }
}

/// Extracts the first-channel image of the source selected by `mask`.
/// Returns the single-channel estimate and the number of fallback bins.
pub fn mask_based_r1_mwf(spec: &Spectrogram, mask: &Mask, cfg: &BeamformConfig) -> Result<(Spectrogram, usize)> {
    check_alpha(cfg.alpha)?;
    check_mask(spec, mask)?;
    let mean_power = spec.data().iter().map(|v| v.norm_sqr()).sum::<f64>() / spec.data().len().max(1) as f64;
    let initial = cfg.init_fraction * mean_power;
    let weights = match cfg.mode {
        CovarianceMode::Streaming => {
            let (sj, sn) = update_covariances(spec, mask, cfg.alpha, initial)?;
            r1_mwf_field(&sj, &sn, cfg.mu)?
        }
        CovarianceMode::Batch => {
            let (sj, sn) = batch_covariances(spec, mask, initial)?;
            let solved: Vec<R1MwfSolution> = sj.par_iter().zip(&sn).map(|(a, b)| r1_mwf(a, b, cfg.mu)).collect();
            let fallbacks = solved.iter().filter(|s| s.fallback).count();
            let (frames, bins, dim) = (spec.frame_count(), spec.bin_count(), spec.channel_count());
            let mut data = Vec::with_capacity(frames * bins * dim);
            for _ in 0..frames {
                for s in &solved {
                    data.extend_from_slice(&s.weights);
                }
            }
            let mut w = BeamformerWeights::new(frames, bins, dim, data)?;
            w.fallbacks = fallbacks;
            w
        }
    };
    let fallbacks = weights.fallbacks();
    Ok((extract_source(spec, &weights)?, fallbacks))
}
