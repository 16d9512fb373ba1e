//! Sample-quality metrics over pluggable embeddings: Fréchet Gaussian
//! distance, polynomial-kernel MMD, precision/recall/density/coverage,
//! multiscale structural similarity, and percentile bootstrap intervals.
//! Everything is a pure function with a fixed summation order, so results
//! are bit-reproducible and small cases can be checked against brute-force
//! oracles float for float.

use crate::error::{FlowError, Result};
use crate::tensor::{Rng, Tensor};

pub const DEFAULT_KID_DEGREE: u32 = 3;
pub const DEFAULT_PRDC_K: usize = 5;
pub const DEFAULT_MSSSIM_LEVELS: usize = 5;
pub const DEFAULT_MSSSIM_PAIRS: usize = 500;
pub const DEFAULT_BOOTSTRAP_SAMPLES: usize = 200;
pub const DEFAULT_BOOTSTRAP_ALPHA: f64 = 0.05;

// ---------------------------------------------------------------- embeddings

/// Fitted principal-component basis (unit axes, descending variance).
#[derive(Clone, Debug)]
pub struct PcaBasis {
    pub input_dim: usize,
    pub mean: Vec<f64>,
    pub components: Vec<Vec<f64>>,
}

/// Map from image tensors to feature vectors. Deterministic per instance.
#[derive(Clone, Debug)]
pub enum Embedding {
    /// The flattened image itself.
    IdentityFlatten,
    /// Fixed seeded Gaussian projection to `dim` coordinates.
    RandomProjection { dim: usize, seed: u64 },
    /// Projection onto a fitted PCA basis.
    Pca(PcaBasis),
}

impl Embedding {
    pub fn name(&self) -> String {
        match self {
            Embedding::IdentityFlatten => "identity-flatten".into(),
            Embedding::RandomProjection { dim, seed } => {
                format!("random-projection(dim={dim},seed={seed})")
            }
            Embedding::Pca(b) => format!("pca(dim={})", b.components.len()),
        }
    }

    pub fn embed(&self, images: &[Tensor]) -> Result<Vec<Vec<f64>>> {
        if images.is_empty() {
            return Err(FlowError::Contract("embedding wants at least one image".into()));
        }
        let d = images[0].len();
        for (i, img) in images.iter().enumerate() {
            if img.len() != d {
                return Err(FlowError::Dim(format!(
                    "image {i} has {} elements, image 0 has {d}",
                    img.len()
                )));
            }
        }
        match self {
            Embedding::IdentityFlatten => Ok(images.iter().map(|t| t.data().to_vec()).collect()),
            Embedding::RandomProjection { dim, seed } => {
                if *dim == 0 {
                    return Err(FlowError::Contract("projection dim must be nonzero".into()));
                }
                let mut rng = Rng::new(*seed);
                let scale = 1.0 / (*dim as f64).sqrt();
                let rows: Vec<Vec<f64>> = (0..*dim)
                    .map(|_| (0..d).map(|_| rng.normal() * scale).collect())
                    .collect();
                Ok(images
                    .iter()
                    .map(|img| {
                        let x = img.data();
                        rows.iter()
                            .map(|row| row.iter().zip(x).map(|(r, v)| r * v).sum())
                            .collect()
                    })
                    .collect())
            }
            Embedding::Pca(basis) => {
                if basis.input_dim != d {
                    return Err(FlowError::Dim(format!(
                        "PCA basis fitted on {} dims, images have {d}",
                        basis.input_dim
                    )));
                }
                Ok(images
                    .iter()
                    .map(|img| {
                        let x = img.data();
                        basis
                            .components
                            .iter()
                            .map(|axis| {
                                axis.iter()
                                    .zip(x)
                                    .zip(&basis.mean)
                                    .map(|((a, v), m)| a * (v - m))
                                    .sum()
                            })
                            .collect()
                    })
                    .collect())
            }
        }
    }
}

/// Fit a `dim`-axis PCA basis to the images (sample covariance, n-1).
pub fn fit_pca(images: &[Tensor], dim: usize) -> Result<PcaBasis> {
    if images.len() < 2 {
        return Err(FlowError::Contract("PCA fitting wants at least 2 images".into()));
    }
    let d = images[0].len();
    if dim == 0 || dim > d {
        return Err(FlowError::Contract(format!(
            "PCA dim {dim} out of range for {d}-dim data"
        )));
    }
    let vecs: Vec<Vec<f64>> = images.iter().map(|t| t.data().to_vec()).collect();
    for v in &vecs {
        if v.len() != d {
            return Err(FlowError::Dim("PCA images must share a shape".into()));
        }
    }
    let mean = mean_of(&vecs);
    let cov = covariance(&vecs, &mean);
    let (_, vectors) = jacobi_eigen(&cov, d)?;
    // jacobi_eigen sorts descending: column e is the e-th axis.
    let components = (0..dim)
        .map(|e| (0..d).map(|i| vectors[i * d + e]).collect())
        .collect();
    Ok(PcaBasis { input_dim: d, mean, components })
}

// ------------------------------------------------------------ linear algebra

fn mean_of(xs: &[Vec<f64>]) -> Vec<f64> {
    let d = xs[0].len();
    let mut mu = vec![0.0; d];
    for x in xs {
        for (m, v) in mu.iter_mut().zip(x) {
            *m += v;
        }
    }
    let n = xs.len() as f64;
    for m in &mut mu {
        *m /= n;
    }
    mu
}

/// Sample covariance (n-1 denominator), row-major d*d.
fn covariance(xs: &[Vec<f64>], mean: &[f64]) -> Vec<f64> {
    let d = mean.len();
    let mut cov = vec![0.0; d * d];
    for x in xs {
        for i in 0..d {
            let di = x[i] - mean[i];
            for j in 0..d {
                cov[i * d + j] += di * (x[j] - mean[j]);
            }
        }
    }
    let denom = (xs.len() - 1) as f64;
    for c in &mut cov {
        *c /= denom;
    }
    cov
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues in descending order and the matching eigenvectors as
/// the columns of a row-major d*d matrix. Each eigenvector's largest-moduli
/// component is made positive so the basis is deterministic.
pub fn jacobi_eigen(matrix: &[f64], n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if matrix.len() != n * n {
        return Err(FlowError::Dim(format!(
            "eigensolver wants an n*n matrix, got {} entries for n={n}",
            matrix.len()
        )));
    }
    if n == 0 {
        return Err(FlowError::Contract("eigensolver wants n >= 1".into()));
    }
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] = 0.5 * (matrix[i * n + j] + matrix[j * n + i]);
        }
    }
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let frob: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    if frob > 0.0 {
        let tol = 1e-12 * frob;
        let mut converged = false;
        for _sweep in 0..100 {
            let off: f64 = {
                let mut s = 0.0;
                for p in 0..n {
                    for q in (p + 1)..n {
                        s += a[p * n + q] * a[p * n + q];
                    }
                }
                s.sqrt()
            };
            if off <= tol {
                converged = true;
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    let apq = a[p * n + q];
                    if apq.abs() <= 1e-3 * tol / n as f64 {
                        continue;
                    }
                    let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                    let t = if theta >= 0.0 {
                        1.0 / (theta + (theta * theta + 1.0).sqrt())
                    } else {
                        -1.0 / (-theta + (theta * theta + 1.0).sqrt())
                    };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for i in 0..n {
                        let aip = a[i * n + p];
                        let aiq = a[i * n + q];
                        a[i * n + p] = c * aip - s * aiq;
                        a[i * n + q] = s * aip + c * aiq;
                    }
                    for j in 0..n {
                        let apj = a[p * n + j];
                        let aqj = a[q * n + j];
                        a[p * n + j] = c * apj - s * aqj;
                        a[q * n + j] = s * apj + c * aqj;
                    }
                    for i in 0..n {
                        let vip = v[i * n + p];
                        let viq = v[i * n + q];
                        v[i * n + p] = c * vip - s * viq;
                        v[i * n + q] = s * vip + c * viq;
                    }
                }
            }
        }
        if !converged {
            return Err(FlowError::Numerical(
                "eigensolver did not converge in 100 sweeps".into(),
            ));
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        a[j * n + j].partial_cmp(&a[i * n + i]).expect("finite eigenvalues")
    });
    let values: Vec<f64> = order.iter().map(|&k| a[k * n + k]).collect();
    let mut vectors = vec![0.0; n * n];
    for (e, &k) in order.iter().enumerate() {
        let mut best = 0usize;
        for i in 1..n {
            if v[i * n + k].abs() > v[best * n + k].abs() {
                best = i;
            }
        }
        let sign = if v[best * n + k] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            vectors[i * n + e] = sign * v[i * n + k];
        }
    }
    Ok((values, vectors))
}

fn matmul_sq(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    out
}

/// Clamp a slightly negative eigenvalue of a nominally-PSD matrix to zero;
/// anything more negative means the decomposition went wrong.
fn clamp_psd_eig(l: f64, scale: f64, what: &str) -> Result<f64> {
    if l >= 0.0 {
        Ok(l)
    } else if -l <= 1e-10 * scale.max(1.0) {
        Ok(0.0)
    } else {
        Err(FlowError::Numerical(format!(
            "{what}: eigenvalue {l} is negative beyond tolerance"
        )))
    }
}

fn check_sets(real: &[Vec<f64>], fake: &[Vec<f64>]) -> Result<usize> {
    let d = match real.first().or_else(|| fake.first()) {
        Some(v) => v.len(),
        None => return Err(FlowError::Contract("both vector sets are empty".into())),
    };
    if real.is_empty() || fake.is_empty() {
        return Err(FlowError::Contract("both vector sets must be non-empty".into()));
    }
    if d == 0 {
        return Err(FlowError::Contract("vectors must have at least one coordinate".into()));
    }
    for (label, set) in [("real", real), ("fake", fake)] {
        for (i, v) in set.iter().enumerate() {
            if v.len() != d {
                return Err(FlowError::Dim(format!(
                    "{label} vector {i} has {} coordinates, expected {d}",
                    v.len()
                )));
            }
        }
    }
    Ok(d)
}

// ----------------------------------------------------------------------- FID

/// Fréchet distance between Gaussians fitted to the two sets:
/// |mu_r - mu_f|^2 + tr(S_r + S_f - 2 (S_r S_f)^{1/2}), with the matrix
/// square root taken through the symmetrized product
/// S_r^{1/2} S_f S_r^{1/2}. Tiny negative eigenvalues are clamped to zero.
pub fn fid_gaussian(real: &[Vec<f64>], fake: &[Vec<f64>]) -> Result<f64> {
    let d = check_sets(real, fake)?;
    if real.len() < 2 || fake.len() < 2 {
        return Err(FlowError::Contract(
            "Frechet distance wants at least 2 vectors per set".into(),
        ));
    }
    let mu_r = mean_of(real);
    let mu_f = mean_of(fake);
    let cov_r = covariance(real, &mu_r);
    let cov_f = covariance(fake, &mu_f);

    let mut mean_term = 0.0;
    for i in 0..d {
        let diff = mu_r[i] - mu_f[i];
        mean_term += diff * diff;
    }

    let (lr, vr) = jacobi_eigen(&cov_r, d)?;
    let scale_r = lr.iter().fold(0.0f64, |m, &l| m.max(l.abs()));
    let mut sqrt_r = vec![0.0; d * d];
    for (e, &l) in lr.iter().enumerate() {
        let root = clamp_psd_eig(l, scale_r, "real covariance")?.sqrt();
        if root == 0.0 {
            continue;
        }
        for i in 0..d {
            let vie = vr[i * d + e] * root;
            for j in 0..d {
                sqrt_r[i * d + j] += vie * vr[j * d + e];
            }
        }
    }

    let prod = matmul_sq(&matmul_sq(&sqrt_r, &cov_f, d), &sqrt_r, d);
    let mut sym = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            sym[i * d + j] = 0.5 * (prod[i * d + j] + prod[j * d + i]);
        }
    }
    let (lm, _) = jacobi_eigen(&sym, d)?;
    let scale_m = lm.iter().fold(0.0f64, |m, &l| m.max(l.abs()));
    let mut tr_sqrt = 0.0;
    for &l in &lm {
        tr_sqrt += clamp_psd_eig(l, scale_m, "covariance product")?.sqrt();
    }

    let mut tr_r = 0.0;
    let mut tr_f = 0.0;
    for i in 0..d {
        tr_r += cov_r[i * d + i];
        tr_f += cov_f[i * d + i];
    }
    Ok((mean_term + tr_r + tr_f - 2.0 * tr_sqrt).max(0.0))
}

// ----------------------------------------------------------------------- KID

/// Unbiased squared MMD with the polynomial kernel (a.b/d + 1)^degree.
/// Index-equal pairs are excluded from all three sums (the U-statistic
/// form), so two literally identical sets score zero up to rounding and the
/// value may come out slightly negative. Within-set sums skip the diagonal
/// inline; the cross sum runs over all pairs in row-major order and then
/// subtracts the index-equal pairs, which pins the float-level result.
pub fn kid_poly(real: &[Vec<f64>], fake: &[Vec<f64>], degree: u32) -> Result<f64> {
    let d = check_sets(real, fake)?;
    let m = real.len();
    let n = fake.len();
    if m < 2 || n < 2 {
        return Err(FlowError::Contract("kernel MMD wants at least 2 vectors per set".into()));
    }
    if degree == 0 {
        return Err(FlowError::Contract("kernel degree must be at least 1".into()));
    }
    let kernel = |a: &[f64], b: &[f64]| -> f64 {
        let mut dot = 0.0;
        for i in 0..d {
            dot += a[i] * b[i];
        }
        (dot / d as f64 + 1.0).powi(degree as i32)
    };
    let mut sum_rr = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                sum_rr += kernel(&real[i], &real[j]);
            }
        }
    }
    let mut sum_ff = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                sum_ff += kernel(&fake[i], &fake[j]);
            }
        }
    }
    let mut sum_rf = 0.0;
    for i in 0..m {
        for j in 0..n {
            sum_rf += kernel(&real[i], &fake[j]);
        }
    }
    let shared = m.min(n);
    let mut sum_diag = 0.0;
    for i in 0..shared {
        sum_diag += kernel(&real[i], &fake[i]);
    }
    Ok(sum_rr / (m * (m - 1)) as f64 + sum_ff / (n * (n - 1)) as f64
        - 2.0 * (sum_rf - sum_diag) / (m * n - shared) as f64)
}

// ---------------------------------------------------------------------- PRDC

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prdc {
    pub precision: f64,
    pub recall: f64,
    pub density: f64,
    pub coverage: f64,
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        let d = a[i] - b[i];
        s += d * d;
    }
    s.sqrt()
}

/// Distance from each point to its k-th nearest neighbor within the set
/// (self excluded).
fn knn_radii(set: &[Vec<f64>], k: usize) -> Vec<f64> {
    let n = set.len();
    let mut radii = Vec::with_capacity(n);
    for i in 0..n {
        let mut dists: Vec<f64> = (0..n)
            .filter(|&j| j != i)
            .map(|j| euclid(&set[i], &set[j]))
            .collect();
        dists.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
        radii.push(dists[k - 1]);
    }
    radii
}

/// Precision, recall, density, coverage with Euclidean k-NN balls;
/// density is clamped to [0,1].
pub fn prdc(real: &[Vec<f64>], fake: &[Vec<f64>], k: usize) -> Result<Prdc> {
    check_sets(real, fake)?;
    if k == 0 {
        return Err(FlowError::Contract("neighborhood size k must be at least 1".into()));
    }
    if real.len() <= k || fake.len() <= k {
        return Err(FlowError::Contract(format!(
            "need more than k={k} points per set, got {} real / {} fake",
            real.len(),
            fake.len()
        )));
    }
    let rad_real = knn_radii(real, k);
    let rad_fake = knn_radii(fake, k);

    let mut precision_hits = 0usize;
    let mut density_count = 0usize;
    for f in fake {
        let mut contained = 0usize;
        for (r, rad) in real.iter().zip(&rad_real) {
            if euclid(f, r) <= *rad {
                contained += 1;
            }
        }
        if contained > 0 {
            precision_hits += 1;
        }
        density_count += contained;
    }

    let mut recall_hits = 0usize;
    let mut coverage_hits = 0usize;
    for (r, rad_r) in real.iter().zip(&rad_real) {
        let mut in_fake_ball = false;
        let mut in_own_ball = false;
        for (f, rad_f) in fake.iter().zip(&rad_fake) {
            let dist = euclid(r, f);
            if dist <= *rad_f {
                in_fake_ball = true;
            }
            if dist <= *rad_r {
                in_own_ball = true;
            }
        }
        if in_fake_ball {
            recall_hits += 1;
        }
        if in_own_ball {
            coverage_hits += 1;
        }
    }

    Ok(Prdc {
        precision: precision_hits as f64 / fake.len() as f64,
        recall: recall_hits as f64 / real.len() as f64,
        density: (density_count as f64 / (k * fake.len()) as f64).min(1.0),
        coverage: coverage_hits as f64 / real.len() as f64,
    })
}

// ------------------------------------------------------------------- MS-SSIM

/// Standard five-level exponents from the multiscale SSIM literature.
pub const MSSSIM_EXPONENTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
/// Stabilizers (0.01*L)^2 and (0.03*L)^2 with dynamic range L = 1.
const SSIM_C1: f64 = 1e-4;
const SSIM_C2: f64 = 9e-4;

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as isize;
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for i in -half..=half {
        for j in -half..=half {
            let r2 = (i * i + j * j) as f64;
            w.push((-r2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
        }
    }
    let total: f64 = w.iter().sum();
    for v in &mut w {
        *v /= total;
    }
    w
}

/// Mean luminance and contrast-structure terms over all valid 11x11 window
/// positions; both clamped at zero so fractional powers stay real.
fn ssim_terms(a: &[f64], b: &[f64], h: usize, w: usize, win: &[f64]) -> (f64, f64) {
    let oh = h - SSIM_WINDOW + 1;
    let ow = w - SSIM_WINDOW + 1;
    let mut l_sum = 0.0;
    let mut cs_sum = 0.0;
    for i in 0..oh {
        for j in 0..ow {
            let mut wa = 0.0;
            let mut wb = 0.0;
            let mut waa = 0.0;
            let mut wbb = 0.0;
            let mut wab = 0.0;
            for u in 0..SSIM_WINDOW {
                for v in 0..SSIM_WINDOW {
                    let g = win[u * SSIM_WINDOW + v];
                    let x = a[(i + u) * w + (j + v)];
                    let y = b[(i + u) * w + (j + v)];
                    wa += g * x;
                    wb += g * y;
                    waa += g * x * x;
                    wbb += g * y * y;
                    wab += g * x * y;
                }
            }
            let va = waa - wa * wa;
            let vb = wbb - wb * wb;
            let cov = wab - wa * wb;
            let l = (2.0 * wa * wb + SSIM_C1) / (wa * wa + wb * wb + SSIM_C1);
            let cs = (2.0 * cov + SSIM_C2) / (va + vb + SSIM_C2);
            l_sum += l.max(0.0);
            cs_sum += cs.max(0.0);
        }
    }
    let count = (oh * ow) as f64;
    (l_sum / count, cs_sum / count)
}

fn downsample_mean(x: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let oh = h / 2;
    let ow = w / 2;
    let mut out = Vec::with_capacity(oh * ow);
    for i in 0..oh {
        for j in 0..ow {
            let s = x[2 * i * w + 2 * j]
                + x[2 * i * w + 2 * j + 1]
                + x[(2 * i + 1) * w + 2 * j]
                + x[(2 * i + 1) * w + 2 * j + 1];
            out.push(s * 0.25);
        }
    }
    (out, oh, ow)
}

#[derive(Clone, Copy, Debug)]
pub struct MsSsim {
    pub value: f64,
    /// Levels actually evaluated; smaller than requested when the image
    /// cannot hold an 11x11 window through that many halvings.
    pub levels_used: usize,
}

fn image_plane_shape(t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [c, h, w] => Ok((*c, *h, *w)),
        [h, w] => Ok((1, *h, *w)),
        s => Err(FlowError::Dim(format!("similarity wants an image, got shape {s:?}"))),
    }
}

/// Multiscale structural similarity in [0,1]. Levels auto-reduce to the
/// deepest pyramid the image supports; on reduction (or whenever fewer than
/// five levels are used) the exponents are renormalized to sum to one.
pub fn ms_ssim_detailed(a: &Tensor, b: &Tensor, levels: usize) -> Result<MsSsim> {
    if a.shape() != b.shape() {
        return Err(FlowError::Dim(format!(
            "similarity wants equal shapes, got {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if levels == 0 || levels > MSSSIM_EXPONENTS.len() {
        return Err(FlowError::Contract(format!(
            "levels must be 1..={}, got {levels}",
            MSSSIM_EXPONENTS.len()
        )));
    }
    let (c, h, w) = image_plane_shape(a)?;
    if h.min(w) < SSIM_WINDOW {
        return Err(FlowError::Dim(format!(
            "image {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let mut used = 1;
    while used < levels && h.min(w) >= (1 << used) * SSIM_WINDOW {
        used += 1;
    }
    let mut weights: Vec<f64> = MSSSIM_EXPONENTS[..used].to_vec();
    if used < MSSSIM_EXPONENTS.len() {
        let total: f64 = weights.iter().sum();
        for we in &mut weights {
            *we /= total;
        }
    }

    let win = gaussian_window();
    let mut value_sum = 0.0;
    for ch in 0..c {
        let plane = h * w;
        let mut pa = a.data()[ch * plane..(ch + 1) * plane].to_vec();
        let mut pb = b.data()[ch * plane..(ch + 1) * plane].to_vec();
        let (mut ph, mut pw) = (h, w);
        let mut value = 1.0;
        for (lvl, weight) in weights.iter().enumerate() {
            let (l, cs) = ssim_terms(&pa, &pb, ph, pw, &win);
            if lvl + 1 < used {
                value *= cs.powf(*weight);
                let (na, nh, nw) = downsample_mean(&pa, ph, pw);
                let (nb, _, _) = downsample_mean(&pb, ph, pw);
                pa = na;
                pb = nb;
                ph = nh;
                pw = nw;
            } else {
                value *= (l * cs).powf(*weight);
            }
        }
        value_sum += value;
    }
    let value = (value_sum / c as f64).clamp(0.0, 1.0);
    Ok(MsSsim { value, levels_used: used })
}

pub fn ms_ssim(a: &Tensor, b: &Tensor, levels: usize) -> Result<f64> {
    Ok(ms_ssim_detailed(a, b, levels)?.value)
}

// --------------------------------------------------------- MS-SSIM reporting

#[derive(Clone, Debug)]
pub struct MsSsimReport {
    pub intra_mean: f64,
    pub intra_std: f64,
    pub inter_mean: f64,
    pub inter_std: f64,
    pub n_pairs: usize,
    pub levels_used: usize,
    /// Classes left out of the intra statistic for having fewer than 2
    /// samples; callers decide how loudly to warn.
    pub excluded_classes: Vec<usize>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Mean and standard deviation of MS-SSIM over random same-class pairs and
/// random cross-class pairs. Deterministic given the rng state.
pub fn msssim_report(
    groups: &[Vec<Tensor>],
    n_pairs: usize,
    levels: usize,
    rng: &mut Rng,
) -> Result<MsSsimReport> {
    if n_pairs < 2 {
        return Err(FlowError::Contract("need at least 2 pairs for a spread".into()));
    }
    let nonempty: Vec<usize> =
        (0..groups.len()).filter(|&c| !groups[c].is_empty()).collect();
    let intra_classes: Vec<usize> =
        (0..groups.len()).filter(|&c| groups[c].len() >= 2).collect();
    let excluded_classes: Vec<usize> = nonempty
        .iter()
        .copied()
        .filter(|c| !intra_classes.contains(c))
        .collect();
    if nonempty.len() < 2 {
        return Err(FlowError::Contract(
            "cross-class pairs need samples in at least 2 classes".into(),
        ));
    }
    if intra_classes.is_empty() {
        return Err(FlowError::Contract(
            "same-class pairs need a class with at least 2 samples".into(),
        ));
    }

    let mut levels_used = levels;
    let mut intra = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let c = intra_classes[rng.below(intra_classes.len())];
        let n = groups[c].len();
        let i = rng.below(n);
        let mut j = rng.below(n - 1);
        if j >= i {
            j += 1;
        }
        let r = ms_ssim_detailed(&groups[c][i], &groups[c][j], levels)?;
        levels_used = r.levels_used;
        intra.push(r.value);
    }
    let mut inter = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let a = nonempty[rng.below(nonempty.len())];
        let mut bi = rng.below(nonempty.len() - 1);
        let apos = nonempty.iter().position(|&c| c == a).expect("member");
        if bi >= apos {
            bi += 1;
        }
        let b = nonempty[bi];
        let i = rng.below(groups[a].len());
        let j = rng.below(groups[b].len());
        let r = ms_ssim_detailed(&groups[a][i], &groups[b][j], levels)?;
        levels_used = r.levels_used;
        inter.push(r.value);
    }
    let (intra_mean, intra_std) = mean_std(&intra);
    let (inter_mean, inter_std) = mean_std(&inter);
    Ok(MsSsimReport {
        intra_mean,
        intra_std,
        inter_mean,
        inter_std,
        n_pairs,
        levels_used,
        excluded_classes,
    })
}

// ------------------------------------------------------------------ bootstrap

/// Interpolated percentile of a sorted slice (the common linear rule).
fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * q;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo + 1 >= n {
        sorted[n - 1]
    } else {
        sorted[lo] * (1.0 - frac) + sorted[lo + 1] * frac
    }
}

/// Percentile bootstrap: resample both sets with replacement at their
/// original sizes, evaluate the metric, and take the alpha/2 and 1-alpha/2
/// percentiles. Returns (point estimate on the full sets, lo, hi).
pub fn bootstrap_ci(
    metric: &mut dyn FnMut(&[Vec<f64>], &[Vec<f64>]) -> Result<f64>,
    real: &[Vec<f64>],
    fake: &[Vec<f64>],
    n_boot: usize,
    alpha: f64,
    rng: &mut Rng,
) -> Result<(f64, f64, f64)> {
    if n_boot < 50 {
        return Err(FlowError::Contract(format!(
            "bootstrap wants at least 50 resamples, got {n_boot}"
        )));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(FlowError::Contract(format!("alpha must be in (0,1), got {alpha}")));
    }
    check_sets(real, fake)?;
    let point = metric(real, fake)?;
    let mut values = Vec::with_capacity(n_boot);
    for b in 0..n_boot {
        let rr: Vec<Vec<f64>> =
            (0..real.len()).map(|_| real[rng.below(real.len())].clone()).collect();
        let ff: Vec<Vec<f64>> =
            (0..fake.len()).map(|_| fake[rng.below(fake.len())].clone()).collect();
        let v = metric(&rr, &ff)
            .map_err(|e| e.in_context(&format!("bootstrap resample {b}")))?;
        if !v.is_finite() {
            return Err(FlowError::Numerical(format!(
                "bootstrap resample {b} produced a non-finite value"
            )));
        }
        values.push(v);
    }
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let lo = percentile_sorted(&values, alpha / 2.0);
    let hi = percentile_sorted(&values, 1.0 - alpha / 2.0);
    Ok((point, lo, hi))
}

// -------------------------------------------------------------------- report

#[derive(Clone, Debug)]
pub struct MetricEntry {
    pub name: String,
    pub value: f64,
    pub ci95: Option<(f64, f64)>,
}

/// Named metric values with optional intervals, plus the provenance needed
/// to reproduce them.
#[derive(Clone, Debug)]
pub struct MetricReport {
    pub embedding: String,
    pub seed: u64,
    pub real_count: usize,
    pub fake_count: usize,
    pub entries: Vec<MetricEntry>,
}

impl MetricReport {
    pub fn new(embedding: String, seed: u64, real_count: usize, fake_count: usize) -> Self {
        MetricReport { embedding, seed, real_count, fake_count, entries: Vec::new() }
    }

    pub fn push_scalar(&mut self, name: &str, value: f64) {
        self.entries.push(MetricEntry { name: name.into(), value, ci95: None });
    }

    /// Record a value with its interval; the interval is widened to contain
    /// the point estimate, which a percentile bootstrap does not guarantee.
    pub fn push_interval(&mut self, name: &str, value: f64, lo: f64, hi: f64) {
        let lo = lo.min(value);
        let hi = hi.max(value);
        self.entries.push(MetricEntry { name: name.into(), value, ci95: Some((lo, hi)) });
    }

    /// One line per metric: `<name>=<float>[ ci95=<lo>,<hi>]`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&e.name);
            out.push('=');
            out.push_str(&e.value.to_string());
            if let Some((lo, hi)) = e.ci95 {
                out.push_str(&format!(" ci95={lo},{hi}"));
            }
            out.push('\n');
        }
        out
    }

    /// Structured mirror of the same fields.
    pub fn to_json(&self) -> String {
        let metrics: Vec<serde_json::Value> = self
            .entries
            .iter()
            .map(|e| {
                serde_json::json!({
                    "name": e.name,
                    "value": e.value,
                    "ci95": e.ci95.map(|(lo, hi)| vec![lo, hi]),
                })
            })
            .collect();
        serde_json::json!({
            "embedding": self.embedding,
            "seed": self.seed,
            "real_count": self.real_count,
            "fake_count": self.fake_count,
            "metrics": metrics,
        })
        .to_string()
    }
}
