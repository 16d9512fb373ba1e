//! Metric-suite checks against closed forms and independently coded oracles:
//! a dense linear-algebra path for the Fréchet distance, brute-force double
//! sums for the kernel MMD, ball-counting loops for PRDC, and a separable
//! single-scale SSIM chain for the multiscale similarity.

mod common;

use common::assert_close;
use magicflow_core::metrics::{
    bootstrap_ci, fid_gaussian, fit_pca, jacobi_eigen, kid_poly, ms_ssim, ms_ssim_detailed,
    msssim_report, prdc, Embedding, MetricReport, Prdc, MSSSIM_EXPONENTS,
};
use magicflow_core::tensor::{Rng, Tensor};
use magicflow_core::FlowError;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn cloud(rng: &mut Rng, n: usize, center: &[f64], spread: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| center.iter().map(|c| c + spread * rng.normal()).collect())
        .collect()
}

// ------------------------------------------------------------- FID oracles

fn fid_oracle(real: &[Vec<f64>], fake: &[Vec<f64>]) -> f64 {
    let d = real[0].len();
    let stats = |xs: &[Vec<f64>]| {
        let mut mu = DVector::<f64>::zeros(d);
        for x in xs {
            mu += DVector::from_column_slice(x);
        }
        mu /= xs.len() as f64;
        let mut cov = DMatrix::<f64>::zeros(d, d);
        for x in xs {
            let c = DVector::from_column_slice(x) - &mu;
            cov += &c * c.transpose();
        }
        cov /= (xs.len() - 1) as f64;
        (mu, cov)
    };
    let sqrtm = |m: &DMatrix<f64>| {
        let eig = m.clone().symmetric_eigen();
        let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
        &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
    };
    let (mu_r, cov_r) = stats(real);
    let (mu_f, cov_f) = stats(fake);
    let sr = sqrtm(&cov_r);
    let prod = &sr * &cov_f * &sr;
    let sym = (&prod + prod.transpose()) * 0.5;
    let tr_sqrt: f64 = sym
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum();
    (mu_r - mu_f).norm_squared() + cov_r.trace() + cov_f.trace() - 2.0 * tr_sqrt
}

#[test]
fn eigensolver_agrees_with_a_dense_library() {
    let n = 6;
    let mut rng = Rng::new(41);
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let v = rng.range(-2.0, 2.0);
            a[i * n + j] = v;
            a[j * n + i] = v;
        }
    }
    let (vals, vecs) = jacobi_eigen(&a, n).unwrap();
    let scale = vals.iter().fold(0.0f64, |m, v| m.max(v.abs()));

    let dense = DMatrix::from_row_slice(n, n, &a).symmetric_eigen();
    let mut expected: Vec<f64> = dense.eigenvalues.iter().copied().collect();
    expected.sort_by(|x, y| y.partial_cmp(x).unwrap());
    for (got, want) in vals.iter().zip(&expected) {
        assert_close(*got, *want, 0.0, 1e-10 * scale, "eigenvalue");
    }

    for e in 0..n {
        for i in 0..n {
            let mut av = 0.0;
            for j in 0..n {
                av += a[i * n + j] * vecs[j * n + e];
            }
            assert_close(av, vals[e] * vecs[i * n + e], 0.0, 1e-9 * scale, "A v = lambda v");
        }
    }
    for e1 in 0..n {
        for e2 in 0..n {
            let dot: f64 = (0..n).map(|i| vecs[i * n + e1] * vecs[i * n + e2]).sum();
            let want = if e1 == e2 { 1.0 } else { 0.0 };
            assert_close(dot, want, 0.0, 1e-10, "orthonormal eigenbasis");
        }
    }
}

#[test]
fn fid_of_identical_sets_is_zero() {
    let mut rng = Rng::new(7);
    let x = cloud(&mut rng, 30, &[0.5, -1.0, 2.0, 0.0], 1.3);
    let fid = fid_gaussian(&x, &x).unwrap();
    assert!(fid.abs() < 1e-6, "fid of a set against itself was {fid}");
}

#[test]
fn fid_equals_squared_mean_shift_for_identity_covariances() {
    // Four points whose sample covariance (n-1 denominator) is exactly I.
    let s = 1.5f64.sqrt();
    let base = vec![vec![s, 0.0], vec![-s, 0.0], vec![0.0, s], vec![0.0, -s]];
    let delta = [0.7, -1.2];
    let shifted: Vec<Vec<f64>> = base
        .iter()
        .map(|v| vec![v[0] + delta[0], v[1] + delta[1]])
        .collect();
    let want = delta[0] * delta[0] + delta[1] * delta[1];
    let fid = fid_gaussian(&base, &shifted).unwrap();
    assert_close(fid, want, 0.0, 1e-6, "equal-covariance fid");
}

#[test]
fn fid_matches_a_dense_linear_algebra_oracle() {
    let mut rng = Rng::new(11);
    let real = cloud(&mut rng, 50, &[0.0, 0.0, 0.0], 1.0);
    let fake: Vec<Vec<f64>> = cloud(&mut rng, 50, &[0.8, -0.3, 0.5], 1.0)
        .into_iter()
        .map(|v| vec![1.4 * v[0], v[1], 0.6 * v[2] + 0.2 * v[0]])
        .collect();
    let got = fid_gaussian(&real, &fake).unwrap();
    let want = fid_oracle(&real, &fake);
    assert_close(got, want, 1e-8, 0.0, "fid vs dense oracle");
}

#[test]
fn fid_rejects_undersized_or_mismatched_sets() {
    let a = vec![vec![0.0, 1.0]];
    let b = vec![vec![1.0, 0.0], vec![0.5, 0.5]];
    assert!(matches!(fid_gaussian(&a, &b), Err(FlowError::Contract(_))));
    let c = vec![vec![1.0, 0.0, 0.0], vec![0.5, 0.5, 0.0]];
    assert!(matches!(fid_gaussian(&b, &c), Err(FlowError::Dim(_))));
    let empty: Vec<Vec<f64>> = Vec::new();
    assert!(matches!(fid_gaussian(&empty, &b), Err(FlowError::Contract(_))));
}

// -------------------------------------------------------------- KID oracles

fn kid_oracle(real: &[Vec<f64>], fake: &[Vec<f64>], degree: i32) -> f64 {
    let d = real[0].len() as f64;
    let kern = |a: &[f64], b: &[f64]| {
        let mut dot = 0.0;
        for (x, y) in a.iter().zip(b) {
            dot += x * y;
        }
        (dot / d + 1.0).powi(degree)
    };
    let m = real.len();
    let n = fake.len();
    let mut rr = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                rr += kern(&real[i], &real[j]);
            }
        }
    }
    let mut ff = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                ff += kern(&fake[i], &fake[j]);
            }
        }
    }
    let mut rf = 0.0;
    for i in 0..m {
        for j in 0..n {
            rf += kern(&real[i], &fake[j]);
        }
    }
    let mut diag = 0.0;
    for i in 0..m.min(n) {
        diag += kern(&real[i], &fake[i]);
    }
    rr / (m * (m - 1)) as f64 + ff / (n * (n - 1)) as f64
        - 2.0 * (rf - diag) / (m * n - m.min(n)) as f64
}

#[test]
fn kid_of_identical_sets_is_tiny() {
    let mut rng = Rng::new(13);
    let x = cloud(&mut rng, 50, &[0.0; 6], 1.0);
    let kid = kid_poly(&x, &x, 3).unwrap();
    assert!(kid.abs() < 1e-4, "kid of a set against itself was {kid}");
}

#[test]
fn kid_separates_far_clusters() {
    let mut rng = Rng::new(17);
    let real = cloud(&mut rng, 20, &[0.0, 0.0], 0.1);
    let fake = cloud(&mut rng, 20, &[10.0, -10.0], 0.1);
    let kid = kid_poly(&real, &fake, 3).unwrap();
    assert!(kid > 0.1, "far clusters gave kid {kid}");
}

#[test]
fn kid_matches_the_double_sum_oracle() {
    let mut rng = Rng::new(19);
    let real = cloud(&mut rng, 5, &[0.2, -0.1, 0.4], 0.9);
    let fake = cloud(&mut rng, 5, &[-0.3, 0.5, 0.0], 1.1);
    let got = kid_poly(&real, &fake, 3).unwrap();
    let want = kid_oracle(&real, &fake, 3);
    assert!((got - want).abs() < 1e-12, "kid {got} vs oracle {want}");
}

// ------------------------------------------------------------- PRDC oracles

fn prdc_oracle(real: &[Vec<f64>], fake: &[Vec<f64>], k: usize) -> Prdc {
    let dist = |a: &[f64], b: &[f64]| {
        let mut s = 0.0;
        for i in 0..a.len() {
            let d = a[i] - b[i];
            s += d * d;
        }
        s.sqrt()
    };
    let radii = |set: &[Vec<f64>]| -> Vec<f64> {
        (0..set.len())
            .map(|i| {
                let mut ds: Vec<f64> = (0..set.len())
                    .filter(|&j| j != i)
                    .map(|j| dist(&set[i], &set[j]))
                    .collect();
                ds.sort_by(|a, b| a.partial_cmp(b).unwrap());
                ds[k - 1]
            })
            .collect()
    };
    let rad_r = radii(real);
    let rad_f = radii(fake);
    let mut precision = 0usize;
    let mut contained_total = 0usize;
    for f in fake {
        let c = real
            .iter()
            .zip(&rad_r)
            .filter(|(r, rad)| dist(f, r) <= **rad)
            .count();
        if c > 0 {
            precision += 1;
        }
        contained_total += c;
    }
    let mut recall = 0usize;
    let mut coverage = 0usize;
    for (r, rad) in real.iter().zip(&rad_r) {
        if fake.iter().zip(&rad_f).any(|(f, radf)| dist(r, f) <= *radf) {
            recall += 1;
        }
        if fake.iter().any(|f| dist(r, f) <= *rad) {
            coverage += 1;
        }
    }
    Prdc {
        precision: precision as f64 / fake.len() as f64,
        recall: recall as f64 / real.len() as f64,
        density: (contained_total as f64 / (k * fake.len()) as f64).min(1.0),
        coverage: coverage as f64 / real.len() as f64,
    }
}

#[test]
fn prdc_of_a_set_against_itself_saturates() {
    let mut rng = Rng::new(23);
    let x = cloud(&mut rng, 12, &[0.0, 0.0], 1.0);
    let out = prdc(&x, &x, 5).unwrap();
    assert_eq!(out.precision, 1.0);
    assert_eq!(out.recall, 1.0);
    assert_eq!(out.coverage, 1.0);
    assert!(out.density > 0.0 && out.density <= 1.0);
}

#[test]
fn prdc_density_matches_a_ball_counting_oracle() {
    // Ten evenly spaced points on a line, k = 3, fake identical to real.
    let pts: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
    let got = prdc(&pts, &pts, 3).unwrap();
    let want = prdc_oracle(&pts, &pts, 3);
    assert_eq!(got, want);
    assert_eq!(got.precision, 1.0);
    assert_eq!(got.recall, 1.0);
    assert_eq!(got.coverage, 1.0);
}

#[test]
fn prdc_of_far_separated_clusters_is_zero() {
    let mut rng = Rng::new(29);
    let real = cloud(&mut rng, 10, &[0.0, 0.0], 0.05);
    let fake = cloud(&mut rng, 10, &[100.0, 100.0], 0.05);
    let out = prdc(&real, &fake, 5).unwrap();
    assert_eq!(
        out,
        Prdc { precision: 0.0, recall: 0.0, density: 0.0, coverage: 0.0 }
    );
}

#[test]
fn prdc_rejects_sets_no_larger_than_k() {
    let pts: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64]).collect();
    assert!(matches!(prdc(&pts, &pts, 5), Err(FlowError::Contract(_))));
    assert!(matches!(prdc(&pts, &pts, 0), Err(FlowError::Contract(_))));
}

#[test]
fn shifting_the_fake_set_degrades_the_metrics_monotonically() {
    let mut rng = Rng::new(0);
    let real = cloud(&mut rng, 40, &[0.0, 0.0, 0.0], 1.0);
    let base = cloud(&mut rng, 40, &[0.0, 0.0, 0.0], 1.0);
    let mut prev_fid = f64::NEG_INFINITY;
    let mut prev = Prdc { precision: 2.0, recall: 2.0, density: 2.0, coverage: 2.0 };
    for step in 0..5 {
        let shift = step as f64;
        let fake: Vec<Vec<f64>> = base
            .iter()
            .map(|v| vec![v[0] + shift, v[1], v[2]])
            .collect();
        let fid = fid_gaussian(&real, &fake).unwrap();
        let out = prdc(&real, &fake, 5).unwrap();
        assert!(fid >= prev_fid, "fid fell from {prev_fid} to {fid} at shift {shift}");
        assert!(out.precision <= prev.precision, "precision rose at shift {shift}");
        assert!(out.recall <= prev.recall, "recall rose at shift {shift}");
        assert!(out.coverage <= prev.coverage, "coverage rose at shift {shift}");
        prev_fid = fid;
        prev = out;
    }
}

// ----------------------------------------------------------- MS-SSIM oracle

/// Single-scale SSIM terms with a separable Gaussian window, coded
/// independently of the library routine.
fn ssim_terms_oracle(a: &[f64], b: &[f64], h: usize, w: usize) -> (f64, f64) {
    let g1: Vec<f64> = (-5i64..=5).map(|i| (-((i * i) as f64) / 4.5).exp()).collect();
    let norm: f64 = g1.iter().sum();
    let g1: Vec<f64> = g1.iter().map(|v| v / norm).collect();
    let (c1, c2) = (1e-4, 9e-4);
    let mut l_sum = 0.0;
    let mut cs_sum = 0.0;
    for i in 0..=(h - 11) {
        for j in 0..=(w - 11) {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for u in 0..11 {
                for v in 0..11 {
                    let wt = g1[u] * g1[v];
                    let x = a[(i + u) * w + j + v];
                    let y = b[(i + u) * w + j + v];
                    ma += wt * x;
                    mb += wt * y;
                    saa += wt * x * x;
                    sbb += wt * y * y;
                    sab += wt * x * y;
                }
            }
            let l = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
            let cs = (2.0 * (sab - ma * mb) + c2) / ((saa - ma * ma) + (sbb - mb * mb) + c2);
            l_sum += l.max(0.0);
            cs_sum += cs.max(0.0);
        }
    }
    let count = ((h - 10) * (w - 10)) as f64;
    (l_sum / count, cs_sum / count)
}

fn half_mean(x: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = (x[2 * i * w + 2 * j]
                + x[2 * i * w + 2 * j + 1]
                + x[(2 * i + 1) * w + 2 * j]
                + x[(2 * i + 1) * w + 2 * j + 1])
                / 4.0;
        }
    }
    (out, oh, ow)
}

fn msssim_oracle(a: &Tensor, b: &Tensor, used: usize) -> f64 {
    let (c, h, w) = match *a.shape() {
        [c, h, w] => (c, h, w),
        [h, w] => (1, h, w),
        _ => panic!("oracle wants an image"),
    };
    let mut weights: Vec<f64> = MSSSIM_EXPONENTS[..used].to_vec();
    if used < MSSSIM_EXPONENTS.len() {
        let total: f64 = weights.iter().sum();
        for we in &mut weights {
            *we /= total;
        }
    }
    let mut total = 0.0;
    for ch in 0..c {
        let plane = h * w;
        let mut pa = a.data()[ch * plane..(ch + 1) * plane].to_vec();
        let mut pb = b.data()[ch * plane..(ch + 1) * plane].to_vec();
        let (mut ph, mut pw) = (h, w);
        let mut value = 1.0;
        for (lvl, weight) in weights.iter().enumerate() {
            let (l, cs) = ssim_terms_oracle(&pa, &pb, ph, pw);
            if lvl + 1 < used {
                value *= cs.powf(*weight);
                let (na, nh, nw) = half_mean(&pa, ph, pw);
                let (nb, _, _) = half_mean(&pb, ph, pw);
                pa = na;
                pb = nb;
                ph = nh;
                pw = nw;
            } else {
                value *= (l * cs).powf(*weight);
            }
        }
        total += value;
    }
    total / c as f64
}

#[test]
fn msssim_is_one_for_equal_images() {
    let mut rng = Rng::new(31);
    let img = rng.uniform_tensor(&[1, 32, 32], 0.0, 1.0).unwrap();
    let v = ms_ssim(&img, &img, 5).unwrap();
    assert_close(v, 1.0, 0.0, 1e-9, "self similarity");

    let flat = rng.uniform_tensor(&[16, 16], 0.0, 1.0).unwrap();
    let v2 = ms_ssim(&flat, &flat, 5).unwrap();
    assert_close(v2, 1.0, 0.0, 1e-9, "rank-2 self similarity");

    let ca = Tensor::full(&[1, 16, 16], 0.42).unwrap();
    let cb = Tensor::full(&[1, 16, 16], 0.42).unwrap();
    assert_close(ms_ssim(&ca, &cb, 5).unwrap(), 1.0, 0.0, 1e-12, "constant pair");
}

#[test]
fn msssim_levels_reduce_to_what_the_image_supports() {
    let sizes = [(16usize, 1usize), (22, 2), (32, 2), (44, 3), (88, 4)];
    for (side, want) in sizes {
        let img = Tensor::full(&[1, side, side], 0.3).unwrap();
        let r = ms_ssim_detailed(&img, &img, 5).unwrap();
        assert_eq!(r.levels_used, want, "levels for a {side}x{side} image");
    }
    let img = Tensor::full(&[1, 64, 64], 0.3).unwrap();
    assert_eq!(ms_ssim_detailed(&img, &img, 2).unwrap().levels_used, 2);
    let tiny = Tensor::full(&[1, 8, 8], 0.3).unwrap();
    assert!(matches!(ms_ssim(&tiny, &tiny, 5), Err(FlowError::Dim(_))));
    assert!(matches!(ms_ssim(&img, &img, 0), Err(FlowError::Contract(_))));
    assert!(matches!(ms_ssim(&img, &img, 6), Err(FlowError::Contract(_))));
}

#[test]
fn msssim_matches_an_independent_chain_oracle() {
    // Keep the amplitude low: inverting flips the sign of the covariance,
    // and the contrast stabilizer only keeps the terms interior when the
    // local variance does not swamp it.
    let mut rng = Rng::new(37);
    let a = rng.uniform_tensor(&[2, 48, 48], 0.48, 0.52).unwrap();
    let inverted = Tensor::from_fn(&[2, 48, 48], |e| 1.0 - a.data()[e]).unwrap();
    let r = ms_ssim_detailed(&a, &inverted, 5).unwrap();
    assert_eq!(r.levels_used, 3, "48x48 supports three halvings of the window");
    let want = msssim_oracle(&a, &inverted, 3);
    assert_close(r.value, want, 1e-8, 0.0, "msssim vs chain oracle");
    assert!(r.value > 0.0 && r.value < 1.0);

    let b = rng.uniform_tensor(&[1, 33, 47], 0.0, 1.0).unwrap();
    let c = rng.uniform_tensor(&[1, 33, 47], 0.0, 1.0).unwrap();
    let r2 = ms_ssim_detailed(&b, &c, 5).unwrap();
    let want2 = msssim_oracle(&b, &c, r2.levels_used);
    assert_close(r2.value, want2, 1e-8, 0.0, "odd-shaped msssim vs chain oracle");
}

#[test]
fn msssim_rejects_shape_mismatch() {
    let a = Tensor::full(&[1, 16, 16], 0.5).unwrap();
    let b = Tensor::full(&[1, 16, 32], 0.5).unwrap();
    assert!(matches!(ms_ssim(&a, &b, 5), Err(FlowError::Dim(_))));
    let v = Tensor::full(&[16], 0.5).unwrap();
    assert!(matches!(ms_ssim(&v, &v, 5), Err(FlowError::Dim(_))));
}

// --------------------------------------------------------- MS-SSIM reports

#[test]
fn report_on_identical_samples_is_one_with_zero_spread() {
    let mut rng = Rng::new(43);
    let img = rng.uniform_tensor(&[1, 16, 16], 0.0, 1.0).unwrap();
    let groups = vec![vec![img.clone(), img.clone()], vec![img.clone(), img.clone()]];
    let rep = msssim_report(&groups, 20, 5, &mut Rng::new(1)).unwrap();
    assert_eq!(rep.intra_mean, 1.0);
    assert_eq!(rep.intra_std, 0.0);
    assert_eq!(rep.inter_mean, 1.0);
    assert_eq!(rep.inter_std, 0.0);
    assert!(rep.excluded_classes.is_empty());
    assert_eq!(rep.levels_used, 1);
}

#[test]
fn report_separates_constant_classes() {
    let zeros = Tensor::full(&[1, 16, 16], 0.0).unwrap();
    let ones = Tensor::full(&[1, 16, 16], 1.0).unwrap();
    let groups = vec![
        vec![zeros.clone(), zeros.clone(), zeros.clone()],
        vec![ones.clone(), ones.clone(), ones.clone()],
    ];
    let rep = msssim_report(&groups, 30, 5, &mut Rng::new(2)).unwrap();
    assert_eq!(rep.intra_mean, 1.0);
    assert_eq!(rep.intra_std, 0.0);
    assert!(rep.inter_mean < 0.01, "constant 0 vs 1 pairs scored {}", rep.inter_mean);
    assert!(rep.inter_mean > 0.0);
}

#[test]
fn report_is_deterministic_and_flags_thin_classes() {
    let mut rng = Rng::new(47);
    let imgs: Vec<Tensor> =
        (0..6).map(|_| rng.uniform_tensor(&[1, 16, 16], 0.0, 1.0).unwrap()).collect();
    let groups = vec![
        vec![imgs[0].clone(), imgs[1].clone(), imgs[2].clone()],
        vec![imgs[3].clone()],
        vec![imgs[4].clone(), imgs[5].clone()],
    ];
    let a = msssim_report(&groups, 16, 5, &mut Rng::new(9)).unwrap();
    let b = msssim_report(&groups, 16, 5, &mut Rng::new(9)).unwrap();
    assert_eq!(a.intra_mean, b.intra_mean);
    assert_eq!(a.intra_std, b.intra_std);
    assert_eq!(a.inter_mean, b.inter_mean);
    assert_eq!(a.inter_std, b.inter_std);
    assert_eq!(a.excluded_classes, vec![1]);

    let lonely = vec![vec![imgs[0].clone(), imgs[1].clone()]];
    assert!(matches!(
        msssim_report(&lonely, 16, 5, &mut Rng::new(0)),
        Err(FlowError::Contract(_))
    ));
    let singletons = vec![vec![imgs[0].clone()], vec![imgs[1].clone()]];
    assert!(matches!(
        msssim_report(&singletons, 16, 5, &mut Rng::new(0)),
        Err(FlowError::Contract(_))
    ));
}

// ---------------------------------------------------------------- bootstrap

#[test]
fn bootstrap_of_a_constant_metric_collapses() {
    let mut rng = Rng::new(53);
    let real = cloud(&mut rng, 10, &[0.0, 0.0], 1.0);
    let fake = cloud(&mut rng, 10, &[0.0, 0.0], 1.0);
    let mut stub = |_: &[Vec<f64>], _: &[Vec<f64>]| Ok(42.0);
    let (point, lo, hi) =
        bootstrap_ci(&mut stub, &real, &fake, 60, 0.05, &mut Rng::new(0)).unwrap();
    assert_eq!(point, 42.0);
    assert_eq!(lo, 42.0);
    assert_eq!(hi, 42.0);
}

#[test]
fn bootstrap_is_deterministic_under_a_seed() {
    let mut rng = Rng::new(59);
    let real = cloud(&mut rng, 25, &[0.0, 0.0, 0.0], 1.0);
    let fake = cloud(&mut rng, 25, &[1.0, 0.0, 0.0], 1.0);
    let mut metric = |r: &[Vec<f64>], f: &[Vec<f64>]| fid_gaussian(r, f);
    let a = bootstrap_ci(&mut metric, &real, &fake, 64, 0.05, &mut Rng::new(4)).unwrap();
    let b = bootstrap_ci(&mut metric, &real, &fake, 64, 0.05, &mut Rng::new(4)).unwrap();
    assert_eq!(a, b);
    assert!(a.1 <= a.2, "interval is ordered");
}

#[test]
fn bootstrap_interval_is_tight_for_identical_sets() {
    let mut rng = Rng::new(61);
    let real = cloud(&mut rng, 50, &[0.0, 0.0, 0.0], 1.0);
    let shifted: Vec<Vec<f64>> =
        real.iter().map(|v| vec![v[0] + 8.0, v[1], v[2]]).collect();
    let mut metric = |r: &[Vec<f64>], f: &[Vec<f64>]| fid_gaussian(r, f);
    let (p_id, lo_id, hi_id) =
        bootstrap_ci(&mut metric, &real, &real, 64, 0.05, &mut Rng::new(0)).unwrap();
    let (p_sh, lo_sh, hi_sh) =
        bootstrap_ci(&mut metric, &real, &shifted, 64, 0.05, &mut Rng::new(0)).unwrap();
    assert!(p_id.abs() < 1e-6);
    assert!(lo_id >= 0.0, "fid resamples stay nonnegative");
    let width_id = hi_id - lo_id;
    let width_sh = hi_sh - lo_sh;
    assert!(
        width_id < 0.1 * width_sh,
        "identical-set interval [{lo_id},{hi_id}] vs shifted [{lo_sh},{hi_sh}]"
    );
    assert!(p_sh > 50.0, "shifted point estimate should be dominated by the mean term");
}

#[test]
fn bootstrap_validates_inputs_and_propagates_failures() {
    let real = vec![vec![0.0], vec![1.0], vec![2.0]];
    let fake = vec![vec![0.5], vec![1.5], vec![2.5]];
    let mut stub = |_: &[Vec<f64>], _: &[Vec<f64>]| Ok(1.0);
    assert!(matches!(
        bootstrap_ci(&mut stub, &real, &fake, 49, 0.05, &mut Rng::new(0)),
        Err(FlowError::Contract(_))
    ));
    assert!(matches!(
        bootstrap_ci(&mut stub, &real, &fake, 60, 0.0, &mut Rng::new(0)),
        Err(FlowError::Contract(_))
    ));
    let mut calls = 0usize;
    let mut flaky = |_: &[Vec<f64>], _: &[Vec<f64>]| {
        calls += 1;
        if calls == 1 {
            Ok(1.0)
        } else {
            Err(FlowError::Numerical("solver exploded".into()))
        }
    };
    let err = bootstrap_ci(&mut flaky, &real, &fake, 60, 0.05, &mut Rng::new(0)).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("bootstrap resample 0"), "got: {msg}");
}

// --------------------------------------------------------------- embeddings

#[test]
fn embeddings_are_deterministic_and_shaped() {
    let imgs: Vec<Tensor> = (0..4)
        .map(|i| Tensor::from_fn(&[1, 2, 2], |e| (i * 4 + e) as f64).unwrap())
        .collect();
    let flat = Embedding::IdentityFlatten.embed(&imgs).unwrap();
    assert_eq!(flat[2], vec![8.0, 9.0, 10.0, 11.0]);

    let proj = Embedding::RandomProjection { dim: 3, seed: 5 };
    let a = proj.embed(&imgs).unwrap();
    let b = proj.embed(&imgs).unwrap();
    assert_eq!(a, b);
    assert_eq!(a[0].len(), 3);
    let c = Embedding::RandomProjection { dim: 3, seed: 6 }.embed(&imgs).unwrap();
    assert_ne!(a, c);
    assert_eq!(proj.name(), "random-projection(dim=3,seed=5)");

    let empty: Vec<Tensor> = Vec::new();
    assert!(matches!(
        Embedding::IdentityFlatten.embed(&empty),
        Err(FlowError::Contract(_))
    ));
}

#[test]
fn pca_finds_the_dominant_axis() {
    let mut rng = Rng::new(67);
    let imgs: Vec<Tensor> = (0..40)
        .map(|_| {
            let t = rng.range(-2.0, 2.0);
            let noise = 0.05 * rng.normal();
            Tensor::new(vec![2], vec![t + noise, t - noise]).unwrap()
        })
        .collect();
    let basis = fit_pca(&imgs, 2).unwrap();
    let inv_sqrt2 = 1.0 / 2.0f64.sqrt();
    assert_close(basis.components[0][0], inv_sqrt2, 0.0, 0.05, "axis 0 x");
    assert_close(basis.components[0][1], inv_sqrt2, 0.0, 0.05, "axis 0 y");

    let emb = Embedding::Pca(basis.clone());
    let projected = emb.embed(&imgs).unwrap();
    let var = |k: usize| {
        let m: f64 = projected.iter().map(|v| v[k]).sum::<f64>() / projected.len() as f64;
        projected.iter().map(|v| (v[k] - m) * (v[k] - m)).sum::<f64>()
            / (projected.len() - 1) as f64
    };
    assert!(var(0) > var(1), "principal axis carries the variance");

    let mean_img = Tensor::new(vec![2], basis.mean.clone()).unwrap();
    let center = emb.embed(&[mean_img]).unwrap();
    assert_eq!(center[0], vec![0.0, 0.0]);

    let wrong = Tensor::full(&[3], 0.0).unwrap();
    assert!(matches!(emb.embed(&[wrong]), Err(FlowError::Dim(_))));
    assert!(matches!(fit_pca(&imgs, 0), Err(FlowError::Contract(_))));
    assert!(matches!(fit_pca(&imgs, 3), Err(FlowError::Contract(_))));
    assert!(matches!(fit_pca(&imgs[..1], 1), Err(FlowError::Contract(_))));
}

// ------------------------------------------------------------------ reports

#[test]
fn report_text_and_json_mirror_each_other() {
    let mut rep = MetricReport::new("identity-flatten".into(), 7, 100, 50);
    rep.push_scalar("fid", 1.25);
    rep.push_interval("kid", 0.5, 0.25, 0.75);
    rep.push_interval("odd", 2.0, 2.5, 3.0);
    for e in &rep.entries {
        if let Some((lo, hi)) = e.ci95 {
            assert!(lo <= e.value && e.value <= hi, "interval must contain the point");
        }
    }
    assert_eq!(
        rep.to_text(),
        "fid=1.25\nkid=0.5 ci95=0.25,0.75\nodd=2 ci95=2,3\n"
    );
    let v: serde_json::Value = serde_json::from_str(&rep.to_json()).unwrap();
    assert_eq!(v["embedding"], "identity-flatten");
    assert_eq!(v["seed"], 7);
    assert_eq!(v["real_count"], 100);
    assert_eq!(v["fake_count"], 50);
    assert_eq!(v["metrics"][0]["name"], "fid");
    assert_eq!(v["metrics"][0]["value"], 1.25);
    assert!(v["metrics"][0]["ci95"].is_null());
    assert_eq!(v["metrics"][1]["ci95"][0], 0.25);
    assert_eq!(v["metrics"][2]["ci95"][0], 2.0);
}

// ----------------------------------------------------------- property tests

fn paired_sets() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    (1usize..=3).prop_flat_map(|d| {
        let set = |n| prop::collection::vec(prop::collection::vec(-3.0..3.0f64, d), n);
        (set(6usize..=12), set(6usize..=12))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kid_and_prdc_match_brute_force((real, fake) in paired_sets()) {
        let kid = kid_poly(&real, &fake, 3).unwrap();
        prop_assert_eq!(kid, kid_oracle(&real, &fake, 3));

        let got = prdc(&real, &fake, 5).unwrap();
        let want = prdc_oracle(&real, &fake, 5);
        prop_assert_eq!(got, want);
        for v in [got.precision, got.recall, got.density, got.coverage] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn fid_and_kid_are_symmetric((real, fake) in paired_sets()) {
        let f_ab = fid_gaussian(&real, &fake).unwrap();
        let f_ba = fid_gaussian(&fake, &real).unwrap();
        prop_assert!((f_ab - f_ba).abs() < 1e-10, "fid asymmetry: {} vs {}", f_ab, f_ba);
        prop_assert!(f_ab >= 0.0);

        let k_ab = kid_poly(&real, &fake, 3).unwrap();
        let k_ba = kid_poly(&fake, &real, 3).unwrap();
        prop_assert!((k_ab - k_ba).abs() < 1e-10, "kid asymmetry: {} vs {}", k_ab, k_ba);
    }
}
