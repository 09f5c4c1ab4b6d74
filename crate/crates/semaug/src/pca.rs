//! PCA projection of embeddings and the two-CSV exporter that plots real
//! multi-domain embeddings and semantically augmented source embeddings in
//! the same principal-component basis.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Embedding;

/// Fitted mean and top-2 principal directions (rows, orthonormal, variance
/// descending, largest-magnitude entry positive).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PcaBasis {
    pub mean: Vec<f64>,
    pub components: [Vec<f64>; 2],
    pub explained_variance: [f64; 2],
}

const POWER_ITERS: usize = 10_000;
const POWER_TOL: f64 = 1e-14;

fn covariance(data: &[Vec<f64>], mean: &[f64]) -> Vec<f64> {
    let d = mean.len();
    let mut cov = vec![0.0; d * d];
    for row in data {
        for i in 0..d {
            let xi = row[i] - mean[i];
            for j in i..d {
                cov[i * d + j] += xi * (row[j] - mean[j]);
            }
        }
    }
    let inv = 1.0 / data.len() as f64;
    for i in 0..d {
        for j in i..d {
            cov[i * d + j] *= inv;
            cov[j * d + i] = cov[i * d + j];
        }
    }
    cov
}

fn power_iteration(cov: &[f64], d: usize) -> (f64, Vec<f64>) {
    // deterministic non-degenerate start: decaying ramp
    let mut v: Vec<f64> = (0..d).map(|i| 1.0 / (i + 1) as f64).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in v.iter_mut() {
        *x /= norm;
    }
    let mut lambda = 0.0;
    for _ in 0..POWER_ITERS {
        let mut next = vec![0.0; d];
        for i in 0..d {
            let row = &cov[i * d..(i + 1) * d];
            next[i] = row.iter().zip(&v).map(|(a, b)| a * b).sum();
        }
        let n = next.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n == 0.0 {
            return (0.0, v);
        }
        for x in next.iter_mut() {
            *x /= n;
        }
        let new_lambda: f64 = {
            let mut cv = vec![0.0; d];
            for i in 0..d {
                cv[i] = cov[i * d..(i + 1) * d]
                    .iter()
                    .zip(&next)
                    .map(|(a, b)| a * b)
                    .sum();
            }
            next.iter().zip(&cv).map(|(a, b)| a * b).sum()
        };
        let moved: f64 = next
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        v = next;
        lambda = new_lambda;
        if moved < POWER_TOL {
            break;
        }
    }
    (lambda, v)
}

fn fix_sign(v: &mut [f64]) {
    let mut best = 0usize;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        for x in v.iter_mut() {
            *x = -*x;
        }
    }
}

/// Fit the top-2 principal directions of mean-centered embeddings.
pub fn pca_fit<T: Scalar>(embeddings: &[Embedding<T>]) -> Result<PcaBasis> {
    if embeddings.len() < 3 {
        return Err(Error::invalid("pca needs at least 3 embeddings"));
    }
    let d = embeddings[0].dim();
    if d < 2 {
        return Err(Error::invalid("pca needs dimension >= 2"));
    }
    if embeddings.iter().any(|e| e.dim() != d) {
        return Err(Error::invalid("embedding dimensions differ"));
    }
    let data: Vec<Vec<f64>> = embeddings
        .iter()
        .map(|e| e.values.iter().map(|v| v.as_f64()).collect())
        .collect();
    let mut mean = vec![0.0; d];
    for row in &data {
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    for m in mean.iter_mut() {
        *m /= data.len() as f64;
    }
    let mut cov = covariance(&data, &mean);

    let (l1, mut v1) = power_iteration(&cov, d);
    if l1 <= 0.0 {
        return Err(Error::DegenerateSpectrum(
            "first principal value is zero (rank-0 data)".into(),
        ));
    }
    // deflate and repeat
    for i in 0..d {
        for j in 0..d {
            cov[i * d + j] -= l1 * v1[i] * v1[j];
        }
    }
    let (l2, mut v2) = power_iteration(&cov, d);
    if l2 <= l1 * 1e-12 {
        return Err(Error::DegenerateSpectrum(format!(
            "second principal value {l2:.3e} vanishes against the first {l1:.3e} (rank < 2)"
        )));
    }
    // re-orthogonalize against v1 for numerical safety
    let dot: f64 = v1.iter().zip(&v2).map(|(a, b)| a * b).sum();
    for (x2, x1) in v2.iter_mut().zip(&v1) {
        *x2 -= dot * x1;
    }
    let n2 = v2.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in v2.iter_mut() {
        *x /= n2;
    }
    fix_sign(&mut v1);
    fix_sign(&mut v2);
    Ok(PcaBasis {
        mean,
        components: [v1, v2],
        explained_variance: [l1, l2],
    })
}

/// Project embeddings into the fitted 2-D basis.
pub fn pca_project<T: Scalar>(
    embeddings: &[Embedding<T>],
    basis: &PcaBasis,
) -> Result<Vec<(f64, f64)>> {
    let d = basis.mean.len();
    embeddings
        .iter()
        .map(|e| {
            if e.dim() != d {
                return Err(Error::invalid(format!(
                    "embedding dim {} vs basis dim {d}",
                    e.dim()
                )));
            }
            let mut out = [0.0; 2];
            for (k, comp) in basis.components.iter().enumerate() {
                out[k] = e
                    .values
                    .iter()
                    .zip(&basis.mean)
                    .zip(comp)
                    .map(|((v, m), c)| (v.as_f64() - m) * c)
                    .sum();
            }
            Ok((out[0], out[1]))
        })
        .collect()
}

/// Files written by [`export_projection`].
#[derive(Debug, Clone)]
pub struct ProjectionOutput {
    pub basis: PcaBasis,
    pub real_rows: Vec<(String, f64, f64)>,
    pub augmented_rows: Vec<(String, f64, f64)>,
}

fn write_csv(path: &Path, rows: &[(String, f64, f64)]) -> Result<()> {
    let mut out = String::from("domain,pc1,pc2\n");
    for (domain, pc1, pc2) in rows {
        out.push_str(&format!("{domain},{pc1},{pc2}\n"));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Fit PCA on the real multi-domain embeddings only, project both sets with
/// the same basis, and write `real_projection.csv`, `augmented_projection.csv`
/// and `components.json` under `out_dir`.
pub fn export_projection<T: Scalar>(
    real: &[(String, Embedding<T>)],
    augmented: &[(String, Embedding<T>)],
    out_dir: impl AsRef<Path>,
) -> Result<ProjectionOutput> {
    let out_dir = out_dir.as_ref();
    let distinct: std::collections::BTreeSet<&str> =
        real.iter().map(|(d, _)| d.as_str()).collect();
    if distinct.len() < 2 {
        return Err(Error::invalid(
            "real embeddings must cover at least 2 domains",
        ));
    }
    let real_embs: Vec<Embedding<T>> = real.iter().map(|(_, e)| e.clone()).collect();
    let basis = pca_fit(&real_embs)?;
    let real_pts = pca_project(&real_embs, &basis)?;
    let aug_embs: Vec<Embedding<T>> = augmented.iter().map(|(_, e)| e.clone()).collect();
    let aug_pts = pca_project(&aug_embs, &basis)?;

    let real_rows: Vec<(String, f64, f64)> = real
        .iter()
        .zip(&real_pts)
        .map(|((d, _), &(x, y))| (d.clone(), x, y))
        .collect();
    let augmented_rows: Vec<(String, f64, f64)> = augmented
        .iter()
        .zip(&aug_pts)
        .map(|((d, _), &(x, y))| (d.clone(), x, y))
        .collect();

    std::fs::create_dir_all(out_dir)?;
    write_csv(&out_dir.join("real_projection.csv"), &real_rows)?;
    write_csv(&out_dir.join("augmented_projection.csv"), &augmented_rows)?;
    std::fs::write(
        out_dir.join("components.json"),
        serde_json::to_vec_pretty(&basis)?,
    )?;
    Ok(ProjectionOutput {
        basis,
        real_rows,
        augmented_rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emb(v: &[f64]) -> Embedding<f64> {
        Embedding::new(v.to_vec())
    }

    /// Brute-force covariance eigensolver via cyclic Jacobi rotations; fully
    /// independent of the power-iteration implementation path.
    fn jacobi_top2(data: &[Vec<f64>]) -> ([Vec<f64>; 2], [f64; 2]) {
        let d = data[0].len();
        let mut mean = vec![0.0; d];
        for row in data {
            for (m, x) in mean.iter_mut().zip(row) {
                *m += x;
            }
        }
        for m in mean.iter_mut() {
            *m /= data.len() as f64;
        }
        let mut a = covariance(data, &mean);
        let mut v = vec![0.0; d * d];
        for i in 0..d {
            v[i * d + i] = 1.0;
        }
        for _sweep in 0..100 {
            let mut off = 0.0;
            for p in 0..d {
                for q in (p + 1)..d {
                    off += a[p * d + q] * a[p * d + q];
                }
            }
            if off < 1e-24 {
                break;
            }
            for p in 0..d {
                for q in (p + 1)..d {
                    if a[p * d + q].abs() < 1e-30 {
                        continue;
                    }
                    let theta = (a[q * d + q] - a[p * d + p]) / (2.0 * a[p * d + q]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..d {
                        let akp = a[k * d + p];
                        let akq = a[k * d + q];
                        a[k * d + p] = c * akp - s * akq;
                        a[k * d + q] = s * akp + c * akq;
                    }
                    for k in 0..d {
                        let apk = a[p * d + k];
                        let aqk = a[q * d + k];
                        a[p * d + k] = c * apk - s * aqk;
                        a[q * d + k] = s * apk + c * aqk;
                    }
                    for k in 0..d {
                        let vkp = v[k * d + p];
                        let vkq = v[k * d + q];
                        v[k * d + p] = c * vkp - s * vkq;
                        v[k * d + q] = s * vkp + c * vkq;
                    }
                }
            }
        }
        let mut eigs: Vec<(f64, Vec<f64>)> = (0..d)
            .map(|i| (a[i * d + i], (0..d).map(|k| v[k * d + i]).collect()))
            .collect();
        eigs.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap());
        let mut top = [eigs[0].1.clone(), eigs[1].1.clone()];
        fix_sign(&mut top[0]);
        fix_sign(&mut top[1]);
        ([top[0].clone(), top[1].clone()], [eigs[0].0, eigs[1].0])
    }

    #[test]
    fn axis_aligned_data_gives_identity_components() {
        let embs = vec![
            emb(&[3.0, 0.1]),
            emb(&[-3.0, -0.1]),
            emb(&[2.0, 0.05]),
            emb(&[-2.0, -0.02]),
            emb(&[1.0, 0.08]),
        ];
        let basis = pca_fit(&embs).unwrap();
        assert!(basis.components[0][0].abs() > 0.99, "{:?}", basis.components[0]);
        assert!(basis.components[1][1].abs() > 0.99);
        // sign rule: dominant entries positive
        assert!(basis.components[0][0] > 0.0);
        assert!(basis.components[1][1] > 0.0);
        assert!(basis.explained_variance[0] >= basis.explained_variance[1]);
    }

    #[test]
    fn planar_dataset_matches_jacobi_oracle() {
        // points spread in a tilted plane in 5-D
        let mut embs = Vec::new();
        let mut data = Vec::new();
        for i in 0..12 {
            let t = i as f64 * 0.7;
            let u = (i as f64 * 1.3).sin() * 2.0;
            let row = vec![
                3.0 * t + 0.5 * u,
                -t + u,
                0.25 * t - 2.0 * u,
                0.1 * t + 0.3 * u,
                -0.7 * t + 1.1 * u,
            ];
            embs.push(emb(&row));
            data.push(row);
        }
        let basis = pca_fit(&embs).unwrap();
        let (oracle_comps, oracle_vals) = jacobi_top2(&data);
        for k in 0..2 {
            assert!(
                (basis.explained_variance[k] - oracle_vals[k]).abs()
                    <= 1e-8 * oracle_vals[k].max(1.0),
                "eigenvalue {k}"
            );
            for (a, b) in basis.components[k].iter().zip(&oracle_comps[k]) {
                assert!((a - b).abs() < 1e-8, "component {k}: {a} vs {b}");
            }
        }
        // orthonormality
        let dot: f64 = basis.components[0]
            .iter()
            .zip(&basis.components[1])
            .map(|(a, b)| a * b)
            .sum();
        assert!(dot.abs() < 1e-6);
    }

    #[test]
    fn projection_properties() {
        let embs = vec![
            emb(&[1.0, 2.0, 3.0]),
            emb(&[2.0, 1.0, -1.0]),
            emb(&[-1.5, 0.5, 2.0]),
            emb(&[0.3, -2.0, 1.0]),
            emb(&[4.0, 0.0, 0.5]),
        ];
        let basis = pca_fit(&embs).unwrap();
        // projecting the mean gives the origin
        let at_mean = pca_project(&[emb(&basis.mean.clone())], &basis).unwrap();
        assert!(at_mean[0].0.abs() < 1e-12 && at_mean[0].1.abs() < 1e-12);
        // variance along pc1 equals the top eigenvalue
        let pts = pca_project(&embs, &basis).unwrap();
        let mean1: f64 = pts.iter().map(|p| p.0).sum::<f64>() / pts.len() as f64;
        let var1: f64 =
            pts.iter().map(|p| (p.0 - mean1) * (p.0 - mean1)).sum::<f64>() / pts.len() as f64;
        assert!(
            (var1 - basis.explained_variance[0]).abs() < 1e-9,
            "{var1} vs {}",
            basis.explained_variance[0]
        );
        // linearity: project(a+b) - project(b) == project(a) - project(0)
        let a = emb(&[0.4, -0.2, 1.1]);
        let b = emb(&[-1.0, 0.7, 0.2]);
        let zero = emb(&[0.0, 0.0, 0.0]);
        let sum = emb(&[a.values[0] + b.values[0], a.values[1] + b.values[1], a.values[2] + b.values[2]]);
        let p = pca_project(&[sum, b, a, zero], &basis).unwrap();
        assert!((p[0].0 - p[1].0 - (p[2].0 - p[3].0)).abs() < 1e-12);
        assert!((p[0].1 - p[1].1 - (p[2].1 - p[3].1)).abs() < 1e-12);
    }

    #[test]
    fn degenerate_spectra_are_rejected() {
        // rank-1 data
        let embs = vec![emb(&[1.0, 2.0]), emb(&[2.0, 4.0]), emb(&[3.0, 6.0])];
        assert!(matches!(
            pca_fit(&embs),
            Err(Error::DegenerateSpectrum(_))
        ));
        assert!(pca_fit(&[emb(&[1.0, 0.0]), emb(&[0.0, 1.0])]).is_err());
    }

    #[test]
    fn export_writes_deterministic_csvs() {
        let dir = tempfile::tempdir().unwrap();
        let real = vec![
            ("clear".to_string(), emb(&[1.0, 0.0, 0.2])),
            ("clear".to_string(), emb(&[1.1, 0.1, 0.1])),
            ("fog".to_string(), emb(&[-1.0, 0.5, 0.0])),
            ("fog".to_string(), emb(&[-0.9, 0.4, 0.15])),
            ("night".to_string(), emb(&[0.0, -1.2, 0.3])),
        ];
        let augmented = vec![
            ("fog".to_string(), emb(&[-0.8, 0.45, 0.05])),
            ("night".to_string(), emb(&[0.1, -1.0, 0.2])),
        ];
        let out = export_projection(&real, &augmented, dir.path()).unwrap();
        assert_eq!(out.augmented_rows.len(), augmented.len());
        let real_csv = std::fs::read(dir.path().join("real_projection.csv")).unwrap();
        assert!(String::from_utf8_lossy(&real_csv).starts_with("domain,pc1,pc2\n"));
        // rerun is byte-identical
        let dir2 = tempfile::tempdir().unwrap();
        export_projection(&real, &augmented, dir2.path()).unwrap();
        assert_eq!(
            real_csv,
            std::fs::read(dir2.path().join("real_projection.csv")).unwrap()
        );
        assert_eq!(
            std::fs::read(dir.path().join("components.json")).unwrap(),
            std::fs::read(dir2.path().join("components.json")).unwrap()
        );
        // centroid recomputation from rows
        let clear_pts: Vec<(f64, f64)> = out
            .real_rows
            .iter()
            .filter(|(d, _, _)| d == "clear")
            .map(|(_, x, y)| (*x, *y))
            .collect();
        let cx: f64 = clear_pts.iter().map(|p| p.0).sum::<f64>() / clear_pts.len() as f64;
        let real_embs: Vec<Embedding<f64>> = real
            .iter()
            .filter(|(d, _)| d == "clear")
            .map(|(_, e)| e.clone())
            .collect();
        let projected = pca_project(&real_embs, &out.basis).unwrap();
        let cx2: f64 = projected.iter().map(|p| p.0).sum::<f64>() / projected.len() as f64;
        assert!((cx - cx2).abs() < 1e-12);
        // single-domain real set is rejected
        let single = vec![
            ("clear".to_string(), emb(&[1.0, 0.0, 0.0])),
            ("clear".to_string(), emb(&[0.0, 1.0, 0.0])),
            ("clear".to_string(), emb(&[0.0, 0.0, 1.0])),
        ];
        assert!(export_projection(&single, &augmented, dir.path()).is_err());
    }
}
