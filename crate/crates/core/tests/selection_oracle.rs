//! `select_top_k` against a brute-force oracle built on a cyclic Jacobi
//! eigensolver, independent of the library's linear algebra.

use chameleon_core::history::{select_top_k, HistoryItem, UserHistory};
use chameleon_core::linalg::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Eigenpairs of a symmetric matrix, eigenvalues descending.
#[allow(clippy::needless_range_loop)]
fn jacobi_eigen(mut a: Vec<Vec<f64>>) -> Vec<(f64, Vec<f64>)> {
    let n = a.len();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vkp, vkq) = (row[p], row[q]);
                    row[p] = c * vkp - s * vkq;
                    row[q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut pairs: Vec<(f64, Vec<f64>)> = (0..n).map(|j| (a[j][j], v.iter().map(|r| r[j]).collect())).collect();
    pairs.sort_by(|x, y| y.0.total_cmp(&x.0));
    pairs
}

/// Indices of the top `k` rows by norm of their projection onto the
/// leading `comps` covariance eigenvectors.
fn oracle(rows: &[Vec<f64>], k: usize, comps: usize) -> Vec<usize> {
    let (n, d) = (rows.len(), rows[0].len());
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let centred: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().zip(&mean).map(|(x, m)| x - m).collect()).collect();
    let denom = (n.max(2) - 1) as f64;
    let cov: Vec<Vec<f64>> = (0..d)
        .map(|a| (0..d).map(|b| centred.iter().map(|r| r[a] * r[b]).sum::<f64>() / denom).collect())
        .collect();
    let eig = jacobi_eigen(cov);
    let norms: Vec<f64> = centred
        .iter()
        .map(|r| {
            eig.iter()
                .take(comps)
                .map(|(_, v)| r.iter().zip(v).map(|(x, y)| x * y).sum::<f64>().powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let scale = norms.iter().fold(0.0f64, |m, v| m.max(*v));
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| {
        if (norms[i] - norms[j]).abs() <= 1e-9 * scale {
            i.cmp(&j)
        } else {
            norms[j].total_cmp(&norms[i])
        }
    });
    idx.truncate(k.min(n));
    idx
}

#[test]
fn matches_brute_force_oracle() {
    let mut checked = 0;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for n in 1..=8 {
            for k in 1..=3 {
                let d = rng.random_range(2..=6);
                let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect()).collect();
                let items = (0..n).map(|i| HistoryItem::new(format!("h{i}"), format!("item {i}"), None)).collect();
                let history = UserHistory::new("u", items).unwrap();
                let got = select_top_k(&history, &Matrix::from_rows(&rows).unwrap(), k, None).unwrap();
                let want = oracle(&rows, k, k.min(n).min(d));
                let want_ids: Vec<String> = want.iter().map(|i| format!("h{i}")).collect();
                let got_ids: Vec<String> = got.items.iter().map(|it| it.id.clone()).collect();
                assert_eq!(got_ids, want_ids, "seed {seed}, n {n}, k {k}, d {d}");
                assert_eq!(got.source_indices, want);
                checked += 1;
            }
        }
    }
    assert_eq!(checked, 20 * 8 * 3);
}

#[test]
fn single_item_is_kept() {
    let history = UserHistory::new("u", vec![HistoryItem::new("only", "text", None)]).unwrap();
    let got = select_top_k(&history, &Matrix::from_rows(&[vec![0.3, -1.0]]).unwrap(), 10, None).unwrap();
    assert_eq!(got.items.len(), 1);
    assert_eq!(got.projection_norms.as_slice(), &[0.0]);
}
