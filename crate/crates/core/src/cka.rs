//! Linear-kernel centered kernel alignment (CKA) between layer
//! representations of two models.
//!
//! The chain is: Gram matrix `K = X·Xᵀ` over a shared probe batch,
//! double centering `K₀ = H·K·H`, the HSIC₀ statistic
//! `vec(K₀)·vec(L₀)/(m−1)²`, and finally the normalized score
//! `hsic(K,L)/√(hsic(K,K)·hsic(L,L))`. A full teacher×student grid of
//! scores becomes a [`SimilarityTable`]; averaging the mapped diagonal
//! pairs gives one global similarity index per model pair.
//!
//! Constant representations make the normalizer vanish, so they are an
//! error ([`Error::DegenerateRepresentation`]) rather than a silent zero
//! that would drag down the global average.

use crate::autodiff::kernels;
use crate::model::infer::LayerTap;
use crate::{Error, Result};

/// Self-HSIC at or below this is treated as a constant representation.
pub const DEGENERATE_EPS: f64 = 1e-12;

/// Gram matrix of the linear kernel: `K = X·Xᵀ`, m×m, from an m×d
/// representation matrix. Symmetric and positive semidefinite.
pub fn gram_linear(x: &[f64], m: usize, d: usize) -> Result<Vec<f64>> {
    if m < 2 {
        return Err(Error::Contract(format!("gram_linear: need at least 2 probe rows, got {m}")));
    }
    if x.len() != m * d || d == 0 {
        return Err(Error::Contract(format!(
            "gram_linear: {} values do not form a {m}x{d} matrix",
            x.len()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "gram_linear" });
    }
    Ok(kernels::matmul_nt(x, x, m, d, m))
}

/// Double-center a square matrix: `K₀ = H·K·H` with `H = I − (1/m)·11ᵀ`.
/// Every row and column of the result sums to zero.
pub fn center_gram(k: &[f64], m: usize) -> Result<Vec<f64>> {
    if k.len() != m * m || m == 0 {
        return Err(Error::Contract(format!(
            "center_gram: {} values do not form a {m}x{m} matrix",
            k.len()
        )));
    }
    let inv_m = 1.0 / m as f64;
    let mut row_mean = vec![0.0; m];
    let mut col_mean = vec![0.0; m];
    let mut grand = 0.0;
    for r in 0..m {
        for c in 0..m {
            let v = k[r * m + c];
            row_mean[r] += v;
            col_mean[c] += v;
            grand += v;
        }
    }
    for v in row_mean.iter_mut().chain(col_mean.iter_mut()) {
        *v *= inv_m;
    }
    grand *= inv_m * inv_m;
    let mut out = vec![0.0; m * m];
    for r in 0..m {
        for c in 0..m {
            out[r * m + c] = k[r * m + c] - row_mean[r] - col_mean[c] + grand;
        }
    }
    Ok(out)
}

/// HSIC₀ statistic of two m×m Gram matrices: the centered matrices are
/// flattened and dotted, then scaled by 1/(m−1)².
pub fn hsic0(k: &[f64], l: &[f64], m: usize) -> Result<f64> {
    if k.len() != l.len() {
        return Err(Error::Contract(format!(
            "hsic0: gram sizes differ ({} vs {})",
            k.len(),
            l.len()
        )));
    }
    if m < 2 {
        return Err(Error::Contract(format!("hsic0: need at least 2 probe rows, got {m}")));
    }
    let k0 = center_gram(k, m)?;
    let l0 = center_gram(l, m)?;
    let denom = ((m - 1) * (m - 1)) as f64;
    Ok(kernels::dot(&k0, &l0) / denom)
}

/// CKA score between an m×dx and an m×dy representation of the same
/// probe batch. In [0,1]; invariant to isotropic scaling and to
/// orthogonal rotation of either feature space.
pub fn cka(x: &[f64], y: &[f64], m: usize, dx: usize, dy: usize) -> Result<f64> {
    let k = gram_linear(x, m, dx)?;
    let l = gram_linear(y, m, dy)?;
    let kk = hsic0(&k, &k, m)?;
    let ll = hsic0(&l, &l, m)?;
    if kk <= DEGENERATE_EPS || ll <= DEGENERATE_EPS {
        return Err(Error::DegenerateRepresentation);
    }
    Ok(hsic0(&k, &l, m)? / (kk * ll).sqrt())
}

fn cka_taps(a: &LayerTap, b: &LayerTap) -> Result<f64> {
    if a.rows != b.rows {
        return Err(Error::Contract(format!(
            "layer {} has {} probe rows but layer {} has {}; both models must see the same probe batch",
            a.name, a.rows, b.name, b.rows
        )));
    }
    cka(&a.data, &b.data, a.rows, a.cols, b.cols)
}

/// Split a tap name like `dec.3` into its stack prefix and layer number.
fn parse_tap_name(name: &str) -> Result<(&str, usize)> {
    let bad = || Error::Contract(format!("tap name {name:?} is not of the form <stack>.<index>"));
    let (prefix, num) = name.rsplit_once('.').ok_or_else(bad)?;
    let idx: usize = num.parse().map_err(|_| bad())?;
    Ok((prefix, idx))
}

/// Positions (in tap order) of one stack's taps, sorted by layer number.
fn stack_positions(taps: &[LayerTap], stack: &str) -> Result<Vec<usize>> {
    let mut found: Vec<(usize, usize)> = Vec::new();
    for (pos, tap) in taps.iter().enumerate() {
        let (prefix, layer) = parse_tap_name(&tap.name)?;
        if prefix == stack {
            found.push((layer, pos));
        }
    }
    found.sort_unstable();
    Ok(found.into_iter().map(|(_, pos)| pos).collect())
}

/// Full grid of CKA scores between two models' layer taps, with the
/// diagonal layer pairing. Rows follow the first model's taps, columns
/// the second's.
#[derive(Debug, Clone)]
pub struct SimilarityTable {
    pub row_layers: Vec<String>,
    pub col_layers: Vec<String>,
    /// Row-major grid, `row_layers.len() × col_layers.len()`.
    pub scores: Vec<f64>,
    /// One `(row, col)` pair per column-model layer: same-index pairing
    /// within each stack when depths match, proportional otherwise.
    pub mapping: Vec<(usize, usize)>,
}

impl SimilarityTable {
    pub fn score(&self, row: usize, col: usize) -> f64 {
        self.scores[row * self.col_layers.len() + col]
    }

    /// Mean CKA over the mapped layer pairs — the scalar similarity
    /// index reported per model pair.
    pub fn global_index(&self) -> Result<f64> {
        if self.mapping.is_empty() {
            return Err(Error::Contract("similarity table has no mapped layer pairs".to_string()));
        }
        let sum: f64 = self.mapping.iter().map(|&(r, c)| self.score(r, c)).sum();
        Ok(sum / self.mapping.len() as f64)
    }

    /// CSV grid: one row per row-model layer, one column per col-model
    /// layer.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer");
        for name in &self.col_layers {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for (r, name) in self.row_layers.iter().enumerate() {
            out.push_str(name);
            for c in 0..self.col_layers.len() {
                out.push_str(&format!(",{}", self.score(r, c)));
            }
            out.push('\n');
        }
        out
    }
}

/// Score every layer of `rows_model` against every layer of `cols_model`
/// and record the diagonal pairing. Both tap sets must come from the
/// same probe batch (same examples, same order).
pub fn layerwise_table(
    rows_model: &[LayerTap],
    cols_model: &[LayerTap],
) -> Result<SimilarityTable> {
    if rows_model.is_empty() || cols_model.is_empty() {
        return Err(Error::Contract("layerwise_table: both models need at least one tap".to_string()));
    }
    let n_cols = cols_model.len();
    let mut scores = Vec::with_capacity(rows_model.len() * n_cols);
    for a in rows_model {
        for b in cols_model {
            scores.push(cka_taps(a, b)?);
        }
    }

    let mut mapping = Vec::new();
    for stack in ["enc", "dec"] {
        let row_stack = stack_positions(rows_model, stack)?;
        let col_stack = stack_positions(cols_model, stack)?;
        if col_stack.is_empty() {
            continue;
        }
        if row_stack.is_empty() {
            return Err(Error::Contract(format!(
                "column model has {stack} layers but the row model has none to pair them with"
            )));
        }
        let depth_r = row_stack.len();
        let depth_c = col_stack.len();
        for (j, &col_pos) in col_stack.iter().enumerate() {
            let scaled = (j * (depth_r - 1)) as f64 / depth_c.saturating_sub(1).max(1) as f64;
            mapping.push((row_stack[scaled.round() as usize], col_pos));
        }
    }

    Ok(SimilarityTable {
        row_layers: rows_model.iter().map(|t| t.name.clone()).collect(),
        col_layers: cols_model.iter().map(|t| t.name.clone()).collect(),
        scores,
        mapping,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn randn(rng: &mut ChaCha20Rng, n: usize) -> Vec<f64> {
        use rand_distr::{Distribution, StandardNormal};
        (0..n).map(|_| StandardNormal.sample(rng)).collect()
    }

    /// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations —
    /// an oracle independent of the production code path.
    fn jacobi_eigenvalues(sym: &[f64], n: usize) -> Vec<f64> {
        let mut a = sym.to_vec();
        for _ in 0..200 {
            let off: f64 = (0..n)
                .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
                .map(|(i, j)| a[i * n + j] * a[i * n + j])
                .sum();
            if off < 1e-26 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    let apq = a[p * n + q];
                    if apq.abs() < 1e-18 {
                        continue;
                    }
                    let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let (akp, akq) = (a[k * n + p], a[k * n + q]);
                        a[k * n + p] = c * akp - s * akq;
                        a[k * n + q] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                        a[p * n + k] = c * apk - s * aqk;
                        a[q * n + k] = s * apk + c * aqk;
                    }
                }
            }
        }
        (0..n).map(|i| a[i * n + i]).collect()
    }

    #[test]
    fn gram_of_orthonormal_rows_is_the_identity() {
        let k = gram_linear(&[1.0, 0.0, 0.0, 1.0], 2, 2).unwrap();
        assert_eq!(k, vec![1.0, 0.0, 0.0, 1.0]);
        let k = gram_linear(&[1.0, 2.0, 3.0, 4.0], 2, 2).unwrap();
        assert_eq!(k, vec![5.0, 11.0, 11.0, 25.0]);
    }

    #[test]
    fn gram_is_symmetric_and_positive_semidefinite() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        for _ in 0..10 {
            let (m, d) = (rng.gen_range(2..7), rng.gen_range(1..5));
            let x = randn(&mut rng, m * d);
            let k = gram_linear(&x, m, d).unwrap();
            for r in 0..m {
                for c in 0..m {
                    assert_eq!(k[r * m + c], k[c * m + r], "asymmetric at ({r},{c})");
                }
            }
            for ev in jacobi_eigenvalues(&k, m) {
                assert!(ev >= -1e-10, "negative eigenvalue {ev}");
            }
        }
    }

    #[test]
    fn gram_rejects_bad_inputs() {
        assert!(gram_linear(&[1.0, 2.0], 1, 2).is_err(), "single probe row");
        assert!(gram_linear(&[1.0, 2.0, 3.0], 2, 2).is_err(), "length mismatch");
        assert!(matches!(
            gram_linear(&[1.0, f64::NAN, 0.0, 1.0], 2, 2),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn centering_kills_constant_representations() {
        let x = [3.0, 5.0, 3.0, 5.0, 3.0, 5.0]; // three identical rows
        let k = gram_linear(&x, 3, 2).unwrap();
        let k0 = center_gram(&k, 3).unwrap();
        assert!(k0.iter().all(|v| v.abs() < 1e-12), "{k0:?}");
    }

    #[test]
    fn centering_zeroes_row_sums_and_is_idempotent() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let x = randn(&mut rng, 3 * 4);
        let k = gram_linear(&x, 3, 4).unwrap();
        let k0 = center_gram(&k, 3).unwrap();
        for r in 0..3 {
            let row: f64 = (0..3).map(|c| k0[r * 3 + c]).sum();
            let col: f64 = (0..3).map(|c| k0[c * 3 + r]).sum();
            assert!(row.abs() < 1e-12 && col.abs() < 1e-12, "row {r}: {row} / {col}");
        }
        let k00 = center_gram(&k0, 3).unwrap();
        for (a, b) in k0.iter().zip(&k00) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(center_gram(&k, 2).is_err(), "non-square must be rejected");
    }

    #[test]
    fn hsic_matches_an_explicit_matrix_product_oracle() {
        // Oracle path: materialize H, compute HKH and HLH with naive
        // triple loops, flatten, dot, divide.
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        let m = 3;
        let k = gram_linear(&randn(&mut rng, m * 2), m, 2).unwrap();
        let l = gram_linear(&randn(&mut rng, m * 5), m, 5).unwrap();

        let mut h = vec![-1.0 / m as f64; m * m];
        for i in 0..m {
            h[i * m + i] += 1.0;
        }
        let mul = |a: &[f64], b: &[f64]| {
            let mut c = vec![0.0; m * m];
            for i in 0..m {
                for j in 0..m {
                    for p in 0..m {
                        c[i * m + j] += a[i * m + p] * b[p * m + j];
                    }
                }
            }
            c
        };
        let k0 = mul(&mul(&h, &k), &h);
        let l0 = mul(&mul(&h, &l), &h);
        let dot: f64 = k0.iter().zip(&l0).map(|(a, b)| a * b).sum();
        let expected = dot / ((m - 1) * (m - 1)) as f64;

        let got = hsic0(&k, &l, m).unwrap();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn hsic_is_symmetric_with_nonnegative_self_terms() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let k = gram_linear(&randn(&mut rng, 4 * 3), 4, 3).unwrap();
        let l = gram_linear(&randn(&mut rng, 4 * 2), 4, 2).unwrap();
        assert_eq!(hsic0(&k, &l, 4).unwrap(), hsic0(&l, &k, 4).unwrap());
        assert!(hsic0(&k, &k, 4).unwrap() >= 0.0);

        let constant = gram_linear(&[2.0; 4], 4, 1).unwrap();
        assert!(hsic0(&k, &constant, 4).unwrap().abs() < 1e-12);
        assert!(hsic0(&k, &l[..4], 4).is_err(), "size mismatch must be rejected");
    }

    #[test]
    fn cka_matches_the_frozen_oracle_value() {
        // Worked out ahead of time with exact rational arithmetic:
        // hsic(K,L) = 5/36, hsic(K,K) = 5/18, hsic(L,L) = 1/9,
        // so the score is sqrt(10)/4.
        let x = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let y = [1.0, 0.0, 1.0];
        let got = cka(&x, &y, 3, 2, 1).unwrap();
        assert!((got - 0.7905694150420949).abs() < 1e-10, "{got}");
    }

    #[test]
    fn cka_self_similarity_is_one() {
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        for _ in 0..20 {
            let (m, d) = (rng.gen_range(3..17), rng.gen_range(1..9));
            let x = randn(&mut rng, m * d);
            let got = cka(&x, &x, m, d, d).unwrap();
            assert!((got - 1.0).abs() < 1e-9, "m={m} d={d}: {got}");
        }
    }

    #[test]
    fn cka_is_invariant_to_isotropic_scaling() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let x = randn(&mut rng, 5 * 3);
        let y = randn(&mut rng, 5 * 2);
        let base = cka(&x, &y, 5, 3, 2).unwrap();
        let scaled: Vec<f64> = x.iter().map(|v| 3.7 * v).collect();
        assert!((cka(&scaled, &x, 5, 3, 3).unwrap() - 1.0).abs() < 1e-9);
        for c in [1e-3, 42.0, -2.5] {
            let cy: Vec<f64> = y.iter().map(|v| c * v).collect();
            let got = cka(&x, &cy, 5, 3, 2).unwrap();
            assert!((got - base).abs() < 1e-9, "c={c}: {got} vs {base}");
        }
    }

    #[test]
    fn cka_is_invariant_to_orthogonal_rotation() {
        let mut rng = ChaCha20Rng::seed_from_u64(29);
        let (m, d) = (6, 4);
        let x = randn(&mut rng, m * d);
        let y = randn(&mut rng, m * 3);
        let base = cka(&x, &y, m, d, 3).unwrap();

        // Random orthogonal d×d matrix by Gram–Schmidt.
        let mut q = vec![0.0; d * d];
        for r in 0..d {
            let mut v = randn(&mut rng, d);
            for prev in 0..r {
                let proj: f64 = (0..d).map(|c| v[c] * q[prev * d + c]).sum();
                for c in 0..d {
                    v[c] -= proj * q[prev * d + c];
                }
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            for c in 0..d {
                q[r * d + c] = v[c] / norm;
            }
        }
        let mut xq = vec![0.0; m * d];
        for r in 0..m {
            for c in 0..d {
                xq[r * d + c] = (0..d).map(|p| x[r * d + p] * q[p * d + c]).sum();
            }
        }
        let got = cka(&xq, &y, m, d, 3).unwrap();
        assert!((got - base).abs() < 1e-8, "{got} vs {base}");
    }

    #[test]
    fn cka_is_invariant_to_shared_probe_permutation() {
        let mut rng = ChaCha20Rng::seed_from_u64(41);
        let m = 5;
        let x = randn(&mut rng, m * 3);
        let y = randn(&mut rng, m * 2);
        let base = cka(&x, &y, m, 3, 2).unwrap();
        let perm = [3, 0, 4, 1, 2];
        let mut xp = vec![0.0; m * 3];
        let mut yp = vec![0.0; m * 2];
        for (to, &from) in perm.iter().enumerate() {
            xp[to * 3..to * 3 + 3].copy_from_slice(&x[from * 3..from * 3 + 3]);
            yp[to * 2..to * 2 + 2].copy_from_slice(&y[from * 2..from * 2 + 2]);
        }
        let got = cka(&xp, &yp, m, 3, 2).unwrap();
        assert!((got - base).abs() < 1e-10, "{got} vs {base}");
    }

    #[test]
    fn cka_rejects_degenerate_constant_representations() {
        let constant = [1.0, 2.0, 1.0, 2.0, 1.0, 2.0];
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let y = randn(&mut rng, 3 * 2);
        assert!(matches!(
            cka(&constant, &y, 3, 2, 2),
            Err(Error::DegenerateRepresentation)
        ));
        assert!(matches!(
            cka(&y, &constant, 3, 2, 2),
            Err(Error::DegenerateRepresentation)
        ));
    }

    fn tap(name: &str, rows: usize, cols: usize, seed: u64) -> LayerTap {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        LayerTap { name: name.to_string(), rows, cols, data: randn(&mut rng, rows * cols) }
    }

    #[test]
    fn identical_tap_sets_score_one_on_every_mapped_pair() {
        let taps = vec![tap("enc.0", 6, 4, 1), tap("enc.1", 6, 4, 2), tap("dec.0", 6, 3, 3)];
        let table = layerwise_table(&taps, &taps).unwrap();
        assert_eq!(table.scores.len(), 9);
        assert_eq!(table.mapping, vec![(0, 0), (1, 1), (2, 2)]);
        for &(r, c) in &table.mapping {
            assert!((table.score(r, c) - 1.0).abs() < 1e-9);
        }
        assert!((table.global_index().unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn unequal_decoder_depths_pair_proportionally() {
        let deep = vec![
            tap("enc.0", 5, 4, 1),
            tap("dec.0", 5, 4, 2),
            tap("dec.1", 5, 4, 3),
            tap("dec.2", 5, 4, 4),
            tap("dec.3", 5, 4, 5),
        ];
        let shallow = vec![tap("enc.0", 5, 3, 6), tap("dec.0", 5, 3, 7), tap("dec.1", 5, 3, 8)];
        let table = layerwise_table(&deep, &shallow).unwrap();
        assert_eq!(table.scores.len(), 5 * 3);
        // enc.0↔enc.0, then shallow dec.0→deep dec.0 and dec.1→dec.3.
        assert_eq!(table.mapping, vec![(0, 0), (1, 1), (4, 2)]);

        // A single-layer decoder pairs with the deep stack's first layer.
        let single = vec![tap("enc.0", 5, 3, 9), tap("dec.0", 5, 3, 10)];
        let table = layerwise_table(&deep, &single).unwrap();
        assert_eq!(table.mapping, vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn global_index_is_the_mean_of_mapped_scores() {
        let table = SimilarityTable {
            row_layers: vec!["enc.0".into(), "dec.0".into()],
            col_layers: vec!["enc.0".into(), "dec.0".into()],
            scores: vec![1.0, 0.2, 0.3, 0.5],
            mapping: vec![(0, 0), (1, 1)],
        };
        assert_eq!(table.global_index().unwrap(), 0.75);
        let empty = SimilarityTable {
            row_layers: vec![],
            col_layers: vec![],
            scores: vec![],
            mapping: vec![],
        };
        assert!(empty.global_index().is_err());
    }

    #[test]
    fn table_rejects_mismatched_probe_batches() {
        let a = vec![tap("enc.0", 6, 4, 1)];
        let b = vec![tap("enc.0", 5, 4, 2)];
        assert!(layerwise_table(&a, &b).is_err());
        let no_counterpart = vec![tap("dec.0", 6, 4, 3)];
        let enc_only = vec![tap("enc.0", 6, 4, 4)];
        assert!(layerwise_table(&enc_only, &no_counterpart).is_err());
    }

    #[test]
    fn csv_grid_is_rows_by_teacher_and_columns_by_student() {
        let rows = vec![tap("enc.0", 4, 3, 1), tap("dec.0", 4, 3, 2)];
        let cols = vec![tap("enc.0", 4, 2, 3), tap("dec.0", 4, 2, 4)];
        let table = layerwise_table(&rows, &cols).unwrap();
        let csv = table.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "layer,enc.0,dec.0");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("enc.0,"));
        assert!(lines[2].starts_with("dec.0,"));
        assert_eq!(lines[1].split(',').count(), 3);
    }
}
