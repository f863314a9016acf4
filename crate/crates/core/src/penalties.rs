//! Abundance smoothness, endmember and variability penalties.

use nalgebra::{DMatrix, DVector};

use crate::error::{ensure_shape, PlmmError, Result};

/// Neighbour directions, in the block order of `H = [H_← | H_→ | H_↑ | H_↓]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Left,
    Right,
    Up,
    Down,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Left, Direction::Right, Direction::Up, Direction::Down];
}

/// One non-zero of `H`: `(row, column, value)` with `column` in `0..4N`.
pub type Triplet = (usize, usize, f64);

/// Sparse first-order difference operator over the 4-neighbourhood.
///
/// Column `n + bN` of block `b` holds `+1` at row `n` and `-1` at the row of
/// the neighbour of pixel `n` in direction `b`; it is empty when that
/// neighbour falls outside the image (no wrap-around).
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothnessOperator {
    width: usize,
    height: usize,
    neighbors: Vec<[Option<usize>; 4]>,
    blocks: [Vec<Triplet>; 4],
}

impl SmoothnessOperator {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(PlmmError::Config(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        let n = width * height;
        let mut neighbors = Vec::with_capacity(n);
        let mut blocks: [Vec<Triplet>; 4] = Default::default();
        for p in 0..n {
            let (i, j) = (p / width, p % width);
            let nb = [
                (j > 0).then(|| p - 1),
                (j + 1 < width).then(|| p + 1),
                (i > 0).then(|| p - width),
                (i + 1 < height).then(|| p + width),
            ];
            for (b, q) in nb.iter().enumerate() {
                if let Some(q) = *q {
                    let col = p + b * n;
                    blocks[b].push((p, col, 1.0));
                    blocks[b].push((q, col, -1.0));
                }
            }
            neighbors.push(nb);
        }
        Ok(Self {
            width,
            height,
            neighbors,
            blocks,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn neighbors(&self, n: usize) -> &[Option<usize>; 4] {
        &self.neighbors[n]
    }

    pub fn block(&self, dir: Direction) -> &[Triplet] {
        &self.blocks[dir as usize]
    }

    pub fn triplets(&self) -> impl Iterator<Item = &Triplet> {
        self.blocks.iter().flatten()
    }

    /// Dense `N × 4N` copy of `H`. Intended for tests on small images.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.pixels();
        let mut h = DMatrix::zeros(n, 4 * n);
        for &(r, c, v) in self.triplets() {
            h[(r, c)] = v;
        }
        h
    }

    /// Quadratic coefficient `cA_n = Σ_b h²_{n,n+bN}`: the number of
    /// in-image neighbours of pixel `n`.
    pub fn quadratic_coefficient(&self, n: usize) -> f64 {
        self.neighbors[n].iter().filter(|q| q.is_some()).count() as f64
    }

    /// Returns `(cA_n, c_n)` such that the difference columns centred on
    /// pixel `n` contribute `½ cA_n ‖a_n‖² + c_nᵀ a_n` (plus a constant) to
    /// `½‖AH‖²_F`, with the neighbour abundances read from `a`.
    pub fn smoothness_terms(&self, a: &DMatrix<f64>, n: usize) -> (f64, DVector<f64>) {
        let mut c = DVector::zeros(a.nrows());
        let mut ca = 0.0;
        for q in self.neighbors[n].iter().flatten() {
            // h_{n,col} = 1, h_{q,col} = -1
            ca += 1.0;
            c -= a.column(*q);
        }
        (ca, c)
    }

    /// `Φ(A) = ½‖AH‖²_F`.
    pub fn phi_value(&self, a: &DMatrix<f64>) -> Result<f64> {
        ensure_shape(a.ncols() == self.pixels(), || {
            format!("abundances have {} columns, operator has {} pixels", a.ncols(), self.pixels())
        })?;
        let mut total = 0.0;
        for block in &self.blocks {
            // each column holds exactly two entries, stored consecutively
            for pair in block.chunks_exact(2) {
                let (r0, _, v0) = pair[0];
                let (r1, _, v1) = pair[1];
                total += (a.column(r0) * v0 + a.column(r1) * v1).norm_squared();
            }
        }
        Ok(0.5 * total)
    }

    /// `∇Φ(A) = A H Hᵀ`.
    pub fn phi_gradient(&self, a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        ensure_shape(a.ncols() == self.pixels(), || "abundance/operator size mismatch".into())?;
        let mut g = DMatrix::zeros(a.nrows(), a.ncols());
        for block in &self.blocks {
            for pair in block.chunks_exact(2) {
                let (r0, _, v0) = pair[0];
                let (r1, _, v1) = pair[1];
                let col = a.column(r0) * v0 + a.column(r1) * v1;
                g.column_mut(r0).axpy(v0, &col, 1.0);
                g.column_mut(r1).axpy(v1, &col, 1.0);
            }
        }
        Ok(g)
    }

    /// Two-colouring of the pixel grid (checkerboard). Pixels of the same
    /// colour are never 4-neighbours.
    pub fn color(&self, n: usize) -> usize {
        (n / self.width + n % self.width) % 2
    }
}

/// Precomputed `S_G = Σ_k G_k G_kᵀ`, `G_k = −I_K + e_k 1_Kᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct MutualDistOperator {
    s_g: DMatrix<f64>,
}

impl MutualDistOperator {
    pub fn new(k: usize) -> Self {
        let mut s_g = DMatrix::zeros(k, k);
        for idx in 0..k {
            let g = g_matrix(k, idx);
            s_g += &g * g.transpose();
        }
        Self { s_g }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.s_g
    }
}

/// `G_k = −I_K + e_k 1_Kᵀ`.
pub fn g_matrix(k: usize, idx: usize) -> DMatrix<f64> {
    let mut g = -DMatrix::<f64>::identity(k, k);
    for j in 0..k {
        g[(idx, j)] += 1.0;
    }
    g
}

/// `½‖M − M0‖²_F`.
pub fn psi_dist_value(m: &DMatrix<f64>, m0: &DMatrix<f64>) -> Result<f64> {
    ensure_shape(m.shape() == m0.shape(), || {
        format!("endmembers {:?} vs reference {:?}", m.shape(), m0.shape())
    })?;
    Ok(0.5 * (m - m0).norm_squared())
}

pub fn psi_dist_gradient(m: &DMatrix<f64>, m0: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    ensure_shape(m.shape() == m0.shape(), || "endmember/reference size mismatch".into())?;
    Ok(m - m0)
}

/// `½ Σ_k ‖M G_k‖²_F`; column `j` of `M G_k` is `m_k − m_j`.
pub fn psi_mutual_value(m: &DMatrix<f64>) -> f64 {
    let k = m.ncols();
    let mut total = 0.0;
    for a in 0..k {
        for b in 0..k {
            if a != b {
                total += (m.column(a) - m.column(b)).norm_squared();
            }
        }
    }
    0.5 * total
}

/// `∇ψ_mutual(M) = M S_G`.
pub fn psi_mutual_gradient(m: &DMatrix<f64>) -> DMatrix<f64> {
    m * MutualDistOperator::new(m.ncols()).matrix()
}

/// `½ Σ_n ‖dM_n‖²_F`.
pub fn upsilon_value(dm: &[DMatrix<f64>]) -> f64 {
    0.5 * dm.iter().map(|d| d.norm_squared()).sum::<f64>()
}

pub fn upsilon_gradient(dm: &[DMatrix<f64>]) -> Vec<DMatrix<f64>> {
    dm.to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| rng.random::<f64>())
    }

    /// `Φ` from the dense block matrices written out entry by entry.
    fn phi_dense_blocks(width: usize, height: usize, a: &DMatrix<f64>) -> f64 {
        let n = width * height;
        let mut h = DMatrix::zeros(n, 4 * n);
        for r in 0..height {
            for c in 0..width {
                let p = r * width + c;
                if c > 0 {
                    h[(p, p)] = 1.0;
                    h[(p - 1, p)] = -1.0;
                }
                if c + 1 < width {
                    h[(p, n + p)] = 1.0;
                    h[(p + 1, n + p)] = -1.0;
                }
            }
        }
        // H_up = [0_{N×W} | H1], H_down = [-H1 | 0], H1 column j: -1 at j, +1 at j+W
        for j in 0..n.saturating_sub(width) {
            h[(j, 2 * n + width + j)] = -1.0;
            h[(j + width, 2 * n + width + j)] = 1.0;
            h[(j, 3 * n + j)] = 1.0;
            h[(j + width, 3 * n + j)] = -1.0;
        }
        0.5 * (a * h).norm_squared()
    }

    #[test]
    fn two_pixel_phi_is_squared_difference() {
        let op = SmoothnessOperator::new(2, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let a = random(3, 2, &mut rng);
            let diff = (a.column(0) - a.column(1)).norm_squared();
            assert!((op.phi_value(&a).unwrap() - diff).abs() < 1e-12);
        }
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        assert!((op.phi_value(&a).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn single_pixel_has_no_differences() {
        let op = SmoothnessOperator::new(1, 1).unwrap();
        assert!(op.to_dense().iter().all(|v| *v == 0.0));
        let a = DMatrix::from_element(3, 1, 0.7);
        assert_eq!(op.phi_value(&a).unwrap(), 0.0);
        let (ca, c) = op.smoothness_terms(&a, 0);
        assert_eq!(ca, 0.0);
        assert!(c.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn operator_matches_dense_block_formulas() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &(w, h) in &[(1, 1), (2, 1), (1, 3), (3, 3), (4, 2), (5, 3)] {
            let op = SmoothnessOperator::new(w, h).unwrap();
            let a = random(3, w * h, &mut rng);
            let expected = phi_dense_blocks(w, h, &a);
            assert!((op.phi_value(&a).unwrap() - expected).abs() < 1e-12, "{w}x{h}");
            let dense = op.to_dense();
            assert!((0.5 * (&a * &dense).norm_squared() - expected).abs() < 1e-12);
            for col in dense.column_iter() {
                let nz: Vec<f64> = col.iter().cloned().filter(|v| *v != 0.0).collect();
                assert!(nz.is_empty() || nz.len() == 2);
                assert!(nz.iter().all(|v| *v == 1.0 || *v == -1.0));
            }
        }
    }

    #[test]
    fn smoothness_terms_two_pixels() {
        let op = SmoothnessOperator::new(2, 1).unwrap();
        let a = DMatrix::from_row_slice(2, 2, &[0.3, 0.6, 0.7, 0.4]);
        let (ca, c) = op.smoothness_terms(&a, 0);
        assert_eq!(ca, 1.0);
        assert_eq!(c, -a.column(1).clone_owned());
    }

    #[test]
    fn interior_pixel_has_four_neighbours() {
        let op = SmoothnessOperator::new(3, 3).unwrap();
        assert_eq!(op.quadratic_coefficient(4), 4.0);
        assert_eq!(op.quadratic_coefficient(0), 2.0);
        assert_eq!(op.quadratic_coefficient(1), 3.0);
    }

    #[test]
    fn quadratic_coefficient_matches_centered_columns() {
        let op = SmoothnessOperator::new(4, 3).unwrap();
        let h = op.to_dense();
        let n = op.pixels();
        for p in 0..n {
            let ca: f64 = (0..4).map(|b| h[(p, p + b * n)].powi(2)).sum();
            assert_eq!(ca, op.quadratic_coefficient(p));
        }
    }

    #[test]
    fn separable_decomposition_holds() {
        // ½‖AH‖² = Σ_n (½ cA_n ‖a_n‖² + c_nᵀ a_n) + ½ Σ_n Σ_{q ∈ nbrs(n)} ‖a_q‖²
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(w, h) in &[(3, 3), (4, 2), (1, 5), (6, 4)] {
            let op = SmoothnessOperator::new(w, h).unwrap();
            let a = random(3, w * h, &mut rng);
            let mut sum = 0.0;
            for n in 0..w * h {
                let (ca, c) = op.smoothness_terms(&a, n);
                sum += 0.5 * ca * a.column(n).norm_squared() + c.dot(&a.column(n));
                for q in op.neighbors(n).iter().flatten() {
                    sum += 0.5 * a.column(*q).norm_squared();
                }
            }
            assert!((op.phi_value(&a).unwrap() - sum).abs() < 1e-10);
        }
    }

    #[test]
    fn checkerboard_colors_separate_neighbours() {
        let op = SmoothnessOperator::new(5, 4).unwrap();
        for n in 0..op.pixels() {
            for q in op.neighbors(n).iter().flatten() {
                assert_ne!(op.color(n), op.color(*q));
            }
        }
    }

    #[test]
    fn mutual_operator_closed_form() {
        for k in 1..6 {
            let op = MutualDistOperator::new(k);
            let expected = (DMatrix::<f64>::identity(k, k) * k as f64
                - DMatrix::from_element(k, k, 1.0))
                * 2.0;
            assert!((op.matrix() - expected).norm() < 1e-12);
        }
        let op = MutualDistOperator::new(2);
        assert_eq!(op.matrix().as_slice(), &[2.0, -2.0, -2.0, 2.0]);
    }

    #[test]
    fn mutual_operator_elementwise() {
        let k = 4;
        let mut expected = DMatrix::<f64>::zeros(k, k);
        for idx in 0..k {
            for r in 0..k {
                for c in 0..k {
                    let mut acc = 0.0;
                    for j in 0..k {
                        let g = |row: usize, col: usize| {
                            (if row == col { -1.0 } else { 0.0 }) + (if row == idx { 1.0 } else { 0.0 })
                        };
                        acc += g(r, j) * g(c, j);
                    }
                    expected[(r, c)] += acc;
                }
            }
        }
        assert!((MutualDistOperator::new(k).matrix() - expected).norm() < 1e-12);
        let e = MutualDistOperator::new(k).matrix().clone().symmetric_eigenvalues();
        assert!(e.iter().all(|v| *v > -1e-12));
    }

    #[test]
    fn psi_values() {
        let m = DMatrix::from_column_slice(3, 2, &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        assert_eq!(psi_mutual_value(&m), 0.0);
        let m0 = DMatrix::zeros(3, 2);
        let mut m1 = DMatrix::zeros(3, 2);
        m1[(1, 1)] = 3.0;
        assert_eq!(psi_dist_value(&m1, &m0).unwrap(), 4.5);
        assert_eq!(upsilon_value(&[DMatrix::zeros(3, 2), DMatrix::zeros(3, 2)]), 0.0);
        assert!(psi_dist_value(&m1, &DMatrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn psi_mutual_matches_pairwise_loop_and_g_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = random(6, 3, &mut rng);
        let mut oracle = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    for l in 0..6 {
                        oracle += (m[(l, i)] - m[(l, j)]).powi(2);
                    }
                }
            }
        }
        oracle *= 0.5;
        assert!((psi_mutual_value(&m) - oracle).abs() < 1e-12);
        let g_form: f64 = (0..3).map(|k| (&m * g_matrix(3, k)).norm_squared()).sum::<f64>() * 0.5;
        assert!((g_form - oracle).abs() < 1e-12);
    }

    #[test]
    fn psi_mutual_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = random(5, 4, &mut rng);
        let perm = [2, 0, 3, 1];
        let mp = DMatrix::from_fn(5, 4, |r, c| m[(r, perm[c])]);
        assert!((psi_mutual_value(&m) - psi_mutual_value(&mp)).abs() < 1e-12);
    }

    #[test]
    fn phi_gradient_is_a_h_ht() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let op = SmoothnessOperator::new(3, 2).unwrap();
        let a = random(2, 6, &mut rng);
        let h = op.to_dense();
        let expected = &a * &h * h.transpose();
        assert!((op.phi_gradient(&a).unwrap() - expected).norm() < 1e-12);
    }
}
