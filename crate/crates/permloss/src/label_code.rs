//! The matrix label code `ρ_1, …, ρ_k` and the margin map `D`.
//!
//! `D = [−I | 1]` sends a score vector `v ∈ R^k` to its relative margins
//! `z = (v_k − v_1, …, v_k − v_{k−1})`. Each class `y` gets an involution
//! `ρ_y` on margin space: `ρ_k = I`, and for `y < k`, `ρ_y` is the identity
//! with its `y`-th column replaced by all `−1`s, so that
//!
//! ```text
//!     [ρ_y z]_j = z_j − z_y   (j ≠ y),        [ρ_y z]_y = −z_y.
//! ```
//!
//! The structural facts used everywhere else in the crate live here as
//! machine-checkable identities: `ρ_y² = I`, `D·T_y = ρ_y·D` (where `T_y`
//! swaps classes `y` and `k`), the induced action `M_σ = D S_σ D⁺` being an
//! anti-homomorphism with `M_{τ_{(y,k)}} = ρ_y`, and the rank-one
//! subtraction formulas for differences of code matrices. Everything is
//! integer-exact except the `D⁺` products, which carry only the rounding of
//! `1/k`. [`LabelCode::verify_identities`] bundles all of them into one
//! report.

use crate::{Error, Result};
use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

/// Tolerance for the floating-point identities (`D D⁺ = I`, `M_σ` facts).
pub const FLOAT_IDENTITY_TOL: f64 = 1e-12;

// ===================================================================
// Structured O(k) applications (no matrices materialized)
// ===================================================================

/// Apply `ρ_y` to a margin vector `z ∈ R^(k−1)`; `k = z.len() + 1`.
///
/// Panics if `y` is not in `1..=k` (caller bug, not data).
pub fn rho_apply(y: usize, z: &[f64]) -> Vec<f64> {
    let k = z.len() + 1;
    assert!(y >= 1 && y <= k, "class label {y} out of range 1..={k}");
    if y == k {
        return z.to_vec();
    }
    let zy = z[y - 1];
    let mut out = Vec::with_capacity(z.len());
    for (j, &zj) in z.iter().enumerate() {
        out.push(if j == y - 1 { -zy } else { zj - zy });
    }
    out
}

/// Apply `ρ_yᵀ` to a vector `w ∈ R^(k−1)`; `k = w.len() + 1`.
///
/// `[ρ_yᵀ w]_j = w_j` for `j ≠ y` and `[ρ_yᵀ w]_y = −Σ_l w_l`.
pub fn rho_transpose_apply(y: usize, w: &[f64]) -> Vec<f64> {
    let k = w.len() + 1;
    assert!(y >= 1 && y <= k, "class label {y} out of range 1..={k}");
    let mut out = w.to_vec();
    if y < k {
        out[y - 1] = -w.iter().sum::<f64>();
    }
    out
}

/// Margin map: `D v = (v_k − v_1, …, v_k − v_{k−1})`.
pub fn d_apply(v: &[f64]) -> Vec<f64> {
    let k = v.len();
    assert!(k >= 2, "need at least two classes, got {k}");
    let vk = v[k - 1];
    v[..k - 1].iter().map(|&vj| vk - vj).collect()
}

/// Adjoint of the margin map: `Dᵀ u = (−u_1, …, −u_{k−1}, Σ_j u_j)`.
pub fn d_transpose_apply(u: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = u.iter().map(|&x| -x).collect();
    out.push(u.iter().sum());
    out
}

/// Class-`y` view of the relative margins of a score vector:
/// `ρ_y D v`. This is the quantity every template consumes.
pub fn relative_margin(y: usize, v: &[f64]) -> Vec<f64> {
    rho_apply(y, &d_apply(v))
}

// ===================================================================
// Permutations of [k]
// ===================================================================

/// A permutation `σ` of `{1, …, k}`, stored 0-based internally.
///
/// The matrix convention is `[S_σ v]_j = v_{σ(j)}` (rows of `S_σ` are
/// `e_{σ(j)}ᵀ`), and composition is `(σ ∘ σ′)(j) = σ(σ′(j))`, which makes
/// `σ ↦ S_σ` an anti-homomorphism: `S_{σσ′} = S_{σ′} S_σ`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Permutation {
    map: Vec<usize>, // map[j] = σ(j+1) − 1
}

impl Permutation {
    pub fn identity(k: usize) -> Self {
        Permutation {
            map: (0..k).collect(),
        }
    }

    /// The transposition swapping classes `a` and `b` (1-based).
    pub fn transposition(k: usize, a: usize, b: usize) -> Result<Self> {
        Error::check_class(a, k)?;
        Error::check_class(b, k)?;
        let mut map: Vec<usize> = (0..k).collect();
        map.swap(a - 1, b - 1);
        Ok(Permutation { map })
    }

    /// Build from 1-based images `(σ(1), …, σ(k))`, validating bijectivity.
    pub fn from_one_based(images: &[usize]) -> Result<Self> {
        let k = images.len();
        if k == 0 {
            return Err(Error::InvalidArity { min: 1, got: 0 });
        }
        let mut seen = vec![false; k];
        let mut map = Vec::with_capacity(k);
        for &im in images {
            Error::check_class(im, k)?;
            if seen[im - 1] {
                return Err(Error::InvalidProbability(format!(
                    "permutation image {im} repeated"
                )));
            }
            seen[im - 1] = true;
            map.push(im - 1);
        }
        Ok(Permutation { map })
    }

    /// Uniformly random permutation (Fisher–Yates).
    pub fn random<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Self {
        let mut map: Vec<usize> = (0..k).collect();
        for j in (1..k).rev() {
            let i = rng.gen_range(0..=j);
            map.swap(i, j);
        }
        Permutation { map }
    }

    pub fn k(&self) -> usize {
        self.map.len()
    }

    /// 1-based image `σ(j)`.
    pub fn image(&self, j: usize) -> usize {
        self.map[j - 1] + 1
    }

    /// Apply `S_σ` to a vector: `out_j = v_{σ(j)}`.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.map.len(), "length mismatch");
        self.map.iter().map(|&i| v[i]).collect()
    }

    /// Composition `self ∘ other`: `(self ∘ other)(j) = self(other(j))`.
    pub fn compose(&self, other: &Permutation) -> Permutation {
        assert_eq!(self.k(), other.k(), "arity mismatch");
        Permutation {
            map: other.map.iter().map(|&j| self.map[j]).collect(),
        }
    }

    pub fn inverse(&self) -> Permutation {
        let mut map = vec![0usize; self.map.len()];
        for (j, &i) in self.map.iter().enumerate() {
            map[i] = j;
        }
        Permutation { map }
    }

    /// The permutation matrix `S_σ` with rows `e_{σ(j)}ᵀ`.
    pub fn matrix(&self) -> DMatrix<i64> {
        let k = self.k();
        DMatrix::from_fn(k, k, |r, c| i64::from(self.map[r] == c))
    }
}

// ===================================================================
// The label code itself
// ===================================================================

/// Explicit matrices of the label code at a fixed arity `k`, plus the
/// pseudoinverse `D⁺` needed to push permutations of class space down to
/// margin space.
#[derive(Clone, Debug)]
pub struct LabelCode {
    k: usize,
    rho: Vec<DMatrix<i64>>, // rho[y-1] = ρ_y, (k−1)×(k−1)
    d: DMatrix<i64>,        // (k−1)×k
    d_pinv: DMatrix<f64>,   // k×(k−1)
}

impl LabelCode {
    pub fn build(k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::InvalidArity { min: 2, got: k });
        }
        let n = k - 1;
        let mut rho = Vec::with_capacity(k);
        for y in 1..=k {
            let m = DMatrix::from_fn(n, n, |r, c| {
                if y <= n && c == y - 1 {
                    -1
                } else {
                    i64::from(r == c)
                }
            });
            rho.push(m);
        }
        let d = DMatrix::from_fn(n, k, |r, c| {
            if c == k - 1 {
                1
            } else {
                -i64::from(r == c)
            }
        });
        // D⁺ = Dᵀ(DDᵀ)⁻¹ in closed form: (DDᵀ)⁻¹ = I − 11ᵀ/k, giving
        // D⁺[j,i] = 1/k − δ_{ij} for j < k and D⁺[k−1,i] = 1/k.
        let inv_k = 1.0 / k as f64;
        let d_pinv = DMatrix::from_fn(k, n, |r, c| {
            if r == k - 1 {
                inv_k
            } else {
                inv_k - f64::from(u8::from(r == c))
            }
        });
        Ok(LabelCode { k, rho, d, d_pinv })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// The code matrix `ρ_y` (integer entries).
    pub fn rho(&self, y: usize) -> Result<&DMatrix<i64>> {
        Error::check_class(y, self.k)?;
        Ok(&self.rho[y - 1])
    }

    pub fn d(&self) -> &DMatrix<i64> {
        &self.d
    }

    pub fn d_pinv(&self) -> &DMatrix<f64> {
        &self.d_pinv
    }

    /// `ρ_y z` through the O(k) structured path.
    pub fn apply_rho(&self, y: usize, z: &[f64]) -> Result<Vec<f64>> {
        Error::check_class(y, self.k)?;
        Error::check_len(z.len(), self.k - 1)?;
        Ok(rho_apply(y, z))
    }

    /// `D v` through the O(k) structured path.
    pub fn apply_d(&self, v: &[f64]) -> Result<Vec<f64>> {
        Error::check_len(v.len(), self.k)?;
        Ok(d_apply(v))
    }

    /// `ρ_y D v`.
    pub fn relative_margin(&self, y: usize, v: &[f64]) -> Result<Vec<f64>> {
        Error::check_class(y, self.k)?;
        Error::check_len(v.len(), self.k)?;
        Ok(relative_margin(y, v))
    }

    /// The class-space transposition matrix `T_y = S_{τ_{(y,k)}}` (k×k).
    pub fn class_swap_matrix(&self, y: usize) -> Result<DMatrix<i64>> {
        Error::check_class(y, self.k)?;
        Ok(Permutation::transposition(self.k, y, self.k)?.matrix())
    }

    /// The induced action on margin space: `M_σ = D S_σ D⁺`.
    pub fn m_sigma(&self, sigma: &Permutation) -> Result<DMatrix<f64>> {
        Error::check_len(sigma.k(), self.k)?;
        let d_f = self.d.map(|x| x as f64);
        let s_f = sigma.matrix().map(|x| x as f64);
        Ok(&d_f * s_f * &self.d_pinv)
    }

    /// Run every identity check; see [`IdentityReport`].
    pub fn verify_identities(&self, trials: usize, seed: u64) -> IdentityReport {
        verify_identities(self, trials, seed)
    }
}

// ===================================================================
// Identity verification
// ===================================================================

/// Outcome of one identity family.
#[derive(Clone, Debug, Serialize)]
pub struct IdentityCheck {
    pub name: String,
    /// Number of (matrix or sampled) instances exercised.
    pub cases: usize,
    /// Largest absolute deviation seen across all instances.
    pub max_abs_dev: f64,
    pub pass: bool,
}

/// Report from [`LabelCode::verify_identities`]. Integer identities must
/// hold exactly; the `D⁺`-mediated ones within [`FLOAT_IDENTITY_TOL`].
#[derive(Clone, Debug, Serialize)]
pub struct IdentityReport {
    pub k: usize,
    pub trials: usize,
    pub seed: u64,
    pub all_pass: bool,
    pub checks: Vec<IdentityCheck>,
}

fn int_dev(a: &DMatrix<i64>, b: &DMatrix<i64>) -> f64 {
    (a - b).iter().map(|&x| (x as f64).abs()).fold(0.0, f64::max)
}

fn float_dev(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).iter().map(|x| x.abs()).fold(0.0, f64::max)
}

fn verify_identities(code: &LabelCode, trials: usize, seed: u64) -> IdentityReport {
    let k = code.k;
    let n = k - 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();

    let eye_n = DMatrix::<i64>::identity(n, n);

    // --- ρ_y² = I (exact) ---
    {
        let mut dev: f64 = 0.0;
        for y in 1..=k {
            let r = &code.rho[y - 1];
            dev = dev.max(int_dev(&(r * r), &eye_n));
        }
        checks.push(IdentityCheck {
            name: "rho_involution".into(),
            cases: k,
            max_abs_dev: dev,
            pass: dev == 0.0,
        });
    }

    // --- D T_y = ρ_y D (exact) ---
    {
        let mut dev: f64 = 0.0;
        for y in 1..=k {
            let t_y = code.class_swap_matrix(y).expect("y in range");
            let lhs = &code.d * t_y;
            let rhs = &code.rho[y - 1] * &code.d;
            dev = dev.max(int_dev(&lhs, &rhs));
        }
        checks.push(IdentityCheck {
            name: "swap_with_last_conjugates_margin_map".into(),
            cases: k,
            max_abs_dev: dev,
            pass: dev == 0.0,
        });
    }

    // --- T^{(k−1)}_{(y,j)} = ρ_y ρ_j ρ_y for distinct y, j ∈ [k−1] (exact) ---
    {
        let mut dev: f64 = 0.0;
        let mut cases = 0;
        for y in 1..=n {
            for j in 1..=n {
                if y == j {
                    continue;
                }
                let t = Permutation::transposition(n, y, j)
                    .expect("indices in range")
                    .matrix();
                let ry = &code.rho[y - 1];
                let rj = &code.rho[j - 1];
                dev = dev.max(int_dev(&t, &(ry * rj * ry)));
                cases += 1;
            }
        }
        checks.push(IdentityCheck {
            name: "margin_transposition_conjugation".into(),
            cases,
            max_abs_dev: dev,
            pass: dev == 0.0,
        });
    }

    // --- Rank-one subtraction formulas (exact) ---
    {
        let mut dev: f64 = 0.0;
        let mut cases = 0;
        let one_plus = |j: usize| {
            DMatrix::<i64>::from_fn(n, 1, |r, _| 1 + i64::from(r == j - 1))
        };
        let e_row = |j: usize| DMatrix::<i64>::from_fn(1, n, |_, c| i64::from(c == j - 1));
        for y in 1..=n {
            for j in 1..=n {
                if y == j {
                    continue;
                }
                // ρ_y − T_{(y,j)} ρ_j = (1 + e_j)(e_j − e_y)ᵀ
                let t = Permutation::transposition(n, y, j)
                    .expect("indices in range")
                    .matrix();
                let lhs = &code.rho[y - 1] - t * &code.rho[j - 1];
                let rhs = one_plus(j) * (e_row(j) - e_row(y));
                dev = dev.max(int_dev(&lhs, &rhs));
                cases += 1;
            }
        }
        for j in 1..=n {
            // ρ_k − ρ_j = (1 + e_j) e_jᵀ
            let lhs = &code.rho[k - 1] - &code.rho[j - 1];
            let rhs = one_plus(j) * e_row(j);
            dev = dev.max(int_dev(&lhs, &rhs));
            // ρ_j − ρ_k = −(1 + e_j) e_jᵀ
            let lhs2 = &code.rho[j - 1] - &code.rho[k - 1];
            let rhs2 = -(one_plus(j) * e_row(j));
            dev = dev.max(int_dev(&lhs2, &rhs2));
            cases += 2;
        }
        checks.push(IdentityCheck {
            name: "rank_one_subtraction".into(),
            cases,
            max_abs_dev: dev,
            pass: dev == 0.0,
        });
    }

    // --- D D⁺ = I (float) ---
    {
        let d_f = code.d.map(|x| x as f64);
        let dev = float_dev(&(&d_f * &code.d_pinv), &DMatrix::identity(n, n));
        checks.push(IdentityCheck {
            name: "margin_map_right_inverse".into(),
            cases: 1,
            max_abs_dev: dev,
            pass: dev <= FLOAT_IDENTITY_TOL,
        });
    }

    // --- M_{τ_{(y,k)}} = ρ_y (float) ---
    {
        let mut dev: f64 = 0.0;
        for y in 1..=n {
            let tau = Permutation::transposition(k, y, k).expect("indices in range");
            let m = code.m_sigma(&tau).expect("matching arity");
            dev = dev.max(float_dev(&m, &code.rho[y - 1].map(|x| x as f64)));
        }
        checks.push(IdentityCheck {
            name: "induced_action_on_swaps".into(),
            cases: n,
            max_abs_dev: dev,
            pass: dev <= FLOAT_IDENTITY_TOL,
        });
    }

    // --- M_{σσ′} = M_{σ′} M_σ on random pairs (float) ---
    {
        let mut dev: f64 = 0.0;
        for _ in 0..trials {
            let s1 = Permutation::random(k, &mut rng);
            let s2 = Permutation::random(k, &mut rng);
            let m_comp = code.m_sigma(&s1.compose(&s2)).expect("matching arity");
            let m1 = code.m_sigma(&s1).expect("matching arity");
            let m2 = code.m_sigma(&s2).expect("matching arity");
            dev = dev.max(float_dev(&m_comp, &(m2 * m1)));
        }
        checks.push(IdentityCheck {
            name: "induced_action_antihomomorphism".into(),
            cases: trials,
            max_abs_dev: dev,
            pass: dev <= FLOAT_IDENTITY_TOL,
        });
    }

    // --- Structured O(k) paths agree with the explicit matrices (float) ---
    {
        let mut dev: f64 = 0.0;
        for _ in 0..trials {
            let z: Vec<f64> = (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect();
            let v: Vec<f64> = (0..k).map(|_| rng.gen_range(-10.0..10.0)).collect();
            let y = rng.gen_range(1..=k);
            let zv = DMatrix::from_column_slice(n, 1, &z);
            let wv = DMatrix::from_column_slice(n, 1, &z);
            let rho_f = code.rho[y - 1].map(|x| x as f64);
            let fast = rho_apply(y, &z);
            let slow = &rho_f * zv;
            for (a, b) in fast.iter().zip(slow.iter()) {
                dev = dev.max((a - b).abs());
            }
            let fast_t = rho_transpose_apply(y, &z);
            let slow_t = rho_f.transpose() * wv;
            for (a, b) in fast_t.iter().zip(slow_t.iter()) {
                dev = dev.max((a - b).abs());
            }
            let d_f = code.d.map(|x| x as f64);
            let fast_d = d_apply(&v);
            let slow_d = &d_f * DMatrix::from_column_slice(k, 1, &v);
            for (a, b) in fast_d.iter().zip(slow_d.iter()) {
                dev = dev.max((a - b).abs());
            }
            let fast_dt = d_transpose_apply(&z);
            let slow_dt = d_f.transpose() * DMatrix::from_column_slice(n, 1, &z);
            for (a, b) in fast_dt.iter().zip(slow_dt.iter()) {
                dev = dev.max((a - b).abs());
            }
        }
        checks.push(IdentityCheck {
            name: "structured_ops_match_matrices".into(),
            cases: trials,
            max_abs_dev: dev,
            pass: dev <= FLOAT_IDENTITY_TOL,
        });
    }

    let all_pass = checks.iter().all(|c| c.pass);
    IdentityReport {
        k,
        trials,
        seed,
        all_pass,
        checks,
    }
}

// ===================================================================
// Tests
// ===================================================================

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn binary_code_is_signs() {
        let code = LabelCode::build(2).unwrap();
        assert_eq!(code.rho(1).unwrap()[(0, 0)], -1, "ρ_1 = [−1] at k=2");
        assert_eq!(code.rho(2).unwrap()[(0, 0)], 1, "ρ_2 = [+1] at k=2");
    }

    #[test]
    fn rejects_degenerate_arity() {
        assert!(LabelCode::build(0).is_err());
        assert!(LabelCode::build(1).is_err());
    }

    #[test]
    fn margins_of_k3_example() {
        // v = (2, 0, 1): z = (1−2, 1−0) = (−1, 1).
        let z = d_apply(&[2.0, 0.0, 1.0]);
        assert_eq!(z, vec![-1.0, 1.0]);
        // Class-1 view: (−z_1, z_2 − z_1) = (1, 2).
        assert_eq!(rho_apply(1, &z), vec![1.0, 2.0]);
        // Class-3 view is the identity.
        assert_eq!(rho_apply(3, &z), z);
    }

    #[test]
    fn rho_transpose_sums_into_own_slot() {
        let w = [0.25, -1.5, 3.0];
        let out = rho_transpose_apply(2, &w);
        assert_eq!(out[0], 0.25);
        assert_eq!(out[1], -(0.25 - 1.5 + 3.0));
        assert_eq!(out[2], 3.0);
        // y = k leaves the vector alone.
        assert_eq!(rho_transpose_apply(4, &w), w.to_vec());
    }

    #[test]
    fn identities_hold_for_small_arities() {
        for k in 2..=7 {
            let code = LabelCode::build(k).unwrap();
            let report = code.verify_identities(50, 7);
            assert!(
                report.all_pass,
                "identity failure at k={k}: {:?}",
                report
                    .checks
                    .iter()
                    .filter(|c| !c.pass)
                    .map(|c| (&c.name, c.max_abs_dev))
                    .collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn composition_convention_is_anti() {
        // σ = (1→2→3→1) as images: σ(1)=2, σ(2)=3, σ(3)=1.
        let s = Permutation::from_one_based(&[2, 3, 1]).unwrap();
        let t = Permutation::transposition(3, 1, 2).unwrap();
        let v = [10.0, 20.0, 30.0];
        // S_σ S_τ v must equal S_{τσ} v.
        let lhs = s.apply(&t.apply(&v));
        let rhs = t.compose(&s).apply(&v);
        assert_eq!(lhs, rhs, "S_σ S_τ = S_{{τ∘σ}}");
    }

    #[test]
    fn permutation_validation() {
        assert!(Permutation::from_one_based(&[1, 1, 3]).is_err(), "repeat");
        assert!(Permutation::from_one_based(&[1, 4, 3]).is_err(), "range");
        let p = Permutation::from_one_based(&[3, 1, 2]).unwrap();
        assert_eq!(p.inverse().compose(&p).matrix(), Permutation::identity(3).matrix());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        /// Reconstructing scores from margins is exact: D(−z, 0) = z.
        #[test]
        fn margin_reconstruction_round_trips(
            z in proptest::collection::vec(-1e6f64..1e6, 1..8)
        ) {
            let mut v: Vec<f64> = z.iter().map(|x| -x).collect();
            v.push(0.0);
            prop_assert_eq!(d_apply(&v), z);
        }

        /// ρ_y(ρ_y z) = z up to float rounding (it is ±sums of two entries).
        #[test]
        fn rho_is_involution_on_vectors(
            z in proptest::collection::vec(-1e3f64..1e3, 1..8),
            sel in 0usize..8,
        ) {
            let k = z.len() + 1;
            let y = sel % k + 1;
            let back = rho_apply(y, &rho_apply(y, &z));
            for (a, b) in back.iter().zip(z.iter()) {
                prop_assert!((a - b).abs() <= 1e-9_f64.max(b.abs() * 1e-12));
            }
        }

        /// ⟨ρ_y z, w⟩ = ⟨z, ρ_yᵀ w⟩ — the adjoint pair is consistent.
        #[test]
        fn rho_adjoint_identity(
            z in proptest::collection::vec(-1e2f64..1e2, 2..8),
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = z.len();
            let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect();
            let y = rng.gen_range(1..=n + 1);
            let lhs: f64 = rho_apply(y, &z).iter().zip(&w).map(|(a, b)| a * b).sum();
            let rhs: f64 = z.iter().zip(rho_transpose_apply(y, &w).iter()).map(|(a, b)| a * b).sum();
            prop_assert!((lhs - rhs).abs() <= 1e-8, "lhs={lhs} rhs={rhs}");
        }
    }
}
