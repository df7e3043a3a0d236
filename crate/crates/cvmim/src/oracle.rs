//! Exact information-theoretic computations on small discrete systems and
//! the bivariate Gaussian closed form. These are estimator-free oracles:
//! every quantity is an exact summation (0·log 0 := 0), in nats.

use crate::error::{CvmimError, Result};
use crate::rng::Rng;
use serde::Serialize;

/// Explicit probability table over up to 3 finite variables (alphabets ≤ 16).
#[derive(Debug, Clone)]
pub struct DiscreteJoint {
    dims: Vec<usize>,
    table: Vec<f64>,
}

const MAX_ALPHABET: usize = 16;
const MAX_VARS: usize = 3;

fn xlogx(p: f64) -> f64 {
    if p > 0.0 {
        p * p.ln()
    } else {
        0.0
    }
}

impl DiscreteJoint {
    pub fn new(dims: Vec<usize>, table: Vec<f64>) -> Result<Self> {
        if dims.is_empty() || dims.len() > MAX_VARS {
            return Err(CvmimError::InvalidArgument(format!(
                "DiscreteJoint supports 1..={MAX_VARS} variables, got {}",
                dims.len()
            )));
        }
        if dims.iter().any(|&d| d == 0 || d > MAX_ALPHABET) {
            return Err(CvmimError::InvalidArgument(format!(
                "alphabet sizes must be in 1..={MAX_ALPHABET}, got {dims:?}"
            )));
        }
        let size: usize = dims.iter().product();
        if table.len() != size {
            return Err(CvmimError::InvalidArgument(format!(
                "table length {} does not match product alphabet {size}",
                table.len()
            )));
        }
        if table.iter().any(|&p| p < 0.0 || !p.is_finite()) {
            return Err(CvmimError::InvalidArgument(
                "probabilities must be finite and nonnegative".into(),
            ));
        }
        let sum: f64 = table.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(CvmimError::InvalidArgument(format!(
                "unnormalized table: mass sums to {sum}"
            )));
        }
        Ok(DiscreteJoint { dims, table })
    }

    /// Random joint distribution over the given alphabet (exponential weights
    /// normalized, so all cells are strictly positive with probability 1).
    pub fn random(dims: Vec<usize>, rng: &mut Rng) -> Result<Self> {
        let size: usize = dims.iter().product();
        let mut table: Vec<f64> = (0..size)
            .map(|_| -(1.0 - rng.next_f64()).ln())
            .collect();
        let sum: f64 = table.iter().sum();
        table.iter_mut().for_each(|p| *p /= sum);
        // renormalize exactly against accumulated rounding
        let sum: f64 = table.iter().sum();
        table.iter_mut().for_each(|p| *p /= sum);
        Self::new(dims, table)
    }

    pub fn num_vars(&self) -> usize {
        self.dims.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    fn index(&self, coords: &[usize]) -> usize {
        let mut idx = 0;
        for (c, d) in coords.iter().zip(&self.dims) {
            idx = idx * d + c;
        }
        idx
    }

    pub fn prob(&self, coords: &[usize]) -> f64 {
        self.table[self.index(coords)]
    }

    fn coords(&self, mut idx: usize) -> Vec<usize> {
        let mut out = vec![0; self.dims.len()];
        for i in (0..self.dims.len()).rev() {
            out[i] = idx % self.dims[i];
            idx /= self.dims[i];
        }
        out
    }

    /// Marginal over a subset of variable indices (ascending order preserved).
    pub fn marginal(&self, vars: &[usize]) -> Vec<f64> {
        let mdims: Vec<usize> = vars.iter().map(|&v| self.dims[v]).collect();
        let msize: usize = mdims.iter().product();
        let mut out = vec![0.0; msize];
        for (idx, &p) in self.table.iter().enumerate() {
            let coords = self.coords(idx);
            let mut midx = 0;
            for (&v, &d) in vars.iter().zip(&mdims) {
                midx = midx * d + coords[v];
            }
            out[midx] += p;
        }
        out
    }

    /// Shannon entropy of one variable, in nats.
    pub fn entropy(&self, var: usize) -> f64 {
        -self.marginal(&[var]).iter().map(|&p| xlogx(p)).sum::<f64>()
    }

    /// Joint entropy of a set of variables.
    pub fn joint_entropy(&self, vars: &[usize]) -> f64 {
        -self.marginal(vars).iter().map(|&p| xlogx(p)).sum::<f64>()
    }

    /// I(a; b) = H(a) + H(b) − H(a, b).
    pub fn mi(&self, a: usize, b: usize) -> f64 {
        self.joint_entropy(&[a]) + self.joint_entropy(&[b]) - self.joint_entropy(&[a, b])
    }

    /// I(a; (b, c)) — MI between one variable and the pair of the others.
    pub fn mi_joint(&self, a: usize, b: usize, c: usize) -> f64 {
        self.joint_entropy(&[a]) + self.joint_entropy(&[b, c])
            - self.joint_entropy(&[a, b, c])
    }

    /// Conditional MI I(a; b | c) = H(a,c) + H(b,c) − H(a,b,c) − H(c).
    pub fn conditional_mi(&self, a: usize, b: usize, c: usize) -> f64 {
        self.joint_entropy(&[a, c]) + self.joint_entropy(&[b, c])
            - self.joint_entropy(&[a, b, c])
            - self.joint_entropy(&[c])
    }
}

/// Bivariate standard Gaussian with correlation ρ; I(x;y) = −½ ln(1 − ρ²).
#[derive(Debug, Clone, Copy)]
pub struct GaussianPair {
    rho: f64,
}

impl GaussianPair {
    pub fn new(rho: f64) -> Result<Self> {
        if !(rho.is_finite() && rho.abs() < 1.0) {
            return Err(CvmimError::InvalidArgument(format!(
                "correlation must satisfy |rho| < 1, got {rho}"
            )));
        }
        Ok(GaussianPair { rho })
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn mi(&self) -> f64 {
        -0.5 * (1.0 - self.rho * self.rho).ln()
    }

    /// Draw a correlated pair.
    pub fn sample(&self, rng: &mut Rng) -> (f64, f64) {
        let u = rng.normal(0.0, 1.0);
        let v = rng.normal(0.0, 1.0);
        (u, self.rho * u + (1.0 - self.rho * self.rho).sqrt() * v)
    }

    /// MI by 2-D quadrature of the defining integral, for cross-checks.
    /// Trapezoid on [-limit, limit]² with `n` points per axis.
    pub fn mi_quadrature(&self, n: usize, limit: f64) -> f64 {
        let rho = self.rho;
        let det = 1.0 - rho * rho;
        let step = 2.0 * limit / (n - 1) as f64;
        let norm_joint = 1.0 / (2.0 * std::f64::consts::PI * det.sqrt());
        let norm_marg = 1.0 / (2.0 * std::f64::consts::PI);
        let mut acc = 0.0;
        for i in 0..n {
            let x = -limit + i as f64 * step;
            let wx = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
            for j in 0..n {
                let y = -limit + j as f64 * step;
                let wy = if j == 0 || j == n - 1 { 0.5 } else { 1.0 };
                let q_joint = (x * x - 2.0 * rho * x * y + y * y) / det;
                let p_joint = norm_joint * (-0.5 * q_joint).exp();
                let p_marg = norm_marg * (-0.5 * (x * x + y * y)).exp();
                if p_joint > 0.0 {
                    acc += wx * wy * p_joint * (p_joint / p_marg).ln();
                }
            }
        }
        acc * step * step
    }
}

/// Numeric verification report for the decomposition identity (independent +
/// conditionally independent channels) and the DPI chain.
#[derive(Debug, Clone, Serialize)]
pub struct PropositionReport {
    pub trials: usize,
    pub prop1_max_residual: f64,
    pub dpi_violations: usize,
    pub dpi_min_margin: f64,
    pub eq3_max_residual: f64,
    pub eq4_min_margin: f64,
    pub premise_max_indep_gap: f64,
    pub premise_max_cond_indep_gap: f64,
}

/// Binary symmetric channel output distribution for input bit `u`.
fn bsc(u: usize, flip: f64) -> [f64; 2] {
    if u == 0 {
        [1.0 - flip, flip]
    } else {
        [flip, 1.0 - flip]
    }
}

/// Construct the decomposition test bed: x = (u, w) with u ⊥ w uniform on
/// {0,1}², y a noisy channel of u, z a noisy channel of w. Both premises
/// (y ⊥ z and y ⊥ z | x) hold by construction. Variables are ordered
/// (x, y, z) with x over a 4-letter alphabet encoding (u, w).
fn decomposition_joint(p_u: f64, flip_y: f64, flip_z: f64) -> Result<DiscreteJoint> {
    let mut table = vec![0.0; 4 * 2 * 2];
    for u in 0..2 {
        for w in 0..2 {
            let px = (if u == 0 { p_u } else { 1.0 - p_u }) * 0.5;
            let x = u * 2 + w;
            let py = bsc(u, flip_y);
            let pz = bsc(w, flip_z);
            for y in 0..2 {
                for z in 0..2 {
                    table[(x * 2 + y) * 2 + z] = px * py[y] * pz[z];
                }
            }
        }
    }
    // normalize away rounding residue before the 1e-12 gate
    let sum: f64 = table.iter().sum();
    table.iter_mut().for_each(|p| *p /= sum);
    DiscreteJoint::new(vec![4, 2, 2], table)
}

/// Apply a random stochastic map z|x to a random joint p(x, y), yielding the
/// triple (x, y, z) with z depending on x alone.
fn dpi_joint(nx: usize, ny: usize, nz: usize, rng: &mut Rng) -> Result<DiscreteJoint> {
    let xy = DiscreteJoint::random(vec![nx, ny], rng)?;
    // random row-stochastic channel
    let mut channel = vec![vec![0.0; nz]; nx];
    for row in &mut channel {
        let mut sum = 0.0;
        for c in row.iter_mut() {
            *c = -(1.0 - rng.next_f64()).ln();
            sum += *c;
        }
        row.iter_mut().for_each(|c| *c /= sum);
    }
    let mut table = vec![0.0; nx * ny * nz];
    for x in 0..nx {
        for y in 0..ny {
            let p = xy.prob(&[x, y]);
            for z in 0..nz {
                table[(x * ny + y) * nz + z] = p * channel[x][z];
            }
        }
    }
    let sum: f64 = table.iter().sum();
    table.iter_mut().for_each(|p| *p /= sum);
    DiscreteJoint::new(vec![nx, ny, nz], table)
}

pub fn verify_propositions(trials: usize, seed: u64) -> Result<PropositionReport> {
    if trials < 1 {
        return Err(CvmimError::InvalidArgument("trials must be >= 1".into()));
    }
    let mut rng = Rng::from_seed(seed);
    let mut prop1_max = 0.0f64;
    let mut eq4_min_margin = f64::INFINITY;
    let mut premise_indep = 0.0f64;
    let mut premise_cond = 0.0f64;
    let mut dpi_violations = 0usize;
    let mut dpi_min_margin = f64::INFINITY;

    for _ in 0..trials {
        // decomposition identity: I(x;(y,z)) = I(x;y) + I(x;z)
        let p_u = rng.uniform(0.2, 0.8);
        let flip_y = rng.uniform(0.0, 0.5);
        let flip_z = rng.uniform(0.0, 0.5);
        let joint = decomposition_joint(p_u, flip_y, flip_z)?;
        let lhs = joint.mi_joint(0, 1, 2);
        let rhs = joint.mi(0, 1) + joint.mi(0, 2);
        prop1_max = prop1_max.max((lhs - rhs).abs());
        // bound chain: I(x;(y,z)) >= I(x;y), slack is I(x;z) >= 0
        eq4_min_margin = eq4_min_margin.min(lhs - joint.mi(0, 1));
        eq4_min_margin = eq4_min_margin.min(joint.mi(0, 2));

        // premises by enumeration
        let py = joint.marginal(&[1]);
        let pz = joint.marginal(&[2]);
        let pyz = joint.marginal(&[1, 2]);
        for y in 0..2 {
            for z in 0..2 {
                premise_indep = premise_indep.max((pyz[y * 2 + z] - py[y] * pz[z]).abs());
            }
        }
        let px = joint.marginal(&[0]);
        for x in 0..4 {
            if px[x] <= 0.0 {
                continue;
            }
            for y in 0..2 {
                for z in 0..2 {
                    let p_yz_x = joint.prob(&[x, y, z]) / px[x];
                    let p_y_x: f64 =
                        (0..2).map(|zz| joint.prob(&[x, y, zz])).sum::<f64>() / px[x];
                    let p_z_x: f64 =
                        (0..2).map(|yy| joint.prob(&[x, yy, z])).sum::<f64>() / px[x];
                    premise_cond = premise_cond.max((p_yz_x - p_y_x * p_z_x).abs());
                }
            }
        }

        // DPI: I(x;y) >= I(z;y) for z a stochastic map of x
        let nx = 2 + rng.gen_index(3);
        let ny = 2 + rng.gen_index(3);
        let nz = 2 + rng.gen_index(3);
        let triple = dpi_joint(nx, ny, nz, &mut rng)?;
        let margin = triple.mi(0, 1) - triple.mi(2, 1);
        dpi_min_margin = dpi_min_margin.min(margin);
        if margin < -1e-12 {
            dpi_violations += 1;
        }
    }

    Ok(PropositionReport {
        trials,
        prop1_max_residual: prop1_max,
        dpi_violations,
        dpi_min_margin,
        eq3_max_residual: prop1_max,
        eq4_min_margin,
        premise_max_indep_gap: premise_indep,
        premise_max_cond_indep_gap: premise_cond,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn independent_uniform_has_zero_mi() {
        let joint = DiscreteJoint::new(vec![2, 2], vec![0.25; 4]).unwrap();
        assert!(joint.mi(0, 1).abs() < 1e-15);
    }

    #[test]
    fn perfectly_correlated_bit_has_ln2_mi() {
        let joint = DiscreteJoint::new(vec![2, 2], vec![0.5, 0.0, 0.0, 0.5]).unwrap();
        assert!((joint.mi(0, 1) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn unnormalized_table_rejected() {
        assert!(DiscreteJoint::new(vec![2, 2], vec![0.3; 4]).is_err());
    }

    #[test]
    fn chain_rule_on_random_4x4x4() {
        let mut rng = Rng::from_seed(0);
        for _ in 0..20 {
            let joint = DiscreteJoint::random(vec![4, 4, 4], &mut rng).unwrap();
            // I(x;(y,z)) = I(x;y|z) + I(x;z), both sides by independent summations
            let lhs = joint.mi_joint(0, 1, 2);
            let rhs = joint.conditional_mi(0, 1, 2) + joint.mi(0, 2);
            assert!((lhs - rhs).abs() <= 1e-12, "residual {}", (lhs - rhs).abs());
        }
    }

    #[test]
    fn mi_with_itself_is_entropy() {
        let mut rng = Rng::from_seed(1);
        // encode (x, x) as a diagonal joint
        let px = DiscreteJoint::random(vec![5], &mut rng).unwrap();
        let mut table = vec![0.0; 25];
        for x in 0..5 {
            table[x * 5 + x] = px.prob(&[x]);
        }
        let sum: f64 = table.iter().sum();
        table.iter_mut().for_each(|p| *p /= sum);
        let joint = DiscreteJoint::new(vec![5, 5], table).unwrap();
        assert!((joint.mi(0, 1) - joint.entropy(0)).abs() < 1e-12);
    }

    #[test]
    fn oracle_quantities_nonnegative() {
        let mut rng = Rng::from_seed(2);
        for _ in 0..50 {
            let joint = DiscreteJoint::random(vec![3, 4, 2], &mut rng).unwrap();
            assert!(joint.mi(0, 1) >= -1e-14);
            assert!(joint.conditional_mi(0, 1, 2) >= -1e-14);
            assert!(joint.entropy(0) >= 0.0);
        }
    }

    #[test]
    fn gaussian_mi_closed_form_points() {
        assert_eq!(GaussianPair::new(0.0).unwrap().mi(), 0.0);
        let mi9 = GaussianPair::new(0.9).unwrap().mi();
        assert!((mi9 - 0.8303656034108255).abs() < 1e-12, "{mi9}");
        let mi_neg = GaussianPair::new(-0.9).unwrap().mi();
        assert_eq!(mi9, mi_neg);
    }

    #[test]
    fn gaussian_mi_rejects_degenerate_rho() {
        assert!(GaussianPair::new(1.0).is_err());
        assert!(GaussianPair::new(-1.2).is_err());
    }

    #[test]
    fn quadrature_matches_closed_form() {
        for &rho in &[0.0, 0.3, -0.3, 0.6, -0.6, 0.9, -0.9] {
            let pair = GaussianPair::new(rho).unwrap();
            let q = pair.mi_quadrature(601, 9.0);
            assert!(
                (q - pair.mi()).abs() < 1e-6,
                "rho {rho}: quadrature {q} vs closed form {}",
                pair.mi()
            );
        }
    }

    #[test]
    fn propositions_hold_numerically() {
        let report = verify_propositions(300, 0).unwrap();
        assert!(report.prop1_max_residual <= 1e-12, "{report:?}");
        assert_eq!(report.dpi_violations, 0, "{report:?}");
        assert!(report.eq4_min_margin >= -1e-12, "{report:?}");
        assert!(report.premise_max_indep_gap <= 1e-14, "{report:?}");
        assert!(report.premise_max_cond_indep_gap <= 1e-14, "{report:?}");
    }

    #[test]
    fn fully_noisy_channel_kills_mi() {
        let joint = decomposition_joint(0.5, 0.5, 0.1).unwrap();
        assert!(joint.mi(0, 1).abs() < 1e-12); // y independent of u
        assert!(joint.mi(0, 2) > 0.1); // z still informative about w
    }
}
