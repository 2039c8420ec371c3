//! Dense row-major tensors over `f64`.
//!
//! Rank 0 (scalar), rank 1 (vector) and rank 2 (matrix) cover everything the
//! laboratory needs. Every exported operation validates that its result is
//! finite, so NaN/Inf cannot silently propagate into an attack run.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norm order for perturbation budgets and projections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormOrder {
    #[serde(rename = "2")]
    L2,
    #[serde(rename = "inf")]
    LInf,
}

impl std::fmt::Display for NormOrder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NormOrder::L2 => write!(f, "2"),
            NormOrder::LInf => write!(f, "inf"),
        }
    }
}

/// Dense tensor: shape plus row-major data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{expected} elements for shape {shape:?}"),
                got: format!("{} elements", data.len()),
                context: "Tensor::new".into(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Tensor::zeros(other.shape.clone())
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn scalar_value(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::contract(format!(
                "expected scalar tensor, got shape {:?}",
                self.shape
            )))
        }
    }

    /// Matrix rows/cols; errors on non-rank-2 tensors.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        if self.shape.len() == 2 {
            Ok((self.shape[0], self.shape[1]))
        } else {
            Err(Error::contract(format!(
                "expected rank-2 tensor, got shape {:?}",
                self.shape
            )))
        }
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.len() != other.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} elements", self.len()),
                got: format!("{} elements", other.len()),
                context: "dot".into(),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .sum())
    }

    pub fn norm_l2(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn norm_linf(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn norm(&self, order: NormOrder) -> f64 {
        match order {
            NormOrder::L2 => self.norm_l2(),
            NormOrder::LInf => self.norm_linf(),
        }
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if !self.same_shape(other) {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", self.shape),
                got: format!("{:?}", other.shape),
                context: "zip_map".into(),
            });
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    /// `self += c * other`, in place.
    pub fn add_scaled_assign(&mut self, other: &Tensor, c: f64) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", self.shape),
                got: format!("{:?}", other.shape),
                context: "add_scaled_assign".into(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
        Ok(())
    }

    pub fn validate_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }
}

/// Elementwise sign with `sign(0) = 0`.
pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Cosine similarity of two equal-length vectors.
///
/// Errors if either vector has norm below `1e-12`.
pub fn cosine_sim(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} elements", a.len()),
            got: format!("{} elements", b.len()),
            context: "cosine_sim".into(),
        });
    }
    let na = a.norm_l2();
    let nb = b.norm_l2();
    if na <= 1e-12 {
        return Err(Error::DegenerateVector {
            norm: na,
            context: "cosine_sim (first argument)".into(),
        });
    }
    if nb <= 1e-12 {
        return Err(Error::DegenerateVector {
            norm: nb,
            context: "cosine_sim (second argument)".into(),
        });
    }
    let sim = a.dot(b)? / (na * nb);
    if !sim.is_finite() {
        return Err(Error::NonFinite("cosine_sim".into()));
    }
    Ok(sim)
}

/// Projection onto the ℓp ball of radius `eps`.
///
/// Inputs already inside the ball are returned unchanged, so the projection
/// is bit-exactly idempotent. For ℓ2 the radial rescale is repeated until the
/// recomputed norm is within the ball, which absorbs the one-ulp spill the
/// first rescale can leave behind.
pub fn project_lp(delta: &Tensor, p: NormOrder, eps: f64) -> Result<Tensor> {
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::contract(format!(
            "projection radius must be positive and finite, got {eps}"
        )));
    }
    match p {
        NormOrder::LInf => {
            if delta.norm_linf() <= eps {
                return Ok(delta.clone());
            }
            Ok(delta.map(|v| v.clamp(-eps, eps)))
        }
        NormOrder::L2 => {
            let mut out = delta.clone();
            loop {
                let n = out.norm_l2();
                if n <= eps {
                    break;
                }
                let s = eps / n;
                for v in out.data_mut() {
                    *v *= s;
                }
            }
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn cosine_identical_unit_vectors() {
        let a = Tensor::vector(vec![1.0, 0.0]);
        assert_eq!(cosine_sim(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn cosine_orthogonal() {
        let a = Tensor::vector(vec![1.0, 0.0]);
        let b = Tensor::vector(vec![0.0, 1.0]);
        assert_eq!(cosine_sim(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn cosine_half_sqrt_two() {
        let a = Tensor::vector(vec![1.0, 0.0]);
        let b = Tensor::vector(vec![1.0, 1.0]);
        assert!(close(
            cosine_sim(&a, &b).unwrap(),
            0.7071067811865475,
            1e-15
        ));
    }

    #[test]
    fn cosine_self_similarity_is_one() {
        let a = Tensor::vector(vec![0.3, -2.5, 0.01, 4.0]);
        assert!(close(cosine_sim(&a, &a).unwrap(), 1.0, 1e-12));
    }

    #[test]
    fn cosine_rejects_zero_norm() {
        let a = Tensor::vector(vec![0.0, 0.0]);
        let b = Tensor::vector(vec![1.0, 0.0]);
        assert!(matches!(
            cosine_sim(&a, &b),
            Err(Error::DegenerateVector { .. })
        ));
    }

    #[test]
    fn project_linf_clamps_per_coordinate() {
        let d = Tensor::vector(vec![0.2, -0.01]);
        let p = project_lp(&d, NormOrder::LInf, 0.05).unwrap();
        assert_eq!(p.data(), &[0.05, -0.01]);
    }

    #[test]
    fn project_l2_rescales_radially() {
        let d = Tensor::vector(vec![3.0, 4.0]);
        let p = project_lp(&d, NormOrder::L2, 1.0).unwrap();
        assert!(close(p.data()[0], 0.6, 1e-15));
        assert!(close(p.data()[1], 0.8, 1e-15));
        assert!(p.norm_l2() <= 1.0);
    }

    #[test]
    fn project_inside_ball_is_identity() {
        let d = Tensor::vector(vec![0.01, -0.02]);
        let p = project_lp(&d, NormOrder::L2, 1.0).unwrap();
        assert_eq!(p, d);
        let p = project_lp(&d, NormOrder::LInf, 0.05).unwrap();
        assert_eq!(p, d);
    }

    #[test]
    fn project_is_bit_idempotent() {
        use crate::numkit::rng::Rng;
        let mut rng = Rng::new(7);
        for _ in 0..200 {
            let d = Tensor::vector((0..16).map(|_| rng.uniform_in(-3.0, 3.0)).collect());
            for p in [NormOrder::L2, NormOrder::LInf] {
                let once = project_lp(&d, p, 0.3).unwrap();
                let twice = project_lp(&once, p, 0.3).unwrap();
                assert_eq!(once, twice, "projection must be idempotent bit-exactly");
            }
        }
    }

    #[test]
    fn sign_of_zero_is_zero() {
        assert_eq!(sign(0.0), 0.0);
        assert_eq!(sign(3.5), 1.0);
        assert_eq!(sign(-0.1), -1.0);
    }
}
