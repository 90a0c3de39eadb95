//! Quaternion algebra and the quaternion linear map.
//!
//! A real vector of dimension `d` is read as `d/4` quaternions by taking the
//! first quarter as real parts, the second as `i` parts, the third as `j`
//! parts and the last as `k` parts. A quaternion linear map from `n` to `m`
//! real dimensions holds one quaternion weight per (input, output) quaternion
//! pair, i.e. `n·m/4` scalars instead of `n·m`.

use alloc::format;
use alloc::vec::Vec;
use core::ops::Mul;

use crate::rng::{self, Rng};
use crate::tensor::{Tape, Tensor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Quaternion {
    pub r: f64,
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

pub const ONE: Quaternion = Quaternion::new(1.0, 0.0, 0.0, 0.0);
pub const I: Quaternion = Quaternion::new(0.0, 1.0, 0.0, 0.0);
pub const J: Quaternion = Quaternion::new(0.0, 0.0, 1.0, 0.0);
pub const K: Quaternion = Quaternion::new(0.0, 0.0, 0.0, 1.0);

impl Quaternion {
    pub const fn new(r: f64, a: f64, b: f64, c: f64) -> Self {
        Quaternion { r, a, b, c }
    }

    pub fn components(self) -> [f64; 4] {
        [self.r, self.a, self.b, self.c]
    }

    pub fn from_components(v: [f64; 4]) -> Self {
        Quaternion::new(v[0], v[1], v[2], v[3])
    }

    pub fn norm_sq(self) -> f64 {
        self.r * self.r + self.a * self.a + self.b * self.b + self.c * self.c
    }

    pub fn norm(self) -> f64 {
        libm::sqrt(self.norm_sq())
    }

    pub fn neg(self) -> Self {
        Quaternion::new(-self.r, -self.a, -self.b, -self.c)
    }

    /// Applies `f` to each component independently.
    pub fn split_activation(self, f: impl Fn(f64) -> f64) -> Self {
        Quaternion::new(f(self.r), f(self.a), f(self.b), f(self.c))
    }
}

/// Hamilton product `p ⊗ q`.
pub fn hamilton_product(p: Quaternion, q: Quaternion) -> Quaternion {
    Quaternion {
        r: p.r * q.r - p.a * q.a - p.b * q.b - p.c * q.c,
        a: p.r * q.a + p.a * q.r + p.b * q.c - p.c * q.b,
        b: p.r * q.b - p.a * q.c + p.b * q.r + p.c * q.a,
        c: p.r * q.c + p.a * q.b - p.b * q.a + p.c * q.r,
    }
}

impl Mul for Quaternion {
    type Output = Quaternion;

    fn mul(self, rhs: Quaternion) -> Quaternion {
        hamilton_product(self, rhs)
    }
}

/// Sparsity pattern of `w ⊗ x`: `HAMILTON_TERMS[out][w_comp] = (x_comp, sign)`,
/// so output component `out` is `Σ_p sign · w[p] · x[x_comp]`.
pub(crate) const HAMILTON_TERMS: [[(usize, f64); 4]; 4] = [
    [(0, 1.0), (1, -1.0), (2, -1.0), (3, -1.0)],
    [(1, 1.0), (0, 1.0), (3, 1.0), (2, -1.0)],
    [(2, 1.0), (3, -1.0), (0, 1.0), (1, 1.0)],
    [(3, 1.0), (2, 1.0), (1, -1.0), (0, 1.0)],
];

fn check_div4(d: usize) -> Result<usize> {
    if d == 0 || d % 4 != 0 {
        return Err(Error::Config(format!(
            "dimension {d} is not a positive multiple of 4"
        )));
    }
    Ok(d / 4)
}

/// Reads a real vector as `d/4` quaternions (component-blocked layout).
pub fn real_to_quat(v: &[f64]) -> Result<Vec<Quaternion>> {
    let q = check_div4(v.len())?;
    Ok((0..q)
        .map(|i| Quaternion::new(v[i], v[q + i], v[2 * q + i], v[3 * q + i]))
        .collect())
}

/// Concatenates the real, `i`, `j` and `k` parts of a quaternion vector.
pub fn quat_to_real(qs: &[Quaternion]) -> Vec<f64> {
    let mut out = Vec::with_capacity(qs.len() * 4);
    out.extend(qs.iter().map(|q| q.r));
    out.extend(qs.iter().map(|q| q.a));
    out.extend(qs.iter().map(|q| q.b));
    out.extend(qs.iter().map(|q| q.c));
    out
}

/// Weights of a quaternion linear map, stored as four real component
/// matrices of shape `in_quats × out_quats`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuaternionMatrix {
    pub components: [Tensor; 4],
}

impl QuaternionMatrix {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Result<Self> {
        let (n4, m4) = (check_div4(in_dim)?, check_div4(out_dim)?);
        let z = Tensor::zeros(alloc::vec![n4, m4]);
        Ok(QuaternionMatrix {
            components: [z.clone(), z.clone(), z.clone(), z],
        })
    }

    /// Every component drawn from `N(0, std_dev²)`.
    pub fn random(in_dim: usize, out_dim: usize, std_dev: f64, rng: &mut Rng) -> Result<Self> {
        let (n4, m4) = (check_div4(in_dim)?, check_div4(out_dim)?);
        let mk = |rng: &mut Rng| {
            Tensor::matrix(n4, m4, rng::normal_vec(rng, n4 * m4, std_dev)).expect("sized")
        };
        Ok(QuaternionMatrix {
            components: [mk(rng), mk(rng), mk(rng), mk(rng)],
        })
    }

    /// Quaternion identity on the diagonal: maps every input to itself.
    pub fn identity(dim: usize) -> Result<Self> {
        let mut w = QuaternionMatrix::zeros(dim, dim)?;
        let q = dim / 4;
        for i in 0..q {
            w.set(i, i, ONE);
        }
        Ok(w)
    }

    pub fn in_quats(&self) -> usize {
        self.components[0].shape()[0]
    }

    pub fn out_quats(&self) -> usize {
        self.components[0].shape()[1]
    }

    pub fn in_dim(&self) -> usize {
        4 * self.in_quats()
    }

    pub fn out_dim(&self) -> usize {
        4 * self.out_quats()
    }

    pub fn param_count(&self) -> usize {
        4 * self.in_quats() * self.out_quats()
    }

    pub fn get(&self, i: usize, j: usize) -> Quaternion {
        let k = i * self.out_quats() + j;
        Quaternion::from_components(core::array::from_fn(|p| self.components[p].data()[k]))
    }

    pub fn set(&mut self, i: usize, j: usize, q: Quaternion) {
        let k = i * self.out_quats() + j;
        for (p, v) in q.components().into_iter().enumerate() {
            self.components[p].data_mut()[k] = v;
        }
    }
}

/// Applies `w` to a real vector without recording gradients. The
/// differentiable form is [`Tape::quat_linear`].
pub fn quaternion_linear(x: &[f64], w: &QuaternionMatrix) -> Result<Vec<f64>> {
    check_div4(x.len())?;
    let mut tape = Tape::new();
    let xv = tape.constant(alloc::vec![1, x.len()], x.to_vec())?;
    let ws = w.components.clone().map(|c| tape.leaf(c));
    let out = tape.quat_linear(xv, ws)?;
    Ok(tape.data(out).to_vec())
}
