use num_complex::Complex64;

use crate::error::{Error, Result};

/// Largest register the simulator will allocate.
pub const MAX_STATE_QUBITS: usize = 24;

pub type Matrix2 = [[Complex64; 2]; 2];

/// Dense state of `n` qubits. Wire 0 is the most significant bit of the basis
/// index, so `|01>` means wire 0 in `|0>` and wire 1 in `|1>`.
#[derive(Clone, Debug, PartialEq)]
pub struct StateVector {
    amplitudes: Vec<Complex64>,
    num_qubits: usize,
}

impl StateVector {
    /// `|0...0>`
    pub fn zero(num_qubits: usize) -> Result<Self> {
        if num_qubits == 0 || num_qubits > MAX_STATE_QUBITS {
            return Err(Error::Config(format!(
                "cannot simulate {num_qubits} qubits (supported: 1..={MAX_STATE_QUBITS})"
            )));
        }
        let mut amplitudes = vec![Complex64::new(0.0, 0.0); 1 << num_qubits];
        amplitudes[0] = Complex64::new(1.0, 0.0);
        Ok(Self {
            amplitudes,
            num_qubits,
        })
    }

    /// Computational basis state with `bits[j]` on wire `j`.
    pub fn basis(bits: &[u8]) -> Result<Self> {
        let mut state = Self::zero(bits.len())?;
        let index = bits.iter().fold(0usize, |acc, &b| (acc << 1) | usize::from(b != 0));
        state.amplitudes[0] = Complex64::new(0.0, 0.0);
        state.amplitudes[index] = Complex64::new(1.0, 0.0);
        Ok(state)
    }

    pub fn from_amplitudes(amplitudes: Vec<Complex64>) -> Result<Self> {
        let n = amplitudes.len();
        if n < 2 || !n.is_power_of_two() {
            return Err(Error::Dimension(format!(
                "state vector length {n} is not a power of two"
            )));
        }
        Ok(Self {
            num_qubits: n.trailing_zeros() as usize,
            amplitudes,
        })
    }

    pub fn num_qubits(&self) -> usize {
        self.num_qubits
    }

    pub fn amplitudes(&self) -> &[Complex64] {
        &self.amplitudes
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amplitudes.iter().map(|a| a.norm_sqr()).sum()
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.amplitudes.iter().map(|a| a.norm_sqr()).collect()
    }

    /// `<self|other>`
    pub fn inner(&self, other: &StateVector) -> Complex64 {
        self.amplitudes
            .iter()
            .zip(&other.amplitudes)
            .map(|(a, b)| a.conj() * b)
            .sum()
    }

    fn check_wire(&self, wire: usize) -> Result<()> {
        if wire >= self.num_qubits {
            return Err(Error::Dimension(format!(
                "wire {wire} out of range for {} qubits",
                self.num_qubits
            )));
        }
        Ok(())
    }

    #[inline]
    fn stride(&self, wire: usize) -> usize {
        1 << (self.num_qubits - 1 - wire)
    }

    /// Applies an arbitrary 2x2 matrix on `wire`.
    pub fn apply_matrix(&mut self, wire: usize, m: &Matrix2) -> Result<()> {
        self.check_wire(wire)?;
        self.apply_matrix_unchecked(wire, m);
        Ok(())
    }

    pub(crate) fn apply_matrix_unchecked(&mut self, wire: usize, m: &Matrix2) {
        let stride = self.stride(wire);
        for block in self.amplitudes.chunks_mut(2 * stride) {
            let (lo, hi) = block.split_at_mut(stride);
            for (a0, a1) in lo.iter_mut().zip(hi.iter_mut()) {
                let (x0, x1) = (*a0, *a1);
                *a0 = m[0][0] * x0 + m[0][1] * x1;
                *a1 = m[1][0] * x0 + m[1][1] * x1;
            }
        }
    }

    /// `RY(angle) = exp(-i angle Y / 2)`
    pub fn apply_ry(&mut self, wire: usize, angle: f64) -> Result<()> {
        self.check_wire(wire)?;
        self.apply_ry_unchecked(wire, angle);
        Ok(())
    }

    pub(crate) fn apply_ry_unchecked(&mut self, wire: usize, angle: f64) {
        let (s, c) = (angle / 2.0).sin_cos();
        let stride = self.stride(wire);
        for block in self.amplitudes.chunks_mut(2 * stride) {
            let (lo, hi) = block.split_at_mut(stride);
            for (a0, a1) in lo.iter_mut().zip(hi.iter_mut()) {
                let (x0, x1) = (*a0, *a1);
                *a0 = x0 * c - x1 * s;
                *a1 = x0 * s + x1 * c;
            }
        }
    }

    /// `RZ(angle) = exp(-i angle Z / 2)`
    pub fn apply_rz(&mut self, wire: usize, angle: f64) -> Result<()> {
        self.check_wire(wire)?;
        self.apply_rz_unchecked(wire, angle);
        Ok(())
    }

    pub(crate) fn apply_rz_unchecked(&mut self, wire: usize, angle: f64) {
        let (s, c) = (angle / 2.0).sin_cos();
        let (p0, p1) = (Complex64::new(c, -s), Complex64::new(c, s));
        let stride = self.stride(wire);
        for block in self.amplitudes.chunks_mut(2 * stride) {
            let (lo, hi) = block.split_at_mut(stride);
            lo.iter_mut().for_each(|a| *a *= p0);
            hi.iter_mut().for_each(|a| *a *= p1);
        }
    }

    /// Flips `target` on the basis states where `control` is `|1>`.
    pub fn apply_cnot(&mut self, control: usize, target: usize) -> Result<()> {
        self.check_wire(control)?;
        self.check_wire(target)?;
        if control == target {
            return Err(Error::Dimension(format!(
                "CNOT control and target are both wire {control}"
            )));
        }
        self.apply_cnot_unchecked(control, target);
        Ok(())
    }

    pub(crate) fn apply_cnot_unchecked(&mut self, control: usize, target: usize) {
        let cbit = self.stride(control);
        let tbit = self.stride(target);
        for i in 0..self.amplitudes.len() {
            if i & cbit != 0 && i & tbit == 0 {
                self.amplitudes.swap(i, i | tbit);
            }
        }
    }

    /// `<self| Y_wire |other>`
    pub(crate) fn overlap_y(&self, other: &StateVector, wire: usize) -> Complex64 {
        let stride = self.stride(wire);
        let mut acc = Complex64::new(0.0, 0.0);
        for (l, r) in self
            .amplitudes
            .chunks(2 * stride)
            .zip(other.amplitudes.chunks(2 * stride))
        {
            for k in 0..stride {
                // Y (a0, a1) = (-i a1, i a0)
                let (l0, l1) = (l[k].conj(), l[k + stride].conj());
                let (r0, r1) = (r[k], r[k + stride]);
                acc += Complex64::new(0.0, 1.0) * (l1 * r0 - l0 * r1);
            }
        }
        acc
    }

    /// `<self| Z_wire |other>`
    pub(crate) fn overlap_z(&self, other: &StateVector, wire: usize) -> Complex64 {
        let stride = self.stride(wire);
        let mut acc = Complex64::new(0.0, 0.0);
        for (l, r) in self
            .amplitudes
            .chunks(2 * stride)
            .zip(other.amplitudes.chunks(2 * stride))
        {
            for k in 0..stride {
                acc += l[k].conj() * r[k] - l[k + stride].conj() * r[k + stride];
            }
        }
        acc
    }

    /// Multiplies amplitude `b` by `diag[b]`.
    pub(crate) fn scale_diagonal(&mut self, diag: &[f64]) {
        for (a, &d) in self.amplitudes.iter_mut().zip(diag) {
            *a *= d;
        }
    }

    /// Eigenvalue (+1 or -1) of `Z_wire` on basis state `index`.
    #[inline]
    pub fn z_sign(&self, index: usize, wire: usize) -> f64 {
        if index & self.stride(wire) == 0 {
            1.0
        } else {
            -1.0
        }
    }

    pub fn expectation_z(&self, wire: usize) -> Result<f64> {
        self.check_wire(wire)?;
        Ok(self
            .amplitudes
            .iter()
            .enumerate()
            .map(|(i, a)| self.z_sign(i, wire) * a.norm_sqr())
            .sum())
    }

    pub fn expectation_zz(&self, a: usize, b: usize) -> Result<f64> {
        self.check_wire(a)?;
        self.check_wire(b)?;
        Ok(self
            .amplitudes
            .iter()
            .enumerate()
            .map(|(i, amp)| self.z_sign(i, a) * self.z_sign(i, b) * amp.norm_sqr())
            .sum())
    }
}

/// `RZ(omega) RY(theta) RZ(phi)` as one matrix (`phi` acts first).
pub fn rot_matrix(phi: f64, theta: f64, omega: f64) -> Matrix2 {
    let (s, c) = (theta / 2.0).sin_cos();
    let plus = Complex64::from_polar(1.0, -(phi + omega) / 2.0);
    let minus = Complex64::from_polar(1.0, (phi - omega) / 2.0);
    [
        [plus * c, -minus * s],
        [minus.conj() * s, plus.conj() * c],
    ]
}
