//! Statevector simulation of the variational classifier circuit.
//!
//! The circuit on `Q` wires is
//!
//! 1. angle encoding `RY(theta_j)` with `theta = pi * tanh(s * x)`,
//! 2. `L` strongly entangling layers: `Rot(phi, theta, omega)` on every wire,
//!    then a CNOT ring `i -> (i + r_l) mod Q` with `r_l = (l mod (Q - 1)) + 1`,
//! 3. readout of `<Z_j>` for every wire followed by `<Z_j Z_{j+1 mod Q}>`.
//!
//! Gradients are computed with the adjoint method; [`parameter_shift_grad`] is
//! kept as an independent reference.

mod layer;
mod state;

use std::f64::consts::{FRAC_PI_2, PI};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use layer::QuantumLayer;
pub use state::{rot_matrix, Matrix2, StateVector, MAX_STATE_QUBITS};

/// Largest register accepted for the classifier circuit.
pub const MAX_CIRCUIT_QUBITS: usize = 12;

/// Half-width of the uniform initialization of the rotation angles.
pub const WEIGHT_INIT_BOUND: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CircuitConfig {
    pub qubits: usize,
    pub layers: usize,
}

impl Default for CircuitConfig {
    fn default() -> Self {
        Self {
            qubits: 9,
            layers: 3,
        }
    }
}

impl CircuitConfig {
    pub fn new(qubits: usize, layers: usize) -> Result<Self> {
        let config = Self { qubits, layers };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=MAX_CIRCUIT_QUBITS).contains(&self.qubits) {
            return Err(Error::Config(format!(
                "qubit count must be in 2..={MAX_CIRCUIT_QUBITS}, got {}",
                self.qubits
            )));
        }
        if self.layers == 0 {
            return Err(Error::Config("circuit needs at least one layer".into()));
        }
        Ok(())
    }

    /// Number of readout values, `2Q`.
    pub fn output_dim(&self) -> usize {
        2 * self.qubits
    }

    pub fn num_weights(&self) -> usize {
        self.layers * self.qubits * 3
    }
}

/// CNOT ring offset of layer `layer`.
pub fn entangler_range(layer: usize, qubits: usize) -> usize {
    (layer % (qubits - 1)) + 1
}

/// Trainable circuit parameters: rotation angles laid out as `[L][Q][3]`
/// (`phi, theta, omega`) and one encoding scale per wire.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantumParams {
    pub weights: Vec<f64>,
    pub scales: Vec<f64>,
}

impl QuantumParams {
    pub fn new(config: &CircuitConfig, weights: Vec<f64>, scales: Vec<f64>) -> Result<Self> {
        let params = Self { weights, scales };
        params.check(config)?;
        Ok(params)
    }

    /// Angles uniform in `±0.01`, scales 1.
    pub fn init<R: Rng + ?Sized>(config: &CircuitConfig, rng: &mut R) -> Self {
        Self {
            weights: (0..config.num_weights())
                .map(|_| rng.gen_range(-WEIGHT_INIT_BOUND..=WEIGHT_INIT_BOUND))
                .collect(),
            scales: vec![1.0; config.qubits],
        }
    }

    pub fn zeros(config: &CircuitConfig) -> Self {
        Self {
            weights: vec![0.0; config.num_weights()],
            scales: vec![1.0; config.qubits],
        }
    }

    fn check(&self, config: &CircuitConfig) -> Result<()> {
        config.validate()?;
        if self.weights.len() != config.num_weights() {
            return Err(Error::Dimension(format!(
                "expected {} rotation angles for {} layers x {} qubits, got {}",
                config.num_weights(),
                config.layers,
                config.qubits,
                self.weights.len()
            )));
        }
        if self.scales.len() != config.qubits {
            return Err(Error::Dimension(format!(
                "expected {} encoding scales, got {}",
                config.qubits,
                self.scales.len()
            )));
        }
        Ok(())
    }

    fn angles(&self, qubits: usize, layer: usize, wire: usize) -> [f64; 3] {
        let o = (layer * qubits + wire) * 3;
        [self.weights[o], self.weights[o + 1], self.weights[o + 2]]
    }
}

/// `theta_j = pi * tanh(s_j * x_j)`
pub fn encode_angles(x: &[f64], scales: &[f64]) -> Result<Vec<f64>> {
    if x.len() != scales.len() {
        return Err(Error::Dimension(format!(
            "{} features for {} encoding scales",
            x.len(),
            scales.len()
        )));
    }
    Ok(x.iter()
        .zip(scales)
        .map(|(&x, &s)| PI * (s * x).tanh())
        .collect())
}

/// Applies `RY(theta_j)` on every wire.
pub fn encode(state: &mut StateVector, angles: &[f64]) -> Result<()> {
    for (wire, &angle) in angles.iter().enumerate() {
        state.apply_ry(wire, angle)?;
    }
    Ok(())
}

/// Applies the strongly entangling template for `config.layers` layers.
pub fn strongly_entangling_layers(
    state: &mut StateVector,
    config: &CircuitConfig,
    weights: &[f64],
) -> Result<()> {
    config.validate()?;
    if state.num_qubits() != config.qubits || weights.len() != config.num_weights() {
        return Err(Error::Dimension(format!(
            "template for {} qubits / {} angles applied to {} qubits / {} angles",
            config.qubits,
            config.num_weights(),
            state.num_qubits(),
            weights.len()
        )));
    }
    let q = config.qubits;
    for layer in 0..config.layers {
        for wire in 0..q {
            let o = (layer * q + wire) * 3;
            let m = rot_matrix(weights[o], weights[o + 1], weights[o + 2]);
            state.apply_matrix_unchecked(wire, &m);
        }
        let r = entangler_range(layer, q);
        for wire in 0..q {
            state.apply_cnot_unchecked(wire, (wire + r) % q);
        }
    }
    Ok(())
}

/// Final state of the circuit for one input.
pub fn circuit_state(x: &[f64], params: &QuantumParams, config: &CircuitConfig) -> Result<StateVector> {
    params.check(config)?;
    let angles = encode_angles(x, &params.scales)?;
    let mut state = StateVector::zero(config.qubits)?;
    encode(&mut state, &angles)?;
    strongly_entangling_layers(&mut state, config, &params.weights)?;
    Ok(state)
}

/// `[<Z_0>, ..., <Z_{Q-1}>, <Z_0 Z_1>, ..., <Z_{Q-1} Z_0>]`
pub fn readout(state: &StateVector) -> Vec<f64> {
    let q = state.num_qubits();
    let mut out = vec![0.0; 2 * q];
    for (index, amp) in state.amplitudes().iter().enumerate() {
        let p = amp.norm_sqr();
        if p == 0.0 {
            continue;
        }
        for j in 0..q {
            let zj = state.z_sign(index, j);
            out[j] += zj * p;
            out[q + j] += zj * state.z_sign(index, (j + 1) % q) * p;
        }
    }
    out
}

/// Circuit output for one input vector.
pub fn qnode_forward(x: &[f64], params: &QuantumParams, config: &CircuitConfig) -> Result<Vec<f64>> {
    Ok(readout(&circuit_state(x, params, config)?))
}

/// Gradients of `sum_k upstream[k] * out[k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct QnodeGradients {
    pub input: Vec<f64>,
    pub weights: Vec<f64>,
    pub scales: Vec<f64>,
}

/// Diagonal of the observable `sum_k u_k O_k` in the computational basis.
fn observable_diagonal(state: &StateVector, upstream: &[f64]) -> Vec<f64> {
    let q = state.num_qubits();
    (0..1usize << q)
        .map(|index| {
            (0..q)
                .map(|j| {
                    let zj = state.z_sign(index, j);
                    upstream[j] * zj + upstream[q + j] * zj * state.z_sign(index, (j + 1) % q)
                })
                .sum()
        })
        .collect()
}

/// Adjoint-method vector-Jacobian product of [`qnode_forward`].
pub fn qnode_backward(
    x: &[f64],
    params: &QuantumParams,
    config: &CircuitConfig,
    upstream: &[f64],
) -> Result<QnodeGradients> {
    if upstream.len() != config.output_dim() {
        return Err(Error::Dimension(format!(
            "upstream gradient has {} entries, circuit has {} outputs",
            upstream.len(),
            config.output_dim()
        )));
    }
    let q = config.qubits;
    let angles = encode_angles(x, &params.scales)?;
    let mut psi = circuit_state(x, params, config)?;
    let mut lambda = psi.clone();
    lambda.scale_diagonal(&observable_diagonal(&psi, upstream));

    // For a gate exp(-i t P / 2) the derivative of <psi|O|psi> is Im<lambda|P|psi>
    // evaluated just after the gate, with lambda = O psi propagated backwards.
    let mut d_weights = vec![0.0; config.num_weights()];
    for layer in (0..config.layers).rev() {
        let r = entangler_range(layer, q);
        for wire in (0..q).rev() {
            let (c, t) = (wire, (wire + r) % q);
            psi.apply_cnot_unchecked(c, t);
            lambda.apply_cnot_unchecked(c, t);
        }
        for wire in 0..q {
            let [phi, theta, omega] = params.angles(q, layer, wire);
            let o = (layer * q + wire) * 3;

            d_weights[o + 2] = lambda.overlap_z(&psi, wire).im;
            psi.apply_rz_unchecked(wire, -omega);
            lambda.apply_rz_unchecked(wire, -omega);

            d_weights[o + 1] = lambda.overlap_y(&psi, wire).im;
            psi.apply_ry_unchecked(wire, -theta);
            lambda.apply_ry_unchecked(wire, -theta);

            d_weights[o] = lambda.overlap_z(&psi, wire).im;
            psi.apply_rz_unchecked(wire, -phi);
            lambda.apply_rz_unchecked(wire, -phi);
        }
    }

    let mut input = vec![0.0; q];
    let mut scales = vec![0.0; q];
    for wire in 0..q {
        let d_angle = lambda.overlap_y(&psi, wire).im;
        psi.apply_ry_unchecked(wire, -angles[wire]);
        lambda.apply_ry_unchecked(wire, -angles[wire]);

        let t = (params.scales[wire] * x[wire]).tanh();
        let dtanh = PI * (1.0 - t * t);
        input[wire] = d_angle * dtanh * params.scales[wire];
        scales[wire] = d_angle * dtanh * x[wire];
    }

    Ok(QnodeGradients {
        input,
        weights: d_weights,
        scales,
    })
}

/// Jacobian of every output with respect to every rotation angle by the
/// two-term parameter-shift rule, laid out as `[output][angle]`.
pub fn parameter_shift_grad(
    x: &[f64],
    params: &QuantumParams,
    config: &CircuitConfig,
) -> Result<Vec<Vec<f64>>> {
    params.check(config)?;
    let mut jac = vec![vec![0.0; config.num_weights()]; config.output_dim()];
    let mut shifted = params.clone();
    for k in 0..config.num_weights() {
        let base = params.weights[k];
        shifted.weights[k] = base + FRAC_PI_2;
        let plus = qnode_forward(x, &shifted, config)?;
        shifted.weights[k] = base - FRAC_PI_2;
        let minus = qnode_forward(x, &shifted, config)?;
        shifted.weights[k] = base;
        for (row, (p, m)) in jac.iter_mut().zip(plus.iter().zip(&minus)) {
            row[k] = (p - m) / 2.0;
        }
    }
    Ok(jac)
}
