use rand::Rng;
use rayon::prelude::*;

use super::{qnode_backward, qnode_forward, CircuitConfig, QuantumParams};
use crate::autodiff::{CustomOp, ParamId, ParamStore, Real, Tape, Var};
use crate::error::{Error, Result};

/// The classifier circuit as a differentiable layer mapping `B x Q` inputs to
/// `B x 2Q` expectation values.
#[derive(Clone, Debug)]
pub struct QuantumLayer {
    pub config: CircuitConfig,
    pub weights: ParamId,
    pub scales: ParamId,
}

impl QuantumLayer {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        config: CircuitConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let init = QuantumParams::init(&config, rng);
        let weights = store.add(
            format!("{name}.weights"),
            &[config.layers, config.qubits, 3],
            init.weights.iter().map(|&w| T::lit(w)).collect(),
        );
        let scales = store.add(
            format!("{name}.scales"),
            &[config.qubits],
            init.scales.iter().map(|&s| T::lit(s)).collect(),
        );
        Ok(Self {
            config,
            weights,
            scales,
        })
    }

    /// Current parameters converted to `f64`.
    pub fn params<T: Real>(&self, store: &ParamStore<T>) -> QuantumParams {
        QuantumParams {
            weights: store.value(self.weights).iter().map(|v| v.as_f64()).collect(),
            scales: store.value(self.scales).iter().map(|v| v.as_f64()).collect(),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let q = self.config.qubits;
        let shape = tape.node(x).shape().to_vec();
        if shape.len() != 2 || shape[1] != q {
            return Err(Error::Dimension(format!(
                "quantum layer on {q} qubits needs a B x {q} input, got {shape:?}"
            )));
        }
        let batch = shape[0];
        let w = tape.param(store, self.weights);
        let s = tape.param(store, self.scales);
        let params = self.params(store);
        let inputs: Vec<f64> = tape.node(x).value().iter().map(|v| v.as_f64()).collect();

        let rows = inputs
            .par_chunks(q)
            .map(|row| qnode_forward(row, &params, &self.config))
            .collect::<Result<Vec<_>>>()?;
        let value = rows.into_iter().flatten().map(T::lit).collect();

        tape.custom(
            &[x, w, s],
            &[batch, self.config.output_dim()],
            value,
            Box::new(CircuitOp {
                config: self.config,
            }),
        )
    }
}

struct CircuitOp {
    config: CircuitConfig,
}

impl<T: Real> CustomOp<T> for CircuitOp {
    fn name(&self) -> &'static str {
        "quantum_circuit"
    }

    fn backward(&self, inputs: &[&[T]], _output: &[T], grad_out: &[T]) -> Vec<Option<Vec<T>>> {
        let q = self.config.qubits;
        let out_dim = self.config.output_dim();
        let to_f64 = |v: &[T]| v.iter().map(|x| x.as_f64()).collect::<Vec<f64>>();
        let x = to_f64(inputs[0]);
        let params = QuantumParams {
            weights: to_f64(inputs[1]),
            scales: to_f64(inputs[2]),
        };
        let upstream = to_f64(grad_out);

        let per_sample: Vec<_> = x
            .par_chunks(q)
            .zip(upstream.par_chunks(out_dim))
            .map(|(row, up)| {
                qnode_backward(row, &params, &self.config, up)
                    .expect("shapes were validated in the forward pass")
            })
            .collect();

        let mut dx = Vec::with_capacity(x.len());
        let mut dw = vec![0.0; params.weights.len()];
        let mut ds = vec![0.0; q];
        for g in &per_sample {
            dx.extend_from_slice(&g.input);
            dw.iter_mut().zip(&g.weights).for_each(|(a, b)| *a += b);
            ds.iter_mut().zip(&g.scales).for_each(|(a, b)| *a += b);
        }
        let cast = |v: Vec<f64>| Some(v.into_iter().map(T::lit).collect());
        vec![cast(dx), cast(dw), cast(ds)]
    }
}
