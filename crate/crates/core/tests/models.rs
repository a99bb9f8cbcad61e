use hqfusion::autodiff::Tape;
use hqfusion::models::{Model, ModelKind, ModelSpec};
use hqfusion::quantum::CircuitConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ROWS: usize = 3;
const DC: usize = 4;

fn small_spec(kind: ModelKind) -> ModelSpec {
    let mut spec = ModelSpec::new(kind);
    spec.latent_dim = 8;
    spec.heads = 2;
    spec.dropout = 0.0;
    spec
}

fn build(kind: ModelKind, classes: usize, seed: u64) -> Model<f64> {
    let circuit = CircuitConfig::new(3, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::new(&small_spec(kind), circuit, classes, DC, &mut rng).unwrap();
    // Spread the circuit angles so that every gradient path is exercised.
    if let Some(q) = model.quantum_layer().cloned() {
        for w in model.store.value_mut(q.weights) {
            *w = rng.gen_range(-1.5..1.5);
        }
    }
    model
}

fn features(seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xc = (0..ROWS * DC).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let xq = (0..ROWS * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    (xc, xq)
}

fn logits(model: &Model<f64>, xc: &[f64], xq: &[f64]) -> Vec<f64> {
    let mut tape = Tape::new();
    let (vc, vq) = model.inputs(&mut tape, xc, xq, ROWS).unwrap();
    let out = model
        .forward(&mut tape, vc, vq, false, &mut ChaCha8Rng::seed_from_u64(0))
        .unwrap();
    tape.value(out).to_vec()
}

fn weighted_loss(model: &Model<f64>, xc: &[f64], xq: &[f64], weights: &[f64]) -> f64 {
    logits(model, xc, xq).iter().zip(weights).map(|(a, b)| a * b).sum()
}

#[test]
fn logit_width_follows_task() {
    let (xc, xq) = features(1);
    for kind in ModelKind::ALL {
        assert_eq!(logits(&build(kind, 3, 0), &xc, &xq).len(), ROWS * 3, "{kind}");
        assert_eq!(logits(&build(kind, 2, 0), &xc, &xq).len(), ROWS, "{kind}");
    }
}

#[test]
fn every_family_matches_finite_differences() {
    let (xc, xq) = features(2);
    let h = 1e-5;
    for kind in ModelKind::ALL {
        let mut model = build(kind, 3, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let weights: Vec<f64> = (0..ROWS * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let mut tape = Tape::new();
        let (vc, vq) = model.inputs(&mut tape, &xc, &xq, ROWS).unwrap();
        let out = model.forward(&mut tape, vc, vq, true, &mut rng).unwrap();
        let w = tape.constant(&[ROWS, 3], weights.clone()).unwrap();
        let prod = tape.mul(out, w).unwrap();
        let loss = tape.sum(prod);
        tape.backward(loss).unwrap();
        let mut grads = model.store.clone();
        grads.zero_grad();
        tape.accumulate_param_grads(&mut grads);

        let ids: Vec<_> = model.store.ids().collect();
        let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
        for id in ids {
            for k in 0..model.store.value(id).len() {
                let base = model.store.value(id)[k];
                model.store.value_mut(id)[k] = base + h;
                let plus = weighted_loss(&model, &xc, &xq, &weights);
                model.store.value_mut(id)[k] = base - h;
                let minus = weighted_loss(&model, &xc, &xq, &weights);
                model.store.value_mut(id)[k] = base;
                analytic.push(grads.grad(id)[k]);
                numeric.push((plus - minus) / (2.0 * h));
            }
        }
        let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let err = analytic
            .iter()
            .zip(&numeric)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(err / scale < 1e-3, "{kind}: relative error {}", err / scale);
    }
}

#[test]
fn first_layer_and_circuit_receive_gradient() {
    let (xc, xq) = features(3);
    for kind in ModelKind::ALL {
        let mut model = build(kind, 3, 1);
        let mut tape = Tape::new();
        let (vc, vq) = model.inputs(&mut tape, &xc, &xq, ROWS).unwrap();
        let out = model
            .forward(&mut tape, vc, vq, true, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        let loss = tape.sum(out);
        tape.backward(loss).unwrap();
        tape.accumulate_param_grads(&mut model.store);
        let first = model.store.ids().next().unwrap();
        assert!(model.store.grad(first).iter().any(|g| *g != 0.0), "{kind}");
        if let Some(q) = model.quantum_layer() {
            assert!(model.store.grad(q.weights).iter().any(|g| *g != 0.0), "{kind}");
        }
    }
}

#[test]
fn zero_head_outputs_its_bias() {
    let (xc, xq) = features(4);
    for kind in [ModelKind::BestClassical, ModelKind::QuantumOnly, ModelKind::MidfusionAttn] {
        let mut model = build(kind, 3, 2);
        let head = model.head().clone();
        model.store.value_mut(head.weight).fill(0.0);
        model.store.value_mut(head.bias).copy_from_slice(&[0.5, -1.0, 2.0]);
        let out = logits(&model, &xc, &xq);
        for row in out.chunks(3) {
            assert_eq!(row, &[0.5, -1.0, 2.0], "{kind}");
        }
    }
}

#[test]
fn midfusion_with_zero_projections_collapses_to_biases() {
    let (xc, xq) = features(5);
    let mut model = build(ModelKind::MidfusionLinear, 3, 3);
    let names: Vec<_> = model.store.ids().map(|id| (id, model.store.name(id).to_string())).collect();
    let find = |n: &str| names.iter().find(|(_, name)| name == n).unwrap().0;
    let (wc, bc, wq, bq) = (find("c_proj.weight"), find("c_proj.bias"), find("q_proj.weight"), find("q_proj.bias"));
    model.store.value_mut(wc).fill(0.0);
    model.store.value_mut(wq).fill(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    model.store.value_mut(bc).iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
    model.store.value_mut(bq).iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
    let gate = model.gate().unwrap();
    model.store.value_mut(gate)[0] = 0.7;

    let alpha = 1.0 / (1.0 + (-0.7f64).exp());
    let h: Vec<f64> = model
        .store
        .value(bc)
        .iter()
        .zip(model.store.value(bq))
        .map(|(c, q)| alpha * c + (1.0 - alpha) * q)
        .collect();
    let head = model.head().clone();
    let w = model.store.value(head.weight);
    let b = model.store.value(head.bias);
    let expected: Vec<f64> = (0..3)
        .map(|o| b[o] + (0..8).map(|j| w[o * 8 + j] * h[j]).sum::<f64>())
        .collect();
    for row in logits(&model, &xc, &xq).chunks(3) {
        for (a, e) in row.iter().zip(&expected) {
            assert!((a - e).abs() < 1e-12);
        }
    }
}

#[test]
fn late_fusion_gate_starts_balanced_and_saturates() {
    let (xc, xq) = features(6);
    let mut model = build(ModelKind::LateFusion, 3, 4);
    let gate = model.gate().unwrap();
    assert_eq!(model.store.value(gate), &[0.0]);
    // With the quantum head silenced, a = 0 halves the classical logits.
    let names: Vec<_> = model.store.ids().map(|id| (id, model.store.name(id).to_string())).collect();
    for (id, name) in &names {
        if name.starts_with("q_head") {
            model.store.value_mut(*id).fill(0.0);
        }
    }
    let half = logits(&model, &xc, &xq);
    model.store.value_mut(gate)[0] = 60.0;
    let full = logits(&model, &xc, &xq);
    for (h, f) in half.iter().zip(&full) {
        assert!((2.0 * h - f).abs() < 1e-12);
    }
}

#[test]
fn attention_without_value_path_ignores_quantum_features() {
    let (xc, xq) = features(7);
    let mut model = build(ModelKind::MidfusionAttn, 3, 5);
    let names: Vec<_> = model.store.ids().map(|id| (id, model.store.name(id).to_string())).collect();
    for (id, name) in &names {
        if name.starts_with("attn.v.") || name.starts_with("attn.o.") {
            model.store.value_mut(*id).fill(0.0);
        }
    }
    let (_, other) = features(8);
    assert_eq!(logits(&model, &xc, &xq), logits(&model, &xc, &other));
    assert_eq!(model.token_count(), Some(7));
}

#[test]
fn eval_mode_is_bitwise_deterministic() {
    let (xc, xq) = features(9);
    let mut spec = ModelSpec::new(ModelKind::MidfusionAttnDeep);
    spec.latent_dim = 8;
    spec.heads = 2;
    let model: Model<f32> = Model::new(
        &spec,
        CircuitConfig::new(3, 2).unwrap(),
        3,
        DC,
        &mut ChaCha8Rng::seed_from_u64(1),
    )
    .unwrap();
    let xc: Vec<f32> = xc.iter().map(|&v| v as f32).collect();
    let xq: Vec<f32> = xq.iter().map(|&v| v as f32).collect();
    let a = model.predict_proba(&xc, &xq, ROWS).unwrap();
    let b = model.predict_proba(&xc, &xq, ROWS).unwrap();
    assert_eq!(a, b);
    for row in a.chunks(3) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn very_deep_fusion_adds_exactly_one_trunk_block() {
    let count = |kind| {
        let model: Model<f32> = Model::new(
            &ModelSpec::new(kind),
            CircuitConfig::default(),
            3,
            13,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        model.store.numel()
    };
    // Linear 64x64 + bias, LayerNorm gain + bias.
    assert_eq!(count(ModelKind::VeryDeepFusion) - count(ModelKind::DeepFusion), 64 * 64 + 64 + 128);
}

#[test]
fn spec_validation() {
    let mut spec = ModelSpec::new(ModelKind::MidfusionAttn);
    spec.heads = 5;
    assert!(spec.validate().is_err());
    let mut spec = ModelSpec::new(ModelKind::DeepFusion);
    spec.trunk_depth = Some(5);
    assert!(spec.validate().is_err());
    assert!(ModelSpec::new(ModelKind::EarlyFusion).validate().is_ok());
    assert!(!ModelSpec::new(ModelKind::EarlyFusion).classical_pca());
    assert!(ModelSpec::new(ModelKind::MidfusionAttn).classical_pca());
    assert_eq!("classical_deep".parse::<ModelKind>().unwrap(), ModelKind::BestClassical);
}
