//! Shared finite-difference oracle for the gradient suites. Lives in test
//! code only and never touches the analytic backward path it checks.

use sudolm::autodiff::{NodeId, Tape, Tensor};

pub const SINGLE_OP_TOL: f64 = 1e-3;
pub const COMPOSED_TOL: f64 = 1e-2;

/// Per-element error relative to the gradient's overall scale. The f32
/// forward pass puts a noise floor on the central-difference oracle, so
/// near-zero entries are judged against the largest gradient magnitude
/// rather than themselves.
pub fn check_close(analytic: &[f32], numeric: &[f64], tol: f64, atol: f64, what: &str) {
    assert_eq!(analytic.len(), numeric.len(), "{what}: length mismatch");
    let scale = analytic
        .iter()
        .map(|a| a.abs() as f64)
        .chain(numeric.iter().map(|n| n.abs()))
        .fold(1e-3f64, f64::max);
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let err = (a as f64 - n).abs();
        assert!(
            err < tol * scale + atol,
            "{what}[{i}]: analytic {a:.6e} vs numeric {n:.6e} (err {err:.3e}, scale {scale:.3e})"
        );
    }
}

/// Central-difference gradient of `f` with respect to `inputs[which]`.
pub fn numeric_grad<F>(inputs: &[Tensor], which: usize, mut f: F, eps: f32) -> Vec<f64>
where
    F: FnMut(&[Tensor]) -> f32,
{
    let mut grads = Vec::with_capacity(inputs[which].numel());
    for i in 0..inputs[which].numel() {
        let mut plus = inputs.to_vec();
        plus[which].data_mut()[i] += eps;
        let mut minus = inputs.to_vec();
        minus[which].data_mut()[i] -= eps;
        grads.push((f(&plus) as f64 - f(&minus) as f64) / (2.0 * eps as f64));
    }
    grads
}

/// Runs `build` on a fresh tape, backprops the scalar result, and compares
/// every input gradient against central differences of the same build.
pub fn gradcheck<F>(inputs: &[Tensor], tol: f64, what: &str, build: F)
where
    F: Fn(&mut Tape, &[NodeId]) -> NodeId,
{
    let eval = |tensors: &[Tensor]| -> f32 {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &ids);
        tape.value(out).item()
    };
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &ids);
    tape.backward(out).unwrap();
    for which in 0..inputs.len() {
        let analytic = tape
            .grad(ids[which])
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[which].numel()]);
        let numeric = numeric_grad(inputs, which, eval, 1e-2);
        check_close(
            &analytic,
            &numeric,
            tol,
            1e-4,
            &format!("{what} input {which}"),
        );
    }
}
