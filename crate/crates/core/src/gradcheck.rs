//! Central finite-difference gradient verification.
//!
//! The checker re-evaluates the forward pass with perturbed inputs and never
//! touches the reverse sweep, so it is an independent oracle for
//! [`Tape::backward`]. Comparisons use a floored relative error:
//! `|a - b| / max(|a|, |b|, atol)`, which keeps denominator noise from
//! blowing up entries whose true gradient is ~0.

use crate::tensor::{Result, Tape, TensorId};

/// A leaf specification handed to the builder closure on every evaluation.
#[derive(Clone)]
pub struct LeafSpec {
    pub data: Vec<f64>,
    pub shape: Vec<usize>,
}

impl LeafSpec {
    pub fn new(data: Vec<f64>, shape: Vec<usize>) -> Self {
        Self { data, shape }
    }
}

/// Worst observed comparison across all checked entries.
#[derive(Debug, Clone, Default)]
pub struct GradReport {
    pub max_rel_err: f64,
    /// (input index, flat entry index) of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
}

pub fn rel_err(a: f64, b: f64, atol: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(atol)
}

/// Evaluate the scalar objective defined by `build` at the given inputs.
fn eval<F>(build: &F, inputs: &[LeafSpec]) -> Result<f64>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
{
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = inputs
        .iter()
        .map(|l| tape.leaf(l.data.clone(), l.shape.clone(), true))
        .collect::<Result<_>>()?;
    let loss = build(&mut tape, &ids)?;
    Ok(tape.data(loss)[0])
}

/// Central differences (step `h`) for the objective w.r.t. every input entry.
pub fn numeric_gradients<F>(build: &F, inputs: &[LeafSpec], h: f64) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
{
    let mut grads = Vec::with_capacity(inputs.len());
    for p in 0..inputs.len() {
        let mut g = vec![0.0; inputs[p].data.len()];
        for (i, slot) in g.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[p].data[i] += h;
            let mut minus = inputs.to_vec();
            minus[p].data[i] -= h;
            *slot = (eval(build, &plus)? - eval(build, &minus)?) / (2.0 * h);
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Run the analytic backward pass and compare against central differences.
pub fn check_gradients<F>(
    build: F,
    inputs: &[LeafSpec],
    h: f64,
    atol: f64,
) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
{
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = inputs
        .iter()
        .map(|l| tape.leaf(l.data.clone(), l.shape.clone(), true))
        .collect::<Result<_>>()?;
    let loss = build(&mut tape, &ids)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| tape.grad(id).unwrap().to_vec())
        .collect();

    let numeric = numeric_gradients(&build, inputs, h)?;
    let mut report = GradReport::default();
    for (p, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        for (i, (&av, &nv)) in a.iter().zip(n).enumerate() {
            let e = rel_err(av, nv, atol);
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = Some((p, i));
                report.analytic_at_worst = av;
                report.numeric_at_worst = nv;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::EmptyRowPolicy;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_leaf(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> LeafSpec {
        let n: usize = shape.iter().product();
        LeafSpec::new((0..n).map(|_| rng.random_range(-2.0..2.0)).collect(), shape)
    }

    /// Squash the objective through tanh(0.1·sum(..)) so third derivatives
    /// are nontrivial and the check is not fooled by linear-only paths. The
    /// 0.1 keeps tanh out of saturation, where gradients would shrink below
    /// finite-difference resolution.
    fn scalarize(tape: &mut Tape, x: TensorId) -> crate::tensor::Result<TensorId> {
        let s = tape.sum_all(x)?;
        let scaled = tape.scale(s, 0.1)?;
        let t = tape.tanh(scaled)?;
        tape.sum_all(t)
    }

    #[test]
    fn primitives_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        // matmul
        let inputs = vec![
            random_leaf(&mut rng, vec![3, 4]),
            random_leaf(&mut rng, vec![4, 2]),
        ];
        let rep = check_gradients(
            |t, ids| {
                let m = t.matmul(ids[0], ids[1])?;
                scalarize(t, m)
            },
            &inputs,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-6, "matmul: {rep:?}");

        // add_bias + relu + mul
        let inputs = vec![
            random_leaf(&mut rng, vec![2, 3]),
            random_leaf(&mut rng, vec![3]),
            random_leaf(&mut rng, vec![2, 3]),
        ];
        let rep = check_gradients(
            |t, ids| {
                let a = t.add_bias(ids[0], ids[1])?;
                let r = t.relu(a)?;
                let m = t.mul(r, ids[2])?;
                scalarize(t, m)
            },
            &inputs,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-6, "add_bias/relu/mul: {rep:?}");

        // tanh, sigmoid, scale, concat
        let inputs = vec![
            random_leaf(&mut rng, vec![2, 2]),
            random_leaf(&mut rng, vec![2, 3]),
        ];
        let rep = check_gradients(
            |t, ids| {
                let a = t.tanh(ids[0])?;
                let b = t.sigmoid(ids[1])?;
                let c = t.concat_last(a, b)?;
                let s = t.scale(c, 1.7)?;
                scalarize(t, s)
            },
            &inputs,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-6, "tanh/sigmoid/concat/scale: {rep:?}");
    }

    #[test]
    fn softmax_and_layer_norm_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let inputs = vec![random_leaf(&mut rng, vec![3, 4])];
        let mask = vec![
            1.0, 1.0, 0.0, 1.0, //
            1.0, 1.0, 1.0, 1.0, //
            0.0, 1.0, 1.0, 0.0,
        ];
        let rep = check_gradients(
            |t, ids| {
                let s = t.softmax(ids[0], Some(&mask), EmptyRowPolicy::Error)?;
                let sq = t.mul(s, s)?;
                scalarize(t, sq)
            },
            &inputs,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-6, "masked softmax: {rep:?}");

        let inputs = vec![
            random_leaf(&mut rng, vec![3, 5]),
            random_leaf(&mut rng, vec![5]),
            random_leaf(&mut rng, vec![5]),
        ];
        let rep = check_gradients(
            |t, ids| {
                let ln = t.layer_norm(ids[0], ids[1], ids[2], 1e-6)?;
                let sq = t.mul(ln, ln)?;
                scalarize(t, sq)
            },
            &inputs,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-6, "layer_norm: {rep:?}");
    }

    #[test]
    fn ln_matches_central_differences_on_positive_domain() {
        let inputs = vec![LeafSpec::new(vec![0.5, 1.0, 1.5, 2.0], vec![4])];
        let rep = check_gradients(
            |t, ids| {
                let l = t.ln(ids[0])?;
                scalarize(t, l)
            },
            &inputs,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-6, "ln: {rep:?}");
    }

    #[test]
    fn attention_and_gather_ops_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (b, s, d) = (2, 3, 4);
        let inputs = vec![
            random_leaf(&mut rng, vec![b, s, d]),
            random_leaf(&mut rng, vec![b, s, d]),
            random_leaf(&mut rng, vec![b, s, d]),
        ];
        let key_mask = {
            // second document has its last slot padded
            let mut m = vec![1.0; b * 2 * s * s];
            for h in 0..2 {
                for i in 0..s {
                    m[((1 * 2 + h) * s + i) * s + (s - 1)] = 0.0;
                }
            }
            m
        };
        let rep = check_gradients(
            |t, ids| {
                let logits = t.attn_scores(ids[0], ids[1], 2)?;
                let beta = t.softmax(logits, Some(&key_mask), EmptyRowPolicy::Error)?;
                let z = t.attn_combine(beta, ids[2], 2)?;
                scalarize(t, z)
            },
            &inputs,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-6, "attention: {rep:?}");

        // gather + weighted_sum_time + stack/slice
        let inputs = vec![
            random_leaf(&mut rng, vec![4, 3]),
            random_leaf(&mut rng, vec![2, 2]),
        ];
        let rep = check_gradients(
            |t, ids| {
                let rows = t.gather_rows(ids[0], &[0, 2, 1, 3], &[2, 2])?;
                let w = t.softmax(ids[1], None, EmptyRowPolicy::Error)?;
                let mix = t.weighted_sum_time(w, rows)?;
                let s0 = t.slice_cols(mix, 0, 2)?;
                scalarize(t, s0)
            },
            &inputs,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-6, "gather/weighted_sum: {rep:?}");
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let leaf = random_leaf(&mut rng, vec![4, 4]);
        let run = || {
            let mut t = Tape::new();
            let x = t.leaf(leaf.data.clone(), leaf.shape.clone(), false).unwrap();
            let s = t.softmax(x, None, EmptyRowPolicy::Error).unwrap();
            let y = t.tanh(s).unwrap();
            tape_bits(&t, y)
        };
        assert_eq!(run(), run());
    }

    fn tape_bits(t: &Tape, id: TensorId) -> Vec<u64> {
        t.data(id).iter().map(|v| v.to_bits()).collect()
    }
}
