use super::{Graph, NodeId, Tensor, TensorError};

/// Outcome of comparing analytic against central-difference gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic − numeric| / max(1, |analytic|, |numeric|)`.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Number of scalar entries compared.
    pub checked: usize,
    /// `(input index, flat element index)` of the worst entry.
    pub worst: Option<(usize, usize)>,
}

/// Compares the gradients of the scalar built by `build` against central
/// differences with step `h`, perturbing every element of every input.
///
/// `build` receives a fresh graph and the ids of differentiable leaves holding
/// `inputs`, and returns the loss node.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], h: f64, build: F) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId, TensorError>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<(Graph<f64>, Vec<NodeId>, NodeId), TensorError> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = values.iter().map(|t| g.input(t.clone())).collect();
        let loss = build(&mut g, &ids)?;
        Ok((g, ids, loss))
    };

    let (graph, ids, loss) = eval(inputs)?;
    let grads = graph.backward(loss)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        checked: 0,
        worst: None,
    };
    let mut perturbed: Vec<Tensor<f64>> = inputs.to_vec();
    for (which, id) in ids.iter().enumerate() {
        let analytic = grads.wrt(*id).expect("inputs are differentiable").data().to_vec();
        for k in 0..inputs[which].len() {
            let orig = inputs[which].data()[k];
            perturbed[which].data_mut()[k] = orig + h;
            let (gp, _, lp) = eval(&perturbed)?;
            perturbed[which].data_mut()[k] = orig - h;
            let (gm, _, lm) = eval(&perturbed)?;
            perturbed[which].data_mut()[k] = orig;

            let numeric = (gp.value(lp).data()[0] - gm.value(lm).data()[0]) / (2.0 * h);
            let abs = (analytic[k] - numeric).abs();
            let rel = abs / 1f64.max(analytic[k].abs()).max(numeric.abs());
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                if rel >= report.max_rel_error {
                    report.worst = Some((which, k));
                }
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
        let data = (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect();
        Tensor::matrix(rows, cols, data).unwrap()
    }

    fn assert_passes(inputs: &[Tensor<f64>], tol: f64, build: impl Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId, TensorError>) {
        let report = check_gradients(inputs, 1e-3, build).unwrap();
        assert!(report.checked > 0);
        assert!(report.max_rel_error < tol, "{report:?}");
    }

    // Contracting with a fixed random weight keeps the loss sensitive to
    // every output entry.
    fn weighted_sum(g: &mut Graph<f64>, x: NodeId, seed: u64) -> Result<NodeId, TensorError> {
        let (r, c) = g.value(x).dims2()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = g.constant(random(&mut rng, r, c));
        let p = g.mul(x, w)?;
        Ok(g.sum(p))
    }

    #[test]
    fn linear_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inputs = [random(&mut rng, 4, 3), random(&mut rng, 3, 5), random(&mut rng, 1, 5)];
        assert_passes(&inputs, 1e-4, |g, ids| {
            let y = g.matmul(ids[0], ids[1])?;
            let y = g.add_row(y, ids[2])?;
            weighted_sum(g, y, 9)
        });
    }

    #[test]
    fn elementwise_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inputs = [random(&mut rng, 3, 4), random(&mut rng, 3, 4)];
        assert_passes(&inputs, 1e-3, |g, ids| {
            let a = g.tanh(ids[0]);
            let b = g.sigmoid(ids[1]);
            let c = g.mul(a, b)?;
            let d = g.sub(c, ids[1])?;
            let e = g.relu(d);
            let f = g.affine(e, -1.5, 0.25);
            let h = g.add(f, a)?;
            let cat = g.concat(&[h, b, ids[0]])?;
            weighted_sum(g, cat, 3)
        });
    }

    #[test]
    fn layer_norm_composite() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inputs = [random(&mut rng, 5, 6), random(&mut rng, 6, 6)];
        assert_passes(&inputs, 1e-3, |g, ids| {
            let y = g.matmul(ids[0], ids[1])?;
            let y = g.add(y, ids[0])?;
            let y = g.layer_norm(y)?;
            weighted_sum(g, y, 4)
        });
    }

    #[test]
    fn softmax_and_kl() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let inputs = [random(&mut rng, 6, 2), random(&mut rng, 6, 2)];
        assert_passes(&inputs, 1e-3, |g, ids| {
            let p = g.softmax(ids[0])?;
            let t = g.softmax(ids[1])?;
            g.kl_div(t, p)
        });
    }

    #[test]
    fn normalize_and_clamp() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let inputs = [random(&mut rng, 4, 3)];
        assert_passes(&inputs, 1e-3, |g, ids| {
            let s = g.sigmoid(ids[0]);
            let c = g.clamp_min(s, 0.05);
            let n = g.normalize_rows(c)?;
            let m = g.mean(n);
            let w = weighted_sum(g, n, 6)?;
            g.add(m, w)
        });
    }

    #[test]
    fn segment_ops_and_gather() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let inputs = [random(&mut rng, 4, 3)];
        let idx: Arc<[usize]> = Arc::from(vec![0, 2, 2, 3, 1, 0, 3]);
        let seg: Arc<[usize]> = Arc::from(vec![0, 0, 1, 1, 1, 4, 2]);
        let report = check_gradients(&inputs, 1e-3, |g, ids| {
            let gathered = g.gather(ids[0], idx.clone())?;
            let s = g.segment_sum(gathered, seg.clone(), 5)?;
            weighted_sum(g, s, 7)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-8, "{report:?}");
        assert_passes(&inputs, 1e-3, |g, ids| {
            let q = g.sigmoid(ids[0]);
            let gathered = g.gather(q, idx.clone())?;
            let p = g.segment_prod(gathered, seg.clone(), 5)?;
            weighted_sum(g, p, 8)
        });
    }

    #[test]
    fn segment_sum_and_gather_are_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let e = rng.gen_range(1..20);
            let s = rng.gen_range(1..6);
            let ids: Arc<[usize]> = (0..e).map(|_| rng.gen_range(0..s)).collect();
            let v = random(&mut rng, e, 3);
            let u = random(&mut rng, s, 3);
            let mut g = Graph::<f64>::new();
            let vn = g.constant(v.clone());
            let un = g.constant(u.clone());
            let summed = g.segment_sum(vn, ids.clone(), s).unwrap();
            let gathered = g.gather(un, ids).unwrap();
            let lhs: f64 = g.value(summed).data().iter().zip(u.data()).map(|(a, b)| a * b).sum();
            let rhs: f64 = v.data().iter().zip(g.value(gathered).data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }
}
