//! Finite-difference gradient oracle.
//!
//! Verification utility kept independent of the tape's backward pass: it
//! only ever calls scalar-valued loss closures, perturbing one parameter
//! component at a time with central differences. Test suites compare its
//! output against analytic gradients.

use crate::scalar::Scalar;
use crate::tape::{GradAccum, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Central-difference gradients of `loss` with respect to every component
/// of every parameter in `store`. The closure must be a deterministic
/// function of the store contents (fixed seeds).
pub fn central_diff<S: Scalar>(
    store: &mut ParamStore<S>,
    eps: f64,
    mut loss: impl FnMut(&ParamStore<S>) -> f64,
) -> Vec<Tensor<S>> {
    let ids: Vec<ParamId> = store.ids().collect();
    let mut out = Vec::with_capacity(ids.len());
    let h = S::of(eps);
    for id in ids {
        let n = store.get(id).numel();
        let mut grad = Tensor::zeros(store.get(id).shape().to_vec());
        for i in 0..n {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + h;
            let up = loss(store);
            store.get_mut(id).data_mut()[i] = orig - h;
            let down = loss(store);
            store.get_mut(id).data_mut()[i] = orig;
            grad.data_mut()[i] = S::of((up - down) / (2.0 * eps));
        }
        out.push(grad);
    }
    out
}

/// Worst relative error between analytic and finite-difference gradients.
///
/// The error for one component is |a - fd| / max(|a|, |fd|); components
/// where both magnitudes fall below `floor` are treated as matching zeros.
pub fn max_rel_error<S: Scalar>(
    store: &ParamStore<S>,
    analytic: &GradAccum<S>,
    fd: &[Tensor<S>],
    floor: f64,
) -> f64 {
    let mut worst = 0.0f64;
    for id in store.ids() {
        let a = analytic.get(id);
        let f = &fd[id.0];
        for (av, fv) in a.data().iter().zip(f.data()) {
            let (av, fv) = (av.as_f64(), fv.as_f64());
            let scale = av.abs().max(fv.abs());
            if scale < floor {
                continue;
            }
            worst = worst.max((av - fv).abs() / scale);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::{ParamGroup, Tape};

    #[test]
    fn quadratic_gradient_matches() {
        // loss = sum(w * w); d/dw = 2w.
        let mut store: ParamStore<f64> = ParamStore::new();
        let w = store.register(
            "w",
            ParamGroup::Predictor,
            Tensor::vector(vec![1.5, -0.25, 3.0]),
        );
        let loss_of = |s: &ParamStore<f64>| -> f64 {
            let mut tape = Tape::new(s);
            let wn = tape.param(w);
            let sq = tape.mul(wn, wn).unwrap();
            let l = tape.sum_all(sq);
            tape.value(l).item()
        };
        let mut accum = GradAccum::new(&store);
        {
            let mut tape = Tape::new(&store);
            let wn = tape.param(w);
            let sq = tape.mul(wn, wn).unwrap();
            let l = tape.sum_all(sq);
            tape.backward(l, &mut accum).unwrap();
        }
        let fd = central_diff(&mut store, 1e-6, loss_of);
        assert!(max_rel_error(&store, &accum, &fd, 1e-8) < 1e-7);
        assert_eq!(accum.get(w).data(), &[3.0, -0.5, 6.0]);
    }

    #[test]
    fn composed_graph_gradcheck() {
        // A small mixed graph exercising matmul, window concat, segment
        // pooling, sigmoid and softmax paths in one loss.
        let mut store: ParamStore<f64> = ParamStore::new();
        let table = store.register(
            "emb",
            ParamGroup::Embedding,
            Tensor::from_f64(vec![4, 3], &[0.1, -0.2, 0.4, 0.3, 0.0, -0.1, 0.2, 0.5, -0.3, -0.4, 0.1, 0.2]),
        );
        let w = store.register(
            "w",
            ParamGroup::Rationalizer,
            Tensor::from_f64(vec![3, 2], &[0.3, -0.1, 0.2, 0.4, -0.2, 0.1]),
        );
        let head = store.register(
            "head",
            ParamGroup::Predictor,
            Tensor::from_f64(vec![6], &[0.5, -0.4, 0.3, 0.2, -0.1, 0.6]),
        );
        let bounds = [(0usize, 2usize), (2, 5)];
        let build = |s: &ParamStore<f64>| -> f64 {
            let mut tape = Tape::new(s);
            let e = tape.gather_param(table, &[0, 2, 1, 3, 2]).unwrap();
            let wn = tape.param(w);
            let f = tape.matmul(e, wn).unwrap();
            let t = tape.tanh(f);
            let wc = tape.window_concat(t, 1).unwrap();
            let hn = tape.param(head);
            let logits = tape.matmul(wc, hn).unwrap();
            let units = tape.seg_mean(logits, &bounds).unwrap();
            let probs = tape.sigmoid(units);
            let sm = tape.softmax(units).unwrap();
            let mix = tape.mul(probs, sm).unwrap();
            let l = tape.mean_all(mix).unwrap();
            tape.value(l).item()
        };
        let mut accum = GradAccum::new(&store);
        {
            let mut tape = Tape::new(&store);
            let e = tape.gather_param(table, &[0, 2, 1, 3, 2]).unwrap();
            let wn = tape.param(w);
            let f = tape.matmul(e, wn).unwrap();
            let t = tape.tanh(f);
            let wc = tape.window_concat(t, 1).unwrap();
            let hn = tape.param(head);
            let logits = tape.matmul(wc, hn).unwrap();
            let units = tape.seg_mean(logits, &bounds).unwrap();
            let probs = tape.sigmoid(units);
            let sm = tape.softmax(units).unwrap();
            let mix = tape.mul(probs, sm).unwrap();
            let l = tape.mean_all(mix).unwrap();
            tape.backward(l, &mut accum).unwrap();
        }
        let fd = central_diff(&mut store, 1e-6, build);
        let err = max_rel_error(&store, &accum, &fd, 1e-7);
        assert!(err < 1e-5, "max relative error {}", err);
    }
}
