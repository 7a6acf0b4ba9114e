//! Dense tensors, reverse-mode differentiation, Adam and parameter checkpoints.

mod adam;
mod checkpoint;
pub mod gradcheck;
mod graph;
pub mod kernels;
mod params;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use graph::{Gradients, Graph, Var};
pub use params::{Grads, ParamId, ParamStore};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::gradcheck::{compare, numeric_grads};
    use super::*;
    use crate::error::Error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn log_softmax_of(row: &[f64]) -> Vec<f64> {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![1, row.len()], row.to_vec()).unwrap());
        let y = g.log_softmax(x).unwrap();
        g.value(y).data().to_vec()
    }

    #[test]
    fn log_softmax_uniform_row() {
        for v in log_softmax_of(&[0.0; 4]) {
            assert!((v + 4f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn log_softmax_large_logits_do_not_overflow() {
        let out = log_softmax_of(&[1000.0, 0.0]);
        assert!(out.iter().all(|v| v.is_finite()));
        assert!(out[0] <= 0.0 && out[0] > -1e-300);
        assert!((out[1] + 1000.0).abs() < 1e-12);
    }

    #[test]
    fn log_softmax_matches_extended_precision() {
        // 40-digit evaluation of x - log(e^1 + e^2 + e^3)
        let expected = [
            -2.407_605_964_444_38,
            -1.407_605_964_444_380_4,
            -0.407_605_964_444_380_3,
        ];
        for (a, b) in log_softmax_of(&[1.0, 2.0, 3.0]).iter().zip(expected) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn log_softmax_rejects_non_finite() {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![1, 2], vec![f64::NAN, 0.0]).unwrap());
        assert!(matches!(g.log_softmax(x), Err(Error::Numeric(_))));
        let y = g.input(Tensor::new(vec![1, 2], vec![f64::INFINITY, 0.0]).unwrap());
        assert!(matches!(g.cross_entropy_rows(y, &[0]), Err(Error::Numeric(_))));
    }

    #[test]
    fn cross_entropy_uniform_is_ln_v() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[3, 8]));
        let l = g.cross_entropy_rows(x, &[0, 5, 7]).unwrap();
        assert!((g.value(l).item() - 8f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn cross_entropy_confident_is_near_zero() {
        let mut data = vec![-50.0; 2 * 4];
        data[2] = 50.0;
        data[4 + 1] = 50.0;
        let mut g = Graph::new();
        let x = g.input(Tensor::matrix(2, 4, data).unwrap());
        let l = g.cross_entropy_rows(x, &[2, 1]).unwrap();
        assert!(g.value(l).item() < 1e-30);
    }

    #[test]
    fn cross_entropy_matches_bruteforce_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data: Vec<f64> = (0..20).map(|_| rng.random_range(-2.0..2.0)).collect();
        let targets = [3usize, 0, 4, 1];
        // oracle: plain exp / sum without max-shifting
        let mut oracle = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &data[r * 5..(r + 1) * 5];
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            oracle += -(row[t].exp() / z).ln();
        }
        oracle /= 4.0;
        let mut g = Graph::new();
        let x = g.input(Tensor::matrix(4, 5, data).unwrap());
        let l = g.cross_entropy_rows(x, &targets).unwrap();
        assert!((g.value(l).item() - oracle).abs() < 1e-13);
    }

    #[test]
    fn cross_entropy_target_out_of_range() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.cross_entropy_rows(x, &[0, 3]), Err(Error::Index(_))));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![3], vec![1.0, -2.0, 5.0]).unwrap());
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_dot_self() {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let sq = g.mul(x, x);
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_on_non_scalar_is_contract_error() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[2]));
        let y = g.scale(x, 2.0);
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn unreachable_params_get_zero_grads() {
        let mut store = ParamStore::new();
        let a = store.insert("a", Tensor::full(&[1, 2], 1.5)).unwrap();
        let b = store.insert("b", Tensor::full(&[1, 2], 2.0)).unwrap();
        let mut g = Graph::new();
        let va = g.param(&store, a);
        let _vb = g.param(&store, b);
        let s = g.sum(va);
        let grads = g.backward(s).unwrap().param_grads(&g, &store);
        assert_eq!(grads.get(a), &[1.0, 1.0]);
        assert_eq!(grads.get(b), &[0.0, 0.0]);
    }

    fn random_store(seed: u64, shapes: &[(&str, &[usize])]) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        for (name, shape) in shapes {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            s.insert(*name, Tensor::new(shape.to_vec(), data).unwrap())
                .unwrap();
        }
        s
    }

    /// Every op kind wired into one scalar.
    fn all_ops_loss<'p>(g: &mut Graph<'p>, s: &'p ParamStore) -> Var {
        let a = g.param(s, s.id("a").unwrap());
        let b = g.param(s, s.id("b").unwrap());
        let bias = g.param(s, s.id("bias").unwrap());
        let gamma = g.param(s, s.id("gamma").unwrap());
        let beta = g.param(s, s.id("beta").unwrap());
        let table = g.param(s, s.id("table").unwrap());

        let h = g.matmul(a, b); // [3,4]
        let h = g.add(h, bias);
        let h = g.layer_norm(h, gamma, beta, 1e-5);
        let h = g.gelu(h);
        let e = g.embed(table, &[2, 0, 2]).unwrap(); // [3,4]
        let h = g.mul(h, e);
        let left = g.slice_cols(h, 0, 2);
        let right = g.slice_cols(h, 2, 2);
        let att = g.matmul_nt(left, right); // [3,3]
        let att = g.scale(att, 0.7);
        let p = g.softmax_rows(att, true);
        let ctx = g.matmul(p, h); // [3,4]
        let cat = g.concat_cols(&[ctx, left]); // [3,6]
        let ls = g.log_softmax(cat).unwrap();
        let picked = g.pick(ls, &[1, 5, 0]).unwrap();
        let s1 = g.sum(picked);
        let ce = g.cross_entropy_rows(cat, &[4, 2, 3]).unwrap();
        let keep = [true, false, true, true, true, false, true, true, true, true, true, true];
        let d = g.dropout(ctx, &keep, 0.25);
        let s2 = g.mean(d);
        let t = g.add(s1, ce);
        g.add(t, s2)
    }

    fn all_ops_store(seed: u64) -> ParamStore {
        random_store(
            seed,
            &[
                ("a", &[3, 5]),
                ("b", &[5, 4]),
                ("bias", &[1, 4]),
                ("gamma", &[1, 4]),
                ("beta", &[1, 4]),
                ("table", &[3, 4]),
            ],
        )
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let store = all_ops_store(11);
        let mut g = Graph::new();
        let loss = all_ops_loss(&mut g, &store);
        let analytic = g.backward(loss).unwrap().param_grads(&g, &store);
        let numeric = numeric_grads(&store, 1e-5, |s| {
            let mut g = Graph::new();
            let l = all_ops_loss(&mut g, s);
            g.value(l).item()
        });
        let rep = compare(&store, &analytic, &numeric, 1e-6);
        assert!(rep.max_rel_err <= 1e-4, "{rep:?}");
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        let store = all_ops_store(5);
        let grads_of = |wa: f64, wb: f64| {
            let mut g = Graph::new();
            let l1 = all_ops_loss(&mut g, &store);
            let a = g.param(&store, store.id("a").unwrap());
            let sq = g.mul(a, a);
            let l2 = g.sum(sq);
            let x = g.scale(l1, wa);
            let y = g.scale(l2, wb);
            let l = g.add(x, y);
            g.backward(l).unwrap().param_grads(&g, &store)
        };
        let (wa, wb) = (1.7, -0.4);
        let combined = grads_of(wa, wb);
        let mut expected = grads_of(1.0, 0.0);
        expected.scale(wa);
        expected.add_scaled(&grads_of(0.0, 1.0), wb);
        for (id, g) in combined.iter() {
            for (x, y) in g.iter().zip(expected.get(id)) {
                assert!((x - y).abs() <= 1e-10, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut g = Graph::new();
        let x = g.input(Tensor::matrix(3, 3, vec![1.0; 9]).unwrap());
        let p = g.softmax_rows(x, true);
        let v = g.value(p).data();
        assert_eq!(&v[0..3], &[1.0, 0.0, 0.0]);
        assert_eq!(&v[3..6], &[0.5, 0.5, 0.0]);
        assert_eq!(v[8], v[6]);
    }

    #[test]
    fn tensor_rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
    }
}
