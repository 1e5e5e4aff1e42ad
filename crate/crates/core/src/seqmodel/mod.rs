//! The frozen base recommender and its LoRA adapters.
//!
//! The model is one single-head attention layer over the embedded prefix,
//! read out at the last position:
//!
//! ```text
//! q = Wq x_L,  k_j = Wk x_j,  v_j = Wv x_j
//! a = softmax(q·k / √d),  c = Σ a_j v_j
//! h = x_L + Wo c,  logits = Wout h
//! ```
//!
//! Each of the five projections can carry a low-rank delta `scale · B A`
//! (or a materialised dense delta). Gradients are derived by hand.

mod forward;
mod params;

pub use forward::{
    base_loss_and_grads, cross_entropy, forward, lora_linear, loss_and_grads, loss_and_grads_with_dropout, mean_loss,
    AdapterGrads, BaseGrads,
};
pub use params::{Adaptation, AdapterMeta, BaseModel, DenseDelta, Layer, LoraAdapter, LoraConfig, LoraFactors};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{DomainId, Example};
    use crate::numkernel::{finite_diff_grad, relative_error, softmax, Matrix, RngStream};

    fn ex(prefix: &[u32], target: u32) -> Example {
        Example {
            domain: DomainId::from("d0"),
            user_id: "u".into(),
            prefix: prefix.to_vec(),
            target,
        }
    }

    fn trained_like(base: &BaseModel, rank: usize, seed: u64) -> LoraAdapter {
        let cfg = LoraConfig {
            rank,
            dropout: 0.0,
            ..LoraConfig::default()
        };
        let mut a = LoraAdapter::init(base, &cfg, &mut RngStream::new(seed)).unwrap();
        let mut rng = RngStream::new(seed + 100);
        for f in &mut a.layers {
            for v in f.b.as_mut_slice() {
                *v = rng.normal(0.0, 0.3);
            }
            for v in f.a.as_mut_slice() {
                *v = rng.normal(0.0, 0.3);
            }
        }
        a
    }

    #[test]
    fn lora_linear_examples() {
        let w = Matrix::zeros(2, 2);
        let b = Matrix::from_rows(&[&[1.0], &[0.0]]);
        let a = Matrix::from_rows(&[&[1.0, 0.0]]);
        assert_eq!(lora_linear(&w, &b, &a, 1.0, &[1.0, 0.0]).unwrap(), vec![1.0, 0.0]);

        let w = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let zero_b = Matrix::zeros(2, 1);
        assert_eq!(
            lora_linear(&w, &zero_b, &a, 2.0, &[0.5, -1.0]).unwrap(),
            w.matvec(&[0.5, -1.0]).unwrap()
        );
        assert!(lora_linear(&w, &zero_b, &a, 1.0, &[1.0]).is_err());
    }

    #[test]
    fn lora_linear_matches_materialised_product() {
        let mut rng = RngStream::new(3);
        for trial in 0..20 {
            let (d_out, d_in, r) = (2 + trial % 4, 3 + trial % 3, 1 + trial % 2);
            let w = crate::numkernel::gaussian_init(d_out, d_in, 1.0, &mut rng);
            let b = crate::numkernel::gaussian_init(d_out, r, 1.0, &mut rng);
            let a = crate::numkernel::gaussian_init(r, d_in, 1.0, &mut rng);
            let x: Vec<f64> = (0..d_in).map(|_| rng.standard_normal()).collect();
            let full = w.add(&b.matmul(&a).unwrap().scale(1.5)).unwrap();
            let expected = full.matvec(&x).unwrap();
            let got = lora_linear(&w, &b, &a, 1.5, &x).unwrap();
            for (g, e) in got.iter().zip(&expected) {
                assert!((g - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fresh_adapter_is_identity() {
        let base = BaseModel::init(12, 8, 6, &mut RngStream::new(1));
        let adapter = LoraAdapter::init(&base, &LoraConfig::default(), &mut RngStream::new(2)).unwrap();
        let prefix = [3, 1, 4, 1, 5];
        let a = forward(&base, Adaptation::None, &prefix).unwrap();
        let b = forward(&base, Adaptation::Lora(&adapter), &prefix).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dense_matches_factored() {
        let base = BaseModel::init(10, 6, 5, &mut RngStream::new(5));
        let adapter = trained_like(&base, 2, 9);
        let dense = adapter.to_dense();
        let mut rng = RngStream::new(77);
        for _ in 0..25 {
            let len = rng.range_inclusive(1, 7);
            let prefix: Vec<u32> = (0..len).map(|_| rng.below(10) as u32).collect();
            let f = forward(&base, Adaptation::Lora(&adapter), &prefix).unwrap();
            let d = forward(&base, Adaptation::Dense(&dense), &prefix).unwrap();
            for (x, y) in f.iter().zip(&d) {
                assert!((x - y).abs() < 1e-12, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn relabeling_permutes_logits() {
        let base = BaseModel::init(5, 4, 4, &mut RngStream::new(8));
        let perm = [3usize, 0, 4, 1, 2];
        let mut relabeled = base.clone();
        for (old, &new) in perm.iter().enumerate() {
            relabeled
                .item_embeddings
                .row_mut(new)
                .copy_from_slice(base.item_embeddings.row(old));
            relabeled.w_out.row_mut(new).copy_from_slice(base.w_out.row(old));
        }
        let prefix = [0u32, 2, 4];
        let mapped: Vec<u32> = prefix.iter().map(|&i| perm[i as usize] as u32).collect();
        let a = forward(&base, Adaptation::None, &prefix).unwrap();
        let b = forward(&relabeled, Adaptation::None, &mapped).unwrap();
        for (old, &new) in perm.iter().enumerate() {
            assert!((a[old] - b[new]).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_errors() {
        let base = BaseModel::init(5, 4, 4, &mut RngStream::new(8));
        assert!(matches!(
            forward(&base, Adaptation::None, &[]),
            Err(crate::Error::EmptyPrefix)
        ));
        assert!(matches!(
            forward(&base, Adaptation::None, &[1, 9]),
            Err(crate::Error::UnknownItem(9))
        ));
    }

    #[test]
    fn long_prefix_uses_most_recent_window() {
        let base = BaseModel::init(9, 4, 3, &mut RngStream::new(8));
        let a = forward(&base, Adaptation::None, &[0, 1, 2, 5, 6, 7]).unwrap();
        let b = forward(&base, Adaptation::None, &[5, 6, 7]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn uniform_logits_loss_is_ln_vocab() {
        let mut base = BaseModel::init(10, 4, 4, &mut RngStream::new(8));
        base.w_out = Matrix::zeros(10, 4);
        let loss = mean_loss(&base, Adaptation::None, &[ex(&[1, 2], 3)]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn probabilities_normalised() {
        let base = BaseModel::init(20, 6, 5, &mut RngStream::new(4));
        let p = softmax(&forward(&base, Adaptation::None, &[1, 2, 3]).unwrap());
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn adapter_gradients_match_finite_differences() {
        let base = BaseModel::init(8, 6, 5, &mut RngStream::new(11));
        let adapter = trained_like(&base, 2, 12);
        let batch = vec![
            ex(&[0, 1, 2], 3),
            ex(&[4], 5),
            ex(&[6, 7, 1, 2, 3, 0], 1),
            ex(&[2, 2], 7),
        ];
        let (_, grads) = loss_and_grads(&base, &adapter, &batch).unwrap();
        let numeric = finite_diff_grad(
            |theta| mean_loss(&base, Adaptation::Lora(&adapter.with_flat(theta)?), &batch),
            &adapter.to_flat(),
            1e-5,
        )
        .unwrap();
        let analytic = grads.to_flat();
        let worst = analytic
            .iter()
            .zip(&numeric)
            .map(|(&a, &n)| relative_error(a, n, 1e-6))
            .fold(0.0, f64::max);
        assert!(worst <= 1e-4, "max relative error {worst}");
    }

    #[test]
    fn base_gradients_match_finite_differences() {
        let base = BaseModel::init(6, 4, 4, &mut RngStream::new(21));
        let batch = vec![ex(&[0, 1, 2], 3), ex(&[4], 5), ex(&[5, 3, 1], 0)];
        let (_, grads) = base_loss_and_grads(&base, &batch).unwrap();
        let numeric = finite_diff_grad(
            |theta| {
                let mut b = base.clone();
                b.set_flat(theta)?;
                mean_loss(&b, Adaptation::None, &batch)
            },
            &base.to_flat(),
            1e-5,
        )
        .unwrap();
        let worst = grads
            .to_flat()
            .iter()
            .zip(&numeric)
            .map(|(&a, &n)| relative_error(a, n, 1e-6))
            .fold(0.0, f64::max);
        assert!(worst <= 1e-4, "max relative error {worst}");
    }

    #[test]
    fn dropout_gradients_match_fixed_mask_loss() {
        // With a fixed mask stream, the dropout loss is a deterministic function
        // of the parameters and its gradient must match finite differences.
        let base = BaseModel::init(8, 6, 5, &mut RngStream::new(31));
        let mut adapter = trained_like(&base, 2, 32);
        adapter.dropout = 0.3;
        let batch = vec![ex(&[0, 1, 2], 3), ex(&[4, 6], 5)];
        let loss_at =
            |a: &LoraAdapter| loss_and_grads_with_dropout(&base, a, &batch, &mut RngStream::new(99)).map(|(l, _)| l);
        let (_, grads) = loss_and_grads_with_dropout(&base, &adapter, &batch, &mut RngStream::new(99)).unwrap();
        let numeric = finite_diff_grad(|t| loss_at(&adapter.with_flat(t)?), &adapter.to_flat(), 1e-5).unwrap();
        for (a, n) in grads.to_flat().iter().zip(&numeric) {
            assert!(relative_error(*a, *n, 1e-6) <= 1e-4);
        }
    }

    #[test]
    fn duplicated_batch_is_mean_invariant() {
        let base = BaseModel::init(8, 6, 5, &mut RngStream::new(11));
        let adapter = trained_like(&base, 2, 13);
        let batch = vec![ex(&[0, 1, 2], 3), ex(&[4], 5)];
        let doubled: Vec<Example> = batch.iter().chain(&batch).cloned().collect();
        let (l1, g1) = loss_and_grads(&base, &adapter, &batch).unwrap();
        let (l2, g2) = loss_and_grads(&base, &adapter, &doubled).unwrap();
        assert!((l1 - l2).abs() < 1e-14);
        for (a, b) in g1.to_flat().iter().zip(g2.to_flat()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn flat_roundtrip() {
        let base = BaseModel::init(8, 6, 5, &mut RngStream::new(11));
        let adapter = trained_like(&base, 2, 13);
        let back = adapter.with_flat(&adapter.to_flat()).unwrap();
        assert_eq!(back, adapter);
        assert!(adapter.with_flat(&[1.0]).is_err());
    }
}
