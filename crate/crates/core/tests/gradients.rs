//! Finite-difference and invariance checks for the contrastive loss, the
//! encoder and the heads, against oracles written independently here.

mod common;

use common::*;
use proptest::prelude::*;
use repper::nn::HeadKind;
use repper::numerics::RngStream;
use repper::supcon::{anchor_gradient_terms, sc_grad_r, sc_loss, ContrastiveBatch};

#[test]
fn sc_loss_matches_oracle() {
    for case in 0..FD_CASES {
        let inst = instance(case);
        let (batch, _) = batch_of(&inst);
        let z = normalized(&inst.r);
        let loss = sc_loss(&batch);
        assert!((loss.sum - oracle_sum(&z, &inst.labels, inst.tau)).abs() < 1e-10);
        assert!((loss.mean - oracle_mean(&z, &inst.labels, inst.tau)).abs() < 1e-10);
    }
}

#[test]
fn anchor_grad_z_matches_finite_differences() {
    let w = sweep_anchor_grad_z();
    assert!(w.ok(TOL), "{}", w.summary());
}

#[test]
fn total_grad_z_matches_finite_differences_of_the_sum() {
    let w = sweep_total_grad_z();
    assert!(w.ok(TOL), "{}", w.summary());
}

#[test]
fn grad_r_matches_finite_differences_through_normalization() {
    let w = sweep_grad_r();
    assert!(w.ok(TOL), "{}", w.summary());
}

#[test]
fn anchor_terms_add_up_to_grad_r() {
    for case in 0..40 {
        let inst = instance(case);
        let (batch, norms) = batch_of(&inst);
        let g = sc_grad_r(&batch, &norms).unwrap();
        for j in 0..batch.len() {
            let t = anchor_gradient_terms(&batch, j, norms[j]);
            let sum: Vec<f64> = t.positive.iter().zip(&t.negative).map(|(a, b)| a + b).collect();
            for (a, b) in sum.iter().zip(g.grad.row(j)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

/// A tail anchor whose only positive is its own (misaligned) augmentation twin
/// gets a larger positive-alignment term than a head anchor whose positives
/// are all nearly collinear with it.
#[test]
fn tail_anchor_has_larger_positive_term_than_head_anchor() {
    for seed in 0..50 {
        let mut rng = RngStream::new(seed, "tail-head", 0, 0);
        let g = 8;
        let mut rand_unit = || unit(&(0..g).map(|_| rng.uniform(-1.0, 1.0)).collect::<Vec<_>>());
        let head_dir = rand_unit();
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        // head class: 10 views within ~0.99 cosine of one direction
        for _ in 0..10 {
            let noise = rand_unit();
            let v: Vec<f64> = head_dir.iter().zip(&noise).map(|(h, n)| h + 0.05 * n).collect();
            rows.push(unit(&v));
            labels.push(0);
        }
        // tail class: a single sample's two views
        rows.push(rand_unit());
        rows.push(rand_unit());
        labels.extend([1, 1]);
        // negatives from other classes
        for k in 0..12 {
            rows.push(rand_unit());
            labels.push(2 + k % 3);
        }
        for p in 1..10 {
            assert!(dot(&rows[0], &rows[p]) > 0.99, "setup: head positives aligned");
        }
        let batch = ContrastiveBatch::new(to_matrix(&rows), labels, 0.1).unwrap();
        let head = anchor_gradient_terms(&batch, 0, 1.0);
        let tail = anchor_gradient_terms(&batch, 10, 1.0);
        let n = |v: &[f64]| dot(v, v).sqrt();
        assert!(
            n(&tail.positive) > n(&head.positive),
            "seed {seed}: tail {} vs head {}",
            n(&tail.positive),
            n(&head.positive)
        );
    }
}

#[test]
fn tangent_identity_holds_on_random_pairs() {
    let w = sweep_tangent_identity(10_000);
    assert!(w.ok(1e-12), "{}", w.summary());
}

#[test]
fn encoder_backward_matches_finite_differences() {
    let w = sweep_encoder_backward();
    assert!(w.ok(TOL), "{}", w.summary());
}

#[test]
fn head_gradients_match_finite_differences() {
    for kind in [HeadKind::Logistic, HeadKind::LinearSvm, HeadKind::Mlp] {
        let w = sweep_head(kind);
        assert!(w.ok(TOL), "{}", w.summary());
    }
}

fn arb_batch() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<usize>, f64)> {
    (2usize..7, 2usize..6).prop_flat_map(|(pairs, g)| {
        (
            prop::collection::vec(prop::collection::vec(-1.0f64..1.0, g), 2 * pairs),
            prop::collection::vec(0usize..4, pairs),
            0.05f64..2.0,
        )
            .prop_filter_map("non-degenerate rows", |(rows, per_sample, tau)| {
                if rows.iter().any(|r| dot(r, r) < 1e-4) {
                    return None;
                }
                let labels = per_sample.iter().flat_map(|&y| [y, y]).collect();
                Some((normalized(&rows), labels, tau))
            })
    })
}

proptest! {
    #[test]
    fn loss_is_invariant_under_row_permutation(
        (z, labels, tau) in arb_batch(),
        perm_seed in any::<u64>(),
    ) {
        let mut order: Vec<usize> = (0..z.len()).collect();
        RngStream::new(perm_seed, "perm", 0, 0).shuffle(&mut order);
        let pz: Vec<Vec<f64>> = order.iter().map(|&i| z[i].clone()).collect();
        let pl: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
        let a = sc_loss(&ContrastiveBatch::new(to_matrix(&z), labels, tau).unwrap());
        let b = sc_loss(&ContrastiveBatch::new(to_matrix(&pz), pl, tau).unwrap());
        prop_assert!((a.sum - b.sum).abs() <= 1e-10 * (1.0 + a.sum.abs()));
        prop_assert_eq!(a.skipped, b.skipped);
    }

    #[test]
    fn loss_is_invariant_under_class_relabeling(
        (z, labels, tau) in arb_batch(),
        shift in 1usize..50,
    ) {
        let relabeled: Vec<usize> = labels.iter().map(|&y| (y * 7 + shift) % 97).collect();
        let a = sc_loss(&ContrastiveBatch::new(to_matrix(&z), labels, tau).unwrap());
        let b = sc_loss(&ContrastiveBatch::new(to_matrix(&z), relabeled, tau).unwrap());
        prop_assert_eq!(a.sum, b.sum);
    }

    #[test]
    fn index_sets_partition_the_candidates((z, labels, tau) in arb_batch()) {
        let batch = ContrastiveBatch::new(to_matrix(&z), labels, tau).unwrap();
        for j in 0..batch.len() {
            let a = batch.candidates(j);
            let mut pn = batch.positives(j);
            pn.extend(batch.negatives(j));
            pn.sort_unstable();
            prop_assert!(!a.contains(&j));
            prop_assert_eq!(a, pn);
        }
    }
}
