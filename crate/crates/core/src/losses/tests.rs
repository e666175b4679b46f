use std::collections::BTreeMap;
use std::path::Path;

use proptest::prelude::*;

use super::*;
use crate::diffgraph::{grad_check, Tape, Tensor};
use crate::model::UnitEmbedding;

fn unit(v: &[f64]) -> UnitEmbedding {
    UnitEmbedding::normalized(&Tensor::row_from(v)).unwrap()
}

fn bank(rows: &[&[f64]]) -> CentroidBank {
    let groups: BTreeMap<u32, Vec<UnitEmbedding>> = rows
        .iter()
        .enumerate()
        .map(|(i, r)| (i as u32, vec![unit(r)]))
        .collect();
    CentroidBank::from_embeddings(&groups, "test").unwrap()
}

#[test]
fn si_sdr_reference_values() {
    assert!(si_sdr(&[1.0, 1.0], &[1.0, 0.0]).unwrap().abs() < 1e-9);
    assert_eq!(si_sdr(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 60.0);
    assert!(si_sdr_unclamped(&[1.0, 0.0], &[1.0, 0.0]).unwrap() > 60.0);
    assert!(si_sdr(&[1.0], &[0.0]).is_err());
    assert!(si_sdr(&[1.0, 2.0], &[1.0]).is_err());
}

#[test]
fn si_sdr_loss_matches_the_metric() {
    assert!(si_sdr_loss(&[1.0, 1.0], &[1.0, 0.0]).unwrap().abs() < 1e-9);
    let est = [0.3, -0.2, 0.9, 0.1];
    let r = [0.4, -0.1, 0.7, 0.3];
    let direct = si_sdr_unclamped(&est, &r).unwrap();
    assert!((si_sdr_loss(&est, &r).unwrap() + direct).abs() < 1e-12);
}

#[test]
fn si_sdr_loss_gradient_and_descent() {
    let r = [0.4, -0.1, 0.7, 0.3, -0.5];
    let mut tape = Tape::new();
    let e = tape.param("est", Tensor::row_from(&[0.1, 0.3, 0.2, -0.4, 0.2]));
    let loss = si_sdr_loss_on_tape(&mut tape, e, &r).unwrap();
    let p = tape.param_values();
    let report = grad_check(&mut tape, loss, &p, 1e-5).unwrap();
    assert!(report.max_rel_error < 1e-5, "{report:?}");

    let est = [0.1, 0.3, 0.2, -0.4, 0.2];
    let before = si_sdr_loss(&est, &r).unwrap();
    let alpha =
        est.iter().zip(&r).map(|(e, r)| e * r).sum::<f64>() / r.iter().map(|x| x * x).sum::<f64>();
    for eta in [0.05, 0.3, 0.9] {
        let moved: Vec<f64> = est
            .iter()
            .zip(&r)
            .map(|(e, r)| e + eta * (alpha * r - e))
            .collect();
        assert!(si_sdr_loss(&moved, &r).unwrap() < before);
    }
}

#[test]
#[allow(clippy::approx_constant)]
fn secs_and_sc_values() {
    let a = unit(&[1.0, 0.0]);
    assert_eq!(secs(&a, &a).unwrap(), 1.0);
    assert_eq!(secs(&a, &unit(&[0.0, 1.0])).unwrap(), 0.0);
    let s = secs(&a, &unit(&[1.0, 1.0])).unwrap();
    assert!((s - 0.5f64.sqrt()).abs() < 1e-12);
    assert!((s - 0.70711).abs() < 5e-6);
    assert_eq!(sc_loss(&a, &a).unwrap(), 0.0);
    assert_eq!(sc_loss(&a, &unit(&[-1.0, 0.0])).unwrap(), 2.0);
    assert!((sc_loss(&a, &unit(&[1.0, 1.0])).unwrap() - (1.0 - 0.5f64.sqrt())).abs() < 1e-12);
    assert!((sc_loss(&a, &unit(&[1.0, 1.0])).unwrap() - 0.29289).abs() < 5e-6);
    assert!(UnitEmbedding::new(Tensor::row_from(&[1.0, 1.0])).is_err());
}

#[test]
fn centroid_bank_means() {
    let same: BTreeMap<u32, Vec<UnitEmbedding>> = [(3, vec![unit(&[0.6, 0.8]); 4])].into();
    let b = CentroidBank::from_embeddings(&same, "fp").unwrap();
    assert_eq!(b.centroid(3).unwrap(), unit(&[0.6, 0.8]).data());
    assert_eq!(b.counts(), &[4]);

    let two: BTreeMap<u32, Vec<UnitEmbedding>> =
        [(0, vec![unit(&[1.0, 0.0]), unit(&[0.0, 1.0])])].into();
    let b = CentroidBank::from_embeddings(&two, "fp").unwrap();
    assert_eq!(b.centroid(0).unwrap(), &[0.5, 0.5]);

    let empty: BTreeMap<u32, Vec<UnitEmbedding>> = [(0, vec![])].into();
    assert!(CentroidBank::from_embeddings(&empty, "fp").is_err());
    assert!(CentroidBank::from_embeddings(&two, "").is_err());
}

#[test]
fn centroid_bank_ignores_utterance_order() {
    let embs: Vec<UnitEmbedding> = (0..7)
        .map(|i| {
            unit(&[
                (i as f64 * 0.7).sin(),
                (i as f64 * 1.3).cos(),
                0.1 * i as f64 + 0.05,
            ])
        })
        .collect();
    let mut reversed = embs.clone();
    reversed.reverse();
    let mut rotated = embs.clone();
    rotated.rotate_left(3);
    let a = CentroidBank::from_embeddings(&[(1, embs)].into(), "fp").unwrap();
    for other in [reversed, rotated] {
        let b = CentroidBank::from_embeddings(&[(1, other)].into(), "fp").unwrap();
        assert_eq!(a.centroids().bit_pattern(), b.centroids().bit_pattern());
    }
}

#[test]
fn centroid_file_round_trip() {
    let b = bank(&[&[1.0, 0.3, -0.2], &[0.1, -0.9, 0.4], &[0.3, 0.3, 0.3]]);
    let text = b.to_text("cfg");
    let (parsed, hash) = CentroidBank::parse(&text, Path::new("bank")).unwrap();
    assert_eq!(parsed, b);
    assert_eq!(hash, "cfg");
    let line = text.lines().nth(1).unwrap();
    assert_eq!(line.split_whitespace().count(), 4);
    assert!(
        CentroidBank::parse(&text.replace("version=1", "version=2"), Path::new("bank")).is_err()
    );
    let truncated: String = text.lines().take(2).map(|l| format!("{l}\n")).collect();
    assert!(CentroidBank::parse(&truncated, Path::new("bank")).is_err());
}

#[test]
fn centroid_loss_values() {
    let one = bank(&[&[0.3, 0.4]]);
    assert_eq!(c_sc_loss(&unit(&[1.0, 0.0]), &one, 0).unwrap(), 0.0);

    let two = bank(&[&[1.0, 0.0], &[0.0, 1.0]]);
    let l = c_sc_loss(&unit(&[1.0, 0.0]), &two, 0).unwrap();
    assert!((l - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);
    assert!((l - 0.31326).abs() < 5e-6);
    assert!(c_sc_loss(&unit(&[1.0, 0.0]), &two, 7).is_err());

    // Four centroids at equal angle from the estimate.
    let four = bank(&[
        &[1.0, 1.0, 0.0],
        &[1.0, -1.0, 0.0],
        &[1.0, 0.0, 1.0],
        &[1.0, 0.0, -1.0],
    ]);
    let l = c_sc_loss(&unit(&[1.0, 0.0, 0.0]), &four, 2).unwrap();
    assert!((l - 4f64.ln()).abs() < 1e-12);
}

#[test]
fn centroid_loss_renormalises_raw_centroids() {
    let groups: BTreeMap<u32, Vec<UnitEmbedding>> = [
        (0, vec![unit(&[1.0, 0.0]), unit(&[0.0, 1.0])]),
        (1, vec![unit(&[-1.0, 0.0])]),
    ]
    .into();
    let b = CentroidBank::from_embeddings(&groups, "fp").unwrap();
    let e = unit(&[1.0, 1.0]);
    // cos to centroid 0 is 1 even though its raw norm is 1/√2.
    let c1 = -(0.5f64.sqrt());
    let expect = -(1.0 - (1.0f64.exp() + c1.exp()).ln());
    assert!((c_sc_loss(&e, &b, 0).unwrap() - expect).abs() < 1e-12);
}

#[test]
fn centroid_loss_gradient_reaches_only_the_estimate() {
    let b = bank(&[&[1.0, 0.2, 0.0], &[0.0, 1.0, 0.3], &[0.2, -0.5, 1.0]]);
    let mut tape = Tape::new();
    let raw = tape.param("e", Tensor::row_from(&[0.3, -0.7, 0.5]));
    let e = tape.normalize(raw).unwrap();
    let loss = c_sc_loss_on_tape(&mut tape, UnitVar(e), &b, 1).unwrap();
    let p = tape.param_values();
    assert!(grad_check(&mut tape, loss, &p, 1e-5).unwrap().max_rel_error < 1e-5);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.names().collect::<Vec<_>>(), vec!["e"]);
}

#[test]
fn cross_entropy_values() {
    assert!((ce_loss(&[0.5; 6], 2).unwrap() - 6f64.ln()).abs() < 1e-12);
    assert!(ce_loss(&[30.0, 0.0, 0.0], 0).unwrap() < 1e-12);
    let expect = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln() - 3.0;
    let l = ce_loss(&[1.0, 2.0, 3.0], 2).unwrap();
    assert!((l - expect).abs() < 1e-12);
    assert!((l - 0.40761).abs() < 5e-6);
    assert!(ce_loss(&[1.0, 2.0], 2).is_err());
}

#[test]
fn composite_weighting() {
    let w0 = LossWeights::new(0.0, 0.0).unwrap();
    assert_eq!(combined_loss(5.0, 2.0, 0.3, &w0).total, 5.0);
    let w = LossWeights::new(0.1, 0.1).unwrap();
    let b = combined_loss(5.0, 2.0, 0.3, &w);
    assert!((b.total - 4.23).abs() < 1e-9);
    assert!((w.sisdr_weight() + w.beta + w.lambda - 1.0).abs() < 1e-15);
    assert!(LossWeights::new(0.6, 0.5).is_err());
    assert!(LossWeights::new(-0.1, 0.0).is_err());
}

#[test]
fn omega_schedule() {
    let s = ClsSchedule::new(100, true).unwrap();
    assert_eq!(omega_at(0, &s).unwrap(), 1.0);
    assert_eq!(omega_at(100, &s).unwrap(), 0.8);
    assert_eq!(omega_at(50, &s).unwrap(), 0.9);
    assert!(omega_at(101, &s).is_err());
    let mut prev = f64::INFINITY;
    for step in 0..=100 {
        let w = omega_at(step, &s).unwrap();
        assert!(w <= prev);
        prev = w;
    }
}

#[test]
fn gate_truth_table() {
    assert_eq!(cls_gate(0.5, 0.9, 0.8), 0.0);
    assert_eq!(cls_gate(0.5, 0.7, 0.8), 0.5);
    assert_eq!(cls_gate(0.5, 0.8, 0.8), 0.5);
}

#[test]
fn gated_composite() {
    let w = LossWeights::new(0.1, 0.1).unwrap();
    let s = ClsSchedule::new(10, true).unwrap();
    let open = cls_combined_loss(5.0, 2.0, 0.3, 0.5, &w, &s, 10).unwrap();
    assert!(open.gate_open);
    assert_eq!(open.total, combined_loss(5.0, 2.0, 0.3, &w).total);
    let closed = cls_combined_loss(5.0, 2.0, 0.3, 0.95, &w, &s, 10).unwrap();
    assert!(!closed.gate_open);
    assert_eq!(closed.total, 0.8 * 5.0 + 0.1 * 2.0);
    assert_eq!(closed.omega, 0.8);
    assert_eq!(closed.total, closed.recomputed_total());

    let off = ClsSchedule::new(10, false).unwrap();
    for step in 0..=10 {
        let b = cls_combined_loss(5.0, 2.0, 0.3, 0.99, &w, &off, step).unwrap();
        assert_eq!(b.total, combined_loss(5.0, 2.0, 0.3, &w).total);
    }
    assert!(cls_combined_loss(5.0, 2.0, 0.3, 1.5, &w, &s, 0).is_err());
}

/// Toy objective: a signal term on `x` and a consistency term on `y`, both
/// touching the shared weight `s`.
fn toy_total(consistency: bool, gate_open: bool) -> crate::diffgraph::Gradients {
    let mut tape = Tape::new();
    let s = tape.param("s", Tensor::row_from(&[0.7, -0.2, 0.4]));
    let x = tape.param("x", Tensor::row_from(&[0.1, 0.5, -0.3]));
    let y = tape.param("y", Tensor::row_from(&[0.2, 0.2, 0.9]));
    let est = tape.mul(s, x).unwrap();
    let sisdr = si_sdr_loss_on_tape(&mut tape, est, &[0.3, 0.4, -0.1]).unwrap();
    let emb = tape.mul(s, y).unwrap();
    let emb = tape.normalize(emb).unwrap();
    let e_r = tape.constant(unit(&[1.0, 0.0, 0.5]).tensor().clone());
    let sc = sc_loss_on_tape(&mut tape, UnitVar(e_r), UnitVar(emb)).unwrap();
    let terms = LossTerms {
        sisdr,
        ce: None,
        consistency: consistency.then_some(sc),
    };
    let w = LossWeights::new(0.0, 0.1).unwrap();
    let total = total_on_tape(&mut tape, &terms, &w, gate_open).unwrap();
    tape.backward(total).unwrap()
}

#[test]
fn closed_gate_gradients_equal_the_unweighted_objective_bitwise() {
    let closed = toy_total(true, false);
    let reference = toy_total(false, true);
    for (name, g) in closed.iter() {
        assert_eq!(
            g.bit_pattern(),
            reference.get(name).unwrap().bit_pattern(),
            "{name}"
        );
    }
    let open = toy_total(true, true);
    assert_ne!(
        open.get("y").unwrap().bit_pattern(),
        reference.get("y").unwrap().bit_pattern()
    );
}

fn unit_vec(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, n)
        .prop_filter("non-zero", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-3)
}

proptest! {
    #[test]
    fn si_sdr_is_scale_invariant(
        est in prop::collection::vec(-1.0f64..1.0, 8..32),
        seed in 0u64..1000,
        c in prop::sample::select(vec![0.1, 1.0, 10.0, -1.0]),
    ) {
        let r: Vec<f64> = est.iter().enumerate().map(|(i, e)| e * 0.5 + ((i as u64 * 31 + seed) % 17) as f64 / 17.0 - 0.5).collect();
        prop_assume!(r.iter().map(|x| x * x).sum::<f64>() > 1e-3);
        let scaled: Vec<f64> = est.iter().map(|e| c * e).collect();
        let a = si_sdr(&est, &r).unwrap();
        let b = si_sdr(&scaled, &r).unwrap();
        prop_assert!((a - b).abs() <= 1e-9, "{} vs {}", a, b);
    }

    #[test]
    fn similarity_losses_stay_in_range(a in unit_vec(6), b in unit_vec(6)) {
        let (ua, ub) = (unit(&a), unit(&b));
        let s = secs(&ua, &ub).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
        let l = sc_loss(&ua, &ub).unwrap();
        prop_assert!((0.0..=2.0).contains(&l));
    }

    #[test]
    fn centroid_loss_bounds(e in unit_vec(4), c in prop::collection::vec(unit_vec(4), 2..6), pick in 0usize..6) {
        let rows: Vec<&[f64]> = c.iter().map(|v| v.as_slice()).collect();
        let b = bank(&rows);
        let n = rows.len() as f64;
        let target = (pick % rows.len()) as u32;
        let l = c_sc_loss(&unit(&e), &b, target).unwrap();
        let lo = (1.0 + (n - 1.0) * (-2.0f64).exp()).ln();
        let hi = (1.0 + (n - 1.0) * 2.0f64.exp()).ln();
        prop_assert!(l > 0.0);
        prop_assert!(l >= lo - 1e-12 && l <= hi + 1e-12);
    }
}
