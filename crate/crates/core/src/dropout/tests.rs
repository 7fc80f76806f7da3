use proptest::prelude::*;

use super::*;

fn m(rows: &[Vec<f64>]) -> Matrix {
    Matrix::from_rows(rows).unwrap()
}

fn keep_matrix(mask: &DropMask) -> Vec<f64> {
    mask.matrix().data().to_vec()
}

#[test]
fn min_activation_hand_example() {
    let out = min_activation_mask(0.5, &m(&[vec![0.1, 0.9], vec![0.5, 0.3]])).unwrap();
    assert_eq!(keep_matrix(&out.mask), vec![1.0, 0.0, 0.0, 1.0]);
    assert_eq!(out.budget, Some(2));
}

#[test]
fn min_activation_ties_drop_lowest_indices() {
    let out = min_activation_mask(0.5, &Matrix::filled(2, 3, 1.0)).unwrap();
    assert_eq!(keep_matrix(&out.mask), vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
    let none = min_activation_mask(0.0, &Matrix::filled(2, 3, 1.0)).unwrap();
    assert_eq!(none.mask.dropped_count(), 0);
}

#[test]
fn sample_dropping_hand_example() {
    let input = Matrix::filled(4, 2, 1.0);
    let mut rng = RngStream::new(1);
    let out = sample_dropping_mask(0.5, &input, &[0, 1, 0, 1], &[0], 1.0, &mut rng).unwrap();
    assert_eq!(keep_matrix(&out.mask), vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
    assert_eq!(out.overshoot, 0);
    assert!(!out.clamped);
    assert_eq!(rng.draws(), 0);
}

#[test]
fn sample_dropping_without_targets_is_budget_exact() {
    let input = Matrix::filled(10, 7, 1.0);
    let mut rng = RngStream::new(2);
    let out = sample_dropping_mask(0.3, &input, &[0; 10], &[], 1.0, &mut rng).unwrap();
    assert_eq!(out.mask.dropped_count(), 21);
}

#[test]
fn sample_dropping_caps_rows_at_row_budget() {
    // Five target rows but floor(0.5 * 6) = 3 rows may be taken, in row order.
    let input = Matrix::filled(6, 4, 1.0);
    let labels = [3, 3, 1, 3, 3, 3];
    let out = sample_dropping_mask(0.5, &input, &labels, &[3], 1.0, &mut RngStream::new(3)).unwrap();
    for (i, row) in out.mask.matrix().row_iter().enumerate() {
        let zero = row.iter().all(|&v| v == 0.0);
        let one = row.iter().all(|&v| v == 1.0);
        match i {
            0 | 1 | 3 => assert!(zero, "row {i}"),
            _ => assert!(one, "row {i}"),
        }
    }
}

#[test]
fn sample_dropping_partial_rate_and_overshoot() {
    let input = Matrix::filled(4, 50, 1.0);
    // r0 = 0.5 over one target row, then residual to the exact budget.
    let out = sample_dropping_mask(0.25, &input, &[0, 1, 1, 1], &[0], 0.5, &mut RngStream::new(4)).unwrap();
    assert_eq!(out.mask.dropped_count(), 50);
    assert!(!out.clamped);
    // All rows are targets; floor(0.25 * 4) = 1 row is taken and meets the budget exactly.
    let small = Matrix::filled(4, 10, 1.0);
    let out = sample_dropping_mask(0.25, &small, &[0, 0, 0, 0], &[0], 1.0, &mut RngStream::new(5)).unwrap();
    assert_eq!(out.mask.dropped_count(), 10);
    assert_eq!(out.overshoot, 0);
}

#[test]
fn separation_hand_example() {
    let layout = SeparationLayout::new(10, 0.1).unwrap();
    assert_eq!(layout.split_index(), 9);
    let input = Matrix::filled(2, 10, 1.0);
    let mut rng = RngStream::new(6);
    let out = neuron_separation_mask(
        0.5, &input, &[7, 2], 7, layout, 1.0, SeparationMode::Precision, &mut rng,
    )
    .unwrap();
    let k = keep_matrix(&out.mask);
    assert!(k[..9].iter().all(|&v| v == 0.0) && k[9] == 1.0);
    assert!(k[10..19].iter().all(|&v| v == 1.0) && k[19] == 0.0);
    assert_eq!(out.mask.dropped_count(), 10);
    assert_eq!(out.overshoot, 0);
    assert_eq!(out.routed_rows, vec![0]);
    assert_eq!(rng.draws(), 0);
}

#[test]
fn separation_with_p_sample_zero_never_routes() {
    let layout = SeparationLayout::new(20, 0.1).unwrap();
    let input = Matrix::filled(8, 20, 1.0);
    let labels = [0, 0, 0, 0, 1, 1, 1, 1];
    let out = neuron_separation_mask(
        0.5, &input, &labels, 0, layout, 0.0, SeparationMode::Precision, &mut RngStream::new(7),
    )
    .unwrap();
    assert!(out.routed_rows.is_empty());
    for row in out.mask.matrix().row_iter() {
        assert!(row[18..].iter().all(|&v| v == 0.0));
    }
    assert_eq!(out.mask.dropped_count(), 80);
}

#[test]
fn recall_mode_routes_non_targets() {
    let layout = SeparationLayout::new(10, 0.1).unwrap();
    let input = Matrix::filled(4, 10, 1.0);
    let out = neuron_separation_mask(
        0.5, &input, &[0, 1, 0, 2], 0, layout, 1.0, SeparationMode::Recall, &mut RngStream::new(8),
    )
    .unwrap();
    assert_eq!(out.routed_rows, vec![1, 3]);
}

#[test]
fn routing_stops_once_budget_is_reached() {
    // Every row qualifies; a routed row costs 9 units and the budget is 5 per row.
    // The gate is checked before each row, so routing may overshoot.
    let layout = SeparationLayout::new(10, 0.1).unwrap();
    let input = Matrix::filled(2, 10, 1.0);
    let out = neuron_separation_mask(
        0.5, &input, &[0, 0], 0, layout, 1.0, SeparationMode::Precision, &mut RngStream::new(9),
    )
    .unwrap();
    assert_eq!(out.routed_rows, vec![0, 1]);
    assert_eq!(out.overshoot, 8);
    let out = neuron_separation_mask(
        0.5, &Matrix::filled(3, 10, 1.0), &[0, 0, 0], 0, layout, 1.0, SeparationMode::Precision,
        &mut RngStream::new(9),
    )
    .unwrap();
    // 9 + 9 = 18 >= 15 closes the gate before the third row.
    assert_eq!(out.routed_rows, vec![0, 1]);
    assert_eq!(out.overshoot, 4);
}

#[test]
fn separation_rejects_bad_parameters() {
    let layout = SeparationLayout::new(10, 0.1).unwrap();
    let input = Matrix::filled(2, 10, 1.0);
    for p in [-0.1, 1.5] {
        let r = neuron_separation_mask(
            0.5, &input, &[0, 1], 0, layout, p, SeparationMode::Precision, &mut RngStream::new(1),
        );
        assert!(matches!(r, Err(Error::Config { .. })));
    }
    assert!(SeparationLayout::new(10, 0.01).is_err());
    assert!(SeparationLayout::new(10, 0.0).is_err());
    assert!(SeparationLayout::new(10, 1.0).is_err());
    let narrow = Matrix::filled(2, 9, 1.0);
    assert!(neuron_separation_mask(
        0.5, &narrow, &[0, 1], 0, layout, 0.5, SeparationMode::Precision, &mut RngStream::new(1)
    )
    .is_err());
}

#[test]
fn one_shot_routes_exactly_the_first_targets() {
    let layout = SeparationLayout::new(10, 0.1).unwrap();
    let n = 40;
    let labels: Vec<usize> = (0..n).map(|i| if i % 4 == 1 { 0 } else { 1 }).collect();
    assert_eq!(labels.iter().filter(|&&l| l == 0).count(), 10);
    let input = Matrix::filled(n, 10, 1.0);
    let out = one_shot_separation(
        0.5, &input, &labels, 0, layout, SeparationMode::Precision, 10, &mut RngStream::new(3),
    )
    .unwrap();
    let expected: Vec<usize> = (0..n).filter(|i| i % 4 == 1).collect();
    assert_eq!(out.routed_rows, expected);
}

#[test]
fn one_shot_with_zero_samples_equals_p_sample_zero() {
    let layout = SeparationLayout::new(16, 0.25).unwrap();
    let input = Matrix::from_vec(6, 16, (0..96).map(|v| v as f64).collect()).unwrap();
    let labels = [0, 1, 0, 1, 0, 1];
    let a = one_shot_separation(
        0.5, &input, &labels, 0, layout, SeparationMode::Precision, 0, &mut RngStream::new(5),
    )
    .unwrap();
    let b = neuron_separation_mask(
        0.5, &input, &labels, 0, layout, 0.0, SeparationMode::Precision, &mut RngStream::new(5),
    )
    .unwrap();
    assert_eq!(a, b);
}

#[test]
fn one_shot_policy_fires_once_in_its_epoch() {
    let policy = MaskPolicy::NeuronSeparation {
        target: 0,
        p_neuron: 0.1,
        p_sample: 0.0,
        mode: SeparationMode::Precision,
        one_shot: Some(OneShot {
            epoch: 2,
            sample_count: 3,
        }),
    };
    let mut slot = SlotPolicy::new(policy).unwrap();
    let input = Matrix::filled(8, 10, 1.0);
    let few = [0, 0, 1, 1, 1, 1, 1, 1];
    let many = [0, 1, 0, 1, 0, 1, 0, 1];
    let call = |slot: &mut SlotPolicy, epoch, labels: &[usize]| {
        let ctx = MaskContext { labels, epoch, batch: 0, slot: 0 };
        slot.mask(&input, 0.5, &ctx, &mut RngStream::new(1)).unwrap().routed_rows
    };
    assert!(call(&mut slot, 1, &many).is_empty());
    assert!(call(&mut slot, 2, &few).is_empty());
    assert_eq!(slot.one_time_status(), Some(false));
    assert_eq!(call(&mut slot, 2, &many), vec![0, 2, 4]);
    assert_eq!(slot.state().routed_rows, vec![0, 2, 4]);
    assert!(call(&mut slot, 2, &many).is_empty());
    assert_eq!(slot.one_time_status(), Some(true));
}

fn blobs(per: usize, centers: &[f64], width: usize, rng: &mut RngStream) -> (Matrix, Vec<usize>) {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    for (c, &center) in centers.iter().enumerate() {
        for _ in 0..per {
            rows.push((0..width).map(|_| center + 0.05 * rng.uniform()).collect());
            labels.push(c);
        }
    }
    (Matrix::from_rows(&rows).unwrap(), labels)
}

#[test]
fn blind_threshold_above_batch_never_fires() {
    let policy = MaskPolicy::BlindSeparation {
        p_neuron: 0.25,
        trigger_epoch: 1,
        threshold: 100,
        clusters: 2,
    };
    let mut slot = SlotPolicy::new(policy).unwrap();
    let (input, labels) = blobs(10, &[0.0, 5.0], 8, &mut RngStream::new(1));
    let ctx = MaskContext { labels: &labels, epoch: 1, batch: 0, slot: 0 };
    let out = slot.mask(&input, 0.5, &ctx, &mut RngStream::new(2)).unwrap();
    assert!(out.routed_rows.is_empty());
    assert!(!slot.state().fired);
}

#[test]
fn blind_fires_on_the_largest_cluster() {
    let mut rng = RngStream::new(3);
    let (a, _) = blobs(12, &[0.0], 8, &mut rng);
    let (b, _) = blobs(5, &[4.0], 8, &mut rng);
    let rows: Vec<Vec<f64>> = b.row_iter().chain(a.row_iter()).map(<[f64]>::to_vec).collect();
    let input = Matrix::from_rows(&rows).unwrap();
    let picked = blind_candidate_rows(&input, 2, 10).unwrap().unwrap();
    assert_eq!(picked, (5..15).collect::<Vec<_>>());
    assert_eq!(blind_candidate_rows(&input, 2, 13).unwrap(), None);

    let policy = MaskPolicy::BlindSeparation {
        p_neuron: 0.25,
        trigger_epoch: 2,
        threshold: 10,
        clusters: 2,
    };
    let mut slot = SlotPolicy::new(policy).unwrap();
    let labels = vec![0; 17];
    let ctx = |epoch| MaskContext { labels: &labels, epoch, batch: 0, slot: 0 };
    assert!(slot.mask(&input, 0.5, &ctx(1), &mut RngStream::new(1)).unwrap().routed_rows.is_empty());
    let fired = slot.mask(&input, 0.5, &ctx(2), &mut RngStream::new(1)).unwrap();
    assert!(!fired.routed_rows.is_empty());
    assert!(fired.routed_rows.iter().all(|r| picked.contains(r)));
    assert!(slot.state().fired);
    assert!(slot.mask(&input, 0.5, &ctx(2), &mut RngStream::new(1)).unwrap().routed_rows.is_empty());
}

#[test]
fn honest_rate_concentrates() {
    let mut rng = RngStream::new(1234);
    let out = honest_mask(0.5, 1000, 1000, &mut rng).unwrap();
    let frac = out.mask.dropped_count() as f64 / 1e6;
    assert!((frac - 0.5).abs() < 0.002, "{frac}");
    assert_eq!(out.budget, None);
    let zero = honest_mask(0.0, 3, 3, &mut rng).unwrap();
    assert_eq!(zero.mask.dropped_count(), 0);
}

#[test]
fn policy_serde_round_trip_and_validation() {
    let p: MaskPolicy = toml::from_str(
        "kind = \"neuron_separation\"\ntarget = 0\np_neuron = 0.1\np_sample = 0.0001\nmode = \"precision\"\n",
    )
    .unwrap();
    assert_eq!(p.name(), "neuron_separation");
    let back: MaskPolicy = serde_json::from_str(&serde_json::to_string(&p).unwrap()).unwrap();
    assert_eq!(back, p);
    let sd: MaskPolicy = toml::from_str("kind = \"sample_dropping\"\ntargets = [0]\n").unwrap();
    assert_eq!(sd, MaskPolicy::SampleDropping { targets: vec![0], r0: 1.0 });
    assert!(toml::from_str::<MaskPolicy>("kind = \"sample_dropping\"\ntargets = [0]\nbogus = 1\n").is_err());
    assert!(SlotPolicy::new(MaskPolicy::SampleDropping { targets: vec![], r0: 2.0 }).is_err());
    assert!(!MaskPolicy::Honest.is_attack());
}

#[test]
fn driver_replays_identically_and_audits() {
    let policy = MaskPolicy::NeuronSeparation {
        target: 1,
        p_neuron: 0.2,
        p_sample: 0.3,
        mode: SeparationMode::Precision,
        one_shot: None,
    };
    let run = || {
        let slots = vec![SlotPolicy::new(MaskPolicy::Honest).unwrap(), SlotPolicy::new(policy.clone()).unwrap()];
        let mut d = PolicyDriver::new(slots, &RngStream::new(77), false);
        let input = Matrix::filled(6, 10, 1.0);
        let mut masks = Vec::new();
        for batch in 0..3 {
            d.begin_batch(1, batch, &[1, 0, 1, 1, 0, 1]);
            masks.push(d.mask(0, 0.5, &input).unwrap());
            masks.push(d.mask(1, 0.5, &input).unwrap());
        }
        (masks, d.into_audit())
    };
    let (a, audit) = run();
    let (b, _) = run();
    assert_eq!(a, b);
    assert_eq!(audit.records.len(), 6);
    assert_eq!(audit.summary().invocations, 6);
    let mut d = PolicyDriver::new(vec![SlotPolicy::new(MaskPolicy::Honest).unwrap()], &RngStream::new(1), false);
    assert!(matches!(d.mask(3, 0.5, &Matrix::zeros(1, 1)), Err(Error::Contract(_))));
}

fn entries_are_zero_or_rescaled(input: &Matrix, mask: &DropMask, rate: f64) -> bool {
    let out = apply_mask(input, mask, rate).unwrap();
    out.data()
        .iter()
        .zip(input.data())
        .all(|(&o, &x)| o == 0.0 || o == x / (1.0 - rate))
}

fn arb_input() -> impl Strategy<Value = Matrix> {
    (1usize..12, 2usize..24).prop_flat_map(|(r, c)| {
        proptest::collection::vec(-3.0f64..3.0, r * c)
            .prop_map(move |d| Matrix::from_vec(r, c, d).unwrap())
    })
}

fn arb_policy() -> impl Strategy<Value = MaskPolicy> {
    prop_oneof![
        Just(MaskPolicy::Honest),
        Just(MaskPolicy::MinActivation),
        (proptest::collection::vec(0usize..3, 0..3), 0.0f64..=1.0)
            .prop_map(|(targets, r0)| MaskPolicy::SampleDropping { targets, r0 }),
        (0usize..3, 0.0f64..=1.0, any::<bool>()).prop_map(|(target, p_sample, recall)| {
            MaskPolicy::NeuronSeparation {
                target,
                p_neuron: 0.3,
                p_sample,
                mode: if recall { SeparationMode::Recall } else { SeparationMode::Precision },
                one_shot: None,
            }
        }),
        (1usize..4, 1usize..6).prop_map(|(clusters, threshold)| MaskPolicy::BlindSeparation {
            p_neuron: 0.3,
            trigger_epoch: 1,
            threshold,
            clusters,
        }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn observable_rules_hold(
        input in arb_input(),
        policy in arb_policy(),
        rate in prop_oneof![Just(0.0), Just(0.5), 0.05f64..0.95],
        seed in any::<u64>(),
    ) {
        let labels: Vec<usize> = (0..input.rows()).map(|i| (i * 7 + seed as usize) % 3).collect();
        let cols = input.cols();
        if matches!(policy, MaskPolicy::NeuronSeparation { .. } | MaskPolicy::BlindSeparation { .. })
            && SeparationLayout::new(cols, 0.3).is_err()
        {
            return Ok(());
        }
        let mut slot = SlotPolicy::new(policy.clone()).unwrap();
        let ctx = MaskContext { labels: &labels, epoch: 1, batch: 0, slot: 0 };
        let out = slot.mask(&input, rate, &ctx, &mut RngStream::new(seed)).unwrap();
        prop_assert_eq!(out.mask.shape(), input.shape());
        prop_assert!(entries_are_zero_or_rescaled(&input, &out.mask, rate));
        let zeros = out.mask.matrix().data().iter().filter(|&&v| v == 0.0).count();
        prop_assert_eq!(zeros, out.mask.dropped_count());
        if let Some(budget) = out.budget {
            prop_assert_eq!(budget, unit_budget(rate, input.len()));
            if !out.clamped {
                prop_assert_eq!(out.mask.dropped_count(), budget + out.overshoot);
            }
            if out.overshoot == 0 && !out.clamped {
                prop_assert_eq!(out.mask.dropped_count(), budget);
            }
        }
        // Replay.
        let mut again = SlotPolicy::new(policy).unwrap();
        let out2 = again.mask(&input, rate, &ctx, &mut RngStream::new(seed)).unwrap();
        prop_assert_eq!(out, out2);
    }

    #[test]
    fn min_activation_dominance(input in arb_input(), rate in 0.0f64..0.95) {
        let out = min_activation_mask(rate, &input).unwrap();
        let mut kept_max = f64::NEG_INFINITY;
        let mut dropped_min = f64::INFINITY;
        for (&x, &k) in input.data().iter().zip(out.mask.matrix().data()) {
            if k == 1.0 { kept_max = kept_max.max(x) } else { dropped_min = dropped_min.min(x) }
        }
        prop_assert!(kept_max <= dropped_min);
        prop_assert_eq!(out.mask.dropped_count(), unit_budget(rate, input.len()));
    }

    #[test]
    fn sample_dropping_totality(
        n in 1usize..20,
        cols in 1usize..10,
        rate in 0.05f64..0.95,
        labels_seed in any::<u64>(),
    ) {
        let mut rng = RngStream::new(labels_seed);
        let labels: Vec<usize> = (0..n).map(|_| rng.below(3)).collect();
        let targets_count = labels.iter().filter(|&&l| l == 0).count();
        let input = Matrix::filled(n, cols, 1.0);
        let out = sample_dropping_mask(rate, &input, &labels, &[0], 1.0, &mut rng).unwrap();
        let row_budget = (rate * n as f64 + 1e-9).floor() as usize;
        if targets_count <= row_budget {
            for (i, row) in out.mask.matrix().row_iter().enumerate() {
                if labels[i] == 0 {
                    prop_assert!(row.iter().all(|&v| v == 0.0));
                }
            }
        }
    }

    #[test]
    fn separation_exclusivity(
        n in 1usize..16,
        p_sample in 0.0f64..=1.0,
        seed in any::<u64>(),
    ) {
        // A budget exactly met by structural drops leaves no residual dropout:
        // with M = 10, P = 0.5 every row drops 5 units, matching r = 0.5.
        let layout = SeparationLayout::new(10, 0.5).unwrap();
        let input = Matrix::filled(n, 10, 1.0);
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let out = neuron_separation_mask(
            0.5, &input, &labels, 0, layout, p_sample, SeparationMode::Precision, &mut RngStream::new(seed),
        ).unwrap();
        prop_assert_eq!(out.mask.dropped_count(), 5 * n);
        for row in out.mask.matrix().row_iter() {
            let left = row[..5].contains(&1.0);
            let right = row[5..].contains(&1.0);
            prop_assert!(!(left && right));
        }
    }
}
