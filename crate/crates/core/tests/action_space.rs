use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use uas_core::action_space::{
    mask_policy, mask_q_argmax, ActionClass, AvailableActionMask, GroupSpec, InputKind,
    LayoutKind, UnifiedActionSpace,
};

fn mask_strategy(len: usize) -> impl Strategy<Value = AvailableActionMask> {
    prop::collection::vec(any::<bool>(), len)
        .prop_filter("at least one bit", |b| b.iter().any(|&x| x))
        .prop_map(AvailableActionMask::new)
}

fn caps_strategy() -> impl Strategy<Value = Vec<ActionClass>> {
    (any::<bool>(), any::<bool>()).prop_map(|(a, e)| {
        let mut c = Vec::new();
        if a {
            c.push(ActionClass::AllyAct);
        }
        if e {
            c.push(ActionClass::EnemyAct);
        }
        c
    })
}

fn linear_scan_argmax(q: &[f64], mask: &AvailableActionMask) -> usize {
    let mut best: Option<usize> = None;
    for i in 0..q.len() {
        if !mask.get(i) {
            continue;
        }
        match best {
            None => best = Some(i),
            Some(b) if q[i] > q[b] => best = Some(i),
            _ => {}
        }
    }
    best.unwrap()
}

#[test]
fn argmax_matches_linear_scan_on_random_cases() {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let n = rng.gen_range(1..20);
        // Small integer values make ties common.
        let q: Vec<f64> = (0..n).map(|_| rng.gen_range(-3..4) as f64).collect();
        let mut bits: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        let forced = rng.gen_range(0..n);
        bits[forced] = true;
        let m = AvailableActionMask::new(bits);
        assert_eq!(mask_q_argmax(&q, &m).unwrap(), linear_scan_argmax(&q, &m));
    }
}

proptest! {
    #[test]
    fn static_masks_cover_self_and_capabilities(
        caps in prop::collection::vec(caps_strategy(), 1..4),
        n_allies in 0usize..5,
        n_enemies in 0usize..5,
    ) {
        let groups: Vec<GroupSpec> = caps
            .iter()
            .enumerate()
            .map(|(i, c)| GroupSpec::new(i, c, vec![i]))
            .collect();
        let uas = UnifiedActionSpace::build(&groups, n_allies, n_enemies, LayoutKind::Unified).unwrap();
        let blocks = uas.blocks();
        // Blocks are contiguous and cover the whole space.
        let mut next = 0;
        for b in blocks {
            prop_assert_eq!(b.offset, next);
            next += b.len;
        }
        prop_assert_eq!(next, uas.size());

        let mut union = AvailableActionMask::empty(uas.size());
        for (gi, g) in groups.iter().enumerate() {
            let m = uas.static_mask(gi);
            for b in blocks {
                let enabled = b.class.map(|c| g.can(c)).unwrap_or(false);
                for i in b.offset..b.offset + b.len {
                    prop_assert_eq!(m.get(i), enabled);
                    if m.get(i) {
                        union.set(i, true);
                    }
                }
            }
        }
        prop_assert_eq!(union.count(), uas.size());
    }

    #[test]
    fn mask_policy_is_idempotent(
        raw in prop::collection::vec(0.0f64..1.0, 12),
        mask in mask_strategy(12),
    ) {
        prop_assume!(raw.iter().zip(mask.bits()).any(|(&v, &m)| m && v > 1e-6));
        let once = mask_policy(&raw, &mask, InputKind::Distribution).unwrap();
        let twice = mask_policy(&once.probs, &mask, InputKind::Distribution).unwrap();
        for (a, b) in once.probs.iter().zip(&twice.probs) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
        let sum: f64 = once.probs.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn logits_path_is_idempotent(
        logits in prop::collection::vec(-5.0f64..5.0, 9),
        mask in mask_strategy(9),
    ) {
        let once = mask_policy(&logits, &mask, InputKind::Logits).unwrap();
        let twice = mask_policy(&once.probs, &mask, InputKind::Distribution).unwrap();
        for (i, (a, b)) in once.probs.iter().zip(&twice.probs).enumerate() {
            prop_assert!((a - b).abs() <= 1e-12);
            if !mask.get(i) {
                prop_assert_eq!(*a, 0.0);
            }
        }
    }

    #[test]
    fn other_groups_logits_do_not_move_own_policy(
        logits in prop::collection::vec(-5.0f64..5.0, 11),
        noise in prop::collection::vec(-50.0f64..50.0, 2),
    ) {
        let groups = [
            GroupSpec::new(0, &[ActionClass::EnemyAct], vec![0, 1]),
            GroupSpec::new(1, &[ActionClass::AllyAct], vec![2]),
        ];
        let uas = UnifiedActionSpace::build(&groups, 2, 3, LayoutKind::Unified).unwrap();
        let marine = uas.static_mask(0);
        let base = mask_policy(&logits, marine, InputKind::Logits).unwrap();
        // Ally block (indices 6, 7) belongs to the medivac group only.
        let mut perturbed = logits.clone();
        perturbed[6] += noise[0];
        perturbed[7] += noise[1];
        let after = mask_policy(&perturbed, marine, InputKind::Logits).unwrap();
        prop_assert_eq!(base.probs, after.probs);
    }

    #[test]
    fn sampling_never_picks_unavailable(
        logits in prop::collection::vec(-3.0f64..3.0, 10),
        mask in mask_strategy(10),
        seed in any::<u64>(),
    ) {
        let p = mask_policy(&logits, &mask, InputKind::Logits).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..10_000 {
            prop_assert!(mask.get(p.sample(&mut rng)));
        }
    }

    #[test]
    fn dynamic_never_exceeds_static(
        stat in mask_strategy(11),
        env in prop::collection::vec(any::<bool>(), 11),
    ) {
        if let Ok(d) = uas_core::action_space::dynamic_mask(&stat, &env) {
            prop_assert!(d.is_subset_of(&stat));
        }
    }
}
