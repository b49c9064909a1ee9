mod support;

use std::collections::BTreeSet;

use glitchlab::detect::exhaustive_scan;
use glitchlab::features::KeyLayerSet;
use glitchlab::model::{synth_copy_model, ModelConfig, SynthParams, TransformerModel};
use glitchlab::repair::*;
use glitchlab::TokenId;
use proptest::prelude::*;
use support::brute_neuron_sets;

fn hand_table() -> Vec<Vec<f64>> {
    vec![
        vec![2.0, 0.5, 1.0, 1.5],
        vec![1.5, 0.0, 3.0, 0.9],
        vec![3.0, -1.0, 0.2, 2.0],
        vec![1.1, 1.0, 0.8, 1.2],
        vec![5.0, 0.3, 1.0, 1.3],
    ]
}

#[test]
fn hand_table_sets() {
    let t = hand_table();
    assert_eq!(neuron_sets(&t, 1.0, 0.99).unwrap(), (vec![0], vec![1]));
    assert_eq!(neuron_sets(&t, 1.0, 0.8).unwrap(), (vec![0, 3], vec![1]));
    assert_eq!(neuron_sets(&t, 1.0, 0.99).unwrap(), brute_neuron_sets(&t, 1.0, 0.99));
}

#[test]
fn two_neuron_gaps() {
    let normal = vec![vec![2.0, 0.5], vec![4.0, 0.5]];
    let profile = profile_from_tables(&[1], &[normal], 1.0, 0.99, vec![]).unwrap();
    assert_eq!((profile.layers[0].up_set.clone(), profile.layers[0].down_set.clone()), (vec![0], vec![1]));
    let glitch = vec![vec![1.0, 2.0], vec![2.0, 4.0]];
    let c = RepairCoefficients { k1: 2.0, b1: 0.5, k2: 0.5, b2: 1.0 };
    let f = compute_adjustments(&profile, &[glitch], c).unwrap();
    assert!((f.delta_up.unwrap() - 1.5).abs() < 1e-12);
    assert!((f.delta_down.unwrap() - 6.0).abs() < 1e-12);
    assert!((f.beta - 3.5).abs() < 1e-12);
    assert!((f.alpha - 4.0).abs() < 1e-12);
}

#[test]
fn zero_normal_mean_is_guarded() {
    let normal = vec![vec![0.0], vec![0.0]];
    let profile = profile_from_tables(&[0], &[normal], 1.0, 0.99, vec![]).unwrap();
    let c = RepairCoefficients { k2: 1e-6, ..RepairCoefficients::default() };
    let f = compute_adjustments(&profile, &[vec![vec![2.0]]], c).unwrap();
    assert!((f.delta_down.unwrap() - 2.0 / RATIO_EPSILON).abs() < 1e-6);
    assert!((f.alpha - 2.0).abs() < 1e-9);
}

proptest! {
    #[test]
    fn sets_match_brute_force(
        table in prop::collection::vec(prop::collection::vec(-2.0f64..3.0, 6), 1..12),
        m in -1.0f64..2.0,
        quota in 0.5f64..1.0,
    ) {
        let (up, down) = neuron_sets(&table, m, quota).unwrap();
        prop_assert_eq!((up.clone(), down.clone()), brute_neuron_sets(&table, m, quota));
        let u: BTreeSet<_> = up.into_iter().collect();
        prop_assert!(down.iter().all(|i| !u.contains(i)));
    }
}

fn small_scenario() -> (TransformerModel, BTreeSet<TokenId>, Vec<TokenId>) {
    let cfg = ModelConfig { vocab_size: 128, ..ModelConfig::default() };
    let m = synth_copy_model(&cfg, &SynthParams { n_glitch: 25, ..SynthParams::default() }).unwrap();
    let (scan, _) = exhaustive_scan(&m, 8).unwrap();
    (m, scan.glitch(), scan.normal_set)
}

#[test]
fn profile_is_read_only_and_satisfies_quotas() {
    let (m, _, normal) = small_scenario();
    let before = m.clone();
    let kl = KeyLayerSet::downstream_band(4).unwrap();
    let p = profile_normal(&m, &normal, 0.3, 1.0, &kl, 3).unwrap();
    assert_eq!(m, before);
    let tables = activation_tables(&m, &p.sample_ids, &p.key_layers()).unwrap();
    for (lp, table) in p.layers.iter().zip(&tables) {
        for &i in &lp.up_set {
            let above = table.iter().filter(|r| r[i] > p.m).count();
            assert!(above as f64 >= p.up_quota * table.len() as f64);
        }
        for &i in &lp.down_set {
            assert!(table.iter().all(|r| r[i] <= p.m));
        }
    }
    assert!(profile_normal(&m, &normal[..5], 0.3, 1.0, &kl, 3).is_err());
}

#[test]
fn repair_rate_recounts_from_records() {
    let (m, glitch, normal) = small_scenario();
    let kl = KeyLayerSet::downstream_band(4).unwrap();
    let p = profile_normal(&m, &normal, 0.1, 1.0, &kl, 3).unwrap();
    let g10: BTreeSet<TokenId> = glitch.iter().copied().take(10).collect();
    let f = adapt_factors(&m, &p, &glitch.iter().copied().collect::<Vec<_>>(), 0.2, 3, RepairCoefficients::default()).unwrap();
    let r = repair_all(&m, &g10, &p, f, 8, "adaptive").unwrap();
    assert_eq!(r.total_glitch, 10);
    let recount = r.records.iter().filter(|x| glitchlab::oracle::echo_matches(x.token, &x.after)).count();
    assert_eq!(r.repaired_tokens, recount);
    assert_eq!(r.repair_rate, Some(recount as f64 / 10.0));

    let id = repair_all(&m, &glitch, &p, AdjustmentFactors::identity(), 8, "identity").unwrap();
    assert!(id.records.iter().all(|x| x.before == x.after && !x.repaired));
    assert_eq!(id.repair_rate, Some(0.0));

    let empty = repair_all(&m, &BTreeSet::new(), &p, f, 8, "adaptive").unwrap();
    assert_eq!(empty.repair_rate, None);
}
