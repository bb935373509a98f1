//! Round protocol properties on small configurations.

use fedicra_core::federation::*;
use fedicra_core::losses::{GatedCrfConfig, LossWeights};
use fedicra_core::params::{Param, ParamSet};
use fedicra_core::rng::{stream, Purpose};
use fedicra_core::segnet::UNetConfig;
use fedicra_core::synthdata::*;
use fedicra_core::tensor::Tensor;
use fedicra_core::treefilter::AffinityConfig;
use proptest::prelude::*;
use rand::Rng;

fn sites(k: usize, n_train: usize) -> Vec<SiteData> {
    let kinds = [AnnotationType::Scribble1, AnnotationType::Point, AnnotationType::BBox, AnnotationType::Block];
    (0..k)
        .map(|i| {
            generate_site(&SiteSpec {
                site_id: i,
                n_train,
                n_test: 2,
                size: 16,
                task: Task::Nested,
                shift: DomainShift::preset(i),
                annotation: kinds[i % 4],
                seed: 5,
            })
            .unwrap()
        })
        .collect()
}

fn config(k: usize, ablation: Ablation, rounds: usize) -> FederationConfig {
    FederationConfig {
        seed: 11,
        model: UNetConfig::scaled(1, 3, k, 4).unwrap(),
        train: TrainConfig {
            rounds,
            lr0: 1e-3,
            batch_size: 2,
            ..TrainConfig::default()
        },
        weights: LossWeights::default(),
        crf: GatedCrfConfig::default(),
        affinity: AffinityConfig::default(),
        ablation,
        eval_every: None,
    }
}

fn random_set(seed: u64, shapes: &[&[usize]]) -> ParamSet {
    let mut r = stream(seed, 0, 0, Purpose::Oracle);
    shapes
        .iter()
        .enumerate()
        .map(|(i, s)| Param {
            name: format!("p{}", i),
            value: Tensor::from_fn(s, |_| r.random_range(-1.0..1.0)),
        })
        .collect()
}

#[test]
fn weighted_average_matches_direct_sum() {
    let shapes: [&[usize]; 2] = [&[3, 2], &[4]];
    let parts: Vec<ParamSet> = (0..5).map(|s| random_set(s, &shapes)).collect();
    let counts = [3usize, 9, 1, 4, 7];
    let refs: Vec<&ParamSet> = parts.iter().collect();
    let avg = weighted_average(&refs, &counts).unwrap();
    let total: usize = counts.iter().sum();
    let flat: Vec<Vec<f64>> = parts.iter().map(|p| p.values().collect()).collect();
    for (e, got) in avg.values().enumerate() {
        let want: f64 = (0..5).map(|k| counts[k] as f64 / total as f64 * flat[k][e]).sum();
        assert!((got - want).abs() < 1e-12);
    }
    let norm: f64 = counts.iter().map(|&n| n as f64 / total as f64).sum();
    assert!((norm - 1.0).abs() < 1e-15);
    let equal = weighted_average(&refs, &[2; 5]).unwrap();
    for (e, got) in equal.values().enumerate() {
        let mean = (0..5).map(|k| flat[k][e]).sum::<f64>() / 5.0;
        assert!((got - mean).abs() < 1e-12);
    }
}

#[test]
fn mismatched_layouts_are_rejected() {
    let a = random_set(0, &[&[2]]);
    let b = random_set(1, &[&[3]]);
    assert!(weighted_average(&[&a, &b], &[1, 1]).is_err());
    assert!(adaptive_aggregate(&a, &b, &a).is_err());
}

proptest! {
    #[test]
    fn aggregation_interpolates(seed in 0u64..1000, w in proptest::collection::vec(-0.5f64..1.5, 6)) {
        let ti = random_set(seed, &[&[6]]);
        let tg = random_set(seed + 1, &[&[6]]);
        let mut ws: ParamSet = std::iter::once(Param { name: "p0".into(), value: Tensor::new(&[6], w).unwrap() }).collect();
        clip_weights(&mut ws);
        prop_assert!(ws.values().all(|v| (0.0..=1.0).contains(&v)));
        let hat = adaptive_aggregate(&ti, &tg, &ws).unwrap();
        for ((h, a), b) in hat.values().zip(ti.values()).zip(tg.values()) {
            prop_assert!(h >= a.min(b) - 1e-15 && h <= a.max(b) + 1e-15);
        }
    }
}

#[test]
fn zero_epochs_leave_parameters_unchanged() {
    let data = sites(2, 4);
    let mut cfg = config(2, Mode::FedIcra.ablation(), 1);
    cfg.train.local_epochs = 0;
    let set = SiteTrainSet::new(&data[0], &cfg).unwrap();
    let state = FederationState::new(&cfg, &[4, 4]).unwrap();
    let (out, _) = local_train(&cfg, state.global.clone(), 0, &set, 0).unwrap();
    assert_eq!(out, state.global);
    let (next, _) = run_round(&cfg, &state, &[set.clone(), SiteTrainSet::new(&data[1], &cfg).unwrap()], &Sequential).unwrap();
    for s in &next.sites {
        assert_eq!(s.phi, state.global.phi);
    }
}

#[test]
fn fixed_batch_descends() {
    let data = sites(1, 4);
    let mut cfg = config(1, Mode::FedIcra.ablation(), 1);
    cfg.train.batch_size = 4;
    let set = SiteTrainSet::new(&data[0], &cfg).unwrap();
    let state = FederationState::new(&cfg, &[4]).unwrap();
    cfg.train.local_epochs = 1;
    let (_, first) = local_train(&cfg, state.global.clone(), 0, &set, 0).unwrap();
    cfg.train.local_epochs = 50;
    let (_, trace) = local_train(&cfg, state.global.clone(), 0, &set, 0).unwrap();
    let initial = first.epochs[0].total;
    let last = trace.epochs.last().unwrap().total;
    assert!(last < initial, "{} !< {}", last, initial);
}

#[test]
fn empty_site_is_an_error() {
    let cfg = config(2, Mode::FedIcra.ablation(), 1);
    assert!(FederationState::new(&cfg, &[3, 0]).is_err());
}

#[test]
fn single_site_round_equals_local_training() {
    let data = sites(1, 4);
    let cfg = config(1, Mode::FedIcra.ablation(), 3);
    let set = vec![SiteTrainSet::new(&data[0], &cfg).unwrap()];
    let mut state = FederationState::new(&cfg, &[4]).unwrap();
    for t in 0..3 {
        let (local, _) = local_train(&cfg, state.global.clone(), 0, &set[0], t).unwrap();
        let (next, record) = run_round(&cfg, &state, &set, &Sequential).unwrap();
        assert_eq!(record.sites[0].aa_epochs, 0);
        assert_eq!(next.global, local);
        state = next;
    }
}

#[test]
fn rounds_are_deterministic() {
    let data = sites(2, 4);
    let cfg = config(2, Mode::FedIcra.ablation(), 2);
    let run = || run_federation(&cfg, &data, &Sequential, |_, _| Ok(())).unwrap();
    assert_eq!(run(), run());
}

#[test]
fn all_flags_off_is_fedavg() {
    let data = sites(2, 4);
    let off = Ablation { aa: false, scr: false, mstree: false, gcrf: false };
    let a = run_federation(&config(2, off, 2), &data, &Sequential, |_, _| Ok(())).unwrap();
    let b = run_federation(&config(2, Mode::FedAvg.ablation(), 2), &data, &Sequential, |_, _| Ok(())).unwrap();
    assert_eq!(a, b);
}

#[test]
fn untrained_report_is_finite() {
    let data = sites(2, 2);
    let (_, report) = run_federation(&config(2, Mode::FedIcra.ablation(), 0), &data, &Sequential, |_, _| Ok(())).unwrap();
    assert!(report.rounds.is_empty());
    assert!(report.average_dsc.is_finite() && report.average_hd95.is_finite());
    for s in &report.sites {
        assert!(s.dsc.is_finite() && s.hd95.is_finite());
    }
}

#[test]
fn aggregation_weights_stay_clipped() {
    let data = sites(2, 4);
    let cfg = config(2, Mode::FedIcra.ablation(), 3);
    let (state, report) = run_federation(&cfg, &data, &Sequential, |_, _| Ok(())).unwrap();
    for s in &state.sites {
        assert!(s.w.values().all(|v| (0.0..=1.0).contains(&v)));
    }
    // weights move once the heads differ
    assert!(report.rounds[1].sites.iter().all(|s| s.aa_epochs >= 1));
    assert!(report.max_simplex_error < 1e-9);
}
