use proptest::prelude::*;

use super::*;
use crate::dap::{dap_evoformer_block, shard, Collective, DeviceMesh};
use crate::evoformer::{random_inputs, BlockParams, EvoConfig};

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * b.abs().max(1.0)
}

#[test]
fn unit_k_at_four_devices() {
    let r = compare(&CommModel::new(1.0, 4, 4).unwrap()).unwrap();
    assert!(close(r.tp_total.unwrap(), 18.0));
    assert!(close(r.dap_total, 4.5));
    assert!(close(r.ratio.unwrap(), 4.0));
    assert_eq!(r.dap.attention_ff, 0.0);
    assert!(close(r.dap.outer_product_mean, 0.75));
    assert!(close(r.dap.triangle_update, 1.5));
    assert!(close(r.dap.transpose, 2.25));
}

#[test]
fn two_devices_and_one() {
    let r = compare(&CommModel::new(1.0, 2, 4).unwrap()).unwrap();
    assert!(close(r.tp_total.unwrap(), 12.0));
    assert!(close(r.dap_total, 4.5));
    let r = compare(&CommModel::new(1.0, 1, 4).unwrap()).unwrap();
    assert_eq!(r.tp_total, Some(0.0));
    assert_eq!(r.dap_total, 0.0);
    assert_eq!(r.ratio, None);
}

#[test]
fn tp_cannot_exceed_heads() {
    let m = CommModel::new(1.0, 8, 4).unwrap();
    assert!(matches!(tp_volume(&m), Err(crate::Error::TpScaling { devices: 8, heads: 4 })));
    let r = compare(&m).unwrap();
    assert!(r.tp_total.is_none() && r.ratio.is_none());
    assert!(r.tp_error.unwrap().contains('8'));
    assert!(close(r.dap_total, 7.0 / 8.0 * 3.0 + 12.0 * 7.0 / 64.0));
}

#[test]
fn bad_models_are_rejected() {
    assert!(CommModel::new(0.0, 2, 2).is_err());
    assert!(CommModel::new(f64::NAN, 2, 2).is_err());
    assert!(CommModel::new(1.0, 0, 2).is_err());
    assert!(CommModel::new(1.0, 2, 0).is_err());
}

#[test]
fn per_row_sizes_override_k() {
    let mut m = CommModel::new(1.0, 4, 4).unwrap();
    m.row_k.transpose = Some(2.0);
    let d = dap_volume(&m).unwrap();
    assert!(close(d.transpose, 4.5));
    assert!(close(d.outer_product_mean, 0.75));
}

#[test]
fn activation_memory_at_reference_size() {
    assert_eq!(activation_memory(384, 4, 48, 2), 21_743_271_936);
}

#[test]
fn forward_volume_matches_simulated_ledger() {
    // Every communicated activation has the same size under this config.
    let cfg = EvoConfig { n_seq: 16, n_res: 16, h_msa: 8, h_pair: 8, hidden_proj: 8, ..EvoConfig::default() };
    let k = (16 * 16 * 8 * 2) as f64;
    let p = BlockParams::random(&cfg, 3).unwrap();
    let (m, z) = random_inputs(&cfg, 3);
    for n in [2, 4] {
        let mesh = DeviceMesh::new(n).unwrap();
        let out = dap_evoformer_block(&shard(&m, 0, &mesh).unwrap(), &shard(&z, 0, &mesh).unwrap(), &p, &mesh).unwrap();
        let fwd = dap_forward_volume(&CommModel::new(k, n, 4).unwrap()).unwrap();
        for d in 0..n {
            assert_eq!(out.ledger.device(d, Collective::AllToAll).bytes as f64, fwd.transposes);
            assert_eq!(out.ledger.device(d, Collective::AllGather).bytes as f64, fwd.gathers);
        }
        // The backward pass repeats the transposes but not the gathers.
        let full = dap_volume(&CommModel::new(k, n, 4).unwrap()).unwrap();
        assert!(close(
            full.total(),
            2.0 * (fwd.transposes + fwd.gathers) - full.outer_product_mean - full.triangle_update
        ));
    }
}

#[test]
fn example_timeline_overlaps() {
    let r = compare_schedules(&example_timeline()).unwrap();
    assert_eq!(r.sync.makespan, 19.0);
    assert_eq!(r.async_.makespan, 15.0);
    let c = r.async_.events.iter().find(|e| e.id == "C").unwrap();
    assert_eq!((c.start, c.end), (0.0, 4.0));
    let v: serde_json::Value = serde_json::to_value(&r).unwrap();
    assert_eq!(v["schema"], TIMELINE_SCHEMA);
    assert_eq!(v["async"]["mode"], "async");
}

#[test]
fn malformed_timelines_are_errors() {
    use Stream::*;
    let cyc = vec![TimelineEvent::new("a", Compute, 1.0, &["b"]), TimelineEvent::new("b", Comm, 1.0, &["a"])];
    assert!(matches!(simulate_schedule(&cyc, Mode::Sync), Err(crate::Error::Schedule(_))));
    let unknown = vec![TimelineEvent::new("a", Compute, 1.0, &["x"])];
    assert!(matches!(simulate_schedule(&unknown, Mode::Async), Err(crate::Error::Schedule(_))));
    let dup = vec![TimelineEvent::new("a", Compute, 1.0, &[]), TimelineEvent::new("a", Comm, 1.0, &[])];
    assert!(simulate_schedule(&dup, Mode::Sync).is_err());
    let neg = vec![TimelineEvent::new("a", Compute, -1.0, &[])];
    assert!(simulate_schedule(&neg, Mode::Sync).is_err());
    assert_eq!(simulate_schedule(&[], Mode::Async).unwrap().makespan, 0.0);
}

fn random_dag() -> impl Strategy<Value = Vec<TimelineEvent>> {
    prop::collection::vec(
        (any::<bool>(), 0.0f64..10.0, prop::collection::vec(any::<prop::sample::Index>(), 0..3)),
        1..24,
    )
    .prop_map(|raw| {
        raw.iter()
            .enumerate()
            .map(|(i, (comm, dur, deps))| {
                let mut d: Vec<String> =
                    if i == 0 { vec![] } else { deps.iter().map(|x| format!("e{}", x.index(i))).collect() };
                d.sort();
                d.dedup();
                TimelineEvent {
                    id: format!("e{i}"),
                    stream: if *comm { Stream::Comm } else { Stream::Compute },
                    duration: *dur,
                    deps: d,
                }
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn async_never_slower(events in random_dag()) {
        let r = compare_schedules(&events).unwrap();
        prop_assert!(r.async_.makespan <= r.sync.makespan + 1e-9);
        let total: f64 = events.iter().map(|e| e.duration).sum();
        prop_assert!((r.sync.makespan - total).abs() <= 1e-9 * total.max(1.0));
        for e in &r.async_.events {
            let src = events.iter().find(|x| x.id == e.id).unwrap();
            for d in &src.deps {
                let dep = r.async_.events.iter().find(|x| &x.id == d).unwrap();
                prop_assert!(e.start >= dep.end);
            }
        }
    }

    #[test]
    fn no_comm_means_no_gain(mut events in random_dag()) {
        for e in &mut events {
            e.stream = Stream::Compute;
        }
        let r = compare_schedules(&events).unwrap();
        prop_assert_eq!(r.async_.makespan, r.sync.makespan);
    }

    #[test]
    fn dap_beats_tp(k in 1.0f64..1e9, logn in 1u32..4) {
        let n = 1usize << logn;
        let r = compare(&CommModel::new(k, n, n).unwrap()).unwrap();
        prop_assert!(r.dap_total < r.tp_total.unwrap());
    }

    #[test]
    fn volumes_grow_with_k(k in 1.0f64..1e9, f in 1.001f64..4.0, n in 2usize..9) {
        let a = compare(&CommModel::new(k, n, 8).unwrap()).unwrap();
        let b = compare(&CommModel::new(k * f, n, 8).unwrap()).unwrap();
        prop_assert!(b.dap_total > a.dap_total);
        prop_assert!(b.tp_total.unwrap() > a.tp_total.unwrap());
    }
}
