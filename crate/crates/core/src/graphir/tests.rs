use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::exec::exec_op;
use super::random::random_graph;
use super::*;
use crate::autochunk::{execute_chunked, ChunkPlan, ChunkRegion, PlannedRegion};
use crate::evoformer::{evoformer_block, random_inputs, BlockParams, EvoConfig};
use crate::tensor::{self, Tensor, LN_EPS};

fn measured_peak(g: &Graph, b: &Bindings) -> u64 {
    execute(g, b).unwrap().stats.peak_bytes
}

#[test]
fn relu_chain_peak_is_2048() {
    let mut b = GraphBuilder::new();
    let x = b.input("x", &[128]);
    let y = b.op(Op::Relu, &[x]).unwrap();
    let z = b.op(Op::Scale { factor: 2.0 }, &[y]).unwrap();
    let g = b.build(&[z]).unwrap();
    let prof = estimate_memory(&g, None).unwrap();
    assert_eq!(prof.footprints, vec![1024, 2048, 2048]);
    assert_eq!(prof.peak_bytes, 2048);
    let binds = Bindings::new().with("x", Tensor::rand_uniform(&[128], 1.0, 3));
    assert_eq!(measured_peak(&g, &binds), 2048);
}

#[test]
fn inputs_only_graph_holds_all_inputs() {
    let mut b = GraphBuilder::new();
    let x = b.input("x", &[3, 4]);
    let y = b.input("y", &[5]);
    let g = b.build(&[x, y]).unwrap();
    assert_eq!(estimate_memory(&g, None).unwrap().peak_bytes, (12 + 5) * 8);
    let binds = Bindings::new().with("x", Tensor::zeros(&[3, 4])).with("y", Tensor::zeros(&[5]));
    assert_eq!(measured_peak(&g, &binds), (12 + 5) * 8);
}

#[test]
fn outer_rowsum_peak() {
    let mut b = GraphBuilder::new();
    let x1 = b.input("x1", &[128]);
    let x2 = b.input("x2", &[128]);
    let y = b.op(Op::Outer, &[x1, x2]).unwrap();
    let z = b.op(Op::Sum { axis: 1 }, &[y]).unwrap();
    let g = b.build(&[z]).unwrap();
    let prof = estimate_memory(&g, None).unwrap();
    assert_eq!((prof.peak_bytes, prof.peak_node), (133_120, y));
    let binds = Bindings::new()
        .with("x1", Tensor::rand_uniform(&[128], 1.0, 1))
        .with("x2", Tensor::rand_uniform(&[128], 1.0, 2));
    assert_eq!(measured_peak(&g, &binds), 133_120);
    // Reporting in two-byte elements scales every footprint.
    let bf = estimate_memory_with(&g, None, 2).unwrap();
    assert_eq!(bf.peak_bytes, 133_120 / 4);
    assert_eq!(prof.with_element_size(2), bf);
}

#[test]
fn footprint_stats_edges() {
    let mut b = GraphBuilder::new();
    let x = b.input("x", &[4]);
    let g = b.build(&[x]).unwrap();
    let prof = estimate_memory(&g, None).unwrap();
    assert_eq!(footprint_stats(&prof, 0.2), 0.0);
    assert_eq!(footprint_stats(&prof, 1.0 + 1e-9), 1.0);
}

fn traced(seed: u64, n_seq: usize, n_res: usize) -> (EvoConfig, BlockParams, Graph, Bindings) {
    let cfg = EvoConfig { n_seq, n_res, ..EvoConfig::default() };
    let p = BlockParams::random(&cfg, seed).unwrap();
    let g = trace_evoformer(&cfg, &p).unwrap();
    let (m, z) = random_inputs(&cfg, seed);
    let binds = Bindings::from_params(&p).with("m", m).with("z", z);
    (cfg, p, g, binds)
}

#[test]
fn traced_block_matches_module() {
    let (cfg, p, g, binds) = traced(23, 4, 6);
    let (m, z) = random_inputs(&cfg, 23);
    let (m2, z2) = evoformer_block(&m, &z, &p).unwrap();
    let run = execute(&g, &binds).unwrap();
    assert!(run.outputs[0].max_abs_diff(&m2).unwrap() <= 1e-12);
    assert!(run.outputs[1].max_abs_diff(&z2).unwrap() <= 1e-12);
    assert!(g.len() > 9);
    assert!(g.compute_len() > 9);
    let names: Vec<String> = g
        .inputs
        .iter()
        .map(|&i| match &g.node(i).op {
            Op::Input { name } => name.clone(),
            op => panic!("graph input is {}", op.kind()),
        })
        .collect();
    assert_eq!(names, ["m", "z"]);
    assert_eq!(g.outputs.len(), 2);
    assert_eq!(run.stats.peak_bytes, estimate_memory(&g, None).unwrap().peak_bytes);
    assert_eq!(run.footprints, estimate_memory(&g, None).unwrap().footprints);
}

#[test]
fn graph_json_round_trip() {
    let (_, _, g, _) = traced(5, 2, 3);
    let s = g.to_json().unwrap();
    assert!(s.contains(GRAPH_SCHEMA));
    let back = Graph::from_json(&s).unwrap();
    assert_eq!(back, g);
    for (a, b) in back.nodes.iter().zip(&g.nodes) {
        assert_eq!(a, b);
    }
}

#[test]
fn malformed_json_reports_location() {
    let err = Graph::from_json("{\"schema\": \"evoshard.graph/v1\", \"nodes\": [").unwrap_err();
    match err {
        crate::Error::Parse(msg) => assert!(msg.contains("line"), "{msg}"),
        e => panic!("unexpected {e}"),
    }
    let (_, _, g, _) = traced(5, 2, 3);
    let wrong = g.to_json().unwrap().replace(GRAPH_SCHEMA, "other/v9");
    assert!(matches!(Graph::from_json(&wrong), Err(crate::Error::Parse(_))));
}

#[test]
fn forward_reference_is_rejected() {
    let mut b = GraphBuilder::new();
    let x = b.input("x", &[4]);
    let y = b.op(Op::Relu, &[x]).unwrap();
    let z = b.op(Op::Sigmoid, &[y]).unwrap();
    let mut g = b.build(&[z]).unwrap();
    g.nodes[1].inputs = vec![2];
    assert!(matches!(g.validate(), Err(crate::Error::Graph(_))));
    let s = serde_json::to_string(&serde_json::json!({
        "schema": GRAPH_SCHEMA,
        "nodes": serde_json::to_value(&g.nodes).unwrap(),
        "inputs": g.inputs,
        "outputs": g.outputs,
    }))
    .unwrap();
    assert!(matches!(Graph::from_json(&s), Err(crate::Error::Graph(_))));
}

#[test]
fn merge_gemm_merges_qkv() {
    let (_, _, g, binds) = traced(29, 4, 6);
    let fused = fuse_merge_gemm(&g).unwrap();
    assert!(fused.len() <= g.len());
    let merged = fused
        .nodes
        .iter()
        .find(|n| matches!(&n.op, Op::Const { names } if names.iter().any(|s| s == "msa_row.q.w")))
        .expect("merged weight");
    let Op::Const { names } = &merged.op else { unreachable!() };
    assert_eq!(names, &["msa_row.q.w", "msa_row.k.w", "msa_row.v.w"]);
    let consumers = fused.consumers();
    let lin = consumers[merged.id][0];
    assert_eq!(fused.node(lin).op, Op::Linear);
    let slices: Vec<&Node> = consumers[lin].iter().map(|&c| fused.node(c)).collect();
    assert_eq!(slices.len(), 3);
    assert!(slices.iter().all(|n| matches!(n.op, Op::Slice { .. })));

    let a = execute(&g, &binds).unwrap();
    let b = execute(&fused, &binds).unwrap();
    for (x, y) in a.outputs.iter().zip(&b.outputs) {
        assert!(x.max_abs_diff(y).unwrap() <= 1e-12);
    }
    assert!(estimate_memory(&fused, None).unwrap().peak_bytes <= estimate_memory(&g, None).unwrap().peak_bytes);
}

#[test]
fn merge_gemm_without_pattern_is_identity() {
    let mut b = GraphBuilder::new();
    let x = b.input("x", &[3, 4]);
    let w = b.constant("w", &[4, 2]);
    let y = b.op(Op::Linear, &[x, w]).unwrap();
    let g = b.build(&[y]).unwrap();
    assert_eq!(fuse_merge_gemm(&g).unwrap(), g);
    assert_eq!(fuse_elementwise(&g).unwrap(), g);
}

#[test]
fn elementwise_chain_collapses() {
    let mut b = GraphBuilder::new();
    let x = b.input("x", &[4, 5]);
    let c = b.constant("c", &[5]);
    let a = b.op(Op::Add, &[x, c]).unwrap();
    let s = b.op(Op::Sigmoid, &[a]).unwrap();
    let m = b.op(Op::Mul, &[s, x]).unwrap();
    let g = b.build(&[m]).unwrap();
    let f = fuse_elementwise(&g).unwrap();
    assert_eq!(f.compute_len(), 1);
    assert!(matches!(f.node(*f.outputs.first().unwrap()).op, Op::FusedElementwise { .. }));
    let binds =
        Bindings::new().with("x", Tensor::rand_uniform(&[4, 5], 1.0, 1)).with("c", Tensor::rand_uniform(&[5], 1.0, 2));
    let (r0, r1) = (execute(&g, &binds).unwrap(), execute(&f, &binds).unwrap());
    assert!(r0.outputs[0].max_abs_diff(&r1.outputs[0]).unwrap() <= 1e-12);
    assert!(r1.stats.peak_bytes < r0.stats.peak_bytes);
    assert_eq!(r1.stats.peak_bytes, estimate_memory(&f, None).unwrap().peak_bytes);
}

#[test]
fn matmul_is_a_fusion_barrier() {
    let mut b = GraphBuilder::new();
    let x = b.input("x", &[4, 4]);
    let a = b.op(Op::Sigmoid, &[x]).unwrap();
    let mm = b.op(Op::Matmul, &[a, x]).unwrap();
    let r = b.op(Op::Relu, &[mm]).unwrap();
    let g = b.build(&[r]).unwrap();
    let f = fuse_elementwise(&g).unwrap();
    assert_eq!(f, g);
}

#[test]
fn fusion_on_traced_block_preserves_outputs() {
    let (_, _, g, binds) = traced(29, 4, 6);
    let base = execute(&g, &binds).unwrap();
    let both = fuse_elementwise(&fuse_merge_gemm(&g).unwrap()).unwrap();
    both.validate().unwrap();
    assert!(both.nodes.iter().any(|n| matches!(n.op, Op::FusedSoftmax { .. })));
    assert!(both.nodes.iter().any(|n| matches!(n.op, Op::FusedElementwise { .. })));
    let run = execute(&both, &binds).unwrap();
    for (x, y) in base.outputs.iter().zip(&run.outputs) {
        assert!(x.max_abs_diff(y).unwrap() <= 1e-12);
    }
    let (p0, p1) = (estimate_memory(&g, None).unwrap().peak_bytes, estimate_memory(&both, None).unwrap().peak_bytes);
    assert!(p1 <= p0);
    assert_eq!(run.stats.peak_bytes, p1);
}

#[test]
fn estimator_matches_measurement_on_random_graphs() {
    for seed in 0..24 {
        let rg = random_graph(seed).unwrap();
        let est = estimate_memory(&rg.graph, None).unwrap();
        let run = execute(&rg.graph, &rg.bindings).unwrap();
        assert_eq!(run.footprints, est.footprints, "seed {seed}");
        assert_eq!(run.stats.peak_bytes, est.peak_bytes, "seed {seed}");
    }
}

/// Every single-node region along every free dim, at a few chunk sizes.
#[test]
fn estimator_matches_measurement_under_single_node_regions() {
    for seed in 0..12 {
        let rg = random_graph(seed).unwrap();
        let g = &rg.graph;
        let full = execute(g, &rg.bindings).unwrap();
        for id in 0..g.len() {
            let n = g.node(id);
            if n.op.is_source() {
                continue;
            }
            for d in 0..n.shape.len() {
                let Ok(r) = ChunkRegion::new(g, id, id, [(id, d)].into()) else { continue };
                for s in [1, 2, 3] {
                    let chunk_size = s.min(r.extent);
                    let plan =
                        ChunkPlan { regions: vec![PlannedRegion { region: r.clone(), chunk_size }], log: vec![] };
                    let est = estimate_memory(g, Some(&plan)).unwrap();
                    let run = execute_chunked(g, &plan, &rg.bindings).unwrap();
                    assert_eq!(run.footprints, est.footprints, "seed {seed} node {id} dim {d}");
                    assert_eq!(run.stats.peak_bytes, est.peak_bytes);
                    for (x, y) in full.outputs.iter().zip(&run.outputs) {
                        assert!(x.max_abs_diff(y).unwrap() <= 1e-12);
                    }
                }
            }
        }
    }
}

/// An op with random operand shapes drawn for `kind`.
fn op_case(kind: usize, rng: &mut ChaCha8Rng) -> (Op, Vec<Vec<usize>>) {
    let mut e = || rng.gen_range(1..=5usize);
    let (a, b, c, d) = (e(), e(), e(), e());
    match kind {
        0 => (Op::Add, vec![vec![a, b, c], vec![b, c]]),
        1 => (Op::Mul, vec![vec![a, 1, c], vec![a, b, c]]),
        2 => (Op::Sigmoid, vec![vec![a, b]]),
        3 => (Op::Relu, vec![vec![a, b, c]]),
        4 => (Op::Scale { factor: 0.7 }, vec![vec![a, b]]),
        5 => (Op::Matmul, vec![vec![d, a, b], vec![b, c]]),
        6 => (Op::Matmul, vec![vec![d, 1, a, b], vec![c, b, a]]),
        7 => (Op::Linear, vec![vec![a, b, c], vec![c, d], vec![d]]),
        8 => (Op::LayerNorm { eps: LN_EPS }, vec![vec![a, b, c], vec![c], vec![c]]),
        9 => (Op::Softmax { axis: 1 }, vec![vec![a, b, c]]),
        10 => (Op::FusedSoftmax { axis: 2, mask: true, bias: true }, vec![vec![a, b, c], vec![a, 1, c], vec![b, c]]),
        11 => (Op::Mean { axis: 1 }, vec![vec![a, b, c]]),
        12 => (Op::Sum { axis: 0 }, vec![vec![a, b]]),
        13 => (Op::Permute { perm: vec![2, 0, 1] }, vec![vec![a, b, c]]),
        14 => (Op::Reshape { shape: vec![a, b * c] }, vec![vec![a, b, c]]),
        15 => (Op::Reshape { shape: vec![a, b, c, 1] }, vec![vec![a, b * c]]),
        16 => (Op::Concat, vec![vec![a, b], vec![a, c]]),
        17 => (Op::Slice { axis: 0, start: 0, end: 1 }, vec![vec![a, b + 1]]),
        18 => (Op::Outer, vec![vec![a, b], vec![a, c]]),
        19 => (Op::OuterMean, vec![vec![a, b, c], vec![a, d, 2]]),
        20 => (Op::ContractK, vec![vec![a, b, c], vec![d, b, c]]),
        _ => (
            Op::FusedElementwise {
                program: vec![
                    Instr { kind: EwKind::Add, args: vec![Operand::Input(0), Operand::Input(1)] },
                    Instr { kind: EwKind::Sigmoid, args: vec![Operand::Tmp(0)] },
                    Instr { kind: EwKind::Mul, args: vec![Operand::Tmp(1), Operand::Input(0)] },
                ],
            },
            vec![vec![a, b], vec![b]],
        ),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    /// Slicing a free output dim and the inputs it flows from reproduces the
    /// slice of the full output.
    #[test]
    fn dim_flow_is_sound(kind in 0usize..22, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (op, shapes) = op_case(kind, &mut rng);
        let ins: Vec<Tensor> = shapes.iter().map(|s| Tensor::rand_uniform(s, 1.0, rng.gen())).collect();
        let refs: Vec<&Tensor> = ins.iter().collect();
        let shape_refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
        let out_shape = infer_shape(&op, &shape_refs).unwrap();
        let flow = dim_flow(&op, &shape_refs, &out_shape);
        let full = exec_op(&op, &refs, &out_shape).unwrap();
        for d in 0..out_shape.len() {
            let Some(src) = flow.sources(d) else { continue };
            if src.is_empty() {
                continue;
            }
            let e = out_shape[d];
            let lo = rng.gen_range(0..e);
            let hi = rng.gen_range(lo + 1..=e);
            let sliced: Vec<Tensor> = ins
                .iter()
                .enumerate()
                .map(|(k, t)| match flow.input_dim(d, k) {
                    Some(dk) => tensor::slice_axis(t, dk, lo, hi).unwrap(),
                    None => t.clone(),
                })
                .collect();
            let srefs: Vec<&Tensor> = sliced.iter().collect();
            let mut part_shape = out_shape.clone();
            part_shape[d] = hi - lo;
            let part = exec_op(&op, &srefs, &part_shape).unwrap();
            let want = tensor::slice_axis(&full, d, lo, hi).unwrap();
            prop_assert!(part.max_abs_diff(&want).unwrap() <= 1e-12, "{} dim {d}", op.kind());
        }
        // Compute dims are never free.
        for (d, s) in flow.out.iter().enumerate() {
            prop_assert_eq!(flow.is_free(d), matches!(s, DimSource::Flow(_)));
        }
    }

    #[test]
    fn random_graphs_round_trip_json(seed in 0u64..500) {
        let rg = random_graph(seed).unwrap();
        let back = Graph::from_json(&rg.graph.to_json().unwrap()).unwrap();
        prop_assert_eq!(back, rg.graph);
    }

    #[test]
    fn fusion_preserves_random_graphs(seed in 0u64..300) {
        let rg = random_graph(seed).unwrap();
        let f = fuse_elementwise(&fuse_merge_gemm(&rg.graph).unwrap()).unwrap();
        f.validate().unwrap();
        let (a, b) = (execute(&rg.graph, &rg.bindings).unwrap(), execute(&f, &rg.bindings).unwrap());
        for (x, y) in a.outputs.iter().zip(&b.outputs) {
            prop_assert!(x.max_abs_diff(y).unwrap() <= 1e-12);
        }
        prop_assert!(estimate_memory(&f, None).unwrap().peak_bytes <= estimate_memory(&rg.graph, None).unwrap().peak_bytes);
        prop_assert_eq!(b.stats.peak_bytes, estimate_memory(&f, None).unwrap().peak_bytes);
    }
}
