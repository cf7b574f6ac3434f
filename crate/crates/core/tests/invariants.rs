use std::collections::HashSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rcnas::cellgraph::{derive_discrete, ArchParams, CellKind, NetworkPlan};
use rcnas::costmodel::{cost_gradient, expected_cost, CostScope, CostTable};
use rcnas::data::{epoch_batches, split_indices, BatchStream, SplitSpec};
use rcnas::opset::{OpKind, CELL_OPS, CONNECTION_OPS};
use rcnas::oracle::{pareto_front, MicroSpace, ScoredArch};
use rcnas::scalar::softmax;

fn subset(all: &[OpKind], mask: u32) -> Vec<OpKind> {
    all.iter().enumerate().filter(|(i, _)| mask >> i & 1 == 1).map(|(_, &k)| k).collect()
}

/// Small plans: one reduction cell, optional Zero, at least one real op.
fn micro_plan() -> impl Strategy<Value = NetworkPlan> {
    (4usize..=5, 1u32..(1 << 7), any::<bool>(), 1u32..(1 << 4)).prop_map(|(n_nodes, ops, zero, conn)| {
        let mut cell_ops = subset(&CELL_OPS[1..], ops);
        if zero {
            cell_ops.insert(0, OpKind::Zero);
        }
        NetworkPlan {
            n_cells: 1,
            init_channels: 4,
            levels: 1,
            n_nodes,
            image_size: 8,
            n_classes: 2,
            cell_ops,
            connection_ops: subset(&CONNECTION_OPS, conn),
            ..NetworkPlan::default()
        }
    })
}

/// Counts discrete cells by brute force: every predecessor is either dropped
/// or given one non-zero op, and a node is legal when it keeps min(j, 2) of
/// them (one for the single-input template).
fn brute_count(n_inputs: usize, n_nodes: usize, ops: &[OpKind]) -> u128 {
    let k = ops.iter().filter(|&&o| o != OpKind::Zero).count() as u128;
    let keep = |j: usize| if n_inputs == 1 { 1 } else { j.min(2) };
    let mut total = 1u128;
    for j in n_inputs..n_nodes - 1 {
        let mut legal = 0u128;
        for code in 0..(k + 1).pow(j as u32) {
            let (mut c, mut kept) = (code, 0);
            for _ in 0..j {
                kept += (c % (k + 1) != 0) as usize;
                c /= k + 1;
            }
            legal += (kept == keep(j)) as u128;
        }
        total *= legal;
    }
    total
}

fn scored(costs: Vec<(u64, u64, i32)>) -> Vec<ScoredArch> {
    let plan = NetworkPlan { n_cells: 1, n_nodes: 4, ..NetworkPlan::default() };
    let arch = MicroSpace::new(plan).enumerate().unwrap().next().unwrap();
    costs
        .into_iter()
        .map(|(p, f, s)| ScoredArch { arch: arch.clone(), cost: [p, f], score: s as f64 / 4.0 })
        .collect()
}

fn reference_front(items: &[ScoredArch]) -> Vec<usize> {
    let dom = |a: &ScoredArch, b: &ScoredArch| {
        let ge = a.cost[0] <= b.cost[0] && a.cost[1] <= b.cost[1] && a.score >= b.score;
        ge && (a.cost != b.cost || a.score != b.score)
    };
    (0..items.len()).filter(|&i| !items.iter().any(|o| dom(o, &items[i]))).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_is_a_distribution(v in prop::collection::vec(-30.0f64..30.0, 1..10), shift in -50.0f64..50.0) {
        let p = softmax(&v);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&x| x > 0.0));
        let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
        for (a, b) in p.iter().zip(softmax(&shifted)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn expected_cost_is_bounded(plan in micro_plan(), seed in any::<u64>(), scale in 0.1f64..5.0) {
        let space = plan.space().unwrap();
        let table = CostTable::new(&plan).unwrap();
        let theta = ArchParams::<f64>::random(&space, &plan.kinds(), scale, &mut ChaCha8Rng::seed_from_u64(seed));
        let full = expected_cost(&theta, &table, &space, CostScope::FullDag).unwrap();
        let top = expected_cost(&theta, &table, &space, CostScope::TopK).unwrap();
        let (lo, hi) = table.full_dag_range();
        let fixed = plan.fixed_costs();
        for m in 0..2 {
            prop_assert!(full[m] >= lo[m] as f64 * (1.0 - 1e-12) && full[m] <= hi[m] as f64 * (1.0 + 1e-12));
            prop_assert!(top[m] <= full[m] * (1.0 + 1e-12));
            prop_assert!(top[m] >= fixed[m] as f64 * (1.0 - 1e-12));
        }
        let single = expected_cost(&theta.cast::<f32>(), &table, &space, CostScope::FullDag).unwrap();
        for m in 0..2 {
            prop_assert!((single[m] as f64 - full[m]).abs() <= 1e-4 * full[m]);
        }
    }

    #[test]
    fn enumeration_is_complete(plan in micro_plan()) {
        let space = plan.space().unwrap();
        let expected: u128 = plan
            .kinds()
            .iter()
            .map(|&k| {
                let t = space.template(k);
                brute_count(t.n_inputs, t.n_nodes, &t.op_set)
            })
            .product();
        let micro = MicroSpace { plan: plan.clone(), ceiling: u64::MAX };
        prop_assert_eq!(micro.count().unwrap(), expected);
        let mut seen = HashSet::new();
        for arch in micro.enumerate().unwrap() {
            arch.validate_for(&space, &plan.kinds()).unwrap();
            prop_assert!(seen.insert(arch.hash()));
        }
        prop_assert_eq!(seen.len() as u128, expected);
    }

    #[test]
    fn saturated_logits_round_trip(plan in micro_plan(), pick in any::<prop::sample::Index>()) {
        let space = plan.space().unwrap();
        let table = CostTable::new(&plan).unwrap();
        let mut all = MicroSpace { plan: plan.clone(), ceiling: u64::MAX }.enumerate().unwrap();
        let n = all.len();
        let arch = &all.nth(pick.index(n)).unwrap();
        let expressible = plan.cell_ops.len() > 1;
        let theta = match arch.saturated_logits::<f64>(&space, 40.0) {
            Ok(t) => t,
            Err(_) if !expressible => return Ok(()),
            Err(e) => panic!("{e}"),
        };
        prop_assert_eq!(&derive_discrete(&theta, &space), arch);
        let phi = expected_cost(&theta, &table, &space, CostScope::TopK).unwrap();
        let exact = table.exact(arch, &space).unwrap();
        for m in 0..2 {
            prop_assert!((phi[m] - exact[m] as f64).abs() <= 1e-9 * exact[m] as f64);
        }
        let back = derive_discrete(&theta, &space);
        prop_assert_eq!(back.to_json(), arch.to_json());
    }

    #[test]
    fn pareto_front_matches_reference(costs in prop::collection::vec((0u64..6, 0u64..6, -4i32..4), 0..40)) {
        let items = scored(costs);
        prop_assert_eq!(pareto_front(&items), reference_front(&items));
    }

    #[test]
    fn split_is_disjoint_and_exhaustive(n in 2usize..500, fraction in 0.01f64..0.99, seed in any::<u64>()) {
        let spec = SplitSpec { fraction, seed };
        let (a, b) = split_indices(n, &spec).unwrap();
        prop_assert_eq!(a.len(), (n as f64 * fraction).round() as usize);
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(split_indices(n, &spec).unwrap(), (a, b));
    }

    #[test]
    fn batches_are_deterministic(n in 1usize..300, bs in 1usize..64, seed in any::<u64>(), steps in 1usize..50) {
        prop_assume!(bs <= n);
        let mut s1 = BatchStream::new(n, bs, seed).unwrap();
        let mut s2 = s1.clone();
        for _ in 0..steps {
            prop_assert_eq!(s1.next_batch(), s2.next_batch());
        }
        for epoch in 0..3 {
            let batches = epoch_batches(n, bs, epoch, seed);
            prop_assert_eq!(batches.len(), n / bs);
            let mut seen = HashSet::new();
            for b in &batches {
                prop_assert_eq!(b.len(), bs);
                for &i in b {
                    prop_assert!(i < n && seen.insert(i));
                }
            }
        }
    }

    #[test]
    fn levels_do_not_leak(seed in any::<u64>(), noise in prop::collection::vec(-3.0f64..3.0, 64)) {
        let plan = NetworkPlan {
            n_cells: 5,
            init_channels: 4,
            levels: 2,
            n_nodes: 5,
            image_size: 8,
            cell_ops: vec![OpKind::Zero, OpKind::Identity, OpKind::SepConv3],
            connection_ops: vec![OpKind::GroupConv1x1G1, OpKind::GroupConv1x1G2],
            ..NetworkPlan::default()
        };
        let kinds = plan.kinds();
        prop_assert!(kinds.contains(&CellKind::Normal(0)) && kinds.contains(&CellKind::Normal(1)));
        let space = plan.space().unwrap();
        let table = CostTable::new(&plan).unwrap();
        let theta = ArchParams::<f64>::random(&space, &kinds, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let mut moved = theta.clone();
        let mut k = 0;
        for e in 0..space.template(CellKind::Normal(0)).n_edges() {
            for v in moved.edge_mut(CellKind::Normal(0), e) {
                *v += noise[k % noise.len()];
                k += 1;
            }
        }
        let (d0, d1) = (derive_discrete(&theta, &space), derive_discrete(&moved, &space));
        let (g0, g1) = (
            cost_gradient(&theta, &table, &space, CostScope::TopK).unwrap(),
            cost_gradient(&moved, &table, &space, CostScope::TopK).unwrap(),
        );
        for kind in kinds.into_iter().filter(|&k| k != CellKind::Normal(0)) {
            prop_assert_eq!(&d0.cells[&kind], &d1.cells[&kind]);
            for m in 0..2 {
                prop_assert_eq!(g0[m].edges(kind), g1[m].edges(kind));
            }
        }
    }
}
