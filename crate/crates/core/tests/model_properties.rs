mod common;

use moneyfrac::model::{execute_exchange, init_world, AgentState, ModelConfig, UnmetDemandRule};
use proptest::prelude::*;

/// Literal unit-by-unit rule: both lists are served in full when their totals
/// match; otherwise the smaller list is served in full and the larger one
/// receives that many units, one at a time, each from the good whose
/// remaining demand is smallest (lowest index on ties).
fn oracle_exchange(a: &mut AgentState, b: &mut AgentState, moved: &mut [u64]) -> (u64, u64) {
    let ta: u64 = a.demand.iter().sum();
    let tb: u64 = b.demand.iter().sum();
    if ta == 0 || tb == 0 {
        return (0, 0);
    }
    let budget = ta.min(tb);
    let mut serve = |buyer: &mut AgentState, seller: &mut AgentState, total: u64| {
        let mut left = budget;
        while left > 0 {
            let j = if total == budget {
                (0..buyer.demand.len()).find(|&j| buyer.demand[j] > 0).unwrap()
            } else {
                (0..buyer.demand.len())
                    .filter(|&j| buyer.demand[j] > 0)
                    .min_by_key(|&j| (buyer.demand[j], j))
                    .unwrap()
            };
            buyer.demand[j] -= 1;
            seller.possession[j] -= 1;
            buyer.possession[j] += 1;
            moved[j] += 1;
            left -= 1;
        }
    };
    serve(a, b, ta);
    serve(b, a, tb);
    (budget, budget)
}

fn agent_pair(goods: usize) -> impl Strategy<Value = (AgentState, AgentState)> {
    let stock = proptest::collection::vec(0u64..6, goods);
    (stock.clone(), stock, proptest::collection::vec(0u64..6, goods), proptest::collection::vec(0u64..6, goods))
        .prop_map(move |(pa, pb, ra, rb)| {
            // a demand never exceeds what the partner holds
            let da: Vec<u64> = pb.iter().zip(&ra).map(|(&p, &r)| r.min(p)).collect();
            let db: Vec<u64> = pa.iter().zip(&rb).map(|(&p, &r)| r.min(p)).collect();
            let view = vec![1.0; goods];
            (
                AgentState { possession: pa, demand: da, view: view.clone(), want: 0 },
                AgentState { possession: pb, demand: db, view, want: 1 },
            )
        })
}

proptest! {
    #[test]
    fn exchange_matches_unit_by_unit_oracle((a, b) in agent_pair(6)) {
        let (mut a1, mut b1) = (a.clone(), b.clone());
        let (mut a2, mut b2) = (a.clone(), b.clone());
        let mut moved1 = vec![0; 6];
        let mut moved2 = vec![0; 6];
        let got = execute_exchange(&mut a1, &mut b1, &mut moved1).unwrap();
        let want = oracle_exchange(&mut a2, &mut b2, &mut moved2);
        prop_assert_eq!(got, want);
        prop_assert_eq!(&a1, &a2);
        prop_assert_eq!(&b1, &b2);
        prop_assert_eq!(moved1, moved2);
    }

    #[test]
    fn exchange_conserves_units((a, b) in agent_pair(5)) {
        let before: Vec<u64> = a.possession.iter().zip(&b.possession).map(|(x, y)| x + y).collect();
        let (mut a, mut b) = (a, b);
        let mut moved = vec![0; 5];
        let (ra, rb) = execute_exchange(&mut a, &mut b, &mut moved).unwrap();
        prop_assert_eq!(ra, rb);
        let after: Vec<u64> = a.possession.iter().zip(&b.possession).map(|(x, y)| x + y).collect();
        prop_assert_eq!(before, after);
        prop_assert_eq!(moved.iter().sum::<u64>(), ra + rb);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn transaction_invariants_hold(
        n in 3usize..40,
        thresh_frac in 0.0f64..0.2,
        seed in any::<u64>(),
        ignore in any::<bool>(),
    ) {
        let mut cfg = ModelConfig::new(n, thresh_frac * n as f64, seed);
        if ignore {
            cfg.unmet_demand = UnmetDemandRule::Ignore;
        }
        let result = common::check_transactions(&cfg, 20_000);
        prop_assert!(result.is_ok(), "{}", result.err().unwrap_or_default());
    }

    #[test]
    fn same_seed_same_trajectory(n in 3usize..30, thresh in 0.0f64..3.0, seed in any::<u64>()) {
        let cfg = ModelConfig::new(n, thresh, seed);
        prop_assert_eq!(common::checksum_after(&cfg, 200), common::checksum_after(&cfg, 200));
        let other = ModelConfig::new(n, thresh, seed.wrapping_add(1));
        prop_assert_ne!(common::checksum_after(&cfg, 200), common::checksum_after(&other, 200));
    }
}

#[test]
fn snapshot_midway_resumes_to_the_same_checksum() {
    let cfg = ModelConfig::new(25, 1.0, 99);
    let mut world = init_world(&cfg).unwrap();
    for _ in 0..300 {
        world.run_turn().unwrap();
    }
    let snap = world.snapshot().unwrap();
    for _ in 0..300 {
        world.run_turn().unwrap();
    }
    let mut resumed = moneyfrac::model::WorldState::from_snapshot(&snap).unwrap();
    for _ in 0..300 {
        resumed.run_turn().unwrap();
    }
    assert_eq!(resumed.checksum().unwrap(), world.checksum().unwrap());
    assert_eq!(world.checksum().unwrap(), common::checksum_after(&cfg, 600));
}
