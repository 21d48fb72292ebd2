#![allow(dead_code)]

use moneyfrac::model::{init_world, select_pair, AgentState, ModelConfig, UnmetDemandRule, WorldState, VIEW_NORM_TOLERANCE};

/// Views after the pairwise update, computed from scratch.
fn reference_views(a: &AgentState, b: &AgentState, rule: UnmetDemandRule) -> Vec<f64> {
    let n = a.view.len() as f64;
    let boosted = |agent: &AgentState, j: usize| {
        let boost = rule == UnmetDemandRule::Standing && agent.demand[j] > 0;
        agent.view[j] + if boost { 1.0 } else { 0.0 }
    };
    let mean: Vec<f64> = (0..a.view.len()).map(|j| (boosted(a, j) + boosted(b, j)) / 2.0).collect();
    let total: f64 = mean.iter().sum();
    mean.iter().map(|v| v * n / total).collect()
}

fn reference_demand_total(me: &AgentState, view: &[f64], partner: &AgentState, thresh: f64) -> u64 {
    (0..view.len())
        .filter(|&j| j == me.want || view[j] > thresh)
        .map(|j| partner.possession[j])
        .sum()
}

/// Counts of what a checked run observed.
#[derive(Debug, Default)]
pub struct InvariantReport {
    pub transactions: u64,
    pub exchanges: u64,
    pub units_moved: u64,
}

/// Runs `transactions` transactions without turn bookkeeping (the per-turn
/// counters keep accumulating), checking after each one:
/// view normalization and bounds for every agent, balanced exchange volume
/// `min` of the two recomputed shopping-list totals, conservation of units up
/// to production and consumption, and `want != own good` for every agent.
pub fn check_transactions(config: &ModelConfig, transactions: u64) -> Result<(InvariantReport, WorldState), String> {
    let mut world = init_world(config).map_err(|e| e.to_string())?;
    let n = world.agents.len();
    let nf = n as f64;
    let mut report = InvariantReport::default();
    for t in 0..transactions {
        let mut probe = world.clone();
        let (k, l) = select_pair(&mut probe);
        let view = reference_views(&world.agents[k], &world.agents[l], config.unmet_demand);
        let demand_k = reference_demand_total(&world.agents[k], &view, &world.agents[l], config.thresh);
        let demand_l = reference_demand_total(&world.agents[l], &view, &world.agents[k], config.thresh);
        let expected_volume = if demand_k == 0 || demand_l == 0 { 0 } else { demand_k.min(demand_l) };

        let units_before: u64 = world.agents.iter().flat_map(|a| &a.possession).sum();
        let moved_before = world.turn_stats.total_exchanged();
        let consumed_before = world.turn_stats.units_consumed;
        let produced_before = world.turn_stats.units_produced;

        let tx = world.run_transaction().map_err(|e| format!("transaction {t}: {e}"))?;
        if (tx.trader, tx.co_trader) != (k, l) {
            return Err(format!("transaction {t}: pair ({}, {}) differs from replay ({k}, {l})", tx.trader, tx.co_trader));
        }
        if tx.received_by_trader != expected_volume || tx.received_by_co_trader != expected_volume {
            return Err(format!(
                "transaction {t}: exchange ({}, {}) but min shopping list is {expected_volume}",
                tx.received_by_trader, tx.received_by_co_trader
            ));
        }
        let moved = world.turn_stats.total_exchanged() - moved_before;
        if moved != 2 * expected_volume {
            return Err(format!("transaction {t}: {moved} units moved for volume {expected_volume}"));
        }
        for (j, (&got, &want)) in world.agents[k].view.iter().zip(&view).enumerate() {
            if (got - want).abs() > 1e-9 * nf {
                return Err(format!("transaction {t}: view of good {j} is {got}, expected {want}"));
            }
        }
        let consumed = world.turn_stats.units_consumed - consumed_before;
        let produced = world.turn_stats.units_produced - produced_before;
        let units_after: u64 = world.agents.iter().flat_map(|a| &a.possession).sum();
        if units_after + consumed != units_before + produced {
            return Err(format!("transaction {t}: units {units_before} -> {units_after} with +{produced} -{consumed}"));
        }
        // only the pair changes; everyone is swept once per turn's worth
        let sweep: Vec<usize> = if (t + 1) % n as u64 == 0 { (0..n).collect() } else { vec![k, l] };
        for idx in sweep {
            let agent = &world.agents[idx];
            let sum: f64 = agent.view.iter().sum();
            if (sum - nf).abs() > VIEW_NORM_TOLERANCE {
                return Err(format!("transaction {t}: agent {idx} views sum to {sum}"));
            }
            if agent.view.iter().any(|&v| !(0.0..=nf).contains(&v)) {
                return Err(format!("transaction {t}: agent {idx} has a view outside [0, N]"));
            }
            if agent.want == idx {
                return Err(format!("transaction {t}: agent {idx} wants its own good"));
            }
        }
        report.transactions += 1;
        report.exchanges += u64::from(expected_volume > 0);
        report.units_moved += moved;
    }
    Ok((report, world))
}

/// Checksum after `turns` turns.
pub fn checksum_after(config: &ModelConfig, turns: u64) -> String {
    let mut world = init_world(config).unwrap();
    for _ in 0..turns {
        world.run_turn().unwrap();
    }
    world.checksum().unwrap()
}
