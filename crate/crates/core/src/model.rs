//! Commodity-exchange dynamics of N producing agents.
//!
//! Each agent `k` produces good `k` and carries three N-vectors: possession,
//! demand (the standing shopping list) and a real-valued world view summing to
//! N. One transaction runs the seven steps below on a randomly chosen trader
//! and the co-trader holding most of the trader's wanted good:
//!
//! 1. pick trader `k` uniformly;
//! 2. pick co-trader `l != k` maximizing stock of good `want[k]` (uniform tie-break);
//! 3. (no state change);
//! 4. unmet demand boosts views by 1, both traders adopt the mean view, renormalize;
//! 5. rebuild both shopping lists from the partner's stock;
//! 6. exchange, the larger list being served unit by unit, rarest first;
//! 7. consume the wanted good, produce own good if out of it, redraw wants.
//!
//! A turn is N consecutive transactions.
//!
//! All randomness comes from one [`ChaCha8Rng`] drawn in this fixed order:
//! initial wants for agents `0..N`; then per transaction the trader index, the
//! co-trader tie-break (only drawn when more than one agent attains the
//! maximum), the trader's new want and finally the co-trader's new want.
//!
//! Goods and agents are 0-based indices throughout.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Absolute tolerance on `sum(view) == N` after renormalization.
pub const VIEW_NORM_TOLERANCE: f64 = 1e-9;

/// How Step 4 decides that a trader's previous demand went unmet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UnmetDemandRule {
    /// Every good with a nonzero entry in the standing demand vector (what is
    /// left over from the trader's last transaction) gets a +1 view boost.
    #[default]
    Standing,
    /// No boost at all; views evolve by averaging only.
    Ignore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_agents: usize,
    pub thresh: f64,
    pub seed: u64,
    pub max_turns: u64,
    pub unmet_demand: UnmetDemandRule,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::new(50, 2.5, 0)
    }
}

impl ModelConfig {
    pub fn new(n_agents: usize, thresh: f64, seed: u64) -> Self {
        Self {
            n_agents,
            thresh,
            seed,
            max_turns: 5_000_000,
            unmet_demand: UnmetDemandRule::Standing,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_agents < 3 {
            return Err(Error::Config(format!(
                "n_agents must be at least 3, got {}",
                self.n_agents
            )));
        }
        if !(self.thresh >= 0.0 && self.thresh <= self.n_agents as f64) {
            return Err(Error::Config(format!(
                "thresh must lie in [0, {}], got {}",
                self.n_agents, self.thresh
            )));
        }
        if self.max_turns == 0 {
            return Err(Error::Config("max_turns must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub possession: Vec<u64>,
    pub demand: Vec<u64>,
    pub view: Vec<f64>,
    pub want: usize,
}

impl AgentState {
    fn initial(index: usize, n: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut possession = vec![0; n];
        possession[index] = 1;
        Self {
            possession,
            demand: vec![0; n],
            view: vec![1.0; n],
            want: draw_want(index, n, rng),
        }
    }

    pub fn total_demand(&self) -> u64 {
        self.demand.iter().sum()
    }
}

/// Per-turn trade counters, reset at every turn boundary.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TurnStats {
    /// Units of each good that changed hands (both directions counted).
    pub units_exchanged_per_good: Vec<u64>,
    pub units_produced: u64,
    pub units_consumed: u64,
}

impl TurnStats {
    fn new(n: usize) -> Self {
        Self {
            units_exchanged_per_good: vec![0; n],
            units_produced: 0,
            units_consumed: 0,
        }
    }

    fn reset(&mut self) {
        self.units_exchanged_per_good.iter_mut().for_each(|u| *u = 0);
        self.units_produced = 0;
        self.units_consumed = 0;
    }

    pub fn total_exchanged(&self) -> u64 {
        self.units_exchanged_per_good.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub config: ModelConfig,
    pub agents: Vec<AgentState>,
    pub turn: u64,
    pub transactions_this_turn: usize,
    pub rng: ChaCha8Rng,
    pub turn_stats: TurnStats,
}

/// What a single transaction did; handy for property tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransactionReport {
    pub trader: usize,
    pub co_trader: usize,
    pub received_by_trader: u64,
    pub received_by_co_trader: u64,
}

pub fn init_world(config: &ModelConfig) -> Result<WorldState> {
    config.validate()?;
    let n = config.n_agents;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let agents = (0..n).map(|k| AgentState::initial(k, n, &mut rng)).collect();
    Ok(WorldState {
        config: config.clone(),
        agents,
        turn: 0,
        transactions_this_turn: 0,
        rng,
        turn_stats: TurnStats::new(n),
    })
}

/// Uniform draw from `{0..n} \ {own}`.
fn draw_want(own: usize, n: usize, rng: &mut impl Rng) -> usize {
    let w = rng.random_range(0..n - 1);
    if w >= own {
        w + 1
    } else {
        w
    }
}

/// Steps 1 and 2: trader uniformly at random, co-trader the other agent with
/// the largest stock of the trader's wanted good.
pub fn select_pair(world: &mut WorldState) -> (usize, usize) {
    let n = world.agents.len();
    let k = world.rng.random_range(0..n);
    let l = select_co_trader(&world.agents, k, &mut world.rng);
    (k, l)
}

pub(crate) fn select_co_trader(agents: &[AgentState], k: usize, rng: &mut impl Rng) -> usize {
    let good = agents[k].want;
    let mut best = 0u64;
    let mut maximizers: Vec<usize> = Vec::new();
    for (idx, agent) in agents.iter().enumerate() {
        if idx == k {
            continue;
        }
        let held = agent.possession[good];
        if maximizers.is_empty() || held > best {
            best = held;
            maximizers.clear();
            maximizers.push(idx);
        } else if held == best {
            maximizers.push(idx);
        }
    }
    if maximizers.len() == 1 {
        maximizers[0]
    } else {
        maximizers[rng.random_range(0..maximizers.len())]
    }
}

/// Step 4. Views are boosted for unmet standing demand, averaged, then both
/// rescaled so they sum to `n`.
pub fn exchange_views(a: &mut AgentState, b: &mut AgentState, rule: UnmetDemandRule) {
    let n = a.view.len();
    if rule == UnmetDemandRule::Standing {
        for agent in [&mut *a, &mut *b] {
            for (v, &d) in agent.view.iter_mut().zip(&agent.demand) {
                if d > 0 {
                    *v += 1.0;
                }
            }
        }
    }
    let mut sum = 0.0;
    for (va, vb) in a.view.iter_mut().zip(b.view.iter_mut()) {
        let mean = 0.5 * (*va + *vb);
        *va = mean;
        *vb = mean;
        sum += mean;
    }
    let scale = n as f64 / sum;
    for (va, vb) in a.view.iter_mut().zip(b.view.iter_mut()) {
        *va *= scale;
        *vb = *va;
    }
}

/// Step 5 for one side: demand everything the partner holds of the wanted
/// good and of every good whose view strictly exceeds `thresh`.
pub fn build_shopping_list(me: &AgentState, partner_possession: &[u64], thresh: f64) -> Vec<u64> {
    let mut demand = vec![0; partner_possession.len()];
    fill_shopping_list(&mut demand, me.want, &me.view, partner_possession, thresh);
    demand
}

fn fill_shopping_list(demand: &mut [u64], want: usize, view: &[f64], partner: &[u64], thresh: f64) {
    for (j, (d, &held)) in demand.iter_mut().zip(partner).enumerate() {
        *d = if held > 0 && (want == j || view[j] > thresh) {
            held
        } else {
            0
        };
    }
}

fn transfer(from: &mut AgentState, to: &mut AgentState, good: usize, units: u64) -> Result<()> {
    let stock = &mut from.possession[good];
    if *stock < units {
        return Err(Error::Invariant(format!(
            "demanded {units} units of good {good} but partner holds {stock}"
        )));
    }
    *stock -= units;
    to.possession[good] += units;
    Ok(())
}

/// Serve `buyer` its whole shopping list from `seller`, zeroing the list.
fn serve_fully(buyer: &mut AgentState, seller: &mut AgentState, moved: &mut [u64]) -> Result<()> {
    for j in 0..buyer.demand.len() {
        let units = buyer.demand[j];
        if units > 0 {
            transfer(seller, buyer, j, units)?;
            moved[j] += units;
            buyer.demand[j] = 0;
        }
    }
    Ok(())
}

/// Serve `budget` units to `buyer` one at a time, each time from the good with
/// the smallest nonzero remaining demand (lowest index on ties).
///
/// Taking a unit from the minimal component keeps it minimal, so the unit loop
/// collapses to draining components whole in `(demand, index)` order.
fn serve_rarest_first(
    buyer: &mut AgentState,
    seller: &mut AgentState,
    mut budget: u64,
    moved: &mut [u64],
) -> Result<()> {
    let mut order: Vec<usize> = (0..buyer.demand.len())
        .filter(|&j| buyer.demand[j] > 0)
        .collect();
    order.sort_by_key(|&j| (buyer.demand[j], j));
    for j in order {
        if budget == 0 {
            break;
        }
        let units = buyer.demand[j].min(budget);
        transfer(seller, buyer, j, units)?;
        moved[j] += units;
        buyer.demand[j] -= units;
        budget -= units;
    }
    Ok(())
}

/// Step 6. Returns `(units received by a, units received by b)`; `moved`
/// accumulates per-good volume.
pub fn execute_exchange(
    a: &mut AgentState,
    b: &mut AgentState,
    moved: &mut [u64],
) -> Result<(u64, u64)> {
    let total_a = a.total_demand();
    let total_b = b.total_demand();
    if total_a == 0 || total_b == 0 {
        return Ok((0, 0));
    }
    if total_a == total_b {
        serve_fully(a, b, moved)?;
        serve_fully(b, a, moved)?;
    } else if total_a > total_b {
        serve_fully(b, a, moved)?;
        serve_rarest_first(a, b, total_b, moved)?;
    } else {
        serve_fully(a, b, moved)?;
        serve_rarest_first(b, a, total_a, moved)?;
    }
    let volume = total_a.min(total_b);
    Ok((volume, volume))
}

/// Step 7 for one agent, minus the want redraw: consume one unit of the wanted
/// good if held, then produce one unit of the own good if out of it.
/// Returns `(consumed, produced)`.
pub fn consume_and_produce(agent: &mut AgentState, own: usize) -> (bool, bool) {
    let stock = &mut agent.possession[agent.want];
    let consumed = *stock > 0;
    if consumed {
        *stock -= 1;
    }
    let produced = agent.possession[own] == 0;
    if produced {
        agent.possession[own] = 1;
    }
    (consumed, produced)
}

/// Redraw `agent`'s want uniformly among the goods it does not produce.
pub fn redraw_want(agent: &mut AgentState, own: usize, rng: &mut impl Rng) {
    agent.want = draw_want(own, agent.possession.len(), rng);
}

fn pair_mut(agents: &mut [AgentState], i: usize, j: usize) -> (&mut AgentState, &mut AgentState) {
    assert_ne!(i, j);
    if i < j {
        let (lo, hi) = agents.split_at_mut(j);
        (&mut lo[i], &mut hi[0])
    } else {
        let (lo, hi) = agents.split_at_mut(i);
        (&mut hi[0], &mut lo[j])
    }
}

impl WorldState {
    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }

    /// One elementary transaction (Steps 1 to 7).
    pub fn run_transaction(&mut self) -> Result<TransactionReport> {
        let (k, l) = select_pair(self);
        let thresh = self.config.thresh;
        let rule = self.config.unmet_demand;
        let (trader, co_trader) = pair_mut(&mut self.agents, k, l);

        exchange_views(trader, co_trader, rule);

        fill_shopping_list(
            &mut trader.demand,
            trader.want,
            &trader.view,
            &co_trader.possession,
            thresh,
        );
        fill_shopping_list(
            &mut co_trader.demand,
            co_trader.want,
            &co_trader.view,
            &trader.possession,
            thresh,
        );

        let (received_by_trader, received_by_co_trader) = execute_exchange(
            trader,
            co_trader,
            &mut self.turn_stats.units_exchanged_per_good,
        )?;

        for (agent, own) in [(&mut *trader, k), (&mut *co_trader, l)] {
            let (consumed, produced) = consume_and_produce(agent, own);
            self.turn_stats.units_consumed += consumed as u64;
            self.turn_stats.units_produced += produced as u64;
        }
        redraw_want(trader, k, &mut self.rng);
        redraw_want(co_trader, l, &mut self.rng);

        self.transactions_this_turn += 1;
        Ok(TransactionReport {
            trader: k,
            co_trader: l,
            received_by_trader,
            received_by_co_trader,
        })
    }

    /// N transactions; counters in `turn_stats` describe this turn only.
    pub fn run_turn(&mut self) -> Result<()> {
        self.turn_stats.reset();
        self.transactions_this_turn = 0;
        for _ in 0..self.n_agents() {
            self.run_transaction()?;
        }
        self.transactions_this_turn = 0;
        self.turn += 1;
        Ok(())
    }

    /// Mean view of every good over all agents, `sum_k V[k][j] / N`.
    pub fn mean_views(&self) -> Vec<f64> {
        let n = self.n_agents();
        let mut sums = vec![0.0; n];
        for agent in &self.agents {
            for (s, v) in sums.iter_mut().zip(&agent.view) {
                *s += v;
            }
        }
        sums.iter_mut().for_each(|s| *s /= n as f64);
        sums
    }

    /// Total stock of `good` across all agents.
    pub fn supply(&self, good: usize) -> u64 {
        self.agents.iter().map(|a| a.possession[good]).sum()
    }

    /// JSON record of the full state, RNG included; resuming from it is exact.
    pub fn snapshot(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_snapshot(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// SHA-256 of the canonical JSON encoding, hex encoded.
    pub fn checksum(&self) -> Result<String> {
        let bytes = serde_json::to_vec(self)?;
        Ok(sha256_hex(&bytes))
    }
}

/// Lowercase hex SHA-256.
pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
