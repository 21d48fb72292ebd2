//! Most-wanted good tracking, money qualification and lifetime extraction.
//!
//! The most-wanted good is the argmax over goods of the mean view
//! `sum_k V[k][j] / N`, sampled once per turn. A switching event is a turn at
//! which the argmax differs from the previous turn's; a lifetime is the gap in
//! turns between consecutive events.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::WorldState;

/// Thresholds for the exchange-volume and minimum-lifetime money conditions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MoneyCriteria {
    /// Minimum lifetime, in turns, for a good to count as money.
    pub min_lifetime: u64,
    /// The candidate's exchanged volume must reach this
    /// fraction of the median per-good volume in the window.
    pub exchange_vs_median: f64,
}

impl Default for MoneyCriteria {
    fn default() -> Self {
        Self {
            min_lifetime: 10,
            exchange_vs_median: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoneyObservation {
    pub turn: u64,
    pub argmax_good: usize,
    pub v_max: f64,
    pub total_trade_units: u64,
    pub exchanged_units_of_argmax: u64,
    pub exchanged_per_good: Vec<u64>,
    pub units_produced: u64,
    pub units_consumed: u64,
    /// Total stock of the argmax good held across agents.
    pub money_supply: u64,
}

/// Argmax of `values`, preferring `incumbent` when it is among the maximizers
/// and the lowest index otherwise.
pub fn argmax_with_incumbent(values: &[f64], incumbent: Option<usize>) -> usize {
    let mut best = 0;
    for (j, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = j;
        }
    }
    match incumbent {
        Some(inc) if inc < values.len() && values[inc] >= values[best] => inc,
        _ => best,
    }
}

pub fn observe_turn(world: &WorldState, incumbent: Option<usize>) -> MoneyObservation {
    let mean = world.mean_views();
    let argmax_good = argmax_with_incumbent(&mean, incumbent);
    let stats = &world.turn_stats;
    MoneyObservation {
        turn: world.turn,
        argmax_good,
        v_max: mean[argmax_good],
        total_trade_units: stats.total_exchanged(),
        exchanged_units_of_argmax: stats.units_exchanged_per_good[argmax_good],
        exchanged_per_good: stats.units_exchanged_per_good.clone(),
        units_produced: stats.units_produced,
        units_consumed: stats.units_consumed,
        money_supply: world.supply(argmax_good),
    }
}

fn median_u64(values: &[u64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut sorted = values.to_vec();
    sorted.sort_unstable();
    let mid = sorted.len() / 2;
    if sorted.len() % 2 == 0 {
        0.5 * (sorted[mid - 1] as f64 + sorted[mid] as f64)
    } else {
        sorted[mid] as f64
    }
}

/// Accumulated trade over one candidate-money interval.
#[derive(Debug, Clone, Default, PartialEq)]
struct WindowStats {
    good: usize,
    turns: u64,
    constant_argmax: bool,
    total_trade: u64,
    per_good: Vec<u64>,
}

impl WindowStats {
    fn start(good: usize, n_goods: usize) -> Self {
        Self {
            good,
            turns: 0,
            constant_argmax: true,
            total_trade: 0,
            per_good: vec![0; n_goods],
        }
    }

    fn push(&mut self, obs: &MoneyObservation) {
        self.turns += 1;
        self.constant_argmax &= obs.argmax_good == self.good;
        self.total_trade += obs.total_trade_units;
        if self.per_good.len() < obs.exchanged_per_good.len() {
            self.per_good.resize(obs.exchanged_per_good.len(), 0);
        }
        for (acc, &u) in self.per_good.iter_mut().zip(&obs.exchanged_per_good) {
            *acc += u;
        }
    }

    fn qualifies(&self, criteria: &MoneyCriteria) -> bool {
        let candidate = self.per_good.get(self.good).copied().unwrap_or(0) as f64;
        self.turns > 0
            && self.constant_argmax
            && self.total_trade > 0
            && candidate >= criteria.exchange_vs_median * median_u64(&self.per_good)
            && self.turns >= criteria.min_lifetime
    }
}

/// Whether the window (one lifetime interval) qualifies as money: the argmax
/// good stays constant, some trade happens, the good's exchanged volume
/// reaches the median per-good volume scaled by `exchange_vs_median`, and the
/// interval lasts at least `min_lifetime` turns.
pub fn money_qualifies(window: &[MoneyObservation], criteria: &MoneyCriteria) -> bool {
    let Some(first) = window.first() else {
        return false;
    };
    let mut stats = WindowStats::start(first.argmax_good, first.exchanged_per_good.len());
    window.iter().for_each(|o| stats.push(o));
    stats.qualifies(criteria)
}

/// One closed interval between consecutive switching events.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LifetimeInterval {
    /// Turn of the event that opened the interval.
    pub start_turn: u64,
    pub turns: u64,
    pub good: usize,
    pub qualifies: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LifetimeSeries {
    pub thresh: f64,
    pub n_agents: usize,
    pub seed: u64,
    pub intervals: Vec<LifetimeInterval>,
    /// Turns observed, including any before the first event and the
    /// discarded open interval after the last one.
    pub observed_turns: u64,
    pub first_event_turn: Option<u64>,
    pub last_event_turn: Option<u64>,
}

impl LifetimeSeries {
    pub fn lifetimes(&self) -> Vec<u64> {
        self.intervals.iter().map(|i| i.turns).collect()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.intervals.iter().map(|i| i.turns as f64).collect()
    }

    pub fn len(&self) -> usize {
        self.intervals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }

    pub fn qualified_count(&self) -> usize {
        self.intervals.iter().filter(|i| i.qualifies).count()
    }
}

/// Streaming switch detector. Feed one observation per turn in order.
#[derive(Debug, Clone)]
pub struct MoneyObserver {
    criteria: MoneyCriteria,
    incumbent: Option<usize>,
    window: Option<WindowStats>,
    last_event: Option<u64>,
    first_event: Option<u64>,
    intervals: Vec<LifetimeInterval>,
    observed_turns: u64,
}

impl MoneyObserver {
    pub fn new(criteria: MoneyCriteria) -> Self {
        Self {
            criteria,
            incumbent: None,
            window: None,
            last_event: None,
            first_event: None,
            intervals: Vec::new(),
            observed_turns: 0,
        }
    }

    pub fn incumbent(&self) -> Option<usize> {
        self.incumbent
    }

    /// Closed intervals so far.
    pub fn event_count(&self) -> usize {
        self.intervals.len()
    }

    /// Observe the world at a turn boundary; returns the observation and
    /// whether this turn is a switching event.
    pub fn observe(&mut self, world: &WorldState) -> (MoneyObservation, bool) {
        let obs = observe_turn(world, self.incumbent);
        let switched = self.push(&obs);
        (obs, switched)
    }

    pub fn push(&mut self, obs: &MoneyObservation) -> bool {
        self.observed_turns += 1;
        let switched = matches!(self.incumbent, Some(inc) if inc != obs.argmax_good);
        if switched {
            if let (Some(start), Some(window)) = (self.last_event, self.window.take()) {
                self.intervals.push(LifetimeInterval {
                    start_turn: start,
                    turns: obs.turn - start,
                    good: window.good,
                    qualifies: window.qualifies(&self.criteria),
                });
            }
            self.first_event.get_or_insert(obs.turn);
            self.last_event = Some(obs.turn);
            self.window = Some(WindowStats::start(
                obs.argmax_good,
                obs.exchanged_per_good.len(),
            ));
        }
        if let Some(window) = self.window.as_mut() {
            window.push(obs);
        }
        self.incumbent = Some(obs.argmax_good);
        switched
    }

    pub fn finish(self, thresh: f64, n_agents: usize, seed: u64) -> LifetimeSeries {
        LifetimeSeries {
            thresh,
            n_agents,
            seed,
            intervals: self.intervals,
            observed_turns: self.observed_turns,
            first_event_turn: self.first_event,
            last_event_turn: self.last_event,
        }
    }
}

/// Batch switch detection over a turn-ordered observation stream.
///
/// Fails with [`Error::Insufficient`] when fewer than two events occur, since
/// no closed lifetime exists then.
pub fn detect_switches(
    observations: &[MoneyObservation],
    criteria: &MoneyCriteria,
) -> Result<Vec<LifetimeInterval>> {
    let events: Vec<usize> = (1..observations.len())
        .filter(|&i| observations[i].argmax_good != observations[i - 1].argmax_good)
        .collect();
    if events.len() < 2 {
        return Err(Error::Insufficient(format!(
            "{} switching events; at least 2 are needed for a lifetime",
            events.len()
        )));
    }
    Ok(events
        .windows(2)
        .map(|pair| {
            let window = &observations[pair[0]..pair[1]];
            LifetimeInterval {
                start_turn: observations[pair[0]].turn,
                turns: observations[pair[1]].turn - observations[pair[0]].turn,
                good: observations[pair[0]].argmax_good,
                qualifies: money_qualifies(window, criteria),
            }
        })
        .collect())
}
