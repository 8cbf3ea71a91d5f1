//! Coupled runs: the agent's queue next to an optimal shadow queue.
//!
//! Both queues read the same arrival, arrival-context and departure uniforms
//! each round, so `Q(t) - Q*(t)` isolates the effect of the agent's choices.

use crate::env::{MnlInstance, QueueState, RateTable};
use crate::error::{Error, Result};
use crate::metrics::RoundRecord;
use crate::policy::{optimal_decision, Feedback, Policy, Query, RoundView};
use crate::rng::RunStreams;

/// Runs `policy` for `horizon` rounds against the optimal shadow queue.
pub fn coupled_run(
    instance: &MnlInstance,
    policy: &mut dyn Policy,
    horizon: u64,
    seed: u64,
) -> Result<Vec<RoundRecord>> {
    instance.validate()?;
    let table = RateTable::new(instance)?;
    coupled_run_with_table(instance, &table, policy, horizon, seed)
}

/// As [`coupled_run`] with a precomputed rate table.
pub fn coupled_run_with_table(
    instance: &MnlInstance,
    table: &RateTable,
    policy: &mut dyn Policy,
    horizon: u64,
    seed: u64,
) -> Result<Vec<RoundRecord>> {
    let mut streams = RunStreams::new(seed, instance.pool.len());
    let mut agent = QueueState::new();
    let mut shadow = QueueState::new();
    let mut records = Vec::with_capacity(horizon as usize);
    let mut cum = 0.0;
    for round in 1..=horizon {
        let rand = streams.next_round();
        let decision = policy.decide(&RoundView {
            round,
            queue: &agent,
            instance,
            e_draw: rand.e_draw,
        })?;
        let regret = match decision.query {
            Query::Pending(i) => {
                let job = agent.pending().get(i).ok_or_else(|| {
                    Error::Contract(format!("decision references missing pending slot {i}"))
                })?;
                let si = table.index_of(&decision.assortment).ok_or_else(|| {
                    Error::Contract(format!(
                        "assortment {} is not a size-{} subset",
                        decision.assortment, instance.k
                    ))
                })?;
                table.best(job.context).1 - table.rate(job.context, si)
            }
            Query::Dummy => 0.0,
        };
        let served_context = match decision.query {
            Query::Pending(i) => Some(agent.pending()[i].context),
            Query::Dummy => None,
        };
        let shadow_decision = optimal_decision(&shadow, table);
        let outcome = agent.step(&decision, &rand, instance)?;
        shadow.step(&shadow_decision, &rand, instance)?;
        policy.observe(&Feedback {
            round,
            decision: &decision,
            outcome: &outcome,
            instance,
            e_draw: rand.e_draw,
        })?;
        cum += regret;
        records.push(RoundRecord {
            t: round,
            q_agent: agent.len() as u64,
            q_opt: shadow.len() as u64,
            per_round_regret: regret,
            cum_regret: cum,
            explored: decision.explored,
            served_context,
            assortment: decision.assortment,
            departed: outcome.departed,
        });
    }
    Ok(records)
}
