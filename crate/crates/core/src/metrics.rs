//! Regret bookkeeping, multi-run aggregation and CSV output.

use std::io::Write;

use serde::Serialize;

use crate::env::MnlInstance;
use crate::error::{Error, Result};
use crate::mnl::Assortment;

/// One round of a coupled run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundRecord {
    pub t: u64,
    /// Agent queue length after the round.
    pub q_agent: u64,
    /// Optimal shadow queue length after the round.
    pub q_opt: u64,
    /// Best departure rate for the served context minus the achieved one.
    pub per_round_regret: f64,
    pub cum_regret: f64,
    pub explored: bool,
    /// Pool index of the served job; `None` for a dummy round.
    pub served_context: Option<usize>,
    pub assortment: Assortment,
    pub departed: bool,
}

impl RoundRecord {
    /// `Q(t) - Q*(t)`.
    pub fn qregret(&self) -> i64 {
        self.q_agent as i64 - self.q_opt as i64
    }
}

/// Departure-rate gap between the best assortment for `context` and `assortment`,
/// found by scanning every assortment. `None` (a dummy round) contributes 0.
pub fn per_round_regret(
    instance: &MnlInstance,
    context: Option<usize>,
    assortment: &Assortment,
) -> Result<f64> {
    let Some(c) = context else { return Ok(0.0) };
    let best = instance.best_rate(c)?;
    Ok(best - instance.departure_rate(c, assortment)?)
}

/// Pointwise mean and sample standard deviation across runs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateSeries {
    pub runs: usize,
    pub t: Vec<u64>,
    pub mean_qregret: Vec<f64>,
    pub std_qregret: Vec<f64>,
    pub mean_cum_regret: Vec<f64>,
    pub std_cum_regret: Vec<f64>,
}

impl AggregateSeries {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn final_mean_cum_regret(&self) -> Option<f64> {
        self.mean_cum_regret.last().copied()
    }

    pub fn final_mean_qregret(&self) -> Option<f64> {
        self.mean_qregret.last().copied()
    }
}

// Sorting first makes the result independent of run order.
fn mean_std(values: &mut [f64]) -> (f64, f64) {
    values.sort_by(f64::total_cmp);
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

/// Aggregates equally long runs.
pub fn aggregate(runs: &[Vec<RoundRecord>]) -> Result<AggregateSeries> {
    let first = runs
        .first()
        .ok_or_else(|| Error::Aggregation("no runs to aggregate".into()))?;
    let len = first.len();
    if let Some(bad) = runs.iter().find(|r| r.len() != len) {
        return Err(Error::Aggregation(format!(
            "runs have different horizons: {len} and {}",
            bad.len()
        )));
    }
    let mut out = AggregateSeries {
        runs: runs.len(),
        t: Vec::with_capacity(len),
        mean_qregret: Vec::with_capacity(len),
        std_qregret: Vec::with_capacity(len),
        mean_cum_regret: Vec::with_capacity(len),
        std_cum_regret: Vec::with_capacity(len),
    };
    let mut q = vec![0.0; runs.len()];
    let mut c = vec![0.0; runs.len()];
    for i in 0..len {
        let t = first[i].t;
        for (r, run) in runs.iter().enumerate() {
            if run[i].t != t {
                return Err(Error::Aggregation(format!(
                    "round mismatch at row {i}: {t} vs {}",
                    run[i].t
                )));
            }
            q[r] = run[i].qregret() as f64;
            c[r] = run[i].cum_regret;
        }
        let (mq, sq) = mean_std(&mut q);
        let (mc, sc) = mean_std(&mut c);
        out.t.push(t);
        out.mean_qregret.push(mq);
        out.std_qregret.push(sq);
        out.mean_cum_regret.push(mc);
        out.std_cum_regret.push(sc);
    }
    Ok(out)
}

pub const RUN_CSV_HEADER: &str =
    "run_id,t,policy,explored,Q_agent,Q_opt,qregret,per_round_regret,cum_regret";
pub const AGGREGATE_CSV_HEADER: &str =
    "t,mean_qregret,std_qregret,mean_cum_regret,std_cum_regret";

/// Writes per-round rows for one or more runs under a single header.
pub fn write_run_csv<W: Write>(
    mut w: W,
    policy: &str,
    runs: &[(usize, &[RoundRecord])],
) -> Result<()> {
    writeln!(w, "{RUN_CSV_HEADER}")?;
    for (run_id, records) in runs {
        for r in *records {
            writeln!(
                w,
                "{run_id},{},{policy},{},{},{},{},{},{}",
                r.t,
                u8::from(r.explored),
                r.q_agent,
                r.q_opt,
                r.qregret(),
                r.per_round_regret,
                r.cum_regret
            )?;
        }
    }
    Ok(())
}

/// Writes one aggregate series.
pub fn write_aggregate_csv<W: Write>(mut w: W, series: &AggregateSeries) -> Result<()> {
    writeln!(w, "{AGGREGATE_CSV_HEADER}")?;
    write_aggregate_rows(&mut w, series, None)
}

/// Writes several policies' aggregates into one table with a leading `policy` column.
pub fn write_combined_csv<W: Write>(mut w: W, series: &[(&str, &AggregateSeries)]) -> Result<()> {
    writeln!(w, "policy,{AGGREGATE_CSV_HEADER}")?;
    for (name, s) in series {
        write_aggregate_rows(&mut w, s, Some(name))?;
    }
    Ok(())
}

fn write_aggregate_rows<W: Write>(
    w: &mut W,
    s: &AggregateSeries,
    policy: Option<&str>,
) -> Result<()> {
    for i in 0..s.len() {
        if let Some(p) = policy {
            write!(w, "{p},")?;
        }
        writeln!(
            w,
            "{},{},{},{},{}",
            s.t[i], s.mean_qregret[i], s.std_qregret[i], s.mean_cum_regret[i], s.std_cum_regret[i]
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn series(q: &[(u64, u64)], cum: &[f64]) -> Vec<RoundRecord> {
        q.iter()
            .zip(cum)
            .enumerate()
            .map(|(i, (&(a, o), &c))| RoundRecord {
                t: i as u64 + 1,
                q_agent: a,
                q_opt: o,
                per_round_regret: 0.0,
                cum_regret: c,
                explored: false,
                served_context: None,
                assortment: Assortment::new(vec![0], 1).unwrap(),
                departed: false,
            })
            .collect()
    }

    #[test]
    fn single_run_has_zero_std() {
        let a = aggregate(&[series(&[(3, 1), (2, 2)], &[0.5, 0.7])]).unwrap();
        assert_eq!(a.std_qregret, vec![0.0, 0.0]);
        assert_eq!(a.std_cum_regret, vec![0.0, 0.0]);
        assert_eq!(a.mean_qregret, vec![2.0, 0.0]);
    }

    #[test]
    fn two_constant_series() {
        let a = aggregate(&[
            series(&[(3, 0); 4], &[3.0; 4]),
            series(&[(5, 0); 4], &[5.0; 4]),
        ])
        .unwrap();
        for i in 0..4 {
            assert_eq!(a.mean_qregret[i], 4.0);
            assert_eq!(a.std_qregret[i], 2f64.sqrt());
            assert_eq!(a.mean_cum_regret[i], 4.0);
        }
    }

    #[test]
    fn mismatched_horizons_fail() {
        let r = aggregate(&[series(&[(1, 0)], &[0.0]), series(&[(1, 0); 2], &[0.0; 2])]);
        assert!(matches!(r, Err(Error::Aggregation(_))));
        assert!(matches!(aggregate(&[]), Err(Error::Aggregation(_))));
    }

    #[test]
    fn csv_layout() {
        let runs = series(&[(2, 1)], &[0.25]);
        let mut buf = Vec::new();
        write_run_csv(&mut buf, "acqb", &[(0, &runs)]).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            format!("{RUN_CSV_HEADER}\n0,1,acqb,0,2,1,1,0,0.25\n")
        );
        let agg = aggregate(&[runs]).unwrap();
        let mut buf = Vec::new();
        write_aggregate_csv(&mut buf, &agg).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), format!("{AGGREGATE_CSV_HEADER}\n1,1,0,0.25,0\n"));
    }

    proptest! {
        #[test]
        fn run_order_does_not_matter(
            values in prop::collection::vec(prop::collection::vec((0u64..20, 0.0f64..50.0), 5), 2..6),
            rot in 0usize..6,
        ) {
            let runs: Vec<Vec<RoundRecord>> = values
                .iter()
                .map(|v| {
                    let q: Vec<(u64, u64)> = v.iter().map(|(a, _)| (*a, 0)).collect();
                    let c: Vec<f64> = v.iter().map(|(_, c)| *c).collect();
                    series(&q, &c)
                })
                .collect();
            let mut rotated = runs.clone();
            let len = rotated.len();
            rotated.rotate_left(rot % len);
            rotated.reverse();
            prop_assert_eq!(aggregate(&runs).unwrap(), aggregate(&rotated).unwrap());
        }
    }
}
