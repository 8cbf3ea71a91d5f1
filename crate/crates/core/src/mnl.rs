//! Multinomial-logit choice model.
//!
//! Pure functions: choice probabilities over an assortment with an outside
//! option, the departure rate `R = 1 - p0`, utility construction for the
//! shared and disjoint parameterizations, the threshold choice sampler used to
//! couple queues, and the transforms that turn tabular performance/cost scores
//! into departure probabilities.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Per-item utilities for one assortment, in assortment order.
#[derive(Debug, Clone, PartialEq)]
pub struct Utilities(pub Vec<f64>);

impl Utilities {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl From<Vec<f64>> for Utilities {
    fn from(v: Vec<f64>) -> Self {
        Utilities(v)
    }
}

/// Probability of the outside option plus one probability per assortment item.
#[derive(Debug, Clone, PartialEq)]
pub struct ChoiceDistribution {
    /// Outside option (no choice, the job is retried).
    pub p0: f64,
    /// Item probabilities in assortment order.
    pub p: Vec<f64>,
}

impl ChoiceDistribution {
    /// Total probability that some item is accepted.
    pub fn departure_rate(&self) -> f64 {
        1.0 - self.p0
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }
}

/// A size-K subset of servers, stored as strictly increasing zero-based indices.
///
/// Server `j` in user-facing output is `j + 1`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Assortment(Vec<usize>);

impl Assortment {
    pub fn new(mut servers: Vec<usize>, n_servers: usize) -> Result<Self> {
        servers.sort_unstable();
        if servers.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Domain(format!(
                "assortment has duplicate servers: {servers:?}"
            )));
        }
        if let Some(&last) = servers.last() {
            if last >= n_servers {
                return Err(Error::Domain(format!(
                    "server index {last} out of range for {n_servers} servers"
                )));
            }
        } else {
            return Err(Error::Domain("empty assortment".into()));
        }
        Ok(Assortment(servers))
    }

    pub fn servers(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, server: usize) -> bool {
        self.0.binary_search(&server).is_ok()
    }

    /// Position of `server` inside the assortment.
    pub fn position(&self, server: usize) -> Option<usize> {
        self.0.binary_search(&server).ok()
    }
}

impl std::fmt::Display for Assortment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{{")?;
        for (i, s) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{}", s + 1)?;
        }
        write!(f, "}}")
    }
}

/// All K-subsets of `0..n` in lexicographic order.
pub fn enumerate_assortments(n_servers: usize, k: usize) -> Result<Vec<Assortment>> {
    if k == 0 || k > n_servers {
        return Err(Error::Config(format!(
            "assortment size {k} must be in 1..={n_servers}"
        )));
    }
    let mut out = Vec::new();
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(Assortment(idx.clone()));
        // advance the rightmost index that still has room
        let mut i = k;
        loop {
            i -= 1;
            if idx[i] < n_servers - k + i {
                break;
            }
            if i == 0 {
                return Ok(out);
            }
        }
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

fn check_finite(u: &[f64]) -> Result<()> {
    if let Some(bad) = u.iter().find(|v| !v.is_finite()) {
        return Err(Error::Domain(format!("non-finite utility {bad}")));
    }
    Ok(())
}

/// MNL choice probabilities with an outside option of utility zero.
///
/// Computed with the maximum (including the outside option's 0) shifted out,
/// so utilities in the hundreds do not overflow.
pub fn choice_probs(utilities: &[f64]) -> Result<ChoiceDistribution> {
    check_finite(utilities)?;
    let shift = utilities.iter().copied().fold(0.0_f64, f64::max);
    let outside = (-shift).exp();
    let weights: Vec<f64> = utilities.iter().map(|u| (u - shift).exp()).collect();
    let total = outside + weights.iter().sum::<f64>();
    Ok(ChoiceDistribution {
        p0: outside / total,
        p: weights.into_iter().map(|w| w / total).collect(),
    })
}

/// Departure rate `R = Σ p_j = 1 - p0`.
pub fn departure_rate(utilities: &[f64]) -> Result<f64> {
    Ok(choice_probs(utilities)?.departure_rate())
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Shared-parameter utilities `u_j = x_{-j}ᵀθ` for `j ∈ S`.
///
/// `features[j]` is the feature vector of server `j` for the current context.
pub fn shared_param_utilities(
    features: &[Vec<f64>],
    assortment: &Assortment,
    theta: &[f64],
) -> Result<Utilities> {
    let mut out = Vec::with_capacity(assortment.len());
    for &j in assortment.servers() {
        let x = features.get(j).ok_or_else(|| {
            Error::Domain(format!("no feature vector for server {}", j + 1))
        })?;
        check_dim(theta.len(), x.len())?;
        out.push(dot(x, theta));
    }
    Ok(Utilities(out))
}

/// Disjoint-parameter utilities `u_j = xᵀθ_j` for `j ∈ S`.
pub fn disjoint_utilities(
    x: &[f64],
    assortment: &Assortment,
    thetas: &[Vec<f64>],
) -> Result<Utilities> {
    let mut out = Vec::with_capacity(assortment.len());
    for &j in assortment.servers() {
        let theta = thetas.get(j).ok_or_else(|| {
            Error::Domain(format!("no parameter vector for server {}", j + 1))
        })?;
        check_dim(x.len(), theta.len())?;
        out.push(dot(x, theta));
    }
    Ok(Utilities(out))
}

/// Kronecker embedding `x ⊗ e_j` of a shared context for server `j`.
///
/// Coordinate `i * n_servers + j` carries `x[i]`; [`stack_parameters`] uses the
/// matching layout so that `kron(x, j)ᵀ stack(Θ) = xᵀθ_j`.
pub fn kronecker_feature(x: &[f64], server: usize, n_servers: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len() * n_servers];
    for (i, v) in x.iter().enumerate() {
        out[i * n_servers + server] = *v;
    }
    out
}

/// Per-server Kronecker features for every server.
pub fn kronecker_features(x: &[f64], n_servers: usize) -> Vec<Vec<f64>> {
    (0..n_servers)
        .map(|j| kronecker_feature(x, j, n_servers))
        .collect()
}

/// Stacks per-server parameters into the shared vector matching [`kronecker_feature`].
pub fn stack_parameters(thetas: &[Vec<f64>]) -> Vec<f64> {
    let n = thetas.len();
    let d = thetas.first().map_or(0, Vec::len);
    let mut out = vec![0.0; d * n];
    for (j, theta) in thetas.iter().enumerate() {
        for (i, v) in theta.iter().enumerate() {
            out[i * n + j] = *v;
        }
    }
    out
}

/// Inverse of [`stack_parameters`].
pub fn unstack_parameters(stacked: &[f64], n_servers: usize) -> Vec<Vec<f64>> {
    let d = stacked.len() / n_servers;
    (0..n_servers)
        .map(|j| (0..d).map(|i| stacked[i * n_servers + j]).collect())
        .collect()
}

/// Threshold sampler over `(p_1, …, p_K, p0)`.
///
/// Returns the 1-based item index whose cumulative interval contains
/// `u_rand`, or 0 for the outside option. Item intervals come first in
/// assortment order and the outside option last; each interval is closed on
/// the right, so a draw exactly on a boundary resolves to the lower interval.
pub fn sample_choice(dist: &ChoiceDistribution, u_rand: f64) -> usize {
    let mut acc = 0.0;
    for (j, p) in dist.p.iter().enumerate() {
        acc += p;
        if u_rand <= acc {
            return j + 1;
        }
    }
    0
}

/// Utilities from tabular performance and cost, rescaled to departure probabilities.
///
/// Returns the departure probability per server and whether the min-max
/// normalization was degenerate (all raw utilities equal), in which case every
/// server gets the midpoint of `[r_lo, r_hi]`.
pub fn utility_from_perf_cost(
    perf: &[f64],
    cost: &[f64],
    rho: f64,
    r_lo: f64,
    r_hi: f64,
) -> Result<(Vec<f64>, bool)> {
    check_dim(perf.len(), cost.len())?;
    if perf.is_empty() {
        return Err(Error::Domain("no servers".into()));
    }
    if !(0.0 < r_lo && r_lo < r_hi && r_hi < 1.0) {
        return Err(Error::Domain(format!(
            "rescale range [{r_lo}, {r_hi}] must satisfy 0 < r_lo < r_hi < 1"
        )));
    }
    if !(rho >= 0.0) {
        return Err(Error::Domain(format!("cost weight {rho} must be >= 0")));
    }
    let raw: Vec<f64> = perf.iter().zip(cost).map(|(p, c)| p - rho * c).collect();
    check_finite(&raw)?;
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        return Ok((vec![0.5 * (r_lo + r_hi); raw.len()], true));
    }
    let out = raw
        .iter()
        .map(|u| r_lo + (r_hi - r_lo) * (u - lo) / (hi - lo))
        .collect();
    Ok((out, false))
}

/// Default lower end of the departure-probability rescale range.
pub const DEFAULT_R_LO: f64 = 0.1;
/// Default upper end of the departure-probability rescale range.
pub const DEFAULT_R_HI: f64 = 0.99;

/// Choice probabilities induced by per-item departure probabilities.
///
/// Each `u_j` is read as a logistic probability, so item weights are the odds
/// `u_j / (1 - u_j)`. With a single item the item probability is `u_j`.
pub fn odds_choice_probs(u: &[f64], assortment: &Assortment) -> Result<ChoiceDistribution> {
    let mut odds = Vec::with_capacity(assortment.len());
    for &j in assortment.servers() {
        let uj = *u.get(j).ok_or_else(|| {
            Error::Domain(format!("no departure probability for server {}", j + 1))
        })?;
        if !(uj > 0.0 && uj < 1.0) {
            return Err(Error::Domain(format!(
                "departure probability {uj} must lie strictly inside (0, 1)"
            )));
        }
        odds.push(uj / (1.0 - uj));
    }
    let total = 1.0 + odds.iter().sum::<f64>();
    Ok(ChoiceDistribution {
        p0: 1.0 / total,
        p: odds.into_iter().map(|o| o / total).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn a(v: &[usize], n: usize) -> Assortment {
        Assortment::new(v.to_vec(), n).unwrap()
    }

    #[test]
    fn zero_utility_is_a_coin_flip() {
        let d = choice_probs(&[0.0]).unwrap();
        assert_abs_diff_eq!(d.p0, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(d.p[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(departure_rate(&[0.0]).unwrap(), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn two_items_closed_form() {
        // e/(e+2), 1/(e+2), 1/(e+2) evaluated at 30 digits
        let d = choice_probs(&[1.0, 0.0]).unwrap();
        assert_abs_diff_eq!(d.p[0], 0.576_116_884_765_829_1, epsilon = 1e-12);
        assert_abs_diff_eq!(d.p[1], 0.211_941_557_617_085_4, epsilon = 1e-12);
        assert_abs_diff_eq!(d.p0, 0.211_941_557_617_085_4, epsilon = 1e-12);
        assert_abs_diff_eq!(
            departure_rate(&[1.0, 0.0]).unwrap(),
            0.788_058_442_382_914_6,
            epsilon = 1e-12
        );
        let d = choice_probs(&[0.0, 0.0]).unwrap();
        for p in [d.p0, d.p[0], d.p[1]] {
            assert_abs_diff_eq!(p, 1.0 / 3.0, epsilon = 1e-15);
        }
        assert_abs_diff_eq!(departure_rate(&[0.0, 0.0]).unwrap(), 2.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn non_finite_utility_is_rejected() {
        assert!(matches!(choice_probs(&[f64::NAN]), Err(Error::Domain(_))));
        assert!(matches!(departure_rate(&[0.0, f64::INFINITY]), Err(Error::Domain(_))));
    }

    #[test]
    fn extreme_utilities_stay_normalized() {
        for u in [[700.0, -700.0], [-700.0, -700.0], [700.0, 700.0]] {
            let d = choice_probs(&u).unwrap();
            assert!(d.p0.is_finite() && d.p.iter().all(|p| p.is_finite()));
            assert_abs_diff_eq!(d.p0 + d.p.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn utilities_from_parameters() {
        let s = a(&[0], 1);
        assert_eq!(
            shared_param_utilities(&[vec![1.0, 0.0]], &s, &[1.0, 0.0]).unwrap().0,
            vec![1.0]
        );
        assert_eq!(
            shared_param_utilities(&[vec![0.5, 0.5]], &s, &[1.0, -1.0]).unwrap().0,
            vec![0.0]
        );
        assert_eq!(
            shared_param_utilities(&[vec![0.3, 0.2]], &s, &[0.0, 0.0]).unwrap().0,
            vec![0.0]
        );
        let s2 = a(&[0, 1], 2);
        let thetas = vec![vec![2.0, 0.0], vec![0.0, 3.0]];
        assert_eq!(disjoint_utilities(&[1.0, 0.0], &s2, &thetas).unwrap().0, vec![2.0, 0.0]);
        let zeros = vec![vec![0.0; 2]; 2];
        assert_eq!(disjoint_utilities(&[0.4, 0.1], &s2, &zeros).unwrap().0, vec![0.0, 0.0]);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let s = a(&[0], 1);
        assert!(matches!(
            shared_param_utilities(&[vec![1.0]], &s, &[1.0, 0.0]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            disjoint_utilities(&[1.0], &s, &[vec![1.0, 2.0]]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn sampler_threshold_rule() {
        let d = choice_probs(&[0.0]).unwrap();
        assert_eq!(sample_choice(&d, 0.3), 1);
        assert_eq!(sample_choice(&d, 0.7), 0);
        // a draw on a boundary belongs to the lower interval
        assert_eq!(sample_choice(&d, 0.5), 1);
        let d = ChoiceDistribution { p0: 0.2, p: vec![0.5, 0.3] };
        assert_eq!(sample_choice(&d, 0.0), 1);
        assert_eq!(sample_choice(&d, 0.49), 1);
        assert_eq!(sample_choice(&d, 0.51), 2);
        assert_eq!(sample_choice(&d, 0.81), 0);
    }

    #[test]
    fn perf_cost_rescale() {
        let (u, degenerate) =
            utility_from_perf_cost(&[0.9, 0.5], &[0.5, 0.1], 0.2, DEFAULT_R_LO, DEFAULT_R_HI)
                .unwrap();
        assert!(!degenerate);
        assert_abs_diff_eq!(u[0], 0.99, epsilon = 1e-12);
        assert_abs_diff_eq!(u[1], 0.1, epsilon = 1e-12);

        let (u, _) = utility_from_perf_cost(&[1.0, 0.0], &[0.0, 0.0], 0.0, 0.1, 0.99).unwrap();
        assert_eq!(u, vec![0.99, 0.1]);

        let (u, degenerate) =
            utility_from_perf_cost(&[0.4, 0.4, 0.4], &[0.1, 0.1, 0.1], 1.0, 0.1, 0.99).unwrap();
        assert!(degenerate);
        assert!(u.iter().all(|v| (v - 0.545).abs() < 1e-12));

        assert!(utility_from_perf_cost(&[0.1, 0.2], &[0.0, 0.0], 0.0, 0.5, 0.4).is_err());
    }

    #[test]
    fn odds_probabilities() {
        let d = odds_choice_probs(&[0.7], &a(&[0], 1)).unwrap();
        assert_abs_diff_eq!(d.p[0], 0.7, epsilon = 1e-15);
        assert_abs_diff_eq!(d.p0, 0.3, epsilon = 1e-15);

        // odds 99 and 1/9, normalized; 30-digit reference
        let d = odds_choice_probs(&[0.99, 0.1], &a(&[0, 1], 2)).unwrap();
        assert_abs_diff_eq!(d.p[0], 0.988_901_220_865_704_8, epsilon = 1e-12);
        assert_abs_diff_eq!(d.p[1], 0.001_109_877_913_429_523, epsilon = 1e-12);
        assert_abs_diff_eq!(d.p0, 0.009_988_901_220_865_705, epsilon = 1e-12);

        let d = odds_choice_probs(&[0.5, 0.5], &a(&[0, 1], 2)).unwrap();
        for p in [d.p0, d.p[0], d.p[1]] {
            assert_abs_diff_eq!(p, 1.0 / 3.0, epsilon = 1e-15);
        }
        assert!(odds_choice_probs(&[1.0], &a(&[0], 1)).is_err());
        assert!(odds_choice_probs(&[0.0], &a(&[0], 1)).is_err());
    }

    #[test]
    fn lexicographic_assortments() {
        let c = enumerate_assortments(3, 2).unwrap();
        let got: Vec<_> = c.iter().map(|s| s.servers().to_vec()).collect();
        assert_eq!(got, vec![vec![0, 1], vec![0, 2], vec![1, 2]]);
        assert_eq!(enumerate_assortments(5, 1).unwrap().len(), 5);
        assert_eq!(enumerate_assortments(10, 2).unwrap().len(), 45);
        assert_eq!(enumerate_assortments(4, 4).unwrap().len(), 1);
        assert!(enumerate_assortments(3, 4).is_err());
        assert!(enumerate_assortments(3, 0).is_err());
        let c = enumerate_assortments(6, 3).unwrap();
        assert_eq!(c.len(), 20);
        assert!(c.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn assortment_validation() {
        assert_eq!(Assortment::new(vec![2, 0], 3).unwrap().servers(), &[0, 2]);
        assert!(Assortment::new(vec![1, 1], 3).is_err());
        assert!(Assortment::new(vec![3], 3).is_err());
        assert!(Assortment::new(vec![], 3).is_err());
        assert_eq!(Assortment::new(vec![0, 2], 3).unwrap().to_string(), "{1,3}");
    }

    #[test]
    fn kronecker_round_trip() {
        let thetas = vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]];
        let stacked = stack_parameters(&thetas);
        assert_eq!(unstack_parameters(&stacked, 2), thetas);
        let x = [0.5, -1.0, 2.0];
        for (j, theta) in thetas.iter().enumerate() {
            assert_abs_diff_eq!(
                dot(&kronecker_feature(&x, j, 2), &stacked),
                dot(&x, theta),
                epsilon = 1e-14
            );
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]

        #[test]
        fn lipschitz_and_monotone(
            u in prop::collection::vec(-8.0f64..8.0, 1..5),
            delta in prop::collection::vec(-3.0f64..3.0, 5),
            lift in prop::collection::vec(0.0f64..3.0, 5),
        ) {
            let v: Vec<f64> = u.iter().zip(&delta).map(|(a, b)| a + b).collect();
            let max_gap = u.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            let ru = departure_rate(&u).unwrap();
            let rv = departure_rate(&v).unwrap();
            prop_assert!((ru - rv).abs() <= max_gap + 1e-12);

            let w: Vec<f64> = u.iter().zip(&lift).map(|(a, b)| a + b).collect();
            prop_assert!(departure_rate(&w).unwrap() >= ru - 1e-15);
        }
    }

    proptest! {
        #[test]
        fn normalized_and_complementary(u in prop::collection::vec(-50.0f64..50.0, 1..8)) {
            let d = choice_probs(&u).unwrap();
            prop_assert!((d.p0 + d.p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(d.p0 > 0.0 && d.p.iter().all(|p| *p > 0.0));
            prop_assert_eq!(departure_rate(&u).unwrap(), 1.0 - d.p0);
        }

        #[test]
        fn disjoint_matches_kronecker_embedding(
            x in prop::collection::vec(-1.0f64..1.0, 3),
            flat in prop::collection::vec(-1.0f64..1.0, 12),
            k in 1usize..=4,
        ) {
            let n = 4;
            let thetas: Vec<Vec<f64>> = flat.chunks(3).map(|c| c.to_vec()).collect();
            let stacked = stack_parameters(&thetas);
            let feats = kronecker_features(&x, n);
            for s in enumerate_assortments(n, k).unwrap() {
                let a = disjoint_utilities(&x, &s, &thetas).unwrap();
                let b = shared_param_utilities(&feats, &s, &stacked).unwrap();
                for (ua, ub) in a.0.iter().zip(&b.0) {
                    prop_assert!((ua - ub).abs() <= 1e-12);
                }
            }
        }
    }
}
