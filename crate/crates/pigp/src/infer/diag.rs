//! Chain diagnostics: split potential scale reduction and rank-normalized
//! effective sample size.

use statrs::distribution::{ContinuousCDF, Normal};

use crate::infer::hmc::PosteriorDraws;

/// Per-parameter diagnostics. `rhat` is `None` for single-chain runs.
#[derive(Clone, Debug)]
pub struct Diagnostics {
    pub names: Vec<String>,
    pub rhat: Option<Vec<f64>>,
    pub ess: Vec<f64>,
}

impl Diagnostics {
    pub fn max_rhat(&self) -> Option<f64> {
        self.rhat
            .as_ref()
            .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
    }
}

/// Split each chain into halves, dropping the middle draw of odd chains.
fn split(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(chains.len() * 2);
    for c in chains {
        let half = c.len() / 2;
        out.push(c[..half].to_vec());
        out.push(c[c.len() - half..].to_vec());
    }
    out
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_var(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// Split potential scale reduction over chains of equal length.
///
/// Degenerate inputs use the conventions: all-constant chains give exactly 1,
/// chains stuck at different constants give infinity.
pub fn split_rhat(chains: &[Vec<f64>]) -> f64 {
    let seqs = split(chains);
    let n = seqs.iter().map(|s| s.len()).min().unwrap_or(0);
    if n < 2 {
        return f64::NAN;
    }
    let means: Vec<f64> = seqs.iter().map(|s| mean(&s[..n])).collect();
    let vars: Vec<f64> = seqs.iter().map(|s| sample_var(&s[..n])).collect();
    let w = mean(&vars);
    let b = n as f64 * sample_var(&means);
    let tiny = 1e-300;
    if w < tiny {
        return if b < tiny { 1.0 } else { f64::INFINITY };
    }
    let var_plus = (n as f64 - 1.0) / n as f64 * w + b / n as f64;
    (var_plus / w).sqrt()
}

/// Average-rank normal scores over all chains jointly.
fn rank_normalize(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let total: usize = chains.iter().map(|c| c.len()).sum();
    let mut indexed: Vec<(f64, usize)> = Vec::with_capacity(total);
    let mut offsets = Vec::with_capacity(chains.len());
    let mut off = 0;
    for c in chains {
        offsets.push(off);
        for (i, &v) in c.iter().enumerate() {
            indexed.push((v, off + i));
        }
        off += c.len();
    }
    indexed.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut ranks = vec![0.0; total];
    let mut i = 0;
    while i < total {
        let mut j = i;
        while j + 1 < total && indexed[j + 1].0 == indexed[i].0 {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[indexed[k].1] = avg;
        }
        i = j + 1;
    }
    let normal = Normal::new(0.0, 1.0).unwrap();
    let s = total as f64;
    let z: Vec<f64> = ranks
        .iter()
        .map(|r| normal.inverse_cdf((r - 0.375) / (s + 0.25)))
        .collect();
    chains
        .iter()
        .zip(&offsets)
        .map(|(c, &o)| z[o..o + c.len()].to_vec())
        .collect()
}

/// Autocovariance at lags 0..n-1 (biased, divided by n).
fn autocovariance(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let m = mean(x);
    let centered: Vec<f64> = x.iter().map(|v| v - m).collect();
    let mut acov = vec![0.0; n];
    for (t, a) in acov.iter_mut().enumerate() {
        let mut s = 0.0;
        for i in 0..n - t {
            s += centered[i] * centered[i + t];
        }
        *a = s / n as f64;
    }
    acov
}

/// Effective sample size of rank-normalized split chains, with Geyer's
/// initial monotone positive sequence truncation.
pub fn rank_ess(chains: &[Vec<f64>]) -> f64 {
    let seqs = split(chains);
    let n = seqs.iter().map(|s| s.len()).min().unwrap_or(0);
    if n < 4 {
        return f64::NAN;
    }
    let seqs: Vec<Vec<f64>> = seqs.into_iter().map(|mut s| {
        s.truncate(n);
        s
    }).collect();
    let normed = rank_normalize(&seqs);
    let m = normed.len() as f64;
    let acovs: Vec<Vec<f64>> = normed.iter().map(|c| autocovariance(c)).collect();
    let chain_vars: Vec<f64> = acovs.iter().map(|a| a[0] * n as f64 / (n as f64 - 1.0)).collect();
    let w = mean(&chain_vars);
    let means: Vec<f64> = normed.iter().map(|c| mean(c)).collect();
    let var_plus = if normed.len() > 1 {
        (n as f64 - 1.0) / n as f64 * w + sample_var(&means)
    } else {
        (n as f64 - 1.0) / n as f64 * w
    };
    if var_plus <= 0.0 {
        return f64::NAN;
    }

    let mean_acov = |t: usize| -> f64 { mean(&acovs.iter().map(|a| a[t]).collect::<Vec<_>>()) };
    let rho = |mean_acov_t: f64| -> f64 { 1.0 - (w - mean_acov_t) / var_plus };
    let mut rho_sum = 0.0;
    let mut prev_pair = f64::INFINITY;
    let mut t = 1;
    // rho_0 is 1 by construction.
    while t + 1 < n {
        let r_even = rho(mean_acov(t));
        let r_odd = rho(mean_acov(t + 1));
        let mut pair = r_even + r_odd;
        if pair < 0.0 {
            break;
        }
        // Enforce monotone decrease of the paired sums.
        if pair > prev_pair {
            pair = prev_pair;
        }
        prev_pair = pair;
        rho_sum += pair;
        t += 2;
    }
    let tau = 1.0 + 2.0 * rho_sum;
    (m * n as f64 / tau).max(1.0)
}

/// Split R-hat and rank-normalized ESS for every parameter. With a single
/// chain only the ESS column is produced.
pub fn diagnostics(draws: &PosteriorDraws) -> Diagnostics {
    let dim = draws.dim();
    let mut rhat = Vec::with_capacity(dim);
    let mut ess = Vec::with_capacity(dim);
    for p in 0..dim {
        let chains: Vec<Vec<f64>> = (0..draws.chains)
            .map(|c| draws.chain_param(c, p))
            .collect();
        if draws.chains >= 2 {
            rhat.push(split_rhat(&chains));
        }
        ess.push(rank_ess(&chains));
    }
    Diagnostics {
        names: draws.names.clone(),
        rhat: if draws.chains >= 2 { Some(rhat) } else { None },
        ess,
    }
}
