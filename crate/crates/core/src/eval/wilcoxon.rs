use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Largest effective sample size `Auto` evaluates exactly.
pub const EXACT_MAX_N: usize = 25;
/// Exact counts are held in `u128`, which bounds the exact mode.
const EXACT_HARD_LIMIT: usize = 120;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WilcoxonMode {
    Exact,
    NormalApprox,
    Auto,
}

impl FromStr for WilcoxonMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Self::Exact),
            "normal" | "normal_approx" => Ok(Self::NormalApprox),
            "auto" => Ok(Self::Auto),
            _ => Err(Error::Config(alloc::format!("unknown wilcoxon mode `{s}`"))),
        }
    }
}

impl fmt::Display for WilcoxonMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Exact => "exact",
            Self::NormalApprox => "normal",
            Self::Auto => "auto",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Rank sum of positive differences `a - b`.
    pub w_plus: f64,
    pub w_minus: f64,
    pub p_value: f64,
    pub n_effective: usize,
    /// Mode actually used (never `Auto`).
    pub mode: WilcoxonMode,
    /// Every difference was zero; `p_value` is 1.
    pub degenerate: bool,
    /// Median of the nonzero differences (0 when degenerate).
    pub median_difference: f64,
}

/// Paired observations sharing a condition id, with their test result.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PairedScores {
    pub conditions: Vec<String>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub result: Option<WilcoxonResult>,
}

impl PairedScores {
    pub fn push(&mut self, condition: impl Into<String>, a: f64, b: f64) {
        self.conditions.push(condition.into());
        self.a.push(a);
        self.b.push(b);
    }

    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    pub fn differences(&self) -> Vec<f64> {
        self.a.iter().zip(&self.b).map(|(a, b)| a - b).collect()
    }

    pub fn test(mut self, mode: WilcoxonMode) -> Result<Self> {
        if self.a.len() != self.b.len() {
            return Err(Error::Shape("unpaired scores".into()));
        }
        self.result = Some(wilcoxon_signed_rank(&self.differences(), mode)?);
        Ok(self)
    }
}

/// Average ranks of `|d|`, doubled so ties stay integral.
pub fn doubled_ranks(abs: &[f64]) -> Vec<u64> {
    let mut idx: Vec<usize> = (0..abs.len()).collect();
    idx.sort_by(|&a, &b| abs[a].total_cmp(&abs[b]));
    let mut ranks = vec![0u64; abs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && abs[idx[j + 1]] == abs[idx[i]] {
            j += 1;
        }
        // positions i..=j share rank (i+1 + j+1)/2
        let r2 = (i + 1 + j + 1) as u64;
        for &k in &idx[i..=j] {
            ranks[k] = r2;
        }
        i = j + 1;
    }
    ranks
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Two-sided Wilcoxon signed-rank test on paired differences.
///
/// Zero differences are dropped, tied magnitudes share average ranks. The exact
/// p-value is `min(1, 2·min(P[W⁺ ≤ w], P[W⁺ ≥ w]))` under the null distribution
/// of all `2ⁿ` sign assignments to the observed ranks. The normal approximation
/// uses the tie-corrected variance without continuity correction.
pub fn wilcoxon_signed_rank(differences: &[f64], mode: WilcoxonMode) -> Result<WilcoxonResult> {
    if differences.is_empty() {
        return Err(Error::EmptyInput("paired scores"));
    }
    if differences.iter().any(|d| !d.is_finite()) {
        return Err(Error::NonFinite("paired scores"));
    }
    let nz: Vec<f64> = differences.iter().copied().filter(|&d| d != 0.0).collect();
    let n = nz.len();
    let mode = match mode {
        WilcoxonMode::Auto if n <= EXACT_MAX_N => WilcoxonMode::Exact,
        WilcoxonMode::Auto => WilcoxonMode::NormalApprox,
        m => m,
    };
    if n == 0 {
        return Ok(WilcoxonResult {
            w_plus: 0.0,
            w_minus: 0.0,
            p_value: 1.0,
            n_effective: 0,
            mode,
            degenerate: true,
            median_difference: 0.0,
        });
    }
    let abs: Vec<f64> = nz.iter().map(|d| d.abs()).collect();
    let ranks = doubled_ranks(&abs);
    let w2_plus: u64 = nz
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r)
        .sum();
    let total2: u64 = ranks.iter().sum();
    let p_value = match mode {
        WilcoxonMode::Exact => exact_p(&ranks, w2_plus)?,
        _ => normal_p(&abs, w2_plus as f64 / 2.0),
    };
    Ok(WilcoxonResult {
        w_plus: w2_plus as f64 / 2.0,
        w_minus: (total2 - w2_plus) as f64 / 2.0,
        p_value,
        n_effective: n,
        mode,
        degenerate: false,
        median_difference: median(nz),
    })
}

/// Null distribution of doubled `W⁺` by subset-sum counting.
fn exact_p(ranks2: &[u64], w2: u64) -> Result<f64> {
    if ranks2.len() > EXACT_HARD_LIMIT {
        return Err(Error::Config(alloc::format!(
            "exact mode supports at most {EXACT_HARD_LIMIT} nonzero differences"
        )));
    }
    let total: u64 = ranks2.iter().sum();
    let mut counts = vec![0u128; total as usize + 1];
    counts[0] = 1;
    let mut reach = 0usize;
    for &r in ranks2 {
        let r = r as usize;
        for s in (0..=reach).rev() {
            let c = counts[s];
            if c != 0 {
                counts[s + r] += c;
            }
        }
        reach += r;
    }
    let le: u128 = counts[..=w2 as usize].iter().sum();
    let ge: u128 = counts[w2 as usize..].iter().sum();
    let all = 1u128 << ranks2.len();
    let tail = le.min(ge);
    // 2·tail / 2ⁿ, exact as long as the ratio is representable
    Ok(((2 * tail) as f64 / all as f64).min(1.0))
}

fn normal_p(abs: &[f64], w_plus: f64) -> f64 {
    let n = abs.len() as f64;
    let mean = n * (n + 1.0) / 4.0;
    let mut sorted = abs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut tie = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie += t * t * t - t;
        i = j + 1;
    }
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie / 48.0;
    if var <= 0.0 {
        return 1.0;
    }
    let z = (w_plus - mean) / libm::sqrt(var);
    libm::erfc(z.abs() / core::f64::consts::SQRT_2).min(1.0)
}
