//! Independent verification machinery.
//!
//! Everything here is an *oracle*: a separate, naive re-implementation used to
//! cross-check the production code paths. Nothing in this module shares
//! arithmetic with the model, losses, or metrics — that separation is the
//! point.

use serde::Deserialize;
use std::collections::BTreeMap;
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("finite_diff: epsilon {0} outside [1e-6, 1e-3]")]
    EpsOutOfRange(f64),
    #[error("finite_diff: non-finite evaluation at coordinate {0}")]
    NonFiniteEval(usize),
    #[error("enumerate_paths: M+N = {m}+{n} exceeds bound 22 (~{estimate:.3e} paths)")]
    PathBound { m: usize, n: usize, estimate: f64 },
    #[error("audit: line {line}: {msg}")]
    LogParse { line: usize, msg: String },
    #[error("audit: log contains no sampled prefixes")]
    EmptyLog,
}

// ── Finite differences ───────────────────────────────────────────────

/// Central-difference gradient estimate of a scalar function, one coordinate
/// at a time. Double precision only.
pub fn finite_diff<F>(mut f: F, params: &[f64], eps: f64) -> Result<Vec<f64>, VerifyError>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(VerifyError::EpsOutOfRange(eps));
    }
    let mut x = params.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let hi = f(&x);
        x[i] = orig - eps;
        let lo = f(&x);
        x[i] = orig;
        if !hi.is_finite() || !lo.is_finite() {
            return Err(VerifyError::NonFiniteEval(i));
        }
        grad.push((hi - lo) / (2.0 * eps));
    }
    Ok(grad)
}

/// Relative error used by gradient checks: |a−b| / max(1e-12, |a|, |b|).
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (1e-12f64).max(a.abs()).max(b.abs())
}

// ── Closed-form confidence gradient ──────────────────────────────────

/// Exact derivative of the per-position modified loss w.r.t. the confidence:
/// d/dc [ −ln(c·p₁ + (1−c)·p₂) − λ·ln c ]
///     = −(p₁−p₂)/(c·p₁ + (1−c)·p₂) − λ/c
/// where p₁ is the prefix-context probability of the reference token and p₂
/// the full-context one.
pub fn closed_form_dldc(c: f64, p_simt_correct: f64, p_omt_correct: f64, lambda: f64) -> f64 {
    assert!(c > 0.0 && c < 1.0, "closed_form_dldc: c must be in (0,1), got {c}");
    assert!(
        p_simt_correct > 0.0 && p_simt_correct <= 1.0,
        "closed_form_dldc: p_simt out of (0,1]"
    );
    assert!(
        p_omt_correct > 0.0 && p_omt_correct <= 1.0,
        "closed_form_dldc: p_omt out of (0,1]"
    );
    let p_mod = c * p_simt_correct + (1.0 - c) * p_omt_correct;
    -(p_simt_correct - p_omt_correct) / p_mod - lambda / c
}

// ── Decision-path enumeration ────────────────────────────────────────

/// All monotone read/write interleavings for a sentence pair, stored as
/// g-sequences: `g[i]` = number of source reads before the (i+1)-th write.
pub struct PathLattice {
    pub m: usize,
    pub n: usize,
    paths: Vec<Vec<u32>>,
}

/// Exact binomial via the multiplicative formula; f64 is fine at this scale.
fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    let mut acc = 1.0f64;
    for i in 0..k {
        acc = acc * (n - i) as f64 / (i + 1) as f64;
    }
    acc
}

pub fn enumerate_paths(m: usize, n: usize) -> Result<PathLattice, VerifyError> {
    if m + n > 22 {
        return Err(VerifyError::PathBound {
            m,
            n,
            estimate: binomial(m + n, n),
        });
    }
    let mut paths = Vec::with_capacity(binomial(m + n, n) as usize);
    let mut g = Vec::with_capacity(n);
    // Monotone sequences of length n over 0..=m biject with the interleavings.
    fn rec(paths: &mut Vec<Vec<u32>>, g: &mut Vec<u32>, lo: u32, m: u32, n: usize) {
        if g.len() == n {
            paths.push(g.clone());
            return;
        }
        for v in lo..=m {
            g.push(v);
            rec(paths, g, v, m, n);
            g.pop();
        }
    }
    rec(&mut paths, &mut g, 0, m as u32, n);
    Ok(PathLattice { m, n, paths })
}

impl PathLattice {
    pub fn count(&self) -> usize {
        self.paths.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = &[u32]> {
        self.paths.iter().map(|p| p.as_slice())
    }

    /// Minimum-latency path that satisfies every alignment (naive exhaustive
    /// search — the oracle the frontier policy is checked against).
    /// `a[i] == 0` means unaligned (always satisfied).
    pub fn min_al_sa1(&self, a: &[usize]) -> Option<(Vec<u32>, f64)> {
        assert_eq!(a.len(), self.n, "min_al_sa1: alignment length != N");
        let mut best: Option<(Vec<u32>, f64)> = None;
        for g in self.iter() {
            let ok = a
                .iter()
                .zip(g.iter())
                .all(|(&ai, &gi)| ai == 0 || ai <= gi as usize);
            if !ok {
                continue;
            }
            let al = al_naive(g, self.m);
            if best.as_ref().map_or(true, |(_, b)| al < *b) {
                best = Some((g.to_vec(), al));
            }
        }
        best
    }
}

/// Naive average lagging, kept separate from the production metric on purpose.
pub fn al_naive(g: &[u32], m: usize) -> f64 {
    let n = g.len();
    assert!(n > 0 && m > 0, "al_naive: empty inputs");
    let r = n as f64 / m as f64;
    let tau = g
        .iter()
        .position(|&gi| gi as usize == m)
        .map(|p| p + 1)
        .unwrap_or(n);
    let mut s = 0.0;
    for (i, &gi) in g.iter().take(tau).enumerate() {
        s += gi as f64 - i as f64 / r;
    }
    s / tau as f64
}

/// Naive alignment satisfaction; `a[i] == 0` means unaligned.
pub fn sa_naive(g: &[u32], a: &[usize]) -> f64 {
    assert_eq!(g.len(), a.len(), "sa_naive: length mismatch");
    let hits = a
        .iter()
        .zip(g.iter())
        .filter(|&(&ai, &gi)| ai == 0 || ai <= gi as usize)
        .count();
    hits as f64 / g.len() as f64
}

// ── Coverage audit ───────────────────────────────────────────────────

/// Subset view of a training-log line; unknown fields are ignored so the
/// audit stays decoupled from the writer.
#[derive(Deserialize)]
struct AuditLine {
    step: u64,
    #[serde(default)]
    band: Option<(u32, u32)>,
    #[serde(default)]
    sentences: Vec<AuditSentence>,
}

#[derive(Deserialize)]
struct AuditSentence {
    m: u32,
    n: u32,
    j: u32,
    /// 1-based inclusive range of target positions whose prefix-context loss
    /// terms were active; `active_lo == 0` means no position was active.
    active_lo: u32,
    active_hi: u32,
}

#[derive(Debug, Clone)]
pub struct Violation {
    pub step: u64,
    pub m: u32,
    pub n: u32,
    pub j: u32,
    pub active: (u32, u32),
    pub allowed: (u32, u32),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step {} M={} N={} j={}: active i-range {}..={} outside allowed {}..={}",
            self.step, self.m, self.n, self.j, self.active.0, self.active.1, self.allowed.0,
            self.allowed.1
        )
    }
}

pub struct AuditReport {
    /// Per sentence length M: visit counts indexed by j−1.
    pub histogram: BTreeMap<u32, Vec<u64>>,
    pub violations: Vec<Violation>,
    pub chi2: f64,
    pub dof: u64,
    pub p_value: f64,
    pub records: usize,
    pub visits: u64,
    /// Sampled prefixes with no trainable position under the band (possible
    /// only through the unrestricted fallback draw); excluded from chi2.
    pub off_support: u64,
}

impl AuditReport {
    pub fn passed(&self, min_p: f64) -> bool {
        self.violations.is_empty() && self.p_value > min_p
    }
}

impl fmt::Display for AuditReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "coverage audit: {} records, {} sampled prefixes",
            self.records, self.visits
        )?;
        for (m, counts) in &self.histogram {
            let total: u64 = counts.iter().sum();
            let empty = counts.iter().filter(|&&c| c == 0).count();
            writeln!(f, "  M={m}: {total} visits, {empty} empty of {m} buckets")?;
        }
        writeln!(
            f,
            "  uniformity: chi2 = {:.3}, dof = {}, p = {:.6}",
            self.chi2, self.dof, self.p_value
        )?;
        if self.off_support > 0 {
            writeln!(f, "  off-support prefixes (empty active range): {}", self.off_support)?;
        }
        if self.violations.is_empty() {
            writeln!(f, "  band violations: none")?;
        } else {
            writeln!(f, "  band violations: {}", self.violations.len())?;
            for v in self.violations.iter().take(20) {
                writeln!(f, "    {v}")?;
            }
        }
        Ok(())
    }
}

/// Allowed 1-based active i-range for prefix length `j` under band (k1,k2),
/// intersected with 1..=n. Returns (1,0) when empty.
pub fn band_allowed_range(j: u32, n: u32, band: Option<(u32, u32)>) -> (u32, u32) {
    match band {
        None => (1, n),
        Some((k1, k2)) => {
            let lo = (j + 1).saturating_sub(k2).max(1);
            let hi = (j + 1).saturating_sub(k1).min(n);
            if lo > hi {
                (1, 0)
            } else {
                (lo, hi)
            }
        }
    }
}

/// Parse a line-delimited JSON training log, build the per-j visit histogram,
/// test j-uniformity per sentence length, and flag any prefix-loss activity
/// outside the configured prohibition band.
pub fn coverage_audit(log_text: &str) -> Result<AuditReport, VerifyError> {
    let mut histogram: BTreeMap<u32, Vec<u64>> = BTreeMap::new();
    // Uniformity groups. Without a band every j is feasible regardless of N,
    // so lengths merge under one key per M (dof = Σ(M−1)); with a band the
    // feasible-j support depends on N, so groups split by (M, N, band).
    type GroupKey = (u32, u32, Option<(u32, u32)>);
    let mut groups: BTreeMap<GroupKey, (Vec<u32>, Vec<u64>)> = BTreeMap::new();
    let mut violations = Vec::new();
    let mut records = 0usize;
    let mut visits = 0u64;
    let mut off_support = 0u64;

    for (idx, line) in log_text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: AuditLine = serde_json::from_str(line).map_err(|e| VerifyError::LogParse {
            line: idx + 1,
            msg: e.to_string(),
        })?;
        records += 1;
        for s in &rec.sentences {
            if s.j == 0 && s.active_lo == 0 {
                // Full-context-only record: no prefix was sampled.
                continue;
            }
            if s.m == 0 || s.j == 0 || s.j > s.m {
                return Err(VerifyError::LogParse {
                    line: idx + 1,
                    msg: format!("invalid prefix record m={} j={}", s.m, s.j),
                });
            }
            let counts = histogram.entry(s.m).or_insert_with(|| vec![0; s.m as usize]);
            counts[(s.j - 1) as usize] += 1;
            visits += 1;

            let key: GroupKey = match rec.band {
                None => (s.m, 0, None),
                Some(b) => (s.m, s.n, Some(b)),
            };
            let (support, group_counts) = groups.entry(key).or_insert_with(|| {
                let support: Vec<u32> = (1..=s.m)
                    .filter(|&j| {
                        let (lo, hi) = band_allowed_range(j, s.n, rec.band);
                        lo <= hi
                    })
                    .collect();
                let len = support.len();
                (support, vec![0u64; len])
            });
            match support.binary_search(&s.j) {
                Ok(pos) => group_counts[pos] += 1,
                // A prefix with no trainable position (only possible via the
                // unrestricted fallback draw, or a foreign log).
                Err(_) => off_support += 1,
            }

            let allowed = band_allowed_range(s.j, s.n, rec.band);
            let active_empty = s.active_lo == 0;
            let allowed_empty = allowed.0 > allowed.1;
            let out = if active_empty {
                false
            } else if allowed_empty {
                true
            } else {
                s.active_lo < allowed.0 || s.active_hi > allowed.1
            };
            if out {
                violations.push(Violation {
                    step: rec.step,
                    m: s.m,
                    n: s.n,
                    j: s.j,
                    active: (s.active_lo, s.active_hi),
                    allowed,
                });
            }
        }
    }

    if visits == 0 {
        return Err(VerifyError::EmptyLog);
    }

    let mut chi2 = 0.0f64;
    let mut dof = 0u64;
    for (support, counts) in groups.values() {
        if support.len() < 2 {
            continue;
        }
        let total: u64 = counts.iter().sum();
        if total == 0 {
            continue;
        }
        let expected = total as f64 / support.len() as f64;
        for &c in counts {
            let d = c as f64 - expected;
            chi2 += d * d / expected;
        }
        dof += (support.len() - 1) as u64;
    }
    let p_value = if dof == 0 { 1.0 } else { chi2_sf(chi2, dof) };

    Ok(AuditReport {
        histogram,
        violations,
        chi2,
        dof,
        p_value,
        records,
        visits,
        off_support,
    })
}

// ── Chi-square survival function ─────────────────────────────────────
// Hand-rolled regularized incomplete gamma (series + Lentz continued
// fraction) — the one statistical special function the audit needs.

fn ln_gamma(x: f64) -> f64 {
    // Lanczos, g = 7, 9 coefficients.
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_59,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_571_6e-6,
        1.505_632_735_149_311_6e-7,
    ];
    assert!(x > 0.0, "ln_gamma: domain");
    if x < 0.5 {
        // Reflection: Γ(x)Γ(1−x) = π / sin(πx)
        return std::f64::consts::PI.ln()
            - (std::f64::consts::PI * x).sin().ln()
            - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEF[0];
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Regularized lower incomplete gamma P(a, x).
fn gamma_p(a: f64, x: f64) -> f64 {
    assert!(a > 0.0 && x >= 0.0, "gamma_p: domain");
    if x == 0.0 {
        return 0.0;
    }
    if x < a + 1.0 {
        // Series expansion.
        let mut term = 1.0 / a;
        let mut sum = term;
        let mut n = 1.0;
        while n < 500.0 {
            term *= x / (a + n);
            sum += term;
            if term.abs() < sum.abs() * 3e-16 {
                break;
            }
            n += 1.0;
        }
        sum * (-x + a * x.ln() - ln_gamma(a)).exp()
    } else {
        1.0 - gamma_q_cf(a, x)
    }
}

/// Regularized upper incomplete gamma Q(a, x) via Lentz's continued fraction;
/// valid for x ≥ a + 1.
fn gamma_q_cf(a: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / TINY;
    let mut d = 1.0 / b;
    let mut h = d;
    let mut i = 1.0f64;
    while i < 500.0 {
        let an = -i * (i - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < TINY {
            d = TINY;
        }
        c = b + an / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 3e-16 {
            break;
        }
        i += 1.0;
    }
    (-x + a * x.ln() - ln_gamma(a)).exp() * h
}

/// P(X > x) for X ~ chi-square with `dof` degrees of freedom.
pub fn chi2_sf(x: f64, dof: u64) -> f64 {
    assert!(dof >= 1, "chi2_sf: dof must be >= 1");
    if x <= 0.0 {
        return 1.0;
    }
    let a = dof as f64 / 2.0;
    let hx = x / 2.0;
    if hx < a + 1.0 {
        1.0 - gamma_p(a, hx)
    } else {
        gamma_q_cf(a, hx)
    }
}
