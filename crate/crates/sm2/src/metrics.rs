//! Latency, alignment-satisfaction, translation-quality, and correlation
//! metrics, plus the latency/quality curve assembly used by `analyze`.
//!
//! All functions are pure. Contract violations (empty inputs, length
//! mismatches on the per-sentence ops) panic; statistical edge cases
//! (constant vectors) are reported as absent coefficients.

use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("correlations: length mismatch ({xs} vs {ys})")]
    LengthMismatch { xs: usize, ys: usize },
    #[error("correlations: need at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error("build_curve: policy {param} produced {got} traces for {want} references")]
    TraceCountMismatch { param: f64, got: usize, want: usize },
}

// ── Average Lagging ──────────────────────────────────────────────────

/// AL over one sentence. `g[i]` is the number of source tokens read before
/// emitting target token i+1; `m` is the full source length.
///
/// AL = (1/τ) Σ_{i=1..τ} [g_i − (i−1)/r], r = N/M,
/// τ = min{ i : g_i = M } if any read reaches the full source, else N.
pub fn average_lagging(g: &[u32], m: usize) -> f64 {
    assert!(!g.is_empty(), "average_lagging: empty read sequence");
    assert!(m >= 1, "average_lagging: empty source");
    let n = g.len();
    for w in g.windows(2) {
        assert!(w[0] <= w[1], "average_lagging: g not monotone: {:?}", g);
    }
    assert!(
        g.iter().all(|&gi| gi as usize <= m),
        "average_lagging: g exceeds source length {m}: {:?}",
        g
    );
    let r = n as f64 / m as f64;
    let tau = g
        .iter()
        .position(|&gi| gi as usize == m)
        .map(|p| p + 1)
        .unwrap_or(n);
    let mut acc = 0.0;
    for (i, &gi) in g.iter().take(tau).enumerate() {
        acc += gi as f64 - i as f64 / r;
    }
    acc / tau as f64
}

// ── Satisfied Alignments ─────────────────────────────────────────────

/// Fraction of target positions whose gold source token was read before the
/// position was written: SA = (1/N) Σ 1[a_i ≤ g_i].
/// `None` marks an unaligned target token, which counts as satisfied.
pub fn satisfied_alignments(a: &[Option<u32>], g: &[u32]) -> f64 {
    assert_eq!(
        a.len(),
        g.len(),
        "satisfied_alignments: |a| = {} but |g| = {}",
        a.len(),
        g.len()
    );
    assert!(!g.is_empty(), "satisfied_alignments: empty sentence");
    let hits = a
        .iter()
        .zip(g.iter())
        .filter(|&(&ai, &gi)| ai.map_or(true, |ai| ai <= gi))
        .count();
    hits as f64 / g.len() as f64
}

// ── Corpus BLEU ──────────────────────────────────────────────────────

fn ngram_counts(seq: &[u32], n: usize) -> HashMap<&[u32], u64> {
    let mut map: HashMap<&[u32], u64> = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *map.entry(w).or_insert(0) += 1;
        }
    }
    map
}

/// Corpus BLEU-4: geometric mean of modified n-gram precisions (add-1
/// smoothing for n ≥ 2) times the brevity penalty, on a 0–100 scale.
pub fn corpus_bleu(hyps: &[Vec<u32>], refs: &[Vec<u32>]) -> f64 {
    assert!(!hyps.is_empty(), "corpus_bleu: empty corpus");
    assert_eq!(
        hyps.len(),
        refs.len(),
        "corpus_bleu: {} hypotheses vs {} references",
        hyps.len(),
        refs.len()
    );
    let mut hyp_len = 0u64;
    let mut ref_len = 0u64;
    let mut matches = [0u64; 4];
    let mut totals = [0u64; 4];
    for (h, r) in hyps.iter().zip(refs) {
        hyp_len += h.len() as u64;
        ref_len += r.len() as u64;
        for n in 1..=4usize {
            let hc = ngram_counts(h, n);
            if hc.is_empty() {
                continue;
            }
            let rc = ngram_counts(r, n);
            for (gram, &c) in &hc {
                totals[n - 1] += c;
                matches[n - 1] += c.min(rc.get(gram).copied().unwrap_or(0));
            }
        }
    }
    if hyp_len == 0 || matches[0] == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 0..4 {
        let (m, t) = if n == 0 {
            (matches[0] as f64, totals[0] as f64)
        } else {
            (matches[n] as f64 + 1.0, totals[n] as f64 + 1.0)
        };
        log_sum += (m / t).ln();
    }
    let bp = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    100.0 * bp * (log_sum / 4.0).exp()
}

// ── Correlation statistics ───────────────────────────────────────────

/// A coefficient is `None` when undefined for the inputs (constant vector).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correlations {
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
    pub kendall_tau: Option<f64>,
}

fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        None
    } else {
        Some(sxy / (sxx * syy).sqrt())
    }
}

/// Average ranks (ties share the mean of the ranks they occupy), 1-based.
fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn kendall_tau_b(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len();
    let mut concordant = 0i64;
    let mut discordant = 0i64;
    let mut ties_x = 0i64;
    let mut ties_y = 0i64;
    for i in 0..n {
        for j in (i + 1)..n {
            let dx = xs[i] - xs[j];
            let dy = ys[i] - ys[j];
            if dx == 0.0 && dy == 0.0 {
                ties_x += 1;
                ties_y += 1;
            } else if dx == 0.0 {
                ties_x += 1;
            } else if dy == 0.0 {
                ties_y += 1;
            } else if dx * dy > 0.0 {
                concordant += 1;
            } else {
                discordant += 1;
            }
        }
    }
    let n0 = (n * (n - 1) / 2) as i64;
    let denom = (((n0 - ties_x) as f64) * ((n0 - ties_y) as f64)).sqrt();
    if denom == 0.0 {
        None
    } else {
        Some((concordant - discordant) as f64 / denom)
    }
}

pub fn correlations(xs: &[f64], ys: &[f64]) -> Result<Correlations, MetricsError> {
    if xs.len() != ys.len() {
        return Err(MetricsError::LengthMismatch {
            xs: xs.len(),
            ys: ys.len(),
        });
    }
    if xs.len() < 3 {
        return Err(MetricsError::TooFewPoints(xs.len()));
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    Ok(Correlations {
        pearson: pearson(xs, ys),
        spearman: pearson(&rx, &ry),
        kendall_tau: kendall_tau_b(xs, ys),
    })
}

// ── Latency/quality curves ───────────────────────────────────────────

/// One evaluated sentence under some policy: the read sequence, the source
/// length it ran against, and the emitted hypothesis.
#[derive(Debug, Clone)]
pub struct SentenceOutcome {
    pub g: Vec<u32>,
    pub m: usize,
    pub hyp: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct CurvePoint {
    pub param: f64,
    pub al: f64,
    pub bleu: f64,
    /// Absent when the corpus carries no gold alignments.
    pub sa: Option<f64>,
    pub n_sent: usize,
}

/// Gold alignments index *reference* positions; hypotheses may be shorter or
/// longer. SA per sentence is computed over the first min(|g|, |a|) positions.
fn sentence_sa(a: &[Option<u32>], g: &[u32]) -> Option<f64> {
    let l = a.len().min(g.len());
    if l == 0 {
        return None;
    }
    Some(satisfied_alignments(&a[..l], &g[..l]))
}

/// Assemble one curve point per policy run and sort by AL (ties by param).
/// Corpus AL/SA are unweighted means over sentences; BLEU is corpus-level.
pub fn build_curve(
    runs: &[(f64, Vec<SentenceOutcome>)],
    refs: &[Vec<u32>],
    aligns: Option<&[Vec<Option<u32>>]>,
) -> Result<Vec<CurvePoint>, MetricsError> {
    let mut points = Vec::with_capacity(runs.len());
    for (param, traces) in runs {
        if traces.len() != refs.len() {
            return Err(MetricsError::TraceCountMismatch {
                param: *param,
                got: traces.len(),
                want: refs.len(),
            });
        }
        let al = traces
            .iter()
            .map(|t| average_lagging(&t.g, t.m))
            .sum::<f64>()
            / traces.len() as f64;
        let hyps: Vec<Vec<u32>> = traces.iter().map(|t| t.hyp.clone()).collect();
        let bleu = corpus_bleu(&hyps, refs);
        let sa = aligns.map(|aligns| {
            let mut acc = 0.0;
            let mut cnt = 0usize;
            for (t, a) in traces.iter().zip(aligns) {
                if let Some(s) = sentence_sa(a, &t.g) {
                    acc += s;
                    cnt += 1;
                }
            }
            if cnt == 0 {
                f64::NAN
            } else {
                acc / cnt as f64
            }
        });
        points.push(CurvePoint {
            param: *param,
            al,
            bleu,
            sa,
            n_sent: traces.len(),
        });
    }
    points.sort_by(|a, b| a.al.total_cmp(&b.al).then(a.param.total_cmp(&b.param)));
    Ok(points)
}

/// CSV with the fixed header; floats at 4 decimals, SA blank when absent.
pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut out = String::from("param,AL,BLEU,SA,n_sent\n");
    for p in points {
        let sa = match p.sa {
            Some(s) => format!("{:.4}", s),
            None => String::new(),
        };
        out.push_str(&format!(
            "{:.4},{:.4},{:.4},{},{}\n",
            p.param, p.al, p.bleu, sa, p.n_sent
        ));
    }
    out
}
