//! Streaming decoding sessions: the confidence-threshold policy, the wait-k
//! schedule, forced terminal writes, and full decision-trace recording.
//!
//! A session walks states (i, j): i is the next target position, j the number
//! of source tokens read so far (starting at 1). At each state the decoder is
//! re-run on y_{<i} against the current source prefix — exactly the
//! distribution p(y_i | x_{≤j}, y_{<i}) the prefix-sampling objective trains —
//! and the policy picks READ or WRITE. Once j = M every decision is a forced
//! WRITE.

use crate::data::EOS;
use crate::model::{
    bind_params, cross_mask_from_reads, EncoderMode, Forward, Parameters, TapeBinding,
};
use crate::tensor::{Tape, TensorId};
use serde::{Deserialize, Serialize};
use std::io;
use std::io::Write;

// ── Policies ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Policy {
    Confidence { gamma: f64 },
    Waitk { k: u32 },
}

impl Policy {
    /// Parse `conf:<gamma>` or `waitk:<k>`.
    pub fn parse(s: &str) -> Result<Self, String> {
        if let Some(g) = s.strip_prefix("conf:") {
            let gamma: f64 = g.parse().map_err(|_| format!("bad gamma in `{s}`"))?;
            if !(0.0 < gamma && gamma < 1.0) {
                return Err(format!("gamma {gamma} outside (0,1)"));
            }
            Ok(Policy::Confidence { gamma })
        } else if let Some(k) = s.strip_prefix("waitk:") {
            let k: u32 = k.parse().map_err(|_| format!("bad k in `{s}`"))?;
            if k == 0 {
                return Err("wait-k needs k >= 1".into());
            }
            Ok(Policy::Waitk { k })
        } else {
            Err(format!("unknown policy `{s}` (expected conf:<gamma> | waitk:<k>)"))
        }
    }

    pub fn label(&self) -> String {
        match self {
            Policy::Confidence { gamma } => format!("conf:{gamma}"),
            Policy::Waitk { k } => format!("waitk:{k}"),
        }
    }

    /// The swept parameter as a number (γ or k) for latency–quality curves.
    pub fn param(&self) -> f64 {
        match self {
            Policy::Confidence { gamma } => *gamma,
            Policy::Waitk { k } => *k as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Read,
    Write,
}

/// The threshold rule: WRITE iff c ≥ γ (boundary writes).
pub fn decide(c: f64, gamma: f64) -> Decision {
    if c >= gamma {
        Decision::Write
    } else {
        Decision::Read
    }
}

// ── Session traces ───────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionTrace {
    pub source: Vec<u32>,
    /// Emitted tokens, ending in EOS unless `truncated`.
    pub hypothesis: Vec<u32>,
    /// Source tokens read when each output token was emitted.
    pub g: Vec<u32>,
    /// One character per decision, e.g. "RRWRW"; forced writes included.
    pub decisions: String,
    /// Confidence at each WRITE, in emission order.
    pub confidences: Vec<f64>,
    pub truncated: bool,
}

impl SessionTrace {
    /// Replay the decision string and confirm it reproduces (hypothesis, g);
    /// checks monotonicity and the read budget on the way.
    pub fn validate(&self) -> Result<(), String> {
        let m = self.source.len() as u32;
        let mut j = 1u32;
        let mut write_idx = 0usize;
        let mut reads = 0u32;
        for d in self.decisions.chars() {
            match d {
                'R' => {
                    j += 1;
                    reads += 1;
                    if j > m {
                        return Err(format!("read past source end (j={j}, M={m})"));
                    }
                }
                'W' => {
                    if write_idx >= self.g.len() {
                        return Err("more writes than g entries".into());
                    }
                    if self.g[write_idx] != j {
                        return Err(format!(
                            "write {} recorded g={} but replay has j={j}",
                            write_idx + 1,
                            self.g[write_idx]
                        ));
                    }
                    write_idx += 1;
                }
                other => return Err(format!("unknown decision `{other}`")),
            }
        }
        if write_idx != self.g.len() || self.g.len() != self.hypothesis.len() {
            return Err("write count does not match outputs".into());
        }
        if self.confidences.len() != self.hypothesis.len() {
            return Err("one confidence per write expected".into());
        }
        if reads >= m {
            return Err("read count must stay below source length".into());
        }
        if self.g.windows(2).any(|w| w[0] > w[1]) {
            return Err("g must be non-decreasing".into());
        }
        if self.g.iter().any(|&gi| gi > m || gi == 0) {
            return Err("g out of range".into());
        }
        if !self.truncated && self.hypothesis.last() != Some(&EOS) {
            return Err("untruncated trace must end in EOS".into());
        }
        Ok(())
    }
}

// ── Running sessions ─────────────────────────────────────────────────

/// Hard cap on emitted tokens so an untrained model still terminates.
pub fn max_target_len(m: usize) -> usize {
    2 * m + 10
}

struct SessionState<'a, 'b> {
    fwd: Forward<'b, f32>,
    src: &'a [u32],
    uni: bool,
    /// Full causal encode (unidirectional): rows 1..j are bit-identical to
    /// encoding the j-prefix, so one pass serves every prefix via cross masks.
    enc_full: Option<TensorId>,
    /// Memoized encode of the current prefix (bidirectional).
    enc_prefix: Option<(u32, TensorId)>,
}

impl<'a, 'b> SessionState<'a, 'b> {
    /// Distribution row and confidence for state (i, j), i = |emitted| + 1.
    fn eval_state(&mut self, emitted: &[u32], j: u32) -> (Vec<f32>, f64) {
        let mut tgt_in = Vec::with_capacity(emitted.len() + 1);
        tgt_in.push(crate::data::BOS);
        tgt_in.extend_from_slice(emitted);
        let i = tgt_in.len();

        let hid = if self.uni {
            let enc = match self.enc_full {
                Some(id) => id,
                None => {
                    let id = self.fwd.encode(self.src);
                    self.enc_full = Some(id);
                    id
                }
            };
            let mask = cross_mask_from_reads(&vec![j; i], self.src.len());
            self.fwd.decode(enc, &tgt_in, Some(&mask))
        } else {
            let enc = match self.enc_prefix {
                Some((pj, id)) if pj == j => id,
                _ => {
                    let id = self.fwd.encode(&self.src[..j as usize]);
                    self.enc_prefix = Some((j, id));
                    id
                }
            };
            self.fwd.decode(enc, &tgt_in, None)
        };
        let dist = self.fwd.dists(hid);
        let conf = self.fwd.confidence(hid);
        let v = self.fwd.tape.shape(dist)[1];
        let row = self.fwd.tape.value(dist)[(i - 1) * v..i * v].to_vec();
        let c = self.fwd.tape.value(conf)[i - 1] as f64;
        (row, c)
    }
}

fn argmax(row: &[f32]) -> u32 {
    let mut best = 0usize;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best as u32
}

/// Run one streaming session to EOS or the length cap.
pub fn run_session(params: &Parameters<f32>, policy: &Policy, src: &[u32]) -> SessionTrace {
    assert!(!src.is_empty(), "run_session: empty source");
    assert!(
        src.iter().all(|&t| (t as usize) < params.cfg.src_vocab),
        "run_session: source token outside model vocabulary"
    );
    let m = src.len();
    let cap = max_target_len(m);
    let mut tape: Tape<f32> = Tape::new();
    let bind: TapeBinding = bind_params(&mut tape, params, false);
    let mut state = SessionState {
        fwd: Forward::eval(&mut tape, params, &bind),
        src,
        uni: matches!(params.cfg.encoder_mode, EncoderMode::Unidirectional),
        enc_full: None,
        enc_prefix: None,
    };

    let mut hypothesis: Vec<u32> = Vec::new();
    let mut g: Vec<u32> = Vec::new();
    let mut decisions = String::new();
    let mut confidences: Vec<f64> = Vec::new();
    let mut j = 1u32;
    let mut truncated = false;

    loop {
        if hypothesis.last() == Some(&EOS) {
            break;
        }
        if hypothesis.len() >= cap {
            truncated = true;
            break;
        }
        let (row, c) = state.eval_state(&hypothesis, j);
        let i = hypothesis.len() as u32 + 1;
        let exhausted = j as usize == m;
        let wants_write = match policy {
            Policy::Waitk { k } => j >= (k + i - 1).min(m as u32),
            Policy::Confidence { gamma } => decide(c, *gamma) == Decision::Write,
        };
        if wants_write || exhausted {
            hypothesis.push(argmax(&row));
            g.push(j);
            decisions.push('W');
            confidences.push(c);
        } else {
            j += 1;
            decisions.push('R');
        }
    }

    let trace = SessionTrace {
        source: src.to_vec(),
        hypothesis,
        g,
        decisions,
        confidences,
        truncated,
    };
    debug_assert_eq!(trace.validate(), Ok(()));
    trace
}

/// Full-context greedy translation (read everything, then write).
pub fn translate_full(params: &Parameters<f32>, src: &[u32]) -> Vec<u32> {
    let t = run_session(params, &Policy::Waitk { k: src.len() as u32 }, src);
    t.hypothesis
}

/// One pass per grid point over the whole source list; deterministic.
pub fn sweep(
    params: &Parameters<f32>,
    grid: &[Policy],
    sources: &[Vec<u32>],
) -> Vec<(Policy, Vec<SessionTrace>)> {
    assert!(!grid.is_empty(), "sweep: empty policy grid");
    grid.iter()
        .map(|p| {
            let traces = sources.iter().map(|s| run_session(params, p, s)).collect();
            (*p, traces)
        })
        .collect()
}

/// Line-delimited JSON, one trace per line.
pub fn dump_traces(w: &mut dyn Write, traces: &[SessionTrace]) -> io::Result<()> {
    for t in traces {
        serde_json::to_writer(&mut *w, t).map_err(io::Error::other)?;
        writeln!(w)?;
    }
    Ok(())
}

pub fn load_traces(text: &str) -> Result<Vec<SessionTrace>, String> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| format!("trace line {}: {e}", i + 1))
        })
        .collect()
}
