//! Synthetic bounded-reorder translation task, parallel-corpus ingestion,
//! vocabularies, and token-budget batching.
//!
//! The synthetic task: sample content tokens, partition them into consecutive
//! blocks of width ≤ w, reverse each block, and map tokens through a fixed
//! bijective lexicon. A reserved separator token is appended to the source
//! after every block, so the reordering is a learnable function of the source
//! string alone, and the gold alignment of every target token is known
//! exactly. Alignments use full source-string coordinates (separators count —
//! they are real tokens the policy must read).

use crate::metrics;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;
/// Source-side block separator (synthetic task only).
pub const SEP: u32 = 4;
pub const SRC_CONTENT_BASE: u32 = 5;
pub const TGT_CONTENT_BASE: u32 = 4;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line counts differ: {src} source vs {tgt} target{}", align.map(|a| format!(" vs {a} alignment")).unwrap_or_default())]
    LineCountMismatch {
        src: usize,
        tgt: usize,
        align: Option<usize>,
    },
    #[error("line {line}: empty {side} sentence")]
    EmptySentence { line: usize, side: &'static str },
    #[error("alignment line {line}: malformed pair `{token}`")]
    MalformedAlignment { line: usize, token: String },
    #[error("alignment line {line}: pair `{token}` out of range for {m} source / {n} target tokens")]
    AlignmentOutOfRange {
        line: usize,
        token: String,
        m: usize,
        n: usize,
    },
    #[error("vocab {path}: duplicate token `{token}` at line {line}")]
    DuplicateVocabToken {
        path: PathBuf,
        token: String,
        line: usize,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IngestError + '_ {
    move |source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    }
}

// ── Vocabulary ───────────────────────────────────────────────────────

/// Token table; line number = id in the on-disk format. Ids 0..=3 are
/// PAD/UNK/BOS/EOS on both sides.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    map: HashMap<String, u32>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let map = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab { tokens, map }
    }

    fn reserved(extra_sep: bool) -> Vec<String> {
        let mut t = vec![
            "<pad>".to_string(),
            "<unk>".to_string(),
            "<bos>".to_string(),
            "<eos>".to_string(),
        ];
        if extra_sep {
            t.push("<sep>".to_string());
        }
        t
    }

    pub fn synthetic_source(v: usize) -> Self {
        let mut t = Self::reserved(true);
        t.extend((0..v).map(|i| format!("s{i}")));
        Self::from_tokens(t)
    }

    pub fn synthetic_target(v: usize) -> Self {
        let mut t = Self::reserved(false);
        t.extend((0..v).map(|i| format!("t{i}")));
        Self::from_tokens(t)
    }

    /// Reserved tokens plus corpus tokens in order of first appearance.
    pub fn build(lines: &[Vec<String>]) -> Self {
        let mut t = Self::reserved(false);
        let mut seen: HashMap<&str, ()> = HashMap::new();
        for l in lines {
            for tok in l {
                if !seen.contains_key(tok.as_str()) && !t.iter().any(|x| x == tok) {
                    seen.insert(tok, ());
                    t.push(tok.clone());
                }
            }
        }
        Self::from_tokens(t)
    }

    pub fn id(&self, tok: &str) -> u32 {
        self.map.get(tok).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<(), IngestError> {
        let mut s = String::new();
        for t in &self.tokens {
            let _ = writeln!(s, "{t}");
        }
        std::fs::write(path, s).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, IngestError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_text(&text, path)
    }

    /// Parse vocabulary text (one token per line, id = line index).
    /// `origin` only labels errors.
    pub fn from_text(text: &str, origin: &Path) -> Result<Self, IngestError> {
        let mut tokens = Vec::new();
        let mut map = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let tok = line.trim().to_string();
            if map.insert(tok.clone(), i as u32).is_some() {
                return Err(IngestError::DuplicateVocabToken {
                    path: origin.to_path_buf(),
                    token: tok,
                    line: i + 1,
                });
            }
            tokens.push(tok);
        }
        Ok(Vocab { tokens, map })
    }
}

// ── Corpus ───────────────────────────────────────────────────────────

/// One sentence pair. `align`, when present, has one entry per target token
/// (including EOS): the 1-based source position it is aligned to, or `None`
/// for an unaligned token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParallelExample {
    pub src: Vec<u32>,
    pub tgt: Vec<u32>,
    pub align: Option<Vec<Option<u32>>>,
}

impl ParallelExample {
    pub fn m(&self) -> usize {
        self.src.len()
    }

    pub fn n(&self) -> usize {
        self.tgt.len()
    }

    fn check(&self) {
        assert!(self.m() >= 1, "example: empty source");
        assert!(self.n() >= 2, "example: target needs content + EOS");
        assert_eq!(*self.tgt.last().unwrap(), EOS, "example: target must end in EOS");
        if let Some(a) = &self.align {
            assert_eq!(a.len(), self.n(), "example: alignment length != N");
            for ai in a.iter().flatten() {
                assert!(
                    (1..=self.m() as u32).contains(ai),
                    "example: alignment {ai} out of [1, {}]",
                    self.m()
                );
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub examples: Vec<ParallelExample>,
    pub src_vocab: Vocab,
    pub tgt_vocab: Vocab,
}

// ── Synthetic generation ─────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct SynthConfig {
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub max_block: usize,
    pub count: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            vocab_size: 50,
            min_len: 6,
            max_len: 12,
            max_block: 3,
            count: 1000,
            seed: 0,
        }
    }
}

impl SynthConfig {
    fn check(&self) {
        assert!(self.min_len >= 1, "synth: min_len >= 1");
        assert!(self.max_len >= self.min_len, "synth: max_len >= min_len");
        assert!(
            self.vocab_size >= self.max_block && self.max_block >= 1,
            "synth: need V >= w >= 1"
        );
    }
}

/// Block structure of one sentence: content lengths of consecutive blocks.
fn sample_blocks(rng: &mut ChaCha8Rng, l: usize, w: usize) -> Vec<usize> {
    let mut sizes = Vec::new();
    let mut left = l;
    while left > 0 {
        let s = rng.gen_range(1..=w).min(left);
        sizes.push(s);
        left -= s;
    }
    sizes
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Corpus {
    cfg.check();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut examples = Vec::with_capacity(cfg.count);
    for _ in 0..cfg.count {
        let l = rng.gen_range(cfg.min_len..=cfg.max_len);
        let content: Vec<u32> = (0..l).map(|_| rng.gen_range(0..cfg.vocab_size as u32)).collect();
        let blocks = sample_blocks(&mut rng, l, cfg.max_block);

        let m = l + blocks.len();
        let mut src = Vec::with_capacity(m);
        let mut tgt = Vec::with_capacity(l + 1);
        let mut align = Vec::with_capacity(l + 1);
        let mut lo = 0usize; // 0-based start of the current block in content coords
        for (b, &size) in blocks.iter().enumerate() {
            for &c in &content[lo..lo + size] {
                src.push(SRC_CONTENT_BASE + c);
            }
            src.push(SEP);
            // Reversed block; content position p (1-based) sits at full
            // source position p + b (b separators precede it).
            for p in (lo + 1..=lo + size).rev() {
                tgt.push(TGT_CONTENT_BASE + content[p - 1]);
                align.push(Some((p + b) as u32));
            }
            lo += size;
        }
        tgt.push(EOS);
        align.push(Some(m as u32));
        let ex = ParallelExample {
            src,
            tgt,
            align: Some(align),
        };
        ex.check();
        examples.push(ex);
    }
    Corpus {
        examples,
        src_vocab: Vocab::synthetic_source(cfg.vocab_size),
        tgt_vocab: Vocab::synthetic_target(cfg.vocab_size),
    }
}

/// Lowest-latency read sequence that still satisfies every gold alignment:
/// g*_i = max(a_1..a_i). Defined only for fully aligned examples.
pub fn oracle_path(ex: &ParallelExample) -> Option<Vec<u32>> {
    let a = ex.align.as_ref()?;
    let mut g = Vec::with_capacity(a.len());
    let mut run_max = 0u32;
    for ai in a {
        run_max = run_max.max((*ai)?);
        g.push(run_max);
    }
    Some(g)
}

/// Corpus-level latency of the oracle policy, paired with the exact-translation
/// quality ceiling. Used as the frontier reference point in reports.
pub fn oracle_frontier(corpus: &Corpus) -> Option<(f64, f64)> {
    let mut acc = 0.0;
    let mut cnt = 0usize;
    for ex in &corpus.examples {
        let g = oracle_path(ex)?;
        acc += metrics::average_lagging(&g, ex.m());
        cnt += 1;
    }
    if cnt == 0 {
        None
    } else {
        Some((acc / cnt as f64, 100.0))
    }
}

// ── Plain-text persistence ───────────────────────────────────────────

pub const SRC_FILE: &str = "src.txt";
pub const TGT_FILE: &str = "tgt.txt";
pub const ALIGN_FILE: &str = "align.txt";
pub const SRC_VOCAB_FILE: &str = "src.vocab";
pub const TGT_VOCAB_FILE: &str = "tgt.vocab";

/// Write src/tgt/align plus both vocab files into `dir`. The target file
/// holds content tokens only (EOS is implicit); alignment lines are Pharaoh
/// pairs, 0-based, and omit the EOS entry.
pub fn save_parallel(corpus: &Corpus, dir: &Path) -> Result<(), IngestError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut src = String::new();
    let mut tgt = String::new();
    let mut align = String::new();
    for ex in &corpus.examples {
        let stoks: Vec<&str> = ex.src.iter().map(|&id| corpus.src_vocab.token(id)).collect();
        let _ = writeln!(src, "{}", stoks.join(" "));
        let ttoks: Vec<&str> = ex.tgt[..ex.n() - 1]
            .iter()
            .map(|&id| corpus.tgt_vocab.token(id))
            .collect();
        let _ = writeln!(tgt, "{}", ttoks.join(" "));
        match &ex.align {
            Some(a) => {
                let pairs: Vec<String> = a[..ex.n() - 1]
                    .iter()
                    .enumerate()
                    .filter_map(|(i, ai)| ai.map(|ai| format!("{}-{}", ai - 1, i)))
                    .collect();
                let _ = writeln!(align, "{}", pairs.join(" "));
            }
            None => {
                let _ = writeln!(align);
            }
        }
    }
    std::fs::write(dir.join(SRC_FILE), src).map_err(io_err(&dir.join(SRC_FILE)))?;
    std::fs::write(dir.join(TGT_FILE), tgt).map_err(io_err(&dir.join(TGT_FILE)))?;
    std::fs::write(dir.join(ALIGN_FILE), align).map_err(io_err(&dir.join(ALIGN_FILE)))?;
    corpus.src_vocab.save(&dir.join(SRC_VOCAB_FILE))?;
    corpus.tgt_vocab.save(&dir.join(TGT_VOCAB_FILE))?;
    Ok(())
}

fn split_lines(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .map(|l| l.split_whitespace().map(|t| t.to_string()).collect())
        .collect()
}

/// Parse one Pharaoh line into per-target alignments. Multi-aligned targets
/// resolve to the maximum aligned source position (a token counts as
/// satisfied only once all its sources are read).
fn parse_pharaoh(
    line_no: usize,
    toks: &[String],
    m: usize,
    n_content: usize,
) -> Result<Vec<Option<u32>>, IngestError> {
    let mut a = vec![None; n_content];
    for tok in toks {
        let (s, t) = tok.split_once('-').ok_or_else(|| IngestError::MalformedAlignment {
            line: line_no,
            token: tok.clone(),
        })?;
        let parse = |x: &str| {
            x.parse::<usize>().map_err(|_| IngestError::MalformedAlignment {
                line: line_no,
                token: tok.clone(),
            })
        };
        let (si, ti) = (parse(s)?, parse(t)?);
        if si >= m || ti >= n_content {
            return Err(IngestError::AlignmentOutOfRange {
                line: line_no,
                token: tok.clone(),
                m,
                n: n_content,
            });
        }
        let v = (si + 1) as u32;
        a[ti] = Some(a[ti].map_or(v, |prev: u32| prev.max(v)));
    }
    Ok(a)
}

/// Load a parallel corpus. With `vocabs` given they are applied (OOV → UNK);
/// otherwise vocabularies are built from the files in first-appearance order.
pub fn load_parallel(
    src_path: &Path,
    tgt_path: &Path,
    align_path: Option<&Path>,
    vocabs: Option<(Vocab, Vocab)>,
) -> Result<Corpus, IngestError> {
    let read = |p: &Path| std::fs::read_to_string(p).map_err(io_err(p));
    let src = read(src_path)?;
    let tgt = read(tgt_path)?;
    let align = match align_path {
        Some(p) => Some(read(p)?),
        None => None,
    };
    load_parallel_texts(&src, &tgt, align.as_deref(), vocabs)
}

/// Text-level loader behind [`load_parallel`]: whitespace tokenization, one
/// sentence per line, optional Pharaoh alignment text.
pub fn load_parallel_texts(
    src_text: &str,
    tgt_text: &str,
    align_text: Option<&str>,
    vocabs: Option<(Vocab, Vocab)>,
) -> Result<Corpus, IngestError> {
    let src_lines = split_lines(src_text);
    let tgt_lines = split_lines(tgt_text);
    let align_lines = align_text.map(split_lines);
    if src_lines.len() != tgt_lines.len()
        || align_lines.as_ref().is_some_and(|a| a.len() != src_lines.len())
    {
        return Err(IngestError::LineCountMismatch {
            src: src_lines.len(),
            tgt: tgt_lines.len(),
            align: align_lines.as_ref().map(|a| a.len()),
        });
    }
    let (src_vocab, tgt_vocab) = match vocabs {
        Some(v) => v,
        None => (Vocab::build(&src_lines), Vocab::build(&tgt_lines)),
    };
    let mut examples = Vec::with_capacity(src_lines.len());
    for i in 0..src_lines.len() {
        let line_no = i + 1;
        if src_lines[i].is_empty() {
            return Err(IngestError::EmptySentence {
                line: line_no,
                side: "source",
            });
        }
        if tgt_lines[i].is_empty() {
            return Err(IngestError::EmptySentence {
                line: line_no,
                side: "target",
            });
        }
        let src: Vec<u32> = src_lines[i].iter().map(|t| src_vocab.id(t)).collect();
        let mut tgt: Vec<u32> = tgt_lines[i].iter().map(|t| tgt_vocab.id(t)).collect();
        let n_content = tgt.len();
        tgt.push(EOS);
        let align = match &align_lines {
            None => None,
            Some(lines) => {
                if lines[i].is_empty() {
                    None
                } else {
                    let mut a = parse_pharaoh(line_no, &lines[i], src.len(), n_content)?;
                    // Ending the sentence requires the whole source.
                    a.push(Some(src.len() as u32));
                    Some(a)
                }
            }
        };
        let ex = ParallelExample { src, tgt, align };
        ex.check();
        examples.push(ex);
    }
    Ok(Corpus {
        examples,
        src_vocab,
        tgt_vocab,
    })
}

// ── Batching ─────────────────────────────────────────────────────────

/// Padded batch. Row r corresponds to `corpus.examples[idx[r]]`; masks are
/// true on real tokens. Target rows include EOS.
#[derive(Debug, Clone)]
pub struct Batch {
    pub idx: Vec<usize>,
    pub src: Vec<Vec<u32>>,
    pub tgt: Vec<Vec<u32>>,
    pub src_mask: Vec<Vec<bool>>,
    pub tgt_mask: Vec<Vec<bool>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.idx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.idx.is_empty()
    }

    /// Padded token count (both sides) — the quantity the budget caps.
    pub fn padded_tokens(&self) -> usize {
        self.len() * (self.src[0].len() + self.tgt[0].len())
    }
}

/// Length-bucketed, seed-shuffled batches under a padded-token budget.
/// Sentences that do not fit in `max_positions` are dropped; the second
/// return value counts them.
pub fn make_batches(
    corpus: &Corpus,
    max_tokens: usize,
    max_positions: usize,
    seed: u64,
) -> (Vec<Batch>, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep: Vec<usize> = Vec::with_capacity(corpus.examples.len());
    let mut skipped = 0usize;
    for (i, ex) in corpus.examples.iter().enumerate() {
        if ex.m() > max_positions || ex.n() > max_positions {
            skipped += 1;
        } else {
            assert!(
                ex.m() + ex.n() <= max_tokens,
                "make_batches: sentence {} needs {} tokens, budget is {}",
                i,
                ex.m() + ex.n(),
                max_tokens
            );
            keep.push(i);
        }
    }
    // Shuffle first so equal-length ties get a per-seed order, then bucket.
    keep.shuffle(&mut rng);
    keep.sort_by_key(|&i| (corpus.examples[i].m(), corpus.examples[i].n()));

    let mut batches = Vec::new();
    let mut cur: Vec<usize> = Vec::new();
    let (mut ms, mut mt) = (0usize, 0usize);
    for &i in &keep {
        let ex = &corpus.examples[i];
        let nms = ms.max(ex.m());
        let nmt = mt.max(ex.n());
        if !cur.is_empty() && (cur.len() + 1) * (nms + nmt) > max_tokens {
            batches.push(materialize(corpus, &cur, ms, mt));
            cur.clear();
            ms = 0;
            mt = 0;
        }
        ms = ms.max(ex.m());
        mt = mt.max(ex.n());
        cur.push(i);
    }
    if !cur.is_empty() {
        batches.push(materialize(corpus, &cur, ms, mt));
    }
    batches.shuffle(&mut rng);
    (batches, skipped)
}

fn materialize(corpus: &Corpus, idx: &[usize], ms: usize, mt: usize) -> Batch {
    let mut b = Batch {
        idx: idx.to_vec(),
        src: Vec::with_capacity(idx.len()),
        tgt: Vec::with_capacity(idx.len()),
        src_mask: Vec::with_capacity(idx.len()),
        tgt_mask: Vec::with_capacity(idx.len()),
    };
    for &i in idx {
        let ex = &corpus.examples[i];
        let mut s = ex.src.clone();
        s.resize(ms, PAD);
        let mut t = ex.tgt.clone();
        t.resize(mt, PAD);
        let mut sm = vec![true; ex.m()];
        sm.resize(ms, false);
        let mut tm = vec![true; ex.n()];
        tm.resize(mt, false);
        b.src.push(s);
        b.tgt.push(t);
        b.src_mask.push(sm);
        b.tgt_mask.push(tm);
    }
    b
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            vocab_size: 20,
            min_len: 4,
            max_len: 8,
            max_block: 3,
            count: 50,
            seed: 11,
        }
    }

    /// Recompute the alignment from the emitted source string alone: split at
    /// separators, reverse each block, read off full-string positions.
    fn brute_force_alignment(src: &[u32]) -> Vec<u32> {
        let mut a = Vec::new();
        let mut block: Vec<u32> = Vec::new();
        for (pos, &tok) in src.iter().enumerate() {
            if tok == SEP {
                a.extend(block.drain(..).rev());
            } else {
                block.push(pos as u32 + 1);
            }
        }
        assert!(block.is_empty(), "source must end with a separator");
        a.push(src.len() as u32); // EOS
        a
    }

    #[test]
    fn width_one_blocks_are_identity_with_separator_offsets() {
        let cfg = SynthConfig {
            max_block: 1,
            ..small_cfg()
        };
        let corpus = generate_synthetic(&cfg);
        for ex in &corpus.examples {
            let a = ex.align.as_ref().unwrap();
            // Content token i sits at full position 2i−1 (a separator after
            // every single-token block); the target order is the identity.
            for (i, ai) in a[..a.len() - 1].iter().enumerate() {
                assert_eq!(ai.unwrap() as usize, 2 * (i + 1) - 1);
            }
            // Identity on content: lexicon image in original order.
            let content: Vec<u32> = ex
                .src
                .iter()
                .filter(|&&t| t != SEP)
                .map(|&t| t - SRC_CONTENT_BASE)
                .collect();
            let tgt_content: Vec<u32> = ex.tgt[..ex.n() - 1]
                .iter()
                .map(|&t| t - TGT_CONTENT_BASE)
                .collect();
            assert_eq!(content, tgt_content);
        }
    }

    #[test]
    fn block_reversal_hand_example() {
        // Force a single block of width 3 by generating until one appears.
        let corpus = generate_synthetic(&SynthConfig {
            min_len: 3,
            max_len: 3,
            max_block: 3,
            count: 200,
            ..small_cfg()
        });
        let ex = corpus
            .examples
            .iter()
            .find(|e| e.m() == 4) // 3 content + 1 separator = one block
            .expect("some example starts with a width-3 block");
        let a: Vec<u32> = ex.align.as_ref().unwrap()[..3]
            .iter()
            .map(|x| x.unwrap())
            .collect();
        assert_eq!(a, vec![3, 2, 1]);
        assert_eq!(ex.tgt[0], ex.src[2] - SRC_CONTENT_BASE + TGT_CONTENT_BASE);
        assert_eq!(ex.tgt[2], ex.src[0] - SRC_CONTENT_BASE + TGT_CONTENT_BASE);
    }

    #[test]
    fn alignment_matches_brute_force_recomputation() {
        let corpus = generate_synthetic(&small_cfg());
        for ex in &corpus.examples {
            let want = brute_force_alignment(&ex.src);
            let got: Vec<u32> = ex
                .align
                .as_ref()
                .unwrap()
                .iter()
                .map(|x| x.unwrap())
                .collect();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn lexicon_round_trip_reproduces_source() {
        let corpus = generate_synthetic(&small_cfg());
        for ex in &corpus.examples {
            let a = ex.align.as_ref().unwrap();
            let mut rebuilt = vec![0u32; ex.m()];
            let mut seen = vec![false; ex.m()];
            for (i, &tok) in ex.tgt[..ex.n() - 1].iter().enumerate() {
                let pos = a[i].unwrap() as usize - 1;
                rebuilt[pos] = tok - TGT_CONTENT_BASE + SRC_CONTENT_BASE;
                seen[pos] = true;
            }
            for (pos, &tok) in ex.src.iter().enumerate() {
                if tok == SEP {
                    assert!(!seen[pos]);
                } else {
                    assert!(seen[pos]);
                    assert_eq!(rebuilt[pos], tok);
                }
            }
        }
    }

    #[test]
    fn generation_deterministic() {
        let c1 = generate_synthetic(&small_cfg());
        let c2 = generate_synthetic(&small_cfg());
        assert_eq!(c1.examples, c2.examples);
        let c3 = generate_synthetic(&SynthConfig {
            seed: 12,
            ..small_cfg()
        });
        assert_ne!(c1.examples, c3.examples);
    }

    #[test]
    fn oracle_path_is_minimal_among_satisfying_paths() {
        let corpus = generate_synthetic(&SynthConfig {
            min_len: 4,
            max_len: 5,
            count: 12,
            ..small_cfg()
        });
        for ex in &corpus.examples {
            let g = oracle_path(ex).unwrap();
            let a: Vec<Option<u32>> = ex.align.clone().unwrap();
            assert_eq!(metrics::satisfied_alignments(&a, &g), 1.0);
            if ex.m() + ex.n() <= 22 {
                let lat = crate::verify::enumerate_paths(ex.m(), ex.n()).unwrap();
                let a0: Vec<usize> = a.iter().map(|x| x.unwrap() as usize).collect();
                let (_, best_al) = lat.min_al_sa1(&a0).unwrap();
                let got = metrics::average_lagging(&g, ex.m());
                assert!(
                    (got - best_al).abs() < 1e-9,
                    "oracle path AL {got} vs exhaustive best {best_al}"
                );
            }
        }
    }

    #[test]
    fn oracle_frontier_beats_read_everything() {
        let corpus = generate_synthetic(&small_cfg());
        let (al, bleu) = oracle_frontier(&corpus).unwrap();
        assert_eq!(bleu, 100.0);
        let mean_m: f64 = corpus.examples.iter().map(|e| e.m() as f64).sum::<f64>()
            / corpus.examples.len() as f64;
        assert!(al < mean_m, "frontier AL {al} should beat read-everything {mean_m}");
    }

    #[test]
    fn save_load_round_trip_token_ids() {
        let dir = tempdir().unwrap();
        let corpus = generate_synthetic(&small_cfg());
        save_parallel(&corpus, dir.path()).unwrap();
        let sv = Vocab::load(&dir.path().join(SRC_VOCAB_FILE)).unwrap();
        let tv = Vocab::load(&dir.path().join(TGT_VOCAB_FILE)).unwrap();
        assert_eq!(sv, corpus.src_vocab);
        let loaded = load_parallel(
            &dir.path().join(SRC_FILE),
            &dir.path().join(TGT_FILE),
            Some(&dir.path().join(ALIGN_FILE)),
            Some((sv, tv)),
        )
        .unwrap();
        for (a, b) in corpus.examples.iter().zip(&loaded.examples) {
            assert_eq!(a.src, b.src);
            assert_eq!(a.tgt, b.tgt);
            assert_eq!(a.align, b.align);
        }
    }

    #[test]
    fn pharaoh_hand_example() {
        let dir = tempdir().unwrap();
        std::fs::write(dir.path().join("s"), "w1 w2\n").unwrap();
        std::fs::write(dir.path().join("t"), "v1 v2 v3\n").unwrap();
        std::fs::write(dir.path().join("a"), "0-0 1-2\n").unwrap();
        let c = load_parallel(
            &dir.path().join("s"),
            &dir.path().join("t"),
            Some(&dir.path().join("a")),
            None,
        )
        .unwrap();
        let a = c.examples[0].align.as_ref().unwrap();
        assert_eq!(a[0], Some(1));
        assert_eq!(a[1], None);
        assert_eq!(a[2], Some(2));
        assert_eq!(a[3], Some(2)); // EOS needs the whole source
    }

    #[test]
    fn pharaoh_multi_alignment_takes_max() {
        let dir = tempdir().unwrap();
        std::fs::write(dir.path().join("s"), "w1 w2 w3\n").unwrap();
        std::fs::write(dir.path().join("t"), "v1\n").unwrap();
        std::fs::write(dir.path().join("a"), "0-0 2-0 1-0\n").unwrap();
        let c = load_parallel(
            &dir.path().join("s"),
            &dir.path().join("t"),
            Some(&dir.path().join("a")),
            None,
        )
        .unwrap();
        assert_eq!(c.examples[0].align.as_ref().unwrap()[0], Some(3));
    }

    #[test]
    fn empty_alignment_line_means_no_alignment() {
        let dir = tempdir().unwrap();
        std::fs::write(dir.path().join("s"), "w1\nw2\n").unwrap();
        std::fs::write(dir.path().join("t"), "v1\nv2\n").unwrap();
        std::fs::write(dir.path().join("a"), "0-0\n\n").unwrap();
        let c = load_parallel(
            &dir.path().join("s"),
            &dir.path().join("t"),
            Some(&dir.path().join("a")),
            None,
        )
        .unwrap();
        assert!(c.examples[0].align.is_some());
        assert!(c.examples[1].align.is_none());
    }

    #[test]
    fn ingest_error_cases() {
        let dir = tempdir().unwrap();
        std::fs::write(dir.path().join("s"), "w1\nw2\n").unwrap();
        std::fs::write(dir.path().join("t"), "v1\n").unwrap();
        match load_parallel(&dir.path().join("s"), &dir.path().join("t"), None, None) {
            Err(IngestError::LineCountMismatch { src: 2, tgt: 1, .. }) => {}
            other => panic!("want line-count mismatch, got {other:?}"),
        }

        std::fs::write(dir.path().join("t"), "v1\nv2\n").unwrap();
        std::fs::write(dir.path().join("a"), "0-0\nbogus\n").unwrap();
        match load_parallel(
            &dir.path().join("s"),
            &dir.path().join("t"),
            Some(&dir.path().join("a")),
            None,
        ) {
            Err(IngestError::MalformedAlignment { line: 2, token }) => {
                assert_eq!(token, "bogus")
            }
            other => panic!("want malformed alignment, got {other:?}"),
        }

        std::fs::write(dir.path().join("a"), "0-0\n5-0\n").unwrap();
        match load_parallel(
            &dir.path().join("s"),
            &dir.path().join("t"),
            Some(&dir.path().join("a")),
            None,
        ) {
            Err(IngestError::AlignmentOutOfRange { line: 2, token, .. }) => {
                assert_eq!(token, "5-0")
            }
            other => panic!("want out-of-range alignment, got {other:?}"),
        }
    }

    #[test]
    fn oov_maps_to_unk() {
        let dir = tempdir().unwrap();
        std::fs::write(dir.path().join("s"), "s0 zzz\n").unwrap();
        std::fs::write(dir.path().join("t"), "t0\n").unwrap();
        let c = load_parallel(
            &dir.path().join("s"),
            &dir.path().join("t"),
            None,
            Some((Vocab::synthetic_source(5), Vocab::synthetic_target(5))),
        )
        .unwrap();
        assert_eq!(c.examples[0].src, vec![SRC_CONTENT_BASE, UNK]);
    }

    #[test]
    fn single_example_single_batch() {
        let corpus = generate_synthetic(&SynthConfig {
            count: 1,
            ..small_cfg()
        });
        let (batches, skipped) = make_batches(&corpus, 4096, 64, 0);
        assert_eq!(batches.len(), 1);
        assert_eq!(skipped, 0);
        assert_eq!(batches[0].len(), 1);
    }

    #[test]
    fn batches_respect_budget_and_cover_corpus() {
        let corpus = generate_synthetic(&small_cfg());
        let (batches, skipped) = make_batches(&corpus, 128, 64, 3);
        assert_eq!(skipped, 0);
        let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.idx.clone()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..corpus.examples.len()).collect::<Vec<_>>());
        for b in &batches {
            assert!(b.padded_tokens() <= 128, "batch uses {}", b.padded_tokens());
            let ms = b.src[0].len();
            for (row, mask) in b.src.iter().zip(&b.src_mask) {
                assert_eq!(row.len(), ms);
                for (t, &real) in row.iter().zip(mask) {
                    // Synthetic sources contain no PAD tokens, so the mask and
                    // the padding must coincide exactly.
                    assert_eq!(real, *t != PAD);
                }
            }
        }
    }

    #[test]
    fn batching_deterministic_and_seed_sensitive() {
        let corpus = generate_synthetic(&small_cfg());
        let (b1, _) = make_batches(&corpus, 256, 64, 5);
        let (b2, _) = make_batches(&corpus, 256, 64, 5);
        let ids = |bs: &[Batch]| bs.iter().map(|b| b.idx.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&b1), ids(&b2));
        let (b3, _) = make_batches(&corpus, 256, 64, 6);
        assert_ne!(ids(&b1), ids(&b3));
    }

    #[test]
    fn long_sentences_skipped_with_count() {
        let corpus = generate_synthetic(&small_cfg());
        // max_positions smaller than some source lengths.
        let (batches, skipped) = make_batches(&corpus, 4096, 9, 0);
        assert!(skipped > 0);
        let kept: usize = batches.iter().map(|b| b.len()).sum();
        assert_eq!(kept + skipped, corpus.examples.len());
    }
}
