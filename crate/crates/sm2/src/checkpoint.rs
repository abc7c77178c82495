//! Checkpoint persistence: a JSON manifest plus one raw little-endian f32
//! blob per parameter, bound together by a SHA-256 content digest.
//!
//! Directory layout:
//!
//! ```text
//! <ckpt>/manifest           architecture, provenance, blob table, digest
//! <ckpt>/blobs/<name>.f32   raw little-endian f32, row-major, registry order
//! <ckpt>/blobs/opt.<name>.{m,v}.f32   Adam moments (only when saved)
//! ```
//!
//! Saves are atomic: everything is written into a sibling temp directory and
//! renamed into place, so a crash mid-save never leaves a half-written
//! checkpoint at the target path. Loads are all-or-nothing: a missing blob,
//! size mismatch, digest mismatch, or unknown manifest field fails the whole
//! load. The one sanctioned relaxation is the confidence head: adapting a
//! checkpoint that never trained it (mode ≠ `sm2`) may re-initialize
//! `conf.*` to the fresh state (exact zeros ⇒ c ≡ 0.5), and the load report
//! says so.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::Vocab;
use crate::model::{param_specs, ModelConfig, ParamSpec, Parameters};
use crate::tensor::AdamState;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest";
pub const BLOBS_DIR: &str = "blobs";
/// Parameters with this name prefix form the confidence head.
const CONF_PREFIX: &str = "conf.";

// ── Errors ───────────────────────────────────────────────────────────

#[derive(Debug, Error)]
pub enum CkptError {
    #[error("checkpoint io `{path}`: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint manifest `{path}`: {msg}")]
    Manifest { path: PathBuf, msg: String },
    #[error("checkpoint format version {found} unsupported (this build reads version {FORMAT_VERSION})")]
    Version { found: u32 },
    #[error("checkpoint integrity: manifest digest {expected} but blobs hash to {actual}")]
    Integrity { expected: String, actual: String },
    #[error("checkpoint architecture mismatch ({total} difference(s), showing {}):\n{}", shown.len(), shown.join("\n"))]
    ShapeDiff { shown: Vec<String>, total: usize },
    #[error("checkpoint config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("checkpoint blob `{name}`: {msg}")]
    Blob { name: String, msg: String },
    #[error("checkpoint optimizer state: {0}")]
    Optimizer(String),
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CkptError + '_ {
    move |source| CkptError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// How many shape differences the error message spells out.
const SHOWN_DIFFS: usize = 5;

// ── Manifest ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerMeta {
    pub step: u64,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

/// Everything needed to rebuild the model besides the raw weights. Unknown
/// fields are rejected so a newer writer cannot silently lose information
/// through an older reader.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub config: ModelConfig,
    pub step: u64,
    /// Training mode string (`sm2`, `waitk:<k>`, `multipath_waitk`, `omt_only`).
    pub mode: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub src_vocab_sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tgt_vocab_sha256: Option<String>,
    /// Blob table in parameter-registry order; digest runs in this order.
    pub params: Vec<BlobEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerMeta>,
    /// SHA-256 over all blob bytes: every parameter blob in table order,
    /// then (if optimizer state is present) m and v per parameter.
    pub digest_sha256: String,
}

/// Provenance the caller supplies at save time.
#[derive(Debug, Clone, Default)]
pub struct SaveMeta {
    pub step: u64,
    pub mode: String,
    pub seed: u64,
    pub src_vocab_sha256: Option<String>,
    pub tgt_vocab_sha256: Option<String>,
}

/// Result of a successful load.
pub struct Loaded {
    pub params: Parameters<f32>,
    pub optimizer: Option<AdamState>,
    pub manifest: Manifest,
    /// True when the confidence head was re-initialized instead of read
    /// from the checkpoint (fine-tuning from a mode that never trained it).
    pub conf_head_reset: bool,
}

// ── Helpers ──────────────────────────────────────────────────────────

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// Stable digest of a vocabulary: token list, one per line.
pub fn vocab_sha256(v: &Vocab) -> String {
    let mut h = Sha256::new();
    for id in 0..v.len() {
        h.update(v.token(id as u32).as_bytes());
        h.update(b"\n");
    }
    hex(&h.finalize())
}

fn f32s_to_bytes(xs: &[f32]) -> Vec<u8> {
    let mut b = Vec::with_capacity(xs.len() * 4);
    for x in xs {
        b.extend_from_slice(&x.to_le_bytes());
    }
    b
}

fn bytes_to_f32s(b: &[u8]) -> Vec<f32> {
    b.chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

fn checked_numel(shape: &[usize]) -> Option<usize> {
    shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d))
}

fn blob_file(name: &str) -> String {
    format!("{name}.f32")
}

fn opt_blob_file(name: &str, which: char) -> String {
    format!("opt.{name}.{which}.f32")
}

// ── Manifest parsing and structural checks ───────────────────────────

/// Parse and sanity-check a manifest. Rejects unknown fields, unsupported
/// versions, invalid configs, duplicate or path-escaping blob names, and
/// shapes whose element count overflows.
pub fn parse_manifest(text: &str, origin: &Path) -> Result<Manifest, CkptError> {
    let man: Manifest = serde_json::from_str(text).map_err(|e| CkptError::Manifest {
        path: origin.to_path_buf(),
        msg: e.to_string(),
    })?;
    if man.format_version != FORMAT_VERSION {
        return Err(CkptError::Version {
            found: man.format_version,
        });
    }
    man.config.check().map_err(|msg| CkptError::Manifest {
        path: origin.to_path_buf(),
        msg,
    })?;
    let mut seen = BTreeSet::new();
    for entry in &man.params {
        // Blob names become file names inside blobs/; refuse separators and
        // parent references so a hostile manifest cannot read outside it.
        if entry.name.is_empty()
            || entry.name.contains('/')
            || entry.name.contains('\\')
            || entry.name.contains("..")
        {
            return Err(CkptError::Manifest {
                path: origin.to_path_buf(),
                msg: format!("unsafe blob name `{}`", entry.name),
            });
        }
        if !seen.insert(entry.name.as_str()) {
            return Err(CkptError::Manifest {
                path: origin.to_path_buf(),
                msg: format!("duplicate blob name `{}`", entry.name),
            });
        }
        match checked_numel(&entry.shape).and_then(|n| n.checked_mul(4)) {
            Some(_) => {}
            None => {
                return Err(CkptError::Manifest {
                    path: origin.to_path_buf(),
                    msg: format!("shape {:?} of `{}` overflows", entry.shape, entry.name),
                })
            }
        }
    }
    Ok(man)
}

/// Walk the expected registry against the declared blob table, which must
/// match it name-for-name in order. When `allow_missing_conf` is set,
/// confidence-head entries may be absent; their names are returned so the
/// caller can re-initialize them. Any other discrepancy is fatal.
fn diff_against_registry(
    expected: &[ParamSpec],
    declared: &[BlobEntry],
    allow_missing_conf: bool,
) -> Result<Vec<String>, CkptError> {
    let mut diffs: Vec<String> = Vec::new();
    let mut missing_conf: Vec<String> = Vec::new();
    let mut decl = declared.iter().peekable();
    for spec in expected {
        let matches_next = decl.peek().is_some_and(|e| e.name == spec.name);
        if matches_next {
            let entry = decl.next().unwrap();
            if entry.shape != spec.shape {
                diffs.push(format!(
                    "  `{}`: checkpoint has shape {:?}, expected {:?}",
                    spec.name, entry.shape, spec.shape
                ));
            }
        } else if allow_missing_conf && spec.name.starts_with(CONF_PREFIX) {
            missing_conf.push(spec.name.clone());
        } else {
            match decl.peek() {
                Some(entry) => diffs.push(format!(
                    "  expected `{}` next, checkpoint declares `{}`",
                    spec.name, entry.name
                )),
                None => diffs.push(format!("  `{}` missing from checkpoint", spec.name)),
            }
            // Resync on name so one gap does not cascade: skip declared
            // entries until the expected name (or the table ends).
            while decl.peek().is_some_and(|e| e.name != spec.name) {
                decl.next();
            }
            if decl.peek().is_some() {
                decl.next();
            }
        }
    }
    for entry in decl {
        diffs.push(format!("  `{}` not part of this architecture", entry.name));
    }
    if diffs.is_empty() {
        Ok(missing_conf)
    } else {
        let total = diffs.len();
        diffs.truncate(SHOWN_DIFFS);
        Err(CkptError::ShapeDiff {
            shown: diffs,
            total,
        })
    }
}

/// Name-keyed comparison of two registries, for the error message when the
/// caller expected a different architecture than the checkpoint holds.
fn diff_registries(expected: &[ParamSpec], found: &[ParamSpec]) -> Vec<String> {
    let mut diffs = Vec::new();
    for spec in expected {
        match found.iter().find(|f| f.name == spec.name) {
            Some(f) if f.shape != spec.shape => diffs.push(format!(
                "  `{}`: checkpoint has shape {:?}, expected {:?}",
                spec.name, f.shape, spec.shape
            )),
            Some(_) => {}
            None => diffs.push(format!("  `{}` missing from checkpoint", spec.name)),
        }
    }
    for f in found {
        if !expected.iter().any(|s| s.name == f.name) {
            diffs.push(format!("  `{}` not part of this architecture", f.name));
        }
    }
    diffs
}

// ── Save ─────────────────────────────────────────────────────────────

/// Write a checkpoint atomically: build the full directory next to `dir`,
/// then rename it into place (replacing any previous checkpoint there).
pub fn save(
    dir: &Path,
    params: &Parameters<f32>,
    opt: Option<&AdamState>,
    meta: &SaveMeta,
) -> Result<(), CkptError> {
    if let Some(o) = opt {
        if o.slots.len() != params.specs.len() {
            return Err(CkptError::Optimizer(format!(
                "{} slots for {} parameters",
                o.slots.len(),
                params.specs.len()
            )));
        }
        for (slot, (spec, buf)) in o.slots.iter().zip(params.specs.iter().zip(&params.bufs)) {
            if slot.m.len() != buf.len() || slot.v.len() != buf.len() {
                return Err(CkptError::Optimizer(format!(
                    "moment size for `{}` is {}/{}, parameter has {}",
                    spec.name,
                    slot.m.len(),
                    slot.v.len(),
                    buf.len()
                )));
            }
        }
    }

    let parent = match dir.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent).map_err(io_err(&parent))?;
    let stem = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "ckpt".into());
    let tmp = parent.join(format!(".{stem}.partial"));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(io_err(&tmp))?;
    }
    let result = write_tree(&tmp, params, opt, meta);
    if result.is_err() {
        let _ = fs::remove_dir_all(&tmp);
        return result;
    }
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::rename(&tmp, dir).map_err(io_err(dir))?;
    Ok(())
}

fn write_tree(
    tmp: &Path,
    params: &Parameters<f32>,
    opt: Option<&AdamState>,
    meta: &SaveMeta,
) -> Result<(), CkptError> {
    let blobs = tmp.join(BLOBS_DIR);
    fs::create_dir_all(&blobs).map_err(io_err(&blobs))?;

    let mut hasher = Sha256::new();
    for (spec, buf) in params.specs.iter().zip(&params.bufs) {
        let bytes = f32s_to_bytes(buf);
        hasher.update(&bytes);
        let path = blobs.join(blob_file(&spec.name));
        fs::write(&path, &bytes).map_err(io_err(&path))?;
    }
    if let Some(o) = opt {
        for (spec, slot) in params.specs.iter().zip(&o.slots) {
            let mb = f32s_to_bytes(&slot.m);
            let vb = f32s_to_bytes(&slot.v);
            hasher.update(&mb);
            hasher.update(&vb);
            let mp = blobs.join(opt_blob_file(&spec.name, 'm'));
            fs::write(&mp, &mb).map_err(io_err(&mp))?;
            let vp = blobs.join(opt_blob_file(&spec.name, 'v'));
            fs::write(&vp, &vb).map_err(io_err(&vp))?;
        }
    }

    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: params.cfg.clone(),
        step: meta.step,
        mode: meta.mode.clone(),
        seed: meta.seed,
        src_vocab_sha256: meta.src_vocab_sha256.clone(),
        tgt_vocab_sha256: meta.tgt_vocab_sha256.clone(),
        params: params
            .specs
            .iter()
            .map(|s| BlobEntry {
                name: s.name.clone(),
                shape: s.shape.clone(),
            })
            .collect(),
        optimizer: opt.map(|o| OptimizerMeta {
            step: o.step,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
        }),
        digest_sha256: hex(&hasher.finalize()),
    };
    let mpath = tmp.join(MANIFEST_FILE);
    let mut f = fs::File::create(&mpath).map_err(io_err(&mpath))?;
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    f.write_all(text.as_bytes()).map_err(io_err(&mpath))?;
    f.write_all(b"\n").map_err(io_err(&mpath))?;
    Ok(())
}

// ── Load ─────────────────────────────────────────────────────────────

/// Read a checkpoint back. `expected` (when given) must equal the stored
/// architecture; a mismatch reports per-parameter shape differences.
/// `allow_fresh_conf_head` permits adapting a checkpoint whose mode never
/// trained the confidence head: `conf.*` comes back as the fresh zero state
/// (and its optimizer moments are cleared), flagged in the result.
pub fn load(
    dir: &Path,
    expected: Option<&ModelConfig>,
    allow_fresh_conf_head: bool,
) -> Result<Loaded, CkptError> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
    let manifest = parse_manifest(&text, &mpath)?;

    let registry = param_specs(&manifest.config);
    if let Some(exp) = expected {
        if *exp != manifest.config {
            let diffs = diff_registries(&param_specs(exp), &registry);
            if diffs.is_empty() {
                return Err(CkptError::ConfigMismatch(format!(
                    "stored {:?}, expected {:?}",
                    manifest.config, exp
                )));
            }
            let total = diffs.len();
            return Err(CkptError::ShapeDiff {
                shown: diffs.into_iter().take(SHOWN_DIFFS).collect(),
                total,
            });
        }
    }
    // The manifest must agree with the registry its own config implies.
    let missing_conf =
        diff_against_registry(&registry, &manifest.params, allow_fresh_conf_head)?;

    // Read every declared blob in order, hashing as we go.
    let blobs_dir = dir.join(BLOBS_DIR);
    let mut hasher = Sha256::new();
    let mut values: Vec<Vec<f32>> = Vec::with_capacity(manifest.params.len());
    for entry in &manifest.params {
        let path = blobs_dir.join(blob_file(&entry.name));
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        let want = checked_numel(&entry.shape).unwrap() * 4;
        if bytes.len() != want {
            return Err(CkptError::Blob {
                name: entry.name.clone(),
                msg: format!(
                    "{} bytes on disk, shape {:?} needs {}",
                    bytes.len(),
                    entry.shape,
                    want
                ),
            });
        }
        hasher.update(&bytes);
        values.push(bytes_to_f32s(&bytes));
    }
    let mut moments: Vec<(Vec<f32>, Vec<f32>)> = Vec::new();
    if manifest.optimizer.is_some() {
        for entry in &manifest.params {
            let want = checked_numel(&entry.shape).unwrap() * 4;
            let mut pair = Vec::with_capacity(2);
            for which in ['m', 'v'] {
                let path = blobs_dir.join(opt_blob_file(&entry.name, which));
                let bytes = fs::read(&path).map_err(io_err(&path))?;
                if bytes.len() != want {
                    return Err(CkptError::Blob {
                        name: entry.name.clone(),
                        msg: format!(
                            "optimizer {which} has {} bytes, shape {:?} needs {}",
                            bytes.len(),
                            entry.shape,
                            want
                        ),
                    });
                }
                hasher.update(&bytes);
                pair.push(bytes_to_f32s(&bytes));
            }
            let v = pair.pop().unwrap();
            let m = pair.pop().unwrap();
            moments.push((m, v));
        }
    }
    let actual = hex(&hasher.finalize());
    if actual != manifest.digest_sha256 {
        return Err(CkptError::Integrity {
            expected: manifest.digest_sha256.clone(),
            actual,
        });
    }
    for (entry, vals) in manifest.params.iter().zip(&values) {
        if !vals.iter().all(|x| x.is_finite()) {
            return Err(CkptError::Blob {
                name: entry.name.clone(),
                msg: "non-finite values".into(),
            });
        }
    }

    // Materialize parameters in registry order; declared entries fill their
    // slot, sanctioned-missing conf entries get the fresh zero state.
    let mut params = Parameters::<f32>::init(manifest.config.clone(), manifest.seed);
    let mut vi = values.into_iter();
    let mut decl = manifest.params.iter().peekable();
    for (si, spec) in registry.iter().enumerate() {
        if decl.peek().is_some_and(|e| e.name == spec.name) {
            decl.next();
            params.bufs[si] = vi.next().unwrap();
        } else {
            debug_assert!(missing_conf.contains(&spec.name));
            for x in params.bufs[si].iter_mut() {
                *x = 0.0;
            }
        }
    }

    let mut optimizer = manifest.optimizer.as_ref().map(|om| {
        let mut st = AdamState::new(&params.sizes(), om.beta1, om.beta2, om.eps);
        st.step = om.step;
        let mut mi = moments.into_iter();
        let mut decl = manifest.params.iter().peekable();
        for (si, spec) in registry.iter().enumerate() {
            if decl.peek().is_some_and(|e| e.name == spec.name) {
                decl.next();
                let (m, v) = mi.next().unwrap();
                st.slots[si].m = m;
                st.slots[si].v = v;
            }
        }
        st
    });

    // Fresh confidence head: requested adaptations from modes that never
    // trained it, plus any entries the manifest legitimately omitted.
    let mut conf_head_reset = !missing_conf.is_empty();
    if allow_fresh_conf_head && manifest.mode != "sm2" {
        conf_head_reset = true;
    }
    if conf_head_reset {
        for (si, spec) in registry.iter().enumerate() {
            if spec.name.starts_with(CONF_PREFIX) {
                for x in params.bufs[si].iter_mut() {
                    *x = 0.0;
                }
                if let Some(st) = optimizer.as_mut() {
                    st.slots[si].m.iter_mut().for_each(|x| *x = 0.0);
                    st.slots[si].v.iter_mut().for_each(|x| *x = 0.0);
                }
            }
        }
    }

    Ok(Loaded {
        params,
        optimizer,
        manifest,
        conf_head_reset,
    })
}

// ── Tests ────────────────────────────────────────────────────────────
