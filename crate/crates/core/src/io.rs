//! File formats: protocol and score TSV, the binary embedding store,
//! checkpoint and report JSON, DET and grid CSV.
//!
//! Writers go through a temporary file in the destination directory that is
//! renamed into place, so readers never observe a partial file.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::decision::{CalibrationParams, FusionMode};
use crate::error::{Error, Result};
use crate::metrics::{self, extended_float, split_by_class, AdcfReport};
use crate::nn::{Activation, Dense, Mlp, WeightedCosine};
use crate::sim::GridNode;
use crate::train::{Architecture, AsvHead, Checkpoint, ModelParams, TrainConfig};
use crate::types::{CostModel, EmbeddingStore, TrialLabel, TrialRecord};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Write `bytes` to `path` via a sibling temporary file and a rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(path))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(io_err(path))
}

/// Shortest decimal that parses back to the same `f64`, switching to
/// exponent notation for very large or very small magnitudes.
pub fn format_f64(v: f64) -> String {
    let a = v.abs();
    if v == 0.0 || (1e-5..1e16).contains(&a) || !v.is_finite() {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

/// `v` rounded to 12 significant digits, printed as short as possible.
fn format_12(v: f64) -> String {
    if !v.is_finite() {
        return format!("{v}");
    }
    let rounded: f64 = format!("{v:.11e}").parse().unwrap_or(v);
    format_f64(rounded)
}

fn split_tsv(line: &str) -> Vec<&str> {
    line.split('\t').collect()
}

fn is_skipped(line: &str) -> bool {
    let t = line.trim();
    t.is_empty() || t.starts_with('#')
}

fn parse_label(s: &str, line: usize) -> Result<TrialLabel> {
    TrialLabel::parse(s).ok_or_else(|| Error::Parse {
        line,
        msg: format!("unknown label {s:?}, expected target, nontarget or spoof"),
    })
}

fn parse_record(fields: &[&str], line: usize) -> Result<TrialRecord> {
    let label = parse_label(fields[2], line)?;
    TrialRecord::new(fields[0], fields[1], label).map_err(|e| Error::Parse {
        line,
        msg: e.to_string(),
    })
}

/// Parsed protocol with the line numbers of repeated `(enroll, test)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct Protocol {
    pub trials: Vec<TrialRecord>,
    pub duplicate_lines: Vec<usize>,
}

/// Rows `enroll<TAB>test<TAB>label`; blank lines and `#` comments are skipped.
pub fn parse_protocol(text: &str) -> Result<Protocol> {
    let mut trials = Vec::new();
    let mut duplicate_lines = Vec::new();
    let mut seen = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let raw = raw.strip_suffix('\r').unwrap_or(raw);
        if is_skipped(raw) {
            continue;
        }
        let fields = split_tsv(raw);
        if fields.len() != 3 {
            return Err(Error::Parse {
                line,
                msg: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        let rec = parse_record(&fields, line)?;
        if !seen.insert((rec.enroll_id().to_string(), rec.test_id().to_string())) {
            log::warn!(
                "protocol line {line}: duplicate pair {} {}",
                rec.enroll_id(),
                rec.test_id()
            );
            duplicate_lines.push(line);
        }
        trials.push(rec);
    }
    Ok(Protocol {
        trials,
        duplicate_lines,
    })
}

pub fn format_protocol(trials: &[TrialRecord]) -> String {
    let mut out = String::new();
    for t in trials {
        let _ = writeln!(out, "{}\t{}\t{}", t.enroll_id(), t.test_id(), t.label());
    }
    out
}

pub fn read_protocol(path: &Path) -> Result<Vec<TrialRecord>> {
    Ok(parse_protocol(&read_text(path)?)?.trials)
}

pub fn write_protocol(path: &Path, trials: &[TrialRecord]) -> Result<()> {
    atomic_write(path, format_protocol(trials).as_bytes())
}

/// One scored trial.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub trial: TrialRecord,
    pub score: f64,
}

/// Rows `enroll<TAB>test<TAB>score<TAB>label`.
pub fn parse_scores(text: &str) -> Result<Vec<ScoreRow>> {
    let mut rows = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let raw = raw.strip_suffix('\r').unwrap_or(raw);
        if is_skipped(raw) {
            continue;
        }
        let fields = split_tsv(raw);
        if fields.len() != 4 {
            return Err(Error::Parse {
                line,
                msg: format!("expected 4 tab-separated fields, found {}", fields.len()),
            });
        }
        let score: f64 = fields[2].trim().parse().map_err(|_| Error::Parse {
            line,
            msg: format!("unparseable score {:?}", fields[2]),
        })?;
        if score.is_nan() {
            return Err(Error::Parse {
                line,
                msg: "score is NaN".into(),
            });
        }
        let trial = parse_record(&[fields[0], fields[1], fields[3]], line)?;
        rows.push(ScoreRow { trial, score });
    }
    Ok(rows)
}

pub fn format_scores(rows: &[ScoreRow]) -> String {
    let mut out = String::new();
    for r in rows {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}",
            r.trial.enroll_id(),
            r.trial.test_id(),
            format_f64(r.score),
            r.trial.label()
        );
    }
    out
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRow>> {
    parse_scores(&read_text(path)?)
}

pub fn write_scores(path: &Path, rows: &[ScoreRow]) -> Result<()> {
    atomic_write(path, format_scores(rows).as_bytes())
}

pub const EMBEDDING_MAGIC: &[u8; 8] = b"SASVEMB1";
pub const EMBEDDING_VERSION: u8 = 1;

/// Little-endian binary: magic, u8 version, u32 count, u32 dim, then per
/// entry a u16 id length, the UTF-8 id and `dim` f32 values.
pub fn encode_embeddings(store: &EmbeddingStore) -> Result<Vec<u8>> {
    let count = u32::try_from(store.len()).map_err(|_| Error::Format("too many embeddings".into()))?;
    let dim = u32::try_from(store.dim()).map_err(|_| Error::Format("dimension too large".into()))?;
    let mut out = Vec::with_capacity(17 + store.len() * (8 + 4 * store.dim()));
    out.extend_from_slice(EMBEDDING_MAGIC);
    out.push(EMBEDDING_VERSION);
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&dim.to_le_bytes());
    for (id, v) in store.iter() {
        let len = u16::try_from(id.len()).map_err(|_| Error::Format(format!("id {id:?} longer than 65535 bytes")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(id.as_bytes());
        for &x in v {
            let f = x as f32;
            if !f.is_finite() {
                return Err(Error::Format(format!("value {x} of {id:?} does not fit in f32")));
            }
            out.extend_from_slice(&f.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.at < n {
            return Err(Error::Truncated { offset: self.at, what });
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &'static str) -> Result<[u8; N]> {
        let mut a = [0u8; N];
        a.copy_from_slice(self.take(N, what)?);
        Ok(a)
    }
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<EmbeddingStore> {
    let mut c = Cursor { bytes, at: 0 };
    if c.take(8, "magic")? != EMBEDDING_MAGIC {
        return Err(Error::BadMagic);
    }
    let version = c.array::<1>("version")?[0];
    if version != EMBEDDING_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let count = u32::from_le_bytes(c.array("count")?) as usize;
    let dim = u32::from_le_bytes(c.array("dim")?) as usize;
    let mut store = EmbeddingStore::new(dim).map_err(|_| Error::Format("dimension is zero".into()))?;
    for _ in 0..count {
        let len = u16::from_le_bytes(c.array("id length")?) as usize;
        let id = std::str::from_utf8(c.take(len, "id")?).map_err(|_| Error::Format("id is not UTF-8".into()))?;
        let raw = c.take(4 * dim, "values")?;
        let values = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        if store.get(id).is_some() {
            return Err(Error::DuplicateId(id.to_string()));
        }
        store.insert(id, values).map_err(|e| Error::Format(e.to_string()))?;
    }
    if c.at != bytes.len() {
        return Err(Error::TrailingBytes(bytes.len() - c.at));
    }
    Ok(store)
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingStore> {
    decode_embeddings(&std::fs::read(path).map_err(io_err(path))?)
}

pub fn write_embeddings(path: &Path, store: &EmbeddingStore) -> Result<()> {
    atomic_write(path, &encode_embeddings(store)?)
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn from_json<T: DeserializeOwned>(text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    from_json(&read_text(path)?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    atomic_write(path, to_json(value)?.as_bytes())
}

pub const CHECKPOINT_FORMAT: &str = "sasv-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LayerFile {
    in_dim: usize,
    out_dim: usize,
    /// Row-major `out_dim × in_dim`.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MlpFile {
    input_dim: usize,
    activations: Vec<Activation>,
    layers: Vec<LayerFile>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum AsvHeadFile {
    Mlp { mlp: MlpFile },
    Cosine,
    WeightedCosine { dim: usize, w: Vec<f64> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    architecture: Architecture,
    fusion: FusionMode,
    asv_dim: usize,
    cm_dim: usize,
    num_params: usize,
    asv_head: AsvHeadFile,
    cm: MlpFile,
    asv_calib: CalibrationParams,
    cm_calib: CalibrationParams,
    rho_logit: f64,
    tau: f64,
    epoch: usize,
    dev_min_adcf: f64,
    #[serde(with = "extended_float")]
    dev_threshold: f64,
    config: Option<TrainConfig>,
}

fn check_finite(field: &str, values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::Format(format!("{field}[{i}] is not finite"))),
        None => Ok(()),
    }
}

fn mlp_to_file(m: &Mlp) -> MlpFile {
    MlpFile {
        input_dim: m.input_dim(),
        activations: m.activations().to_vec(),
        layers: m
            .layers()
            .iter()
            .map(|l| LayerFile {
                in_dim: l.in_dim,
                out_dim: l.out_dim,
                weights: l.weights.clone(),
                bias: l.bias.clone(),
            })
            .collect(),
    }
}

fn mlp_from_file(f: MlpFile, field: &str, expected_input: usize) -> Result<Mlp> {
    let fail = |m: String| Err(Error::Format(format!("{field}.{m}")));
    if f.input_dim != expected_input {
        return fail(format!(
            "input_dim is {} but the embedding dims require {expected_input}",
            f.input_dim
        ));
    }
    if f.layers.len() != f.activations.len() + 1 {
        return fail(format!(
            "activations has {} entries for {} layers",
            f.activations.len(),
            f.layers.len()
        ));
    }
    let mut prev = f.input_dim;
    let n = f.layers.len();
    let mut layers = Vec::with_capacity(n);
    for (i, l) in f.layers.into_iter().enumerate() {
        if l.in_dim != prev {
            return fail(format!(
                "layers[{i}].in_dim is {} but previous width is {prev}",
                l.in_dim
            ));
        }
        if i + 1 == n && l.out_dim != 1 {
            return fail(format!(
                "layers[{i}].out_dim is {} but the output layer must be 1",
                l.out_dim
            ));
        }
        if l.weights.len() != l.in_dim * l.out_dim {
            return fail(format!(
                "layers[{i}].weights has {} values, expected {}",
                l.weights.len(),
                l.in_dim * l.out_dim
            ));
        }
        if l.bias.len() != l.out_dim {
            return fail(format!(
                "layers[{i}].bias has {} values, expected {}",
                l.bias.len(),
                l.out_dim
            ));
        }
        check_finite(&format!("{field}.layers[{i}].weights"), &l.weights)?;
        check_finite(&format!("{field}.layers[{i}].bias"), &l.bias)?;
        prev = l.out_dim;
        layers.push(Dense {
            in_dim: l.in_dim,
            out_dim: l.out_dim,
            weights: l.weights,
            bias: l.bias,
        });
    }
    Mlp::new(layers, f.activations).map_err(|e| Error::Format(format!("{field}: {e}")))
}

pub fn checkpoint_to_json(ckpt: &Checkpoint, config: Option<&TrainConfig>) -> Result<String> {
    let p = &ckpt.params;
    check_finite("params", &p.flatten())?;
    let asv_head = match &p.asv {
        AsvHead::Mlp(m) => AsvHeadFile::Mlp { mlp: mlp_to_file(m) },
        AsvHead::Cosine => AsvHeadFile::Cosine,
        AsvHead::WeightedCosine(w) => AsvHeadFile::WeightedCosine {
            dim: w.w.len(),
            w: w.w.clone(),
        },
    };
    to_json(&CheckpointFile {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        architecture: p.architecture(),
        fusion: p.fusion,
        asv_dim: p.asv_dim,
        cm_dim: p.cm_dim,
        num_params: p.num_params(),
        asv_head,
        cm: mlp_to_file(&p.cm),
        asv_calib: p.asv_calib,
        cm_calib: p.cm_calib,
        rho_logit: p.rho_logit,
        tau: p.tau,
        epoch: ckpt.epoch,
        dev_min_adcf: ckpt.dev_min_adcf,
        dev_threshold: ckpt.dev_threshold,
        config: config.cloned(),
    })
}

pub fn checkpoint_from_json(text: &str) -> Result<(Checkpoint, Option<TrainConfig>)> {
    let f: CheckpointFile = from_json(text)?;
    if f.format != CHECKPOINT_FORMAT {
        return Err(Error::Format(format!(
            "format is {:?}, expected {CHECKPOINT_FORMAT:?}",
            f.format
        )));
    }
    if f.version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {}", f.version)));
    }
    if f.asv_dim == 0 || f.cm_dim == 0 {
        return Err(Error::Format("asv_dim and cm_dim must be positive".into()));
    }
    let asv = match f.asv_head {
        AsvHeadFile::Mlp { mlp } => AsvHead::Mlp(mlp_from_file(mlp, "asv_head.mlp", 2 * f.asv_dim)?),
        AsvHeadFile::Cosine => AsvHead::Cosine,
        AsvHeadFile::WeightedCosine { dim, w } => {
            if dim != f.asv_dim {
                return Err(Error::Format(format!(
                    "asv_head.dim is {dim} but asv_dim is {}",
                    f.asv_dim
                )));
            }
            if w.len() != dim {
                return Err(Error::Format(format!(
                    "asv_head.w has {} values, expected {dim}",
                    w.len()
                )));
            }
            check_finite("asv_head.w", &w)?;
            AsvHead::WeightedCosine(WeightedCosine { w })
        }
    };
    let cm = mlp_from_file(f.cm, "cm", f.asv_dim + f.cm_dim)?;
    let params = ModelParams {
        asv_dim: f.asv_dim,
        cm_dim: f.cm_dim,
        fusion: f.fusion,
        asv,
        cm,
        asv_calib: f.asv_calib,
        cm_calib: f.cm_calib,
        rho_logit: f.rho_logit,
        tau: f.tau,
    };
    if params.architecture() != f.architecture {
        return Err(Error::Format(format!(
            "architecture is {} but asv_head is for {}",
            f.architecture.as_str(),
            params.architecture().as_str()
        )));
    }
    if params.num_params() != f.num_params {
        return Err(Error::Format(format!(
            "num_params is {} but the arrays hold {}",
            f.num_params,
            params.num_params()
        )));
    }
    check_finite("params", &params.flatten())?;
    Ok((
        Checkpoint {
            epoch: f.epoch,
            params,
            dev_min_adcf: f.dev_min_adcf,
            dev_threshold: f.dev_threshold,
        },
        f.config,
    ))
}

pub fn read_checkpoint(path: &Path) -> Result<(Checkpoint, Option<TrainConfig>)> {
    checkpoint_from_json(&read_text(path)?)
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint, config: Option<&TrainConfig>) -> Result<()> {
    atomic_write(path, checkpoint_to_json(ckpt, config)?.as_bytes())
}

/// Evaluation summary written by the `eval` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cost_model: CostModel,
    pub n_target: usize,
    pub n_nontarget: usize,
    pub n_spoof: usize,
    #[serde(flatten)]
    pub adcf: AdcfReport,
    /// Targets against nontargets.
    pub sv_eer: f64,
    #[serde(with = "extended_float")]
    pub sv_eer_threshold: f64,
    /// Targets against spoofs.
    pub spf_eer: f64,
    #[serde(with = "extended_float")]
    pub spf_eer_threshold: f64,
}

impl EvalReport {
    pub fn compute(
        trials: &[(f64, TrialLabel)],
        cm: &CostModel,
        normalized: bool,
        threshold: Option<f64>,
    ) -> Result<Self> {
        let adcf = metrics::evaluate(trials, cm, normalized, threshold)?;
        let [tar, non, spf] = split_by_class(trials);
        let (sv_eer, sv_eer_threshold) = metrics::eer(&tar, &non)?;
        let (spf_eer, spf_eer_threshold) = metrics::eer(&tar, &spf)?;
        Ok(Self {
            cost_model: *cm,
            n_target: tar.len(),
            n_nontarget: non.len(),
            n_spoof: spf.len(),
            adcf,
            sv_eer,
            sv_eer_threshold,
            spf_eer,
            spf_eer_threshold,
        })
    }
}

/// `p_fa,p_miss` rows, 12 significant digits.
pub fn format_det(points: &[(f64, f64)]) -> String {
    let mut out = String::from("p_fa,p_miss\n");
    for &(fa, miss) in points {
        let _ = writeln!(out, "{},{}", format_12(fa), format_12(miss));
    }
    out
}

pub fn parse_det(text: &str) -> Result<Vec<(f64, f64)>> {
    parse_csv(text, "p_fa,p_miss", |f, line| {
        if f.len() != 2 {
            return Err(Error::Parse {
                line,
                msg: "expected 2 fields".into(),
            });
        }
        Ok((parse_num(f[0], line)?, parse_num(f[1], line)?))
    })
}

pub fn write_det(path: &Path, points: &[(f64, f64)]) -> Result<()> {
    atomic_write(path, format_det(points).as_bytes())
}

/// `llr_asv,llr_cm,s_sasv,accept` rows with `accept` as 0 or 1.
pub fn format_grid(nodes: &[GridNode]) -> String {
    let mut out = String::from("llr_asv,llr_cm,s_sasv,accept\n");
    for n in nodes {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            format_f64(n.llr_asv),
            format_f64(n.llr_cm),
            format_f64(n.s_sasv),
            u8::from(n.accept)
        );
    }
    out
}

pub fn parse_grid(text: &str) -> Result<Vec<GridNode>> {
    parse_csv(text, "llr_asv,llr_cm,s_sasv,accept", |f, line| {
        if f.len() != 4 {
            return Err(Error::Parse {
                line,
                msg: "expected 4 fields".into(),
            });
        }
        let accept = match f[3] {
            "1" => true,
            "0" => false,
            other => {
                return Err(Error::Parse {
                    line,
                    msg: format!("accept must be 0 or 1, got {other:?}"),
                })
            }
        };
        Ok(GridNode {
            llr_asv: parse_num(f[0], line)?,
            llr_cm: parse_num(f[1], line)?,
            s_sasv: parse_num(f[2], line)?,
            accept,
        })
    })
}

pub fn write_grid(path: &Path, nodes: &[GridNode]) -> Result<()> {
    atomic_write(path, format_grid(nodes).as_bytes())
}

fn parse_num(s: &str, line: usize) -> Result<f64> {
    s.trim().parse().map_err(|_| Error::Parse {
        line,
        msg: format!("unparseable number {s:?}"),
    })
}

fn parse_csv<T>(text: &str, header: &str, row: impl Fn(&[&str], usize) -> Result<T>) -> Result<Vec<T>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end() == header => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                msg: format!("expected header {header:?}"),
            })
        }
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| row(&l.trim_end().split(',').collect::<Vec<_>>(), i + 1))
        .collect()
}
