//! Activation dump container.
//!
//! Binary layout (little-endian throughout):
//!
//! ```text
//! "EDAD" | u32 version=1 | u32 D | u32 N | u32 K | u8 has_postnorm
//!        | u8 has_unembedding | u32 Voc | u32 label_len | label (UTF-8)
//! per sequence k:
//!     u32 L_k
//!     (N+1) × f32[L_k × D]            layer outputs, layer 0 = embedding
//!     if has_postnorm: for layer 1..=N:
//!         f32[L_k × D] attention-norm output, f32[L_k × D] FFN-norm output
//! if has_unembedding:
//!     f32[D] g_final | f32 epsilon | f32[D × Voc] W_u
//! ```
//!
//! All matrices are row-major. A JSON sidecar (`<dump>.json`) mirrors the
//! header and carries the free-text creation metadata, which the binary
//! header does not store.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::binio::{put_f32s, put_u32, Cursor};
use crate::error::{Error, Result};
use crate::spectral::LogitHead;

pub const MAGIC: &[u8; 4] = b"EDAD";
pub const FORMAT_VERSION: u32 = 1;

/// Row-major `f32` matrix, the storage type of every dumped tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct F32Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl F32Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Format(format!(
                "matrix data has {} values, expected {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Rounds an `f64` matrix to `f32` storage.
    pub fn from_dmatrix(m: &DMatrix<f64>) -> Self {
        let mut data = Vec::with_capacity(m.len());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                data.push(m[(i, j)] as f32);
            }
        }
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
    }

    pub fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.rows, self.cols, |i, j| {
            f64::from(self.data[i * self.cols + j])
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpManifest {
    pub format_version: u32,
    pub hidden_dim: usize,
    /// Transformer blocks; stored layers are `0..=num_layers`.
    pub num_layers: usize,
    pub num_sequences: usize,
    pub has_postnorm: bool,
    pub has_unembedding: bool,
    /// 0 when no unembedding block is stored.
    pub vocab_size: usize,
    pub model_label: String,
    #[serde(default)]
    pub creation_metadata: String,
}

impl DumpManifest {
    pub fn new(hidden_dim: usize, num_layers: usize, num_sequences: usize) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            hidden_dim,
            num_layers,
            num_sequences,
            has_postnorm: false,
            has_unembedding: false,
            vocab_size: 0,
            model_label: String::new(),
            creation_metadata: String::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::UnsupportedFormat(format!(
                "version {}",
                self.format_version
            )));
        }
        if self.hidden_dim == 0 {
            return Err(Error::Format("hidden_dim must be >= 1".into()));
        }
        if self.num_sequences == 0 {
            return Err(Error::Format("num_sequences must be >= 1".into()));
        }
        if self.has_unembedding && self.vocab_size < 2 {
            return Err(Error::Format("unembedding requires vocab_size >= 2".into()));
        }
        if !self.has_unembedding && self.vocab_size != 0 {
            return Err(Error::Format("vocab_size must be 0 without unembedding".into()));
        }
        for (name, v) in [
            ("hidden_dim", self.hidden_dim),
            ("num_layers", self.num_layers),
            ("num_sequences", self.num_sequences),
            ("vocab_size", self.vocab_size),
        ] {
            if u32::try_from(v).is_err() {
                return Err(Error::Format(format!("{name} does not fit in u32")));
            }
        }
        Ok(())
    }
}

/// Post-norm streams for layers `1..=N`.
#[derive(Debug, Clone, PartialEq)]
pub struct PostNormStreams {
    pub attention: Vec<F32Matrix>,
    pub ffn: Vec<F32Matrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceRecord {
    /// Layer outputs `X_0 ..= X_N`, each `L_k × D`.
    pub layers: Vec<F32Matrix>,
    pub postnorm: Option<PostNormStreams>,
}

impl SequenceRecord {
    pub fn seq_len(&self) -> usize {
        self.layers.first().map_or(0, F32Matrix::rows)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnembeddingBlock {
    pub g_final: Vec<f32>,
    pub epsilon: f32,
    /// `D × Voc`.
    pub w_u: F32Matrix,
}

impl UnembeddingBlock {
    pub fn logit_head(&self) -> Result<LogitHead> {
        LogitHead::new(
            DVector::from_iterator(self.g_final.len(), self.g_final.iter().map(|&g| f64::from(g))),
            f64::from(self.epsilon),
            self.w_u.to_dmatrix(),
        )
    }
}

/// A fully materialized, validated dump.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationDump {
    pub manifest: DumpManifest,
    pub records: Vec<SequenceRecord>,
    pub unembedding: Option<UnembeddingBlock>,
}

impl ActivationDump {
    pub fn new(
        manifest: DumpManifest,
        records: Vec<SequenceRecord>,
        unembedding: Option<UnembeddingBlock>,
    ) -> Result<Self> {
        validate(&manifest, &records, unembedding.as_ref())?;
        Ok(Self {
            manifest,
            records,
            unembedding,
        })
    }

    pub fn hidden_dim(&self) -> usize {
        self.manifest.hidden_dim
    }

    /// Number of stored layer matrices per sequence (`N + 1`).
    pub fn num_stored_layers(&self) -> usize {
        self.manifest.num_layers + 1
    }

    /// `X_layer` of sequence `seq` as `f64`.
    pub fn layer(&self, seq: usize, layer: usize) -> DMatrix<f64> {
        self.records[seq].layers[layer].to_dmatrix()
    }

    pub fn logit_head(&self) -> Option<Result<LogitHead>> {
        self.unembedding.as_ref().map(UnembeddingBlock::logit_head)
    }
}

/// Checks every record and the unembedding block against the manifest.
pub fn validate(
    manifest: &DumpManifest,
    records: &[SequenceRecord],
    unembedding: Option<&UnembeddingBlock>,
) -> Result<()> {
    manifest.validate()?;
    let d = manifest.hidden_dim;
    let n = manifest.num_layers;
    if records.len() != manifest.num_sequences {
        return Err(Error::Format(format!(
            "manifest declares {} sequences, got {}",
            manifest.num_sequences,
            records.len()
        )));
    }
    for (k, rec) in records.iter().enumerate() {
        if rec.layers.len() != n + 1 {
            return Err(Error::Format(format!(
                "sequence {k}: expected {} layer matrices, got {}",
                n + 1,
                rec.layers.len()
            )));
        }
        let l = rec.seq_len();
        if l == 0 || u32::try_from(l).is_err() {
            return Err(Error::Format(format!("sequence {k}: invalid length {l}")));
        }
        let check = |m: &F32Matrix, what: String| -> Result<()> {
            if m.rows() != l || m.cols() != d {
                return Err(Error::Format(format!(
                    "sequence {k} {what}: shape {}x{}, expected {l}x{d}",
                    m.rows(),
                    m.cols()
                )));
            }
            if !m.all_finite() {
                return Err(Error::Data(format!("sequence {k} {what}: non-finite value")));
            }
            Ok(())
        };
        for (i, m) in rec.layers.iter().enumerate() {
            check(m, format!("layer {i}"))?;
        }
        match (&rec.postnorm, manifest.has_postnorm) {
            (Some(pn), true) => {
                if pn.attention.len() != n || pn.ffn.len() != n {
                    return Err(Error::Format(format!(
                        "sequence {k}: expected {n} post-norm matrices per stream"
                    )));
                }
                for (i, (a, f)) in pn.attention.iter().zip(&pn.ffn).enumerate() {
                    check(a, format!("attention-norm layer {}", i + 1))?;
                    check(f, format!("ffn-norm layer {}", i + 1))?;
                }
            }
            (None, false) => {}
            (Some(_), false) => {
                return Err(Error::Format(format!(
                    "sequence {k} carries post-norm streams but has_postnorm is false"
                )))
            }
            (None, true) => {
                return Err(Error::Format(format!(
                    "sequence {k} lacks post-norm streams"
                )))
            }
        }
    }
    match (unembedding, manifest.has_unembedding) {
        (Some(u), true) => {
            if u.g_final.len() != d || u.w_u.rows() != d || u.w_u.cols() != manifest.vocab_size {
                return Err(Error::Format("unembedding block shape mismatch".into()));
            }
            if u.epsilon <= 0.0 || !u.epsilon.is_finite() {
                return Err(Error::Data("unembedding epsilon must be positive".into()));
            }
            if !u.w_u.all_finite() || u.g_final.iter().any(|g| !g.is_finite()) {
                return Err(Error::Data("unembedding block has non-finite values".into()));
            }
        }
        (None, false) => {}
        (Some(_), false) => {
            return Err(Error::Format(
                "unembedding block given but has_unembedding is false".into(),
            ))
        }
        (None, true) => {
            return Err(Error::Format(
                "has_unembedding is set but no unembedding block was given".into(),
            ))
        }
    }
    Ok(())
}

/// Serializes a dump in the binary layout described at module level.
pub fn write_dump(
    manifest: &DumpManifest,
    records: &[SequenceRecord],
    unembedding: Option<&UnembeddingBlock>,
    sink: &mut impl Write,
) -> Result<()> {
    validate(manifest, records, unembedding)?;
    sink.write_all(MAGIC)?;
    sink.write_all(&FORMAT_VERSION.to_le_bytes())?;
    put_u32(sink, manifest.hidden_dim)?;
    put_u32(sink, manifest.num_layers)?;
    put_u32(sink, manifest.num_sequences)?;
    sink.write_all(&[u8::from(manifest.has_postnorm), u8::from(manifest.has_unembedding)])?;
    put_u32(sink, manifest.vocab_size)?;
    let label = manifest.model_label.as_bytes();
    put_u32(sink, label.len())?;
    sink.write_all(label)?;
    for rec in records {
        put_u32(sink, rec.seq_len())?;
        for m in &rec.layers {
            put_f32s(sink, m.as_slice())?;
        }
        if let Some(pn) = &rec.postnorm {
            for (a, f) in pn.attention.iter().zip(&pn.ffn) {
                put_f32s(sink, a.as_slice())?;
                put_f32s(sink, f.as_slice())?;
            }
        }
    }
    if let Some(u) = unembedding {
        put_f32s(sink, &u.g_final)?;
        put_f32s(sink, &[u.epsilon])?;
        put_f32s(sink, u.w_u.as_slice())?;
    }
    sink.flush()?;
    Ok(())
}

/// Parses and validates a dump from a byte stream.
pub fn read_dump(source: impl Read) -> Result<ActivationDump> {
    let mut cur = Cursor::new(source);
    let magic = cur
        .bytes(4, &|| "magic".into())
        .map_err(|_| Error::UnsupportedFormat("missing magic bytes".into()))?;
    if magic.as_slice() != MAGIC {
        return Err(Error::UnsupportedFormat(format!("bad magic {magic:?}")));
    }
    let version = cur.u32(&|| "header".into())?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedFormat(format!("version {version}")));
    }
    let header = || "header".to_string();
    let d = cur.u32(&header)? as usize;
    let n = cur.u32(&header)? as usize;
    let k = cur.u32(&header)? as usize;
    let has_postnorm = cur.u8(&header)?;
    let has_unembedding = cur.u8(&header)?;
    if has_postnorm > 1 || has_unembedding > 1 {
        return Err(Error::CorruptDump("flag bytes must be 0 or 1".into()));
    }
    let voc = cur.u32(&header)? as usize;
    let label_len = cur.u32(&header)? as usize;
    let label = cur.bytes(label_len, &|| "model label".into())?;
    let model_label = String::from_utf8(label)
        .map_err(|_| Error::CorruptDump("model label is not UTF-8".into()))?;
    let manifest = DumpManifest {
        format_version: version,
        hidden_dim: d,
        num_layers: n,
        num_sequences: k,
        has_postnorm: has_postnorm == 1,
        has_unembedding: has_unembedding == 1,
        vocab_size: voc,
        model_label,
        creation_metadata: String::new(),
    };
    manifest.validate()?;

    let mut records = Vec::with_capacity(k.min(1 << 16));
    for seq in 0..k {
        let l = cur.u32(&|| format!("sequence {seq} length"))? as usize;
        if l == 0 {
            return Err(Error::CorruptDump(format!("sequence {seq} has length 0")));
        }
        let mut layers = Vec::with_capacity(n + 1);
        for layer in 0..=n {
            layers.push(cur.matrix(l, d, &|| format!("sequence {seq} layer {layer}"))?);
        }
        let postnorm = if manifest.has_postnorm {
            let mut attention = Vec::with_capacity(n);
            let mut ffn = Vec::with_capacity(n);
            for layer in 1..=n {
                attention.push(cur.matrix(l, d, &|| {
                    format!("sequence {seq} attention-norm layer {layer}")
                })?);
                ffn.push(cur.matrix(l, d, &|| format!("sequence {seq} ffn-norm layer {layer}"))?);
            }
            Some(PostNormStreams { attention, ffn })
        } else {
            None
        };
        records.push(SequenceRecord { layers, postnorm });
    }
    let unembedding = if manifest.has_unembedding {
        let g_final = cur.f32s(d, &|| "unembedding gain".into())?;
        let epsilon = cur.f32s(1, &|| "unembedding epsilon".into())?[0];
        let w_u = cur.matrix(d, voc, &|| "unembedding matrix".into())?;
        Some(UnembeddingBlock {
            g_final,
            epsilon,
            w_u,
        })
    } else {
        None
    };
    ActivationDump::new(manifest, records, unembedding)
}

pub fn sidecar_path(dump_path: &Path) -> PathBuf {
    let mut s = dump_path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes the binary dump and its JSON sidecar manifest.
pub fn save_dump(dump: &ActivationDump, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dump(&dump.manifest, &dump.records, dump.unembedding.as_ref(), &mut w)?;
    let side = serde_json::to_string_pretty(&dump.manifest)?;
    std::fs::write(sidecar_path(path), side + "\n")?;
    Ok(())
}

/// Reads a dump file; creation metadata is taken from the sidecar when one
/// exists next to it.
pub fn load_dump(path: &Path) -> Result<ActivationDump> {
    let mut dump = read_dump(BufReader::new(File::open(path)?))?;
    let side = sidecar_path(path);
    if side.exists() {
        let text = std::fs::read_to_string(side)?;
        let m: DumpManifest = serde_json::from_str(&text)?;
        dump.manifest.creation_metadata = m.creation_metadata;
    }
    Ok(dump)
}
