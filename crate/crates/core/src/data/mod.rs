//! Workload datasets: storage format, synthesis, ingestion, shifts,
//! corruption, and distribution-shift measurement.

mod distance;
mod ingest;
mod perturb;
mod synth;

pub use distance::{assignment, wasserstein_distance, DistanceMethod};
pub use ingest::{ingest_traces, IngestReport};
pub(crate) use perturb::apply_field;
pub use perturb::{
    corrupt, perlin_field, perturbation_field, shift_dataset, CorruptionKind, CorruptionSpec,
    PerturbationField, Shift,
};
pub use synth::{synth_generate, SynthKind, SynthParams};

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const DATA_MAGIC: &str = "DRDFL-DATA-v1";

/// Upper clamp for shifted or corrupted workloads, as a multiple of `norm`.
pub const HEADROOM: f64 = 1.25;

pub const DEFAULT_NORM: f64 = 4e5;
pub const DEFAULT_CONTEXT: usize = 8;
pub const DEFAULT_HORIZON: usize = 28;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub source: String,
    pub slot_seconds: f64,
    pub seed: Option<u64>,
}

impl Default for DatasetMeta {
    fn default() -> Self {
        Self {
            source: "unknown".into(),
            slot_seconds: 60.0,
            seed: None,
        }
    }
}

/// Fixed-length non-negative workload sequences (tokens per slot).
///
/// Each sequence holds `context` history slots followed by `horizon`
/// decision slots.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceDataset {
    pub sequences: Vec<Vec<f64>>,
    pub context: usize,
    pub horizon: usize,
    /// Normalization constant, the capacity ceiling `a_max`.
    pub norm: f64,
    pub meta: DatasetMeta,
}

impl TraceDataset {
    pub fn new(
        sequences: Vec<Vec<f64>>,
        context: usize,
        horizon: usize,
        norm: f64,
        meta: DatasetMeta,
    ) -> Result<Self> {
        let d = Self {
            sequences,
            context,
            horizon,
            norm,
            meta,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn seq_len(&self) -> usize {
        self.context + self.horizon
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Shared invariant check: uniform length, non-negative finite values,
    /// positive norm.
    pub fn validate(&self) -> Result<()> {
        if !(self.norm > 0.0 && self.norm.is_finite()) {
            return Err(Error::Argument(format!("norm must be positive, got {}", self.norm)));
        }
        if self.context == 0 || self.horizon == 0 {
            return Err(Error::Argument("context and horizon must be at least 1".into()));
        }
        let l = self.seq_len();
        for (i, s) in self.sequences.iter().enumerate() {
            if s.len() != l {
                return Err(Error::Shape(format!("sequence {i} has length {} != {l}", s.len())));
            }
            if let Some(x) = s.iter().find(|x| !(x.is_finite() && **x >= 0.0)) {
                return Err(Error::Domain(format!("sequence {i} contains invalid value {x}")));
            }
        }
        Ok(())
    }

    pub fn with_sequences(&self, sequences: Vec<Vec<f64>>) -> Self {
        Self {
            sequences,
            ..self.clone()
        }
    }

    pub fn max_value(&self) -> f64 {
        self.sequences
            .iter()
            .flatten()
            .copied()
            .fold(0.0, f64::max)
    }

    /// Per-slot mean and standard deviation across sequences.
    pub fn slot_moments(&self) -> (Vec<f64>, Vec<f64>) {
        let l = self.seq_len();
        let n = self.len().max(1) as f64;
        let mut mean = vec![0.0; l];
        for s in &self.sequences {
            for (m, x) in mean.iter_mut().zip(s) {
                *m += x / n;
            }
        }
        let mut var = vec![0.0; l];
        for s in &self.sequences {
            for ((v, x), m) in var.iter_mut().zip(s).zip(&mean) {
                *v += (x - m).powi(2) / n;
            }
        }
        (mean, var.into_iter().map(f64::sqrt).collect())
    }

    /// Seeded disjoint partition by sequence. Fractions must be positive and
    /// sum to at most one; any remainder is dropped.
    pub fn split(&self, fractions: &[f64], seed: u64) -> Result<Vec<TraceDataset>> {
        if fractions.is_empty() || fractions.iter().any(|&f| f <= 0.0) {
            return Err(Error::Argument("split fractions must be positive".into()));
        }
        let total: f64 = fractions.iter().sum();
        if total > 1.0 + 1e-12 {
            return Err(Error::Argument(format!("split fractions sum to {total} > 1")));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut rng::stream(seed));
        let n = self.len();
        let mut out = Vec::with_capacity(fractions.len());
        let mut start = 0usize;
        let mut cumulative = 0.0;
        for &f in fractions {
            cumulative += f;
            let end = ((cumulative * n as f64).round() as usize).min(n);
            let seqs = order[start..end.max(start)]
                .iter()
                .map(|&i| self.sequences[i].clone())
                .collect();
            out.push(self.with_sequences(seqs));
            start = end.max(start);
        }
        Ok(out)
    }

    pub fn concat(&self, other: &TraceDataset) -> Result<TraceDataset> {
        if other.seq_len() != self.seq_len() {
            return Err(Error::Shape("cannot concatenate datasets of different lengths".into()));
        }
        let mut seqs = self.sequences.clone();
        seqs.extend(other.sequences.iter().cloned());
        Ok(self.with_sequences(seqs))
    }

    /// Writes the `DRDFL-DATA-v1` text format: one header record followed by
    /// one comma-separated row per sequence.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let mut header = format!(
            "{DATA_MAGIC},L={},W={},N={},norm={},source={},slot_seconds={}",
            self.seq_len(),
            self.context,
            self.horizon,
            self.norm,
            self.meta.source.replace([',', '\n'], "_"),
            self.meta.slot_seconds
        );
        if let Some(seed) = self.meta.seed {
            let _ = write!(header, ",seed={seed}");
        }
        writeln!(w, "{header}")?;
        for s in &self.sequences {
            let row: Vec<String> = s.iter().map(|x| format!("{x}")).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let f = std::fs::File::create(&tmp)?;
            let mut w = std::io::BufWriter::new(f);
            self.write_to(&mut w)?;
            w.flush()?;
        }
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn read_from(r: impl std::io::Read) -> Result<TraceDataset> {
        let mut lines = BufReader::new(r).lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("empty dataset file".into()))??;
        let mut fields = header.trim().split(',');
        if fields.next() != Some(DATA_MAGIC) {
            return Err(Error::Format(format!("missing {DATA_MAGIC} header")));
        }
        let mut l = None;
        let mut w = None;
        let mut n = None;
        let mut norm = None;
        let mut meta = DatasetMeta::default();
        for field in fields {
            let (k, v) = field
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad header field {field:?}")))?;
            let bad = || Error::Format(format!("bad header value {field:?}"));
            match k {
                "L" => l = Some(v.parse::<usize>().map_err(|_| bad())?),
                "W" => w = Some(v.parse::<usize>().map_err(|_| bad())?),
                "N" => n = Some(v.parse::<usize>().map_err(|_| bad())?),
                "norm" => norm = Some(v.parse::<f64>().map_err(|_| bad())?),
                "source" => meta.source = v.to_string(),
                "slot_seconds" => meta.slot_seconds = v.parse::<f64>().map_err(|_| bad())?,
                "seed" => meta.seed = Some(v.parse::<u64>().map_err(|_| bad())?),
                _ => {}
            }
        }
        let (Some(l), Some(w), Some(n), Some(norm)) = (l, w, n, norm) else {
            return Err(Error::Format("header must carry L, W, N and norm".into()));
        };
        if l != w + n {
            return Err(Error::Format(format!("header L={l} but W+N={}", w + n)));
        }
        let mut sequences = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row: std::result::Result<Vec<f64>, _> =
                line.split(',').map(|x| x.trim().parse::<f64>()).collect();
            let row = row.map_err(|e| Error::Format(format!("row {}: {e}", i + 1)))?;
            sequences.push(row);
        }
        TraceDataset::new(sequences, w, n, norm, meta)
    }

    pub fn load(path: &Path) -> Result<TraceDataset> {
        let f = std::fs::File::open(path)?;
        Self::read_from(f)
    }
}
