//! Record streams.
//!
//! Everything downstream sees data through [`RecordSource`]: a re-scannable
//! sequence of `(global index, x, y)` records. Indices are positions in the
//! concatenated file order and never depend on block size or sharding, which
//! is what keys the sampling RNG.

use std::fs::File;
use std::io::BufReader;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_BLOCK_SIZE: usize = 65_536;

/// One record handed to a visitor.
#[derive(Debug, Clone, Copy)]
pub struct RecordRef<'a> {
    pub index: u64,
    pub x: &'a [f64],
    pub y: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanSummary {
    pub rows: u64,
    pub blocks: u64,
}

impl ScanSummary {
    fn merge(self, other: ScanSummary) -> ScanSummary {
        ScanSummary {
            rows: self.rows + other.rows,
            blocks: self.blocks + other.blocks,
        }
    }
}

pub type Visitor<'v> = dyn FnMut(RecordRef<'_>) -> Result<()> + 'v;

pub trait RecordSource: Send + Sync {
    /// Covariate dimension (after intercept injection).
    fn dim(&self) -> usize;

    /// Number of records. May cost one pass over the data the first time.
    fn count(&self) -> Result<u64>;

    /// Global index range covered by this source.
    fn index_range(&self) -> Result<Range<u64>> {
        Ok(0..self.count()?)
    }

    /// Visits records whose global index lies in `range`, in index order.
    fn scan_range(&self, range: Range<u64>, visitor: &mut Visitor<'_>) -> Result<ScanSummary>;

    fn scan(&self, visitor: &mut Visitor<'_>) -> Result<ScanSummary> {
        self.scan_range(0..u64::MAX, visitor)
    }

    /// Row counts of the physical pieces (files) this source is made of, if any.
    fn natural_boundaries(&self) -> Result<Option<Vec<u64>>> {
        Ok(None)
    }
}

/// In-memory table, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    x: Vec<f64>,
    y: Vec<f64>,
}

impl Dataset {
    pub fn new(dim: usize, x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("covariate dimension must be positive".into()));
        }
        if x.len() != dim * y.len() {
            return Err(Error::DimensionMismatch {
                expected: dim * y.len(),
                found: x.len(),
            });
        }
        Ok(Dataset { dim, x, y })
    }

    pub fn from_rows<I>(rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = (Vec<f64>, f64)>,
    {
        let mut dim = None;
        let mut x = Vec::new();
        let mut y = Vec::new();
        for (row, resp) in rows {
            let d = *dim.get_or_insert(row.len());
            if row.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: row.len(),
                });
            }
            x.extend_from_slice(&row);
            y.push(resp);
        }
        Dataset::new(dim.unwrap_or(0), x, y)
    }

    /// Reads a whole source into memory.
    pub fn collect(source: &dyn RecordSource) -> Result<Self> {
        let dim = source.dim();
        let mut x = Vec::new();
        let mut y = Vec::new();
        source.scan(&mut |r| {
            x.extend_from_slice(r.x);
            y.push(r.y);
            Ok(())
        })?;
        Dataset::new(dim, x, y)
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn row(&self, i: usize) -> (&[f64], f64) {
        (&self.x[i * self.dim..(i + 1) * self.dim], self.y[i])
    }

    pub fn rows(&self) -> impl Iterator<Item = (&[f64], f64)> + '_ {
        self.x.chunks_exact(self.dim).zip(self.y.iter().copied())
    }

    pub fn responses(&self) -> &[f64] {
        &self.y
    }

    /// Applies `y -> scale * y + shift` in place.
    pub fn transform_response(&mut self, t: ResponseTransform) {
        for y in &mut self.y {
            *y = t.apply(*y);
        }
    }
}

impl RecordSource for Dataset {
    fn dim(&self) -> usize {
        self.dim
    }

    fn count(&self) -> Result<u64> {
        Ok(self.y.len() as u64)
    }

    fn scan_range(&self, range: Range<u64>, visitor: &mut Visitor<'_>) -> Result<ScanSummary> {
        let n = self.y.len() as u64;
        let start = range.start.min(n);
        let end = range.end.min(n);
        for i in start..end {
            let (x, y) = self.row(i as usize);
            visitor(RecordRef { index: i, x, y })?;
        }
        Ok(ScanSummary {
            rows: end.saturating_sub(start),
            blocks: u64::from(end > start),
        })
    }
}

/// Affine response map `y -> scale * y + shift`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResponseTransform {
    pub scale: f64,
    pub shift: f64,
}

impl ResponseTransform {
    pub fn shift(shift: f64) -> Self {
        ResponseTransform { scale: 1.0, shift }
    }

    #[inline]
    pub fn apply(&self, y: f64) -> f64 {
        self.scale * y + self.shift
    }
}

/// Which CSV columns feed the model. The default reads y from column 0.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub y_col: usize,
    /// Covariate columns; `None` means every column except `y_col`, in order.
    pub x_cols: Option<Vec<usize>>,
    /// Prepend a constant 1 covariate.
    pub intercept: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvOptions {
    pub schema: Schema,
    pub block_size: usize,
    pub has_header: bool,
    pub transform: Option<ResponseTransform>,
}

impl Default for CsvOptions {
    fn default() -> Self {
        CsvOptions {
            schema: Schema::default(),
            block_size: DEFAULT_BLOCK_SIZE,
            has_header: false,
            transform: None,
        }
    }
}

/// Headerless (by default) numeric CSV, possibly split over several files that
/// are read as one stream in the given order.
#[derive(Debug)]
pub struct CsvSource {
    files: Vec<PathBuf>,
    options: CsvOptions,
    arity: usize,
    x_cols: Vec<usize>,
    counts: OnceLock<Vec<u64>>,
}

impl CsvSource {
    pub fn open<P: AsRef<Path>>(files: &[P], options: CsvOptions) -> Result<Self> {
        if files.is_empty() {
            return Err(Error::Config("no input files".into()));
        }
        if options.block_size == 0 {
            return Err(Error::Config("block size must be positive".into()));
        }
        let files: Vec<PathBuf> = files.iter().map(|f| f.as_ref().to_path_buf()).collect();
        let arity = first_arity(&files, options.has_header)?;
        let schema = &options.schema;
        if schema.y_col >= arity {
            return Err(Error::Schema {
                file: files[0].clone(),
                line: 1,
                message: format!(
                    "response column {} but rows have {arity} fields",
                    schema.y_col
                ),
            });
        }
        let x_cols = match &schema.x_cols {
            Some(cols) => {
                if let Some(&bad) = cols.iter().find(|&&c| c >= arity) {
                    return Err(Error::Schema {
                        file: files[0].clone(),
                        line: 1,
                        message: format!("covariate column {bad} but rows have {arity} fields"),
                    });
                }
                cols.clone()
            }
            None => (0..arity).filter(|&c| c != schema.y_col).collect(),
        };
        if x_cols.is_empty() && !schema.intercept {
            return Err(Error::Config("no covariate columns selected".into()));
        }
        Ok(CsvSource {
            files,
            options,
            arity,
            x_cols,
            counts: OnceLock::new(),
        })
    }

    pub fn files(&self) -> &[PathBuf] {
        &self.files
    }

    pub fn options(&self) -> &CsvOptions {
        &self.options
    }

    fn reader(&self, file: &Path) -> Result<csv::Reader<BufReader<File>>> {
        let f = File::open(file).map_err(|source| Error::Open {
            file: file.to_path_buf(),
            source,
        })?;
        Ok(csv::ReaderBuilder::new()
            .has_headers(self.options.has_header)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(BufReader::with_capacity(1 << 16, f)))
    }

    fn file_counts(&self) -> Result<&[u64]> {
        if let Some(c) = self.counts.get() {
            return Ok(c);
        }
        let mut counts = Vec::with_capacity(self.files.len());
        for file in &self.files {
            let mut rdr = self.reader(file)?;
            let mut rec = csv::ByteRecord::new();
            let mut n = 0u64;
            while rdr
                .read_byte_record(&mut rec)
                .map_err(|e| csv_err(file, e))?
            {
                if !is_blank(&rec) {
                    n += 1;
                }
            }
            counts.push(n);
        }
        Ok(self.counts.get_or_init(|| counts))
    }
}

fn csv_err(file: &Path, source: csv::Error) -> Error {
    Error::Csv {
        file: file.to_path_buf(),
        source,
    }
}

fn is_blank(rec: &csv::ByteRecord) -> bool {
    rec.len() == 1 && rec[0].is_empty()
}

fn first_arity(files: &[PathBuf], has_header: bool) -> Result<usize> {
    for file in files {
        let f = File::open(file).map_err(|source| Error::Open {
            file: file.to_path_buf(),
            source,
        })?;
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(has_header)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(BufReader::new(f));
        let mut rec = csv::ByteRecord::new();
        while rdr
            .read_byte_record(&mut rec)
            .map_err(|e| csv_err(file, e))?
        {
            if !is_blank(&rec) {
                return Ok(rec.len());
            }
        }
    }
    Err(Error::Schema {
        file: files[0].clone(),
        line: 0,
        message: "input contains no data rows".into(),
    })
}

fn parse_field(rec: &csv::ByteRecord, col: usize, file: &Path, line: u64) -> Result<f64> {
    let raw = &rec[col];
    std::str::from_utf8(raw)
        .ok()
        .and_then(|s| s.parse::<f64>().ok())
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::Parse {
            file: file.to_path_buf(),
            line,
            field: col,
            value: String::from_utf8_lossy(raw).into_owned(),
        })
}

impl RecordSource for CsvSource {
    fn dim(&self) -> usize {
        self.x_cols.len() + usize::from(self.options.schema.intercept)
    }

    fn count(&self) -> Result<u64> {
        Ok(self.file_counts()?.iter().sum())
    }

    fn natural_boundaries(&self) -> Result<Option<Vec<u64>>> {
        Ok(Some(self.file_counts()?.to_vec()))
    }

    fn scan_range(&self, range: Range<u64>, visitor: &mut Visitor<'_>) -> Result<ScanSummary> {
        let dim = self.dim();
        let width = dim + 1;
        let block_size = self.options.block_size;
        let intercept = self.options.schema.intercept;
        let y_col = self.options.schema.y_col;
        let transform = self.options.transform;
        let known_counts = self.counts.get();

        let mut block: Vec<f64> = Vec::with_capacity(block_size.min(1 << 20) * width);
        let mut block_start = 0u64;
        let mut summary = ScanSummary::default();
        let mut index = 0u64;

        let mut flush =
            |block: &mut Vec<f64>, first: u64, summary: &mut ScanSummary| -> Result<()> {
                if block.is_empty() {
                    return Ok(());
                }
                for (k, row) in block.chunks_exact(width).enumerate() {
                    visitor(RecordRef {
                        index: first + k as u64,
                        x: &row[1..],
                        y: row[0],
                    })?;
                }
                summary.rows += (block.len() / width) as u64;
                summary.blocks += 1;
                block.clear();
                Ok(())
            };

        'files: for (fi, file) in self.files.iter().enumerate() {
            if index >= range.end {
                break;
            }
            if let Some(counts) = known_counts {
                if index + counts[fi] <= range.start {
                    index += counts[fi];
                    continue;
                }
            }
            let mut rdr = self.reader(file)?;
            let mut rec = csv::ByteRecord::new();
            while rdr
                .read_byte_record(&mut rec)
                .map_err(|e| csv_err(file, e))?
            {
                if is_blank(&rec) {
                    continue;
                }
                if index >= range.end {
                    break 'files;
                }
                if index < range.start {
                    index += 1;
                    continue;
                }
                let line = rec.position().map(|p| p.line()).unwrap_or(0);
                if rec.len() != self.arity {
                    return Err(Error::Schema {
                        file: file.clone(),
                        line,
                        message: format!("expected {} fields, found {}", self.arity, rec.len()),
                    });
                }
                if block.is_empty() {
                    block_start = index;
                }
                let mut y = parse_field(&rec, y_col, file, line)?;
                if let Some(t) = transform {
                    y = t.apply(y);
                }
                block.push(y);
                if intercept {
                    block.push(1.0);
                }
                for &c in &self.x_cols {
                    block.push(parse_field(&rec, c, file, line)?);
                }
                index += 1;
                if block.len() == block_size * width {
                    flush(&mut block, block_start, &mut summary)?;
                }
            }
        }
        flush(&mut block, block_start, &mut summary)?;
        Ok(summary)
    }
}

/// A contiguous index range of a parent source, standing in for one machine.
#[derive(Clone)]
pub struct Shard {
    pub id: usize,
    source: Arc<dyn RecordSource>,
    range: Range<u64>,
}

impl Shard {
    pub fn new(id: usize, source: Arc<dyn RecordSource>, range: Range<u64>) -> Self {
        Shard { id, source, range }
    }

    pub fn range(&self) -> Range<u64> {
        self.range.clone()
    }

    pub fn len(&self) -> u64 {
        self.range.end - self.range.start
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Debug for Shard {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Shard")
            .field("id", &self.id)
            .field("range", &self.range)
            .finish()
    }
}

impl RecordSource for Shard {
    fn dim(&self) -> usize {
        self.source.dim()
    }

    fn count(&self) -> Result<u64> {
        Ok(self.len())
    }

    fn index_range(&self) -> Result<Range<u64>> {
        Ok(self.range.clone())
    }

    fn scan_range(&self, range: Range<u64>, visitor: &mut Visitor<'_>) -> Result<ScanSummary> {
        let start = range.start.max(self.range.start);
        let end = range.end.min(self.range.end);
        if start >= end {
            return Ok(ScanSummary::default());
        }
        self.source.scan_range(start..end, visitor)
    }
}

/// Shards read back to back as one stream (indices stay global).
pub struct ShardSet<'a>(pub &'a [Shard]);

impl RecordSource for ShardSet<'_> {
    fn dim(&self) -> usize {
        self.0.first().map(|s| s.dim()).unwrap_or(0)
    }

    fn count(&self) -> Result<u64> {
        Ok(self.0.iter().map(Shard::len).sum())
    }

    fn scan_range(&self, range: Range<u64>, visitor: &mut Visitor<'_>) -> Result<ScanSummary> {
        let mut summary = ScanSummary::default();
        for shard in self.0 {
            summary = summary.merge(shard.scan_range(range.clone(), visitor)?);
        }
        Ok(summary)
    }
}

/// Splits a source into `k` contiguous shards covering it exactly once.
///
/// When the source consists of exactly `k` files the shards follow the file
/// boundaries; otherwise sizes differ by at most one, larger shards first.
pub fn partition_view(source: Arc<dyn RecordSource>, k: usize) -> Result<Vec<Shard>> {
    if k == 0 {
        return Err(Error::Config(
            "number of partitions must be at least 1".into(),
        ));
    }
    let n = source.count()?;
    if k as u64 > n {
        return Err(Error::Config(format!(
            "{k} partitions requested for {n} records"
        )));
    }
    let sizes: Vec<u64> = match source.natural_boundaries()? {
        Some(b) if b.len() == k && b.iter().all(|&c| c > 0) => b,
        _ => {
            let base = n / k as u64;
            let extra = n % k as u64;
            (0..k as u64).map(|j| base + u64::from(j < extra)).collect()
        }
    };
    let mut start = 0;
    Ok(sizes
        .into_iter()
        .enumerate()
        .map(|(j, len)| {
            let shard = Shard::new(j + 1, Arc::clone(&source), start..start + len);
            start += len;
            shard
        })
        .collect())
}
