//! Text file formats: matrix TSV, long-format tensor TSV, sample metadata
//! JSON. Numbers are written with 17 significant digits so that every
//! `f64` survives a save/load cycle bit for bit.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{BulkMatrix, CtsTensor, SampleMeta, SampleMetaTable};
use crate::error::{Error, Result};

/// Render a float with 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Write a file by writing a sibling temp file and renaming it into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::Invalid(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(
        ".{}.tmp{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(contents).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

pub(crate) fn parse_f64(path: &Path, line: usize, field: &str) -> Result<f64> {
    let v: f64 = field
        .trim()
        .parse()
        .map_err(|_| parse_err(path, line, format!("cannot parse `{field}` as a number")))?;
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("{}:{line}", path.display())));
    }
    Ok(v)
}

/// Non-empty lines paired with 1-based line numbers.
pub(crate) fn tsv_lines(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r').split('\t').collect()))
}

/// Row-labelled, column-labelled numeric matrix from TSV.
pub struct LabelledMatrix {
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    pub values: DMatrix<f64>,
}

pub fn read_matrix_tsv(path: &Path) -> Result<LabelledMatrix> {
    let text = read_text(path)?;
    let mut lines = tsv_lines(&text);
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "missing header"))?;
    if header.len() < 2 {
        return Err(parse_err(
            path,
            1,
            "header needs a row label column and at least one column",
        ));
    }
    let cols: Vec<String> = header[1..].iter().map(|s| s.to_string()).collect();
    let mut rows = Vec::new();
    let mut data = Vec::new();
    for (ln, fields) in lines {
        if fields.len() != cols.len() + 1 {
            return Err(parse_err(
                path,
                ln,
                format!("expected {} fields, found {}", cols.len() + 1, fields.len()),
            ));
        }
        rows.push(fields[0].to_string());
        for f in &fields[1..] {
            data.push(parse_f64(path, ln, f)?);
        }
    }
    let values = DMatrix::from_row_slice(rows.len(), cols.len(), &data);
    Ok(LabelledMatrix { rows, cols, values })
}

pub fn render_matrix_tsv(
    corner: &str,
    rows: &[String],
    cols: &[String],
    values: &DMatrix<f64>,
) -> String {
    let mut out = String::new();
    out.push_str(corner);
    for c in cols {
        out.push('\t');
        out.push_str(c);
    }
    out.push('\n');
    for (r, name) in rows.iter().enumerate() {
        out.push_str(name);
        for c in 0..cols.len() {
            out.push('\t');
            out.push_str(&fmt_f64(values[(r, c)]));
        }
        out.push('\n');
    }
    out
}

pub fn load_bulk_matrix(path: &Path) -> Result<BulkMatrix> {
    let m = read_matrix_tsv(path)?;
    BulkMatrix::new(m.rows, m.cols, m.values)
}

pub fn save_bulk_matrix(bulk: &BulkMatrix, path: &Path) -> Result<()> {
    let text = render_matrix_tsv("gene", bulk.genes(), bulk.samples(), bulk.values());
    write_atomic(path, text.as_bytes())
}

/// File paths of the mean and variance tables for a tensor saved under `prefix`.
pub fn cts_paths(prefix: &Path) -> (PathBuf, PathBuf) {
    let name = prefix
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "cts".into());
    (
        prefix.with_file_name(format!("{name}.mean.tsv")),
        prefix.with_file_name(format!("{name}.variance.tsv")),
    )
}

const TENSOR_HEADER: &str = "gene\tcell_type\tsample\tvalue";

fn render_long(t: &CtsTensor, values: impl Fn(usize, usize, usize) -> f64) -> String {
    let (g_n, c_n, n_n) = t.shape();
    let mut out = String::with_capacity(64 * g_n * c_n * n_n + 32);
    out.push_str(TENSOR_HEADER);
    out.push('\n');
    for g in 0..g_n {
        for c in 0..c_n {
            for i in 0..n_n {
                out.push_str(&t.genes()[g]);
                out.push('\t');
                out.push_str(&t.cell_types()[c]);
                out.push('\t');
                out.push_str(&t.samples()[i]);
                out.push('\t');
                out.push_str(&fmt_f64(values(g, c, i)));
                out.push('\n');
            }
        }
    }
    out
}

/// Write `<prefix>.mean.tsv` and `<prefix>.variance.tsv` in long format.
pub fn save_cts_tensor(tensor: &CtsTensor, prefix: &Path) -> Result<()> {
    let (mean_path, var_path) = cts_paths(prefix);
    write_atomic(
        &mean_path,
        render_long(tensor, |g, c, i| tensor.mean_at(g, c, i)).as_bytes(),
    )?;
    write_atomic(
        &var_path,
        render_long(tensor, |g, c, i| tensor.variance_at(g, c, i)).as_bytes(),
    )
}

struct LongTable {
    genes: Vec<String>,
    cell_types: Vec<String>,
    samples: Vec<String>,
    values: Vec<f64>,
}

fn read_long(path: &Path) -> Result<LongTable> {
    let text = read_text(path)?;
    let mut lines = tsv_lines(&text);
    match lines.next() {
        Some((_, h)) if h.join("\t") == TENSOR_HEADER => {}
        _ => {
            return Err(parse_err(
                path,
                1,
                format!("expected header `{TENSOR_HEADER}`"),
            ))
        }
    }
    fn intern(ids: &mut Vec<String>, index: &mut HashMap<String, usize>, key: &str) -> usize {
        if let Some(&i) = index.get(key) {
            return i;
        }
        ids.push(key.to_string());
        index.insert(key.to_string(), ids.len() - 1);
        ids.len() - 1
    }
    let (mut genes, mut types, mut samples) = (Vec::new(), Vec::new(), Vec::new());
    let (mut gi, mut ci, mut si) = (HashMap::new(), HashMap::new(), HashMap::new());
    let mut entries = Vec::new();
    for (ln, f) in lines {
        if f.len() != 4 {
            return Err(parse_err(
                path,
                ln,
                format!("expected 4 fields, found {}", f.len()),
            ));
        }
        let g = intern(&mut genes, &mut gi, f[0]);
        let c = intern(&mut types, &mut ci, f[1]);
        let s = intern(&mut samples, &mut si, f[2]);
        entries.push((ln, g, c, s, parse_f64(path, ln, f[3])?));
    }
    let (g_n, c_n, n_n) = (genes.len(), types.len(), samples.len());
    let mut values = vec![f64::NAN; g_n * c_n * n_n];
    let mut filled = vec![false; values.len()];
    for (ln, g, c, s, v) in entries {
        let k = (g * c_n + c) * n_n + s;
        if filled[k] {
            return Err(parse_err(
                path,
                ln,
                "duplicate (gene, cell_type, sample) entry",
            ));
        }
        filled[k] = true;
        values[k] = v;
    }
    if filled.iter().any(|f| !f) {
        return Err(parse_err(
            path,
            0,
            "tensor table does not cover the full gene x cell type x sample grid",
        ));
    }
    Ok(LongTable {
        genes,
        cell_types: types,
        samples,
        values,
    })
}

pub fn load_cts_tensor(prefix: &Path) -> Result<CtsTensor> {
    let (mean_path, var_path) = cts_paths(prefix);
    let mean = read_long(&mean_path)?;
    let var = read_long(&var_path)?;
    if mean.genes != var.genes || mean.cell_types != var.cell_types || mean.samples != var.samples {
        return Err(Error::Dimension(format!(
            "{} and {} have different axes",
            mean_path.display(),
            var_path.display()
        )));
    }
    CtsTensor::new(
        mean.genes,
        mean.cell_types,
        mean.samples,
        mean.values,
        var.values,
    )
}

#[derive(Debug, Serialize, Deserialize)]
struct MetaRecord {
    sample_id: String,
    proportions: serde_json::Map<String, serde_json::Value>,
    #[serde(default)]
    bulk_cov: Vec<f64>,
    #[serde(default)]
    cts_cov: Vec<f64>,
}

/// Parse sample metadata JSON. The cell-type axis follows the key order of
/// the first record; every record must carry the same cell types.
pub fn load_sample_metas(path: &Path) -> Result<SampleMetaTable> {
    let records: Vec<MetaRecord> = read_json(path)?;
    let first = records
        .first()
        .ok_or_else(|| Error::Empty(format!("{} has no samples", path.display())))?;
    let cell_types: Vec<String> = first.proportions.keys().cloned().collect();
    let mut metas = Vec::with_capacity(records.len());
    for r in records {
        if r.proportions.len() != cell_types.len() {
            return Err(Error::Dimension(format!(
                "sample {} lists {} cell types, expected {}",
                r.sample_id,
                r.proportions.len(),
                cell_types.len()
            )));
        }
        let mut w = Vec::with_capacity(cell_types.len());
        for ct in &cell_types {
            let v = r
                .proportions
                .get(ct)
                .and_then(|v| v.as_f64())
                .ok_or_else(|| {
                    Error::Invalid(format!(
                        "sample {} lacks a numeric proportion for {ct}",
                        r.sample_id
                    ))
                })?;
            w.push(v);
        }
        metas.push(SampleMeta::new(
            r.sample_id,
            DVector::from_vec(w),
            DVector::from_vec(r.bulk_cov),
            DVector::from_vec(r.cts_cov),
        )?);
    }
    SampleMetaTable::new(cell_types, metas)
}

pub fn save_sample_metas(table: &SampleMetaTable, path: &Path) -> Result<()> {
    let records: Vec<MetaRecord> = table
        .metas()
        .iter()
        .map(|m| MetaRecord {
            sample_id: m.sample_id().to_string(),
            proportions: table
                .cell_types()
                .iter()
                .zip(m.proportions().iter())
                .map(|(ct, w)| (ct.clone(), serde_json::Value::from(*w)))
                .collect(),
            bulk_cov: m.bulk_cov().iter().copied().collect(),
            cts_cov: m.cts_cov().iter().copied().collect(),
        })
        .collect();
    write_json(path, &records)
}
