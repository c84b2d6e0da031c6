//! Readers and writers for the on-disk formats. Every writer goes through
//! [`write_atomic`], so a failed run never leaves a half-written file.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::combine::CombinedModel;
use crate::decompose::DecompositionPlan;
use crate::design::LogLinearModel;
use crate::error::{Error, Result};
use crate::eval::RocPoint;
use crate::graph::{CliqueDecomposition, Graph};
use crate::importance::ImportanceMatrices;
use crate::pipeline::FittedModel;
use crate::schema::{Dataset, VariableSchema};
use crate::simulate::SimulatedModel;

/// Writes to a temporary file next to `path` and renames it into place.
pub fn write_atomic(path: &Path, body: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let tmp = tempfile::NamedTempFile::new_in(dir)?;
    {
        let mut w = BufWriter::new(tmp.as_file());
        body(&mut w)?;
        w.flush()?;
    }
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        writeln!(w)?;
        Ok(())
    })
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let f = open(path)?;
    Ok(serde_json::from_reader(BufReader::new(f))?)
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::validation(format!("cannot open {}: {e}", path.display())))
}

fn parse_level(field: &str, line: usize, name: &str) -> Result<usize> {
    field
        .trim()
        .parse::<usize>()
        .map_err(|_| Error::validation(format!("line {line}: {field:?} is not a level code for {name:?}")))
}

/// Sidecar schema: one `name,levels` pair per line; an optional header line
/// `name,levels` and blank lines are ignored.
pub fn read_schema(path: &Path) -> Result<VariableSchema> {
    let mut names = Vec::new();
    let mut levels = Vec::new();
    for (i, line) in BufReader::new(open(path)?).lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || (i == 0 && line.eq_ignore_ascii_case("name,levels")) {
            continue;
        }
        let (name, k) = line
            .split_once(',')
            .ok_or_else(|| Error::validation(format!("schema line {}: expected name,levels", i + 1)))?;
        names.push(name.trim().to_string());
        levels.push(parse_level(k, i + 1, name.trim())?);
    }
    VariableSchema::new(names, levels)
}

pub fn write_schema(path: &Path, schema: &VariableSchema) -> Result<()> {
    write_atomic(path, |w| {
        writeln!(w, "name,levels")?;
        for (name, k) in schema.names().iter().zip(schema.levels()) {
            writeln!(w, "{name},{k}")?;
        }
        Ok(())
    })
}

/// Dataset CSV with a header of variable names and integer level codes.
/// With a sidecar schema the columns are matched by name; without one each
/// variable gets `max code + 1` levels (at least 2).
pub fn read_dataset(path: &Path, schema: Option<&VariableSchema>) -> Result<Dataset> {
    read_dataset_from(open(path)?, schema)
}

pub fn read_dataset_from(reader: impl Read, schema: Option<&VariableSchema>) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(Error::validation("dataset has no header"));
    }
    // position in the file of each schema variable
    let columns: Vec<usize> = match schema {
        Some(s) => {
            if s.len() != header.len() {
                return Err(Error::validation(format!(
                    "dataset has {} columns, schema has {} variables",
                    header.len(),
                    s.len()
                )));
            }
            s.names()
                .iter()
                .map(|n| {
                    header
                        .iter()
                        .position(|h| h == n)
                        .ok_or_else(|| Error::validation(format!("schema variable {n:?} missing from dataset")))
                })
                .collect::<Result<_>>()?
        }
        None => (0..header.len()).collect(),
    };
    let p = header.len();
    let mut codes: Vec<u16> = Vec::new();
    let mut max = vec![0usize; p];
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != p {
            return Err(Error::validation(format!("line {}: expected {p} fields, got {}", r + 2, rec.len())));
        }
        for &c in &columns {
            let x = parse_level(&rec[c], r + 2, &header[c])?;
            if x > u16::MAX as usize {
                return Err(Error::validation(format!("line {}: level {x} too large", r + 2)));
            }
            max[c] = max[c].max(x);
            codes.push(x as u16);
        }
    }
    let schema = match schema {
        Some(s) => s.clone(),
        None => VariableSchema::new(header, max.iter().map(|&m| (m + 1).max(2)).collect())?,
    };
    Dataset::from_codes(schema, codes)
}

pub fn write_dataset(path: &Path, data: &Dataset) -> Result<()> {
    write_atomic(path, |w| {
        writeln!(w, "{}", data.schema().names().join(","))?;
        let mut line = String::new();
        for row in data.rows() {
            line.clear();
            for (i, x) in row.iter().enumerate() {
                if i > 0 {
                    line.push(',');
                }
                line.push_str(&x.to_string());
            }
            line.push('\n');
            w.write_all(line.as_bytes())?;
        }
        Ok(())
    })
}

/// Importance CSV: header `matrix,variable,<names>`, then one row per
/// response variable for each of `M`, `R` and `Rtilde`.
pub fn write_importance(path: &Path, names: &[String], imp: &ImportanceMatrices) -> Result<()> {
    if names.len() != imp.len() {
        return Err(Error::validation("names do not match the importance matrix"));
    }
    write_atomic(path, |w| {
        writeln!(w, "matrix,variable,{}", names.join(","))?;
        let fmt_row = |v: &mut dyn Iterator<Item = String>| v.collect::<Vec<_>>().join(",");
        for (i, name) in names.iter().enumerate() {
            writeln!(w, "M,{name},{}", fmt_row(&mut imp.m[i].iter().map(|x| x.to_string())))?;
        }
        for (i, name) in names.iter().enumerate() {
            writeln!(w, "R,{name},{}", fmt_row(&mut imp.r[i].iter().map(|x| x.to_string())))?;
        }
        for (i, name) in names.iter().enumerate() {
            writeln!(w, "Rtilde,{name},{}", fmt_row(&mut imp.rtilde[i].iter().map(|x| x.to_string())))?;
        }
        Ok(())
    })
}

/// Reads an importance CSV back. Returns the variable names and the
/// matrices; `R` and `M` may be absent, in which case only `rtilde` is set.
pub fn read_importance(path: &Path) -> Result<(Vec<String>, ImportanceMatrices)> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(open(path)?);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header.len() < 4 || header[0] != "matrix" || header[1] != "variable" {
        return Err(Error::validation("importance CSV must start with matrix,variable and at least two variables"));
    }
    let names: Vec<String> = header[2..].to_vec();
    let p = names.len();
    let mut m = Vec::new();
    let mut r = Vec::new();
    let mut rtilde = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != p + 2 {
            return Err(Error::validation(format!("importance line {}: expected {} fields", line + 2, p + 2)));
        }
        let expect = match rec[0].trim() {
            "M" => m.len(),
            "R" => r.len(),
            "Rtilde" => rtilde.len(),
            other => return Err(Error::validation(format!("unknown matrix {other:?}"))),
        };
        if expect >= p || rec[1].trim() != names[expect] {
            return Err(Error::validation(format!("importance line {}: rows out of order", line + 2)));
        }
        let vals: Vec<f64> = rec
            .iter()
            .skip(2)
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|_| Error::validation(format!("importance line {}: bad number {f:?}", line + 2)))
            })
            .collect::<Result<_>>()?;
        match &rec[0] {
            "M" => m.push(vals),
            "R" => r.push(vals.iter().map(|&x| x as usize).collect()),
            _ => rtilde.push(vals),
        }
    }
    if rtilde.len() != p {
        return Err(Error::validation("importance CSV lacks a complete Rtilde block"));
    }
    for (name, block) in [("M", m.len()), ("R", r.len())] {
        if block != 0 && block != p {
            return Err(Error::validation(format!("importance CSV has an incomplete {name} block")));
        }
    }
    Ok((names, ImportanceMatrices { m, r, rtilde }))
}

/// A plan together with the variable names it refers to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanDocument {
    pub variables: Vec<String>,
    #[serde(flatten)]
    pub plan: DecompositionPlan,
}

/// Any JSON document that carries a model and a decomposition covering it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelDocument {
    Fitted(Box<FittedModel>),
    Combined(Box<CombinedModel>),
    Simulated(Box<SimulatedModel>),
}

impl ModelDocument {
    pub fn model(&self) -> &LogLinearModel {
        match self {
            ModelDocument::Fitted(f) => f.model(),
            ModelDocument::Combined(c) => &c.model,
            ModelDocument::Simulated(s) => &s.model,
        }
    }

    pub fn decomposition(&self) -> &CliqueDecomposition {
        match self {
            ModelDocument::Fitted(f) => &f.combined.decomposition,
            ModelDocument::Combined(c) => &c.decomposition,
            ModelDocument::Simulated(s) => &s.decomposition,
        }
    }
}

pub fn read_model(path: &Path) -> Result<ModelDocument> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::validation(format!("cannot open {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::validation(format!("{} is not a model document: {e}", path.display())))
}

fn vertex(token: &str, schema: &VariableSchema, line: usize) -> Result<usize> {
    if let Some(i) = schema.index_of(token) {
        return Ok(i);
    }
    match token.parse::<usize>() {
        Ok(i) if i < schema.len() => Ok(i),
        _ => Err(Error::validation(format!("edge list line {line}: unknown vertex {token:?}"))),
    }
}

/// Edge list: one `u v` pair per line, by name or 0-based index. Blank lines
/// and `#` comments are ignored; names take precedence over indices.
pub fn read_edge_list(path: &Path, schema: &VariableSchema) -> Result<Graph> {
    let mut edges = Vec::new();
    for (i, line) in BufReader::new(open(path)?).lines().enumerate() {
        let line = line?;
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let toks: Vec<&str> = body.split(|c: char| c.is_whitespace() || c == ',').filter(|t| !t.is_empty()).collect();
        if toks.len() != 2 {
            return Err(Error::validation(format!("edge list line {}: expected two vertices", i + 1)));
        }
        let (u, v) = (vertex(toks[0], schema, i + 1)?, vertex(toks[1], schema, i + 1)?);
        if u == v {
            return Err(Error::validation(format!("edge list line {}: self loop", i + 1)));
        }
        edges.push((u, v));
    }
    Ok(Graph::from_edges(schema.len(), &edges))
}

pub fn write_edge_list(path: &Path, graph: &Graph, schema: &VariableSchema) -> Result<()> {
    write_atomic(path, |w| {
        for (u, v) in graph.edges() {
            writeln!(w, "{} {}", schema.names()[u], schema.names()[v])?;
        }
        Ok(())
    })
}

pub fn write_roc(path: &Path, roc: &[RocPoint]) -> Result<()> {
    write_atomic(path, |w| {
        writeln!(w, "threshold,fpr,tpr,edges")?;
        for r in roc {
            writeln!(w, "{},{},{},{}", r.threshold, r.fpr, r.tpr, r.edges)?;
        }
        Ok(())
    })
}

pub fn read_roc(path: &Path) -> Result<Vec<RocPoint>> {
    let mut rdr = csv::Reader::from_reader(open(path)?);
    let mut out = Vec::new();
    for rec in rdr.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}

/// Cell list CSV: a header naming a subset of the schema variables and one
/// cell per row. Returns the variable indices (sorted) and the cells in that
/// order.
pub fn read_cells(path: &Path, schema: &VariableSchema) -> Result<(Vec<usize>, Vec<Vec<usize>>)> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(open(path)?);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let cols: Vec<usize> = header
        .iter()
        .map(|h| schema.index_of(h).ok_or_else(|| Error::validation(format!("unknown variable {h:?} in cell list"))))
        .collect::<Result<_>>()?;
    let mut order: Vec<usize> = (0..cols.len()).collect();
    order.sort_by_key(|&i| cols[i]);
    let vars: Vec<usize> = order.iter().map(|&i| cols[i]).collect();
    if vars.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::validation("cell list names a variable twice"));
    }
    let mut cells = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != cols.len() {
            return Err(Error::validation(format!("cell list line {}: wrong number of fields", r + 2)));
        }
        let cell: Vec<usize> = order
            .iter()
            .map(|&i| {
                let x = parse_level(&rec[i], r + 2, &header[i])?;
                if x >= schema.levels()[cols[i]] {
                    return Err(Error::validation(format!("cell list line {}: level {x} out of range for {:?}", r + 2, header[i])));
                }
                Ok(x)
            })
            .collect::<Result<_>>()?;
        cells.push(cell);
    }
    Ok((vars, cells))
}

/// Probabilities CSV: the cell columns followed by `probability` and
/// `log_probability`.
pub fn write_probabilities(
    path: &Path,
    schema: &VariableSchema,
    vars: &[usize],
    cells: &[Vec<usize>],
    probs: &[f64],
) -> Result<()> {
    write_atomic(path, |w| {
        let names: Vec<&str> = vars.iter().map(|&v| schema.names()[v].as_str()).collect();
        writeln!(w, "{},probability,log_probability", names.join(","))?;
        for (cell, p) in cells.iter().zip(probs) {
            let c: Vec<String> = cell.iter().map(|x| x.to_string()).collect();
            writeln!(w, "{},{},{}", c.join(","), p, p.ln())?;
        }
        Ok(())
    })
}
