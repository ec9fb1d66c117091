//! Reading datasets from CSV and writing them back.
//!
//! Input is a header row followed by one observation per line. Response
//! columns default to `y1..yP`. Covariate columns are numeric when every
//! value parses as a number and factors otherwise; a `:factor` suffix on a
//! column reference forces a factor.

use std::io::{Read, Write};
use std::path::Path;

use log::warn;

use crate::dataset::{build_design, CompositionDataset, Term};
use crate::dirichlet::Composition;
use crate::error::{Error, Result};

/// Rows whose raw response sum is further than this from one are
/// renormalized with a warning.
pub const SUM_WARN_TOL: f64 = 1e-6;

/// A covariate reference such as `x2` or `level:factor`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnRef {
    pub name: String,
    pub factor: bool,
}

impl ColumnRef {
    pub fn parse(s: &str) -> Self {
        match s.trim().strip_suffix(":factor") {
            Some(name) => Self { name: name.to_string(), factor: true },
            None => Self { name: s.trim().to_string(), factor: false },
        }
    }
}

/// Which columns play which role.
#[derive(Debug, Clone, Default)]
pub struct LoadSpec {
    /// Response columns; `None` picks `y1, y2, …` from the header.
    pub response: Option<Vec<String>>,
    pub mean_cols: Vec<ColumnRef>,
    pub precision_cols: Vec<ColumnRef>,
    pub group: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Loaded {
    pub dataset: CompositionDataset,
    pub renormalized_rows: usize,
    pub replaced_parts: usize,
    pub warnings: Vec<String>,
}

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
    lines: Vec<u64>,
}

impl Table {
    fn column(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Config(format!("unknown column `{name}`")))
    }

    fn values(&self, k: usize) -> Vec<String> {
        self.rows.iter().map(|r| r[k].clone()).collect()
    }
}

fn read_table<R: Read>(reader: R) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(Error::Parse { line: 1, message: "missing header row".into() });
    }
    let mut rows = Vec::new();
    let mut lines = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            Error::Parse { line, message: e.to_string() }
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != header.len() {
            return Err(Error::Parse {
                line,
                message: format!("{} fields, expected {}", rec.len(), header.len()),
            });
        }
        rows.push(rec.iter().map(str::to_string).collect());
        lines.push(line);
    }
    if rows.is_empty() {
        return Err(Error::DegenerateData("input has a header but no rows".into()));
    }
    Ok(Table { header, rows, lines })
}

fn default_responses(header: &[String]) -> Result<Vec<String>> {
    let names: Vec<String> = (1..)
        .map(|j| format!("y{j}"))
        .take_while(|n| header.contains(n))
        .collect();
    if names.len() < 2 {
        return Err(Error::Config(
            "no response columns y1, y2, … found; name them with --response".into(),
        ));
    }
    Ok(names)
}

fn term(table: &Table, col: &ColumnRef) -> Result<Term> {
    let k = table.column(&col.name)?;
    let raw = table.values(k);
    if !col.factor {
        let parsed: Option<Vec<f64>> = raw.iter().map(|v| v.parse::<f64>().ok().filter(|x| x.is_finite())).collect();
        if let Some(values) = parsed {
            return Ok(Term::numeric(col.name.clone(), values));
        }
    }
    Ok(Term::factor_from_labels(col.name.clone(), &raw))
}

/// Loads a dataset from any reader.
pub fn read_dataset_from<R: Read>(reader: R, spec: &LoadSpec) -> Result<Loaded> {
    let table = read_table(reader)?;
    let response = match &spec.response {
        Some(r) if r.len() >= 2 => r.clone(),
        Some(_) => return Err(Error::Config("at least two response columns are needed".into())),
        None => default_responses(&table.header)?,
    };
    let resp_idx = response.iter().map(|r| table.column(r)).collect::<Result<Vec<_>>>()?;
    let mut warnings = Vec::new();
    let mut renormalized = 0;
    let mut replaced = 0;
    let mut y = Vec::with_capacity(table.rows.len());
    for (row, &line) in table.rows.iter().zip(&table.lines) {
        let raw = resp_idx
            .iter()
            .zip(&response)
            .map(|(&k, name)| match row[k].parse::<f64>() {
                Ok(v) if v.is_finite() && v >= 0.0 => Ok(v),
                _ => Err(Error::Parse {
                    line,
                    message: format!("response `{name}` value `{}` is not a non-negative number", row[k]),
                }),
            })
            .collect::<Result<Vec<f64>>>()?;
        let sum: f64 = raw.iter().sum();
        if (sum - 1.0).abs() > SUM_WARN_TOL {
            renormalized += 1;
            if sum > 0.0 {
                warnings.push(format!("line {line}: responses sum to {sum}; renormalized"));
            }
        }
        let (c, k) = Composition::with_zero_replacement(&raw)
            .map_err(|e| Error::Parse { line, message: e.to_string() })?;
        replaced += k;
        y.push(c);
    }
    if replaced > 0 {
        warnings.push(format!("{replaced} response parts below the zero threshold were replaced"));
    }
    for w in &warnings {
        warn!("{w}");
    }
    let n = y.len();
    let mean_terms = spec.mean_cols.iter().map(|c| term(&table, c)).collect::<Result<Vec<_>>>()?;
    let prec_terms = spec.precision_cols.iter().map(|c| term(&table, c)).collect::<Result<Vec<_>>>()?;
    let group = match &spec.group {
        Some(g) => {
            let labels = table.values(table.column(g)?);
            match Term::factor_from_labels(g.clone(), &labels) {
                Term::Factor { levels, codes, .. } => Some((codes, levels)),
                Term::Numeric { .. } => unreachable!("factor_from_labels builds a factor"),
            }
        }
        None => None,
    };
    let dataset = CompositionDataset::new(
        y,
        response,
        build_design(&mean_terms, n)?,
        build_design(&prec_terms, n)?,
        group,
    )?;
    Ok(Loaded { dataset, renormalized_rows: renormalized, replaced_parts: replaced, warnings })
}

pub fn read_dataset(path: &Path, spec: &LoadSpec) -> Result<Loaded> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    read_dataset_from(file, spec)
}

/// Raw covariate values for writing.
#[derive(Debug, Clone, PartialEq)]
pub enum ColumnData {
    Numeric(Vec<f64>),
    Labels(Vec<String>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Column {
    pub name: String,
    pub data: ColumnData,
}

impl Column {
    pub fn numeric(name: impl Into<String>, v: Vec<f64>) -> Self {
        Self { name: name.into(), data: ColumnData::Numeric(v) }
    }

    pub fn labels(name: impl Into<String>, v: Vec<String>) -> Self {
        Self { name: name.into(), data: ColumnData::Labels(v) }
    }

    fn len(&self) -> usize {
        match &self.data {
            ColumnData::Numeric(v) => v.len(),
            ColumnData::Labels(v) => v.len(),
        }
    }

    fn cell(&self, i: usize) -> String {
        match &self.data {
            ColumnData::Numeric(v) => v[i].to_string(),
            ColumnData::Labels(v) => v[i].clone(),
        }
    }
}

/// Writes responses followed by covariate columns. Numbers use the
/// shortest representation that parses back to the same value.
pub fn write_table<W: Write>(
    out: W,
    response_names: &[String],
    responses: &[Composition],
    columns: &[Column],
) -> Result<()> {
    let n = responses.len();
    if let Some(c) = columns.iter().find(|c| c.len() != n) {
        return Err(Error::dim(format!("column `{}` has {} rows, expected {n}", c.name, c.len())));
    }
    let mut w = csv::Writer::from_writer(out);
    let header: Vec<&str> = response_names
        .iter()
        .map(String::as_str)
        .chain(columns.iter().map(|c| c.name.as_str()))
        .collect();
    w.write_record(&header)?;
    for (i, y) in responses.iter().enumerate() {
        let rec: Vec<String> = y
            .parts()
            .iter()
            .map(f64::to_string)
            .chain(columns.iter().map(|c| c.cell(i)))
            .collect();
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_table_file(path: &Path, response_names: &[String], responses: &[Composition], columns: &[Column]) -> Result<()> {
    write_table(std::fs::File::create(path)?, response_names, responses, columns)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(mean: &[&str], prec: &[&str], group: Option<&str>) -> LoadSpec {
        LoadSpec {
            response: None,
            mean_cols: mean.iter().map(|s| ColumnRef::parse(s)).collect(),
            precision_cols: prec.iter().map(|s| ColumnRef::parse(s)).collect(),
            group: group.map(str::to_string),
        }
    }

    const SMALL: &str = "y1,y2,y3,pos,x,player\n\
        0.2,0.3,0.5,GD,1.5,p1\n\
        0.1,0.6,0.3,GK,2.5,p2\n\
        0.3,0.3,0.4,GD,3.0,p1\n\
        0.25,0.25,0.5,GK,0.5,p3\n";

    #[test]
    fn loads_roles_and_codings() {
        let l = read_dataset_from(SMALL.as_bytes(), &spec(&["pos"], &["x"], Some("player"))).unwrap();
        let ds = &l.dataset;
        assert_eq!((ds.n(), ds.p(), ds.q(), ds.r()), (4, 3, 2, 2));
        assert_eq!(ds.mean_design().names, vec!["pos[GD]", "pos[GK]"]);
        assert_eq!(ds.precision_design().names, vec!["(Intercept)", "x"]);
        assert_eq!(ds.group().unwrap(), &[0, 1, 0, 2]);
        assert_eq!(ds.group_labels(), &["p1", "p2", "p3"]);
        assert_eq!(l.renormalized_rows, 0);
    }

    #[test]
    fn factor_suffix_forces_factor() {
        let csv = "y1,y2,lvl\n0.5,0.5,1\n0.4,0.6,2\n0.3,0.7,2\n";
        let l = read_dataset_from(csv.as_bytes(), &spec(&["lvl:factor"], &[], None)).unwrap();
        assert_eq!(l.dataset.mean_design().names, vec!["lvl[1]", "lvl[2]"]);
        let l = read_dataset_from(csv.as_bytes(), &spec(&["lvl"], &[], None)).unwrap();
        assert_eq!(l.dataset.mean_design().names, vec!["(Intercept)", "lvl"]);
    }

    #[test]
    fn renormalizes_and_replaces_zeros() {
        let csv = "y1,y2,y3\n20,30,50\n0,0.5,0.5\n0.2,0.3,0.5\n";
        let l = read_dataset_from(csv.as_bytes(), &spec(&[], &[], None)).unwrap();
        assert_eq!(l.renormalized_rows, 1);
        assert_eq!(l.replaced_parts, 1);
        assert!((l.dataset.responses()[0].parts()[2] - 0.5).abs() < 1e-15);
        assert_eq!(l.dataset.responses()[1].parts()[0], crate::dirichlet::ZERO_REPLACEMENT);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let csv = "y1,y2\n0.5,0.5\n0.4,abc\n";
        match read_dataset_from(csv.as_bytes(), &spec(&[], &[], None)) {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 3);
                assert!(message.contains("y2"));
            }
            other => panic!("unexpected {other:?}"),
        }
        let ragged = "y1,y2\n0.5,0.5\n0.4\n";
        assert!(matches!(read_dataset_from(ragged.as_bytes(), &spec(&[], &[], None)), Err(Error::Parse { line: 3, .. })));
        let neg = "y1,y2\n-0.5,1.5\n";
        assert!(matches!(read_dataset_from(neg.as_bytes(), &spec(&[], &[], None)), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn unknown_columns_are_named() {
        let err = read_dataset_from(SMALL.as_bytes(), &spec(&["speed"], &[], None)).unwrap_err();
        assert!(err.to_string().contains("speed"));
        let err = read_dataset_from("a,b\n1,2\n".as_bytes(), &spec(&[], &[], None)).unwrap_err();
        assert!(err.to_string().contains("--response"));
    }

    #[test]
    fn written_tables_round_trip() {
        let l = read_dataset_from(SMALL.as_bytes(), &spec(&["pos"], &["x"], None)).unwrap();
        let cols = vec![
            Column::labels("pos", vec!["GD".into(), "GK".into(), "GD".into(), "GK".into()]),
            Column::numeric("x", vec![1.5, 2.5, 3.0, 0.5]),
        ];
        let mut buf = Vec::new();
        write_table(&mut buf, l.dataset.response_names(), l.dataset.responses(), &cols).unwrap();
        let back = read_dataset_from(buf.as_slice(), &spec(&["pos"], &["x"], None)).unwrap();
        assert_eq!(back.dataset.responses(), l.dataset.responses());
        assert_eq!(back.dataset.x(), l.dataset.x());
        assert_eq!(back.dataset.w(), l.dataset.w());
    }
}
