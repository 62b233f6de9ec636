//! CSV tables with a leading identifier column, and number formatting.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Numeric table: one identifier per row, one name per column.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub id_header: String,
    pub ids: Vec<String>,
    pub columns: Vec<String>,
    /// Missing cells (empty, `NA`, `NaN`) are NaN.
    pub values: DMatrix<f64>,
}

fn parse_cell(cell: &str, row: usize, col: &str) -> Result<f64> {
    let c = cell.trim();
    if c.is_empty() || c.eq_ignore_ascii_case("na") || c.eq_ignore_ascii_case("nan") {
        return Ok(f64::NAN);
    }
    c.parse::<f64>()
        .map_err(|_| Error::InvalidData(format!("row {}, column '{col}': cannot parse '{c}'", row + 1)))
}

pub fn read_table_from<R: Read>(reader: R) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.is_empty() {
        return Err(Error::InvalidData("table has no header".into()));
    }
    let id_header = headers[0].to_string();
    let columns: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    let mut ids = Vec::new();
    let mut data = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        ids.push(rec[0].to_string());
        for (c, name) in columns.iter().enumerate() {
            data.push(parse_cell(rec.get(c + 1).unwrap_or(""), r, name)?);
        }
    }
    let values = DMatrix::from_row_slice(ids.len(), columns.len(), &data);
    Ok(Table {
        id_header,
        ids,
        columns,
        values,
    })
}

pub fn read_table(path: &Path) -> Result<Table> {
    read_table_from(File::open(path)?)
}

pub fn write_table_to<W: Write>(table: &Table, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec![table.id_header.clone()];
    header.extend(table.columns.iter().cloned());
    w.write_record(&header)?;
    for (i, id) in table.ids.iter().enumerate() {
        let mut row = vec![id.clone()];
        row.extend(table.values.row(i).iter().map(|&v| fmt_num(v)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_table(table: &Table, path: &Path) -> Result<()> {
    write_table_to(table, File::create(path)?)
}

/// Writes a header and string rows.
pub fn write_rows(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(File::create(path)?);
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Six significant digits, shortest form; missing values print as `NA`.
pub fn fmt_num(x: f64) -> String {
    if x.is_nan() {
        return "NA".into();
    }
    if !x.is_finite() {
        return if x > 0.0 { "Inf".into() } else { "-Inf".into() };
    }
    let rounded: f64 = format!("{x:.5e}").parse().expect("formatted float parses");
    format!("{rounded}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn formatting() {
        assert_eq!(fmt_num(0.0), "0");
        assert_eq!(fmt_num(1.0), "1");
        assert_eq!(fmt_num(0.123456789), "0.123457");
        assert_eq!(fmt_num(-1234567.0), "-1234570");
        assert_eq!(fmt_num(1.5e-9), "0.0000000015");
        assert_eq!(fmt_num(f64::NAN), "NA");
    }

    #[test]
    fn missing_cells_and_errors() {
        let t = read_table_from("site,a,b\ns1,1,NA\ns2,,0\n".as_bytes()).unwrap();
        assert_eq!(t.ids, vec!["s1", "s2"]);
        assert_eq!(t.columns, vec!["a", "b"]);
        assert!(t.values[(0, 1)].is_nan() && t.values[(1, 0)].is_nan());
        assert_eq!(t.values[(1, 1)], 0.0);
        assert!(read_table_from("site,a\ns1,x\n".as_bytes()).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(vals in prop::collection::vec(-1e6f64..1e6, 1..30), ncol in 1usize..4) {
            let nrow = vals.len().div_ceil(ncol);
            let values = DMatrix::from_fn(nrow, ncol, |i, j| {
                let v = vals.get(i * ncol + j).copied().unwrap_or(0.0);
                fmt_num(v).parse::<f64>().unwrap()
            });
            let table = Table {
                id_header: "site".into(),
                ids: (0..nrow).map(|i| format!("r{i}")).collect(),
                columns: (0..ncol).map(|j| format!("c{j}")).collect(),
                values,
            };
            let mut buf = Vec::new();
            write_table_to(&table, &mut buf).unwrap();
            let back = read_table_from(buf.as_slice()).unwrap();
            prop_assert_eq!(back, table);
        }
    }
}
