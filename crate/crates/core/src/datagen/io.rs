//! CSV ingestion and export. Dataset files have a header row
//! `x0,…,x{d-1},y`; heatmaps are `client,class_0,…`.

use std::io::{Read, Write};

use super::{Dataset, PartitionStats};
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Vector};

/// Reads a dataset; `num_classes` defaults to one past the largest label.
pub fn read_dataset_csv<T: Scalar, R: Read>(reader: R, num_classes: Option<usize>) -> Result<Dataset<T>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let header = rdr.headers()?.clone();
    let d = header
        .len()
        .checked_sub(1)
        .filter(|&d| d > 0)
        .ok_or_else(|| Error::Format("dataset CSV needs at least one feature column and a label column".into()))?;
    for (i, name) in header.iter().take(d).enumerate() {
        if name.trim() != format!("x{i}") {
            return Err(Error::Format(format!("column {i} is {name:?}, expected \"x{i}\"")));
        }
    }
    if header[d].trim() != "y" {
        return Err(Error::Format(format!("last column is {:?}, expected \"y\"", &header[d])));
    }
    let mut samples = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let parse_err = |what: &str| Error::Format(format!("row {}: bad {what}", line + 1));
        let x = (0..d)
            .map(|i| rec[i].trim().parse::<f64>().map(T::of).map_err(|_| parse_err("feature")))
            .collect::<Result<Vec<_>>>()?;
        let y: usize = rec[d].trim().parse().map_err(|_| parse_err("label"))?;
        samples.push((Vector::new(x)?, y));
    }
    let c = num_classes.unwrap_or_else(|| samples.iter().map(|s| s.1 + 1).max().unwrap_or(0));
    Dataset::new(samples, c)
}

pub fn write_dataset_csv<T: Scalar, W: Write>(data: &Dataset<T>, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let d = data.dim().unwrap_or(0);
    let mut header: Vec<String> = (0..d).map(|i| format!("x{i}")).collect();
    header.push("y".into());
    w.write_record(&header)?;
    for (x, y) in data.samples() {
        let mut row: Vec<String> = x.iter().map(|v| format!("{}", v.as_f64())).collect();
        row.push(y.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_heatmap_csv<W: Write>(stats: &PartitionStats, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let classes = stats.histogram.first().map_or(0, Vec::len);
    let mut header = vec!["client".to_string()];
    header.extend((0..classes).map(|c| format!("class_{c}")));
    w.write_record(&header)?;
    for (k, row) in stats.histogram.iter().enumerate() {
        let mut rec = vec![k.to_string()];
        rec.extend(row.iter().map(usize::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
