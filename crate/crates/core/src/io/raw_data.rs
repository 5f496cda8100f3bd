use std::collections::BTreeMap;
use std::io::Read;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::oracle::RawDataset;

/// Reads case-level data with columns `study`, `y` and one column per
/// predictor. An intercept column is added in front of the predictors.
/// Studies are numbered in order of first appearance.
pub fn read_raw_csv<R: Read>(reader: R) -> Result<RawDataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| Error::parse("header", e.to_string()))?.clone();
    let study_col = headers
        .iter()
        .position(|h| h == "study")
        .ok_or_else(|| Error::parse("header", "missing column 'study'"))?;
    let y_col = headers
        .iter()
        .position(|h| h == "y")
        .ok_or_else(|| Error::parse("header", "missing column 'y'"))?;
    let predictors: Vec<usize> = (0..headers.len()).filter(|&i| i != study_col && i != y_col).collect();
    if predictors.is_empty() {
        return Err(Error::parse("header", "no predictor columns"));
    }

    let mut ids: BTreeMap<String, usize> = BTreeMap::new();
    let mut study_ids = Vec::new();
    let mut labels = Vec::new();
    let mut ys = Vec::new();
    let mut xs = Vec::new();
    for (row, record) in rdr.records().enumerate() {
        let line = row + 2;
        let record = record.map_err(|e| Error::parse(format!("line {line}"), e.to_string()))?;
        let number = |i: usize| -> Result<f64> {
            let raw = record.get(i).unwrap_or("");
            raw.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                Error::parse(format!("line {line}.{}", &headers[i]), format!("'{raw}' is not a number"))
            })
        };
        let id = record.get(study_col).unwrap_or("").to_string();
        if id.is_empty() {
            return Err(Error::parse(format!("line {line}.study"), "value missing"));
        }
        let next = ids.len();
        let label = *ids.entry(id.clone()).or_insert_with(|| {
            study_ids.push(id);
            next
        });
        labels.push(label);
        ys.push(number(y_col)?);
        xs.push(1.0);
        for &i in &predictors {
            xs.push(number(i)?);
        }
    }
    if ys.is_empty() {
        return Err(Error::parse("data", "no cases"));
    }
    let p = predictors.len() + 1;
    let x = DMatrix::from_row_slice(ys.len(), p, &xs);
    RawDataset::new(x, DVector::from_vec(ys), labels, study_ids)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_two_studies() {
        let text = "study,y,x1\nA,1.0,0.5\nB,2.0,1.5\nA,1.5,0.7\n";
        let data = read_raw_csv(text.as_bytes()).unwrap();
        assert_eq!(data.study_count(), 2);
        assert_eq!(data.labels, vec![0, 1, 0]);
        assert_eq!(data.x.ncols(), 2);
        assert_eq!(data.x[(2, 0)], 1.0);
        assert_eq!(data.x[(2, 1)], 0.7);
    }

    #[test]
    fn bad_value_names_line_and_column() {
        let err = read_raw_csv("study,y,x1\nA,1.0,oops\n".as_bytes()).unwrap_err();
        assert!(err.to_string().contains("line 2.x1"), "{err}");
    }
}
