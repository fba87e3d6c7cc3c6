//! Dataset CSV: `id,x_0,...,x_{d-1},t,y_f[,y_0,...,y_{K-1}]`.

use std::path::Path;

use super::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::scalar::{format_exact, parse_exact, Scalar};

pub fn write_csv<T: Scalar>(ds: &Dataset<T>, path: &Path) -> Result<()> {
    let buf = to_csv_bytes(ds)?;
    crate::io::write_atomic(path, &buf)
}

pub(crate) fn to_csv_bytes<T: Scalar>(ds: &Dataset<T>) -> Result<Vec<u8>> {
    let oracle = ds.has_oracle();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["id".to_string()];
    header.extend((0..ds.d()).map(|j| format!("x_{j}")));
    header.push("t".into());
    header.push("y_f".into());
    if oracle {
        header.extend((0..ds.k()).map(|k| format!("y_{k}")));
    }
    w.write_record(&header)?;
    for s in ds.samples() {
        let mut rec = Vec::with_capacity(header.len());
        rec.push(s.id.to_string());
        rec.extend(s.x.iter().map(|v| format_exact(*v)));
        rec.push(s.t.to_string());
        rec.push(format_exact(s.y_factual));
        if oracle {
            rec.extend(s.y_all.as_ref().unwrap().iter().map(|v| format_exact(*v)));
        }
        w.write_record(&rec)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// Reads a dataset. Without oracle columns the treatment count is `k`, or
/// one more than the largest treatment index when `k` is `None`.
pub fn read_csv<T: Scalar>(path: &Path, k: Option<usize>) -> Result<Dataset<T>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let bad = |msg: String| Error::format(path, msg);

    if header.first().map(String::as_str) != Some("id") {
        return Err(bad("first column must be `id`".into()));
    }
    let d = header[1..].iter().take_while(|h| h.starts_with("x_")).count();
    for (j, h) in header[1..=d].iter().enumerate() {
        if *h != format!("x_{j}") {
            return Err(bad(format!("expected column x_{j}, found {h}")));
        }
    }
    if header.get(d + 1).map(String::as_str) != Some("t") || header.get(d + 2).map(String::as_str) != Some("y_f") {
        return Err(bad("expected `t,y_f` after the covariate columns".into()));
    }
    let n_oracle = header.len() - (d + 3);
    for (j, h) in header[d + 3..].iter().enumerate() {
        if *h != format!("y_{j}") {
            return Err(bad(format!("expected column y_{j}, found {h}")));
        }
    }

    let mut samples = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let num = |i: usize| -> Result<T> {
            parse_exact(field(i)).ok_or_else(|| bad(format!("row {}: cannot parse `{}`", line + 1, field(i))))
        };
        let id: u64 = field(0)
            .trim()
            .parse()
            .map_err(|_| bad(format!("row {}: bad id `{}`", line + 1, field(0))))?;
        let x = (1..=d).map(num).collect::<Result<Vec<T>>>()?;
        let t: usize = field(d + 1)
            .trim()
            .parse()
            .map_err(|_| bad(format!("row {}: bad treatment `{}`", line + 1, field(d + 1))))?;
        let y_factual = num(d + 2)?;
        let y_all = if n_oracle > 0 {
            Some((d + 3..d + 3 + n_oracle).map(num).collect::<Result<Vec<T>>>()?)
        } else {
            None
        };
        samples.push(Sample {
            id,
            x,
            t,
            y_factual,
            y_all,
        });
    }
    let k = if n_oracle > 0 {
        if let Some(k) = k {
            if k != n_oracle {
                return Err(bad(format!("file has {n_oracle} oracle columns but K = {k} was requested")));
            }
        }
        n_oracle
    } else {
        k.unwrap_or_else(|| samples.iter().map(|s| s.t + 1).max().unwrap_or(2))
    };
    Dataset::new(samples, d, k).map_err(|e| bad(e.to_string()))
}
