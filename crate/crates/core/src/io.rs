//! Point CSV files and float formatting.

use std::path::Path;

use thiserror::Error;

use crate::points::PointSet;

#[derive(Debug, Error)]
pub enum CsvError {
    #[error("{path}: line {line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// `v` with 17 significant digits, `%.17g` style: trailing zeros dropped,
/// exponent form outside `1e-5 ..= 1e17`.
pub fn fmt_f64(v: f64) -> String {
    if !v.is_finite() {
        return if v.is_nan() {
            "NaN".into()
        } else if v > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    if v == 0.0 {
        return if v.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let sci = format!("{v:.16e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-5..17).contains(&exp) {
        let m = mantissa.trim_end_matches('0').trim_end_matches('.');
        return format!("{m}e{exp}");
    }
    let decimals = (16 - exp).max(0) as usize;
    let fixed = format!("{v:.decimals$}");
    if fixed.contains('.') {
        fixed.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        fixed
    }
}

pub fn points_to_csv(points: &PointSet, prefix: char) -> String {
    let header: Vec<String> = (0..points.dim()).map(|i| format!("{prefix}{i}")).collect();
    let mut out = header.join(",");
    out.push('\n');
    for p in points {
        let row: Vec<String> = p.iter().map(|v| fmt_f64(*v)).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn write_points_csv(path: &Path, points: &PointSet, prefix: char) -> Result<(), CsvError> {
    std::fs::write(path, points_to_csv(points, prefix)).map_err(|source| CsvError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Parses a header line followed by rows of equal width.
pub fn points_from_csv(text: &str, path: &str) -> Result<PointSet, CsvError> {
    let err = |line: usize, message: String| CsvError::Parse {
        path: path.to_string(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| err(1, "missing header".into()))?;
    let dim = header.split(',').count();
    let mut points = PointSet::new(dim);
    for (i, line) in lines {
        let row: Vec<f64> = line
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| err(i + 1, e.to_string()))?;
        if row.len() != dim {
            return Err(err(i + 1, format!("expected {dim} columns, found {}", row.len())));
        }
        points.push(&row);
    }
    Ok(points)
}

pub fn read_points_csv(path: &Path) -> Result<PointSet, CsvError> {
    let text = std::fs::read_to_string(path).map_err(|source| CsvError::Io {
        path: path.display().to_string(),
        source,
    })?;
    points_from_csv(&text, &path.display().to_string())
}
