//! CSV export of estimated kernel matrices and weights.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::blocks::DmpsModel;
use crate::error::{DmpsError, Result};
use crate::tensor::Tensor;

/// Row-major CSV, every value in full-precision scientific notation.
pub fn write_matrix_csv(path: &Path, m: &Tensor) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for i in 0..m.rows() {
        let line: Vec<String> = m.row(i).iter().map(|v| format!("{v:.17e}")).collect();
        writeln!(out, "{}", line.join(","))?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_matrix_csv(path: &Path) -> Result<Tensor> {
    let text = fs::read_to_string(path)?;
    let rows = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split(',')
                .map(|v| v.trim().parse::<f64>().map_err(|e| DmpsError::config(format!("{}: {e}", path.display()))))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    if rows.windows(2).any(|w| w[0].len() != w[1].len()) {
        return Err(DmpsError::config(format!("{}: ragged rows", path.display())));
    }
    Ok(Tensor::from_rows(&rows))
}

/// Largest off-diagonal entry of a symmetric matrix and a flatness check:
/// flat when no upper-triangle entry exceeds the mean plus four sample
/// standard deviations of the remaining entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OffDiagonalSummary {
    /// 1-based element indices, `i < j`.
    pub top_pair: (usize, usize),
    pub top_value: f64,
    pub mean: f64,
    pub sd: f64,
    pub flat: bool,
}

pub fn off_diagonal_summary(m: &Tensor) -> Result<OffDiagonalSummary> {
    let n = m.rows();
    if n < 3 || m.cols() != n {
        return Err(DmpsError::config("off-diagonal summary needs a square matrix of size >= 3"));
    }
    let mut entries = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            entries.push(((i + 1, j + 1), m[(i, j)]));
        }
    }
    let values: Vec<f64> = entries.iter().map(|e| e.1).collect();
    let (mean, sd) = mean_sd(&values);
    let (top_pair, top_value) = entries
        .iter()
        .copied()
        .fold(entries[0], |best, e| if e.1 > best.1 { e } else { best });
    let flat = (0..values.len()).all(|k| {
        let rest: Vec<f64> = values.iter().enumerate().filter(|&(i, _)| i != k).map(|(_, &v)| v).collect();
        let (m, s) = mean_sd(&rest);
        values[k] <= m + 4.0 * s
    });
    Ok(OffDiagonalSummary {
        top_pair,
        top_value,
        mean,
        sd,
        flat,
    })
}

/// Mean and sample standard deviation (zero for fewer than two values).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelExport {
    pub name: String,
    pub sets: usize,
    /// File names, relative to the output directory.
    pub files: Vec<String>,
    /// Mean `K` over all sets, present when every set has the same size.
    #[serde(skip)]
    pub mean_kernel: Option<Tensor>,
    pub summary: Option<OffDiagonalSummary>,
}

/// Writes `kernel_{name}_set_{i}_K.csv` and `..._W.csv` for the first
/// `per_set_files` sets and `kernel_{name}_mean_K.csv` over all of them.
pub fn export_kernel(
    model: &DmpsModel,
    params: &ParamStore,
    sets: &[Tensor],
    out_dir: &Path,
    name: &str,
    per_set_files: usize,
) -> Result<KernelExport> {
    if sets.is_empty() {
        return Err(DmpsError::config("kernel export needs at least one set"));
    }
    fs::create_dir_all(out_dir)?;
    let mut files = Vec::new();
    let n = sets[0].rows();
    let same_size = sets.iter().all(|s| s.rows() == n);
    let mut sum = Tensor::zeros(n, n);
    for (k, set) in sets.iter().enumerate() {
        let graph = model.latent_graph(params, set)?;
        if k < per_set_files {
            for (tag, m) in [("K", &graph.kernel), ("W", &graph.weights)] {
                let file = format!("kernel_{name}_set_{k:04}_{tag}.csv");
                write_matrix_csv(&out_dir.join(&file), m)?;
                files.push(file);
            }
        }
        if same_size {
            sum.axpy(1.0, &graph.kernel)?;
        }
    }
    let mean_kernel = same_size.then(|| sum.scale(1.0 / sets.len() as f64));
    let summary = match &mean_kernel {
        Some(mean) => {
            let file = format!("kernel_{name}_mean_K.csv");
            write_matrix_csv(&out_dir.join(&file), mean)?;
            files.push(file);
            (n >= 3).then(|| off_diagonal_summary(mean)).transpose()?
        }
        None => None,
    };
    Ok(KernelExport {
        name: name.to_string(),
        sets: sets.len(),
        files,
        mean_kernel,
        summary,
    })
}
