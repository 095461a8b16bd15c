use std::fmt::Write as _;
use std::path::Path;

use crate::backbone::LayerTaps;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Pairwise cosine similarity between the patch vectors of one tap.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    /// `[N_p × N_p]`
    pub values: Tensor,
    /// Patches whose hidden vector is exactly zero. Their row and column are
    /// 0 except for a 1 on the diagonal.
    pub zero_rows: Vec<usize>,
}

/// One matrix per tap, for a single window (`B = 1`).
pub fn similarity_matrices(taps: &LayerTaps) -> Result<Vec<SimilarityMatrix>> {
    taps.hidden.iter().map(tap_similarity).collect()
}

fn tap_similarity(tap: &Tensor) -> Result<SimilarityMatrix> {
    let [b, np, _] = *tap.shape() else {
        return Err(Error::dim("similarity_matrices", tap.shape(), &[1, 0, 0]));
    };
    if b != 1 {
        return Err(Error::dim("similarity_matrices batch", tap.shape(), &[1]));
    }
    let norms: Vec<f64> = (0..np)
        .map(|i| tap.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let zero_rows: Vec<usize> = (0..np).filter(|&i| norms[i] == 0.0).collect();
    let mut m = vec![0.0; np * np];
    for i in 0..np {
        m[i * np + i] = 1.0;
        for j in i + 1..np {
            let s = if norms[i] == 0.0 || norms[j] == 0.0 {
                0.0
            } else {
                let dot: f64 = tap.row(i).iter().zip(tap.row(j)).map(|(a, b)| a * b).sum();
                (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0)
            };
            m[i * np + j] = s;
            m[j * np + i] = s;
        }
    }
    Ok(SimilarityMatrix {
        values: Tensor::from_parts(vec![np, np], m),
        zero_rows,
    })
}

/// Header `p0,...,p{N_p-1}` followed by one line per row.
pub fn similarity_csv(m: &SimilarityMatrix) -> String {
    let np = m.values.shape()[0];
    let mut s = (0..np)
        .map(|i| format!("p{i}"))
        .collect::<Vec<_>>()
        .join(",");
    s.push('\n');
    for i in 0..np {
        let row = m.values.row(i);
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                s.push(',');
            }
            write!(s, "{v}").unwrap();
        }
        s.push('\n');
    }
    s
}

pub fn write_similarity_csv(path: impl AsRef<Path>, m: &SimilarityMatrix) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, similarity_csv(m)).map_err(|e| Error::io(path, e))
}
