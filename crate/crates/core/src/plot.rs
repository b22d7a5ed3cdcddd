//! Deterministic PCA projection of feature dumps, written as CSV and as a PNG
//! scatter coloured by domain.

use std::fmt::Write as _;
use std::path::Path;

use image::{Rgb, RgbImage};
use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, Axis};

use crate::error::{Error, Result};
use crate::features::FeatureDump;

const PALETTE: [[u8; 3]; 10] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
    [188, 189, 34],
    [23, 190, 207],
];

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub mean: Array1<f64>,
    /// dim × 2, orthonormal columns.
    pub basis: Array2<f64>,
    /// rows × 2.
    pub coords: Array2<f64>,
}

/// Projects centred rows onto the top-2 principal directions. Eigenvector
/// signs are fixed so the largest-magnitude component is positive.
pub fn pca_2d(x: &Array2<f64>) -> Result<Projection> {
    let (n, d) = x.dim();
    if n == 0 || d < 2 {
        return Err(Error::InvalidArgument(format!("PCA needs rows and dim >= 2, got {n} x {d}")));
    }
    let mean = x.mean_axis(Axis(0)).expect("nonempty");
    let centred = x - &mean;
    let cov = centred.t().dot(&centred) / n as f64;
    let eig = SymmetricEigen::new(DMatrix::from_fn(d, d, |i, j| cov[[i, j]]));
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut basis = Array2::<f64>::zeros((d, 2));
    for (col, &k) in order.iter().take(2).enumerate() {
        let v = eig.eigenvectors.column(k);
        let pivot = (0..d).fold(0, |best, i| if v[i].abs() > v[best].abs() { i } else { best });
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..d {
            basis[[i, col]] = sign * v[i];
        }
    }
    let coords = centred.dot(&basis);
    Ok(Projection { mean, basis, coords })
}

pub fn projection_csv(dump: &FeatureDump, coords: &Array2<f64>) -> String {
    let mut out = String::from("identity,domain,x,y\n");
    for (i, row) in coords.rows().into_iter().enumerate() {
        let _ = writeln!(out, "{},{},{:?},{:?}", dump.identities[i], dump.domains[i], row[0], row[1]);
    }
    out
}

/// Square scatter plot, one colour per domain.
pub fn render_scatter(coords: &Array2<f64>, domains: &[u32], size: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(size, size, Rgb([255, 255, 255]));
    if coords.nrows() == 0 {
        return img;
    }
    let bounds = |c: usize| {
        let col = coords.column(c);
        let lo = col.fold(f64::INFINITY, |a, &b| a.min(b));
        let hi = col.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        (lo, (hi - lo).max(1e-12))
    };
    let (x0, xs) = bounds(0);
    let (y0, ys) = bounds(1);
    let margin = size as f64 * 0.05;
    let span = size as f64 - 2.0 * margin - 1.0;
    for (row, &dom) in coords.rows().into_iter().zip(domains) {
        let px = (margin + (row[0] - x0) / xs * span).round() as i64;
        let py = (margin + (1.0 - (row[1] - y0) / ys) * span).round() as i64;
        let colour = Rgb(PALETTE[dom as usize % PALETTE.len()]);
        for dy in -2..=2 {
            for dx in -2..=2 {
                let (x, y) = (px + dx, py + dy);
                if (0..size as i64).contains(&x) && (0..size as i64).contains(&y) && dx * dx + dy * dy <= 5 {
                    img.put_pixel(x as u32, y as u32, colour);
                }
            }
        }
    }
    img
}

/// Writes `proj.csv` and a PNG scatter next to it.
pub fn plot_features(dump: &FeatureDump, csv_path: &Path, png_path: &Path) -> Result<Projection> {
    let proj = pca_2d(&dump.features_f64())?;
    std::fs::write(csv_path, projection_csv(dump, &proj.coords)).map_err(|e| Error::io(csv_path, e))?;
    render_scatter(&proj.coords, &dump.domains, 512)
        .save(png_path)
        .map_err(|source| Error::Image {
            path: png_path.to_path_buf(),
            source,
        })?;
    Ok(proj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn two_dimensional_input_is_an_isometry() {
        let x = array![[0.0, 1.0], [2.0, -1.0], [3.5, 0.25], [-1.0, -2.0]];
        let p = pca_2d(&x).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let a = (&x.row(i) - &x.row(j)).mapv(|v| v * v).sum().sqrt();
                let b = (&p.coords.row(i) - &p.coords.row(j)).mapv(|v| v * v).sum().sqrt();
                assert!((a - b).abs() < 1e-6);
            }
        }
        let gram = p.basis.t().dot(&p.basis);
        assert!((&gram - &Array2::<f64>::eye(2)).iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn first_axis_follows_dominant_variance() {
        let x = array![[-3.0, 0.1, 0.0], [3.0, -0.1, 0.0], [-1.0, 0.2, 0.1], [1.0, -0.2, -0.1]];
        let p = pca_2d(&x).unwrap();
        assert!(p.basis[[0, 0]].abs() > 0.99);
        assert!(pca_2d(&array![[1.0]]).is_err());
    }
}
