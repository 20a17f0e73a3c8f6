//! Supervision targets over the patch grid.
//!
//! Gaussian labels integrate an axis-aligned 2D normal, centred on the box
//! centroid with standard deviations `w / sigma_factor` and `h / sigma_factor`,
//! over each patch region and normalise by `Σ y + ε`. Mass falling outside the
//! image is dropped. Uniform labels give every patch whose centre lies in the
//! box the same weight.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{bbox_center, intersects, BoundingBox, PatchGrid, Point};
use crate::scalar::{std_normal_interval, Scalar};

pub const DEFAULT_EPSILON: f64 = 1e-6;
pub const DEFAULT_SIGMA_FACTOR: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelKind {
    Gaussian,
    Uniform,
}

impl std::fmt::Display for LabelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LabelKind::Gaussian => "gaussian",
            LabelKind::Uniform => "uniform",
        })
    }
}

/// Diagonal 2D normal derived from a box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianSpec<T> {
    pub mu: Point<T>,
    pub sigma_x: T,
    pub sigma_y: T,
    pub sigma_factor: T,
}

pub fn gaussian_spec<T: Scalar>(b: &BoundingBox<T>, sigma_factor: T) -> Result<GaussianSpec<T>> {
    if !(sigma_factor > T::zero() && sigma_factor.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "sigma_factor must be positive and finite, got {sigma_factor}"
        )));
    }
    Ok(GaussianSpec {
        mu: bbox_center(b),
        sigma_x: b.width() / sigma_factor,
        sigma_y: b.height() / sigma_factor,
        sigma_factor,
    })
}

/// Probability mass of the Gaussian inside `region`, as the product of two
/// univariate CDF differences.
pub fn patch_mass<T: Scalar>(spec: &GaussianSpec<T>, region: &BoundingBox<T>) -> T {
    axis_mass(region.x1(), region.x2(), spec.mu.x, spec.sigma_x)
        * axis_mass(region.y1(), region.y2(), spec.mu.y, spec.sigma_y)
}

fn axis_mass<T: Scalar>(lo: T, hi: T, mu: T, sigma: T) -> T {
    std_normal_interval((lo - mu) / sigma, (hi - mu) / sigma)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap<T> {
    pub grid: PatchGrid,
    pub values: Vec<T>,
    pub kind: LabelKind,
    /// Normalisation stabiliser; zero for uniform maps.
    pub epsilon: T,
}

impl<T: Scalar> LabelMap<T> {
    pub fn sum(&self) -> T {
        self.values.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    /// Index of the largest value, lowest row-major index on ties.
    pub fn peak_index(&self) -> usize {
        argmax(&self.values)
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.as_f64()).collect()
    }
}

pub(crate) fn argmax<T: Scalar>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Unnormalised per-patch Gaussian masses `y_i`, row-major.
pub fn gaussian_patch_masses<T: Scalar>(grid: &PatchGrid, spec: &GaussianSpec<T>) -> Vec<T> {
    // separable: integrate each column span and each row span once
    let s = grid.patch_size() as usize;
    let col_mass: Vec<T> = (0..grid.cols())
        .map(|c| {
            let lo = T::from_count(c * s);
            let hi = T::from_count(((c + 1) * s).min(grid.image_width() as usize));
            axis_mass(lo, hi, spec.mu.x, spec.sigma_x)
        })
        .collect();
    let row_mass: Vec<T> = (0..grid.rows())
        .map(|r| {
            let lo = T::from_count(r * s);
            let hi = T::from_count(((r + 1) * s).min(grid.image_height() as usize));
            axis_mass(lo, hi, spec.mu.y, spec.sigma_y)
        })
        .collect();
    let mut out = Vec::with_capacity(grid.len());
    for &ry in &row_mass {
        out.extend(col_mass.iter().map(|&cx| cx * ry));
    }
    out
}

pub fn gaussian_label_map<T: Scalar>(
    grid: &PatchGrid,
    b: &BoundingBox<T>,
    sigma_factor: T,
    epsilon: T,
) -> Result<LabelMap<T>> {
    grid.check_box(b)?;
    if !(epsilon >= T::zero() && epsilon.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "epsilon must be non-negative and finite, got {epsilon}"
        )));
    }
    let spec = gaussian_spec(b, sigma_factor)?;
    let mut values = gaussian_patch_masses(grid, &spec);
    let total = values.iter().fold(T::zero(), |a, &v| a + v);
    if total <= T::zero() {
        return Err(Error::DegenerateGaussian {
            sigma_x: spec.sigma_x.as_f64(),
            sigma_y: spec.sigma_y.as_f64(),
        });
    }
    let denom = total + epsilon;
    for v in &mut values {
        *v /= denom;
    }
    Ok(LabelMap {
        grid: *grid,
        values,
        kind: LabelKind::Gaussian,
        epsilon,
    })
}

/// Equal weight `1/K` on the `K` patches whose centre lies in `b`
/// (boundary-inclusive). With no such patch the patch holding the box
/// centre gets weight 1.
///
/// The last in-box patch takes `1 - (sum of the others)` instead of `1/K`,
/// a difference of a few ulps that makes [`LabelMap::sum`] exactly one.
pub fn uniform_label_map<T: Scalar>(grid: &PatchGrid, b: &BoundingBox<T>) -> Result<LabelMap<T>> {
    grid.check_box(b)?;
    let inside: Vec<usize> = (0..grid.len())
        .filter(|&i| b.contains(grid.patch_center(i).expect("index in range")))
        .collect();
    let mut values = vec![T::zero(); grid.len()];
    if inside.is_empty() {
        let i = grid.patch_at(bbox_center(b))?;
        log::warn!(
            "no patch centre inside box {:?}; falling back to patch {i}",
            b.to_array()
        );
        values[i] = T::one();
    } else {
        let w = T::one() / T::from_count(inside.len());
        let (&last, rest) = inside.split_last().expect("non-empty");
        let mut acc = T::zero();
        for &i in rest {
            values[i] = w;
            acc += w;
        }
        values[last] = T::one() - acc;
    }
    Ok(LabelMap {
        grid: *grid,
        values,
        kind: LabelKind::Uniform,
        epsilon: T::zero(),
    })
}

pub fn label_map<T: Scalar>(
    kind: LabelKind,
    grid: &PatchGrid,
    b: &BoundingBox<T>,
    sigma_factor: T,
    epsilon: T,
) -> Result<LabelMap<T>> {
    match kind {
        LabelKind::Gaussian => gaussian_label_map(grid, b, sigma_factor, epsilon),
        LabelKind::Uniform => uniform_label_map(grid, b),
    }
}

/// Patches whose region has zero-area overlap with the target box.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SuppressionSet {
    pub grid: PatchGrid,
    /// Sorted ascending.
    pub indices: Vec<usize>,
}

impl SuppressionSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.indices.binary_search(&i).is_ok()
    }

    /// Indicator mask over all patches.
    pub fn mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.grid.len()];
        for &i in &self.indices {
            m[i] = true;
        }
        m
    }
}

pub fn suppression_set<T: Scalar>(grid: &PatchGrid, b: &BoundingBox<T>) -> Result<SuppressionSet> {
    grid.check_box(b)?;
    let indices = grid
        .regions::<T>()
        .iter()
        .enumerate()
        .filter(|(_, r)| !intersects(r, b))
        .map(|(i, _)| i)
        .collect();
    Ok(SuppressionSet {
        grid: *grid,
        indices,
    })
}

/// On-disk encoding of a patch-value grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridFormat {
    /// `u32 rows, u32 cols` then `rows × cols` `f64`, all little-endian, row-major.
    Bin,
    /// One line per row, comma-separated values.
    Csv,
}

impl GridFormat {
    pub fn extension(self) -> &'static str {
        match self {
            GridFormat::Bin => "bin",
            GridFormat::Csv => "csv",
        }
    }

    pub fn from_path(path: &Path) -> GridFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => GridFormat::Csv,
            _ => GridFormat::Bin,
        }
    }
}

/// Row-major grid of values as stored in label and attention files.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueGrid {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl ValueGrid {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows * cols != values.len() || rows == 0 || cols == 0 {
            return Err(Error::Format(format!(
                "{} values do not form a non-empty {rows}x{cols} grid",
                values.len()
            )));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn from_map<T: Scalar>(grid: &PatchGrid, values: &[T]) -> Self {
        Self {
            rows: grid.rows(),
            cols: grid.cols(),
            values: values.iter().map(|v| v.as_f64()).collect(),
        }
    }

    pub fn encode(&self, format: GridFormat) -> Vec<u8> {
        match format {
            GridFormat::Bin => {
                let mut out = Vec::with_capacity(8 + 8 * self.values.len());
                out.extend_from_slice(&(self.rows as u32).to_le_bytes());
                out.extend_from_slice(&(self.cols as u32).to_le_bytes());
                for v in &self.values {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                out
            }
            GridFormat::Csv => {
                let mut s = String::new();
                for row in self.values.chunks(self.cols) {
                    let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
                    s.push_str(&line.join(","));
                    s.push('\n');
                }
                s.into_bytes()
            }
        }
    }

    pub fn decode(bytes: &[u8], format: GridFormat) -> Result<Self> {
        match format {
            GridFormat::Bin => {
                if bytes.len() < 8 {
                    return Err(Error::Format("grid file shorter than its header".into()));
                }
                let rows = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
                let cols = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
                let body = &bytes[8..];
                if body.len() != rows * cols * 8 {
                    return Err(Error::Format(format!(
                        "expected {} value bytes for {rows}x{cols}, found {}",
                        rows * cols * 8,
                        body.len()
                    )));
                }
                let values = body
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Self::new(rows, cols, values)
            }
            GridFormat::Csv => {
                let text = std::str::from_utf8(bytes)
                    .map_err(|e| Error::Format(format!("csv is not utf-8: {e}")))?;
                let mut rows = 0;
                let mut cols = None;
                let mut values = Vec::new();
                for (n, line) in text.lines().enumerate() {
                    if line.trim().is_empty() {
                        continue;
                    }
                    let row: Vec<f64> = line
                        .split(',')
                        .map(|t| t.trim().parse::<f64>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|e| Error::Format(format!("csv line {}: {e}", n + 1)))?;
                    if *cols.get_or_insert(row.len()) != row.len() {
                        return Err(Error::Format(format!("csv line {} has ragged width", n + 1)));
                    }
                    values.extend(row);
                    rows += 1;
                }
                Self::new(rows, cols.unwrap_or(0), values)
            }
        }
    }

    pub fn write(&self, path: &Path, format: GridFormat) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.encode(format))?;
        Ok(())
    }

    /// Reads a grid file, choosing the format from the extension.
    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::decode(&bytes, GridFormat::from_path(path))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::std_normal_cdf;
    use proptest::prelude::*;

    fn bb(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox<f64> {
        BoundingBox::new(x1, y1, x2, y2).unwrap()
    }

    /// Plain 2D midpoint sum of the density over a rectangle.
    fn riemann_2d(spec: &GaussianSpec<f64>, r: &BoundingBox<f64>, n: usize) -> f64 {
        let hx = r.width() / n as f64;
        let hy = r.height() / n as f64;
        let norm = 1.0 / (2.0 * std::f64::consts::PI * spec.sigma_x * spec.sigma_y);
        let mut acc = 0.0;
        for j in 0..n {
            let y = r.y1() + (j as f64 + 0.5) * hy;
            let dy = (y - spec.mu.y) / spec.sigma_y;
            for i in 0..n {
                let x = r.x1() + (i as f64 + 0.5) * hx;
                let dx = (x - spec.mu.x) / spec.sigma_x;
                acc += (-0.5 * (dx * dx + dy * dy)).exp();
            }
        }
        acc * norm * hx * hy
    }

    #[test]
    fn spec_substitution() {
        let s = gaussian_spec(&bb(10., 10., 30., 20.), 1.0).unwrap();
        assert_eq!(s.mu, Point::new(20., 15.));
        assert_eq!((s.sigma_x, s.sigma_y), (20., 10.));
        let s = gaussian_spec(&bb(0., 0., 10., 10.), 2.0).unwrap();
        assert_eq!((s.sigma_x, s.sigma_y), (5., 5.));
        assert!(gaussian_spec(&bb(0., 0., 10., 10.), 0.0).is_err());
        assert!(gaussian_spec(&bb(0., 0., 10., 10.), -1.0).is_err());
    }

    #[test]
    fn whole_plane_mass_is_one() {
        let s = gaussian_spec(&bb(10., 10., 30., 20.), 1.0).unwrap();
        let r = bb(20. - 13. * 20., 15. - 13. * 10., 20. + 13. * 20., 15. + 13. * 10.);
        assert!((patch_mass(&s, &r) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn one_sigma_square_matches_riemann() {
        let s = gaussian_spec(&bb(10., 10., 30., 20.), 1.0).unwrap();
        let r = bb(0., 5., 40., 25.);
        let m = patch_mass(&s, &r);
        let oracle = riemann_2d(&s, &r, 2000);
        let closed = (std_normal_cdf(1.0f64) - std_normal_cdf(-1.0f64)).powi(2);
        assert!((m - closed).abs() < 1e-14);
        assert!((m - oracle).abs() < 1e-6, "{m} vs {oracle}");
        assert!((m - 0.46607).abs() < 1e-5);
    }

    #[test]
    fn mirror_regions_have_equal_mass() {
        let s = gaussian_spec(&bb(10., 10., 30., 20.), 2.0).unwrap();
        let left = bb(3., 11., 9., 17.);
        let right = bb(31., 11., 37., 17.);
        assert!((patch_mass(&s, &left) - patch_mass(&s, &right)).abs() < 1e-15);
    }

    #[test]
    fn centred_box_map_is_symmetric_and_matches_quadrature() {
        let g = PatchGrid::new(64, 64, 16).unwrap();
        let b = bb(24., 24., 40., 40.);
        let map = gaussian_label_map(&g, &b, 1.0, DEFAULT_EPSILON).unwrap();
        let v = |r: usize, c: usize| map.values[g.index(r, c)];
        for r in 0..4 {
            for c in 0..4 {
                assert!((v(r, c) - v(r, 3 - c)).abs() < 1e-15);
                assert!((v(r, c) - v(3 - r, c)).abs() < 1e-15);
            }
        }
        let peak = v(1, 1);
        for (r, c) in [(1, 2), (2, 1), (2, 2)] {
            assert!((v(r, c) - peak).abs() < 1e-15);
        }
        assert_eq!(map.peak_index(), g.index(1, 1));

        let spec = gaussian_spec(&b, 1.0).unwrap();
        let raw: Vec<f64> = g
            .regions::<f64>()
            .iter()
            .map(|r| riemann_2d(&spec, r, 400))
            .collect();
        let total: f64 = raw.iter().sum();
        for (i, y) in raw.iter().enumerate() {
            let expect = y / (total + DEFAULT_EPSILON);
            assert!((map.values[i] - expect).abs() < 1e-6, "patch {i}");
        }
    }

    #[test]
    fn sigma_sweep_maps_are_normalised() {
        let g = PatchGrid::new(256, 256, 16).unwrap();
        let b = bb(100., 40., 124., 60.);
        for f in [0.5, 1.0, 6.0] {
            let map = gaussian_label_map(&g, &b, f, DEFAULT_EPSILON).unwrap();
            assert!(map.values.iter().all(|v| v.is_finite() && *v >= 0.0));
            let s = map.sum();
            assert!(s <= 1.0 && s > 1.0 - 1e-3, "factor {f}: sum {s}");
        }
    }

    #[test]
    fn uniform_examples() {
        let g = PatchGrid::new(64, 64, 16).unwrap();
        let one = uniform_label_map(&g, &bb(16., 16., 32., 32.)).unwrap();
        assert_eq!(one.values[5], 1.0);
        assert_eq!(one.sum(), 1.0);

        let block = uniform_label_map(&g, &bb(0., 0., 32., 32.)).unwrap();
        for i in [0, 1, 4, 5] {
            assert_eq!(block.values[i], 0.25);
        }
        assert_eq!(block.sum(), 1.0);

        // nearest centre is (8, 8), outside [1, 3]²
        let tiny = bb(1., 1., 3., 3.);
        assert!((0..g.len()).all(|i| !tiny.contains(g.patch_center(i).unwrap())));
        let fb = uniform_label_map(&g, &tiny).unwrap();
        assert_eq!(fb.values[0], 1.0);
        assert_eq!(fb.sum(), 1.0);
    }

    #[test]
    fn suppression_examples() {
        let g = PatchGrid::new(64, 64, 16).unwrap();
        assert!(suppression_set(&g, &bb(0., 0., 64., 64.)).unwrap().is_empty());
        let inner = suppression_set(&g, &bb(20., 20., 28., 28.)).unwrap();
        assert_eq!(inner.len(), 15);
        assert!(!inner.contains(5));

        let s = suppression_set(&g, &bb(10., 10., 30., 20.)).unwrap();
        let fg = [g.index(0, 0), g.index(0, 1), g.index(1, 0), g.index(1, 1)];
        let expect: Vec<usize> = (0..16).filter(|i| !fg.contains(i)).collect();
        assert_eq!(s.indices, expect);
    }

    #[test]
    fn out_of_image_box_is_rejected() {
        let g = PatchGrid::new(64, 64, 16).unwrap();
        assert!(gaussian_label_map(&g, &bb(50., 50., 70., 60.), 1.0, 1e-6).is_err());
        assert!(suppression_set(&g, &bb(-1., 0., 10., 10.)).is_err());
    }

    #[test]
    fn grid_file_formats_decode_what_they_encode() {
        let vg = ValueGrid::new(2, 3, vec![0.0, 0.1, 1.0 / 3.0, 2.5e-17, 1.0, 7.0]).unwrap();
        for fmt in [GridFormat::Bin, GridFormat::Csv] {
            assert_eq!(ValueGrid::decode(&vg.encode(fmt), fmt).unwrap(), vg);
        }
        let bin = vg.encode(GridFormat::Bin);
        assert_eq!(&bin[0..8], &[2, 0, 0, 0, 3, 0, 0, 0]);
        assert!(ValueGrid::decode(&bin[..20], GridFormat::Bin).is_err());
        assert!(ValueGrid::decode(b"1,2\n3\n", GridFormat::Csv).is_err());
    }

    fn arb_case() -> impl Strategy<Value = (PatchGrid, BoundingBox<f64>)> {
        (8u32..20, 2u32..6, 2u32..6).prop_flat_map(|(s, gr, gc)| {
            let (w, h) = ((s * gc) as f64, (s * gr) as f64);
            (
                Just(PatchGrid::new(s * gc, s * gr, s).unwrap()),
                (0.0..w - 2.0, 0.0..h - 2.0, 2.0..w, 2.0..h).prop_map(move |(x, y, bw, bh)| {
                    let x2 = (x + bw).min(w);
                    let y2 = (y + bh).min(h);
                    BoundingBox::new(x, y, x2, y2).unwrap()
                }),
            )
        })
    }

    proptest! {
        #[test]
        fn foreground_and_suppression_partition((g, b) in arb_case()) {
            let sup = suppression_set(&g, &b).unwrap();
            let regions = g.regions::<f64>();
            for i in 0..g.len() {
                prop_assert_ne!(sup.contains(i), intersects(&regions[i], &b));
            }
        }

        #[test]
        fn uniform_map_sums_to_one((g, b) in arb_case()) {
            let m = uniform_label_map(&g, &b).unwrap();
            prop_assert_eq!(m.sum(), 1.0);
            let k = m.values.iter().filter(|&&v| v > 0.0).count();
            prop_assert!(m.values.iter().all(|&v| v == 0.0 || (v - 1.0 / k as f64).abs() < 1e-15));
        }

        #[test]
        fn sharpening_raises_the_peak((g, b) in arb_case(), f in 0.3..5.0f64, df in 0.05..3.0f64) {
            let a = gaussian_label_map(&g, &b, f, DEFAULT_EPSILON).unwrap();
            let c = gaussian_label_map(&g, &b, f + df, DEFAULT_EPSILON).unwrap();
            prop_assert!(c.values[c.peak_index()] > a.values[a.peak_index()]);
        }

        #[test]
        fn peak_is_the_patch_holding_the_centre((g, b) in arb_case(), f in 0.3..6.0f64) {
            let m = gaussian_label_map(&g, &b, f, DEFAULT_EPSILON).unwrap();
            let peak = m.peak_index();
            let owner = g.patch_at(b.center()).unwrap();
            // equal on ties, when the centre sits on a patch boundary
            prop_assert!((m.values[peak] - m.values[owner]).abs() <= 1e-15);
        }

        #[test]
        fn label_mass_matches_total_in_image((g, b) in arb_case(), f in 0.5..6.0f64) {
            let spec = gaussian_spec(&b, f).unwrap();
            let raw = gaussian_patch_masses(&g, &spec);
            let image = BoundingBox::new(0.0, 0.0, g.image_width() as f64, g.image_height() as f64).unwrap();
            let total: f64 = raw.iter().sum();
            prop_assert!((total - patch_mass(&spec, &image)).abs() < 1e-12);
            prop_assert!(total <= 1.0 + 1e-12);
        }
    }
}
