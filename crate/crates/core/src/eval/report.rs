use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use image::RgbImage;

use crate::data::chw_to_rgb;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CategoryMetrics {
    pub category: usize,
    pub name: String,
    pub fid: f64,
    pub lpips: f64,
    pub generated: usize,
    pub reference: usize,
}

/// Per-category scores with unweighted means over categories.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub per_category: Vec<CategoryMetrics>,
    pub fid: f64,
    pub lpips: f64,
    pub metadata: BTreeMap<String, String>,
}

impl MetricReport {
    pub fn new(per_category: Vec<CategoryMetrics>, metadata: BTreeMap<String, String>) -> Result<Self> {
        if per_category.is_empty() {
            return Err(Error::Validation("no categories were evaluated".into()));
        }
        let n = per_category.len() as f64;
        let fid = per_category.iter().map(|c| c.fid).sum::<f64>() / n;
        let lpips = per_category.iter().map(|c| c.lpips).sum::<f64>() / n;
        Ok(Self {
            per_category,
            fid,
            lpips,
            metadata,
        })
    }

    /// `category,name,fid,lpips,generated,reference` per category, then a `mean` row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["category", "name", "fid", "lpips", "generated", "reference"])?;
        for c in &self.per_category {
            w.write_record([
                c.category.to_string(),
                c.name.clone(),
                c.fid.to_string(),
                c.lpips.to_string(),
                c.generated.to_string(),
                c.reference.to_string(),
            ])?;
        }
        w.write_record(["mean", "", &self.fid.to_string(), &self.lpips.to_string(), "", ""])?;
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn write_metadata(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for (k, v) in &self.metadata {
            let _ = writeln!(text, "{k} = {v}");
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Tiles CHW images of side `size` into a grid `cols` wide with a 2px gap.
pub fn image_grid(images: &[&[f32]], size: usize, cols: usize) -> RgbImage {
    let cols = cols.max(1).min(images.len().max(1));
    let rows = images.len().div_ceil(cols).max(1);
    let gap = 2;
    let (w, h) = (cols * (size + gap) + gap, rows * (size + gap) + gap);
    let mut grid = RgbImage::from_pixel(w as u32, h as u32, image::Rgb([255, 255, 255]));
    for (i, img) in images.iter().enumerate() {
        let tile = chw_to_rgb(img, size);
        let x0 = gap + (i % cols) * (size + gap);
        let y0 = gap + (i / cols) * (size + gap);
        image::imageops::replace(&mut grid, &tile, x0 as i64, y0 as i64);
    }
    grid
}

pub fn write_image_grid(path: &Path, images: &[&[f32]], size: usize, cols: usize) -> Result<()> {
    image_grid(images, size, cols)
        .save(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Line plot of `(x, y)` points with gaps for missing values, as standalone SVG.
pub fn line_plot_svg(title: &str, x_label: &str, y_label: &str, points: &[(f64, Option<f64>)]) -> String {
    let (w, h, m) = (480.0, 320.0, 50.0);
    let xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = points.iter().filter_map(|p| p.1).collect();
    let (x_min, x_max) = bounds(&xs);
    let (y_min, y_max) = bounds(&ys);
    let px = |x: f64| m + (x - x_min) / (x_max - x_min) * (w - 2.0 * m);
    let py = |y: f64| h - m - (y - y_min) / (y_max - y_min) * (h - 2.0 * m);

    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{title}</text>"#, w / 2.0);
    let _ = writeln!(svg, r#"<line x1="{m}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, h - m, w - m, h - m);
    let _ = writeln!(svg, r#"<line x1="{m}" y1="{m}" x2="{m}" y2="{}" stroke="black"/>"#, h - m);
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">{x_label}</text>"#, w / 2.0, h - 12.0);
    let _ = writeln!(svg, r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{y_label}</text>"#, h / 2.0, h / 2.0);
    for &x in &xs {
        let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">{x}</text>"#, px(x), h - m + 16.0);
    }
    for y in [y_min, (y_min + y_max) / 2.0, y_max] {
        let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="end">{y:.2}</text>"#, m - 4.0, py(y) + 4.0);
    }
    // Consecutive present points form segments; a missing value breaks the line.
    let mut segment: Vec<String> = Vec::new();
    let flush = |segment: &mut Vec<String>, svg: &mut String| {
        if segment.len() > 1 {
            let _ = writeln!(svg, r#"<polyline fill="none" stroke="steelblue" stroke-width="2" points="{}"/>"#, segment.join(" "));
        }
        segment.clear();
    };
    for &(x, y) in points {
        match y {
            Some(y) => {
                segment.push(format!("{:.1},{:.1}", px(x), py(y)));
                let _ = writeln!(svg, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="steelblue"/>"#, px(x), py(y));
            }
            None => flush(&mut segment, &mut svg),
        }
    }
    flush(&mut segment, &mut svg);
    svg.push_str("</svg>\n");
    svg
}

fn bounds(v: &[f64]) -> (f64, f64) {
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 1.0, hi + 1.0)
    } else {
        (lo, hi)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(category: usize, fid: f64, lpips: f64) -> CategoryMetrics {
        CategoryMetrics {
            category,
            name: format!("c{category}"),
            fid,
            lpips,
            generated: 4,
            reference: 4,
        }
    }

    #[test]
    fn aggregates_recompute_from_csv() {
        let report = MetricReport::new(vec![row(0, 10.0, 0.1), row(3, 30.0, 0.4)], BTreeMap::new()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        report.write_csv(&path).unwrap();
        let mut rdr = csv::Reader::from_path(&path).unwrap();
        let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
        let fids: Vec<f64> = rows[..2].iter().map(|r| r[2].parse().unwrap()).collect();
        let mean: f64 = rows[2][2].parse().unwrap();
        assert_eq!(&rows[2][0], "mean");
        assert_eq!(mean, fids.iter().sum::<f64>() / 2.0);
        assert_eq!(report.lpips, 0.25);
        assert!(MetricReport::new(vec![], BTreeMap::new()).is_err());
    }

    #[test]
    fn grid_dimensions() {
        let img = vec![0.0f32; 3 * 4 * 4];
        let g = image_grid(&[&img, &img, &img], 4, 2);
        assert_eq!(g.dimensions(), (2 * 6 + 2, 2 * 6 + 2));
    }

    #[test]
    fn svg_breaks_line_at_gaps() {
        let svg = line_plot_svg("FID", "K", "FID", &[(2.0, Some(5.0)), (3.0, Some(4.0)), (5.0, None), (7.0, Some(3.0)), (9.0, Some(2.0))]);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert_eq!(svg.matches("<circle").count(), 4);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    }
}
