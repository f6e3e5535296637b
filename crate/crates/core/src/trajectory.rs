//! Per-image record of sampling locations and its CSV/SVG exports.

use std::fmt::Write as _;
use std::io::Write;

use crate::error::Result;
use crate::sampling::GridSpec;
use crate::tensor::Tensor;

pub const CSV_HEADER: &str = "iteration,index,y_raw,x_raw,y_clamped,x_clamped";

/// Locations `p_1..p_N` of one image, both as accumulated and as sampled.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryLog {
    pub spec: GridSpec,
    pub raw: Vec<Tensor<f32>>,
    pub clamped: Vec<Tensor<f32>>,
}

impl TrajectoryLog {
    pub fn new(spec: GridSpec, raw: Vec<Tensor<f32>>, clamped: Vec<Tensor<f32>>) -> Self {
        Self { spec, raw, clamped }
    }

    pub fn iterations(&self) -> usize {
        self.raw.len()
    }

    /// `(y, x)` of point `i` at iteration `t` (1-based), clamped.
    pub fn point(&self, t: usize, i: usize) -> (f32, f32) {
        let p = &self.clamped[t - 1];
        let n = p.shape()[1];
        (p.data()[i], p.data()[n + i])
    }

    /// Largest displacement between the first and last sampled locations.
    pub fn max_displacement(&self) -> f32 {
        let count = self.spec.num_points();
        let last = self.iterations();
        (0..count)
            .map(|i| {
                let (y0, x0) = self.point(1, i);
                let (y1, x1) = self.point(last, i);
                ((y1 - y0).powi(2) + (x1 - x0).powi(2)).sqrt()
            })
            .fold(0.0, f32::max)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{CSV_HEADER}")?;
        for (t, (raw, cl)) in self.raw.iter().zip(&self.clamped).enumerate() {
            let n = raw.shape()[1];
            for i in 0..n {
                writeln!(
                    out,
                    "{},{},{},{},{},{}",
                    t + 1,
                    i,
                    raw.data()[i],
                    raw.data()[n + i],
                    cl.data()[i],
                    cl.data()[n + i]
                )?;
            }
        }
        Ok(())
    }

    /// Arrows from the first to the last sampled location, drawn over a
    /// grayscale raster of `image` (`channels×H×W`) when given. Feature-map
    /// pixel `j` is centered at image coordinate `(j + 0.5)·stride`.
    pub fn to_svg(&self, image: Option<&Tensor<f32>>, stride: usize, scale: f32) -> String {
        let (img_h, img_w) = match image {
            Some(img) => (img.shape()[1], img.shape()[2]),
            None => (self.spec.height * stride, self.spec.width * stride),
        };
        let (vw, vh) = (img_w as f32 * scale, img_h as f32 * scale);
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{vw}" height="{vh}" viewBox="0 0 {vw} {vh}">"#
        );
        s.push_str(
            "<defs><marker id=\"head\" markerWidth=\"6\" markerHeight=\"6\" refX=\"5\" refY=\"3\" orient=\"auto\">\
             <path d=\"M0,0 L6,3 L0,6 z\" fill=\"#e4572e\"/></marker></defs>\n",
        );
        match image {
            Some(img) => raster(&mut s, img, scale),
            None => {
                let _ = writeln!(s, r##"<rect width="{vw}" height="{vh}" fill="#808080"/>"##);
            }
        }
        let to_px = |v: f32| (v + 0.5) * stride as f32 * scale;
        let last = self.iterations();
        s.push_str("<g stroke=\"#e4572e\" stroke-width=\"1.5\" marker-end=\"url(#head)\">\n");
        for i in 0..self.spec.num_points() {
            let (y0, x0) = self.point(1, i);
            let (y1, x1) = self.point(last, i);
            let _ = writeln!(
                s,
                r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}"/>"#,
                to_px(x0),
                to_px(y0),
                to_px(x1),
                to_px(y1)
            );
        }
        s.push_str("</g>\n");
        s.push_str("<g fill=\"#2e86ab\">\n");
        for i in 0..self.spec.num_points() {
            let (y0, x0) = self.point(1, i);
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="1.5"/>"#, to_px(x0), to_px(y0));
        }
        s.push_str("</g>\n</svg>\n");
        s
    }
}

/// Channel-mean grayscale, min-max stretched, one rect per pixel.
fn raster(s: &mut String, img: &Tensor<f32>, scale: f32) {
    let (ch, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let gray: Vec<f32> = (0..h * w)
        .map(|k| (0..ch).map(|cc| img.data()[cc * h * w + k]).sum::<f32>() / ch as f32)
        .collect();
    let lo = gray.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = gray.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    s.push_str("<g shape-rendering=\"crispEdges\">\n");
    for y in 0..h {
        for x in 0..w {
            let v = (((gray[y * w + x] - lo) / span) * 255.0).round() as u8;
            let _ = writeln!(
                s,
                r#"<rect x="{}" y="{}" width="{scale}" height="{scale}" fill="rgb({v},{v},{v})"/>"#,
                x as f32 * scale,
                y as f32 * scale
            );
        }
    }
    s.push_str("</g>\n");
}
