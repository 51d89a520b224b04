use std::io::{BufRead, Write};

use crate::error::{dim_err, Error, Result};
use crate::numcore::Tensor;
use crate::shapeworld::scene::{Cell, Object, SceneDescription, Shape, WHITE};

/// Row-major `H x W x 3` RGB image with channels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width * 3 {
            return dim_err(format!(
                "image {height}x{width}x3 with {} values",
                data.len()
            ));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.height, self.width, 3], self.data.clone()).expect("image shape")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            [h, w, 3] => Self::new(*h, *w, t.data().to_vec()),
            s => dim_err(format!("expected HxWx3 tensor, got {s:?}")),
        }
    }

    /// Clamps every channel into `[0, 1]`.
    pub fn clamped(mut self) -> Self {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
        self
    }

    /// Binary PPM (P6, maxval 255). Channels are clamped and rounded.
    pub fn write_ppm<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        w.write_all(&bytes)?;
        Ok(())
    }

    pub fn to_ppm_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_ppm(&mut out).expect("write to Vec");
        out
    }

    pub fn read_ppm<R: BufRead>(mut r: R) -> Result<Self> {
        let bad = |msg: &str| Error::Parse {
            line: 0,
            msg: format!("ppm: {msg}"),
        };
        let mut header = Vec::new();
        // magic, width, height, maxval, then exactly one whitespace byte
        while header.len() < 4 {
            let mut tok = Vec::new();
            loop {
                let mut b = [0u8; 1];
                if r.read(&mut b)? == 0 {
                    return Err(bad("truncated header"));
                }
                let c = b[0];
                if c == b'#' && tok.is_empty() {
                    let mut skip = Vec::new();
                    r.read_until(b'\n', &mut skip)?;
                    continue;
                }
                if c.is_ascii_whitespace() {
                    if tok.is_empty() {
                        continue;
                    }
                    break;
                }
                tok.push(c);
            }
            header.push(String::from_utf8(tok).map_err(|_| bad("non-ascii header"))?);
        }
        if header[0] != "P6" {
            return Err(bad("not a P6 file"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
        let (w, h, max) = (num(&header[1])?, num(&header[2])?, num(&header[3])?);
        if max != 255 {
            return Err(bad("only maxval 255 is supported"));
        }
        let mut bytes = vec![0u8; w * h * 3];
        r.read_exact(&mut bytes).map_err(|_| bad("truncated pixel data"))?;
        let data = bytes.iter().map(|&b| b as f64 / 255.0).collect();
        Self::new(h, w, data)
    }
}

/// Pixel margin between a cell edge and the shape box.
pub fn cell_margin(cell_size: usize) -> usize {
    (cell_size / 8).max(1)
}

/// Whether pixel `(y, x)` of an `inner x inner` box is covered by `shape`.
/// Coverage is tested at pixel centers.
pub fn covers(shape: Shape, inner: usize, y: usize, x: usize) -> bool {
    let n = inner as f64;
    let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
    match shape {
        Shape::Square => true,
        Shape::Circle => {
            let r = n / 2.0;
            (py - r).powi(2) + (px - r).powi(2) <= r * r
        }
        Shape::Triangle => {
            // apex at top center, base along the bottom edge
            let half_width = py / n * (n / 2.0);
            (px - n / 2.0).abs() <= half_width
        }
    }
}

/// Pixel rectangle `(y0, x0, size)` of a cell in a `size x size` image.
pub fn cell_rect(cell: Cell, size: usize) -> (usize, usize, usize) {
    let c = size / 2;
    (cell.row() * c, cell.col() * c, c)
}

fn draw(img: &mut Image, o: &Object, size: usize) {
    let (y0, x0, c) = cell_rect(o.cell, size);
    let m = cell_margin(c);
    let inner = c - 2 * m;
    let rgb = o.color.rgb();
    for y in 0..inner {
        for x in 0..inner {
            if covers(o.shape, inner, y, x) {
                img.set_pixel(y0 + m + y, x0 + m + x, rgb);
            }
        }
    }
}

/// Rasterizes a scene on a white `size x size` canvas.
pub fn render_scene(scene: &SceneDescription, size: usize) -> Result<Image> {
    if size < 4 || size % 2 != 0 {
        return Err(Error::Config(format!(
            "render size {size} must be even and at least 4"
        )));
    }
    let mut img = Image::filled(size, size, WHITE);
    for o in scene.objects() {
        draw(&mut img, o, size);
    }
    Ok(img)
}
