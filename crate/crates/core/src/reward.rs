//! Image-derived rewards: fire-pixel fraction of a tile divided by the zoom
//! factor the tile was captured with.

use std::io::{self, BufRead, Write};

use thiserror::Error;

use crate::mdp::{GridSpec, MdpError, RewardField};

#[derive(Debug, Error)]
pub enum RewardError {
    #[error("tile is empty")]
    EmptyTile,
    #[error("tile has {got} pixels, expected {expected}")]
    PixelCount { expected: usize, got: usize },
    #[error("zoom factor must be >= 1, got {0}")]
    Zoom(f64),
    #[error("unsupported image format: {0}")]
    Format(String),
    #[error("cannot split {width}x{height} image into {cols}x{rows} tiles")]
    TileGrid { width: u32, height: u32, cols: u32, rows: u32 },
    #[error(transparent)]
    Field(#[from] MdpError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Rgb = [u8; 3];

/// Per-pixel RGB threshold classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FireClassifier {
    pub min_red: u8,
    pub max_green: u8,
    pub max_blue: u8,
}

impl Default for FireClassifier {
    fn default() -> Self {
        Self {
            min_red: 200,
            max_green: 120,
            max_blue: 80,
        }
    }
}

impl FireClassifier {
    pub fn is_fire(&self, [r, g, b]: Rgb) -> bool {
        r >= self.min_red && g <= self.max_green && b <= self.max_blue
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageTile {
    width: u32,
    height: u32,
    pixels: Vec<Rgb>,
    zoom_factor: f64,
}

impl ImageTile {
    /// `pixels` are row-major. Zoom is checked when the reward is computed.
    pub fn new(width: u32, height: u32, pixels: Vec<Rgb>, zoom_factor: f64) -> Result<Self, RewardError> {
        let expected = width as usize * height as usize;
        if pixels.len() != expected {
            return Err(RewardError::PixelCount {
                expected,
                got: pixels.len(),
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
            zoom_factor,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[Rgb] {
        &self.pixels
    }

    pub fn zoom_factor(&self) -> f64 {
        self.zoom_factor
    }
}

pub fn fire_pixel_fraction(tile: &ImageTile, clf: &FireClassifier) -> Result<f64, RewardError> {
    if tile.pixels.is_empty() {
        return Err(RewardError::EmptyTile);
    }
    let fire = tile.pixels.iter().filter(|p| clf.is_fire(**p)).count();
    Ok(fire as f64 / tile.pixels.len() as f64)
}

pub fn reward_from_tile(tile: &ImageTile, clf: &FireClassifier) -> Result<f64, RewardError> {
    if !tile.zoom_factor.is_finite() || tile.zoom_factor < 1.0 {
        return Err(RewardError::Zoom(tile.zoom_factor));
    }
    Ok(fire_pixel_fraction(tile, clf)? / tile.zoom_factor)
}

/// Decoded 8-bit RGB raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<Rgb>,
}

impl RgbImage {
    pub fn filled(width: u32, height: u32, color: Rgb) -> Self {
        Self {
            width,
            height,
            pixels: vec![color; width as usize * height as usize],
        }
    }

    pub fn get(&self, x: u32, y: u32) -> Rgb {
        self.pixels[y as usize * self.width as usize + x as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, color: Rgb) {
        self.pixels[y as usize * self.width as usize + x as usize] = color;
    }

    /// Splits into `cols`×`rows` equal tiles in row-major tile order. Pixels
    /// left over at the right and bottom edges are dropped.
    pub fn split_tiles(&self, cols: u32, rows: u32, zoom_factor: f64) -> Result<Vec<ImageTile>, RewardError> {
        if cols == 0 || rows == 0 || self.width < cols || self.height < rows {
            return Err(RewardError::TileGrid {
                width: self.width,
                height: self.height,
                cols,
                rows,
            });
        }
        let (tw, th) = (self.width / cols, self.height / rows);
        let mut tiles = Vec::with_capacity(cols as usize * rows as usize);
        for ty in 0..rows {
            for tx in 0..cols {
                let mut pixels = Vec::with_capacity(tw as usize * th as usize);
                for y in ty * th..(ty + 1) * th {
                    for x in tx * tw..(tx + 1) * tw {
                        pixels.push(self.get(x, y));
                    }
                }
                tiles.push(ImageTile::new(tw, th, pixels, zoom_factor)?);
            }
        }
        Ok(tiles)
    }
}

/// Reward per tile of a `cols`×`rows` split, indexed like grid states.
pub fn reward_field_from_image(
    image: &RgbImage,
    cols: u32,
    rows: u32,
    zoom_factor: f64,
    clf: &FireClassifier,
) -> Result<RewardField, RewardError> {
    let grid = GridSpec::new(cols, rows)?;
    let values = image
        .split_tiles(cols, rows, zoom_factor)?
        .iter()
        .map(|t| reward_from_tile(t, clf))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(RewardField::new(grid, values)?)
}

/// Reads a binary PPM (`P6`, maxval 255).
pub fn read_ppm<R: BufRead>(mut reader: R) -> Result<RgbImage, RewardError> {
    let mut magic = [0u8; 2];
    reader
        .read_exact(&mut magic)
        .map_err(|_| RewardError::Format("truncated header".into()))?;
    if &magic != b"P6" {
        return Err(RewardError::Format(format!(
            "expected P6 magic, found {:?}",
            String::from_utf8_lossy(&magic)
        )));
    }
    let width = ppm_header_number(&mut reader)?;
    let height = ppm_header_number(&mut reader)?;
    let maxval = ppm_header_number(&mut reader)?;
    if maxval != 255 {
        return Err(RewardError::Format(format!("maxval {maxval}, only 255 supported")));
    }
    if width == 0 || height == 0 {
        return Err(RewardError::Format("zero image dimension".into()));
    }
    let mut raw = vec![0u8; width as usize * height as usize * 3];
    reader
        .read_exact(&mut raw)
        .map_err(|_| RewardError::Format("truncated pixel data".into()))?;
    let pixels = raw.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    Ok(RgbImage { width, height, pixels })
}

// Parses one ASCII header field and consumes the single whitespace byte after it.
fn ppm_header_number<R: BufRead>(reader: &mut R) -> Result<u32, RewardError> {
    let mut digits = String::new();
    let mut byte = [0u8; 1];
    loop {
        if reader.read(&mut byte)? == 0 {
            return Err(RewardError::Format("truncated header".into()));
        }
        match byte[0] {
            b'#' if digits.is_empty() => {
                let mut comment = Vec::new();
                reader.read_until(b'\n', &mut comment)?;
            }
            c if c.is_ascii_whitespace() => {
                if !digits.is_empty() {
                    break;
                }
            }
            c if c.is_ascii_digit() => digits.push(c as char),
            c => {
                return Err(RewardError::Format(format!(
                    "unexpected byte {c:#04x} in header"
                )))
            }
        }
    }
    digits
        .parse()
        .map_err(|_| RewardError::Format(format!("header value {digits} too large")))
}

pub fn write_ppm<W: Write>(mut writer: W, image: &RgbImage) -> io::Result<()> {
    write!(writer, "P6\n{} {}\n255\n", image.width, image.height)?;
    let raw: Vec<u8> = image.pixels.iter().flatten().copied().collect();
    writer.write_all(&raw)
}
