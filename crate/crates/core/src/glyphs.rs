//! Synthetic text-like corpus: short strings of 5×7 bitmap characters drawn
//! dark-on-light with random placement and contrast. Each image comes with
//! its ground-truth string.

use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::manifest::{Manifest, ManifestRecord, MANIFEST_FILE};
use crate::seed;

pub const ALPHABET: &str = "0123456789ABCDEFGHIJKLMNOPQRSTUVWXYZ";

/// Rows of each character, top to bottom, `#` marking ink.
const FONT: [[&str; 7]; 36] = [
    [" ### ", "#   #", "#  ##", "# # #", "##  #", "#   #", " ### "],
    ["  #  ", " ##  ", "  #  ", "  #  ", "  #  ", "  #  ", " ### "],
    [" ### ", "#   #", "    #", "   # ", "  #  ", " #   ", "#####"],
    ["#####", "   # ", "  #  ", "   # ", "    #", "#   #", " ### "],
    ["   # ", "  ## ", " # # ", "#  # ", "#####", "   # ", "   # "],
    ["#####", "#    ", "#### ", "    #", "    #", "#   #", " ### "],
    ["  ## ", " #   ", "#    ", "#### ", "#   #", "#   #", " ### "],
    ["#####", "    #", "   # ", "  #  ", " #   ", " #   ", " #   "],
    [" ### ", "#   #", "#   #", " ### ", "#   #", "#   #", " ### "],
    [" ### ", "#   #", "#   #", " ####", "    #", "   # ", " ##  "],
    [" ### ", "#   #", "#   #", "#####", "#   #", "#   #", "#   #"],
    ["#### ", "#   #", "#   #", "#### ", "#   #", "#   #", "#### "],
    [" ### ", "#   #", "#    ", "#    ", "#    ", "#   #", " ### "],
    ["###  ", "#  # ", "#   #", "#   #", "#   #", "#  # ", "###  "],
    ["#####", "#    ", "#    ", "#### ", "#    ", "#    ", "#####"],
    ["#####", "#    ", "#    ", "#### ", "#    ", "#    ", "#    "],
    [" ### ", "#   #", "#    ", "# ###", "#   #", "#   #", " ####"],
    ["#   #", "#   #", "#   #", "#####", "#   #", "#   #", "#   #"],
    [" ### ", "  #  ", "  #  ", "  #  ", "  #  ", "  #  ", " ### "],
    ["  ###", "   # ", "   # ", "   # ", "   # ", "#  # ", " ##  "],
    ["#   #", "#  # ", "# #  ", "##   ", "# #  ", "#  # ", "#   #"],
    ["#    ", "#    ", "#    ", "#    ", "#    ", "#    ", "#####"],
    ["#   #", "## ##", "# # #", "# # #", "#   #", "#   #", "#   #"],
    ["#   #", "#   #", "##  #", "# # #", "#  ##", "#   #", "#   #"],
    [" ### ", "#   #", "#   #", "#   #", "#   #", "#   #", " ### "],
    ["#### ", "#   #", "#   #", "#### ", "#    ", "#    ", "#    "],
    [" ### ", "#   #", "#   #", "#   #", "# # #", "#  # ", " ## #"],
    ["#### ", "#   #", "#   #", "#### ", "# #  ", "#  # ", "#   #"],
    [" ####", "#    ", "#    ", " ### ", "    #", "    #", "#### "],
    ["#####", "  #  ", "  #  ", "  #  ", "  #  ", "  #  ", "  #  "],
    ["#   #", "#   #", "#   #", "#   #", "#   #", "#   #", " ### "],
    ["#   #", "#   #", "#   #", "#   #", "#   #", " # # ", "  #  "],
    ["#   #", "#   #", "#   #", "# # #", "# # #", "# # #", " # # "],
    ["#   #", "#   #", " # # ", "  #  ", " # # ", "#   #", "#   #"],
    ["#   #", "#   #", " # # ", "  #  ", "  #  ", "  #  ", "  #  "],
    ["#####", "    #", "   # ", "  #  ", " #   ", "#    ", "#####"],
];

const CELL_W: usize = 5;
const CELL_H: usize = 7;

fn bitmap(c: char) -> Option<&'static [&'static str; 7]> {
    ALPHABET.find(c).map(|i| &FONT[i])
}

/// Renders `text` at `scale` pixels per font cell onto a `size×size`
/// gray canvas; the string is placed at `(y0, x0)`, one blank column between
/// characters.
pub fn render(text: &str, size: usize, scale: usize, y0: usize, x0: usize, ink: f32, paper: f32) -> Result<ImageTensor> {
    let glyphs = text
        .chars()
        .map(|c| bitmap(c).ok_or_else(|| Error::Param(format!("no glyph for `{c}`"))))
        .collect::<Result<Vec<_>>>()?;
    let width = glyphs.len() * (CELL_W + 1) * scale;
    if y0 + CELL_H * scale > size || x0 + width.saturating_sub(scale) > size {
        return Err(Error::Param(format!("`{text}` does not fit a {size}-pixel canvas")));
    }
    Ok(ImageTensor::from_fn(1, size, size, |_, y, x| {
        if y < y0 || x < x0 {
            return paper;
        }
        let (gy, gx) = ((y - y0) / scale, (x - x0) / scale);
        let (k, col) = (gx / (CELL_W + 1), gx % (CELL_W + 1));
        let hit = gy < CELL_H
            && col < CELL_W
            && glyphs
                .get(k)
                .is_some_and(|g| g[gy].as_bytes()[col] == b'#');
        if hit {
            ink
        } else {
            paper
        }
    }))
}

/// One random sample: `chars` random characters at scale 2 with jittered
/// position and contrast.
pub fn sample(rng: &mut impl Rng, size: usize, chars: usize) -> Result<(String, ImageTensor)> {
    let alphabet: Vec<char> = ALPHABET.chars().collect();
    let text: String = (0..chars)
        .map(|_| alphabet[rng.random_range(0..alphabet.len())])
        .collect();
    let scale = 2;
    let w = chars * (CELL_W + 1) * scale - scale;
    let h = CELL_H * scale;
    if w > size || h > size {
        return Err(Error::Param(format!("{chars} characters do not fit {size} pixels")));
    }
    let y0 = rng.random_range(0..=size - h);
    let x0 = rng.random_range(0..=size - w);
    let ink = rng.random_range(-1.0f32..-0.6);
    let paper = rng.random_range(0.6f32..1.0);
    let img = render(&text, size, scale, y0, x0, ink, paper)?;
    Ok((text, img))
}

/// `n` samples from the stream keyed by `seed_value`.
pub fn corpus(n: usize, seed_value: u64, size: usize, chars: usize) -> Result<Vec<(String, ImageTensor)>> {
    let mut rng = seed::rng(seed::derive_named(seed_value, "glyphs"));
    (0..n).map(|_| sample(&mut rng, size, chars)).collect()
}

/// Writes `glyph_NNNN.png` with its text in `glyph_NNNN.txt`, plus a sharp
/// manifest. Returns the manifest.
pub fn write_corpus(dir: &Path, items: &[(String, ImageTensor)]) -> Result<Manifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut records = Vec::with_capacity(items.len());
    for (i, (text, img)) in items.iter().enumerate() {
        let stem = format!("glyph_{i:04}");
        img.save(&dir.join(format!("{stem}.png")))?;
        let txt = dir.join(format!("{stem}.txt"));
        std::fs::write(&txt, format!("{text}\n")).map_err(|e| Error::io(&txt, e))?;
        records.push(ManifestRecord::sharp(format!("{stem}.png")));
    }
    let manifest = Manifest { records };
    manifest.write(&dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn font_rows_are_well_formed() {
        for g in FONT.iter() {
            for row in g {
                assert_eq!(row.len(), CELL_W);
            }
        }
        assert_eq!(FONT.len(), ALPHABET.len());
    }

    #[test]
    fn render_places_ink() {
        let img = render("1", 16, 1, 0, 0, -1.0, 1.0).unwrap();
        assert_eq!(img.get(0, 0, 2), -1.0);
        assert_eq!(img.get(0, 0, 0), 1.0);
        assert_eq!(img.get(0, 10, 10), 1.0);
        assert!(render("ABCDEF", 16, 2, 0, 0, -1.0, 1.0).is_err());
        assert!(render("a", 16, 1, 0, 0, -1.0, 1.0).is_err());
    }

    #[test]
    fn corpus_is_deterministic() {
        let a = corpus(5, 3, 32, 2).unwrap();
        assert_eq!(a, corpus(5, 3, 32, 2).unwrap());
        assert_ne!(a, corpus(5, 4, 32, 2).unwrap());
        for (t, img) in &a {
            assert_eq!(t.len(), 2);
            assert_eq!(img.dims(), (1, 32, 32));
        }
        let dir = tempfile::tempdir().unwrap();
        let m = write_corpus(dir.path(), &a).unwrap();
        assert_eq!(m.len(), 5);
        assert!(dir.path().join("glyph_0004.txt").exists());
    }
}
