//! ASCII greyscale images (PGM "P2", maxval 255).

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{shape_err, Error, Result};
use crate::synth::Dataset;
use crate::tensor::Tensor;

pub const MAXVAL: u32 = 255;

/// Encodes a `[H, W]` map with values in `[0, 1]`.
pub fn to_pgm(map: &Tensor) -> Result<String> {
    if map.rank() != 2 {
        return shape_err(format!("PGM needs a rank-2 map, got {:?}", map.shape()));
    }
    if let Some(v) = map.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidArgument(format!("map value {v} outside [0, 1]")));
    }
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let mut out = format!("P2\n{w} {h}\n{MAXVAL}\n");
    for row in map.data().chunks(w.max(1)).take(h) {
        let line: Vec<String> = row.iter().map(|v| ((v * MAXVAL as f64).round() as u32).to_string()).collect();
        writeln!(out, "{}", line.join(" ")).expect("writing to a String");
    }
    Ok(out)
}

pub fn render_pgm(map: &Tensor, path: &Path) -> Result<()> {
    std::fs::write(path, to_pgm(map)?)?;
    Ok(())
}

/// Decodes a P2 image into `[H, W]` values in `[0, 1]`.
pub fn parse_pgm(text: &str) -> Result<Tensor> {
    let bad = |msg: &str| Error::InvalidArgument(format!("malformed PGM: {msg}"));
    let mut tokens = text.lines().map(|l| l.split('#').next().unwrap_or("")).flat_map(str::split_whitespace);
    if tokens.next() != Some("P2") {
        return Err(bad("missing P2 header"));
    }
    let mut number = |what: &str| -> Result<u32> {
        tokens.next().and_then(|t| t.parse().ok()).ok_or_else(|| bad(what))
    };
    let w = number("width")? as usize;
    let h = number("height")? as usize;
    let maxval = number("maxval")?;
    if maxval == 0 {
        return Err(bad("zero maxval"));
    }
    let data = (0..w * h)
        .map(|_| {
            let v = number("pixel")?;
            if v > maxval {
                return Err(bad("pixel above maxval"));
            }
            Ok(v as f64 / maxval as f64)
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::new(&[h, w], data)
}

pub fn read_pgm(path: &Path) -> Result<Tensor> {
    parse_pgm(&std::fs::read_to_string(path)?)
}

/// Writes `{split}_{index:05}_{img|mask}.pgm` for every sample. Returns the file count.
pub fn dump_dataset(dataset: &Dataset, dir: &Path) -> Result<usize> {
    std::fs::create_dir_all(dir)?;
    let mut count = 0;
    for (split, samples) in dataset.splits() {
        for (i, s) in samples.iter().enumerate() {
            let size = s.size();
            render_pgm(&s.image.reshape(&[size, size])?, &dir.join(format!("{split}_{i:05}_img.pgm")))?;
            render_pgm(&s.mask, &dir.join(format!("{split}_{i:05}_mask.pgm")))?;
            count += 2;
        }
    }
    Ok(count)
}
