//! Fixed class colours and slice rasterisation shared by the service and the demo.
//!
//! Class 0 is fully transparent; classes 1..=13 take the entries of
//! [`PALETTE_HEX`] in order. Ids past the table wrap around it so any class
//! count renders deterministically.

use crate::grid::SliceImage;

pub const PALETTE_HEX: [&str; 13] = [
    "#e6194b", "#3cb44b", "#ffe119", "#4363d8", "#f58231", "#911eb4", "#46f0f0", "#f032e6", "#bcf60c", "#fabebe", "#008080",
    "#e6beff", "#9a6324",
];

const PALETTE: [[u8; 3]; 13] = [
    [0xe6, 0x19, 0x4b],
    [0x3c, 0xb4, 0x4b],
    [0xff, 0xe1, 0x19],
    [0x43, 0x63, 0xd8],
    [0xf5, 0x82, 0x31],
    [0x91, 0x1e, 0xb4],
    [0x46, 0xf0, 0xf0],
    [0xf0, 0x32, 0xe6],
    [0xbc, 0xf6, 0x0c],
    [0xfa, 0xbe, 0xbe],
    [0x00, 0x80, 0x80],
    [0xe6, 0xbe, 0xff],
    [0x9a, 0x63, 0x24],
];

/// RGBA for a class id; background is `[0, 0, 0, 0]`.
pub fn class_rgba(class: u8) -> [u8; 4] {
    if class == 0 {
        return [0, 0, 0, 0];
    }
    let [r, g, b] = PALETTE[(class as usize - 1) % PALETTE.len()];
    [r, g, b, 255]
}

/// Row-major RGBA bytes for a slice of class ids.
pub fn mask_rgba(slice: &SliceImage) -> Vec<u8> {
    slice.pixels.iter().flat_map(|&v| class_rgba(v as u8)).collect()
}

/// Row-major 8-bit grey levels; `lo` maps to 0 and `hi` to 255, clipped outside.
pub fn window_gray(slice: &SliceImage, lo: f64, hi: f64) -> Vec<u8> {
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    slice
        .pixels
        .iter()
        .map(|&v| (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

/// Alpha-blends mask colours over grey levels. Hidden classes and background
/// leave the grey pixel untouched. `visible[c]` defaults to shown when absent.
pub fn composite(gray: &[u8], mask: &SliceImage, visible: &[bool], opacity: f64) -> Vec<u8> {
    let a = opacity.clamp(0.0, 1.0);
    let mut out = Vec::with_capacity(gray.len() * 4);
    for (&g, &m) in gray.iter().zip(&mask.pixels) {
        let class = m as u8;
        let shown = class != 0 && visible.get(class as usize).copied().unwrap_or(true);
        if shown {
            let c = class_rgba(class);
            for &ch in &c[..3] {
                out.push((g as f64 * (1.0 - a) + ch as f64 * a).round() as u8);
            }
        } else {
            out.extend_from_slice(&[g, g, g]);
        }
        out.push(255);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Axis;

    fn slice(pixels: Vec<f64>) -> SliceImage {
        SliceImage {
            axis: Axis::Axial,
            index: 0,
            width: pixels.len(),
            height: 1,
            pixels,
        }
    }

    #[test]
    fn table_matches_hex_strings() {
        for (i, hex) in PALETTE_HEX.iter().enumerate() {
            let v = u32::from_str_radix(&hex[1..], 16).unwrap();
            let rgba = class_rgba(i as u8 + 1);
            assert_eq!([rgba[0], rgba[1], rgba[2]], [(v >> 16) as u8, (v >> 8) as u8, v as u8]);
            assert_eq!(rgba[3], 255);
        }
    }

    #[test]
    fn colours_are_distinct_and_background_transparent() {
        let mut seen: Vec<[u8; 4]> = (1..=13).map(class_rgba).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 13);
        assert_eq!(class_rgba(0)[3], 0);
        assert_eq!(class_rgba(14), class_rgba(1));
    }

    #[test]
    fn window_endpoints_and_clip() {
        assert_eq!(window_gray(&slice(vec![-1.0, 0.0, 0.5, 1.0, 2.0]), 0.0, 1.0), vec![0, 0, 128, 255, 255]);
    }

    #[test]
    fn composite_respects_opacity_and_toggles() {
        let mask = slice(vec![0.0, 6.0, 6.0]);
        let gray = [10u8, 20, 30];
        let raw: Vec<u8> = gray.iter().flat_map(|&g| [g, g, g, 255]).collect();
        assert_eq!(composite(&gray, &mask, &[], 0.0), raw);
        let mut hidden = vec![true; 14];
        hidden[6] = false;
        assert_eq!(composite(&gray, &mask, &hidden, 1.0), raw);
        let full = composite(&gray, &mask, &[], 1.0);
        assert_eq!(&full[4..8], &class_rgba(6));
        assert_eq!(&full[..4], &raw[..4]);
    }
}
