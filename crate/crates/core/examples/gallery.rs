//! Write a contact sheet of glyph faces: one row per identity, columns sweep pose
//! and expression.

use std::path::PathBuf;

use eet_core::data::{contact_sheet, render, write_image, GlyphConfig, GlyphSpec};

fn main() -> eet_core::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "gallery.png".into()));
    let cfg = GlyphConfig { resolution: 64, ..GlyphConfig::default() };
    let columns: Vec<(usize, [f64; 4])> = vec![
        (1, [0.0; 4]),
        (2, [0.0; 4]),
        (3, [0.0; 4]),
        (2, [5.0, 0.0, 0.0, 0.0]),
        (2, [0.0, 5.0, 0.0, 0.0]),
        (2, [0.0, 0.0, 5.0, 0.0]),
        (2, [0.0, 0.0, 0.0, 5.0]),
        (1, [4.0, 1.0, 4.0, 3.0]),
    ];
    let mut rows = Vec::new();
    for identity in 1..=cfg.identities {
        let faces = columns
            .iter()
            .map(|(pose, au)| render(&GlyphSpec { identity, pose: *pose, au: au.to_vec() }, &cfg))
            .collect::<eet_core::Result<Vec<_>>>()?;
        rows.push(contact_sheet(&faces.iter().collect::<Vec<_>>())?);
    }
    // Stack rows vertically by writing each row's data one after another.
    let w = rows[0].shape()[3];
    let data: Vec<f64> = rows.iter().flat_map(|r| r.data().to_vec()).collect();
    let sheet = eet_tensor::Tensor::new(&[1, 1, data.len() / w, w], data)?;
    write_image(&out, &sheet)?;
    println!("wrote {}", out.display());
    Ok(())
}
