//! Plain-text and image output for maps and training logs.

use std::fmt::Write;

use anyhow::{ensure, Result};
use ctxagg_core::toy::IterationRecord;

/// 16-bit binary PGM of an `h x w` map, min-max scaled to `0..=65535`.
/// A constant map is written as all zeros.
pub fn pgm(values: &[f64], h: usize, w: usize) -> Result<Vec<u8>> {
    ensure!(
        values.len() == h * w,
        "map has {} values, expected {h}x{w}",
        values.len()
    );
    ensure!(
        values.iter().all(|v| v.is_finite()),
        "map has non-finite values"
    );
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = format!("P5\n{w} {h}\n65535\n").into_bytes();
    for &v in values {
        let q = if hi > lo {
            ((v - lo) / (hi - lo) * 65535.0).round() as u16
        } else {
            0
        };
        out.extend_from_slice(&q.to_be_bytes());
    }
    Ok(out)
}

/// Raw map values, one row per line, shortest round-trip float formatting.
pub fn map_csv(values: &[f64], h: usize, w: usize) -> Result<String> {
    ensure!(
        values.len() == h * w,
        "map has {} values, expected {h}x{w}",
        values.len()
    );
    let mut s = String::new();
    for row in values.chunks(w.max(1)) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    Ok(s)
}

pub const LOSS_HEADER: &str = "iteration,cls_loss,box_loss,mask_loss,total";

pub fn loss_csv(records: &[IterationRecord]) -> String {
    let mut s = format!("{LOSS_HEADER}\n");
    for r in records {
        writeln!(
            s,
            "{},{:?},{:?},{:?},{:?}",
            r.iteration, r.cls_loss, r.box_loss, r.mask_loss, r.total
        )
        .expect("string write");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_scales_to_full_range() {
        let b = pgm(&[1.0, 3.0, 2.0, 1.0], 2, 2).unwrap();
        let header = b"P5\n2 2\n65535\n";
        assert_eq!(&b[..header.len()], header);
        let px: Vec<u16> = b[header.len()..]
            .chunks(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect();
        assert_eq!(px, [0, 65535, 32768, 0]);
    }

    #[test]
    fn constant_map_is_black() {
        let b = pgm(&[0.5; 3], 1, 3).unwrap();
        assert!(b.ends_with(&[0; 6]));
        assert!(pgm(&[0.5; 3], 2, 2).is_err());
    }

    #[test]
    fn csv_round_trips_floats() {
        let v = [0.1, -2.5e-17, 1.0 / 3.0, 4.0];
        let s = map_csv(&v, 2, 2).unwrap();
        let back: Vec<f64> = s
            .split([',', '\n'])
            .filter(|t| !t.is_empty())
            .map(|t| t.parse().unwrap())
            .collect();
        assert_eq!(back, v);
        assert_eq!(s.lines().count(), 2);
    }

    #[test]
    fn loss_log_has_header() {
        let r = IterationRecord {
            iteration: 0,
            cls_loss: 1.0,
            box_loss: 0.5,
            mask_loss: 0.25,
            total: 1.75,
        };
        assert_eq!(
            loss_csv(&[r]),
            format!("{LOSS_HEADER}\n0,1.0,0.5,0.25,1.75\n")
        );
    }
}
