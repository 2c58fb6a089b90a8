use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::evaluation::{CurvePoint, RateAccuracyCurve};

pub const CURVE_HEADER: &str = "rate_point,codec_param,bpp,accuracy,psnr";

/// Serializes a curve; floats use the shortest representation that
/// parses back to the same value.
pub fn curve_to_csv(curve: &RateAccuracyCurve) -> Result<String> {
    if curve.points.is_empty() {
        return Err(Error::InvalidInput("cannot write an empty curve".into()));
    }
    let mut out = String::from(CURVE_HEADER);
    out.push('\n');
    for p in &curve.points {
        writeln!(out, "{},{},{:?},{:?},{:?}", p.rate_point, p.codec_param, p.bpp, p.accuracy, p.psnr).expect("string write");
    }
    Ok(out)
}

pub fn curve_from_csv(text: &str, pipeline: &str) -> Result<RateAccuracyCurve> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::CurveParse("empty file".into()))?;
    if header.trim() != CURVE_HEADER {
        return Err(Error::CurveParse(format!("expected header `{CURVE_HEADER}`, found `{}`", header.trim())));
    }
    let mut points = Vec::new();
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() != 5 {
            return Err(Error::CurveParse(format!("row {}: expected 5 fields, found {}", i + 1, fields.len())));
        }
        let bad = |what: &str| Error::CurveParse(format!("row {}: invalid {what}", i + 1));
        points.push(CurvePoint {
            rate_point: fields[0].parse().map_err(|_| bad("rate_point"))?,
            codec_param: fields[1].parse().map_err(|_| bad("codec_param"))?,
            bpp: fields[2].parse().map_err(|_| bad("bpp"))?,
            accuracy: fields[3].parse().map_err(|_| bad("accuracy"))?,
            psnr: fields[4].parse().map_err(|_| bad("psnr"))?,
        });
    }
    if points.is_empty() {
        return Err(Error::CurveParse("no data rows".into()));
    }
    Ok(RateAccuracyCurve { pipeline: pipeline.to_string(), points })
}

pub fn write_curve_csv(curve: &RateAccuracyCurve, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, curve_to_csv(curve)?).map_err(|e| Error::io(path, e))
}

/// Reads a curve; the pipeline tag is taken from the file stem.
pub fn read_curve_csv(path: impl AsRef<Path>) -> Result<RateAccuracyCurve> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let tag = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    curve_from_csv(&text, &tag)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point(id: u32, q: u32, bpp: f64, acc: f64, psnr: f64) -> CurvePoint {
        CurvePoint { rate_point: id, codec_param: q, bpp, accuracy: acc, psnr }
    }

    #[test]
    fn single_point_is_one_row() {
        let c = RateAccuracyCurve { pipeline: "x".into(), points: vec![point(3, 50, 0.42, 0.81, 27.2)] };
        let text = curve_to_csv(&c).unwrap();
        assert_eq!(text, "rate_point,codec_param,bpp,accuracy,psnr\n3,50,0.42,0.81,27.2\n");
    }

    #[test]
    fn five_point_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("base.csv");
        let pts = (1..=5).map(|i| point(i, 100 - 15 * i, 1.0 / 3.0 * i as f64, 0.1 * i as f64 + 1e-7, 20.0 + std::f64::consts::PI * i as f64)).collect();
        let c = RateAccuracyCurve { pipeline: "base".into(), points: pts };
        write_curve_csv(&c, &path).unwrap();
        let back = read_curve_csv(&path).unwrap();
        assert_eq!(back.pipeline, "base");
        for (a, b) in back.points.iter().zip(&c.points) {
            assert_eq!((a.rate_point, a.codec_param), (b.rate_point, b.codec_param));
            assert!((a.bpp - b.bpp).abs() <= 1e-9);
            assert!((a.accuracy - b.accuracy).abs() <= 1e-9);
            assert!((a.psnr - b.psnr).abs() <= 1e-9);
        }
    }

    #[test]
    fn missing_column_is_a_parse_error() {
        let text = "rate_point,codec_param,bpp,accuracy\n1,85,1.0,0.9\n";
        assert!(matches!(curve_from_csv(text, "x"), Err(Error::CurveParse(_))));
    }

    #[test]
    fn empty_curve_refused() {
        let c = RateAccuracyCurve { pipeline: "x".into(), points: vec![] };
        assert!(curve_to_csv(&c).is_err());
    }
}
