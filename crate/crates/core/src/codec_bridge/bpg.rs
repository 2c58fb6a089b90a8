use std::env;
use std::path::{Path, PathBuf};
use std::process::Command;

use super::{Image8, TraditionalCodec};
use crate::error::{Error, Result};

pub const BPG_PATH_VAR: &str = "NPPC_BPG_PATH";

/// BPG through the reference `bpgenc` / `bpgdec` binaries.
///
/// Binaries are looked up in the directory named by `NPPC_BPG_PATH`, then
/// on `PATH`. Intermediate files live in a per-call temporary directory.
#[derive(Clone, Debug)]
pub struct BpgCodec {
    encoder: PathBuf,
    decoder: PathBuf,
}

fn find_binary(name: &str) -> Option<PathBuf> {
    if let Some(dir) = env::var_os(BPG_PATH_VAR) {
        let p = Path::new(&dir).join(name);
        return p.is_file().then_some(p);
    }
    env::var_os("PATH").and_then(|paths| env::split_paths(&paths).map(|d| d.join(name)).find(|p| p.is_file()))
}

impl BpgCodec {
    pub fn locate() -> Result<Self> {
        let encoder = find_binary("bpgenc").ok_or_else(|| Error::CodecUnavailable(format!("bpgenc not found (set {BPG_PATH_VAR})")))?;
        let decoder = find_binary("bpgdec").ok_or_else(|| Error::CodecUnavailable(format!("bpgdec not found (set {BPG_PATH_VAR})")))?;
        Ok(BpgCodec { encoder, decoder })
    }

    pub fn with_binaries(encoder: PathBuf, decoder: PathBuf) -> Self {
        BpgCodec { encoder, decoder }
    }
}

fn run(cmd: &mut Command) -> Result<()> {
    let out = cmd.output().map_err(|e| Error::Codec(format!("cannot spawn {:?}: {e}", cmd.get_program())))?;
    if !out.status.success() {
        return Err(Error::Codec(format!(
            "{:?} exited with {}: {}",
            cmd.get_program(),
            out.status,
            String::from_utf8_lossy(&out.stderr).trim()
        )));
    }
    Ok(())
}

fn temp_dir() -> Result<tempfile::TempDir> {
    tempfile::tempdir().map_err(|e| Error::Codec(format!("cannot create temp dir: {e}")))
}

impl TraditionalCodec for BpgCodec {
    fn name(&self) -> &str {
        "bpg"
    }

    fn encode(&self, image: &Image8, codec_param: u32) -> Result<Vec<u8>> {
        let dir = temp_dir()?;
        let input = dir.path().join("in.png");
        let output = dir.path().join("out.bpg");
        let color = if image.channels == 3 { image::ExtendedColorType::Rgb8 } else { image::ExtendedColorType::L8 };
        image::save_buffer_with_format(&input, &image.samples, image.width as u32, image.height as u32, color, image::ImageFormat::Png)
            .map_err(|e| Error::Codec(e.to_string()))?;
        run(Command::new(&self.encoder).arg("-q").arg(codec_param.to_string()).arg("-o").arg(&output).arg(&input))?;
        std::fs::read(&output).map_err(|e| Error::Codec(format!("bpgenc produced no output: {e}")))
    }

    fn decode(&self, bytes: &[u8]) -> Result<Image8> {
        let dir = temp_dir()?;
        let input = dir.path().join("in.bpg");
        let output = dir.path().join("out.png");
        std::fs::write(&input, bytes).map_err(|e| Error::Codec(e.to_string()))?;
        run(Command::new(&self.decoder).arg("-o").arg(&output).arg(&input))?;
        let img = image::open(&output).map_err(|e| Error::Codec(e.to_string()))?;
        let (width, height) = (img.width() as usize, img.height() as usize);
        if img.color().has_color() {
            Ok(Image8 { width, height, channels: 3, samples: img.to_rgb8().into_raw() })
        } else {
            Ok(Image8 { width, height, channels: 1, samples: img.to_luma8().into_raw() })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn failing_binary_reports_stderr() {
        let codec = BpgCodec::with_binaries(PathBuf::from("/bin/sh"), PathBuf::from("/bin/false"));
        let img = Image8 { width: 8, height: 8, channels: 3, samples: vec![0; 192] };
        // `/bin/sh -q` is an invalid option, so the shell fails and complains.
        let err = codec.encode(&img, 30).unwrap_err().to_string();
        assert!(err.contains("exited"), "{err}");
        assert!(codec.decode(b"xx").is_err());
    }

    #[test]
    fn missing_binaries_are_unavailable() {
        let codec = BpgCodec::with_binaries(PathBuf::from("/nonexistent/bpgenc"), PathBuf::from("/nonexistent/bpgdec"));
        let img = Image8 { width: 8, height: 8, channels: 3, samples: vec![0; 192] };
        assert!(codec.encode(&img, 30).is_err());
    }
}
