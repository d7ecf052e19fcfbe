//! On-disk corpus layout.
//!
//! A corpus directory holds `meta.json` (population and generation
//! parameters; speaker models are re-derived from the recorded seed) and one
//! raw feature file per utterance. Feature files carry a 16-byte header —
//! magic `RPFM`, little-endian `u32` F, `u32` T, four reserved zero bytes —
//! followed by `F*T` little-endian `f64` values in row-major order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{generate_speaker_set, render_utterance, FrameMatrix, GenParams, SpeakerModel};
use crate::seed;
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const FRAME_MAGIC: &[u8; 4] = b"RPFM";

/// Write a frame matrix in the raw `RPFM` format.
pub fn write_frame_matrix(path: &Path, m: &FrameMatrix) -> Result<()> {
    let (f, t) = m.dims2()?;
    let mut buf = Vec::with_capacity(16 + m.numel() * 8);
    buf.extend_from_slice(FRAME_MAGIC);
    buf.extend_from_slice(&(f as u32).to_le_bytes());
    buf.extend_from_slice(&(t as u32).to_le_bytes());
    buf.extend_from_slice(&[0u8; 4]);
    for v in m.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

/// Read a frame matrix written by [`write_frame_matrix`].
pub fn read_frame_matrix(path: &Path) -> Result<FrameMatrix> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    if buf.len() < 16 || &buf[0..4] != FRAME_MAGIC {
        return Err(Error::Format(format!(
            "{}: not an RPFM feature file",
            path.display()
        )));
    }
    let f = u32::from_le_bytes(buf[4..8].try_into().expect("4 bytes")) as usize;
    let t = u32::from_le_bytes(buf[8..12].try_into().expect("4 bytes")) as usize;
    let expect = 16 + f * t * 8;
    if buf.len() != expect {
        return Err(Error::Format(format!(
            "{}: expected {} bytes for {}x{}, got {}",
            path.display(),
            expect,
            f,
            t,
            buf.len()
        )));
    }
    let data: Vec<f64> = buf[16..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(vec![f, t], data)
}

/// Corpus metadata persisted as `meta.json`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CorpusMeta {
    pub version: u32,
    /// Speakers reserved for training; ids `[0, train_speakers)`.
    pub train_speakers: usize,
    /// Held-out speakers; ids `[train_speakers, train_speakers + eval_speakers)`.
    pub eval_speakers: usize,
    pub feat_dim: usize,
    pub seed: u64,
    pub utts_per_speaker: usize,
    pub utt_frames: usize,
    pub gen: GenParams,
}

impl CorpusMeta {
    /// Re-derive all speaker models (train then eval) from the recorded
    /// seed. Train/eval templates are drawn jointly so the separation floor
    /// holds across the split.
    pub fn speaker_models(&self) -> Result<Vec<SpeakerModel>> {
        generate_speaker_set(
            self.train_speakers + self.eval_speakers,
            self.feat_dim,
            self.seed,
            &self.gen,
        )
    }

    /// Seed for a specific utterance file.
    pub fn utt_seed(&self, speaker_id: usize, utt: usize) -> u64 {
        seed::derive(
            self.seed,
            "corpus-utt",
            (speaker_id as u64) * 1_000_003 + utt as u64,
        )
    }

    pub fn utt_file_name(speaker_id: usize, utt: usize) -> String {
        format!("spk{speaker_id:03}_utt{utt:03}.rpfm")
    }
}

/// Materialize a corpus directory: `meta.json` plus one feature file per
/// (speaker, utterance). Fails if `dir` exists and is non-empty.
pub fn write_corpus(dir: &Path, meta: &CorpusMeta) -> Result<Vec<String>> {
    if dir.exists() {
        if !dir.is_dir() {
            return Err(Error::InvalidArgument(format!(
                "{} exists and is not a directory",
                dir.display()
            )));
        }
        if fs::read_dir(dir)?.next().is_some() {
            return Err(Error::InvalidArgument(format!(
                "output directory {} is not empty",
                dir.display()
            )));
        }
    } else {
        fs::create_dir_all(dir)?;
    }
    let speakers = meta.speaker_models()?;
    let mut files = Vec::new();
    fs::write(dir.join("meta.json"), serde_json::to_vec_pretty(meta)?)?;
    for spk in &speakers {
        for utt in 0..meta.utts_per_speaker {
            let name = CorpusMeta::utt_file_name(spk.id, utt);
            let m = render_utterance(spk, meta.utt_frames, meta.utt_seed(spk.id, utt), &meta.gen)?;
            write_frame_matrix(&dir.join(&name), &m)?;
            files.push(name);
        }
    }
    Ok(files)
}

/// Load `meta.json` from a corpus directory.
pub fn read_meta(dir: &Path) -> Result<CorpusMeta> {
    let raw = fs::read(dir.join("meta.json"))?;
    Ok(serde_json::from_slice(&raw)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_meta(seed: u64) -> CorpusMeta {
        CorpusMeta {
            version: 1,
            train_speakers: 3,
            eval_speakers: 2,
            feat_dim: 8,
            seed,
            utts_per_speaker: 2,
            utt_frames: 12,
            gen: GenParams::default(),
        }
    }

    #[test]
    fn frame_matrix_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let m = Tensor::from_rows(&[vec![1.5, -2.25, 0.0], vec![f64::MIN_POSITIVE, 3.0, -0.5]])
            .unwrap();
        let path = dir.path().join("x.rpfm");
        write_frame_matrix(&path, &m).unwrap();
        let back = read_frame_matrix(&path).unwrap();
        assert_eq!(back.shape(), m.shape());
        assert!(back
            .data()
            .iter()
            .zip(m.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn header_is_sixteen_bytes_with_magic() {
        let dir = tempfile::tempdir().unwrap();
        let m = Tensor::zeros(vec![2, 3]);
        let path = dir.path().join("x.rpfm");
        write_frame_matrix(&path, &m).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 16 + 6 * 8);
        assert_eq!(&bytes[0..4], b"RPFM");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
    }

    #[test]
    fn corrupted_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.rpfm");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(read_frame_matrix(&path).is_err());
    }

    #[test]
    fn write_corpus_emits_meta_and_counted_files() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("corpus");
        let meta = small_meta(5);
        let files = write_corpus(&out, &meta).unwrap();
        assert_eq!(files.len(), 5 * 2);
        assert!(out.join("meta.json").exists());
        let back = read_meta(&out).unwrap();
        assert_eq!(back, meta);
    }

    #[test]
    fn write_corpus_refuses_non_empty_dir() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("corpus");
        std::fs::create_dir_all(&out).unwrap();
        std::fs::write(out.join("stray"), b"x").unwrap();
        assert!(write_corpus(&out, &small_meta(5)).is_err());
    }

    #[test]
    fn regenerated_corpus_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        let meta = small_meta(9);
        write_corpus(&a, &meta).unwrap();
        write_corpus(&b, &meta).unwrap();
        for spk in 0..5 {
            for utt in 0..2 {
                let name = CorpusMeta::utt_file_name(spk, utt);
                let xa = std::fs::read(a.join(&name)).unwrap();
                let xb = std::fs::read(b.join(&name)).unwrap();
                assert_eq!(xa, xb, "{name}");
            }
        }
    }
}
