//! On-disk cohort format.
//!
//! ```text
//! <root>/config.json            resolved run configuration
//! <root>/cohort.json            summary and config digest
//! <root>/subject_SS/seq_QQ/meta.json
//! <root>/subject_SS/seq_QQ/frames.bin    frames × H × W  f32 LE
//! <root>/subject_SS/seq_QQ/fields.bin    (frames − 1) × {dx, dy} × H × W  f32 LE
//! <root>/subject_SS/seq_QQ/vessels.json  per vessel, [x, y] per frame
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{check_digest, RunConfig};
use crate::error::{Error, Result};
use crate::field::{DisplacementField, Image};
use crate::io::{f32_bytes, f32_values, read, write_atomic};
use crate::phantom::{make_cohort, Sequence, SubjectDataset, SubjectParams};
use crate::quantizer::AxisStats;
use crate::training::{split_louo, Split};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceMeta {
    pub subject_id: usize,
    pub sequence_id: usize,
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
    pub frames: usize,
    pub pixel_spacing_mm: f64,
    pub params: SubjectParams,
    pub seed: u64,
    pub digest: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortSummary {
    pub digest: String,
    pub subjects: usize,
    pub sequences: usize,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub seed: u64,
    pub pixel_spacing_mm: f64,
    pub dx: AxisStats,
    pub dy: AxisStats,
}

impl CohortSummary {
    pub fn of(cohort: &[SubjectDataset], cfg: &RunConfig) -> Result<Self> {
        let seqs: Vec<&Sequence> = cohort.iter().flat_map(|s| &s.sequences).collect();
        let dx: Vec<f64> = seqs.iter().flat_map(|s| s.fields.iter().flat_map(|f| f.dx.iter().copied())).collect();
        let dy: Vec<f64> = seqs.iter().flat_map(|s| s.fields.iter().flat_map(|f| f.dy.iter().copied())).collect();
        let p = &cfg.phantom;
        Ok(Self {
            digest: cfg.digest()?,
            subjects: cohort.len(),
            sequences: seqs.len(),
            height: p.height,
            width: p.width,
            frames: p.frames,
            seed: p.seed,
            pixel_spacing_mm: p.pixel_spacing_mm,
            dx: AxisStats::of(&dx)?,
            dy: AxisStats::of(&dy)?,
        })
    }
}

/// Renders the cohort described by `cfg.phantom`.
pub fn generate(cfg: &RunConfig) -> Result<Vec<SubjectDataset>> {
    cfg.validate()?;
    make_cohort(&cfg.phantom, cfg.phantom.subjects, cfg.phantom.seed)
}

fn subject_dir(root: &Path, subject: usize) -> PathBuf {
    root.join(format!("subject_{subject:02}"))
}

fn sequence_dir(root: &Path, subject: usize, sequence: usize) -> PathBuf {
    subject_dir(root, subject).join(format!("seq_{sequence:02}"))
}

fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s.into_bytes())
}

/// Removes entries this format owns; anything else in `root` is left alone.
fn clear_owned(root: &Path) -> Result<()> {
    for entry in std::fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let path = entry.path();
        if name.starts_with("subject_") && path.is_dir() {
            std::fs::remove_dir_all(&path).map_err(|e| Error::io(&path, e))?;
        } else if name == "cohort.json" || name == "config.json" {
            std::fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(())
}

/// Writes `cohort` under `root`. A non-empty `root` is an error unless
/// `force` is set.
pub fn write_dataset(root: &Path, cfg: &RunConfig, cohort: &[SubjectDataset], force: bool) -> Result<CohortSummary> {
    if root.exists() {
        let non_empty = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?.next().is_some();
        if non_empty {
            if !force {
                return Err(Error::Data(format!(
                    "{} exists and is not empty; pass --force to overwrite",
                    root.display()
                )));
            }
            clear_owned(root)?;
        }
    }
    let summary = CohortSummary::of(cohort, cfg)?;
    for subject in cohort {
        for seq in &subject.sequences {
            let dir = sequence_dir(root, seq.subject_id, seq.sequence_id);
            let meta = SequenceMeta {
                subject_id: seq.subject_id,
                sequence_id: seq.sequence_id,
                height: seq.height(),
                width: seq.width(),
                frames: seq.frames.len(),
                pixel_spacing_mm: seq.params.pixel_spacing_mm,
                params: seq.params.clone(),
                seed: seq.seed,
                digest: summary.digest.clone(),
            };
            write_atomic(&dir.join("meta.json"), &json_bytes(&meta)?)?;
            write_atomic(
                &dir.join("frames.bin"),
                &f32_bytes(seq.frames.iter().flat_map(|f| f.data.iter().copied())),
            )?;
            write_atomic(
                &dir.join("fields.bin"),
                &f32_bytes(seq.fields.iter().flat_map(|f| f.dx.iter().chain(&f.dy).copied())),
            )?;
            write_atomic(&dir.join("vessels.json"), &json_bytes(&seq.vessels)?)?;
        }
    }
    write_atomic(&root.join("config.json"), cfg.to_json()?.as_bytes())?;
    write_atomic(&root.join("cohort.json"), &json_bytes(&summary)?)?;
    Ok(summary)
}

/// A cohort loaded from disk with the configuration that produced it.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub config: RunConfig,
    pub digest: String,
    pub subjects: Vec<SubjectDataset>,
}

fn load_sequence(dir: &Path, digest: &str) -> Result<Sequence> {
    let meta: SequenceMeta = serde_json::from_slice(&read(&dir.join("meta.json"))?)
        .map_err(|e| Error::Data(format!("{}: {e}", dir.join("meta.json").display())))?;
    check_digest(&dir.display().to_string(), Some(&meta.digest), digest)?;
    let (h, w, n) = (meta.height, meta.width, meta.frames);
    if n < 2 || meta.params.height != h || meta.params.width != w {
        return Err(Error::Data(format!("{}: inconsistent meta.json", dir.display())));
    }
    let px = h * w;
    let frames = f32_values(&read(&dir.join("frames.bin"))?)?;
    if frames.len() != n * px {
        return Err(Error::Data(format!(
            "{}: frames.bin holds {} values, expected {}",
            dir.display(),
            frames.len(),
            n * px
        )));
    }
    let fields = f32_values(&read(&dir.join("fields.bin"))?)?;
    if fields.len() != (n - 1) * 2 * px {
        return Err(Error::Data(format!(
            "{}: fields.bin holds {} values, expected {}",
            dir.display(),
            fields.len(),
            (n - 1) * 2 * px
        )));
    }
    let vessels: Vec<Vec<[f64; 2]>> = serde_json::from_slice(&read(&dir.join("vessels.json"))?)
        .map_err(|e| Error::Data(format!("{}: {e}", dir.join("vessels.json").display())))?;
    if vessels.iter().any(|v| v.len() != n) {
        return Err(Error::Data(format!("{}: vessel tracks must have {n} positions", dir.display())));
    }
    Ok(Sequence {
        subject_id: meta.subject_id,
        sequence_id: meta.sequence_id,
        seed: meta.seed,
        params: meta.params,
        frames: frames
            .chunks_exact(px)
            .map(|c| Image::new(w, h, c.to_vec()))
            .collect::<Result<_>>()?,
        fields: fields
            .chunks_exact(2 * px)
            .map(|c| DisplacementField::new(w, h, c[..px].to_vec(), c[px..].to_vec()))
            .collect::<Result<_>>()?,
        vessels,
    })
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self> {
        let config = RunConfig::load(&root.join("config.json"))?;
        let digest = config.digest()?;
        let summary: CohortSummary = serde_json::from_slice(&read(&root.join("cohort.json"))?)
            .map_err(|e| Error::Data(format!("{}: {e}", root.join("cohort.json").display())))?;
        check_digest("cohort.json", Some(&summary.digest), &digest)?;
        let mut subjects = Vec::with_capacity(summary.subjects);
        for s in 0..summary.subjects {
            let mut sequences = Vec::new();
            for q in 0..config.phantom.sequences_per_subject {
                let seq = load_sequence(&sequence_dir(root, s, q), &digest)?;
                if (seq.subject_id, seq.sequence_id) != (s, q) {
                    return Err(Error::Data(format!("subject {s} sequence {q}: ids in meta.json disagree")));
                }
                sequences.push(seq);
            }
            subjects.push(SubjectDataset {
                subject_id: s,
                sequences,
            });
        }
        if subjects.iter().map(|s| s.sequences.len()).sum::<usize>() != summary.sequences {
            return Err(Error::Data("cohort.json sequence count disagrees with the directories".into()));
        }
        Ok(Self {
            root: root.to_path_buf(),
            config,
            digest,
            subjects,
        })
    }

    pub fn subject_ids(&self) -> Vec<usize> {
        self.subjects.iter().map(|s| s.subject_id).collect()
    }

    pub fn sequences_of(&self, ids: &[usize]) -> Vec<&Sequence> {
        self.subjects
            .iter()
            .filter(|s| ids.contains(&s.subject_id))
            .flat_map(|s| &s.sequences)
            .collect()
    }

    pub fn sequence(&self, subject: usize, sequence: usize) -> Result<&Sequence> {
        self.subjects
            .iter()
            .find(|s| s.subject_id == subject)
            .and_then(|s| s.sequences.iter().find(|q| q.sequence_id == sequence))
            .ok_or_else(|| Error::Data(format!("no sequence {sequence} for subject {subject}")))
    }

    pub fn split(&self, held_out: usize, seed: u64) -> Result<Split> {
        split_louo(&self.subject_ids(), held_out, seed)
    }

    /// All forward fields of the given subjects.
    pub fn fields_of(&self, ids: &[usize]) -> Vec<DisplacementField> {
        self.sequences_of(ids)
            .into_iter()
            .flat_map(|s| s.fields.iter().cloned())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.phantom.subjects = 3;
        cfg.phantom.sequences_per_subject = 2;
        cfg.phantom.height = 16;
        cfg.phantom.width = 16;
        cfg.phantom.frames = 12;
        cfg
    }

    fn tree_bytes(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
        let mut out = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(dir) = stack.pop() {
            for e in std::fs::read_dir(&dir).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    out.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
                }
            }
        }
        out.sort();
        out
    }

    #[test]
    fn round_trip_is_exact() {
        let cfg = small_config();
        let cohort = generate(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let summary = write_dataset(dir.path(), &cfg, &cohort, false).unwrap();
        assert_eq!(summary.sequences, 6);
        let ds = Dataset::load(dir.path()).unwrap();
        assert_eq!(ds.config, cfg);
        assert_eq!(ds.subjects, cohort);
        assert_eq!(ds.subject_ids(), vec![0, 1, 2]);
        assert_eq!(ds.sequences_of(&[1]).len(), 2);
        assert_eq!(ds.fields_of(&[0, 2]).len(), 4 * 11);
        assert!(ds.sequence(2, 1).is_ok());
        assert!(ds.sequence(3, 0).is_err());
    }

    #[test]
    fn layout_and_sizes() {
        let cfg = small_config();
        let cohort = generate(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &cfg, &cohort, false).unwrap();
        let seq = dir.path().join("subject_01/seq_00");
        assert_eq!(std::fs::metadata(seq.join("frames.bin")).unwrap().len(), 12 * 16 * 16 * 4);
        assert_eq!(std::fs::metadata(seq.join("fields.bin")).unwrap().len(), 11 * 2 * 16 * 16 * 4);
        // First dy value of field 0 sits right after the dx plane.
        let bytes = std::fs::read(seq.join("fields.bin")).unwrap();
        let v = f32::from_le_bytes(bytes[16 * 16 * 4..16 * 16 * 4 + 4].try_into().unwrap());
        assert_eq!(v as f64, cohort[1].sequences[0].fields[0].dy[0]);
        let meta: serde_json::Value = serde_json::from_slice(&std::fs::read(seq.join("meta.json")).unwrap()).unwrap();
        for key in ["subject_id", "H", "W", "frames", "pixel_spacing_mm", "params", "seed"] {
            assert!(meta.get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn rewrite_is_byte_identical_and_requires_force() {
        let cfg = small_config();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        write_dataset(a.path(), &cfg, &generate(&cfg).unwrap(), false).unwrap();
        write_dataset(b.path(), &cfg, &generate(&cfg).unwrap(), false).unwrap();
        assert_eq!(tree_bytes(a.path()), tree_bytes(b.path()));

        let err = write_dataset(a.path(), &cfg, &generate(&cfg).unwrap(), false).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
        std::fs::write(a.path().join("notes.txt"), "keep").unwrap();
        write_dataset(a.path(), &cfg, &generate(&cfg).unwrap(), true).unwrap();
        assert_eq!(std::fs::read_to_string(a.path().join("notes.txt")).unwrap(), "keep");
    }

    #[test]
    fn corrupted_files_are_data_errors() {
        let cfg = small_config();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &cfg, &generate(&cfg).unwrap(), false).unwrap();
        let frames = dir.path().join("subject_00/seq_01/frames.bin");
        let mut bytes = std::fs::read(&frames).unwrap();
        bytes.truncate(bytes.len() - 4);
        std::fs::write(&frames, bytes).unwrap();
        assert!(matches!(Dataset::load(dir.path()), Err(Error::Data(_))));
    }

    #[test]
    fn edited_config_is_a_digest_mismatch() {
        let cfg = small_config();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &cfg, &generate(&cfg).unwrap(), false).unwrap();
        let mut edited = cfg.clone();
        edited.train.seed = 9;
        std::fs::write(dir.path().join("config.json"), edited.to_json().unwrap()).unwrap();
        assert!(matches!(Dataset::load(dir.path()), Err(Error::Config(_))));
    }
}
