//! Dataset container and its JSON split manifest.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use groundlab_core::synthgen::{
    DatasetBundle, FeatureLayout, GenConfig, Mechanism, QuestionInstance, QuestionType, Sample, Split, VideoInstance,
};
use serde::{Deserialize, Serialize};

use crate::container::{read_container, write_container, ArrayRef, DType, MaskRef, Payload, PayloadWriter};
use crate::error::{LabError, LabResult};

pub const DATASET_MAGIC: &[u8; 8] = b"GLDATA\0\0";
pub const DATASET_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct MechanismHeader {
    layout: FeatureLayout,
    centroids: ArrayRef,
    env_centers: ArrayRef,
    qtype_embeddings: ArrayRef,
    answer_phrases: Vec<ArrayRef>,
}

#[derive(Serialize, Deserialize)]
struct SampleHeader {
    id: String,
    qtype: QuestionType,
    answer: usize,
    env_cluster: usize,
    clips: ArrayRef,
    tokens: ArrayRef,
    /// All objects of the video stacked clip by clip: `(K·S) × d`.
    objects: Option<ArrayRef>,
    causal_mask: MaskRef,
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    config: GenConfig,
    mechanism: MechanismHeader,
    splits: BTreeMap<String, Vec<SampleHeader>>,
}

/// Per-split listing written next to the container for inspection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: GenConfig,
    pub splits: BTreeMap<String, Vec<ManifestEntry>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub answer: usize,
    pub env_cluster: usize,
    pub causal_clips: Vec<usize>,
}

pub fn manifest(bundle: &DatasetBundle) -> Manifest {
    let splits = Split::ALL
        .iter()
        .map(|&s| {
            let entries = bundle
                .split(s)
                .iter()
                .map(|x| ManifestEntry {
                    id: x.video.id.clone(),
                    answer: x.question.answer,
                    env_cluster: x.video.env_cluster,
                    causal_clips: x.video.causal_positions(),
                })
                .collect();
            (s.name().to_string(), entries)
        })
        .collect();
    Manifest { format_version: DATASET_VERSION, config: bundle.config.clone(), splits }
}

fn stack(rows: &[groundlab_core::Matrix]) -> groundlab_core::Matrix {
    let cols = rows.first().map_or(0, |m| m.cols());
    let data: Vec<f64> = rows.iter().flat_map(|m| m.data().iter().copied()).collect();
    groundlab_core::Matrix::from_vec(data.len() / cols.max(1), cols, data)
}

pub fn write_dataset(bundle: &DatasetBundle, out: &mut impl Write) -> LabResult<()> {
    let mut w = PayloadWriter::default();
    let m = &bundle.mechanism;
    let mechanism = MechanismHeader {
        layout: m.layout.clone(),
        centroids: w.array(&m.centroids, DType::F32),
        env_centers: w.array(&m.env_centers, DType::F32),
        qtype_embeddings: w.array(&m.qtype_embeddings, DType::F32),
        answer_phrases: m.answer_phrases.iter().map(|p| w.array(p, DType::F32)).collect(),
    };
    let mut splits = BTreeMap::new();
    for split in Split::ALL {
        let entries = bundle
            .split(split)
            .iter()
            .map(|s| SampleHeader {
                id: s.video.id.clone(),
                qtype: s.question.qtype,
                answer: s.question.answer,
                env_cluster: s.video.env_cluster,
                clips: w.array(&s.video.clips, DType::F32),
                tokens: w.array(&s.question.tokens, DType::F32),
                objects: s.video.objects.as_ref().map(|o| w.array(&stack(o), DType::F32)),
                causal_mask: w.mask(&s.video.causal_mask),
            })
            .collect();
        splits.insert(split.name().to_string(), entries);
    }
    let header = DatasetHeader { config: bundle.config.clone(), mechanism, splits };
    write_container(out, DATASET_MAGIC, DATASET_VERSION, &header, &w.into_bytes())
}

fn read_sample(p: &Payload<'_>, h: SampleHeader, config: &GenConfig) -> LabResult<Sample> {
    let clips = p.array(&h.clips, &h.id)?;
    let tokens = p.array(&h.tokens, &h.id)?;
    let causal_mask = p.mask(&h.causal_mask, &h.id)?;
    if clips.rows() != config.clips || clips.cols() != config.feature_dim || causal_mask.len() != config.clips {
        return Err(LabError::format(format!("{}: clip shape disagrees with the config", h.id)));
    }
    if !causal_mask.iter().any(|&m| m) {
        return Err(LabError::format(format!("{}: empty causal mask", h.id)));
    }
    if h.answer >= config.num_answers {
        return Err(LabError::format(format!("{}: answer {} out of range", h.id, h.answer)));
    }
    let objects = match h.objects {
        Some(r) => {
            let all = p.array(&r, &h.id)?;
            let s = config.objects_per_clip;
            if s == 0 || all.rows() != config.clips * s {
                return Err(LabError::format(format!("{}: object array disagrees with the config", h.id)));
            }
            Some((0..config.clips).map(|k| all.select_rows(&(k * s..(k + 1) * s).collect::<Vec<_>>())).collect())
        }
        None => None,
    };
    Ok(Sample {
        video: VideoInstance { id: h.id, clips, objects, causal_mask, env_cluster: h.env_cluster },
        question: QuestionInstance { tokens, qtype: h.qtype, answer: h.answer },
    })
}

pub fn read_dataset(input: &mut impl std::io::Read) -> LabResult<DatasetBundle> {
    let (header, bytes): (DatasetHeader, _) = read_container(input, DATASET_MAGIC, DATASET_VERSION)?;
    header.config.validate()?;
    let p = Payload::new(&bytes);
    let mh = header.mechanism;
    let mechanism = Mechanism {
        layout: mh.layout,
        centroids: p.array(&mh.centroids, "centroids")?,
        env_centers: p.array(&mh.env_centers, "env_centers")?,
        qtype_embeddings: p.array(&mh.qtype_embeddings, "qtype_embeddings")?,
        answer_phrases: mh.answer_phrases.iter().map(|r| p.array(r, "answer_phrases")).collect::<LabResult<_>>()?,
    };
    let mut bundle = DatasetBundle {
        config: header.config,
        mechanism,
        train: Vec::new(),
        val: Vec::new(),
        test_iid: Vec::new(),
        test_ood: Vec::new(),
    };
    let mut splits = header.splits;
    for split in Split::ALL {
        let entries = splits.remove(split.name()).ok_or_else(|| LabError::format(format!("missing split {}", split.name())))?;
        for h in entries {
            let s = read_sample(&p, h, &bundle.config)?;
            bundle.split_mut(split).push(s);
        }
    }
    Ok(bundle)
}

pub const DATASET_FILE: &str = "dataset.gld";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes `dataset.gld` and `manifest.json` into `dir`.
pub fn save_dataset_dir(bundle: &DatasetBundle, dir: &Path) -> LabResult<()> {
    std::fs::create_dir_all(dir).map_err(LabError::file(dir))?;
    let path = dir.join(DATASET_FILE);
    let mut f = BufWriter::new(File::create(&path).map_err(LabError::file(&path))?);
    write_dataset(bundle, &mut f)?;
    f.flush()?;
    let mpath = dir.join(MANIFEST_FILE);
    std::fs::write(&mpath, serde_json::to_string_pretty(&manifest(bundle))?).map_err(LabError::file(&mpath))?;
    Ok(())
}

/// Accepts either a container file or a directory holding `dataset.gld`.
pub fn load_dataset(path: &Path) -> LabResult<DatasetBundle> {
    let file = if path.is_dir() { path.join(DATASET_FILE) } else { path.to_path_buf() };
    let mut f = BufReader::new(File::open(&file).map_err(LabError::file(&file))?);
    read_dataset(&mut f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use groundlab_core::synthgen::generate_dataset;

    #[test]
    fn round_trip_is_exact_with_and_without_objects() {
        for objects in [0, 3] {
            let cfg = GenConfig { num_videos: 40, objects_per_clip: objects, seed: 5, ..Default::default() };
            let bundle = generate_dataset(&cfg).unwrap();
            let mut buf = Vec::new();
            write_dataset(&bundle, &mut buf).unwrap();
            assert_eq!(read_dataset(&mut buf.as_slice()).unwrap(), bundle);
        }
    }

    #[test]
    fn corrupted_files_are_rejected() {
        let bundle = generate_dataset(&GenConfig { num_videos: 20, ..Default::default() }).unwrap();
        let mut buf = Vec::new();
        write_dataset(&bundle, &mut buf).unwrap();
        assert!(read_dataset(&mut &buf[..buf.len() - 3]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_dataset(&mut bad.as_slice()).is_err());
    }
}
