//! On-disk dataset layout shared by every stage.
//!
//! ```text
//! manifest.json           DatasetManifest
//! vocab.json              [{index, name, seen}, ...]
//! captions.jsonl          {image_id, caption} per line
//! images/{id}.png         RGB
//! gt/{id}.png             8-bit class index, 255 = unlabeled
//! proposals/{id}.rle      header "H W", one mask per line
//! embeddings/{id}/        optional bundle with tensor "proposals" [N, E]
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Bundle, Tensor};
use crate::pipeline::map::{SegmentationMap, MAX_CLASSES};
use crate::preprocess::image_io::load_png_rgb;
use crate::preprocess::{rle, BinaryMask, ImageTensor};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const VOCAB_FILE: &str = "vocab.json";
pub const CAPTIONS_FILE: &str = "captions.jsonl";
pub const IMAGES_DIR: &str = "images";
pub const GT_DIR: &str = "gt";
pub const PROPOSALS_DIR: &str = "proposals";
pub const EMBEDDINGS_DIR: &str = "embeddings";
pub const EMBEDDING_TENSOR: &str = "proposals";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabEntry {
    pub index: usize,
    pub name: String,
    pub seen: bool,
}

/// Named classes indexed `0..K`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vocabulary {
    entries: Vec<VocabEntry>,
}

impl Vocabulary {
    pub fn new(entries: Vec<VocabEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidArgument("vocabulary is empty".into()));
        }
        if entries.len() > MAX_CLASSES {
            return Err(Error::InvalidArgument(format!(
                "vocabulary has {} classes, at most {MAX_CLASSES} supported",
                entries.len()
            )));
        }
        for (i, e) in entries.iter().enumerate() {
            if e.index != i {
                return Err(Error::InvalidArgument(format!(
                    "vocabulary entry {i} has index {}",
                    e.index
                )));
            }
            if e.name.trim().is_empty() {
                return Err(Error::EmptyClassName);
            }
        }
        Ok(Self { entries })
    }

    /// All classes marked seen.
    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        Self::new(
            names
                .iter()
                .enumerate()
                .map(|(index, n)| VocabEntry { index, name: n.as_ref().to_string(), seen: true })
                .collect(),
        )
    }

    pub fn entries(&self) -> &[VocabEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.name.clone()).collect()
    }

    pub fn name(&self, index: usize) -> &str {
        &self.entries[index].name
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn seen_flags(&self) -> Vec<bool> {
        self.entries.iter().map(|e| e.seen).collect()
    }

    /// Replaces the seen flags: listed names are seen, everything else unseen.
    pub fn with_seen_list(mut self, seen: &[String]) -> Result<Self> {
        for name in seen {
            if self.index_of(name).is_none() {
                return Err(Error::InvalidArgument(format!("seen class '{name}' not in vocabulary")));
            }
        }
        for e in &mut self.entries {
            e.seen = seen.contains(&e.name);
        }
        Ok(self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let entries: Vec<VocabEntry> = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        Self::new(entries)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, &self.entries)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Caption {
    pub image_id: String,
    pub caption: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub ids: Vec<String>,
    pub image_side: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub jitter: usize,
    #[serde(default)]
    pub has_embeddings: bool,
}

/// Read access to a dataset directory.
#[derive(Debug, Clone)]
pub struct Dataset {
    root: PathBuf,
    manifest: DatasetManifest,
    vocab: Vocabulary,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let manifest: DatasetManifest = read_json(&root.join(MANIFEST_FILE))?;
        if manifest.ids.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let vocab = Vocabulary::load(&root.join(VOCAB_FILE))?;
        Ok(Self { root: root.to_path_buf(), manifest, vocab })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn ids(&self) -> &[String] {
        &self.manifest.ids
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn image_path(&self, id: &str) -> PathBuf {
        self.root.join(IMAGES_DIR).join(format!("{id}.png"))
    }

    pub fn gt_path(&self, id: &str) -> PathBuf {
        self.root.join(GT_DIR).join(format!("{id}.png"))
    }

    pub fn proposals_path(&self, id: &str) -> PathBuf {
        self.root.join(PROPOSALS_DIR).join(format!("{id}.rle"))
    }

    pub fn embeddings_dir(&self, id: &str) -> PathBuf {
        self.root.join(EMBEDDINGS_DIR).join(id)
    }

    pub fn image(&self, id: &str) -> Result<ImageTensor> {
        load_png_rgb(&self.image_path(id))
    }

    pub fn gt(&self, id: &str) -> Result<SegmentationMap> {
        let map = SegmentationMap::load_png(&self.gt_path(id))?;
        map.check_classes(self.vocab.len())?;
        Ok(map)
    }

    /// One mask per class present in the ground truth, in class order.
    pub fn gt_segments(&self, id: &str) -> Result<Vec<(usize, BinaryMask)>> {
        Ok(segments_of(&self.gt(id)?))
    }

    pub fn proposals(&self, id: &str) -> Result<Vec<BinaryMask>> {
        rle::read_masks(&self.proposals_path(id))
    }

    /// Per-proposal embeddings, if the dataset ships them.
    pub fn proposal_embeddings(&self, id: &str) -> Result<Option<Tensor<f32>>> {
        let dir = self.embeddings_dir(id);
        if !dir.exists() {
            return Ok(None);
        }
        Bundle::load(&dir)?.require::<f32>(EMBEDDING_TENSOR).map(Some)
    }

    /// Captions grouped by image in file order. Unknown ids are an error.
    pub fn captions(&self) -> Result<BTreeMap<String, Vec<String>>> {
        let all: Vec<Caption> = read_jsonl(&self.root.join(CAPTIONS_FILE))?;
        let mut out: BTreeMap<String, Vec<String>> =
            self.ids().iter().map(|id| (id.clone(), Vec::new())).collect();
        for c in all {
            match out.get_mut(&c.image_id) {
                Some(list) => list.push(c.caption),
                None => return Err(Error::IdMismatch(format!("caption for unknown image '{}'", c.image_id))),
            }
        }
        Ok(out)
    }
}

/// One mask per class present in `map`, in class order.
pub fn segments_of(map: &SegmentationMap) -> Vec<(usize, BinaryMask)> {
    map.classes_present().into_iter().map(|k| (k, map.class_mask(k))).collect()
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::json(path, e))?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut buf = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut buf, r).map_err(|e| Error::json(path, e))?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}
