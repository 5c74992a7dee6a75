//! On-disk corpus layout.
//!
//! A corpus directory holds `meta.json`, `concepts.txt`, and per split a
//! JSON Lines manifest `<split>.jsonl` next to its binary feature file
//! `<split>.feat`:
//!
//! ```text
//! "DMTCIFEAT\0" | u32 num_records | u32 d | per record:
//!     u32 id_len | id (UTF-8) | u32 L_r | L_r × d f32 (row-major)
//! ```
//! All integers and floats are little-endian.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::synth::Confound;
use super::{BocLabel, ConceptSet, ConceptVocabulary, Corpus, ImageRecord};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const FEATURE_MAGIC: &[u8; 10] = b"DMTCIFEAT\0";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusMeta {
    pub categories: Vec<String>,
    #[serde(default)]
    pub agents: Vec<String>,
    pub feature_dim: usize,
    pub max_caption_len: usize,
    #[serde(default)]
    pub confounds: Vec<Confound>,
    pub concepts: ConceptVocabulary,
    #[serde(default)]
    pub seed: Option<u64>,
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub n_regions: usize,
    pub captions: Vec<String>,
    pub boc: BTreeMap<String, usize>,
    pub concepts: Vec<Vec<String>>,
    pub counterexample: bool,
}

fn write_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Malformed(format!("value {v} exceeds u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::Malformed(format!("truncated feature file reading {what}")))?;
    Ok(u32::from_le_bytes(b) as usize)
}

pub fn write_features(path: &Path, records: &[ImageRecord], d: usize) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(FEATURE_MAGIC)?;
    write_u32(&mut w, records.len())?;
    write_u32(&mut w, d)?;
    for r in records {
        if r.features.cols() != d {
            return Err(Error::Dimension {
                id: r.id.clone(),
                expected: d,
                found: r.features.cols(),
            });
        }
        write_u32(&mut w, r.id.len())?;
        w.write_all(r.id.as_bytes())?;
        write_u32(&mut w, r.features.rows())?;
        for &x in r.features.data() {
            w.write_all(&(x as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads `(id, features)` pairs and the declared width `d`.
pub fn read_features(path: &Path) -> Result<(usize, Vec<(String, Matrix)>)> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 10];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Malformed("feature file shorter than its header".into()))?;
    if &magic != FEATURE_MAGIC {
        return Err(Error::Malformed(format!("{} is not a DMTCIFEAT file", path.display())));
    }
    let n = read_u32(&mut r, "record count")?;
    let d = read_u32(&mut r, "feature width")?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let id_len = read_u32(&mut r, "id length")?;
        let mut id = vec![0u8; id_len];
        r.read_exact(&mut id)
            .map_err(|_| Error::Malformed("truncated record id".into()))?;
        let id = String::from_utf8(id).map_err(|_| Error::Malformed("record id is not UTF-8".into()))?;
        let rows = read_u32(&mut r, "region count")?;
        let mut buf = vec![0u8; rows * d * 4];
        r.read_exact(&mut buf)
            .map_err(|_| Error::Malformed(format!("record {id}: truncated feature rows")))?;
        let data = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        out.push((id, Matrix::from_vec(rows, d, data)));
    }
    Ok((d, out))
}

fn to_manifest(r: &ImageRecord, categories: &[String]) -> ManifestRecord {
    ManifestRecord {
        id: r.id.clone(),
        n_regions: r.num_regions(),
        captions: r.captions.clone(),
        boc: categories
            .iter()
            .zip(&r.boc.counts)
            .map(|(c, &n)| (c.clone(), n))
            .collect(),
        concepts: r.concepts.iter().map(|s| s.iter().cloned().collect()).collect(),
        counterexample: r.counterexample,
    }
}

pub fn write_split(dir: &Path, split: &str, records: &[ImageRecord], meta: &CorpusMeta) -> Result<()> {
    let mut w = BufWriter::new(File::create(dir.join(format!("{split}.jsonl")))?);
    for r in records {
        serde_json::to_writer(&mut w, &to_manifest(r, &meta.categories))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    write_features(&dir.join(format!("{split}.feat")), records, meta.feature_dim)
}

pub fn write_concept_lexicon(path: &Path, lexicon: &ConceptVocabulary) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "# concept lexicon: one concept per line")?;
    for c in lexicon.concepts() {
        writeln!(w, "{c}")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a lexicon file; frequencies are counted over `captions`.
pub fn read_concept_lexicon<S: AsRef<str>>(path: &Path, captions: &[S]) -> Result<ConceptVocabulary> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut concepts: Vec<String> = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let c = t.to_lowercase();
        if !concepts.contains(&c) {
            concepts.push(c);
        }
    }
    let mut freq = vec![0usize; concepts.len()];
    for cap in captions {
        for tok in super::tokenize(cap.as_ref()) {
            if let Some(i) = concepts.iter().position(|c| *c == tok) {
                freq[i] += 1;
            }
        }
    }
    Ok(ConceptVocabulary::new(
        concepts,
        freq,
        Some(path.display().to_string()),
    ))
}

pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<()> {
    fs::create_dir_all(dir)?;
    let meta = serde_json::to_string_pretty(&corpus.meta)?;
    fs::write(dir.join("meta.json"), meta)?;
    write_concept_lexicon(&dir.join("concepts.txt"), &corpus.meta.concepts)?;
    write_split(dir, "train", &corpus.train, &corpus.meta)?;
    write_split(dir, "val", &corpus.val, &corpus.meta)?;
    write_split(dir, "test", &corpus.test, &corpus.meta)?;
    Ok(())
}

pub fn read_meta(dir: &Path) -> Result<CorpusMeta> {
    let path = dir.join("meta.json");
    if !path.exists() {
        return Err(Error::MissingFile(path));
    }
    let mut meta: CorpusMeta = serde_json::from_str(&fs::read_to_string(path)?)?;
    meta.concepts.reindex();
    Ok(meta)
}

fn feature_path_for(manifest: &Path) -> PathBuf {
    manifest.with_extension("feat")
}

/// Loads one split from its manifest and sibling feature file. Category order
/// and the expected width come from `meta.json` in the same directory when
/// present; otherwise categories are the sorted manifest keys.
pub fn load_feature_corpus(manifest_path: &Path) -> Result<Vec<ImageRecord>> {
    if !manifest_path.exists() {
        return Err(Error::MissingFile(manifest_path.to_path_buf()));
    }
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let meta = if dir.join("meta.json").exists() {
        Some(read_meta(dir)?)
    } else {
        None
    };
    let mut manifest = Vec::new();
    for (lineno, line) in BufReader::new(File::open(manifest_path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Malformed(format!("{}:{}: {e}", manifest_path.display(), lineno + 1)))?;
        manifest.push(rec);
    }
    let categories: Vec<String> = match &meta {
        Some(m) => m.categories.clone(),
        None => {
            let mut c: Vec<String> = manifest.iter().flat_map(|r| r.boc.keys().cloned()).collect();
            c.sort();
            c.dedup();
            c
        }
    };
    let (d, features) = read_features(&feature_path_for(manifest_path))?;
    let expected_d = meta.as_ref().map_or(d, |m| m.feature_dim);
    if features.len() != manifest.len() {
        return Err(Error::Malformed(format!(
            "manifest has {} records but feature file has {}",
            manifest.len(),
            features.len()
        )));
    }
    let max_len = meta.as_ref().map(|m| m.max_caption_len);
    let mut out = Vec::with_capacity(manifest.len());
    for (rec, (fid, feats)) in manifest.into_iter().zip(features) {
        if rec.id != fid {
            return Err(Error::Malformed(format!(
                "manifest record `{}` does not match feature record `{fid}`",
                rec.id
            )));
        }
        if d != expected_d {
            return Err(Error::Dimension {
                id: rec.id,
                expected: expected_d,
                found: d,
            });
        }
        if feats.rows() != rec.n_regions {
            return Err(Error::Malformed(format!(
                "record `{}`: n_regions {} but {} feature rows",
                rec.id,
                rec.n_regions,
                feats.rows()
            )));
        }
        if rec.concepts.len() != rec.captions.len() {
            return Err(Error::Malformed(format!(
                "record `{}`: {} concept sets for {} captions",
                rec.id,
                rec.concepts.len(),
                rec.captions.len()
            )));
        }
        if let Some(t) = max_len {
            if let Some(c) = rec.captions.iter().find(|c| super::tokenize(c).len() > t) {
                return Err(Error::Malformed(format!("record `{}`: caption longer than {t}: {c}", rec.id)));
            }
        }
        let mut counts = vec![0usize; categories.len()];
        for (cat, n) in &rec.boc {
            let j = categories
                .iter()
                .position(|c| c == cat)
                .ok_or_else(|| Error::Malformed(format!("record `{}`: unknown category {cat}", rec.id)))?;
            counts[j] = *n;
        }
        if let Some(m) = &meta {
            for set in &rec.concepts {
                if let Some(c) = set.iter().find(|c| !m.concepts.contains(c)) {
                    return Err(Error::Malformed(format!(
                        "record `{}`: concept `{c}` not in the lexicon",
                        rec.id
                    )));
                }
            }
        }
        out.push(ImageRecord {
            id: rec.id,
            features: feats,
            captions: rec.captions,
            boc: BocLabel::new(counts),
            concepts: rec
                .concepts
                .into_iter()
                .map(|s| s.into_iter().collect::<ConceptSet>())
                .collect(),
            counterexample: rec.counterexample,
        });
    }
    Ok(out)
}

impl Corpus {
    /// Loads the three splits written by [`write_corpus`].
    pub fn load(dir: &Path) -> Result<Corpus> {
        let meta = read_meta(dir)?;
        Ok(Corpus {
            train: load_feature_corpus(&dir.join("train.jsonl"))?,
            val: load_feature_corpus(&dir.join("val.jsonl"))?,
            test: load_feature_corpus(&dir.join("test.jsonl"))?,
            meta,
        })
    }
}
