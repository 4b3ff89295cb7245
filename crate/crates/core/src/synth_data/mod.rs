//! Deterministic synthetic corpora and the tokenizer they are written in.

pub mod text;
pub mod tokenizer;
pub mod vqa;

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ForgeError, Result};

pub use text::{gen_text_corpus, TextInstruction, TextTag};
pub use tokenizer::{build_tokenizer, Tokenizer};
pub use vqa::{gen_vqa_corpus, Raster, Scene, VqaInstruction, VqaTag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

/// One item in this many lands in the eval partition.
const EVAL_MODULUS: u64 = 8;

/// Which partition an item belongs to, decided by a hash of its content.
pub fn item_split(question: &str, response: &str, image_digest: &str) -> Split {
    let mut h = Sha256::new();
    for part in [question, response, image_digest] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part.as_bytes());
    }
    let d = h.finalize();
    let v = u64::from_le_bytes(d[..8].try_into().expect("8 bytes"));
    if v % EVAL_MODULUS == 0 {
        Split::Eval
    } else {
        Split::Train
    }
}

fn split_rng(seed: u64, split: Split, family: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lane = match split {
        Split::Train => 0,
        Split::Eval => 1,
    };
    rng.set_stream(family * 2 + lane);
    rng
}

/// Line-delimited JSON record shared by both corpus families.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record<T> {
    task_tag: T,
    question: String,
    response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scene: Option<Scene>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| ForgeError::io(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| ForgeError::io(path, e))?;
    f.write_all(bytes).map_err(|e| ForgeError::io(path, e))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = fs::File::open(path).map_err(|e| ForgeError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| ForgeError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| ForgeError::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// Writes the corpus as JSONL; returns the file digest.
pub fn write_text_corpus(path: &Path, items: &[TextInstruction]) -> Result<String> {
    let mut buf = Vec::new();
    for it in items {
        let rec = Record {
            task_tag: it.task_tag,
            question: it.question.clone(),
            response: it.response.clone(),
            image_path: None,
            scene: None,
        };
        serde_json::to_writer(&mut buf, &rec)?;
        buf.push(b'\n');
    }
    write_file(path, &buf)?;
    Ok(sha256_hex(&buf))
}

pub fn read_text_corpus(path: &Path) -> Result<Vec<TextInstruction>> {
    let recs: Vec<Record<TextTag>> = read_jsonl(path)?;
    Ok(recs
        .into_iter()
        .map(|r| TextInstruction {
            task_tag: r.task_tag,
            question: r.question,
            response: r.response,
        })
        .collect())
}

pub fn save_png(path: &Path, img: &Raster) -> Result<()> {
    if img.channels != 1 {
        return Err(ForgeError::Data("only single-channel rasters are stored".into()));
    }
    let buf = image::GrayImage::from_raw(img.width as u32, img.height as u32, img.pixels.clone())
        .ok_or_else(|| ForgeError::Data("raster size mismatch".into()))?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| ForgeError::io(parent, e))?;
    }
    buf.save(path)
        .map_err(|e| ForgeError::Data(format!("{}: {e}", path.display())))
}

pub fn load_png(path: &Path) -> Result<Raster> {
    let img = image::open(path)
        .map_err(|e| ForgeError::Data(format!("{}: {e}", path.display())))?
        .to_luma8();
    Ok(Raster {
        height: img.height() as usize,
        width: img.width() as usize,
        channels: 1,
        pixels: img.into_raw(),
    })
}

/// Writes `<dir>/<name>.jsonl` plus one PNG per item under `<dir>/images/`.
/// Returns the JSONL digest.
pub fn write_vqa_corpus(dir: &Path, name: &str, items: &[VqaInstruction]) -> Result<String> {
    let mut buf = Vec::new();
    for (i, it) in items.iter().enumerate() {
        let rel = format!("images/{name}_{i:05}.png");
        save_png(&dir.join(&rel), &it.image)?;
        let rec = Record {
            task_tag: it.task_tag,
            question: it.question.clone(),
            response: it.response.clone(),
            image_path: Some(rel),
            scene: Some(it.scene.clone()),
        };
        serde_json::to_writer(&mut buf, &rec)?;
        buf.push(b'\n');
    }
    write_file(&dir.join(format!("{name}.jsonl")), &buf)?;
    Ok(sha256_hex(&buf))
}

pub fn read_vqa_corpus(dir: &Path, name: &str) -> Result<Vec<VqaInstruction>> {
    let recs: Vec<Record<VqaTag>> = read_jsonl(&dir.join(format!("{name}.jsonl")))?;
    recs.into_iter()
        .enumerate()
        .map(|(i, r)| {
            let rel = r
                .image_path
                .ok_or_else(|| ForgeError::Data(format!("{name} item {i} has no image_path")))?;
            let image = load_png(&dir.join(rel))?;
            let scene = r.scene.unwrap_or(Scene { objects: Vec::new() });
            Ok(VqaInstruction {
                task_tag: r.task_tag,
                scene,
                image,
                question: r.question,
                response: r.response,
            })
        })
        .collect()
}

/// Sizes of the four generated corpora.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub seed: u64,
    pub n_text_train: usize,
    pub n_vqa_train: usize,
    pub n_text_eval: usize,
    pub n_vqa_eval: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            n_text_train: 20_000,
            n_vqa_train: 20_000,
            n_text_eval: 1_000,
            n_vqa_eval: 1_000,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [self.n_text_train, self.n_vqa_train, self.n_text_eval, self.n_vqa_eval];
        if sizes.contains(&0) {
            return Err(ForgeError::Config("every corpus size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub seed: u64,
    pub config: DataConfig,
    /// File name → SHA-256 of its JSONL bytes.
    pub split_hashes: BTreeMap<String, String>,
}

impl CorpusManifest {
    /// Single digest over the whole manifest, used as report provenance.
    pub fn digest(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("manifest serialises"))
    }
}

/// The four corpora held in memory.
#[derive(Debug, Clone)]
pub struct Corpora {
    pub text_train: Vec<TextInstruction>,
    pub text_eval: Vec<TextInstruction>,
    pub vqa_train: Vec<VqaInstruction>,
    pub vqa_eval: Vec<VqaInstruction>,
    pub manifest: CorpusManifest,
}

pub const MANIFEST_FILE: &str = "MANIFEST.json";

impl Corpora {
    pub fn generate(cfg: &DataConfig) -> Result<Self> {
        cfg.validate()?;
        let text_train = gen_text_corpus(cfg.seed, cfg.n_text_train, Split::Train);
        let text_eval = gen_text_corpus(cfg.seed, cfg.n_text_eval, Split::Eval);
        let vqa_train = gen_vqa_corpus(cfg.seed, cfg.n_vqa_train, Split::Train);
        let vqa_eval = gen_vqa_corpus(cfg.seed, cfg.n_vqa_eval, Split::Eval);
        Ok(Self {
            text_train,
            text_eval,
            vqa_train,
            vqa_eval,
            manifest: CorpusManifest {
                seed: cfg.seed,
                config: cfg.clone(),
                split_hashes: BTreeMap::new(),
            },
        })
    }

    /// Writes all corpora and `MANIFEST.json` into `dir`.
    pub fn write(&mut self, dir: &Path) -> Result<()> {
        let mut hashes = BTreeMap::new();
        hashes.insert(
            "text_train.jsonl".into(),
            write_text_corpus(&dir.join("text_train.jsonl"), &self.text_train)?,
        );
        hashes.insert(
            "text_eval.jsonl".into(),
            write_text_corpus(&dir.join("text_eval.jsonl"), &self.text_eval)?,
        );
        hashes.insert("vqa_train.jsonl".into(), write_vqa_corpus(dir, "vqa_train", &self.vqa_train)?);
        hashes.insert("vqa_eval.jsonl".into(), write_vqa_corpus(dir, "vqa_eval", &self.vqa_eval)?);
        self.manifest.split_hashes = hashes;
        let json = serde_json::to_vec_pretty(&self.manifest)?;
        write_file(&dir.join(MANIFEST_FILE), &json)
    }

    /// Reads corpora written by [`write`](Self::write), verifying digests.
    pub fn read(dir: &Path) -> Result<Self> {
        let mpath: PathBuf = dir.join(MANIFEST_FILE);
        let bytes = fs::read(&mpath).map_err(|e| ForgeError::io(&mpath, e))?;
        let manifest: CorpusManifest = serde_json::from_slice(&bytes)
            .map_err(|e| ForgeError::Data(format!("{}: {e}", mpath.display())))?;
        for (file, want) in &manifest.split_hashes {
            let p = dir.join(file);
            let got = sha256_hex(&fs::read(&p).map_err(|e| ForgeError::io(&p, e))?);
            if &got != want {
                return Err(ForgeError::Data(format!("{file} does not match its manifest digest")));
            }
        }
        Ok(Self {
            text_train: read_text_corpus(&dir.join("text_train.jsonl"))?,
            text_eval: read_text_corpus(&dir.join("text_eval.jsonl"))?,
            vqa_train: read_vqa_corpus(dir, "vqa_train")?,
            vqa_eval: read_vqa_corpus(dir, "vqa_eval")?,
            manifest,
        })
    }
}
