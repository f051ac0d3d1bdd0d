//! All pipeline file access goes through [`Files`], which records every
//! read and refuses held-out target labels to commands that must not see
//! them.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use anyhow::{bail, Context, Result};
use flowadapt_core::imagecore::{
    decode_flo, decode_pgm_labels, decode_ppm, encode_flo, encode_pgm, encode_pgm_labels,
    encode_ppm,
};
use flowadapt_core::{FlowField, Image, LabelMap};

/// Directory name holding labels that only evaluation may read.
pub const EVAL_ONLY_DIR: &str = "eval_only";

pub struct Files {
    eval_access: bool,
    reads: Mutex<Vec<PathBuf>>,
}

impl Files {
    /// `eval_access` grants reads under `eval_only/`.
    pub fn new(eval_access: bool) -> Self {
        Self {
            eval_access,
            reads: Mutex::new(Vec::new()),
        }
    }

    /// Paths read so far, in order of access.
    pub fn reads(&self) -> Vec<PathBuf> {
        self.reads.lock().expect("read log poisoned").clone()
    }

    pub fn read(&self, path: &Path) -> Result<Vec<u8>> {
        if !self.eval_access && is_eval_only(path) {
            bail!("refusing to read held-out labels {}", path.display());
        }
        self.reads
            .lock()
            .expect("read log poisoned")
            .push(path.to_path_buf());
        fs::read(path).with_context(|| format!("reading {}", path.display()))
    }

    pub fn read_string(&self, path: &Path) -> Result<String> {
        String::from_utf8(self.read(path)?)
            .with_context(|| format!("{} is not UTF-8", path.display()))
    }

    pub fn write(&self, path: &Path, bytes: &[u8]) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
    }

    pub fn read_ppm(&self, path: &Path) -> Result<Image> {
        decode_ppm(&self.read(path)?).with_context(|| format!("decoding {}", path.display()))
    }

    pub fn read_labels(&self, path: &Path) -> Result<LabelMap> {
        decode_pgm_labels(&self.read(path)?).with_context(|| format!("decoding {}", path.display()))
    }

    pub fn read_flo(&self, path: &Path) -> Result<FlowField> {
        decode_flo(&self.read(path)?).with_context(|| format!("decoding {}", path.display()))
    }

    pub fn write_ppm(&self, path: &Path, img: &Image) -> Result<()> {
        self.write(path, &encode_ppm(img)?)
    }

    pub fn write_pgm(&self, path: &Path, img: &Image) -> Result<()> {
        self.write(path, &encode_pgm(img)?)
    }

    pub fn write_labels(&self, path: &Path, labels: &LabelMap) -> Result<()> {
        self.write(path, &encode_pgm_labels(labels))
    }

    pub fn write_flo(&self, path: &Path, flow: &FlowField) -> Result<()> {
        self.write(path, &encode_flo(flow)?)
    }
}

pub fn is_eval_only(path: &Path) -> bool {
    path.components().any(|c| c.as_os_str() == EVAL_ONLY_DIR)
}
