//! Dataset persistence: binary PGM images, JSON sidecars, split manifest.
//!
//! Layout under a dataset directory:
//!
//! ```text
//! split.json                         role -> relative file names
//! labeled/scene_00000.pgm            P5, 8-bit (quantization is lossy)
//! labeled/scene_00000.json           { dots, seed, spec }
//! unlabeled/..., test/...
//! ```
//!
//! Dot lists round-trip exactly through JSON; images round-trip within
//! 1/255. Density maps are not stored - they are re-rendered from dots.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

use super::{DatasetSplit, Scene, SceneSpec};

/// Which roles to load; reading a subset provably never opens the other
/// roles' files (see [`FileAudit`]).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoleSet {
    pub labeled: bool,
    pub unlabeled: bool,
    pub test: bool,
}

impl RoleSet {
    pub const ALL: RoleSet = RoleSet {
        labeled: true,
        unlabeled: true,
        test: true,
    };

    pub const LABELED_AND_TEST: RoleSet = RoleSet {
        labeled: true,
        unlabeled: false,
        test: true,
    };
}

/// Record of every dataset file opened by a read, for audits.
#[derive(Debug, Clone, Default)]
pub struct FileAudit {
    pub opened: Vec<PathBuf>,
}

impl FileAudit {
    fn note(&mut self, path: &Path) {
        self.opened.push(path.to_path_buf());
    }

    /// Paths whose relative location falls under the given role directory.
    pub fn touched_role(&self, role: &str) -> bool {
        self.opened
            .iter()
            .any(|p| p.iter().any(|seg| seg == role))
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    labeled: Vec<String>,
    unlabeled: Vec<String>,
    test: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    dots: Vec<(f64, f64)>,
    seed: u64,
    spec: SceneSpec,
}

fn write_pgm(path: &Path, scene: &Scene) -> Result<()> {
    let mut bytes = format!("P5\n{} {}\n255\n", scene.width, scene.height).into_bytes();
    bytes.extend(
        scene
            .image
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    fs::write(path, bytes)?;
    Ok(())
}

fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let data = fs::read(path)
        .map_err(|e| CoreError::data(format!("cannot read {}: {}", path.display(), e)))?;
    let bad = |what: &str| CoreError::data(format!("{}: {}", path.display(), what));

    if !data.starts_with(b"P5") {
        return Err(bad("not a binary PGM (P5) file"));
    }
    // header: three whitespace-separated tokens after the magic, with
    // '#' comments allowed
    let mut pos = 2;
    let mut tokens = Vec::with_capacity(3);
    while tokens.len() < 3 {
        while pos < data.len() && data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < data.len() && data[pos] == b'#' {
            while pos < data.len() && data[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < data.len() && !data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        let token = std::str::from_utf8(&data[start..pos]).map_err(|_| bad("non-ascii header"))?;
        tokens.push(
            token
                .parse::<usize>()
                .map_err(|_| bad("non-numeric header field"))?,
        );
    }
    pos += 1; // single whitespace after maxval
    let (w, h, maxval) = (tokens[0], tokens[1], tokens[2]);
    if maxval != 255 {
        return Err(bad("only 8-bit PGM supported"));
    }
    if data.len() < pos + w * h {
        return Err(bad("pixel data truncated"));
    }
    let image = data[pos..pos + w * h]
        .iter()
        .map(|b| *b as f64 / 255.0)
        .collect();
    Ok((h, w, image))
}

fn write_role(dir: &Path, role: &str, scenes: &[Scene], spec: &SceneSpec) -> Result<Vec<String>> {
    let role_dir = dir.join(role);
    fs::create_dir_all(&role_dir)?;
    let mut names = Vec::with_capacity(scenes.len());
    for (i, scene) in scenes.iter().enumerate() {
        let stem = format!("scene_{:05}", i);
        write_pgm(&role_dir.join(format!("{}.pgm", stem)), scene)?;
        let sidecar = Sidecar {
            dots: scene.dots.clone(),
            seed: scene.gen_seed,
            spec: spec.clone(),
        };
        fs::write(
            role_dir.join(format!("{}.json", stem)),
            serde_json::to_vec_pretty(&sidecar)?,
        )?;
        names.push(format!("{}/{}.pgm", role, stem));
    }
    Ok(names)
}

/// Write a dataset split plus its `split.json` manifest.
pub fn write_dataset(split: &DatasetSplit, spec: &SceneSpec, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = Manifest {
        labeled: write_role(dir, "labeled", &split.labeled, spec)?,
        unlabeled: write_role(dir, "unlabeled", &split.unlabeled, spec)?,
        test: write_role(dir, "test", &split.test, spec)?,
    };
    fs::write(dir.join("split.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

fn read_role(dir: &Path, names: &[String], audit: &mut FileAudit) -> Result<Vec<Scene>> {
    let mut scenes = Vec::with_capacity(names.len());
    for name in names {
        let pgm_path = dir.join(name);
        audit.note(&pgm_path);
        let (height, width, image) = read_pgm(&pgm_path)?;
        let sidecar_path = pgm_path.with_extension("json");
        audit.note(&sidecar_path);
        let raw = fs::read(&sidecar_path).map_err(|_| {
            CoreError::data(format!("missing sidecar {}", sidecar_path.display()))
        })?;
        let sidecar: Sidecar = serde_json::from_slice(&raw).map_err(|e| {
            CoreError::data(format!("bad sidecar {}: {}", sidecar_path.display(), e))
        })?;
        for &(r, c) in &sidecar.dots {
            if r < 0.0 || c < 0.0 || r >= height as f64 || c >= width as f64 {
                return Err(CoreError::data(format!(
                    "dot ({}, {}) outside {}x{} image in {}",
                    r,
                    c,
                    height,
                    width,
                    sidecar_path.display()
                )));
            }
        }
        scenes.push(Scene {
            height,
            width,
            image,
            dots: sidecar.dots,
            gen_seed: sidecar.seed,
        });
    }
    Ok(scenes)
}

/// Read selected roles of a dataset, reporting every file opened.
pub fn read_dataset_roles(dir: &Path, roles: RoleSet) -> Result<(DatasetSplit, FileAudit)> {
    let manifest_path = dir.join("split.json");
    let raw = fs::read(&manifest_path)
        .map_err(|_| CoreError::data(format!("missing manifest {}", manifest_path.display())))?;
    let manifest: Manifest = serde_json::from_slice(&raw)
        .map_err(|e| CoreError::data(format!("bad manifest {}: {}", manifest_path.display(), e)))?;

    let mut audit = FileAudit::default();
    audit.note(&manifest_path);
    let split = DatasetSplit {
        labeled: if roles.labeled {
            read_role(dir, &manifest.labeled, &mut audit)?
        } else {
            Vec::new()
        },
        unlabeled: if roles.unlabeled {
            read_role(dir, &manifest.unlabeled, &mut audit)?
        } else {
            Vec::new()
        },
        test: if roles.test {
            read_role(dir, &manifest.test, &mut audit)?
        } else {
            Vec::new()
        },
    };
    Ok((split, audit))
}

/// Read all three roles.
pub fn read_dataset(dir: &Path) -> Result<DatasetSplit> {
    read_dataset_roles(dir, RoleSet::ALL).map(|(split, _)| split)
}
