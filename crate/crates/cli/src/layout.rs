//! File layout under the output directory.

use std::path::{Path, PathBuf};

use vspam::encoding::ModelKind;

pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    /// Stimuli, features and responses.
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn population(&self) -> PathBuf {
        self.root.join("population.json")
    }

    pub fn models(&self, kind: ModelKind) -> PathBuf {
        self.root.join("models").join(kind.tag())
    }

    pub fn model(&self, kind: ModelKind, voxel: usize) -> PathBuf {
        self.models(kind).join(format!("voxel_{voxel:04}.json"))
    }

    pub fn paths(&self, kind: ModelKind) -> PathBuf {
        self.root.join("paths").join(kind.tag())
    }

    pub fn path_csv(&self, kind: ModelKind, voxel: usize) -> PathBuf {
        self.paths(kind).join(format!("voxel_{voxel:04}.csv"))
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("encoding_report.csv")
    }

    pub fn predictions(&self) -> PathBuf {
        self.root.join("predictions")
    }

    pub fn decode(&self) -> PathBuf {
        self.root.join("decode")
    }

    pub fn tune(&self) -> PathBuf {
        self.root.join("tune")
    }

    pub fn bold(&self) -> PathBuf {
        self.root.join("bold")
    }

    pub fn schedule(&self) -> PathBuf {
        self.bold().join("schedule.json")
    }

    pub fn bold_sim(&self) -> PathBuf {
        self.bold().join("sim")
    }

    pub fn bold_fit(&self) -> PathBuf {
        self.bold().join("fit")
    }
}
