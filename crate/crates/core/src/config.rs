//! Experiment configuration files (TOML with `[task]`, `[arch]`, `[train]`
//! and `[transfer]` sections).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::{
    gen_task_pair, gen_task_triple, load_csv, load_idx, scale_unit, split, standardize, Dataset, TaskPairParams,
};
use crate::error::{Error, Result};
use crate::protocol::TrainConfig;
use crate::surgery::FreezeSelector;
use crate::zoo::{block_boundaries, CutPoint, ModelSpec, Preset};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    /// Tasks `A` and `B` from [`gen_task_pair`].
    #[default]
    Pair,
    /// Tasks `G1`, `G2`, `S` from [`gen_task_triple`].
    Triple,
    /// Tasks read from `[[task.files]]`.
    Files,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preprocess {
    #[default]
    Standardize,
    ScaleUnit,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FileFormat {
    Idx,
    Csv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileTask {
    pub id: String,
    pub format: FileFormat,
    /// IDX image file or CSV file.
    pub path: PathBuf,
    /// IDX label file.
    #[serde(default)]
    pub labels: Option<PathBuf>,
    #[serde(default)]
    pub input_shape: Option<Vec<usize>>,
    /// `[train, val]` or `[train, val, test]`.
    pub split: Vec<usize>,
    #[serde(default)]
    pub split_seed: u64,
    /// Overrides the class count inferred from the largest label.
    #[serde(default)]
    pub classes: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    #[serde(default)]
    pub generator: Generator,
    #[serde(default)]
    pub preprocess: Preprocess,
    #[serde(default)]
    pub primary: Option<String>,
    #[serde(default)]
    pub secondary: Option<String>,
    #[serde(default)]
    pub synthetic: Option<TaskPairParams>,
    #[serde(default)]
    pub files: Vec<FileTask>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSection {
    /// One preset, or several for `matrix` runs.
    #[serde(default)]
    pub presets: Vec<Preset>,
    #[serde(default)]
    pub preset: Option<Preset>,
    /// Overrides the preset's default input shape; defaults to the task's.
    #[serde(default)]
    pub input_shape: Option<Vec<usize>>,
    /// A serialized spec used instead of presets.
    #[serde(default)]
    pub spec_file: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferSection {
    #[serde(default)]
    pub l_c: Option<usize>,
    #[serde(default)]
    pub group: Option<String>,
    /// Explicit sweep cut-points; defaults to the architecture's block cut-points.
    #[serde(default)]
    pub cut_points: Option<Vec<usize>>,
    #[serde(default)]
    pub workers: Option<usize>,
    /// Average sweeps over this many index folds (at least 3).
    #[serde(default)]
    pub kfold: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub task: TaskSection,
    pub arch: ArchSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub transfer: TransferSection,
    /// Directory relative paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file, returning it with the SHA-256 of its bytes.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let text = String::from_utf8(bytes.clone()).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((cfg, sha256_hex(&bytes)))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        match self.task.generator {
            Generator::Files if self.task.files.is_empty() => {
                return Err(Error::Config("[task] generator = \"files\" needs [[task.files]] entries".into()))
            }
            Generator::Pair | Generator::Triple => {
                if let Some(p) = &self.task.synthetic {
                    p.validate()?;
                }
            }
            _ => {}
        }
        if self.arch.preset.is_none() && self.arch.presets.is_empty() && self.arch.spec_file.is_none() {
            return Err(Error::Config("[arch] needs preset, presets or spec_file".into()));
        }
        if self.transfer.l_c.is_some() && self.transfer.group.is_some() {
            return Err(Error::Config("[transfer] takes l_c or group, not both".into()));
        }
        Ok(())
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Every task of the config, before preprocessing.
    pub fn raw_tasks(&self) -> Result<Vec<Dataset>> {
        let synthetic = || self.task.synthetic.clone().unwrap_or_default();
        match self.task.generator {
            Generator::Pair => {
                let (a, b) = gen_task_pair(&synthetic())?;
                Ok(vec![a, b])
            }
            Generator::Triple => Ok(gen_task_triple(&synthetic())?.into()),
            Generator::Files => self
                .task
                .files
                .iter()
                .map(|f| {
                    let path = self.resolve(&f.path);
                    let mut ds = match f.format {
                        FileFormat::Idx => {
                            let labels = f
                                .labels
                                .as_ref()
                                .ok_or_else(|| Error::Config(format!("task {}: IDX needs `labels`", f.id)))?;
                            load_idx(&path, &self.resolve(labels), &f.id)?
                        }
                        FileFormat::Csv => load_csv(&path, f.input_shape.clone(), &f.id)?,
                    };
                    if let Some(k) = f.classes {
                        ds.classes = k;
                        ds.validate()?;
                    }
                    split(&ds, &f.split, f.split_seed)
                })
                .collect(),
        }
    }

    /// Every task of the config, preprocessed.
    pub fn tasks(&self) -> Result<Vec<Dataset>> {
        self.raw_tasks()?
            .iter()
            .map(|ds| match self.task.preprocess {
                Preprocess::Standardize => standardize(ds),
                Preprocess::ScaleUnit => scale_unit(ds),
                Preprocess::None => Ok(ds.clone()),
            })
            .collect()
    }

    /// The named task, or the `index`-th when no name is given.
    pub fn pick<'a>(tasks: &'a [Dataset], id: Option<&str>, index: usize) -> Result<&'a Dataset> {
        match id {
            Some(id) => tasks
                .iter()
                .find(|t| t.task_id == id)
                .ok_or_else(|| Error::Config(format!("no task `{id}`; have {:?}", tasks.iter().map(|t| &t.task_id).collect::<Vec<_>>()))),
            None => tasks.get(index).ok_or_else(|| Error::Config(format!("config defines no task #{index}"))),
        }
    }

    /// Architectures for `input_shape`-shaped tasks with `classes` outputs.
    pub fn specs(&self, input_shape: &[usize], classes: usize) -> Result<Vec<ModelSpec>> {
        if let Some(f) = &self.arch.spec_file {
            let path = self.resolve(f);
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            return Ok(vec![ModelSpec::from_toml(&text)?.with_classes(classes)]);
        }
        let input = self.arch.input_shape.clone().unwrap_or_else(|| input_shape.to_vec());
        let specs: Vec<ModelSpec> = self
            .arch
            .preset
            .iter()
            .chain(&self.arch.presets)
            .map(|p| p.spec_with_input(classes, input.clone()))
            .collect();
        for s in &specs {
            s.validate()?;
        }
        Ok(specs)
    }

    pub fn freeze_selector(&self) -> Option<FreezeSelector> {
        match (&self.transfer.l_c, &self.transfer.group) {
            (Some(l), _) => Some(FreezeSelector::Stages(*l)),
            (_, Some(g)) => Some(FreezeSelector::Group(g.clone())),
            _ => None,
        }
    }

    /// Sweep cut-points for `spec`: the explicit list or its block cut-points.
    pub fn cut_points(&self, spec: &ModelSpec) -> Result<Vec<CutPoint>> {
        let Some(list) = &self.transfer.cut_points else {
            return Ok(block_boundaries(spec));
        };
        let named = block_boundaries(spec);
        list.iter()
            .map(|&l_c| {
                if l_c > spec.hidden_stages() {
                    return Err(Error::FreezeRange {
                        l_c,
                        max: spec.hidden_stages(),
                    });
                }
                Ok(named.iter().find(|c| c.l_c == l_c).cloned().unwrap_or(CutPoint {
                    label: format!("stage {l_c}"),
                    l_c,
                }))
            })
            .collect()
    }
}
