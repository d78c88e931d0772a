//! Image datasets: IDX files, synthetic generators and deterministic splits.

mod idx;
mod synth;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

pub use idx::{
    encode_idx_images, encode_idx_labels, load_idx, parse_idx_images, parse_idx_labels, write_idx, IMAGES_MAGIC,
    LABELS_MAGIC,
};
pub use synth::{synth_dataset, SynthKind, SynthSpec};

use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Full,
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Full => "full",
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Single-channel images `[N×H×W]` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Option<Vec<u8>>,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Option<Vec<u8>>, split: Split) -> Result<Dataset> {
        if images.rank() != 3 {
            return Err(Error::invalid(format!("images must be [N×H×W], got {:?}", images.shape())));
        }
        if let Some(l) = &labels {
            if l.len() != images.shape()[0] {
                return Err(Error::invalid(format!("{} labels for {} images", l.len(), images.shape()[0])));
            }
        }
        Ok(Dataset { images, labels, split })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.images.shape()[2]
    }

    pub fn pixels_per_image(&self) -> usize {
        self.height() * self.width()
    }

    /// The images as rows of an `[N×(H·W)]` matrix.
    pub fn flat(&self) -> Tensor {
        Tensor::new(vec![self.len(), self.pixels_per_image()], self.images.data().to_vec())
            .expect("rank-3 images always flatten")
    }

    pub fn labels_usize(&self) -> Option<Vec<usize>> {
        self.labels.as_ref().map(|l| l.iter().map(|&v| v as usize).collect())
    }

    pub fn n_classes(&self) -> usize {
        self.labels
            .as_ref()
            .and_then(|l| l.iter().max())
            .map_or(0, |&m| m as usize + 1)
    }

    pub fn subset(&self, idx: &[usize], split: Split) -> Dataset {
        Dataset {
            images: self.images.select_rows(idx),
            labels: self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
            split,
        }
    }
}

/// Validation size used when none is given: one sixth of the data.
pub fn default_val_size(n: usize) -> usize {
    n / 6
}

/// Holds out the last `val_size` items, preserving order in both parts.
pub fn split_train_val(ds: &Dataset, val_size: usize) -> Result<(Dataset, Dataset)> {
    let n = ds.len();
    if val_size >= n {
        return Err(Error::invalid(format!("validation size {val_size} leaves no training data out of {n}")));
    }
    let cut = n - val_size;
    let train: Vec<usize> = (0..cut).collect();
    let val: Vec<usize> = (cut..n).collect();
    Ok((ds.subset(&train, Split::Train), ds.subset(&val, Split::Val)))
}

/// Where a benchmark or training run gets its images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSpec {
    /// Synthetic images; `n` covers train and validation, `n_test` is generated on top.
    Synth {
        #[serde(flatten)]
        spec: SynthSpec,
        #[serde(default)]
        n_test: usize,
        #[serde(default)]
        val_size: Option<usize>,
    },
    Idx {
        train_images: PathBuf,
        #[serde(default)]
        train_labels: Option<PathBuf>,
        #[serde(default)]
        test_images: Option<PathBuf>,
        #[serde(default)]
        test_labels: Option<PathBuf>,
        #[serde(default)]
        val_size: Option<usize>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Option<Dataset>,
}

impl Splits {
    pub fn get(&self, split: Split) -> Option<&Dataset> {
        match split {
            Split::Train => Some(&self.train),
            Split::Val => Some(&self.val),
            Split::Test => self.test.as_ref(),
            Split::Full => None,
        }
    }
}

impl DataSpec {
    pub fn from_json_str(s: &str) -> Result<DataSpec> {
        serde_json::from_str(s).map_err(|e| Error::Parse {
            offset: e.column(),
            message: e.to_string(),
        })
    }

    pub fn load(&self) -> Result<Splits> {
        match self {
            DataSpec::Synth { spec, n_test, val_size } => {
                let all = synth_dataset(&SynthSpec {
                    n: spec.n + n_test,
                    ..spec.clone()
                })?;
                let (rest, test) = if *n_test > 0 {
                    let (a, mut b) = split_train_val(&all, *n_test)?;
                    b.split = Split::Test;
                    (a, Some(b))
                } else {
                    (all, None)
                };
                let (train, val) = split_train_val(&rest, val_size.unwrap_or_else(|| default_val_size(rest.len())))?;
                Ok(Splits { train, val, test })
            }
            DataSpec::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                val_size,
            } => {
                let full = load_idx(train_images, train_labels.as_deref())?;
                let (train, val) = split_train_val(&full, val_size.unwrap_or_else(|| default_val_size(full.len())))?;
                let test = match test_images {
                    Some(p) => {
                        let mut t = load_idx(p, test_labels.as_deref())?;
                        t.split = Split::Test;
                        Some(t)
                    }
                    None => None,
                };
                Ok(Splits { train, val, test })
            }
        }
    }
}
