//! On-disk layout:
//!
//! ```text
//! <root>/manifest.json
//! <root>/train/<id>.pgm  <root>/train/<id>.gt0.pbm  [<id>.gt1.pbm ...]
//! <root>/test/<id>.pgm   ...
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{read_pnm, write_pnm, BinaryMap, DataError, Image, Sample, SynthSpec};
use crate::eval::GroundTruthSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub annotators: usize,
    /// The generator settings, when the dataset is synthetic.
    pub synth: Option<SynthSpec>,
}

fn write_split(dir: &Path, samples: &[Sample]) -> crate::Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| crate::Error::io(dir, e))?;
    for s in samples {
        write_pnm(&s.image.to_pnm()?, dir.join(format!("{}.pgm", s.id)))?;
        for (k, gt) in s.gt.maps().iter().enumerate() {
            write_pnm(&gt.to_pnm(), dir.join(format!("{}.gt{k}.pbm", s.id)))?;
        }
    }
    Ok(())
}

pub fn write_dataset(
    root: impl AsRef<Path>,
    train: &[Sample],
    test: &[Sample],
    synth: Option<&SynthSpec>,
) -> crate::Result<Manifest> {
    let root = root.as_ref();
    write_split(&root.join("train"), train)?;
    write_split(&root.join("test"), test)?;
    let annotators = train
        .iter()
        .chain(test)
        .map(|s| s.gt.maps().len())
        .max()
        .unwrap_or(1);
    let manifest = Manifest {
        train: train.iter().map(|s| s.id.clone()).collect(),
        test: test.iter().map(|s| s.id.clone()).collect(),
        annotators,
        synth: synth.cloned(),
    };
    let path = root.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, text).map_err(|e| crate::Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(root: impl AsRef<Path>) -> crate::Result<Manifest> {
    let path = root.as_ref().join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| crate::Error::io(&path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| DataError::Manifest(format!("{}: {e}", path.display())).into())
}

/// Loads `"train"` or `"test"` in manifest order.
pub fn read_split(root: impl AsRef<Path>, split: &str) -> crate::Result<Vec<Sample>> {
    let root = root.as_ref();
    let manifest = read_manifest(root)?;
    let ids = match split {
        "train" => &manifest.train,
        "test" => &manifest.test,
        other => return Err(DataError::Manifest(format!("unknown split {other:?}")).into()),
    };
    let dir = root.join(split);
    ids.iter()
        .map(|id| {
            let image = Image::from_pnm(&read_pnm(dir.join(format!("{id}.pgm")))?)?;
            let mut maps = Vec::new();
            for k in 0.. {
                let p = dir.join(format!("{id}.gt{k}.pbm"));
                if !p.exists() {
                    break;
                }
                maps.push(BinaryMap::from_pnm(&read_pnm(p)?)?);
            }
            let gt = GroundTruthSet::new(maps)?;
            Ok(Sample::new(id.clone(), image, gt)?)
        })
        .collect()
}
