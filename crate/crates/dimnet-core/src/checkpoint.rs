//! Named-tensor JSON checkpoints that embed the model configuration.
//!
//! A checkpoint is self-describing: loading rebuilds the model from the
//! stored config and then requires the stored tensors to match the rebuilt
//! parameter table exactly, name for name and shape for shape. Any drift
//! (renamed parameter, changed width, missing or extra tensor) fails loudly
//! instead of silently mixing incompatible weights.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DimNet, ModelConfig};
use crate::Mat;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    config: ModelConfig,
    tensors: BTreeMap<String, Tensor>,
}

pub fn save(path: &Path, model: &DimNet) -> Result<()> {
    let mut tensors = BTreeMap::new();
    for id in model.params.ids() {
        let v = model.params.value(id);
        tensors.insert(
            model.params.name(id).to_string(),
            Tensor {
                rows: v.dim().0,
                cols: v.dim().1,
                data: v.iter().copied().collect(),
            },
        );
    }
    let file = CheckpointFile {
        format_version: FORMAT_VERSION,
        config: model.cfg().clone(),
        tensors,
    };
    let mut body = serde_json::to_string(&file)?;
    body.push('\n');
    fs::write(path, body)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<DimNet> {
    let body = fs::read_to_string(path)?;
    let file: CheckpointFile = serde_json::from_str(&body)?;
    if file.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {} (this build reads {FORMAT_VERSION})",
            file.format_version
        )));
    }
    let mut model = DimNet::new(file.config, 0)?;
    let mut seen = 0usize;
    for id in model.params.ids().collect::<Vec<_>>() {
        let name = model.params.name(id).to_string();
        let Some(t) = file.tensors.get(&name) else {
            return Err(Error::Checkpoint(format!("missing tensor `{name}`")));
        };
        let want = model.params.value(id).dim();
        if (t.rows, t.cols) != want || t.data.len() != t.rows * t.cols {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` is {}x{} with {} values, model wants {}x{}",
                t.rows,
                t.cols,
                t.data.len(),
                want.0,
                want.1
            )));
        }
        *model.params.value_mut(id) =
            Mat::from_shape_vec((t.rows, t.cols), t.data.clone()).expect("shape checked");
        seen += 1;
    }
    if seen != file.tensors.len() {
        let known: Vec<String> = model
            .params
            .ids()
            .map(|id| model.params.name(id).to_string())
            .collect();
        let extra: Vec<&String> = file
            .tensors
            .keys()
            .filter(|k| !known.contains(k))
            .collect();
        return Err(Error::Checkpoint(format!(
            "unknown tensors {extra:?} for this configuration"
        )));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::FusionScheme;
    use crate::graph::Graph;
    use crate::model::BatchItem;
    use crate::model::LossWeights;
    use crate::synthgen::{generate_corpus, CorpusSpec};

    fn tiny() -> DimNet {
        let cfg = crate::model::tests::tiny_model_cfg();
        DimNet::new(cfg, 21).unwrap()
    }

    #[test]
    fn round_trip_preserves_every_bit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let m = tiny();
        save(&path, &m).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded.cfg(), m.cfg());
        for id in m.params.ids() {
            assert_eq!(m.params.value(id), loaded.params.value(id), "{}", m.params.name(id));
        }

        let spec = CorpusSpec {
            n_accents: 3,
            n_fine: 7,
            n_coarse: 9,
            feat_dim: 5,
            utt_len: (2, 3),
            n_train: 3,
            n_dev: 1,
            n_test: 1,
            seed: 5,
            ..CorpusSpec::default()
        };
        let corpus = generate_corpus(&spec).unwrap();
        let batch: Vec<BatchItem> = corpus.train.iter().map(BatchItem::from).collect();
        let w = LossWeights::default();
        let mut g1 = Graph::new();
        let a = m.batch_loss(&mut g1, &batch, &w, None).unwrap();
        let mut g2 = Graph::new();
        let b = loaded.batch_loss(&mut g2, &batch, &w, None).unwrap();
        assert_eq!(g1.scalar(a.combined).to_bits(), g2.scalar(b.combined).to_bits());
    }

    #[test]
    fn version_and_shape_mismatches_fail_loudly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let m = tiny();
        save(&path, &m).unwrap();
        let mut v: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();

        let mut wrong_version = v.clone();
        wrong_version["format_version"] = 99.into();
        fs::write(&path, wrong_version.to_string()).unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint(_))));

        let mut missing = v.clone();
        missing["tensors"].as_object_mut().unwrap().remove("ctc_head.w");
        fs::write(&path, missing.to_string()).unwrap();
        let Err(err) = load(&path) else { panic!("missing tensor must fail") };
        assert!(err.to_string().contains("ctc_head.w"), "{err}");

        let mut extra = v.clone();
        let spare = extra["tensors"]["ctc_head.b"].clone();
        extra["tensors"]
            .as_object_mut()
            .unwrap()
            .insert("ctc_head.spare".into(), spare);
        fs::write(&path, extra.to_string()).unwrap();
        let Err(err) = load(&path) else { panic!("extra tensor must fail") };
        assert!(err.to_string().contains("ctc_head.spare"), "{err}");

        v["tensors"]["ctc_head.b"]["cols"] = 3.into();
        fs::write(&path, v.to_string()).unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn config_travels_with_the_weights() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut cfg = crate::model::tests::tiny_model_cfg();
        cfg.scheme = FusionScheme::AfId;
        cfg.detach = false;
        let m = DimNet::new(cfg.clone(), 3).unwrap();
        save(&path, &m).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(*loaded.cfg(), cfg);
    }
}
