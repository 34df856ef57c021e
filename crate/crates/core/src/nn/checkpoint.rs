use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{Cnn, ModelConfig};
use super::optim::{Adam, Param};
use crate::cube_io::{self, with_suffix, PaletteEntry, FORMAT_VERSION};
use crate::dataset::BandStats;
use crate::error::{Error, Result};

/// A network together with what is needed to apply it to a raw cube.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub net: Cnn,
    pub band_stats: BandStats,
    pub classes: Vec<PaletteEntry>,
    pub seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    version: u32,
    config: ModelConfig,
    band_stats: BandStats,
    classes: Vec<PaletteEntry>,
    seed: u64,
    epochs_trained: usize,
    adam: Adam,
    dtype: String,
    tensors: Vec<TensorEntry>,
}

fn param_slots<'a>(prefix: &str, p: &'a mut Param, out: &mut Vec<(String, &'a mut Vec<f64>)>) {
    out.push((prefix.to_string(), &mut p.value));
    out.push((format!("{prefix}.adam_m"), &mut p.m));
    out.push((format!("{prefix}.adam_v"), &mut p.v));
}

/// Every persistent tensor in a fixed order.
fn slots(net: &mut Cnn) -> Vec<(String, &mut Vec<f64>)> {
    let mut out = Vec::new();
    for (i, (conv, bn)) in net.convs.iter_mut().zip(net.norms.iter_mut()).enumerate() {
        param_slots(&format!("conv{i}.weight"), &mut conv.weight, &mut out);
        param_slots(&format!("conv{i}.bias"), &mut conv.bias, &mut out);
        param_slots(&format!("bn{i}.gamma"), &mut bn.gamma, &mut out);
        param_slots(&format!("bn{i}.beta"), &mut bn.beta, &mut out);
        out.push((format!("bn{i}.running_mean"), &mut bn.running_mean));
        out.push((format!("bn{i}.running_var"), &mut bn.running_var));
    }
    for (i, dense) in net.denses.iter_mut().enumerate() {
        param_slots(&format!("dense{i}.weight"), &mut dense.weight, &mut out);
        param_slots(&format!("dense{i}.bias"), &mut dense.bias, &mut out);
    }
    out
}

/// Write `<path>.json` (configuration, statistics, palette, optimizer
/// state, tensor table) and `<path>.bin` (tensors, f64 little-endian, in
/// table order).
pub fn write_checkpoint(model: &TrainedModel, path: &Path) -> Result<()> {
    let mut net = model.net.clone();
    let epochs_trained = net.epochs_trained;
    let adam = net.adam;
    let config = net.config.clone();
    let slots = slots(&mut net);
    let tensors = slots
        .iter()
        .map(|(name, v)| TensorEntry {
            name: name.clone(),
            len: v.len(),
        })
        .collect();
    let values: Vec<f64> = slots.iter().flat_map(|(_, v)| v.iter().copied()).collect();
    cube_io::write_f64_le(&with_suffix(path, ".bin"), &values)?;
    cube_io::write_json(
        &with_suffix(path, ".json"),
        &CheckpointManifest {
            version: FORMAT_VERSION,
            config,
            band_stats: model.band_stats.clone(),
            classes: model.classes.clone(),
            seed: model.seed,
            epochs_trained,
            adam,
            dtype: "f64le".into(),
            tensors,
        },
    )
}

pub fn read_checkpoint(path: &Path) -> Result<TrainedModel> {
    let manifest_path = with_suffix(path, ".json");
    let m: CheckpointManifest = cube_io::read_json(&manifest_path)?;
    let bad = |reason: String| Error::format(&manifest_path, reason);
    if m.version != FORMAT_VERSION || m.dtype != "f64le" {
        return Err(bad("unsupported checkpoint encoding".into()));
    }
    let mut net = Cnn::new(m.config.clone(), m.seed).map_err(|e| bad(e.to_string()))?;
    if m.classes.len() != m.config.class_count || m.band_stats.bands() != m.config.bands {
        return Err(bad("palette or band statistics do not match the model".into()));
    }
    let total: usize = m.tensors.iter().map(|t| t.len).sum();
    let values = cube_io::read_f64_le(&with_suffix(path, ".bin"), total)?;
    {
        let slots = slots(&mut net);
        if slots.len() != m.tensors.len() {
            return Err(bad(format!("expected {} tensors, table lists {}", slots.len(), m.tensors.len())));
        }
        let mut offset = 0;
        for ((name, dst), entry) in slots.into_iter().zip(&m.tensors) {
            if name != entry.name || dst.len() != entry.len {
                return Err(bad(format!("tensor {} does not match the model layout", entry.name)));
            }
            dst.copy_from_slice(&values[offset..offset + entry.len]);
            offset += entry.len;
        }
    }
    if net.norms.iter().any(|bn| bn.running_var.iter().any(|v| *v < 0.0)) {
        return Err(bad("negative running variance".into()));
    }
    net.adam = m.adam;
    net.epochs_trained = m.epochs_trained;
    Ok(TrainedModel {
        net,
        band_stats: m.band_stats,
        classes: m.classes,
        seed: m.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cube_io::default_palette;

    fn model() -> TrainedModel {
        let mut net = Cnn::new(ModelConfig::new(3, 2, 3), 4).unwrap();
        net.norms[0].running_var[1] = 0.37;
        net.convs[1].weight.m[0] = 1.5;
        net.adam.step = 12;
        net.epochs_trained = 2;
        TrainedModel {
            net,
            band_stats: BandStats { mean: vec![0.1, 0.2], std: vec![1.0, 2.0] },
            classes: default_palette(&["a".into(), "b".into(), "c".into()]),
            seed: 4,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ckpt");
        let m = model();
        write_checkpoint(&m, &p).unwrap();
        assert_eq!(read_checkpoint(&p).unwrap(), m);
        let first = std::fs::read(with_suffix(&p, ".bin")).unwrap();
        write_checkpoint(&read_checkpoint(&p).unwrap(), &p).unwrap();
        assert_eq!(std::fs::read(with_suffix(&p, ".bin")).unwrap(), first);
    }

    #[test]
    fn truncated_weights_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ckpt");
        write_checkpoint(&model(), &p).unwrap();
        let bin = with_suffix(&p, ".bin");
        let bytes = std::fs::read(&bin).unwrap();
        std::fs::write(&bin, &bytes[..bytes.len() - 3]).unwrap();
        let msg = read_checkpoint(&p).unwrap_err().to_string();
        assert!(msg.contains("expected"), "{msg}");
    }
}
