//! Per-matrix density tables from a checkpoint.

use serde::Serialize;

use crate::autodiff::sigmoid;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::model::locate;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MatrixDensity {
    pub name: String,
    pub layer: usize,
    pub sublayer: &'static str,
    /// `"mha"` or `"fc"`.
    pub group: &'static str,
    pub elements: usize,
    /// `k(σ_i)` when the checkpoint carries thresholds, the mask density otherwise.
    pub density: f64,
    pub mask_density: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupMean {
    pub layer: usize,
    pub group: &'static str,
    pub density: f64,
    pub mask_density: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DensityReport {
    pub matrices: Vec<MatrixDensity>,
    pub groups: Vec<GroupMean>,
    /// Element-weighted mean of `density`; equals `R(σ)` for threshold runs.
    pub weighted_density: f64,
    pub weighted_mask_density: f64,
    pub from_thresholds: bool,
}

pub fn report_layer_densities(checkpoint: &Checkpoint) -> Result<DensityReport> {
    let model = &checkpoint.model;
    let prunables = model.prunables();
    let keep = match &checkpoint.thresholds {
        Some(th) => {
            if th.sigma.len() != prunables.len() {
                return Err(Error::Format(format!(
                    "{} thresholds for {} matrices",
                    th.sigma.len(),
                    prunables.len()
                )));
            }
            if !(th.temperature > 0.0) {
                return Err(Error::Format(format!("temperature {} in checkpoint", th.temperature)));
            }
            Some(th.sigma.iter().map(|s| sigmoid(s / th.temperature)).collect::<Vec<_>>())
        }
        None => None,
    };
    let mut matrices = Vec::with_capacity(prunables.len());
    for (i, p) in prunables.iter().enumerate() {
        let (layer, role) = locate(i);
        let mask_density = p.mask().density();
        matrices.push(MatrixDensity {
            name: p.name().to_string(),
            layer,
            sublayer: role.label(),
            group: role.group(),
            elements: p.geometry().element_count(),
            density: keep.as_ref().map_or(mask_density, |k| k[i]),
            mask_density,
        });
    }

    let mut groups = Vec::new();
    for layer in 0..model.layers.len() {
        for group in ["mha", "fc"] {
            let members: Vec<&MatrixDensity> = matrices
                .iter()
                .filter(|m| m.layer == layer && m.group == group)
                .collect();
            let n = members.len() as f64;
            groups.push(GroupMean {
                layer,
                group,
                density: members.iter().map(|m| m.density).sum::<f64>() / n,
                mask_density: members.iter().map(|m| m.mask_density).sum::<f64>() / n,
            });
        }
    }

    let total: usize = matrices.iter().map(|m| m.elements).sum();
    let weighted = |f: fn(&MatrixDensity) -> f64| {
        matrices
            .iter()
            .map(|m| f(m) * m.elements as f64 / total as f64)
            .sum::<f64>()
    };
    Ok(DensityReport {
        weighted_density: weighted(|m| m.density),
        weighted_mask_density: weighted(|m| m.mask_density),
        groups,
        matrices,
        from_thresholds: keep.is_some(),
    })
}

impl DensityReport {
    /// One row per matrix, then one per layer group, then the weighted total.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
        w.write_record(["kind", "matrix", "layer", "sublayer", "group", "elements", "density", "mask_density"])
            .map_err(io)?;
        for m in &self.matrices {
            w.write_record([
                "matrix",
                &m.name,
                &m.layer.to_string(),
                m.sublayer,
                m.group,
                &m.elements.to_string(),
                &m.density.to_string(),
                &m.mask_density.to_string(),
            ])
            .map_err(io)?;
        }
        for g in &self.groups {
            w.write_record([
                "group_mean",
                "",
                &g.layer.to_string(),
                "",
                g.group,
                "",
                &g.density.to_string(),
                &g.mask_density.to_string(),
            ])
            .map_err(io)?;
        }
        let total: usize = self.matrices.iter().map(|m| m.elements).sum();
        w.write_record([
            "weighted_mean",
            "",
            "",
            "",
            "",
            &total.to_string(),
            &self.weighted_density.to_string(),
            &self.weighted_mask_density.to_string(),
        ])
        .map_err(io)?;
        let bytes = w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
        Ok(String::from_utf8(bytes).expect("csv of utf-8 fields"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::SavedThresholds;
    use crate::model::{GranularityProfile, ModelConfig, ToyModel};
    use crate::threshold::SIGMA_INIT_SCALE;

    fn model(layers: usize) -> ToyModel {
        let cfg = ModelConfig {
            vocab: 8,
            seq_len: 4,
            hidden: 16,
            heads: 2,
            ffn: 32,
            layers,
            classes: 2,
        };
        ToyModel::new(cfg, GranularityProfile::S1, 1).unwrap()
    }

    #[test]
    fn fresh_thresholds_report_sigmoid_five() {
        let t = 32.0;
        let ck = Checkpoint {
            model: model(2),
            thresholds: Some(SavedThresholds {
                temperature: t,
                sigma: vec![SIGMA_INIT_SCALE * t; 12],
            }),
        };
        let r = report_layer_densities(&ck).unwrap();
        assert_eq!(r.matrices.len(), 12);
        for m in &r.matrices {
            assert!((m.density - 0.993307).abs() < 1e-6);
        }
        assert_eq!(r.groups.len(), 4);
        assert!((r.weighted_density - 0.993307).abs() < 1e-6);
    }

    #[test]
    fn reproduces_hand_set_thresholds() {
        let mut sigma = vec![0.0; 6];
        sigma[0] = 1.5;
        sigma[5] = -3.0;
        let ck = Checkpoint {
            model: model(1),
            thresholds: Some(SavedThresholds {
                temperature: 1.0,
                sigma: sigma.clone(),
            }),
        };
        let r = report_layer_densities(&ck).unwrap();
        assert_eq!(r.matrices[0].density, sigmoid(1.5));
        assert_eq!(r.matrices[5].density, sigmoid(-3.0));
        assert_eq!(r.matrices[5].sublayer, "ffn.out");
        assert_eq!(r.groups[0].group, "mha");
        assert!((r.groups[0].density - (sigmoid(1.5) + 1.5) / 4.0).abs() < 1e-15);
        let csv = r.to_csv().unwrap();
        assert_eq!(csv.lines().count(), 1 + 6 + 2 + 1);
        assert!(csv.lines().nth(1).unwrap().starts_with("matrix,layer0.attn.query,0,attn.query,mha,256,"));
    }

    #[test]
    fn dense_checkpoints_report_masks() {
        let ck = Checkpoint {
            model: model(1),
            thresholds: None,
        };
        let r = report_layer_densities(&ck).unwrap();
        assert!(!r.from_thresholds);
        assert!(r.matrices.iter().all(|m| m.density == 1.0));
        assert_eq!(r.weighted_mask_density, 1.0);
    }
}
