use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::safetensors::{self, Dtype, SafeTensors, Tensor};
use super::{
    role_shape, DecoderWeights, MlpKind, ModelConfig, ModelError, ModelGraph, Nonlinearity, NormKind,
    ResidualPlacement, TensorRef, LAYER_ROLES,
};
use crate::linalg::{RealMatrix, RealVector};

/// Metadata key under which generated files carry their [`ModelConfig`].
pub const CONFIG_METADATA_KEY: &str = "slanc.config";

/// Maps weight roles onto tensor names in a checkpoint.
///
/// Per-layer role names are appended to `layer_template` after substituting
/// `{i}` with the layer index; a role name that itself contains `{i}` is used
/// as a full name. `globals` names the boundary norm tensors. Roles listed
/// in `transpose` are stored as `(out, in)` and are transposed on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NameMap {
    pub layer_template: String,
    pub roles: BTreeMap<String, String>,
    #[serde(default)]
    pub globals: BTreeMap<String, String>,
    #[serde(default)]
    pub transpose: Vec<String>,
}

impl Default for NameMap {
    /// Llama-style naming with PyTorch `(out, in)` linear weights.
    fn default() -> Self {
        let roles = [
            ("gamma1", "input_layernorm.weight"),
            ("beta1", "input_layernorm.bias"),
            ("gamma2", "post_attention_layernorm.weight"),
            ("beta2", "post_attention_layernorm.bias"),
            ("w_q", "self_attn.q_proj.weight"),
            ("w_k", "self_attn.k_proj.weight"),
            ("w_v", "self_attn.v_proj.weight"),
            ("p", "self_attn.o_proj.weight"),
            ("e", "mlp.gate_proj.weight"),
            ("b", "mlp.up_proj.weight"),
            ("g", "mlp.down_proj.weight"),
        ];
        let globals = [
            ("boundary_gamma", "model.norm.weight"),
            ("boundary_beta", "model.norm.bias"),
        ];
        Self {
            layer_template: "model.layers.{i}.".into(),
            roles: roles.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect(),
            globals: globals.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect(),
            transpose: ["w_q", "w_k", "w_v", "p", "e", "b", "g"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        }
    }
}

impl NameMap {
    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let map: NameMap = serde_json::from_str(text)?;
        map.check()?;
        Ok(map)
    }

    pub fn from_file(path: &Path) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    fn check(&self) -> Result<(), ModelError> {
        if let Some(r) = self.roles.keys().find(|r| !LAYER_ROLES.contains(&r.as_str())) {
            return Err(ModelError::NameMap(format!("unknown role `{r}`")));
        }
        if let Some(g) = self
            .globals
            .keys()
            .find(|g| !matches!(g.as_str(), "boundary_gamma" | "boundary_beta"))
        {
            return Err(ModelError::NameMap(format!("unknown global `{g}`")));
        }
        for role in ["gamma1", "gamma2", "w_q", "w_k", "w_v", "p", "e", "g"] {
            if !self.roles.contains_key(role) {
                return Err(ModelError::NameMap(format!("required role `{role}` is not mapped")));
            }
        }
        if !self.globals.contains_key("boundary_gamma") {
            return Err(ModelError::NameMap(
                "required global `boundary_gamma` is not mapped".into(),
            ));
        }
        Ok(())
    }

    pub fn tensor_name(&self, layer: usize, role: &str) -> Option<String> {
        let suffix = self.roles.get(role)?;
        let i = layer.to_string();
        Some(if suffix.contains("{i}") {
            suffix.replace("{i}", &i)
        } else {
            format!("{}{}", self.layer_template.replace("{i}", &i), suffix)
        })
    }

    fn transposed(&self, role: &str) -> bool {
        self.transpose.iter().any(|r| r == role)
    }
}

pub fn load_safetensors(
    path: &Path,
    name_map: &NameMap,
    config: Option<&ModelConfig>,
) -> Result<ModelGraph, ModelError> {
    let bytes = std::fs::read(path).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    load_safetensors_bytes(&bytes, name_map, config)
}

/// Build a graph from safetensors bytes.
///
/// The config comes from `config` if given, else from the file's metadata,
/// else it is inferred from tensor shapes (pre-LN, SiLU, eps 1e-5, 128-wide
/// heads when they divide `d_model`).
pub fn load_safetensors_bytes(
    bytes: &[u8],
    name_map: &NameMap,
    config: Option<&ModelConfig>,
) -> Result<ModelGraph, ModelError> {
    let st = safetensors::parse(bytes)?;
    let config = match config {
        Some(c) => c.clone(),
        None => match st.metadata.get(CONFIG_METADATA_KEY) {
            Some(text) => serde_json::from_str(text)?,
            None => infer_config(&st, name_map)?,
        },
    };
    config.check()?;

    let mut used = BTreeSet::new();
    let take = |name: String| -> Option<(String, &Tensor)> {
        let t = st.tensors.get(&name)?;
        Some((name, t))
    };
    let mut claim = |name: &str| -> Result<(), ModelError> {
        if used.insert(name.to_string()) {
            Ok(())
        } else {
            Err(ModelError::DuplicateTensor(name.to_string()))
        }
    };

    let vector = |name: &str, t: &Tensor, d: usize| -> Result<RealVector, ModelError> {
        if t.shape != [d] {
            return Err(ModelError::ShapeMismatch {
                name: name.to_string(),
                expected: vec![d],
                actual: t.shape.clone(),
            });
        }
        Ok(RealVector::new(t.data.clone()))
    };

    let d = config.d_model;
    let boundary_name = name_map.globals["boundary_gamma"].clone();
    let (_, t) = take(boundary_name.clone()).ok_or_else(|| ModelError::MissingTensor(boundary_name.clone()))?;
    claim(&boundary_name)?;
    let boundary_gamma = vector(&boundary_name, t, d)?;
    let boundary_beta = if config.has_beta() {
        let name = name_map
            .globals
            .get("boundary_beta")
            .ok_or_else(|| ModelError::NameMap("LayerNorm model needs `boundary_beta`".into()))?
            .clone();
        let (_, t) = take(name.clone()).ok_or_else(|| ModelError::MissingTensor(name.clone()))?;
        claim(&name)?;
        Some(vector(&name, t, d)?)
    } else {
        None
    };

    let mut layers = Vec::with_capacity(config.n_layers);
    for i in 0..config.n_layers {
        let mut vectors: BTreeMap<&str, RealVector> = BTreeMap::new();
        let mut matrices: BTreeMap<&str, RealMatrix> = BTreeMap::new();
        for role in LAYER_ROLES {
            let required = match role {
                "beta1" | "beta2" => config.has_beta(),
                "b" => config.has_up_proj(),
                _ => true,
            };
            if !required {
                continue;
            }
            let name = name_map
                .tensor_name(i, role)
                .ok_or_else(|| ModelError::NameMap(format!("role `{role}` is not mapped")))?;
            let (name, t) = take(name.clone()).ok_or(ModelError::MissingTensor(name))?;
            claim(&name)?;
            let expected = role_shape(&config, role).expect("known role");
            if expected.len() == 1 {
                vectors.insert(role, vector(&name, t, d)?);
                continue;
            }
            let stored = if name_map.transposed(role) {
                vec![expected[1], expected[0]]
            } else {
                expected.clone()
            };
            if t.shape != stored {
                return Err(ModelError::ShapeMismatch {
                    name,
                    expected: stored,
                    actual: t.shape.clone(),
                });
            }
            let m = RealMatrix::new(stored[0], stored[1], t.data.clone()).expect("shape checked");
            matrices.insert(role, if name_map.transposed(role) { m.transpose() } else { m });
        }
        let mut mat = |r: &str| matrices.remove(r);
        let mut vec_ = |r: &str| vectors.remove(r);
        layers.push(DecoderWeights {
            gamma1: vec_("gamma1").unwrap(),
            beta1: vec_("beta1"),
            gamma2: vec_("gamma2").unwrap(),
            beta2: vec_("beta2"),
            w_q: mat("w_q").unwrap(),
            w_k: mat("w_k").unwrap(),
            w_v: mat("w_v").unwrap(),
            p: mat("p").unwrap(),
            e: mat("e").unwrap(),
            b: mat("b"),
            g: mat("g").unwrap(),
        });
    }

    let graph = ModelGraph {
        config,
        boundary_gamma,
        boundary_beta,
        layers,
    };
    let report = graph.validate();
    if !report.is_valid() {
        return Err(ModelError::Invalid(report));
    }
    Ok(graph)
}

fn infer_config(st: &SafeTensors, name_map: &NameMap) -> Result<ModelConfig, ModelError> {
    let present = |layer: usize, role: &str| name_map.tensor_name(layer, role).and_then(|n| st.tensors.get(&n));
    let mut n_layers = 0;
    while present(n_layers, "gamma1").is_some() {
        n_layers += 1;
    }
    if n_layers == 0 {
        return Err(ModelError::NoLayers(name_map.layer_template.clone()));
    }
    let gamma = present(0, "gamma1").unwrap();
    let d_model = gamma.shape.iter().product();
    let e_name = name_map.tensor_name(0, "e").unwrap_or_default();
    let e = present(0, "e").ok_or(ModelError::MissingTensor(e_name))?;
    let mlp_hidden = if name_map.transposed("e") {
        e.shape[0]
    } else {
        *e.shape.last().unwrap_or(&0)
    };
    let head_dim = if d_model % 128 == 0 { 128 } else { d_model };
    Ok(ModelConfig {
        d_model,
        n_heads: d_model / head_dim.max(1),
        head_dim,
        mlp_hidden,
        n_layers,
        norm_kind: if present(0, "beta1").is_some() {
            NormKind::LayerNorm
        } else {
            NormKind::RMSNorm
        },
        residual_placement: ResidualPlacement::PreLN,
        mlp_kind: if present(0, "b").is_some() {
            MlpKind::LlamaGated
        } else {
            MlpKind::Standard
        },
        nonlinearity: Nonlinearity::SiLU,
        epsilon: 1e-5,
    })
}

/// Lay a graph out as F32 safetensors under `name_map`, with the config in
/// the metadata.
pub fn graph_to_safetensors(graph: &ModelGraph, name_map: &NameMap) -> Result<Vec<u8>, ModelError> {
    name_map.check()?;
    let mut st = SafeTensors::default();
    let mut put = |name: String, role: &str, t: TensorRef<'_>| -> Result<(), ModelError> {
        let tensor = match t {
            TensorRef::Vector(v) => Tensor {
                dtype: Dtype::F32,
                shape: vec![v.len()],
                data: v.as_slice().to_vec(),
            },
            TensorRef::Matrix(m) if name_map.transposed(role) => Tensor {
                dtype: Dtype::F32,
                shape: vec![m.cols(), m.rows()],
                data: m.transpose().into_data(),
            },
            TensorRef::Matrix(m) => Tensor {
                dtype: Dtype::F32,
                shape: vec![m.rows(), m.cols()],
                data: m.data().to_vec(),
            },
        };
        if st.tensors.insert(name.clone(), tensor).is_some() {
            return Err(ModelError::DuplicateTensor(name));
        }
        Ok(())
    };
    put(
        name_map.globals["boundary_gamma"].clone(),
        "boundary_gamma",
        TensorRef::Vector(&graph.boundary_gamma),
    )?;
    if let Some(b) = &graph.boundary_beta {
        let name = name_map
            .globals
            .get("boundary_beta")
            .ok_or_else(|| ModelError::NameMap("`boundary_beta` is not mapped".into()))?;
        put(name.clone(), "boundary_beta", TensorRef::Vector(b))?;
    }
    for (i, layer) in graph.layers.iter().enumerate() {
        for (role, t) in layer.roles() {
            let name = name_map
                .tensor_name(i, role)
                .ok_or_else(|| ModelError::NameMap(format!("role `{role}` is not mapped")))?;
            put(name, role, t)?;
        }
    }
    st.metadata
        .insert(CONFIG_METADATA_KEY.into(), serde_json::to_string(&graph.config)?);
    Ok(safetensors::serialize(&st))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{generate_synthetic, InitSpec};

    #[test]
    fn graph_round_trips_through_f32_file() {
        for mlp in [MlpKind::Standard, MlpKind::LlamaGated] {
            for kind in [NormKind::LayerNorm, NormKind::RMSNorm] {
                let cfg = ModelConfig {
                    mlp_kind: mlp,
                    norm_kind: kind,
                    ..ModelConfig::toy(8, 2)
                };
                let init = InitSpec {
                    gamma_std: 0.2,
                    beta_std: 0.1,
                    ..InitSpec::uniform_std(0.3)
                };
                let g = generate_synthetic(&cfg, &init, 11).unwrap();
                let map = NameMap::default();
                let bytes = graph_to_safetensors(&g, &map).unwrap();
                let back = load_safetensors_bytes(&bytes, &map, None).unwrap();
                assert_eq!(back, g);
                assert_eq!(back.fingerprint(), g.fingerprint());
            }
        }
    }

    #[test]
    fn infers_config_without_metadata() {
        let cfg = ModelConfig {
            residual_placement: ResidualPlacement::PreLN,
            n_heads: 1,
            head_dim: 8,
            ..ModelConfig::toy(8, 3)
        };
        let g = generate_synthetic(&cfg, &InitSpec::default(), 2).unwrap();
        let map = NameMap::default();
        let bytes = graph_to_safetensors(&g, &map).unwrap();
        let mut st = safetensors::parse(&bytes).unwrap();
        st.metadata.clear();
        let back = load_safetensors_bytes(&safetensors::serialize(&st), &map, None).unwrap();
        assert_eq!(back.config.n_layers, 3);
        assert_eq!(back.config.mlp_hidden, 32);
        assert_eq!(back.config.mlp_kind, MlpKind::LlamaGated);
        assert_eq!(back.config.norm_kind, NormKind::RMSNorm);
        assert_eq!(back.layers, g.layers);
    }

    #[test]
    fn missing_and_misshapen_tensors_are_named() {
        let g = generate_synthetic(&ModelConfig::toy(8, 1), &InitSpec::default(), 2).unwrap();
        let map = NameMap::default();
        let bytes = graph_to_safetensors(&g, &map).unwrap();
        let mut st = safetensors::parse(&bytes).unwrap();
        st.tensors.remove("model.layers.0.self_attn.v_proj.weight");
        match load_safetensors_bytes(&safetensors::serialize(&st), &map, None) {
            Err(ModelError::MissingTensor(n)) => assert_eq!(n, "model.layers.0.self_attn.v_proj.weight"),
            other => panic!("unexpected {other:?}"),
        }

        let mut st = safetensors::parse(&bytes).unwrap();
        st.tensors.get_mut("model.layers.0.mlp.down_proj.weight").unwrap().shape = vec![32, 8];
        match load_safetensors_bytes(&safetensors::serialize(&st), &map, None) {
            Err(ModelError::ShapeMismatch { name, .. }) => assert_eq!(name, "model.layers.0.mlp.down_proj.weight"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_roles_rejected() {
        let g = generate_synthetic(&ModelConfig::toy(8, 1), &InitSpec::default(), 2).unwrap();
        let mut map = NameMap::default();
        let bytes = graph_to_safetensors(&g, &map).unwrap();
        map.roles.insert("w_k".into(), "self_attn.q_proj.weight".into());
        assert!(matches!(
            load_safetensors_bytes(&bytes, &map, None),
            Err(ModelError::DuplicateTensor(_))
        ));
    }

    #[test]
    fn name_map_json() {
        let text = r#"{"layer_template": "blk.{i}.", "roles": {"gamma1": "n1", "gamma2": "n2",
            "w_q": "q", "w_k": "k", "w_v": "v", "p": "o", "e": "fc1", "g": "fc2"},
            "globals": {"boundary_gamma": "ln_f"}, "transpose": []}"#;
        let map = NameMap::from_json(text).unwrap();
        assert_eq!(map.tensor_name(3, "w_v").unwrap(), "blk.3.v");
        assert!(NameMap::from_json(r#"{"layer_template": "", "roles": {"zzz": "a"}}"#).is_err());
    }
}
