//! Architecture descriptors: the structural metadata that gates merge
//! compatibility and drives per-layer coefficient grouping.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use regex::Regex;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{GlueError, Result};
use crate::store::TensorStore;

/// Role tag of one tensor inside the model structure. Layer-scoped roles
/// carry the decoder-layer index they belong to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorRole {
    Embedding,
    Attention(usize),
    Ffn(usize),
    Norm(usize),
    LmHead,
    Other,
}

impl TensorRole {
    /// Layer index for layer-scoped roles, None for shared tensors.
    pub fn layer(&self) -> Option<usize> {
        match self {
            TensorRole::Attention(l) | TensorRole::Ffn(l) | TensorRole::Norm(l) => Some(*l),
            _ => None,
        }
    }
}

impl fmt::Display for TensorRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorRole::Embedding => write!(f, "embedding"),
            TensorRole::Attention(l) => write!(f, "attention:{l}"),
            TensorRole::Ffn(l) => write!(f, "ffn:{l}"),
            TensorRole::Norm(l) => write!(f, "norm:{l}"),
            TensorRole::LmHead => write!(f, "lm_head"),
            TensorRole::Other => write!(f, "other"),
        }
    }
}

impl FromStr for TensorRole {
    type Err = GlueError;

    fn from_str(s: &str) -> Result<Self> {
        let parse_layer = |tail: &str| -> Result<usize> {
            tail.parse::<usize>()
                .map_err(|_| GlueError::Format(format!("bad layer index in role {s}")))
        };
        match s {
            "embedding" => Ok(TensorRole::Embedding),
            "lm_head" => Ok(TensorRole::LmHead),
            "other" => Ok(TensorRole::Other),
            _ => {
                if let Some(tail) = s.strip_prefix("attention:") {
                    Ok(TensorRole::Attention(parse_layer(tail)?))
                } else if let Some(tail) = s.strip_prefix("ffn:") {
                    Ok(TensorRole::Ffn(parse_layer(tail)?))
                } else if let Some(tail) = s.strip_prefix("norm:") {
                    Ok(TensorRole::Norm(parse_layer(tail)?))
                } else {
                    Err(GlueError::Format(format!("unknown tensor role {s}")))
                }
            }
        }
    }
}

impl Serialize for TensorRole {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for TensorRole {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Structural metadata for one checkpoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchDescriptor {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub num_heads: usize,
    pub tensor_roles: BTreeMap<String, TensorRole>,
}

impl ArchDescriptor {
    /// Checks internal consistency: positive dimensions and layer indices
    /// inside `[0, num_layers)`.
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0
            || self.hidden_dim == 0
            || self.ffn_dim == 0
            || self.vocab_size == 0
            || self.num_heads == 0
        {
            return Err(GlueError::InvalidArg(
                "descriptor dimensions must be positive".into(),
            ));
        }
        for (name, role) in &self.tensor_roles {
            if let Some(layer) = role.layer() {
                if layer >= self.num_layers {
                    return Err(GlueError::InvalidArg(format!(
                        "tensor {name} claims layer {layer} but num_layers={}",
                        self.num_layers
                    )));
                }
            }
        }
        Ok(())
    }

    /// Checks that every tensor in `store` has a role entry and vice versa.
    pub fn check_conformance(&self, store: &TensorStore) -> Result<()> {
        for name in store.names() {
            if !self.tensor_roles.contains_key(name) {
                return Err(GlueError::Format(format!(
                    "tensor {name} has no role in the manifest"
                )));
            }
        }
        for name in self.tensor_roles.keys() {
            if !store.contains(name) {
                return Err(GlueError::Format(format!(
                    "manifest/tensor mismatch: manifest names {name} but the store lacks it"
                )));
            }
        }
        Ok(())
    }

    /// True when the high-level structure (everything except the role map
    /// contents) matches.
    pub fn same_dims(&self, other: &ArchDescriptor) -> bool {
        self.num_layers == other.num_layers
            && self.hidden_dim == other.hidden_dim
            && self.ffn_dim == other.ffn_dim
            && self.vocab_size == other.vocab_size
            && self.num_heads == other.num_heads
    }
}

/// A name-pattern table mapping tensor names to roles. The default table
/// matches the Llama-style naming scheme used by the toy runtime, so real
/// and toy checkpoints share one code path.
pub struct RolePatterns {
    rules: Vec<(Regex, RoleTemplate)>,
}

enum RoleTemplate {
    Embedding,
    Attention,
    Ffn,
    Norm,
    LmHead,
    Other,
}

impl Default for RolePatterns {
    fn default() -> Self {
        let rules = vec![
            (r"^model\.embed_tokens\.weight$", RoleTemplate::Embedding),
            (
                r"^model\.layers\.(\d+)\.self_attn\.(?:q|k|v|o)_proj\.weight$",
                RoleTemplate::Attention,
            ),
            (
                r"^model\.layers\.(\d+)\.mlp\.(?:gate|up|down)_proj\.weight$",
                RoleTemplate::Ffn,
            ),
            (
                r"^model\.layers\.(\d+)\.(?:input_layernorm|post_attention_layernorm)\.weight$",
                RoleTemplate::Norm,
            ),
            (r"^model\.norm\.weight$", RoleTemplate::Other),
            (r"^lm_head\.weight$", RoleTemplate::LmHead),
        ];
        RolePatterns {
            rules: rules
                .into_iter()
                .map(|(pat, tpl)| (Regex::new(pat).expect("static pattern"), tpl))
                .collect(),
        }
    }
}

impl RolePatterns {
    /// Builds a table from `(pattern, role-kind)` pairs. Layer-scoped role
    /// kinds (`attention`, `ffn`, `norm`) require one capture group holding
    /// the layer index.
    pub fn from_rules(rules: &[(&str, &str)]) -> Result<Self> {
        let mut compiled = Vec::with_capacity(rules.len());
        for (pat, kind) in rules {
            let tpl = match *kind {
                "embedding" => RoleTemplate::Embedding,
                "attention" => RoleTemplate::Attention,
                "ffn" => RoleTemplate::Ffn,
                "norm" => RoleTemplate::Norm,
                "lm_head" => RoleTemplate::LmHead,
                "other" => RoleTemplate::Other,
                other => {
                    return Err(GlueError::InvalidArg(format!("unknown role kind {other}")))
                }
            };
            let re = Regex::new(pat)
                .map_err(|e| GlueError::InvalidArg(format!("bad pattern {pat}: {e}")))?;
            compiled.push((re, tpl));
        }
        Ok(RolePatterns { rules: compiled })
    }

    /// Role of a single tensor name; names matching no rule are `Other`.
    pub fn role_of(&self, name: &str) -> Result<TensorRole> {
        for (re, tpl) in &self.rules {
            if let Some(caps) = re.captures(name) {
                let layer = || -> Result<usize> {
                    caps.get(1)
                        .ok_or_else(|| {
                            GlueError::InvalidArg(format!(
                                "layer-scoped pattern without capture for {name}"
                            ))
                        })?
                        .as_str()
                        .parse()
                        .map_err(|_| GlueError::Format(format!("bad layer index in {name}")))
                };
                return Ok(match tpl {
                    RoleTemplate::Embedding => TensorRole::Embedding,
                    RoleTemplate::Attention => TensorRole::Attention(layer()?),
                    RoleTemplate::Ffn => TensorRole::Ffn(layer()?),
                    RoleTemplate::Norm => TensorRole::Norm(layer()?),
                    RoleTemplate::LmHead => TensorRole::LmHead,
                    RoleTemplate::Other => TensorRole::Other,
                });
            }
        }
        Ok(TensorRole::Other)
    }

    /// Derives the full role map for a set of tensor names.
    pub fn derive_roles<'a>(
        &self,
        names: impl Iterator<Item = &'a str>,
    ) -> Result<BTreeMap<String, TensorRole>> {
        let mut roles = BTreeMap::new();
        for name in names {
            roles.insert(name.to_string(), self.role_of(name)?);
        }
        Ok(roles)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_patterns_cover_llama_names() {
        let pats = RolePatterns::default();
        assert_eq!(
            pats.role_of("model.embed_tokens.weight").unwrap(),
            TensorRole::Embedding
        );
        assert_eq!(
            pats.role_of("model.layers.3.self_attn.q_proj.weight").unwrap(),
            TensorRole::Attention(3)
        );
        assert_eq!(
            pats.role_of("model.layers.10.mlp.down_proj.weight").unwrap(),
            TensorRole::Ffn(10)
        );
        assert_eq!(
            pats.role_of("model.layers.0.input_layernorm.weight").unwrap(),
            TensorRole::Norm(0)
        );
        assert_eq!(pats.role_of("model.norm.weight").unwrap(), TensorRole::Other);
        assert_eq!(pats.role_of("lm_head.weight").unwrap(), TensorRole::LmHead);
        assert_eq!(pats.role_of("rotary.buffer").unwrap(), TensorRole::Other);
    }

    #[test]
    fn role_round_trips_through_string_form() {
        for role in [
            TensorRole::Embedding,
            TensorRole::Attention(7),
            TensorRole::Ffn(0),
            TensorRole::Norm(31),
            TensorRole::LmHead,
            TensorRole::Other,
        ] {
            let s = role.to_string();
            assert_eq!(s.parse::<TensorRole>().unwrap(), role);
        }
        assert!("attention:x".parse::<TensorRole>().is_err());
        assert!("gibberish".parse::<TensorRole>().is_err());
    }

    #[test]
    fn validate_rejects_out_of_range_layer() {
        let mut roles = BTreeMap::new();
        roles.insert("w".to_string(), TensorRole::Ffn(4));
        let desc = ArchDescriptor {
            num_layers: 4,
            hidden_dim: 8,
            ffn_dim: 16,
            vocab_size: 32,
            num_heads: 2,
            tensor_roles: roles,
        };
        assert!(desc.validate().is_err());
    }
}
