use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use super::metrics::{token_concentration, LayerSet};
use crate::canonical::to_canonical_string;
use crate::corpus::LabeledExample;
use crate::error::{Error, Result};
use crate::model::{forward_prompted, ModelParams, Prompt};

/// Five-number summary; quartiles use linear interpolation between order
/// statistics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxplotStats {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl BoxplotStats {
    pub fn from_values(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("boxplot sample"));
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Ok(Self {
            min: v[0],
            q1: quantile_sorted(&v, 0.25),
            median: quantile_sorted(&v, 0.5),
            q3: quantile_sorted(&v, 0.75),
            max: v[v.len() - 1],
        })
    }

    fn entries(&self) -> [(&'static str, f64); 5] {
        [
            ("min", self.min),
            ("q1", self.q1),
            ("median", self.median),
            ("q3", self.q3),
            ("max", self.max),
        ]
    }
}

fn quantile_sorted(v: &[f64], q: f64) -> f64 {
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptProfile {
    pub prompt_id: String,
    /// Prompt positions kept by the top-k restriction, in position order.
    pub top_tokens: Vec<usize>,
    /// Dataset-mean concentration on `top_tokens`, one entry per layer.
    pub layer_strength: Vec<f64>,
    /// Per-input concentration on `top_tokens` at the final layer.
    pub final_layer_boxplot: BoxplotStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PilotReport {
    pub top_k: usize,
    pub prompts: Vec<PromptProfile>,
}

/// Per-layer concentration profile of each prompt over a dataset.
///
/// Prompt tokens are ranked by their concentration averaged over all layers
/// and inputs (ties keep the earlier position); only the `top_k` best count
/// toward each layer's strength. `top_k` larger than a prompt is clamped.
pub fn pilot_profile(
    params: &ModelParams,
    prompts: &[(String, Prompt)],
    dataset: &[LabeledExample],
    top_k: usize,
) -> Result<PilotReport> {
    if top_k == 0 {
        return Err(Error::InvalidArgument("top_k must be at least 1".into()));
    }
    if dataset.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let n_layers = params.config.n_layers;
    let mut profiles = Vec::with_capacity(prompts.len());
    for (id, prompt) in prompts {
        let len = prompt.len();
        if len == 0 {
            return Err(Error::Empty("prompt"));
        }
        let k = if top_k > len {
            log::warn!("top_k {top_k} exceeds the {len} tokens of prompt `{id}`; using {len}");
            len
        } else {
            top_k
        };

        // per_input[i][l][j]: input i, layer l, prompt position j.
        let mut per_input = Vec::with_capacity(dataset.len());
        for ex in dataset {
            let (seq, out) = forward_prompted(params, prompt, &ex.tokens)?;
            let layers = (0..n_layers)
                .map(|l| token_concentration(&out.trace, seq.prompt_span(), seq.mask_pos(), &LayerSet::single(l)))
                .collect::<Result<Vec<_>>>()?;
            per_input.push(layers);
        }

        let n = dataset.len() as f64;
        let mut token_score = vec![0.0; len];
        for layers in &per_input {
            for row in layers {
                for (s, v) in token_score.iter_mut().zip(row) {
                    *s += v;
                }
            }
        }
        let mut order: Vec<usize> = (0..len).collect();
        order.sort_by(|&a, &b| token_score[b].total_cmp(&token_score[a]).then(a.cmp(&b)));
        let mut top: Vec<usize> = order[..k].to_vec();
        top.sort_unstable();

        let restricted = |row: &[f64]| top.iter().map(|&j| row[j]).sum::<f64>();
        let layer_strength = (0..n_layers)
            .map(|l| per_input.iter().map(|layers| restricted(&layers[l])).sum::<f64>() / n)
            .collect();
        let final_values: Vec<f64> = per_input
            .iter()
            .map(|layers| restricted(&layers[n_layers - 1]))
            .collect();
        profiles.push(PromptProfile {
            prompt_id: id.clone(),
            top_tokens: top,
            layer_strength,
            final_layer_boxplot: BoxplotStats::from_values(&final_values)?,
        });
    }
    Ok(PilotReport {
        top_k,
        prompts: profiles,
    })
}

impl PilotReport {
    /// `{prompt_id: {"<layer>": strength, ..., "final_layer_boxplot": {...}, "top_tokens": [...]}}`
    pub fn to_json(&self) -> Value {
        let mut root = Map::new();
        for p in &self.prompts {
            let mut entry = Map::new();
            for (l, s) in p.layer_strength.iter().enumerate() {
                entry.insert(l.to_string(), json!(s));
            }
            let bp: Map<String, Value> = p
                .final_layer_boxplot
                .entries()
                .iter()
                .map(|(k, v)| (k.to_string(), json!(v)))
                .collect();
            entry.insert("final_layer_boxplot".into(), Value::Object(bp));
            entry.insert("top_tokens".into(), json!(p.top_tokens));
            root.insert(p.prompt_id.clone(), Value::Object(entry));
        }
        Value::Object(root)
    }

    /// Rows of `prompt_id,series,key,value`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("prompt_id,series,key,value\n");
        for p in &self.prompts {
            for (l, s) in p.layer_strength.iter().enumerate() {
                writeln!(out, "{},layer_strength,{l},{s:.16e}", p.prompt_id).expect("string write");
            }
            for (k, v) in p.final_layer_boxplot.entries() {
                writeln!(out, "{},final_layer_boxplot,{k},{v:.16e}", p.prompt_id).expect("string write");
            }
            for (rank, pos) in p.top_tokens.iter().enumerate() {
                writeln!(out, "{},top_tokens,{rank},{pos}", p.prompt_id).expect("string write");
            }
        }
        out
    }

    pub fn write(&self, json_path: &Path, csv_path: &Path) -> Result<()> {
        std::fs::write(json_path, to_canonical_string(&self.to_json()))?;
        std::fs::write(csv_path, self.to_csv())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::concentration::strength;
    use crate::model::{init_params, ModelConfig};

    fn setup() -> (ModelParams, Vec<LabeledExample>) {
        let cfg = ModelConfig {
            d_model: 16,
            n_layers: 3,
            n_heads: 2,
            max_seq: 24,
            ..ModelConfig::new(20, 1, 0)
        };
        let data = (0..6)
            .map(|i| LabeledExample {
                tokens: (0..3 + i % 3).map(|j| 4 + (i * 3 + j) % 15).collect(),
                label: i % 2,
                domain: "d".into(),
            })
            .collect();
        (init_params(&cfg, 2).unwrap(), data)
    }

    #[test]
    fn quartiles_interpolate() {
        let b = BoxplotStats::from_values(&[4.0, 1.0, 3.0, 2.0]).unwrap();
        assert_eq!((b.min, b.q1, b.median, b.q3, b.max), (1.0, 1.75, 2.5, 3.25, 4.0));
    }

    #[test]
    fn full_top_k_matches_unrestricted_strength() {
        let (params, data) = setup();
        let prompt = Prompt::Tokens(vec![5, 6, 7]);
        let r = pilot_profile(&params, &[("p".into(), prompt.clone())], &data, 3).unwrap();
        for l in 0..3 {
            let s = strength(&params, &prompt, &data, &LayerSet::single(l)).unwrap();
            assert!((r.prompts[0].layer_strength[l] - s).abs() < 1e-12);
        }
        let clamped = pilot_profile(&params, &[("p".into(), prompt)], &data, 10).unwrap();
        assert_eq!(clamped.prompts[0].layer_strength, r.prompts[0].layer_strength);
    }

    #[test]
    fn json_and_csv_shapes() {
        let (params, data) = setup();
        let prompts = vec![
            ("a".to_string(), Prompt::Tokens(vec![5, 6])),
            ("b".into(), Prompt::Tokens(vec![8])),
        ];
        let r = pilot_profile(&params, &prompts, &data, 4).unwrap();
        let j = r.to_json();
        assert!(j["a"]["2"].is_f64());
        assert!(j["b"]["final_layer_boxplot"]["median"].is_f64());
        assert_eq!(j["a"]["top_tokens"], json!([0, 1]));
        assert_eq!(r.to_csv().lines().count(), 1 + 2 * (3 + 5) + 3);
        assert!(pilot_profile(&params, &prompts, &data, 0).is_err());
    }
}
