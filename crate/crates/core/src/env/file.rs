//! JSON environment files.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{AggregatorKind, EnvironmentModel, OutcomeDist, Prompt, QueryModel, Support};
use crate::aggregate::Context;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EnvFile {
    format_version: u32,
    name: String,
    aggregator: AggregatorKind,
    n_max: u32,
    objective_bounds: Vec<[f64; 2]>,
    prompts: Vec<Prompt>,
    contexts: Vec<Context>,
    queries: Vec<QueryFile>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QueryFile {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gold: Option<String>,
    per_prompt: IndexMap<String, DistFile>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DistFile {
    support: SupportFile,
    probs: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    test_probs: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum SupportFile {
    Labels(Vec<String>),
    Vectors(Vec<Vec<f64>>),
}

fn to_file(env: &EnvironmentModel) -> EnvFile {
    let queries = env
        .queries
        .iter()
        .map(|q| QueryFile {
            id: q.id.clone(),
            gold: q.gold.clone(),
            per_prompt: q
                .per_prompt
                .iter()
                .zip(&env.prompts)
                .map(|(d, p)| {
                    let support = match &d.support {
                        Support::Labels(l) => SupportFile::Labels(l.clone()),
                        Support::Vectors { dim, values } => {
                            SupportFile::Vectors(values.chunks(*dim).map(<[f64]>::to_vec).collect())
                        }
                    };
                    (
                        p.id.clone(),
                        DistFile {
                            support,
                            probs: d.probs.clone(),
                            test_probs: d.test_probs.clone(),
                        },
                    )
                })
                .collect(),
        })
        .collect();
    EnvFile {
        format_version: FORMAT_VERSION,
        name: env.name.clone(),
        aggregator: env.aggregator,
        n_max: env.n_max,
        objective_bounds: env.objective_bounds.clone(),
        prompts: env.prompts.clone(),
        contexts: env.contexts.clone(),
        queries,
    }
}

fn from_file(file: EnvFile) -> Result<EnvironmentModel> {
    if file.format_version != FORMAT_VERSION {
        return Err(Error::Parse {
            path: "format_version".into(),
            message: format!("unsupported version {}", file.format_version),
        });
    }
    let mut queries = Vec::with_capacity(file.queries.len());
    for (qi, q) in file.queries.into_iter().enumerate() {
        let mut per_prompt = Vec::with_capacity(file.prompts.len());
        let mut map = q.per_prompt;
        for p in &file.prompts {
            let d = map.shift_remove(&p.id).ok_or_else(|| {
                Error::Validation(format!("query {}: no distribution for prompt {}", q.id, p.id))
            })?;
            let support = match d.support {
                SupportFile::Labels(l) => Support::Labels(l),
                SupportFile::Vectors(rows) => {
                    if rows.iter().any(|r| r.len() != rows[0].len()) {
                        return Err(Error::Parse {
                            path: format!("queries[{qi}].per_prompt.{}.support", p.id),
                            message: "ragged objective vectors".into(),
                        });
                    }
                    Support::vectors_from_rows(&rows)
                }
            };
            per_prompt.push(OutcomeDist {
                support,
                probs: d.probs,
                test_probs: d.test_probs,
            });
        }
        if let Some(extra) = map.keys().next() {
            return Err(Error::Validation(format!(
                "query {}: distribution for unknown prompt {extra}",
                q.id
            )));
        }
        queries.push(QueryModel {
            id: q.id,
            gold: q.gold,
            per_prompt,
        });
    }
    EnvironmentModel::new(
        file.name,
        file.aggregator,
        file.n_max,
        file.objective_bounds,
        file.prompts,
        file.contexts,
        queries,
    )
}

/// Serializes to the canonical single-line JSON form (plus trailing newline).
pub fn to_json(env: &EnvironmentModel) -> String {
    let mut s = serde_json::to_string(&to_file(env)).expect("environment serializes");
    s.push('\n');
    s
}

pub fn parse_env(text: &str) -> Result<EnvironmentModel> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let file: EnvFile = serde_path_to_error::deserialize(de).map_err(|e| Error::Parse {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })?;
    from_file(file)
}

pub fn load_env(path: impl AsRef<Path>) -> Result<EnvironmentModel> {
    let text = fs::read_to_string(path.as_ref())?;
    parse_env(&text)
}

pub fn save_env(env: &EnvironmentModel, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path.as_ref())?);
    w.write_all(to_json(env).as_bytes())?;
    w.flush()?;
    Ok(())
}
