use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Example, TaskDataset, TaskStream};
use crate::error::{Error, Result};
use crate::policy::{Token, TokenSeq};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub task_id: usize,
    pub split: Split,
    pub prompt_tokens: Vec<Token>,
    pub gold_tokens: Vec<Token>,
}

/// One JSON record per line, tasks in stream order, train before eval.
pub fn export_datasets(datasets: &[TaskDataset], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for d in datasets {
        for (split, examples) in [(Split::Train, &d.train), (Split::Eval, &d.eval)] {
            for e in examples {
                let rec = DatasetRecord {
                    task_id: d.task.id,
                    split,
                    prompt_tokens: e.prompt.tokens.clone(),
                    gold_tokens: e.gold.tokens.clone(),
                };
                serde_json::to_writer(&mut w, &rec)?;
                w.write_all(b"\n")?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads records written by [`export_datasets`] back into datasets for
/// `stream`. Gold tokens are checked against the task definition.
pub fn import_datasets(stream: &TaskStream, path: &Path) -> Result<Vec<TaskDataset>> {
    let mut out: Vec<TaskDataset> = stream
        .tasks
        .iter()
        .map(|t| TaskDataset { task: t.clone(), train: Vec::new(), eval: Vec::new() })
        .collect();
    let bad = |line: usize, reason: String| Error::Format { path: path.display().to_string(), reason: format!("line {line}: {reason}") };
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DatasetRecord = serde_json::from_str(&line)?;
        let d = out.get_mut(rec.task_id).ok_or_else(|| bad(i + 1, format!("unknown task {}", rec.task_id)))?;
        let gold = d.task.solve(&rec.prompt_tokens).map_err(|e| bad(i + 1, e.to_string()))?;
        if gold != rec.gold_tokens {
            return Err(bad(i + 1, "gold tokens disagree with the task rule".into()));
        }
        let e = Example { prompt: TokenSeq::prompt(rec.prompt_tokens), gold: TokenSeq::response(rec.gold_tokens) };
        match rec.split {
            Split::Train => d.train.push(e),
            Split::Eval => d.eval.push(e),
        }
    }
    Ok(out)
}
