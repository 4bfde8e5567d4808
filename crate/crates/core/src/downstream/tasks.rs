//! Task files: a corpus header line followed by clip records carrying task fields.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{align, AlignedClip, CorpusHeader, RawClip, Vocab};
use crate::error::{HeroError, Result};
use crate::span::{Span, TimeSpan};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DownstreamTask {
    Retrieval,
    Qa,
    Nli,
    Caption,
}

impl DownstreamTask {
    fn required_fields(self) -> &'static [&'static str] {
        match self {
            DownstreamTask::Retrieval => &["query", "span"],
            DownstreamTask::Qa => &["q", "answers", "label"],
            DownstreamTask::Nli => &["hypothesis", "label"],
            DownstreamTask::Caption => &["moment", "caption"],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DownstreamTask::Retrieval => "retrieval",
            DownstreamTask::Qa => "qa",
            DownstreamTask::Nli => "nli",
            DownstreamTask::Caption => "caption",
        }
    }
}

impl fmt::Display for DownstreamTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DownstreamTask {
    type Err = HeroError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "retrieval" => Ok(DownstreamTask::Retrieval),
            "qa" => Ok(DownstreamTask::Qa),
            "nli" => Ok(DownstreamTask::Nli),
            "caption" => Ok(DownstreamTask::Caption),
            other => Err(HeroError::Usage(format!(
                "unknown task {other:?} (expected retrieval, qa, nli or caption)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalExample {
    pub query_id: String,
    pub clip: usize,
    pub query: Vec<usize>,
    pub time: TimeSpan,
    pub span: Span,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QaExample {
    pub clip: usize,
    pub question: Vec<usize>,
    pub answers: Vec<Vec<usize>>,
    pub label: usize,
    pub span: Option<Span>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NliLabel {
    Entail,
    Contradict,
}

impl NliLabel {
    pub fn index(self) -> usize {
        match self {
            NliLabel::Entail => 0,
            NliLabel::Contradict => 1,
        }
    }

    pub fn from_index(i: usize) -> Self {
        if i == 0 {
            NliLabel::Entail
        } else {
            NliLabel::Contradict
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NliExample {
    pub clip: usize,
    pub hypothesis: Vec<usize>,
    pub label: NliLabel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaptionExample {
    pub clip: usize,
    pub moment: TimeSpan,
    pub span: Span,
    pub caption: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Examples {
    Retrieval(Vec<RetrievalExample>),
    Qa(Vec<QaExample>),
    Nli(Vec<NliExample>),
    Caption(Vec<CaptionExample>),
}

impl Examples {
    pub fn len(&self) -> usize {
        match self {
            Examples::Retrieval(v) => v.len(),
            Examples::Qa(v) => v.len(),
            Examples::Nli(v) => v.len(),
            Examples::Caption(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Aligned clips (deduplicated by id) and the task's examples pointing into them.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSet {
    pub task: DownstreamTask,
    pub header: CorpusHeader,
    pub clips: Vec<AlignedClip>,
    pub examples: Examples,
}

#[derive(Deserialize)]
struct RetrievalFields {
    #[serde(default)]
    query_id: Option<String>,
    query: String,
    span: [f64; 2],
}

#[derive(Deserialize)]
struct QaFields {
    q: String,
    answers: Vec<String>,
    label: usize,
    #[serde(default)]
    span: Option<[f64; 2]>,
}

#[derive(Deserialize)]
struct NliFields {
    hypothesis: String,
    label: NliLabel,
}

#[derive(Deserialize)]
struct CaptionFields {
    moment: [f64; 2],
    caption: String,
}

fn frame_span(clip: &AlignedClip, t: [f64; 2], what: &str) -> std::result::Result<(TimeSpan, Span), String> {
    let ts = TimeSpan::new(t[0], t[1]).map_err(|e| format!("{what}: {e}"))?;
    let span = ts
        .overlapping_frames(&clip.frame_times)
        .ok_or_else(|| format!("{what} [{}, {}] covers no frame of the clip", t[0], t[1]))?;
    Ok((ts, span))
}

/// Parses a task file. Any record lacking the task's fields, or carrying
/// invalid values, is a schema error naming the record.
pub fn parse_task_file(text: &str, task: DownstreamTask, vocab: &Vocab) -> Result<TaskSet> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines
        .next()
        .ok_or_else(|| HeroError::Schema("task file is empty (missing header record)".into()))?;
    let header: CorpusHeader =
        serde_json::from_str(first).map_err(|e| HeroError::Schema(format!("task file header: {e}")))?;

    let mut clips: Vec<AlignedClip> = Vec::new();
    let mut by_id: HashMap<String, usize> = HashMap::new();
    let mut retrieval = Vec::new();
    let mut qa = Vec::new();
    let mut nli = Vec::new();
    let mut caption = Vec::new();
    for (ln, line) in lines {
        let value: Value = serde_json::from_str(line)
            .map_err(|e| HeroError::Schema(format!("record at line {}: {e}", ln + 1)))?;
        let id = value.get("id").and_then(Value::as_str).unwrap_or("?").to_string();
        let name = format!("record at line {} (clip {id})", ln + 1);
        let bad = |m: String| HeroError::Schema(format!("{name}: {m}"));
        for field in task.required_fields() {
            if value.get(*field).is_none() {
                return Err(bad(format!("missing field `{field}` required by the {task} task")));
            }
        }
        let ci = match by_id.get(&id) {
            Some(&i) => i,
            None => {
                let raw: RawClip = serde_json::from_value(value.clone()).map_err(|e| bad(e.to_string()))?;
                raw.validate(header.feature_dim).map_err(|e| bad(e.to_string()))?;
                let aligned = align(&raw, vocab).map_err(|e| bad(e.to_string()))?;
                clips.push(aligned);
                by_id.insert(id.clone(), clips.len() - 1);
                clips.len() - 1
            }
        };
        let clip = &clips[ci];
        match task {
            DownstreamTask::Retrieval => {
                let f: RetrievalFields = serde_json::from_value(value).map_err(|e| bad(e.to_string()))?;
                let (time, span) = frame_span(clip, f.span, "span").map_err(bad)?;
                retrieval.push(RetrievalExample {
                    query_id: f.query_id.unwrap_or_else(|| format!("{id}#{}", ln + 1)),
                    clip: ci,
                    query: vocab.tokenize(&f.query),
                    time,
                    span,
                });
            }
            DownstreamTask::Qa => {
                let f: QaFields = serde_json::from_value(value).map_err(|e| bad(e.to_string()))?;
                if f.label >= f.answers.len() {
                    return Err(bad(format!("label {} with {} answers", f.label, f.answers.len())));
                }
                let span = match f.span {
                    Some(s) => Some(frame_span(clip, s, "span").map_err(bad)?.1),
                    None => None,
                };
                qa.push(QaExample {
                    clip: ci,
                    question: vocab.tokenize(&f.q),
                    answers: f.answers.iter().map(|a| vocab.tokenize(a)).collect(),
                    label: f.label,
                    span,
                });
            }
            DownstreamTask::Nli => {
                let f: NliFields = serde_json::from_value(value).map_err(|e| bad(e.to_string()))?;
                nli.push(NliExample {
                    clip: ci,
                    hypothesis: vocab.tokenize(&f.hypothesis),
                    label: f.label,
                });
            }
            DownstreamTask::Caption => {
                let f: CaptionFields = serde_json::from_value(value).map_err(|e| bad(e.to_string()))?;
                let (moment, span) = frame_span(clip, f.moment, "moment").map_err(bad)?;
                caption.push(CaptionExample {
                    clip: ci,
                    moment,
                    span,
                    caption: vocab.tokenize(&f.caption),
                });
            }
        }
    }
    let examples = match task {
        DownstreamTask::Retrieval => Examples::Retrieval(retrieval),
        DownstreamTask::Qa => Examples::Qa(qa),
        DownstreamTask::Nli => Examples::Nli(nli),
        DownstreamTask::Caption => Examples::Caption(caption),
    };
    if examples.is_empty() {
        return Err(HeroError::Schema(format!("task file has no {task} records")));
    }
    Ok(TaskSet {
        task,
        header,
        clips,
        examples,
    })
}

pub fn read_task_file(path: &Path, task: DownstreamTask, vocab: &Vocab) -> Result<TaskSet> {
    let text = fs::read_to_string(path)
        .map_err(|e| HeroError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    parse_task_file(&text, task, vocab)
}
