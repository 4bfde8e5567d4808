//! Toy task files built from a synthetic corpus. Queries, questions,
//! hypotheses and captions are drawn from the clips' own aligned sentences,
//! and every annotated span is the time hull of a sentence's frames.

use rand::seq::SliceRandom;
use rand::Rng;
use serde_json::{json, Value};

use crate::data::{AlignedClip, Corpus, Vocab};
use crate::downstream::DownstreamTask;
use crate::error::{HeroError, Result};
use crate::rng::{rng_for, TAG_FINETUNE};

/// Candidate answers per QA question.
pub const TOY_QA_ANSWERS: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSynthSpec {
    pub task: DownstreamTask,
    pub clips: usize,
    pub per_clip: usize,
    pub seed: u64,
}

fn sentence_hull(clip: &AlignedClip, s: usize) -> [f64; 2] {
    let f = &clip.sentences[s].frames;
    [clip.frame_times[f[0]].0, clip.frame_times[f[f.len() - 1]].1]
}

/// Task-file text: the corpus header, then one record per example carrying
/// the full clip plus the task fields.
pub fn synth_task_file(corpus: &Corpus, vocab: &Vocab, spec: &TaskSynthSpec) -> Result<String> {
    if spec.clips == 0 || spec.clips > corpus.clips.len() {
        return Err(HeroError::Config(format!(
            "asked for {} clips from a corpus of {}",
            spec.clips,
            corpus.clips.len()
        )));
    }
    if spec.per_clip == 0 {
        return Err(HeroError::Config("need at least one example per clip".into()));
    }
    let aligned = corpus.align_all(vocab)?;
    let mut rng = rng_for(spec.seed, &[TAG_FINETUNE, u64::MAX]);
    let mut out = serde_json::to_string(&corpus.header)?;
    out.push('\n');
    let text = |c: &AlignedClip, s: usize| vocab.detokenize(&c.sentences[s].tokens);
    for ci in 0..spec.clips {
        let clip = &aligned[ci];
        let usable: Vec<usize> = (0..clip.sentences.len())
            .filter(|&s| !clip.sentences[s].tokens.is_empty())
            .collect();
        if usable.len() < spec.per_clip {
            return Err(HeroError::Config(format!(
                "clip {} has {} sentences, fewer than {} examples",
                clip.id,
                usable.len(),
                spec.per_clip
            )));
        }
        let mut picks = usable.clone();
        picks.shuffle(&mut rng);
        picks.truncate(spec.per_clip);
        picks.sort_unstable();
        for (k, &s) in picks.iter().enumerate() {
            let fields: Value = match spec.task {
                DownstreamTask::Retrieval => json!({
                    "query_id": format!("{}:{s}", clip.id),
                    "query": text(clip, s),
                    "span": sentence_hull(clip, s),
                }),
                DownstreamTask::Caption => json!({
                    "moment": sentence_hull(clip, s),
                    "caption": text(clip, s),
                }),
                DownstreamTask::Qa => {
                    let words = &clip.sentences[s].tokens;
                    let (question, answer) = words.split_at(words.len() - 1);
                    let mut answers = vec![vocab.detokenize(answer)];
                    let mut tries = 0;
                    while answers.len() < TOY_QA_ANSWERS && tries < 1000 {
                        tries += 1;
                        let w = vocab.token(crate::data::NUM_SPECIALS + rng.random_range(0..vocab.len() - crate::data::NUM_SPECIALS));
                        if !answers.iter().any(|a| a == w) {
                            answers.push(w.to_string());
                        }
                    }
                    let label = rng.random_range(0..answers.len());
                    answers.swap(0, label);
                    json!({
                        "q": vocab.detokenize(question),
                        "answers": answers,
                        "label": label,
                        "span": sentence_hull(clip, s),
                    })
                }
                DownstreamTask::Nli => {
                    let entail = (ci + k) % 2 == 0;
                    let hypothesis = if entail {
                        text(clip, s)
                    } else {
                        let own: Vec<&Vec<usize>> = clip.sentences.iter().map(|x| &x.tokens).collect();
                        let foreign: Vec<(usize, usize)> = aligned
                            .iter()
                            .enumerate()
                            .filter(|&(o, _)| o != ci)
                            .flat_map(|(o, c)| (0..c.sentences.len()).map(move |t| (o, t)))
                            .filter(|&(o, t)| {
                                let tok = &aligned[o].sentences[t].tokens;
                                !tok.is_empty() && !own.contains(&tok)
                            })
                            .collect();
                        if foreign.is_empty() {
                            return Err(HeroError::Config("no foreign sentence for a contradiction".into()));
                        }
                        let (o, t) = foreign[rng.random_range(0..foreign.len())];
                        text(&aligned[o], t)
                    };
                    json!({
                        "hypothesis": hypothesis,
                        "label": if entail { "entail" } else { "contradict" },
                    })
                }
            };
            let mut record = serde_json::to_value(&corpus.clips[ci])?;
            let obj = record.as_object_mut().expect("clip is an object");
            for (key, v) in fields.as_object().expect("fields are an object") {
                obj.insert(key.clone(), v.clone());
            }
            out.push_str(&serde_json::to_string(&record)?);
            out.push('\n');
        }
    }
    Ok(out)
}
