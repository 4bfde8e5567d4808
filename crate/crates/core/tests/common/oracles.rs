//! Brute-force reference implementations used as test oracles.

use hero_core::data::{RawClip, RawFrame, RawSubtitle, Vocab};
use hero_core::metrics::RankedMoment;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Random clip on a quarter-second grid so every tIoU is an exact rational.
pub fn random_clip(rng: &mut ChaCha8Rng, id: usize, vocab: &Vocab) -> RawClip {
    let n = rng.random_range(1..=20);
    let mut t = rng.random_range(0..8);
    let mut frames = Vec::with_capacity(n);
    for _ in 0..n {
        let len = rng.random_range(1..=6);
        frames.push(RawFrame {
            t0: t as f64 / 4.0,
            t1: (t + len) as f64 / 4.0,
            feat: vec![rng.random::<f64>(), rng.random::<f64>()],
        });
        t += len;
    }
    let end = t + 8;
    let ns = rng.random_range(1..=8);
    let mut starts: Vec<i64> = (0..ns).map(|_| rng.random_range(0..end)).collect();
    starts.sort_unstable();
    let words = vocab.words();
    let subs = starts
        .into_iter()
        .map(|s| {
            let len = rng.random_range(1..=16);
            let k = rng.random_range(1..=3);
            let text: Vec<&str> = (0..k).map(|_| words[rng.random_range(0..words.len())].as_str()).collect();
            RawSubtitle {
                t0: s as f64 / 4.0,
                t1: (s + len) as f64 / 4.0,
                text: text.join(" "),
            }
        })
        .collect();
    RawClip {
        id: format!("r{id}"),
        frames,
        subs,
    }
}

fn q(x: f64) -> i64 {
    (x * 4.0).round() as i64
}

/// Exhaustive alignment: each frame to the subtitle of maximal tIoU (compared
/// as exact fractions, earliest on ties), or the nearest one when nothing
/// overlaps; frameless subtitles fold into the preceding group, or the
/// following group at the start. Returns `(frames, source subtitles)` per group.
pub fn align_oracle(raw: &RawClip) -> Vec<(Vec<usize>, Vec<usize>)> {
    let subs: Vec<(i64, i64)> = raw.subs.iter().map(|s| (q(s.t0), q(s.t1))).collect();
    let mut owner = Vec::new();
    for f in &raw.frames {
        let (a0, a1) = (q(f.t0), q(f.t1));
        // best as (inter, union) fraction
        let mut best: Option<(usize, i64, i64)> = None;
        for (i, &(b0, b1)) in subs.iter().enumerate() {
            let inter = (a1.min(b1) - a0.max(b0)).max(0);
            if inter == 0 {
                continue;
            }
            let union = (a1 - a0) + (b1 - b0) - inter;
            let better = match best {
                None => true,
                Some((_, bi, bu)) => inter * bu > bi * union,
            };
            if better {
                best = Some((i, inter, union));
            }
        }
        let chosen = match best {
            Some((i, _, _)) => i,
            None => {
                let gap = |&(b0, b1): &(i64, i64)| (b0 - a1).max(a0 - b1).max(0);
                let mut bi = 0;
                for i in 0..subs.len() {
                    if gap(&subs[i]) < gap(&subs[bi]) {
                        bi = i;
                    }
                }
                bi
            }
        };
        owner.push(chosen);
    }
    let mut groups: Vec<(Vec<usize>, Vec<usize>)> = Vec::new();
    let mut leading = Vec::new();
    for s in 0..subs.len() {
        let frames: Vec<usize> = (0..owner.len()).filter(|&f| owner[f] == s).collect();
        if frames.is_empty() {
            match groups.last_mut() {
                Some(g) => g.1.push(s),
                None => leading.push(s),
            }
        } else {
            let mut sources = std::mem::take(&mut leading);
            sources.push(s);
            groups.push((frames, sources));
        }
    }
    groups
}

fn tiou_exact(a: (f64, f64), b: (f64, f64)) -> f64 {
    let la = a.1 - a.0;
    let lb = b.1 - b.0;
    if la <= 0.0 || lb <= 0.0 {
        return 0.0;
    }
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    inter / (la + lb - inter)
}

pub fn tiou_oracle(a: (f64, f64), b: (f64, f64)) -> f64 {
    tiou_exact(a, b)
}

/// Quadratic greedy NMS: repeatedly keep the best survivor and drop every
/// same-clip candidate overlapping it above the threshold.
pub fn nms_oracle(ranked: &[RankedMoment], th: f64) -> Vec<RankedMoment> {
    let mut alive = vec![true; ranked.len()];
    let mut kept = Vec::new();
    loop {
        let Some(i) = (0..ranked.len()).find(|&i| alive[i]) else { break };
        alive[i] = false;
        kept.push(ranked[i].clone());
        for j in 0..ranked.len() {
            if alive[j]
                && ranked[j].clip == ranked[i].clip
                && tiou_exact((ranked[i].span.t0, ranked[i].span.t1), (ranked[j].span.t0, ranked[j].span.t1)) > th
            {
                alive[j] = false;
            }
        }
    }
    kept
}

/// BLEU@4 from explicit n-gram lists.
pub fn bleu_oracle(c: &[usize], r: &[usize]) -> f64 {
    if c.is_empty() {
        return 0.0;
    }
    let mut logp = 0.0;
    for n in 1..=4usize {
        let grams = |t: &[usize]| -> Vec<Vec<usize>> {
            if t.len() < n {
                vec![]
            } else {
                (0..=t.len() - n).map(|i| t[i..i + n].to_vec()).collect()
            }
        };
        let cg = grams(c);
        let mut rg = grams(r);
        let mut matched = 0;
        for g in &cg {
            if let Some(p) = rg.iter().position(|x| x == g) {
                rg.swap_remove(p);
                matched += 1;
            }
        }
        let total = cg.len();
        let p = if n == 1 {
            if matched == 0 {
                return 0.0;
            }
            matched as f64 / total as f64
        } else if matched == 0 {
            1.0 / (total as f64 + 1.0)
        } else {
            matched as f64 / total as f64
        };
        logp += p.ln() / 4.0;
    }
    let bp = if c.len() > r.len() { 1.0 } else { (1.0 - r.len() as f64 / c.len() as f64).exp() };
    bp * logp.exp()
}

/// Recall@K by direct enumeration of each mode's definition.
pub fn recall_oracle(
    preds: &[hero_core::metrics::Prediction],
    truths: &[hero_core::metrics::GroundTruth],
    k: usize,
    th: f64,
    mode: hero_core::metrics::RecallMode,
) -> f64 {
    use hero_core::metrics::RecallMode;
    let mut hits = 0;
    for gt in truths {
        let Some(p) = preds.iter().find(|p| p.query_id == gt.query_id) else { continue };
        let good = |m: &RankedMoment| tiou_exact((m.span.t0, m.span.t1), (gt.span.t0, gt.span.t1)) > th;
        let hit = match mode {
            RecallMode::Video => {
                let mut clips: Vec<&str> = Vec::new();
                for m in &p.ranked {
                    if !clips.contains(&m.clip.as_str()) {
                        clips.push(&m.clip);
                    }
                }
                clips.iter().take(k).any(|c| *c == gt.clip)
            }
            RecallMode::Moment => {
                let own: Vec<&RankedMoment> = p.ranked.iter().filter(|m| m.clip == gt.clip).collect();
                own.iter().take(k).any(|m| good(m))
            }
            RecallMode::VideoMoment => p.ranked.iter().take(k).any(|m| m.clip == gt.clip && good(m)),
        };
        hits += hit as usize;
    }
    hits as f64 / truths.len() as f64
}
