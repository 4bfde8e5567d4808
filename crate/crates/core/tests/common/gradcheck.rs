//! Central finite-difference gradient checks.

use hero_core::autograd::{Graph, Var};
use hero_core::downstream::{
    caption_loss, nli_forward, nli_loss, parse_task_file, qa_loss, retrieval_loss, synth_task_file, DownstreamTask,
    Examples, TaskSynthSpec,
};
use hero_core::encoder::HeroModel;
use hero_core::params::normal;
use hero_core::pretrain::{
    batch_loss_with_positives, make_batches, mnce_positives, PretrainConfig, TaskKind, TaskWeights, VsmHyper,
};
use hero_core::rng::rng_for;
use hero_core::{Result, Tensor};
use rand::Rng;

use super::{rel_err, tiny_config, tiny_corpus};

pub const EPS: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

pub type Check = std::result::Result<(), String>;

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    normal(&mut rng_for(seed, &[42]), shape, 1.0)
}

/// Projects an arbitrary output onto fixed random weights to get a scalar.
fn project(g: &mut Graph, out: Var) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let w = g.constant(rand_tensor(&shape, 0xabc))?;
    let m = g.mul(out, w)?;
    g.sum(m)
}

pub fn check_op<F>(name: &str, inputs: &[Tensor], train_seed: Option<u64>, f: F) -> Check
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let new_graph = || match train_seed {
        Some(s) => Graph::training(s),
        None => Graph::new(),
    };
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = new_graph();
        let vs = xs.iter().map(|x| g.variable(x.clone())).collect::<Result<Vec<_>>>()?;
        let out = f(&mut g, &vs)?;
        let l = project(&mut g, out)?;
        Ok(g.scalar(l))
    };
    let err = |e: hero_core::HeroError| format!("{name}: {e}");
    let mut g = new_graph();
    let vs = inputs.iter().map(|x| g.variable(x.clone())).collect::<Result<Vec<_>>>().map_err(err)?;
    let out = f(&mut g, &vs).map_err(err)?;
    let l = project(&mut g, out).map_err(err)?;
    g.backward(l).map_err(err)?;
    for (i, v) in vs.iter().enumerate() {
        let analytic = g.grad(*v).map(|t| t.data().to_vec()).unwrap_or(vec![0.0; inputs[i].len()]);
        let mut numeric = Vec::with_capacity(inputs[i].len());
        for j in 0..inputs[i].len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += EPS;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= EPS;
            numeric.push((eval(&plus).map_err(err)? - eval(&minus).map_err(err)?) / (2.0 * EPS));
        }
        let e = rel_err(&analytic, &numeric);
        if !(e < TOL) {
            return Err(format!("{name}: input {i} relative error {e:e}"));
        }
    }
    Ok(())
}

/// Every differentiable tape operation on random inputs.
pub fn all_ops() -> Check {
    let a = rand_tensor(&[3, 4], 1);
    let b = rand_tensor(&[3, 4], 2);
    let c = rand_tensor(&[4, 5], 3);
    let r = rand_tensor(&[4], 4);
    check_op("matmul", &[a.clone(), c.clone()], None, |g, v| g.matmul(v[0], v[1]))?;
    check_op("transpose", &[a.clone()], None, |g, v| g.transpose(v[0]))?;
    check_op("add", &[a.clone(), b.clone()], None, |g, v| g.add(v[0], v[1]))?;
    check_op("sub", &[a.clone(), b.clone()], None, |g, v| g.sub(v[0], v[1]))?;
    check_op("mul", &[a.clone(), b.clone()], None, |g, v| g.mul(v[0], v[1]))?;
    check_op("add_row", &[a.clone(), r], None, |g, v| g.add_row(v[0], v[1]))?;
    check_op("scale", &[a.clone()], None, |g, v| g.scale(v[0], -1.7))?;
    check_op("gelu", &[a.clone()], None, |g, v| g.gelu(v[0]))?;
    check_op("relu", &[a.clone()], None, |g, v| g.relu(v[0]))?;
    check_op("reshape", &[a.clone()], None, |g, v| g.reshape(v[0], &[2, 6]))?;
    check_op("sum", &[a.clone()], None, |g, v| g.sum(v[0]))?;
    check_op("mean", &[a.clone()], None, |g, v| g.mean(v[0]))?;
    check_op("max", &[a.clone()], None, |g, v| g.max(v[0]))?;
    check_op("dropout", &[a.clone()], Some(9), |g, v| g.dropout(v[0], 0.3))?;

    let x = rand_tensor(&[3, 5], 11);
    let gain = rand_tensor(&[5], 12);
    let bias = rand_tensor(&[5], 13);
    check_op("softmax", &[x.clone()], None, |g, v| g.softmax(v[0]))?;
    check_op("layer_norm", &[x.clone(), gain, bias], None, |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5))?;
    check_op("normalize_rows", &[x.clone()], None, |g, v| g.normalize_rows(v[0]))?;
    check_op("cross_entropy", &[x], None, |g, v| g.cross_entropy(v[0], &[4, 0, 2]))?;
    let s = rand_tensor(&[9], 14);
    let k = rand_tensor(&[5], 15);
    check_op("conv1d", &[s, k], None, |g, v| g.conv1d(v[0], v[1]))?;

    let m = rand_tensor(&[4, 3], 21);
    let n = rand_tensor(&[2, 3], 22);
    let w = rand_tensor(&[4, 2], 23);
    check_op("gather_rows", &[m.clone()], None, |g, v| g.gather_rows(v[0], &[3, 0, 3, 1]))?;
    check_op("slice_rows", &[m.clone()], None, |g, v| g.slice_rows(v[0], 1, 3))?;
    check_op("concat_rows", &[m.clone(), n], None, |g, v| g.concat_rows(&[v[0], v[1]]))?;
    check_op("slice_cols", &[m.clone()], None, |g, v| g.slice_cols(v[0], 1, 3))?;
    check_op("concat_cols", &[m, w], None, |g, v| g.concat_cols(&[v[0], v[1]]))?;
    Ok(())
}

/// Finite differences over a deterministic sample of every parameter tensor
/// that receives a gradient.
pub fn check_model_loss<F>(name: &str, model: &mut HeroModel, per_tensor: usize, f: F) -> Check
where
    F: Fn(&HeroModel, &mut Graph) -> Result<Var>,
{
    let err = |e: hero_core::HeroError| format!("{name}: {e}");
    let mut g = Graph::new();
    let loss = f(model, &mut g).map_err(err)?;
    g.backward(loss).map_err(err)?;
    let grads = g.param_grads(&model.store);
    let mut rng = rng_for(5, &[99]);
    let ids: Vec<_> = model.store.ids().collect();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let value = |m: &HeroModel| -> Result<f64> {
        let mut g = Graph::new();
        let l = f(m, &mut g)?;
        Ok(g.scalar(l))
    };
    for id in ids {
        let Some(grad) = grads.get(id) else { continue };
        let n = model.store.get(id).len();
        for _ in 0..per_tensor.min(n) {
            let j = rng.random_range(0..n);
            let orig = model.store.get(id).data()[j];
            model.store.get_mut(id).data_mut()[j] = orig + EPS;
            let up = value(model).map_err(err)?;
            model.store.get_mut(id).data_mut()[j] = orig - EPS;
            let down = value(model).map_err(err)?;
            model.store.get_mut(id).data_mut()[j] = orig;
            analytic.push(grad.data()[j]);
            numeric.push((up - down) / (2.0 * EPS));
        }
    }
    if analytic.is_empty() {
        return Err(format!("{name}: no parameter received a gradient"));
    }
    let e = rel_err(&analytic, &numeric);
    if !(e < TOL) {
        return Err(format!("{name}: relative error {e:e} over {} entries", analytic.len()));
    }
    Ok(())
}

pub fn pretraining_losses() -> Check {
    let (_, vocab, clips) = tiny_corpus(3, 4);
    let cfg = PretrainConfig::default();
    for task in TaskKind::ALL {
        let mut model = HeroModel::new(tiny_config(vocab.len(), 4), 2).map_err(|e| e.to_string())?;
        let stream = make_batches(clips.len(), 3, &TaskWeights::only(&[task]), &cfg, vocab.len(), 8)
            .map_err(|e| e.to_string())?;
        let batch = stream.batch(0, &clips).map_err(|e| e.to_string())?;
        // the contrastive positives are off the tape, so they stay fixed
        let positives = match task {
            TaskKind::Mnce => Some(mnce_positives(&model, &batch, &clips).map_err(|e| e.to_string())?),
            _ => None,
        };
        check_model_loss(task.name(), &mut model, 3, |m, g| {
            batch_loss_with_positives(m, g, &batch, &clips, &cfg, positives.as_deref())
        })?;
    }
    Ok(())
}

pub fn downstream_losses() -> Check {
    let (corpus, vocab, _) = tiny_corpus(3, 4);
    for task in [DownstreamTask::Retrieval, DownstreamTask::Qa, DownstreamTask::Nli, DownstreamTask::Caption] {
        let spec = TaskSynthSpec { task, clips: 2, per_clip: 1, seed: 1 };
        let text = synth_task_file(&corpus, &vocab, &spec).map_err(|e| e.to_string())?;
        let set = parse_task_file(&text, task, &vocab).map_err(|e| e.to_string())?;
        let mut model = HeroModel::new(tiny_config(vocab.len(), 4), 3).map_err(|e| e.to_string())?;
        check_model_loss(task.name(), &mut model, 3, |m, g| match &set.examples {
            Examples::Retrieval(exs) => {
                let refs: Vec<_> = exs.iter().collect();
                let mut rng = rng_for(1, &[2]);
                retrieval_loss(m, g, &set.clips, &[0, 1], &refs, &VsmHyper::default(), &mut rng)
            }
            Examples::Qa(exs) => qa_loss(m, g, &set.clips[exs[0].clip], &exs[0], 0.5),
            Examples::Nli(exs) => {
                let logits = nli_forward(m, g, &set.clips[exs[0].clip], &exs[0].hypothesis)?;
                nli_loss(g, logits, exs[0].label.index())
            }
            Examples::Caption(exs) => caption_loss(m, g, &set.clips[exs[0].clip], exs[0].span, &exs[0].caption),
        })?;
    }
    Ok(())
}
