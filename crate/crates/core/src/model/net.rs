use super::{Dense, Gradient, HeadSelector, Layout, LossBreakdown, ParameterSet};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::exec::Exec;

/// Predicted frames for one sample, row-major `T x frame_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameOutput {
    pub pre_postnet: Vec<f64>,
    pub post_postnet: Vec<f64>,
}

/// `out = W x + b`.
fn affine(p: &[f64], d: &Dense, x: &[f64], out: &mut [f64]) {
    let w = &p[d.weights()];
    let b = &p[d.biases()];
    for (r, o) in out.iter_mut().enumerate() {
        let row = &w[r * d.cols..(r + 1) * d.cols];
        let mut acc = if d.bias { b[r] } else { 0.0 };
        for (wi, xi) in row.iter().zip(x) {
            acc += wi * xi;
        }
        *o = acc;
    }
}

/// Accumulates `dW += dy x^T`, `db += dy` and writes `dx = W^T dy` (if given).
fn affine_back(p: &[f64], g: &mut [f64], d: &Dense, x: &[f64], dy: &[f64], dx: Option<&mut [f64]>) {
    let (w0, b0) = (d.weights().start, d.biases().start);
    for (r, &dyr) in dy.iter().enumerate() {
        let row = &mut g[w0 + r * d.cols..w0 + (r + 1) * d.cols];
        for (gi, xi) in row.iter_mut().zip(x) {
            *gi += dyr * xi;
        }
        if d.bias {
            g[b0 + r] += dyr;
        }
    }
    if let Some(dx) = dx {
        let w = &p[d.weights()];
        dx.iter_mut().for_each(|v| *v = 0.0);
        for (r, &dyr) in dy.iter().enumerate() {
            for (c, v) in dx.iter_mut().enumerate() {
                *v += w[r * d.cols + c] * dyr;
            }
        }
    }
}

/// Activations at one position, kept for the backward pass.
struct Position {
    token: usize,
    embed: Vec<f64>,
    enc: Vec<f64>,
    /// encoder output concatenated with the language one-hot
    trunk_in: Vec<f64>,
    trunk: Vec<f64>,
    pre: Vec<f64>,
    post_hidden: Vec<f64>,
    post: Vec<f64>,
}

fn forward_position(p: &[f64], l: &Layout, head: &Dense, token: usize, language: usize) -> Position {
    let t = &l.topology;
    let e = t.embed_dim;
    let embed = p[l.embedding.offset + token * e..l.embedding.offset + (token + 1) * e].to_vec();

    let mut enc = vec![0.0; t.encoder_hidden];
    affine(p, &l.encoder, &embed, &mut enc);
    enc.iter_mut().for_each(|v| *v = v.tanh());

    let mut trunk_in = vec![0.0; t.encoder_hidden + t.num_languages];
    trunk_in[..t.encoder_hidden].copy_from_slice(&enc);
    trunk_in[t.encoder_hidden + language] = 1.0;
    let mut trunk = vec![0.0; t.trunk_dim];
    affine(p, &l.trunk, &trunk_in, &mut trunk);
    trunk.iter_mut().for_each(|v| *v = v.tanh());

    let mut pre = vec![0.0; t.frame_dim];
    affine(p, head, &trunk, &mut pre);

    let mut post_hidden = vec![0.0; t.postnet_hidden];
    affine(p, &l.postnet_in, &pre, &mut post_hidden);
    post_hidden.iter_mut().for_each(|v| *v = v.tanh());
    let mut post = vec![0.0; t.frame_dim];
    affine(p, &l.postnet_out, &post_hidden, &mut post);
    for (o, y) in post.iter_mut().zip(&pre) {
        *o += y;
    }

    Position {
        token,
        embed,
        enc,
        trunk_in,
        trunk,
        pre,
        post_hidden,
        post,
    }
}

/// Backpropagates `d_pre` / `d_post` (loss gradients w.r.t. the two outputs) into `g`.
fn backward_position(p: &[f64], g: &mut [f64], l: &Layout, head: &Dense, a: &Position, d_pre: &[f64], d_post: &[f64]) {
    let t = &l.topology;
    let mut d_ph = vec![0.0; t.postnet_hidden];
    affine_back(p, g, &l.postnet_out, &a.post_hidden, d_post, Some(&mut d_ph));
    for (d, h) in d_ph.iter_mut().zip(&a.post_hidden) {
        *d *= 1.0 - h * h;
    }
    let mut d_y = vec![0.0; t.frame_dim];
    affine_back(p, g, &l.postnet_in, &a.pre, &d_ph, Some(&mut d_y));
    for ((dy, dp), dq) in d_y.iter_mut().zip(d_pre).zip(d_post) {
        *dy += dp + dq;
    }

    let mut d_trunk = vec![0.0; t.trunk_dim];
    affine_back(p, g, head, &a.trunk, &d_y, Some(&mut d_trunk));
    for (d, h) in d_trunk.iter_mut().zip(&a.trunk) {
        *d *= 1.0 - h * h;
    }
    let mut d_trunk_in = vec![0.0; a.trunk_in.len()];
    affine_back(p, g, &l.trunk, &a.trunk_in, &d_trunk, Some(&mut d_trunk_in));

    let mut d_enc = d_trunk_in[..t.encoder_hidden].to_vec();
    for (d, h) in d_enc.iter_mut().zip(&a.enc) {
        *d *= 1.0 - h * h;
    }
    let mut d_embed = vec![0.0; t.embed_dim];
    affine_back(p, g, &l.encoder, &a.embed, &d_enc, Some(&mut d_embed));
    let row = l.embedding.offset + a.token * t.embed_dim;
    for (gi, d) in g[row..row + t.embed_dim].iter_mut().zip(&d_embed) {
        *gi += d;
    }
}

fn check_sample(l: &Layout, index: usize, s: &Sample) -> Result<()> {
    let t = &l.topology;
    let err = |message: String| Err(Error::InputDomain { sample: index, message });
    if s.tokens.is_empty() {
        return err("empty token sequence".into());
    }
    if let Some(tok) = s.tokens.iter().find(|&&k| k as usize >= t.vocab_size) {
        return err(format!("token id {tok} >= vocab size {}", t.vocab_size));
    }
    if s.language_id() as usize >= t.num_languages {
        return err(format!(
            "language id {} >= language count {}",
            s.language_id(),
            t.num_languages
        ));
    }
    if s.frame_dim != t.frame_dim || s.frames.len() != s.tokens.len() * t.frame_dim {
        return err(format!(
            "target shape {}x{} does not match frame_dim {}",
            s.tokens.len(),
            s.frame_dim,
            t.frame_dim
        ));
    }
    Ok(())
}

fn check_batch(l: &Layout, samples: &[&Sample]) -> Result<()> {
    samples
        .iter()
        .enumerate()
        .try_for_each(|(i, s)| check_sample(l, i, s))
}

fn run_sample(params: &ParameterSet, head: HeadSelector, s: &Sample) -> FrameOutput {
    let l = params.layout();
    let h = l.head(head);
    let fd = l.topology.frame_dim;
    let mut out = FrameOutput {
        pre_postnet: Vec::with_capacity(s.len() * fd),
        post_postnet: Vec::with_capacity(s.len() * fd),
    };
    for &tok in &s.tokens {
        let a = forward_position(&params.values, l, &h, tok as usize, s.language_id() as usize);
        out.pre_postnet.extend_from_slice(&a.pre);
        out.post_postnet.extend_from_slice(&a.post);
    }
    out
}

pub fn forward(params: &ParameterSet, batch: &[&Sample], head: HeadSelector) -> Result<Vec<FrameOutput>> {
    forward_with(Exec::default(), params, batch, head)
}

pub fn forward_with(
    exec: Exec,
    params: &ParameterSet,
    batch: &[&Sample],
    head: HeadSelector,
) -> Result<Vec<FrameOutput>> {
    check_batch(params.layout(), batch)?;
    Ok(exec.map(batch, |s| run_sample(params, head, s)))
}

/// Post-postnet output of the LBS head for a single sample.
pub fn infer(params: &ParameterSet, sample: &Sample) -> Result<Vec<f64>> {
    check_sample(params.layout(), 0, sample)?;
    Ok(run_sample(params, HeadSelector::Lbs, sample).post_postnet)
}

struct Partial {
    pre: f64,
    post: f64,
    grad: Option<Vec<f64>>,
}

/// Sums per-sample MSE terms (already divided by batch size) over one chunk,
/// optionally accumulating the gradient.
fn chunk_loss(params: &ParameterSet, head: HeadSelector, chunk: &[&Sample], n: usize, with_grad: bool) -> Partial {
    let l = params.layout();
    let h = l.head(head);
    let fd = l.topology.frame_dim;
    let mut part = Partial {
        pre: 0.0,
        post: 0.0,
        grad: with_grad.then(|| vec![0.0; params.len()]),
    };
    let mut d_pre = vec![0.0; fd];
    let mut d_post = vec![0.0; fd];
    for s in chunk {
        let scale = 1.0 / (n * s.len() * fd) as f64;
        let (mut pre_sq, mut post_sq) = (0.0, 0.0);
        for (t, &tok) in s.tokens.iter().enumerate() {
            let a = forward_position(&params.values, l, &h, tok as usize, s.language_id() as usize);
            let target = s.frame(t);
            for d in 0..fd {
                let ep = a.pre[d] - target[d];
                let eq = a.post[d] - target[d];
                pre_sq += ep * ep;
                post_sq += eq * eq;
                d_pre[d] = 2.0 * scale * ep;
                d_post[d] = 2.0 * scale * eq;
            }
            if let Some(g) = part.grad.as_mut() {
                backward_position(&params.values, g, l, &h, &a, &d_pre, &d_post);
            }
        }
        part.pre += pre_sq * scale;
        part.post += post_sq * scale;
    }
    part
}

fn reduce(exec: Exec, params: &ParameterSet, batch: &[&Sample], head: HeadSelector, with_grad: bool) -> (LossBreakdown, Option<Gradient>) {
    let n = batch.len();
    let parts = exec.map_chunks(batch, |chunk| chunk_loss(params, head, chunk, n, with_grad));
    let (mut pre, mut post) = (0.0, 0.0);
    let mut grad = with_grad.then(|| Gradient::zeros(params.len()));
    for part in parts {
        pre += part.pre;
        post += part.post;
        if let (Some(g), Some(pg)) = (grad.as_mut(), part.grad) {
            for (a, b) in g.values.iter_mut().zip(pg) {
                *a += b;
            }
        }
    }
    (LossBreakdown::new(pre, post), grad)
}

/// Batch loss (pre + post-postnet MSE, averaged over frames then samples) and its
/// exact gradient. The unselected head's segment of the gradient is zero.
pub fn loss_and_grad(params: &ParameterSet, batch: &[&Sample], head: HeadSelector) -> Result<(LossBreakdown, Gradient)> {
    loss_and_grad_with(Exec::default(), params, batch, head)
}

pub fn loss_and_grad_with(
    exec: Exec,
    params: &ParameterSet,
    batch: &[&Sample],
    head: HeadSelector,
) -> Result<(LossBreakdown, Gradient)> {
    check_batch(params.layout(), batch)?;
    if batch.is_empty() {
        return Err(Error::Usage("empty batch".into()));
    }
    let (loss, grad) = reduce(exec, params, batch, head, true);
    Ok((loss, grad.expect("gradient requested")))
}

pub fn loss_only(params: &ParameterSet, batch: &[&Sample], head: HeadSelector) -> Result<LossBreakdown> {
    check_batch(params.layout(), batch)?;
    if batch.is_empty() {
        return Err(Error::Usage("empty batch".into()));
    }
    Ok(reduce(Exec::default(), params, batch, head, false).0)
}

/// Largest `|analytic - central difference| / max(1, |central difference|)` over all parameters.
pub fn finite_diff_check(params: &ParameterSet, batch: &[&Sample], head: HeadSelector, eps: f64) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::Usage(format!("finite-difference step must be positive, got {eps}")));
    }
    let (_, grad) = loss_and_grad_with(Exec::Sequential, params, batch, head)?;
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        let orig = probe.values[i];
        probe.values[i] = orig + eps;
        let plus = reduce(Exec::Sequential, &probe, batch, head, false).0.total;
        probe.values[i] = orig - eps;
        let minus = reduce(Exec::Sequential, &probe, batch, head, false).0.total;
        probe.values[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        worst = worst.max((grad.values[i] - numeric).abs() / numeric.abs().max(1.0));
    }
    Ok(worst)
}
