//! Incremental decoding with a per-session KV cache and the MLP-output hook
//! bus. Prefill and decoding share one code path, processing a single
//! position per call, so activations read by [`forward`] are bit-identical
//! to those seen during [`generate_greedy`].

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::transformer::{gelu, TokenId, Transformer};
use super::ModelError;
use crate::linalg::{Matrix, Vector};
use crate::Scalar;

/// Inner product with eight independent partial sums so the loop
/// vectorizes; the summation order is fixed, so results are reproducible.
pub(crate) fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut lanes = [S::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            lanes[i] += x[i] * y[i];
        }
    }
    let mut tail = S::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail += *x * *y;
    }
    let l = lanes;
    ((l[0] + l[4]) + (l[2] + l[6])) + ((l[1] + l[5]) + (l[3] + l[7])) + tail
}

fn matvec<S: Scalar>(m: &Matrix<S>, x: &[S], out: &mut [S]) {
    for (i, o) in out.iter_mut().enumerate() {
        *o = dot(m.row(i), x);
    }
}

/// Observes (and may modify) each MLP block output before it is added to the
/// residual stream.
pub trait MlpHook<S: Scalar> {
    fn on_mlp_output(&mut self, layer: usize, position: usize, output: &mut [S]);
}

/// Hook that does nothing.
pub struct NoHook;

impl<S: Scalar> MlpHook<S> for NoHook {
    fn on_mlp_output(&mut self, _: usize, _: usize, _: &mut [S]) {}
}

/// Activation site. Only MLP outputs are exposed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteKind {
    MlpOutput,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HookSite {
    pub layer: usize,
    pub site: SiteKind,
}

impl HookSite {
    pub fn mlp_output(layer: usize) -> Self {
        Self {
            layer,
            site: SiteKind::MlpOutput,
        }
    }

    /// Every MLP output of a model with `n_layers` layers.
    pub fn all(n_layers: usize) -> BTreeSet<HookSite> {
        (0..n_layers).map(Self::mlp_output).collect()
    }
}

/// One position of model input.
#[derive(Debug, Clone, Copy)]
pub enum StepInput<'a, S> {
    Token(TokenId),
    Embedding(&'a [S]),
}

/// Mutable decoding state over a shared model.
pub struct Session<'m, S: Scalar> {
    model: &'m Transformer<S>,
    keys: Vec<Vec<S>>,
    values: Vec<Vec<S>>,
    len: usize,
    resid: Vec<S>,
    normed: Vec<S>,
    q: Vec<S>,
    k: Vec<S>,
    v: Vec<S>,
    attn: Vec<S>,
    proj: Vec<S>,
    hidden: Vec<S>,
    scores: Vec<S>,
}

impl<'m, S: Scalar> Session<'m, S> {
    pub fn new(model: &'m Transformer<S>) -> Self {
        let c = model.config;
        let d = c.d_model;
        Self {
            model,
            keys: vec![Vec::new(); c.n_layers],
            values: vec![Vec::new(); c.n_layers],
            len: 0,
            resid: vec![S::zero(); d],
            normed: vec![S::zero(); d],
            q: vec![S::zero(); d],
            k: vec![S::zero(); d],
            v: vec![S::zero(); d],
            attn: vec![S::zero(); d],
            proj: vec![S::zero(); d],
            hidden: vec![S::zero(); c.d_mlp],
            scores: Vec::new(),
        }
    }

    /// Number of positions processed so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Run one position through every layer, calling `hook` on each MLP output.
    pub fn step(&mut self, input: StepInput<'_, S>, hook: &mut dyn MlpHook<S>) -> Result<(), ModelError> {
        let model = self.model;
        let c = model.config;
        let pos = self.len;
        if pos >= c.max_seq {
            return Err(ModelError::LengthOverflow {
                needed: pos + 1,
                max_seq: c.max_seq,
            });
        }
        match input {
            StepInput::Token(t) => model.embed_token(t, pos, &mut self.resid)?,
            StepInput::Embedding(e) => {
                if e.len() != c.d_model {
                    return Err(ModelError::DimMismatch {
                        expected: c.d_model,
                        got: e.len(),
                    });
                }
                if e.iter().any(|x| !x.is_finite()) {
                    return Err(ModelError::NonFinitePrefix);
                }
                model.embed_vector(e, pos, &mut self.resid);
            }
        }

        let dh = c.head_dim();
        let scale = S::one() / S::from_usize(dh).expect("head dim fits").sqrt();
        for (layer, block) in model.blocks.iter().enumerate() {
            // attention
            block.ln1.apply(&self.resid, &mut self.normed);
            matvec(&block.wq, &self.normed, &mut self.q);
            matvec(&block.wk, &self.normed, &mut self.k);
            matvec(&block.wv, &self.normed, &mut self.v);
            self.keys[layer].extend_from_slice(&self.k);
            self.values[layer].extend_from_slice(&self.v);
            let keys = &self.keys[layer];
            let values = &self.values[layer];
            let n_ctx = pos + 1;
            for h in 0..c.n_heads {
                let lo = h * dh;
                let qh = &self.q[lo..lo + dh];
                self.scores.clear();
                let mut max = S::neg_infinity();
                for j in 0..n_ctx {
                    let s = dot(qh, &keys[j * c.d_model + lo..j * c.d_model + lo + dh]) * scale;
                    max = max.max(s);
                    self.scores.push(s);
                }
                let mut total = S::zero();
                for s in &mut self.scores {
                    *s = (*s - max).exp();
                    total += *s;
                }
                let out = &mut self.attn[lo..lo + dh];
                out.iter_mut().for_each(|o| *o = S::zero());
                for (j, s) in self.scores.iter().enumerate() {
                    let p = *s / total;
                    let vj = &values[j * c.d_model + lo..j * c.d_model + lo + dh];
                    for (o, vv) in out.iter_mut().zip(vj) {
                        *o += p * *vv;
                    }
                }
            }
            matvec(&block.wo, &self.attn, &mut self.proj);
            for (r, p) in self.resid.iter_mut().zip(&self.proj) {
                *r += *p;
            }

            // mlp
            block.ln2.apply(&self.resid, &mut self.normed);
            for (i, hdn) in self.hidden.iter_mut().enumerate() {
                *hdn = gelu(dot(block.w1.row(i), &self.normed) + block.b1[i]);
            }
            for (i, p) in self.proj.iter_mut().enumerate() {
                *p = dot(block.w2.row(i), &self.hidden) + block.b2[i];
            }
            hook.on_mlp_output(layer, pos, &mut self.proj);
            for (r, p) in self.resid.iter_mut().zip(&self.proj) {
                *r += *p;
            }
        }
        self.len += 1;
        Ok(())
    }

    /// Next-token logits at the most recently processed position.
    pub fn logits(&mut self) -> Vec<S> {
        self.model.logits(&self.resid, &mut self.normed)
    }
}

/// Greedy argmax; ties resolve to the lowest token id.
pub fn argmax<S: Scalar>(logits: &[S]) -> TokenId {
    let mut best = 0;
    for (i, v) in logits.iter().enumerate() {
        if *v > logits[best] {
            best = i;
        }
    }
    best as TokenId
}

/// Activations and logits read at requested positions.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace<S: Scalar> {
    pub positions: Vec<usize>,
    /// Position → logits.
    pub logits: BTreeMap<usize, Vec<S>>,
    /// Layer → position → MLP output.
    pub mlp_outputs: BTreeMap<usize, BTreeMap<usize, Vector<S>>>,
}

impl<S: Scalar> ForwardTrace<S> {
    pub fn mlp_output(&self, layer: usize, position: usize) -> Option<&Vector<S>> {
        self.mlp_outputs.get(&layer)?.get(&position)
    }
}

struct Recorder<'a, S: Scalar> {
    positions: &'a BTreeSet<usize>,
    layers: BTreeSet<usize>,
    out: BTreeMap<usize, BTreeMap<usize, Vector<S>>>,
}

impl<S: Scalar> MlpHook<S> for Recorder<'_, S> {
    fn on_mlp_output(&mut self, layer: usize, position: usize, output: &mut [S]) {
        if self.positions.contains(&position) && self.layers.contains(&layer) {
            let v = Vector::new(output.to_vec()).expect("activations are finite");
            self.out.entry(layer).or_default().insert(position, v);
        }
    }
}

/// Run `prefix ++ tokens` and read logits plus MLP outputs at `record_at`.
/// Positions index the full sequence, prefix rows first.
pub fn forward<S: Scalar>(
    model: &Transformer<S>,
    prefix: &Matrix<S>,
    tokens: &[TokenId],
    record_at: &BTreeSet<usize>,
    read_sites: &BTreeSet<HookSite>,
) -> Result<ForwardTrace<S>, ModelError> {
    check_prefix(model, prefix)?;
    let total = prefix.rows() + tokens.len();
    if total > model.config.max_seq {
        return Err(ModelError::LengthOverflow {
            needed: total,
            max_seq: model.config.max_seq,
        });
    }
    if let Some(&p) = record_at.iter().find(|&&p| p >= total) {
        return Err(ModelError::PositionOutOfRange {
            position: p,
            len: total,
        });
    }
    if let Some(site) = read_sites.iter().find(|s| s.layer >= model.n_layers()) {
        return Err(ModelError::LayerOutOfRange {
            layer: site.layer,
            n_layers: model.n_layers(),
        });
    }
    let mut trace = ForwardTrace {
        positions: record_at.iter().copied().collect(),
        logits: BTreeMap::new(),
        mlp_outputs: BTreeMap::new(),
    };
    let Some(&last) = record_at.iter().next_back() else {
        return Ok(trace);
    };
    let mut rec = Recorder {
        positions: record_at,
        layers: read_sites.iter().map(|s| s.layer).collect(),
        out: BTreeMap::new(),
    };
    let mut session = Session::new(model);
    for pos in 0..=last {
        let input = if pos < prefix.rows() {
            StepInput::Embedding(prefix.row(pos))
        } else {
            StepInput::Token(tokens[pos - prefix.rows()])
        };
        session.step(input, &mut rec)?;
        if record_at.contains(&pos) {
            trace.logits.insert(pos, session.logits());
        }
    }
    trace.mlp_outputs = rec.out;
    Ok(trace)
}

fn check_prefix<S: Scalar>(model: &Transformer<S>, prefix: &Matrix<S>) -> Result<(), ModelError> {
    if prefix.rows() > 0 && prefix.cols() != model.d_model() {
        return Err(ModelError::DimMismatch {
            expected: model.d_model(),
            got: prefix.cols(),
        });
    }
    Ok(())
}

/// Residual injection driven by the generation loop. The loop calls
/// [`begin_segment`](Self::begin_segment) before each injected forward
/// segment, then [`apply`](Self::apply) for every layer's MLP output in it.
pub trait ResidualInjector<S: Scalar> {
    /// Gate for the forward pass that predicts generated token `t`.
    fn gate(&self, t: usize) -> S;
    fn begin_segment(&mut self);
    fn apply(&mut self, layer: usize, gamma: S, output: &mut [S]);
}

struct InjectHook<'a, S: Scalar> {
    injector: &'a mut dyn ResidualInjector<S>,
    gamma: S,
}

impl<S: Scalar> MlpHook<S> for InjectHook<'_, S> {
    fn on_mlp_output(&mut self, layer: usize, _position: usize, output: &mut [S]) {
        self.injector.apply(layer, self.gamma, output);
    }
}

/// Result of one greedy generation.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationTrace<S: Scalar> {
    pub tokens: Vec<TokenId>,
    /// `γ(t)` used by the forward pass that predicted token `t` (0 without injection).
    pub per_step_gates: Vec<f64>,
    /// Whether a nonzero gate was applied for token `t`.
    pub per_step_injected: Vec<bool>,
    pub prefill_injected: bool,
    /// Logits that predicted each generated token.
    pub step_logits: Vec<Vec<S>>,
    /// Forward segments run: one prefill plus one per generated token.
    pub forward_segments: usize,
    /// Segments in which the injector was invoked.
    pub injection_applications: usize,
    /// Full-sequence length of the prompt (prefix rows plus prompt tokens).
    pub prompt_len: usize,
}

/// Greedy decoding. With an injector, the residual is applied at the last
/// prompt position during prefill and in every generated token's forward
/// pass. Every generated token (including the last) is run through the model,
/// so there are `1 + max_new` forward segments.
pub fn generate_greedy<S: Scalar>(
    model: &Transformer<S>,
    prefix: &Matrix<S>,
    prompt: &[TokenId],
    max_new: usize,
    injection: Option<&mut dyn ResidualInjector<S>>,
) -> Result<GenerationTrace<S>, ModelError> {
    generate_greedy_timed(model, prefix, prompt, max_new, injection, None)
}

/// As [`generate_greedy`], additionally recording the wall time of every
/// decode step (token forward plus argmax) into `step_times`.
pub fn generate_greedy_timed<S: Scalar>(
    model: &Transformer<S>,
    prefix: &Matrix<S>,
    prompt: &[TokenId],
    max_new: usize,
    mut injection: Option<&mut dyn ResidualInjector<S>>,
    mut step_times: Option<&mut Vec<std::time::Duration>>,
) -> Result<GenerationTrace<S>, ModelError> {
    check_prefix(model, prefix)?;
    let prompt_len = prefix.rows() + prompt.len();
    if prompt_len == 0 {
        return Err(ModelError::EmptyInput);
    }
    let needed = prompt_len + max_new;
    if needed > model.config.max_seq {
        return Err(ModelError::LengthOverflow {
            needed,
            max_seq: model.config.max_seq,
        });
    }

    let mut session = Session::new(model);
    let mut trace = GenerationTrace {
        tokens: Vec::with_capacity(max_new),
        per_step_gates: Vec::with_capacity(max_new),
        per_step_injected: Vec::with_capacity(max_new),
        prefill_injected: injection.is_some(),
        step_logits: Vec::with_capacity(max_new),
        forward_segments: 0,
        injection_applications: 0,
        prompt_len,
    };

    // prefill: everything but the final position runs untouched
    for pos in 0..prompt_len - 1 {
        let input = if pos < prefix.rows() {
            StepInput::Embedding(prefix.row(pos))
        } else {
            StepInput::Token(prompt[pos - prefix.rows()])
        };
        session.step(input, &mut NoHook)?;
    }
    let last = prompt_len - 1;
    let last_input = if last < prefix.rows() {
        StepInput::Embedding(prefix.row(last))
    } else {
        StepInput::Token(prompt[last - prefix.rows()])
    };

    // segment t predicts generated token t; segment 0 is the final prefill position
    let mut input = last_input;
    for t in 0..=max_new {
        let started = std::time::Instant::now();
        let gamma = match injection.as_deref_mut() {
            Some(inj) => {
                let g = inj.gate(t);
                inj.begin_segment();
                trace.injection_applications += 1;
                let mut hook = InjectHook {
                    injector: inj,
                    gamma: g,
                };
                session.step(input, &mut hook)?;
                Some(g)
            }
            None => {
                session.step(input, &mut NoHook)?;
                None
            }
        };
        trace.forward_segments += 1;
        if t == max_new {
            break;
        }
        let logits = session.logits();
        let next = argmax(&logits);
        if t > 0 {
            if let Some(times) = step_times.as_deref_mut() {
                times.push(started.elapsed());
            }
        }
        trace.tokens.push(next);
        trace.step_logits.push(logits);
        trace.per_step_gates.push(gamma.map_or(0.0, |g| g.to_f64_lossy()));
        trace.per_step_injected.push(gamma.is_some_and(|g| g != S::zero()));
        input = StepInput::Token(next);
    }
    Ok(trace)
}
