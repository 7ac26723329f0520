//! A small differentiable grounding scorer with two expression encoders
//! (order-insensitive bag-of-words and order-sensitive attention over
//! positional embeddings) plus a relational-QA head sharing the trunk.
//! Reverse-mode gradients are exact and written out by hand.
//!
//! Everything is f64; parameters live in flat row-major `Vec<f64>`s.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Box;
use crate::rng::Stream;
use crate::vocab::{token_id, CATEGORY_COUNT, COLOR_COUNT, SIZE_COUNT, VOCAB_SIZE};
use crate::worldgen::{Expression, QaExample, Scene, ANSWER_COUNT};

pub const DEFAULT_EMBED_DIM: usize = 32;
pub const MAX_TOKENS: usize = 16;
/// [cx, cy, w, h, area] ++ category ++ color ++ size one-hots.
pub const BOX_FEATURES: usize = 5 + CATEGORY_COUNT + COLOR_COUNT + SIZE_COUNT;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Bow,
    Seq,
}

/// The differentiated tensors; also the shape of a gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensors {
    /// Token embeddings, V x d.
    pub e: Vec<f64>,
    /// Positional embeddings, Lmax x d.
    pub p: Vec<f64>,
    /// Attention query, d.
    pub q: Vec<f64>,
    /// Box projection, d x f.
    pub w: Vec<f64>,
    /// Box projection bias, d.
    pub c: Vec<f64>,
    /// QA answer head, A x d.
    pub u_head: Vec<f64>,
    /// QA answer bias, A.
    pub d0: Vec<f64>,
}

impl Tensors {
    pub fn zeros(d: usize) -> Self {
        Tensors {
            e: vec![0.0; VOCAB_SIZE * d],
            p: vec![0.0; MAX_TOKENS * d],
            q: vec![0.0; d],
            w: vec![0.0; d * BOX_FEATURES],
            c: vec![0.0; d],
            u_head: vec![0.0; ANSWER_COUNT * d],
            d0: vec![0.0; ANSWER_COUNT],
        }
    }

    pub fn fields(&self) -> [(&'static str, &Vec<f64>); 7] {
        [
            ("e", &self.e),
            ("p", &self.p),
            ("q", &self.q),
            ("w", &self.w),
            ("c", &self.c),
            ("u_head", &self.u_head),
            ("d0", &self.d0),
        ]
    }

    pub fn fields_mut(&mut self) -> [(&'static str, &mut Vec<f64>); 7] {
        [
            ("e", &mut self.e),
            ("p", &mut self.p),
            ("q", &mut self.q),
            ("w", &mut self.w),
            ("c", &mut self.c),
            ("u_head", &mut self.u_head),
            ("d0", &mut self.d0),
        ]
    }

    pub fn len(&self) -> usize {
        self.fields().iter().map(|(_, v)| v.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for (_, v) in self.fields() {
            out.extend_from_slice(v);
        }
        out
    }

    pub fn assign_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        for (_, v) in self.fields_mut() {
            let n = v.len();
            v.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        assert_eq!(off, flat.len());
    }

    /// self += scale * other
    pub fn axpy(&mut self, scale: f64, other: &Tensors) {
        for ((_, a), (_, b)) in self.fields_mut().into_iter().zip(other.fields()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        for (name, v) in self.fields() {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    param: name.to_string(),
                    context: context.to_string(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub encoder: EncoderKind,
    pub dim: usize,
    pub tensors: Tensors,
}

impl ModelParams {
    /// Uniform(-0.1, 0.1) initialization from a derived seed.
    pub fn init(encoder: EncoderKind, dim: usize, seed: u64) -> Self {
        let mut t = Tensors::zeros(dim);
        let mut rng = Stream::new(seed);
        for (_, v) in t.fields_mut() {
            for x in v.iter_mut() {
                *x = rng.next_in(-0.1, 0.1);
            }
        }
        ModelParams {
            encoder,
            dim,
            tensors: t,
        }
    }
}

/// The paper's triplet (image, expression, gold box).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub scene: Scene,
    pub expr: Expression,
    pub gold_box: u32,
}

impl TrainingExample {
    pub fn new(scene: Scene, expr: Expression) -> Self {
        let gold_box = expr.gold_box;
        TrainingExample {
            scene,
            expr,
            gold_box,
        }
    }

    pub fn gold_index(&self) -> usize {
        self.scene
            .boxes
            .iter()
            .position(|b| b.id == self.gold_box)
            .expect("gold box in scene")
    }
}

/// A relational question paired with its scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaInstance {
    pub scene: Scene,
    pub qa: QaExample,
}

pub fn tokens_to_ids(tokens: &[String]) -> Result<Vec<usize>> {
    if tokens.len() > MAX_TOKENS {
        return Err(Error::Overlength {
            len: tokens.len(),
            max: MAX_TOKENS,
        });
    }
    tokens.iter().map(|t| token_id(t)).collect()
}

pub fn box_features(b: &Box) -> [f64; BOX_FEATURES] {
    let mut x = [0.0; BOX_FEATURES];
    let (cx, cy) = b.center();
    x[0] = cx;
    x[1] = cy;
    x[2] = b.w;
    x[3] = b.h;
    x[4] = b.area();
    x[5 + b.category.index()] = 1.0;
    x[5 + CATEGORY_COUNT + b.color.index()] = 1.0;
    x[5 + CATEGORY_COUNT + COLOR_COUNT + b.size.index()] = 1.0;
    x
}

/// Stable softmax cross-entropy: returns (loss, probabilities).
pub fn softmax_ce(logits: &[f64], gold: usize) -> (f64, Vec<f64>) {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    let probs: Vec<f64> = exps.iter().map(|e| e / z).collect();
    let loss = z.ln() + m - logits[gold];
    (loss, probs)
}

/// Encoder forward state needed for the backward pass.
pub enum EncodeCache {
    Bow {
        sorted_ids: Vec<usize>,
    },
    Seq {
        ids: Vec<usize>,
        h: Vec<f64>, // L x d
        attn: Vec<f64>,
    },
}

/// Encode a token sequence into a d-vector.
///
/// Bag-of-words sums embedding rows in index-sorted order and divides by
/// the count, which makes the result bit-identical under any permutation
/// of the tokens. The sequence encoder adds positional rows and pools
/// with softmax attention against the query vector.
pub fn encode_expression(params: &ModelParams, ids: &[usize]) -> (Vec<f64>, EncodeCache) {
    let d = params.dim;
    let t = &params.tensors;
    match params.encoder {
        EncoderKind::Bow => {
            let mut sorted = ids.to_vec();
            sorted.sort_unstable();
            let mut u = vec![0.0; d];
            for &w in &sorted {
                for k in 0..d {
                    u[k] += t.e[w * d + k];
                }
            }
            let inv = 1.0 / sorted.len() as f64;
            for x in u.iter_mut() {
                *x *= inv;
            }
            (u, EncodeCache::Bow { sorted_ids: sorted })
        }
        EncoderKind::Seq => {
            let len = ids.len();
            let mut h = vec![0.0; len * d];
            for (pos, &w) in ids.iter().enumerate() {
                for k in 0..d {
                    h[pos * d + k] = t.e[w * d + k] + t.p[pos * d + k];
                }
            }
            let scale = 1.0 / (d as f64).sqrt();
            let scores: Vec<f64> = (0..len)
                .map(|pos| {
                    (0..d).map(|k| t.q[k] * h[pos * d + k]).sum::<f64>() * scale
                })
                .collect();
            let (_, attn) = softmax_ce(&scores, 0); // probs only
            let mut u = vec![0.0; d];
            for pos in 0..len {
                for k in 0..d {
                    u[k] += attn[pos] * h[pos * d + k];
                }
            }
            (
                u,
                EncodeCache::Seq {
                    ids: ids.to_vec(),
                    h,
                    attn,
                },
            )
        }
    }
}

/// Accumulate d(loss)/d(encoder inputs) given d(loss)/du.
fn encode_backward(
    params: &ModelParams,
    cache: &EncodeCache,
    du: &[f64],
    grads: &mut Tensors,
) {
    let d = params.dim;
    match cache {
        EncodeCache::Bow { sorted_ids } => {
            let inv = 1.0 / sorted_ids.len() as f64;
            for &w in sorted_ids {
                for k in 0..d {
                    grads.e[w * d + k] += du[k] * inv;
                }
            }
        }
        EncodeCache::Seq { ids, h, attn } => {
            let len = ids.len();
            let scale = 1.0 / (d as f64).sqrt();
            // u = sum_t attn_t h_t
            let mut dh = vec![0.0; len * d];
            let mut dattn = vec![0.0; len];
            for pos in 0..len {
                for k in 0..d {
                    dh[pos * d + k] += attn[pos] * du[k];
                    dattn[pos] += du[k] * h[pos * d + k];
                }
            }
            // softmax jacobian
            let dot: f64 = (0..len).map(|pos| attn[pos] * dattn[pos]).sum();
            let dscore: Vec<f64> = (0..len).map(|pos| attn[pos] * (dattn[pos] - dot)).collect();
            // scores_t = q . h_t * scale
            for pos in 0..len {
                for k in 0..d {
                    grads.q[k] += dscore[pos] * h[pos * d + k] * scale;
                    dh[pos * d + k] += dscore[pos] * params.tensors.q[k] * scale;
                }
            }
            for (pos, &w) in ids.iter().enumerate() {
                for k in 0..d {
                    grads.e[w * d + k] += dh[pos * d + k];
                    grads.p[pos * d + k] += dh[pos * d + k];
                }
            }
        }
    }
}

/// Shared trunk: per-box embedding v_b = tanh(W x_b + c).
fn box_embeddings(params: &ModelParams, scene: &Scene) -> (Vec<f64>, Vec<[f64; BOX_FEATURES]>) {
    let d = params.dim;
    let t = &params.tensors;
    let n = scene.boxes.len();
    let mut v = vec![0.0; n * d];
    let mut feats = Vec::with_capacity(n);
    for (bi, b) in scene.boxes.iter().enumerate() {
        let x = box_features(b);
        for k in 0..d {
            let mut a = t.c[k];
            for (j, xj) in x.iter().enumerate() {
                a += t.w[k * BOX_FEATURES + j] * xj;
            }
            v[bi * d + k] = a.tanh();
        }
        feats.push(x);
    }
    (v, feats)
}

fn box_embeddings_backward(
    params: &ModelParams,
    v: &[f64],
    feats: &[[f64; BOX_FEATURES]],
    dv: &[f64],
    grads: &mut Tensors,
) {
    let d = params.dim;
    for (bi, x) in feats.iter().enumerate() {
        for k in 0..d {
            let vk = v[bi * d + k];
            let da = (1.0 - vk * vk) * dv[bi * d + k];
            if da == 0.0 {
                continue;
            }
            for (j, xj) in x.iter().enumerate() {
                grads.w[k * BOX_FEATURES + j] += da * xj;
            }
            grads.c[k] += da;
        }
    }
}

/// Forward state of one grounding term.
pub struct GroundingForward {
    pub loss: f64,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    u: Vec<f64>,
    v: Vec<f64>,
    feats: Vec<[f64; BOX_FEATURES]>,
    enc: EncodeCache,
    gold_index: usize,
}

/// Cross-entropy grounding loss of expression tokens against a scene's
/// boxes, with the gold given as a box index into the scene.
pub fn grounding_forward(
    params: &ModelParams,
    scene: &Scene,
    ids: &[usize],
    gold_index: usize,
) -> Result<GroundingForward> {
    let d = params.dim;
    let (u, enc) = encode_expression(params, ids);
    let (v, feats) = box_embeddings(params, scene);
    let n = scene.boxes.len();
    let logits: Vec<f64> = (0..n)
        .map(|bi| (0..d).map(|k| u[k] * v[bi * d + k]).sum())
        .collect();
    let (loss, probs) = softmax_ce(&logits, gold_index);
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            param: "grounding logits".into(),
            context: "grounding_forward".into(),
        });
    }
    Ok(GroundingForward {
        loss,
        logits,
        probs,
        u,
        v,
        feats,
        enc,
        gold_index,
    })
}

/// Accumulate gradients of `coef * loss` for one grounding term.
pub fn grounding_backward(
    params: &ModelParams,
    fwd: &GroundingForward,
    coef: f64,
    grads: &mut Tensors,
) {
    let d = params.dim;
    let n = fwd.probs.len();
    let mut ds: Vec<f64> = fwd.probs.clone();
    ds[fwd.gold_index] -= 1.0;
    for x in ds.iter_mut() {
        *x *= coef;
    }
    // s_b = u . v_b
    let mut du = vec![0.0; d];
    let mut dv = vec![0.0; n * d];
    for bi in 0..n {
        for k in 0..d {
            du[k] += ds[bi] * fwd.v[bi * d + k];
            dv[bi * d + k] += ds[bi] * fwd.u[k];
        }
    }
    box_embeddings_backward(params, &fwd.v, &fwd.feats, &dv, grads);
    encode_backward(params, &fwd.enc, &du, grads);
}

/// Convenience wrapper over the spec's (loss, per-box logits) surface.
pub fn grounding_loss(params: &ModelParams, ex: &TrainingExample) -> Result<(f64, Vec<f64>)> {
    let ids = tokens_to_ids(&ex.expr.tokens)?;
    let fwd = grounding_forward(params, &ex.scene, &ids, ex.gold_index())?;
    Ok((fwd.loss, fwd.logits))
}

/// Forward state of one QA term.
pub struct QaForward {
    pub loss: f64,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    u: Vec<f64>,
    z: Vec<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
    feats: Vec<[f64; BOX_FEATURES]>,
    enc: EncodeCache,
    gold: usize,
}

/// QA head: pool boxes (z = mean v_b), gate by the question encoding
/// (m = u ⊙ z), answer logits = U m + d0, cross-entropy on the answer.
pub fn qa_forward(
    params: &ModelParams,
    scene: &Scene,
    ids: &[usize],
    answer_index: usize,
) -> Result<QaForward> {
    let d = params.dim;
    let t = &params.tensors;
    let (u, enc) = encode_expression(params, ids);
    let (v, feats) = box_embeddings(params, scene);
    let n = scene.boxes.len();
    let mut z = vec![0.0; d];
    for bi in 0..n {
        for k in 0..d {
            z[k] += v[bi * d + k];
        }
    }
    let inv = 1.0 / n as f64;
    for x in z.iter_mut() {
        *x *= inv;
    }
    let m: Vec<f64> = (0..d).map(|k| u[k] * z[k]).collect();
    let logits: Vec<f64> = (0..ANSWER_COUNT)
        .map(|a| {
            t.d0[a] + (0..d).map(|k| t.u_head[a * d + k] * m[k]).sum::<f64>()
        })
        .collect();
    let (loss, probs) = softmax_ce(&logits, answer_index);
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            param: "qa logits".into(),
            context: "qa_forward".into(),
        });
    }
    Ok(QaForward {
        loss,
        logits,
        probs,
        u,
        z,
        m,
        v,
        feats,
        enc,
        gold: answer_index,
    })
}

/// Accumulate gradients of `coef * loss` for one QA term.
pub fn qa_backward(params: &ModelParams, fwd: &QaForward, coef: f64, grads: &mut Tensors) {
    let d = params.dim;
    let t = &params.tensors;
    let n = fwd.feats.len();
    let mut dlogits: Vec<f64> = fwd.probs.clone();
    dlogits[fwd.gold] -= 1.0;
    for x in dlogits.iter_mut() {
        *x *= coef;
    }
    let mut dm = vec![0.0; d];
    for a in 0..ANSWER_COUNT {
        for k in 0..d {
            grads.u_head[a * d + k] += dlogits[a] * fwd.m[k];
            dm[k] += t.u_head[a * d + k] * dlogits[a];
        }
        grads.d0[a] += dlogits[a];
    }
    let du: Vec<f64> = (0..d).map(|k| dm[k] * fwd.z[k]).collect();
    let dz: Vec<f64> = (0..d).map(|k| dm[k] * fwd.u[k]).collect();
    let inv = 1.0 / n as f64;
    let mut dv = vec![0.0; n * d];
    for bi in 0..n {
        for k in 0..d {
            dv[bi * d + k] = dz[k] * inv;
        }
    }
    box_embeddings_backward(params, &fwd.v, &fwd.feats, &dv, grads);
    encode_backward(params, &fwd.enc, &du, grads);
}

/// (loss, answer logits) for one QA instance.
pub fn qa_loss(params: &ModelParams, ex: &QaInstance) -> Result<(f64, Vec<f64>)> {
    let ids = tokens_to_ids(&ex.qa.tokens)?;
    let fwd = qa_forward(params, &ex.scene, &ids, ex.qa.answer.index())?;
    Ok((fwd.loss, fwd.logits))
}

/// Index of the argmax grounding box for an expression.
pub fn predict_box(params: &ModelParams, scene: &Scene, tokens: &[String]) -> Result<u32> {
    let ids = tokens_to_ids(tokens)?;
    let fwd = grounding_forward(params, scene, &ids, 0)?;
    let best = fwd
        .logits
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap();
    Ok(scene.boxes[best].id)
}

/// Argmax answer index for a QA instance.
pub fn predict_answer(params: &ModelParams, ex: &QaInstance) -> Result<usize> {
    let (_, logits) = qa_loss(params, ex)?;
    Ok(logits
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::mix;
    use crate::worldgen::{generate_instance, GenConfig};

    fn example(seed: u64) -> TrainingExample {
        let (scene, expr) = generate_instance(seed, &GenConfig::default()).unwrap();
        TrainingExample::new(scene, expr)
    }

    #[test]
    fn bow_is_bitwise_permutation_invariant() {
        let params = ModelParams::init(EncoderKind::Bow, DEFAULT_EMBED_DIM, 1);
        let ex = example(2);
        let (_, logits) = grounding_loss(&params, &ex).unwrap();
        let mut rng = Stream::new(7);
        for _ in 0..20 {
            let mut shuffled = ex.clone();
            let mut perm: Vec<usize> = (0..ex.expr.tokens.len()).collect();
            rng.shuffle(&mut perm);
            shuffled.expr.tokens = perm.iter().map(|&i| ex.expr.tokens[i].clone()).collect();
            shuffled.expr.pos = perm.iter().map(|&i| ex.expr.pos[i]).collect();
            let (_, l2) = grounding_loss(&params, &shuffled).unwrap();
            assert_eq!(logits, l2, "bow logits must be bit-identical");
        }
    }

    #[test]
    fn seq_single_token_is_embedding_plus_position() {
        let params = ModelParams::init(EncoderKind::Seq, 8, 3);
        let ids = vec![5usize];
        let (u, _) = encode_expression(&params, &ids);
        let d = params.dim;
        for k in 0..d {
            assert!(
                (u[k] - (params.tensors.e[5 * d + k] + params.tensors.p[k])).abs() < 1e-15
            );
        }
    }

    #[test]
    fn seq_order_sensitivity_exists() {
        // some (params, tokens, swap) must change the encoding
        let params = ModelParams::init(EncoderKind::Seq, DEFAULT_EMBED_DIM, 4);
        let a = vec![2usize, 7, 9];
        let b = vec![9usize, 7, 2];
        let (ua, _) = encode_expression(&params, &a);
        let (ub, _) = encode_expression(&params, &b);
        let delta: f64 = ua
            .iter()
            .zip(&ub)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        assert!(delta > 0.0);
    }

    #[test]
    fn uniform_logits_give_log_n_loss() {
        assert!((softmax_ce(&[0.3; 7], 2).0 - (7f64).ln()).abs() < 1e-12);
        // zeroed parameters: v_b = tanh(c) = 0, so all logits are 0
        let params = ModelParams {
            encoder: EncoderKind::Bow,
            dim: 8,
            tensors: Tensors::zeros(8),
        };
        let ex = example(5);
        let (loss, _) = grounding_loss(&params, &ex).unwrap();
        assert!((loss - (ex.scene.boxes.len() as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn binary_softmax_closed_form() {
        for k in [0.0, 0.5, 2.0, 10.0] {
            let (loss, _) = softmax_ce(&[1.0, 1.0 - k], 0);
            assert!((loss - (1.0 + (-k as f64).exp()).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_probs_sum_to_one() {
        let (_, probs) = softmax_ce(&[3.0, -1.0, 0.4, 2.2], 1);
        let s: f64 = probs.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn qa_zero_head_gives_log_answer_count() {
        let mut params = ModelParams::init(EncoderKind::Seq, 8, 6);
        params.tensors.u_head.iter_mut().for_each(|x| *x = 0.0);
        params.tensors.d0.iter_mut().for_each(|x| *x = 0.0);
        let cfg = GenConfig::default();
        let (scene, qa) = crate::worldgen::generate_qa(3, &cfg).unwrap();
        let (loss, _) = qa_loss(&params, &QaInstance { scene, qa }).unwrap();
        assert!((loss - (ANSWER_COUNT as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn box_feature_one_hots() {
        let ex = example(8);
        for b in &ex.scene.boxes {
            let x = box_features(b);
            let cat: f64 = x[5..5 + CATEGORY_COUNT].iter().sum();
            let col: f64 = x[5 + CATEGORY_COUNT..5 + CATEGORY_COUNT + COLOR_COUNT]
                .iter()
                .sum();
            let siz: f64 = x[5 + CATEGORY_COUNT + COLOR_COUNT..].iter().sum();
            assert_eq!((cat, col, siz), (1.0, 1.0, 1.0));
        }
    }

    #[test]
    fn untouched_embedding_rows_have_zero_gradient() {
        let params = ModelParams::init(EncoderKind::Seq, 8, 9);
        let ex = example(10);
        let ids = tokens_to_ids(&ex.expr.tokens).unwrap();
        let fwd = grounding_forward(&params, &ex.scene, &ids, ex.gold_index()).unwrap();
        let mut grads = Tensors::zeros(8);
        grounding_backward(&params, &fwd, 1.0, &mut grads);
        let d = 8;
        for w in 0..VOCAB_SIZE {
            let touched = ids.contains(&w);
            let nz = (0..d).any(|k| grads.e[w * d + k] != 0.0);
            if !touched {
                assert!(!nz, "untouched row {w} has gradient");
            }
        }
    }

    #[test]
    fn grounding_gradient_matches_finite_differences() {
        let params = ModelParams::init(EncoderKind::Seq, 8, 11);
        let ex = example(12);
        let ids = tokens_to_ids(&ex.expr.tokens).unwrap();
        let gold = ex.gold_index();
        let fwd = grounding_forward(&params, &ex.scene, &ids, gold).unwrap();
        let mut grads = Tensors::zeros(8);
        grounding_backward(&params, &fwd, 1.0, &mut grads);

        let flat = params.tensors.flatten();
        let gflat = grads.flatten();
        let h = 1e-5;
        let mut rng = Stream::new(99);
        let mut worst = 0.0f64;
        for _ in 0..200 {
            let i = rng.choose_index(flat.len());
            let mut plus = params.clone();
            let mut minus = params.clone();
            let mut fp = flat.clone();
            fp[i] += h;
            plus.tensors.assign_flat(&fp);
            fp[i] -= 2.0 * h;
            minus.tensors.assign_flat(&fp);
            let lp = grounding_forward(&plus, &ex.scene, &ids, gold).unwrap().loss;
            let lm = grounding_forward(&minus, &ex.scene, &ids, gold)
                .unwrap()
                .loss;
            let fd = (lp - lm) / (2.0 * h);
            let denom = fd.abs().max(gflat[i].abs()).max(1e-8);
            worst = worst.max((fd - gflat[i]).abs() / denom);
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn qa_gradient_matches_finite_differences() {
        let params = ModelParams::init(EncoderKind::Seq, 8, 21);
        let cfg = GenConfig::default();
        let (scene, qa) = crate::worldgen::generate_qa(mix(4, 0), &cfg).unwrap();
        let ids = tokens_to_ids(&qa.tokens).unwrap();
        let gold = qa.answer.index();
        let fwd = qa_forward(&params, &scene, &ids, gold).unwrap();
        let mut grads = Tensors::zeros(8);
        qa_backward(&params, &fwd, 1.0, &mut grads);

        let flat = params.tensors.flatten();
        let gflat = grads.flatten();
        let h = 1e-5;
        let mut rng = Stream::new(55);
        for _ in 0..200 {
            let i = rng.choose_index(flat.len());
            let mut fp = flat.clone();
            let mut plus = params.clone();
            fp[i] += h;
            plus.tensors.assign_flat(&fp);
            let mut minus = params.clone();
            fp[i] -= 2.0 * h;
            minus.tensors.assign_flat(&fp);
            let lp = qa_forward(&plus, &scene, &ids, gold).unwrap().loss;
            let lm = qa_forward(&minus, &scene, &ids, gold).unwrap().loss;
            let fd = (lp - lm) / (2.0 * h);
            let denom = fd.abs().max(gflat[i].abs()).max(1e-8);
            assert!(
                (fd - gflat[i]).abs() / denom < 1e-4,
                "param {i}: fd {fd} vs {g}",
                g = gflat[i]
            );
        }
    }

    #[test]
    fn ce_gradient_wrt_logits_is_softmax_minus_onehot() {
        let logits = [0.7, -0.2, 1.4];
        let (_, probs) = softmax_ce(&logits, 2);
        let h = 1e-6;
        for i in 0..3 {
            let mut lp = logits;
            lp[i] += h;
            let mut lm = logits;
            lm[i] -= h;
            let fd = (softmax_ce(&lp, 2).0 - softmax_ce(&lm, 2).0) / (2.0 * h);
            let expect = probs[i] - if i == 2 { 1.0 } else { 0.0 };
            assert!((fd - expect).abs() < 1e-8);
        }
    }
}
