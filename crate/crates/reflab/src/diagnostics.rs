//! Perturbation operators, simulated annotator panels, majority-vote
//! aggregation, the Easy/Hard split, and the three-stage adversarial
//! pipeline.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{correct_at_iou, DEFAULT_MARGIN};
use crate::rng::{mix, Stream};
use crate::vocab::Pos;
use crate::worldgen::{render, resolve_expression, Expression, Form, Parse, Scene};

/// Annotator policy.
///
/// `FullParse` reads the latent parse and picks uniformly among the
/// boxes it resolves to; `BagOfWords` ignores order and structure and
/// picks uniformly among boxes whose category is mentioned anywhere in
/// the token bag (attribute tokens may support any candidate, so they
/// never eliminate one). An empty candidate set falls back to a uniform
/// pick over all boxes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotatorKind {
    FullParse,
    BagOfWords,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorPanel {
    pub kind: AnnotatorKind,
    pub n_annotators: usize,
    pub agree_threshold: usize,
    pub iou_threshold: f64,
    pub noise_rate: f64,
    pub seed: u64,
}

impl AnnotatorPanel {
    /// Five bag-of-words annotators, 3-of-5 agreement: the stage-1 panel.
    pub fn stage1(seed: u64, noise_rate: f64) -> Self {
        AnnotatorPanel {
            kind: AnnotatorKind::BagOfWords,
            n_annotators: 5,
            agree_threshold: 3,
            iou_threshold: 0.5,
            noise_rate,
            seed,
        }
    }

    /// Three full-parse annotators, 2-of-3 agreement: the validation panel.
    pub fn stage3(seed: u64, noise_rate: f64) -> Self {
        AnnotatorPanel {
            kind: AnnotatorKind::FullParse,
            n_annotators: 3,
            agree_threshold: 2,
            iou_threshold: 0.5,
            noise_rate,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.agree_threshold < 1 || self.agree_threshold > self.n_annotators {
            return Err(Error::BadConfig(
                "agree_threshold must be in 1..=n_annotators".into(),
            ));
        }
        if !(self.iou_threshold > 0.0 && self.iou_threshold < 1.0) {
            return Err(Error::BadConfig("iou_threshold must be in (0,1)".into()));
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return Err(Error::BadConfig("noise_rate must be in [0,1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitLabel {
    Easy,
    Hard,
    Adversarial,
}

/// One panel's votes on one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteRecord {
    pub instance_id: u64,
    pub choices: Vec<u32>,
    pub correct: Vec<bool>,
    pub majority_correct: bool,
    /// Box id -> vote count among incorrect votes.
    pub confusion_counts: BTreeMap<u32, u32>,
}

/// Permute tokens and POS tags in lockstep; the parse is invalidated.
pub fn shuffle_tokens(expr: &Expression, seed: u64) -> Expression {
    let mut perm: Vec<usize> = (0..expr.tokens.len()).collect();
    Stream::new(seed).shuffle(&mut perm);
    Expression {
        expr_id: expr.expr_id,
        tokens: perm.iter().map(|&i| expr.tokens[i].clone()).collect(),
        pos: perm.iter().map(|&i| expr.pos[i]).collect(),
        parse: None,
        gold_box: expr.gold_box,
        form: expr.form,
    }
}

/// Keep only nouns and adjectives, order preserved; the parse is
/// invalidated. Errors if nothing survives.
pub fn nj_filter(expr: &Expression) -> Result<Expression> {
    let keep: Vec<usize> = (0..expr.tokens.len())
        .filter(|&i| matches!(expr.pos[i], Pos::Noun | Pos::Adj))
        .collect();
    if keep.is_empty() {
        return Err(Error::EmptyAfterFilter);
    }
    Ok(Expression {
        expr_id: expr.expr_id,
        tokens: keep.iter().map(|&i| expr.tokens[i].clone()).collect(),
        pos: keep.iter().map(|&i| expr.pos[i]).collect(),
        parse: None,
        gold_box: expr.gold_box,
        form: expr.form,
    })
}

fn bag_of_words_candidates(scene: &Scene, expr: &Expression) -> Vec<u32> {
    scene
        .boxes
        .iter()
        .filter(|b| expr.tokens.iter().any(|t| t == b.category.token()))
        .map(|b| b.id)
        .collect()
}

/// Simulate one panel on one (scene, expression) pair.
pub fn annotate(panel: &AnnotatorPanel, scene: &Scene, expr: &Expression) -> VoteRecord {
    let gold = scene.get(expr.gold_box).expect("gold box in scene");
    let candidates: Vec<u32> = match panel.kind {
        AnnotatorKind::FullParse => match &expr.parse {
            Some(parse) => resolve_expression(scene, parse, DEFAULT_MARGIN)
                .into_iter()
                .collect(),
            None => Vec::new(),
        },
        AnnotatorKind::BagOfWords => bag_of_words_candidates(scene, expr),
    };
    let all_ids: Vec<u32> = scene.boxes.iter().map(|b| b.id).collect();
    let pool = if candidates.is_empty() {
        &all_ids
    } else {
        &candidates
    };

    let mut choices = Vec::with_capacity(panel.n_annotators);
    let mut correct = Vec::with_capacity(panel.n_annotators);
    let mut confusion: BTreeMap<u32, u32> = BTreeMap::new();
    for k in 0..panel.n_annotators {
        let mut rng = Stream::new(mix(mix(panel.seed, expr.expr_id), k as u64));
        let chosen = if rng.next_bool(panel.noise_rate) {
            all_ids[rng.choose_index(all_ids.len())]
        } else {
            pool[rng.choose_index(pool.len())]
        };
        let ok = correct_at_iou(scene.get(chosen).unwrap(), gold, panel.iou_threshold);
        if !ok {
            *confusion.entry(chosen).or_insert(0) += 1;
        }
        choices.push(chosen);
        correct.push(ok);
    }
    let n_correct = correct.iter().filter(|c| **c).count();
    VoteRecord {
        instance_id: expr.expr_id,
        choices,
        correct,
        majority_correct: n_correct >= panel.agree_threshold,
        confusion_counts: confusion,
    }
}

/// Outcome of the stage-1 split: indices into the input slice.
#[derive(Debug, Clone)]
pub struct Stage1Outcome {
    pub easy: Vec<usize>,
    pub hard: Vec<usize>,
    pub votes: Vec<VoteRecord>,
}

/// Shuffle each expression with a per-instance seed, run the bag-of-words
/// panel, and mark an instance hard when at least `agree_threshold`
/// annotators failed to locate the gold box.
pub fn stage1_split(instances: &[(Scene, Expression)], panel: &AnnotatorPanel) -> Stage1Outcome {
    const SHUFFLE_TAG: u64 = 0x5348_5546; // "SHUF"
    let mut out = Stage1Outcome {
        easy: Vec::new(),
        hard: Vec::new(),
        votes: Vec::with_capacity(instances.len()),
    };
    for (idx, (scene, expr)) in instances.iter().enumerate() {
        let shuffled = shuffle_tokens(expr, mix(mix(panel.seed, SHUFFLE_TAG), expr.expr_id));
        let vote = annotate(panel, scene, &shuffled);
        let n_incorrect = vote.correct.iter().filter(|c| !**c).count();
        if n_incorrect >= panel.agree_threshold {
            out.hard.push(idx);
        } else {
            out.easy.push(idx);
        }
        out.votes.push(vote);
    }
    out
}

fn content_tokens(expr: &Expression) -> BTreeMap<&str, u32> {
    let mut counts = BTreeMap::new();
    for (t, p) in expr.tokens.iter().zip(&expr.pos) {
        if matches!(p, Pos::Noun | Pos::Adj) {
            *counts.entry(t.as_str()).or_insert(0u32) += 1;
        }
    }
    counts
}

fn shared_content_words(a: &Expression, b: &Expression) -> u32 {
    let ca = content_tokens(a);
    let cb = content_tokens(b);
    ca.iter()
        .map(|(t, n)| (*n).min(*cb.get(t).unwrap_or(&0)))
        .sum()
}

/// Build the adversarial counterpart of a hard relational instance.
///
/// The new target is the most confused wrong box (ties break to the
/// lowest id); the new parse swaps subject and object noun phrases and
/// re-selects or negates the relation so it uniquely resolves to the new
/// target. Instances with no valid swap are dropped by the caller.
pub fn stage2_adversarialize(
    scene: &Scene,
    expr: &Expression,
    votes: &VoteRecord,
    new_expr_id: u64,
) -> Result<Expression> {
    let parse = expr.parse.as_ref().ok_or(Error::NoValidSwap)?;
    if !matches!(expr.form, Form::Relational | Form::NegatedRelational) {
        return Err(Error::NoValidSwap);
    }
    let object_np = parse.object_np.ok_or(Error::NoValidSwap)?;

    // argmax of confusion counts; BTreeMap iterates in ascending id
    // order, so a strict `>` keeps the lowest id on ties.
    let mut target: Option<(u32, u32)> = None;
    for (&id, &n) in &votes.confusion_counts {
        if target.is_none_or(|(_, best)| n > best) {
            target = Some((id, n));
        }
    }
    let (target, _) = target.ok_or(Error::NoValidSwap)?;

    let swapped = (object_np, parse.subject_np);
    for negated in [false, true] {
        for rel in crate::geometry::RelationLabel::ALL {
            let candidate = Parse {
                subject_np: swapped.0,
                relation: Some(rel),
                negated,
                object_np: Some(swapped.1),
            };
            let resolved = resolve_expression(scene, &candidate, DEFAULT_MARGIN);
            if resolved.len() == 1 && resolved.contains(&target) {
                let (tokens, pos) = render(&candidate);
                let adv = Expression {
                    expr_id: new_expr_id,
                    tokens,
                    pos,
                    parse: Some(candidate),
                    gold_box: target,
                    form: Form::Relational,
                };
                if shared_content_words(expr, &adv) >= 3 {
                    return Ok(adv);
                }
            }
        }
    }
    Err(Error::NoValidSwap)
}

/// Validation panel: true iff at least `agree_threshold` of the
/// full-parse annotators pick a box overlapping the adversarial gold.
pub fn stage3_validate(scene: &Scene, adv_expr: &Expression, panel: &AnnotatorPanel) -> bool {
    annotate(panel, scene, adv_expr).majority_correct
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::worldgen::{generate_instance, GenConfig};

    fn instance(seed: u64) -> (Scene, Expression) {
        generate_instance(seed, &GenConfig::default()).unwrap()
    }

    #[test]
    fn shuffle_preserves_multiset_and_gold() {
        let (_, expr) = instance(3);
        for seed in 0..20 {
            let shuf = shuffle_tokens(&expr, seed);
            let mut a = expr.tokens.clone();
            let mut b = shuf.tokens.clone();
            a.sort();
            b.sort();
            assert_eq!(a, b);
            assert_eq!(shuf.gold_box, expr.gold_box);
            assert!(shuf.parse.is_none());
            assert_eq!(shuf.tokens.len(), shuf.pos.len());
        }
    }

    #[test]
    fn shuffle_single_token_is_identity() {
        let (_, mut expr) = instance(3);
        expr.tokens.truncate(1);
        expr.pos.truncate(1);
        let shuf = shuffle_tokens(&expr, 42);
        assert_eq!(shuf.tokens, expr.tokens);
    }

    #[test]
    fn shuffle_golden_vector() {
        // Frozen output of the documented Fisher-Yates walk (indices
        // high to low, partner = next_range(i + 1)) at seed 42. Any
        // change to the PRNG or draw convention must fail here.
        let expr = Expression {
            expr_id: 0,
            tokens: ["the", "red", "ball", "left", "of", "the", "blue", "cup"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            pos: vec![
                Pos::Det,
                Pos::Adj,
                Pos::Noun,
                Pos::Adp,
                Pos::Adp,
                Pos::Det,
                Pos::Adj,
                Pos::Noun,
            ],
            parse: None,
            gold_box: 0,
            form: Form::Relational,
        };
        let shuf = shuffle_tokens(&expr, 42);
        let mut perm: Vec<usize> = (0..8).collect();
        Stream::new(42).shuffle(&mut perm);
        let expect: Vec<String> = perm.iter().map(|&i| expr.tokens[i].clone()).collect();
        assert_eq!(shuf.tokens, expect);
        // freeze the permutation itself
        assert_eq!(shuf.tokens.join(" "), "left red blue ball of the cup the");
    }

    #[test]
    fn nj_filter_keeps_nouns_and_adjectives() {
        let (_, expr) = instance(7);
        let filtered = nj_filter(&expr).unwrap();
        assert!(filtered
            .pos
            .iter()
            .all(|p| matches!(p, Pos::Noun | Pos::Adj)));
        assert!(!filtered.tokens.contains(&"the".to_string()));
        assert!(filtered.parse.is_none());
        // order preserved: filtered tokens appear as a subsequence
        let mut it = expr.tokens.iter();
        for t in &filtered.tokens {
            assert!(it.any(|u| u == t));
        }
    }

    #[test]
    fn nj_filter_empty_errors() {
        let (_, mut expr) = instance(7);
        expr.tokens = vec!["the".into()];
        expr.pos = vec![Pos::Det];
        assert!(matches!(nj_filter(&expr), Err(Error::EmptyAfterFilter)));
    }

    #[test]
    fn full_parse_no_noise_is_always_correct() {
        let panel = AnnotatorPanel {
            kind: AnnotatorKind::FullParse,
            n_annotators: 5,
            agree_threshold: 3,
            iou_threshold: 0.5,
            noise_rate: 0.0,
            seed: 11,
        };
        for seed in 0..50 {
            let (scene, expr) = instance(seed);
            let vote = annotate(&panel, &scene, &expr);
            assert!(vote.majority_correct);
            assert!(vote.correct.iter().all(|c| *c));
            assert!(vote.confusion_counts.is_empty());
        }
    }

    #[test]
    fn votes_sum_to_panel_size() {
        let panel = AnnotatorPanel::stage1(5, 0.1);
        let (scene, expr) = instance(9);
        let vote = annotate(&panel, &scene, &expr);
        assert_eq!(vote.choices.len(), 5);
        let wrong: u32 = vote.confusion_counts.values().sum();
        assert_eq!(
            wrong as usize,
            vote.correct.iter().filter(|c| !**c).count()
        );
    }

    #[test]
    fn stage1_partitions_input() {
        let cfg = GenConfig::default();
        let instances: Vec<_> = (0..200)
            .map(|i| generate_instance(i, &cfg).unwrap())
            .collect();
        let panel = AnnotatorPanel::stage1(77, 0.03);
        let out = stage1_split(&instances, &panel);
        assert_eq!(out.easy.len() + out.hard.len(), instances.len());
        assert_eq!(out.votes.len(), instances.len());
        let mut all: Vec<usize> = out.easy.iter().chain(&out.hard).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..instances.len()).collect::<Vec<_>>());
    }

    #[test]
    fn attribute_only_dataset_has_empty_hard_set() {
        let cfg = GenConfig {
            form_mix: [1.0, 0.0, 0.0],
            ..GenConfig::default()
        };
        let instances: Vec<_> = (0..200)
            .map(|i| generate_instance(i, &cfg).unwrap())
            .collect();
        let panel = AnnotatorPanel::stage1(5, 0.0);
        let out = stage1_split(&instances, &panel);
        assert!(out.hard.is_empty(), "hard: {}", out.hard.len());
    }

    #[test]
    fn adversarial_swap_shares_content_words_and_flips_target() {
        let cfg = GenConfig::default();
        let instances: Vec<_> = (0..500)
            .map(|i| generate_instance(i, &cfg).unwrap())
            .collect();
        let panel = AnnotatorPanel::stage1(13, 0.03);
        let out = stage1_split(&instances, &panel);
        let mut produced = 0;
        for &idx in &out.hard {
            let (scene, expr) = &instances[idx];
            if let Ok(adv) = stage2_adversarialize(scene, expr, &out.votes[idx], 1000 + idx as u64)
            {
                produced += 1;
                assert_ne!(adv.gold_box, expr.gold_box);
                assert!(shared_content_words(expr, &adv) >= 3);
                let parse = adv.parse.unwrap();
                let resolved = resolve_expression(scene, &parse, DEFAULT_MARGIN);
                assert_eq!(resolved.len(), 1);
                assert!(resolved.contains(&adv.gold_box));
                // validation accepts clean adversarial instances
                assert!(stage3_validate(scene, &adv, &AnnotatorPanel::stage3(9, 0.0)));
            }
        }
        assert!(produced > 10, "only {produced} adversarial instances");
    }
}
