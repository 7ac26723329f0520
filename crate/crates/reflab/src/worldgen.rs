//! Deterministic generation of synthetic scenes and compositional
//! referring expressions, plus the exact ground-truth resolver.
//!
//! Every generated expression uniquely identifies its gold box under
//! [`resolve_expression`]; relational forms are only emitted when the
//! subject noun phrase alone is ambiguous, so the relation is
//! load-bearing.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, relation_holds, Box, RelationLabel, DEFAULT_MARGIN};
use crate::rng::{mix, Stream};
use crate::vocab::{Category, Color, Pos, SizeAttr, CATEGORY_COUNT, COLOR_COUNT};

/// A set of boxes simulating an annotated image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub scene_id: u64,
    pub boxes: Vec<Box>,
}

impl Scene {
    pub fn get(&self, id: u32) -> Option<&Box> {
        self.boxes.iter().find(|b| b.id == id)
    }

    pub fn category_count(&self, cat: Category) -> usize {
        self.boxes.iter().filter(|b| b.category == cat).count()
    }
}

/// A noun phrase: category plus optional stated attributes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Np {
    pub category: Category,
    pub color: Option<Color>,
    pub size: Option<SizeAttr>,
}

impl Np {
    pub fn bare(category: Category) -> Np {
        Np {
            category,
            color: None,
            size: None,
        }
    }

    /// Exact equality on stated attributes only.
    pub fn matches(&self, b: &Box) -> bool {
        self.category == b.category
            && self.color.is_none_or(|c| c == b.color)
            && self.size.is_none_or(|s| s == b.size)
    }
}

/// Latent structure of an expression: subject, optional relation, object.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Parse {
    pub subject_np: Np,
    pub relation: Option<RelationLabel>,
    pub negated: bool,
    pub object_np: Option<Np>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Form {
    AttributeOnly,
    Relational,
    NegatedRelational,
}

/// Surface token sequence with aligned POS tags, latent parse, and the
/// gold box it refers to. Perturbation operators clear `parse`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Expression {
    pub expr_id: u64,
    pub tokens: Vec<String>,
    pub pos: Vec<Pos>,
    pub parse: Option<Parse>,
    pub gold_box: u32,
    pub form: Form,
}

/// Answer space of the relational-QA task: the six colors plus yes/no.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Answer {
    Color(Color),
    Yes,
    No,
}

pub const ANSWER_COUNT: usize = COLOR_COUNT + 2;

impl Answer {
    pub fn index(self) -> usize {
        match self {
            Answer::Color(c) => c.index(),
            Answer::Yes => COLOR_COUNT,
            Answer::No => COLOR_COUNT + 1,
        }
    }
}

/// A relational question over a scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaExample {
    pub qa_id: u64,
    pub tokens: Vec<String>,
    pub pos: Vec<Pos>,
    pub answer: Answer,
}

/// How relational instances are laid out in the scene.
///
/// `Paired` builds them around one duplicated category with a
/// color-distinguished object ("the ball left of the red ball");
/// `Quartet` uses two duplicated categories with bare noun phrases
/// ("the ball above the cup"), which keeps the token bag uninformative
/// about the target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationalStyle {
    Paired,
    Quartet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    /// Mean box count per scene.
    pub mean_boxes: f64,
    /// Maximum pairwise IoU between boxes in a scene.
    pub max_overlap: f64,
    /// Relation margin used for ground truth.
    pub margin: f64,
    /// Probabilities of attribute_only / relational / negated_relational.
    pub form_mix: [f64; 3],
    pub relational_style: RelationalStyle,
    /// Rejection-sampling attempt cap per scene/expression.
    pub max_attempts: u32,
    /// Box edge lengths are drawn uniformly from this range.
    pub box_size_range: [f64; 2],
    /// Fraction of QA questions that ask for a color (the rest are
    /// yes/no relation probes).
    pub qa_color_frac: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            mean_boxes: 8.2,
            max_overlap: 0.3,
            margin: DEFAULT_MARGIN,
            form_mix: [0.67, 0.25, 0.08],
            relational_style: RelationalStyle::Paired,
            max_attempts: 1000,
            box_size_range: [0.08, 0.22],
            qa_color_frac: 0.5,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mean_boxes < 2.0 {
            return Err(Error::BadConfig("mean_boxes must be >= 2".into()));
        }
        if self.form_mix.iter().any(|p| *p < 0.0) {
            return Err(Error::BadConfig("form_mix entries must be >= 0".into()));
        }
        let s: f64 = self.form_mix.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::BadConfig("form_mix must sum to 1".into()));
        }
        if self.margin < 0.0 {
            return Err(Error::BadConfig("margin must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.qa_color_frac) {
            return Err(Error::BadConfig("qa_color_frac must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// All boxes the parse refers to: subject matches, restricted by the
/// relation (or its complement when negated) against at least one object
/// match. A box never relates to itself.
pub fn resolve_expression(scene: &Scene, parse: &Parse, margin: f64) -> BTreeSet<u32> {
    let subjects = scene.boxes.iter().filter(|b| parse.subject_np.matches(b));
    match (parse.relation, parse.object_np) {
        (None, _) => subjects.map(|b| b.id).collect(),
        (Some(rel), Some(obj_np)) => {
            let objects: Vec<&Box> = scene.boxes.iter().filter(|b| obj_np.matches(b)).collect();
            subjects
                .filter(|s| {
                    objects.iter().any(|o| {
                        o.id != s.id && (relation_holds(rel, s, o, margin) != parse.negated)
                    })
                })
                .map(|b| b.id)
                .collect()
        }
        (Some(_), None) => BTreeSet::new(),
    }
}

fn push_np(np: &Np, tokens: &mut Vec<String>, pos: &mut Vec<Pos>) {
    tokens.push("the".into());
    pos.push(Pos::Det);
    if let Some(c) = np.color {
        tokens.push(c.token().into());
        pos.push(Pos::Adj);
    }
    if let Some(s) = np.size {
        tokens.push(s.token().into());
        pos.push(Pos::Adj);
    }
    tokens.push(np.category.token().into());
    pos.push(Pos::Noun);
}

fn push_rel(rel: RelationLabel, tokens: &mut Vec<String>, pos: &mut Vec<Pos>) {
    match rel {
        RelationLabel::LeftOf => {
            tokens.push("left".into());
            pos.push(Pos::Adp);
            tokens.push("of".into());
            pos.push(Pos::Adp);
        }
        RelationLabel::RightOf => {
            tokens.push("right".into());
            pos.push(Pos::Adp);
            tokens.push("of".into());
            pos.push(Pos::Adp);
        }
        RelationLabel::Above => {
            tokens.push("above".into());
            pos.push(Pos::Adp);
        }
        RelationLabel::Below => {
            tokens.push("below".into());
            pos.push(Pos::Adp);
        }
    }
}

/// Deterministic template rendering:
/// `the [color] [size] CAT [not] REL the [color] [size] CAT`.
pub fn render(parse: &Parse) -> (Vec<String>, Vec<Pos>) {
    let mut tokens = Vec::new();
    let mut pos = Vec::new();
    push_np(&parse.subject_np, &mut tokens, &mut pos);
    if let (Some(rel), Some(obj)) = (parse.relation, parse.object_np.as_ref()) {
        if parse.negated {
            tokens.push("not".into());
            pos.push(Pos::Neg);
        }
        push_rel(rel, &mut tokens, &mut pos);
        push_np(obj, &mut tokens, &mut pos);
    }
    (tokens, pos)
}

fn sample_box(rng: &mut Stream, id: u32, cfg: &GenConfig) -> Box {
    let w = rng.next_in(cfg.box_size_range[0], cfg.box_size_range[1]);
    let h = rng.next_in(cfg.box_size_range[0], cfg.box_size_range[1]);
    let x = rng.next_in(0.0, 1.0 - w);
    let y = rng.next_in(0.0, 1.0 - h);
    Box {
        id,
        x,
        y,
        w,
        h,
        category: Category::Ball,
        color: Color::Red,
        size: SizeAttr::Small,
    }
}

fn separated(a: &Box, b: &Box, margin: f64) -> bool {
    RelationLabel::ALL
        .iter()
        .any(|r| relation_holds(*r, a, b, margin))
}

/// Deterministic scene generation.
///
/// The first two boxes always share a category (the designated pair);
/// in `Quartet` style the next two share a second category. Remaining
/// boxes take distinct categories while any are left.
pub fn generate_scene(seed: u64, cfg: &GenConfig) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = Stream::new(seed);
    let floor = cfg.mean_boxes.floor();
    let mut count = floor as usize + usize::from(rng.next_bool(cfg.mean_boxes - floor));
    count = count.max(2);
    if cfg.relational_style == RelationalStyle::Quartet {
        count = count.max(4);
    }

    let dup_groups = match cfg.relational_style {
        RelationalStyle::Paired => 1,
        RelationalStyle::Quartet => 2,
    };

    // Positions: rejection sampling against the overlap cap, plus a
    // separation requirement inside each duplicated-category group so a
    // relation between its members always exists.
    let mut boxes: Vec<Box> = Vec::with_capacity(count);
    let mut attempts = 0u32;
    while boxes.len() < count {
        attempts += 1;
        if attempts > cfg.max_attempts * count as u32 {
            return Err(Error::GenerationFailed {
                seed,
                attempts,
                what: "could not place non-overlapping boxes".into(),
            });
        }
        let b = sample_box(&mut rng, boxes.len() as u32, cfg);
        if boxes.iter().any(|p| iou(p, &b) > cfg.max_overlap) {
            continue;
        }
        let group = boxes.len() / 2;
        if group < dup_groups && boxes.len() % 2 == 1 {
            let partner = &boxes[boxes.len() - 1];
            if !separated(partner, &b, cfg.margin) {
                continue;
            }
        }
        boxes.push(b);
    }

    // Category assignment: duplicated groups first, then distinct
    // leftovers, cycling if the scene is larger than the category set.
    let mut cats: Vec<Category> = Category::ALL.to_vec();
    rng.shuffle(&mut cats);
    for (i, b) in boxes.iter_mut().enumerate() {
        let group = i / 2;
        b.category = if group < dup_groups {
            cats[group]
        } else {
            let rest = CATEGORY_COUNT - dup_groups;
            cats[dup_groups + (i - 2 * dup_groups) % rest]
        };
    }

    // Colors: random everywhere, except the paired group's two members
    // stay distinct so a color can single out the object.
    for b in boxes.iter_mut() {
        b.color = Color::ALL[rng.choose_index(COLOR_COUNT)];
        b.size = SizeAttr::ALL[rng.choose_index(2)];
    }
    match cfg.relational_style {
        // The paired group's two members stay color-distinct so a color
        // can single out the object.
        RelationalStyle::Paired => {
            if boxes[0].color == boxes[1].color {
                let shift = 1 + rng.choose_index(COLOR_COUNT - 1);
                boxes[1].color = Color::ALL[(boxes[0].color.index() + shift) % COLOR_COUNT];
            }
        }
        // Quartet groups share a color, so the color adjective adds a
        // content word without disambiguating within the pair.
        RelationalStyle::Quartet => {
            boxes[1].color = boxes[0].color;
            boxes[3].color = boxes[2].color;
        }
    }

    Ok(Scene {
        scene_id: seed,
        boxes,
    })
}

fn sample_form(rng: &mut Stream, mix: &[f64; 3]) -> Form {
    let r = rng.next_f64();
    if r < mix[0] {
        Form::AttributeOnly
    } else if r < mix[0] + mix[1] {
        Form::Relational
    } else {
        Form::NegatedRelational
    }
}

/// Categories that appear exactly twice, in first-appearance order.
fn duplicated_categories(scene: &Scene) -> Vec<Category> {
    let mut seen = Vec::new();
    for b in &scene.boxes {
        if !seen.contains(&b.category) && scene.category_count(b.category) == 2 {
            seen.push(b.category);
        }
    }
    seen
}

fn try_attribute_only(scene: &Scene, rng: &mut Stream, margin: f64) -> Option<(Parse, u32)> {
    let unique: Vec<&Box> = scene
        .boxes
        .iter()
        .filter(|b| scene.category_count(b.category) == 1)
        .collect();
    if unique.is_empty() {
        return None;
    }
    let target = unique[rng.choose_index(unique.len())];
    let np = Np {
        category: target.category,
        color: rng.next_bool(0.5).then_some(target.color),
        size: rng.next_bool(0.25).then_some(target.size),
    };
    let parse = Parse {
        subject_np: np,
        relation: None,
        negated: false,
        object_np: None,
    };
    let resolved = resolve_expression(scene, &parse, margin);
    (resolved.len() == 1 && resolved.contains(&target.id)).then_some((parse, target.id))
}

fn try_paired_relational(
    scene: &Scene,
    rng: &mut Stream,
    margin: f64,
    negated: bool,
) -> Option<(Parse, u32)> {
    let pair_cat = *duplicated_categories(scene).first()?;
    let pair: Vec<&Box> = scene
        .boxes
        .iter()
        .filter(|b| b.category == pair_cat)
        .collect();
    let (object, gold) = if rng.next_bool(0.5) {
        (pair[0], pair[1])
    } else {
        (pair[1], pair[0])
    };
    if object.color == gold.color {
        return None;
    }
    let mut rels = RelationLabel::ALL.to_vec();
    rng.shuffle(&mut rels);
    for rel in rels {
        let parse = Parse {
            subject_np: Np::bare(pair_cat),
            relation: Some(rel),
            negated,
            object_np: Some(Np {
                category: pair_cat,
                color: Some(object.color),
                size: None,
            }),
        };
        let resolved = resolve_expression(scene, &parse, margin);
        if resolved.len() == 1 && resolved.contains(&gold.id) {
            return Some((parse, gold.id));
        }
    }
    None
}

fn try_quartet_relational(
    scene: &Scene,
    rng: &mut Stream,
    margin: f64,
    negated: bool,
) -> Option<(Parse, u32)> {
    let dups = duplicated_categories(scene);
    if dups.len() < 2 {
        return None;
    }
    let mut pairs = vec![(dups[0], dups[1]), (dups[1], dups[0])];
    rng.shuffle(&mut pairs);
    let mut rels = RelationLabel::ALL.to_vec();
    rng.shuffle(&mut rels);
    let pair_color = |cat: Category| {
        scene
            .boxes
            .iter()
            .find(|b| b.category == cat)
            .map(|b| b.color)
    };
    for (subj_cat, obj_cat) in pairs {
        for rel in &rels {
            let parse = Parse {
                subject_np: Np {
                    category: subj_cat,
                    color: pair_color(subj_cat),
                    size: None,
                },
                relation: Some(*rel),
                negated,
                object_np: Some(Np {
                    category: obj_cat,
                    color: pair_color(obj_cat),
                    size: None,
                }),
            };
            let resolved = resolve_expression(scene, &parse, margin);
            if resolved.len() == 1 {
                let gold = *resolved.iter().next().unwrap();
                return Some((parse, gold));
            }
        }
    }
    None
}

/// Deterministic expression generation for a fixed scene.
///
/// Fails (with the seed reported) if no uniquely-referring expression is
/// constructible within the attempt cap.
pub fn generate_expression(scene: &Scene, seed: u64, cfg: &GenConfig) -> Result<Expression> {
    cfg.validate()?;
    let mut rng = Stream::new(seed);
    for _ in 0..cfg.max_attempts {
        let form = sample_form(&mut rng, &cfg.form_mix);
        let built = match form {
            Form::AttributeOnly => try_attribute_only(scene, &mut rng, cfg.margin),
            Form::Relational | Form::NegatedRelational => {
                let negated = form == Form::NegatedRelational;
                match cfg.relational_style {
                    RelationalStyle::Paired => {
                        try_paired_relational(scene, &mut rng, cfg.margin, negated)
                    }
                    RelationalStyle::Quartet => {
                        try_quartet_relational(scene, &mut rng, cfg.margin, negated)
                    }
                }
            }
        };
        if let Some((parse, gold)) = built {
            // Relational instances must have an ambiguous subject NP.
            if parse.relation.is_some() {
                let n_subj = scene
                    .boxes
                    .iter()
                    .filter(|b| parse.subject_np.matches(b))
                    .count();
                if n_subj < 2 {
                    continue;
                }
            }
            let (tokens, pos) = render(&parse);
            return Ok(Expression {
                expr_id: seed,
                tokens,
                pos,
                parse: Some(parse),
                gold_box: gold,
                form,
            });
        }
    }
    Err(Error::GenerationFailed {
        seed,
        attempts: cfg.max_attempts,
        what: "no uniquely-referring expression constructible".into(),
    })
}

/// Scene plus expression for one dataset instance, retrying over derived
/// scene seeds until expression generation succeeds.
pub fn generate_instance(instance_seed: u64, cfg: &GenConfig) -> Result<(Scene, Expression)> {
    let mut last = None;
    for attempt in 0..16u64 {
        let scene = generate_scene(mix(instance_seed, 2 * attempt), cfg)?;
        match generate_expression(&scene, mix(instance_seed, 2 * attempt + 1), cfg) {
            Ok(expr) => return Ok((scene, expr)),
            Err(e) => last = Some(e),
        }
    }
    Err(last.unwrap_or(Error::GenerationFailed {
        seed: instance_seed,
        attempts: 16,
        what: "instance generation".into(),
    }))
}

fn unique_np(scene: &Scene, b: &Box) -> Option<Np> {
    let bare = Np::bare(b.category);
    if scene.boxes.iter().filter(|x| bare.matches(x)).count() == 1 {
        return Some(bare);
    }
    let colored = Np {
        category: b.category,
        color: Some(b.color),
        size: None,
    };
    if scene.boxes.iter().filter(|x| colored.matches(x)).count() == 1 {
        return Some(colored);
    }
    None
}

/// Relational question over a fresh scene: either a yes/no relation probe
/// or a what-color question whose subject is picked out by the relation.
pub fn generate_qa(qa_seed: u64, cfg: &GenConfig) -> Result<(Scene, QaExample)> {
    let mut last = None;
    for attempt in 0..16u64 {
        let scene = generate_scene(mix(qa_seed, 2 * attempt), cfg)?;
        let mut rng = Stream::new(mix(qa_seed, 2 * attempt + 1));
        if let Some(qa) = try_qa(&scene, &mut rng, cfg) {
            return Ok((scene, qa));
        }
        last = Some(Error::GenerationFailed {
            seed: qa_seed,
            attempts: attempt as u32 + 1,
            what: "no relational question constructible".into(),
        });
    }
    Err(last.unwrap())
}

fn try_qa(scene: &Scene, rng: &mut Stream, cfg: &GenConfig) -> Option<QaExample> {
    for _ in 0..cfg.max_attempts {
        if rng.next_bool(1.0 - cfg.qa_color_frac) {
            // yes/no: "is the <A> REL the <B>"
            let describable: Vec<&Box> = scene
                .boxes
                .iter()
                .filter(|b| unique_np(scene, b).is_some())
                .collect();
            if describable.len() < 2 {
                continue;
            }
            let a = describable[rng.choose_index(describable.len())];
            let b = describable[rng.choose_index(describable.len())];
            if a.id == b.id {
                continue;
            }
            let rel = RelationLabel::ALL[rng.choose_index(4)];
            let want_yes = rng.next_bool(0.5);
            if relation_holds(rel, a, b, cfg.margin) != want_yes {
                continue;
            }
            let mut tokens = vec!["is".to_string()];
            let mut pos = vec![Pos::Det];
            push_np(&unique_np(scene, a)?, &mut tokens, &mut pos);
            push_rel(rel, &mut tokens, &mut pos);
            push_np(&unique_np(scene, b)?, &mut tokens, &mut pos);
            return Some(QaExample {
                qa_id: scene.scene_id,
                tokens,
                pos,
                answer: if want_yes { Answer::Yes } else { Answer::No },
            });
        } else {
            // what-color: "what color is the CAT REL the <B>"
            let object = &scene.boxes[rng.choose_index(scene.boxes.len())];
            let obj_np = match unique_np(scene, object) {
                Some(np) => np,
                None => continue,
            };
            let subj_cat = Category::ALL[rng.choose_index(CATEGORY_COUNT)];
            let rel = RelationLabel::ALL[rng.choose_index(4)];
            let parse = Parse {
                subject_np: Np::bare(subj_cat),
                relation: Some(rel),
                negated: false,
                object_np: Some(obj_np),
            };
            let resolved = resolve_expression(scene, &parse, cfg.margin);
            if resolved.len() != 1 {
                continue;
            }
            let subject = scene.get(*resolved.iter().next().unwrap()).unwrap();
            let mut tokens = vec!["what".to_string(), "color".to_string(), "is".to_string()];
            let mut pos = vec![Pos::Det, Pos::Noun, Pos::Det];
            push_np(&Np::bare(subj_cat), &mut tokens, &mut pos);
            push_rel(rel, &mut tokens, &mut pos);
            push_np(&obj_np, &mut tokens, &mut pos);
            return Some(QaExample {
                qa_id: scene.scene_id,
                tokens,
                pos,
                answer: Answer::Color(subject.color),
            });
        }
    }
    None
}
