//! Zero-shot attribute classification against text prompts, and zero-shot
//! re-identification with an untouched encoder.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{Attribute, AttributeAnnotation, DatasetSplit};
use crate::encoder::text::TextEmbeddingProvider;
use crate::encoder::{l2_normalize, VisionEncoder};
use crate::error::{ReidError, Result};
use crate::eval::{EmbeddingSet, EvalOptions, EvalReport};
use crate::images::ImageStore;
use crate::train::evaluate_split;

pub const JERSEY_NUMBER_TEMPLATE: &str = "a basketball player with jersey number {c}";
pub const JERSEY_COLOUR_TEMPLATE: &str = "a {c} jersey, {c} colour";
/// Alternative wording of the jersey-colour prompt.
pub const JERSEY_COLOUR_TEMPLATE_PROSE: &str = "a {c} jersey, colour {c}";
pub const PLAYER_TEMPLATE: &str = "a {c} basketball player";

pub fn default_template(attribute: Attribute) -> &'static str {
    match attribute {
        Attribute::JerseyNumber => JERSEY_NUMBER_TEMPLATE,
        Attribute::JerseyColour => JERSEY_COLOUR_TEMPLATE,
        Attribute::Sex | Attribute::SkinColour => PLAYER_TEMPLATE,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSet {
    pub attribute: Attribute,
    pub template: String,
    pub classes: Vec<String>,
    pub rendered: Vec<String>,
}

pub fn render_template(template: &str, class: &str) -> String {
    template.replace("{c}", class)
}

pub fn build_prompts(attribute: Attribute) -> PromptSet {
    build_prompts_with(attribute, default_template(attribute)).expect("built-in templates have a slot")
}

pub fn build_prompts_with(attribute: Attribute, template: &str) -> Result<PromptSet> {
    if !template.contains("{c}") {
        return Err(ReidError::Config(format!("prompt template `{template}` has no {{c}} slot")));
    }
    let classes = attribute.classes();
    Ok(PromptSet {
        attribute,
        template: template.to_string(),
        rendered: classes.iter().map(|c| render_template(template, c)).collect(),
        classes,
    })
}

/// Prompt set looked up by attribute name, e.g. `"jersey_number"`.
pub fn build_prompts_named(name: &str) -> Result<PromptSet> {
    Ok(build_prompts(name.parse()?))
}

/// A prompt set with its text embeddings, one unit row per class.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbeddings {
    pub prompts: PromptSet,
    pub matrix: Array2<f64>,
}

impl PromptEmbeddings {
    pub fn new(prompts: PromptSet, txt: &dyn TextEmbeddingProvider) -> Result<Self> {
        let d = txt.dim();
        let mut flat = Vec::with_capacity(d * prompts.rendered.len());
        for p in &prompts.rendered {
            let mut v = txt.embed(p)?;
            if v.len() != d {
                return Err(ReidError::Shape(format!("prompt `{p}` embedded to {} values, expected {d}", v.len())));
            }
            l2_normalize(&mut v)?;
            flat.extend(v);
        }
        let matrix = Array2::from_shape_vec((prompts.rendered.len(), d), flat).expect("sized");
        Ok(Self { prompts, matrix })
    }

    pub fn num_classes(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }
}

/// Class indices by descending cosine similarity; equal scores keep class order.
pub fn classify_zero_shot(img_emb: &[f64], prompts: &PromptEmbeddings) -> Result<Vec<usize>> {
    if img_emb.len() != prompts.dim() {
        return Err(ReidError::Shape(format!(
            "image embedding is {}-d but prompt embeddings are {}-d; was the projection layer dropped?",
            img_emb.len(),
            prompts.dim()
        )));
    }
    let mut v = img_emb.to_vec();
    l2_normalize(&mut v)?;
    let scores = prompts.matrix.dot(&ndarray::ArrayView1::from(&v[..]));
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    Ok(order)
}

/// Fraction of samples whose label is among the first `k` ranked classes.
pub fn topk_accuracy(predictions: &[Vec<usize>], labels: &[usize], k: usize) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(ReidError::Shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(ReidError::Invalid("no samples".into()));
    }
    let classes = predictions.iter().map(Vec::len).min().unwrap_or(0);
    if k == 0 || k > classes {
        return Err(ReidError::Invalid(format!("top-k with k={k} needs 1 ≤ k ≤ {classes}")));
    }
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p[..k].contains(l))
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub support: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroMetrics {
    /// Classes that occur in the labels, in class order.
    pub per_class: Vec<ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

/// `confusion[true][predicted]` counts.
pub fn confusion_matrix(top1: &[usize], labels: &[usize], num_classes: usize) -> Result<Vec<Vec<u64>>> {
    if top1.len() != labels.len() {
        return Err(ReidError::Shape(format!("{} predictions for {} labels", top1.len(), labels.len())));
    }
    let mut m = vec![vec![0u64; num_classes]; num_classes];
    for (&p, &l) in top1.iter().zip(labels) {
        if p >= num_classes || l >= num_classes {
            return Err(ReidError::Invalid(format!("class index outside 0..{num_classes}")));
        }
        m[l][p] += 1;
    }
    Ok(m)
}

/// Per-class precision, recall and F1 (0 when a denominator is empty) and
/// their unweighted means over the classes present in `labels`.
pub fn macro_metrics(top1: &[usize], labels: &[usize], num_classes: usize) -> Result<MacroMetrics> {
    if labels.is_empty() {
        return Err(ReidError::Invalid("no samples".into()));
    }
    let cm = confusion_matrix(top1, labels, num_classes)?;
    let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let per_class: Vec<ClassMetrics> = (0..num_classes)
        .filter_map(|c| {
            let support: u64 = cm[c].iter().sum();
            if support == 0 {
                return None;
            }
            let tp = cm[c][c];
            let predicted: u64 = cm.iter().map(|r| r[c]).sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            Some(ClassMetrics {
                class: c,
                support,
                precision,
                recall,
                f1,
            })
        })
        .collect();
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / per_class.len() as f64;
    Ok(MacroMetrics {
        macro_precision: mean(|m| m.precision),
        macro_recall: mean(|m| m.recall),
        macro_f1: mean(|m| m.f1),
        per_class,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeReport {
    pub attribute: Attribute,
    pub template: String,
    pub classes: Vec<String>,
    pub num_samples: usize,
    pub topk_accuracy: BTreeMap<usize, f64>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    /// Rows are true classes, columns predicted classes.
    pub confusion: Vec<Vec<u64>>,
    #[serde(default)]
    pub encoder_name: Option<String>,
    #[serde(default)]
    pub config_hash: Option<String>,
}

impl AttributeReport {
    /// Builds the report from ranked predictions and true class indices.
    pub fn from_rankings(prompts: &PromptSet, rankings: &[Vec<usize>], labels: &[usize], ks: &[usize]) -> Result<Self> {
        let n = prompts.classes.len();
        let top1: Vec<usize> = rankings
            .iter()
            .map(|r| r.first().copied().ok_or_else(|| ReidError::Invalid("empty ranking".into())))
            .collect::<Result<_>>()?;
        let mut topk = BTreeMap::new();
        for &k in ks.iter().filter(|&&k| k >= 1 && k <= n) {
            topk.insert(k, topk_accuracy(rankings, labels, k)?);
        }
        let m = macro_metrics(&top1, labels, n)?;
        Ok(Self {
            attribute: prompts.attribute,
            template: prompts.template.clone(),
            classes: prompts.classes.clone(),
            num_samples: labels.len(),
            topk_accuracy: topk,
            macro_precision: m.macro_precision,
            macro_recall: m.macro_recall,
            macro_f1: m.macro_f1,
            per_class: m.per_class,
            confusion: confusion_matrix(&top1, labels, n)?,
            encoder_name: None,
            config_hash: None,
        })
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| ReidError::io(path, e))
    }

    /// Confusion matrix with a header row and a label column of class names.
    pub fn save_confusion_csv(&self, path: &Path) -> Result<()> {
        let wrap = |e: csv::Error| ReidError::Invalid(e.to_string());
        let mut w = csv::Writer::from_path(path).map_err(wrap)?;
        let mut header = vec!["true\\predicted".to_string()];
        header.extend(self.classes.iter().cloned());
        w.write_record(&header).map_err(wrap)?;
        for (c, row) in self.classes.iter().zip(&self.confusion) {
            let mut rec = vec![c.clone()];
            rec.extend(row.iter().map(u64::to_string));
            w.write_record(&rec).map_err(wrap)?;
        }
        w.flush().map_err(|e| ReidError::io(path, e))
    }
}

/// Top-k ranks reported by default: top-1 everywhere, top-3 for jersey numbers.
pub fn default_ks(attribute: Attribute) -> Vec<usize> {
    match attribute {
        Attribute::JerseyNumber => vec![1, 3],
        _ => vec![1],
    }
}

/// Classifies every annotated record that has an embedding and a label for
/// `prompts.attribute`.
pub fn probe_attribute(
    embeddings: &EmbeddingSet,
    annotations: &BTreeMap<String, AttributeAnnotation>,
    prompts: &PromptEmbeddings,
    ks: &[usize],
) -> Result<AttributeReport> {
    let attribute = prompts.prompts.attribute;
    let mut rankings = Vec::new();
    let mut labels = Vec::new();
    for (row, id) in embeddings.embeddings.ids.iter().enumerate() {
        let Some(label) = annotations.get(id).and_then(|a| a.label(attribute)) else {
            continue;
        };
        let v = embeddings.embeddings.vectors.row(row).to_vec();
        rankings.push(classify_zero_shot(&v, prompts)?);
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(ReidError::Invalid(format!("no embedded record is annotated with {attribute}")));
    }
    AttributeReport::from_rankings(&prompts.prompts, &rankings, &labels, ks)
}

/// Retrieval evaluation of an encoder that has not been fine-tuned.
pub fn zero_shot_reid(
    enc: &VisionEncoder,
    split: &DatasetSplit,
    images: &ImageStore,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if enc.is_fine_tuned() {
        return Err(ReidError::Invalid(format!(
            "{} has been fine-tuned; zero-shot evaluation needs the original weights",
            enc.name()
        )));
    }
    let mut rep = evaluate_split(enc, split, images, opts)?;
    rep.zero_shot = true;
    Ok(rep)
}
