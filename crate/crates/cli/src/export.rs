//! `export-tree`: DOT graph and JSON summary of what each node does on a dataset.
//!
//! A leaf is annotated with its modal predicted class over the rows and the
//! average probability it assigns that class. Inner nodes carry the set of classes
//! of the leaves below them, and each edge the mean routing probability.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use gphme::checkpoint::Checkpoint;
use gphme::eval::argmax;
use gphme::model::TreeModel;
use rayon::prelude::*;
use serde::Serialize;

use crate::predict::FeatureInput;

pub const DOT_FILE: &str = "tree.dot";
pub const SUMMARY_FILE: &str = "tree.json";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NodeSummary {
    pub id: usize,
    pub depth: usize,
    pub leaf: bool,
    /// Mean probability of taking the left branch (inner nodes).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub left_prob: Option<f64>,
    /// Modal class of a leaf, as an original label value.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub class: Option<i64>,
    /// Average probability the leaf gives its modal class.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prob: Option<f64>,
    /// Fraction of rows on which the leaf's argmax is its modal class.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vote_share: Option<f64>,
    /// Classes of the leaves at or below this node.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub classes: Vec<i64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TreeSummary {
    pub height: usize,
    pub rows: usize,
    pub n_mc: usize,
    /// False for regression checkpoints, which get a structure-only graph.
    pub annotated: bool,
    pub nodes: Vec<NodeSummary>,
}

/// Per-row statistics, averaged over draws.
struct RowStats {
    /// Left-branch probability per inner node.
    gates: Vec<f64>,
    /// Leaf class distributions, `num_leaves × K`.
    leaves: Vec<f64>,
}

fn row_stats(model: &TreeModel, x: &[f64], noise: &gphme::model::NoiseSet) -> Result<RowStats> {
    let traces = model.trace(x, noise)?;
    let r = traces.len() as f64;
    let mut gates = vec![0.0; model.topology.num_inner()];
    let mut leaves = vec![0.0; if model.task.is_classification() { traces[0].leaf_log_probs.len() } else { 0 }];
    for t in &traces {
        for (g, p) in gates.iter_mut().zip(&t.gate_probs) {
            *g += p / r;
        }
        for (l, lp) in leaves.iter_mut().zip(&t.leaf_log_probs) {
            *l += lp.exp() / r;
        }
    }
    Ok(RowStats { gates, leaves })
}

/// Summarizes `model` on standardized rows `x`.
pub fn summarize(model: &TreeModel, x: &[f64], class_values: Option<&[i64]>, n_mc: usize, seed: u64) -> Result<TreeSummary> {
    let d = model.input_dim;
    let n = x.len() / d;
    if n == 0 {
        bail!("tree export needs at least one evaluation row");
    }
    let noise = model.sample_noise(n_mc, seed)?;
    let stats: Vec<RowStats> = x
        .par_chunks(d)
        .map(|row| row_stats(model, row, &noise))
        .collect::<Result<_>>()?;

    let topo = &model.topology;
    let annotated = model.task.is_classification();
    let k = model.task.output_dim();
    let names: Vec<i64> = class_values.map(<[i64]>::to_vec).unwrap_or_else(|| (0..k as i64).collect());

    let mut nodes: Vec<NodeSummary> = (1..=topo.num_nodes())
        .map(|id| NodeSummary {
            id,
            depth: topo.depth(id),
            leaf: topo.is_leaf(id),
            left_prob: (!topo.is_leaf(id)).then(|| stats.iter().map(|s| s.gates[id - 1]).sum::<f64>() / n as f64),
            class: None,
            prob: None,
            vote_share: None,
            classes: Vec::new(),
        })
        .collect();

    if annotated {
        for leaf in 0..topo.num_leaves() {
            let mut votes = vec![0usize; k];
            for s in &stats {
                votes[argmax(&s.leaves[leaf * k..(leaf + 1) * k])] += 1;
            }
            // Ties go to the lowest class index.
            let modal = votes.iter().enumerate().fold(0, |best, (c, &v)| if v > votes[best] { c } else { best });
            let prob = stats.iter().map(|s| s.leaves[leaf * k + modal]).sum::<f64>() / n as f64;
            let node = &mut nodes[topo.leaf_node(leaf) - 1];
            node.class = Some(names[modal]);
            node.prob = Some(prob);
            node.vote_share = Some(votes[modal] as f64 / n as f64);
        }
        for id in 1..=topo.num_nodes() {
            let set: BTreeSet<i64> = topo
                .leaves_under(id)
                .filter_map(|l| nodes[topo.leaf_node(l) - 1].class)
                .collect();
            nodes[id - 1].classes = set.into_iter().collect();
        }
    }
    Ok(TreeSummary { height: topo.height, rows: n, n_mc, annotated, nodes })
}

fn format_classes(c: &[i64]) -> String {
    let parts: Vec<String> = c.iter().map(i64::to_string).collect();
    format!("{{{}}}", parts.join(", "))
}

/// Leaf label text, e.g. `class 0, p=0.90`.
pub fn leaf_label(class: i64, prob: f64) -> String {
    format!("class {class}, p={prob:.2}")
}

pub fn render_dot(summary: &TreeSummary) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "digraph gphme {{");
    let _ = writeln!(out, "  node [fontname=\"Helvetica\"];");
    for n in &summary.nodes {
        let label = match (n.leaf, n.class, n.prob) {
            (true, Some(c), Some(p)) => format!("leaf {}\\n{}", n.id, leaf_label(c, p)),
            (true, _, _) => format!("leaf {}", n.id),
            (false, _, _) if !n.classes.is_empty() => format!("node {}\\n{}", n.id, format_classes(&n.classes)),
            (false, _, _) => format!("node {}", n.id),
        };
        let shape = if n.leaf { "ellipse" } else { "box" };
        let _ = writeln!(out, "  n{} [label=\"{label}\", shape={shape}];", n.id);
    }
    for n in summary.nodes.iter().filter(|n| !n.leaf) {
        let p = n.left_prob.unwrap_or(0.5);
        let _ = writeln!(out, "  n{} -> n{} [label=\"{p:.2}\"];", n.id, 2 * n.id);
        let _ = writeln!(out, "  n{} -> n{} [label=\"{:.2}\"];", n.id, 2 * n.id + 1, 1.0 - p);
    }
    out.push_str("}\n");
    out
}

/// Writes `tree.dot` and `tree.json` into `out_dir`.
pub fn cmd_export_tree(checkpoint: &Path, input: &FeatureInput, out_dir: &Path, n_mc: usize, seed: u64) -> Result<TreeSummary> {
    let ck = Checkpoint::load(checkpoint)?;
    if !ck.model.task.is_classification() {
        log::warn!("regression checkpoint: class annotation is unsupported, writing the structure only");
    }
    let rows = input.load(ck.model.input_dim)?;
    let x = match &ck.standardizer {
        Some(st) => st.transform_features(&rows.values),
        None => rows.values,
    };
    let summary = summarize(&ck.model, &x, ck.class_values.as_deref(), n_mc, seed)?;
    std::fs::create_dir_all(out_dir).with_context(|| format!("cannot create {}", out_dir.display()))?;
    let dot = out_dir.join(DOT_FILE);
    std::fs::write(&dot, render_dot(&summary)).with_context(|| format!("cannot write {}", dot.display()))?;
    let json = out_dir.join(SUMMARY_FILE);
    std::fs::write(&json, serde_json::to_string_pretty(&summary)?)
        .with_context(|| format!("cannot write {}", json.display()))?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use gphme::features::KernelFamily;
    use gphme::model::{ModelSpec, Task};

    fn deterministic(model: &mut TreeModel) {
        for q in model.gates.iter_mut().chain(model.experts.iter_mut()) {
            q.mean.iter_mut().for_each(|m| *m = 0.0);
            q.log_std.iter_mut().for_each(|s| *s = -10.0);
        }
    }

    fn identity_tree(height: usize, k: usize) -> TreeModel {
        let spec = ModelSpec::new(KernelFamily::Identity, height, 2, Task::Classification { num_classes: k });
        let mut m = TreeModel::new(&spec, 1).unwrap();
        deterministic(&mut m);
        m
    }

    /// Sets the bias row of a leaf's expert so it outputs `probs` everywhere.
    fn constant_leaf(m: &mut TreeModel, leaf: usize, probs: &[f64]) {
        for (c, p) in probs.iter().enumerate() {
            m.experts[leaf].mean[c] = p.ln();
        }
    }

    #[test]
    fn leaf_annotated_with_modal_class_and_mean_probability() {
        let mut m = identity_tree(1, 2);
        constant_leaf(&mut m, 0, &[0.9, 0.1]);
        constant_leaf(&mut m, 1, &[0.2, 0.8]);
        let x = [0.3, -1.0, 2.0, 0.5, -0.7, 0.1];
        let s = summarize(&m, &x, None, 4, 0).unwrap();
        let leaf = &s.nodes[1];
        assert_eq!(leaf.class, Some(0));
        assert!((leaf.prob.unwrap() - 0.9).abs() < 1e-3);
        assert_eq!(leaf_label(leaf.class.unwrap(), leaf.prob.unwrap()), "class 0, p=0.90");
        assert!(render_dot(&s).contains("class 0, p=0.90"));
        assert_eq!(s.nodes[2].class, Some(1));
        assert_eq!(s.nodes[0].classes, vec![0, 1]);
    }

    #[test]
    fn inner_nodes_take_the_union_of_leaf_classes() {
        let mut m = identity_tree(2, 10);
        let peaked = |c: usize| -> Vec<f64> { (0..10).map(|k| if k == c { 0.91 } else { 0.01 }).collect() };
        for (leaf, class) in [(0, 4), (1, 9), (2, 4), (3, 4)] {
            constant_leaf(&mut m, leaf, &peaked(class));
        }
        let s = summarize(&m, &[0.0, 0.0], None, 1, 0).unwrap();
        assert_eq!(s.nodes[1].classes, vec![4, 9]);
        assert_eq!(s.nodes[2].classes, vec![4]);
        assert_eq!(s.nodes[0].classes, vec![4, 9]);
        assert!(render_dot(&s).contains("{4, 9}"));
    }

    #[test]
    fn symmetric_model_has_even_edges() {
        let m = identity_tree(3, 3);
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin() * 3.0).collect();
        let s = summarize(&m, &x, None, 3, 5).unwrap();
        let dot = render_dot(&s);
        let edges: Vec<&str> = dot.lines().filter(|l| l.contains("->")).collect();
        assert_eq!(edges.len(), 2 * 7);
        assert!(edges.iter().all(|l| l.contains("label=\"0.50\"")), "{dot}");
    }

    #[test]
    fn class_values_name_the_leaves() {
        let mut m = identity_tree(1, 2);
        constant_leaf(&mut m, 0, &[0.7, 0.3]);
        constant_leaf(&mut m, 1, &[0.3, 0.7]);
        let s = summarize(&m, &[1.0, 1.0], Some(&[3, 8]), 1, 0).unwrap();
        assert_eq!(s.nodes[1].class, Some(3));
        assert_eq!(s.nodes[2].class, Some(8));
    }

    #[test]
    fn regression_is_structure_only() {
        let spec = ModelSpec::new(KernelFamily::Identity, 2, 2, Task::Regression { num_outputs: 1 });
        let m = TreeModel::new(&spec, 1).unwrap();
        let s = summarize(&m, &[0.0, 1.0], None, 2, 0).unwrap();
        assert!(!s.annotated);
        assert!(s.nodes.iter().all(|n| n.class.is_none() && n.classes.is_empty()));
        assert_eq!(render_dot(&s).matches("->").count(), 6);
    }
}
