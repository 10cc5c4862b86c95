//! Route and attribution exports: heatmap matrices, route graphs (DOT or
//! structured text), and inter-class sharing statistics.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::attribution::{AttributionMap, RouteMask};
use crate::error::{Error, Result};
use crate::network::{Label, LayerSpec, Model};

/// Renders `x` with six significant digits in plain decimal notation.
pub fn sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x:.5}");
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if exp <= 5 {
        format!("{:.*}", (5 - exp) as usize, x)
    } else {
        let neg = mantissa.starts_with('-');
        let digits: String = mantissa.chars().filter(char::is_ascii_digit).collect();
        let zeros = "0".repeat((exp - 5) as usize);
        format!("{}{digits}{zeros}", if neg { "-" } else { "" })
    }
}

/// Class-by-unit score matrix for one layer: a header row of unit indices,
/// then one comma-separated row per map, in the given order.
pub fn export_heatmap(attrs: &[AttributionMap], layer: usize) -> Result<String> {
    let rows: Vec<&[f64]> = attrs
        .iter()
        .map(|a| {
            a.layer(layer)
                .ok_or_else(|| Error::Shape(format!("attribution for class {} lacks layer {layer}", a.class)))
        })
        .collect::<Result<_>>()?;
    let width = rows.first().map_or(0, |r| r.len());
    if let Some(r) = rows.iter().find(|r| r.len() != width) {
        return Err(Error::Shape(format!("heatmap rows of width {width} and {}", r.len())));
    }
    let mut out = (0..width).map(|d| d.to_string()).collect::<Vec<_>>().join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&r.iter().map(|&v| sig6(v)).collect::<Vec<_>>().join(","));
        out.push('\n');
    }
    Ok(out)
}

fn check_same_shape(a: &RouteMask, b: &RouteMask) -> Result<()> {
    let wa: Vec<usize> = a.layers.iter().map(|l| l.keep.len()).collect();
    let wb: Vec<usize> = b.layers.iter().map(|l| l.keep.len()).collect();
    if wa != wb {
        return Err(Error::Shape(format!("mask layer widths {wa:?} and {wb:?} differ")));
    }
    Ok(())
}

/// Per layer, intersection over union of the two masks' kept units
/// (0 when neither keeps anything).
pub fn shared_ratio(a: &RouteMask, b: &RouteMask) -> Result<Vec<f64>> {
    check_same_shape(a, b)?;
    Ok(a
        .layers
        .iter()
        .zip(&b.layers)
        .map(|(la, lb)| {
            let inter = la.keep.iter().zip(&lb.keep).filter(|(x, y)| **x && **y).count();
            let union = la.keep.iter().zip(&lb.keep).filter(|(x, y)| **x || **y).count();
            if union == 0 {
                0.0
            } else {
                inter as f64 / union as f64
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RouteNode {
    pub layer: usize,
    pub unit: usize,
    /// Indices of the masks that keep this unit.
    pub owners: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouteEdge {
    pub layer: usize,
    pub from: usize,
    pub to: usize,
    pub owners: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerShare {
    pub layer: usize,
    pub kind: String,
    pub kept: usize,
    pub shared: usize,
}

/// Kept units of several routes over one model and the kernels linking them.
///
/// An edge `(layer, from) -> (layer + 1, to)` exists when some mask keeps
/// both units, i.e. keeps the kernel of filter `to` that reads `from`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouteGraph {
    pub model: String,
    /// Class set of each contributing mask, by mask index.
    pub routes: Vec<Vec<Label>>,
    pub nodes: Vec<RouteNode>,
    pub edges: Vec<RouteEdge>,
    pub shares: Vec<LayerShare>,
}

impl RouteGraph {
    pub fn build(masks: &[RouteMask], model: &Model) -> Result<Self> {
        if masks.is_empty() {
            return Err(Error::InvalidArgument("no masks to export".into()));
        }
        let widths = model.unit_counts();
        for m in masks {
            let w: Vec<usize> = m.layers.iter().map(|l| l.keep.len()).collect();
            if w != widths {
                return Err(Error::Shape(format!("mask widths {w:?} do not match model widths {widths:?}")));
            }
        }
        let kinds: Vec<&str> = model.param_layers().iter().map(LayerSpec::kind).collect();
        let mut nodes = Vec::new();
        let mut shares = Vec::new();
        for (layer, &n) in widths.iter().enumerate() {
            let mut kept = 0;
            let mut shared = 0;
            for unit in 0..n {
                let owners: Vec<usize> = (0..masks.len()).filter(|&m| masks[m].layers[layer].keep[unit]).collect();
                if owners.is_empty() {
                    continue;
                }
                kept += 1;
                shared += (owners.len() > 1) as usize;
                nodes.push(RouteNode { layer, unit, owners });
            }
            shares.push(LayerShare {
                layer,
                kind: kinds[layer].to_string(),
                kept,
                shared,
            });
        }
        let mut edges: BTreeMap<(usize, usize, usize), BTreeSet<usize>> = BTreeMap::new();
        for (mi, m) in masks.iter().enumerate() {
            for layer in 0..widths.len().saturating_sub(1) {
                let from = m.layers[layer].kept();
                let to = m.layers[layer + 1].kept();
                for &f in &from {
                    for &t in &to {
                        edges.entry((layer, f, t)).or_default().insert(mi);
                    }
                }
            }
        }
        Ok(Self {
            model: model.meta.name.clone(),
            routes: masks.iter().map(|m| m.classes.clone()).collect(),
            nodes,
            edges: edges
                .into_iter()
                .map(|((layer, from, to), owners)| RouteEdge {
                    layer,
                    from,
                    to,
                    owners: owners.into_iter().collect(),
                })
                .collect(),
            shares,
        })
    }

    pub fn to_structured(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_structured(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_dot(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "digraph route {{");
        let _ = writeln!(out, "  label=\"{}\";", escape(&self.model));
        let _ = writeln!(out, "  rankdir=LR;");
        let _ = writeln!(out, "  node [shape=circle, style=filled, fontsize=10];");
        for (i, classes) in self.routes.iter().enumerate() {
            let _ = writeln!(out, "  // route {i}: classes {}, color {}", join(classes), PALETTE[i % PALETTE.len()]);
        }
        for share in &self.shares {
            let _ = writeln!(out, "  subgraph cluster_{} {{", share.layer);
            let _ = writeln!(
                out,
                "    label=\"layer {} ({}): {} kept, {} shared\";",
                share.layer, share.kind, share.kept, share.shared
            );
            for n in self.nodes.iter().filter(|n| n.layer == share.layer) {
                let classes = self.owner_classes(&n.owners);
                if n.owners.len() > 1 {
                    let _ = writeln!(
                        out,
                        "    L{}_{} [label=\"{}\", fillcolor=\"{SHARED}\", peripheries=2, tooltip=\"shared: {}\"];",
                        n.layer,
                        n.unit,
                        n.unit,
                        join(&classes)
                    );
                } else {
                    let _ = writeln!(
                        out,
                        "    L{}_{} [label=\"{}\", fillcolor=\"{}\", tooltip=\"{}\"];",
                        n.layer,
                        n.unit,
                        n.unit,
                        PALETTE[n.owners[0] % PALETTE.len()],
                        join(&classes)
                    );
                }
            }
            let _ = writeln!(out, "  }}");
        }
        for e in &self.edges {
            let color = if e.owners.len() > 1 {
                SHARED
            } else {
                PALETTE[e.owners[0] % PALETTE.len()]
            };
            let _ = writeln!(out, "  L{}_{} -> L{}_{} [color=\"{color}\"];", e.layer, e.from, e.layer + 1, e.to);
        }
        let _ = writeln!(out, "}}");
        out
    }

    fn owner_classes(&self, owners: &[usize]) -> Vec<Label> {
        let set: BTreeSet<Label> = owners.iter().flat_map(|&o| self.routes[o].iter().copied()).collect();
        set.into_iter().collect()
    }
}

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];
const SHARED: &str = "#d3d3d3";

fn join(labels: &[Label]) -> String {
    labels.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(",")
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RouteFormat {
    Dot,
    Structured,
}

pub fn export_route(masks: &[RouteMask], model: &Model, format: RouteFormat) -> Result<String> {
    let graph = RouteGraph::build(masks, model)?;
    match format {
        RouteFormat::Dot => Ok(graph.to_dot()),
        RouteFormat::Structured => graph.to_structured(),
    }
}

/// Jaccard overlap of the top-quartile units (by score) of two score vectors.
pub fn top_quartile_jaccard(a: &[f64], b: &[f64]) -> f64 {
    let top = |s: &[f64]| -> BTreeSet<usize> {
        let k = s.len().div_ceil(4).max(1);
        let mut idx: Vec<usize> = (0..s.len()).collect();
        idx.sort_by(|&i, &j| s[j].total_cmp(&s[i]).then(i.cmp(&j)));
        idx.into_iter().take(k).collect()
    };
    let (ta, tb) = (top(a), top(b));
    let union = ta.union(&tb).count();
    if union == 0 {
        0.0
    } else {
        ta.intersection(&tb).count() as f64 / union as f64
    }
}
