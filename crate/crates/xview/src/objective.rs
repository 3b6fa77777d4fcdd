//! Set-prediction training objective: bipartite matching between queries and
//! ground-truth events, temporal GIoU and focal terms per decoder layer, an
//! event-count term, the two imitation-error BCE heads, and the weighted
//! combination of everything (including the sampler/dictionary regularizers)
//! into one total loss.
//!
//! Matching runs on detached values; gradients flow only through the losses
//! of the matched pairs, as usual for DETR-style training.

use crate::detector::LayerPredictions;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;
use crate::types::{GroundTruthEvent, Span};

/// Clamp for probabilities entering logs on the (non-differentiable)
/// matching-cost side.
const PROB_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct LossWeights {
    // matching costs
    pub alpha_giou: f64,
    pub alpha_cls: f64,
    // per-layer detection loss
    pub beta_giou: f64,
    pub beta_cls: f64,
    pub beta_ec: f64,
    /// Captioning is out of scope; pinned to zero.
    pub beta_cap: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    // task and regularizer weights
    pub lambda_imit: f64,
    pub lambda_sel: f64,
    pub lambda_vic: f64,
    pub lambda_view_ent: f64,
    pub lambda_dict_div: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha_giou: 2.0,
            alpha_cls: 1.0,
            beta_giou: 2.0,
            beta_cls: 1.0,
            beta_ec: 0.5,
            beta_cap: 0.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            lambda_imit: 0.5,
            lambda_sel: 0.02,
            lambda_vic: 0.02,
            lambda_view_ent: 0.02,
            lambda_dict_div: 0.02,
        }
    }
}

/// Per-component scalars of one training step. `total` is exactly the
/// weighted sum of the components under the weights that produced it.
#[derive(Debug, Clone, Default)]
pub struct LossReport {
    pub giou: f64,
    pub cls: f64,
    pub ec: f64,
    pub imit_fine: f64,
    pub imit_overall: f64,
    pub sel: f64,
    pub vic: f64,
    pub view_ent: f64,
    pub dict_div: f64,
    pub total: f64,
}

impl LossReport {
    pub fn weighted_sum(&self, w: &LossWeights) -> f64 {
        w.beta_giou * self.giou
            + w.beta_cls * self.cls
            + w.beta_ec * self.ec
            + w.lambda_imit * (self.imit_fine + self.imit_overall)
            + w.lambda_sel * self.sel
            + w.lambda_vic * self.vic
            + w.lambda_view_ent * self.view_ent
            + w.lambda_dict_div * self.dict_div
    }

    pub fn format_line(&self, step: u64) -> String {
        format!(
            "step {step}: total {:.6} | giou {:.4} cls {:.4} ec {:.4} fine {:.4} overall {:.4} sel {:.4} vic {:.4} vent {:.4} ddiv {:.4}",
            self.total,
            self.giou,
            self.cls,
            self.ec,
            self.imit_fine,
            self.imit_overall,
            self.sel,
            self.vic,
            self.view_ent,
            self.dict_div
        )
    }
}

// ── scalar-side matching ─────────────────────────────────────────────

/// Positive-class focal cost used during matching.
fn focal_pos_cost(p: f64, alpha_f: f64, gamma_f: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    alpha_f * (1.0 - p).powf(gamma_f) * -p.ln()
}

/// Matching cost between one prediction and one ground-truth event.
pub fn matching_cost(
    pred_span: &Span,
    pred_fg_prob: f64,
    gt: &GroundTruthEvent,
    w: &LossWeights,
) -> f64 {
    w.alpha_giou * (1.0 - pred_span.giou(&gt.span))
        + w.alpha_cls * focal_pos_cost(pred_fg_prob, w.focal_alpha, w.focal_gamma)
}

/// Minimum-cost assignment of each row to a distinct column
/// (rows <= columns required). Returns `assign[row] = column`.
///
/// Shortest-augmenting-path formulation with potentials, O(n^2 m).
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = cost.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let m = cost[0].len();
    if n > m {
        return Err(Error::Shape(format!(
            "assignment needs at least as many columns as rows ({n} rows, {m} cols)"
        )));
    }
    for row in cost {
        if row.len() != m {
            return Err(Error::Shape("assignment: ragged cost matrix".into()));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("assignment cost matrix".into()));
        }
    }
    // 1-indexed potentials; p[j] = row matched to column j (0 = free)
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![usize::MAX; n];
    for j in 1..=m {
        if p[j] != 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    debug_assert!(assign.iter().all(|&a| a != usize::MAX));
    Ok(assign)
}

/// Hungarian assignment of ground-truth events to query predictions for one
/// decoder layer, on detached values.
pub fn match_layer(
    g: &Graph,
    preds: &LayerPredictions,
    gts: &[GroundTruthEvent],
    w: &LossWeights,
) -> Result<Vec<usize>> {
    if gts.is_empty() {
        return Ok(Vec::new());
    }
    let spans = g.value(preds.spans);
    let fg = g.value(preds.fg_logits).map(sigmoid);
    let n_queries = fg.numel();
    if n_queries < gts.len() {
        return Err(Error::Config(format!(
            "{} queries cannot cover {} ground-truth events; raise det.n_queries",
            n_queries,
            gts.len()
        )));
    }
    let cost: Vec<Vec<f64>> = gts
        .iter()
        .map(|gt| {
            (0..n_queries)
                .map(|i| {
                    let pred_span = Span::new(spans.at(i, 0), spans.at(i, 1));
                    matching_cost(&pred_span, fg.data()[i], gt, w)
                })
                .collect()
        })
        .collect();
    hungarian(&cost)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// ── graph-side loss terms ────────────────────────────────────────────

/// Elementwise temporal GIoU of two `[P, 2]` span stacks, as a `[P]` node.
pub fn temporal_giou_graph(g: &Graph, pred_spans: Var, gt_spans: Var) -> Result<Var> {
    let shape = g.shape_of(pred_spans);
    if shape != g.shape_of(gt_spans) || shape.len() != 2 || shape[1] != 2 {
        return Err(Error::Shape("giou: span stacks must both be [P, 2]".into()));
    }
    let p = shape[0];
    let (s1, e1) = (
        g.reshape(g.slice_cols(pred_spans, 0, 1)?, &[p])?,
        g.reshape(g.slice_cols(pred_spans, 1, 2)?, &[p])?,
    );
    let (s2, e2) = (
        g.reshape(g.slice_cols(gt_spans, 0, 1)?, &[p])?,
        g.reshape(g.slice_cols(gt_spans, 1, 2)?, &[p])?,
    );
    let inter = g.relu(g.sub(g.min_elem(e1, e2)?, g.max_elem(s1, s2)?)?)?;
    let len1 = g.sub(e1, s1)?;
    let len2 = g.sub(e2, s2)?;
    let union = g.sub(g.add(len1, len2)?, inter)?;
    let enclosure = g.sub(g.max_elem(e1, e2)?, g.min_elem(s1, s2)?)?;
    let iou = g.div(inter, union)?;
    let slack = g.div(g.sub(enclosure, union)?, enclosure)?;
    g.sub(iou, slack)
}

/// Mean focal loss over all query fg logits; `targets[i]` marks matched
/// (foreground) queries. Written in softplus form so it is stable at any
/// logit: for positives alpha (1-p)^g (-ln p) and symmetrically for
/// negatives.
pub fn focal_loss_graph(
    g: &Graph,
    logits: Var,
    targets: &[bool],
    alpha_f: f64,
    gamma_f: f64,
) -> Result<Var> {
    let n = g.shape_of(logits)[0];
    if targets.len() != n {
        return Err(Error::Shape("focal: target length mismatch".into()));
    }
    let sp_pos = g.softplus(g.neg(logits)?)?; // -ln p
    let sp_neg = g.softplus(logits)?; // -ln (1-p)
    let mod_pos = g.exp(g.scale(sp_neg, -gamma_f)?)?; // (1-p)^gamma
    let mod_neg = g.exp(g.scale(sp_pos, -gamma_f)?)?; // p^gamma
    let pos_term = g.scale(g.mul(mod_pos, sp_pos)?, alpha_f)?;
    let neg_term = g.scale(g.mul(mod_neg, sp_neg)?, 1.0 - alpha_f)?;
    let pos_mask: Vec<f64> = targets.iter().map(|&t| if t { 1.0 } else { 0.0 }).collect();
    let neg_mask: Vec<f64> = targets.iter().map(|&t| if t { 0.0 } else { 1.0 }).collect();
    let pm = g.constant(Tensor::vector(pos_mask))?;
    let nm = g.constant(Tensor::vector(neg_mask))?;
    let combined = g.add(g.mul(pos_term, pm)?, g.mul(neg_term, nm)?)?;
    g.mean_all(combined)
}

/// Mean binary cross-entropy with logits.
pub fn bce_with_logits_graph(g: &Graph, logits: Var, targets: &[bool]) -> Result<Var> {
    let n = g.shape_of(logits)[0];
    if targets.len() != n {
        return Err(Error::Shape("bce: target length mismatch".into()));
    }
    // y softplus(-z) + (1-y) softplus(z)
    let sp_pos = g.softplus(g.neg(logits)?)?;
    let sp_neg = g.softplus(logits)?;
    let y: Vec<f64> = targets.iter().map(|&t| if t { 1.0 } else { 0.0 }).collect();
    let ny: Vec<f64> = y.iter().map(|v| 1.0 - v).collect();
    let yv = g.constant(Tensor::vector(y))?;
    let nyv = g.constant(Tensor::vector(ny))?;
    let combined = g.add(g.mul(sp_pos, yv)?, g.mul(sp_neg, nyv)?)?;
    g.mean_all(combined)
}

/// Cross-entropy of the event-count head: -log p(count bucket). Buckets
/// cover counts {1..N}; the target count is clamped into that range.
pub fn count_loss_graph(g: &Graph, count_logits: Var, n_gt: usize) -> Result<Var> {
    let n = g.shape_of(count_logits)[0];
    let bucket = n_gt.clamp(1, n) - 1;
    // stable -log softmax via a detached max shift
    let max = g.value(count_logits).data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let shifted = g.add_scalar(count_logits, -max)?;
    let lse = g.ln(g.sum_all(g.exp(shifted)?)?)?;
    let picked = g.index_scalar(shifted, bucket)?;
    g.sub(lse, picked)
}

/// Detection-loss components for one decoder layer under a given matching.
pub struct LayerLoss {
    pub giou: Var,
    pub cls: Var,
    pub ec: Var,
}

pub fn dvc_layer_loss(
    g: &Graph,
    preds: &LayerPredictions,
    gts: &[GroundTruthEvent],
    assignment: &[usize],
    w: &LossWeights,
) -> Result<LayerLoss> {
    let n_queries = g.shape_of(preds.fg_logits)[0];
    let giou = if gts.is_empty() {
        g.scalar(0.0)?
    } else {
        let matched = g.gather_rows(preds.spans, assignment)?;
        let gt_data: Vec<f64> = gts
            .iter()
            .flat_map(|e| [e.span.start, e.span.end])
            .collect();
        let gt_spans = g.constant(Tensor::matrix(gts.len(), 2, gt_data)?)?;
        let giou_vec = temporal_giou_graph(g, matched, gt_spans)?;
        let loss_vec = g.add_scalar(g.neg(giou_vec)?, 1.0)?; // 1 - GIoU
        g.mean_all(loss_vec)?
    };
    let mut fg_targets = vec![false; n_queries];
    for &q in assignment {
        fg_targets[q] = true;
    }
    let cls = focal_loss_graph(g, preds.fg_logits, &fg_targets, w.focal_alpha, w.focal_gamma)?;
    let ec = count_loss_graph(g, preds.count_logits, gts.len())?;
    Ok(LayerLoss { giou, cls, ec })
}

/// BCE over the final layer's matched error logits (1 = erroneous
/// execution). Zero when there are no ground-truth events.
pub fn imit_fine_loss(
    g: &Graph,
    error_logits: Var,
    assignment: &[usize],
    gts: &[GroundTruthEvent],
) -> Result<Var> {
    if gts.is_empty() {
        return g.scalar(0.0);
    }
    let logits_mat = {
        let n = g.shape_of(error_logits)[0];
        g.reshape(error_logits, &[n, 1])?
    };
    let matched = g.reshape(g.gather_rows(logits_mat, assignment)?, &[gts.len()])?;
    let labels: Vec<bool> = gts.iter().map(|g| g.error).collect();
    bce_with_logits_graph(g, matched, &labels)
}

/// BCE of the video-level head; the label is 1 iff any event is erroneous.
pub fn imit_overall_loss(g: &Graph, overall_logit: Var, any_error: bool) -> Result<Var> {
    bce_with_logits_graph(g, overall_logit, &[any_error])
}

/// Regularizer nodes handed in by the modules that computed them.
#[derive(Default)]
pub struct Regularizers {
    pub sel: Option<Var>,
    pub vic: Option<Var>,
    pub view_ent: Option<Var>,
    pub dict_div: Option<Var>,
}

/// Combine per-layer detection losses (matching recomputed per layer), the
/// two imitation losses on the final layer, and the regularizers into the
/// total training loss. Returns the scalar node and the per-component
/// report.
pub fn total_loss(
    g: &Graph,
    per_layer: &[LayerPredictions],
    gts: &[GroundTruthEvent],
    regs: &Regularizers,
    w: &LossWeights,
) -> Result<(Var, LossReport)> {
    if per_layer.is_empty() {
        return Err(Error::Input("loss: no decoder layers".into()));
    }
    let mut giou_sum: Option<Var> = None;
    let mut cls_sum: Option<Var> = None;
    let mut ec_sum: Option<Var> = None;
    let mut last_assignment = Vec::new();
    for preds in per_layer {
        let assignment = match_layer(g, preds, gts, w)?;
        let ll = dvc_layer_loss(g, preds, gts, &assignment, w)?;
        giou_sum = Some(match giou_sum {
            Some(acc) => g.add(acc, ll.giou)?,
            None => ll.giou,
        });
        cls_sum = Some(match cls_sum {
            Some(acc) => g.add(acc, ll.cls)?,
            None => ll.cls,
        });
        ec_sum = Some(match ec_sum {
            Some(acc) => g.add(acc, ll.ec)?,
            None => ll.ec,
        });
        last_assignment = assignment;
    }
    let giou = giou_sum.expect("at least one layer");
    let cls = cls_sum.expect("at least one layer");
    let ec = ec_sum.expect("at least one layer");
    let final_preds = per_layer.last().expect("at least one layer");
    let fine = imit_fine_loss(g, final_preds.error_logits, &last_assignment, gts)?;
    let any_error = gts.iter().any(|g| g.error);
    let overall = imit_overall_loss(g, final_preds.overall_logit, any_error)?;

    let zero = g.scalar(0.0)?;
    let sel = regs.sel.unwrap_or(zero);
    let vic = regs.vic.unwrap_or(zero);
    let view_ent = regs.view_ent.unwrap_or(zero);
    let dict_div = regs.dict_div.unwrap_or(zero);

    let mut total = g.scale(giou, w.beta_giou)?;
    total = g.add(total, g.scale(cls, w.beta_cls)?)?;
    total = g.add(total, g.scale(ec, w.beta_ec)?)?;
    total = g.add(total, g.scale(g.add(fine, overall)?, w.lambda_imit)?)?;
    total = g.add(total, g.scale(sel, w.lambda_sel)?)?;
    total = g.add(total, g.scale(vic, w.lambda_vic)?)?;
    total = g.add(total, g.scale(view_ent, w.lambda_view_ent)?)?;
    total = g.add(total, g.scale(dict_div, w.lambda_dict_div)?)?;

    let report = LossReport {
        giou: g.value(giou).item(),
        cls: g.value(cls).item(),
        ec: g.value(ec).item(),
        imit_fine: g.value(fine).item(),
        imit_overall: g.value(overall).item(),
        sel: g.value(sel).item(),
        vic: g.value(vic).item(),
        view_ent: g.value(view_ent).item(),
        dict_div: g.value(dict_div).item(),
        total: g.value(total).item(),
    };
    Ok((total, report))
}
