//! Client-specific feature embedding: one-hot client identity expanded
//! through MLPs, gated channel attention over encoder features, and the
//! per-element calibration that blends local and freshly aggregated gate
//! parameters after each round.

use crate::error::{Error, Result};
use crate::evidential::{combined_loss, DirichletOutput, LossConfig};
use crate::model::{ForwardOpts, GroupSnapshot, ParamGroup, ParameterSet, Trainability};
use crate::tensor::{GradTape, Tensor};

/// Parameter view used by the embedding expansion and the gating branch.
/// Linear weights are stored `[in, out]`.
pub struct CfeTensors {
    pub embed_fc1_w: Tensor,
    pub embed_fc1_b: Tensor,
    pub embed_fc2_w: Tensor,
    pub embed_fc2_b: Tensor,
    pub gate_embed_w: Tensor,
    pub gate_embed_b: Tensor,
    pub gate_desc_w: Tensor,
    pub gate_desc_b: Tensor,
}

/// One-hot identity vector for a client.
pub fn one_hot_embedding(index: usize, clients: usize) -> Result<Tensor> {
    if index >= clients {
        return Err(Error::Contract(format!(
            "client index {index} out of range for {clients} clients"
        )));
    }
    let mut data = vec![0.0f32; clients];
    data[index] = 1.0;
    Tensor::from_vec(&[clients], data)
}

fn check_one_hot(delta: &Tensor) -> Result<()> {
    let mut ones = 0usize;
    for &v in delta.data() {
        if v == 1.0 {
            ones += 1;
        } else if v != 0.0 {
            return Err(Error::Contract(format!(
                "client embedding must be one-hot, found entry {v}"
            )));
        }
    }
    if ones != 1 {
        return Err(Error::Contract(format!(
            "client embedding must have exactly one 1, found {ones}"
        )));
    }
    Ok(())
}

fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let out = w.shape()[1];
    x.matmul(w)?.add(&b.reshape(&[1, out])?)
}

/// Expand a one-hot client vector `[1, K]` to the gate width: two
/// fully-connected+ReLU layers with instance normalization between them.
pub fn expand_embedding(delta: &Tensor, p: &CfeTensors) -> Result<Tensor> {
    check_one_hot(delta)?;
    let h = linear(delta, &p.embed_fc1_w, &p.embed_fc1_b)?.relu()?;
    let h = h.instance_norm()?;
    linear(&h, &p.embed_fc2_w, &p.embed_fc2_b)?.relu()
}

/// Gated channel attention: sigmoid of the embedding branch times tanh of
/// the descriptor branch. Output lies in (-1, 1) elementwise.
pub fn channel_attention(dstar: &Tensor, descriptor: &Tensor, p: &CfeTensors) -> Result<Tensor> {
    let gate = linear(dstar, &p.gate_embed_w, &p.gate_embed_b)?.sigmoid()?;
    let ctx = linear(descriptor, &p.gate_desc_w, &p.gate_desc_b)?.tanh()?;
    gate.mul(&ctx)
}

/// Residual channel gating: `f + f * a`, with `a [B,C]` broadcast over the
/// spatial axes.
pub fn apply_cfe(features: &Tensor, attention: &Tensor) -> Result<Tensor> {
    let [b, c]: [usize; 2] = attention
        .shape()
        .try_into()
        .map_err(|_| Error::shape(format!("attention must be [B,C], got {:?}", attention.shape())))?;
    let a = attention.reshape(&[b, c, 1, 1])?;
    features.add(&features.mul(&a)?)
}

/// Per-element calibration coefficients for the CFE group, clipped to [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct PsiMatrix {
    entries: Vec<(String, Vec<f32>)>,
}

fn clip01(v: f32) -> f32 {
    v.clamp(0.0, 1.0)
}

impl PsiMatrix {
    /// All-ones initialization: the first calibration fully adopts the
    /// aggregated parameters.
    pub fn ones_like(snapshot: &GroupSnapshot) -> PsiMatrix {
        PsiMatrix {
            entries: snapshot
                .entries
                .iter()
                .map(|(name, data)| (name.clone(), vec![1.0f32; data.len()]))
                .collect(),
        }
    }

    /// Rebuild from raw entries, clipping into [0,1].
    pub fn from_entries(entries: Vec<(String, Vec<f32>)>) -> PsiMatrix {
        let entries = entries
            .into_iter()
            .map(|(n, mut d)| {
                d.iter_mut().for_each(|v| *v = clip01(*v));
                (n, d)
            })
            .collect();
        PsiMatrix { entries }
    }

    pub fn entries(&self) -> &[(String, Vec<f32>)] {
        &self.entries
    }

    pub fn min_value(&self) -> f32 {
        self.entries
            .iter()
            .flat_map(|(_, d)| d.iter().copied())
            .fold(f32::INFINITY, f32::min)
    }

    pub fn max_value(&self) -> f32 {
        self.entries
            .iter()
            .flat_map(|(_, d)| d.iter().copied())
            .fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn in_unit_interval(&self) -> bool {
        self.entries
            .iter()
            .all(|(_, d)| d.iter().all(|&v| (0.0..=1.0).contains(&v)))
    }
}

fn aligned<'a>(
    local: &'a GroupSnapshot,
    global: &'a GroupSnapshot,
    psi_entries: &'a [(String, Vec<f32>)],
) -> Result<Vec<(&'a str, &'a [f32], &'a [f32], &'a [f32])>> {
    if local.entries.len() != global.entries.len() || local.entries.len() != psi_entries.len() {
        return Err(Error::shape(format!(
            "calibration arity mismatch: local {}, global {}, psi {}",
            local.entries.len(),
            global.entries.len(),
            psi_entries.len()
        )));
    }
    local
        .entries
        .iter()
        .zip(&global.entries)
        .zip(psi_entries)
        .map(|(((ln, ld), (gn, gd)), (pn, pd))| {
            if ln != gn || ln != pn {
                return Err(Error::shape(format!(
                    "calibration name mismatch: {ln} / {gn} / {pn}"
                )));
            }
            if ld.len() != gd.len() || ld.len() != pd.len() {
                return Err(Error::shape(format!(
                    "calibration length mismatch for `{ln}`: {} / {} / {}",
                    ld.len(),
                    gd.len(),
                    pd.len()
                )));
            }
            Ok((ln.as_str(), ld.as_slice(), gd.as_slice(), pd.as_slice()))
        })
        .collect()
}

/// Element-wise convex blend of local and global CFE parameters:
/// `theta_hat = local + (global - local) * psi`.
pub fn psi_calibrate(
    local: &GroupSnapshot,
    global: &GroupSnapshot,
    psi: &PsiMatrix,
) -> Result<GroupSnapshot> {
    let rows = aligned(local, global, &psi.entries)?;
    let entries = rows
        .into_iter()
        .map(|(name, l, g, p)| {
            let blended = l
                .iter()
                .zip(g)
                .zip(p)
                .map(|((&lv, &gv), &pv)| {
                    // exact at the endpoints: full retention / full adoption
                    if pv == 0.0 {
                        lv
                    } else if pv == 1.0 {
                        gv
                    } else {
                        lv + (gv - lv) * pv
                    }
                })
                .collect();
            (name.to_string(), blended)
        })
        .collect();
    Ok(GroupSnapshot { entries })
}

/// Gradient of the combined loss with respect to the calibration
/// coefficients, by the chain rule through the blend:
/// `dL/dpsi = dL/dtheta_hat * (global - local)`.
///
/// Every network parameter is held fixed; only the blended CFE parameters
/// act as gradient leaves.
#[allow(clippy::too_many_arguments)]
pub fn psi_gradient(
    psi: &PsiMatrix,
    local_cfe: &GroupSnapshot,
    global_cfe: &GroupSnapshot,
    net: &ParameterSet,
    batch: &Tensor,
    labels: &Tensor,
    embedding: &Tensor,
    round: usize,
    loss_cfg: &LossConfig,
) -> Result<Vec<(String, Vec<f32>)>> {
    let blended = psi_calibrate(local_cfe, global_cfe, psi)?;
    let mut candidate = net.clone();
    candidate.install_group(ParamGroup::Cfe, &blended)?;

    let tape = GradTape::new();
    let out = candidate.forward_with(
        batch,
        embedding,
        &ForwardOpts {
            tape: Some(&tape),
            trainable: Trainability::CfeOnly,
            disable_cfe: false,
        },
    )?;
    let dirichlet = DirichletOutput::from_evidence(&out.evidence)?;
    let loss = combined_loss(&out.seg_logits, &dirichlet, labels, round, loss_cfg)?;
    loss.total.backward()?;

    let rows = aligned(local_cfe, global_cfe, &psi.entries)?;
    let mut grads = Vec::with_capacity(rows.len());
    for (name, ld, gd, _) in rows {
        let theta_grad = out
            .leaves
            .get(name)
            .and_then(|leaf| leaf.grad())
            .unwrap_or_else(|| vec![0.0; ld.len()]);
        let g = theta_grad
            .iter()
            .zip(ld.iter().zip(gd))
            .map(|(&gr, (&lv, &gv))| gr * (gv - lv))
            .collect();
        grads.push((name.to_string(), g));
    }
    Ok(grads)
}

/// One or more gradient steps on the calibration coefficients, holding every
/// network parameter fixed, followed by clipping into [0,1].
///
/// `net` must already carry the parameters the calibrated model should use
/// outside the CFE group (new shared parameters plus the client's personal
/// head). Returns the final calibrated CFE snapshot.
#[allow(clippy::too_many_arguments)]
pub fn psi_update(
    psi: &mut PsiMatrix,
    local_cfe: &GroupSnapshot,
    global_cfe: &GroupSnapshot,
    net: &ParameterSet,
    batch: &Tensor,
    labels: &Tensor,
    embedding: &Tensor,
    round: usize,
    loss_cfg: &LossConfig,
    eta: f32,
    epochs: usize,
) -> Result<GroupSnapshot> {
    for _ in 0..epochs {
        let grads = psi_gradient(
            psi, local_cfe, global_cfe, net, batch, labels, embedding, round, loss_cfg,
        )?;
        for ((name, pd), (gn, gd)) in psi.entries.iter_mut().zip(&grads) {
            debug_assert_eq!(name, gn);
            for (pv, &gv) in pd.iter_mut().zip(gd) {
                *pv = clip01(*pv - eta * gv);
            }
        }
    }
    psi_calibrate(local_cfe, global_cfe, psi)
}

#[cfg(test)]
mod tests;
