//! Segmentation network assembly and the parameter partition the federation
//! protocol depends on.
//!
//! The network is a three-part pipeline: a frozen conv encoder with trainable
//! per-channel bottleneck adapters, a client-specific channel gate at a
//! configurable encoder stage, and a mirrored conv decoder feeding two 1x1
//! heads (segmentation logits and non-negative evidence).

use crate::cfe::{self, CfeTensors};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::tensor::{GradTape, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

/// Parameter groups of the network partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    /// Encoder weights; initialized once, never updated or aggregated.
    Frozen,
    /// Bottleneck adapters interleaved with the encoder stages.
    Adapter,
    /// Client-specific feature embedding (expansion + gating MLPs).
    Cfe,
    /// Decoder convolutions and skip projections.
    Decoder,
    /// 1x1 segmentation head.
    SegHead,
    /// 1x1 evidential-uncertainty head, personalized per client.
    EuHead,
}

impl ParamGroup {
    pub fn tag(self) -> u8 {
        match self {
            ParamGroup::Frozen => 0,
            ParamGroup::Adapter => 1,
            ParamGroup::Cfe => 2,
            ParamGroup::Decoder => 3,
            ParamGroup::SegHead => 4,
            ParamGroup::EuHead => 5,
        }
    }

    pub fn from_tag(tag: u8) -> Option<ParamGroup> {
        Some(match tag {
            0 => ParamGroup::Frozen,
            1 => ParamGroup::Adapter,
            2 => ParamGroup::Cfe,
            3 => ParamGroup::Decoder,
            4 => ParamGroup::SegHead,
            5 => ParamGroup::EuHead,
            _ => return None,
        })
    }
}

/// Container tag for per-client calibration matrices stored alongside
/// network parameters in client checkpoints.
pub const PSI_TAG: u8 = 6;

/// Activation that maps EU-head logits to non-negative evidence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EvidenceActivation {
    #[default]
    Softplus,
    Exp,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub encoder_widths: Vec<usize>,
    pub adapter_bottleneck: usize,
    /// 1-based encoder stage after which the client gate is applied.
    pub cfe_stage: usize,
    pub clients: usize,
    #[serde(default)]
    pub evidence_activation: EvidenceActivation,
}

impl NetworkConfig {
    pub fn stages(&self) -> usize {
        self.encoder_widths.len()
    }

    /// Decoder widths mirror the encoder at quarter width (floor 4).
    pub fn decoder_widths(&self) -> Vec<usize> {
        self.encoder_widths
            .iter()
            .rev()
            .map(|&w| (w / 4).max(4))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!(
                "network.classes must be >= 2, got {}",
                self.classes
            )));
        }
        if self.encoder_widths.is_empty() {
            return Err(Error::Config("network.encoder_widths must be non-empty".into()));
        }
        if self.encoder_widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("network.encoder_widths must be positive".into()));
        }
        let div = 1usize << self.stages();
        if self.height == 0 || self.width == 0 || self.height % div != 0 || self.width % div != 0 {
            return Err(Error::Config(format!(
                "network.height/width must be divisible by 2^{} (stages), got {}x{}",
                self.stages(),
                self.height,
                self.width
            )));
        }
        if self.cfe_stage == 0 || self.cfe_stage > self.stages() {
            return Err(Error::Config(format!(
                "network.cfe_stage must be in 1..={}, got {}",
                self.stages(),
                self.cfe_stage
            )));
        }
        if self.adapter_bottleneck == 0 {
            return Err(Error::Config("network.adapter_bottleneck must be positive".into()));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("network.in_channels must be positive".into()));
        }
        if self.clients < 2 {
            return Err(Error::Config(format!(
                "network.clients must be >= 2, got {}",
                self.clients
            )));
        }
        Ok(())
    }

    /// Width of the feature map at the gate stage, which is also the client
    /// embedding expansion width.
    pub fn gate_width(&self) -> usize {
        self.encoder_widths[self.cfe_stage - 1]
    }
}

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Named parameter tensors, each tagged with exactly one group. Group
/// membership is fixed at construction.
#[derive(Clone)]
pub struct ParameterSet {
    cfg: NetworkConfig,
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

/// Ordered copy of one group's parameter data, used for personalization and
/// delta bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupSnapshot {
    pub entries: Vec<(String, Vec<f32>)>,
}

/// Which parameters become tracked leaves during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainability {
    /// Everything except the Frozen group (Eq.-8 routing is structural).
    NonFrozen,
    /// Only the CFE group (calibration-coefficient updates).
    CfeOnly,
    /// Pure inference.
    None,
    /// Warm-up only: encoder included.
    All,
}

impl Trainability {
    fn includes(self, group: ParamGroup) -> bool {
        match self {
            Trainability::NonFrozen => group != ParamGroup::Frozen,
            Trainability::CfeOnly => group == ParamGroup::Cfe,
            Trainability::None => false,
            Trainability::All => true,
        }
    }
}

#[derive(Clone, Copy)]
pub struct ForwardOpts<'t> {
    pub tape: Option<&'t GradTape>,
    pub trainable: Trainability,
    /// Force the client gate to zero attention, reducing the network to its
    /// gate-free counterpart.
    pub disable_cfe: bool,
}

impl ForwardOpts<'_> {
    pub fn inference() -> Self {
        ForwardOpts {
            tape: None,
            trainable: Trainability::None,
            disable_cfe: false,
        }
    }
}

pub struct ForwardOutput {
    pub seg_logits: Tensor,
    pub evidence: Tensor,
    /// Tracked leaves by parameter name; gradients land here after backward.
    pub leaves: HashMap<String, Tensor>,
}

/// Loss branches of the combined objective, used to select which parameters
/// each branch may update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Seg,
    Eu,
}

fn kaiming_uniform(rng: &mut impl Rng, fan_in: usize, n: usize) -> Vec<f32> {
    let bound = (6.0 / fan_in as f64).sqrt() as f32;
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

/// Rewrite numeric errors with the layer that produced them.
fn named<T>(layer: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Numeric { op, msg } => Error::numeric(format!("{layer}/{op}"), msg),
        other => other,
    })
}

/// Deterministically initialize the full parameter set from a seed.
///
/// Conv and linear weights are Kaiming-uniform; biases zero; adapter
/// up-projections zero so every adapter starts as an identity residual.
pub fn build_network(cfg: &NetworkConfig, seed: u64) -> Result<ParameterSet> {
    cfg.validate()?;
    let mut rng = stream_rng(seed, Stream::NetworkInit, 0, 0);
    let mut params: Vec<Parameter> = Vec::new();

    let mut push = |params: &mut Vec<Parameter>,
                    name: String,
                    group: ParamGroup,
                    shape: Vec<usize>,
                    data: Vec<f32>| {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        params.push(Parameter {
            name,
            group,
            shape,
            data,
        });
    };

    // encoder + adapters
    let mut prev = cfg.in_channels;
    for (i, &w) in cfg.encoder_widths.iter().enumerate() {
        let stage = i + 1;
        let fan_in = prev * 9;
        push(
            &mut params,
            format!("enc{stage}.weight"),
            ParamGroup::Frozen,
            vec![w, prev, 3, 3],
            kaiming_uniform(&mut rng, fan_in, w * prev * 9),
        );
        push(
            &mut params,
            format!("enc{stage}.bias"),
            ParamGroup::Frozen,
            vec![w],
            vec![0.0; w],
        );
        let b = cfg.adapter_bottleneck;
        push(
            &mut params,
            format!("adapter{stage}.down.weight"),
            ParamGroup::Adapter,
            vec![b, w, 1, 1],
            kaiming_uniform(&mut rng, w, b * w),
        );
        push(
            &mut params,
            format!("adapter{stage}.down.bias"),
            ParamGroup::Adapter,
            vec![b],
            vec![0.0; b],
        );
        push(
            &mut params,
            format!("adapter{stage}.up.weight"),
            ParamGroup::Adapter,
            vec![w, b, 1, 1],
            vec![0.0; w * b],
        );
        push(
            &mut params,
            format!("adapter{stage}.up.bias"),
            ParamGroup::Adapter,
            vec![w],
            vec![0.0; w],
        );
        prev = w;
    }

    // client embedding expansion and gating
    let gw = cfg.gate_width();
    let k = cfg.clients;
    for (name, rows, cols) in [
        ("cfe.embed.fc1", k, gw),
        ("cfe.embed.fc2", gw, gw),
        ("cfe.gate.embed", gw, gw),
        ("cfe.gate.desc", gw, gw),
    ] {
        push(
            &mut params,
            format!("{name}.weight"),
            ParamGroup::Cfe,
            vec![rows, cols],
            kaiming_uniform(&mut rng, rows, rows * cols),
        );
        push(
            &mut params,
            format!("{name}.bias"),
            ParamGroup::Cfe,
            vec![cols],
            vec![0.0; cols],
        );
    }

    // decoder: upsample + conv3x3 per stage, with skip projections from the
    // mirrored encoder stage (final stage skips from the raw input)
    let dw = cfg.decoder_widths();
    let mut prev = *cfg.encoder_widths.last().expect("non-empty");
    let stages = cfg.stages();
    for (j, &w) in dw.iter().enumerate() {
        let stage = j + 1;
        push(
            &mut params,
            format!("dec{stage}.weight"),
            ParamGroup::Decoder,
            vec![w, prev, 3, 3],
            kaiming_uniform(&mut rng, prev * 9, w * prev * 9),
        );
        push(
            &mut params,
            format!("dec{stage}.bias"),
            ParamGroup::Decoder,
            vec![w],
            vec![0.0; w],
        );
        if j < stages - 1 {
            let skip_c = cfg.encoder_widths[stages - 2 - j];
            push(
                &mut params,
                format!("dec{stage}.skip.weight"),
                ParamGroup::Decoder,
                vec![w, skip_c, 1, 1],
                kaiming_uniform(&mut rng, skip_c, w * skip_c),
            );
            push(
                &mut params,
                format!("dec{stage}.skip.bias"),
                ParamGroup::Decoder,
                vec![w],
                vec![0.0; w],
            );
        } else {
            push(
                &mut params,
                format!("dec{stage}.skip.weight"),
                ParamGroup::Decoder,
                vec![w, cfg.in_channels, 3, 3],
                kaiming_uniform(&mut rng, cfg.in_channels * 9, w * cfg.in_channels * 9),
            );
            push(
                &mut params,
                format!("dec{stage}.skip.bias"),
                ParamGroup::Decoder,
                vec![w],
                vec![0.0; w],
            );
        }
        prev = w;
    }

    // heads
    let c = cfg.classes;
    push(
        &mut params,
        "head.seg.weight".into(),
        ParamGroup::SegHead,
        vec![c, prev, 1, 1],
        kaiming_uniform(&mut rng, prev, c * prev),
    );
    push(
        &mut params,
        "head.seg.bias".into(),
        ParamGroup::SegHead,
        vec![c],
        vec![0.0; c],
    );
    push(
        &mut params,
        "head.eu.weight".into(),
        ParamGroup::EuHead,
        vec![c, prev, 1, 1],
        kaiming_uniform(&mut rng, prev, c * prev),
    );
    push(
        &mut params,
        "head.eu.bias".into(),
        ParamGroup::EuHead,
        vec![c],
        vec![0.0; c],
    );

    Ok(ParameterSet::from_parameters(cfg.clone(), params))
}

impl ParameterSet {
    pub fn from_parameters(cfg: NetworkConfig, params: Vec<Parameter>) -> Self {
        let index = params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
        ParameterSet { cfg, params, index }
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn names_in_group(&self, group: ParamGroup) -> Vec<String> {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.name.clone())
            .collect()
    }

    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn snapshot_group(&self, group: ParamGroup) -> GroupSnapshot {
        GroupSnapshot {
            entries: self
                .params
                .iter()
                .filter(|p| p.group == group)
                .map(|p| (p.name.clone(), p.data.clone()))
                .collect(),
        }
    }

    /// Overwrite one group's data from a snapshot taken off a compatible set.
    pub fn install_group(&mut self, group: ParamGroup, snap: &GroupSnapshot) -> Result<()> {
        for (name, data) in &snap.entries {
            let p = self
                .get_mut(name)
                .ok_or_else(|| Error::Protocol(format!("unknown parameter `{name}`")))?;
            if p.group != group {
                return Err(Error::Protocol(format!(
                    "parameter `{name}` is not in the target group"
                )));
            }
            if p.data.len() != data.len() {
                return Err(Error::shape(format!(
                    "length mismatch installing `{name}`: {} vs {}",
                    p.data.len(),
                    data.len()
                )));
            }
            p.data.copy_from_slice(data);
        }
        Ok(())
    }

    /// Copy the data of every parameter in `group` from `source`.
    pub fn adopt_group(&mut self, source: &ParameterSet, group: ParamGroup) -> Result<()> {
        for i in 0..self.params.len() {
            if self.params[i].group != group {
                continue;
            }
            let name = self.params[i].name.clone();
            let src = source.get(&name).ok_or_else(|| {
                Error::Protocol(format!("source set is missing parameter `{name}`"))
            })?;
            if src.shape != self.params[i].shape {
                return Err(Error::Protocol(format!(
                    "shape mismatch adopting `{name}`: {:?} vs {:?}",
                    src.shape, self.params[i].shape
                )));
            }
            self.params[i].data.copy_from_slice(&src.data);
        }
        Ok(())
    }

    /// Parameter names updated by one branch of the combined loss: the seg
    /// branch never touches the EU head, the eu branch never touches the seg
    /// head, and neither touches the frozen encoder.
    pub fn trainable_subset(&self, kind: LossKind) -> Vec<String> {
        let excluded = match kind {
            LossKind::Seg => ParamGroup::EuHead,
            LossKind::Eu => ParamGroup::SegHead,
        };
        self.params
            .iter()
            .filter(|p| p.group != ParamGroup::Frozen && p.group != excluded)
            .map(|p| p.name.clone())
            .collect()
    }

    fn tensor_for(
        &self,
        name: &str,
        opts: &ForwardOpts,
        leaves: &mut HashMap<String, Tensor>,
    ) -> Result<Tensor> {
        let p = self
            .get(name)
            .ok_or_else(|| Error::Protocol(format!("missing parameter `{name}`")))?;
        match opts.tape {
            Some(tape) if opts.trainable.includes(p.group) => {
                let t = tape.leaf(&p.shape, p.data.clone())?;
                leaves.insert(name.to_string(), t.clone());
                Ok(t)
            }
            _ => Tensor::from_vec(&p.shape, p.data.clone()),
        }
    }

    fn conv_layer(
        &self,
        prefix: &str,
        x: &Tensor,
        stride: usize,
        padding: usize,
        opts: &ForwardOpts,
        leaves: &mut HashMap<String, Tensor>,
    ) -> Result<Tensor> {
        let w = self.tensor_for(&format!("{prefix}.weight"), opts, leaves)?;
        let b = self.tensor_for(&format!("{prefix}.bias"), opts, leaves)?;
        let c_out = w.shape()[0];
        let y = named(prefix, x.conv2d(&w, stride, padding))?;
        named(prefix, y.add(&b.reshape(&[1, c_out, 1, 1])?))
    }

    fn cfe_tensors(
        &self,
        opts: &ForwardOpts,
        leaves: &mut HashMap<String, Tensor>,
    ) -> Result<CfeTensors> {
        Ok(CfeTensors {
            embed_fc1_w: self.tensor_for("cfe.embed.fc1.weight", opts, leaves)?,
            embed_fc1_b: self.tensor_for("cfe.embed.fc1.bias", opts, leaves)?,
            embed_fc2_w: self.tensor_for("cfe.embed.fc2.weight", opts, leaves)?,
            embed_fc2_b: self.tensor_for("cfe.embed.fc2.bias", opts, leaves)?,
            gate_embed_w: self.tensor_for("cfe.gate.embed.weight", opts, leaves)?,
            gate_embed_b: self.tensor_for("cfe.gate.embed.bias", opts, leaves)?,
            gate_desc_w: self.tensor_for("cfe.gate.desc.weight", opts, leaves)?,
            gate_desc_b: self.tensor_for("cfe.gate.desc.bias", opts, leaves)?,
        })
    }

    /// Inference-mode forward; see [`ParameterSet::forward_with`].
    pub fn forward(&self, batch: &Tensor, client_embedding: &Tensor) -> Result<ForwardOutput> {
        self.forward_with(batch, client_embedding, &ForwardOpts::inference())
    }

    /// Run the network: frozen encoder stages with adapter residuals, client
    /// gate at the configured stage, skip-connected decoder, two 1x1 heads.
    ///
    /// Returns unbounded seg logits and non-negative evidence, both shaped
    /// `[B, classes, H, W]`.
    pub fn forward_with(
        &self,
        batch: &Tensor,
        client_embedding: &Tensor,
        opts: &ForwardOpts,
    ) -> Result<ForwardOutput> {
        let cfg = &self.cfg;
        let want = [
            batch.shape().first().copied().unwrap_or(0),
            cfg.in_channels,
            cfg.height,
            cfg.width,
        ];
        if batch.shape() != want {
            return Err(Error::shape(format!(
                "batch shape {:?} does not match configured {:?}",
                batch.shape(),
                want
            )));
        }
        if client_embedding.shape() != [cfg.clients] {
            return Err(Error::shape(format!(
                "client embedding shape {:?}, want [{}]",
                client_embedding.shape(),
                cfg.clients
            )));
        }
        let mut leaves = HashMap::new();
        let stages = cfg.stages();

        // encoder
        let mut x = batch.clone();
        let mut stage_outputs: Vec<Tensor> = Vec::with_capacity(stages);
        for stage in 1..=stages {
            let label = format!("enc{stage}");
            x = named(&label, self.conv_layer(&label, &x, 2, 1, opts, &mut leaves)?.relu())?;
            // adapter: 1x1 bottleneck residual
            let down = self
                .conv_layer(&format!("adapter{stage}.down"), &x, 1, 0, opts, &mut leaves)?
                .relu()?;
            let up =
                self.conv_layer(&format!("adapter{stage}.up"), &down, 1, 0, opts, &mut leaves)?;
            x = named(&format!("adapter{stage}"), x.add(&up))?;
            if stage == cfg.cfe_stage && !opts.disable_cfe {
                let p = self.cfe_tensors(opts, &mut leaves)?;
                let delta = client_embedding.reshape(&[1, cfg.clients])?;
                let dstar = named("cfe.embed", cfe::expand_embedding(&delta, &p))?;
                let descriptor = named("cfe.gap", x.global_avg_pool())?;
                let attention = named("cfe.gate", cfe::channel_attention(&dstar, &descriptor, &p))?;
                x = named("cfe.apply", cfe::apply_cfe(&x, &attention))?;
            }
            stage_outputs.push(x.clone());
        }

        // decoder
        for (j, _) in cfg.decoder_widths().iter().enumerate() {
            let stage = j + 1;
            let label = format!("dec{stage}");
            x = named(&label, x.upsample_nearest(2))?;
            let main = self.conv_layer(&label, &x, 1, 1, opts, &mut leaves)?;
            let skip = if j < stages - 1 {
                self.conv_layer(
                    &format!("{label}.skip"),
                    &stage_outputs[stages - 2 - j],
                    1,
                    0,
                    opts,
                    &mut leaves,
                )?
            } else {
                self.conv_layer(&format!("{label}.skip"), batch, 1, 1, opts, &mut leaves)?
            };
            x = named(&label, main.add(&skip)?.relu())?;
        }

        let seg_logits = self.conv_layer("head.seg", &x, 1, 0, opts, &mut leaves)?;
        let eu_logits = self.conv_layer("head.eu", &x, 1, 0, opts, &mut leaves)?;
        let evidence = match cfg.evidence_activation {
            EvidenceActivation::Softplus => named("head.eu", eu_logits.softplus())?,
            EvidenceActivation::Exp => named("head.eu", eu_logits.exp())?,
        };

        Ok(ForwardOutput {
            seg_logits,
            evidence,
            leaves,
        })
    }
}

// ── checkpoint container ─────────────────────────────────────────────

const MAGIC: &[u8; 8] = b"FEDEU-PS";
const VERSION: u16 = 1;

/// One entry of the parameter container; `tag` is a [`ParamGroup`] tag or
/// [`PSI_TAG`].
#[derive(Debug, Clone, PartialEq)]
pub struct RawParam {
    pub name: String,
    pub tag: u8,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn write_checkpoint<'a>(
    path: &Path,
    entries: impl IntoIterator<Item = &'a RawParam>,
) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for e in entries {
        let name = e.name.as_bytes();
        if name.len() > u16::MAX as usize {
            return Err(Error::Contract(format!("parameter name too long: {}", e.name)));
        }
        if e.shape.len() > u8::MAX as usize {
            return Err(Error::Contract(format!("rank too large for `{}`", e.name)));
        }
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name);
        buf.push(e.tag);
        buf.push(e.shape.len() as u8);
        for &d in &e.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &e.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, &buf).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<RawParam>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = ByteReader::new(std::io::BufReader::new(file));
    let mut magic = [0u8; 8];
    r.read_exact_at(&mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad magic {:?}", magic),
        });
    }
    let version = r.read_u16("version")?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 8,
            msg: format!("unsupported version {version}"),
        });
    }
    let mut out = Vec::new();
    while !r.at_eof()? {
        let name_len = r.read_u16("name length")? as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact_at(&mut name_buf, "name")?;
        let name = String::from_utf8(name_buf).map_err(|_| Error::Format {
            offset: r.offset,
            msg: "parameter name is not UTF-8".into(),
        })?;
        let tag = r.read_u8("group tag")?;
        if tag > PSI_TAG {
            return Err(Error::Format {
                offset: r.offset - 1,
                msg: format!("unknown group tag {tag} for `{name}`"),
            });
        }
        let rank = r.read_u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.read_u32("dim")? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(f32::from_le_bytes(r.read_array("payload")?));
        }
        out.push(RawParam {
            name,
            tag,
            shape,
            data,
        });
    }
    Ok(out)
}

struct ByteReader<R> {
    inner: R,
    offset: u64,
    pending: Option<u8>,
}

impl<R: Read> ByteReader<R> {
    fn new(inner: R) -> Self {
        ByteReader {
            inner,
            offset: 0,
            pending: None,
        }
    }

    fn read_exact_at(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let mut start = 0;
        if let (Some(b), true) = (self.pending.take(), !buf.is_empty()) {
            buf[0] = b;
            start = 1;
        }
        self.inner
            .read_exact(&mut buf[start..])
            .map_err(|_| Error::Format {
                offset: self.offset,
                msg: format!("truncated while reading {what}"),
            })?;
        self.offset += (buf.len() - start) as u64;
        Ok(())
    }

    fn read_array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.read_exact_at(&mut buf, what)?;
        Ok(buf)
    }

    fn read_u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.read_array::<1>(what)?[0])
    }

    fn read_u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.read_array(what)?))
    }

    fn read_u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.read_array(what)?))
    }

    fn at_eof(&mut self) -> Result<bool> {
        if self.pending.is_some() {
            return Ok(false);
        }
        let mut probe = [0u8; 1];
        match self.inner.read(&mut probe) {
            Ok(0) => Ok(true),
            Ok(_) => {
                self.offset += 1;
                self.pending = Some(probe[0]);
                Ok(false)
            }
            Err(e) => Err(Error::Format {
                offset: self.offset,
                msg: format!("read failed: {e}"),
            }),
        }
    }
}

impl ParameterSet {
    pub fn save(&self, path: &Path) -> Result<()> {
        let raws: Vec<RawParam> = self
            .params
            .iter()
            .map(|p| RawParam {
                name: p.name.clone(),
                tag: p.group.tag(),
                shape: p.shape.clone(),
                data: p.data.clone(),
            })
            .collect();
        write_checkpoint(path, raws.iter())
    }

    /// Rebuild a set from a checkpoint written by [`ParameterSet::save`];
    /// entries with non-group tags (Psi) are rejected here.
    pub fn load(cfg: NetworkConfig, path: &Path) -> Result<ParameterSet> {
        let raws = read_checkpoint(path)?;
        let mut params = Vec::with_capacity(raws.len());
        for raw in raws {
            let group = ParamGroup::from_tag(raw.tag).ok_or_else(|| Error::Format {
                offset: 0,
                msg: format!("entry `{}` is not a network parameter", raw.name),
            })?;
            params.push(Parameter {
                name: raw.name,
                group,
                shape: raw.shape,
                data: raw.data,
            });
        }
        Ok(ParameterSet::from_parameters(cfg, params))
    }
}

#[cfg(test)]
mod tests;
