//! Teacher and student backbones with two poly-modal inductor sites.
//!
//! The student runs `embed -> block_1 .. block_B -> head`. After block `i`
//! at an enabled site the block output `F*` goes through the pseudo-modality
//! generator and the cross-modal induction stack, and the stack's output
//! `F*_M` alone feeds block `i + 1`.

use std::collections::BTreeMap;

use crate::config::{ModalitySource, ModelConfig, SiteSelection};
use crate::data::{ScoreSeries, VideoRecord};
use crate::error::{Error, Result};
use crate::nn::{
    sinusoidal_positions, Bound, Conv1dLayer, Init, LayerNorm, Linear, ParamStore, TransformerBlock,
};
use crate::tensor::{Graph, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunMode {
    /// Runs the frozen teacher alongside and loads modality targets.
    Train,
    Infer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardOptions {
    pub mode: RunMode,
    pub source: ModalitySource,
    pub sites: SiteSelection,
}

impl ForwardOptions {
    pub fn train(source: ModalitySource, sites: SiteSelection) -> Self {
        Self {
            mode: RunMode::Train,
            source,
            sites,
        }
    }

    pub fn infer(source: ModalitySource, sites: SiteSelection) -> Self {
        Self {
            mode: RunMode::Infer,
            source,
            sites,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SiteKind {
    Early,
    Late,
}

impl SiteKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SiteKind::Early => "early",
            SiteKind::Late => "late",
        }
    }

    fn enabled(self, sel: SiteSelection) -> bool {
        match self {
            SiteKind::Early => sel.early(),
            SiteKind::Late => sel.late(),
        }
    }
}

/// Embedding, transformer blocks and a one-logit head.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub embed: Linear,
    pub blocks: Vec<TransformerBlock>,
    pub head: Linear,
}

impl Backbone {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        cfg: &ModelConfig,
        prefix: &str,
    ) -> Result<Self> {
        let h = cfg.hidden_dim;
        let embed = Linear::new(store, init, &format!("{prefix}.embed"), cfg.input_dim, h)?;
        let blocks = (0..cfg.blocks)
            .map(|b| {
                TransformerBlock::new(
                    store,
                    init,
                    &format!("{prefix}.block{b}"),
                    h,
                    cfg.heads,
                    cfg.ffn_mult,
                )
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let head = Linear::new(store, init, &format!("{prefix}.head"), h, 1)?;
        Ok(Self {
            embed,
            blocks,
            head,
        })
    }

    /// Snippet logits `[T, 1]` to `[T]`.
    fn logits(&self, g: &mut Graph, p: &Bound, h: Var) -> Result<Var, TensorError> {
        let t = g.shape(h)[0];
        let l = self.head.forward(g, p, h)?;
        g.reshape(l, vec![t])
    }

    /// Every block output plus the logits, with no injection.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
    ) -> Result<(Vec<Var>, Var), TensorError> {
        let mut h = self.embed.forward(g, p, x)?;
        let mut features = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            h = block.forward(g, p, h)?;
            features.push(h);
        }
        let logits = self.logits(g, p, h)?;
        Ok((features, logits))
    }
}

/// Pseudo-modality generator: one shared encoder, then a translator and a
/// decoder per modality.
#[derive(Clone, Debug)]
pub struct Pmg {
    pub norm: LayerNorm,
    pub encoder: Conv1dLayer,
    pub translators: Vec<Linear>,
    pub decoders: Vec<Conv1dLayer>,
    pub names: Vec<String>,
}

impl Pmg {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        cfg: &ModelConfig,
        prefix: &str,
    ) -> Result<Self> {
        let l = cfg.latent_dim;
        let k = cfg.pmg_kernel;
        let norm = LayerNorm::new(store, &format!("{prefix}.norm"), cfg.hidden_dim)?;
        let encoder = Conv1dLayer::new(
            store,
            init,
            &format!("{prefix}.encoder"),
            k,
            cfg.hidden_dim,
            l,
        )?;
        let mut translators = Vec::new();
        let mut decoders = Vec::new();
        for m in &cfg.modalities {
            translators.push(Linear::new(
                store,
                init,
                &format!("{prefix}.translator.{}", m.name),
                l,
                l,
            )?);
            decoders.push(Conv1dLayer::new(
                store,
                init,
                &format!("{prefix}.decoder.{}", m.name),
                k,
                l,
                m.dim,
            )?);
        }
        Ok(Self {
            norm,
            encoder,
            translators,
            decoders,
            names: cfg.modality_names(),
        })
    }

    /// Shared latent `gelu(conv(LN(F*)))`.
    pub fn encode(&self, g: &mut Graph, p: &Bound, f_star: Var) -> Result<Var, TensorError> {
        let n = self.norm.forward(g, p, f_star)?;
        let z = self.encoder.forward(g, p, n)?;
        g.gelu(z)
    }

    /// Decodes one named modality from the shared latent.
    pub fn decode(&self, g: &mut Graph, p: &Bound, latent: Var, name: &str) -> Result<Var> {
        let j = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Config(format!("modality `{name}` is not configured")))?;
        let r = self.translators[j].forward(g, p, latent)?;
        Ok(self.decoders[j].forward(g, p, r)?)
    }

    /// All pseudo-modalities, in configured order.
    pub fn forward(&self, g: &mut Graph, p: &Bound, f_star: Var) -> Result<Vec<Var>> {
        let latent = self.encode(g, p, f_star)?;
        self.names
            .iter()
            .map(|n| self.decode(g, p, latent, n))
            .collect()
    }
}

/// Cross-modal induction: align every stream to width H, fuse, then a
/// transformer stack with `F*` added between blocks.
#[derive(Clone, Debug)]
pub struct Cmi {
    pub align: Vec<Linear>,
    pub fusion: Linear,
    pub blocks: Vec<TransformerBlock>,
    pub positional_encoding: bool,
}

impl Cmi {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        cfg: &ModelConfig,
        prefix: &str,
    ) -> Result<Self> {
        let h = cfg.hidden_dim;
        let align = cfg
            .modalities
            .iter()
            .map(|m| Linear::new(store, init, &format!("{prefix}.align.{}", m.name), m.dim, h))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let n = cfg.modalities.len();
        let fusion = Linear::new(store, init, &format!("{prefix}.fusion"), n * h, h)?;
        let blocks = (0..cfg.cmi_blocks)
            .map(|b| {
                TransformerBlock::new(
                    store,
                    init,
                    &format!("{prefix}.block{b}"),
                    h,
                    cfg.heads,
                    cfg.ffn_mult,
                )
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Self {
            align,
            fusion,
            blocks,
            positional_encoding: cfg.positional_encoding,
        })
    }

    /// Returns `(F*_M, aligned streams)`.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        streams: &[Var],
        f_star: Var,
    ) -> Result<(Var, Vec<Var>)> {
        if streams.len() != self.align.len() {
            return Err(Error::Config(format!(
                "induction stack expects {} streams, got {}",
                self.align.len(),
                streams.len()
            )));
        }
        let aligned = self
            .align
            .iter()
            .zip(streams)
            .map(|(a, &m)| a.forward(g, p, m))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let cat = if aligned.len() == 1 {
            aligned[0]
        } else {
            g.concat(&aligned)?
        };
        let mut x = self.fusion.forward(g, p, cat)?;
        if self.positional_encoding {
            let (t, h) = g.value(x).dims2()?;
            let pe = g.constant(sinusoidal_positions(t, h));
            x = g.add(x, pe)?;
        }
        let last = self.blocks.len() - 1;
        for (b, block) in self.blocks.iter().enumerate() {
            x = block.forward(g, p, x)?;
            if b < last {
                x = g.add(x, f_star)?;
            }
        }
        Ok((x, aligned))
    }
}

#[derive(Clone, Debug)]
pub struct PiSite {
    pub kind: SiteKind,
    /// 1-based block whose output the site reads.
    pub block: usize,
    pub pmg: Pmg,
    pub cmi: Cmi,
}

/// The frozen RGB-only model: the same backbone trained with MIL alone.
#[derive(Clone, Debug)]
pub struct Teacher {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
}

impl Teacher {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let backbone = Backbone::new(&mut store, &mut init, config, "backbone")?;
        Ok(Self {
            config: config.clone(),
            store,
            backbone,
        })
    }

    pub fn infer(&self, video: &VideoRecord) -> Result<ScoreSeries> {
        video.check_dims(&self.config, false)?;
        let mut g = Graph::new();
        let p = Bound::new(&mut g, &self.store, false);
        let x = g.constant(video.rgb.clone());
        let (_, logits) = self.backbone.forward(&mut g, &p, x)?;
        let s = g.sigmoid(logits)?;
        Ok(ScoreSeries {
            video_id: video.video_id.clone(),
            scores: g.value(s).data().to_vec(),
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StageFlags {
    pub warmed: bool,
    pub trained: bool,
}

/// Graph handles for one site of one forward pass.
#[derive(Clone, Debug)]
pub struct SiteVars {
    pub kind: SiteKind,
    pub block: usize,
    pub f_star: Var,
    pub pseudo: Vec<Var>,
    pub aligned: Vec<Var>,
    pub fused: Var,
    /// Teacher block output at the same depth (train mode).
    pub teacher: Option<Var>,
}

/// Graph handles for one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub block_features: Vec<Var>,
    pub sites: Vec<SiteVars>,
    /// Real modality embeddings as constants, in configured order (train
    /// mode or real source).
    pub targets: Option<Vec<Var>>,
    pub logits: Var,
    pub scores: Var,
}

#[derive(Clone, Debug)]
pub struct SiteTrace {
    pub kind: SiteKind,
    pub block: usize,
    pub f_star: Tensor,
    pub pseudo: BTreeMap<String, Tensor>,
    pub aligned: BTreeMap<String, Tensor>,
    pub fused: Tensor,
    pub teacher: Option<Tensor>,
    /// `[T, N]` normalized modality activations.
    pub activation_table: Tensor,
    /// Column means of the activation table.
    pub activations: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub block_features: Vec<Tensor>,
    pub sites: Vec<SiteTrace>,
    pub logits: Vec<f64>,
    pub scores: Vec<f64>,
}

/// Per snippet, the row norms of the aligned streams L2-normalized across
/// modalities (all zero if every norm is zero). Returns `[T, N]`.
pub fn activation_table(aligned: &[Tensor]) -> Tensor {
    let t = aligned[0].shape()[0];
    let n = aligned.len();
    let mut data = Vec::with_capacity(t * n);
    for r in 0..t {
        let norms: Vec<f64> = aligned
            .iter()
            .map(|a| a.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let total = norms.iter().map(|v| v * v).sum::<f64>().sqrt();
        data.extend(
            norms
                .iter()
                .map(|v| if total > 0.0 { v / total } else { 0.0 }),
        );
    }
    Tensor::new(vec![t, n], data).expect("positive dims")
}

pub fn column_means(table: &Tensor) -> Vec<f64> {
    let (t, n) = table.dims2().expect("matrix");
    (0..n)
        .map(|j| (0..t).map(|r| table.get2(r, j)).sum::<f64>() / t as f64)
        .collect()
}

/// Parameter counts per named component.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub components: Vec<(String, usize)>,
    pub student_total: usize,
    pub teacher_total: usize,
}

#[derive(Clone, Debug)]
pub struct PiVadModel {
    pub config: ModelConfig,
    pub student: ParamStore,
    pub backbone: Backbone,
    pub sites: Vec<PiSite>,
    pub teacher: Option<Teacher>,
    pub flags: StageFlags,
}

impl PiVadModel {
    /// A randomly initialized student with no teacher attached.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        // offset so a teacher and student built from one seed differ
        let mut init = Init::new(seed ^ 0x5eed_5eed_5eed_5eed);
        let backbone = Backbone::new(&mut store, &mut init, config, "backbone")?;
        let mut sites = Vec::new();
        for (kind, block) in [
            (SiteKind::Early, config.early_site),
            (SiteKind::Late, config.late_site),
        ] {
            let prefix = format!("pi.{}", kind.as_str());
            sites.push(PiSite {
                kind,
                block,
                pmg: Pmg::new(&mut store, &mut init, config, &format!("{prefix}.pmg"))?,
                cmi: Cmi::new(&mut store, &mut init, config, &format!("{prefix}.cmi"))?,
            });
        }
        Ok(Self {
            config: config.clone(),
            student: store,
            backbone,
            sites,
            teacher: None,
            flags: StageFlags::default(),
        })
    }

    pub fn with_teacher(mut self, teacher: Teacher) -> Result<Self> {
        self.set_teacher(teacher)?;
        Ok(self)
    }

    pub fn set_teacher(&mut self, teacher: Teacher) -> Result<()> {
        if teacher.config != self.config {
            return Err(Error::Config(
                "teacher and student architectures differ".into(),
            ));
        }
        self.teacher = Some(teacher);
        Ok(())
    }

    fn site_for_block(&self, block: usize, sel: SiteSelection) -> Option<&PiSite> {
        self.sites
            .iter()
            .find(|s| s.block == block && s.kind.enabled(sel))
    }

    fn modality_constants(&self, g: &mut Graph, video: &VideoRecord) -> Result<Vec<Var>> {
        video.check_dims(&self.config, true)?;
        Ok(self
            .config
            .modalities
            .iter()
            .map(|m| g.constant(video.modalities[&m.name].clone()))
            .collect())
    }

    /// Builds one forward pass into `g`. `student` must be bound from
    /// `self.student`; the teacher is always entered as constants.
    pub fn forward(
        &self,
        g: &mut Graph,
        student: &Bound,
        video: &VideoRecord,
        opts: ForwardOptions,
    ) -> Result<ForwardVars> {
        video.check_dims(&self.config, false)?;
        let needs_targets = opts.mode == RunMode::Train || opts.source == ModalitySource::Real;
        let targets = if needs_targets {
            Some(self.modality_constants(g, video)?)
        } else {
            None
        };
        let x = g.constant(video.rgb.clone());
        let teacher_features = match opts.mode {
            RunMode::Train => {
                let teacher = self.teacher.as_ref().ok_or(Error::MissingTeacher)?;
                let tp = Bound::new(g, &teacher.store, false);
                let mut h = teacher.backbone.embed.forward(g, &tp, x)?;
                let mut feats = Vec::new();
                // blocks after the late site never feed a loss
                for block in &teacher.backbone.blocks[..self.config.late_site] {
                    h = block.forward(g, &tp, h)?;
                    feats.push(h);
                }
                Some(feats)
            }
            RunMode::Infer => None,
        };

        let mut h = self.backbone.embed.forward(g, student, x)?;
        let mut block_features = Vec::with_capacity(self.backbone.blocks.len());
        let mut sites = Vec::new();
        for (b, block) in self.backbone.blocks.iter().enumerate() {
            h = block.forward(g, student, h)?;
            block_features.push(h);
            let Some(site) = self.site_for_block(b + 1, opts.sites) else {
                continue;
            };
            let f_star = h;
            let pseudo = site.pmg.forward(g, student, f_star)?;
            let streams = match opts.source {
                ModalitySource::Pseudo => pseudo.clone(),
                ModalitySource::Real => targets.clone().expect("loaded for real source"),
            };
            let (fused, aligned) = site.cmi.forward(g, student, &streams, f_star)?;
            sites.push(SiteVars {
                kind: site.kind,
                block: site.block,
                f_star,
                pseudo,
                aligned,
                fused,
                teacher: teacher_features.as_ref().map(|f| f[site.block - 1]),
            });
            h = fused;
        }
        let logits = self.backbone.logits(g, student, h)?;
        let scores = g.sigmoid(logits)?;
        Ok(ForwardVars {
            block_features,
            sites,
            targets,
            logits,
            scores,
        })
    }

    pub fn trace(&self, g: &Graph, vars: &ForwardVars) -> ForwardTrace {
        let names = self.config.modality_names();
        let named = |vs: &[Var]| -> BTreeMap<String, Tensor> {
            names
                .iter()
                .cloned()
                .zip(vs.iter().map(|&v| g.value(v).clone()))
                .collect()
        };
        let sites = vars
            .sites
            .iter()
            .map(|s| {
                let aligned: Vec<Tensor> = s.aligned.iter().map(|&v| g.value(v).clone()).collect();
                let table = activation_table(&aligned);
                SiteTrace {
                    kind: s.kind,
                    block: s.block,
                    f_star: g.value(s.f_star).clone(),
                    pseudo: named(&s.pseudo),
                    aligned: named(&s.aligned),
                    fused: g.value(s.fused).clone(),
                    teacher: s.teacher.map(|t| g.value(t).clone()),
                    activations: column_means(&table),
                    activation_table: table,
                }
            })
            .collect();
        ForwardTrace {
            block_features: vars
                .block_features
                .iter()
                .map(|&v| g.value(v).clone())
                .collect(),
            sites,
            logits: g.value(vars.logits).data().to_vec(),
            scores: g.value(vars.scores).data().to_vec(),
        }
    }

    /// Forward pass on frozen parameters, returning the full trace.
    pub fn run(&self, video: &VideoRecord, opts: ForwardOptions) -> Result<ForwardTrace> {
        let mut g = Graph::new();
        let p = Bound::new(&mut g, &self.student, false);
        let vars = self.forward(&mut g, &p, video, opts)?;
        Ok(self.trace(&g, &vars))
    }

    pub fn infer(
        &self,
        video: &VideoRecord,
        source: ModalitySource,
        sites: SiteSelection,
    ) -> Result<ScoreSeries> {
        let trace = self.run(video, ForwardOptions::infer(source, sites))?;
        Ok(ScoreSeries {
            video_id: video.video_id.clone(),
            scores: trace.scores,
        })
    }

    pub fn param_count(&self) -> ParamCount {
        let mut components = vec![
            (
                "backbone.embed".to_string(),
                self.backbone.embed.param_count(),
            ),
            (
                "backbone.blocks".to_string(),
                self.student.numel_with_prefix("backbone.block"),
            ),
            (
                "backbone.head".to_string(),
                self.backbone.head.param_count(),
            ),
        ];
        for s in &self.sites {
            let p = format!("pi.{}", s.kind.as_str());
            for part in ["pmg", "cmi.align", "cmi.fusion", "cmi.block"] {
                let prefix = format!("{p}.{part}");
                components.push((prefix.clone(), self.student.numel_with_prefix(&prefix)));
            }
        }
        let teacher_total = match &self.teacher {
            Some(t) => t.store.numel(),
            None => self.student.numel_with_prefix("backbone."),
        };
        ParamCount {
            student_total: components.iter().map(|(_, n)| n).sum(),
            components,
            teacher_total,
        }
    }
}
