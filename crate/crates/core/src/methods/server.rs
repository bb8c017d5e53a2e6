use crate::data::substream;
use crate::error::{invalid, Result};
use crate::modelzoo::{Binding, ModelGroup, ModelInstance};
use crate::numcore::{seeded_rng, sgd_step, SgdConfig, SgdState, Tape, Tensor};

use super::carrier::{aggregate_weighted, Carrier, ClassVectors, GlobalKnowledge, KnowledgePacket, SvdEntry};
use super::generator::Generator;
use super::{purpose, MethodConfig, MethodKind};

/// Stream id reserved for the server.
const SERVER_ID: u64 = u64::MAX;

/// Server-side state: stateless for most methods, persistent generator
/// (FedGen), head (FedGH) or prototypes (FedTGP) otherwise.
#[derive(Debug, Clone)]
pub struct Server {
    cfg: MethodConfig,
    seed: u64,
    head_template: Option<ModelInstance>,
    generator: Option<Generator>,
    gen_opt: SgdState,
    gh_head: Option<Vec<Tensor>>,
    gh_opt: SgdState,
    tgp: Option<ClassVectors>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TgpReport {
    pub skipped: bool,
    pub margin: f32,
    pub first_loss: f32,
    pub last_loss: f32,
}

impl Server {
    pub fn new(cfg: &MethodConfig, group: &ModelGroup, seed: u64) -> Result<Self> {
        cfg.validate()?;
        cfg.method.check_group(group)?;
        let spec = group
            .specs
            .first()
            .ok_or_else(|| invalid(format!("model group `{}` is empty", group.name)))?;
        let mut server = Self {
            cfg: cfg.clone(),
            seed,
            head_template: None,
            generator: None,
            gen_opt: SgdState::new(),
            gh_head: None,
            gh_opt: SgdState::new(),
            tgp: None,
        };
        match cfg.method {
            MethodKind::FedGen => {
                let mut rng = seeded_rng(substream(seed, SERVER_ID, 0, purpose::AUX_INIT));
                server.generator = Some(Generator::new(cfg.noise_dim, spec.num_classes, spec.feature_dim, &mut rng)?);
                server.head_template = Some(ModelInstance::build(spec, 0)?);
            }
            MethodKind::FedGh => {
                let t = ModelInstance::build(spec, substream(seed, SERVER_ID, 0, purpose::MODEL_INIT))?;
                server.gh_head = Some(t.clone_part(crate::modelzoo::Part::Head));
                server.head_template = Some(t);
            }
            _ => {}
        }
        Ok(server)
    }

    pub fn method(&self) -> MethodKind {
        self.cfg.method
    }

    pub fn generator(&self) -> Option<&Generator> {
        self.generator.as_ref()
    }

    pub fn prototypes(&self) -> Option<&ClassVectors> {
        self.tgp.as_ref()
    }

    fn server_sgd(&self) -> SgdConfig {
        SgdConfig {
            learning_rate: self.cfg.server_lr as f32,
            ..Default::default()
        }
    }

    /// Folds round-`round` packets into `S_g`. Packets must be sorted by
    /// sender so the result does not depend on scheduling.
    pub fn aggregate(&mut self, round: u64, packets: &[KnowledgePacket]) -> Result<GlobalKnowledge> {
        let kind = self.cfg.method;
        if kind == MethodKind::Local || packets.is_empty() {
            return Ok(GlobalKnowledge::default());
        }
        let weighting = self.cfg.class_weighting;
        let mut rng = seeded_rng(substream(self.seed, SERVER_ID, round, purpose::SERVER));
        let sgd = self.server_sgd();
        match kind {
            MethodKind::Local => unreachable!(),
            MethodKind::LgFedAvg | MethodKind::Fml | MethodKind::FedMrl | MethodKind::Fd | MethodKind::FedProto => {
                Ok(GlobalKnowledge::single(aggregate_weighted(packets, weighting)?))
            }
            MethodKind::FedKd => {
                let mean = aggregate_weighted(packets, weighting)?;
                let tensors = mean.tensors().ok_or_else(|| invalid("fedkd expects parameter tensors"))?;
                let entries = tensors
                    .iter()
                    .map(|t| SvdEntry::encode(t, self.cfg.svd_energy))
                    .collect::<Result<_>>()?;
                Ok(GlobalKnowledge::single(Carrier::Svd(entries)))
            }
            MethodKind::FedGen => {
                let head = aggregate_weighted(packets, weighting)?;
                let template = self.head_template.as_ref().expect("fedgen template");
                let gen = self.generator.as_mut().expect("fedgen generator");
                let total: f64 = packets.iter().map(|p| p.train_size as f64).sum();
                let heads: Vec<(&[Tensor], f32)> = packets
                    .iter()
                    .map(|p| {
                        let t = p.carrier.tensors().ok_or_else(|| invalid("fedgen expects head uploads"))?;
                        Ok((t, (p.train_size as f64 / total.max(1.0)) as f32))
                    })
                    .collect::<Result<_>>()?;
                let job = GeneratorJob {
                    steps: self.cfg.server_epochs,
                    batch: self.cfg.generator_batch,
                    sgd: &sgd,
                };
                fedgen_train_generator(template, gen, &heads, &job, &mut self.gen_opt, &mut rng)?;
                let gen_params = gen.params.iter().map(Tensor::detached).collect();
                Ok(GlobalKnowledge {
                    carriers: vec![head, Carrier::GeneratorParams(gen_params)],
                })
            }
            MethodKind::FedGh => {
                let pairs = collect_pairs(packets)?;
                let template = self.head_template.as_ref().expect("fedgh template");
                let head = self.gh_head.as_mut().expect("fedgh head");
                fedgh_train_head(template, head, &pairs, self.cfg.server_epochs, &sgd, &mut self.gh_opt)?;
                Ok(GlobalKnowledge::single(Carrier::HeadParams(
                    head.iter().map(Tensor::detached).collect(),
                )))
            }
            MethodKind::FedTgp => {
                let mean = aggregate_weighted(packets, weighting)?;
                let mean = mean.class_vectors().expect("prototype carrier");
                let t = self.tgp.get_or_insert_with(|| ClassVectors::new(mean.dim));
                for (&c, e) in &mean.classes {
                    match t.classes.get_mut(&c) {
                        Some(slot) => slot.count = e.count,
                        None => t.insert(c, e.vector.clone(), e.count),
                    }
                }
                let pairs = collect_pairs(packets)?;
                let plain: Vec<(usize, &[f32])> = pairs.iter().map(|(c, v, _)| (*c, *v)).collect();
                fedtgp_refine(t, &plain, self.cfg.server_epochs, self.cfg.server_lr as f32, self.cfg.margin_cap as f32)?;
                Ok(GlobalKnowledge::single(Carrier::Prototypes(t.clone())))
            }
        }
    }
}

pub struct GeneratorJob<'a> {
    pub steps: usize,
    pub batch: usize,
    pub sgd: &'a SgdConfig,
}

/// Trains `gen` against frozen client heads weighted by `k_i/k`; returns the
/// loss before each step.
pub fn fedgen_train_generator<R: rand::Rng>(
    template: &ModelInstance,
    gen: &mut Generator,
    heads: &[(&[Tensor], f32)],
    job: &GeneratorJob<'_>,
    opt: &mut SgdState,
    rng: &mut R,
) -> Result<Vec<f32>> {
    if heads.is_empty() {
        return Ok(Vec::new());
    }
    let mut losses = Vec::with_capacity(job.steps);
    for _ in 0..job.steps {
        let mut tape = Tape::new();
        let gv = gen.bind(&mut tape, true)?;
        let (inputs, y) = gen.sample_inputs(job.batch, rng);
        let feats = gen.forward(&mut tape, &gv, &inputs, job.batch)?;
        let mut loss = None;
        for (h, w) in heads {
            let b = template.bind_head_from(&mut tape, h, Binding::Frozen)?;
            let z = template.head(&mut tape, &b, feats)?;
            let ce = tape.cross_entropy(z, &y)?;
            let term = tape.scale(ce, *w);
            loss = Some(match loss {
                None => term,
                Some(l) => tape.add(l, term)?,
            });
        }
        let loss = loss.expect("at least one head");
        losses.push(tape.scalar(loss));
        tape.backward(loss)?;
        for (p, v) in gen.params.iter_mut().zip(&gv) {
            if let Some(g) = tape.grad(*v) {
                p.accumulate_grad(g)?;
            }
        }
        let mut params: Vec<&mut Tensor> = gen.params.iter_mut().collect();
        sgd_step(&mut params, job.sgd, opt);
    }
    Ok(losses)
}

fn collect_pairs(packets: &[KnowledgePacket]) -> Result<Vec<(usize, &[f32], usize)>> {
    let mut out = Vec::new();
    for p in packets {
        let cv = p
            .carrier
            .class_vectors()
            .ok_or_else(|| invalid("expected prototype uploads"))?;
        for (&c, e) in &cv.classes {
            out.push((c, e.vector.as_slice(), e.count));
        }
    }
    Ok(out)
}

/// Trains `head` on `(class, prototype, count)` pairs with count-weighted
/// cross-entropy, `steps` full-batch SGD steps.
pub fn fedgh_train_head(
    template: &ModelInstance,
    head: &mut [Tensor],
    pairs: &[(usize, &[f32], usize)],
    steps: usize,
    sgd: &SgdConfig,
    opt: &mut SgdState,
) -> Result<()> {
    if pairs.is_empty() {
        return Ok(());
    }
    let k = template.spec().feature_dim;
    let mut x = Vec::with_capacity(pairs.len() * k);
    for (_, v, _) in pairs {
        if v.len() != k {
            return Err(invalid(format!("prototype length {} differs from K = {k}", v.len())));
        }
        x.extend_from_slice(v);
    }
    let labels: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let weights: Vec<f32> = pairs.iter().map(|p| p.2 as f32).collect();
    for _ in 0..steps {
        let mut tape = Tape::new();
        let b = template.bind_head_from(&mut tape, head, Binding::Train)?;
        let xv = tape.constant(vec![pairs.len(), k], x.clone())?;
        let z = template.head(&mut tape, &b, xv)?;
        let loss = tape.weighted_cross_entropy(z, &labels, &weights)?;
        tape.backward(loss)?;
        for (t, g) in head.iter_mut().zip(template.head_grads(&tape, &b)) {
            if let Some(g) = g {
                t.accumulate_grad(&g)?;
            }
        }
        let mut params: Vec<&mut Tensor> = head.iter_mut().collect();
        sgd_step(&mut params, sgd, opt);
    }
    Ok(())
}

/// Refines the global prototypes `t` against client prototypes with the
/// adaptive-margin contrastive objective. Scores are negative Euclidean
/// distances with the margin added to the true-class distance.
pub fn fedtgp_refine(t: &mut ClassVectors, pairs: &[(usize, &[f32])], steps: usize, lr: f32, margin_cap: f32) -> Result<TgpReport> {
    let classes: Vec<usize> = t.classes.keys().copied().collect();
    if classes.len() < 2 || pairs.is_empty() {
        return Ok(TgpReport {
            skipped: true,
            ..Default::default()
        });
    }
    let (dim, nc, n) = (t.dim, classes.len(), pairs.len());
    let mut proto: Vec<f32> = classes.iter().flat_map(|c| t.classes[c].vector.clone()).collect();
    let mut x = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for (c, v) in pairs {
        let pos = classes
            .binary_search(c)
            .map_err(|_| invalid(format!("class {c} has no global prototype")))?;
        if v.len() != dim {
            return Err(invalid("prototype length mismatch"));
        }
        x.extend_from_slice(v);
        labels.push(pos);
    }
    let mut report = TgpReport::default();
    for s in 0..steps {
        let margin = min_pairwise(&proto, nc, dim).min(margin_cap);
        let mut onehot = vec![0.0f32; n * nc];
        for (r, &y) in labels.iter().enumerate() {
            onehot[r * nc + y] = margin;
        }
        let mut tape = Tape::new();
        let p = tape.constant(vec![n, dim], x.clone())?;
        let tv = tape.param(vec![nc, dim], proto.clone())?;
        let d = tape.pairwise_distance(p, tv)?;
        let m = tape.constant(vec![n, nc], onehot)?;
        let d = tape.add(d, m)?;
        let scores = tape.scale(d, -1.0);
        let loss = tape.cross_entropy(scores, &labels)?;
        let lv = tape.scalar(loss);
        if s == 0 {
            report.first_loss = lv;
        }
        report.last_loss = lv;
        report.margin = margin;
        tape.backward(loss)?;
        if let Some(g) = tape.grad(tv) {
            for (w, gv) in proto.iter_mut().zip(g) {
                *w -= lr * gv;
            }
        }
    }
    for (i, c) in classes.iter().enumerate() {
        let slot = t.classes.get_mut(c).expect("class listed");
        slot.vector.copy_from_slice(&proto[i * dim..(i + 1) * dim]);
    }
    Ok(report)
}

fn min_pairwise(m: &[f32], rows: usize, dim: usize) -> f32 {
    let mut best = f64::INFINITY;
    for a in 0..rows {
        for b in a + 1..rows {
            let d: f64 = (0..dim)
                .map(|j| (m[a * dim + j] as f64 - m[b * dim + j] as f64).powi(2))
                .sum::<f64>()
                .sqrt();
            best = best.min(d);
        }
    }
    best as f32
}
