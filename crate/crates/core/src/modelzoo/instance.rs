use crate::error::{invalid, HtflError, Result};
use crate::numcore::{kaiming_uniform, seeded_rng, Tape, Tensor, Var};

use super::spec::{Layout, ModelSpec, Part, Stage};

#[derive(Debug, Clone, PartialEq)]
pub struct NamedParam {
    pub name: String,
    pub part: Part,
    pub tensor: Tensor,
}

/// How a parameter enters a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binding {
    Skip,
    Frozen,
    Train,
}

/// Tape handles of a model's parameters; `None` for skipped ones.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Option<Var>>,
}

impl Bound {
    /// Tape handle per parameter, `None` where the slot was skipped.
    pub fn vars(&self) -> &[Option<Var>] {
        &self.vars
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelInstance {
    spec: ModelSpec,
    layout: Layout,
    params: Vec<NamedParam>,
}

impl ModelInstance {
    /// Kaiming-uniform weights and zero biases drawn from `seed`.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        let layout = spec.layout()?;
        let mut rng = seeded_rng(seed);
        let params = layout
            .params
            .iter()
            .map(|(name, part, shape, fan_in)| {
                let n: usize = shape.iter().product();
                let data = if *fan_in == 0 {
                    vec![0.0; n]
                } else {
                    kaiming_uniform(*fan_in, n, &mut rng)
                };
                Ok(NamedParam {
                    name: name.clone(),
                    part: *part,
                    tensor: Tensor::new(shape.clone(), data)?.with_grad(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            spec: spec.clone(),
            layout,
            params,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[NamedParam] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [NamedParam] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn part(&self, part: Part) -> Vec<&Tensor> {
        self.params
            .iter()
            .filter(|p| p.part == part)
            .map(|p| &p.tensor)
            .collect()
    }

    pub fn part_mut(&mut self, part: Part) -> Vec<&mut Tensor> {
        self.params
            .iter_mut()
            .filter(|p| p.part == part)
            .map(|p| &mut p.tensor)
            .collect()
    }

    pub fn clone_part(&self, part: Part) -> Vec<Tensor> {
        self.part(part).into_iter().map(Tensor::detached).collect()
    }

    /// Overwrites `part` with `values`, shape-checked, in declaration order.
    pub fn set_part(&mut self, part: Part, values: &[Tensor]) -> Result<()> {
        let mut dst = self.part_mut(part);
        if dst.len() != values.len() {
            return Err(invalid(format!(
                "expected {} tensors for {part:?}, got {}",
                dst.len(),
                values.len()
            )));
        }
        for (d, v) in dst.iter_mut().zip(values) {
            d.assign(v)?;
        }
        Ok(())
    }

    /// `θ ← (1-mix)·θ + mix·values` for one part.
    pub fn blend_part(&mut self, part: Part, values: &[Tensor], mix: f32) -> Result<()> {
        if mix == 1.0 {
            return self.set_part(part, values);
        }
        let mut dst = self.part_mut(part);
        if dst.len() != values.len() {
            return Err(invalid(format!("expected {} tensors for {part:?}", dst.len())));
        }
        for (d, v) in dst.iter_mut().zip(values) {
            if d.shape() != v.shape() {
                return Err(HtflError::Shape {
                    op: "blend_part",
                    lhs: d.shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            for (a, b) in d.data_mut().iter_mut().zip(v.data()) {
                *a = (1.0 - mix) * *a + mix * b;
            }
        }
        Ok(())
    }

    pub fn bind_all(&self, tape: &mut Tape) -> Bound {
        self.bind(tape, |_| Binding::Train)
    }

    pub fn bind(&self, tape: &mut Tape, how: impl Fn(Part) -> Binding) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| {
                let (shape, data) = (p.tensor.shape().to_vec(), p.tensor.data().to_vec());
                match how(p.part) {
                    Binding::Skip => None,
                    Binding::Frozen => tape.constant(shape, data).ok(),
                    Binding::Train => tape.param(shape, data).ok(),
                }
            })
            .collect();
        Bound { vars }
    }

    /// Binds only the head, taking its values from `head` instead of the
    /// model's own parameters.
    pub fn bind_head_from(&self, tape: &mut Tape, head: &[Tensor], how: Binding) -> Result<Bound> {
        let mut it = head.iter();
        let mut vars = Vec::with_capacity(self.params.len());
        for p in &self.params {
            if p.part != Part::Head {
                vars.push(None);
                continue;
            }
            let t = it
                .next()
                .ok_or_else(|| invalid("too few head tensors"))?;
            if t.shape() != p.tensor.shape() {
                return Err(HtflError::Shape {
                    op: "bind_head_from",
                    lhs: p.tensor.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            let (shape, data) = (t.shape().to_vec(), t.data().to_vec());
            vars.push(match how {
                Binding::Skip => None,
                Binding::Frozen => Some(tape.constant(shape, data)?),
                Binding::Train => Some(tape.param(shape, data)?),
            });
        }
        if it.next().is_some() {
            return Err(invalid("too many head tensors"));
        }
        Ok(Bound { vars })
    }

    /// Tape gradients of the head slots of `b`, in declaration order.
    pub fn head_grads(&self, tape: &Tape, b: &Bound) -> Vec<Option<Vec<f32>>> {
        self.params
            .iter()
            .zip(&b.vars)
            .filter(|(p, _)| p.part == Part::Head)
            .map(|(_, v)| v.and_then(|v| tape.grad(v).map(<[f32]>::to_vec)))
            .collect()
    }

    fn var(&self, b: &Bound, i: usize) -> Result<Var> {
        b.vars[i].ok_or_else(|| invalid(format!("parameter `{}` was not bound", self.params[i].name)))
    }

    fn run(&self, tape: &mut Tape, b: &Bound, stages: &[Stage], mut x: Var) -> Result<Var> {
        for st in stages {
            x = match *st {
                Stage::Flatten => {
                    let s = tape.shape(x).to_vec();
                    let rows = s[0];
                    let n: usize = s.iter().product();
                    tape.reshape(x, vec![rows, n / rows.max(1)])?
                }
                Stage::ToSequence { channels, length } => {
                    let rows = tape.shape(x)[0];
                    tape.reshape(x, vec![rows, channels, length])?
                }
                Stage::Conv { w, b: bias, stride, pool } => {
                    let y = tape.conv1d(x, self.var(b, w)?, self.var(b, bias)?, stride)?;
                    let y = tape.relu(y);
                    if pool {
                        tape.pool1d(y)?
                    } else {
                        y
                    }
                }
                Stage::Dense { w, b: bias, relu } => {
                    let y = tape.linear(x, self.var(b, w)?, self.var(b, bias)?)?;
                    if relu {
                        tape.relu(y)
                    } else {
                        y
                    }
                }
                Stage::Pool { out } => tape.average_pool(x, out)?,
            };
        }
        Ok(x)
    }

    /// `[B, input numel]` → `[B, K]`.
    pub fn features(&self, tape: &mut Tape, b: &Bound, x: Var) -> Result<Var> {
        let want = self.spec.input.numel();
        match tape.shape(x) {
            [_, d] if *d == want => {}
            s => {
                return Err(HtflError::Shape {
                    op: "model input",
                    lhs: s.to_vec(),
                    rhs: vec![want],
                })
            }
        }
        let raw = self.run(tape, b, &self.layout.extractor, x)?;
        self.run(tape, b, &self.layout.adapter, raw)
    }

    /// `[B, K]` → `[B, C]`.
    pub fn head(&self, tape: &mut Tape, b: &Bound, f: Var) -> Result<Var> {
        self.run(tape, b, &self.layout.head, f)
    }

    /// Returns `(features, logits)`.
    pub fn forward(&self, tape: &mut Tape, b: &Bound, x: Var) -> Result<(Var, Var)> {
        let f = self.features(tape, b, x)?;
        let z = self.head(tape, b, f)?;
        Ok((f, z))
    }

    /// Adds the tape gradients of every trainable bound parameter to the
    /// parameter tensors.
    pub fn accumulate_grads(&mut self, tape: &Tape, b: &Bound) -> Result<()> {
        for (p, v) in self.params.iter_mut().zip(&b.vars) {
            if let Some(v) = v {
                if let Some(g) = tape.grad(*v) {
                    p.tensor.accumulate_grad(g)?;
                }
            }
        }
        Ok(())
    }

    /// Mutable handles to the tensors of the given parts, for the optimiser.
    pub fn trainable(&mut self, parts: &[Part]) -> Vec<&mut Tensor> {
        self.params
            .iter_mut()
            .filter(|p| parts.contains(&p.part))
            .map(|p| &mut p.tensor)
            .collect()
    }

    /// `(features, logits)` for a row-major batch, without recording
    /// gradients.
    pub fn infer(&self, x: &[f32], rows: usize) -> Result<(Vec<f32>, Vec<f32>)> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, |_| Binding::Frozen);
        let xv = tape.constant(vec![rows, self.spec.input.numel()], x.to_vec())?;
        let (f, z) = self.forward(&mut tape, &b, xv)?;
        Ok((tape.value(f).to_vec(), tape.value(z).to_vec()))
    }
}
