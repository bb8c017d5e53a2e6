use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{HtflError, Result};
use crate::numcore::{truncated_svd, Tensor, TruncatedSvd};

/// Bytes per transmitted number.
pub const BYTES_PER_FLOAT: u64 = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassEntry {
    pub vector: Vec<f32>,
    /// Local samples behind the vector; metadata, not counted as payload.
    pub count: usize,
}

/// Per-class vectors (prototypes of length K or mean logits of length C).
#[derive(Debug, Clone, PartialEq)]
pub struct ClassVectors {
    pub dim: usize,
    pub classes: BTreeMap<usize, ClassEntry>,
}

impl ClassVectors {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            classes: BTreeMap::new(),
        }
    }

    pub fn get(&self, class: usize) -> Option<&[f32]> {
        self.classes.get(&class).map(|e| e.vector.as_slice())
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn insert(&mut self, class: usize, vector: Vec<f32>, count: usize) {
        self.classes.insert(class, ClassEntry { vector, count });
    }
}

/// Running per-class mean of row vectors.
#[derive(Debug, Clone)]
pub struct ClassMeans {
    dim: usize,
    sums: BTreeMap<usize, (Vec<f64>, usize)>,
}

impl ClassMeans {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            sums: BTreeMap::new(),
        }
    }

    pub fn add_rows(&mut self, rows: &[f32], labels: &[usize]) {
        for (r, &y) in labels.iter().enumerate() {
            let (sum, n) = self
                .sums
                .entry(y)
                .or_insert_with(|| (vec![0.0; self.dim], 0));
            for (s, &v) in sum.iter_mut().zip(&rows[r * self.dim..(r + 1) * self.dim]) {
                *s += v as f64;
            }
            *n += 1;
        }
    }

    pub fn finish(self) -> ClassVectors {
        let mut out = ClassVectors::new(self.dim);
        for (c, (sum, n)) in self.sums {
            out.insert(c, sum.iter().map(|s| (s / n as f64) as f32).collect(), n);
        }
        out
    }
}

/// One transmitted parameter: a factored matrix or a raw tensor.
#[derive(Debug, Clone, PartialEq)]
pub enum SvdEntry {
    Factored { shape: Vec<usize>, svd: TruncatedSvd },
    Raw(Tensor),
}

impl SvdEntry {
    /// Factorises tensors with ≥ 2 dims as `[d0, rest]`; vectors stay raw.
    pub fn encode(t: &Tensor, energy: f64) -> Result<Self> {
        if t.ndim() < 2 {
            return Ok(SvdEntry::Raw(t.detached()));
        }
        let rows = t.shape()[0];
        let cols = t.numel() / rows.max(1);
        let m = Tensor::matrix(rows, cols, t.data().to_vec())?;
        Ok(SvdEntry::Factored {
            shape: t.shape().to_vec(),
            svd: truncated_svd(&m, energy)?,
        })
    }

    pub fn decode(&self) -> Result<Tensor> {
        match self {
            SvdEntry::Raw(t) => Ok(t.detached()),
            SvdEntry::Factored { shape, svd } => svd.reconstruct().reshape(shape.clone()),
        }
    }

    pub fn float_count(&self) -> usize {
        match self {
            SvdEntry::Raw(t) => t.numel(),
            SvdEntry::Factored { svd, .. } => svd.float_count(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Carrier {
    HeadParams(Vec<Tensor>),
    AuxParams(Vec<Tensor>),
    Prototypes(ClassVectors),
    ClassLogits(ClassVectors),
    Svd(Vec<SvdEntry>),
    GeneratorParams(Vec<Tensor>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CarrierKind {
    HeadParams,
    AuxParams,
    Prototypes,
    ClassLogits,
    Svd,
    GeneratorParams,
}

impl Carrier {
    pub fn kind(&self) -> CarrierKind {
        match self {
            Carrier::HeadParams(_) => CarrierKind::HeadParams,
            Carrier::AuxParams(_) => CarrierKind::AuxParams,
            Carrier::Prototypes(_) => CarrierKind::Prototypes,
            Carrier::ClassLogits(_) => CarrierKind::ClassLogits,
            Carrier::Svd(_) => CarrierKind::Svd,
            Carrier::GeneratorParams(_) => CarrierKind::GeneratorParams,
        }
    }

    /// Numbers on the wire; class counts and shapes are metadata.
    pub fn float_count(&self) -> usize {
        match self {
            Carrier::HeadParams(t) | Carrier::AuxParams(t) | Carrier::GeneratorParams(t) => {
                t.iter().map(Tensor::numel).sum()
            }
            Carrier::Prototypes(cv) | Carrier::ClassLogits(cv) => cv.dim * cv.classes.len(),
            Carrier::Svd(e) => e.iter().map(SvdEntry::float_count).sum(),
        }
    }

    pub fn byte_size(&self) -> u64 {
        self.float_count() as u64 * BYTES_PER_FLOAT
    }

    pub fn class_vectors(&self) -> Option<&ClassVectors> {
        match self {
            Carrier::Prototypes(cv) | Carrier::ClassLogits(cv) => Some(cv),
            _ => None,
        }
    }

    pub fn tensors(&self) -> Option<&[Tensor]> {
        match self {
            Carrier::HeadParams(t) | Carrier::AuxParams(t) | Carrier::GeneratorParams(t) => Some(t),
            _ => None,
        }
    }
}

/// What client `sender` uploads in a round.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgePacket {
    pub sender: usize,
    pub train_size: usize,
    pub carrier: Carrier,
}

impl KnowledgePacket {
    pub fn byte_size(&self) -> u64 {
        self.carrier.byte_size()
    }
}

/// Aggregated knowledge `S_g`. FedGen ships a head and a generator, every
/// other method a single carrier.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GlobalKnowledge {
    pub carriers: Vec<Carrier>,
}

impl GlobalKnowledge {
    pub fn single(c: Carrier) -> Self {
        Self { carriers: vec![c] }
    }

    pub fn is_empty(&self) -> bool {
        self.carriers.is_empty()
    }

    pub fn float_count(&self) -> usize {
        self.carriers.iter().map(Carrier::float_count).sum()
    }

    pub fn byte_size(&self) -> u64 {
        self.float_count() as u64 * BYTES_PER_FLOAT
    }

    pub fn find(&self, kind: CarrierKind) -> Option<&Carrier> {
        self.carriers.iter().find(|c| c.kind() == kind)
    }
}

/// Weight used for each client's per-class vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassWeighting {
    /// Per-class local sample counts.
    #[default]
    ClassCounts,
    /// The client's whole training-set size `k_i`.
    ClientSize,
}

/// Weighted mean of same-variant packets: tensors by `k_i / Σk`, per-class
/// vectors by `weighting`. Weights renormalise over the packets given.
pub fn aggregate_weighted(packets: &[KnowledgePacket], weighting: ClassWeighting) -> Result<Carrier> {
    let first = packets.first().ok_or_else(|| HtflError::Aggregation {
        senders: vec![],
        reason: "no packets to aggregate".into(),
    })?;
    let kind = first.carrier.kind();
    if let Some(p) = packets.iter().find(|p| p.carrier.kind() != kind) {
        return Err(HtflError::Aggregation {
            senders: vec![first.sender, p.sender],
            reason: format!("mixed carriers {:?} and {:?}", kind, p.carrier.kind()),
        });
    }
    match &first.carrier {
        Carrier::HeadParams(_) | Carrier::AuxParams(_) | Carrier::GeneratorParams(_) => {
            let sets: Vec<(usize, &[Tensor])> = packets
                .iter()
                .map(|p| (p.sender, p.carrier.tensors().expect("tensor carrier")))
                .collect();
            let weights: Vec<f64> = packets.iter().map(|p| p.train_size as f64).collect();
            let mean = weighted_tensors(&sets, &weights)?;
            Ok(match kind {
                CarrierKind::HeadParams => Carrier::HeadParams(mean),
                CarrierKind::AuxParams => Carrier::AuxParams(mean),
                _ => Carrier::GeneratorParams(mean),
            })
        }
        Carrier::Prototypes(_) | Carrier::ClassLogits(_) => {
            let merged = weighted_classes(packets, weighting)?;
            Ok(match kind {
                CarrierKind::Prototypes => Carrier::Prototypes(merged),
                _ => Carrier::ClassLogits(merged),
            })
        }
        Carrier::Svd(_) => {
            let decoded: Vec<(usize, Vec<Tensor>)> = packets
                .iter()
                .map(|p| match &p.carrier {
                    Carrier::Svd(e) => Ok((p.sender, e.iter().map(SvdEntry::decode).collect::<Result<_>>()?)),
                    _ => unreachable!("kinds checked above"),
                })
                .collect::<Result<_>>()?;
            let sets: Vec<(usize, &[Tensor])> = decoded.iter().map(|(s, t)| (*s, t.as_slice())).collect();
            let weights: Vec<f64> = packets.iter().map(|p| p.train_size as f64).collect();
            Ok(Carrier::AuxParams(weighted_tensors(&sets, &weights)?))
        }
    }
}

fn weighted_tensors(sets: &[(usize, &[Tensor])], weights: &[f64]) -> Result<Vec<Tensor>> {
    let (s0, first) = sets[0];
    let total: f64 = weights.iter().sum();
    // All-empty clients fall back to a plain mean.
    let w: Vec<f64> = if total > 0.0 {
        weights.iter().map(|v| v / total).collect()
    } else {
        vec![1.0 / sets.len() as f64; sets.len()]
    };
    let mut out = Vec::with_capacity(first.len());
    for (j, t0) in first.iter().enumerate() {
        let mut acc = vec![0.0f64; t0.numel()];
        for ((sender, set), &wi) in sets.iter().zip(&w) {
            let t = set.get(j).filter(|t| t.shape() == t0.shape()).ok_or_else(|| {
                HtflError::Aggregation {
                    senders: vec![s0, *sender],
                    reason: format!("tensor {j} shape differs from {:?}", t0.shape()),
                }
            })?;
            for (a, &v) in acc.iter_mut().zip(t.data()) {
                *a += wi * v as f64;
            }
        }
        out.push(Tensor::new(t0.shape().to_vec(), acc.iter().map(|&v| v as f32).collect())?);
    }
    if let Some((sender, _)) = sets.iter().find(|(_, s)| s.len() != first.len()) {
        return Err(HtflError::Aggregation {
            senders: vec![s0, *sender],
            reason: "tensor counts differ".into(),
        });
    }
    Ok(out)
}

fn weighted_classes(packets: &[KnowledgePacket], weighting: ClassWeighting) -> Result<ClassVectors> {
    let dim = packets[0].carrier.class_vectors().expect("class carrier").dim;
    let mut acc: BTreeMap<usize, (Vec<f64>, f64, usize)> = BTreeMap::new();
    for p in packets {
        let cv = p.carrier.class_vectors().expect("class carrier");
        if cv.dim != dim {
            return Err(HtflError::Aggregation {
                senders: vec![packets[0].sender, p.sender],
                reason: format!("vector length {} vs {dim}", cv.dim),
            });
        }
        for (&c, e) in &cv.classes {
            if e.vector.len() != dim {
                return Err(HtflError::Aggregation {
                    senders: vec![p.sender],
                    reason: format!("class {c} vector has length {}", e.vector.len()),
                });
            }
            let w = match weighting {
                ClassWeighting::ClassCounts => e.count as f64,
                ClassWeighting::ClientSize => p.train_size as f64,
            };
            let slot = acc.entry(c).or_insert_with(|| (vec![0.0; dim], 0.0, 0));
            for (a, &v) in slot.0.iter_mut().zip(&e.vector) {
                *a += w * v as f64;
            }
            slot.1 += w;
            slot.2 += e.count;
        }
    }
    let mut out = ClassVectors::new(dim);
    for (c, (sum, w, n)) in acc {
        let v = if w > 0.0 {
            sum.iter().map(|s| (s / w) as f32).collect()
        } else {
            vec![0.0; dim]
        };
        out.insert(c, v, n);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_packet(sender: usize, k: usize, v: Vec<f32>) -> KnowledgePacket {
        KnowledgePacket {
            sender,
            train_size: k,
            carrier: Carrier::HeadParams(vec![Tensor::from_vec(v)]),
        }
    }

    fn proto(sender: usize, classes: &[(usize, Vec<f32>, usize)]) -> KnowledgePacket {
        let mut cv = ClassVectors::new(classes[0].1.len());
        for (c, v, n) in classes {
            cv.insert(*c, v.clone(), *n);
        }
        KnowledgePacket {
            sender,
            train_size: classes.iter().map(|c| c.2).sum(),
            carrier: Carrier::Prototypes(cv),
        }
    }

    #[test]
    fn weighted_mean_example() {
        let g = aggregate_weighted(
            &[vec_packet(0, 1, vec![1.0, 3.0]), vec_packet(1, 3, vec![3.0, 5.0])],
            ClassWeighting::ClassCounts,
        )
        .unwrap();
        assert_eq!(g.tensors().unwrap()[0].data(), &[2.5, 4.5]);
    }

    #[test]
    fn class_only_in_one_packet_is_copied() {
        let g = aggregate_weighted(
            &[
                proto(1, &[(0, vec![1.0, 1.0], 2)]),
                proto(2, &[(0, vec![3.0, 3.0], 2), (7, vec![9.0, -1.0], 4)]),
            ],
            ClassWeighting::ClassCounts,
        )
        .unwrap();
        let cv = g.class_vectors().unwrap();
        assert_eq!(cv.get(7).unwrap(), &[9.0, -1.0]);
        assert_eq!(cv.get(0).unwrap(), &[2.0, 2.0]);
        assert_eq!(cv.classes[&0].count, 4);
        assert!(cv.get(3).is_none());
    }

    #[test]
    fn shape_mismatch_names_senders() {
        let err = aggregate_weighted(
            &[vec_packet(4, 1, vec![1.0]), vec_packet(6, 1, vec![1.0, 2.0])],
            ClassWeighting::ClassCounts,
        )
        .unwrap_err();
        match err {
            HtflError::Aggregation { senders, .. } => assert_eq!(senders, vec![4, 6]),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn mixed_variants_rejected() {
        let err = aggregate_weighted(
            &[vec_packet(0, 1, vec![1.0]), proto(1, &[(0, vec![1.0], 1)])],
            ClassWeighting::ClassCounts,
        );
        assert!(err.is_err());
    }

    #[test]
    fn byte_laws() {
        let p = proto(0, &[(0, vec![0.0; 4], 1)]);
        assert_eq!(p.byte_size(), 16);
        let f = SvdEntry::encode(&Tensor::matrix(2, 2, vec![3.0, 4.0, 6.0, 8.0]).unwrap(), 0.9).unwrap();
        assert_eq!(f.float_count(), 1 + 2 + 2);
        let conv = Tensor::new(vec![2, 3, 2], (0..12).map(|i| i as f32).collect()).unwrap();
        let back = SvdEntry::encode(&conv, 1.0).unwrap().decode().unwrap();
        assert_eq!(back.shape(), conv.shape());
        for (a, b) in back.data().iter().zip(conv.data()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn class_means_example() {
        let mut m = ClassMeans::new(2);
        m.add_rows(&[1.0, 2.0, 3.0, 4.0], &[0, 0]);
        assert_eq!(m.finish().get(0).unwrap(), &[2.0, 3.0]);
    }
}
