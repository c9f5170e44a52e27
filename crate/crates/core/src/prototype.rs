//! Class prototypes: per-node class means of the representation, their
//! count-weighted global aggregate, and nearest-prototype inference.

use std::collections::BTreeMap;

use crate::datagen::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{LabelBatch, SplitModel, Tape, Tensor, Var};

/// Mean representation of one class on one node.
#[derive(Clone, Debug, PartialEq)]
pub struct Prototype {
    pub class_id: usize,
    pub vector: Vec<f32>,
    /// Number of local samples of this class; always ≥ 1.
    pub count: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlobalPrototype {
    pub vector: Vec<f32>,
    pub contributing_nodes: usize,
    pub total_count: u64,
}

/// Global prototypes keyed by class. May cover only a subset of the classes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GlobalPrototypeTable {
    entries: BTreeMap<usize, GlobalPrototype>,
    width: Option<usize>,
}

impl GlobalPrototypeTable {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn width(&self) -> Option<usize> {
        self.width
    }

    pub fn get(&self, class_id: usize) -> Option<&GlobalPrototype> {
        self.entries.get(&class_id)
    }

    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &GlobalPrototype)> {
        self.entries.iter().map(|(&k, v)| (k, v))
    }

    fn check_width(&self, context: &'static str, width: usize) -> Result<()> {
        match self.width {
            Some(w) if w != width => Err(Error::dim(context, w, width)),
            _ => Ok(()),
        }
    }
}

const PROTO_CHUNK: usize = 256;

/// One prototype per locally present class, sorted by class id.
pub fn compute_local_prototypes(model: &SplitModel, data: &LabeledDataset) -> Result<Vec<Prototype>> {
    if data.is_empty() {
        return Err(Error::Data("cannot compute prototypes of an empty dataset".into()));
    }
    let d = model.repr_width();
    let mut sums: BTreeMap<usize, (Vec<f64>, u64)> = BTreeMap::new();
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(PROTO_CHUNK) {
        let batch = data.batch(chunk)?;
        let repr = model.represent(&batch)?;
        for (row, &i) in chunk.iter().enumerate() {
            let (sum, count) = sums
                .entry(data.label(i))
                .or_insert_with(|| (vec![0.0; d], 0));
            for (s, &v) in sum.iter_mut().zip(repr.row(row)) {
                *s += v as f64;
            }
            *count += 1;
        }
    }
    Ok(sums
        .into_iter()
        .map(|(class_id, (sum, count))| Prototype {
            class_id,
            vector: sum.iter().map(|s| (s / count as f64) as f32).collect(),
            count,
        })
        .collect())
}

/// Count-weighted mean of each class's prototypes across nodes.
///
/// With `literal_eq4` the weighted mean is additionally divided by the number
/// of contributing nodes (the unnormalized variant, kept for comparison).
pub fn aggregate_global(sets: &[(usize, Vec<Prototype>)], literal_eq4: bool) -> Result<GlobalPrototypeTable> {
    let mut order: Vec<&(usize, Vec<Prototype>)> = sets.iter().collect();
    order.sort_by_key(|(node, _)| *node);
    if let Some(w) = order.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::Protocol(format!(
            "node {} submitted more than one prototype set",
            w[0].0
        )));
    }

    let mut width: Option<usize> = None;
    let mut per_class: BTreeMap<usize, Vec<&Prototype>> = BTreeMap::new();
    for (node, protos) in &order {
        let mut seen = std::collections::BTreeSet::new();
        for p in protos {
            if !seen.insert(p.class_id) {
                return Err(Error::Protocol(format!(
                    "node {node} sent class {} twice",
                    p.class_id
                )));
            }
            if p.count == 0 {
                return Err(Error::Data(format!(
                    "node {node} sent class {} with zero support",
                    p.class_id
                )));
            }
            match width {
                None => width = Some(p.vector.len()),
                Some(w) if w != p.vector.len() => {
                    return Err(Error::dim("aggregate_global (prototype width)", w, p.vector.len()))
                }
                _ => {}
            }
            if p.vector.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!(
                    "node {node} sent a non-finite prototype for class {}",
                    p.class_id
                )));
            }
            per_class.entry(p.class_id).or_default().push(p);
        }
    }

    let mut entries = BTreeMap::new();
    for (class_id, protos) in per_class {
        let total: u64 = protos.iter().map(|p| p.count).sum();
        let mut acc = vec![0.0f64; width.unwrap_or(0)];
        for p in &protos {
            let w = p.count as f64 / total as f64;
            for (a, &v) in acc.iter_mut().zip(&p.vector) {
                *a += w * v as f64;
            }
        }
        if literal_eq4 {
            let k = protos.len() as f64;
            acc.iter_mut().for_each(|a| *a /= k);
        }
        entries.insert(
            class_id,
            GlobalPrototype {
                vector: acc.into_iter().map(|a| a as f32).collect(),
                contributing_nodes: protos.len(),
                total_count: total,
            },
        );
    }
    Ok(GlobalPrototypeTable { entries, width })
}

/// Class of the Euclidean-nearest global prototype; ties go to the smaller class id.
pub fn predict_nearest(repr: &[f32], table: &GlobalPrototypeTable) -> Result<usize> {
    if table.is_empty() {
        return Err(Error::State("nearest-prototype inference needs a non-empty table".into()));
    }
    table.check_width("predict_nearest", repr.len())?;
    let mut best = (f64::INFINITY, usize::MAX);
    for (class_id, proto) in table.iter() {
        let dist: f64 = repr
            .iter()
            .zip(&proto.vector)
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum();
        if dist < best.0 {
            best = (dist, class_id);
        }
    }
    Ok(best.1)
}

pub fn predict_nearest_batch(reprs: &Tensor, table: &GlobalPrototypeTable) -> Result<Vec<usize>> {
    (0..reprs.rows())
        .map(|i| predict_nearest(reprs.row(i), table))
        .collect()
}

fn proto_targets(repr: &Tensor, labels: &LabelBatch, table: &GlobalPrototypeTable) -> Result<(Tensor, Vec<bool>)> {
    if repr.rows() != labels.len() {
        return Err(Error::dim("proto_mse_term (batch)", labels.len(), repr.rows()));
    }
    let d = repr.cols();
    table.check_width("proto_mse_term (prototype width)", d)?;
    let mut target = vec![0.0f32; repr.numel()];
    let mut mask = Vec::with_capacity(labels.len());
    for (i, &l) in labels.labels().iter().enumerate() {
        match table.get(l) {
            Some(p) => {
                target[i * d..(i + 1) * d].copy_from_slice(&p.vector);
                mask.push(true);
            }
            None => mask.push(false),
        }
    }
    Ok((Tensor::new(repr.shape().to_vec(), target)?, mask))
}

/// Records the prototype-distance loss on `tape`. Prototypes are constants.
pub fn proto_mse_on(tape: &mut Tape, repr: Var, labels: &LabelBatch, table: &GlobalPrototypeTable) -> Result<Var> {
    let (target, mask) = proto_targets(tape.value(repr), labels, table)?;
    tape.masked_row_mse(repr, &target, mask)
}

/// Mean over samples whose class has a global prototype of the per-sample
/// mean squared distance to that prototype; 0 when no sample qualifies.
pub fn proto_mse_term(repr_batch: &Tensor, labels: &LabelBatch, table: &GlobalPrototypeTable) -> Result<f32> {
    let mut tape = Tape::new();
    let r = tape.constant(repr_batch.detached())?;
    let loss = proto_mse_on(&mut tape, r, labels, table)?;
    Ok(tape.scalar(loss))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::mse;

    fn proto(class_id: usize, vector: Vec<f32>, count: u64) -> Prototype {
        Prototype {
            class_id,
            vector,
            count,
        }
    }

    fn table(entries: &[(usize, Vec<f32>)]) -> GlobalPrototypeTable {
        let sets: Vec<_> = entries
            .iter()
            .enumerate()
            .map(|(i, (c, v))| (i, vec![proto(*c, v.clone(), 1)]))
            .collect();
        aggregate_global(&sets, false).unwrap()
    }

    #[test]
    fn single_contributor_is_identity() {
        let t = aggregate_global(&[(4, vec![proto(2, vec![1.5, -2.0], 7)])], false).unwrap();
        let g = t.get(2).unwrap();
        assert_eq!(g.vector, vec![1.5, -2.0]);
        assert_eq!(g.contributing_nodes, 1);
        assert_eq!(g.total_count, 7);
    }

    #[test]
    fn weighted_mean_hand_example() {
        let sets = vec![
            (0, vec![proto(0, vec![0.0, 0.0], 1)]),
            (1, vec![proto(0, vec![4.0, 4.0], 3)]),
        ];
        let t = aggregate_global(&sets, false).unwrap();
        assert_eq!(t.get(0).unwrap().vector, vec![3.0, 3.0]);
        assert_eq!(t.get(0).unwrap().total_count, 4);
        let lit = aggregate_global(&sets, true).unwrap();
        assert_eq!(lit.get(0).unwrap().vector, vec![1.5, 1.5]);
    }

    #[test]
    fn aggregation_errors() {
        let dup = vec![(0, vec![proto(1, vec![0.0], 1), proto(1, vec![1.0], 1)])];
        assert!(matches!(aggregate_global(&dup, false), Err(Error::Protocol(_))));
        let width = vec![
            (0, vec![proto(1, vec![0.0], 1)]),
            (1, vec![proto(1, vec![0.0, 1.0], 1)]),
        ];
        assert!(matches!(aggregate_global(&width, false), Err(Error::Dimension { .. })));
        let zero = vec![(0, vec![proto(1, vec![0.0], 0)])];
        assert!(aggregate_global(&zero, false).is_err());
    }

    #[test]
    fn nearest_prototype_cases() {
        let t = table(&[(0, vec![0.0, 0.0]), (1, vec![10.0, 10.0])]);
        assert_eq!(predict_nearest(&[1.0, 1.0], &t).unwrap(), 0);
        assert_eq!(predict_nearest(&[10.0, 10.0], &t).unwrap(), 1);

        let t = table(&[(3, vec![1.0, 2.0]), (5, vec![-1.0, 0.0])]);
        assert_eq!(predict_nearest(&[1.0, 2.0], &t).unwrap(), 3);

        let t = table(&[(7, vec![2.0, 0.0]), (2, vec![-2.0, 0.0])]);
        assert_eq!(predict_nearest(&[0.0, 5.0], &t).unwrap(), 2);

        assert!(matches!(
            predict_nearest(&[0.0], &GlobalPrototypeTable::empty()),
            Err(Error::State(_))
        ));
        assert!(matches!(predict_nearest(&[0.0], &t), Err(Error::Dimension { .. })));
    }

    #[test]
    fn proto_mse_cases() {
        let t = table(&[(0, vec![0.0, 0.0]), (1, vec![1.0, 1.0])]);
        let labels = LabelBatch::new(vec![0], 3).unwrap();
        let r = Tensor::from_rows(&[[1.0, 0.0]]).unwrap();
        assert_eq!(proto_mse_term(&r, &labels, &t).unwrap(), 0.5);

        let exact = Tensor::from_rows(&[[0.0, 0.0], [1.0, 1.0]]).unwrap();
        let l2 = LabelBatch::new(vec![0, 1], 3).unwrap();
        assert_eq!(proto_mse_term(&exact, &l2, &t).unwrap(), 0.0);

        // class 2 has no prototype: excluded from the mean
        let l3 = LabelBatch::new(vec![2, 0], 3).unwrap();
        let r3 = Tensor::from_rows(&[[9.0, 9.0], [1.0, 0.0]]).unwrap();
        assert_eq!(proto_mse_term(&r3, &l3, &t).unwrap(), 0.5);
        let only_missing = LabelBatch::new(vec![2], 3).unwrap();
        assert_eq!(proto_mse_term(&r, &only_missing, &t).unwrap(), 0.0);
        assert_eq!(
            proto_mse_term(&r, &labels, &GlobalPrototypeTable::empty()).unwrap(),
            0.0
        );

        let wide = Tensor::from_rows(&[[1.0, 0.0, 0.0]]).unwrap();
        assert!(matches!(
            proto_mse_term(&wide, &labels, &t),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn batch_term_equals_mean_of_per_sample_mse() {
        let t = table(&[(0, vec![0.5, -1.0, 2.0]), (1, vec![1.0, 1.0, 0.0])]);
        let rows = [[0.1, 0.2, 0.3], [1.5, -0.5, 0.25], [2.0, 2.0, -2.0], [0.0, 0.0, 0.0]];
        let labels = vec![0, 1, 1, 0];
        let r = Tensor::from_rows(&rows).unwrap();
        let lb = LabelBatch::new(labels.clone(), 2).unwrap();
        let batch = proto_mse_term(&r, &lb, &t).unwrap() as f64;
        let mut oracle = 0.0f64;
        for (row, &l) in rows.iter().zip(&labels) {
            let p = Tensor::vector(t.get(l).unwrap().vector.clone());
            oracle += mse(&Tensor::vector(row.to_vec()), &p).unwrap() as f64;
        }
        oracle /= rows.len() as f64;
        assert!((batch - oracle).abs() < 1e-6);
    }
}
