//! Greedy near-duplicate removal by embedding cosine similarity.

use std::collections::BTreeMap;

use super::CollectedItem;
use crate::Error;

pub const DEDUP_THRESHOLD: f64 = 0.99;

fn normalized(v: &[f64], index: usize) -> Result<Vec<f64>, Error> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::Data(format!("embedding {index} has norm {n}")));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Indices of the items kept by a first-kept-wins scan: an item is dropped
/// when its cosine similarity to any kept item is strictly above
/// `threshold`.
pub fn dedup(embeddings: &[Vec<f64>], threshold: f64) -> Result<Vec<usize>, Error> {
    let units = embeddings.iter().enumerate().map(|(i, e)| normalized(e, i)).collect::<Result<Vec<_>, _>>()?;
    if let Some(d) = units.first().map(Vec::len) {
        if units.iter().any(|u| u.len() != d) {
            return Err(Error::Data("embeddings differ in dimension".into()));
        }
    }
    let mut kept: Vec<usize> = Vec::new();
    for (i, u) in units.iter().enumerate() {
        let dup = kept.iter().any(|&k| units[k].iter().zip(u).map(|(a, b)| a * b).sum::<f64>() > threshold);
        if !dup {
            kept.push(i);
        }
    }
    Ok(kept)
}

/// Outcome of per-class deduplication.
#[derive(Debug, Clone, PartialEq)]
pub struct DedupOutcome {
    pub kept: Vec<CollectedItem>,
    /// Removed items per class name.
    pub removed: BTreeMap<String, usize>,
}

/// Applies [`dedup`] inside each class; items of different classes never
/// remove each other. Kept items stay in input order.
pub fn dedup_by_class(items: Vec<CollectedItem>, threshold: f64) -> Result<DedupOutcome, Error> {
    let mut by_class: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, item) in items.iter().enumerate() {
        by_class.entry(item.class_name.clone()).or_default().push(i);
    }
    let mut keep = vec![false; items.len()];
    let mut removed = BTreeMap::new();
    for (class, idx) in &by_class {
        let embs: Vec<Vec<f64>> = idx
            .iter()
            .map(|&i| items[i].embedding.clone().ok_or_else(|| Error::Data(format!("item {} has no embedding", items[i].id))))
            .collect::<Result<_, _>>()?;
        let kept = dedup(&embs, threshold)?;
        removed.insert(class.clone(), idx.len() - kept.len());
        for k in kept {
            keep[idx[k]] = true;
        }
    }
    let kept = items.into_iter().zip(keep).filter_map(|(it, k)| k.then_some(it)).collect();
    Ok(DedupOutcome { kept, removed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cos(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
    }

    #[test]
    fn hand_cases() {
        assert_eq!(dedup(&[vec![1.0, 2.0], vec![1.0, 2.0]], 0.99).unwrap(), vec![0]);
        assert_eq!(dedup(&[vec![1.0, 0.0], vec![0.0, 3.0]], 0.99).unwrap(), vec![0, 1]);
        assert!(dedup(&[vec![1.0, 0.0], vec![0.0, 0.0]], 0.99).is_err());
        assert_eq!(dedup(&[], 0.99).unwrap(), Vec::<usize>::new());
    }

    /// Unit vectors in a plane at given angles.
    fn at(angle: f64) -> Vec<f64> {
        vec![angle.cos(), angle.sin()]
    }

    #[test]
    fn greedy_chain_keeps_ends() {
        let step = 0.995f64.acos();
        let (a, b, c) = (at(0.0), at(step), at(2.0 * step));
        assert!((cos(&a, &b) - 0.995).abs() < 1e-12 && (cos(&b, &c) - 0.995).abs() < 1e-12);
        let ac = cos(&a, &c);
        assert!(ac < 0.99 && (ac - 0.98).abs() < 0.001, "{ac}");
        assert_eq!(dedup(&[a, b, c], 0.99).unwrap(), vec![0, 2]);
    }

    #[test]
    fn boundary_is_strict() {
        let v = [at(0.0), at(0.99f64.acos() + 1e-9)];
        assert_eq!(dedup(&v, 0.99).unwrap(), vec![0, 1]);
    }

    fn item(id: &str, class: &str, e: Vec<f64>) -> CollectedItem {
        CollectedItem { id: id.into(), search_prompt: String::new(), class_name: class.into(), hint: super::super::Polarity::Normal, embedding: Some(e), verdict: None }
    }

    #[test]
    fn classes_do_not_interact() {
        let items = vec![item("a", "x", vec![1.0, 0.0]), item("b", "y", vec![1.0, 0.0]), item("c", "x", vec![2.0, 0.0])];
        let out = dedup_by_class(items, 0.99).unwrap();
        let ids: Vec<&str> = out.kept.iter().map(|i| i.id.as_str()).collect();
        assert_eq!(ids, vec!["a", "b"]);
        assert_eq!(out.removed["x"], 1);
        assert_eq!(out.removed["y"], 0);
    }

    proptest! {
        #[test]
        fn survivors_are_separated_and_idempotent(seed_vecs in proptest::collection::vec(proptest::collection::vec(-3i8..=3, 3), 1..60)) {
            let embs: Vec<Vec<f64>> = seed_vecs.into_iter().map(|v| v.into_iter().map(f64::from).collect::<Vec<_>>())
                .filter(|v| v.iter().any(|&x| x != 0.0)).collect();
            let kept = dedup(&embs, 0.99).unwrap();
            for (i, &a) in kept.iter().enumerate() {
                for &b in &kept[i + 1..] {
                    prop_assert!(cos(&embs[a], &embs[b]) <= 0.99 + 1e-12);
                }
            }
            let sub: Vec<Vec<f64>> = kept.iter().map(|&k| embs[k].clone()).collect();
            prop_assert_eq!(dedup(&sub, 0.99).unwrap(), (0..sub.len()).collect::<Vec<_>>());
        }
    }
}
