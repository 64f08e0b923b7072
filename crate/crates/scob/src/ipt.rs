//! Instance priority trees: one bounded max-heap of confident object
//! features per class, used to pick the most representative negative
//! samples for the contrastive loss.
//!
//! The heap is a complete binary tree in an array `[u_0, u_1, ..., u_n]`
//! with the parent of `u_i` at index `i / 2` for `i >= 1` (the root's only
//! child is `u_1`). Popping restores the tree afterward, so sampling never
//! consumes stored features. When a tree exceeds capacity, the
//! lowest-confidence node is dropped.

use std::fmt::Write as _;

use crate::error::{Result, ScobError};

/// A stored object feature with the classifier confidence it had at
/// insertion time.
#[derive(Debug, Clone, PartialEq)]
pub struct IptNode {
    pub class: usize,
    pub feature: Vec<f64>,
    pub confidence: f64,
    pub sample_id: u32,
}

impl IptNode {
    pub fn new(class: usize, feature: Vec<f64>, confidence: f64, sample_id: u32) -> Self {
        IptNode {
            class,
            feature,
            confidence,
            sample_id,
        }
    }
}

/// Bounded max-heap over [`IptNode`] confidences.
#[derive(Debug, Clone, PartialEq)]
pub struct InstancePriorityTree {
    class: usize,
    capacity: usize,
    nodes: Vec<IptNode>,
    sift_steps: u64,
}

const DEFAULT_CAPACITY: usize = 80;

impl InstancePriorityTree {
    pub fn new(class: usize, capacity: usize) -> Self {
        InstancePriorityTree {
            class,
            capacity,
            nodes: Vec::new(),
            sift_steps: 0,
        }
    }

    pub fn class(&self) -> usize {
        self.class
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn nodes(&self) -> &[IptNode] {
        &self.nodes
    }

    /// Root of the heap: the highest-confidence node.
    pub fn peek(&self) -> Option<&IptNode> {
        self.nodes.first()
    }

    /// Swap count in sift operations since the last reset.
    pub fn take_sift_steps(&mut self) -> u64 {
        std::mem::take(&mut self.sift_steps)
    }

    fn parent(i: usize) -> usize {
        i / 2
    }

    /// Child indexes of slot `j` under this array layout.
    fn children(j: usize, n: usize) -> (Option<usize>, Option<usize>) {
        if j == 0 {
            (if n > 1 { Some(1) } else { None }, None)
        } else {
            let l = 2 * j;
            let r = 2 * j + 1;
            (
                if l < n { Some(l) } else { None },
                if r < n { Some(r) } else { None },
            )
        }
    }

    fn sift_up(&mut self, mut i: usize) {
        while i > 0 {
            let p = Self::parent(i);
            if self.nodes[p].confidence < self.nodes[i].confidence {
                self.nodes.swap(p, i);
                self.sift_steps += 1;
                i = p;
            } else {
                break;
            }
        }
    }

    fn sift_down(&mut self, mut j: usize) {
        let n = self.nodes.len();
        loop {
            let (l, r) = Self::children(j, n);
            let c = match (l, r) {
                (Some(l), Some(r)) => {
                    if self.nodes[r].confidence > self.nodes[l].confidence {
                        r
                    } else {
                        l
                    }
                }
                (Some(l), None) => l,
                _ => break,
            };
            if self.nodes[c].confidence > self.nodes[j].confidence {
                self.nodes.swap(c, j);
                self.sift_steps += 1;
                j = c;
            } else {
                break;
            }
        }
    }

    fn remove_at(&mut self, idx: usize) -> IptNode {
        let last = self.nodes.len() - 1;
        self.nodes.swap(idx, last);
        let out = self.nodes.pop().expect("non-empty");
        if idx < self.nodes.len() {
            self.sift_up(idx);
            self.sift_down(idx);
        }
        out
    }

    /// Insert a node, restore the heap order, and enforce the capacity by
    /// dropping the lowest-confidence node when full.
    pub fn insert(&mut self, node: IptNode) -> Result<()> {
        if node.class != self.class {
            return Err(ScobError::Contract(format!(
                "node class {} does not match tree class {}",
                node.class, self.class
            )));
        }
        if !(0.0..=1.0).contains(&node.confidence) {
            return Err(ScobError::Contract(format!(
                "confidence {} outside [0, 1]",
                node.confidence
            )));
        }
        if node.feature.iter().any(|v| !v.is_finite()) {
            return Err(ScobError::Numeric("node feature has non-finite values".into()));
        }
        self.nodes.push(node);
        self.sift_up(self.nodes.len() - 1);
        if self.nodes.len() > self.capacity {
            let min_idx = self
                .nodes
                .iter()
                .enumerate()
                .min_by(|(_, a), (_, b)| a.confidence.total_cmp(&b.confidence))
                .map(|(i, _)| i)
                .expect("non-empty");
            self.remove_at(min_idx);
        }
        Ok(())
    }

    fn pop_root(&mut self) -> Option<IptNode> {
        if self.nodes.is_empty() {
            return None;
        }
        let last = self.nodes.len() - 1;
        self.nodes.swap(0, last);
        let out = self.nodes.pop().expect("non-empty");
        if !self.nodes.is_empty() {
            self.sift_down(0);
        }
        Some(out)
    }

    /// The `t` highest-confidence nodes (all nodes when `t >= len`). The
    /// tree's node multiset is unchanged afterward: popped nodes are
    /// reinserted before returning.
    pub fn top(&mut self, t: usize) -> Vec<IptNode> {
        if self.nodes.len() <= t {
            return self.nodes.clone();
        }
        let mut popped = Vec::with_capacity(t);
        for _ in 0..t {
            popped.push(self.pop_root().expect("size checked"));
        }
        for node in &popped {
            self.nodes.push(node.clone());
            self.sift_up(self.nodes.len() - 1);
        }
        popped
    }

    /// Replace the node array wholesale (checkpoint restore). The caller
    /// provides nodes in heap-array order, exactly as previously stored.
    pub fn restore_nodes(&mut self, nodes: Vec<IptNode>) {
        self.nodes = nodes;
    }

    /// Full-scan heap invariant check.
    pub fn heap_property_holds(&self) -> bool {
        (1..self.nodes.len())
            .all(|i| self.nodes[Self::parent(i)].confidence >= self.nodes[i].confidence)
    }
}

/// One tree per class.
#[derive(Debug, Clone, PartialEq)]
pub struct IptForest {
    trees: Vec<InstancePriorityTree>,
}

impl IptForest {
    pub fn new(num_classes: usize, capacity: usize) -> Self {
        IptForest {
            trees: (0..num_classes)
                .map(|c| InstancePriorityTree::new(c, capacity))
                .collect(),
        }
    }

    pub fn with_default_capacity(num_classes: usize) -> Self {
        IptForest::new(num_classes, DEFAULT_CAPACITY)
    }

    pub fn num_classes(&self) -> usize {
        self.trees.len()
    }

    pub fn tree(&self, class: usize) -> &InstancePriorityTree {
        &self.trees[class]
    }

    pub fn tree_mut(&mut self, class: usize) -> &mut InstancePriorityTree {
        &mut self.trees[class]
    }

    pub fn insert(&mut self, node: IptNode) -> Result<()> {
        let class = node.class;
        if class >= self.trees.len() {
            return Err(ScobError::Contract(format!("class {class} out of range")));
        }
        self.trees[class].insert(node)
    }

    /// Per-class top nodes for negative sampling, excluding the positive
    /// class `z`. Empty trees contribute nothing.
    pub fn pop_top(&mut self, z: usize, t: usize) -> Vec<IptNode> {
        let mut out = Vec::new();
        for tree in self.trees.iter_mut() {
            if tree.class() == z {
                continue;
            }
            out.extend(tree.top(t));
        }
        out
    }

    pub fn total_sift_steps(&mut self) -> u64 {
        self.trees.iter_mut().map(|t| t.take_sift_steps()).sum()
    }

    pub fn total_len(&self) -> usize {
        self.trees.iter().map(|t| t.len()).sum()
    }

    /// Debug dump: `class,rank,confidence,sample_id` rows, rank ordered by
    /// descending confidence within each class.
    pub fn dump_csv(&self) -> String {
        let mut s = String::from("class,rank,confidence,sample_id\n");
        for tree in &self.trees {
            let mut nodes: Vec<&IptNode> = tree.nodes().iter().collect();
            nodes.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
            for (rank, n) in nodes.iter().enumerate() {
                let _ = writeln!(s, "{},{},{},{}", tree.class(), rank, n.confidence, n.sample_id);
            }
        }
        s
    }
}

/// Classifier confidence for a stored node: the sigmoid score of the
/// node's own class at insertion time.
pub fn node_confidence(probs: &[f64], class: usize) -> Result<f64> {
    if class >= probs.len() {
        return Err(ScobError::Contract(format!("class {class} out of range")));
    }
    let p = probs[class];
    if !(0.0..=1.0).contains(&p) {
        return Err(ScobError::Contract(format!("probability {p} outside [0, 1]")));
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn node(class: usize, conf: f64, id: u32) -> IptNode {
        IptNode::new(class, vec![conf, -conf], conf, id)
    }

    /// Reference: plain list sorted by descending confidence; drops its
    /// minimum on overflow.
    struct SortedOracle {
        capacity: usize,
        items: Vec<(f64, u32)>,
    }

    impl SortedOracle {
        fn new(capacity: usize) -> Self {
            SortedOracle { capacity, items: Vec::new() }
        }
        fn insert(&mut self, conf: f64, id: u32) {
            self.items.push((conf, id));
            self.items.sort_by(|a, b| b.0.total_cmp(&a.0));
            while self.items.len() > self.capacity {
                self.items.pop();
            }
        }
        fn top(&self, t: usize) -> Vec<f64> {
            self.items.iter().take(t).map(|&(c, _)| c).collect()
        }
    }

    fn sorted(mut v: Vec<f64>) -> Vec<f64> {
        v.sort_by(|a, b| a.total_cmp(b));
        v
    }

    #[test]
    fn root_is_max_after_inserts() {
        let mut tree = InstancePriorityTree::new(0, 80);
        for (i, c) in [0.3, 0.9, 0.5].into_iter().enumerate() {
            tree.insert(node(0, c, i as u32)).unwrap();
        }
        assert_eq!(tree.peek().unwrap().confidence, 0.9);
        assert!(tree.heap_property_holds());
    }

    #[test]
    fn single_insert_is_root() {
        let mut tree = InstancePriorityTree::new(2, 80);
        tree.insert(node(2, 0.42, 7)).unwrap();
        assert_eq!(tree.peek().unwrap().sample_id, 7);
        assert_eq!(tree.len(), 1);
    }

    #[test]
    fn capacity_is_enforced() {
        let mut tree = InstancePriorityTree::new(0, 80);
        for i in 0..100u32 {
            tree.insert(node(0, (i as f64) / 100.0, i)).unwrap();
        }
        assert_eq!(tree.len(), 80);
        assert!(tree.heap_property_holds());
        // kept the highest-confidence 80
        let confs: Vec<f64> = tree.nodes().iter().map(|n| n.confidence).collect();
        assert!(confs.iter().all(|&c| c >= 0.20));
    }

    #[test]
    fn class_mismatch_is_contract_error() {
        let mut tree = InstancePriorityTree::new(1, 80);
        assert!(matches!(
            tree.insert(node(0, 0.5, 0)),
            Err(ScobError::Contract(_))
        ));
    }

    #[test]
    fn top_matches_hand_case_and_restores() {
        let mut tree = InstancePriorityTree::new(0, 80);
        for (i, c) in [0.1, 0.8, 0.4].into_iter().enumerate() {
            tree.insert(node(0, c, i as u32)).unwrap();
        }
        let before: Vec<f64> = sorted(tree.nodes().iter().map(|n| n.confidence).collect());
        let got = tree.top(2);
        assert_eq!(sorted(got.iter().map(|n| n.confidence).collect()), vec![0.4, 0.8]);
        let after: Vec<f64> = sorted(tree.nodes().iter().map(|n| n.confidence).collect());
        assert_eq!(before, after, "pop_top must leave the multiset unchanged");
        assert!(tree.heap_property_holds());
    }

    #[test]
    fn top_with_large_t_returns_everything() {
        let mut tree = InstancePriorityTree::new(0, 80);
        for (i, c) in [0.2, 0.6].into_iter().enumerate() {
            tree.insert(node(0, c, i as u32)).unwrap();
        }
        assert_eq!(tree.top(10).len(), 2);
    }

    #[test]
    fn positive_class_contributes_no_negatives() {
        let mut forest = IptForest::new(3, 80);
        for c in 0..3 {
            forest.insert(node(c, 0.5, c as u32)).unwrap();
        }
        let negs = forest.pop_top(1, 5);
        assert_eq!(negs.len(), 2);
        assert!(negs.iter().all(|n| n.class != 1));
    }

    #[test]
    fn same_feature_different_confidence_orders_by_confidence() {
        let mut tree = InstancePriorityTree::new(0, 80);
        tree.insert(IptNode::new(0, vec![1.0, 2.0], 0.37, 5)).unwrap();
        tree.insert(IptNode::new(0, vec![1.0, 2.0], 0.92, 6)).unwrap();
        let top = tree.top(1);
        assert_eq!(top[0].sample_id, 6);
        assert_eq!(top[0].confidence, 0.92);
    }

    #[test]
    fn confidence_is_the_class_probability() {
        assert_eq!(node_confidence(&[0.2, 1.0, 0.4], 1).unwrap(), 1.0);
        assert_eq!(node_confidence(&[0.37, 0.5], 0).unwrap(), 0.37);
        assert!(node_confidence(&[0.5], 3).is_err());
    }

    #[test]
    fn random_workload_matches_sorted_oracle() {
        let mut rng = crate::rng::rng_stream(1234, 0);
        let capacity = 40;
        let mut tree = InstancePriorityTree::new(0, capacity);
        let mut oracle = SortedOracle::new(capacity);
        for i in 0..2000u32 {
            if rng.random_range(0.0..1.0) < 0.7 || tree.is_empty() {
                // quantized confidences produce deliberate ties
                let conf = (rng.random_range(0..=20) as f64) / 20.0;
                tree.insert(node(0, conf, i)).unwrap();
                oracle.insert(conf, i);
            } else {
                let t = rng.random_range(1..=8);
                let got = sorted(tree.top(t).iter().map(|n| n.confidence).collect());
                let want = sorted(oracle.top(t));
                assert_eq!(got, want, "mismatch after {i} operations");
            }
            assert!(tree.heap_property_holds(), "heap violated after op {i}");
            assert_eq!(tree.len(), oracle.items.len());
        }
    }

    #[test]
    fn pop_top_sift_steps_stay_logarithmic() {
        let mut tree = InstancePriorityTree::new(0, 4096);
        let mut rng = crate::rng::rng_stream(99, 0);
        for i in 0..3000u32 {
            let conf = rng.random_range(0.0..1.0);
            tree.insert(node(0, conf, i)).unwrap();
        }
        tree.take_sift_steps();
        for t in [1usize, 4, 16, 64] {
            let _ = tree.top(t);
            let steps = tree.take_sift_steps();
            let n = tree.len() as f64;
            let bound = 4.0 * t as f64 * (n.log2() + 1.0);
            assert!(
                (steps as f64) <= bound,
                "pop_top({t}) used {steps} sift steps, bound {bound}"
            );
        }
    }

    #[test]
    fn csv_dump_has_descending_ranks() {
        let mut forest = IptForest::new(2, 80);
        forest.insert(node(0, 0.2, 1)).unwrap();
        forest.insert(node(0, 0.9, 2)).unwrap();
        let csv = forest.dump_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "class,rank,confidence,sample_id");
        assert_eq!(lines[1], "0,0,0.9,2");
        assert_eq!(lines[2], "0,1,0.2,1");
    }
}
