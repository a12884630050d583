//! Online memory bank of unit-norm target embeddings, routed by predicted class.

use crate::error::{GttaError, Result};
use crate::tensor::{argmax_slice, entropy_slice, Param};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BankEntry {
    /// Unit-norm embedding.
    pub embedding: Vec<f64>,
    /// Prediction distribution recorded at insertion (one-hot for init entries).
    pub logits: Vec<f64>,
    pub entropy: f64,
    pub arrival: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MemoryBank {
    classes: Vec<Vec<BankEntry>>,
    pub capacity_per_class: usize,
}

/// One retrieved neighbor (cosine distance, pooled over all classes).
#[derive(Clone, Debug, PartialEq)]
pub struct Neighbor {
    pub embedding: Vec<f64>,
    pub distance: f64,
    pub arrival: u64,
    pub class: usize,
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

impl MemoryBank {
    /// Seed the bank with the L2-normalized columns of the classifier weight
    /// matrix `[F × K]`: one maximally confident entry per class at arrival 0.
    pub fn init(classifier_w: &Param, capacity_per_class: usize) -> Result<Self> {
        let (f, k) = (classifier_w.shape[0], classifier_w.shape[1]);
        let mut classes = Vec::with_capacity(k);
        for c in 0..k {
            let col: Vec<f64> = (0..f).map(|j| classifier_w.values[j * k + c]).collect();
            let norm = l2_norm(&col);
            if norm < 1e-12 {
                return Err(GttaError::ZeroWeightColumn(c));
            }
            let embedding: Vec<f64> = col.iter().map(|v| v / norm).collect();
            let mut one_hot = vec![0.0; k];
            one_hot[c] = 1.0;
            classes.push(vec![BankEntry {
                embedding,
                logits: one_hot,
                entropy: 0.0,
                arrival: 0,
            }]);
        }
        Ok(Self { classes, capacity_per_class })
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_entries(&self, class: usize) -> &[BankEntry] {
        &self.classes[class]
    }

    pub fn total_len(&self) -> usize {
        self.classes.iter().map(|c| c.len()).sum()
    }

    /// Insert a sample routed by the argmax of its prediction `p` (ties to the
    /// lower class). Over capacity, the highest-entropy stored entry is evicted
    /// (ties evict the oldest).
    pub fn update(&mut self, z_raw: &[f64], p: &[f64], t: u64) -> Result<()> {
        if p.len() != self.classes.len() {
            return Err(GttaError::Tensor(crate::error::TensorError::ShapeMismatch(
                format!("prediction has {} classes, bank has {}", p.len(), self.classes.len()),
            )));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(GttaError::Tensor(crate::error::TensorError::InvalidDistribution(
                format!("prediction sums to {sum}"),
            )));
        }
        let norm = l2_norm(z_raw);
        if norm < 1e-12 {
            return Err(GttaError::ZeroNormEmbedding);
        }
        let k_star = argmax_slice(p);
        let entry = BankEntry {
            embedding: z_raw.iter().map(|v| v / norm).collect(),
            logits: p.to_vec(),
            entropy: entropy_slice(p),
            arrival: t,
        };
        let list = &mut self.classes[k_star];
        list.push(entry);
        if list.len() > self.capacity_per_class {
            let mut evict = 0usize;
            for i in 1..list.len() {
                let worse = list[i].entropy > list[evict].entropy
                    || (list[i].entropy == list[evict].entropy
                        && list[i].arrival < list[evict].arrival);
                if worse {
                    evict = i;
                }
            }
            list.remove(evict);
        }
        Ok(())
    }

    /// All entries within the n-th smallest cosine distance of `z` (unit norm),
    /// pooled over every class. Exactly n when distances are distinct; more only on
    /// boundary ties. Ordered by ascending distance, then ascending arrival.
    pub fn retrieve_neighbors(&self, z: &[f64], n: usize) -> Result<Vec<Neighbor>> {
        if self.total_len() == 0 {
            return Err(GttaError::EmptyBank);
        }
        let mut all: Vec<Neighbor> = Vec::with_capacity(self.total_len());
        for (class, entries) in self.classes.iter().enumerate() {
            for e in entries {
                let dot: f64 = z.iter().zip(&e.embedding).map(|(a, b)| a * b).sum();
                all.push(Neighbor {
                    embedding: e.embedding.clone(),
                    distance: 1.0 - dot,
                    arrival: e.arrival,
                    class,
                });
            }
        }
        all.sort_by(|a, b| {
            a.distance
                .partial_cmp(&b.distance)
                .unwrap()
                .then(a.arrival.cmp(&b.arrival))
        });
        let n_eff = n.min(all.len()).max(1);
        let gamma = all[n_eff - 1].distance;
        all.retain(|e| e.distance <= gamma);
        Ok(all)
    }

    /// Every stored embedding must be unit norm and no class may exceed capacity.
    pub fn invariants_hold(&self) -> bool {
        self.classes.iter().all(|entries| {
            entries.len() <= self.capacity_per_class
                && entries.iter().all(|e| (l2_norm(&e.embedding) - 1.0).abs() <= 1e-9)
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
