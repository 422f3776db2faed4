//! Global magnitude pruning.
//!
//! All non-embedding parameters are pooled into one population, the
//! smallest-magnitude fraction is zeroed, and the resulting bit masks
//! travel with the model from then on: the optimizer re-zeroes masked
//! coordinates every step, so sparsity survives training. Embedding
//! tables are never pruned — size reports keep their embedding column
//! constant across the dense and pruned variants.
//!
//! Ties at the magnitude threshold are broken by parameter name
//! (lexicographic) then flat index, so the zero set — and therefore every
//! downstream checkpoint — is a pure function of the weights and the
//! sparsity level.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::model::{is_embedding, Model};
use crate::{Error, Result};

/// Bit masks per covered parameter: `true` keeps the weight, `false`
/// pins it to exactly 0.0.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    pub target_sparsity: f64,
    pub masks: IndexMap<String, Vec<bool>>,
}

impl MaskSet {
    /// Names covered by this mask set, in storage order.
    pub fn scope(&self) -> impl Iterator<Item = &str> {
        self.masks.keys().map(|s| s.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&[bool]> {
        self.masks.get(name).map(|m| m.as_slice())
    }

    pub fn zero_count(&self) -> usize {
        self.masks.values().map(|m| m.iter().filter(|&&b| !b).count()).sum()
    }

    pub fn covered_len(&self) -> usize {
        self.masks.values().map(|m| m.len()).sum()
    }

    /// Check this mask set against a model: every masked name must exist
    /// with matching length, and embeddings must stay out of scope.
    pub fn validate_against(&self, model: &Model) -> Result<()> {
        let mut offenders = Vec::new();
        for (name, mask) in &self.masks {
            match model.params.get(name) {
                None => offenders.push(format!("{name:?} not in model")),
                Some(t) if t.data.len() != mask.len() => offenders.push(format!(
                    "{name:?} mask length {} vs parameter {}",
                    mask.len(),
                    t.data.len()
                )),
                Some(_) if is_embedding(name) => {
                    offenders.push(format!("{name:?} is an embedding table"))
                }
                Some(_) => {}
            }
        }
        if offenders.is_empty() {
            Ok(())
        } else {
            Err(Error::Contract(format!("mask set does not fit model: {}", offenders.join("; "))))
        }
    }
}

/// ⌊s·N⌋ with protection against decimal fractions landing a hair under
/// an integer (0.3·10 must prune 3 weights, not 2).
fn floor_count(s: f64, n: usize) -> usize {
    let exact = s * n as f64;
    let nearest = exact.round();
    if (exact - nearest).abs() < 1e-9 {
        nearest as usize
    } else {
        exact.floor() as usize
    }
}

/// Build masks over an explicit set of named tensors: the lowest-|w|
/// ⌊s·N⌋ coordinates of the pooled population are zeroed, ordering ties
/// by (|w|, name, flat index).
pub fn mask_from_tensors(tensors: &[(&str, &[f64])], s: f64) -> Result<MaskSet> {
    if !(0.0..1.0).contains(&s) {
        return Err(Error::Contract(format!("sparsity {s} outside [0,1)")));
    }
    let n: usize = tensors.iter().map(|(_, d)| d.len()).sum();
    if n == 0 {
        return Err(Error::Contract("no weights to prune".to_string()));
    }
    let mut order: Vec<(f64, &str, usize)> = Vec::with_capacity(n);
    for (name, data) in tensors {
        for (i, &v) in data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite { op: "magnitude_mask" });
            }
            order.push((v.abs(), name, i));
        }
    }
    order.sort_unstable_by(|a, b| {
        a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)).then_with(|| a.2.cmp(&b.2))
    });

    let mut masks: IndexMap<String, Vec<bool>> =
        tensors.iter().map(|(name, data)| (name.to_string(), vec![true; data.len()])).collect();
    for &(_, name, i) in &order[..floor_count(s, n)] {
        masks[name][i] = false;
    }
    Ok(MaskSet { target_sparsity: s, masks })
}

/// Masks for every non-embedding parameter of a model at sparsity `s`.
pub fn magnitude_mask(model: &Model, s: f64) -> Result<MaskSet> {
    let tensors: Vec<(&str, &[f64])> = model
        .params
        .iter()
        .filter(|(name, _)| !is_embedding(name))
        .map(|(name, t)| (name.as_str(), t.data.as_slice()))
        .collect();
    mask_from_tensors(&tensors, s)
}

/// Zero every masked coordinate in place. Unmasked values and uncovered
/// tensors are untouched.
pub fn apply_masks(model: &mut Model, masks: &MaskSet) -> Result<()> {
    masks.validate_against(model)?;
    for (name, mask) in &masks.masks {
        let data = &mut model.params[name].data;
        for (v, &keep) in data.iter_mut().zip(mask) {
            if !keep {
                *v = 0.0;
            }
        }
    }
    Ok(())
}

/// One line of a density report; the final row aggregates the whole
/// model, embeddings included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityRow {
    pub layer: String,
    pub kept: usize,
    pub pruned: usize,
    pub density: f64,
}

/// Per-tensor and aggregate densities. Covered tensors are counted by
/// mask; uncovered ones (the embeddings) count as fully dense.
pub fn sparsity_report(model: &Model, masks: &MaskSet) -> Result<Vec<SparsityRow>> {
    masks.validate_against(model)?;
    let mut rows = Vec::with_capacity(model.params.len() + 1);
    let (mut kept_total, mut all_total) = (0usize, 0usize);
    for (name, t) in &model.params {
        let len = t.data.len();
        let kept = match masks.get(name) {
            Some(mask) => mask.iter().filter(|&&b| b).count(),
            None => len,
        };
        rows.push(SparsityRow {
            layer: name.clone(),
            kept,
            pruned: len - kept,
            density: kept as f64 / len as f64,
        });
        kept_total += kept;
        all_total += len;
    }
    rows.push(SparsityRow {
        layer: "total".to_string(),
        kept: kept_total,
        pruned: all_total - kept_total,
        density: kept_total as f64 / all_total as f64,
    });
    Ok(rows)
}

pub fn report_csv(rows: &[SparsityRow]) -> String {
    let mut out = String::from("layer,kept,pruned,density\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.layer, r.kept, r.pruned, r.density));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Variant};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn tiny_model() -> Model {
        let cfg = ModelConfig {
            image_h: 16,
            image_w: 16,
            patch: 8,
            d_enc: 8,
            d_dec: 8,
            n_enc_layers: 1,
            n_dec_layers: 1,
            n_heads: 2,
            d_ff: 16,
            vocab_size: 7,
            max_len: 6,
            adapter_bottleneck: None,
        };
        Model::init(cfg, Variant::Teacher, 3).unwrap()
    }

    #[test]
    fn keeps_the_largest_magnitudes_across_tensors() {
        let a = [0.1, -0.5];
        let b = [0.3, -0.2];
        let masks = mask_from_tensors(&[("A", &a), ("B", &b)], 0.5).unwrap();
        assert_eq!(masks.get("A").unwrap(), &[false, true]);
        assert_eq!(masks.get("B").unwrap(), &[true, false]);
        assert_eq!(masks.zero_count(), 2);
    }

    #[test]
    fn zero_sparsity_keeps_everything() {
        let model = tiny_model();
        let masks = magnitude_mask(&model, 0.0).unwrap();
        assert_eq!(masks.zero_count(), 0);
        assert!(masks.masks.values().all(|m| m.iter().all(|&b| b)));
    }

    #[test]
    fn sparsity_bounds_are_enforced() {
        let model = tiny_model();
        assert!(magnitude_mask(&model, 1.0).is_err());
        assert!(magnitude_mask(&model, -0.1).is_err());
        assert!(magnitude_mask(&model, 0.999).is_ok());
    }

    #[test]
    fn achieves_exactly_the_floor_count_and_matches_a_full_sort() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let w1: Vec<f64> = (0..600).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w2: Vec<f64> = (0..400).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let masks = mask_from_tensors(&[("p", &w1), ("q", &w2)], 0.37).unwrap();
        assert_eq!(masks.zero_count(), 370);

        // Independent oracle: a coordinate is pruned iff fewer than 370
        // coordinates precede it in the (|w|, name, index) order.
        let all: Vec<(f64, &str, usize)> = w1
            .iter()
            .enumerate()
            .map(|(i, &v)| (v.abs(), "p", i))
            .chain(w2.iter().enumerate().map(|(i, &v)| (v.abs(), "q", i)))
            .collect();
        let rank = |probe: &(f64, &str, usize)| {
            all.iter()
                .filter(|o| {
                    o.0.total_cmp(&probe.0)
                        .then_with(|| o.1.cmp(probe.1))
                        .then_with(|| o.2.cmp(&probe.2))
                        .is_lt()
                })
                .count()
        };
        for probe in &all {
            let expect_zero = rank(probe) < 370;
            let kept = masks.get(probe.1).unwrap()[probe.2];
            assert_eq!(!kept, expect_zero, "{probe:?}");
        }
    }

    #[test]
    fn tied_magnitudes_break_by_name_then_index() {
        let a = [0.5, 0.5];
        let b = [0.5, 0.5];
        // One zero out of four equal magnitudes: "a"[0] must lose.
        let masks = mask_from_tensors(&[("b", &b), ("a", &a)], 0.25).unwrap();
        assert_eq!(masks.get("a").unwrap(), &[false, true]);
        assert_eq!(masks.get("b").unwrap(), &[true, true]);
    }

    #[test]
    fn zero_sets_nest_as_sparsity_grows() {
        let model = tiny_model();
        let mut previous: Option<MaskSet> = None;
        for tenths in 1..=9 {
            let masks = magnitude_mask(&model, tenths as f64 / 10.0).unwrap();
            if let Some(prev) = &previous {
                for (name, mask) in &prev.masks {
                    for (i, &keep) in mask.iter().enumerate() {
                        if !keep {
                            assert!(!masks.masks[name][i], "{name}[{i}] resurrected at s={tenths}/10");
                        }
                    }
                }
            }
            previous = Some(masks);
        }
    }

    #[test]
    fn embeddings_are_never_in_scope() {
        let model = tiny_model();
        let masks = magnitude_mask(&model, 0.9).unwrap();
        for name in ["embed.tok", "enc.pos", "dec.pos"] {
            assert!(masks.get(name).is_none(), "{name} must not be masked");
        }
        assert!(masks.get("embed.patch.w").is_some(), "projections are in scope");
    }

    #[test]
    fn applying_masks_zeroes_exactly_the_masked_coordinates() {
        let mut model = tiny_model();
        let masks = magnitude_mask(&model, 0.5).unwrap();
        let before = model.params["head.w"].data.clone();
        apply_masks(&mut model, &masks).unwrap();
        let mask = masks.get("head.w").unwrap();
        for (i, &v) in model.params["head.w"].data.iter().enumerate() {
            if mask[i] {
                assert_eq!(v, before[i]);
            } else {
                assert_eq!(v.to_bits(), 0.0f64.to_bits(), "masked weight must be +0.0");
            }
        }
        // Counting oracle over the whole model.
        let n: usize = masks.covered_len();
        let kept_expected = n - masks.zero_count();
        assert_eq!(model.count_params().nonzero_non_embedding, kept_expected);
    }

    #[test]
    fn mask_mismatches_are_rejected_with_names() {
        let mut model = tiny_model();
        let mut masks = magnitude_mask(&model, 0.2).unwrap();
        masks.masks.insert("ghost.w".to_string(), vec![true; 4]);
        let err = apply_masks(&mut model, &masks).unwrap_err().to_string();
        assert!(err.contains("ghost.w"), "{err}");

        let mut masks = magnitude_mask(&model, 0.2).unwrap();
        masks.masks["head.w"].pop();
        assert!(apply_masks(&mut model, &masks).is_err());

        let mut masks = magnitude_mask(&model, 0.2).unwrap();
        masks.masks.insert("embed.tok".to_string(), vec![true; model.params["embed.tok"].data.len()]);
        assert!(apply_masks(&mut model, &masks).is_err(), "embedding in scope must be rejected");
    }

    #[test]
    fn report_densities_and_aggregate_are_exact() {
        let mut model = tiny_model();
        let full = magnitude_mask(&model, 0.0).unwrap();
        let rows = sparsity_report(&model, &full).unwrap();
        assert!(rows.iter().all(|r| r.density == 1.0));

        let masks = magnitude_mask(&model, 0.5).unwrap();
        apply_masks(&mut model, &masks).unwrap();
        let rows = sparsity_report(&model, &masks).unwrap();
        let total = rows.last().unwrap();
        assert_eq!(total.layer, "total");
        let counts = model.count_params();
        let expected_kept = counts.embedding + counts.nonzero_non_embedding;
        assert_eq!(total.kept, expected_kept);
        assert_eq!(total.kept + total.pruned, counts.total);
        assert_eq!(total.density, expected_kept as f64 / counts.total as f64);

        // e + (1−e)·(1−s) with the exact floor count.
        let n = masks.covered_len();
        let zeros = masks.zero_count();
        assert_eq!(zeros, n / 2);
        let aggregate = (counts.embedding + n - zeros) as f64 / counts.total as f64;
        assert_eq!(total.density, aggregate);
    }

    #[test]
    fn csv_has_the_expected_header_and_row_count() {
        let model = tiny_model();
        let masks = magnitude_mask(&model, 0.3).unwrap();
        let rows = sparsity_report(&model, &masks).unwrap();
        let csv = report_csv(&rows);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("layer,kept,pruned,density"));
        assert_eq!(csv.lines().count(), rows.len() + 1);
    }
}
