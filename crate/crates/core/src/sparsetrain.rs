//! Hardware-adapted Dropback training state.
//!
//! Only the top accumulated-gradient weights are ever stored (the tracked
//! set); every other weight is recomputed on demand from a stateless
//! pseudo-random generator and decays by a factor `lambda` per iteration until
//! it reaches exact zero at `cutoff_t`. Selection into the tracked set is
//! threshold-based using the streaming quantile estimate instead of a global
//! sort; an exact sort-based selector is kept alongside as the fidelity
//! oracle.

use std::collections::{BTreeSet, HashMap};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::quantile::QuantileEstimator;
use crate::rng::{mix64, xorshift32};
use crate::workload::LayerKind;
use crate::Result;

/// Default decay factor for the initial-weight scaffold.
pub const DEFAULT_LAMBDA: f32 = 0.9;
/// Default iteration at which recomputed initial weights become exactly zero.
/// Decay factors below 1e-45 would underflow f32 anyway; the hard cutoff makes
/// zeroness exact.
pub const DEFAULT_CUTOFF_T: u64 = 1000;
/// Tracked-set headroom over the target count; keeps achieved density within
/// the 1.45x drift envelope observed for threshold-based selection.
pub const DEFAULT_TRACK_SLACK: f32 = 1.4;

/// Initialization scale for one layer. Conv layers feeding ReLU use the
/// Kaiming formula, fc layers the Xavier one; the generator's raw sum of three
/// uniforms has unit variance, so the scale is exactly the target std-dev.
pub fn init_scale(kind: LayerKind, fan_in: usize, fan_out: usize) -> f32 {
    match kind {
        LayerKind::Conv => (2.0 / fan_in as f32).sqrt(),
        LayerKind::Fc => (2.0 / (fan_in + fan_out) as f32).sqrt(),
    }
}

/// Stateless initial-weight generator for one layer (the per-PE WR unit).
///
/// `value(index, t)` is a pure function of `(seed, index, t)`: three xorshift32
/// streams (shift triple 13/17/5), each seeded by a fixed mix of
/// `(seed, index, stream)`, produce one 32-bit word each; the words are mapped
/// to [-1, 1), summed (approximately Gaussian), scaled, and decayed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightRecompute {
    pub seed: u64,
    pub scale: f32,
    pub lambda: f32,
    pub cutoff_t: u64,
}

impl WeightRecompute {
    pub fn new(seed: u64, scale: f32, lambda: f32, cutoff_t: u64) -> Self {
        Self { seed, scale, lambda, cutoff_t }
    }

    /// Undecayed initial value for one weight index.
    pub fn base_value(&self, index: usize) -> f32 {
        let mut sum = 0.0f32;
        for stream in 0..3u64 {
            let mixed = mix64(
                self.seed
                    ^ (index as u64).wrapping_mul(0xa076_1d64_78bd_642f)
                    ^ stream.wrapping_mul(0xe703_7ed1_a0b4_28db),
            );
            let mut state = mixed as u32;
            if state == 0 {
                state = 0x9e37_79b9;
            }
            let word = xorshift32(state);
            // Map the 32-bit word to [-1, 1).
            sum += word as f32 * (1.0 / 2_147_483_648.0) - 1.0;
        }
        sum * self.scale
    }

    /// Initial value decayed to iteration `t`; exactly zero at or past the
    /// cutoff. The decay is applied by repeated multiplication so
    /// `value(i, t+1) == lambda * value(i, t)` holds bit-for-bit (the same
    /// recurrence an incrementally maintained scaffold uses).
    pub fn value(&self, index: usize, t: u64) -> f32 {
        if t >= self.cutoff_t {
            return 0.0;
        }
        let mut v = self.base_value(index);
        for _ in 0..t {
            v *= self.lambda;
        }
        v
    }
}

/// Per-layer weight bookkeeping inside the training state.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub offset: usize,
    pub count: usize,
    pub wr: WeightRecompute,
}

/// Layer descriptor used to build a `TrainState`.
#[derive(Debug, Clone, Copy)]
pub struct LayerInit {
    pub kind: LayerKind,
    pub count: usize,
    pub fan_in: usize,
    pub fan_out: usize,
}

/// Sparse-training hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SparseConfig {
    /// Fraction of weights allowed to be tracked (1 / sparsity factor).
    pub target_density: f32,
    /// Tracked-set capacity headroom over the target count.
    pub track_slack: f32,
    /// Learning rate.
    pub eta: f32,
    /// Initial-weight decay per iteration; 1.0 disables decay.
    pub lambda: f32,
    /// Iteration at which recomputed weights become exactly zero;
    /// `u64::MAX` disables the cutoff.
    pub cutoff_t: u64,
    pub seed: u64,
}

impl SparseConfig {
    pub fn new(target_density: f32, eta: f32, seed: u64) -> Self {
        Self {
            target_density,
            track_slack: DEFAULT_TRACK_SLACK,
            eta,
            lambda: DEFAULT_LAMBDA,
            cutoff_t: DEFAULT_CUTOFF_T,
            seed,
        }
    }

    /// Disable initial-weight decay (the original tracked/pruned scheme).
    pub fn without_decay(mut self) -> Self {
        self.lambda = 1.0;
        self.cutoff_t = u64::MAX;
        self
    }
}

/// Dropback training state: tracked accumulated updates, the quantile
/// estimator producing the selection threshold, and per-layer recompute seeds.
/// Stored state is O(tracked), never O(total weights).
#[derive(Debug, Clone)]
pub struct TrainState {
    layers: Vec<LayerWeights>,
    total: usize,
    /// weight index -> accumulated update (sum of -eta * gradient).
    tracked: HashMap<usize, f32>,
    /// (|accumulated| bits, index); ordered min-first for eviction.
    by_magnitude: BTreeSet<(u32, usize)>,
    estimator: QuantileEstimator,
    capacity: usize,
    target_density: f32,
    eta: f32,
    t: u64,
}

#[inline]
fn mag_bits(acc: f32) -> u32 {
    acc.abs().to_bits()
}

impl TrainState {
    pub fn new(layer_inits: &[LayerInit], cfg: &SparseConfig) -> Self {
        let mut layers = Vec::with_capacity(layer_inits.len());
        let mut offset = 0usize;
        for (i, li) in layer_inits.iter().enumerate() {
            let seed = mix64(cfg.seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            let scale = init_scale(li.kind, li.fan_in, li.fan_out);
            layers.push(LayerWeights {
                offset,
                count: li.count,
                wr: WeightRecompute::new(seed, scale, cfg.lambda, cfg.cutoff_t),
            });
            offset += li.count;
        }
        let total = offset;
        let capacity = if cfg.target_density >= 1.0 {
            total
        } else {
            ((total as f64 * cfg.target_density as f64 * cfg.track_slack as f64).floor()
                as usize)
                .min(total)
        };
        let q = (1.0 - cfg.target_density).clamp(1e-3, 1.0 - 1e-3);
        Self {
            layers,
            total,
            tracked: HashMap::new(),
            by_magnitude: BTreeSet::new(),
            estimator: QuantileEstimator::new(q),
            capacity,
            target_density: cfg.target_density,
            eta: cfg.eta,
            t: 0,
        }
    }

    #[inline]
    pub fn total_weights(&self) -> usize {
        self.total
    }

    #[inline]
    pub fn tracked_len(&self) -> usize {
        self.tracked.len()
    }

    #[inline]
    pub fn capacity(&self) -> usize {
        self.capacity
    }

    #[inline]
    pub fn iteration(&self) -> u64 {
        self.t
    }

    #[inline]
    pub fn threshold(&self) -> f32 {
        self.estimator.threshold()
    }

    #[inline]
    pub fn target_density(&self) -> f32 {
        self.target_density
    }

    #[inline]
    pub fn eta(&self) -> f32 {
        self.eta
    }

    pub fn layers(&self) -> &[LayerWeights] {
        &self.layers
    }

    /// Tracked fraction of all weights.
    pub fn density(&self) -> f64 {
        self.tracked.len() as f64 / self.total as f64
    }

    /// Accumulated update of a tracked weight, if tracked.
    pub fn tracked_acc(&self, index: usize) -> Option<f32> {
        self.tracked.get(&index).copied()
    }

    /// All tracked entries as (global index, accumulated update), in arbitrary
    /// order; suitable only for order-independent consumers (overlays).
    pub fn tracked_iter(&self) -> impl Iterator<Item = (usize, f32)> + '_ {
        self.tracked.iter().map(|(&i, &a)| (i, a))
    }

    /// Tracked entries within one layer as (local index, accumulated update).
    pub fn tracked_in_layer(&self, li: usize) -> Vec<(usize, f32)> {
        let l = &self.layers[li];
        let mut out: Vec<(usize, f32)> = self
            .tracked
            .iter()
            .filter(|(&i, _)| i >= l.offset && i < l.offset + l.count)
            .map(|(&i, &a)| (i - l.offset, a))
            .collect();
        out.sort_by_key(|e| e.0);
        out
    }

    /// Locate the layer owning a global weight index.
    pub fn layer_of(&self, index: usize) -> (usize, usize) {
        debug_assert!(index < self.total);
        let li = self
            .layers
            .partition_point(|l| l.offset + l.count <= index)
            .min(self.layers.len() - 1);
        (li, index - self.layers[li].offset)
    }

    /// Effective weight value at iteration `t`: the decayed initial value,
    /// plus the accumulated update when tracked. Untracked weights are exactly
    /// zero once the decay cutoff has passed.
    pub fn effective_weight(&self, index: usize, t: u64) -> f32 {
        let (li, local) = self.layer_of(index);
        let scaffold = self.layers[li].wr.value(local, t);
        match self.tracked.get(&index) {
            Some(acc) => acc + scaffold,
            None => scaffold,
        }
    }

    fn remove_index(&mut self, index: usize) {
        if let Some(acc) = self.tracked.remove(&index) {
            self.by_magnitude.remove(&(mag_bits(acc), index));
        }
    }

    fn insert_index(&mut self, index: usize, acc: f32) {
        self.tracked.insert(index, acc);
        self.by_magnitude.insert((mag_bits(acc), index));
    }

    /// One training iteration over the full gradient vector (one value per
    /// weight, in global index order).
    ///
    /// Tracked weights accumulate `-eta * g` and feed their new magnitude to
    /// the estimator. Untracked weights whose update magnitude exceeds the
    /// current threshold are inserted, evicting the minimum-magnitude tracked
    /// entry when the capacity bound would be exceeded; every candidate
    /// magnitude feeds the estimator whether or not it is inserted.
    pub fn train_step(&mut self, gradients: &[f32]) -> Result<()> {
        if gradients.len() != self.total {
            return Err(Error::ShapeMismatch(format!(
                "gradient vector has {} entries, state tracks {} weights",
                gradients.len(),
                self.total
            )));
        }
        let dense = self.capacity == self.total;
        for (index, &g) in gradients.iter().enumerate() {
            let d = -self.eta * g;
            if let Some(acc) = self.tracked.get(&index).copied() {
                let new_acc = acc + d;
                self.by_magnitude.remove(&(mag_bits(acc), index));
                self.by_magnitude.insert((mag_bits(new_acc), index));
                self.tracked.insert(index, new_acc);
                self.estimator.update(new_acc.abs());
            } else {
                let mag = d.abs();
                if dense || mag > self.estimator.threshold() {
                    if self.tracked.len() >= self.capacity {
                        let &(_, min_idx) =
                            self.by_magnitude.iter().next().expect("tracked set non-empty");
                        self.remove_index(min_idx);
                    }
                    self.insert_index(index, d);
                }
                self.estimator.update(mag);
            }
        }
        self.t += 1;
        Ok(())
    }

    /// Fraction of the exact top-k keep set (by the same magnitudes the
    /// threshold scheme sees) that is currently tracked. Call with the
    /// gradients just consumed by `train_step`.
    pub fn keep_overlap(&self, gradients: &[f32]) -> f64 {
        let k = ((self.total as f64) * self.target_density as f64).round() as usize;
        if k == 0 {
            return 1.0;
        }
        let mags: Vec<f32> = (0..self.total)
            .map(|i| match self.tracked.get(&i) {
                Some(acc) => acc.abs(),
                None => (self.eta * gradients[i]).abs(),
            })
            .collect();
        let keep = select_sort_oracle(&mags, k);
        let hit = keep.iter().filter(|i| self.tracked.contains_key(i)).count();
        hit as f64 / k as f64
    }

    // -- checkpoint io ------------------------------------------------------

    /// Versioned binary checkpoint: iteration, config, per-layer seeds,
    /// estimator state, and the tracked map (sorted by index). Size is
    /// O(tracked), never O(total).
    pub fn save_checkpoint<W: Write>(&self, w: &mut W, config_hash: &[u8; 32]) -> Result<()> {
        w.write_all(b"DBCK")?;
        w.write_all(&1u32.to_le_bytes())?;
        w.write_all(config_hash)?;
        w.write_all(&self.t.to_le_bytes())?;
        w.write_all(&self.eta.to_bits().to_le_bytes())?;
        w.write_all(&self.target_density.to_bits().to_le_bytes())?;
        w.write_all(&(self.capacity as u64).to_le_bytes())?;
        w.write_all(&(self.total as u64).to_le_bytes())?;
        w.write_all(&(self.layers.len() as u32).to_le_bytes())?;
        for l in &self.layers {
            w.write_all(&(l.offset as u64).to_le_bytes())?;
            w.write_all(&(l.count as u64).to_le_bytes())?;
            w.write_all(&l.wr.seed.to_le_bytes())?;
            w.write_all(&l.wr.scale.to_bits().to_le_bytes())?;
            w.write_all(&l.wr.lambda.to_bits().to_le_bytes())?;
            w.write_all(&l.wr.cutoff_t.to_le_bytes())?;
        }
        let (q, rho, q_hat_bits, n) = self.estimator.to_raw();
        w.write_all(&q.to_bits().to_le_bytes())?;
        w.write_all(&rho.to_bits().to_le_bytes())?;
        w.write_all(&q_hat_bits.to_le_bytes())?;
        w.write_all(&n.to_le_bytes())?;
        w.write_all(&(self.tracked.len() as u64).to_le_bytes())?;
        let mut entries: Vec<(usize, f32)> =
            self.tracked.iter().map(|(&i, &a)| (i, a)).collect();
        entries.sort_by_key(|e| e.0);
        for (i, a) in entries {
            w.write_all(&(i as u64).to_le_bytes())?;
            w.write_all(&a.to_bits().to_le_bytes())?;
        }
        Ok(())
    }

    /// Restore a checkpoint written by `save_checkpoint`; returns the state
    /// and the recorded config hash.
    pub fn load_checkpoint<R: Read>(r: &mut R) -> Result<(Self, [u8; 32])> {
        let bad = |m: &str| Error::BadCheckpoint(m.to_string());
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"DBCK" {
            return Err(bad("magic mismatch"));
        }
        let mut u32b = [0u8; 4];
        let mut u64b = [0u8; 8];
        r.read_exact(&mut u32b)?;
        if u32::from_le_bytes(u32b) != 1 {
            return Err(bad("unsupported version"));
        }
        let mut config_hash = [0u8; 32];
        r.read_exact(&mut config_hash)?;
        r.read_exact(&mut u64b)?;
        let t = u64::from_le_bytes(u64b);
        r.read_exact(&mut u32b)?;
        let eta = f32::from_bits(u32::from_le_bytes(u32b));
        r.read_exact(&mut u32b)?;
        let target_density = f32::from_bits(u32::from_le_bytes(u32b));
        r.read_exact(&mut u64b)?;
        let capacity = u64::from_le_bytes(u64b) as usize;
        r.read_exact(&mut u64b)?;
        let total = u64::from_le_bytes(u64b) as usize;
        r.read_exact(&mut u32b)?;
        let n_layers = u32::from_le_bytes(u32b) as usize;
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            r.read_exact(&mut u64b)?;
            let offset = u64::from_le_bytes(u64b) as usize;
            r.read_exact(&mut u64b)?;
            let count = u64::from_le_bytes(u64b) as usize;
            r.read_exact(&mut u64b)?;
            let seed = u64::from_le_bytes(u64b);
            r.read_exact(&mut u32b)?;
            let scale = f32::from_bits(u32::from_le_bytes(u32b));
            r.read_exact(&mut u32b)?;
            let lambda = f32::from_bits(u32::from_le_bytes(u32b));
            r.read_exact(&mut u64b)?;
            let cutoff_t = u64::from_le_bytes(u64b);
            layers.push(LayerWeights {
                offset,
                count,
                wr: WeightRecompute::new(seed, scale, lambda, cutoff_t),
            });
        }
        if layers.iter().map(|l| l.count).sum::<usize>() != total {
            return Err(bad("layer counts disagree with total"));
        }
        r.read_exact(&mut u32b)?;
        let q = f32::from_bits(u32::from_le_bytes(u32b));
        r.read_exact(&mut u32b)?;
        let rho = f32::from_bits(u32::from_le_bytes(u32b));
        r.read_exact(&mut u32b)?;
        let q_hat_bits = u32::from_le_bytes(u32b);
        r.read_exact(&mut u64b)?;
        let n = u64::from_le_bytes(u64b);
        let estimator = QuantileEstimator::from_raw(q, rho, q_hat_bits, n);
        r.read_exact(&mut u64b)?;
        let n_tracked = u64::from_le_bytes(u64b) as usize;
        if n_tracked > total {
            return Err(bad("tracked count exceeds total"));
        }
        let mut tracked = HashMap::with_capacity(n_tracked);
        let mut by_magnitude = BTreeSet::new();
        for _ in 0..n_tracked {
            r.read_exact(&mut u64b)?;
            let index = u64::from_le_bytes(u64b) as usize;
            r.read_exact(&mut u32b)?;
            let acc = f32::from_bits(u32::from_le_bytes(u32b));
            if index >= total {
                return Err(bad("tracked index out of range"));
            }
            by_magnitude.insert((mag_bits(acc), index));
            tracked.insert(index, acc);
        }
        Ok((
            Self {
                layers,
                total,
                tracked,
                by_magnitude,
                estimator,
                capacity,
                target_density,
                eta,
                t,
            },
            config_hash,
        ))
    }
}

impl PartialEq for TrainState {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
            && self.total == other.total
            && self.tracked == other.tracked
            && self.estimator == other.estimator
            && self.capacity == other.capacity
            && self.t == other.t
    }
}

/// Dense materialization of the recomputed initial-weight scaffold, one
/// buffer per layer. This is the trainer's working memory (like activations),
/// maintained by the exact per-iteration decay recurrence; it is never part of
/// the persistent training state and can be rebuilt from the seeds at any
/// iteration.
#[derive(Debug, Clone)]
pub struct Scaffold {
    buffers: Vec<Vec<f32>>,
    t: u64,
}

impl Scaffold {
    pub fn new(state: &TrainState, t: u64) -> Self {
        let buffers = state
            .layers()
            .iter()
            .map(|l| (0..l.count).map(|i| l.wr.value(i, t)).collect())
            .collect();
        Self { buffers, t }
    }

    #[inline]
    pub fn t(&self) -> u64 {
        self.t
    }

    #[inline]
    pub fn layer(&self, li: usize) -> &[f32] {
        &self.buffers[li]
    }

    /// Advance one iteration: multiply by lambda, or zero everything once the
    /// cutoff is reached. Bit-identical to rebuilding from `value(i, t+1)`.
    pub fn advance(&mut self, state: &TrainState) {
        self.t += 1;
        for (buf, l) in self.buffers.iter_mut().zip(state.layers()) {
            if self.t >= l.wr.cutoff_t {
                buf.fill(0.0);
            } else {
                for v in buf.iter_mut() {
                    *v *= l.wr.lambda;
                }
            }
        }
    }
}

/// Exact top-k keep set by magnitude; ties broken by keeping the lower weight
/// index. Returns the kept indices in ascending order. This is the sorting
/// selector the threshold scheme replaces, retained as an oracle.
pub fn select_sort_oracle(magnitudes: &[f32], k: usize) -> Vec<usize> {
    assert!(k <= magnitudes.len(), "k exceeds weight count");
    let mut order: Vec<usize> = (0..magnitudes.len()).collect();
    order.sort_by(|&a, &b| {
        magnitudes[b]
            .partial_cmp(&magnitudes[a])
            .expect("magnitudes must be comparable")
            .then(a.cmp(&b))
    });
    let mut keep: Vec<usize> = order[..k].to_vec();
    keep.sort_unstable();
    keep
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::XorShift64;

    fn tiny_state(target_density: f32, eta: f32) -> TrainState {
        let layers = [LayerInit { kind: LayerKind::Fc, count: 10, fan_in: 5, fan_out: 2 }];
        TrainState::new(&layers, &SparseConfig::new(target_density, eta, 42))
    }

    #[test]
    fn recomputed_value_is_zero_at_cutoff() {
        let wr = WeightRecompute::new(7, 0.1, 0.9, 1000);
        for idx in [0usize, 3, 999] {
            assert_eq!(wr.value(idx, 1000), 0.0);
            assert_eq!(wr.value(idx, 5000), 0.0);
            assert_ne!(wr.value(idx, 999), 0.0);
        }
    }

    #[test]
    fn decay_recurrence_is_exact() {
        let wr = WeightRecompute::new(11, 0.05, 0.9, 1000);
        for idx in [0usize, 17, 400] {
            for t in [0u64, 1, 57, 998] {
                let stepped = wr.value(idx, t) * wr.lambda;
                assert_eq!(stepped.to_bits(), wr.value(idx, t + 1).to_bits());
            }
        }
    }

    #[test]
    fn recompute_is_pure() {
        let wr = WeightRecompute::new(99, 0.2, 0.9, 1000);
        for idx in 0..100 {
            assert_eq!(wr.value(idx, 13).to_bits(), wr.value(idx, 13).to_bits());
        }
    }

    #[test]
    fn generator_moments_match_sum_of_three_uniforms() {
        // Sum of three independent U[-1,1) has mean 0 and variance 3*(1/3)=1,
        // so after scaling the variance is scale^2.
        let scale = 0.25f32;
        let wr = WeightRecompute::new(123, scale, 0.9, 1000);
        let n = 100_000usize;
        let mut mean = 0.0f64;
        let mut m2 = 0.0f64;
        for i in 0..n {
            let v = wr.base_value(i) as f64;
            mean += v;
            m2 += v * v;
        }
        mean /= n as f64;
        let var = m2 / n as f64 - mean * mean;
        assert!(mean.abs() < 0.01 * scale as f64, "mean {mean}");
        let expect = (scale as f64) * (scale as f64);
        assert!((var - expect).abs() < 0.1 * expect, "var {var} vs {expect}");
    }

    #[test]
    fn scaffold_advance_matches_pointwise_recompute() {
        let layers = [
            LayerInit { kind: LayerKind::Conv, count: 64, fan_in: 9, fan_out: 16 },
            LayerInit { kind: LayerKind::Fc, count: 32, fan_in: 8, fan_out: 4 },
        ];
        let mut cfg = SparseConfig::new(0.2, 0.1, 5);
        cfg.cutoff_t = 10;
        let state = TrainState::new(&layers, &cfg);
        let mut scaffold = Scaffold::new(&state, 0);
        for t in 1..=12u64 {
            scaffold.advance(&state);
            for (li, l) in state.layers().iter().enumerate() {
                for i in 0..l.count {
                    assert_eq!(
                        scaffold.layer(li)[i].to_bits(),
                        l.wr.value(i, t).to_bits(),
                        "layer {li} idx {i} t {t}"
                    );
                }
            }
        }
    }

    #[test]
    fn sort_oracle_examples() {
        assert_eq!(select_sort_oracle(&[3.0, 1.0, 2.0], 2), vec![0, 2]);
        assert_eq!(select_sort_oracle(&[5.0, 5.0, 5.0], 1), vec![0]);
        assert_eq!(select_sort_oracle(&[1.0, 2.0], 0), Vec::<usize>::new());
    }

    #[test]
    fn sort_oracle_matches_brute_force() {
        let mut rng = XorShift64::new(8);
        let mags: Vec<f32> = (0..10_000).map(|_| rng.next_f32()).collect();
        let k = 2500;
        let keep = select_sort_oracle(&mags, k);
        // Brute force: full sort of (magnitude, index) pairs.
        let mut pairs: Vec<(f32, usize)> =
            mags.iter().copied().enumerate().map(|(i, m)| (m, i)).collect();
        pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let mut expect: Vec<usize> = pairs[..k].iter().map(|p| p.1).collect();
        expect.sort_unstable();
        assert_eq!(keep, expect);
    }

    #[test]
    fn below_threshold_gradients_track_nothing() {
        let mut st = tiny_state(0.5, 0.1);
        // Raise the threshold well above the candidates first.
        for _ in 0..2000 {
            st.estimator_mut_for_tests().update(1.0);
        }
        let grads = vec![1e-7f32; 10];
        st.train_step(&grads).unwrap();
        assert_eq!(st.tracked_len(), 0);
        assert_eq!(st.iteration(), 1);
    }

    #[test]
    fn single_large_gradient_is_tracked() {
        let mut st = tiny_state(0.5, 0.1);
        let mut grads = vec![0.0f32; 10];
        grads[3] = 2.0;
        st.train_step(&grads).unwrap();
        assert_eq!(st.tracked_len(), 1);
        let acc = st.tracked_acc(3).unwrap();
        assert_eq!(acc, -0.1 * 2.0);
        assert_eq!(acc.abs(), 0.2);
    }

    #[test]
    fn capacity_bound_holds_with_min_eviction() {
        let mut st = tiny_state(0.2, 1.0); // capacity = floor(10*0.2*1.4) = 2
        assert_eq!(st.capacity(), 2);
        let mut rng = XorShift64::new(3);
        for _ in 0..50 {
            let grads: Vec<f32> = (0..10).map(|_| rng.range_f32(-1.0, 1.0)).collect();
            st.train_step(&grads).unwrap();
            assert!(st.tracked_len() <= 2);
        }
        assert!(st.tracked_len() >= 1);
        assert!(st.density() <= 1.45 * 0.2);
    }

    #[test]
    fn eviction_removes_minimum_magnitude_entry() {
        let mut st = tiny_state(0.2, 1.0); // capacity 2
        let mut g = vec![0.0f32; 10];
        g[1] = 0.5;
        g[4] = 3.0;
        st.train_step(&g).unwrap();
        assert_eq!(st.tracked_len(), 2);
        // Push a third candidate above the threshold; index 1 holds the
        // minimum accumulated magnitude and must be the one evicted.
        let mut g2 = vec![0.0f32; 10];
        g2[7] = 2.0;
        st.train_step(&g2).unwrap();
        assert_eq!(st.tracked_len(), 2);
        assert!(st.tracked_acc(4).is_some());
        assert!(st.tracked_acc(7).is_some());
        assert!(st.tracked_acc(1).is_none());
    }

    #[test]
    fn dense_mode_tracks_everything() {
        let mut st = tiny_state(1.0, 0.5);
        assert_eq!(st.capacity(), 10);
        let grads = vec![1e-9f32; 10]; // far below any threshold
        st.train_step(&grads).unwrap();
        assert_eq!(st.tracked_len(), 10);
        // Plain SGD equivalence: accumulated update is -eta * g.
        assert_eq!(st.tracked_acc(0).unwrap(), -0.5 * 1e-9);
    }

    #[test]
    fn gradient_length_mismatch_errors() {
        let mut st = tiny_state(0.5, 0.1);
        assert!(st.train_step(&[0.0; 9]).is_err());
    }

    #[test]
    fn trajectories_are_deterministic() {
        let run = || {
            let mut st = tiny_state(0.3, 0.2);
            let mut rng = XorShift64::new(77);
            for _ in 0..200 {
                let grads: Vec<f32> = (0..10).map(|_| rng.range_f32(-1.0, 1.0)).collect();
                st.train_step(&grads).unwrap();
            }
            st
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        for i in 0..10 {
            assert_eq!(
                a.effective_weight(i, a.iteration()).to_bits(),
                b.effective_weight(i, b.iteration()).to_bits()
            );
        }
    }

    #[test]
    fn effective_weight_cases() {
        let layers = [LayerInit { kind: LayerKind::Fc, count: 10, fan_in: 5, fan_out: 2 }];
        let mut cfg = SparseConfig::new(0.5, 0.1, 42);
        cfg.cutoff_t = 5;
        let mut st = TrainState::new(&layers, &cfg);
        let mut grads = vec![0.0f32; 10];
        grads[2] = 4.0;
        st.train_step(&grads).unwrap();
        // Untracked past the cutoff: exactly zero.
        assert_eq!(st.effective_weight(0, 5), 0.0);
        assert_eq!(st.effective_weight(0, 100), 0.0);
        // Tracked past the cutoff: the bare accumulated update.
        assert_eq!(st.effective_weight(2, 5), -0.1 * 4.0);
        // Before the cutoff the decayed scaffold is added in.
        let wr = st.layers()[0].wr.clone();
        assert_eq!(st.effective_weight(2, 1), -0.1 * 4.0 + wr.value(2, 1));
        assert_eq!(st.effective_weight(0, 1), wr.value(0, 1));
    }

    #[test]
    fn density_of_effective_weights_matches_tracked_count() {
        let layers = [LayerInit { kind: LayerKind::Fc, count: 200, fan_in: 20, fan_out: 10 }];
        let mut cfg = SparseConfig::new(0.2, 0.5, 9);
        cfg.cutoff_t = 3;
        let mut st = TrainState::new(&layers, &cfg);
        let mut rng = XorShift64::new(31);
        for _ in 0..10 {
            let grads: Vec<f32> = (0..200).map(|_| rng.range_f32(-1.0, 1.0)).collect();
            st.train_step(&grads).unwrap();
        }
        // Past the cutoff, non-zero effective weights are exactly the tracked set.
        let t = st.iteration().max(3);
        let nonzero = (0..200).filter(|&i| st.effective_weight(i, t) != 0.0).count();
        assert_eq!(nonzero, st.tracked_len());
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact_and_small() {
        let layers = [
            LayerInit { kind: LayerKind::Conv, count: 500, fan_in: 9, fan_out: 16 },
            LayerInit { kind: LayerKind::Fc, count: 300, fan_in: 30, fan_out: 10 },
        ];
        let mut st = TrainState::new(&layers, &SparseConfig::new(0.1, 0.3, 17));
        let mut rng = XorShift64::new(55);
        for _ in 0..30 {
            let grads: Vec<f32> = (0..800).map(|_| rng.range_f32(-1.0, 1.0)).collect();
            st.train_step(&grads).unwrap();
        }
        let hash = [7u8; 32];
        let mut buf = Vec::new();
        st.save_checkpoint(&mut buf, &hash).unwrap();
        let (back, h) = TrainState::load_checkpoint(&mut &buf[..]).unwrap();
        assert_eq!(h, hash);
        assert_eq!(back, st);
        // O(tracked) size: header + layers + 12 bytes per tracked entry.
        let bound = 200 + 40 * st.layers().len() + 12 * st.tracked_len();
        assert!(buf.len() <= bound, "{} > {bound}", buf.len());
        // And decisively smaller than a dense dump would be.
        assert!(buf.len() < 4 * st.total_weights());
    }

    #[test]
    fn corrupt_checkpoint_is_rejected() {
        let st = tiny_state(0.5, 0.1);
        let mut buf = Vec::new();
        st.save_checkpoint(&mut buf, &[0u8; 32]).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(TrainState::load_checkpoint(&mut &bad[..]).is_err());
        let short = &buf[..buf.len() - 2];
        assert!(TrainState::load_checkpoint(&mut &short[..]).is_err());
    }

    impl TrainState {
        fn estimator_mut_for_tests(&mut self) -> &mut QuantileEstimator {
            &mut self.estimator
        }
    }
}
