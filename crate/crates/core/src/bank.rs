//! External-negative machinery: a momentum-averaged shadow copy of the
//! encoder and projection heads, and per-layer FIFO dictionaries of the
//! embeddings they produce.

use ndarray::{Array2, Array4};

use crate::error::{Error, Result};
use crate::networks::{project, Generator, HeadSet};
use crate::nn::HasParams;
use crate::scalar::Scalar;

pub const DEFAULT_MOMENTUM: f64 = 0.999;
pub const DEFAULT_QUEUE_CAPACITY: usize = 16384;
/// External negatives stay inactive until every layer holds this many rows.
pub const DEFAULT_WARMUP_ROWS: usize = 256;

/// Shadow encoder + heads updated as
/// `shadow = m * shadow + (1 - m) * live` after every step.
pub struct MomentumTwin<F: Scalar> {
    pub gen: Generator<F>,
    pub heads: HeadSet<F>,
    pub momentum: f64,
}

impl<F: Scalar> MomentumTwin<F> {
    /// Start from exact copies of the live networks.
    pub fn new(gen: &Generator<F>, heads: &HeadSet<F>, momentum: f64) -> Self {
        MomentumTwin { gen: gen.clone(), heads: heads.clone(), momentum }
    }

    pub fn update_from(&mut self, live_gen: &Generator<F>, live_heads: &HeadSet<F>) -> Result<()> {
        let m = F::from_f64c(self.momentum);
        self.gen.ema_from_snapshot(&live_gen.snapshot_values(), m)?;
        self.heads.ema_from_snapshot(&live_heads.snapshot_values(), m)?;
        Ok(())
    }

    /// Embed one sample's patches with the shadow networks (no gradients).
    pub fn embed(
        &self,
        image: &Array4<F>,
        indices: &[Vec<(usize, usize)>],
        sample: usize,
    ) -> Result<Vec<Array2<F>>> {
        let enc = self.gen.encode(image)?;
        let (set, _) = project(&enc.features, &self.heads, indices, sample)?;
        Ok(set.layers.into_iter().map(|l| l.embeddings).collect())
    }
}

struct LayerQueue<F: Scalar> {
    /// Row-major ring storage, `capacity * width` once full.
    data: Vec<F>,
    width: usize,
    head: usize,
    len: usize,
}

impl<F: Scalar> LayerQueue<F> {
    fn new(width: usize) -> Self {
        LayerQueue { data: Vec::new(), width, head: 0, len: 0 }
    }

    fn push_row(&mut self, row: &[F], capacity: usize) {
        if self.len < capacity {
            self.data.extend_from_slice(row);
            self.len += 1;
        } else {
            let w = self.width;
            self.data[self.head * w..(self.head + 1) * w].copy_from_slice(row);
            self.head = (self.head + 1) % capacity;
        }
    }

    /// All rows, oldest first.
    fn rows(&self) -> Array2<F> {
        let w = self.width;
        let mut out = Array2::<F>::zeros((self.len, w));
        for i in 0..self.len {
            let src = (self.head + i) % self.len.max(1);
            out.row_mut(i)
                .assign(&ndarray::ArrayView1::from(&self.data[src * w..(src + 1) * w]));
        }
        out
    }
}

/// Per-layer FIFO dictionary of unit-norm embedding rows.
pub struct NegativeQueue<F: Scalar> {
    layers: Vec<LayerQueue<F>>,
    pub capacity: usize,
}

impl<F: Scalar> NegativeQueue<F> {
    pub fn new(n_layers: usize, width: usize, capacity: usize) -> Self {
        NegativeQueue {
            layers: (0..n_layers).map(|_| LayerQueue::new(width)).collect(),
            capacity,
        }
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn len(&self, layer: usize) -> usize {
        self.layers[layer].len
    }

    pub fn is_empty(&self) -> bool {
        self.layers.iter().all(|l| l.len == 0)
    }

    /// True once every layer can serve at least `min_rows` negatives.
    pub fn is_warm(&self, min_rows: usize) -> bool {
        self.layers.iter().all(|l| l.len >= min_rows)
    }

    /// Append one batch of rows per layer, evicting oldest beyond capacity.
    /// Rows are renormalized so storage keeps the unit-norm invariant even
    /// under accumulated round-off.
    pub fn enqueue(&mut self, embeddings: &[Array2<F>]) -> Result<()> {
        if embeddings.len() != self.layers.len() {
            return Err(Error::invalid_argument(format!(
                "expected {} layers, got {}",
                self.layers.len(),
                embeddings.len()
            )));
        }
        for (lq, m) in self.layers.iter_mut().zip(embeddings) {
            if m.ncols() != lq.width {
                return Err(Error::invalid_argument(format!(
                    "embedding width {} != queue width {}",
                    m.ncols(),
                    lq.width
                )));
            }
            let mut buf = vec![F::zero(); lq.width];
            for row in m.rows() {
                let norm = row.dot(&row).sqrt();
                let inv = if norm > F::from_f64c(1e-12) { F::one() / norm } else { F::one() };
                for (b, &v) in buf.iter_mut().zip(row.iter()) {
                    *b = v * inv;
                }
                lq.push_row(&buf, self.capacity);
            }
        }
        Ok(())
    }

    /// Full current contents of one layer (all entries serve as negatives).
    pub fn sample_negatives(&self, layer: usize) -> Result<Array2<F>> {
        let lq = self
            .layers
            .get(layer)
            .ok_or_else(|| Error::invalid_state(format!("no queue layer {layer}")))?;
        if lq.len == 0 {
            return Err(Error::invalid_state(format!("queue layer {layer} is empty")));
        }
        Ok(lq.rows())
    }

    pub fn sample_all(&self) -> Result<Vec<Array2<F>>> {
        (0..self.layers.len()).map(|l| self.sample_negatives(l)).collect()
    }

    /// Snapshot for checkpointing, oldest first per layer.
    pub fn state_rows(&self) -> Vec<Array2<F>> {
        self.layers.iter().map(|l| l.rows()).collect()
    }

    pub fn restore_rows(&mut self, rows: &[Array2<F>]) -> Result<()> {
        if rows.len() != self.layers.len() {
            return Err(Error::InvalidCheckpoint(format!(
                "queue layer count {} != {}",
                rows.len(),
                self.layers.len()
            )));
        }
        for (lq, m) in self.layers.iter_mut().zip(rows) {
            if m.nrows() > self.capacity || (m.nrows() > 0 && m.ncols() != lq.width) {
                return Err(Error::InvalidCheckpoint("queue row shape mismatch".into()));
            }
            lq.data.clear();
            lq.head = 0;
            lq.len = m.nrows();
            for row in m.rows() {
                lq.data.extend(row.iter().copied());
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::GeneratorSpec;
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_rows(seed: u64, n: usize, k: usize) -> Array2<f64> {
        use rand_distr::Distribution;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = rand_distr::Normal::new(0.0, 1.0).unwrap();
        let mut m: Array2<f64> = Array2::from_shape_fn((n, k), |_| d.sample(&mut rng));
        for mut row in m.rows_mut() {
            let norm = row.dot(&row).sqrt();
            row.mapv_inplace(|v| v / norm);
        }
        m
    }

    #[test]
    fn momentum_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let gen: Generator<f64> = Generator::new(GeneratorSpec::resnet9(1), &mut rng).unwrap();
        let heads = HeadSet::new(&mut rng, &gen.tap_channels(), 4, 4);
        let gen2: Generator<f64> = Generator::new(GeneratorSpec::resnet9(1), &mut rng).unwrap();
        let heads2 = HeadSet::new(&mut rng, &gen2.tap_channels(), 4, 4);

        // m = 1: twin unchanged.
        let mut twin = MomentumTwin::new(&gen, &heads, 1.0);
        twin.update_from(&gen2, &heads2).unwrap();
        for (a, b) in twin.gen.snapshot_values().iter().zip(gen.snapshot_values()) {
            assert_eq!(a, &b);
        }
        // m = 0: twin equals live.
        let mut twin = MomentumTwin::new(&gen, &heads, 0.0);
        twin.update_from(&gen2, &heads2).unwrap();
        for (a, b) in twin.gen.snapshot_values().iter().zip(gen2.snapshot_values()) {
            assert_eq!(a, &b);
        }
        assert_eq!(DEFAULT_MOMENTUM, 0.999);
    }

    #[test]
    fn twin_converges_geometrically() {
        // With frozen live params, ||shadow - live|| after t steps scales as
        // m^t, checked at t in {1, 10, 100}.
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let gen: Generator<f64> = Generator::new(GeneratorSpec::resnet9(1), &mut rng).unwrap();
        let heads = HeadSet::new(&mut rng, &gen.tap_channels(), 4, 4);
        let live: Generator<f64> = Generator::new(GeneratorSpec::resnet9(1), &mut rng).unwrap();
        let live_heads = HeadSet::new(&mut rng, &live.tap_channels(), 4, 4);
        let m = 0.9;
        let mut twin = MomentumTwin::new(&gen, &heads, m);
        let dist = |twin: &MomentumTwin<f64>| -> f64 {
            let mut acc = 0.0;
            for (a, b) in twin.gen.snapshot_values().iter().zip(live.snapshot_values()) {
                acc += a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
            }
            for (a, b) in twin.heads.snapshot_values().iter().zip(live_heads.snapshot_values()) {
                acc += a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
            }
            acc.sqrt()
        };
        let d0 = dist(&twin);
        let mut t = 0usize;
        for target in [1usize, 10, 100] {
            while t < target {
                twin.update_from(&live, &live_heads).unwrap();
                t += 1;
            }
            let expected = d0 * m.powi(target as i32);
            let got = dist(&twin);
            assert!(
                (got - expected).abs() / expected < 1e-6,
                "t={target}: {got} vs {expected}"
            );
        }
    }

    #[test]
    fn fifo_capacity_arithmetic() {
        // 64 pushes of 256 rows at capacity 16384 exactly fill the queue;
        // push 65 evicts the first 256 rows.
        let mut q: NegativeQueue<f32> = NegativeQueue::new(1, 4, 16384);
        for push in 0..65 {
            let m = Array2::from_shape_fn((256, 4), |(r, c)| {
                if c == 0 { 1.0 } else { (push * 256 + r) as f32 * 0.0 }
            });
            // Encode the push/row id in a normalized 2d payload.
            let mut m2 = m;
            for (r, mut row) in m2.rows_mut().into_iter().enumerate() {
                let id = (push * 256 + r) as f32;
                row[0] = (1.0 + id * id).sqrt().recip() * 1.0;
                row[1] = (1.0 + id * id).sqrt().recip() * id;
                row[2] = 0.0;
                row[3] = 0.0;
            }
            q.enqueue(&[m2]).unwrap();
            if push == 63 {
                assert_eq!(q.len(0), 16384);
            }
        }
        assert_eq!(q.len(0), 16384);
        let rows = q.sample_negatives(0).unwrap();
        // Oldest surviving row must be global row 256 (first push evicted).
        let ratio = rows[(0, 1)] / rows[(0, 0)];
        assert!((ratio - 256.0).abs() < 1e-3, "{ratio}");
        assert_eq!(DEFAULT_QUEUE_CAPACITY, 16384);
    }

    #[test]
    fn empty_queue_rejected_and_sizes_tracked() {
        let mut q: NegativeQueue<f32> = NegativeQueue::new(2, 4, 100);
        assert!(matches!(q.sample_negatives(0), Err(Error::InvalidState(_))));
        let m = unit_rows(62, 256, 4).mapv(|v| v as f32);
        q.enqueue(&[m.clone(), m.clone()]).unwrap();
        assert_eq!(q.len(0), 100);
        assert_eq!(q.len(1), 100);
        assert!(q.is_warm(100));
        assert!(!q.is_warm(101));
        let bad = Array2::<f32>::zeros((1, 5));
        assert!(matches!(
            q.enqueue(&[bad.clone(), bad]),
            Err(Error::InvalidArgument(_))
        ));
        // Single-entry layer round trip.
        let mut q1: NegativeQueue<f64> = NegativeQueue::new(1, 3, 8);
        q1.enqueue(&[unit_rows(63, 1, 3)]).unwrap();
        let rows = q1.sample_negatives(0).unwrap();
        assert_eq!(rows.nrows(), 1);
        let n: f64 = rows.row(0).dot(&rows.row(0)).sqrt();
        assert!((n - 1.0).abs() < 1e-12);
    }

    #[test]
    fn queue_contents_are_value_snapshots() {
        let mut q: NegativeQueue<f64> = NegativeQueue::new(1, 3, 8);
        let mut m = unit_rows(64, 2, 3);
        q.enqueue(&[m.clone()]).unwrap();
        let before = q.sample_negatives(0).unwrap();
        m.fill(0.0);
        let after = q.sample_negatives(0).unwrap();
        assert_eq!(before, after);
    }
}
