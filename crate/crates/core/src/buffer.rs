//! Reservoir-sampled memory buffer.

use std::io::Write;

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::stream::Batch;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct BufferEntry {
    pub x: Vec<f64>,
    pub y: usize,
    /// Head logits captured when the entry was stored (DER++ replay).
    pub logits: Option<Vec<f64>>,
    /// 0-based position of the example in the stream of offers.
    pub stream_index: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBuffer {
    capacity: usize,
    entries: Vec<BufferEntry>,
    seen: u64,
}

impl MemoryBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            entries: Vec::with_capacity(capacity),
            seen: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn seen(&self) -> u64 {
        self.seen
    }

    pub fn entries(&self) -> &[BufferEntry] {
        &self.entries
    }

    /// Offers every example of `batch` to the reservoir. The `i`-th offer
    /// overall (1-based) is kept outright while the buffer has room and
    /// otherwise overwrites a uniform slot with probability `M / i`.
    pub fn reservoir_update(&mut self, batch: &Batch, logits: Option<&Tensor>, rng: &mut impl Rng) -> Result<()> {
        if let Some(l) = logits {
            if l.rows() != batch.len() {
                return Err(Error::Shape {
                    op: "reservoir_update",
                    lhs: l.shape().to_vec(),
                    rhs: vec![batch.len()],
                });
            }
        }
        for i in 0..batch.len() {
            let stream_index = self.seen;
            self.seen += 1;
            let slot = if self.entries.len() < self.capacity {
                None
            } else {
                let j = rng.random_range(0..self.seen);
                if j < self.capacity as u64 {
                    Some(j as usize)
                } else {
                    continue;
                }
            };
            let entry = BufferEntry {
                x: batch.x.row(i).to_vec(),
                y: batch.y[i],
                logits: logits.map(|l| l.row(i).to_vec()),
                stream_index,
            };
            match slot {
                None => self.entries.push(entry),
                Some(j) => self.entries[j] = entry,
            }
        }
        Ok(())
    }

    /// Draws `b` entries uniformly without replacement, or every entry in
    /// random order when `b` exceeds the current size. `None` signals an empty
    /// buffer (or `b == 0`) so that callers can skip replay terms.
    pub fn sample(&self, b: usize, rng: &mut impl Rng) -> Option<Batch> {
        if self.entries.is_empty() || b == 0 {
            return None;
        }
        let n = self.entries.len();
        let picked = index::sample(rng, n, b.min(n)).into_vec();
        Some(self.gather(&picked))
    }

    fn gather(&self, idx: &[usize]) -> Batch {
        let d = self.entries[0].x.len();
        let mut x = Vec::with_capacity(idx.len() * d);
        let mut y = Vec::with_capacity(idx.len());
        let with_logits = idx.iter().all(|&i| self.entries[i].logits.is_some());
        let mut logits = Vec::new();
        for &i in idx {
            let e = &self.entries[i];
            x.extend_from_slice(&e.x);
            y.push(e.y);
            if with_logits {
                logits.extend_from_slice(e.logits.as_deref().expect("checked"));
            }
        }
        let logits = with_logits.then(|| {
            let c = logits.len() / idx.len();
            Tensor::matrix(idx.len(), c, logits).expect("uniform logit width")
        });
        Batch {
            x: Tensor::matrix(idx.len(), d, x).expect("uniform feature width"),
            y,
            logits,
        }
    }

    pub fn label_histogram(&self, class_count: usize) -> Vec<usize> {
        let mut counts = vec![0; class_count];
        for e in &self.entries {
            if e.y < class_count {
                counts[e.y] += 1;
            }
        }
        counts
    }

    /// Debug dump: `stream_index,y,x0,..,x{d-1}`.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        let d = self.entries.first().map_or(0, |e| e.x.len());
        let mut header = String::from("stream_index,y");
        for j in 0..d {
            header.push_str(&format!(",x{j}"));
        }
        writeln!(w, "{header}")?;
        for e in &self.entries {
            write!(w, "{},{}", e.stream_index, e.y)?;
            for v in &e.x {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}
