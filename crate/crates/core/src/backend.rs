//! Execution backends.
//!
//! A [`Backend`] owns the worker pool and exposes a small set of parallel
//! primitives (map-reduce, ordered map, stable sort-by-key and scatter-add)
//! plus an allocate/write/read/free buffer lifecycle. Every primitive has a
//! fixed evaluation shape that depends only on the input, so a serial backend
//! and a threaded backend with any worker count produce bit-identical output.

use std::fmt;
use std::num::NonZeroUsize;
use std::ops::AddAssign;
use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;

/// Leaf size of the pairwise reduction tree.
const REDUCE_LEAF: usize = 32;
/// Subtrees at or below this size are not split across workers.
const REDUCE_GRAIN: usize = 4096;
/// Minimum number of indices per task in [`Backend::map`].
const MAP_GRAIN: usize = 64;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum BackendError {
    #[error("worker count must be at least 1")]
    ZeroWorkers,
    #[error("could not allocate {len} elements of {kind}")]
    Allocation { kind: ElementKind, len: usize },
    #[error("thread pool creation failed: {0}")]
    Pool(String),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("access of {requested} elements exceeds buffer length {len}")]
    OutOfBounds { requested: usize, len: usize },
    #[error("index {index} at position {position} out of range for target of length {len}")]
    IndexOutOfRange { position: usize, index: u32, len: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendKind {
    Serial,
    Threaded(NonZeroUsize),
}

/// Handle to an execution backend. Cheap to clone and safe to share.
#[derive(Clone)]
pub struct Backend {
    kind: BackendKind,
    pool: Option<Arc<rayon::ThreadPool>>,
}

impl fmt::Debug for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Backend").field("kind", &self.kind).finish()
    }
}

impl Default for Backend {
    fn default() -> Self {
        Self::serial()
    }
}

impl Backend {
    pub fn serial() -> Self {
        Self { kind: BackendKind::Serial, pool: None }
    }

    pub fn threaded(workers: usize) -> Result<Self, BackendError> {
        let n = NonZeroUsize::new(workers).ok_or(BackendError::ZeroWorkers)?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(n.get())
            .thread_name(|i| format!("blk-worker-{i}"))
            .build()
            .map_err(|e| BackendError::Pool(e.to_string()))?;
        Ok(Self { kind: BackendKind::Threaded(n), pool: Some(Arc::new(pool)) })
    }

    /// `Serial` for one worker, `Threaded(n)` otherwise.
    pub fn with_workers(workers: usize) -> Result<Self, BackendError> {
        match workers {
            0 => Err(BackendError::ZeroWorkers),
            1 => Ok(Self::serial()),
            n => Self::threaded(n),
        }
    }

    pub fn kind(&self) -> BackendKind {
        self.kind
    }

    pub fn workers(&self) -> usize {
        match self.kind {
            BackendKind::Serial => 1,
            BackendKind::Threaded(n) => n.get(),
        }
    }

    pub fn allocate<T: Element>(&self, len: usize) -> Result<DeviceBuffer<T>, BackendError> {
        let mut data = Vec::new();
        data.try_reserve_exact(len).map_err(|_| BackendError::Allocation { kind: T::KIND, len })?;
        data.resize(len, T::default());
        Ok(DeviceBuffer { data })
    }

    /// Allocates a buffer and fills it with `host` in one step.
    pub fn upload<T: Element>(&self, host: &[T]) -> Result<DeviceBuffer<T>, BackendError> {
        let mut buf = self.allocate(host.len())?;
        buf.write(host)?;
        Ok(buf)
    }

    /// Sum of `f(i)` for `i` in `0..n`.
    ///
    /// The sum is a pairwise tree over the index range: ranges of at most
    /// 32 elements are folded left to right, longer ranges are split at
    /// `lo + (hi - lo) / 2`. Worker threads only ever take whole subtrees,
    /// so the rounding is the same for every backend.
    pub fn map_reduce<F>(&self, n: usize, f: F) -> f64
    where
        F: Fn(usize) -> f64 + Sync,
    {
        match &self.pool {
            None => tree_sum(0, n, &f),
            Some(pool) => pool.install(|| tree_sum_par(0, n, &f)),
        }
    }

    /// [`Backend::map_reduce`] over two equal-length input ranges.
    pub fn map_reduce_zip<F>(&self, a: &[f64], b: &[f64], f: F) -> Result<f64, BackendError>
    where
        F: Fn(f64, f64) -> f64 + Sync,
    {
        if a.len() != b.len() {
            return Err(BackendError::LengthMismatch { left: a.len(), right: b.len() });
        }
        Ok(self.map_reduce(a.len(), |i| f(a[i], b[i])))
    }

    /// Ordered map: element `i` of the result is `f(i)`.
    pub fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match &self.pool {
            None => (0..n).map(f).collect(),
            Some(pool) => pool.install(|| (0..n).into_par_iter().with_min_len(MAP_GRAIN).map(f).collect()),
        }
    }

    /// Stable sort of `keys`, applying the same permutation to `values`.
    pub fn sort_by_key<V: Send>(&self, keys: &mut [u32], values: &mut [V]) -> Result<(), BackendError> {
        if keys.len() != values.len() {
            return Err(BackendError::LengthMismatch { left: keys.len(), right: values.len() });
        }
        let mut perm: Vec<usize> = (0..keys.len()).collect();
        {
            let k: &[u32] = keys;
            match &self.pool {
                None => perm.sort_by_key(|&i| k[i]),
                Some(pool) => pool.install(|| perm.par_sort_by_key(|&i| k[i])),
            }
        }
        apply_permutation(&perm, keys, values);
        Ok(())
    }

    /// `target[indices[k]] += deltas[k]` for every `k`, in input order per slot.
    ///
    /// All indices are validated before the target is touched. The threaded
    /// path gives each worker a contiguous range of target slots; a worker
    /// scans the full contribution list and applies only its own slots, so
    /// the per-slot summation order is the input order.
    pub fn scatter_add<T: Accumulate>(
        &self,
        target: &mut [T],
        indices: &[u32],
        deltas: &[T],
    ) -> Result<(), BackendError> {
        if indices.len() != deltas.len() {
            return Err(BackendError::LengthMismatch { left: indices.len(), right: deltas.len() });
        }
        let len = target.len();
        if let Some((position, &index)) = indices.iter().enumerate().find(|(_, &j)| j as usize >= len) {
            return Err(BackendError::IndexOutOfRange { position, index, len });
        }
        match &self.pool {
            Some(pool) if self.workers() > 1 && len > 1 => {
                let chunk = len.div_ceil(self.workers());
                pool.install(|| {
                    target.par_chunks_mut(chunk).enumerate().for_each(|(c, slots)| {
                        let lo = c * chunk;
                        let hi = lo + slots.len();
                        for (&j, &d) in indices.iter().zip(deltas) {
                            let j = j as usize;
                            if j >= lo && j < hi {
                                slots[j - lo] += d;
                            }
                        }
                    })
                });
            }
            _ => {
                for (&j, &d) in indices.iter().zip(deltas) {
                    target[j as usize] += d;
                }
            }
        }
        Ok(())
    }
}

fn tree_sum<F: Fn(usize) -> f64>(lo: usize, hi: usize, f: &F) -> f64 {
    if hi - lo <= REDUCE_LEAF {
        let mut s = 0.0;
        for i in lo..hi {
            s += f(i);
        }
        s
    } else {
        let mid = lo + (hi - lo) / 2;
        tree_sum(lo, mid, f) + tree_sum(mid, hi, f)
    }
}

fn tree_sum_par<F: Fn(usize) -> f64 + Sync>(lo: usize, hi: usize, f: &F) -> f64 {
    if hi - lo <= REDUCE_GRAIN {
        tree_sum(lo, hi, f)
    } else {
        let mid = lo + (hi - lo) / 2;
        let (a, b) = rayon::join(|| tree_sum_par(lo, mid, f), || tree_sum_par(mid, hi, f));
        a + b
    }
}

/// Rearranges both slices so that position `i` holds the element previously
/// at `perm[i]`. Follows permutation cycles with swaps, no clones.
fn apply_permutation<V>(perm: &[usize], keys: &mut [u32], values: &mut [V]) {
    let mut done = vec![false; perm.len()];
    for start in 0..perm.len() {
        if done[start] {
            continue;
        }
        let mut cur = start;
        while perm[cur] != start {
            let next = perm[cur];
            keys.swap(cur, next);
            values.swap(cur, next);
            done[cur] = true;
            cur = next;
        }
        done[cur] = true;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementKind {
    F64,
    F32,
    U32,
    Record,
}

impl fmt::Display for ElementKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ElementKind::F64 => "f64",
            ElementKind::F32 => "f32",
            ElementKind::U32 => "u32",
            ElementKind::Record => "record",
        };
        f.write_str(s)
    }
}

/// Types that can live in a [`DeviceBuffer`].
pub trait Element: Copy + Default + Send + Sync + 'static {
    const KIND: ElementKind;
}

impl Element for f64 {
    const KIND: ElementKind = ElementKind::F64;
}
impl Element for f32 {
    const KIND: ElementKind = ElementKind::F32;
}
impl Element for u32 {
    const KIND: ElementKind = ElementKind::U32;
}
/// A pair record, e.g. a detector pair.
impl Element for [u32; 2] {
    const KIND: ElementKind = ElementKind::Record;
}

/// Element types accepted by [`Backend::scatter_add`].
pub trait Accumulate: Copy + Send + Sync + AddAssign {}
impl Accumulate for f32 {}
impl Accumulate for f64 {}

/// Fixed-length, zero-initialised buffer owned by a single caller.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceBuffer<T: Element> {
    data: Vec<T>,
}

impl<T: Element> DeviceBuffer<T> {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn element_kind(&self) -> ElementKind {
        T::KIND
    }

    /// Writes `src` into the first `src.len()` elements.
    pub fn write(&mut self, src: &[T]) -> Result<(), BackendError> {
        if src.len() > self.data.len() {
            return Err(BackendError::OutOfBounds { requested: src.len(), len: self.data.len() });
        }
        self.data[..src.len()].copy_from_slice(src);
        Ok(())
    }

    /// Reads the first `dst.len()` elements into `dst`.
    pub fn read(&self, dst: &mut [T]) -> Result<(), BackendError> {
        if dst.len() > self.data.len() {
            return Err(BackendError::OutOfBounds { requested: dst.len(), len: self.data.len() });
        }
        dst.copy_from_slice(&self.data[..dst.len()]);
        Ok(())
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn free(self) {}
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn backends() -> Vec<Backend> {
        vec![
            Backend::serial(),
            Backend::threaded(1).unwrap(),
            Backend::threaded(3).unwrap(),
            Backend::threaded(8).unwrap(),
        ]
    }

    #[test]
    fn allocate_is_zeroed() {
        let b = Backend::serial();
        let e = b.allocate::<f64>(0).unwrap();
        assert!(e.is_empty());
        let z = b.allocate::<f64>(4).unwrap();
        assert_eq!(z.as_slice(), &[0.0; 4]);
        assert_eq!(z.element_kind(), ElementKind::F64);
    }

    #[test]
    fn buffer_roundtrip_and_bounds() {
        let b = Backend::serial();
        let mut buf = b.allocate::<u32>(10).unwrap();
        let src: Vec<u32> = (1..=10).collect();
        buf.write(&src).unwrap();
        let mut out = vec![0u32; 10];
        buf.read(&mut out).unwrap();
        assert_eq!(out, src);
        assert_eq!(buf.write(&[0; 11]), Err(BackendError::OutOfBounds { requested: 11, len: 10 }));
        let mut big = vec![0u32; 12];
        assert!(buf.read(&mut big).is_err());
        buf.free();
    }

    #[test]
    fn huge_allocation_is_a_resource_error() {
        let b = Backend::serial();
        let err = b.allocate::<f64>(usize::MAX / 4).unwrap_err();
        assert!(matches!(err, BackendError::Allocation { kind: ElementKind::F64, .. }));
    }

    #[test]
    fn zero_workers_rejected() {
        assert_eq!(Backend::threaded(0).unwrap_err(), BackendError::ZeroWorkers);
        assert_eq!(Backend::with_workers(0).unwrap_err(), BackendError::ZeroWorkers);
    }

    #[test]
    fn map_reduce_examples() {
        for b in backends() {
            assert_eq!(b.map_reduce(0, |_| 1.0), 0.0);
            assert_eq!(b.map_reduce(1000, |_| 1.0), 1000.0);
            assert_eq!(b.map_reduce(10, |i| i as f64), 45.0);
            assert_eq!(b.map_reduce(100_000, |_| 0.0).to_bits(), 0.0f64.to_bits());
        }
    }

    #[test]
    fn map_reduce_zip_checks_lengths() {
        let b = Backend::serial();
        assert_eq!(
            b.map_reduce_zip(&[1.0, 2.0], &[1.0], |x, y| x * y),
            Err(BackendError::LengthMismatch { left: 2, right: 1 })
        );
        assert_eq!(b.map_reduce_zip(&[1.0, 2.0], &[3.0, 4.0], |x, y| x * y), Ok(11.0));
    }

    #[test]
    fn map_is_ordered() {
        for b in backends() {
            let v = b.map(10_000, |i| i * 2);
            assert!(v.iter().enumerate().all(|(i, &x)| x == 2 * i));
        }
    }

    #[test]
    fn sort_examples() {
        let b = Backend::serial();
        let mut k = vec![2, 0, 1];
        let mut v = vec!['a', 'b', 'c'];
        b.sort_by_key(&mut k, &mut v).unwrap();
        assert_eq!(k, [0, 1, 2]);
        assert_eq!(v, ['b', 'c', 'a']);

        let mut k = vec![7; 5];
        let mut v = vec![1, 2, 3, 4, 5];
        b.sort_by_key(&mut k, &mut v).unwrap();
        assert_eq!(v, [1, 2, 3, 4, 5]);

        assert!(b.sort_by_key(&mut [1, 2], &mut [0]).is_err());
    }

    #[test]
    fn scatter_examples() {
        for b in backends() {
            let mut t = vec![0.0f64; 2];
            b.scatter_add(&mut t, &[0, 0, 1], &[1.0, 2.0, 3.0]).unwrap();
            assert_eq!(t, [3.0, 3.0]);
            b.scatter_add(&mut t, &[], &[]).unwrap();
            assert_eq!(t, [3.0, 3.0]);
            let err = b.scatter_add(&mut t, &[0, 2], &[1.0, 1.0]).unwrap_err();
            assert_eq!(err, BackendError::IndexOutOfRange { position: 1, index: 2, len: 2 });
            assert_eq!(t, [3.0, 3.0], "failed scatter must leave target untouched");
        }
    }

    // Deterministic xorshift so these tests do not depend on rand.
    fn xorshift(state: &mut u64) -> u64 {
        *state ^= *state << 13;
        *state ^= *state >> 7;
        *state ^= *state << 17;
        *state
    }

    #[test]
    fn sort_matches_naive_stable_sort() {
        let mut s = 0x9e3779b97f4a7c15u64;
        let n = 100_000;
        let keys: Vec<u32> = (0..n).map(|_| (xorshift(&mut s) % 1000) as u32).collect();
        let values: Vec<usize> = (0..n).collect();

        // insertion-by-bucket oracle: stable by construction
        let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); 1000];
        for (i, &k) in keys.iter().enumerate() {
            buckets[k as usize].push(i);
        }
        let expect_vals: Vec<usize> = buckets.concat();
        let expect_keys: Vec<u32> = expect_vals.iter().map(|&i| keys[i]).collect();

        for b in backends() {
            let mut k = keys.clone();
            let mut v = values.clone();
            b.sort_by_key(&mut k, &mut v).unwrap();
            assert_eq!(k, expect_keys);
            assert_eq!(v, expect_vals);
        }
    }

    #[test]
    fn scatter_matches_serial_loop_bitwise() {
        let mut s = 12345u64;
        let len = 257;
        let n = 10_000;
        let idx: Vec<u32> = (0..n).map(|_| (xorshift(&mut s) % len) as u32).collect();
        let del: Vec<f64> = (0..n).map(|_| (xorshift(&mut s) as f64 / u64::MAX as f64) * 1e3 - 3.7).collect();
        let mut expect = vec![0.0f64; len as usize];
        for (&j, &d) in idx.iter().zip(&del) {
            expect[j as usize] += d;
        }
        for b in backends() {
            let mut t = vec![0.0f64; len as usize];
            b.scatter_add(&mut t, &idx, &del).unwrap();
            let bits: Vec<u64> = t.iter().map(|x| x.to_bits()).collect();
            let eb: Vec<u64> = expect.iter().map(|x| x.to_bits()).collect();
            assert_eq!(bits, eb);
        }
    }

    proptest! {
        #[test]
        fn map_reduce_backend_independent(vals in prop::collection::vec(-1e6f64..1e6, 0..20_000), w in 2usize..9) {
            let s = Backend::serial().map_reduce(vals.len(), |i| vals[i]);
            let t = Backend::threaded(w).unwrap().map_reduce(vals.len(), |i| vals[i]);
            prop_assert_eq!(s.to_bits(), t.to_bits());
        }

        #[test]
        fn sort_is_stable_permutation(keys in prop::collection::vec(0u32..8, 0..500)) {
            let mut k = keys.clone();
            let mut v: Vec<usize> = (0..keys.len()).collect();
            Backend::threaded(4).unwrap().sort_by_key(&mut k, &mut v).unwrap();
            for w in v.windows(2) {
                let (a, b) = (w[0], w[1]);
                prop_assert!(keys[a] < keys[b] || (keys[a] == keys[b] && a < b));
            }
            let mut seen = v.clone();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..keys.len()).collect::<Vec<_>>());
        }

        #[test]
        fn scatter_split_per_slot(pairs in prop::collection::vec((0u32..16, -10f32..10.0), 0..300), cut in 0usize..300) {
            let cut = cut.min(pairs.len());
            let (idx, del): (Vec<u32>, Vec<f32>) = pairs.iter().cloned().unzip();
            let b = Backend::threaded(3).unwrap();
            let mut whole = vec![0.0f32; 16];
            b.scatter_add(&mut whole, &idx, &del).unwrap();
            let mut split = vec![0.0f32; 16];
            b.scatter_add(&mut split, &idx[..cut], &del[..cut]).unwrap();
            b.scatter_add(&mut split, &idx[cut..], &del[cut..]).unwrap();
            prop_assert_eq!(whole, split);
        }
    }
}
