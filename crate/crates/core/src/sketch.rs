//! Count sketch, circular convolution and tensor sketch, plus the compact
//! bilinear (MCB) and trilinear (MCT) pooling units built from them.
//!
//! A count sketch `Ψ` maps `a ∈ R^{d_in}` to `R^{d_out}` with
//! `Ψ(a)[t] = Σ_{i : h(i) = t} s(i)·a[i]`. The sketch of a rank-one tensor
//! `a_1 ⊗ … ⊗ a_k` under the combined hash `Σ_j h_j(i_j) mod d_out` and sign
//! `Π_j s_j(i_j)` equals the circular convolution of the individual sketches,
//! so the outer product never has to be materialised.

use std::cell::RefCell;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{dim_err, Error, Result};

/// Lengths at or below this use the O(n²) direct sum; longer ones go through the FFT.
pub const DIRECT_CONV_MAX: usize = 64;

/// Upper bound on the number of entries `brute_force_sketch_outer` will materialise.
pub const BRUTE_FORCE_MAX_ENTRIES: usize = 1_000_000;

/// Hash and sign maps of one count sketch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CountSketchParams {
    d_in: usize,
    d_out: usize,
    h: Vec<u32>,
    s: Vec<i8>,
    seed: u64,
}

impl CountSketchParams {
    /// Draws `h` uniform over `[0, d_out)` and `s` uniform over `{±1}` from a
    /// ChaCha stream keyed by `seed`.
    pub fn generate(d_in: usize, d_out: usize, seed: u64) -> Self {
        assert!(d_in > 0 && d_out > 0, "sketch dimensions must be positive");
        assert!(d_out <= u32::MAX as usize);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut h = Vec::with_capacity(d_in);
        let mut s = Vec::with_capacity(d_in);
        for _ in 0..d_in {
            h.push(rng.random_range(0..d_out as u32));
            s.push(if rng.random::<bool>() { 1 } else { -1 });
        }
        Self {
            d_in,
            d_out,
            h,
            s,
            seed,
        }
    }

    /// Builds params from explicit maps (checkpoint loading, hand-made test cases).
    pub fn from_maps(d_out: usize, h: Vec<u32>, s: Vec<i8>, seed: u64) -> Result<Self> {
        if h.len() != s.len() || h.is_empty() || d_out == 0 {
            return dim_err(format!(
                "hash map has {} entries, sign map {}, d_out {d_out}",
                h.len(),
                s.len()
            ));
        }
        if let Some(bad) = h.iter().find(|&&t| t as usize >= d_out) {
            return dim_err(format!("hash value {bad} outside [0, {d_out})"));
        }
        if s.iter().any(|&v| v != 1 && v != -1) {
            return Err(Error::Contract("sign map entries must be ±1".into()));
        }
        Ok(Self {
            d_in: h.len(),
            d_out,
            h,
            s,
            seed,
        })
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn hashes(&self) -> &[u32] {
        &self.h
    }

    pub fn signs(&self) -> &[i8] {
        &self.s
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

/// One count sketch per fused input, all with the same output dimension.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SketchStack {
    params: Vec<Arc<CountSketchParams>>,
}

impl SketchStack {
    pub fn new(params: Vec<CountSketchParams>) -> Result<Self> {
        let Some(first) = params.first() else {
            return dim_err("sketch stack needs at least one count sketch");
        };
        let d_out = first.d_out;
        if params.iter().any(|p| p.d_out != d_out) {
            return dim_err("all count sketches in a stack must share d_out");
        }
        for (i, p) in params.iter().enumerate() {
            if params[..i].iter().any(|q| q.seed == p.seed) {
                return Err(Error::Contract(format!(
                    "duplicate seed {} in sketch stack",
                    p.seed
                )));
            }
        }
        Ok(Self {
            params: params.into_iter().map(Arc::new).collect(),
        })
    }

    /// `d_ins[j]`-dimensional inputs, seeds `base_seed, base_seed + 1, …`.
    pub fn generate(d_ins: &[usize], d_out: usize, base_seed: u64) -> Self {
        let params = d_ins
            .iter()
            .enumerate()
            .map(|(j, &d)| CountSketchParams::generate(d, d_out, base_seed.wrapping_add(j as u64)))
            .collect();
        Self::new(params).expect("generated stack is consistent")
    }

    pub fn arity(&self) -> usize {
        self.params.len()
    }

    pub fn d_out(&self) -> usize {
        self.params[0].d_out
    }

    pub fn get(&self, j: usize) -> &Arc<CountSketchParams> {
        &self.params[j]
    }

    pub fn iter(&self) -> impl Iterator<Item = &CountSketchParams> {
        self.params.iter().map(|p| p.as_ref())
    }
}

pub(crate) fn count_sketch_slice(a: &[f64], p: &CountSketchParams) -> Vec<f64> {
    let mut out = vec![0.0; p.d_out];
    for ((&x, &t), &s) in a.iter().zip(&p.h).zip(&p.s) {
        out[t as usize] += f64::from(s) * x;
    }
    out
}

/// `Ψ(a)[t] = Σ_{i : h(i) = t} s(i)·a[i]`.
pub fn count_sketch(a: &[f64], p: &CountSketchParams) -> Result<Vec<f64>> {
    if a.len() != p.d_in {
        return dim_err(format!(
            "count sketch expects length {}, got {}",
            p.d_in,
            a.len()
        ));
    }
    Ok(count_sketch_slice(a, p))
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn fft_combine(u: &[f64], v: &[f64], conj_v: bool) -> Vec<f64> {
    let n = u.len();
    PLANNER.with(|planner| {
        let mut planner = planner.borrow_mut();
        let fwd = planner.plan_fft_forward(n);
        let inv = planner.plan_fft_inverse(n);
        let mut fu: Vec<Complex<f64>> = u.iter().map(|&x| Complex::new(x, 0.0)).collect();
        let mut fv: Vec<Complex<f64>> = v.iter().map(|&x| Complex::new(x, 0.0)).collect();
        fwd.process(&mut fu);
        fwd.process(&mut fv);
        for (a, b) in fu.iter_mut().zip(&fv) {
            *a *= if conj_v { b.conj() } else { *b };
        }
        inv.process(&mut fu);
        let scale = 1.0 / n as f64;
        fu.iter().map(|c| c.re * scale).collect()
    })
}

/// Direct O(n²) circular convolution: `out[t] = Σ_j u[j]·v[(t − j) mod n]`.
pub fn circular_convolve_direct(u: &[f64], v: &[f64]) -> Vec<f64> {
    let n = u.len();
    let mut out = vec![0.0; n];
    for (j, &uj) in u.iter().enumerate() {
        if uj == 0.0 {
            continue;
        }
        for (m, &vm) in v.iter().enumerate() {
            out[(j + m) % n] += uj * vm;
        }
    }
    out
}

/// Fourier-domain circular convolution.
pub fn circular_convolve_fft(u: &[f64], v: &[f64]) -> Vec<f64> {
    fft_combine(u, v, false)
}

pub(crate) fn circular_convolve_slice(u: &[f64], v: &[f64]) -> Vec<f64> {
    if u.len() > DIRECT_CONV_MAX {
        circular_convolve_fft(u, v)
    } else {
        circular_convolve_direct(u, v)
    }
}

/// Circular cross-correlation `out[j] = Σ_m g[(j + m) mod n]·v[m]`, the
/// adjoint of convolution by `v`.
pub(crate) fn circular_correlate_slice(g: &[f64], v: &[f64]) -> Vec<f64> {
    let n = g.len();
    if n > DIRECT_CONV_MAX {
        return fft_combine(g, v, true);
    }
    let mut out = vec![0.0; n];
    for (j, o) in out.iter_mut().enumerate() {
        let mut s = 0.0;
        for (m, &vm) in v.iter().enumerate() {
            s += g[(j + m) % n] * vm;
        }
        *o = s;
    }
    out
}

/// Circular convolution; direct sum for `n ≤ 64`, FFT above.
pub fn circular_convolve(u: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    if u.len() != v.len() || u.is_empty() {
        return dim_err(format!(
            "circular convolution needs equal non-zero lengths, got {} and {}",
            u.len(),
            v.len()
        ));
    }
    Ok(circular_convolve_slice(u, v))
}

fn check_stack_inputs(vectors: &[&[f64]], stack: &SketchStack) -> Result<()> {
    if vectors.len() != stack.arity() {
        return dim_err(format!(
            "tensor sketch got {} vectors for a stack of arity {}",
            vectors.len(),
            stack.arity()
        ));
    }
    for (j, (v, p)) in vectors.iter().zip(stack.iter()).enumerate() {
        if v.len() != p.d_in {
            return dim_err(format!(
                "input {j} has length {}, sketch expects {}",
                v.len(),
                p.d_in
            ));
        }
    }
    Ok(())
}

/// Sketch of `⊗_j vectors[j]` computed as the circular convolution of the
/// per-input count sketches.
pub fn tensor_sketch(vectors: &[&[f64]], stack: &SketchStack) -> Result<Vec<f64>> {
    tensor_sketch_with(vectors, stack, count_sketch_slice)
}

/// [`tensor_sketch`] with a caller-supplied count-sketch kernel, so that the
/// identity check can be pointed at a deliberately broken kernel.
pub fn tensor_sketch_with(
    vectors: &[&[f64]],
    stack: &SketchStack,
    sketch: fn(&[f64], &CountSketchParams) -> Vec<f64>,
) -> Result<Vec<f64>> {
    check_stack_inputs(vectors, stack)?;
    let mut acc = sketch(vectors[0], stack.get(0));
    for (v, p) in vectors[1..].iter().zip(stack.iter().skip(1)) {
        let s = sketch(v, p);
        acc = circular_convolve_slice(&acc, &s);
    }
    Ok(acc)
}

/// Materialises the outer product and applies the combined hash and sign
/// directly. Only for small inputs; used as the reference for [`tensor_sketch`].
pub fn brute_force_sketch_outer(vectors: &[&[f64]], stack: &SketchStack) -> Result<Vec<f64>> {
    check_stack_inputs(vectors, stack)?;
    let total = vectors
        .iter()
        .try_fold(1usize, |acc, v| acc.checked_mul(v.len()))
        .filter(|&n| n <= BRUTE_FORCE_MAX_ENTRIES);
    let Some(total) = total else {
        return Err(Error::Capacity(format!(
            "outer product exceeds {BRUTE_FORCE_MAX_ENTRIES} entries"
        )));
    };
    let d_out = stack.d_out();
    let mut out = vec![0.0; d_out];
    let mut idx = vec![0usize; vectors.len()];
    for _ in 0..total {
        let mut value = 1.0;
        let mut bucket = 0usize;
        let mut sign = 1.0;
        for (j, &i) in idx.iter().enumerate() {
            let p = stack.get(j);
            value *= vectors[j][i];
            bucket += p.h[i] as usize;
            sign *= f64::from(p.s[i]);
        }
        out[bucket % d_out] += sign * value;
        // odometer increment, last index fastest
        for j in (0..idx.len()).rev() {
            idx[j] += 1;
            if idx[j] < vectors[j].len() {
                break;
            }
            idx[j] = 0;
        }
    }
    Ok(out)
}

fn require_arity(stack: &SketchStack, k: usize, unit: &str) -> Result<()> {
    if stack.arity() != k {
        return dim_err(format!(
            "{unit} needs a sketch stack of arity {k}, got {}",
            stack.arity()
        ));
    }
    Ok(())
}

/// Compact bilinear pooling of two attended vectors.
pub fn mcb(a_v: &[f64], a_q: &[f64], stack: &SketchStack) -> Result<Vec<f64>> {
    require_arity(stack, 2, "mcb")?;
    tensor_sketch(&[a_v, a_q], stack)
}

/// Compact trilinear pooling of three attended vectors.
pub fn mct(a_v: &[f64], a_q: &[f64], a_a: &[f64], stack: &SketchStack) -> Result<Vec<f64>> {
    require_arity(stack, 3, "mct")?;
    tensor_sketch(&[a_v, a_q, a_a], stack)
}

/// Two cascaded MCB units: `(a_V, a_Q)` through `inner`, then the result with
/// `a_A` through `outer`. The outer stack's first sketch takes `inner.d_out()` inputs.
pub fn mcb_two_layer(
    a_v: &[f64],
    a_q: &[f64],
    a_a: &[f64],
    inner: &SketchStack,
    outer: &SketchStack,
) -> Result<Vec<f64>> {
    let mid = mcb(a_v, a_q, inner)?;
    mcb(&mid, a_a, outer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn identity_params(n: usize, signs: Vec<i8>, seed: u64) -> CountSketchParams {
        CountSketchParams::from_maps(n, (0..n as u32).collect(), signs, seed).unwrap()
    }

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn count_sketch_examples() {
        let p = identity_params(2, vec![1, 1], 0);
        assert_eq!(count_sketch(&[0.0, 0.0], &p).unwrap(), vec![0.0, 0.0]);
        assert_eq!(count_sketch(&[3.0, 5.0], &p).unwrap(), vec![3.0, 5.0]);

        let collide = CountSketchParams::from_maps(2, vec![0, 0], vec![1, -1], 0).unwrap();
        assert_eq!(count_sketch(&[3.0, 5.0], &collide).unwrap(), vec![-2.0, 0.0]);

        assert!(count_sketch(&[1.0], &p).is_err());
    }

    #[test]
    fn from_maps_validates() {
        assert!(CountSketchParams::from_maps(2, vec![2], vec![1], 0).is_err());
        assert!(CountSketchParams::from_maps(2, vec![0], vec![0], 0).is_err());
        assert!(CountSketchParams::from_maps(2, vec![0, 1], vec![1], 0).is_err());
    }

    #[test]
    fn regenerate_is_bitwise_identical() {
        let a = CountSketchParams::generate(37, 16, 99);
        let b = CountSketchParams::generate(37, 16, 99);
        assert_eq!(a, b);
        assert_ne!(a, CountSketchParams::generate(37, 16, 100));
    }

    #[test]
    fn stack_rejects_mixed_d_out_and_duplicate_seeds() {
        let a = CountSketchParams::generate(4, 8, 1);
        let b = CountSketchParams::generate(4, 16, 2);
        assert!(SketchStack::new(vec![a.clone(), b]).is_err());
        assert!(SketchStack::new(vec![a.clone(), a]).is_err());
    }

    #[test]
    fn convolution_examples() {
        assert_eq!(
            circular_convolve(&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]).unwrap(),
            vec![0.0, 1.0, 0.0]
        );
        let v = [0.3, -1.2, 4.0, 2.5];
        assert_eq!(circular_convolve(&[1.0, 0.0, 0.0, 0.0], &v).unwrap(), v.to_vec());
        assert!(circular_convolve(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn fft_path_matches_direct_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for n in [65, 128, 256, 300] {
            let u = random_vec(&mut rng, n);
            let v = random_vec(&mut rng, n);
            let d = circular_convolve_direct(&u, &v);
            let f = circular_convolve_fft(&u, &v);
            let err = d.iter().zip(&f).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-9, "n={n}: {err}");
        }
    }

    #[test]
    fn correlation_is_adjoint_of_convolution() {
        // <conv(u, v), g> == <u, corr(g, v)>
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in [5, 64, 65, 128] {
            let u = random_vec(&mut rng, n);
            let v = random_vec(&mut rng, n);
            let g = random_vec(&mut rng, n);
            let lhs: f64 = circular_convolve_slice(&u, &v).iter().zip(&g).map(|(a, b)| a * b).sum();
            let rhs: f64 = u.iter().zip(circular_correlate_slice(&g, &v)).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10, "n={n}");
        }
    }

    #[test]
    fn tensor_sketch_delta_case() {
        let stack = SketchStack::new(vec![
            identity_params(2, vec![1, 1], 0),
            identity_params(2, vec![1, 1], 1),
        ])
        .unwrap();
        assert_eq!(tensor_sketch(&[&[1.0, 0.0], &[1.0, 0.0]], &stack).unwrap(), vec![1.0, 0.0]);
        assert_eq!(tensor_sketch(&[&[0.0, 0.0], &[4.0, 2.0]], &stack).unwrap(), vec![0.0, 0.0]);
        assert!(tensor_sketch(&[&[1.0, 0.0]], &stack).is_err());
        assert!(tensor_sketch(&[&[1.0, 0.0], &[1.0]], &stack).is_err());
    }

    #[test]
    fn tensor_sketch_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..20u64 {
            for k in [2usize, 3] {
                let stack = SketchStack::generate(&vec![4; k], 8, 1000 * trial + 10 * k as u64);
                let vs: Vec<Vec<f64>> = (0..k).map(|_| random_vec(&mut rng, 4)).collect();
                let refs: Vec<&[f64]> = vs.iter().map(|v| v.as_slice()).collect();
                let fast = tensor_sketch(&refs, &stack).unwrap();
                let slow = brute_force_sketch_outer(&refs, &stack).unwrap();
                for (a, b) in fast.iter().zip(&slow) {
                    assert!((a - b).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn brute_force_guards_size_and_handles_zero() {
        let stack = SketchStack::generate(&[1001, 1000], 8, 0);
        let a = vec![1.0; 1001];
        let b = vec![1.0; 1000];
        assert!(matches!(
            brute_force_sketch_outer(&[&a, &b], &stack),
            Err(Error::Capacity(_))
        ));
        let small = SketchStack::generate(&[3, 3], 8, 0);
        let z = brute_force_sketch_outer(&[&[0.0; 3], &[1.0, 2.0, 3.0]], &small).unwrap();
        assert!(z.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn mcb_hand_case_and_arity() {
        let stack = SketchStack::new(vec![
            identity_params(2, vec![1, 1], 0),
            identity_params(2, vec![1, 1], 1),
        ])
        .unwrap();
        assert_eq!(mcb(&[1.0, 2.0], &[1.0, 0.0], &stack).unwrap(), vec![1.0, 2.0]);
        assert_eq!(mcb(&[0.0, 0.0], &[1.0, 3.0], &stack).unwrap(), vec![0.0, 0.0]);
        assert!(mct(&[1.0, 2.0], &[1.0, 0.0], &[1.0, 0.0], &stack).is_err());
    }

    #[test]
    fn mct_delta_and_brute_force() {
        let stack = SketchStack::new(vec![
            identity_params(3, vec![1, 1, 1], 0),
            identity_params(3, vec![1, 1, 1], 1),
            identity_params(3, vec![1, 1, 1], 2),
        ])
        .unwrap();
        let d = [1.0, 0.0, 0.0];
        assert_eq!(mct(&d, &d, &d, &stack).unwrap(), d.to_vec());
        assert!(mct(&d, &[0.0; 3], &d, &stack).unwrap().iter().all(|&x| x == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let stack = SketchStack::generate(&[4, 4, 4], 16, 77);
        let (a, b, c) = (random_vec(&mut rng, 4), random_vec(&mut rng, 4), random_vec(&mut rng, 4));
        let fast = mct(&a, &b, &c, &stack).unwrap();
        let slow = brute_force_sketch_outer(&[&a, &b, &c], &stack).unwrap();
        for (x, y) in fast.iter().zip(&slow) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn mcb_two_layer_hand_composition() {
        // identity hashes, d = 2: result is ((a_V ⊛ a_Q) ⊛ a_A) with the
        // explicit 2-point convolution written out by hand.
        let id = |seed| identity_params(2, vec![1, 1], seed);
        let inner = SketchStack::new(vec![id(0), id(1)]).unwrap();
        let outer = SketchStack::new(vec![id(2), id(3)]).unwrap();
        let (v, q, a) = ([1.0, 2.0], [3.0, -1.0], [0.5, 4.0]);
        let conv2 = |x: [f64; 2], y: [f64; 2]| [x[0] * y[0] + x[1] * y[1], x[0] * y[1] + x[1] * y[0]];
        let want = conv2(conv2(v, q), a);
        let got = mcb_two_layer(&v, &q, &a, &inner, &outer).unwrap();
        assert_eq!(got, want.to_vec());
        let zero = mcb_two_layer(&v, &[0.0; 2], &a, &inner, &outer).unwrap();
        assert!(zero.iter().all(|&x| x == 0.0));
    }
}
