//! Unary, pairwise and ternary attention potentials.
//!
//! * unary: `θ_X = tanh(X·W₂)·W₁`
//! * pairwise: `C₂ = (X·W_X)(Y·W_Y)ᵀ`, marginalised along one axis with a
//!   learned weight vector and squashed by `tanh`
//! * ternary: `C₃[i,j,k] = Σ_l (QW_q)[i,l]·(VW_v)[j,l]·(AW_a)[k,l]`,
//!   marginalised over two axes with a learned weight matrix

use crate::dropout::{DropoutPlan, Site};
use crate::embed::apply_dropout;
use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct UnaryParams {
    /// `[d×d]`
    pub w2: ParamId,
    /// `[d×1]`
    pub w1: ParamId,
}

impl UnaryParams {
    pub(crate) fn create(store: &mut ParamStore, init: &mut Init, name: &str, d: usize) -> Self {
        Self {
            w2: store.add(format!("{name}.w2"), init.xavier(d, d)),
            w1: store.add(format!("{name}.w1"), init.xavier(d, 1)),
        }
    }
}

/// Correlation between a `first` and `second` modality, with
/// `C₂ = (first·W_first)(second·W_second)ᵀ` of shape `[n_first × n_second]`.
#[derive(Clone, Copy, Debug)]
pub struct PairwiseParams {
    pub w_first: ParamId,
    pub w_second: ParamId,
    /// `[n_first]`, sums over the first axis to give a potential on `second`.
    pub over_first: ParamId,
    /// `[n_second]`, sums over the second axis to give a potential on `first`.
    pub over_second: ParamId,
}

impl PairwiseParams {
    pub(crate) fn create(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        d: usize,
        n_first: usize,
        n_second: usize,
    ) -> Self {
        Self {
            w_first: store.add(format!("{name}.w_first"), init.xavier(d, d)),
            w_second: store.add(format!("{name}.w_second"), init.xavier(d, d)),
            over_first: store.add(
                format!("{name}.over_first"),
                Tensor::full(&[n_first], 1.0 / n_first as f64),
            ),
            over_second: store.add(
                format!("{name}.over_second"),
                Tensor::full(&[n_second], 1.0 / n_second as f64),
            ),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TernaryParams {
    pub w_q: ParamId,
    pub w_v: ParamId,
    pub w_a: ParamId,
    /// `[n_v × n_a]`
    pub m_for_q: ParamId,
    /// `[n_q × n_a]`
    pub m_for_v: ParamId,
    /// `[n_q × n_v]`
    pub m_for_a: ParamId,
}

impl TernaryParams {
    pub(crate) fn create(
        store: &mut ParamStore,
        init: &mut Init,
        d: usize,
        n_q: usize,
        n_v: usize,
        n_a: usize,
    ) -> Self {
        let avg = |a: usize, b: usize| Tensor::full(&[a, b], 1.0 / (a * b) as f64);
        Self {
            w_q: store.add("ternary.w_q", init.xavier(d, d)),
            w_v: store.add("ternary.w_v", init.xavier(d, d)),
            w_a: store.add("ternary.w_a", init.xavier(d, d)),
            m_for_q: store.add("ternary.m_for_q", avg(n_v, n_a)),
            m_for_v: store.add("ternary.m_for_v", avg(n_q, n_a)),
            m_for_a: store.add("ternary.m_for_a", avg(n_q, n_v)),
        }
    }
}

/// `θ = tanh(X·W₂)·W₁` as an `[n]` vector, with dropout after the `tanh`.
pub fn unary_graph(
    g: &mut Graph,
    x: NodeId,
    w2: NodeId,
    w1: NodeId,
    plan: Option<&DropoutPlan>,
    site: Site,
) -> Result<NodeId> {
    let h = g.matmul(x, w2)?;
    let h = g.tanh(h)?;
    let h = apply_dropout(g, h, plan, site)?;
    let t = g.matmul(h, w1)?;
    let n = g.value(t).shape()[0];
    g.reshape(t, vec![n])
}

pub fn pairwise_correlation_graph(
    g: &mut Graph,
    first: NodeId,
    second: NodeId,
    w_first: NodeId,
    w_second: NodeId,
) -> Result<NodeId> {
    let a = g.matmul(first, w_first)?;
    let b = g.matmul(second, w_second)?;
    g.matmul_nt(a, b)
}

/// `tanh` of the `w`-weighted sum of `c2` along `summed_axis` (0 or 1).
pub fn pairwise_marginal_graph(
    g: &mut Graph,
    c2: NodeId,
    w: NodeId,
    summed_axis: usize,
) -> Result<NodeId> {
    let s = match summed_axis {
        0 => g.vecmat(w, c2)?,
        1 => g.matvec(c2, w)?,
        a => {
            return Err(crate::Error::Contract(format!(
                "pairwise marginal axis {a} out of range"
            )))
        }
    };
    g.tanh(s)
}

#[allow(clippy::too_many_arguments)]
pub fn ternary_correlation_graph(
    g: &mut Graph,
    q: NodeId,
    v: NodeId,
    a: NodeId,
    w_q: NodeId,
    w_v: NodeId,
    w_a: NodeId,
) -> Result<NodeId> {
    let qp = g.matmul(q, w_q)?;
    let vp = g.matmul(v, w_v)?;
    let ap = g.matmul(a, w_a)?;
    g.corr3(qp, vp, ap)
}

/// `tanh(Σ over the two non-target axes of m ⊙ C₃)`.
pub fn ternary_marginal_graph(
    g: &mut Graph,
    c3: NodeId,
    m: NodeId,
    target_axis: usize,
) -> Result<NodeId> {
    let s = g.contract3(c3, m, target_axis)?;
    g.tanh(s)
}

fn eval(build: impl FnOnce(&mut Graph) -> Result<NodeId>) -> Result<Tensor> {
    let mut g = Graph::new();
    let out = build(&mut g)?;
    Ok(g.value(out).clone())
}

/// Eager unary potential.
pub fn unary_potential(x: &Tensor, w2: &Tensor, w1: &Tensor) -> Result<Tensor> {
    eval(|g| {
        let (x, w2, w1) = (g.constant(x.clone()), g.constant(w2.clone()), g.constant(w1.clone()));
        unary_graph(g, x, w2, w1, None, Site::UnaryImage)
    })
}

/// Eager `C₂ = (Q·W_q)(V·W_v)ᵀ`, shape `[n_q × n_v]`.
pub fn pairwise_correlation(q: &Tensor, v: &Tensor, w_q: &Tensor, w_v: &Tensor) -> Result<Tensor> {
    eval(|g| {
        let (q, v) = (g.constant(q.clone()), g.constant(v.clone()));
        let (wq, wv) = (g.constant(w_q.clone()), g.constant(w_v.clone()));
        pairwise_correlation_graph(g, q, v, wq, wv)
    })
}

pub fn pairwise_marginal(c2: &Tensor, w: &Tensor, summed_axis: usize) -> Result<Tensor> {
    eval(|g| {
        let (c, w) = (g.constant(c2.clone()), g.constant(w.clone()));
        pairwise_marginal_graph(g, c, w, summed_axis)
    })
}

/// Eager `C₃`, shape `[n_q × n_v × n_a]`.
pub fn ternary_correlation(
    q: &Tensor,
    v: &Tensor,
    a: &Tensor,
    w_q: &Tensor,
    w_v: &Tensor,
    w_a: &Tensor,
) -> Result<Tensor> {
    eval(|g| {
        let (q, v, a) = (g.constant(q.clone()), g.constant(v.clone()), g.constant(a.clone()));
        let (wq, wv, wa) = (
            g.constant(w_q.clone()),
            g.constant(w_v.clone()),
            g.constant(w_a.clone()),
        );
        ternary_correlation_graph(g, q, v, a, wq, wv, wa)
    })
}

pub fn ternary_marginal(c3: &Tensor, m: &Tensor, target_axis: usize) -> Result<Tensor> {
    eval(|g| {
        let (c, m) = (g.constant(c3.clone()), g.constant(m.clone()));
        ternary_marginal_graph(g, c, m, target_axis)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::grad_check;
    use crate::rng::stream;
    use crate::Error;

    fn init(seed: u64) -> Init {
        Init {
            rng: stream(&[seed, 77]),
        }
    }

    #[test]
    fn unary_cases() {
        let mut i = init(1);
        let x = i.uniform(&[4, 3], 1.0);
        let w1 = i.uniform(&[3, 1], 1.0);
        let z = unary_potential(&x, &Tensor::zeros(&[3, 3]), &w1).unwrap();
        assert_eq!(z.shape(), &[4]);
        assert!(z.data().iter().all(|&v| v == 0.0));

        let one = Tensor::ones(&[1, 1]);
        let t = unary_potential(&one, &one, &one).unwrap();
        assert!((t.item() - 1f64.tanh()).abs() < 1e-15);

        assert!(matches!(
            unary_potential(&x, &Tensor::zeros(&[2, 3]), &w1),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn pairwise_correlation_cases() {
        let e1 = Tensor::matrix(1, 3, vec![1.0, 0.0, 0.0]).unwrap();
        let e2 = Tensor::matrix(1, 3, vec![0.0, 1.0, 0.0]).unwrap();
        let i3 = Tensor::eye(3);
        assert_eq!(pairwise_correlation(&e1, &e1, &i3, &i3).unwrap().item(), 1.0);
        assert_eq!(pairwise_correlation(&e1, &e2, &i3, &i3).unwrap().item(), 0.0);
        assert!(pairwise_correlation(&e1, &Tensor::zeros(&[2, 4]), &i3, &i3).is_err());
    }

    #[test]
    fn pairwise_marginal_cases() {
        let c = Tensor::ones(&[3, 4]);
        let z = pairwise_marginal(&c, &Tensor::zeros(&[3]), 0).unwrap();
        assert_eq!(z.shape(), &[4]);
        assert!(z.data().iter().all(|&v| v == 0.0));
        let avg = pairwise_marginal(&c, &Tensor::full(&[4], 0.25), 1).unwrap();
        assert_eq!(avg.shape(), &[3]);
        assert!(avg.data().iter().all(|&v| (v - 1f64.tanh()).abs() < 1e-15));
        assert!(matches!(pairwise_marginal(&c, &Tensor::zeros(&[3]), 2), Err(Error::Contract(_))));
        assert!(pairwise_marginal(&c, &Tensor::zeros(&[4]), 0).is_err());
    }

    #[test]
    fn ternary_cases() {
        let ones = Tensor::ones(&[2, 4]);
        let i4 = Tensor::eye(4);
        let c = ternary_correlation(&ones, &ones, &ones, &i4, &i4, &i4).unwrap();
        assert_eq!(c.shape(), &[2, 2, 2]);
        assert!(c.data().iter().all(|&v| v == 4.0));

        let mut q = vec![1.0; 8];
        q[4..].iter_mut().for_each(|v| *v = 0.0);
        let q = Tensor::matrix(2, 4, q).unwrap();
        let c = ternary_correlation(&q, &ones, &ones, &i4, &i4, &i4).unwrap();
        assert!(c.data()[4..].iter().all(|&v| v == 0.0));

        let m0 = ternary_marginal(&c, &Tensor::zeros(&[2, 2]), 1).unwrap();
        assert!(m0.data().iter().all(|&v| v == 0.0));
        let all = Tensor::ones(&[3, 2, 4]);
        for axis in 0..3 {
            let dims = [3usize, 2, 4];
            let rest: Vec<usize> = (0..3).filter(|&a| a != axis).map(|a| dims[a]).collect();
            let m = Tensor::full(&rest, 1.0 / (rest[0] * rest[1]) as f64);
            let t = ternary_marginal(&all, &m, axis).unwrap();
            assert_eq!(t.len(), dims[axis]);
            assert!(t.data().iter().all(|&v| (v - 1f64.tanh()).abs() < 1e-15));
        }
        assert!(ternary_marginal(&all, &Tensor::ones(&[3, 2]), 0).is_err());
    }

    #[test]
    fn potentials_pass_grad_check() {
        let mut i = init(9);
        let mut g = Graph::new();
        let (nq, nv, na, d) = (3, 4, 2, 5);
        let q = g.param(i.uniform(&[nq, d], 1.0));
        let v = g.param(i.uniform(&[nv, d], 1.0));
        let a = g.param(i.uniform(&[na, d], 1.0));
        let ws: Vec<NodeId> = (0..5).map(|_| g.param(i.xavier(d, d))).collect();
        let w1 = g.param(i.xavier(d, 1));
        let un = unary_graph(&mut g, v, ws[0], w1, None, Site::UnaryImage).unwrap();
        let c2 = pairwise_correlation_graph(&mut g, q, v, ws[1], ws[2]).unwrap();
        let wv = g.param(i.uniform(&[nv], 1.0));
        let wq = g.param(i.uniform(&[nq], 1.0));
        let pq = pairwise_marginal_graph(&mut g, c2, wv, 1).unwrap();
        let pv = pairwise_marginal_graph(&mut g, c2, wq, 0).unwrap();
        let c3 = ternary_correlation_graph(&mut g, q, v, a, ws[3], ws[4], ws[0]).unwrap();
        let m = g.param(i.uniform(&[nq, na], 1.0));
        let tv = ternary_marginal_graph(&mut g, c3, m, 1).unwrap();
        let parts = g.concat(&[un, pq, pv, tv]).unwrap();
        let r = g.constant(i.uniform(&[nv + nq + nv + nv], 1.0));
        let prod = g.mul(parts, r).unwrap();
        let loss = g.sum_all(prod).unwrap();
        assert!(grad_check(&mut g, loss, 1e-5).unwrap() < 1e-4);
    }

    fn rand_mat(i: &mut Init, r: usize, c: usize) -> Tensor {
        i.uniform(&[r, c], 1.0)
    }

    fn proj(x: &Tensor, w: &Tensor) -> Vec<Vec<f64>> {
        let (n, d) = (x.shape()[0], x.shape()[1]);
        let e = w.shape()[1];
        (0..n)
            .map(|r| {
                (0..e)
                    .map(|c| (0..d).map(|l| x.at(r, l) * w.at(l, c)).sum())
                    .collect()
            })
            .collect()
    }

    #[test]
    fn loop_oracles_agree() {
        let mut i = init(3);
        for _ in 0..20 {
            let (nq, nv, na, d) = (3, 3, 3, 4);
            let q = rand_mat(&mut i, nq, d);
            let v = rand_mat(&mut i, nv, d);
            let a = rand_mat(&mut i, na, d);
            let (wq, wv, wa) = (rand_mat(&mut i, d, d), rand_mat(&mut i, d, d), rand_mat(&mut i, d, d));
            let w1 = rand_mat(&mut i, d, 1);

            let h: Vec<Vec<f64>> = proj(&v, &wq).into_iter().map(|r| r.into_iter().map(f64::tanh).collect()).collect();
            let un = unary_potential(&v, &wq, &w1).unwrap();
            for r in 0..nv {
                let want: f64 = (0..d).map(|l| h[r][l] * w1.at(l, 0)).sum();
                assert!((un.data()[r] - want).abs() < 1e-12);
            }

            let (pq, pv, pa) = (proj(&q, &wq), proj(&v, &wv), proj(&a, &wa));
            let c2 = pairwise_correlation(&q, &v, &wq, &wv).unwrap();
            for r in 0..nq {
                for c in 0..nv {
                    let want: f64 = (0..d).map(|l| pq[r][l] * pv[c][l]).sum();
                    assert!((c2.at(r, c) - want).abs() < 1e-12);
                }
            }
            let w = i.uniform(&[nq], 1.0);
            let m0 = pairwise_marginal(&c2, &w, 0).unwrap();
            for c in 0..nv {
                let want = (0..nq).map(|r| w.data()[r] * c2.at(r, c)).sum::<f64>().tanh();
                assert!((m0.data()[c] - want).abs() < 1e-12);
            }

            let c3 = ternary_correlation(&q, &v, &a, &wq, &wv, &wa).unwrap();
            for x in 0..nq {
                for y in 0..nv {
                    for z in 0..na {
                        let want: f64 = (0..d).map(|l| pq[x][l] * pv[y][l] * pa[z][l]).sum();
                        assert!((c3.data()[(x * nv + y) * na + z] - want).abs() < 1e-12);
                    }
                }
            }
            let m = i.uniform(&[nq, na], 1.0);
            let t = ternary_marginal(&c3, &m, 1).unwrap();
            for y in 0..nv {
                let mut s = 0.0;
                for x in 0..nq {
                    for z in 0..na {
                        s += m.at(x, z) * c3.data()[(x * nv + y) * na + z];
                    }
                }
                assert!((t.data()[y] - s.tanh()).abs() < 1e-12);
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn correlations_are_multilinear(seed in 0u64..1000, c in -3.0f64..3.0) {
            let mut i = init(seed);
            let d = 4;
            let q = rand_mat(&mut i, 2, d);
            let v = rand_mat(&mut i, 3, d);
            let a = rand_mat(&mut i, 2, d);
            let w = rand_mat(&mut i, d, d);
            let qc = q.map(|x| x * c);
            let base = ternary_correlation(&q, &v, &a, &w, &w, &w).unwrap();
            let scaled = ternary_correlation(&qc, &v, &a, &w, &w, &w).unwrap();
            for (s, b) in scaled.data().iter().zip(base.data()) {
                proptest::prop_assert!((s - c * b).abs() < 1e-12 * (1.0 + b.abs()));
            }
            let base2 = pairwise_correlation(&q, &v, &w, &w).unwrap();
            let scaled2 = pairwise_correlation(&qc, &v, &w, &w).unwrap();
            for (s, b) in scaled2.data().iter().zip(base2.data()) {
                proptest::prop_assert!((s - c * b).abs() < 1e-12 * (1.0 + b.abs()));
            }
        }

        #[test]
        fn marginals_stay_in_open_interval(seed in 0u64..1000) {
            let mut i = init(seed);
            let c2 = rand_mat(&mut i, 3, 4);
            let w = i.uniform(&[3], 2.0);
            for v in pairwise_marginal(&c2, &w, 0).unwrap().data() {
                proptest::prop_assert!(v.abs() < 1.0);
            }
            let c3 = i.uniform(&[2, 3, 2], 1.0);
            let m = rand_mat(&mut i, 2, 2);
            for v in ternary_marginal(&c3, &m, 1).unwrap().data() {
                proptest::prop_assert!(v.abs() < 1.0);
            }
        }
    }
}
