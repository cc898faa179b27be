use dmps::autodiff::{softmax_rows, Activation};
use dmps::blocks::{message_passing_step, set_denoising_block, set_residual_block};
use dmps::diffusion::{diffusion_step, dirichlet_energy, oscillation_index, WeightedGraph};
use dmps::Tensor;
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |v| Tensor::from_vec(rows, cols, v).unwrap())
}

fn stochastic(n: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(0.0f64..1.0, n * n).prop_map(move |v| {
        let mut m = Tensor::from_vec(n, n, v).unwrap();
        for i in 0..n {
            m[(i, i)] += 0.01;
            let s: f64 = m.row(i).iter().sum();
            m.row_mut(i).iter_mut().for_each(|x| *x /= s);
        }
        m
    })
}

/// Symmetric, doubly stochastic: `αI + (1 − α)·(A + Aᵀ)/2` for a permutation `A`.
fn symmetric_stochastic(n: usize) -> impl Strategy<Value = Tensor> {
    (Just((0..n).collect::<Vec<usize>>()).prop_shuffle(), 0.0f64..1.0).prop_map(move |(p, alpha)| {
        let mut w = Tensor::identity(n).scale(alpha);
        for (i, &j) in p.iter().enumerate() {
            w[(i, j)] += 0.5 * (1.0 - alpha);
            w[(j, i)] += 0.5 * (1.0 - alpha);
        }
        w
    })
}

fn set_and_perm() -> impl Strategy<Value = (Tensor, Tensor, Tensor, Vec<usize>)> {
    (1usize..7, 1usize..4).prop_flat_map(|(n, d)| {
        (
            matrix(n, d),
            stochastic(n),
            matrix(d, d),
            Just((0..n).collect::<Vec<usize>>()).prop_shuffle(),
        )
    })
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(m in (1usize..6, 1usize..6).prop_flat_map(|(r, c)| matrix(r, c))) {
        let s = softmax_rows(&m.scale(20.0));
        for i in 0..s.rows() {
            prop_assert!((s.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        prop_assert!(s.data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn matmul_is_associative(
        (a, b, c) in (1usize..6, 1usize..6, 1usize..6, 1usize..6)
            .prop_flat_map(|(p, q, r, s)| (matrix(p, q), matrix(q, r), matrix(r, s)))
    ) {
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        let scale = left.frobenius_norm().max(1e-12);
        prop_assert!(left.sub(&right).unwrap().frobenius_norm() / scale < 1e-8 || left.frobenius_norm() < 1e-12);
    }

    #[test]
    fn message_passing_contracts_every_coordinate(
        (x, w) in (2usize..7, 1usize..4).prop_flat_map(|(n, d)| (matrix(n, d), stochastic(n)))
    ) {
        let y = message_passing_step(&w, &x).unwrap();
        for j in 0..x.cols() {
            let range = |m: &Tensor| {
                let col: Vec<f64> = (0..m.rows()).map(|i| m[(i, j)]).collect();
                col.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - col.iter().cloned().fold(f64::INFINITY, f64::min)
            };
            prop_assert!(range(&y) <= range(&x) + 1e-12);
        }
    }

    #[test]
    fn diffusion_never_expands_oscillation(
        (x, w) in (2usize..7, 1usize..4).prop_flat_map(|(n, d)| (matrix(n, d), stochastic(n))),
        s in 0.001f64..=1.0,
    ) {
        let y = diffusion_step(&x, &w, s).unwrap();
        prop_assert!(oscillation_index(&y).unwrap() <= oscillation_index(&x).unwrap() + 1e-12);
    }

    #[test]
    fn energy_descends_and_mass_is_conserved(
        (x, w) in (2usize..7, 1usize..4).prop_flat_map(|(n, d)| (matrix(n, d), symmetric_stochastic(n))),
        s in 0.001f64..=1.0,
    ) {
        let g = WeightedGraph::new(w.clone(), 1.0).unwrap();
        let mut x = x;
        let mut e = dirichlet_energy(&x, &g).unwrap();
        let mass = x.sum_rows();
        for _ in 0..10 {
            x = diffusion_step(&x, &w, s).unwrap();
            let next = dirichlet_energy(&x, &g).unwrap();
            prop_assert!(next <= e * (1.0 + 1e-12) + 1e-14);
            e = next;
        }
        prop_assert!(x.sum_rows().sub(&mass).unwrap().max_abs() < 1e-10);
    }

    #[test]
    fn blocks_are_permutation_equivariant((x, w, h, p) in set_and_perm(), gamma in 0.01f64..0.99) {
        let px = x.permute_rows(&p);
        let pw = w.conjugate_by_permutation(&p);
        let tau = Activation::Tanh;
        let pairs = [
            (message_passing_step(&pw, &px).unwrap(), message_passing_step(&w, &x).unwrap()),
            (set_denoising_block(&pw, &px, gamma, &h, tau).unwrap(), set_denoising_block(&w, &x, gamma, &h, tau).unwrap()),
            (set_residual_block(&pw, &px, &h, tau).unwrap(), set_residual_block(&w, &x, &h, tau).unwrap()),
        ];
        for (lhs, rhs) in pairs {
            prop_assert!(lhs.sub(&rhs.permute_rows(&p)).unwrap().max_abs() <= 1e-12);
        }
    }
}
