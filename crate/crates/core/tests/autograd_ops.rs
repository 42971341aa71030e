//! Central-difference checks for every differentiable operation, each over 20
//! random seeds. Outputs are contracted with a fixed random weight tensor so
//! every output entry carries a distinct gradient.

use icvlab_core::autograd::{grad_check, Tape, Var};
use icvlab_core::tensor::Tensor;
use icvlab_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 20;
const EPS: f64 = 1e-5;
const TOL: f64 = 1e-5;

fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
    let data = (0..r * c).map(|_| rng.random_range(-1.5..1.5)).collect();
    Tensor::from_vec(r, c, data).unwrap()
}

/// `sum(out * w)` for a weight tensor `w` fixed per seed.
fn contract<'t>(tape: &'t Tape<f64>, out: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
    let [r, c] = out.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0ffee);
    let w = tape.constant(randn(&mut rng, r, c));
    Ok(out.mul(w)?.sum())
}

fn check<F>(name: &str, shapes: &[(usize, usize)], f: F)
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Tensor<f64>> = shapes.iter().map(|&(r, c)| randn(&mut rng, r, c)).collect();
        let err = grad_check(
            |tape, xs| {
                let out = f(tape, xs)?;
                contract(tape, out, seed)
            },
            &inputs,
            EPS,
        )
        .unwrap();
        assert!(err <= TOL, "{name}, seed {seed}: relative error {err:e}");
    }
}

#[test]
fn matmul() {
    check("matmul", &[(3, 4), (4, 5)], |_, x| x[0].matmul(x[1]));
}

#[test]
fn add_sub_mul() {
    check("add", &[(3, 4), (3, 4)], |_, x| x[0].add(x[1]));
    check("sub", &[(3, 4), (3, 4)], |_, x| x[0].sub(x[1]));
    check("mul", &[(3, 4), (3, 4)], |_, x| x[0].mul(x[1]));
}

#[test]
fn add_row_and_scaling() {
    check("add_row", &[(4, 3), (1, 3)], |_, x| x[0].add_row(x[1]));
    check("scale", &[(2, 5)], |_, x| Ok(x[0].scale(-0.75)));
    check("scale_by", &[(2, 5), (1, 1)], |_, x| x[0].scale_by(x[1]));
}

#[test]
fn gelu() {
    check("gelu", &[(3, 6)], |_, x| Ok(x[0].gelu()));
}

#[test]
fn layer_norm() {
    check("layer_norm", &[(4, 6), (1, 6), (1, 6)], |_, x| x[0].layer_norm(x[1], x[2]));
}

#[test]
fn embedding_gather() {
    check("embedding", &[(7, 3)], |_, x| x[0].embedding(&[2, 0, 2, 6, 5]));
}

#[test]
fn slices_and_concats() {
    check("slice_rows", &[(5, 3)], |_, x| x[0].slice_rows(1, 4));
    check("slice_cols", &[(3, 5)], |_, x| x[0].slice_cols(2, 5));
    check("concat_rows", &[(2, 3), (3, 3)], |_, x| Var::concat_rows(&[x[0], x[1]]));
    check("concat_cols", &[(3, 2), (3, 4)], |_, x| Var::concat_cols(&[x[0], x[1]]));
}

#[test]
fn row_writes() {
    check("set_row", &[(4, 3), (1, 3)], |_, x| x[0].set_row(2, x[1]));
    check("add_to_row", &[(4, 3), (1, 3)], |_, x| x[0].add_to_row(3, x[1]));
}

#[test]
fn shift_rows_with_and_without_renormalisation() {
    check("shift_rows", &[(4, 5), (1, 5)], |_, x| x[0].shift_rows(x[1], false));
    check("shift_rows renorm", &[(4, 5), (1, 5)], |_, x| x[0].shift_rows(x[1], true));
}

#[test]
fn softmax_rows_and_sum() {
    check("softmax_rows", &[(3, 5)], |_, x| x[0].softmax_rows());
    check("sum", &[(3, 5)], |_, x| Ok(x[0].sum()));
}

#[test]
fn causal_attention_plain_and_with_recency() {
    for slopes in [vec![], vec![0.25, 0.0625]] {
        check("causal_attention", &[(5, 4), (5, 4), (5, 4)], move |_, x| {
            let (out, _) = x[0].causal_attention(x[1], x[2], 2, 0.7, &slopes)?;
            Ok(out)
        });
    }
}

#[test]
fn cross_entropy_rows() {
    check("cross_entropy", &[(4, 6)], |_, x| x[0].cross_entropy(&[0, 2, 3], &[5, 1, 1]));
}

#[test]
fn kl_from_logits_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let raw = randn(&mut rng, 2, 6);
    let target = Tensor::from_rows(
        &(0..2)
            .map(|r| icvlab_core::tensor::softmax(raw.row(r)))
            .collect::<Vec<_>>(),
    )
    .unwrap();
    check("kl_from_logits", &[(4, 6)], move |_, x| x[0].kl_from_logits(&[1, 3], &target));
}

#[test]
fn composed_chain() {
    check("chain", &[(4, 6), (6, 6), (1, 6), (1, 6)], |_, x| {
        let h = x[0].layer_norm(x[2], x[3])?.matmul(x[1])?.gelu();
        let (a, _) = h.causal_attention(h, x[0], 3, 0.5, &[])?;
        a.add(h)?.softmax_rows()
    });
}
