mod common;

use common::{random_array, rng};
use tvpr_core::tensor::gradcheck::{check_gradients, check_gradients_with_params};
use tvpr_core::tensor::nn::{self, EncoderLayer, MultiHeadAttention, SepConvGeometry};
use tvpr_core::tensor::{DenseArray, ParamStore, Tape, Var};
use tvpr_core::Result;

const TOL: f64 = 1e-4;
const SEEDS: u64 = 10;

fn assert_inputs<F>(shapes: &[&[usize]], f: F)
where
    F: Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var> + Copy,
{
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let inputs: Vec<_> = shapes.iter().map(|s| random_array(s, 1.0, &mut r)).collect();
        let report = check_gradients(&inputs, seed, f).unwrap();
        assert!(
            report.max_rel_error <= TOL,
            "seed {seed}: rel error {} at {:?}",
            report.max_rel_error,
            report.worst
        );
    }
}

fn randomize(store: &mut ParamStore<f64>, scale: f64, seed: u64) {
    let mut r = rng(seed ^ 0xabc);
    for p in store.iter_mut() {
        let shape = p.value.shape().to_vec();
        p.value = random_array(&shape, scale, &mut r);
    }
}

#[test]
fn matmul_plain_and_batched() {
    assert_inputs(&[&[3, 4], &[4, 2]], |t, v| t.matmul(v[0], v[1]));
    assert_inputs(&[&[2, 3, 4], &[2, 4, 5]], |t, v| t.matmul(v[0], v[1]));
    assert_inputs(&[&[2, 3, 4], &[4, 5]], |t, v| t.matmul(v[0], v[1]));
}

#[test]
fn transpose_permute_reshape() {
    assert_inputs(&[&[2, 3, 4]], |t, v| t.transpose(v[0]));
    assert_inputs(&[&[2, 3, 4]], |t, v| t.permute(v[0], &[2, 0, 1]));
    assert_inputs(&[&[2, 3, 4], &[4, 6]], |t, v| {
        let r = t.reshape(v[0], &[6, 4])?;
        t.matmul(r, v[1])
    });
}

#[test]
fn elementwise() {
    assert_inputs(&[&[3, 4], &[4]], |t, v| t.add(v[0], v[1]));
    assert_inputs(&[&[3, 4], &[3, 4]], |t, v| t.mul(v[0], v[1]));
    assert_inputs(&[&[3, 4]], |t, v| {
        let s = t.scale(v[0], -1.7)?;
        t.add_scalar(s, 0.3)
    });
    assert_inputs(&[&[4, 5]], |t, v| t.sigmoid(v[0]));
    assert_inputs(&[&[4, 5]], |t, v| t.gelu(v[0]));
}

#[test]
fn softmax_every_axis() {
    for axis in 0..3 {
        for seed in 0..SEEDS {
            let mut r = rng(seed);
            let x = random_array(&[2, 3, 4], 2.0, &mut r);
            let rep = check_gradients(&[x], seed, |t, v| t.softmax(v[0], axis)).unwrap();
            assert!(rep.max_rel_error <= TOL, "axis {axis} seed {seed}: {rep:?}");
        }
    }
}

#[test]
fn layer_norm_all_arguments() {
    assert_inputs(&[&[3, 6], &[6], &[6]], |t, v| t.layer_norm(v[0], v[1], v[2], 1e-6));
}

#[test]
fn reductions_and_gathers() {
    assert_inputs(&[&[4, 3]], |t, v| t.max_pool_over_axis(v[0], 0));
    assert_inputs(&[&[2, 4, 3]], |t, v| t.max_pool_over_axis(v[0], 1));
    assert_inputs(&[&[4, 3]], |t, v| t.mean_axis(v[0], 0));
    assert_inputs(&[&[5, 3]], |t, v| t.embedding_lookup(v[0], &[4, 0, 4, 2]));
    assert_inputs(&[&[2, 3], &[4, 3]], |t, v| t.concat(&[v[0], v[1]], 0));
    assert_inputs(&[&[2, 3], &[2, 2]], |t, v| t.concat(&[v[0], v[1]], 1));
    assert_inputs(&[&[3, 4]], |t, v| t.l2_normalize_rows(v[0]));
}

#[test]
fn convolutions() {
    let g = SepConvGeometry::same(3, 3, 2, 2);
    assert_inputs(&[&[5, 2, 6, 6], &[3, 2, 3, 3], &[2, 3, 3]], move |t, v| {
        nn::separable_conv3d(t, v[0], v[1], v[2], g)
    });
    assert_inputs(&[&[4, 1, 5, 5], &[2, 1, 3, 3]], |t, v| t.spatial_conv(v[0], v[1], 1, 0));
    assert_inputs(&[&[4, 2, 2, 2], &[3, 2, 3]], |t, v| t.temporal_conv(v[0], v[1], 1, 1));
}

#[test]
fn attention_inputs_and_weights() {
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let msa = MultiHeadAttention::new(&mut store, &mut r, "msa", 6, 2).unwrap();
        randomize(&mut store, 0.6, seed);
        let x = random_array(&[2, 3, 6], 1.0, &mut r);
        let ctx = random_array(&[2, 4, 6], 1.0, &mut r);
        let rep = check_gradients_with_params(&store, &[x, ctx], seed, |t, v| msa.attend(t, v[0], v[1])).unwrap();
        assert!(rep.max_rel_error <= TOL, "seed {seed}: {rep:?}");
    }
}

#[test]
fn encoder_layer_with_key_subset() {
    for seed in 0..3 {
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let layer = EncoderLayer::new(&mut store, &mut r, "layer", 4, 2, 2, 0.0).unwrap();
        randomize(&mut store, 0.5, seed);
        let x = random_array(&[4, 4], 1.0, &mut r);
        let rep =
            check_gradients_with_params(&store, &[x], seed, |t, v| layer.forward(t, v[0], Some(&[0, 1, 3]))).unwrap();
        assert!(rep.max_rel_error <= TOL, "seed {seed}: {rep:?}");
    }
}

#[test]
fn dropout_gradient_uses_same_mask() {
    let x = DenseArray::from_rows(&[&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0, 8.0]]).unwrap();
    let mut tape = Tape::new().training(3);
    let v = tape.input(x).unwrap();
    let y = tape.dropout(v, 0.5).unwrap();
    let out = tape.value(y).data().to_vec();
    let s = tape.sum(y).unwrap();
    let g = tape.backward(s).unwrap();
    for ((o, gi), xi) in out.iter().zip(g.wrt(v).unwrap()).zip(1..) {
        assert_eq!(*o, gi * xi as f64);
    }
}
