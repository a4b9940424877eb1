use cramming::model::{EmbeddingKind, FfnKind, Model, ModelConfig, NormPlacement};
use cramming::tensor::{finite_diff_check, ParamStore, Tape, Tensor, Var};
use cramming::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_f64(shape, &v).unwrap()
}

/// Reduces an arbitrary output to a scalar through fixed random weights so
/// that no gradient is trivially symmetric.
fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(&mut rng, &shape);
    let w = tape.leaf(w);
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn check_op<F>(shapes: &[&[usize]], f: F)
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::new();
    for (i, s) in shapes.iter().enumerate() {
        store.insert(&format!("x{i}"), random(&mut rng, s)).unwrap();
    }
    let report = finite_diff_check(
        |tape, store| {
            let vars: Vec<Var> = store.ids().map(|id| tape.param(store, id)).collect();
            let y = f(tape, &vars)?;
            weighted_sum(tape, y, 99)
        },
        &mut store,
        H,
    )
    .unwrap();
    assert!(report.max_rel_error < TOL, "{report:?}");
}

#[test]
fn matmul_gradients() {
    check_op(&[&[3, 4], &[4, 5]], |t, v| t.matmul(v[0], v[1]));
    check_op(&[&[3, 4], &[5, 4]], |t, v| t.matmul_t(v[0], v[1]));
}

#[test]
fn elementwise_gradients() {
    check_op(&[&[3, 4], &[3, 4]], |t, v| t.add(v[0], v[1]));
    check_op(&[&[3, 4], &[3, 4]], |t, v| t.mul(v[0], v[1]));
    check_op(&[&[3, 4], &[4]], |t, v| t.add_row(v[0], v[1]));
    check_op(&[&[6, 4], &[2, 4]], |t, v| t.add_tiled(v[0], v[1]));
    check_op(&[&[3, 4], &[1]], |t, v| t.scale_by(v[0], v[1]));
    check_op(&[&[3, 4]], |t, v| t.scale(v[0], -1.7));
    check_op(&[&[3, 4]], |t, v| t.gelu(v[0]));
}

#[test]
fn normalization_gradients() {
    check_op(&[&[3, 6], &[6], &[6]], |t, v| t.layer_norm(v[0], v[1], v[2], 1e-12));
    check_op(&[&[3, 5]], |t, v| t.softmax(v[0], 1));
    check_op(&[&[3, 5]], |t, v| t.softmax(v[0], 0));
}

#[test]
fn indexing_gradients() {
    check_op(&[&[5, 3]], |t, v| t.gather_rows(v[0], &[4, 0, 4, 2]));
    check_op(&[&[5, 3]], |t, v| t.embedding(v[0], &[1, 1, 3]));
    check_op(&[&[3, 6]], |t, v| t.slice_cols(v[0], 2, 5));
}

#[test]
fn cross_entropy_gradient() {
    check_op(&[&[4, 7]], |t, v| t.cross_entropy(v[0], &[0, 6, 3, 3]));
}

#[test]
fn attention_gradients() {
    check_op(&[&[6, 4], &[6, 4], &[6, 4]], |t, v| t.attention(v[0], v[1], v[2], 2, 3, 2, None));
    check_op(&[&[6, 4], &[6, 4], &[6, 4]], |t, v| t.attention(v[0], v[1], v[2], 2, 3, 2, Some(&[2, 3])));
}

#[test]
fn rotary_gradient() {
    check_op(&[&[6, 8]], |t, v| t.rotary(v[0], 2, 3, 2));
}

fn tiny() -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        hidden_dim: 8,
        num_heads: 2,
        ffn_dim: 16,
        vocab_size: 13,
        seq_len: 5,
        ..ModelConfig::default()
    }
}

fn check_model(cfg: &ModelConfig) {
    let model = Model::<f64>::build(cfg, 5).unwrap();
    let mut store = model.into_params();
    let ids: Vec<usize> = (0..10).map(|i| (i * 7 + 3) % cfg.vocab_size).collect();
    let masked = [1, 4, 7, 8];
    let labels = [2, 0, 12, 5];
    let report = finite_diff_check(
        |tape, store| {
            let m = Model::from_params(cfg, store.clone())?;
            m.mlm_loss(tape, &ids, 2, 5, &masked, &labels, None)
        },
        &mut store,
        H,
    )
    .unwrap();
    assert!(report.checked == cramming::model::param_count(cfg));
    assert!(report.max_rel_error < TOL, "{cfg:?}\n{report:?}");
}

#[test]
fn crammed_model_gradients() {
    check_model(&tiny());
}

#[test]
fn post_norm_plain_ffn_gradients() {
    check_model(&ModelConfig { norm_placement: NormPlacement::Post, ffn_kind: FfnKind::Gelu, ..tiny() });
}

#[test]
fn biased_untied_dense_gradients() {
    check_model(&ModelConfig {
        qkv_bias: true,
        linear_bias: true,
        decoder_bias: true,
        nonlinear_head: true,
        tie_embeddings: false,
        sparse_prediction: false,
        embedding_kind: EmbeddingKind::Learned,
        ..tiny()
    });
}

#[test]
fn rotary_model_gradients() {
    check_model(&ModelConfig { embedding_kind: EmbeddingKind::Rotary, embedding_norm: false, final_norm: false, ..tiny() });
}
