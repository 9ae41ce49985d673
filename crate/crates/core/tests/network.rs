mod common;

use tvpr_core::caption::Vocabulary;
use tvpr_core::clip::VideoClip;
use tvpr_core::config::{Ablation, LossConfig, ModelConfig};
use tvpr_core::model::Network;
use tvpr_core::relation::contrastive_loss;
use tvpr_core::tensor::gradcheck::check_gradients_with_params;
use tvpr_core::tensor::{DenseArray, ParamStore, Tape};

use common::{random_array, rng};

fn tiny_config() -> ModelConfig {
    let mut cfg = ModelConfig::desk();
    cfg.visual.height = 16;
    cfg.visual.width = 16;
    cfg.visual.dim = 8;
    cfg.visual.blocks = 1;
    cfg.visual.heads = 2;
    cfg.visual.mlp_ratio = 2;
    cfg.motion.conv_channels = vec![3, 4];
    cfg.motion.dim = 8;
    cfg.motion.layers = 1;
    cfg.motion.mlp_ratio = 2;
    cfg.caption.max_len = 6;
    cfg.caption.dim = 8;
    cfg.caption.layers = 1;
    cfg.caption.mlp_ratio = 2;
    cfg.fusion.dim = 8;
    cfg.fusion.layers = 1;
    cfg.fusion.heads = 2;
    cfg.fusion.mlp_ratio = 2;
    cfg.relation.dim = 8;
    cfg
}

fn clips(seed: u64, n: usize) -> Vec<VideoClip> {
    let mut r = rng(seed);
    (0..n)
        .map(|i| {
            let a = random_array(&[3, 3, 16, 16], 0.5, &mut r);
            let data = a.data().iter().map(|&x| (x + 0.5) as f32).collect();
            let frames = DenseArray::new(vec![3, 3, 16, 16], data).unwrap();
            VideoClip::at_fps(frames, 2.0, format!("c{i}")).unwrap()
        })
        .collect()
}

fn random_store(cfg: &ModelConfig, vocab: usize, seed: u64) -> (ParamStore<f64>, Network) {
    let mut store = ParamStore::new();
    let net = Network::new(&mut store, cfg, vocab, seed).unwrap();
    let mut r = rng(seed + 100);
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let p = store.get_mut(id);
        let noise = random_array(p.value.shape(), 0.3, &mut r);
        for (w, n) in p.value.data_mut().iter_mut().zip(noise.data()) {
            *w += n;
        }
    }
    (store, net)
}

#[test]
fn end_to_end_loss_gradient_matches_finite_differences() {
    let cfg = tiny_config();
    let texts = ["red top walks left", "blue shirt pauses"];
    let vocab = Vocabulary::build(&texts, 1).unwrap();
    let clips = clips(3, 2);
    for (k, ablation) in Ablation::ALL.into_iter().enumerate() {
        let (store, net) = random_store(&cfg, vocab.len(), k as u64);
        let report = check_gradients_with_params(&store, &[], 7, |tape: &mut Tape<'_, f64>, _| {
            let mut vids = Vec::new();
            let mut caps = Vec::new();
            for (clip, text) in clips.iter().zip(texts) {
                vids.push(net.encode_video(tape, clip, ablation, None)?);
                caps.push(net.encode_caption(tape, text, &vocab)?);
            }
            let vids = tape.concat(&vids, 0)?;
            let caps = tape.concat(&caps, 0)?;
            let scores = net.relation.score_batch(tape, caps, vids)?;
            contrastive_loss(tape, scores, &LossConfig::default())
        })
        .unwrap();
        assert!(
            report.max_rel_error <= 1e-4,
            "{ablation}: relative error {} at {:?}",
            report.max_rel_error,
            report.worst
        );
    }
}
