use paraformer::attention::Sharing;
use paraformer::flops::{count_flops, parallel_layer, serial_layer};
use paraformer::{Model, ModelConfig, PositionEncoding, Variant};
use proptest::prelude::*;

#[test]
fn hand_tally_of_a_two_point_layer() {
    // M = N = 2, C = 4, one head, Q/K/V, merge and logits shared.
    //   projections  3·(2·2·4·4)·2 + 2·(2·2·4·4)·2        = 384 + 256 = 640
    //   logits       self 2·(2·2·4) + 2·(2·2·4), cross 2·2·2·4 = 32 + 32 + 32 = 96
    //   values       self 64, cross 2·(2·2·2·4)            = 128
    //   softmax      5·(4 + 4 + 4 + 4)                      = 80
    //   fusion       2·[2·2·8·8 + 2·2·8·4]                  = 768
    let f = parallel_layer(2, 2, 4, 1, &Sharing::default());
    assert_eq!(f.projections, 640);
    assert_eq!(f.attention_logits, 96);
    assert_eq!(f.attention_values, 128);
    assert_eq!(f.softmax, 80);
    assert_eq!(f.fusion, 768);
    assert_eq!(f.total, 1712);

    // Whole model, no position encoding, one Sinkhorn iteration:
    //   matching  2·(2·2·4·4) + 2·2·2·4 = 160, Sinkhorn 6·3·3 = 54.
    let cfg = ModelConfig {
        descriptor_dim: 4,
        layers: 1,
        heads: 1,
        pe: PositionEncoding::None,
        sinkhorn_iterations: 1,
        ..ModelConfig::paraformer()
    };
    let total = count_flops(&cfg, 2, 2);
    assert_eq!(total.matching, 160);
    assert_eq!(total.sinkhorn, 54);
    assert_eq!(total.total, 1712 + 160 + 54);
}

#[test]
fn hand_tally_of_a_serial_self_layer() {
    // Per image: 4 projections of 2·2·4·4, logits and values 2·2·2·4 each,
    // softmax 5·4, MLP 2·2·8·8 + 2·2·8·4.
    let f = serial_layer(2, 2, 4, 1, false);
    assert_eq!(f.total, 2 * (4 * 64 + 32 + 32 + 20 + 384));
}

#[test]
fn paper_scale_ratios() {
    let s = count_flops(&ModelConfig::serial_baseline(), 2048, 2048).total as f64;
    let p = count_flops(&ModelConfig::paraformer(), 2048, 2048).total as f64;
    let u = count_flops(&ModelConfig::paraformer_u(), 2048, 2048).total as f64;
    assert!((0.75..=0.90).contains(&(p / s)), "{}", p / s);
    assert!((0.42..=0.56).contains(&(u / s)), "{}", u / s);
}

#[test]
fn analytic_count_matches_tape_counter_at_small_scale() {
    let kp = |n: usize, c: usize| {
        let pos = paraformer::Tensor::new(vec![n, 3], (0..n).flat_map(|i| [i as f32, i as f32, 0.5]).collect()).unwrap();
        let mut desc = vec![0.0f32; n * c];
        for i in 0..n {
            desc[i * c + i % c] = 1.0;
        }
        paraformer::KeypointSet::new(pos, paraformer::Tensor::new(vec![n, c], desc).unwrap(), (64.0, 64.0)).unwrap()
    };
    for variant in [Variant::Paraformer, Variant::ParaformerU, Variant::SerialBaseline] {
        for sharing in [Sharing::default(), Sharing::none()] {
            let base = match variant {
                Variant::Paraformer => ModelConfig::paraformer(),
                Variant::ParaformerU => ModelConfig::paraformer_u(),
                Variant::SerialBaseline => ModelConfig::serial_baseline(),
            };
            let cfg = ModelConfig {
                descriptor_dim: 8,
                layers: 2,
                heads: 2,
                sharing,
                sinkhorn_iterations: 3,
                unet: paraformer::unet::StageConfig {
                    depths: vec![1, 2, 1],
                    dims: vec![8, 4, 8],
                    ..Default::default()
                },
                ..base
            };
            let (m, n) = (9, 6);
            let out = Model::build(&cfg, 0).unwrap().forward(&kp(m, 8), &kp(n, 8)).unwrap();
            assert_eq!(out.diagnostics.matmul_flops, count_flops(&cfg, m, n).matmul_total());
        }
    }
}

proptest! {
    #[test]
    fn weight_sharing_strictly_saves(m in 1usize..3000, n in 1usize..3000) {
        let on = ModelConfig::paraformer();
        let off = ModelConfig { sharing: Sharing::none(), ..on.clone() };
        prop_assert!(count_flops(&on, m, n).total < count_flops(&off, m, n).total);
        let logits_only = ModelConfig { sharing: Sharing { attn_weights: false, ..on.sharing }, ..on.clone() };
        prop_assert!(count_flops(&on, m, n).total < count_flops(&logits_only, m, n).total);
    }

    #[test]
    fn counts_grow_with_keypoints(m in 1usize..500, n in 1usize..500) {
        for cfg in [ModelConfig::paraformer(), ModelConfig::paraformer_u(), ModelConfig::serial_baseline()] {
            prop_assert!(count_flops(&cfg, m, n).total < count_flops(&cfg, m + 1, n).total);
        }
    }
}
