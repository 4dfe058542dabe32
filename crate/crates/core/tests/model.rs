use paraformer::data::{make_indexed_pair, PairConfig};
use paraformer::flops::count_flops;
use paraformer::gradcheck::randomize;
use paraformer::unet::{PoolingMethod, StageConfig};
use paraformer::{Error, Model, ModelConfig, PositionEncoding, Tape, Variant};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny(variant: Variant) -> ModelConfig {
    let base = match variant {
        Variant::Paraformer => ModelConfig::paraformer(),
        Variant::ParaformerU => ModelConfig::paraformer_u(),
        Variant::SerialBaseline => ModelConfig::serial_baseline(),
    };
    ModelConfig {
        descriptor_dim: 16,
        layers: 2,
        heads: 2,
        sinkhorn_iterations: 20,
        unet: StageConfig {
            depths: vec![1, 1, 1],
            dims: vec![16, 24, 16],
            pooling: PoolingMethod::Attentional,
        },
        ..base
    }
}

fn randomized(cfg: &ModelConfig, seed: u64) -> Model {
    let mut m = Model::build(cfg, seed).unwrap();
    randomize(&mut m.params, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    m
}

fn pair(k: u64) -> paraformer::data::PairSample {
    let cfg = PairConfig {
        keypoints: 24,
        descriptor_dim: 16,
        noise: 0.1,
        ..Default::default()
    };
    make_indexed_pair(&cfg, 77, k).unwrap()
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

#[test]
fn build_is_deterministic() {
    for v in [Variant::Paraformer, Variant::ParaformerU, Variant::SerialBaseline] {
        let cfg = tiny(v);
        let a = Model::build(&cfg, 3).unwrap();
        let b = Model::build(&cfg, 3).unwrap();
        assert!(a.params.bit_eq(&b.params));
        assert_eq!(a.weights_hash().unwrap(), b.weights_hash().unwrap());
        let p = pair(0);
        let (oa, ob) = (a.forward(&p.x, &p.y).unwrap(), b.forward(&p.x, &p.y).unwrap());
        assert_eq!(bits(&oa.assignment.log_p), bits(&ob.assignment.log_p));
    }
}

#[test]
fn forward_shapes_and_mass() {
    for v in [Variant::Paraformer, Variant::ParaformerU, Variant::SerialBaseline] {
        let m = randomized(&tiny(v), 1);
        let p = pair(1);
        let out = m.forward(&p.x, &p.y).unwrap();
        assert_eq!(out.assignment.shape(), (p.x.len() + 1, p.y.len() + 1));
        let cols = out.assignment.col_sums();
        assert!((cols[p.y.len()] - p.x.len() as f64).abs() < 1e-6);
        assert!(out.matches.is_injective());
        assert!(out.matches.matches.iter().all(|x| x.confidence >= m.config.match_threshold));
    }
}

#[test]
fn tape_flops_match_the_analytic_count() {
    for v in [Variant::Paraformer, Variant::ParaformerU, Variant::SerialBaseline] {
        for pe in [PositionEncoding::Wave, PositionEncoding::Mlp] {
            let cfg = ModelConfig { pe, ..tiny(v) };
            let m = Model::build(&cfg, 0).unwrap();
            let p = pair(2);
            let out = m.forward(&p.x, &p.y).unwrap();
            let want = count_flops(&cfg, p.x.len(), p.y.len()).matmul_total();
            assert_eq!(out.diagnostics.matmul_flops, want, "{v:?} {pe:?}");
        }
    }
}

#[test]
fn weights_round_trip_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    for v in [Variant::Paraformer, Variant::ParaformerU, Variant::SerialBaseline] {
        let cfg = tiny(v);
        let m = randomized(&cfg, 5);
        let path = dir.path().join(format!("{v:?}.bin"));
        m.save(&path).unwrap();
        let back = Model::load(&path, &cfg).unwrap();
        assert!(back.params.bit_eq(&m.params));
        let again = dir.path().join(format!("{v:?}.again.bin"));
        back.save(&again).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
        let p = pair(3);
        assert_eq!(
            bits(&m.forward(&p.x, &p.y).unwrap().assignment.log_p),
            bits(&back.forward(&p.x, &p.y).unwrap().assignment.log_p)
        );
    }
}

#[test]
fn corrupted_weights_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(Variant::Paraformer);
    let path = dir.path().join("w.bin");
    randomized(&cfg, 6).save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    std::fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
    assert!(Model::load(&path, &cfg).is_err());

    let mut flipped = bytes.clone();
    let last = flipped.len() - 5;
    flipped[last] ^= 0x10;
    std::fs::write(&path, &flipped).unwrap();
    assert!(Model::load(&path, &cfg).is_err());

    let mut magic = bytes.clone();
    magic[0] = b'X';
    std::fs::write(&path, &magic).unwrap();
    assert!(Model::load(&path, &cfg).is_err());

    std::fs::write(&path, b"").unwrap();
    assert!(Model::load(&path, &cfg).is_err());
}

#[test]
fn weights_for_another_architecture_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.bin");
    randomized(&tiny(Variant::Paraformer), 7).save(&path).unwrap();
    for other in [
        tiny(Variant::ParaformerU),
        tiny(Variant::SerialBaseline),
        ModelConfig { layers: 3, ..tiny(Variant::Paraformer) },
        ModelConfig { pe: PositionEncoding::Mlp, ..tiny(Variant::Paraformer) },
    ] {
        assert!(matches!(Model::load(&path, &other), Err(Error::Checkpoint(_))));
    }
    // Inference-only settings do not change the layout.
    let relaxed = ModelConfig { match_threshold: 0.5, sinkhorn_iterations: 7, ..tiny(Variant::Paraformer) };
    Model::load(&path, &relaxed).unwrap();
}

#[test]
fn end_to_end_permutation_equivariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for v in [Variant::Paraformer, Variant::SerialBaseline] {
        let m = randomized(&tiny(v), 9);
        let p = pair(4);
        let base = m.forward(&p.x, &p.y).unwrap().assignment;
        let (rows, cols) = base.shape();
        for _ in 0..5 {
            let mut perm: Vec<usize> = (0..p.x.len()).collect();
            perm.shuffle(&mut rng);
            let moved = m.forward(&p.x.permuted(&perm).unwrap(), &p.y).unwrap().assignment;
            for (r, &src) in perm.iter().enumerate() {
                assert_eq!(bits(&moved.log_p[r * cols..(r + 1) * cols]), bits(&base.log_p[src * cols..(src + 1) * cols]));
            }
            let d = rows - 1;
            assert_eq!(bits(&moved.log_p[d * cols..]), bits(&base.log_p[d * cols..]));
        }
    }
}

#[test]
fn loss_gradients_reach_every_parameter() {
    for v in [Variant::Paraformer, Variant::ParaformerU, Variant::SerialBaseline] {
        let mut m = randomized(&tiny(v), 10);
        let p = pair(5);
        let mut tape = Tape::new();
        let (loss, _) = m.loss_on_tape(&mut tape, &p.x, &p.y, &p.gt).unwrap();
        assert!(tape.scalar(loss).is_finite() && tape.scalar(loss) > 0.0);
        tape.backward(loss).unwrap();
        m.params.pull_grads(&tape).unwrap();
        for (name, t) in m.params.iter() {
            let g = t.grad().unwrap_or_else(|| panic!("{v:?}: {name} has no gradient"));
            assert!(g.iter().any(|&x| x != 0.0), "{v:?}: {name} gradient is zero");
        }
    }
}

#[test]
fn input_checks() {
    let m = Model::build(&tiny(Variant::ParaformerU), 0).unwrap();
    let p = pair(6);
    let few = p.x.permuted(&[0]).unwrap();
    assert!(m.forward(&few, &p.y).is_err());
    let bad_gt = paraformer::Correspondences { matches: vec![(0, 0)], ..Default::default() };
    assert!(m.loss_on_tape(&mut Tape::new(), &p.x, &p.y, &bad_gt).is_err());
    let wide = ModelConfig { descriptor_dim: 32, ..tiny(Variant::Paraformer) };
    assert!(Model::build(&wide, 0).unwrap().forward(&p.x, &p.y).is_err());
}

#[test]
fn config_toml_round_trip_and_validation() {
    let cfg = tiny(Variant::ParaformerU);
    assert_eq!(ModelConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    assert!(ModelConfig::from_toml("descriptor_dim = 10\nheads = 4").is_err());
    assert!(ModelConfig::from_toml("no_such_field = 1").is_err());
    let partial = ModelConfig::from_toml("descriptor_dim = 64\nlayers = 5").unwrap();
    assert_eq!((partial.descriptor_dim, partial.layers, partial.heads), (64, 5, 4));
}

#[test]
fn sharing_reduces_model_parameters() {
    let on = ModelConfig::paraformer();
    let off = ModelConfig { sharing: paraformer::attention::Sharing { qkv: false, merge: false, ..on.sharing }, ..on.clone() };
    let (a, b) = (Model::build(&on, 0).unwrap().param_count(), Model::build(&off, 0).unwrap().param_count());
    assert!(a < b);
}
