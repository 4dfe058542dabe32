use paraformer::attention::{parallel_layer, serial_layer_pair, ParallelLayer, SerialLayer, Sharing};
use paraformer::gradcheck::randomize;
use paraformer::params::ParamStore;
use paraformer::{Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Row-major `rows×cols` matrix in f64 for the loop oracle.
#[derive(Clone, Debug)]
struct Mat {
    rows: usize,
    cols: usize,
    d: Vec<f64>,
}

impl Mat {
    fn at(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.cols + j]
    }
}

fn lin(store: &ParamStore, name: &str, x: &Mat) -> Mat {
    let w = store.get(&format!("{name}.weight")).unwrap();
    let b = store.get(&format!("{name}.bias")).unwrap();
    let out = w.cols();
    let mut d = vec![0.0; x.rows * out];
    for i in 0..x.rows {
        for o in 0..out {
            let mut s = b.get(0, o) as f64;
            for k in 0..x.cols {
                s += x.at(i, k) * w.get(k, o) as f64;
            }
            d[i * out + o] = s;
        }
    }
    Mat { rows: x.rows, cols: out, d }
}

fn relu(m: &Mat) -> Mat {
    Mat { d: m.d.iter().map(|v| v.max(0.0)).collect(), ..m.clone() }
}

fn mlp2(store: &ParamStore, prefix: &str, x: &Mat) -> Mat {
    lin(store, &format!("{prefix}.1"), &relu(&lin(store, &format!("{prefix}.0"), x)))
}

fn cat(a: &Mat, b: &Mat) -> Mat {
    let cols = a.cols + b.cols;
    let mut d = Vec::with_capacity(a.rows * cols);
    for i in 0..a.rows {
        d.extend_from_slice(&a.d[i * a.cols..(i + 1) * a.cols]);
        d.extend_from_slice(&b.d[i * b.cols..(i + 1) * b.cols]);
    }
    Mat { rows: a.rows, cols, d }
}

fn add(a: &Mat, b: &Mat) -> Mat {
    Mat { d: a.d.iter().zip(&b.d).map(|(x, y)| x + y).collect(), ..a.clone() }
}

/// Multi-head attention of `q` rows over `k`/`v` rows by explicit loops.
fn attention(q: &Mat, k: &Mat, v: &Mat, heads: usize) -> Mat {
    let c = q.cols;
    let dh = c / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; q.rows * c];
    for h in 0..heads {
        for i in 0..q.rows {
            let logits: Vec<f64> = (0..k.rows)
                .map(|j| (0..dh).map(|t| q.at(i, h * dh + t) * k.at(j, h * dh + t)).sum::<f64>() * scale)
                .collect();
            let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for t in 0..dh {
                out[i * c + h * dh + t] = (0..k.rows).map(|j| e[j] / z * v.at(j, h * dh + t)).sum();
            }
        }
    }
    Mat { rows: q.rows, cols: c, d: out }
}

fn oracle_parallel(store: &ParamStore, layer: &ParallelLayer, x: &Mat, y: &Mat) -> (Mat, Mat) {
    let p = &layer.prefix;
    let s = &layer.sharing;
    let qkv = |path: &str, t: &Mat| {
        let base = if s.qkv { p.clone() } else { format!("{p}.{path}") };
        (
            lin(store, &format!("{base}.q"), t),
            lin(store, &format!("{base}.k"), t),
            lin(store, &format!("{base}.v"), t),
        )
    };
    let (qx, kx, vx) = qkv("self", x);
    let (qy, ky, vy) = qkv("self", y);
    let self_x = attention(&qx, &kx, &vx, layer.heads);
    let self_y = attention(&qy, &ky, &vy, layer.heads);
    let (cqx, ckx, cvx) = qkv("cross", x);
    let (cqy, cky, cvy) = qkv("cross", y);
    let cross_x = attention(&cqx, &cky, &cvy, layer.heads);
    // Shared weights: the y→x logits are the transposed x→y logits.
    let cross_y = if s.attn_weights {
        attention(&cky, &cqx, &cvx, layer.heads)
    } else {
        attention(&cqy, &ckx, &cvx, layer.heads)
    };
    let merge = |path: &str| if s.merge { format!("{p}.merge") } else { format!("{p}.{path}.merge") };
    let fuse = |side: &str| if s.ffn { format!("{p}.fuse") } else { format!("{p}.fuse_{side}") };
    let fx = cat(&lin(store, &merge("self"), &self_x), &lin(store, &merge("cross"), &cross_x));
    let fy = cat(&lin(store, &merge("self"), &self_y), &lin(store, &merge("cross"), &cross_y));
    (add(x, &mlp2(store, &fuse("x"), &fx)), add(y, &mlp2(store, &fuse("y"), &fy)))
}

fn oracle_serial(store: &ParamStore, layer: &SerialLayer, x: &Mat, y: &Mat, cross: bool) -> (Mat, Mat) {
    let p = &layer.prefix;
    let msg = |q: &Mat, src: &Mat| {
        let a = attention(
            &lin(store, &format!("{p}.q"), q),
            &lin(store, &format!("{p}.k"), src),
            &lin(store, &format!("{p}.v"), src),
            layer.heads,
        );
        lin(store, &format!("{p}.merge"), &a)
    };
    let (sx, sy) = if cross { (y, x) } else { (x, y) };
    let mx = msg(x, sx);
    let my = msg(y, sy);
    (
        add(x, &mlp2(store, &format!("{p}.mlp"), &cat(x, &mx))),
        add(y, &mlp2(store, &format!("{p}.mlp"), &cat(y, &my))),
    )
}

fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    Mat { rows, cols, d: (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect() }
}

fn leaf(tape: &mut Tape, m: &Mat) -> Var {
    tape.leaf_raw(m.rows, m.cols, m.d.clone(), false).unwrap()
}

fn assert_close(got: &[f64], want: &Mat, tol: f64) {
    assert_eq!(got.len(), want.d.len());
    for (e, (g, w)) in got.iter().zip(&want.d).enumerate() {
        assert!((g - w).abs() < tol, "entry {e}: {g} vs {w}");
    }
}

fn all_sharings() -> Vec<Sharing> {
    let mut out = Vec::new();
    for bits in 0..16u8 {
        out.push(Sharing {
            qkv: bits & 1 != 0,
            merge: bits & 2 != 0,
            ffn: bits & 4 != 0,
            attn_weights: bits & 8 != 0,
        });
    }
    out
}

#[test]
fn parallel_layer_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for sharing in all_sharings() {
        let layer = ParallelLayer::new("l", 8, 2, sharing).unwrap();
        let mut store = ParamStore::new();
        layer.register(&mut store, &mut rng).unwrap();
        randomize(&mut store, &mut rng).unwrap();
        let x = random_mat(&mut rng, 5, 8);
        let y = random_mat(&mut rng, 7, 8);
        let mut tape = Tape::new();
        let (xv, yv) = (leaf(&mut tape, &x), leaf(&mut tape, &y));
        let out = parallel_layer(&mut tape, &store, &layer, xv, yv).unwrap();
        let (wx, wy) = oracle_parallel(&store, &layer, &x, &y);
        assert_close(tape.value(out.x), &wx, 1e-10);
        assert_close(tape.value(out.y), &wy, 1e-10);
    }
}

#[test]
fn shared_cross_logits_are_exact_transposes() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let layer = ParallelLayer::new("l", 8, 4, Sharing::default()).unwrap();
    let mut store = ParamStore::new();
    layer.register(&mut store, &mut rng).unwrap();
    randomize(&mut store, &mut rng).unwrap();
    let (x, y) = (random_mat(&mut rng, 3, 8), random_mat(&mut rng, 6, 8));
    let mut tape = Tape::new();
    let (xv, yv) = (leaf(&mut tape, &x), leaf(&mut tape, &y));
    let out = parallel_layer(&mut tape, &store, &layer, xv, yv).unwrap();
    for (&xy, &yx) in out.cross_logits.xy.iter().zip(&out.cross_logits.yx) {
        assert_eq!(tape.shape(xy), (3, 6));
        assert_eq!(tape.shape(yx), (6, 3));
        for i in 0..3 {
            for j in 0..6 {
                assert_eq!(tape.value(xy)[i * 6 + j].to_bits(), tape.value(yx)[j * 3 + i].to_bits());
            }
        }
    }
    for maps in [&out.heads.self_x, &out.heads.cross_xy, &out.heads.cross_yx] {
        for &m in maps.iter() {
            let (r, c) = tape.shape(m);
            for i in 0..r {
                let s: f64 = tape.value(m)[i * c..(i + 1) * c].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn serial_pair_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let s = SerialLayer::new("s", 8, 2).unwrap();
    let c = SerialLayer::new("c", 8, 2).unwrap();
    let mut store = ParamStore::new();
    s.register(&mut store, &mut rng).unwrap();
    c.register(&mut store, &mut rng).unwrap();
    randomize(&mut store, &mut rng).unwrap();
    let (x, y) = (random_mat(&mut rng, 4, 8), random_mat(&mut rng, 6, 8));
    let mut tape = Tape::new();
    let (xv, yv) = (leaf(&mut tape, &x), leaf(&mut tape, &y));
    let (ox, oy) = serial_layer_pair(&mut tape, &store, &s, &c, xv, yv).unwrap();
    let (x1, y1) = oracle_serial(&store, &s, &x, &y, false);
    let (x2, y2) = oracle_serial(&store, &c, &x1, &y1, true);
    assert_close(tape.value(ox), &x2, 1e-10);
    assert_close(tape.value(oy), &y2, 1e-10);
}

fn permute_rows(m: &Mat, perm: &[usize]) -> Mat {
    let mut d = Vec::with_capacity(m.d.len());
    for &p in perm {
        d.extend_from_slice(&m.d[p * m.cols..(p + 1) * m.cols]);
    }
    Mat { d, ..m.clone() }
}

fn shuffled(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

#[test]
fn parallel_layer_is_jointly_permutation_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    for sharing in [Sharing::default(), Sharing::none()] {
        let layer = ParallelLayer::new("l", 16, 4, sharing).unwrap();
        let mut store = ParamStore::new();
        layer.register(&mut store, &mut rng).unwrap();
        randomize(&mut store, &mut rng).unwrap();
        let (x, y) = (random_mat(&mut rng, 23, 16), random_mat(&mut rng, 19, 16));
        let mut tape = Tape::new();
        let (xv, yv) = (leaf(&mut tape, &x), leaf(&mut tape, &y));
        let base = parallel_layer(&mut tape, &store, &layer, xv, yv).unwrap();
        for _ in 0..5 {
            let perm = shuffled(&mut rng, 23);
            let px = permute_rows(&x, &perm);
            let mut t2 = Tape::new();
            let (xv2, yv2) = (leaf(&mut t2, &px), leaf(&mut t2, &y));
            let out = parallel_layer(&mut t2, &store, &layer, xv2, yv2).unwrap();
            let want = permute_rows(&Mat { rows: 23, cols: 16, d: tape.value(base.x).to_vec() }, &perm);
            assert_eq!(bits(t2.value(out.x)), bits(&want.d));
            assert_eq!(bits(t2.value(out.y)), bits(tape.value(base.y)));
        }
    }
}

#[test]
fn serial_layers_are_jointly_permutation_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(35);
    let s = SerialLayer::new("s", 16, 4).unwrap();
    let c = SerialLayer::new("c", 16, 4).unwrap();
    let mut store = ParamStore::new();
    s.register(&mut store, &mut rng).unwrap();
    c.register(&mut store, &mut rng).unwrap();
    randomize(&mut store, &mut rng).unwrap();
    let (x, y) = (random_mat(&mut rng, 21, 16), random_mat(&mut rng, 17, 16));
    let mut tape = Tape::new();
    let (xv, yv) = (leaf(&mut tape, &x), leaf(&mut tape, &y));
    let (bx, by) = serial_layer_pair(&mut tape, &store, &s, &c, xv, yv).unwrap();
    for _ in 0..5 {
        let perm = shuffled(&mut rng, 21);
        let mut t2 = Tape::new();
        let (xv2, yv2) = (leaf(&mut t2, &permute_rows(&x, &perm)), leaf(&mut t2, &y));
        let (ox, oy) = serial_layer_pair(&mut t2, &store, &s, &c, xv2, yv2).unwrap();
        let want = permute_rows(&Mat { rows: 21, cols: 16, d: tape.value(bx).to_vec() }, &perm);
        assert_eq!(bits(t2.value(ox)), bits(&want.d));
        assert_eq!(bits(t2.value(oy)), bits(tape.value(by)));
    }
}

#[test]
fn sharing_reduces_parameters() {
    let count = |sharing: Sharing| {
        let layer = ParallelLayer::new("l", 32, 4, sharing).unwrap();
        let mut store = ParamStore::new();
        layer.register(&mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        store.count()
    };
    let none = count(Sharing::none());
    let qkv = count(Sharing { qkv: true, ..Sharing::none() });
    let both = count(Sharing { qkv: true, merge: true, ..Sharing::none() });
    let c = 32;
    assert_eq!(none - qkv, 3 * (c * c + c));
    assert_eq!(qkv - both, c * c + c);
    // Attention-weight sharing changes compute, not parameters.
    assert_eq!(count(Sharing { attn_weights: true, ..Sharing::none() }), none);
}

#[test]
fn rejects_mismatched_widths() {
    assert!(ParallelLayer::new("l", 10, 4, Sharing::default()).is_err());
    let layer = ParallelLayer::new("l", 8, 2, Sharing::default()).unwrap();
    let mut store = ParamStore::new();
    layer.register(&mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut tape = Tape::new();
    let x = tape.leaf_raw(2, 6, vec![0.0; 12], false).unwrap();
    let y = tape.leaf_raw(2, 8, vec![0.0; 16], false).unwrap();
    assert!(parallel_layer(&mut tape, &store, &layer, x, y).is_err());
}
