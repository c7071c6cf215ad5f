use pretzel_core::backbone::{Backbone, BackboneConfig, MaskMode};
use pretzel_core::{Group, Matrix, ParamStore};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn config() -> BackboneConfig {
    BackboneConfig { layers: 2, width: 8, heads: 2, ff_mult: 2.0, vocab: 8, max_seq: 12 }
}

fn setup(seed: u64) -> (ParamStore<f64>, Backbone) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let bb = Backbone::new(&mut store, "bb", Group::Deep, &config(), &mut rng).unwrap();
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        for v in store.get_mut(id).data.iter_mut() {
            let n: f64 = StandardNormal.sample(&mut rng);
            *v += 0.2 * n;
        }
    }
    (store, bb)
}

fn inputs(rows: usize, seed: u64) -> Matrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * 8).map(|_| StandardNormal.sample(&mut rng)).collect();
    Matrix::from_vec(rows, 8, data).unwrap()
}

/// Output rows that must not move when input row `j` changes.
fn frozen_rows(mode: MaskMode, j: usize) -> std::ops::Range<usize> {
    match mode {
        MaskMode::Causal => 0..j,
        MaskMode::SelfExclusive => 0..j + 1,
    }
}

#[test]
fn outputs_ignore_future_inputs_in_both_modes() {
    let (store, bb) = setup(1);
    let x = inputs(10, 2);
    for mode in [MaskMode::Causal, MaskMode::SelfExclusive] {
        let base = bb.forward_full(&store, &x, mode).unwrap();
        for j in 0..x.rows {
            let mut y = x.clone();
            // A row-constant shift would be cancelled by layer norm.
            for (v, d) in y.row_mut(j).iter_mut().zip(inputs(1, 100 + j as u64).data) {
                *v += d;
            }
            let out = bb.forward_full(&store, &y, mode).unwrap();
            for r in 0..x.rows {
                let same = out.row(r) == base.row(r);
                if frozen_rows(mode, j).contains(&r) {
                    assert!(same, "{mode:?}: row {r} moved when input {j} changed");
                } else {
                    assert!(!same, "{mode:?}: row {r} ignored input {j}");
                }
            }
        }
    }
}

#[test]
fn recorded_gradients_match_central_differences() {
    let (mut store, bb) = setup(3);
    let x = inputs(6, 4);
    let upstream = inputs(6, 5);
    let objective = |store: &ParamStore<f64>, x: &Matrix<f64>, mode| -> f64 {
        let out = bb.forward_full(store, x, mode).unwrap();
        out.data.iter().zip(&upstream.data).map(|(a, b)| a * b).sum()
    };
    let h = 1e-5;
    for mode in [MaskMode::Causal, MaskMode::SelfExclusive] {
        let grads = {
            let rec = bb.record(&store, &x, mode, &[Group::Deep]).unwrap();
            rec.backward(&upstream).unwrap()
        };
        let mut worst = 0.0f64;
        for (id, g) in &grads.params {
            for i in (0..g.data.len()).step_by(3) {
                let orig = store.get(*id).data[i];
                store.get_mut(*id).data[i] = orig + h;
                let up = objective(&store, &x, mode);
                store.get_mut(*id).data[i] = orig - h;
                let down = objective(&store, &x, mode);
                store.get_mut(*id).data[i] = orig;
                let num = (up - down) / (2.0 * h);
                worst = worst.max((num - g.data[i]).abs() / num.abs().max(g.data[i].abs()).max(1e-6));
            }
        }
        for i in 0..x.data.len() {
            let mut y = x.clone();
            y.data[i] += h;
            let up = objective(&store, &y, mode);
            y.data[i] -= 2.0 * h;
            let down = objective(&store, &y, mode);
            let num = (up - down) / (2.0 * h);
            let a = grads.inputs.data[i];
            worst = worst.max((num - a).abs() / num.abs().max(a.abs()).max(1e-6));
        }
        assert!(worst < 1e-4, "{mode:?}: worst relative error {worst:e}");
        // The start vector only enters the self-exclusive shift.
        let unused = usize::from(mode == MaskMode::Causal);
        assert!(grads.params.len() + unused >= store.len());
    }
}
