//! Central finite-difference checks of every analytic gradient.

use gkvlp::autograd::{Grads, Graph};
use gkvlp::data_model::SampleRecord;
use gkvlp::downstream::classification::binary_cross_entropy;
use gkvlp::gk_fusion::{ecls_loss, Grounding};
use gkvlp::model::{Ablation, GkModel};
use gkvlp::objectives::{cross_entropy, itc_loss, itm_loss, lm_loss, LossWeights};
use gkvlp::params::ParamId;
use gkvlp::tensor::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;
/// Below this magnitude both derivatives count as zero and are compared
/// absolutely.
const TINY: f64 = 1e-7;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < TINY {
        (analytic - numeric).abs()
    } else {
        (analytic - numeric).abs() / scale
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Checks d loss / d input for every entry of every input.
fn check_inputs(inputs: &[Matrix], f: impl Fn(&mut Graph, &[gkvlp::autograd::Var]) -> gkvlp::autograd::Var) {
    let eval = |ms: &[Matrix]| {
        let mut g = Graph::new();
        let vars: Vec<_> = ms.iter().map(|m| g.input(m.clone())).collect();
        let l = f(&mut g, &vars);
        g.scalar(l)
    };
    let mut g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|m| g.input(m.clone())).collect();
    let loss = f(&mut g, &vars);
    let grads = g.backward(loss);
    for (i, m) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[i]).cloned().unwrap_or_else(|| Matrix::zeros(m.rows(), m.cols()));
        for idx in 0..m.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[idx] += STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[idx] -= STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
            let err = rel_err(analytic.data()[idx], numeric);
            assert!(err <= TOL, "input {i} entry {idx}: analytic {} numeric {numeric} err {err}", analytic.data()[idx]);
        }
    }
}

pub fn itc_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let inputs = [random_matrix(&mut rng, 3, 4), random_matrix(&mut rng, 3, 4), Matrix::scalar(0.1f64.ln())];
    check_inputs(&inputs, |g, v| {
        let zi = g.l2_normalize_rows(v[0]);
        let zt = g.l2_normalize_rows(v[1]);
        itc_loss(g, zi, zt, v[2]).unwrap()
    });
}

pub fn itm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let inputs = [random_matrix(&mut rng, 4, 2)];
    check_inputs(&inputs, |g, v| itm_loss(g, v[0], &[true, true, false, false]).unwrap());
}

pub fn lm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inputs = [random_matrix(&mut rng, 5, 7)];
    check_inputs(&inputs, |g, v| lm_loss(g, v[0], &[1, 6, 0, 3, 3], &[true, true, false, true, true]).unwrap());
}

pub fn weighted_cross_entropy_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let inputs = [random_matrix(&mut rng, 3, 5)];
    check_inputs(&inputs, |g, v| cross_entropy(g, v[0], &[4, 0, 2], &[0.5, 1.0, 2.0]));
}

pub fn ecls_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inputs = [random_matrix(&mut rng, 1, 6), random_matrix(&mut rng, 14, 6), random_matrix(&mut rng, 14, 6)];
    let labels: Vec<bool> = (0..14).map(|d| d % 4 == 1).collect();
    check_inputs(&inputs, |g, v| {
        let q = g.l2_normalize_rows(v[0]);
        let p = g.l2_normalize_rows(v[1]);
        let n = g.l2_normalize_rows(v[2]);
        ecls_loss(g, q, p, n, &labels, 0.2).unwrap().unwrap()
    });
}

pub fn binary_cross_entropy_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let inputs = [random_matrix(&mut rng, 1, 14)];
    let labels: Vec<bool> = (0..14).map(|d| d % 3 == 0).collect();
    check_inputs(&inputs, |g, v| binary_cross_entropy(g, v[0], &labels));
}

pub fn total_loss_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let inputs = [random_matrix(&mut rng, 1, 4), random_matrix(&mut rng, 1, 4)];
    let w = LossWeights {
        itm: 0.5,
        lm: 2.0,
        ecls: 1.5,
        ..LossWeights::default()
    };
    check_inputs(&inputs, |g, v| {
        let a = g.slice_cols(v[0], 0, 1);
        let b = g.slice_cols(v[0], 1, 2);
        let c = g.slice_cols(v[1], 0, 1);
        let d = g.mul(v[1], v[1]);
        let d = g.sum(d);
        let c = g.exp(c);
        gkvlp::objectives::total_loss_node(g, a, b, c, Some(d), &w)
    });
}

fn batch_loss(model: &GkModel, batch: &[&SampleRecord], ablation: Ablation, w: &LossWeights, perm: &[usize]) -> (f64, Grads) {
    let mut g = Graph::with_params(&model.store);
    let l = model.pretrain_batch(&mut g, batch, ablation, w, perm).unwrap();
    (g.scalar(l.total), g.backward(l.total))
}

/// Perturbs up to `per_tensor` entries of every parameter whose name
/// starts with one of `prefixes` and compares against the tape gradient.
fn check_params(model: &mut GkModel, prefixes: &[&str], per_tensor: usize, loss: impl Fn(&GkModel) -> (f64, Grads)) -> usize {
    let (_, grads) = loss(model);
    let ids: Vec<ParamId> = model
        .store
        .iter()
        .filter(|(_, p)| prefixes.iter().any(|pre| p.name.starts_with(pre)))
        .map(|(id, _)| id)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut checked = 0;
    for id in ids {
        let len = model.store.value(id).len();
        let analytic = grads.param(id).cloned();
        let picks: Vec<usize> = if len <= per_tensor {
            (0..len).collect()
        } else {
            (0..per_tensor).map(|_| rng.gen_range(0..len)).collect()
        };
        for idx in picks {
            let orig = model.store.value(id).data()[idx];
            model.store.value_mut(id).data_mut()[idx] = orig + STEP;
            let (up, _) = loss(model);
            model.store.value_mut(id).data_mut()[idx] = orig - STEP;
            let (down, _) = loss(model);
            model.store.value_mut(id).data_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let a = analytic.as_ref().map_or(0.0, |m| m.data()[idx]);
            let err = rel_err(a, numeric);
            assert!(
                err <= TOL,
                "{}[{idx}]: analytic {a} numeric {numeric} err {err}",
                model.store.get(id).name
            );
            checked += 1;
        }
    }
    checked
}

// `txt.` also feeds the stop-gradient prompt and entity branches; it is
// checked with those branches off.

pub fn setup(batch: usize, seed: u64) -> (Vec<SampleRecord>, GkModel) {
    let records = super::tiny_records(batch, seed);
    let model = super::tiny_model(&records, 8, seed);
    (records, model)
}

pub fn pretraining_gradients_cross_attention_with_ecls() {
    let (records, mut model) = setup(3, 21);
    let batch: Vec<&SampleRecord> = records.iter().collect();
    let w = LossWeights::default();
    let n = check_params(&mut model, &["img.", "mm.", "gk.", "itc."], 3, |m| {
        batch_loss(m, &batch, Ablation::default(), &w, &[1, 2, 0])
    });
    assert!(n > 100);
}

pub fn pretraining_gradients_concat_grounding() {
    let (records, mut model) = setup(2, 22);
    let batch: Vec<&SampleRecord> = records.iter().collect();
    let ablation = Ablation {
        grounding: Grounding::Concat,
        ecls: false,
    };
    let w = LossWeights::default();
    check_params(&mut model, &["gk.region", "gk.f_r", "gk.concat", "gk.global", "mm."], 2, |m| {
        batch_loss(m, &batch, ablation, &w, &[1, 0])
    });
}

pub fn pretraining_gradients_without_grounding() {
    let (records, mut model) = setup(4, 23);
    let batch: Vec<&SampleRecord> = records.iter().collect();
    let ablation = Ablation {
        grounding: Grounding::None,
        ecls: false,
    };
    let w = LossWeights {
        itm: 0.7,
        lm: 1.3,
        ecls: 0.0,
        ..LossWeights::default()
    };
    let n = check_params(&mut model, &["img.", "txt.", "mm.", "itc."], 2, |m| batch_loss(m, &batch, ablation, &w, &[3, 2, 1, 0]));
    assert!(n > 100);
}

pub fn each_loss_alone_drives_its_parameters() {
    let (records, mut model) = setup(2, 24);
    let batch: Vec<&SampleRecord> = records.iter().collect();
    for (itm, lm, ecls) in [(1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0)] {
        let w = LossWeights {
            itm,
            lm,
            ecls,
            ..LossWeights::default()
        };
        check_params(&mut model, &["img.", "mm.", "gk.local", "gk.global"], 1, |m| {
            batch_loss(m, &batch, Ablation::default(), &w, &[1, 0])
        });
    }
}
