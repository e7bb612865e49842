//! Structural invariants of the model, fusion module and checkpoints.

use gkvlp::autograd::Graph;
use gkvlp::data_model::{load_manifest, save_manifest, SampleRecord};
use gkvlp::encoders::{TokenSequence, BOS, CLS};
use gkvlp::gk_fusion::{encode_entities, encode_prompt, Grounding};
use gkvlp::harness::{pretrain, Checkpoint, FORMAT_VERSION};
use gkvlp::model::{Ablation, GkModel};
use gkvlp::objectives::{derangement, LossWeights};
use gkvlp::tensor::Matrix;
use gkvlp::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!((a.rows(), a.cols()), (b.rows(), b.cols()));
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn permute_rows(m: &Matrix, order: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for (dst, &src) in order.iter().enumerate() {
        out.row_mut(dst).copy_from_slice(m.row(src));
    }
    out
}

fn fixture() -> (Vec<SampleRecord>, GkModel) {
    let records = super::tiny_records(4, 3);
    let model = super::tiny_model(&records, 16, 3);
    (records, model)
}

/// Region queries and prompt keys for one record, as plain matrices.
fn local_inputs(model: &GkModel, r: &SampleRecord) -> (Matrix, Matrix, Matrix) {
    let mut g = Graph::with_params(&model.store);
    let enc = model.image.forward(&mut g, &r.image).unwrap();
    let regions = model.gk.extract_region_features(&mut g, &r.region_boxes, enc.v).unwrap();
    let z_r = model.gk.project_regions(&mut g, &regions);
    let p = encode_prompt(&mut g, &model.text, &model.tokenizer, &r.prompt.text()).unwrap();
    (g.value(enc.v).clone(), g.value(z_r).clone(), g.value(p).clone())
}

pub fn fusion_attention_rows_are_stochastic() {
    let (records, model) = fixture();
    for r in &records {
        let (_, z_r, p) = local_inputs(&model, r);
        let mut g = Graph::with_params(&model.store);
        let (z_r, p) = (g.constant(z_r), g.constant(p));
        let local = model.gk.fuse_local(&mut g, z_r, p, None).unwrap();
        for w in local.weights.iter().flatten() {
            let w = g.value(*w);
            for i in 0..w.rows() {
                let s: f64 = w.row(i).iter().sum();
                assert!((s - 1.0).abs() <= 1e-6, "row {i} sums to {s}");
                assert!(w.row(i).iter().all(|&x| x >= 0.0));
            }
        }
    }
}

pub fn fuse_local_ignores_prompt_token_order() {
    let (records, model) = fixture();
    let (_, z_r, p) = local_inputs(&model, &records[0]);
    let order: Vec<usize> = (0..p.rows()).rev().collect();
    let run = |p: Matrix| {
        let mut g = Graph::with_params(&model.store);
        let (a, b) = (g.constant(z_r.clone()), g.constant(p));
        let out = model.gk.fuse_local(&mut g, a, b, None).unwrap().z_local;
        g.value(out).clone()
    };
    assert!(max_abs_diff(&run(p.clone()), &run(permute_rows(&p, &order))) <= 1e-6);
}

pub fn fuse_global_ignores_region_order() {
    let (records, model) = fixture();
    let (v, z_r, _) = local_inputs(&model, &records[1]);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let order = derangement(z_r.rows(), &mut rng).unwrap();
    let run = |z: Matrix| {
        let mut g = Graph::with_params(&model.store);
        let (a, b) = (g.constant(v.clone()), g.constant(z));
        let out = model.gk.fuse_global(&mut g, a, b, None).unwrap();
        g.value(out).clone()
    };
    let fused = run(z_r.clone());
    assert_eq!(fused.rows(), v.rows());
    assert!(max_abs_diff(&fused, &run(permute_rows(&z_r, &order))) <= 1e-6);
}

pub fn decoder_is_causal() {
    let (records, model) = fixture();
    let body = model.report_body(&records[0].report);
    let mut ids = vec![BOS];
    ids.extend(&body[..8]);
    let mut g = Graph::with_params(&model.store);
    let v = model.image.forward(&mut g, &records[0].image).unwrap().v;
    let memory = g.value(v).clone();
    let logits = |ids: &[usize]| {
        let mut g = Graph::with_params(&model.store);
        let m = g.constant(memory.clone());
        let out = model.backbone.decode_logits(&mut g, &TokenSequence::new(ids.to_vec()), m, None).unwrap();
        g.value(out).clone()
    };
    let base = logits(&ids);
    for t in 0..ids.len() - 1 {
        let mut altered = ids.clone();
        for id in altered.iter_mut().skip(t + 1) {
            *id = (*id + 7) % model.tokenizer.len();
        }
        let other = logits(&altered);
        for row in 0..=t {
            let d = base.row(row).iter().zip(other.row(row)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(d <= 1e-6, "row {row} changed by {d} after editing positions > {t}");
        }
    }
}

pub fn frozen_prompt_and_entity_branches_pass_no_gradient() {
    let (records, model) = fixture();
    let mut g = Graph::with_params(&model.store);
    let p = encode_prompt(&mut g, &model.text, &model.tokenizer, &records[0].prompt.text()).unwrap();
    let (pos, neg) = encode_entities(&mut g, &model.text, &model.tokenizer, &model.vocab).unwrap();
    let parts = [g.sum(p), g.sum(pos), g.sum(neg)];
    let total = g.weighted_sum(&[(1.0, parts[0]), (1.0, parts[1]), (1.0, parts[2])]);
    let grads = g.backward(total);
    for id in model.store.ids_with_prefix("txt.") {
        assert!(grads.param(id).is_none_or(|m| m.data().iter().all(|&x| x == 0.0)));
    }
}

pub fn prompt_encoding_is_the_tied_report_encoder() {
    let (records, model) = fixture();
    let text = records[2].prompt.text();
    let mut g = Graph::with_params(&model.store);
    let p = encode_prompt(&mut g, &model.text, &model.tokenizer, &text).unwrap();
    let t = model.text.forward(&mut g, &model.tokenizer.encode(&text, CLS)).unwrap().t;
    assert!(max_abs_diff(g.value(p), g.value(t)) <= 1e-6);
}

pub fn ungrounded_pretraining_never_touches_fusion() {
    let (records, model) = fixture();
    let batch: Vec<&SampleRecord> = records.iter().collect();
    let before = model.gk.counters.snapshot();
    let mut g = Graph::with_params(&model.store);
    let ablation = Ablation {
        grounding: Grounding::None,
        ecls: true,
    };
    model.pretrain_batch(&mut g, &batch, ablation, &LossWeights::default(), &[1, 2, 3, 0]).unwrap();
    assert_eq!(model.gk.counters.snapshot(), before);

    let mut g = Graph::with_params(&model.store);
    model.pretrain_batch(&mut g, &batch, Ablation::default(), &LossWeights::default(), &[1, 2, 3, 0]).unwrap();
    let (local, concat, global) = model.gk.counters.snapshot();
    assert_eq!((local - before.0, concat - before.1, global - before.2), (4, 0, 4));
}

pub fn encoder_and_decoder_share_all_but_their_own_layers() {
    let (_, model) = fixture();
    let names: Vec<&str> = model.store.params().iter().map(|p| p.name.as_str()).filter(|n| n.starts_with("mm.")).collect();
    let [ea, eb] = gkvlp::backbone::MultimodalBackbone::encoder_only_prefixes();
    let [da, db] = gkvlp::backbone::MultimodalBackbone::decoder_only_prefixes();
    let enc_only = names.iter().filter(|n| n.starts_with(ea) || n.starts_with(eb)).count();
    let dec_only = names.iter().filter(|n| n.starts_with(da) || n.starts_with(db)).count();
    assert!(enc_only > 0 && dec_only > 0);
    assert!(names.len() > enc_only + dec_only);
}

fn tiny_pretrain() -> (gkvlp::harness::RunConfig, gkvlp::harness::PretrainOutcome) {
    let cfg = super::tiny_run_config(8, 4);
    let records = super::tiny_records(4, 0);
    let out = pretrain(&cfg, &records).unwrap();
    (cfg, out)
}

pub fn checkpoint_round_trip_is_exact() {
    let (cfg, out) = tiny_pretrain();
    let ckpt = out.checkpoint(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ckpt);
    let model = back.to_model().unwrap();
    for (a, b) in model.store.params().iter().zip(out.model.store.params()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.value.data(), b.value.data());
    }
    let rng = back.rng.restore().unwrap();
    assert_eq!(rng, out.rng);
}

pub fn damaged_checkpoints_are_rejected() {
    let (cfg, out) = tiny_pretrain();
    let bytes = out.checkpoint(&cfg).to_bytes().unwrap();
    for cut in [0, 10, 19, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::CorruptCheckpoint(_))), "cut at {cut}");
    }
    let mut longer = bytes.clone();
    longer.push(0);
    assert!(matches!(Checkpoint::from_bytes(&longer), Err(Error::CorruptCheckpoint(_))));
    let mut future = bytes.clone();
    future[8..12].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    match Checkpoint::from_bytes(&future) {
        Err(Error::IncompatibleCheckpoint { found, expected }) => assert_eq!((found, expected), (FORMAT_VERSION + 1, FORMAT_VERSION)),
        other => panic!("expected a version error, got {other:?}"),
    }
    let mut foreign = bytes;
    foreign[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&foreign), Err(Error::CorruptCheckpoint(_))));
}

pub fn pretraining_is_deterministic() {
    let (_, a) = tiny_pretrain();
    let (_, b) = tiny_pretrain();
    assert_eq!(a.log, b.log);
    assert_eq!(a.model.store.params(), b.model.store.params());
}

pub fn logged_total_is_the_weighted_sum() {
    let mut cfg = super::tiny_run_config(8, 4);
    cfg.loss.itm = 0.5;
    cfg.loss.lm = 2.0;
    cfg.loss.ecls = 0.25;
    cfg.epochs = 2;
    let out = pretrain(&cfg, &super::tiny_records(4, 0)).unwrap();
    for s in &out.log {
        let expected = s.itc + 0.5 * s.itm + 2.0 * s.lm + 0.25 * s.ecls;
        assert!((s.total - expected).abs() <= 1e-6);
    }
}

pub fn manifest_round_trip() {
    let records = super::tiny_records(6, 5);
    let dir = tempfile::tempdir().unwrap();
    let path = save_manifest(dir.path(), &records).unwrap();
    let back = load_manifest(&path).unwrap();
    assert_eq!(back, records);
}
