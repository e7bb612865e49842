//! Closed-form loss and text-metric values.

use gkvlp::downstream::metrics::text_metrics;
use gkvlp::gk_fusion::ecls_loss_value;
use gkvlp::objectives::{itc_loss_value, itm_loss_value, lm_loss_value, total_loss, LossWeights};
use gkvlp::tensor::Matrix;

pub struct Oracle {
    pub name: &'static str,
    pub got: f64,
    pub expected: f64,
    pub tol: f64,
}

fn unit(dim: usize, axis: usize, sign: f64) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    v[axis] = sign;
    v
}

pub fn loss_oracles() -> Vec<Oracle> {
    let mut out = Vec::new();
    let mut push = |name, got: f64, expected: f64, tol| out.push(Oracle { name, got, expected, tol });

    let same = Matrix::from_vec(4, 3, [0.6, 0.0, 0.8].repeat(4));
    push("itc identical rows B=4", itc_loss_value(&same, &same, 0.07).unwrap(), 4f64.ln(), 1e-6);
    let eye = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
    push(
        "itc orthonormal pairs",
        itc_loss_value(&eye, &eye, 0.07).unwrap(),
        (-1.0f64 / 0.07).exp().ln_1p(),
        1e-12,
    );

    let flat = Matrix::from_vec(2, 2, vec![0.3, 0.3, -1.0, -1.0]);
    push("itm equal logits", itm_loss_value(&flat, &[true, false]).unwrap(), 2f64.ln(), 1e-6);
    let sure = Matrix::from_vec(2, 2, vec![20.0, -20.0, -20.0, 20.0]);
    push("itm confident", itm_loss_value(&sure, &[true, false]).unwrap(), (-40f64).exp().ln_1p(), 1e-12);

    let uniform = Matrix::zeros(3, 10);
    push("lm uniform V=10", lm_loss_value(&uniform, &[2, 7, 9], &[true; 3]).unwrap(), 10f64.ln(), 1e-6);
    let two = Matrix::from_vec(2, 2, vec![0.0, 3f64.ln(), 0.0, 3f64.ln()]);
    push("lm two positions", lm_loss_value(&two, &[1, 1], &[true, true]).unwrap(), (4.0f64 / 3.0).ln(), 1e-6);

    let v = Matrix::from_vec(1, 2, unit(2, 0, 1.0));
    let p = Matrix::from_vec(1, 2, unit(2, 1, 1.0));
    push("ecls one entity, equal cosines", ecls_loss_value(&v, &p, &p, &[true], 0.2).unwrap(), 2f64.ln(), 1e-6);
    let pos = Matrix::from_vec(1, 2, unit(2, 0, 1.0));
    let neg = Matrix::from_vec(1, 2, unit(2, 0, -1.0));
    push(
        "ecls one entity, opposite cosines",
        ecls_loss_value(&v, &pos, &neg, &[true], 0.2).unwrap(),
        (-10f64).exp().ln_1p(),
        1e-6,
    );
    let v14 = Matrix::from_vec(1, 3, vec![1.0, 0.0, 0.0]);
    let z14 = Matrix::from_vec(14, 3, [0.5, 0.5f64.sqrt(), 0.5].repeat(14));
    let labels: Vec<bool> = (0..14).map(|d| d % 3 == 0).collect();
    push("ecls 14 entities, equal cosines", ecls_loss_value(&v14, &z14, &z14, &labels, 0.2).unwrap(), 28f64.ln(), 1e-6);

    let w = LossWeights::default();
    push("total unit weights", total_loss(0.5, 0.25, 0.125, 0.1, &w), 0.975, 1e-12);
    out
}

const TEXT_PAIRS: [(&str, &str, f64, f64); 5] = [
    ("a b c d e", "a b c d f", 0.668740304976422, 0.8),
    ("the heart is normal", "the heart size is normal", 0.0, 0.88),
    ("no effusion is seen in the left lung", "effusion is seen in the left lung", 0.8408964152537145, 0.9390243902439026),
    ("the lungs are clear bilaterally", "the lungs are clear bilaterally", 1.0, 1.0),
    ("mild cardiomegaly", "no acute process", 0.0, 0.0),
];

pub fn text_oracles() -> Vec<Oracle> {
    let mut out = Vec::new();
    for (name, (c, r, bleu, rouge)) in ["partial", "short", "insertion", "identical", "disjoint"].into_iter().zip(TEXT_PAIRS) {
        let m = text_metrics(&[c], &[r]).unwrap();
        out.push(Oracle { name, got: m.bleu4, expected: bleu, tol: 1e-6 });
        out.push(Oracle { name, got: m.rouge_l, expected: rouge, tol: 1e-6 });
    }
    let (cands, refs): (Vec<&str>, Vec<&str>) = TEXT_PAIRS.iter().map(|p| (p.0, p.1)).unzip();
    let corpus = text_metrics(&cands, &refs).unwrap();
    out.push(Oracle { name: "corpus bleu", got: corpus.bleu4, expected: 0.726417002443668, tol: 1e-6 });
    let rouge = TEXT_PAIRS.iter().map(|p| p.3).sum::<f64>() / 5.0;
    out.push(Oracle { name: "corpus rouge", got: corpus.rouge_l, expected: rouge, tol: 1e-12 });
    out
}

pub fn check(oracles: &[Oracle]) -> Result<(), String> {
    for o in oracles {
        if (o.got - o.expected).abs() > o.tol || o.got.is_nan() {
            return Err(format!("{}: got {} expected {}", o.name, o.got, o.expected));
        }
    }
    Ok(())
}

pub fn assert_loss_oracles() {
    for o in loss_oracles() {
        assert!((o.got - o.expected).abs() <= o.tol, "{}: got {} expected {}", o.name, o.got, o.expected);
    }
}

pub fn assert_text_oracles() {
    check(&text_oracles()).unwrap();
}
