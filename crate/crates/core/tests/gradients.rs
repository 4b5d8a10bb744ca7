mod common;

use common::*;
use csrnet::autograd::{GradCheckReport, LayerGraph};
use csrnet::model::{build_csrnet, build_eeb, build_oeb, CsrnetConfig, Variant};
use csrnet::tensor::Tensor;

const H: f64 = 1e-4;
const TOL: f64 = 1e-4;

fn check(g: &mut LayerGraph<f64>, x: &Tensor<f64>) -> GradCheckReport {
    let report = g.grad_check(x, H, TOL).unwrap();
    for e in &report.entries {
        assert!(
            e.max_rel_error < TOL,
            "{}: relative error {:.3e} over {} scalars",
            e.name,
            e.max_rel_error,
            e.scalars
        );
    }
    assert!(report.passed);
    report
}

fn conv_graph(cin: usize, cout: usize, kh: usize, kw: usize) -> LayerGraph<f64> {
    let mut g = LayerGraph::new(cin);
    let x = g.input();
    let c = g.conv("c", x, cout, kh, kw).unwrap();
    g.output("out", c).unwrap();
    g
}

#[test]
fn conv_kernels() {
    for (kh, kw) in [(3, 3), (1, 3), (3, 1), (1, 1)] {
        let mut r = rng(kh as u64 * 10 + kw as u64);
        let mut g = conv_graph(2, 3, kh, kw);
        randomize_params(&mut g, 0.5, &mut r);
        let x = random_tensor(&[2, 2, 5, 6], &mut r);
        check(&mut g, &x);
    }
}

#[test]
fn asymmetric_conv() {
    let mut r = rng(1);
    let mut g = LayerGraph::new(3);
    let x = g.input();
    let a = g.asym_conv("a", x, 2).unwrap();
    g.output("out", a).unwrap();
    randomize_params(&mut g, 0.5, &mut r);
    let report = check(&mut g, &random_tensor(&[1, 3, 4, 5], &mut r));
    // Three kernels, weight and bias each, plus the input.
    assert_eq!(report.entries.len(), 7);
}

#[test]
fn relu_node() {
    let mut g = LayerGraph::new(2);
    let x = g.input();
    let y = g.relu("r", x).unwrap();
    g.output("out", y).unwrap();
    check(&mut g, &away_from_zero(&[2, 2, 3, 3], 0.01, &mut rng(2)));
}

#[test]
fn concat_and_add_nodes() {
    let mut r = rng(3);
    let mut g = LayerGraph::new(2);
    let x = g.input();
    let c = g.conv("c", x, 3, 3, 3).unwrap();
    let cat = g.concat("cat", c, x).unwrap();
    let d = g.conv("d", cat, 2, 1, 1).unwrap();
    let s = g.add("sum", d, x).unwrap();
    let twice = g.add("twice", s, s).unwrap();
    g.output("out", twice).unwrap();
    randomize_params(&mut g, 0.5, &mut r);
    check(&mut g, &random_tensor(&[2, 2, 4, 4], &mut r));
}

#[test]
fn pixel_shuffle_node() {
    for r_ in [2, 3] {
        let mut r = rng(4 + r_ as u64);
        let mut g = LayerGraph::new(2);
        let x = g.input();
        let c = g.conv("c", x, 2 * r_ * r_, 3, 3).unwrap();
        let s = g.pixel_shuffle("ps", c, r_).unwrap();
        let d = g.conv("d", s, 1, 3, 3).unwrap();
        g.output("out", d).unwrap();
        randomize_params(&mut g, 0.5, &mut r);
        check(&mut g, &random_tensor(&[1, 2, 3, 4], &mut r));
    }
}

#[test]
fn odd_block_variants() {
    for v in [
        Variant::Full,
        Variant::OebNoSerial,
        Variant::OebNoResidual,
        Variant::PlainConvs,
    ] {
        let mut g = LayerGraph::new(4);
        let x = g.input();
        let b = build_oeb(&mut g, "oeb", x, 4, v).unwrap();
        g.output("out", b).unwrap();
        init_with_biases(&mut g, 11);
        let x = away_from_zero(&[1, 4, 5, 5], 0.05, &mut rng(12));
        check(&mut g, &x);
    }
}

#[test]
fn even_block() {
    let mut g = LayerGraph::new(4);
    let x = g.input();
    let b = build_eeb(&mut g, "eeb", x, 4).unwrap();
    g.output("out", b).unwrap();
    init_with_biases(&mut g, 21);
    check(&mut g, &random_tensor(&[1, 4, 5, 5], &mut rng(22)));
}

#[test]
fn mini_network() {
    for scale in [2, 3] {
        let mut g: LayerGraph<f64> = build_csrnet(&CsrnetConfig::mini(8, scale)).unwrap();
        init_with_biases(&mut g, 31);
        let x = random_tensor(&[1, 3, 8, 8], &mut rng(32));
        let report = check(&mut g, &x);
        assert_eq!(report.entries.len(), g.params().len() + 1);
    }
}
