//! Per-image forward and backward timings of the backbone.
//! Usage: `cargo run --release --example bench_backbone [w1,w2,w3,w4]`

use std::time::Instant;

use cvpb_core::autodiff::{Tape, Tensor};
use cvpb_core::models::{Backbone, BackboneConfig, BnMode, ParamScope};

fn main() {
    let mut cfg = BackboneConfig::default();
    if let Some(w) = std::env::args().nth(1) {
        cfg.widths = w.split(',').map(|v| v.parse().expect("comma-separated widths")).collect();
    }
    let bb = Backbone::new(cfg, 0).unwrap();
    println!("params {}", bb.param_count());
    let n = 48;
    let x = Tensor::from_fn(vec![n, 3, 32, 32], |i| ((i * 31 % 97) as f32) / 97.0);
    let t0 = Instant::now();
    let _ = bb.predict(&x).unwrap();
    println!("eval forward {:.2} ms/img", t0.elapsed().as_secs_f64() * 1e3 / n as f64);
    for scope in [ParamScope::All, ParamScope::Frozen] {
        let t0 = Instant::now();
        let mut tape = Tape::new();
        let bound = bb.bind(&mut tape, scope);
        let xv = if scope == ParamScope::Frozen {
            tape.param(x.clone())
        } else {
            tape.constant(x.clone())
        };
        let out = bb.forward(&mut tape, &bound, xv, BnMode::Train).unwrap();
        let l = tape.cross_entropy(out.logits, &vec![0; n]).unwrap();
        let _g = tape.backward(l).unwrap();
        println!("{scope:?} fwd+bwd {:.2} ms/img", t0.elapsed().as_secs_f64() * 1e3 / n as f64);
    }
}
