// timing probe: forward vs backward cost on the benchmark geometry
use helix_core::model::{HelixModel, ModelConfig};
use helix_core::rng::{stream, uniform, StreamKind};
use helix_core::tape::{Mode, Tape};
use helix_core::tensor::Tensor;
use std::time::Instant;

fn main() {
    let mut mc = ModelConfig::default();
    mc.n_features = 12;
    let model = HelixModel::init(mc, 0).unwrap();
    let mut rng = stream(1, StreamKind::Data, 0);
    let n = 16;
    let values = Tensor::new(vec![n, 24, 12], (0..n * 24 * 12).map(|_| uniform(&mut rng, -1.0, 1.0)).collect()).unwrap();
    let mask = Tensor::new(vec![n, 24, 12], (0..n * 24 * 12).map(|_| (uniform(&mut rng, 0.0, 1.0) < 0.7) as i32 as f64).collect()).unwrap();
    let values = Tensor::new(vec![n, 24, 12], values.data().iter().zip(mask.data()).map(|(v, m)| v * m).collect()).unwrap();

    let reps = 12;
    let mut fwd_ns = Vec::new();
    for r in 0..reps {
        let t0 = Instant::now();
        let mut tape = Tape::new();
        let mut drng = stream(2, StreamKind::Dropout, r);
        let out = model.forward(&mut tape, &values, &mask, Mode::Train, &mut drng, false).unwrap();
        std::hint::black_box(tape.value(out.x_hat).data()[0]);
        fwd_ns.push(t0.elapsed().as_nanos() as u64);
        if r == 0 {
            let n_nodes = tape.n_tensors();
            let elems: usize = (0..n_nodes).map(|i| tape.value(i).data().len()).sum();
            println!("nodes {}  elems {}  ({} MB)", n_nodes, elems, elems * 8 / (1 << 20));
        }
    }

    let mut both_ns = Vec::new();
    for r in 0..reps {
        let t0 = Instant::now();
        let mut tape = Tape::new();
        let mut drng = stream(2, StreamKind::Dropout, r);
        let out = model.forward(&mut tape, &values, &mask, Mode::Train, &mut drng, false).unwrap();
        let vid = tape.constant(values.clone());
        let diff = tape.sub(out.x_hat, vid).unwrap();
        let a = tape.abs(diff).unwrap();
        let loss = tape.sum_all(a).unwrap();
        tape.backward(loss).unwrap();
        std::hint::black_box(&tape);
        both_ns.push(t0.elapsed().as_nanos() as u64);
    }
    fwd_ns.sort_unstable();
    both_ns.sort_unstable();
    let ms = |v: &[u64]| (v[0] as f64 / 1e6, v[v.len() / 2] as f64 / 1e6);
    let (fmin, fmed) = ms(&fwd_ns);
    let (bmin, bmed) = ms(&both_ns);
    println!("forward min {:.1} med {:.1} ms   fwd+bwd min {:.1} med {:.1} ms", fmin, fmed, bmin, bmed);
}
