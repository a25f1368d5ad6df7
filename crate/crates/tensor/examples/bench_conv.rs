use std::time::Instant;
use eet_tensor::{Tape, Tensor};

fn main() {
    for (n, ci, co, hw) in [(8usize, 16usize, 8usize, 32usize), (8, 32, 32, 8), (8, 64, 64, 8)] {
        let x = Tensor::full(&[n, ci, hw, hw], 0.3);
        let w = Tensor::full(&[co, ci, 3, 3], 0.01);
        let reps = 20;
        let t0 = Instant::now();
        for _ in 0..reps {
            let mut tape = Tape::new();
            let xv = tape.input(x.clone());
            let wv = tape.input(w.clone());
            let y = tape.conv2d(xv, wv, None, 1, 1).unwrap();
            let s = tape.sum(y);
            tape.backward(s).unwrap();
        }
        let dt = t0.elapsed().as_secs_f64() / reps as f64;
        let macs = (n * co * ci * 9 * hw * hw) as f64 * 3.0;
        println!("{n}x{ci}->{co} @{hw}: {:.3} ms, {:.2} GFLOP/s", dt * 1e3, 2.0 * macs / dt / 1e9);
    }
}
