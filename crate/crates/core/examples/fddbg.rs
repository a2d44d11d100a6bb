// conv2d weight-grad check: conv -> reshape -> vec_matmul only
use ndarray::{ArrayD, IxDyn};
use pks_core::tape::Tape;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (h, stride) in [(2usize, 2usize), (4, 2), (2, 1), (1, 2), (4, 4), (1, 1), (3, 3), (3, 1), (8, 2)] {
        let k = 3usize;
        let ci = 2usize;
        let co = 2usize;
        let ivals: Vec<f64> = (0..ci * h * h).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wvals: Vec<f64> = (0..co * ci * k * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut uvals: Vec<f64> = Vec::new();
        let run = |wv: &[f64], uvals: &mut Vec<f64>, grad: bool| -> (f64, Vec<f64>) {
            let mut t = Tape::new();
            let i = t.leaf(ArrayD::from_shape_vec(IxDyn(&[ci, h, h]), ivals.to_vec()).unwrap());
            let w = t.leaf(ArrayD::from_shape_vec(IxDyn(&[co, ci, k, k]), wv.to_vec()).unwrap());
            let c = t.conv2d(i, w, stride);
            let n = t.data(c).len();
            if uvals.is_empty() {
                *uvals = (0..n).map(|j| (j as f64 * 0.61).cos() + 1.2).collect();
            }
            let flat = t.reshape(c, &[n]);
            let u = t.leaf(ArrayD::from_shape_vec(IxDyn(&[n, 1]), uvals.clone()).unwrap());
            let s = t.vec_matmul(flat, u); // [1]
            let v = t.value(s);
            if grad {
                let g = t.backward(s);
                (v, g.get(w).map(|a| a.as_slice().unwrap().to_vec()).unwrap_or_default())
            } else { (v, vec![]) }
        };
        let (_, gw) = run(&wvals, &mut uvals, true);
        let eps = 1e-6;
        let mut bad = 0;
        let mut first = String::new();
        for idx in 0..wvals.len() {
            let mut wp = wvals.clone(); wp[idx] += eps;
            let mut wm = wvals.clone(); wm[idx] -= eps;
            let num = (run(&wp, &mut uvals, false).0 - run(&wm, &mut uvals, false).0) / (2.0 * eps);
            if (num - gw[idx]).abs() > 1e-6 * num.abs().max(gw[idx].abs()).max(1e-4) {
                if bad == 0 { first = format!("idx {idx}: analytic {:+.6e} numeric {num:+.6e}", gw[idx]); }
                bad += 1;
            }
        }
        println!("h={h} stride={stride}: weight mismatches {bad}/{}  {first}", wvals.len());
    }
}
