//! Row-major 2D FFT on top of `rustfft`.

use std::cell::RefCell;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

/// In-place unnormalized 2D transform of a `rows × cols` row-major buffer.
pub fn fft2(data: &mut [Complex64], rows: usize, cols: usize, dir: Direction) {
    assert_eq!(data.len(), rows * cols);
    if rows == 0 || cols == 0 {
        return;
    }
    PLANNER.with(|p| {
        let mut planner = p.borrow_mut();
        let plan = |planner: &mut FftPlanner<f64>, n: usize| match dir {
            Direction::Forward => planner.plan_fft_forward(n),
            Direction::Inverse => planner.plan_fft_inverse(n),
        };
        if cols > 1 {
            plan(&mut planner, cols).process(data);
        }
        if rows > 1 {
            let mut t = transpose(data, rows, cols);
            plan(&mut planner, rows).process(&mut t);
            let back = transpose(&t, cols, rows);
            data.copy_from_slice(&back);
        }
    });
}

fn transpose(data: &[Complex64], rows: usize, cols: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); rows * cols];
    for r in 0..rows {
        let row = &data[r * cols..(r + 1) * cols];
        for (c, v) in row.iter().enumerate() {
            out[c * rows + r] = *v;
        }
    }
    out
}

/// Signed frequency of FFT bin `i` for a length-`n` axis, in `[-floor(n/2), ceil(n/2) - 1]`.
pub fn bin_frequency(i: usize, n: usize) -> i64 {
    let i = i as i64;
    let n = n as i64;
    if i < n - n / 2 {
        i
    } else {
        i - n
    }
}
