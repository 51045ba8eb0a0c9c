//! Cached FFT plans and unnormalized n-dimensional transforms on the grid.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

pub(crate) struct Plans {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

fn plans(k: usize) -> Arc<Plans> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<Plans>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut map = cache.lock().expect("fft plan cache poisoned");
    map.entry(k)
        .or_insert_with(|| {
            let mut planner = FftPlanner::new();
            Arc::new(Plans {
                forward: planner.plan_fft_forward(k),
                inverse: planner.plan_fft_inverse(k),
            })
        })
        .clone()
}

fn transform(dimension: usize, k: usize, data: &mut [Complex64], inverse: bool) {
    let plans = plans(k);
    let fft = if inverse { &plans.inverse } else { &plans.forward };
    match dimension {
        1 => fft.process(data),
        2 => {
            // rows are contiguous, columns go through a transpose
            fft.process(data);
            transpose_square(data, k);
            fft.process(data);
            transpose_square(data, k);
        }
        _ => unreachable!("grid dimension validated at construction"),
    }
}

fn transpose_square(data: &mut [Complex64], k: usize) {
    for i in 0..k {
        for j in (i + 1)..k {
            data.swap(i * k + j, j * k + i);
        }
    }
}

/// Unnormalized forward transform, sum_j f_j e^{-i k x_j}.
pub(crate) fn forward(dimension: usize, k: usize, data: &mut [Complex64]) {
    transform(dimension, k, data, false)
}

/// Unnormalized inverse transform, sum_k f_k e^{+i k x_j}.
pub(crate) fn inverse(dimension: usize, k: usize, data: &mut [Complex64]) {
    transform(dimension, k, data, true)
}
