//! Bilinear feature sampling with analytic gradients and hypercolumn assembly.

use featloc::feature::{build_hypercolumn, FeatureMap};
use nalgebra::Vector2;

fn ramp(width: usize, height: usize, depth: usize, stride: u32) -> FeatureMap {
    let mut data = Vec::with_capacity(width * height * depth);
    for y in 0..height {
        for x in 0..width {
            for c in 0..depth {
                data.push(((x * (c + 1)) as f32 * 0.3).sin() + (y as f32 * 0.2).cos());
            }
        }
    }
    FeatureMap::new(width, height, depth, stride, data).expect("feature map")
}

fn main() {
    let fine = ramp(40, 30, 3, 4);
    let coarse = ramp(10, 8, 2, 16);
    let p = Vector2::new(37.3, 52.9);

    let value = fine.bilinear_sample(&p).expect("inside");
    let grad = fine.bilinear_sample_gradient(&p).expect("inside");
    println!("stride 4 at {p:?}: {value:.4?}");
    println!("gradient per channel (d/du, d/dv): {grad:.5?}");

    let h = 1e-4;
    let dx = Vector2::new(h, 0.0);
    let plus = fine.bilinear_sample(&(p + dx)).unwrap();
    let minus = fine.bilinear_sample(&(p - dx)).unwrap();
    let numeric: Vec<f64> = plus.iter().zip(&minus).map(|(a, b)| (a - b) / (2.0 * h)).collect();
    println!("central difference d/du:           {numeric:.5?}");

    let up = coarse.upsample_bilinear(4).expect("upsample");
    println!("stride 16 map {}x{} upsampled to {}x{}", coarse.width(), coarse.height(), up.width(), up.height());
    let hyp = build_hypercolumn(&[&fine, &coarse]).expect("hypercolumn");
    println!("hypercolumn: stride {}, depth {}, blocks {:?}", hyp.stride(), hyp.depth(), hyp.blocks());
}
