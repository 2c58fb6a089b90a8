use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use nppc::autograd::{Conv2dSpec, Graph};
use nppc::codec_bridge::{encode_decode, JpegCodec, RateSchedule};
use nppc::data_io::ImageBatch;
use nppc::evaluation::{bd_rate, CurvePoint, RateAccuracyCurve};
use nppc::npp::{Npp, NppConfig};
use nppc::tensor::Tensor;

fn ramp(shape: &[usize]) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|i| ((i * 37) % 256) as f32 / 255.0).collect())
}

fn conv(c: &mut Criterion) {
    let x = ramp(&[8, 32, 32, 32]);
    let w = ramp(&[32, 32, 3, 3]).map(|v| v - 0.5);
    let b = Tensor::zeros(&[32]);
    c.bench_function("conv3x3 8x32x32x32 forward+backward", |bench| {
        bench.iter(|| {
            let g = Graph::<f32>::new();
            let xv = g.param(x.clone());
            let y = xv.conv2d(g.param(w.clone()), Some(g.param(b.clone())), Conv2dSpec::same(3)).sum();
            black_box(g.backward(y));
        })
    });
}

fn npp_forward(c: &mut Criterion) {
    let npp = Npp::init(NppConfig { base_channels: 8, unet_depth: 2, ..NppConfig::default() }, 0).unwrap();
    let x = ImageBatch::new(ramp(&[16, 3, 32, 32])).unwrap();
    let rp = RateSchedule::default_jpeg().middle();
    c.bench_function("npp apply 16x3x32x32", |bench| bench.iter(|| black_box(npp.apply(&x, rp, true).unwrap())));
}

fn curve(scale: f64) -> RateAccuracyCurve {
    let points = [(2.7, 0.82), (1.7, 0.80), (1.2, 0.78), (0.9, 0.75), (0.6, 0.70)]
        .iter()
        .enumerate()
        .map(|(i, &(bpp, accuracy))| CurvePoint { rate_point: i as u32 + 1, codec_param: 0, bpp: bpp * scale, accuracy, psnr: 30.0 })
        .collect();
    RateAccuracyCurve { pipeline: "bench".into(), points }
}

fn bdrate(c: &mut Criterion) {
    let (a, t) = (curve(1.0), curve(0.9));
    c.bench_function("bd_rate 5 points", |bench| bench.iter(|| black_box(bd_rate(&a, &t).unwrap())));
}

fn jpeg(c: &mut Criterion) {
    let x = ImageBatch::new(ramp(&[16, 3, 32, 32]).map(|v| (v * 255.0).round() / 255.0)).unwrap();
    let rp = RateSchedule::default_jpeg().middle();
    c.bench_function("jpeg encode+decode 16x32x32", |bench| bench.iter(|| black_box(encode_decode(&JpegCodec, &x, rp).unwrap())));
}

criterion_group!(benches, conv, npp_forward, bdrate, jpeg);
criterion_main!(benches);
