use qkvlab::config::RunConfig;
use qkvlab::sampler::generate;

fn main() {
    let cfg = RunConfig::from_toml_str("[prompts]\nuser_prompt = \"red sneaker on wood\"\n").unwrap();
    let t0 = std::time::Instant::now();
    let res = generate(&cfg).unwrap();
    let dt = t0.elapsed();
    println!("run_id: {}", res.run_id);
    println!("elapsed: {dt:?}");
    println!("images: {} ({:?})", res.images.len(), res.images[0].pixels.shape());
    println!("maps: {}, features: {}", res.capture.maps.len(), res.capture.features.len());
    println!("mid cosine: {}", res.metrics.mid_block_cosine);
    println!("iou entries: {}", res.metrics.map_iou.len());
    let px = res.images[0].pixels.data();
    let (mn, mx) = px.iter().fold((1f32, 0f32), |(a,b), &v| (a.min(v), b.max(v)));
    println!("pixel range: [{mn}, {mx}]");
    // second run determinism
    let res2 = generate(&cfg).unwrap();
    let same = res.images[0].pixels == res2.images[0].pixels && res.images[1].pixels == res2.images[1].pixels;
    println!("bit-identical rerun: {same}");
}
