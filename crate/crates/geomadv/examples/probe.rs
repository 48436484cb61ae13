use geomadv::facegen::*;
use geomadv::image::write_pgm;

fn main() {
    let templates = make_classes_with_margin(2, LandmarkLayout::Compact, 17, 1.2).unwrap();
    for t in &templates {
        println!("class {}: {:?}", t.class_id, t.params);
    }
    let ds = build_dataset(&templates, 4, 0.75, 32, &JitterParams::default(), 17).unwrap();
    for (i, s) in ds.samples.iter().enumerate().take(8) {
        let lo = s.image.pixels().iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = s.image.pixels().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mean: f64 = s.image.pixels().iter().sum::<f64>() / s.image.pixels().len() as f64;
        println!(
            "sample {i} class {} min {lo:.3} max {hi:.3} mean {mean:.4}",
            s.class_id
        );
        write_pgm(&s.image, std::path::Path::new(&format!("/tmp/probe_{i}.pgm")), 0).unwrap();
    }
}
