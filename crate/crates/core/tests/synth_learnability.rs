use olhtr::data::synth::{glyph_instance, glyph_template, SynthConfig, DEFAULT_ALPHABET};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Cloud = Vec<(f64, f64)>;

fn nearest(from: (f64, f64), cloud: &Cloud) -> f64 {
    cloud
        .iter()
        .map(|q| (q.0 - from.0).hypot(q.1 - from.1))
        .fold(f64::INFINITY, f64::min)
}

/// Symmetric mean nearest-point distance.
fn chamfer(a: &Cloud, b: &Cloud) -> f64 {
    let ab: f64 = a.iter().map(|&p| nearest(p, b)).sum::<f64>() / a.len() as f64;
    let ba: f64 = b.iter().map(|&p| nearest(p, a)).sum::<f64>() / b.len() as f64;
    ab + ba
}

#[test]
fn glyphs_are_recoverable_by_nearest_template() {
    let alphabet: Vec<char> = DEFAULT_ALPHABET.chars().collect();
    let templates: Vec<Cloud> = alphabet.iter().map(|&c| glyph_template(c)).collect();
    let cfg = SynthConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut correct = 0;
    for _ in 0..200 {
        let truth = rng.gen_range(0..alphabet.len());
        let cloud = glyph_instance(alphabet[truth], &cfg, &mut rng);
        let guess = (0..templates.len())
            .min_by(|&i, &j| {
                chamfer(&cloud, &templates[i]).total_cmp(&chamfer(&cloud, &templates[j]))
            })
            .unwrap();
        correct += usize::from(guess == truth);
    }
    assert!(correct as f64 / 200.0 > 0.95, "{correct}/200");
}
