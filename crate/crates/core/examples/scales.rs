//! Scratch probe: activation scale at each stage of a freshly initialized
//! network, averaged over a few rendered samples.

use dfm_core::data::{render_sample, sample_stream, DatasetSpec};
use dfm_core::layers::{maxpool2, relu};
use dfm_core::net::Network;
use dfm_core::tensor::FeatureMap;

fn rms(v: &[f64]) -> f64 {
    (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt()
}

fn main() {
    let spec = DatasetSpec::default();
    let net = Network::init(spec.num_classes, 1);
    let mut acc = [0.0f64; 5];
    let n = 8;
    for id in 0..n {
        let mut rng = sample_stream(1, id);
        let s = render_sample(&spec, (id % 4) as usize, id, &mut rng).unwrap();
        let h1 = relu(&net.conv1.forward(&s.image).unwrap());
        let (p1, _) = maxpool2(&h1).unwrap();
        let h2 = relu(&net.conv2.forward(&p1).unwrap());
        let (p2, _) = maxpool2(&h2).unwrap(); // slot A
        let h3 = relu(&net.conv3.forward(&p2).unwrap()); // slot B
        let pooled = dfm_core::tensor::gap(&h3);
        let logits = net.fc.forward(pooled.data()).unwrap();
        let stages: [&FeatureMap; 3] = [&p1, &p2, &h3];
        for (k, st) in stages.iter().enumerate() {
            acc[k] += rms(st.data());
        }
        acc[3] += rms(&logits);
        acc[4] += logits.iter().cloned().fold(f64::MIN, f64::max)
            - logits.iter().cloned().fold(f64::MAX, f64::min);
    }
    println!(
        "pool1 {:.3}  slotA {:.3}  slotB {:.3}  logitRMS {:.3}  logitSpread {:.3}",
        acc[0] / n as f64,
        acc[1] / n as f64,
        acc[2] / n as f64,
        acc[3] / n as f64,
        acc[4] / n as f64
    );
}
