//! Quick pipeline diagnostics against artifacts produced by the CLI:
//!
//!   diag codec <config> <data_dir> <codec.ckpt>
//!     held-out reconstruction PSNR of the trained codec, per site
//!   diag gen <config> <codec.ckpt> <prior.ckpt> <seeds> <samples_per_site>
//!     mean generated magnitude per site under each seed

use fedprior_core::config::RunConfig;
use fedprior_core::imaging::psnr;
use fedprior_core::nn::seeded_rng;
use fedprior_core::pipeline;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    match args.get(1).map(|s| s.as_str()) {
        Some("codec") => {
            let cfg = RunConfig::load(&args[2]).unwrap();
            let datasets = pipeline::load_all_datasets(&args[3], cfg.sites.count).unwrap();
            let codec = pipeline::load_codec(args[4].as_ref()).unwrap();
            // decompose: pure autoencoder ceiling vs quantization floor
            {
                use fedprior_core::numerics::{Binding, Tape};
                let mut ae = Vec::new();
                let mut qrel = Vec::new();
                for img in datasets[0].val.iter().chain(datasets[1].val.iter()).take(8) {
                    let z = codec.encode_latent(img).unwrap();
                    let f = codec.encode_multiscale(img).unwrap();
                    let zq = codec.tokens_to_latent(&f).unwrap();
                    qrel.push(
                        zq.sub(&z).unwrap().norm().powi(2) / z.norm().powi(2).max(1e-12),
                    );
                    let mut tape = Tape::new();
                    let bind = Binding::bind(&mut tape, &codec.params, false);
                    let zv = tape.constant(z);
                    let out = codec.decoder_forward(&mut tape, &bind, zv).unwrap();
                    let rec = tape.value(out).clone().channels_to_complex();
                    ae.push(psnr(&img.magnitude(), &rec.magnitude()).unwrap());
                }
                println!(
                    "unquantized AE PSNR mean {:.2} dB, latent quant rel err mean {:.4}",
                    ae.iter().sum::<f64>() / ae.len() as f64,
                    qrel.iter().sum::<f64>() / qrel.len() as f64
                );
            }
            let mut all = Vec::new();
            for ds in &datasets {
                let mut tr = Vec::new();
                for img in ds.train.iter().take(8) {
                    let rec = codec.reconstruct(img).unwrap();
                    tr.push(psnr(&img.magnitude(), &rec.magnitude()).unwrap());
                }
                println!(
                    "site {} codec train PSNR mean {:.2} dB",
                    ds.spec.site,
                    tr.iter().sum::<f64>() / tr.len() as f64
                );
                let mut vals = Vec::new();
                for img in &ds.val {
                    let rec = codec.reconstruct(img).unwrap();
                    vals.push(psnr(&img.magnitude(), &rec.magnitude()).unwrap());
                }
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                let min = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                println!(
                    "site {} codec val PSNR mean {:.2} dB min {:.2} dB",
                    ds.spec.site, mean, min
                );
                all.extend(vals);
            }
            let mean = all.iter().sum::<f64>() / all.len() as f64;
            println!("overall codec val PSNR mean {mean:.2} dB");
        }
        Some("gen") => {
            let cfg = RunConfig::load(&args[2]).unwrap();
            let codec = pipeline::load_codec(args[3].as_ref()).unwrap();
            let prior = pipeline::load_prior(args[4].as_ref()).unwrap();
            let seeds: u64 = args[5].parse().unwrap();
            let n: usize = args[6].parse().unwrap();
            let mut ordered = 0;
            for seed in 0..seeds {
                let mut means = Vec::new();
                for site in 0..cfg.sites.count {
                    let mut rng = seeded_rng(9000 + seed * 100 + site as u64);
                    let mut total = 0.0;
                    for _ in 0..n {
                        let (_, img) = prior.generate(site, &codec, &mut rng).unwrap();
                        let mag = img.magnitude();
                        total += mag.data().iter().sum::<f64>() / mag.data().len() as f64;
                    }
                    means.push(total / n as f64);
                }
                let ok = means.windows(2).all(|w| w[0] < w[1]);
                if ok {
                    ordered += 1;
                }
                println!("seed {seed}: site means {means:?} ordered {ok}");
            }
            println!("ordered in {ordered}/{seeds} seeds");
        }
        _ => eprintln!("usage: diag codec|gen ..."),
    }
}
