//! Writes deterministic stand-in VGG weights in the torchvision layout.
//!
//! `cargo run --example synthetic_vgg -- {vgg16|vgg19} SEED OUT.safetensors`

use pointnr::vgg::{synthetic_weights, Arch};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let (arch, convs) = match args.get(1).map(String::as_str) {
        Some("vgg16") => (Arch::Vgg16, 13),
        Some("vgg19") => (Arch::Vgg19, 16),
        _ => {
            eprintln!("usage: synthetic_vgg {{vgg16|vgg19}} SEED OUT");
            std::process::exit(2);
        }
    };
    let seed: u64 = args[2].parse().expect("seed");
    synthetic_weights(arch, convs, seed).save(&args[3]).expect("write weights");
}
