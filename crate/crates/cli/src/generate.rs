use ctt_core::data::{generate_dataset, write_dataset};
use ctt_core::SceneSpec;

use crate::args::{parse_list, GenerateArgs};
use crate::fsutil::prepare_dir;
use crate::{CmdResult, Failure};

fn parse_size(raw: &str) -> Result<(usize, usize), Failure> {
    let bad = || Failure::usage(format!("--size: expected N or HxW, got {raw:?}"));
    match raw.split_once('x') {
        Some((h, w)) => Ok((h.parse().map_err(|_| bad())?, w.parse().map_err(|_| bad())?)),
        None => {
            let n = raw.parse().map_err(|_| bad())?;
            Ok((n, n))
        }
    }
}

pub fn run(a: GenerateArgs) -> CmdResult {
    let mut spec = SceneSpec {
        image_size: parse_size(&a.size)?,
        num_classes: a.classes,
        seed: a.seed,
        ..SceneSpec::default()
    };
    if let Some(s) = &a.shapes {
        match parse_list::<usize>("shapes", s)?.as_slice() {
            &[lo, hi] => spec.shapes_per_image = (lo, hi),
            _ => return Err(Failure::usage("--shapes: expected MIN,MAX")),
        }
    }
    if let Some(j) = a.jitter {
        spec.color_jitter = j;
    }
    if let Some(n) = a.noise {
        spec.noise_std = n;
    }
    spec.validate()?;
    prepare_dir(&a.out, a.force, &["manifest", "images", "labels"])?;
    let samples = generate_dataset(&spec, a.count)?;
    write_dataset(&a.out, &spec, &samples)?;

    let mut pixels = vec![0u64; spec.num_classes];
    for s in &samples {
        for &l in &s.label {
            if let Some(p) = pixels.get_mut(l as usize) {
                *p += 1;
            }
        }
    }
    let total: u64 = pixels.iter().sum::<u64>().max(1);
    println!(
        "wrote {} samples ({}x{}, {} classes, seed {}) to {}",
        a.count,
        spec.image_size.0,
        spec.image_size.1,
        spec.num_classes,
        spec.seed,
        a.out.display()
    );
    for (c, p) in pixels.iter().enumerate() {
        println!("class {c}: {:.2}% of pixels", 100.0 * *p as f64 / total as f64);
    }
    Ok(())
}
