//! Generates a phantom subject, prints its tissue composition and writes it
//! to disk as raw volumes plus a manifest.
//!
//! cargo run --release --example phantom -- [seed] [out_dir]

use std::path::PathBuf;

use priorseg::dataset::{generate_phantom, load_volume, save_volume, write_manifest, PhantomSpec};
use priorseg::model::{Modality, Tissue};

fn main() -> priorseg::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(0);
    let out: PathBuf = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("priorseg_phantom"));

    let volume = generate_phantom(&PhantomSpec::default().with_seed(seed))?;
    let (slices, rows, cols) = volume.shape();
    println!("{}: {slices} slices of {rows}x{cols}, spacing {:?} mm", volume.subject_id(), volume.spacing());

    let labels = volume.labels().expect("phantoms are labeled");
    let total = labels.len() as f64;
    for t in Tissue::ALL {
        let n = labels.iter().filter(|&&l| l as usize == t.index()).count();
        println!("  {:<12} {:6.2}%", t.name(), 100.0 * n as f64 / total);
    }

    // mean intensity of each tissue on the middle slice, "-" where absent
    let mid = slices / 2;
    let truth = volume.label_slice(mid).expect("labeled");
    for m in Modality::ALL {
        let img = volume.slice(m, mid);
        let means: Vec<String> = Tissue::ALL
            .iter()
            .map(|t| {
                let (sum, n) = img.iter().zip(truth.classes().iter()).filter(|(_, &l)| l as usize == t.index()).fold(
                    (0.0, 0usize),
                    |(s, n), (&v, _)| (s + v as f64, n + 1),
                );
                if n > 0 { format!("{:6.1}", sum / n as f64) } else { format!("{:>6}", "-") }
            })
            .collect();
        println!("  {:<8} {}", m.name(), means.join(" "));
    }

    let manifest = save_volume(&volume, &out)?;
    write_manifest(&out.join("manifest.json"), std::slice::from_ref(&manifest))?;
    let back = load_volume(&manifest)?;
    assert_eq!(back.labels(), volume.labels());
    println!("wrote {} and read it back", out.display());
    Ok(())
}
