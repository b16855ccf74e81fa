//! Writes box-plot data for a set of runs and an overlay panel comparing
//! two segmentations of one phantom slice.
//!
//! cargo run --release --example reports -- [out_dir]

use std::path::PathBuf;

use ndarray::Array2;
use priorseg::dataset::{generate_phantom, PhantomSpec};
use priorseg::evaluation::DiceScores;
use priorseg::model::{normalize_intensity, LabelMap, Modality, Tissue};
use priorseg::reports::{emit_boxplot, emit_overlay};

fn main() -> priorseg::Result<()> {
    let out: PathBuf = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("priorseg_reports"));
    std::fs::create_dir_all(&out).map_err(|e| priorseg::Error::Io { path: out.clone(), source: e })?;

    let runs: Vec<DiceScores> = (0..5)
        .map(|i| {
            let d = 0.004 * i as f64;
            DiceScores::new([0.95 - d, 0.93 + d, 0.91 + 0.5 * d])
        })
        .collect();
    let plot = emit_boxplot(&runs, &out.join("boxplot.json"))?;
    for s in &plot.series {
        let f = &s.summary;
        println!(
            "{:<4} min {:.4} q1 {:.4} median {:.4} q3 {:.4} max {:.4}",
            s.class, f.min, f.q1, f.median, f.q3, f.max
        );
    }

    // one prediction erodes GM into WM, the other is exact
    let volume = generate_phantom(&PhantomSpec::default().with_seed(1))?;
    let z = volume.num_slices() / 2;
    let input = normalize_intensity(volume.slice(Modality::T1, z));
    let truth = volume.label_slice(z).expect("labeled");
    let gm = Tissue::GrayMatter.index() as u8;
    let wm = Tissue::WhiteMatter.index() as u8;
    let classes = truth.classes();
    let eroded = Array2::from_shape_fn(classes.dim(), |(r, c)| match classes[[r, c]] {
        l if l == gm && (r + c) % 3 == 0 => wm,
        l => l,
    });
    let eroded = LabelMap::new(eroded)?;
    let layout = emit_overlay(input.view(), &truth, &eroded, &truth, &out.join("overlay.png"))?;
    println!("overlay {}x{} with {} panels in {}", layout.width, layout.height, layout.panels.len(), out.display());
    Ok(())
}
