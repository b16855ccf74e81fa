//! Applies a known rigid motion to a phantom slice, recovers it by
//! registration and runs the similarity gate on a retrieved prior.
//!
//! cargo run --release --example registration_gate -- [degrees] [dx] [dy]

use priorseg::dataset::{generate_phantom, PhantomSpec};
use priorseg::model::{normalize_intensity, Modality};
use priorseg::registration::{
    gate_fourth_channel, register, similarity, warp_image, RegistrationConfig, RigidTransform2D,
    DEFAULT_GATE_THRESHOLD,
};
use priorseg::retrieval::{FeatureConfig, RetrievalContext};
use priorseg::inference::retrieve_for;

fn main() -> priorseg::Result<()> {
    let args: Vec<f64> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let degrees = args.first().copied().unwrap_or(7.0);
    let shift = (args.get(1).copied().unwrap_or(3.0), args.get(2).copied().unwrap_or(-2.0));

    let spec = PhantomSpec::default();
    let volume = generate_phantom(&spec.with_seed(3))?;
    let fixed = normalize_intensity(volume.slice(Modality::T1, volume.num_slices() / 2));
    let truth = RigidTransform2D::from_degrees(degrees, shift);
    let moving = warp_image(fixed.view(), &truth.inverse());

    let config = RegistrationConfig::default();
    let before = similarity(fixed.view(), moving.view())?;
    let reg = register(fixed.view(), moving.view(), &config)?;
    println!("applied   rot {degrees:6.2} deg, t {shift:?}");
    println!(
        "recovered rot {:6.2} deg, t ({:.2}, {:.2})",
        reg.transform.rotation_degrees(),
        reg.transform.translation.0,
        reg.transform.translation.1
    );
    println!("similarity {before:.4} -> {:.4}", reg.similarity);

    // gate a prior retrieved from other subjects
    let database: Vec<_> = (10..14).map(|s| generate_phantom(&spec.with_seed(s))).collect::<Result<_, _>>()?;
    let context = RetrievalContext::build(database, &FeatureConfig::default())?;
    let retrieved = retrieve_for(&context, fixed.view(), None)?;
    for threshold in [DEFAULT_GATE_THRESHOLD, 0.95] {
        let d = gate_fourth_channel(fixed.view(), &retrieved, threshold, &config)?;
        println!(
            "match {} at threshold {threshold:.2}: similarity {:.4}, prior {}",
            d.matched_source,
            d.similarity,
            if d.use_prior { "used" } else { "replaced by zeros" }
        );
    }
    Ok(())
}
