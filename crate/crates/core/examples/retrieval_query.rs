//! Builds a feature index over a few phantoms and looks up the nearest
//! database slices for every slice of an unseen subject.
//!
//! cargo run --release --example retrieval_query -- [k]

use priorseg::dataset::{generate_phantom, PhantomSpec};
use priorseg::model::normalize_intensity;
use priorseg::retrieval::{build_index, extract_features, query_top_k, FeatureConfig};

fn main() -> priorseg::Result<()> {
    let k: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(3);
    let spec = PhantomSpec::default();
    let database: Vec<_> = (0..4).map(|s| generate_phantom(&spec.with_seed(s))).collect::<Result<_, _>>()?;
    let config = FeatureConfig::default();
    let index = build_index(&database, &config)?;
    println!("indexed {} slices, {} features each", index.len(), config.dim());

    let query = generate_phantom(&spec.with_seed(50))?;
    for z in 0..query.num_slices() {
        let norm = normalize_intensity(query.slice(config.modality, z));
        let fv = extract_features(norm.view(), &config);
        if fv.empty {
            println!("slice {z:2}: empty");
            continue;
        }
        let hits = query_top_k(&index, &fv, k, None)?;
        let shown: Vec<String> = hits.iter().map(|(key, d)| format!("{key} ({d:.3})")).collect();
        println!("slice {z:2}: {}", shown.join("  "));
    }
    Ok(())
}
