//! Saving and loading models in the binary model format.

use speckv_lab::model::{build_induction_model, load_model, save_model, InductionSpec, Model, ModelConfig};

fn main() -> speckv_lab::Result<()> {
    let dir = std::env::temp_dir().join(format!("speckv-lab-model-io-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;

    let random = Model::init_random(ModelConfig::new(2, 2, 1, 8, 32, 40, 64, 11))?;
    let path = dir.join("random.skv");
    save_model(&random, &path)?;
    let back = load_model(&path)?;
    println!("random model: {} bytes on disk, round trip equal: {}", std::fs::metadata(&path)?.len(), back == random);

    let spec = InductionSpec::default();
    let induction = build_induction_model(spec, spec.required_d_model())?;
    let path = dir.join("induction.skv");
    save_model(&induction, &path)?;
    println!("induction model written to {}", path.display());
    println!("use it with: speckv-lab dump-importance --model {} ...", path.display());
    Ok(())
}
