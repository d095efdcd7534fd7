//! Resolve a config from a preset, a TOML document and `HYRED_*` overrides.

use hybrid_reduction::harness::Config;

fn main() -> hybrid_reduction::Result<()> {
    let dir = std::env::temp_dir().join("hybrid-reduction-config");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("experiment.toml");
    std::fs::write(&path, "preset = \"case4\"\n\n[loop]\niterations = 10\n\n[mpc]\nhorizon = 4\n")?;
    let overrides = [("HYRED_LOOP__ETA".to_string(), "5.0".to_string())];
    let cfg = Config::load(Some(&path), None, overrides)?;
    print!("{}", cfg.to_toml());

    std::fs::write(&path, "[loop]\niteratons = 10\n")?;
    if let Err(e) = Config::load(Some(&path), None, []) {
        println!("\nmisspelled key: {e}");
    }
    Ok(())
}
