//! Parse a run config from text and execute it into a scratch directory.

use qsense::cli::execute;
use qsense::config::RunConfig;

const CONFIG: &str = r#"
experiment = "optimize_pi"
sensing_time_us = 50.0

[protocol]
type = "pi_pulses"
n_pulses = 20

[opt]
iterations = 200
record_stride = 20
seed = 4
"#;

fn main() {
    let config = match RunConfig::from_toml(CONFIG) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{e}");
            std::process::exit(2);
        }
    };
    let out = std::env::temp_dir().join("qsense_run_config_example");
    if let Err(e) = execute(&config, &out) {
        eprintln!("{e}");
        std::process::exit(e.exit_code());
    }
    for name in ["manifest.json", "summary.json"] {
        let text = std::fs::read_to_string(out.join(name)).unwrap_or_default();
        println!("== {name}\n{text}");
    }

    let typo = CONFIG.replace("record_stride", "record_strid");
    if let Err(e) = RunConfig::from_toml(&typo) {
        println!("rejected: {e}");
    }
}
