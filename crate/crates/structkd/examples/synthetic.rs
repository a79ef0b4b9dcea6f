//! Writes a two-language synthetic tagging task and an experiment config.
//!
//!     cargo run --release -p structkd --example synthetic -- toy

use std::fs;
use std::path::PathBuf;

use structkd::corpus::write_conll;
use structkd::synthetic::{synthetic_task, SyntheticSpec};

fn main() -> anyhow::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "toy".into()));
    fs::create_dir_all(&dir)?;
    let mut config = String::from(
        "scheme = \"raw\"\n\n[train]\nbatch_tokens = 100\nlr = 1.0\nmax_epochs = 30\npatience_epochs = 5\nmax_decays = 2\ntau = 0.05\nkd = \"posterior\"\n\n[model]\nemb_dim = 16\nhidden = 16\n",
    );
    for c in synthetic_task(&SyntheticSpec::default(), 7)? {
        for (split, data) in [("train", &c.train), ("dev", &c.dev), ("test", &c.test)] {
            let mut buf = Vec::new();
            write_conll(&mut buf, data)?;
            fs::write(dir.join(format!("{}.{split}", c.language)), buf)?;
        }
        let l = &c.language;
        config.push_str(&format!(
            "\n[[languages]]\nname = \"{l}\"\ntrain = \"{l}.train\"\ndev = \"{l}.dev\"\ntest = \"{l}.test\"\n"
        ));
    }
    fs::write(dir.join("experiment.toml"), config)?;
    println!("wrote {}", dir.join("experiment.toml").display());
    Ok(())
}
