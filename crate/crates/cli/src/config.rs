//! `--config FILE` support. The file holds `key = value` lines naming long
//! flags (`#` starts a comment). Its entries are spliced in right after the
//! subcommand, ahead of the user's own flags, so explicit flags win.

use std::fs;

use anyhow::{bail, Context};

const SUBCOMMANDS: [&str; 6] = ["ingest", "features", "train", "predict", "eval", "synth"];

fn config_path(argv: &[String]) -> Option<String> {
    let mut it = argv.iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            return it.next().cloned();
        }
        if let Some(p) = a.strip_prefix("--config=") {
            return Some(p.to_owned());
        }
    }
    None
}

pub fn parse_config(text: &str) -> anyhow::Result<Vec<String>> {
    let mut args = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("config line {}: expected key = value", i + 1);
        };
        let (key, value) = (key.trim().replace('_', "-"), value.trim());
        if key.is_empty() {
            bail!("config line {}: empty key", i + 1);
        }
        match value {
            "true" => args.push(format!("--{key}")),
            "false" => {}
            v => {
                args.push(format!("--{key}"));
                args.push(v.to_owned());
            }
        }
    }
    Ok(args)
}

pub fn apply_config_file(argv: Vec<String>) -> anyhow::Result<Vec<String>> {
    let Some(path) = config_path(&argv) else {
        return Ok(argv);
    };
    let text = fs::read_to_string(&path).with_context(|| format!("reading config file {path}"))?;
    let injected = parse_config(&text)?;
    let Some(pos) = argv.iter().position(|a| SUBCOMMANDS.contains(&a.as_str())) else {
        return Ok(argv);
    };
    let mut out = argv[..=pos].to_vec();
    out.extend(injected);
    out.extend_from_slice(&argv[pos + 1..]);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_key_values() {
        let args =
            parse_config("# comment\nrounds = 10\nlearning_rate=0.2 # trailing\nstrict = true\nall = false\n").unwrap();
        assert_eq!(args, ["--rounds", "10", "--learning-rate", "0.2", "--strict"]);
        assert!(parse_config("nonsense").is_err());
    }
}
