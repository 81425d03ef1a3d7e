//! `key = value` config files layered under command-line flags.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use clap::{ArgMatches, Command};

const GLOBAL_VALUE_FLAGS: [&str; 3] = ["--seed", "--threads", "--config"];
const NOT_CONFIGURABLE: [&str; 4] = ["help", "version", "config", "print_config"];

pub fn parse_config(text: &str, path: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("{}:{}: expected `key = value`", path.display(), n + 1))?;
        out.push((k.trim().replace('_', "-"), v.trim().to_string()));
    }
    Ok(out)
}

fn config_path(args: &[String]) -> Option<String> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            return it.next().cloned();
        }
        if let Some(p) = a.strip_prefix("--config=") {
            return Some(p.to_string());
        }
    }
    None
}

/// Position of the subcommand name, skipping values of global options.
fn subcommand_position(cmd: &Command, args: &[String]) -> Option<usize> {
    let mut i = 1;
    while i < args.len() {
        let a = &args[i];
        if GLOBAL_VALUE_FLAGS.contains(&a.as_str()) {
            i += 2;
            continue;
        }
        if cmd.find_subcommand(a).is_some() {
            return Some(i);
        }
        i += 1;
    }
    None
}

/// Returns `args` with the options from the `--config` file spliced in
/// after the subcommand, skipping every option already given on the
/// command line.
pub fn merge_config_file(cmd: &Command, args: Vec<String>) -> Result<Vec<String>> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let path = Path::new(&path);
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let entries = parse_config(&text, path)?;
    let Some(pos) = subcommand_position(cmd, &args) else {
        return Ok(args);
    };
    let sub = cmd.find_subcommand(&args[pos]).expect("found above");

    let given = |long: &str| {
        let flag = format!("--{long}");
        args.iter().any(|a| *a == flag || a.starts_with(&format!("{flag}=")))
    };
    let mut injected = Vec::new();
    for (key, value) in entries {
        let arg = sub
            .get_arguments()
            .chain(cmd.get_arguments())
            .find(|a| a.get_long() == Some(key.as_str()))
            .ok_or_else(|| anyhow!("{}: unknown key `{key}` for `{}`", path.display(), sub.get_name()))?;
        if NOT_CONFIGURABLE.contains(&arg.get_id().as_str()) {
            bail!("{}: `{key}` cannot be set from a config file", path.display());
        }
        if given(&key) {
            continue;
        }
        if arg.get_action().takes_values() {
            injected.push(format!("--{key}"));
            injected.push(value);
        } else {
            match value.as_str() {
                "true" => injected.push(format!("--{key}")),
                "false" => {}
                _ => bail!("{}: `{key}` expects true or false", path.display()),
            }
        }
    }
    let mut out = args;
    out.splice(pos + 1..pos + 1, injected);
    Ok(out)
}

/// Resolved options of the chosen subcommand in config file syntax.
pub fn render_config(cmd: &Command, matches: &ArgMatches) -> String {
    let Some((name, sub_matches)) = matches.subcommand() else {
        return String::new();
    };
    let sub = cmd.find_subcommand(name).expect("matched subcommand exists");
    let mut out = format!("# vesseltrack {name}\n");
    for arg in sub.get_arguments().chain(cmd.get_arguments()) {
        let id = arg.get_id().as_str();
        let Some(long) = arg.get_long() else { continue };
        if NOT_CONFIGURABLE.contains(&id) {
            continue;
        }
        let Ok(Some(values)) = sub_matches.try_get_raw(id) else {
            continue;
        };
        for v in values {
            let _ = writeln!(out, "{long} = {}", v.to_string_lossy());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Cli;
    use clap::CommandFactory;

    fn argv(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn parses_comments_and_underscores() {
        let e = parse_config("# x\n\ndepth = 3\nroot_radius=2.5\n", Path::new("c")).unwrap();
        assert_eq!(e, vec![("depth".into(), "3".into()), ("root-radius".into(), "2.5".into())]);
        assert!(parse_config("depth 3", Path::new("c")).is_err());
    }

    #[test]
    fn flags_override_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("run.cfg");
        std::fs::write(&f, "depth = 3\ntaper = 0.6\nseed = 9\n").unwrap();
        let cmd = Cli::command();
        let args = argv(&format!("vt --config {} phantom --depth 1 --out x", f.display()));
        let merged = merge_config_file(&cmd, args).unwrap();
        let m = cmd.try_get_matches_from(&merged).unwrap();
        let (_, sub) = m.subcommand().unwrap();
        assert_eq!(sub.get_one::<u32>("depth"), Some(&1));
        assert_eq!(sub.get_one::<f64>("taper"), Some(&0.6));
        assert_eq!(sub.get_one::<u64>("seed"), Some(&9));
    }

    #[test]
    fn unknown_key_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("run.cfg");
        std::fs::write(&f, "bogus = 1\n").unwrap();
        let args = argv(&format!("vt phantom --config {} --out x", f.display()));
        assert!(merge_config_file(&Cli::command(), args).is_err());
    }

    #[test]
    fn printed_config_round_trips() {
        let cmd = Cli::command();
        let m = cmd
            .clone()
            .try_get_matches_from(argv("vt phantom --depth 3 --stenosis 0.3 --out a --seed 4"))
            .unwrap();
        let text = render_config(&cmd, &m);
        assert!(text.contains("depth = 3\n"));
        assert!(text.contains("taper = 0.75\n"));
        assert!(text.contains("seed = 4\n"));

        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("run.cfg");
        std::fs::write(&f, &text).unwrap();
        let merged = merge_config_file(&cmd, argv(&format!("vt phantom --config {}", f.display()))).unwrap();
        let m2 = cmd.clone().try_get_matches_from(&merged).unwrap();
        assert_eq!(render_config(&cmd, &m2), text);
    }
}
