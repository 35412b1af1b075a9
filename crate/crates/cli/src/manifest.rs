use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

/// Record of one command invocation, written as `key=value` lines.
#[derive(Clone, Debug, Default)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub config: Vec<(String, String)>,
    pub timings: Vec<(String, Duration)>,
    pub outputs: Vec<PathBuf>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64) -> Self {
        RunManifest {
            command: command.to_string(),
            seed,
            ..Default::default()
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.config.push((key.to_string(), value.to_string()));
        self
    }

    pub fn time(&mut self, label: &str, d: Duration) {
        self.timings.push((label.to_string(), d));
    }

    pub fn output(&mut self, p: impl Into<PathBuf>) {
        self.outputs.push(p.into());
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "command={}", self.command);
        let _ = writeln!(s, "seed={}", self.seed);
        for (k, v) in &self.config {
            let _ = writeln!(s, "config.{k}={v}");
        }
        for (k, d) in &self.timings {
            let _ = writeln!(s, "time.{k}_s={:.3}", d.as_secs_f64());
        }
        for (i, p) in self.outputs.iter().enumerate() {
            let _ = writeln!(s, "output.{i}={}", p.display());
        }
        s
    }

    /// Write to `path`, or to stderr when there is nowhere natural to put it.
    pub fn emit(&self, path: Option<&Path>) -> std::io::Result<()> {
        match path {
            Some(p) => fs::write(p, self.render()),
            None => {
                eprint!("{}", self.render());
                Ok(())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_in_order() {
        let mut m = RunManifest::new("gen", 7);
        m.set("bands", 8).set("size", 64);
        m.output("out/train");
        let text = m.render();
        assert_eq!(
            text,
            "command=gen\nseed=7\nconfig.bands=8\nconfig.size=64\noutput.0=out/train\n"
        );
    }
}
