use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// One verification trial.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trial {
    pub target: bool,
    pub enroll: String,
    pub test: String,
}

/// One line of a score file.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreLine {
    pub enroll: String,
    pub test: String,
    pub score: f64,
}

fn read_lines(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))
}

fn fields<'a>(path: &Path, no: usize, line: &'a str) -> Result<[&'a str; 3]> {
    let parts: Vec<&str> = line.split_whitespace().collect();
    <[&str; 3]>::try_from(parts).map_err(|p| {
        Error::Input(format!("{}:{}: expected 3 fields, found {}", path.display(), no + 1, p.len()))
    })
}

/// Parses `<0|1> <enroll_id> <test_id>` lines; blank lines are skipped.
pub fn read_trials(path: &Path) -> Result<Vec<Trial>> {
    let text = read_lines(path)?;
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let [label, enroll, test] = fields(path, no, line)?;
        let target = match label {
            "1" => true,
            "0" => false,
            _ => return Err(Error::Input(format!("{}:{}: label must be 0 or 1, got {label:?}", path.display(), no + 1))),
        };
        out.push(Trial { target, enroll: enroll.into(), test: test.into() });
    }
    Ok(out)
}

/// Parses `<enroll_id> <test_id> <score>` lines.
pub fn read_scores(path: &Path) -> Result<Vec<ScoreLine>> {
    let text = read_lines(path)?;
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let [enroll, test, score] = fields(path, no, line)?;
        let score: f64 = score
            .parse()
            .map_err(|_| Error::Input(format!("{}:{}: bad score {score:?}", path.display(), no + 1)))?;
        out.push(ScoreLine { enroll: enroll.into(), test: test.into(), score });
    }
    Ok(out)
}

/// Writes scores with nine significant digits, one trial per line.
pub fn write_scores(path: &Path, lines: &[ScoreLine]) -> Result<()> {
    let mut text = String::new();
    for l in lines {
        writeln!(text, "{} {} {:.8e}", l.enroll, l.test, l.score).expect("writing to a String");
    }
    std::fs::write(path, text)?;
    Ok(())
}
