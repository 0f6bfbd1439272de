//! Bimatrix game files for the `stackelberg` subcommand.
//!
//! ```text
//! # rows are leader actions, columns follower actions
//! leader
//! 3 0
//! 2 2
//! follower
//! 0 1
//! 1 0
//! ```
//!
//! Entries are separated by whitespace or commas. Without a `follower`
//! section both players share the leader's payoffs.

use std::path::Path;

use efa_marl_core::game::Matrix;

use crate::error::{Error, Result};

pub fn parse_game(text: &str, path: &Path) -> Result<(Matrix, Matrix)> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut leader: Option<Matrix> = None;
    let mut follower: Option<Matrix> = None;
    let mut current: Option<&mut Matrix> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        match line {
            "leader" | "follower" => {
                let slot = if line == "leader" {
                    &mut leader
                } else {
                    &mut follower
                };
                if slot.is_some() {
                    return Err(err(i + 1, format!("`{line}` section appears twice")));
                }
                current = Some(slot.insert(Vec::new()));
                continue;
            }
            _ => {}
        }
        let row = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| err(i + 1, format!("`{s}` is not a finite number")))
            })
            .collect::<Result<Vec<f64>>>()?;
        match current.as_mut() {
            Some(m) => {
                if let Some(first) = m.first() {
                    if first.len() != row.len() {
                        return Err(err(
                            i + 1,
                            format!("expected {} entries, found {}", first.len(), row.len()),
                        ));
                    }
                }
                m.push(row);
            }
            None => {
                return Err(err(
                    i + 1,
                    "payoff row before a `leader` or `follower` header".into(),
                ))
            }
        }
    }
    let leader = leader
        .filter(|m| !m.is_empty())
        .ok_or_else(|| Error::invalid("leader", "no payoff rows"))?;
    let follower = match follower {
        Some(f) if f.len() != leader.len() || f.first().map(Vec::len) != Some(leader[0].len()) => {
            return Err(Error::invalid(
                "follower",
                "payoffs differ in shape from the leader's",
            ))
        }
        Some(f) => f,
        None => leader.clone(),
    };
    Ok((leader, follower))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(t: &str) -> Result<(Matrix, Matrix)> {
        parse_game(t, Path::new("g.txt"))
    }

    #[test]
    fn follower_defaults_to_leader() {
        let (l, f) = parse("leader\n2 0\n0, 1\n").unwrap();
        assert_eq!(l, vec![vec![2.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(f, l);
    }

    #[test]
    fn both_sections() {
        let (l, f) = parse("# game\nleader\n3 0\n2 2\n\nfollower\n0 1\n1 0\n").unwrap();
        assert_eq!(l[1], vec![2.0, 2.0]);
        assert_eq!(f[0], vec![0.0, 1.0]);
    }

    #[test]
    fn errors_carry_line_numbers() {
        match parse("leader\n1 2\n3 x\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        match parse("leader\n1 2\n3\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(parse("1 2\n").is_err());
        assert!(parse("leader\n1 2\nfollower\n1\n").is_err());
        assert!(parse("").is_err());
    }
}
