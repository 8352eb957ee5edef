//! Bundled problem suite.

use std::path::Path;

use super::problem::SdeProblem;
use super::ModelError;

const SUITE: &[(&str, &str)] = &[
    ("brownian-1d", include_str!("../../problems/brownian-1d.toml")),
    ("ou-1d", include_str!("../../problems/ou-1d.toml")),
    ("free-endpoint", include_str!("../../problems/free-endpoint.toml")),
    ("dini-tanhlog-1d", include_str!("../../problems/dini-tanhlog-1d.toml")),
    ("holder-1d", include_str!("../../problems/holder-1d.toml")),
    ("hamiltonian-2d", include_str!("../../problems/hamiltonian-2d.toml")),
];

pub fn names() -> impl Iterator<Item = &'static str> {
    SUITE.iter().map(|(n, _)| *n)
}

/// Source text of a bundled problem.
pub fn source(name: &str) -> Option<&'static str> {
    SUITE.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}

pub fn bundled(name: &str) -> Option<SdeProblem> {
    source(name).map(|s| SdeProblem::from_toml_str(s).expect("bundled problems are valid"))
}

/// A bundled name, or else a path to a problem file.
pub fn resolve(name_or_path: &str) -> Result<SdeProblem, ModelError> {
    match bundled(name_or_path) {
        Some(p) => Ok(p),
        None => SdeProblem::load(Path::new(name_or_path)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_bundled_problem_loads() {
        for n in names() {
            let p = bundled(n).unwrap();
            assert_eq!(p.name, n);
            assert!(p.experiment.is_some());
        }
    }
}
