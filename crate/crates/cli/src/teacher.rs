//! Teacher resolution for distillation: a trained checkpoint or the exact
//! Gaussian posterior-mean predictor.

use std::path::{Path, PathBuf};

use robustdiff::{EpsModel, GaussianOracle, NoisePredictor, NoiseSchedule, Tensor};

use crate::checkpoint::{Checkpoint, ModelState};
use crate::error::CliError;

#[derive(Debug, Clone, PartialEq)]
pub enum TeacherSpec {
    Oracle { mu: f64, sigma: f64 },
    Checkpoint(PathBuf),
}

const ORACLE_PREFIX: &str = "oracle:gaussian(";

impl TeacherSpec {
    /// `oracle:gaussian(mu,sigma)` or a checkpoint path, which is taken
    /// relative to `base` unless absolute.
    pub fn parse(text: &str, base: &Path) -> Result<Self, CliError> {
        let text = text.trim();
        if text.starts_with("oracle:") {
            let bad = || CliError::Config(format!("bad oracle teacher '{text}', expected oracle:gaussian(mu,sigma)"));
            let args = text
                .strip_prefix(ORACLE_PREFIX)
                .and_then(|r| r.strip_suffix(')'))
                .ok_or_else(bad)?;
            let mut parts = args.split(',').map(|p| p.trim().parse::<f64>());
            let (Some(Ok(mu)), Some(Ok(sigma)), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(bad());
            };
            if !mu.is_finite() || !(sigma > 0.0 && sigma.is_finite()) {
                return Err(bad());
            }
            return Ok(TeacherSpec::Oracle { mu, sigma });
        }
        let path = PathBuf::from(text);
        Ok(TeacherSpec::Checkpoint(if path.is_absolute() {
            path
        } else {
            base.join(path)
        }))
    }

    /// Canonical text written back into resolved configurations.
    pub fn to_config_string(&self) -> String {
        match self {
            TeacherSpec::Oracle { mu, sigma } => format!("{ORACLE_PREFIX}{mu:?},{sigma:?})"),
            TeacherSpec::Checkpoint(p) => p.display().to_string(),
        }
    }

    /// Build the predictor, refusing teachers trained on another schedule.
    pub fn load(&self, sched: &NoiseSchedule) -> Result<Teacher, CliError> {
        match self {
            TeacherSpec::Oracle { mu, sigma } => Ok(Teacher::Oracle(GaussianOracle::new(*mu, *sigma, sched.clone())?)),
            TeacherSpec::Checkpoint(path) => {
                let ck = Checkpoint::load(path)?;
                if ck.schedule.steps() != sched.steps() {
                    return Err(CliError::format(
                        path,
                        format!(
                            "teacher schedule mismatch: teacher has T = {}, configuration has T = {}",
                            ck.schedule.steps(),
                            sched.steps()
                        ),
                    ));
                }
                if ck.schedule != *sched {
                    return Err(CliError::format(
                        path,
                        format!(
                            "teacher schedule mismatch: same T = {} but different noise levels",
                            sched.steps()
                        ),
                    ));
                }
                match ck.model {
                    ModelState::Eps(pair) => Ok(Teacher::Model(pair.target)),
                    ModelState::Consistency(_) => Err(CliError::format(
                        path,
                        "teacher must be a noise-prediction checkpoint, not a consistency model",
                    )),
                }
            }
        }
    }
}

/// A loaded teacher; checkpoints contribute their EMA weights.
#[derive(Debug, Clone)]
pub enum Teacher {
    Oracle(GaussianOracle),
    Model(EpsModel),
}

impl NoisePredictor for Teacher {
    fn predict_eps(&self, x: &Tensor, t: usize) -> robustdiff::Result<Tensor> {
        match self {
            Teacher::Oracle(o) => o.predict_eps(x, t),
            Teacher::Model(m) => m.predict_eps(x, t),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_oracle_and_paths() {
        let base = Path::new("/cfg");
        assert_eq!(
            TeacherSpec::parse("oracle:gaussian(2, 0.5)", base).unwrap(),
            TeacherSpec::Oracle { mu: 2.0, sigma: 0.5 }
        );
        assert_eq!(
            TeacherSpec::parse("runs/t.bin", base).unwrap(),
            TeacherSpec::Checkpoint(PathBuf::from("/cfg/runs/t.bin"))
        );
        for bad in ["oracle:gaussian(2)", "oracle:gaussian(2,-1)", "oracle:normal(0,1)", "oracle:gaussian(a,1)"] {
            assert!(TeacherSpec::parse(bad, base).is_err(), "{bad}");
        }
        let spec = TeacherSpec::Oracle { mu: 0.1, sigma: 2.0 };
        assert_eq!(TeacherSpec::parse(&spec.to_config_string(), base).unwrap(), spec);
    }
}
