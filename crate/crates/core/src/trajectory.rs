//! Trajectory records and the newline-delimited trajectory log.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::types::{ImageRef, PromptText};

/// One generated image together with the prompt that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryStep {
    pub t: u32,
    pub prompt: PromptText,
    pub image: ImageRef,
    /// R(p0, image) for this step's image.
    pub reward: f64,
    /// R(p0, i_t) - R(p0, i_{t-1}); absent for the initial image.
    pub shaped_reward: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub enum Termination {
    /// Keep chosen at iteration `at_step`. The keep action generates no
    /// image, so its shaped reward (the keep bonus) lives here.
    KeepAction { at_step: u32, shaped_reward: f64 },
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trajectory {
    pub initial_prompt: PromptText,
    pub steps: Vec<TrajectoryStep>,
    pub termination: Termination,
    pub final_image: ImageRef,
    pub seed: u64,
}

impl Trajectory {
    pub fn image_count(&self) -> usize {
        self.steps.len()
    }

    pub fn is_keep_terminated(&self) -> bool {
        matches!(self.termination, Termination::KeepAction { .. })
    }

    /// Sum of every recorded shaped reward, keep bonus included.
    pub fn shaped_total(&self) -> f64 {
        let steps: f64 = self.steps.iter().filter_map(|s| s.shaped_reward).sum();
        match self.termination {
            Termination::KeepAction { shaped_reward, .. } => steps + shaped_reward,
            Termination::MaxIterations => steps,
        }
    }

    /// Checks the structural invariants. `t_max`, when given, also bounds the
    /// image count and pins it for max-iteration terminations.
    pub fn validate(&self, t_max: Option<u32>) -> Result<(), CoreError> {
        let bad = |m: String| Err(CoreError::InvalidTrajectory(m));
        let Some(last) = self.steps.last() else {
            return bad("no steps".into());
        };
        for (i, s) in self.steps.iter().enumerate() {
            if s.t as usize != i {
                return bad(format!("step {i} has index {}", s.t));
            }
            if (i == 0) != s.shaped_reward.is_none() {
                return bad(format!("step {i}: shaped reward presence"));
            }
        }
        if last.image != self.final_image || last.image.digest() != self.final_image.digest() {
            return bad("final image is not the last generated image".into());
        }
        match self.termination {
            Termination::KeepAction { at_step, .. } => {
                if at_step as usize != self.steps.len() {
                    return bad(format!(
                        "keep at step {at_step} but {} images generated",
                        self.steps.len()
                    ));
                }
                if let Some(t_max) = t_max {
                    if at_step > t_max {
                        return bad(format!("keep at step {at_step} beyond t_max {t_max}"));
                    }
                }
            }
            Termination::MaxIterations => {
                if let Some(t_max) = t_max {
                    if self.steps.len() != t_max as usize + 1 {
                        return bad(format!(
                            "max-iterations trajectory has {} images, expected {}",
                            self.steps.len(),
                            t_max + 1
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    /// One JSON object, no trailing newline.
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("trajectory serialization is infallible")
    }

    pub fn from_json_line(line: &str) -> Result<Self, CoreError> {
        let t: Trajectory = serde_json::from_str(line)
            .map_err(|e| CoreError::InvalidTrajectory(e.to_string()))?;
        t.validate(None)?;
        Ok(t)
    }
}

pub fn write_trajectory_log<W: Write>(mut w: W, trajs: &[Trajectory]) -> std::io::Result<()> {
    for t in trajs {
        w.write_all(t.to_json_line().as_bytes())?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn read_trajectory_log<R: BufRead>(r: R) -> Result<Vec<Trajectory>, CoreError> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line.map_err(|e| CoreError::InvalidTrajectory(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let t = Trajectory::from_json_line(&line).map_err(|e| {
            CoreError::InvalidTrajectory(format!("line {}: {e}", n + 1))
        })?;
        out.push(t);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::ContentHash;
    use proptest::prelude::*;

    fn img(x: f64) -> ImageRef {
        ImageRef::Synthetic { features: vec![x, 1.0 - x] }
    }

    fn one_step() -> Trajectory {
        Trajectory {
            initial_prompt: PromptText::user("a cat").unwrap(),
            steps: vec![TrajectoryStep {
                t: 0,
                prompt: PromptText::user("a cat").unwrap(),
                image: img(0.5),
                reward: 0.9,
                shaped_reward: None,
            }],
            termination: Termination::MaxIterations,
            final_image: img(0.5),
            seed: 7,
        }
    }

    #[test]
    fn single_step_record_is_one_line() {
        let line = one_step().to_json_line();
        assert!(!line.contains('\n'));
        assert!(line.contains("\"termination\":\"MaxIterations\""));
        for key in ["initial_prompt", "steps", "final_image", "seed", "shaped_reward", "\"t\""] {
            assert!(line.contains(key), "{key}");
        }
        assert_eq!(Trajectory::from_json_line(&line).unwrap(), one_step());
    }

    #[test]
    fn keep_record_final_hash_matches_previous_step() {
        let hash = ContentHash::of_bytes(b"png");
        let ext = ImageRef::External { uri: "cas://x".into(), hash };
        let mut t = one_step();
        t.steps[0].image = ext.clone();
        t.final_image = ext;
        t.termination = Termination::KeepAction { at_step: 1, shaped_reward: 0.3 };
        t.validate(Some(3)).unwrap();
        let v: serde_json::Value = serde_json::from_str(&t.to_json_line()).unwrap();
        assert_eq!(v["final_image"]["hash"], v["steps"][0]["image"]["hash"]);
        assert_eq!(v["final_image"]["hash"], hash.to_hex());
    }

    #[test]
    fn validate_catches_broken_invariants() {
        let mut t = one_step();
        t.final_image = img(0.1);
        assert!(t.validate(None).is_err());

        let mut t = one_step();
        t.termination = Termination::KeepAction { at_step: 2, shaped_reward: 0.3 };
        assert!(t.validate(None).is_err());

        let t = one_step();
        assert!(t.validate(Some(2)).is_err()); // max-iterations needs 3 images
        assert!(t.validate(Some(0)).is_ok());
    }

    prop_compose! {
        fn arb_traj()(
            rewards in prop::collection::vec(-2.0f64..2.0, 1..6),
            keep in any::<bool>(),
            bonus in 0.0f64..1.0,
            feats in prop::collection::vec(-1e3f64..1e3, 1..4),
            seed in any::<u64>(),
            external in any::<bool>(),
        ) -> Trajectory {
            let p0 = PromptText::user("p zero").unwrap();
            let steps: Vec<TrajectoryStep> = rewards.iter().enumerate().map(|(i, &r)| {
                let image = if external {
                    let h = ContentHash::of_bytes(&(i as u64).to_le_bytes());
                    ImageRef::External { uri: format!("cas://{h}"), hash: h }
                } else {
                    ImageRef::Synthetic { features: feats.iter().map(|f| f * (i as f64 + 1.0)).collect() }
                };
                TrajectoryStep {
                    t: i as u32,
                    prompt: if i == 0 { p0.clone() } else { PromptText::refined(format!("edit {i}")).unwrap() },
                    image,
                    reward: r,
                    shaped_reward: (i > 0).then(|| r - rewards[i - 1]),
                }
            }).collect();
            let final_image = steps.last().unwrap().image.clone();
            let termination = if keep {
                Termination::KeepAction { at_step: steps.len() as u32, shaped_reward: bonus }
            } else {
                Termination::MaxIterations
            };
            Trajectory { initial_prompt: p0, steps, termination, final_image, seed }
        }
    }

    proptest! {
        #[test]
        fn log_roundtrip_is_exact(trajs in prop::collection::vec(arb_traj(), 1..5)) {
            let mut buf = Vec::new();
            write_trajectory_log(&mut buf, &trajs).unwrap();
            let back = read_trajectory_log(&buf[..]).unwrap();
            prop_assert_eq!(&back, &trajs);
            let mut again = Vec::new();
            write_trajectory_log(&mut again, &back).unwrap();
            prop_assert_eq!(buf, again);
        }
    }
}
