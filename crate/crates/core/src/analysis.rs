//! Rotated-Q probing of trained critics, and CSV/JSON export of curves and probes.

use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::OfflineDataset;
use crate::equivariant::Critic;
use crate::error::{Error, Result};
use crate::group::PlaneRotation;
use crate::trainer::RunRecord;

/// Fixed-point decimal with nine significant digits.
pub fn fmt_sig(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { "0.00000000".into() } else { format!("{x}") };
    }
    let mag = x.abs().log10().floor() as i32;
    let decimals = (8 - mag).max(0) as usize;
    format!("{x:.decimals$}")
}

/// Rotation angles of a probe; index 0 is always the identity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AngleGrid {
    /// `2πk/n`, `k = 0..n`; multiples of 90° are exact pixel permutations when `4 | n`.
    Uniform,
    /// Zero followed by `n − 1` sorted uniform draws.
    Random { seed: u64 },
}

impl AngleGrid {
    pub fn rotations(self, n: usize) -> Result<Vec<(f64, PlaneRotation)>> {
        if n == 0 {
            return Err(Error::Domain("need at least one probe angle".into()));
        }
        Ok(match self {
            AngleGrid::Uniform => (0..n)
                .map(|k| (TAU * k as f64 / n as f64, PlaneRotation::from_fraction(k, n)))
                .collect(),
            AngleGrid::Random { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut a: Vec<f64> = (1..n).map(|_| rng.random_range(0.0..TAU)).collect();
                a.sort_by(f64::total_cmp);
                std::iter::once(0.0)
                    .chain(a)
                    .map(|x| (x, PlaneRotation::from_angle(x)))
                    .collect()
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QProbeResult {
    pub critic_tag: String,
    pub pairs: usize,
    pub angles: Vec<f64>,
    /// Per-angle mean and population std of `Q̄(φ·s, φ·a) − Q̄(s, a)`.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl QProbeResult {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("angle,mean,std\n");
        for i in 0..self.angles.len() {
            s.push_str(&format!(
                "{},{},{}\n",
                fmt_sig(self.angles[i]),
                fmt_sig(self.mean[i]),
                fmt_sig(self.std[i])
            ));
        }
        s
    }

    pub fn max_std(&self) -> f64 {
        self.std.iter().copied().fold(0.0, f64::max)
    }

    /// Largest `std` and `|mean|` over angles within `1e-9` of a multiple of 90°.
    pub fn quarter_turn_extremes(&self) -> (f64, f64) {
        let q = std::f64::consts::FRAC_PI_2;
        let mut out = (0.0f64, 0.0f64);
        for (i, a) in self.angles.iter().enumerate() {
            let r = a / q;
            if (r - r.round()).abs() < 1e-9 {
                out.0 = out.0.max(self.std[i]);
                out.1 = out.1.max(self.mean[i].abs());
            }
        }
        out
    }
}

/// Average of both heads at every dataset pair, rotated by every angle, minus
/// the unrotated average; aggregated per angle.
pub fn q_rotation_probe(
    critic: &Critic<f32>,
    data: &OfflineDataset,
    n_angles: usize,
    grid: AngleGrid,
    tag: &str,
) -> Result<QProbeResult> {
    if data.is_empty() {
        return Err(Error::Precondition("probe needs a non-empty dataset".into()));
    }
    let rots = grid.rotations(n_angles)?;
    let idx: Vec<usize> = (0..data.len()).collect();
    let base = data.gather(&idx);
    let avg = |b: &crate::dataset::Batch| -> Result<Vec<f64>> {
        let q = critic.evaluate(&b.states, &b.normalized_actions())?;
        Ok(q.rows().into_iter().map(|r| (r[0] as f64 + r[1] as f64) / 2.0).collect())
    };
    let q0 = avg(&base)?;
    let (mut angles, mut mean, mut std) = (Vec::new(), Vec::new(), Vec::new());
    for (phi, rot) in rots {
        let b = base.clone().rotated(&vec![rot; base.len()]);
        let d: Vec<f64> = avg(&b)?.iter().zip(&q0).map(|(x, y)| x - y).collect();
        let n = d.len() as f64;
        let m = d.iter().sum::<f64>() / n;
        let v = d.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
        angles.push(phi);
        mean.push(m);
        std.push(v.sqrt());
    }
    Ok(QProbeResult {
        critic_tag: tag.into(),
        pairs: data.len(),
        angles,
        mean,
        std,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CurveEntry {
    pub label: String,
    pub seed: u64,
    pub file: PathBuf,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProbeEntry {
    pub critic_tag: String,
    pub file: PathBuf,
}

/// `index.json`: every file written by [`export_report`], relative to its directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportIndex {
    pub curves: Vec<CurveEntry>,
    pub probes: Vec<ProbeEntry>,
}

fn slug(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect()
}

/// One CSV per curve and probe plus `index.json` in `dir`.
pub fn export_report(records: &[RunRecord], probes: &[QProbeResult], dir: &Path) -> Result<ReportIndex> {
    std::fs::create_dir_all(dir)?;
    let mut index = ReportIndex::default();
    for (i, r) in records.iter().enumerate() {
        let file = PathBuf::from(format!("curve_{i:03}_{}_seed{}.csv", slug(&r.label), r.seed));
        std::fs::write(dir.join(&file), r.curve_csv())?;
        index.curves.push(CurveEntry {
            label: r.label.clone(),
            seed: r.seed,
            file,
        });
    }
    for (i, p) in probes.iter().enumerate() {
        let file = PathBuf::from(format!("probe_{i:03}_{}.csv", slug(&p.critic_tag)));
        std::fs::write(dir.join(&file), p.to_csv())?;
        index.probes.push(ProbeEntry {
            critic_tag: p.critic_tag.clone(),
            file,
        });
    }
    std::fs::write(dir.join("index.json"), serde_json::to_string_pretty(&index)?)?;
    Ok(index)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nine_significant_digits() {
        assert_eq!(fmt_sig(0.0), "0.00000000");
        assert_eq!(fmt_sig(1.0), "1.00000000");
        assert_eq!(fmt_sig(-0.0123456789012), "-0.0123456789");
        assert_eq!(fmt_sig(123456.789012), "123456.789");
        assert_eq!(fmt_sig(3e12), "3000000000000");
    }

    #[test]
    fn uniform_grid_hits_exact_quarter_turns() {
        let r = AngleGrid::Uniform.rotations(128).unwrap();
        assert_eq!(r[0].1, PlaneRotation::Quarter(0));
        assert_eq!(r[32].1, PlaneRotation::Quarter(1));
        assert_eq!(r[96].1, PlaneRotation::Quarter(3));
        let rnd = AngleGrid::Random { seed: 1 }.rotations(16).unwrap();
        assert_eq!(rnd[0].0, 0.0);
        assert!(rnd.windows(2).all(|w| w[0].0 <= w[1].0));
    }
}
