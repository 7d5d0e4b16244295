//! Bundled test scenarios.
//!
//! The published boundary mixtures are only shown as pictures, so these parameters are
//! our own choices. They follow the published systems and the qualitative setup.

use crate::chance::{Budget, ChanceSpec, HalfSpace, KnotWindow, Obstacle, Route};
use crate::dynamics::{LtvSystem, TimeGrid};
use crate::error::Result;
use crate::gaussmix::{Gaussian, GaussianMixture};
use crate::linalg::{Mat, Vector};
use crate::meanfield::{problem1_system, problem2_system, Scenario};

/// Passage widths of the obstacle fixture, widest first.
pub const PASSAGE_WIDTHS: [f64; 3] = [2.0, 1.6, 1.2];

/// Per-wall violation probability of the obstacle fixture.
pub const PER_WALL_BUDGET: f64 = 0.003;

/// Separation scales of the tightness study.
pub const SEPARATION_SCALES: [f64; 4] = [1.0, 2.0, 4.0, 8.0];

fn gaussian(mean: &[f64], var: &[f64]) -> Result<Gaussian> {
    Gaussian::new(Vector::from_row_slice(mean), Mat::from_diagonal(&Vector::from_row_slice(var)))
}

/// Three initial components to two terminal components on A = Ā = B = D = I₂.
pub fn problem1_like(knots: usize) -> Result<Scenario> {
    let rho0 = GaussianMixture::new(
        vec![0.3, 0.3, 0.4],
        vec![
            gaussian(&[-4.0, -3.0], &[0.3, 0.3])?,
            gaussian(&[-4.0, 0.0], &[0.3, 0.3])?,
            gaussian(&[-4.0, 3.0], &[0.3, 0.3])?,
        ],
    )?;
    let rho1 = GaussianMixture::new(
        vec![0.5, 0.5],
        vec![gaussian(&[4.0, -2.0], &[0.4, 0.4])?, gaussian(&[4.0, 2.0], &[0.4, 0.4])?],
    )?;
    Scenario::new(problem1_system(knots)?, TimeGrid::uniform(knots)?, rho0, rho1)
}

/// Axis-aligned box in the position plane, `px ∈ [x0, x1]`, `py ∈ [y0, y1]`, as faces in
/// the order left, right, bottom, top. Infinite bounds drop the face.
fn wall(x0: f64, x1: f64, y0: f64, y1: f64, window: KnotWindow) -> Result<Obstacle> {
    let face = |a: [f64; 4], b: f64| HalfSpace::new(Vector::from_row_slice(&a), b, window);
    let mut faces = vec![face([1.0, 0.0, 0.0, 0.0], x0)?, face([-1.0, 0.0, 0.0, 0.0], -x1)?];
    if y0.is_finite() {
        faces.push(face([0.0, 1.0, 0.0, 0.0], y0)?);
    }
    if y1.is_finite() {
        faces.push(face([0.0, -1.0, 0.0, 0.0], -y1)?);
    }
    Obstacle::new(faces)
}

/// Double-integrator swarm crossing a barrier either through a slit of the given width
/// around py = 0 or through the wider gap above the middle block.
pub fn problem2_like(width: f64, knots: usize) -> Result<Scenario> {
    let window = KnotWindow::new(0.3, 0.7)?;
    let (x0, x1) = (-1.0, 1.0);
    let obstacles = vec![
        // Free side of the lower wall is its top face (index 2).
        wall(x0, x1, f64::NEG_INFINITY, -width / 2.0, window)?,
        // Middle block: bottom face 2, top face 3.
        wall(x0, x1, width / 2.0, 3.0, window)?,
        // Upper wall: bottom face 2.
        wall(x0, x1, 5.0, f64::INFINITY, window)?,
    ];
    let routes = vec![
        Route {
            name: "passage".into(),
            face_choice: vec![2, 2, 2],
        },
        Route {
            name: "around".into(),
            face_choice: vec![2, 3, 2],
        },
    ];
    let v = [0.05, 0.05, 0.05, 0.05];
    let rho0 = GaussianMixture::new(
        vec![0.5, 0.5],
        vec![gaussian(&[-4.0, 0.0, 0.0, 0.0], &v)?, gaussian(&[-4.0, 4.0, 0.0, 0.0], &v)?],
    )?;
    let rho1 = GaussianMixture::new(
        vec![0.5, 0.5],
        vec![gaussian(&[4.0, 0.0, 0.0, 0.0], &v)?, gaussian(&[4.0, 4.0, 0.0, 0.0], &v)?],
    )?;
    let scn = Scenario {
        sys: problem2_system(knots)?,
        grid: TimeGrid::uniform(knots)?,
        rho0,
        rho1,
        obstacles,
        routes,
        chance: Some(ChanceSpec {
            budget: Budget::PerFace(PER_WALL_BUDGET),
            window,
        }),
    };
    scn.validate()?;
    Ok(scn)
}

/// Two parallel component pairs whose separation grows with `scale`.
pub fn separation(scale: f64, knots: usize) -> Result<Scenario> {
    let eye = Mat::identity(2, 2);
    let sys = LtvSystem::constant(Mat::zeros(2, 2), Mat::zeros(2, 2), eye.clone(), eye * 0.5, knots)?;
    let v = [0.5, 0.5];
    let rho0 = GaussianMixture::new(
        vec![0.5, 0.5],
        vec![gaussian(&[0.0, -0.5 * scale], &v)?, gaussian(&[0.0, 0.5 * scale], &v)?],
    )?;
    let rho1 = GaussianMixture::new(
        vec![0.5, 0.5],
        vec![gaussian(&[2.0 * scale, -0.5 * scale], &v)?, gaussian(&[2.0 * scale, 0.5 * scale], &v)?],
    )?;
    Scenario::new(sys, TimeGrid::uniform(knots)?, rho0, rho1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario_io::{parse_scenario, write_scenario};
    use std::path::PathBuf;

    fn bundled() -> Vec<(&'static str, Scenario)> {
        let mut out = vec![("problem1_like.json", problem1_like(101).unwrap())];
        for (name, w) in ["problem2_like_wide.json", "problem2_like_medium.json", "problem2_like_narrow.json"]
            .into_iter()
            .zip(PASSAGE_WIDTHS)
        {
            out.push((name, problem2_like(w, 51).unwrap()));
        }
        out.push(("separation.json", separation(1.0, 101).unwrap()));
        out
    }

    /// The JSON files under `scenarios/` describe the same problems as the constructors.
    /// Set `MFSB_REGENERATE=1` to rewrite them.
    #[test]
    fn bundled_files_match_constructors() {
        let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios");
        for (name, scn) in bundled() {
            let path = dir.join(name);
            if std::env::var_os("MFSB_REGENERATE").is_some() {
                write_scenario(&scn, &path).unwrap();
            }
            let parsed = parse_scenario(&path, None).unwrap();
            assert_eq!(parsed.grid.len(), scn.grid.len(), "{name}");
            assert_eq!(parsed.routes, scn.routes, "{name}");
            // Windows round-trip through knot indices, so compare the knots they select.
            let faces = |s: &Scenario| -> Vec<(Vec<f64>, f64, Vec<usize>)> {
                s.obstacles
                    .iter()
                    .flat_map(|o| o.faces())
                    .map(|h| (h.normal().as_slice().to_vec(), h.offset(), h.window().knots(&s.grid).collect()))
                    .collect()
            };
            assert_eq!(faces(&parsed), faces(&scn), "{name}");
            assert_eq!(parsed.rho0, scn.rho0, "{name}");
            assert_eq!(parsed.rho1, scn.rho1, "{name}");
            for k in [0, scn.grid.last()] {
                assert_eq!(parsed.sys.a(k), scn.sys.a(k));
                assert_eq!(parsed.sys.abar(k), scn.sys.abar(k));
            }
        }
    }

    #[test]
    fn routes_pick_the_expected_free_sides() {
        let scn = problem2_like(PASSAGE_WIDTHS[0], 51).unwrap();
        let inside_slit = Vector::from_row_slice(&[0.0, 0.0, 0.0, 0.0]);
        let inside_gap = Vector::from_row_slice(&[0.0, 4.0, 0.0, 0.0]);
        let window = scn.chance.unwrap().window;
        let through = scn.routes[0].halfspaces(&scn.obstacles, window).unwrap();
        let around = scn.routes[1].halfspaces(&scn.obstacles, window).unwrap();
        assert!(through.iter().all(|h| h.satisfied_by(&inside_slit)));
        assert!(around.iter().all(|h| h.satisfied_by(&inside_gap)));
        assert!(!around.iter().all(|h| h.satisfied_by(&inside_slit)));
        assert!(scn.obstacles.iter().all(|o| !o.contains(&inside_slit) && !o.contains(&inside_gap)));
        assert!(scn.obstacles[1].contains(&Vector::from_row_slice(&[0.0, 2.0, 0.0, 0.0])));
    }
}
