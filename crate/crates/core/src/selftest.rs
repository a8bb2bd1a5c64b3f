//! Fast checks against analytically known results, run by `kcchain selftest`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::lls::{classify_lls, LlsCriterion};
use crate::profile::{sample_constraints, Boundary, ConstraintProfile, DefectSpec, EnsembleParams};
use crate::propagator::{return_probability, Method, PropagatorConfig, TimeGrid};
use crate::sector::{all_components, FockState, SparseHamiltonian, DEFAULT_MAX_DIM};
use crate::spectral::{diagonalize, poisson_levels, spacing_ratios, POISSON_MEAN_RATIO};
use crate::tli::{cost, lanczos_extend, tli_return};

#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn hamiltonian(p: &ConstraintProfile) -> Result<SparseHamiltonian> {
    SparseHamiltonian::from_profile(p, DEFAULT_MAX_DIM)
}

fn pxp_dimensions() -> Result<(bool, String)> {
    let d4 = hamiltonian(&ConstraintProfile::pxp(4, Boundary::Periodic)?)?.dim();
    let d6 = hamiltonian(&ConstraintProfile::pxp(6, Boundary::Periodic)?)?.dim();
    Ok((d4 == 7 && d6 == 18, format!("D(4) = {d4}, D(6) = {d6}")))
}

fn sector_vs_components() -> Result<(bool, String)> {
    let mut bad = 0;
    for k in 0..20u64 {
        let n = 6 + (k % 5) as usize;
        let mu = (0.1 + 0.1 * (k % 4) as f64) * n as f64;
        let p = sample_constraints(&EnsembleParams::new(n, mu), 1234, k)?;
        if hamiltonian(&p)?.dim() != all_components(&p, 20)?.root_size {
            bad += 1;
        }
    }
    Ok((bad == 0, format!("{bad} of 20 profiles disagree")))
}

fn free_spins() -> Result<(bool, String)> {
    let grid = TimeGrid::new(18.0, 0.05)?;
    let cfg = PropagatorConfig::default();
    let mut worst: f64 = 0.0;
    for n in [2, 4, 8] {
        let h = hamiltonian(&ConstraintProfile::uniform(n, 0, Boundary::Periodic)?)?;
        for method in [Method::Exact, Method::Krylov] {
            let s = return_probability(&h, FockState::FACILITATING, &grid, method, &cfg)?;
            for (k, l) in s.values.iter().enumerate() {
                worst = worst.max((l - grid.time(k).cos().powi(2 * n as i32)).abs());
            }
        }
    }
    Ok((worst < 1e-10, format!("max deviation {worst:.2e}")))
}

fn krylov_vs_exact() -> Result<(bool, String)> {
    let grid = TimeGrid::new(18.0, 0.05)?;
    let cfg = PropagatorConfig::default();
    let mut worst: f64 = 0.0;
    for k in 0..3 {
        let p = sample_constraints(&EnsembleParams::new(10, 2.0), 99, k)?;
        let h = hamiltonian(&p)?;
        let a = return_probability(&h, FockState::FACILITATING, &grid, Method::Exact, &cfg)?;
        let b = return_probability(&h, FockState::FACILITATING, &grid, Method::Krylov, &cfg)?;
        for (x, y) in a.values.iter().zip(&b.values) {
            worst = worst.max((x - y).abs());
        }
    }
    Ok((worst < 1e-8, format!("max deviation {worst:.2e}")))
}

fn reflection() -> Result<(bool, String)> {
    let h = hamiltonian(&ConstraintProfile::pxp(12, Boundary::Periodic)?)?;
    let d = diagonalize(&h, false, 4096)?.reflection_defect();
    Ok((d < 1e-9, format!("max |E_k + E_(D-1-k)| = {d:.2e}")))
}

fn scar_anchor() -> Result<(bool, String)> {
    let grid = TimeGrid::new(18.0, 0.05)?;
    let cfg = PropagatorConfig::default();
    let criterion = LlsCriterion::default();
    let pxp = ConstraintProfile::pxp(12, Boundary::Periodic)?;
    let defect = pxp.apply_defect(&DefectSpec::new(6, 2)?)?;
    let z2 = FockState::neel(12);
    let mut out = Vec::new();
    for p in [&pxp, &defect] {
        let h = hamiltonian(p)?;
        let s = return_probability(&h, z2, &grid, Method::Auto, &cfg)?;
        out.push(classify_lls(z2, &s, &criterion));
    }
    Ok((
        out[0].qualifies && !out[1].qualifies,
        format!("crossings: PXP {}, defect {}", out[0].crossings, out[1].crossings),
    ))
}

fn lanczos_breakdown() -> Result<(bool, String)> {
    let grid = TimeGrid::new(18.0, 0.05)?;
    let h = hamiltonian(&ConstraintProfile::uniform(6, 0, Boundary::Periodic)?)?;
    let basis = lanczos_extend(&h, FockState::FACILITATING, h.dim())?;
    let exact = return_probability(
        &h,
        FockState::FACILITATING,
        &grid,
        Method::Exact,
        &PropagatorConfig::default(),
    )?;
    let c = cost(&exact, &tli_return(&basis, basis.order(), &grid))?;
    let dim = basis.krylov_dim();
    Ok((
        dim == Some(7) && c < 1e-8,
        format!("Krylov dimension {dim:?}, cost {c:.2e}"),
    ))
}

fn poisson_ratio() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let levels = poisson_levels(200_000, &mut rng);
    let r = spacing_ratios(&levels, 0.0, None)?.mean;
    Ok(((r - POISSON_MEAN_RATIO).abs() < 0.01, format!("<r> = {r:.4}")))
}

pub fn run_selftest() -> Vec<Check> {
    let checks: [(&'static str, fn() -> Result<(bool, String)>); 8] = [
        ("pxp sector dimensions", pxp_dimensions),
        ("sector matches exhaustive components", sector_vs_components),
        ("free spins follow cos^2N", free_spins),
        ("krylov matches exact evolution", krylov_vs_exact),
        ("spectrum is reflection symmetric", reflection),
        ("Z2 state is long-lived, defect destroys it", scar_anchor),
        ("lanczos breakdown reproduces evolution", lanczos_breakdown),
        ("poisson spacing ratio", poisson_ratio),
    ];
    checks
        .iter()
        .map(|&(name, f)| match f() {
            Ok((passed, detail)) => Check { name, passed, detail },
            Err(e) => Check {
                name,
                passed: false,
                detail: e.to_string(),
            },
        })
        .collect()
}
